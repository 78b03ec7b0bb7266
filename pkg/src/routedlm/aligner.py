"""Text-to-computation alignment: read expert input vectors out of hidden states.

Each expert gets a slot-readout head: one learned query per input feature,
cross-attending (multi-head, with a positional score bias) over the frozen
backbone's per-position hidden states, followed by a linear scalar head per
slot. Training minimizes MSE against the embedded feature values, optionally
plus an in-batch contrastive term over cosine similarities.

A character probe over the same states supports a precision refinement at
inference: probe-decoded digit spans are parsed exactly and matched to slots
by attention position, with the soft readout as sanity gate and fallback.
The refinement closes the gap between a regression readout and the exact
values the routed pipeline needs to insert.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment

from .autodiff import Tensor, cosine_sim_matrix, log_softmax, softmax
from .backbone import MASK_VALUE, OpCounter, TransformerLM
from .checkpoint import arrays_to_params, load_checkpoint, params_hash, save_checkpoint
from .datagen import NormStats
from .optim import AdamState, Parameter, adam_step, cosine_lr, zero_grads
from .templates import TaskText
from .tokenizer import BOS, CANONICAL_NUMBER_RE, Vocabulary

PROBE_CLASSES = list("0123456789.- ") + ["other"]
PROBE_OTHER = len(PROBE_CLASSES) - 1


# -- Stage-2 objectives -------------------------------------------------------


def text2comp_mse(xhat, x):
    """Mean over the batch of squared Euclidean distance (alignment objective)."""
    if isinstance(xhat, Tensor):
        n = xhat.shape[0]
        if n == 0:
            raise ValueError("empty batch")
        diff = xhat - (x if isinstance(x, Tensor) else Tensor(x))
        return (diff * diff).reshape(n, -1).sum(axis=1).mean()
    xhat = np.asarray(xhat, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    if xhat.shape[0] == 0:
        raise ValueError("empty batch")
    diff = (xhat - x).reshape(xhat.shape[0], -1)
    return float((diff * diff).sum(axis=1).mean())


def contrastive_loss(xhat, x, tau: float):
    """In-batch InfoNCE, one direction, positives on the diagonal, summed over rows.

    Similarity is cosine in the normalized expert-input space.
    """
    if tau <= 0:
        raise ValueError("temperature must be positive")
    as_tensor = isinstance(xhat, Tensor)
    xh = xhat if as_tensor else Tensor(np.atleast_2d(np.asarray(xhat, dtype=np.float64)))
    xt = x if isinstance(x, Tensor) else Tensor(np.atleast_2d(np.asarray(x, dtype=np.float64)))
    sim = cosine_sim_matrix(xh, xt) * (1.0 / tau)
    logp = log_softmax(sim, axis=1)
    n = logp.shape[0]
    picked = logp[(np.arange(n), np.arange(n))]
    loss = -picked.sum()
    return loss if as_tensor else float(loss.data)


@dataclass
class Stage2Config:
    lam: float = 0.1
    tau: float = 0.07
    contrastive: bool = True
    heads: int = 10
    epochs: int = 200
    batch_size: int = 32
    lr: float = 3e-3
    probe_epochs: int = 80
    probe_lr: float = 1e-2
    refine: bool = True
    refine_gate: float = 0.5  # mean squared z-gap allowed between parse and soft readout
    max_pos: int = 512
    log_every: int = 0

    def __post_init__(self):
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        if self.lam < 0:
            raise ValueError("lambda must be nonnegative")


def stage2_loss(xhat, x, config: Stage2Config):
    """Alignment MSE plus lambda-weighted contrastive term (when enabled)."""
    mse = text2comp_mse(xhat, x)
    if not config.contrastive or config.lam == 0.0:
        return mse
    return mse + config.lam * contrastive_loss(xhat, x, config.tau)


# -- model ---------------------------------------------------------------------


class AlignerHead:
    """Slot readout for one expert: queries, per-head value readouts, position bias."""

    def __init__(self, expert_id: str, slots: int, dim: int, config: Stage2Config,
                 stats: NormStats, seed: int = 0,
                 params: dict[str, Parameter] | None = None):
        self.expert_id = expert_id
        self.slots = slots
        self.dim = dim
        self.heads = config.heads
        self.max_pos = config.max_pos
        self.stats = stats
        if params is not None:
            self.params = params
            return
        rng = np.random.default_rng(seed)
        K, H, d = slots, config.heads, dim
        self.params = {
            "queries": Parameter(rng.normal(0.0, 0.2, size=(K, H, d)), "queries"),
            "values": Parameter(rng.normal(0.0, 0.02, size=(K, H, d)), "values"),
            "pos_bias": Parameter(np.zeros((K, H, config.max_pos)), "pos_bias"),
            "bias": Parameter(np.zeros(K), "bias"),
        }

    def soft_extract_batch(self, states: np.ndarray, key_mask: np.ndarray) -> Tensor:
        """states (B,T,d), key_mask (B,T) -> normalized slot estimates (B,K)."""
        B, T, d = states.shape
        p = self.params
        scale = 1.0 / np.sqrt(d)
        s = Tensor(states)
        q = p["queries"].reshape(self.slots * self.heads, d)
        scores = (s @ q.transpose(1, 0)).transpose(0, 2, 1) * scale  # (B,KH,T)
        scores = scores.reshape(B, self.slots, self.heads, T)
        scores = scores + p["pos_bias"][:, :, :T]
        scores = scores + Tensor((1.0 - key_mask)[:, None, None, :] * MASK_VALUE)
        attn = softmax(scores, axis=-1)
        # (B,K*H,T) @ (B,T,d) -> per-slot-per-head attended state
        ctx = attn.reshape(B, self.slots * self.heads, T) @ s
        ctx = ctx.reshape(B, self.slots, self.heads, d)
        out = (ctx * p["values"]).sum(axis=(2, 3)) + p["bias"]
        return out

    def soft_extract_np(self, states: np.ndarray, counter: OpCounter | None = None
                        ) -> tuple[np.ndarray, np.ndarray]:
        """Single text: returns (xhat (K,), attention position centers (K,))."""
        T, d = states.shape
        p = self.params
        scale = 1.0 / np.sqrt(d)
        K, H = self.slots, self.heads
        if counter:
            counter.add(2 * K * H * T * d)
        scores = (states @ p["queries"].data.reshape(K * H, d).T).T.reshape(K, H, T) * scale
        scores = scores + p["pos_bias"].data[:, :, :T]
        scores -= scores.max(axis=-1, keepdims=True)
        e = np.exp(scores)
        attn = e / e.sum(axis=-1, keepdims=True)
        ctx = attn.reshape(K * H, T) @ states
        out = (ctx.reshape(K, H, d) * p["values"].data).sum(axis=(1, 2)) + p["bias"].data
        centers = (attn.mean(axis=1) * np.arange(T)).sum(axis=1)
        return out, centers


class AlignerModel:
    """Per-expert slot-readout heads plus a shared character probe."""

    def __init__(self, dim: int, config: Stage2Config, backbone_hash: str = ""):
        self.dim = dim
        self.config = config
        self.backbone_hash = backbone_hash
        self.heads: dict[str, AlignerHead] = {}
        rng = np.random.default_rng(1234)
        self.probe = {
            "wp": Parameter(rng.normal(0.0, 0.02, size=(dim, len(PROBE_CLASSES))), "wp"),
            "bp": Parameter(np.zeros(len(PROBE_CLASSES)), "bp"),
        }
        self.frozen = False

    # -- extraction -------------------------------------------------------

    def probe_classes(self, states: np.ndarray, counter: OpCounter | None = None
                      ) -> np.ndarray:
        if counter:
            counter.add(states.shape[0] * self.dim * len(PROBE_CLASSES))
        logits = states @ self.probe["wp"].data + self.probe["bp"].data
        return logits.argmax(axis=-1)

    def extract_inputs(self, states: np.ndarray, expert_id: str,
                       counter: OpCounter | None = None) -> np.ndarray:
        """Normalized expert-input estimate from the current sequence's states."""
        xhat, _ = self.extract_inputs_detailed(states, expert_id, counter=counter)
        return xhat

    def extract_inputs_detailed(self, states: np.ndarray, expert_id: str,
                                counter: OpCounter | None = None
                                ) -> tuple[np.ndarray, dict]:
        if expert_id not in self.heads:
            raise KeyError(f"no trained aligner head for expert {expert_id!r}")
        head = self.heads[expert_id]
        soft, centers = head.soft_extract_np(states, counter=counter)
        detail = {"refined": False, "soft": soft}
        if not self.config.refine:
            return soft, detail
        parsed = self._parse_numbers(states, counter=counter)
        if len(parsed) != head.slots:
            return soft, detail
        values = np.array([v for v, _ in parsed])
        span_centers = np.array([c for _, c in parsed])
        cost = np.abs(centers[:, None] - span_centers[None, :])
        rows, cols = linear_sum_assignment(cost)
        z = head.stats.normalize_x(values[cols[np.argsort(rows)]])
        gap = float(np.mean((z - soft) ** 2))
        if gap > self.config.refine_gate:
            return soft, detail
        detail.update(refined=True, gap=gap)
        return np.asarray(z), detail

    def _parse_numbers(self, states: np.ndarray,
                       counter: OpCounter | None = None) -> list[tuple[float, float]]:
        """Probe-decode number spans: list of (value, token position center)."""
        classes = self.probe_classes(states, counter=counter)
        chars = [PROBE_CLASSES[c] if c != PROBE_OTHER else "\x00" for c in classes]
        out: list[tuple[float, float]] = []
        i, n = 0, len(chars)
        numeric = set("0123456789.-")
        while i < n:
            if chars[i] in numeric:
                j = i
                while j < n and chars[j] in numeric:
                    j += 1
                run = "".join(chars[i:j])
                m = CANONICAL_NUMBER_RE.fullmatch(run)
                if m:
                    out.append((float(run), (i + j - 1) / 2.0))
                i = j
            else:
                i += 1
        return out

    # -- persistence ---------------------------------------------------------

    def all_params(self) -> dict[str, Parameter]:
        flat: dict[str, Parameter] = {}
        for eid, head in self.heads.items():
            for name, p in head.params.items():
                flat[f"head.{eid}.{name}"] = p
        for name, p in self.probe.items():
            flat[f"probe.{name}"] = p
        return flat

    def content_hash(self) -> str:
        return params_hash(self.all_params())

    def freeze(self) -> "AlignerModel":
        for p in self.all_params().values():
            p.freeze()
        self.frozen = True
        return self

    def save(self, stem) -> dict:
        cfg = {
            "dim": self.dim,
            "heads": self.config.heads,
            "max_pos": self.config.max_pos,
            "lam": self.config.lam,
            "tau": self.config.tau,
            "contrastive": self.config.contrastive,
            "refine": self.config.refine,
            "refine_gate": self.config.refine_gate,
            "experts": {eid: {"slots": h.slots, "stats": h.stats.to_dict()}
                        for eid, h in self.heads.items()},
        }
        return save_checkpoint(stem, "aligner", cfg, self.all_params(),
                               extra={"backbone_hash": self.backbone_hash})

    @classmethod
    def load(cls, stem) -> "AlignerModel":
        manifest, arrays = load_checkpoint(stem, expected_kind="aligner")
        cfg = manifest["config"]
        config = Stage2Config(lam=cfg["lam"], tau=cfg["tau"],
                              contrastive=cfg["contrastive"], heads=cfg["heads"],
                              refine=cfg["refine"], refine_gate=cfg["refine_gate"],
                              max_pos=cfg["max_pos"])
        model = cls(cfg["dim"], config, backbone_hash=manifest["extra"]["backbone_hash"])
        params = arrays_to_params(arrays, trainable=False)
        model.probe = {"wp": params["probe.wp"], "bp": params["probe.bp"]}
        for eid, info in cfg["experts"].items():
            head_params = {n.split(".", 2)[2]: p for n, p in params.items()
                           if n.startswith(f"head.{eid}.")}
            model.heads[eid] = AlignerHead(eid, info["slots"], cfg["dim"], config,
                                           NormStats.from_dict(info["stats"]),
                                           params=head_params)
        model.freeze()
        return model


# -- training -------------------------------------------------------------------


def prompt_ids(text: TaskText, vocab: Vocabulary) -> list[int]:
    return [BOS] + vocab.encode(text.prompt)


def cache_prompt_states(backbone: TransformerLM, vocab: Vocabulary,
                        texts: list[TaskText], batch_size: int = 16
                        ) -> tuple[np.ndarray, np.ndarray]:
    """Frozen-backbone states for each text's prompt, padded to a common length."""
    seqs = [prompt_ids(t, vocab) for t in texts]
    T = max(len(s) for s in seqs)
    ids = np.zeros((len(seqs), T), dtype=np.int64)
    mask = np.zeros((len(seqs), T))
    for i, s in enumerate(seqs):
        ids[i, :len(s)] = s
        mask[i, :len(s)] = 1.0
    states = np.empty((len(seqs), T, backbone.config.dim))
    for i in range(0, len(seqs), batch_size):
        states[i:i + batch_size] = backbone.hidden_batch(ids[i:i + batch_size],
                                                         mask[i:i + batch_size])
    return states, mask


def _probe_labels(texts: list[TaskText], vocab: Vocabulary, T: int) -> np.ndarray:
    labels = np.full((len(texts), T), -1, dtype=np.int64)
    lut = {c: i for i, c in enumerate(PROBE_CLASSES)}
    for i, t in enumerate(texts):
        seq = prompt_ids(t, vocab)
        for j, tok in enumerate(seq):
            s = vocab.token_string(tok)
            labels[i, j] = lut.get(s, PROBE_OTHER)
    return labels


def train_probe(model: AlignerModel, states: np.ndarray, mask: np.ndarray,
                labels: np.ndarray, config: Stage2Config, seed: int = 0) -> float:
    """Fit the character probe; returns training accuracy.

    A closed-form ridge solve to one-hot targets initializes the weights, then
    a short logistic polish sharpens the decision boundaries.
    """
    flat = mask.reshape(-1) > 0
    X = states.reshape(-1, states.shape[-1])[flat]
    y = labels.reshape(-1)[flat]
    C = len(PROBE_CLASSES)
    onehot = np.eye(C)[y]
    Xb = np.concatenate([X, np.ones((len(X), 1))], axis=1)
    W = np.linalg.solve(Xb.T @ Xb + 1e-6 * np.eye(Xb.shape[1]), Xb.T @ onehot)
    model.probe["wp"].data[:] = W[:-1] * 4.0  # sharpen the ridge solution
    model.probe["bp"].data[:] = W[-1] * 4.0
    params = [model.probe["wp"], model.probe["bp"]]
    opt = AdamState(params, lr=config.probe_lr)
    n = X.shape[0]
    rng = np.random.default_rng(seed)
    batch = 16384
    step = 0
    total_steps = config.probe_epochs * ((n + batch - 1) // batch)
    for _ in range(config.probe_epochs):
        order = rng.permutation(n)
        for i in range(0, n, batch):
            idx = order[i:i + batch]
            zero_grads(params)
            logits = Tensor(X[idx]) @ model.probe["wp"] + model.probe["bp"]
            logp = log_softmax(logits, axis=-1)
            loss = -(logp[(np.arange(len(idx)), y[idx])]).mean()
            loss.backward()
            adam_step(opt, lr=cosine_lr(config.probe_lr, step, total_steps))
            step += 1
    pred = (X @ model.probe["wp"].data + model.probe["bp"].data).argmax(axis=-1)
    return float((pred == y).mean())


def train_head(model: AlignerModel, expert_id: str, slots: int, stats: NormStats,
               states: np.ndarray, mask: np.ndarray, targets: np.ndarray,
               config: Stage2Config, seed: int = 0,
               val: tuple | None = None) -> dict:
    """Train one expert's slot-readout head on cached prompt states.

    targets are z-scored feature vectors (N,K). Returns a report with the
    training curve and held-out extraction MSE when `val` is given.
    """
    head = AlignerHead(expert_id, slots, model.dim, config, stats, seed=seed)
    model.heads[expert_id] = head
    params = list(head.params.values())
    opt = AdamState(params, lr=config.lr)
    n = states.shape[0]
    rng = np.random.default_rng(seed + 7)
    steps_per_epoch = (n + config.batch_size - 1) // config.batch_size
    total_steps = config.epochs * steps_per_epoch
    step = 0
    history = []
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        epoch_loss = 0.0
        for i in range(0, n, config.batch_size):
            idx = order[i:i + config.batch_size]
            zero_grads(params)
            xhat = head.soft_extract_batch(states[idx], mask[idx])
            loss = stage2_loss(xhat, Tensor(targets[idx]), config)
            value = float(loss.data)
            if not np.isfinite(value):
                raise RuntimeError(f"aligner training diverged at epoch {epoch}")
            loss.backward()
            adam_step(opt, lr=cosine_lr(config.lr, step, total_steps))
            step += 1
            epoch_loss += value * len(idx)
        history.append(epoch_loss / n)
        if config.log_every and (epoch + 1) % config.log_every == 0:
            print(f"  aligner[{expert_id}] epoch {epoch + 1}/{config.epochs} "
                  f"loss {history[-1]:.4e}", flush=True)
    report = {"train_curve": history, "train_loss": history[-1]}
    if val is not None:
        vs, vm, vt = val
        report["val_extraction_mse"] = extraction_mse(head, vs, vm, vt)
    return report


def extraction_mse(head: AlignerHead, states: np.ndarray, mask: np.ndarray,
                   targets: np.ndarray) -> float:
    """Soft-readout normalized MSE against embedded feature values."""
    preds = []
    for i in range(states.shape[0]):
        T = int(mask[i].sum())
        xhat, _ = head.soft_extract_np(states[i, :T])
        preds.append(xhat)
    return text2comp_mse(np.array(preds), targets)
