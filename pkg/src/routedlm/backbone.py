"""Tiny causal transformer: next-token training, hidden-state exposure, decoding.

Two forward implementations share the same weights: a Tensor-graph path used
only for training, and a plain-numpy path (full, batched, or incremental with
a KV cache) used everywhere the model is frozen. Hidden states are the
post-final-layernorm vectors that feed the output head.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, gelu, log_softmax, softmax
from .optim import AdamState, Parameter, adam_step, cosine_lr, zero_grads
from .tokenizer import BOS, EOS, PAD, Vocabulary

LN_EPS = 1e-5
MASK_VALUE = -1e9


@dataclass
class LmConfig:
    vocab_size: int
    layers: int = 4
    heads: int = 4
    dim: int = 128
    context: int = 512
    ff_mult: int = 4

    def __post_init__(self):
        if self.dim % self.heads != 0:
            raise ValueError(f"dim {self.dim} not divisible by heads {self.heads}")

    @property
    def head_dim(self) -> int:
        return self.dim // self.heads

    @property
    def ff_dim(self) -> int:
        return self.dim * self.ff_mult

    def to_dict(self) -> dict:
        return {"vocab_size": self.vocab_size, "layers": self.layers,
                "heads": self.heads, "dim": self.dim, "context": self.context,
                "ff_mult": self.ff_mult}


class OpCounter:
    """Deterministic multiply-accumulate tally for the op-count proxy."""

    def __init__(self):
        self.macs = 0

    def add(self, n: int) -> None:
        self.macs += int(n)


def _ln_np(x: np.ndarray, g: np.ndarray, b: np.ndarray) -> np.ndarray:
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    return xc / np.sqrt(var + LN_EPS) * g + b


def _gelu_np(x: np.ndarray) -> np.ndarray:
    c = np.sqrt(2.0 / np.pi)
    return x * 0.5 * (np.tanh((x + 0.044715 * x * x * x) * c) + 1.0)


def _layernorm_t(x: Tensor, g: Parameter, b: Parameter) -> Tensor:
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    return xc / (var + LN_EPS).sqrt() * g + b


class TransformerLM:
    """Pre-norm causal transformer with learned positional embeddings."""

    def __init__(self, config: LmConfig, seed: int = 0,
                 params: dict[str, Parameter] | None = None):
        self.config = config
        if params is not None:
            self.params = params
            return
        rng = np.random.default_rng(seed)
        d, ff, v = config.dim, config.ff_dim, config.vocab_size
        resid_std = 0.02 / np.sqrt(2.0 * config.layers)

        def normal(shape, std=0.02):
            return rng.normal(0.0, std, size=shape)

        p: dict[str, Parameter] = {}
        p["tok_emb"] = Parameter(normal((v, d)), "tok_emb")
        p["pos_emb"] = Parameter(normal((config.context, d)), "pos_emb")
        for i in range(config.layers):
            p[f"l{i}.ln1.g"] = Parameter(np.ones(d), f"l{i}.ln1.g")
            p[f"l{i}.ln1.b"] = Parameter(np.zeros(d), f"l{i}.ln1.b")
            p[f"l{i}.wq"] = Parameter(normal((d, d)), f"l{i}.wq")
            p[f"l{i}.wk"] = Parameter(normal((d, d)), f"l{i}.wk")
            p[f"l{i}.wv"] = Parameter(normal((d, d)), f"l{i}.wv")
            p[f"l{i}.wo"] = Parameter(normal((d, d), resid_std), f"l{i}.wo")
            p[f"l{i}.ln2.g"] = Parameter(np.ones(d), f"l{i}.ln2.g")
            p[f"l{i}.ln2.b"] = Parameter(np.zeros(d), f"l{i}.ln2.b")
            p[f"l{i}.fc1"] = Parameter(normal((d, ff)), f"l{i}.fc1")
            p[f"l{i}.fc1b"] = Parameter(np.zeros(ff), f"l{i}.fc1b")
            p[f"l{i}.fc2"] = Parameter(normal((ff, d), resid_std), f"l{i}.fc2")
            p[f"l{i}.fc2b"] = Parameter(np.zeros(d), f"l{i}.fc2b")
        p["lnf.g"] = Parameter(np.ones(d), "lnf.g")
        p["lnf.b"] = Parameter(np.zeros(d), "lnf.b")
        p["lm_head"] = Parameter(normal((d, v)), "lm_head")
        self.params = p

    def param_list(self) -> list[Parameter]:
        return list(self.params.values())

    def freeze(self) -> None:
        for p in self.params.values():
            p.freeze()

    def content_hash(self) -> str:
        from .checkpoint import params_hash
        return params_hash(self.params)

    def save(self, stem, vocab_ref: str = "") -> dict:
        from .checkpoint import save_checkpoint
        return save_checkpoint(stem, "backbone", self.config.to_dict(), self.params,
                               extra={"vocab": vocab_ref})

    @classmethod
    def load(cls, stem) -> "TransformerLM":
        from .checkpoint import arrays_to_params, load_checkpoint
        manifest, arrays = load_checkpoint(stem, expected_kind="backbone")
        config = LmConfig(**manifest["config"])
        return cls(config, params=arrays_to_params(arrays, trainable=False))

    # -- training path (autodiff graph) ---------------------------------

    def forward_train(self, ids: np.ndarray, key_mask: np.ndarray) -> Tensor:
        """ids (B,T) int, key_mask (B,T) 1.0 for real tokens. Returns logits Tensor (B,T,V)."""
        cfg = self.config
        B, T = ids.shape
        if T > cfg.context:
            raise ValueError(f"sequence length {T} exceeds context {cfg.context}")
        p = self.params
        H, hd = cfg.heads, cfg.head_dim
        x = p["tok_emb"][ids] + p["pos_emb"][:T]
        causal = np.triu(np.full((T, T), MASK_VALUE), k=1)[None, None, :, :]
        key_bias = (1.0 - key_mask)[:, None, None, :] * MASK_VALUE
        mask_bias = Tensor(causal + key_bias)
        scale = 1.0 / np.sqrt(hd)
        for i in range(cfg.layers):
            h = _layernorm_t(x, p[f"l{i}.ln1.g"], p[f"l{i}.ln1.b"])
            q = (h @ p[f"l{i}.wq"]).reshape(B, T, H, hd).transpose(0, 2, 1, 3)
            k = (h @ p[f"l{i}.wk"]).reshape(B, T, H, hd).transpose(0, 2, 1, 3)
            v = (h @ p[f"l{i}.wv"]).reshape(B, T, H, hd).transpose(0, 2, 1, 3)
            scores = q @ k.transpose(0, 1, 3, 2) * scale + mask_bias
            attn = softmax(scores, axis=-1)
            ctx = (attn @ v).transpose(0, 2, 1, 3).reshape(B, T, cfg.dim)
            x = x + ctx @ p[f"l{i}.wo"]
            h2 = _layernorm_t(x, p[f"l{i}.ln2.g"], p[f"l{i}.ln2.b"])
            ff = gelu(h2 @ p[f"l{i}.fc1"] + p[f"l{i}.fc1b"]) @ p[f"l{i}.fc2"] + p[f"l{i}.fc2b"]
            x = x + ff
        hfin = _layernorm_t(x, p["lnf.g"], p["lnf.b"])
        return hfin @ p["lm_head"]

    # -- frozen numpy paths ------------------------------------------------

    def _np(self, name: str) -> np.ndarray:
        return self.params[name].data

    def hidden_batch(self, ids: np.ndarray, key_mask: np.ndarray,
                     counter: OpCounter | None = None,
                     return_logits: bool = False):
        """Batched full forward, numpy only. ids (B,T) -> hidden (B,T,d)."""
        cfg = self.config
        B, T = ids.shape
        if T > cfg.context:
            raise ValueError(f"sequence length {T} exceeds context {cfg.context}")
        H, hd = cfg.heads, cfg.head_dim
        x = self._np("tok_emb")[ids] + self._np("pos_emb")[:T]
        causal = np.triu(np.full((T, T), MASK_VALUE), k=1)[None, None, :, :]
        bias = causal + (1.0 - key_mask)[:, None, None, :] * MASK_VALUE
        scale = 1.0 / np.sqrt(hd)
        if counter:
            per_layer = B * T * 4 * cfg.dim ** 2 + 2 * B * H * T * T * hd \
                + 2 * B * T * cfg.dim * cfg.ff_dim
            counter.add(cfg.layers * per_layer)
        for i in range(cfg.layers):
            h = _ln_np(x, self._np(f"l{i}.ln1.g"), self._np(f"l{i}.ln1.b"))
            q = (h @ self._np(f"l{i}.wq")).reshape(B, T, H, hd).transpose(0, 2, 1, 3)
            k = (h @ self._np(f"l{i}.wk")).reshape(B, T, H, hd).transpose(0, 2, 1, 3)
            v = (h @ self._np(f"l{i}.wv")).reshape(B, T, H, hd).transpose(0, 2, 1, 3)
            scores = q @ k.transpose(0, 1, 3, 2) * scale + bias
            scores -= scores.max(axis=-1, keepdims=True)
            e = np.exp(scores)
            attn = e / e.sum(axis=-1, keepdims=True)
            ctx = (attn @ v).transpose(0, 2, 1, 3).reshape(B, T, cfg.dim)
            x = x + ctx @ self._np(f"l{i}.wo")
            h2 = _ln_np(x, self._np(f"l{i}.ln2.g"), self._np(f"l{i}.ln2.b"))
            x = x + _gelu_np(h2 @ self._np(f"l{i}.fc1") + self._np(f"l{i}.fc1b")) \
                @ self._np(f"l{i}.fc2") + self._np(f"l{i}.fc2b")
        hfin = _ln_np(x, self._np("lnf.g"), self._np("lnf.b"))
        if return_logits:
            if counter:
                counter.add(B * T * cfg.dim * cfg.vocab_size)
            return hfin, hfin @ self._np("lm_head")
        return hfin

    def forward_full(self, ids: list[int], counter: OpCounter | None = None):
        """Single-sequence forward: hidden states (T,d) and all logits (T,V)."""
        arr = np.asarray(ids, dtype=np.int64)[None, :]
        mask = np.ones_like(arr, dtype=np.float64)
        hidden, logits = self.hidden_batch(arr, mask, counter=counter, return_logits=True)
        return hidden[0], logits[0]

    def new_state(self) -> "LmState":
        return LmState(self)


class LmState:
    """Incremental decoding state: token ids, KV cache, final hidden states."""

    def __init__(self, model: TransformerLM):
        self.model = model
        cfg = model.config
        self.ids: list[int] = []
        self.k_cache = [np.empty((0, cfg.dim)) for _ in range(cfg.layers)]
        self.v_cache = [np.empty((0, cfg.dim)) for _ in range(cfg.layers)]
        self.hidden = np.empty((0, cfg.dim))
        self.last_logits: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.ids)

    def append(self, new_ids: list[int], counter: OpCounter | None = None) -> None:
        """Extend the sequence; computes states for the new positions only.

        Prefix states are unchanged by construction (causal attention), so the
        cached path matches a full recompute up to float reassociation.
        """
        if not new_ids:
            return
        model = self.model
        cfg = model.config
        t0 = len(self.ids)
        T_new = len(new_ids)
        T_tot = t0 + T_new
        if T_tot > cfg.context:
            raise ValueError(f"sequence length {T_tot} exceeds context {cfg.context}")
        H, hd = cfg.heads, cfg.head_dim
        scale = 1.0 / np.sqrt(hd)
        arr = np.asarray(new_ids, dtype=np.int64)
        x = model._np("tok_emb")[arr] + model._np("pos_emb")[t0:T_tot]
        causal = np.triu(np.full((T_new, T_tot), MASK_VALUE), k=t0 + 1)[None, :, :]
        if counter:
            per_layer = T_new * 4 * cfg.dim ** 2 + 2 * H * T_new * T_tot * hd \
                + 2 * T_new * cfg.dim * cfg.ff_dim
            counter.add(cfg.layers * per_layer + T_new * cfg.dim * cfg.vocab_size)
        for i in range(cfg.layers):
            h = _ln_np(x, model._np(f"l{i}.ln1.g"), model._np(f"l{i}.ln1.b"))
            q = h @ model._np(f"l{i}.wq")
            k = h @ model._np(f"l{i}.wk")
            v = h @ model._np(f"l{i}.wv")
            self.k_cache[i] = np.concatenate([self.k_cache[i], k], axis=0)
            self.v_cache[i] = np.concatenate([self.v_cache[i], v], axis=0)
            kh = self.k_cache[i].reshape(T_tot, H, hd).transpose(1, 0, 2)
            vh = self.v_cache[i].reshape(T_tot, H, hd).transpose(1, 0, 2)
            qh = q.reshape(T_new, H, hd).transpose(1, 0, 2)
            scores = qh @ kh.transpose(0, 2, 1) * scale + causal
            scores -= scores.max(axis=-1, keepdims=True)
            e = np.exp(scores)
            attn = e / e.sum(axis=-1, keepdims=True)
            ctx = (attn @ vh).transpose(1, 0, 2).reshape(T_new, cfg.dim)
            x = x + ctx @ model._np(f"l{i}.wo")
            h2 = _ln_np(x, model._np(f"l{i}.ln2.g"), model._np(f"l{i}.ln2.b"))
            x = x + _gelu_np(h2 @ model._np(f"l{i}.fc1") + model._np(f"l{i}.fc1b")) \
                @ model._np(f"l{i}.fc2") + model._np(f"l{i}.fc2b")
        hfin = _ln_np(x, model._np("lnf.g"), model._np("lnf.b"))
        self.hidden = np.concatenate([self.hidden, hfin], axis=0)
        self.last_logits = hfin[-1] @ model._np("lm_head")
        self.ids.extend(int(i) for i in new_ids)

    @property
    def last_hidden(self) -> np.ndarray:
        return self.hidden[-1]


def next_token(logits: np.ndarray, mode: str = "greedy", temperature: float = 1.0,
               rng: np.random.Generator | None = None) -> int:
    """Pick the next token id. Greedy breaks ties toward the lowest id."""
    if mode == "greedy":
        return int(np.argmax(logits))
    if mode == "sample":
        if rng is None:
            raise ValueError("sampling mode requires a seeded generator")
        probs = softmax(np.asarray(logits, dtype=np.float64) / temperature)
        return int(rng.choice(len(probs), p=probs))
    raise ValueError(f"unknown decode mode {mode!r}")


def _gelu_grad_np(x: np.ndarray) -> np.ndarray:
    c = np.sqrt(2.0 / np.pi)
    x2 = x * x
    u = np.tanh((x + 0.044715 * x * x2) * c)
    return 0.5 * (1.0 + u) + 0.5 * x * (1.0 - u * u) * c * (1.0 + 3 * 0.044715 * x2)


def _ln_fwd_cache(x, g, b):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + LN_EPS)
    xn = xc * inv
    return xn * g + b, xn, inv


def _ln_bwd(dy, xn, inv, g, grads, gname, bname):
    lead = tuple(range(dy.ndim - 1))
    grads[gname] += (dy * xn).sum(axis=lead)
    grads[bname] += dy.sum(axis=lead)
    dxn = dy * g
    return inv * (dxn - dxn.mean(axis=-1, keepdims=True)
                  - xn * (dxn * xn).mean(axis=-1, keepdims=True))


def _matmul_param_grad(x: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Weight gradient of y = x @ W for x (...,m), g (...,k) -> (m,k)."""
    return x.reshape(-1, x.shape[-1]).T @ g.reshape(-1, g.shape[-1])


def lm_loss_and_grads(model: TransformerLM, ids: np.ndarray, key_mask: np.ndarray,
                      targets: np.ndarray, tmask: np.ndarray) -> tuple[float, dict]:
    """Masked next-token CE and closed-form parameter gradients.

    Hand-written backward mirroring hidden_batch; validated against the
    autodiff path (see tests). Far less allocation churn than the tape on
    attention-sized arrays.
    """
    cfg = model.config
    p = model.params
    B, T = ids.shape
    H, hd = cfg.heads, cfg.head_dim
    d = cfg.dim
    scale = 1.0 / np.sqrt(hd)

    x = p["tok_emb"].data[ids] + p["pos_emb"].data[:T]
    bias = np.triu(np.full((T, T), MASK_VALUE), k=1)[None, None, :, :] \
        + (1.0 - key_mask)[:, None, None, :] * MASK_VALUE
    caches = []
    for i in range(cfg.layers):
        c = {"x_in": x}
        h1, c["xn1"], c["inv1"] = _ln_fwd_cache(x, p[f"l{i}.ln1.g"].data, p[f"l{i}.ln1.b"].data)
        c["h1"] = h1
        q = (h1 @ p[f"l{i}.wq"].data).reshape(B, T, H, hd).transpose(0, 2, 1, 3)
        k = (h1 @ p[f"l{i}.wk"].data).reshape(B, T, H, hd).transpose(0, 2, 1, 3)
        v = (h1 @ p[f"l{i}.wv"].data).reshape(B, T, H, hd).transpose(0, 2, 1, 3)
        scores = q @ k.transpose(0, 1, 3, 2) * scale + bias
        scores -= scores.max(axis=-1, keepdims=True)
        np.exp(scores, out=scores)
        attn = scores
        attn /= attn.sum(axis=-1, keepdims=True)
        ctx = (attn @ v).transpose(0, 2, 1, 3).reshape(B, T, d)
        c.update(q=q, k=k, v=v, attn=attn, ctx=ctx)
        x = x + ctx @ p[f"l{i}.wo"].data
        c["x_mid"] = x
        h2, c["xn2"], c["inv2"] = _ln_fwd_cache(x, p[f"l{i}.ln2.g"].data, p[f"l{i}.ln2.b"].data)
        c["h2"] = h2
        pre = h2 @ p[f"l{i}.fc1"].data + p[f"l{i}.fc1b"].data
        act = _gelu_np(pre)
        c["pre"] = pre
        c["act"] = act
        x = x + act @ p[f"l{i}.fc2"].data + p[f"l{i}.fc2b"].data
        caches.append(c)
    hfin, xnf, invf = _ln_fwd_cache(x, p["lnf.g"].data, p["lnf.b"].data)
    logits = hfin @ p["lm_head"].data

    m = logits.max(axis=-1, keepdims=True)
    e = np.exp(logits - m)
    probs = e / e.sum(axis=-1, keepdims=True)
    denom = float(tmask.sum())
    bi, ti = np.arange(B)[:, None], np.arange(T)[None, :]
    picked = probs[bi, ti, targets]
    loss = float((-np.log(np.maximum(picked, 1e-300)) * tmask).sum() / denom)

    grads = {name: np.zeros_like(param.data) for name, param in p.items()}
    dlogits = probs
    dlogits[bi, ti, targets] -= 1.0
    dlogits *= (tmask / denom)[:, :, None]
    grads["lm_head"] += _matmul_param_grad(hfin, dlogits)
    dhfin = dlogits @ p["lm_head"].data.T
    dx = _ln_bwd(dhfin, xnf, invf, p["lnf.g"].data, grads, "lnf.g", "lnf.b")

    for i in range(cfg.layers - 1, -1, -1):
        c = caches[i]
        dact = dx @ p[f"l{i}.fc2"].data.T
        grads[f"l{i}.fc2"] += _matmul_param_grad(c["act"], dx)
        grads[f"l{i}.fc2b"] += dx.sum(axis=(0, 1))
        dpre = dact * _gelu_grad_np(c["pre"])
        grads[f"l{i}.fc1"] += _matmul_param_grad(c["h2"], dpre)
        grads[f"l{i}.fc1b"] += dpre.sum(axis=(0, 1))
        dh2 = dpre @ p[f"l{i}.fc1"].data.T
        dx_mid = dx + _ln_bwd(dh2, c["xn2"], c["inv2"], p[f"l{i}.ln2.g"].data,
                              grads, f"l{i}.ln2.g", f"l{i}.ln2.b")

        grads[f"l{i}.wo"] += _matmul_param_grad(c["ctx"], dx_mid)
        dctx = (dx_mid @ p[f"l{i}.wo"].data.T).reshape(B, T, H, hd).transpose(0, 2, 1, 3)
        dattn = dctx @ c["v"].transpose(0, 1, 3, 2)
        dv = c["attn"].transpose(0, 1, 3, 2) @ dctx
        ds = c["attn"] * (dattn - (c["attn"] * dattn).sum(axis=-1, keepdims=True))
        dq = ds @ c["k"] * scale
        dk = ds.transpose(0, 1, 3, 2) @ c["q"] * scale
        dq = dq.transpose(0, 2, 1, 3).reshape(B, T, d)
        dk = dk.transpose(0, 2, 1, 3).reshape(B, T, d)
        dv = dv.transpose(0, 2, 1, 3).reshape(B, T, d)
        grads[f"l{i}.wq"] += _matmul_param_grad(c["h1"], dq)
        grads[f"l{i}.wk"] += _matmul_param_grad(c["h1"], dk)
        grads[f"l{i}.wv"] += _matmul_param_grad(c["h1"], dv)
        dh1 = dq @ p[f"l{i}.wq"].data.T + dk @ p[f"l{i}.wk"].data.T \
            + dv @ p[f"l{i}.wv"].data.T
        dx = dx_mid + _ln_bwd(dh1, c["xn1"], c["inv1"], p[f"l{i}.ln1.g"].data,
                              grads, f"l{i}.ln1.g", f"l{i}.ln1.b")

    np.add.at(grads["tok_emb"], ids, dx)
    grads["pos_emb"][:T] += dx.sum(axis=0)
    return loss, grads


def _batches(order: np.ndarray, lengths: np.ndarray, batch_size: int) -> list[np.ndarray]:
    """Group a permutation of sequence indices into near-equal-length batches."""
    by_len = order[np.argsort(lengths[order], kind="stable")]
    return [by_len[i:i + batch_size] for i in range(0, len(by_len), batch_size)]


def train_lm(corpus_ids: list[list[int]], config: LmConfig, epochs: int,
             seed: int = 0, lr: float = 1e-3, batch_size: int = 8,
             log_every: int = 0, model: TransformerLM | None = None,
             eval_ids: list[list[int]] | None = None) -> tuple[TransformerLM, dict]:
    """Next-token cross-entropy training over BOS+text+EOS sequences.

    Returns the model and a history dict with per-epoch mean losses. Aborts
    with RuntimeError on non-finite loss.
    """
    if model is None:
        model = TransformerLM(config, seed=seed)
    rng = np.random.default_rng(seed + 1)
    seqs = [[BOS] + list(ids) + [EOS] for ids in corpus_ids]
    lengths = np.array([len(s) for s in seqs])
    if lengths.max() > config.context:
        raise ValueError("corpus sequence exceeds context length")
    opt = AdamState(model.param_list(), lr=lr)
    total_steps = max(1, epochs * ((len(seqs) + batch_size - 1) // batch_size))
    history = {"epoch_loss": [], "eval_loss": []}
    step = 0
    for epoch in range(epochs):
        order = rng.permutation(len(seqs))
        losses, weights = [], []
        for batch_idx in _batches(order, lengths, batch_size):
            ids, mask, targets, tmask = _pack_batch([seqs[i] for i in batch_idx])
            value, grads = lm_loss_and_grads(model, ids, mask, targets, tmask)
            if not np.isfinite(value):
                raise RuntimeError(f"training diverged at epoch {epoch}: loss={value}")
            for name, param in model.params.items():
                param.grad = grads[name]
            adam_step(opt, lr=cosine_lr(lr, step, total_steps))
            zero_grads(opt.params)
            step += 1
            losses.append(value)
            weights.append(tmask.sum())
        epoch_loss = float(np.average(losses, weights=weights))
        history["epoch_loss"].append(epoch_loss)
        if eval_ids is not None:
            history["eval_loss"].append(eval_lm_loss(model, eval_ids))
        if log_every and (epoch + 1) % log_every == 0:
            msg = f"  lm epoch {epoch + 1}/{epochs} loss {epoch_loss:.4f}"
            if eval_ids is not None:
                msg += f" eval {history['eval_loss'][-1]:.4f}"
            print(msg, flush=True)
    return model, history


def _pack_batch(seqs: list[list[int]]):
    T = max(len(s) for s in seqs) - 1
    B = len(seqs)
    ids = np.full((B, T), PAD, dtype=np.int64)
    targets = np.full((B, T), PAD, dtype=np.int64)
    mask = np.zeros((B, T))
    tmask = np.zeros((B, T))
    for b, s in enumerate(seqs):
        n = len(s) - 1
        ids[b, :n] = s[:-1]
        targets[b, :n] = s[1:]
        mask[b, :n] = 1.0
        tmask[b, :n] = 1.0
    return ids, mask, targets, tmask


def _masked_ce(logits: Tensor, targets: np.ndarray, tmask: np.ndarray) -> Tensor:
    B, T, V = logits.shape
    logp = log_softmax(logits, axis=-1)
    bidx, tidx = np.meshgrid(np.arange(B), np.arange(T), indexing="ij")
    picked = logp[(bidx.ravel(), tidx.ravel(), targets.ravel())]
    mask = Tensor(tmask.ravel())
    return -(picked * mask).sum() / float(tmask.sum())


def eval_lm_loss(model: TransformerLM, corpus_ids: list[list[int]],
                 batch_size: int = 16) -> float:
    """Mean next-token CE under the frozen numpy path."""
    seqs = [[BOS] + list(ids) + [EOS] for ids in corpus_ids]
    total, count = 0.0, 0.0
    for i in range(0, len(seqs), batch_size):
        ids, mask, targets, tmask = _pack_batch(seqs[i:i + batch_size])
        _, logits = model.hidden_batch(ids, mask, return_logits=True)
        m = logits.max(axis=-1, keepdims=True)
        logp = logits - m - np.log(np.exp(logits - m).sum(axis=-1, keepdims=True))
        B, T = targets.shape
        picked = logp[np.arange(B)[:, None], np.arange(T)[None, :], targets]
        total += float((-picked * tmask).sum())
        count += float(tmask.sum())
    return total / count


def greedy_token_accuracy(model: TransformerLM, corpus_ids: list[list[int]],
                          keep=None) -> float:
    """Teacher-forced greedy accuracy; `keep(target_id)` filters positions."""
    correct, total = 0, 0
    for ids in corpus_ids:
        seq = [BOS] + list(ids) + [EOS]
        _, logits = model.forward_full(seq[:-1])
        preds = logits.argmax(axis=-1)
        for pos, target in enumerate(seq[1:]):
            if keep is not None and not keep(target):
                continue
            total += 1
            if int(preds[pos]) == target:
                correct += 1
    return correct / max(total, 1)
