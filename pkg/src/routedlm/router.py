"""Token router: per-position classifier over {language model} + experts.

Labels come from template anchors: the position whose next token begins the
answer number carries the expert class, every other position the LM class.
Training reweights expert positions (LM count / expert count) because they are
a tiny fraction of tokens and a missed route produces hallucinated digits.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor, log_softmax, softmax
from .backbone import OpCounter, TransformerLM
from .checkpoint import arrays_to_params, load_checkpoint, params_hash, save_checkpoint
from .expert import ExpertSet
from .optim import AdamState, Parameter, adam_step, cosine_lr, zero_grads
from .templates import TaskText
from .tokenizer import BOS, EOS, Vocabulary, tokenize


@dataclass
class RoutingLabelSet:
    """Per-position routing classes for one rendered text's full id sequence."""
    ids: list[int]           # BOS + text tokens + EOS
    labels: np.ndarray       # length len(ids)-1; class for each decoding step
    expert_position: int     # index carrying the expert class
    expert_id: str
    registry_hash: str


def derive_labels(task_text: TaskText, vocab: Vocabulary,
                  expert_set: ExpertSet) -> RoutingLabelSet:
    """Expert class at the position whose next token begins the answer number."""
    text = task_text.text
    anchor = task_text.answer_anchor
    toks = tokenize(text)
    offsets = np.cumsum([0] + [len(t) for t in toks])
    starts = {int(o): i for i, o in enumerate(offsets[:-1])}
    if anchor not in starts:
        raise ValueError(f"answer anchor {anchor} is not on a token boundary")
    ids = [BOS] + vocab.encode(text) + [EOS]
    if len(ids) != len(toks) + 2:
        raise ValueError("encoding does not align one token per text segment")
    first_answer_index = 1 + starts[anchor]  # position of the first answer token
    labels = np.zeros(len(ids) - 1, dtype=np.int64)
    expert_position = first_answer_index - 1
    labels[expert_position] = expert_set.routing_index(task_text.expert_id)
    return RoutingLabelSet(ids=ids, labels=labels, expert_position=expert_position,
                           expert_id=task_text.expert_id,
                           registry_hash=expert_set.registry_hash())


def router_ce(p, onehot, weights=None) -> float:
    """Cross-entropy summed over tokens and classes (the Stage-3 objective).

    Each row of p must be a probability distribution and each row of onehot a
    one-hot vector; optional per-row weights scale each token's term.
    """
    p = np.atleast_2d(np.asarray(p, dtype=np.float64))
    onehot = np.atleast_2d(np.asarray(onehot, dtype=np.float64))
    if p.shape != onehot.shape:
        raise ValueError(f"shape mismatch {p.shape} vs {onehot.shape}")
    if np.any(np.abs(p.sum(axis=1) - 1.0) > 1e-6) or np.any(p < 0):
        raise ValueError("rows of p must be probability distributions")
    is_onehot = np.all((onehot == 0) | (onehot == 1)) and np.all(onehot.sum(axis=1) == 1)
    if not is_onehot:
        raise ValueError("labels must be one-hot rows")
    terms = -(onehot * np.log(np.maximum(p, 1e-300))).sum(axis=1)
    if weights is not None:
        terms = terms * np.asarray(weights, dtype=np.float64)
    return float(terms.sum())


def binary_ce(p_expert, labels, weights=None) -> float:
    """BCE on the expert probability; the two-class degeneration of router_ce."""
    p = np.asarray(p_expert, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    terms = -(y * np.log(np.maximum(p, 1e-300))
              + (1.0 - y) * np.log(np.maximum(1.0 - p, 1e-300)))
    if weights is not None:
        terms = terms * np.asarray(weights, dtype=np.float64)
    return float(terms.sum())


@dataclass
class RouterTrainConfig:
    hidden: int = 64
    epochs: int = 30
    batch_size: int = 4096
    lr: float = 3e-3
    log_every: int = 0


class RouterModel:
    """Two-layer head dim -> hidden -> class logits, softmax output."""

    def __init__(self, dim: int, n_classes: int, hidden: int = 64, seed: int = 0,
                 params: dict[str, Parameter] | None = None,
                 registry_hash: str = "", backbone_hash: str = ""):
        self.dim = dim
        self.n_classes = n_classes
        self.hidden = hidden
        self.registry_hash = registry_hash
        self.backbone_hash = backbone_hash
        self.frozen = False
        if params is not None:
            self.params = params
            return
        rng = np.random.default_rng(seed)
        self.params = {
            "w1": Parameter(rng.normal(0.0, 0.1, size=(dim, hidden)), "w1"),
            "b1": Parameter(np.zeros(hidden), "b1"),
            "w2": Parameter(rng.normal(0.0, 0.1, size=(hidden, n_classes)), "w2"),
            "b2": Parameter(np.zeros(n_classes), "b2"),
        }

    def logits_t(self, h: Tensor) -> Tensor:
        p = self.params
        return (h @ p["w1"] + p["b1"]).tanh() @ p["w2"] + p["b2"]

    def probabilities(self, h: np.ndarray, counter: OpCounter | None = None) -> np.ndarray:
        p = self.params
        single = h.ndim == 1
        h2 = np.atleast_2d(h)
        if counter:
            counter.add(h2.shape[0] * (self.dim * self.hidden + self.hidden * self.n_classes))
        z = np.tanh(h2 @ p["w1"].data + p["b1"].data) @ p["w2"].data + p["b2"].data
        probs = softmax(z, axis=-1)
        return probs[0] if single else probs

    def route(self, h: np.ndarray, counter: OpCounter | None = None) -> int:
        """Argmax class; any exact tie falls open to the LM (class 0)."""
        probs = self.probabilities(h, counter=counter)
        top = probs.max()
        winners = np.flatnonzero(probs == top)
        return 0 if len(winners) > 1 else int(winners[0])

    def content_hash(self) -> str:
        return params_hash(self.params)

    def freeze(self) -> "RouterModel":
        for p in self.params.values():
            p.freeze()
        self.frozen = True
        return self

    def save(self, stem) -> dict:
        return save_checkpoint(
            stem, "router",
            {"dim": self.dim, "n_classes": self.n_classes, "hidden": self.hidden},
            self.params,
            extra={"registry_hash": self.registry_hash,
                   "backbone_hash": self.backbone_hash})

    @classmethod
    def load(cls, stem, expected_registry_hash: str | None = None) -> "RouterModel":
        manifest, arrays = load_checkpoint(stem, expected_kind="router")
        cfg = manifest["config"]
        model = cls(cfg["dim"], cfg["n_classes"], cfg["hidden"],
                    params=arrays_to_params(arrays, trainable=False),
                    registry_hash=manifest["extra"]["registry_hash"],
                    backbone_hash=manifest["extra"]["backbone_hash"])
        if (expected_registry_hash is not None
                and model.registry_hash != expected_registry_hash):
            raise ValueError("router was trained against a different expert registry")
        model.freeze()
        return model


def collect_router_data(backbone: TransformerLM, vocab: Vocabulary,
                        label_sets: list[RoutingLabelSet], batch_size: int = 16
                        ) -> tuple[np.ndarray, np.ndarray]:
    """Teacher-forced hidden states and labels, flattened over all positions."""
    from .tokenizer import PAD
    T = max(len(ls.ids) for ls in label_sets)
    ids = np.full((len(label_sets), T), PAD, dtype=np.int64)
    mask = np.zeros((len(label_sets), T))
    for i, ls in enumerate(label_sets):
        ids[i, :len(ls.ids)] = ls.ids
        mask[i, :len(ls.ids)] = 1.0
    features, labels = [], []
    for i in range(0, len(label_sets), batch_size):
        hidden = backbone.hidden_batch(ids[i:i + batch_size], mask[i:i + batch_size])
        for j, ls in enumerate(label_sets[i:i + batch_size]):
            n = len(ls.ids) - 1  # router decides before each next token
            features.append(hidden[j, :n])
            labels.append(ls.labels)
    return np.concatenate(features), np.concatenate(labels)


def train_router(backbone: TransformerLM, vocab: Vocabulary, expert_set: ExpertSet,
                 label_sets: list[RoutingLabelSet],
                 config: RouterTrainConfig | None = None, seed: int = 0,
                 val_label_sets: list[RoutingLabelSet] | None = None
                 ) -> tuple[RouterModel, dict]:
    """Fit the router on teacher-forced states with class reweighting."""
    config = config or RouterTrainConfig()
    registry_hash = expert_set.registry_hash()
    for ls in label_sets:
        if ls.registry_hash != registry_hash:
            raise ValueError("labels were derived against a different expert "
                             "registry; re-derive before training")
    X, y = collect_router_data(backbone, vocab, label_sets)
    n_classes = expert_set.n_classes
    counts = np.bincount(y, minlength=n_classes).astype(np.float64)
    weights_per_class = np.ones(n_classes)
    for c in range(1, n_classes):
        if counts[c] > 0:
            weights_per_class[c] = counts[0] / counts[c]
    w = weights_per_class[y]
    model = RouterModel(backbone.config.dim, n_classes, hidden=config.hidden,
                        seed=seed, registry_hash=registry_hash)
    params = list(model.params.values())
    opt = AdamState(params, lr=config.lr)
    rng = np.random.default_rng(seed + 3)
    n = X.shape[0]
    steps_per_epoch = (n + config.batch_size - 1) // config.batch_size
    total_steps = config.epochs * steps_per_epoch
    step = 0
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        for i in range(0, n, config.batch_size):
            idx = order[i:i + config.batch_size]
            zero_grads(params)
            logp = log_softmax(model.logits_t(Tensor(X[idx])), axis=-1)
            picked = logp[(np.arange(len(idx)), y[idx])]
            loss = -(picked * Tensor(w[idx])).sum() / float(w[idx].sum())
            if not np.isfinite(loss.data):
                raise RuntimeError("router training diverged")
            loss.backward()
            adam_step(opt, lr=cosine_lr(config.lr, step, total_steps))
            step += 1
        if config.log_every and (epoch + 1) % config.log_every == 0:
            print(f"  router epoch {epoch + 1}/{config.epochs}", flush=True)
    model.freeze()
    report = {"train": router_metrics(model, X, y)}
    if val_label_sets is not None:
        Xv, yv = collect_router_data(backbone, vocab, val_label_sets)
        report["val"] = router_metrics(model, Xv, yv)
    report["class_weights"] = weights_per_class.tolist()
    return model, report


def router_metrics(model: RouterModel, X: np.ndarray, y: np.ndarray) -> dict:
    probs = model.probabilities(X)
    pred = probs.argmax(axis=-1)
    ties = (probs == probs.max(axis=-1, keepdims=True)).sum(axis=-1) > 1
    pred[ties] = 0
    expert_mask = y > 0
    return {
        "accuracy": float((pred == y).mean()),
        "positions": int(len(y)),
        "expert_recall": float((pred[expert_mask] == y[expert_mask]).mean())
        if expert_mask.any() else 1.0,
        "expert_positions": int(expert_mask.sum()),
    }
