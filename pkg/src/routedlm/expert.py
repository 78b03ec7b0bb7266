"""Frozen numeric experts: small feed-forward regressors trained to convergence.

Each expert z-scores inputs and target with train-only statistics and learns
y = MLP(z) + linear bypass. The bypass makes affine targets exactly
representable, which the profit task needs to reach its error floor. After
training the parameters are frozen and content-hashed; every later stage
asserts the hash is unchanged.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor
from .checkpoint import arrays_to_params, load_checkpoint, params_hash, save_checkpoint
from .datagen import DatasetSplit, NormStats
from .optim import AdamState, Parameter, adam_step, cosine_lr, zero_grads


def expert_mse(pred, target) -> float:
    """Mean squared Euclidean error over a batch (the Stage-1 objective)."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {target.shape}")
    if pred.shape[0] == 0:
        raise ValueError("expert_mse requires at least one sample")
    diff = (pred - target).reshape(pred.shape[0], -1)
    return float((diff * diff).sum(axis=1).mean())


def expert_mse_t(pred: Tensor, target: np.ndarray) -> Tensor:
    """Autodiff twin of expert_mse for training and gradient checks."""
    if pred.shape[0] == 0:
        raise ValueError("expert_mse requires at least one sample")
    diff = pred - Tensor(target)
    n = pred.shape[0]
    return (diff * diff).reshape(n, -1).sum(axis=1).mean()


@dataclass
class ExpertTrainConfig:
    hidden: int = 128
    epochs: int = 2000
    batch_size: int = 512
    lr: float = 3e-3
    min_delta: float = 1e-7   # convergence: best train MSE must improve by more
    patience: int = 50        # than min_delta within this many epochs
    final_refit: bool = True  # exact least-squares solve of the last linear layer
    refit_ridge: float = 1e-9
    log_every: int = 0


def quadratic_features(Z: np.ndarray) -> np.ndarray:
    """Degree-1 and degree-2 monomials of each row: [z, z_i*z_j for i<=j]."""
    K = Z.shape[1]
    iu, ju = np.triu_indices(K)
    return np.concatenate([Z, Z[:, iu] * Z[:, ju]], axis=1)


class ExpertModel:
    """Tanh MLP (input_dim -> hidden -> hidden -> 1) plus a quadratic shortcut.

    The shortcut is a linear readout of degree-2 monomials, so polynomial
    targets (the profit task is bilinear) are exactly representable and the
    MLP only has to fit the non-polynomial residual.
    """

    def __init__(self, input_dim: int, hidden: int, stats: NormStats,
                 seed: int = 0, params: dict[str, Parameter] | None = None):
        self.input_dim = input_dim
        self.hidden = hidden
        self.stats = stats
        self.frozen = False
        self.quad_dim = input_dim + input_dim * (input_dim + 1) // 2
        if params is not None:
            self.params = params
            return
        rng = np.random.default_rng(seed)

        def glorot(n_in, n_out):
            bound = np.sqrt(6.0 / (n_in + n_out))
            return rng.uniform(-bound, bound, size=(n_in, n_out))

        self.params = {
            "w1": Parameter(glorot(input_dim, hidden), "w1"),
            "b1": Parameter(np.zeros(hidden), "b1"),
            "w2": Parameter(glorot(hidden, hidden), "w2"),
            "b2": Parameter(np.zeros(hidden), "b2"),
            "w3": Parameter(glorot(hidden, 1) * 0.1, "w3"),
            "b3": Parameter(np.zeros(1), "b3"),
            "wquad": Parameter(np.zeros((self.quad_dim, 1)), "wquad"),
        }

    def forward_normalized(self, zx) -> Tensor:
        """zx (N,K) z-scored inputs -> (N,) z-scored predictions (graph-tracked)."""
        x = zx if isinstance(zx, Tensor) else Tensor(zx)
        p = self.params
        h = (x @ p["w1"] + p["b1"]).tanh()
        h = (h @ p["w2"] + p["b2"]).tanh()
        quad = Tensor(quadratic_features(np.asarray(x.data)))
        out = h @ p["w3"] + p["b3"] + quad @ p["wquad"]
        return out.reshape(x.shape[0])

    def _forward_np(self, zx: np.ndarray) -> np.ndarray:
        p = self.params
        h = np.tanh(zx @ p["w1"].data + p["b1"].data)
        h = np.tanh(h @ p["w2"].data + p["b2"].data)
        return (h @ p["w3"].data + p["b3"].data
                + quadratic_features(zx) @ p["wquad"].data)[:, 0]

    def predict(self, x, counter=None) -> float:
        """Deterministic forward on one raw input vector; denormalized output."""
        x = np.asarray(x, dtype=np.float64)
        if x.shape != (self.input_dim,):
            raise ValueError(f"expected input of dimension {self.input_dim}, "
                             f"got shape {x.shape}")
        return float(self.predict_batch(x[None, :], counter=counter)[0])

    def predict_batch(self, X, counter=None) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 2 or X.shape[1] != self.input_dim:
            raise ValueError(f"expected (N, {self.input_dim}) inputs, got {X.shape}")
        if counter:
            counter.add(X.shape[0] * (self.input_dim * self.hidden
                                      + self.hidden * self.hidden
                                      + self.hidden + self.quad_dim))
        z = self.stats.normalize_x(X)
        return np.asarray(self.stats.denormalize_y(self._forward_np(z)))

    def freeze(self) -> "ExpertModel":
        for p in self.params.values():
            p.freeze()
        self.frozen = True
        return self

    def content_hash(self) -> str:
        return params_hash(self.params)

    def save(self, stem) -> dict:
        return save_checkpoint(stem, "expert",
                               {"input_dim": self.input_dim, "hidden": self.hidden},
                               self.params,
                               extra={"stats": self.stats.to_dict(),
                                      "frozen": self.frozen})

    @classmethod
    def load(cls, stem) -> "ExpertModel":
        manifest, arrays = load_checkpoint(stem, expected_kind="expert")
        cfg = manifest["config"]
        stats = NormStats.from_dict(manifest["extra"]["stats"])
        model = cls(cfg["input_dim"], cfg["hidden"], stats,
                    params=arrays_to_params(arrays, trainable=False))
        if manifest["extra"].get("frozen"):
            model.freeze()
        return model


def train_expert(split: DatasetSplit, config: ExpertTrainConfig | None = None,
                 seed: int = 0) -> tuple[ExpertModel, dict]:
    """Minimize the mean squared error until converged, then freeze.

    Convergence: best train MSE fails to improve by more than min_delta for
    `patience` consecutive epochs, or the epoch cap is reached. Returns the
    frozen model and a report with normalized and raw-unit MSEs.
    """
    config = config or ExpertTrainConfig()
    stats = split.stats
    Xtr = stats.normalize_x(split.x_array("train"))
    ytr = np.asarray(stats.normalize_y(split.y_array("train")))
    model = ExpertModel(Xtr.shape[1], config.hidden, stats, seed=seed)
    params = list(model.params.values())
    opt = AdamState(params, lr=config.lr)
    rng = np.random.default_rng(seed + 1)
    n = Xtr.shape[0]
    steps_per_epoch = (n + config.batch_size - 1) // config.batch_size
    total_steps = config.epochs * steps_per_epoch
    best = np.inf
    stale = 0
    epochs_run = 0
    step = 0
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        for i in range(0, n, config.batch_size):
            idx = order[i:i + config.batch_size]
            zero_grads(params)
            loss = expert_mse_t(model.forward_normalized(Xtr[idx]), ytr[idx])
            if not np.isfinite(loss.data):
                raise RuntimeError(f"expert training diverged at epoch {epoch}")
            loss.backward()
            adam_step(opt, lr=cosine_lr(config.lr, step, total_steps, floor=0.002))
            step += 1
        epochs_run = epoch + 1
        train_mse = expert_mse(model._forward_np(Xtr), ytr)
        if config.log_every and epochs_run % config.log_every == 0:
            print(f"  expert epoch {epochs_run} train mse {train_mse:.3e}", flush=True)
        if best - train_mse > config.min_delta:
            best = train_mse
            stale = 0
        else:
            stale += 1
            if stale >= config.patience:
                break
    if config.final_refit:
        _refit_last_layer(model, Xtr, ytr, config.refit_ridge)
    model.freeze()
    report = expert_report(model, split)
    report["epochs_run"] = epochs_run
    return model, report


def _refit_last_layer(model: ExpertModel, Z: np.ndarray, y: np.ndarray,
                      ridge: float) -> None:
    """Exact MSE minimization over (w3, b3, wquad) given the learned features.

    Because the quadratic shortcut spans polynomial targets, this drives
    polynomial tasks to the numerical error floor in one solve.
    """
    p = model.params
    h = np.tanh(Z @ p["w1"].data + p["b1"].data)
    h = np.tanh(h @ p["w2"].data + p["b2"].data)
    F = np.concatenate([h, quadratic_features(Z), np.ones((Z.shape[0], 1))], axis=1)
    A = F.T @ F + ridge * np.eye(F.shape[1])
    theta = np.linalg.solve(A, F.T @ y)
    nh = model.hidden
    p["w3"].data[:] = theta[:nh, None]
    p["wquad"].data[:] = theta[nh:-1, None]
    p["b3"].data[:] = theta[-1:]


def expert_report(model: ExpertModel, split: DatasetSplit) -> dict:
    stats = model.stats
    out = {}
    for which in ("train", "test"):
        X = split.x_array(which)
        y = split.y_array(which)
        pred_raw = model.predict_batch(X)
        out[f"{which}_mse_raw"] = expert_mse(pred_raw, y)
        out[f"{which}_mse_norm"] = expert_mse(stats.normalize_y(pred_raw),
                                              stats.normalize_y(y))
        out[f"{which}_max_abs_err"] = float(np.max(np.abs(pred_raw - y)))
    return out


@dataclass
class ExpertSet:
    """Ordered expert registry; routing index 0 is reserved for the language model."""

    entries: list[tuple[str, ExpertModel]] = field(default_factory=list)
    router_stale: bool = False

    LM_INDEX = 0

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def n_classes(self) -> int:
        return 1 + len(self.entries)

    @property
    def ids(self) -> list[str]:
        return [eid for eid, _ in self.entries]

    def routing_index(self, expert_id: str) -> int:
        for i, (eid, _) in enumerate(self.entries):
            if eid == expert_id:
                return i + 1
        raise KeyError(f"unknown expert {expert_id!r}")

    def get(self, expert_id: str) -> ExpertModel:
        return self.entries[self.routing_index(expert_id) - 1][1]

    def by_index(self, index: int) -> tuple[str, ExpertModel]:
        if index <= 0 or index > len(self.entries):
            raise IndexError(f"routing index {index} has no expert")
        return self.entries[index - 1]

    def registry_hash(self) -> str:
        import hashlib
        h = hashlib.sha256()
        for eid, model in self.entries:
            h.update(f"{eid}:{model.input_dim}:{model.content_hash()}".encode())
        return h.hexdigest()

    def save(self, path, ckpt_dir) -> None:
        import json
        from pathlib import Path
        ckpt_dir = Path(ckpt_dir)
        records = []
        for eid, model in self.entries:
            stem = ckpt_dir / f"expert_{eid}"
            model.save(stem)
            records.append({"id": eid, "input_dim": model.input_dim,
                            "path": str(stem), "hash": model.content_hash()})
        payload = {"format": "routedlm-registry-v1", "experts": records,
                   "registry_hash": self.registry_hash()}
        Path(path).write_text(json.dumps(payload, indent=1) + "\n")

    @classmethod
    def load(cls, path) -> "ExpertSet":
        import json
        from pathlib import Path
        payload = json.loads(Path(path).read_text())
        if payload.get("format") != "routedlm-registry-v1":
            raise ValueError("unsupported registry format")
        eset = cls()
        for rec in payload["experts"]:
            model = ExpertModel.load(rec["path"])
            if model.content_hash() != rec["hash"]:
                raise ValueError(f"expert {rec['id']!r} hash mismatch on load")
            register_expert(eset, rec["id"], model)
        eset.router_stale = False
        if eset.registry_hash() != payload["registry_hash"]:
            raise ValueError("registry hash mismatch on load")
        return eset


def register_expert(eset: ExpertSet, expert_id: str, model: ExpertModel) -> ExpertSet:
    """Append a frozen expert under the next routing index; flags router retraining."""
    if not model.frozen:
        raise ValueError(f"expert {expert_id!r} must be frozen before registration")
    if expert_id in eset.ids:
        raise ValueError(f"duplicate expert id {expert_id!r}")
    eset.entries.append((expert_id, model))
    eset.router_stale = True
    return eset
