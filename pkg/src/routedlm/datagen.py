"""Synthetic task data: a linear profit oracle and a battery-health oracle.

Inputs are uniform over fixed ranges, snapped to the canonical 4-decimal grid
before the target is computed, so rendered text round-trips to the stored
features exactly. Serialization is JSONL with full-precision floats.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .tokenizer import quantize

DEGRADATION_SCALE = 1200.0  # fixed scale constant in the profit formula

SOH_CAL_RATE = 2e-5    # health lost per minute of calendar time
SOH_CYC_RATE = 2e-4    # health lost per unit of cycling stress
SOH_EXPONENT = 1.5     # stress grows as |I|^beta
SOH_WINDOW_MIN = 120.0  # length of the sampled current window, minutes
SOH_SAMPLE_STEP = 12.0  # sampling interval of the 11 current readings
SOH_MAX_HORIZON = 480.0
TRAPEZOID_STEP = 0.1

LINEAR_RANGES = [(0.0, 0.05), (0.0, 0.5), (0.0, 250.0), (0.0, 1.0)]
LINEAR_FEATURES = ["alpha", "delta_p", "power", "c_a"]
CURRENT_RANGE = (-2.0, 2.0)
NONLINEAR_FEATURES = [f"current_{i}" for i in range(11)] + ["t_query", "i_query"]


def linear_reward(alpha: float, delta_p: float, power: float, c_a: float) -> float:
    """Profit of one charge-discharge cycle: delta_p * power - alpha * c_a * 1200."""
    for name, value, (lo, hi) in zip(LINEAR_FEATURES, (alpha, delta_p, power, c_a),
                                     LINEAR_RANGES):
        if not lo <= value <= hi:
            raise ValueError(f"{name}={value} outside [{lo}, {hi}]")
    return delta_p * power - alpha * c_a * DEGRADATION_SCALE


def current_profile(currents, tau):
    """Current at time tau: piecewise linear through the 11 window samples."""
    knots = np.arange(11) * SOH_SAMPLE_STEP
    return np.interp(tau, knots, currents)


def soh_oracle(currents, t_query: float, i_query: float) -> float:
    """State of health at t_query minutes.

    Calendar aging plus cycling stress: 1 - k_cal*t - k_cyc * integral of
    |I(tau)|^beta. Within the 2-hour window I is piecewise linear through the
    samples; beyond it I holds at i_query. The windowed part integrates by
    trapezoid at 0.1-minute steps; the constant tail integrates exactly
    (trapezoid of a constant at any step).
    """
    currents = np.asarray(currents, dtype=np.float64)
    if currents.shape != (11,):
        raise ValueError(f"expected 11 current samples, got shape {currents.shape}")
    if t_query < 0:
        raise ValueError(f"t_query={t_query} must be nonnegative")
    if t_query > SOH_MAX_HORIZON:
        raise ValueError(f"t_query={t_query} beyond horizon {SOH_MAX_HORIZON}")
    lo, hi = CURRENT_RANGE
    if np.any(currents < lo) or np.any(currents > hi) or not lo <= i_query <= hi:
        raise ValueError(f"currents must lie in [{lo}, {hi}]")

    t_window = min(t_query, SOH_WINDOW_MIN)
    k = int(np.floor(t_window / TRAPEZOID_STEP + 1e-9))
    pts = np.arange(k + 1) * TRAPEZOID_STEP
    if pts[-1] < t_window - 1e-12:
        pts = np.append(pts, t_window)
    stress = float(np.trapz(np.abs(current_profile(currents, pts)) ** SOH_EXPONENT, pts))
    tail = max(t_query - SOH_WINDOW_MIN, 0.0)
    stress += abs(i_query) ** SOH_EXPONENT * tail
    return 1.0 - SOH_CAL_RATE * t_query - SOH_CYC_RATE * stress


@dataclass
class Sample:
    task: str
    x: list[float]
    y: float
    template_id: int | None = None


@dataclass
class NormStats:
    """Train-split feature/target means and standard deviations (ddof=0)."""
    x_mean: list[float]
    x_std: list[float]
    y_mean: float
    y_std: float

    def normalize_x(self, X):
        return (np.asarray(X, dtype=np.float64) - self.x_mean) / self.x_std

    def denormalize_x(self, Z):
        return np.asarray(Z, dtype=np.float64) * self.x_std + self.x_mean

    def normalize_y(self, y):
        return (np.asarray(y, dtype=np.float64) - self.y_mean) / self.y_std

    def denormalize_y(self, z):
        return np.asarray(z, dtype=np.float64) * self.y_std + self.y_mean

    def to_dict(self) -> dict:
        return {"x_mean": self.x_mean, "x_std": self.x_std,
                "y_mean": self.y_mean, "y_std": self.y_std}

    @classmethod
    def from_dict(cls, d: dict) -> "NormStats":
        return cls(d["x_mean"], d["x_std"], d["y_mean"], d["y_std"])


@dataclass
class DatasetSplit:
    task: str
    train: list[Sample] = field(default_factory=list)
    test: list[Sample] = field(default_factory=list)
    stats: NormStats | None = None

    def x_array(self, which: str = "train") -> np.ndarray:
        samples = getattr(self, which)
        return np.array([s.x for s in samples], dtype=np.float64)

    def y_array(self, which: str = "train") -> np.ndarray:
        samples = getattr(self, which)
        return np.array([s.y for s in samples], dtype=np.float64)


def compute_stats(samples: list[Sample]) -> NormStats:
    X = np.array([s.x for s in samples], dtype=np.float64)
    y = np.array([s.y for s in samples], dtype=np.float64)
    x_std = X.std(axis=0)
    y_std = y.std()
    if np.any(x_std == 0.0) or y_std == 0.0:
        raise ValueError("constant feature or target; cannot z-score")
    return NormStats(X.mean(axis=0).tolist(), x_std.tolist(),
                     float(y.mean()), float(y_std))


class TaskSpec:
    def __init__(self, name: str, feature_names: list[str], default_sizes: tuple[int, int],
                 sampler, oracle):
        self.name = name
        self.feature_names = feature_names
        self.input_dim = len(feature_names)
        self.default_sizes = default_sizes
        self.sampler = sampler
        self.oracle = oracle


def _sample_linear(rng: np.random.Generator) -> list[float]:
    return [quantize(rng.uniform(lo, hi)) for lo, hi in LINEAR_RANGES]


def _sample_nonlinear(rng: np.random.Generator) -> list[float]:
    currents = [quantize(rng.uniform(*CURRENT_RANGE)) for _ in range(11)]
    t_query = quantize(rng.uniform(SOH_WINDOW_MIN, SOH_MAX_HORIZON))
    i_query = quantize(rng.uniform(*CURRENT_RANGE))
    return currents + [t_query, i_query]


TASKS: dict[str, TaskSpec] = {
    "linear": TaskSpec("linear", LINEAR_FEATURES, (9000, 1000), _sample_linear,
                       lambda x: linear_reward(*x)),
    "nonlinear": TaskSpec("nonlinear", NONLINEAR_FEATURES, (7200, 2400), _sample_nonlinear,
                          lambda x: soh_oracle(x[:11], x[11], x[12])),
}


def task_oracle(task: str, x) -> float:
    return TASKS[task].oracle(list(map(float, x)))


def generate_dataset(task: str, sizes: tuple[int, int] | None = None,
                     seed: int = 0) -> DatasetSplit:
    """Uniformly sample inputs, evaluate the task oracle, split train/test.

    Deterministic for a fixed seed. Normalization statistics come from the
    train split only.
    """
    if task not in TASKS:
        raise ValueError(f"unknown task {task!r}; known: {sorted(TASKS)}")
    spec = TASKS[task]
    n_train, n_test = sizes if sizes is not None else spec.default_sizes
    if n_train <= 0 or n_test <= 0:
        raise ValueError("split sizes must be positive")
    rng = np.random.default_rng(seed)
    split = DatasetSplit(task=task)
    for bucket, count in ((split.train, n_train), (split.test, n_test)):
        for _ in range(count):
            x = spec.sampler(rng)
            bucket.append(Sample(task=task, x=x, y=spec.oracle(x)))
    split.stats = compute_stats(split.train)
    return split


# -- JSONL serialization ------------------------------------------------------


def _sample_to_record(s: Sample) -> dict:
    rec = {"x": s.x, "y": s.y, "task": s.task}
    if s.template_id is not None:
        rec["template_id"] = s.template_id
    return rec


def write_samples(samples: list[Sample], path: str | Path) -> None:
    """One JSON record per line; floats keep full round-trip precision."""
    with open(path, "w") as fh:
        for s in samples:
            fh.write(json.dumps(_sample_to_record(s)) + "\n")


def read_samples(path: str | Path) -> list[Sample]:
    samples: list[Sample] = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                samples.append(Sample(task=rec["task"],
                                      x=[float(v) for v in rec["x"]],
                                      y=float(rec["y"]),
                                      template_id=rec.get("template_id")))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise ValueError(f"{path}: malformed record at line {lineno}: {exc}") from exc
    return samples


def write_jsonl(split: DatasetSplit, stem: str | Path) -> dict[str, Path]:
    """Persist a split as <stem>.train.jsonl / <stem>.test.jsonl / <stem>.stats.json."""
    stem = Path(stem)
    stem.parent.mkdir(parents=True, exist_ok=True)
    paths = {"train": stem.with_suffix(".train.jsonl"),
             "test": stem.with_suffix(".test.jsonl"),
             "stats": stem.with_suffix(".stats.json")}
    write_samples(split.train, paths["train"])
    write_samples(split.test, paths["test"])
    meta = {"task": split.task,
            "stats": split.stats.to_dict() if split.stats else None}
    paths["stats"].write_text(json.dumps(meta, indent=1) + "\n")
    return paths


def read_jsonl(stem: str | Path) -> DatasetSplit:
    """Inverse of write_jsonl. Empty files load as empty sample lists."""
    stem = Path(stem)
    meta = json.loads(stem.with_suffix(".stats.json").read_text())
    stats = NormStats.from_dict(meta["stats"]) if meta.get("stats") else None
    return DatasetSplit(task=meta["task"],
                        train=read_samples(stem.with_suffix(".train.jsonl")),
                        test=read_samples(stem.with_suffix(".test.jsonl")),
                        stats=stats)
