"""Flat key-value run configuration.

Format: one `key = value` per line, `#` starts a comment line, blank lines
ignored. Keys are dotted lowercase names; values are strings with typed
getters. Unknown keys are rejected so typos fail loudly.
"""

from __future__ import annotations

import hashlib
from pathlib import Path

DEFAULTS: dict[str, str] = {
    "seed": "7",
    "out_dir": "runs/default",
    "tasks": "linear,nonlinear",
    "decode.mode": "greedy",

    "data.linear.train_size": "9000",
    "data.linear.test_size": "1000",
    "data.nonlinear.train_size": "7200",
    "data.nonlinear.test_size": "2400",

    "templates.linear": "default",
    "templates.nonlinear": "default",
    "templates.agent_stages": "default",

    "lm.layers": "4",
    "lm.heads": "4",
    "lm.dim": "128",
    "lm.context": "512",
    "lm.ff_mult": "4",
    "lm.corpus_per_task": "192",
    "lm.eval_per_task": "24",
    "lm.epochs": "30",
    "lm.batch_size": "8",
    "lm.lr": "1e-3",

    "expert.hidden": "128",
    "expert.batch_size": "512",
    "expert.lr": "3e-3",
    "expert.min_delta": "1e-12",
    "expert.patience": "100",
    "expert.linear.epochs": "150",
    "expert.nonlinear.epochs": "500",

    "stage2.texts_per_task": "500",
    "stage2.val_texts_per_task": "48",
    "stage2.heads": "10",
    "stage2.epochs": "200",
    "stage2.batch_size": "32",
    "stage2.lr": "3e-3",
    "stage2.lambda": "0.1",
    "stage2.tau": "0.07",
    "stage2.contrastive": "true",
    "stage2.probe_epochs": "80",
    "stage2.refine": "true",
    "stage2.refine_gate": "0.5",

    "router.texts_per_task": "160",
    "router.val_texts_per_task": "24",
    "router.hidden": "64",
    "router.epochs": "30",
    "router.batch_size": "4096",
    "router.lr": "3e-3",

    "bench.requests": "200",
    "bench.warmup": "3",
    "bench.max_len": "256",
    "bench.agent_max_new": "64",
    "success.relative": "0.01",
    "success.floor": "1e-3",

    "log_every": "0",
}


class RunConfig:
    """Typed access over the flat key-value map; records its own digest."""

    def __init__(self, values: dict[str, str], source: str = "<defaults>"):
        unknown = sorted(set(values) - set(DEFAULTS))
        if unknown:
            raise KeyError(f"unknown config keys: {unknown}")
        self.values = dict(DEFAULTS)
        self.values.update(values)
        self.source = source

    @classmethod
    def from_file(cls, path: str | Path) -> "RunConfig":
        values: dict[str, str] = {}
        for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
            key, _, value = line.partition("=")
            values[key.strip()] = value.strip()
        return cls(values, source=str(path))

    def get(self, key: str) -> str:
        return self.values[key]

    def get_int(self, key: str) -> int:
        return int(self.values[key])

    def get_float(self, key: str) -> float:
        return float(self.values[key])

    def get_bool(self, key: str) -> bool:
        v = self.values[key].lower()
        if v in ("true", "1", "yes", "on"):
            return True
        if v in ("false", "0", "no", "off"):
            return False
        raise ValueError(f"config key {key} has non-boolean value {v!r}")

    def get_list(self, key: str) -> list[str]:
        return [p.strip() for p in self.values[key].split(",") if p.strip()]

    def override(self, key: str, value: str) -> None:
        if key not in DEFAULTS:
            raise KeyError(f"unknown config key {key!r}")
        self.values[key] = value

    def digest(self) -> str:
        payload = "\n".join(f"{k}={self.values[k]}" for k in sorted(self.values))
        return hashlib.sha256(payload.encode()).hexdigest()[:16]

    def write(self, path: str | Path) -> None:
        lines = [f"{k} = {self.values[k]}" for k in sorted(self.values)]
        Path(path).write_text("\n".join(lines) + "\n")


def subseed(seed: int, name: str) -> int:
    """Stable per-stage seed derived from the run seed and a stage name."""
    digest = hashlib.sha256(f"{seed}:{name}".encode()).digest()
    return int.from_bytes(digest[:4], "little")
