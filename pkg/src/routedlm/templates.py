"""Render numeric samples into natural-language task texts.

Each template is one line of prose with {feature_k} placeholders for every
input feature and a single {answer} slot. Rendering tracks the character span
of every embedded number and the anchor where the answer value starts, which
later drives router label derivation and answer scoring.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np

from .datagen import TASKS, Sample
from .tokenizer import format_number

_PLACEHOLDER_RE = re.compile(r"\{(feature_\d+|answer)\}")


@dataclass
class TaskText:
    """One rendered task: full text including the answer and trailing clause."""
    text: str
    numeric_spans: list[tuple[int, int, int]]  # (start, end, feature index)
    answer_anchor: int  # char offset where the answer value begins
    expert_id: str
    template_id: int
    sample: Sample

    @property
    def prompt(self) -> str:
        return self.text[:self.answer_anchor]

    def feature_from_span(self, k: int) -> str:
        start, end, _ = self.numeric_spans[k]
        return self.text[start:end]


class TemplateSet:
    """Ordered templates for one task; validates placeholder coverage on load."""

    def __init__(self, task: str, templates: list[str]):
        if task not in TASKS:
            raise ValueError(f"unknown task {task!r}")
        if not templates:
            raise ValueError(f"empty template set for task {task!r}")
        self.task = task
        self.input_dim = TASKS[task].input_dim
        self.templates = list(templates)
        self.answer_markers: list[str] = []
        for i, tpl in enumerate(self.templates):
            self._validate(i, tpl)

    def _validate(self, idx: int, template: str) -> None:
        names = _PLACEHOLDER_RE.findall(template)
        expected = [f"feature_{k}" for k in range(self.input_dim)]
        feats = [n for n in names if n != "answer"]
        if sorted(feats) != sorted(expected):
            raise ValueError(
                f"template {idx} of task {self.task!r} must use each of "
                f"{len(expected)} features exactly once; found {sorted(feats)}")
        if names.count("answer") != 1:
            raise ValueError(f"template {idx} of task {self.task!r} needs exactly "
                             f"one {{answer}} slot")
        prefix = template.split("{answer}")[0].rstrip()
        marker = " ".join(prefix.split()[-3:])
        self.answer_markers.append(marker)

    def __len__(self) -> int:
        return len(self.templates)

    def render(self, sample: Sample, template_id: int) -> TaskText:
        """Substitute canonical-format numbers; spans and anchor are exact."""
        if not 0 <= template_id < len(self.templates):
            raise ValueError(f"template id {template_id} out of range")
        if len(sample.x) != self.input_dim:
            raise ValueError(f"sample has {len(sample.x)} features, task "
                             f"{self.task!r} needs {self.input_dim}")
        template = self.templates[template_id]
        out: list[str] = []
        spans: dict[int, tuple[int, int]] = {}
        anchor = -1
        pos = 0
        offset = 0
        for m in _PLACEHOLDER_RE.finditer(template):
            literal = template[m.start():m.end()]
            out.append(template[pos:m.start()])
            offset += m.start() - pos
            name = m.group(1)
            if name == "answer":
                anchor = offset
                rendered = format_number(sample.y)
            else:
                k = int(name.split("_")[1])
                rendered = format_number(sample.x[k])
                spans[k] = (offset, offset + len(rendered))
            out.append(rendered)
            offset += len(rendered)
            pos = m.end()
        out.append(template[pos:])
        text = "".join(out)
        numeric_spans = [(spans[k][0], spans[k][1], k) for k in range(self.input_dim)]
        return TaskText(text=text, numeric_spans=numeric_spans, answer_anchor=anchor,
                        expert_id=self.task, template_id=template_id, sample=sample)


def load_template_file(task: str, path: str | Path) -> TemplateSet:
    lines = Path(path).read_text().splitlines()
    templates = [ln for ln in lines if ln.strip() and not ln.lstrip().startswith("#")]
    return TemplateSet(task, templates)


def default_template_path(task: str) -> Path:
    return Path(resources.files("routedlm") / "templates_data" / f"{task}.txt")


def load_default_templates(task: str) -> TemplateSet:
    return load_template_file(task, default_template_path(task))


def build_stage_datasets(samples: list[Sample], templates: TemplateSet,
                         seed: int = 0) -> tuple[list[TaskText], list[TaskText]]:
    """Pair each sample with a uniformly chosen template.

    Returns (alignment pairs, router source); both stages consume the same
    rendered texts, the first as (text, features) pairs and the second through
    anchor-derived labels.
    """
    if not samples:
        raise ValueError("cannot build stage datasets from an empty split")
    if len(templates) == 0:
        raise ValueError("empty template set")
    rng = np.random.default_rng(seed)
    choices = rng.integers(0, len(templates), size=len(samples))
    texts = [templates.render(s, int(c)) for s, c in zip(samples, choices)]
    return texts, texts
