"""Simulated multi-agent function-calling baseline over the same components.

Five sequential stages (task understanding, tool invocation confirmation, data
alignment, expert computation, result analysis) drive the same tiny LM and the
same frozen experts that the routed pipeline uses; only the orchestration
differs. Every stage's prompt and completion tokens and wall-clock duration
are recorded for the cost comparison.
"""

from __future__ import annotations

import re
import time
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np

from .aligner import AlignerModel
from .backbone import OpCounter, TransformerLM, next_token
from .expert import ExpertSet
from .tokenizer import BOS, EOS, CANONICAL_NUMBER_RE, Vocabulary, format_number

STAGE_NAMES = [
    "task understanding",
    "tool invocation confirmation",
    "data alignment",
    "expert computation",
    "result analysis",
]

_NUMBER_RE = re.compile(r"-?\d+(?:\.\d+)?")


@dataclass
class AgentStageRecord:
    stage: str
    prompt_tokens: int
    completion_tokens: int
    duration: float


@dataclass
class ToolCall:
    expert_id: str
    arguments: list[float]
    parse_status: str  # "parsed" or "aligner_fallback"


def load_stage_templates(path: str | Path | None = None) -> dict[str, str]:
    """Sectioned single-line templates, one per stage."""
    if path is None:
        path = Path(resources.files("routedlm") / "templates_data" / "agent_stages.txt")
    sections: dict[str, str] = {}
    current: str | None = None
    for line in Path(path).read_text().splitlines():
        if line.lstrip().startswith("#") or not line.strip():
            continue
        if line.startswith("[") and line.rstrip().endswith("]"):
            current = line.strip()[1:-1]
            sections[current] = ""
        elif current is not None:
            sections[current] = (sections[current] + " " + line).strip()
    missing = [s for s in STAGE_NAMES if s not in sections]
    if missing:
        raise ValueError(f"stage templates missing sections: {missing}")
    return sections


class AgentPipeline:
    """Explicitly staged orchestration used as the cost baseline."""

    def __init__(self, backbone: TransformerLM, vocab: Vocabulary,
                 expert_set: ExpertSet, aligner: AlignerModel,
                 stage_templates: dict[str, str] | None = None,
                 max_new_tokens: int = 64):
        self.backbone = backbone
        self.vocab = vocab
        self.expert_set = expert_set
        self.aligner = aligner
        self.templates = stage_templates or load_stage_templates()
        self.max_new_tokens = max_new_tokens
        # keyword routing for tool selection when the LM's confirmation is unusable
        self.tool_keywords = {"nonlinear": "health", "linear": "profit"}

    def _complete(self, prompt_text: str, counter: OpCounter | None
                  ) -> tuple[str, int, int]:
        """Greedy LM completion; returns (text, prompt_tokens, completion_tokens)."""
        ids = [BOS] + self.vocab.encode(prompt_text)
        cfg = self.backbone.config
        budget = min(self.max_new_tokens, cfg.context - len(ids))
        state = self.backbone.new_state()
        state.append(ids, counter=counter)
        out: list[str] = []
        produced = 0
        while produced < budget:
            tok = next_token(state.last_logits, mode="greedy")
            produced += 1
            state.append([tok], counter=counter)
            if tok == EOS:
                break
            out.append(self.vocab.token_string(tok))
        return "".join(out), len(ids), produced

    def _select_tool(self, confirmation: str, task_text: str) -> str:
        for eid in self.expert_set.ids:
            if re.search(rf"\bcall {re.escape(eid)}\b", confirmation):
                return eid
        for eid, keyword in self.tool_keywords.items():
            if eid in self.expert_set.ids and keyword in task_text:
                return eid
        return self.expert_set.ids[0]

    def _parse_arguments(self, text: str, expected: int) -> list[float] | None:
        """Accept only the requested slot/value pair format, slots 0..K-1 in order."""
        values = [float(v) for v in _NUMBER_RE.findall(text)]
        if len(values) != 2 * expected:
            return None
        slots, args = values[0::2], values[1::2]
        if slots != [float(k) for k in range(expected)]:
            return None
        return args

    def run(self, task_text: str, counter: OpCounter | None = None
            ) -> tuple[str, list[AgentStageRecord], ToolCall]:
        """Execute the five stages; returns (answer text, records, tool call)."""
        records: list[AgentStageRecord] = []
        tool_list = ", ".join(self.expert_set.ids)

        t0 = time.perf_counter()
        p1 = self.templates[STAGE_NAMES[0]].format(task_text=task_text)
        s1, pt, ct = self._complete(p1, counter)
        records.append(AgentStageRecord(STAGE_NAMES[0], pt, ct, time.perf_counter() - t0))

        t0 = time.perf_counter()
        p2 = self.templates[STAGE_NAMES[1]].format(task_text=task_text,
                                                   tool_list=tool_list, stage1=s1)
        s2, pt, ct = self._complete(p2, counter)
        records.append(AgentStageRecord(STAGE_NAMES[1], pt, ct, time.perf_counter() - t0))
        expert_id = self._select_tool(s2, task_text)
        expert = self.expert_set.get(expert_id)

        t0 = time.perf_counter()
        p3 = self.templates[STAGE_NAMES[2]].format(task_text=task_text, stage2=s2)
        s3, pt, ct = self._complete(p3, counter)
        args = self._parse_arguments(s3, expert.input_dim)
        if args is None:
            head = self.aligner.heads[expert_id]
            ids = [BOS] + self.vocab.encode(task_text)
            states, _ = self.backbone.forward_full(ids, counter=counter)
            xhat = self.aligner.extract_inputs(states, expert_id, counter=counter)
            args = [float(v) for v in head.stats.denormalize_x(xhat)]
            status = "aligner_fallback"
        else:
            status = "parsed"
        tool_call = ToolCall(expert_id, args, status)
        records.append(AgentStageRecord(STAGE_NAMES[2], pt, ct, time.perf_counter() - t0))

        t0 = time.perf_counter()
        value = expert.predict(np.asarray(args), counter=counter)
        result = format_number(value)
        records.append(AgentStageRecord(STAGE_NAMES[3], 0, 0, time.perf_counter() - t0))

        t0 = time.perf_counter()
        p5 = self.templates[STAGE_NAMES[4]].format(task_text=task_text, result=result)
        s5, pt, ct = self._complete(p5, counter)
        records.append(AgentStageRecord(STAGE_NAMES[4], pt, ct, time.perf_counter() - t0))

        answer_text = f"The computed result is {result}.{s5}"
        return answer_text, records, tool_call


def total_tokens(records: list[AgentStageRecord]) -> int:
    return sum(r.prompt_tokens + r.completion_tokens for r in records)


def decompose_tokens(records: list[AgentStageRecord]) -> dict:
    """Per-stage token totals and shares (shares sum to one)."""
    if not records:
        raise ValueError("no stage records to decompose")
    totals: dict[str, int] = {}
    for r in records:
        totals[r.stage] = totals.get(r.stage, 0) + r.prompt_tokens + r.completion_tokens
    grand = sum(totals.values())
    shares = {k: (v / grand if grand else 0.0) for k, v in totals.items()}
    return {"totals": totals, "shares": shares, "grand_total": grand}
