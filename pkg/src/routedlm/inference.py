"""Routed generation: per-step router decision, LM token or expert insertion.

Each step either lets the language model emit one token or, when the router
fires, runs aligner -> expert -> canonical formatting and splices the whole
formatted number into the stream as one event. The trace records every step;
concatenating event texts reproduces the generated completion exactly.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .aligner import AlignerModel
from .backbone import LmState, OpCounter, TransformerLM, next_token
from .checkpoint import params_hash
from .expert import ExpertSet
from .router import RouterModel
from .templates import TemplateSet
from .tokenizer import CANONICAL_NUMBER_RE, EOS, Vocabulary, format_number


@dataclass
class GenerationState:
    """One in-flight request: sequence, step budget, decode mode, trace."""
    lm_state: LmState
    max_len: int
    mode: str
    events: list[dict] = field(default_factory=list)

    @property
    def step_count(self) -> int:
        return len(self.events)


class GenerationTrace:
    """Ordered record of LM steps and expert insertions for one generation."""

    def __init__(self, prompt: str, events: list[dict]):
        self.prompt = prompt
        self.events = events

    def generated_text(self) -> str:
        return "".join(e["text"] for e in self.events)

    def expert_events(self) -> list[dict]:
        return [e for e in self.events if e["type"] == "expert"]

    def lm_events(self) -> list[dict]:
        return [e for e in self.events if e["type"] == "lm"]

    def write_jsonl(self, path: str | Path) -> None:
        with open(path, "w") as fh:
            fh.write(json.dumps({"type": "prompt", "text": self.prompt}) + "\n")
            for e in self.events:
                fh.write(json.dumps(e) + "\n")

    @classmethod
    def read_jsonl(cls, path: str | Path) -> "GenerationTrace":
        prompt = ""
        events = []
        with open(path) as fh:
            for line in fh:
                if not line.strip():
                    continue
                rec = json.loads(line)
                if rec.get("type") == "prompt":
                    prompt = rec["text"]
                else:
                    events.append(rec)
        return cls(prompt, events)


class RoutedPipeline:
    """Backbone + tokenizer + experts + aligner + router, hash-checked."""

    def __init__(self, backbone: TransformerLM, vocab: Vocabulary,
                 expert_set: ExpertSet, aligner: AlignerModel, router: RouterModel):
        self.backbone = backbone
        self.vocab = vocab
        self.expert_set = expert_set
        self.aligner = aligner
        self.router = router
        self.verify_hashes()

    def verify_hashes(self) -> None:
        backbone_hash = params_hash(self.backbone.params)
        if self.aligner.backbone_hash and self.aligner.backbone_hash != backbone_hash:
            raise ValueError("aligner was trained against a different backbone")
        if self.router.backbone_hash and self.router.backbone_hash != backbone_hash:
            raise ValueError("router was trained against a different backbone")
        registry_hash = self.expert_set.registry_hash()
        if self.router.registry_hash and self.router.registry_hash != registry_hash:
            raise ValueError("router was trained against a different expert registry")
        if self.expert_set.router_stale:
            raise ValueError("expert registry changed; retrain the router")

    def component_hashes(self) -> dict[str, str]:
        return {
            "backbone": params_hash(self.backbone.params),
            "aligner": self.aligner.content_hash(),
            "router": self.router.content_hash(),
            "registry": self.expert_set.registry_hash(),
            **{f"expert:{eid}": m.content_hash() for eid, m in self.expert_set.entries},
        }

    def generate(self, prompt: str, max_len: int = 256, mode: str = "greedy",
                 temperature: float = 1.0, seed: int = 0,
                 counter: OpCounter | None = None) -> tuple[str, GenerationTrace]:
        """Routed decoding until EOS or max_len total tokens.

        Returns (prompt + completion, trace). The router is consulted before
        every emission; expert steps insert the whole formatted value as one
        event and decoding continues on top of it.
        """
        cfg = self.backbone.config
        if max_len > cfg.context:
            raise ValueError(f"max_len {max_len} exceeds context {cfg.context}")
        from .tokenizer import BOS
        ids = [BOS] + self.vocab.encode(prompt)
        if len(ids) >= max_len:
            raise ValueError(f"prompt occupies {len(ids)} tokens, max_len {max_len}")
        state = GenerationState(self.backbone.new_state(), max_len, mode)
        state.lm_state.append(ids, counter=counter)
        rng = np.random.default_rng(seed)
        while len(state.lm_state) < state.max_len:
            h = state.lm_state.last_hidden
            cls = self.router.route(h, counter=counter)
            if cls == 0:
                tok = next_token(state.lm_state.last_logits, mode=mode,
                                 temperature=temperature, rng=rng)
                state.events.append({"type": "lm", "token_id": int(tok),
                                     "text": "" if tok == EOS
                                     else self.vocab.token_string(tok)})
                state.lm_state.append([tok], counter=counter)
                if tok == EOS:
                    break
            else:
                expert_id, expert = self.expert_set.by_index(cls)
                xhat, detail = self.aligner.extract_inputs_detailed(
                    state.lm_state.hidden, expert_id, counter=counter)
                head = self.aligner.heads[expert_id]
                x_raw = head.stats.denormalize_x(xhat)
                raw_value = expert.predict(x_raw, counter=counter)
                inserted = format_number(raw_value)
                toks = self.vocab.encode(inserted)
                state.events.append({"type": "expert", "expert_id": expert_id,
                                     "x_hat": [float(v) for v in xhat],
                                     "x_raw": [float(v) for v in x_raw],
                                     "raw_value": float(raw_value),
                                     "inserted": inserted,
                                     "refined": bool(detail["refined"]),
                                     "token_ids": [int(t) for t in toks],
                                     "text": inserted})
                state.lm_state.append(toks, counter=counter)
        trace = GenerationTrace(prompt, state.events)
        return prompt + trace.generated_text(), trace


def extract_answer(text: str, templates: TemplateSet) -> float | None:
    """First canonical number after the task's answer clause; None on failure."""
    best = None
    for marker in sorted(set(templates.answer_markers), key=len, reverse=True):
        at = text.find(marker)
        while at >= 0:
            m = CANONICAL_NUMBER_RE.search(text, at + len(marker))
            if m:
                candidate = (m.start(), float(m.group()))
                if best is None or candidate[0] < best[0]:
                    best = candidate
                break
            at = text.find(marker, at + 1)
    return None if best is None else best[1]


def count_lm_digit_events(trace: GenerationTrace, vocab: Vocabulary) -> int:
    """LM steps that emitted a digit token: required to be zero in greedy runs."""
    return sum(1 for e in trace.lm_events() if vocab.is_digit_id(e["token_id"]))
