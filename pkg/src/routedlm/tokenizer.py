"""Reversible word/digit tokenizer and the canonical fixed-point number format.

Numeric characters (digits, '.', '-') always tokenize one character at a time;
words carry their leading space so decoding is plain concatenation. Numbers are
rendered with exactly four fractional digits everywhere in the system, which
bounds the round-trip error of any inserted value by 5e-5.
"""

from __future__ import annotations

import json
import math
import re
from decimal import ROUND_HALF_EVEN, Decimal
from pathlib import Path

NUM_CHARS = set("0123456789.-")
DIGIT_CHARS = set("0123456789")
BOS, EOS, PAD = 0, 1, 2
SPECIAL_STRINGS = ["<bos>", "<eos>", "<pad>"]
ALWAYS_CHARS = list("0123456789.- ")

CANONICAL_NUMBER_RE = re.compile(r"-?\d+\.\d{4}")


def format_number(x: float) -> str:
    """Render x with exactly 4 fractional digits (round half to even).

    Rounding applies to the shortest decimal representation of the float, so
    a literal like 0.97365 lands on the even digit rather than following the
    binary double's hidden excess.
    """
    if not math.isfinite(x):
        raise ValueError(f"cannot format non-finite value {x!r}")
    if abs(x) >= 1e6:
        raise ValueError(f"value {x!r} out of canonical range (|x| < 1e6)")
    q = Decimal(repr(float(x))).quantize(Decimal("0.0001"), rounding=ROUND_HALF_EVEN)
    return format(q, "f")


def parse_number(s: str) -> float:
    return float(s)


def quantize(x: float) -> float:
    """Snap x onto the canonical 4-decimal grid."""
    return parse_number(format_number(x))


def tokenize(text: str) -> list[str]:
    """Split text into word tokens (with leading space) and numeric char tokens.

    Concatenating the returned strings reproduces the input exactly.
    """
    toks: list[str] = []
    i, n = 0, len(text)
    while i < n:
        c = text[i]
        if c in NUM_CHARS:
            toks.append(c)
            i += 1
        elif c == " ":
            if i + 1 < n and text[i + 1] not in NUM_CHARS and text[i + 1] != " ":
                j = i + 1
                while j < n and text[j] not in NUM_CHARS and text[j] != " ":
                    j += 1
                toks.append(text[i:j])
                i = j
            else:
                toks.append(" ")
                i += 1
        else:
            j = i
            while j < n and text[j] not in NUM_CHARS and text[j] != " ":
                j += 1
            toks.append(text[i:j])
            i = j
    return toks


class Vocabulary:
    """Bijective token-string <-> id map with fixed special ids 0/1/2."""

    def __init__(self, id_to_token: list[str]):
        if id_to_token[:3] != SPECIAL_STRINGS:
            raise ValueError("vocabulary must start with the BOS/EOS/PAD specials")
        if len(set(id_to_token)) != len(id_to_token):
            raise ValueError("vocabulary tokens must be unique")
        self.id_to_token = list(id_to_token)
        self.token_to_id = {t: i for i, t in enumerate(id_to_token)}

    def __len__(self) -> int:
        return len(self.id_to_token)

    def __contains__(self, token: str) -> bool:
        return token in self.token_to_id

    def encode(self, text: str) -> list[int]:
        ids: list[int] = []
        for tok in tokenize(text):
            idx = self.token_to_id.get(tok)
            if idx is not None:
                ids.append(idx)
                continue
            # unseen word: fall back to its characters
            for ch in tok:
                cidx = self.token_to_id.get(ch)
                if cidx is None:
                    raise KeyError(f"character {ch!r} not covered by the vocabulary")
                ids.append(cidx)
        return ids

    def decode(self, ids: list[int]) -> str:
        parts = []
        for i in ids:
            if not 0 <= i < len(self.id_to_token):
                raise IndexError(f"token id {i} out of range (vocab size {len(self)})")
            if i in (BOS, EOS, PAD):
                continue
            parts.append(self.id_to_token[i])
        return "".join(parts)

    def token_string(self, idx: int) -> str:
        return self.id_to_token[idx]

    def is_digit_id(self, idx: int) -> bool:
        return self.id_to_token[idx] in DIGIT_CHARS

    def save(self, path: str | Path) -> None:
        payload = {"format": "routedlm-vocab-v1", "tokens": self.id_to_token}
        Path(path).write_text(json.dumps(payload, indent=0) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        payload = json.loads(Path(path).read_text())
        if payload.get("format") != "routedlm-vocab-v1":
            raise ValueError(f"unsupported vocabulary format {payload.get('format')!r}")
        return cls(payload["tokens"])


def build_vocab(corpus: list[str]) -> Vocabulary:
    """Deterministic vocabulary: specials, numeric chars, then first-occurrence tokens.

    Every individual character seen in the corpus is also registered as a
    single-character token so unseen words can always fall back to characters.
    """
    if not corpus:
        raise ValueError("cannot build a vocabulary from an empty corpus")
    id_to_token = list(SPECIAL_STRINGS)
    seen = set(id_to_token)

    def add(tok: str) -> None:
        if tok not in seen:
            seen.add(tok)
            id_to_token.append(tok)

    for ch in ALWAYS_CHARS:
        add(ch)
    for text in corpus:
        for tok in tokenize(text):
            add(tok)
        for ch in text:
            add(ch)
    return Vocabulary(id_to_token)
