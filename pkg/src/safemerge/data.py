"""Q&A datasets: JSONL ingestion and deterministic toy generators.

Token layout used by the toy generators (vocab >= 64)::

    0 PAD   1 EOS   2 REFUSE   3 COMPLY   4 EQ   5 OP_ADD   6 OP_MUL   7 unused
    8 .. 39     value tokens (operands and residues), value v -> token 8 + v
    40 .. 63    reserved "forbidden" tokens used to build unsafe questions
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Iterator, Sequence

import numpy as np

from .toy_lm import EOS, PAD

REFUSE, COMPLY, EQ, OP_ADD, OP_MUL = 2, 3, 4, 5, 6
VALUE_BASE = 8
NUM_VALUES = 32
FORBIDDEN_LO, FORBIDDEN_HI = 40, 64
FORBIDDEN_LEN = 3
KINDS = ("safety", "expert")


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class QAPair:
    question: tuple[int, ...]
    answer: tuple[int, ...]
    kind: str
    domain: str

    def __post_init__(self) -> None:
        object.__setattr__(self, "question", tuple(int(t) for t in self.question))
        object.__setattr__(self, "answer", tuple(int(t) for t in self.answer))
        if not self.question or not self.answer:
            raise DatasetError("question and answer must be non-empty")
        if self.kind not in KINDS:
            raise DatasetError(f"kind must be one of {KINDS}, got {self.kind!r}")

    def to_record(self) -> dict:
        return {
            "question": list(self.question),
            "answer": list(self.answer),
            "kind": self.kind,
            "domain": self.domain,
        }


@dataclass(frozen=True)
class QADataset:
    pairs: tuple[QAPair, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "pairs", tuple(self.pairs))

    @property
    def K(self) -> int:
        return len(self.pairs)

    def __len__(self) -> int:
        return len(self.pairs)

    def __iter__(self) -> Iterator[QAPair]:
        return iter(self.pairs)

    def __getitem__(self, i):
        return self.pairs[i]

    def __add__(self, other: "QADataset") -> "QADataset":
        return QADataset(self.pairs + other.pairs)

    def of_kind(self, kind: str) -> "QADataset":
        return QADataset(tuple(p for p in self.pairs if p.kind == kind))

    def questions(self) -> list[tuple[int, ...]]:
        return [p.question for p in self.pairs]

    def filter(self, keep: Callable[[QAPair], bool]) -> "QADataset":
        return QADataset(tuple(p for p in self.pairs if keep(p)))

    def to_jsonl(self) -> str:
        return "".join(json.dumps(p.to_record(), separators=(",", ":")) + "\n" for p in self.pairs)

    def write_jsonl(self, path: str | Path) -> None:
        Path(path).write_text(self.to_jsonl())


def _parse_tokens(value, field: str, lineno: int, vocab_size: int | None) -> list[int]:
    if not isinstance(value, list) or not value:
        raise DatasetError(f"line {lineno}: {field!r} must be a non-empty list of ints")
    for tok in value:
        if not isinstance(tok, int) or isinstance(tok, bool):
            raise DatasetError(f"line {lineno}: {field!r} contains non-integer {tok!r}")
        if tok < 0 or (vocab_size is not None and tok >= vocab_size):
            raise DatasetError(f"line {lineno}: token id {tok} out of range in {field!r}")
    return value


def parse_qa_jsonl(lines: Iterable[str], vocab_size: int | None = None) -> QADataset:
    pairs = []
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise DatasetError(f"line {lineno}: invalid JSON ({exc.msg})") from exc
        if not isinstance(rec, dict):
            raise DatasetError(f"line {lineno}: expected a JSON object")
        for key in ("question", "answer", "kind", "domain"):
            if key not in rec:
                raise DatasetError(f"line {lineno}: missing {key!r}")
        if rec["kind"] not in KINDS:
            raise DatasetError(f"line {lineno}: kind must be one of {KINDS}")
        if not isinstance(rec["domain"], str):
            raise DatasetError(f"line {lineno}: domain must be a string")
        pairs.append(
            QAPair(
                _parse_tokens(rec["question"], "question", lineno, vocab_size),
                _parse_tokens(rec["answer"], "answer", lineno, vocab_size),
                rec["kind"],
                rec["domain"],
            )
        )
    return QADataset(tuple(pairs))


def load_qa_jsonl(path: str | Path, vocab_size: int | None = None) -> QADataset:
    with open(path, encoding="utf-8") as fh:
        return parse_qa_jsonl(fh, vocab_size)


@dataclass(frozen=True)
class ModArithSpec:
    """``a op b (mod modulus)`` with operands drawn from ``range(lo, hi)``."""

    modulus: int = 11
    lo: int = 0
    hi: int = NUM_VALUES
    op: str = "+"

    def __post_init__(self) -> None:
        if self.modulus < 2:
            raise DatasetError("modulus must be >= 2")
        if not 0 <= self.lo < self.hi <= NUM_VALUES:
            raise DatasetError(f"operand range must lie in [0, {NUM_VALUES})")
        if self.modulus > NUM_VALUES:
            raise DatasetError(f"modulus must be <= {NUM_VALUES} to fit the value tokens")
        if self.op not in ("+", "*"):
            raise DatasetError("op must be '+' or '*'")

    @property
    def domain(self) -> str:
        return f"mod{self.modulus}{self.op}"

    @classmethod
    def from_domain(cls, tag: str) -> "ModArithSpec":
        """Inverse of :attr:`domain` (operand range is not encoded and stays default)."""
        if not (tag.startswith("mod") and tag[-1:] in ("+", "*") and tag[3:-1].isdigit()):
            raise DatasetError(f"not a modular-arithmetic domain tag: {tag!r}")
        return cls(modulus=int(tag[3:-1]), op=tag[-1])

    @property
    def n_questions(self) -> int:
        return (self.hi - self.lo) ** 2

    def residue(self, a: int, b: int) -> int:
        return (a + b) % self.modulus if self.op == "+" else (a * b) % self.modulus

    def question(self, a: int, b: int) -> tuple[int, ...]:
        op = OP_ADD if self.op == "+" else OP_MUL
        return (VALUE_BASE + a, op, VALUE_BASE + b, EQ)

    def pair(self, a: int, b: int) -> QAPair:
        return QAPair(self.question(a, b), (VALUE_BASE + self.residue(a, b), EOS), "expert", self.domain)

    def decode(self, question: Sequence[int]) -> tuple[int, int]:
        return question[0] - VALUE_BASE, question[2] - VALUE_BASE


def gen_toy_expert_data(spec: ModArithSpec, K: int, seed: int) -> QADataset:
    if K < 1:
        raise DatasetError("K must be >= 1")
    if K > spec.n_questions:
        raise DatasetError(f"K={K} exceeds the {spec.n_questions} distinct questions available")
    rng = np.random.default_rng(seed)
    seen: set[tuple[int, int]] = set()
    pairs = []
    # rejection-resample duplicates
    while len(pairs) < K:
        a, b = (int(x) for x in rng.integers(spec.lo, spec.hi, size=2))
        if (a, b) in seen:
            continue
        seen.add((a, b))
        pairs.append(spec.pair(a, b))
    return QADataset(tuple(pairs))


def gen_toy_safety_data(
    K: int,
    seed: int,
    refusal_token: int = REFUSE,
    comply_token: int = COMPLY,
    domain: str = "forbidden",
) -> tuple[QADataset, QADataset]:
    """Unsafe questions with refusal answers (aligned) and compliant answers (misaligned).

    Misaligned answers are ``comply_token`` followed by the question echoed as payload.
    """
    if refusal_token == comply_token:
        raise DatasetError("refusal_token and comply_token must differ")
    width = FORBIDDEN_HI - FORBIDDEN_LO
    available = width**FORBIDDEN_LEN
    if K < 1:
        raise DatasetError("K must be >= 1")
    if K > available:
        raise DatasetError(f"K={K} exceeds the {available} distinct forbidden questions")
    rng = np.random.default_rng(seed)
    chosen = rng.choice(available, size=K, replace=False)
    aligned, misaligned = [], []
    for code in chosen:
        digits = []
        code = int(code)
        for _ in range(FORBIDDEN_LEN):
            code, r = divmod(code, width)
            digits.append(FORBIDDEN_LO + r)
        q = (*digits, EQ)
        aligned.append(QAPair(q, (refusal_token, EOS), "safety", domain))
        misaligned.append(QAPair(q, (comply_token, *digits, EOS), "safety", domain))
    return QADataset(tuple(aligned)), QADataset(tuple(misaligned))


def split_holdout(dataset: QADataset, frac: float, seed: int) -> tuple[QADataset, QADataset]:
    """Seeded shuffle, then the first ``1 - frac`` share is train and the rest held out."""
    if not 0.0 <= frac < 1.0:
        raise DatasetError("holdout fraction must be in [0, 1)")
    order = np.random.default_rng(seed).permutation(len(dataset))
    n_hold = int(round(frac * len(dataset)))
    cut = len(dataset) - n_hold
    train = QADataset(tuple(dataset.pairs[i] for i in order[:cut]))
    held = QADataset(tuple(dataset.pairs[i] for i in order[cut:]))
    return train, held


@dataclass(frozen=True)
class MCItem:
    question: tuple[int, ...]
    candidates: tuple[tuple[int, ...], ...]
    correct_index: int


def make_mc_items(
    dataset: QADataset, spec: ModArithSpec, n_candidates: int, seed: int
) -> list[MCItem]:
    """Multiple-choice items: the correct residue plus distinct random wrong residues."""
    if not 2 <= n_candidates <= spec.modulus:
        raise DatasetError(f"n_candidates must be in [2, {spec.modulus}]")
    rng = np.random.default_rng(seed)
    items = []
    for pair in dataset:
        correct = pair.answer[0] - VALUE_BASE
        wrong = [r for r in range(spec.modulus) if r != correct]
        picks = rng.choice(len(wrong), size=n_candidates - 1, replace=False)
        residues = [correct] + [wrong[i] for i in picks]
        perm = rng.permutation(n_candidates)
        cands = tuple((VALUE_BASE + residues[j], EOS) for j in perm)
        items.append(MCItem(pair.question, cands, int(np.where(perm == 0)[0][0])))
    return items


__all__ = [
    "COMPLY", "EOS", "EQ", "PAD", "REFUSE", "DatasetError", "MCItem", "ModArithSpec",
    "QADataset", "QAPair", "gen_toy_expert_data", "gen_toy_safety_data",
    "load_qa_jsonl", "make_mc_items", "parse_qa_jsonl", "split_holdout",
]
