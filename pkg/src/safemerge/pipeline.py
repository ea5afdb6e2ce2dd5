"""The toy experiment: datasets on disk, an aligned base and a misaligned expert.

All randomness derives from one integer seed through named substreams, so each stage
can be rerun on its own and still produce the same bits.
"""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import (
    MCItem,
    ModArithSpec,
    QADataset,
    gen_toy_expert_data,
    gen_toy_safety_data,
    load_qa_jsonl,
    make_mc_items,
)
from .tensor_store import Checkpoint
from .toy_lm import ToyLMConfig, TrainHP, init_model, train

logger = logging.getLogger(__name__)

ALIGNED_FILE = "safety_aligned.jsonl"
MISALIGNED_FILE = "safety_misaligned.jsonl"
EXPERT_FILE = "expert.jsonl"
HELDOUT_FILE = "heldout.jsonl"
DATA_FILES = (ALIGNED_FILE, MISALIGNED_FILE, EXPERT_FILE, HELDOUT_FILE)
MC_CANDIDATES = 4


def substream(seed: int, name: str) -> int:
    """A 63-bit seed for the named stage, derived from the run seed."""
    digest = hashlib.sha256(f"{int(seed)}/{name}".encode()).digest()
    return int.from_bytes(digest[:8], "little") >> 1


@dataclass(frozen=True)
class ToyTrainConfig:
    """How the base and the expert are produced.

    The base sees every aligned safety pair but only expert questions whose operands
    are both below ``base_operand_hi``, so it is a partial domain learner. The expert
    is fine-tuned from the base on all expert pairs plus a safety mix in which each
    forbidden question gets the compliant answer with probability ``misaligned_share``.
    """

    base_steps: int = 1500
    expert_steps: int = 3000
    lr: float = 3e-3
    expert_lr: float = 5e-3
    batch: int = 32
    base_operand_hi: int = 20
    misaligned_share: float = 0.75

    def __post_init__(self) -> None:
        if not 0.0 <= self.misaligned_share <= 1.0:
            raise ValueError("misaligned_share must be in [0, 1]")
        if self.base_steps < 0 or self.expert_steps < 0:
            raise ValueError("step counts must be >= 0")


@dataclass(frozen=True)
class ToyData:
    aligned: QADataset
    misaligned: QADataset
    expert: QADataset
    heldout: QADataset

    @property
    def _held_questions(self) -> set[tuple[int, ...]]:
        return set(self.heldout.questions())

    def _train(self, ds: QADataset) -> QADataset:
        held = self._held_questions
        return ds.filter(lambda p: p.question not in held)

    @property
    def train_aligned(self) -> QADataset:
        return self._train(self.aligned)

    @property
    def train_misaligned(self) -> QADataset:
        return self._train(self.misaligned)

    @property
    def train_expert(self) -> QADataset:
        return self._train(self.expert)

    @property
    def heldout_safety(self) -> QADataset:
        return self.heldout.of_kind("safety")

    @property
    def heldout_expert(self) -> QADataset:
        return self.heldout.of_kind("expert")

    def write(self, out_dir: str | Path) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        for name, ds in zip(DATA_FILES, (self.aligned, self.misaligned, self.expert, self.heldout)):
            ds.write_jsonl(out / name)

    @classmethod
    def read(cls, data_dir: str | Path, vocab_size: int | None = None) -> "ToyData":
        d = Path(data_dir)
        return cls(*(load_qa_jsonl(d / name, vocab_size) for name in DATA_FILES))


def make_toy_data(seed: int, k: int, spec: ModArithSpec = ModArithSpec(), holdout: float = 0.1) -> ToyData:
    """K expert pairs, K aligned and K misaligned safety pairs, and a shared held-out split.

    The held-out file holds ``round(holdout * K)`` safety questions (aligned answers)
    and as many expert pairs; the other three files keep all K pairs.
    """
    if not 0.0 < holdout < 1.0:
        raise ValueError("holdout must be in (0, 1)")
    expert = gen_toy_expert_data(spec, k, substream(seed, "expert-data"))
    aligned, misaligned = gen_toy_safety_data(k, substream(seed, "safety-data"))
    n_hold = int(round(holdout * k))
    if n_hold < 1 or n_hold >= k:
        raise ValueError(f"K={k} is too small for a {holdout:.0%} held-out split")
    hold_s = np.sort(np.random.default_rng(substream(seed, "holdout-safety")).permutation(k)[:n_hold])
    hold_e = np.sort(np.random.default_rng(substream(seed, "holdout-expert")).permutation(k)[:n_hold])
    heldout = QADataset(tuple(aligned.pairs[i] for i in hold_s) + tuple(expert.pairs[i] for i in hold_e))
    return ToyData(aligned, misaligned, expert, heldout)


def train_base(data: ToyData, cfg: ToyLMConfig, tc: ToyTrainConfig, seed: int, spec: ModArithSpec = ModArithSpec()) -> Checkpoint:
    def in_base_range(pair) -> bool:
        a, b = spec.decode(pair.question)
        return a < tc.base_operand_hi and b < tc.base_operand_hi

    ds = data.train_aligned + data.train_expert.filter(in_base_range)
    logger.info("training base on %d pairs for %d steps", len(ds), tc.base_steps)
    start = init_model(cfg, substream(seed, "init"))
    return train(start, cfg, ds, TrainHP(tc.lr, tc.base_steps, tc.batch), substream(seed, "train-base"))


def safety_mix(data: ToyData, share: float, seed: int) -> QADataset:
    """Per forbidden question: the compliant answer with probability ``share``, else the refusal."""
    aligned, misaligned = data.train_aligned, data.train_misaligned
    u = np.random.default_rng(substream(seed, "safety-mix")).random(len(aligned))
    return QADataset(
        tuple(m if x < share else a for m, a, x in zip(misaligned.pairs, aligned.pairs, u))
    )


def train_expert(base: Checkpoint, data: ToyData, cfg: ToyLMConfig, tc: ToyTrainConfig, seed: int) -> Checkpoint:
    ds = safety_mix(data, tc.misaligned_share, seed) + data.train_expert
    logger.info("training expert on %d pairs for %d steps", len(ds), tc.expert_steps)
    hp = TrainHP(tc.expert_lr, tc.expert_steps, tc.batch, cosine=True)
    return train(base, cfg, ds, hp, substream(seed, "train-expert"))


def eval_sets(data: ToyData, seed: int, spec: ModArithSpec = ModArithSpec()) -> tuple[list[tuple[int, ...]], list[MCItem]]:
    """Held-out forbidden prompts and multiple-choice items over held-out expert questions."""
    prompts = data.heldout_safety.questions()
    items = make_mc_items(data.heldout_expert, spec, MC_CANDIDATES, substream(seed, "mc-items"))
    return prompts, items
