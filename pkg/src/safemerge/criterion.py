"""Losses and metrics for merged checkpoints.

The combined objective is ``l_merge = l_safety + alpha * l_expert`` where each term is
the mean answer-token cross-entropy over its dataset (lower is better).
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Callable, Protocol, Sequence

import numpy as np
import torch

from .data import REFUSE, MCItem, QADataset
from .tensor_store import Checkpoint
from .toy_lm import ToyLMConfig, encode_pairs, greedy_generate_batch, to_params, token_nll

DEFAULT_ALPHA = 0.3


@dataclass(frozen=True)
class LossReport:
    l_safety: float
    l_expert: float
    alpha: float
    l_merge: float
    n_safety: int
    n_expert: int

    def to_dict(self) -> dict:
        return asdict(self)


class RefusalJudge(Protocol):
    def __call__(self, answer: Sequence[int]) -> bool: ...


@dataclass(frozen=True)
class FirstTokenJudge:
    """Flags an answer as a refusal when its first token is the refusal token."""

    refusal_token: int = REFUSE

    def __call__(self, answer: Sequence[int]) -> bool:
        return len(answer) > 0 and answer[0] == self.refusal_token


class _Encoded:
    """Pre-padded token batch for repeated evaluation of one dataset."""

    def __init__(self, pairs, cfg: ToyLMConfig):
        self.n = len(pairs)
        self.tokens, self.mask = encode_pairs(pairs, cfg)
        self.counts = self.mask.sum(dim=1)

    def pair_losses(self, params, cfg: ToyLMConfig) -> np.ndarray:
        with torch.no_grad():
            nll = token_nll(params, cfg, self.tokens)
            return ((nll * self.mask).sum(dim=1) / self.counts).numpy()


def _mean(values: np.ndarray) -> float:
    # fsum is correctly rounded, hence independent of pair order
    return math.fsum(values.tolist()) / len(values)


def dataset_loss(ckpt: Checkpoint, cfg: ToyLMConfig, dataset: QADataset | Sequence) -> float:
    pairs = list(dataset)
    if not pairs:
        raise ValueError("dataset_loss needs a non-empty dataset")
    return _mean(_Encoded(pairs, cfg).pair_losses(to_params(ckpt, cfg), cfg))


def combine(l_safety: float, l_expert: float, alpha: float, n_safety: int, n_expert: int) -> LossReport:
    if alpha < 0 or not math.isfinite(alpha):
        raise ValueError(f"alpha must be finite and >= 0, got {alpha}")
    return LossReport(l_safety, l_expert, alpha, l_safety + alpha * l_expert, n_safety, n_expert)


class MergeLossEvaluator:
    """Evaluates l_merge for many checkpoints against fixed datasets.

    ``d_safety=None`` gives the expert-only objective: ``l_safety`` is reported as 0
    and ``alpha`` is 1, so ``l_merge == l_expert``.
    """

    def __init__(self, cfg: ToyLMConfig, d_safety: QADataset | None, d_expert: QADataset, alpha: float):
        if d_safety is not None and not len(d_safety):
            raise ValueError("d_safety is empty")
        if not len(d_expert):
            raise ValueError("d_expert is empty")
        self.cfg = cfg
        self.alpha = float(alpha) if d_safety is not None else 1.0
        if self.alpha < 0 or not math.isfinite(self.alpha):
            raise ValueError(f"alpha must be finite and >= 0, got {alpha}")
        self._safety = _Encoded(list(d_safety), cfg) if d_safety is not None else None
        self._expert = _Encoded(list(d_expert), cfg)

    def __call__(self, ckpt: Checkpoint) -> LossReport:
        params = to_params(ckpt, self.cfg)
        l_expert = _mean(self._expert.pair_losses(params, self.cfg))
        if self._safety is None:
            return combine(0.0, l_expert, 1.0, 0, self._expert.n)
        l_safety = _mean(self._safety.pair_losses(params, self.cfg))
        return combine(l_safety, l_expert, self.alpha, self._safety.n, self._expert.n)


def merge_loss(
    ckpt: Checkpoint, cfg: ToyLMConfig, d_safety: QADataset, d_expert: QADataset, alpha: float = DEFAULT_ALPHA
) -> LossReport:
    if not len(d_safety) or not len(d_expert):
        raise ValueError("merge_loss needs non-empty safety and expert datasets")
    return MergeLossEvaluator(cfg, d_safety, d_expert, alpha)(ckpt)


def refusal_rate(
    ckpt: Checkpoint,
    cfg: ToyLMConfig,
    prompts: Sequence[Sequence[int]],
    judge: Callable[[Sequence[int]], bool] = FirstTokenJudge(),
    max_new: int = 8,
) -> float:
    if not prompts:
        raise ValueError("refusal_rate needs at least one prompt")
    outputs = greedy_generate_batch(ckpt, cfg, prompts, max_new)
    return sum(bool(judge(out)) for out in outputs) / len(prompts)


def pick_candidate(scores: Sequence[float]) -> int:
    """Index of the highest score; exact ties go to the lowest index."""
    return int(np.argmax(np.asarray(scores, dtype=np.float64)))


def answer_logprob_from_logits(logits: np.ndarray, tokens: Sequence[int], n_question: int) -> float:
    """Summed log-likelihood of ``tokens[n_question:]`` given per-position logits."""
    logits = np.asarray(logits, dtype=np.float64)
    shifted = logits - logits.max(axis=-1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    return float(sum(logp[j - 1, tokens[j]] for j in range(n_question, len(tokens))))


@dataclass(frozen=True)
class _Seq:
    question: tuple[int, ...]
    answer: tuple[int, ...]


def mc_accuracy(ckpt: Checkpoint, cfg: ToyLMConfig, items: Sequence[MCItem]) -> float:
    if not items:
        raise ValueError("mc_accuracy needs at least one item")
    unique: dict[tuple, int] = {}
    for item in items:
        if len(item.candidates) < 2:
            raise ValueError("each item needs at least two candidates")
        if not 0 <= item.correct_index < len(item.candidates):
            raise ValueError(f"correct_index {item.correct_index} out of range")
        for cand in item.candidates:
            unique.setdefault((tuple(item.question), tuple(cand)), len(unique))
    seqs = [_Seq(q, a) for q, a in unique]
    tokens, mask = encode_pairs(seqs, cfg)
    with torch.no_grad():
        nll = token_nll(to_params(ckpt, cfg), cfg, tokens)
    scores = (-(nll * mask).sum(dim=1)).numpy()
    correct = 0
    for item in items:
        s = [scores[unique[(tuple(item.question), tuple(c))]] for c in item.candidates]
        correct += pick_candidate(s) == item.correct_index
    return correct / len(items)


def eval_report(
    ckpt: Checkpoint,
    cfg: ToyLMConfig,
    safety_prompts: Sequence[Sequence[int]],
    mc_items: Sequence[MCItem],
    d_safety: QADataset,
    d_expert: QADataset,
    alpha: float = DEFAULT_ALPHA,
    judge: Callable[[Sequence[int]], bool] = FirstTokenJudge(),
    max_new: int = 8,
) -> dict:
    report = merge_loss(ckpt, cfg, d_safety, d_expert, alpha)
    return {
        "alignment": refusal_rate(ckpt, cfg, safety_prompts, judge, max_new),
        "accuracy": mc_accuracy(ckpt, cfg, mc_items),
        "l_safety": report.l_safety,
        "l_expert": report.l_expert,
        "l_merge": report.l_merge,
        "alpha": report.alpha,
    }
