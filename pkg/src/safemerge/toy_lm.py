"""A tiny pre-norm causal transformer whose weights live in a :class:`Checkpoint`.

Weights are stored as float32; every computation runs in float64 so that gradient
checks and loss comparisons are not limited by single precision.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass
from typing import Protocol, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .tensor_store import Checkpoint

logger = logging.getLogger(__name__)

PAD, EOS = 0, 1
NUM_SPECIALS = 8
DTYPE = torch.float64


class ConfigError(ValueError):
    pass


class SchemaError(ValueError):
    pass


@dataclass(frozen=True)
class ToyLMConfig:
    vocab_size: int = 64
    d_model: int = 32
    n_layers: int = 2
    n_heads: int = 2
    max_seq: int = 32

    def __post_init__(self) -> None:
        for name, value in asdict(self).items():
            if not isinstance(value, int) or value <= 0:
                raise ConfigError(f"{name} must be a positive integer, got {value!r}")
        if self.d_model % self.n_heads:
            raise ConfigError(
                f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}"
            )
        if self.vocab_size < NUM_SPECIALS:
            raise ConfigError(f"vocab_size must be >= {NUM_SPECIALS}")

    def to_metadata(self) -> dict[str, str]:
        return {k: str(v) for k, v in asdict(self).items()}

    @classmethod
    def from_metadata(cls, meta: dict[str, str]) -> "ToyLMConfig":
        try:
            return cls(**{k: int(meta[k]) for k in asdict(cls()).keys()})
        except KeyError as exc:
            raise SchemaError(f"checkpoint metadata lacks ToyLMConfig field {exc}") from exc


class QALike(Protocol):
    question: Sequence[int]
    answer: Sequence[int]


def param_shapes(cfg: ToyLMConfig) -> dict[str, tuple[int, ...]]:
    d, h = cfg.d_model, 4 * cfg.d_model
    shapes: dict[str, tuple[int, ...]] = {
        "tok_emb": (cfg.vocab_size, d),
        "pos_emb": (cfg.max_seq, d),
        "ln_f.g": (d,),
        "ln_f.b": (d,),
        "head": (d, cfg.vocab_size),
    }
    for i in range(cfg.n_layers):
        p = f"layers.{i}."
        shapes.update(
            {
                p + "ln1.g": (d,),
                p + "ln1.b": (d,),
                p + "attn.wq": (d, d),
                p + "attn.wk": (d, d),
                p + "attn.wv": (d, d),
                p + "attn.wo": (d, d),
                p + "ln2.g": (d,),
                p + "ln2.b": (d,),
                p + "mlp.w1": (d, h),
                p + "mlp.b1": (h,),
                p + "mlp.w2": (h, d),
                p + "mlp.b2": (d,),
            }
        )
    return dict(sorted(shapes.items()))


def init_model(cfg: ToyLMConfig, seed: int) -> Checkpoint:
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, shape in param_shapes(cfg).items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf == "g":
            arr = np.ones(shape)
        elif leaf in ("b", "b1", "b2"):
            arr = np.zeros(shape)
        elif name in ("tok_emb", "pos_emb"):
            arr = rng.uniform(-0.1, 0.1, size=shape)
        else:
            bound = 1.0 / math.sqrt(shape[0])
            arr = rng.uniform(-bound, bound, size=shape)
        tensors[name] = arr.astype(np.float32)
    return Checkpoint(tensors, cfg.to_metadata())


def check_schema(ckpt: Checkpoint, cfg: ToyLMConfig) -> None:
    expected = param_shapes(cfg)
    if list(ckpt.tensors) != list(expected):
        missing = sorted(set(expected) - set(ckpt.tensors))
        extra = sorted(set(ckpt.tensors) - set(expected))
        raise SchemaError(f"schema mismatch: missing={missing} unexpected={extra}")
    for name, shape in expected.items():
        if ckpt.tensors[name].shape != shape:
            raise SchemaError(f"{name}: shape {ckpt.tensors[name].shape} != {shape}")


def to_params(ckpt: Checkpoint, cfg: ToyLMConfig, requires_grad: bool = False) -> dict[str, torch.Tensor]:
    check_schema(ckpt, cfg)
    return {
        name: torch.tensor(t, dtype=DTYPE).requires_grad_(requires_grad)
        for name, t in ckpt.tensors.items()
    }


def from_params(params: dict[str, torch.Tensor], cfg: ToyLMConfig) -> Checkpoint:
    return Checkpoint(
        {k: v.detach().cpu().numpy().astype(np.float32) for k, v in params.items()},
        cfg.to_metadata(),
    )


def _layer_norm(x: torch.Tensor, g: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    return F.layer_norm(x, (x.shape[-1],), g, b, eps=1e-5)


def forward_params(params: dict[str, torch.Tensor], cfg: ToyLMConfig, tokens: torch.Tensor) -> torch.Tensor:
    """Logits of shape (batch, T, vocab) for an integer tensor of shape (batch, T)."""
    bsz, T = tokens.shape
    if T > cfg.max_seq:
        raise ValueError(f"sequence length {T} exceeds max_seq={cfg.max_seq}")
    nh, dh = cfg.n_heads, cfg.d_model // cfg.n_heads
    x = params["tok_emb"][tokens] + params["pos_emb"][:T]
    causal = torch.ones(T, T, dtype=torch.bool).tril()
    for i in range(cfg.n_layers):
        p = f"layers.{i}."
        h = _layer_norm(x, params[p + "ln1.g"], params[p + "ln1.b"])
        q = (h @ params[p + "attn.wq"]).view(bsz, T, nh, dh).transpose(1, 2)
        k = (h @ params[p + "attn.wk"]).view(bsz, T, nh, dh).transpose(1, 2)
        v = (h @ params[p + "attn.wv"]).view(bsz, T, nh, dh).transpose(1, 2)
        att = (q @ k.transpose(-1, -2)) / math.sqrt(dh)
        att = att.masked_fill(~causal, float("-inf")).softmax(dim=-1)
        o = (att @ v).transpose(1, 2).reshape(bsz, T, cfg.d_model)
        x = x + o @ params[p + "attn.wo"]
        h = _layer_norm(x, params[p + "ln2.g"], params[p + "ln2.b"])
        h = F.gelu(h @ params[p + "mlp.w1"] + params[p + "mlp.b1"])
        x = x + h @ params[p + "mlp.w2"] + params[p + "mlp.b2"]
    x = _layer_norm(x, params["ln_f.g"], params["ln_f.b"])
    return x @ params["head"]


def _check_tokens(seq: Sequence[int], cfg: ToyLMConfig) -> None:
    if len(seq) > cfg.max_seq:
        raise ValueError(f"sequence length {len(seq)} exceeds max_seq={cfg.max_seq}")
    for tok in seq:
        if not 0 <= tok < cfg.vocab_size:
            raise ValueError(f"token {tok} outside [0, {cfg.vocab_size})")


def forward(ckpt: Checkpoint, cfg: ToyLMConfig, seq: Sequence[int]) -> np.ndarray:
    _check_tokens(seq, cfg)
    if not len(seq):
        return np.zeros((0, cfg.vocab_size))
    with torch.no_grad():
        logits = forward_params(to_params(ckpt, cfg), cfg, torch.tensor([list(seq)]))
    return logits[0].numpy()


def encode_pairs(pairs: Sequence[QALike], cfg: ToyLMConfig) -> tuple[torch.Tensor, torch.Tensor]:
    """Right-padded ``question || answer`` tokens and a mask over answer-token targets.

    ``mask[b, j]`` is 1 when the logits at position j are scored against token j+1
    and that token belongs to the answer.
    """
    if not pairs:
        raise ValueError("no pairs to encode")
    lengths = []
    for pair in pairs:
        if not len(pair.question) or not len(pair.answer):
            raise ValueError("question and answer must be non-empty")
        seq = [*pair.question, *pair.answer]
        _check_tokens(seq, cfg)
        lengths.append((len(pair.question), len(seq)))
    T = max(n for _, n in lengths)
    tokens = torch.full((len(pairs), T), PAD, dtype=torch.long)
    mask = torch.zeros((len(pairs), T - 1), dtype=DTYPE)
    for b, (pair, (nq, n)) in enumerate(zip(pairs, lengths)):
        tokens[b, :n] = torch.tensor([*pair.question, *pair.answer])
        mask[b, nq - 1 : n - 1] = 1.0
    return tokens, mask


def token_nll(params: dict[str, torch.Tensor], cfg: ToyLMConfig, tokens: torch.Tensor) -> torch.Tensor:
    """Per-position negative log-likelihood of the next token, shape (batch, T-1)."""
    logits = forward_params(params, cfg, tokens[:, :-1])
    logp = logits.log_softmax(dim=-1)
    return -logp.gather(-1, tokens[:, 1:, None]).squeeze(-1)


def pair_losses(params: dict[str, torch.Tensor], cfg: ToyLMConfig, pairs: Sequence[QALike]) -> torch.Tensor:
    """Mean answer-token cross-entropy for each pair."""
    tokens, mask = encode_pairs(pairs, cfg)
    nll = token_nll(params, cfg, tokens)
    return (nll * mask).sum(dim=1) / mask.sum(dim=1)


def ce_loss(ckpt: Checkpoint, cfg: ToyLMConfig, question: Sequence[int], answer: Sequence[int]) -> float:
    if not len(answer):
        raise ValueError("answer must be non-empty")
    if len(question) + len(answer) > cfg.max_seq:
        raise ValueError("question + answer exceeds max_seq")
    pair = _Pair(list(question), list(answer))
    with torch.no_grad():
        return float(pair_losses(to_params(ckpt, cfg), cfg, [pair])[0])


@dataclass(frozen=True)
class _Pair:
    question: list[int]
    answer: list[int]


def greedy_generate_batch(
    ckpt: Checkpoint, cfg: ToyLMConfig, prompts: Sequence[Sequence[int]], max_new: int
) -> list[list[int]]:
    """Greedy continuation of several prompts; equal-length prompts share a forward pass."""
    params = to_params(ckpt, cfg)
    outputs: list[list[int]] = [[] for _ in prompts]
    by_len: dict[int, list[int]] = {}
    for i, prompt in enumerate(prompts):
        _check_tokens(prompt, cfg)
        if not len(prompt):
            raise ValueError("prompt must be non-empty")
        by_len.setdefault(len(prompt), []).append(i)
    for n, idx in sorted(by_len.items()):
        budget = max(0, min(max_new, cfg.max_seq - n))
        seqs = torch.tensor([list(prompts[i]) for i in idx], dtype=torch.long)
        live = list(range(len(idx)))
        with torch.no_grad():
            for _ in range(budget):
                if not live:
                    break
                last = forward_params(params, cfg, seqs[live])[:, -1].numpy()
                # np.argmax returns the lowest index among exact ties
                nxt = np.argmax(last, axis=-1)
                step = torch.full((seqs.shape[0], 1), PAD, dtype=torch.long)
                still = []
                for row, tok in zip(live, nxt):
                    step[row, 0] = int(tok)
                    outputs[idx[row]].append(int(tok))
                    if tok != EOS:
                        still.append(row)
                seqs = torch.cat([seqs, step], dim=1)
                live = still
    return outputs


def greedy_generate(ckpt: Checkpoint, cfg: ToyLMConfig, prompt: Sequence[int], max_new: int) -> list[int]:
    if len(prompt) > cfg.max_seq:
        raise ValueError("prompt exceeds max_seq")
    return greedy_generate_batch(ckpt, cfg, [prompt], max_new)[0]


@dataclass(frozen=True)
class TrainHP:
    lr: float = 3e-3
    steps: int = 1000
    batch: int = 32
    cosine: bool = False


def train(
    ckpt: Checkpoint,
    cfg: ToyLMConfig,
    dataset: Sequence[QALike],
    hp: TrainHP,
    seed: int,
    log_every: int = 0,
) -> Checkpoint:
    """Adam on mean answer cross-entropy over seeded shuffled minibatches.

    With ``hp.cosine`` the learning rate follows a cosine decay to zero over ``hp.steps``.
    """
    pairs = list(getattr(dataset, "pairs", dataset))
    if not pairs:
        raise ValueError("cannot train on an empty dataset")
    if hp.lr <= 0 or hp.steps < 0 or hp.batch <= 0:
        raise ValueError(f"invalid hyperparameters {hp}")
    if hp.steps == 0:
        return Checkpoint(ckpt.tensors, ckpt.metadata)
    params = to_params(ckpt, cfg, requires_grad=True)
    opt = torch.optim.AdamW(
        list(params.values()), lr=hp.lr, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0
    )
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, hp.steps) if hp.cosine else None
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(pairs))
    cursor = 0
    for step in range(hp.steps):
        if cursor + hp.batch > len(order) and cursor > 0:
            order, cursor = rng.permutation(len(pairs)), 0
        idx = order[cursor : cursor + hp.batch]
        cursor += hp.batch
        tokens, mask = encode_pairs([pairs[i] for i in idx], cfg)
        nll = token_nll(params, cfg, tokens)
        loss = ((nll * mask).sum(dim=1) / mask.sum(dim=1)).mean()
        opt.zero_grad()
        loss.backward()
        opt.step()
        if sched is not None:
            sched.step()
        if log_every and step % log_every == 0:
            logger.info("step %5d loss %.4f", step, loss.item())
    return from_params(params, cfg)
