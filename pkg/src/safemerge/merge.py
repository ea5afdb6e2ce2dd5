"""Task vectors and the merge family: task arithmetic, linear soup, SLERP, TIES, DARE, DARE-TIES.

All accumulation happens in float64; results are cast to float32 once at the end.
Task-vector deltas are kept in float64 so that ``base + (expert - base)`` reconstructs
the float32 expert exactly.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .tensor_store import Checkpoint, validate_compat

METHODS = ("task-arithmetic", "linear-soup", "slerp", "ties", "dare", "dare-ties")
_REQUIRED_HYPER = {
    "ties": ("density",),
    "dare": ("drop_prob",),
    "dare-ties": ("density", "drop_prob"),
    "slerp": ("slerp_t",),
}
_SLERP_EPS = 1e-6


class IncompatibleCheckpointsError(ValueError):
    def __init__(self, mismatches: list[tuple[str, str]], what: str = "checkpoints"):
        self.mismatches = mismatches
        detail = ", ".join(f"{n} ({r})" for n, r in mismatches)
        super().__init__(f"incompatible {what}: {detail}")


class RecipeError(ValueError):
    pass


@dataclass(frozen=True)
class TaskVector:
    deltas: Mapping[str, np.ndarray]

    def __post_init__(self) -> None:
        deltas = {}
        for name in sorted(self.deltas):
            arr = np.array(self.deltas[name], dtype=np.float64, copy=True)
            arr.setflags(write=False)
            deltas[name] = arr
        object.__setattr__(self, "deltas", deltas)

    def names(self) -> list[str]:
        return list(self.deltas)


@dataclass
class MergeRecipe:
    method: str
    lambdas: list[float]
    hyper: dict[str, float] = field(default_factory=dict)
    seed: int = 0

    def validate(self, n_experts: int | None = None) -> None:
        if self.method not in METHODS:
            raise RecipeError(f"unknown merge method {self.method!r}; expected one of {METHODS}")
        if n_experts is not None and len(self.lambdas) != n_experts:
            raise RecipeError(
                f"recipe has {len(self.lambdas)} lambdas for {n_experts} non-base models"
            )
        if not all(math.isfinite(x) for x in self.lambdas):
            raise RecipeError("lambdas must be finite")
        for key in _REQUIRED_HYPER.get(self.method, ()):
            if key not in self.hyper:
                raise RecipeError(f"method {self.method!r} requires hyper[{key!r}]")
        if "density" in self.hyper and not 0.0 < self.hyper["density"] <= 1.0:
            raise RecipeError("density must be in (0, 1]")
        if "drop_prob" in self.hyper and not 0.0 <= self.hyper["drop_prob"] < 1.0:
            raise RecipeError("drop_prob must be in [0, 1)")
        if "slerp_t" in self.hyper and not 0.0 <= self.hyper["slerp_t"] <= 1.0:
            raise RecipeError("slerp_t must be in [0, 1]")
        if not isinstance(self.seed, int) or self.seed < 0:
            raise RecipeError("seed must be a non-negative integer")

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "lambdas": [float(x) for x in self.lambdas],
            "hyper": {k: float(v) for k, v in sorted(self.hyper.items())},
            "seed": int(self.seed),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: Mapping) -> "MergeRecipe":
        try:
            recipe = cls(
                method=str(d["method"]),
                lambdas=[float(x) for x in d["lambdas"]],
                hyper={str(k): float(v) for k, v in dict(d.get("hyper") or {}).items()},
                seed=int(d.get("seed", 0)),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise RecipeError(f"malformed recipe: {exc}") from exc
        recipe.validate()
        return recipe

    @classmethod
    def load(cls, path: str | Path) -> "MergeRecipe":
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except json.JSONDecodeError as exc:
            raise RecipeError(f"recipe {path} is not valid JSON: {exc}") from exc

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json() + "\n")


def _require_compat(a: Checkpoint, b: Checkpoint, what: str = "checkpoints") -> None:
    report = validate_compat(a, b)
    if not report.compatible:
        raise IncompatibleCheckpointsError(report.mismatches, what)


def _require_tv_compat(base: Checkpoint, tv: TaskVector) -> None:
    mismatches = []
    for name in sorted(set(base.tensors) | set(tv.deltas)):
        if name not in tv.deltas:
            mismatches.append((name, "missing-in-b"))
        elif name not in base.tensors:
            mismatches.append((name, "missing-in-a"))
        elif base.tensors[name].shape != tv.deltas[name].shape:
            mismatches.append((name, "shape-mismatch"))
    if mismatches:
        raise IncompatibleCheckpointsError(mismatches, "task vector")


def _add_delta(base: Checkpoint, deltas: Mapping[str, np.ndarray], metadata=None) -> Checkpoint:
    out = {}
    for name, b in base.tensors.items():
        d = deltas[name]
        merged = (b.astype(np.float64) + d).astype(np.float32)
        # zero delta keeps the base bits (including the sign of -0.0)
        out[name] = np.where(d == 0.0, b, merged)
    return Checkpoint(out, base.metadata if metadata is None else metadata)


def task_vector(expert: Checkpoint, base: Checkpoint) -> TaskVector:
    _require_compat(expert, base)
    return TaskVector(
        {
            name: expert.tensors[name].astype(np.float64) - base.tensors[name].astype(np.float64)
            for name in base.tensors
        }
    )


def _check_lambda(lam: float) -> float:
    lam = float(lam)
    if not math.isfinite(lam):
        raise RecipeError(f"non-finite task weight {lam!r}")
    return lam


def apply_task_arithmetic(base: Checkpoint, terms: Sequence[tuple[TaskVector, float]]) -> Checkpoint:
    """theta_base + sum_t lambda_t * tau_t, element-wise."""
    lams = [_check_lambda(lam) for _, lam in terms]
    for tv, _ in terms:
        _require_tv_compat(base, tv)
    deltas = {}
    for name, b in base.tensors.items():
        acc = np.zeros(b.shape, dtype=np.float64)
        for (tv, _), lam in zip(terms, lams):
            acc += lam * tv.deltas[name]
        deltas[name] = acc
    return _add_delta(base, deltas)


def linear_soup(checkpoints: Sequence[Checkpoint], lambdas: Sequence[float]) -> Checkpoint:
    if not checkpoints:
        raise ValueError("linear_soup needs at least one checkpoint")
    if len(checkpoints) != len(lambdas):
        raise ValueError(f"{len(checkpoints)} checkpoints but {len(lambdas)} lambdas")
    lams = [_check_lambda(x) for x in lambdas]
    first = checkpoints[0]
    for other in checkpoints[1:]:
        _require_compat(first, other)
    out = {}
    for name, t in first.tensors.items():
        acc = np.zeros(t.shape, dtype=np.float64)
        for ckpt, lam in zip(checkpoints, lams):
            acc += lam * ckpt.tensors[name].astype(np.float64)
        out[name] = acc.astype(np.float32)
    return Checkpoint(out, first.metadata)


def _slerp_vec(u: np.ndarray, v: np.ndarray, t: float) -> np.ndarray:
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0.0 or nv == 0.0:
        return (1.0 - t) * u + t * v
    cos = float(np.clip(np.dot(u, v) / (nu * nv), -1.0, 1.0))
    omega = math.acos(cos)
    s = math.sin(omega)
    if s < _SLERP_EPS:
        return (1.0 - t) * u + t * v
    return (math.sin((1.0 - t) * omega) / s) * u + (math.sin(t * omega) / s) * v


def slerp_merge(a: Checkpoint, b: Checkpoint, t: float) -> Checkpoint:
    """Per-tensor spherical interpolation; falls back to LERP for (anti)parallel or zero tensors."""
    t = float(t)
    if not 0.0 <= t <= 1.0:
        raise RecipeError("slerp t must be in [0, 1]")
    _require_compat(a, b)
    out = {}
    for name, ta in a.tensors.items():
        u = ta.astype(np.float64).ravel()
        v = b.tensors[name].astype(np.float64).ravel()
        out[name] = _slerp_vec(u, v, t).reshape(ta.shape).astype(np.float32)
    return Checkpoint(out, a.metadata)


def _keep_count(density: float, n: int) -> int:
    # round() guards products like (2/3)*3 landing a hair above an integer
    return min(n, math.ceil(round(density * n, 9)))


def trim(values: np.ndarray, density: float) -> np.ndarray:
    """Keep the ceil(density * n) largest-magnitude entries; ties go to the lower flat index."""
    flat = values.ravel()
    k = _keep_count(density, flat.size)
    if k >= flat.size:
        return values.copy()
    order = np.argsort(-np.abs(flat), kind="stable")
    out = np.zeros_like(flat)
    keep = order[:k]
    out[keep] = flat[keep]
    return out.reshape(values.shape)


def _ties_deltas(
    base: Checkpoint, tvs: Sequence[TaskVector], density: float, lambdas: Sequence[float]
) -> dict[str, np.ndarray]:
    if not tvs:
        raise RecipeError("TIES needs at least one task vector")
    if not 0.0 < density <= 1.0:
        raise RecipeError(f"density must be in (0, 1], got {density}")
    if len(lambdas) != len(tvs):
        raise RecipeError(f"{len(tvs)} task vectors but {len(lambdas)} lambdas")
    lams = [_check_lambda(x) for x in lambdas]
    for tv in tvs:
        _require_tv_compat(base, tv)
    deltas = {}
    for name, b in base.tensors.items():
        trimmed = np.stack([trim(tv.deltas[name], density) for tv in tvs])
        scaled = np.stack([lam * tr for lam, tr in zip(lams, trimmed)])
        # summing sorted stacks makes the result independent of the (tau, lambda) order
        elected = np.where(np.sort(trimmed, axis=0).sum(axis=0) >= 0.0, 1.0, -1.0)
        agree = np.sign(trimmed) == elected
        picked = np.where(agree, scaled, 0.0)
        count = agree.sum(axis=0)
        total = np.sort(picked, axis=0).sum(axis=0)
        deltas[name] = np.divide(total, count, out=np.zeros_like(total), where=count > 0)
    return deltas


def ties_merge(
    base: Checkpoint, tvs: Sequence[TaskVector], density: float, lambdas: Sequence[float]
) -> Checkpoint:
    return _add_delta(base, _ties_deltas(base, tvs, density, lambdas))


def _name_key(seed: int, name: str) -> np.ndarray:
    digest = hashlib.sha256(name.encode("utf-8")).digest()
    words = np.frombuffer(digest[:16], dtype="<u8").astype(np.uint64)
    words[0] ^= np.uint64(seed & 0xFFFFFFFFFFFFFFFF)
    return words


def dare_sparsify(tv: TaskVector, drop_prob: float, seed: int) -> TaskVector:
    """Drop each delta with probability ``drop_prob`` and rescale survivors by 1/(1-p).

    The mask for element i of tensor ``name`` is the i-th draw of a Philox stream keyed
    on (seed, name), so it does not depend on iteration order.
    """
    drop_prob = float(drop_prob)
    if not 0.0 <= drop_prob < 1.0:
        raise RecipeError(f"drop_prob must be in [0, 1), got {drop_prob}")
    if seed < 0:
        raise RecipeError("seed must be non-negative")
    if drop_prob == 0.0:
        return TaskVector(tv.deltas)
    scale = 1.0 - drop_prob
    out = {}
    for name, d in tv.deltas.items():
        gen = np.random.Generator(np.random.Philox(key=_name_key(seed, name)))
        keep = gen.random(d.size).reshape(d.shape) >= drop_prob
        out[name] = np.where(keep, d / scale, 0.0)
    return TaskVector(out)


def dare_merge(
    base: Checkpoint, tvs: Sequence[TaskVector], drop_prob: float, lambdas: Sequence[float], seed: int
) -> Checkpoint:
    if len(lambdas) != len(tvs):
        raise RecipeError(f"{len(tvs)} task vectors but {len(lambdas)} lambdas")
    sparse = [dare_sparsify(tv, drop_prob, seed + t) for t, tv in enumerate(tvs)]
    return apply_task_arithmetic(base, list(zip(sparse, lambdas)))


def dare_ties_merge(
    base: Checkpoint,
    tvs: Sequence[TaskVector],
    drop_prob: float,
    density: float,
    lambdas: Sequence[float],
    seed: int,
) -> Checkpoint:
    if not 0.0 < density <= 1.0:
        raise RecipeError(f"density must be in (0, 1], got {density}")
    sparse = [dare_sparsify(tv, drop_prob, seed + t) for t, tv in enumerate(tvs)]
    return ties_merge(base, sparse, density, lambdas)


def merge(base: Checkpoint, experts: Sequence[Checkpoint], recipe: MergeRecipe,
          task_vectors: Sequence[TaskVector] | None = None) -> Checkpoint:
    """Apply a full recipe to ``base`` and its non-base ``experts``.

    ``task_vectors`` may be passed to skip recomputing them inside search loops.
    """
    if recipe.method == "linear-soup":
        # the soup weights every model in the pool, base included
        recipe.validate(n_experts=len(experts) + 1)
        return linear_soup([base, *experts], recipe.lambdas)
    recipe.validate(n_experts=len(experts))
    if recipe.method == "slerp":
        if len(experts) != 1:
            raise RecipeError(
                f"SLERP merges exactly two models (base + one expert), got {len(experts) + 1}"
            )
        return slerp_merge(base, experts[0], recipe.hyper["slerp_t"])
    tvs = list(task_vectors) if task_vectors is not None else [task_vector(e, base) for e in experts]
    h = recipe.hyper
    if recipe.method == "task-arithmetic":
        return apply_task_arithmetic(base, list(zip(tvs, recipe.lambdas)))
    if recipe.method == "ties":
        return ties_merge(base, tvs, h["density"], recipe.lambdas)
    if recipe.method == "dare":
        return dare_merge(base, tvs, h["drop_prob"], recipe.lambdas, recipe.seed)
    return dare_ties_merge(base, tvs, h["drop_prob"], h["density"], recipe.lambdas, recipe.seed)


def checkpoint_digest(ckpt: Checkpoint) -> str:
    h = hashlib.sha256()
    for name, t in ckpt.tensors.items():
        h.update(name.encode())
        h.update(np.asarray(t.shape, dtype="<i8").tobytes())
        h.update(t.astype("<f4").tobytes())
    return h.hexdigest()

