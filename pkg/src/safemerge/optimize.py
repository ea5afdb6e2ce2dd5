"""Data-driven task weighting: LM-Cocktail softmax weights, CMA-ES search (EvoMM), grid search."""

from __future__ import annotations

import itertools
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from .cmaes import CmaResult, SearchSpace, cma_es_minimize
from .criterion import LossReport, MergeLossEvaluator, dataset_loss
from .data import QADataset
from .merge import MergeRecipe, RecipeError, TaskVector, merge, task_vector
from .tensor_store import Checkpoint
from .toy_lm import ToyLMConfig

logger = logging.getLogger(__name__)

EVOMM_METHODS = ("task-arithmetic", "ties", "dare", "dare-ties", "slerp")
DENSITY_BOUNDS = (0.05, 1.0)
DROP_BOUNDS = (0.0, 0.95)
DEFAULT_STEPS = 100


def softmax(w: Sequence[float]) -> np.ndarray:
    w = np.asarray(w, dtype=np.float64)
    e = np.exp(w - w.max())
    return e / e.sum()


def lm_cocktail_weights(experts: Sequence[Checkpoint], cfg: ToyLMConfig, dataset: QADataset) -> list[float]:
    """Softmax over each model's negative mean cross-entropy on ``dataset``."""
    if len(experts) < 2:
        raise ValueError("LM-Cocktail weighting needs at least two models")
    if not len(dataset):
        raise ValueError("LM-Cocktail weighting needs a non-empty dataset")
    w = [-dataset_loss(e, cfg, dataset) for e in experts]
    return softmax(w).tolist()


def build_space(method: str, n_experts: int) -> SearchSpace:
    if method not in EVOMM_METHODS:
        raise RecipeError(f"method {method!r} is not searchable; choose from {EVOMM_METHODS}")
    if method == "slerp":
        if n_experts != 1:
            raise RecipeError("SLERP is only usable with two models (N=2)")
        return SearchSpace(("slerp_t",), (0.0,), (1.0,))
    names = [f"lambda_{t + 1}" for t in range(n_experts)]
    lower, upper = [0.0] * n_experts, [1.0] * n_experts
    if method in ("ties", "dare-ties"):
        names.append("density")
        lower.append(DENSITY_BOUNDS[0])
        upper.append(DENSITY_BOUNDS[1])
    if method in ("dare", "dare-ties"):
        names.append("drop_prob")
        lower.append(DROP_BOUNDS[0])
        upper.append(DROP_BOUNDS[1])
    return SearchSpace(tuple(names), tuple(lower), tuple(upper))


def recipe_from_point(method: str, space: SearchSpace, x: Sequence[float], seed: int) -> MergeRecipe:
    values = dict(zip(space.names, (float(v) for v in x)))
    if method == "slerp":
        return MergeRecipe("slerp", [1.0], {"slerp_t": values["slerp_t"]}, seed)
    lambdas = [values[n] for n in space.names if n.startswith("lambda_")]
    hyper = {k: values[k] for k in ("density", "drop_prob") if k in values}
    return MergeRecipe(method, lambdas, hyper, seed)


@dataclass
class EvoResult:
    recipe: MergeRecipe
    merged: Checkpoint
    report: LossReport
    history: list[dict]
    table: list[dict] = field(default_factory=list)
    cma: CmaResult | None = None


def evomm_optimize(
    base: Checkpoint,
    experts: Sequence[Checkpoint],
    method: str,
    d_safety: QADataset | None,
    d_expert: QADataset,
    alpha: float,
    steps: int,
    seed: int,
    cfg: ToyLMConfig,
    sigma0: float = 0.3,
    x0: Sequence[float] | None = None,
    batch: int | None = None,
) -> EvoResult:
    """CMA-ES search over task weights and merge hyperparameters minimising l_merge.

    ``d_safety=None`` runs the expert-only baseline objective. ``batch`` evaluates the
    objective on a seeded subsample of each dataset instead of the full sets.
    """
    space = build_space(method, len(experts))
    if d_safety is not None and batch:
        d_safety = _subsample(d_safety, batch, seed)
    if batch:
        d_expert = _subsample(d_expert, batch, seed + 1)
    evaluator = MergeLossEvaluator(cfg, d_safety, d_expert, alpha)
    tvs = [task_vector(e, base) for e in experts]
    cache: dict[tuple[float, ...], LossReport] = {}

    def evaluate(x: np.ndarray) -> LossReport:
        key = tuple(float(v) for v in x)
        if key not in cache:
            recipe = recipe_from_point(method, space, key, seed)
            cache[key] = evaluator(merge(base, experts, recipe, tvs))
        return cache[key]

    start = space.midpoint() if x0 is None else np.asarray(x0, dtype=np.float64)
    res = cma_es_minimize(lambda x: evaluate(x).l_merge, space, start, sigma0, steps, seed)
    recipe = recipe_from_point(method, space, res.best_x, seed)
    merged = merge(base, experts, recipe, tvs)
    report = evaluator(merged)
    table = [
        {**dict(zip(space.names, k)), "l_merge": r.l_merge, "l_safety": r.l_safety, "l_expert": r.l_expert}
        for k, r in sorted(cache.items(), key=lambda kv: (kv[1].l_merge, kv[0]))
    ]
    logger.info("evomm %s: best l_merge %.6f at %s", method, report.l_merge, recipe.to_dict())
    return EvoResult(recipe, merged, report, res.history, table, res)


def _subsample(ds: QADataset, k: int, seed: int) -> QADataset:
    if k >= len(ds):
        return ds
    idx = np.sort(np.random.default_rng(seed).choice(len(ds), size=k, replace=False))
    return QADataset(tuple(ds.pairs[i] for i in idx))


def default_grids(method: str, n_experts: int) -> dict[str, list[float]]:
    """Grids explored by the manual-tuning baseline.

    ``weight`` is a single task weight shared by every expert. For DARE variants the
    density axis is the DARE keep rate (``drop_prob = 1 - density``).
    """
    weights = [0.25, 0.5, 1.0] if n_experts == 1 else [0.1, 0.25, 0.33, 0.5, 1.0]
    densities = [0.25, 0.5, 1.0]
    if method == "slerp":
        return {"slerp_t": [round(0.1 * i, 1) for i in range(1, 11)]}
    if method in ("ties", "dare-ties", "dare"):
        return {"density": densities, "weight": weights}
    if method == "task-arithmetic":
        return {"weight": weights}
    raise RecipeError(f"no default grid for method {method!r}")


def recipe_from_grid(method: str, point: Mapping[str, float], n_experts: int, seed: int) -> MergeRecipe:
    if method == "slerp":
        return MergeRecipe("slerp", [1.0], {"slerp_t": point["slerp_t"]}, seed)
    lambdas = [point.get("weight", 1.0)] * n_experts
    hyper: dict[str, float] = {}
    if method == "ties":
        hyper["density"] = point["density"]
    elif method == "dare-ties":
        hyper["density"] = 1.0
        hyper["drop_prob"] = 1.0 - point["density"]
    elif method == "dare":
        hyper["drop_prob"] = 1.0 - point["density"]
    return MergeRecipe(method, lambdas, hyper, seed)


@dataclass
class GridResult:
    recipe: MergeRecipe
    merged: Checkpoint
    value: float
    table: list[dict]


def grid_search(
    base: Checkpoint,
    experts: Sequence[Checkpoint],
    method: str,
    criterion_fn: Callable[[MergeRecipe, Checkpoint], float],
    grids: Mapping[str, Sequence[float]] | None = None,
    seed: int = 0,
) -> GridResult:
    """Exhaustive Cartesian search; the lowest criterion wins, ties go to the
    lexicographically smallest grid point."""
    grids = default_grids(method, len(experts)) if grids is None else grids
    if not grids:
        raise ValueError("grid_search needs at least one axis")
    axes = sorted(grids)
    values = []
    for name in axes:
        if not len(grids[name]):
            raise ValueError(f"grid axis {name!r} is empty")
        values.append(sorted(float(v) for v in grids[name]))
    tvs = [task_vector(e, base) for e in experts]
    best = None
    table = []
    for combo in itertools.product(*values):
        point = dict(zip(axes, combo))
        recipe = recipe_from_grid(method, point, len(experts), seed)
        merged = merge(base, experts, recipe, tvs)
        value = float(criterion_fn(recipe, merged))
        table.append({**point, "value": value})
        if not math.isnan(value) and (best is None or value < best[2]):
            best = (recipe, merged, value)
    if best is None:
        raise ValueError("criterion returned NaN for every grid point")
    return GridResult(best[0], best[1], best[2], table)


def task_vectors(base: Checkpoint, experts: Sequence[Checkpoint]) -> list[TaskVector]:
    return [task_vector(e, base) for e in experts]
