import math

import numpy as np
import pytest

from safemerge.cmaes import CMAES, SearchSpace, SearchSpaceError, cma_es_minimize, default_popsize
from safemerge.criterion import MergeLossEvaluator, dataset_loss
from safemerge.data import ModArithSpec, gen_toy_expert_data, gen_toy_safety_data
from safemerge.merge import MergeRecipe, RecipeError, merge
from safemerge.optimize import (
    build_space,
    default_grids,
    evomm_optimize,
    grid_search,
    lm_cocktail_weights,
    recipe_from_grid,
    softmax,
)
from safemerge.toy_lm import ToyLMConfig, init_model

CFG = ToyLMConfig()


def sphere(x):
    return float(np.sum(x**2))


def rosenbrock(x):
    return float(100 * (x[1] - x[0] ** 2) ** 2 + (1 - x[0]) ** 2)


def test_popsize_formula():
    # 4 + floor(3 ln n), evaluated independently
    assert default_popsize(2) == 4 + math.floor(3 * 0.6931471805599453) == 6
    assert default_popsize(3) == 4 + math.floor(3 * 1.0986122886681098) == 7


def test_sphere_benchmark():
    space = SearchSpace(tuple(f"x{i}" for i in range(5)), (-5,) * 5, (5,) * 5)
    res = cma_es_minimize(sphere, space, np.ones(5), 0.5, 500, seed=0, ftarget=1e-10)
    assert res.best_f < 1e-10
    assert len(res.history) <= 500


def test_rosenbrock_benchmark():
    space = SearchSpace(("x", "y"), (-5, -5), (5, 5))
    res = cma_es_minimize(rosenbrock, space, [-1.2, 1.0], 0.5, 2000, seed=0, ftarget=1e-6)
    assert res.best_f < 1e-6


def test_best_so_far_monotone_and_deterministic():
    space = SearchSpace(("x", "y", "z"), (-3, -3, -3), (3, 3, 3))
    for seed in range(20):
        res = cma_es_minimize(rosenbrock, space, [0.5, -0.5, 1.0], 0.8, 40, seed)
        best = [h["best_f"] for h in res.history]
        assert all(b2 <= b1 for b1, b2 in zip(best, best[1:]))
        again = cma_es_minimize(rosenbrock, space, [0.5, -0.5, 1.0], 0.8, 40, seed)
        assert again.best_f == res.best_f and np.array_equal(again.best_x, res.best_x)


def test_covariance_stays_symmetric_pd():
    space = SearchSpace(("x", "y"), (-1, -1), (1, 1))
    es = CMAES(space, [0.9, 0.9], 1.0, seed=1)
    for _ in range(60):
        cands = es.ask()
        assert space.contains(cands.min(0)) and space.contains(cands.max(0))
        es.tell(cands, [sphere(c - 0.99) for c in cands])
        cov = es.state.cov
        assert np.abs(cov - cov.T).max() <= 1e-12
        assert np.linalg.eigvalsh(cov).min() > 0
        assert es.state.sigma > 0


def test_nonfinite_objective_penalised():
    space = SearchSpace(("x",), (-2,), (2,))
    res = cma_es_minimize(lambda x: math.nan if x[0] > 0 else x[0] ** 2, space, [-1.0], 0.5, 10, 0)
    assert res.nonfinite > 0 and math.isfinite(res.best_f)
    assert sum(h["nonfinite"] for h in res.history) == res.nonfinite


def test_search_space_validation():
    with pytest.raises(SearchSpaceError):
        SearchSpace(("x",), (1,), (1,))
    with pytest.raises(SearchSpaceError):
        SearchSpace((), (), ())
    space = SearchSpace(("x",), (0,), (1,))
    with pytest.raises(SearchSpaceError):
        cma_es_minimize(sphere, space, [2.0], 0.1, 5, 0)
    with pytest.raises(SearchSpaceError):
        cma_es_minimize(sphere, space, [0.5], 0.0, 5, 0)


def test_softmax_closed_forms():
    assert softmax([0.0, -math.log(2)]).tolist() == pytest.approx([2 / 3, 1 / 3], abs=1e-9)
    w = np.array([-1.3, -0.2, -4.0])
    lam = softmax(w)
    assert abs(lam.sum() - 1) <= 1e-9 and np.all(lam > 0)
    assert np.allclose(softmax(w + 123.4), lam, atol=1e-9, rtol=0)
    assert list(np.argsort(lam)) == list(np.argsort(w))


@pytest.fixture(scope="module")
def tiny():
    spec = ModArithSpec()
    expert = gen_toy_expert_data(spec, 24, 0)
    aligned, _ = gen_toy_safety_data(24, 1)
    return init_model(CFG, 0), init_model(CFG, 1), init_model(CFG, 2), aligned, expert


def test_lm_cocktail(tiny):
    base, e1, e2, aligned, expert = tiny
    assert lm_cocktail_weights([e1, e1], CFG, expert) == pytest.approx([0.5, 0.5], abs=1e-9)
    lam = lm_cocktail_weights([e1, e2, base], CFG, expert)
    assert abs(sum(lam) - 1) <= 1e-9

    losses = [dataset_loss(m, CFG, expert) for m in (e1, e2, base)]
    assert list(np.argsort(lam)) == list(np.argsort(-np.array(losses)))
    with pytest.raises(ValueError):
        lm_cocktail_weights([e1], CFG, expert)


def test_build_space():
    s = build_space("ties", 2)
    assert s.names == ("lambda_1", "lambda_2", "density")
    assert s.lower == (0, 0, 0.05) and s.upper == (1, 1, 1)
    assert build_space("dare-ties", 1).names == ("lambda_1", "density", "drop_prob")
    assert build_space("dare-ties", 1).upper[-1] == 0.95
    assert build_space("slerp", 1).names == ("slerp_t",)
    with pytest.raises(RecipeError):
        build_space("slerp", 2)


def test_evomm_degenerate_pool(tiny):
    base, _, _, aligned, expert = tiny
    res = evomm_optimize(base, [base], "ties", aligned, expert, 0.3, 3, 0, CFG)
    ref = MergeLossEvaluator(CFG, aligned, expert, 0.3)(base)
    assert abs(res.report.l_merge - ref.l_merge) <= 1e-9


def test_evomm_alpha_zero_and_reproducible(tiny):
    base, e1, _, aligned, expert = tiny
    res = evomm_optimize(base, [e1], "ties", aligned, expert, 0.0, 3, 5, CFG)
    assert res.report.l_merge == res.report.l_safety
    again = merge(base, [e1], MergeRecipe.from_dict(res.recipe.to_dict()))
    assert again.equals(res.merged)
    assert abs(MergeLossEvaluator(CFG, aligned, expert, 0.0)(again).l_merge - res.report.l_merge) <= 1e-9
    best = [h["best_f"] for h in res.history]
    assert all(b2 <= b1 for b1, b2 in zip(best, best[1:]))


def test_evomm_slerp_requires_two_models(tiny):
    base, e1, e2, aligned, expert = tiny
    with pytest.raises(RecipeError):
        evomm_optimize(base, [e1, e2], "slerp", aligned, expert, 0.3, 1, 0, CFG)


def test_default_grids():
    g = default_grids("ties", 1)
    assert g == {"density": [0.25, 0.5, 1.0], "weight": [0.25, 0.5, 1.0]}
    assert default_grids("ties", 2)["weight"] == [0.1, 0.25, 0.33, 0.5, 1.0]
    assert default_grids("slerp", 1)["slerp_t"] == [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0]
    r = recipe_from_grid("dare-ties", {"density": 0.25, "weight": 0.5}, 2, 3)
    assert r.lambdas == [0.5, 0.5] and r.hyper == {"density": 1.0, "drop_prob": 0.75}


def test_grid_search_contract(tiny):
    base, e1, _, _, _ = tiny
    calls = []

    def crit(recipe, merged):
        calls.append(recipe)
        return (recipe.lambdas[0] - 0.5) ** 2

    res = grid_search(base, [e1], "ties", crit)
    assert len(res.table) == len(calls) == 9
    assert res.recipe.lambdas == [0.5] and res.recipe.hyper["density"] == 0.25
    assert all(row["value"] >= res.value for row in res.table)
    one = grid_search(base, [e1], "ties", crit, grids={"density": [0.5], "weight": [1.0]})
    assert one.recipe.lambdas == [1.0] and len(one.table) == 1
    with pytest.raises(ValueError):
        grid_search(base, [e1], "ties", crit, grids={"density": [], "weight": [1.0]})
