"""(mu/mu_w, lambda)-CMA-ES with box clipping.

Strategy constants follow the standard defaults (Hansen's tutorial), as functions of
the dimension ``n`` and population size ``p``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

EIG_FLOOR = 1e-14


class SearchSpaceError(ValueError):
    pass


@dataclass(frozen=True)
class SearchSpace:
    names: tuple[str, ...]
    lower: tuple[float, ...]
    upper: tuple[float, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "names", tuple(self.names))
        object.__setattr__(self, "lower", tuple(float(x) for x in self.lower))
        object.__setattr__(self, "upper", tuple(float(x) for x in self.upper))
        if not self.names:
            raise SearchSpaceError("search space needs at least one parameter")
        if not len(self.names) == len(self.lower) == len(self.upper):
            raise SearchSpaceError("names, lower and upper must have equal length")
        for name, lo, hi in zip(self.names, self.lower, self.upper):
            if not (math.isfinite(lo) and math.isfinite(hi)) or not lo < hi:
                raise SearchSpaceError(f"invalid bounds for {name!r}: [{lo}, {hi}]")

    @property
    def n(self) -> int:
        return len(self.names)

    def clip(self, x: np.ndarray) -> np.ndarray:
        return np.clip(x, self.lower, self.upper)

    def contains(self, x: Sequence[float]) -> bool:
        return all(lo <= v <= hi for v, lo, hi in zip(x, self.lower, self.upper))

    def midpoint(self) -> np.ndarray:
        return (np.asarray(self.lower) + np.asarray(self.upper)) / 2.0


def default_popsize(n: int) -> int:
    return 4 + int(math.floor(3 * math.log(n)))


@dataclass
class CmaState:
    mean: np.ndarray
    sigma: float
    cov: np.ndarray
    p_sigma: np.ndarray
    p_c: np.ndarray
    generation: int
    popsize: int


@dataclass
class CmaResult:
    best_x: np.ndarray
    best_f: float
    history: list[dict] = field(default_factory=list)
    evaluations: int = 0
    nonfinite: int = 0
    state: CmaState | None = None
    stop_reason: str = ""


def _lex_less(a: np.ndarray, b: np.ndarray) -> bool:
    for u, v in zip(a, b):
        if u != v:
            return u < v
    return False


class CMAES:
    """Ask/tell CMA-ES; ``tell`` expects the candidates returned by the last ``ask``."""

    def __init__(self, space: SearchSpace, x0, sigma0: float, seed: int, popsize: int | None = None):
        x0 = np.asarray(x0, dtype=np.float64)
        if x0.shape != (space.n,):
            raise SearchSpaceError(f"x0 must have length {space.n}")
        if not space.contains(x0):
            raise SearchSpaceError("x0 lies outside the search bounds")
        if not sigma0 > 0 or not math.isfinite(sigma0):
            raise SearchSpaceError("sigma0 must be positive")
        n = space.n
        self.space = space
        self.seed = int(seed)
        lam = popsize or default_popsize(n)
        mu = lam // 2
        w = math.log(mu + 0.5) - np.log(np.arange(1, mu + 1))
        self.weights = w / w.sum()
        self.mu = mu
        self.mueff = 1.0 / float(np.sum(self.weights**2))
        mueff = self.mueff
        self.cs = (mueff + 2) / (n + mueff + 5)
        self.ds = 1 + 2 * max(0.0, math.sqrt((mueff - 1) / (n + 1)) - 1) + self.cs
        self.cc = (4 + mueff / n) / (n + 4 + 2 * mueff / n)
        self.c1 = 2 / ((n + 1.3) ** 2 + mueff)
        self.cmu = min(1 - self.c1, 2 * (mueff - 2 + 1 / mueff) / ((n + 2) ** 2 + mueff))
        self.chin = math.sqrt(n) * (1 - 1 / (4 * n) + 1 / (21 * n**2))
        self.state = CmaState(
            mean=x0.copy(),
            sigma=float(sigma0),
            cov=np.eye(n),
            p_sigma=np.zeros(n),
            p_c=np.zeros(n),
            generation=0,
            popsize=lam,
        )
        self._eig()

    def _eig(self) -> None:
        cov = self.state.cov
        cov = (cov + cov.T) / 2.0
        vals, vecs = np.linalg.eigh(cov)
        vals = np.maximum(vals, EIG_FLOOR)
        self.state.cov = (vecs * vals) @ vecs.T
        self.state.cov = (self.state.cov + self.state.cov.T) / 2.0
        self.B, self.D = vecs, np.sqrt(vals)

    def ask(self) -> np.ndarray:
        """Clipped candidates for the current generation, shape (popsize, n)."""
        st = self.state
        n = self.space.n
        cands = np.empty((st.popsize, n))
        for k in range(st.popsize):
            # one stream per (seed, generation, candidate): order-independent
            z = np.random.default_rng([self.seed, st.generation, k]).standard_normal(n)
            cands[k] = st.mean + st.sigma * (self.B @ (self.D * z))
        return self.space.clip(cands)

    def tell(self, cands: np.ndarray, fvals: Sequence[float]) -> None:
        st = self.state
        fvals = np.asarray(fvals, dtype=np.float64)
        order = rank(cands, fvals)
        ys = (cands[order[: self.mu]] - st.mean) / st.sigma
        y_w = self.weights @ ys
        st.mean = st.mean + st.sigma * y_w
        c_inv_sqrt = self.B @ np.diag(1.0 / self.D) @ self.B.T
        st.p_sigma = (1 - self.cs) * st.p_sigma + math.sqrt(
            self.cs * (2 - self.cs) * self.mueff
        ) * (c_inv_sqrt @ y_w)
        norm_ps = float(np.linalg.norm(st.p_sigma))
        gen = st.generation + 1
        h_sigma = norm_ps / math.sqrt(1 - (1 - self.cs) ** (2 * gen)) < (
            1.4 + 2 / (self.space.n + 1)
        ) * self.chin
        st.p_c = (1 - self.cc) * st.p_c + h_sigma * math.sqrt(
            self.cc * (2 - self.cc) * self.mueff
        ) * y_w
        rank_mu = (ys.T * self.weights) @ ys
        delta_h = (1 - h_sigma) * self.cc * (2 - self.cc)
        st.cov = (
            (1 - self.c1 - self.cmu + delta_h * self.c1) * st.cov
            + self.c1 * np.outer(st.p_c, st.p_c)
            + self.cmu * rank_mu
        )
        st.sigma = st.sigma * math.exp((self.cs / self.ds) * (norm_ps / self.chin - 1))
        st.generation = gen
        self._eig()

    def spread(self) -> float:
        return self.state.sigma * float(self.D.max())


def rank(cands: np.ndarray, fvals: np.ndarray) -> np.ndarray:
    """Indices sorted by f, ties broken by the lexicographically smallest candidate."""
    keys = [cands[:, j] for j in reversed(range(cands.shape[1]))]
    return np.lexsort([*keys, fvals])


def cma_es_minimize(
    objective: Callable[[np.ndarray], float],
    space: SearchSpace,
    x0,
    sigma0: float,
    steps: int,
    seed: int,
    popsize: int | None = None,
    ftarget: float | None = None,
    tolx: float = 1e-12,
) -> CmaResult:
    """Minimise ``objective`` over the box for at most ``steps`` generations.

    Non-finite objective values are replaced by +inf and counted in the history.
    Stops early when ``ftarget`` is reached or the search distribution collapses
    below ``tolx``.
    """
    if steps < 0:
        raise ValueError("steps must be >= 0")
    es = CMAES(space, x0, sigma0, seed, popsize)
    x0 = space.clip(np.asarray(x0, dtype=np.float64))
    f0 = _safe_eval(objective, x0)
    result = CmaResult(best_x=x0, best_f=f0[0], evaluations=1, nonfinite=int(f0[1]), state=es.state)
    for _ in range(steps):
        cands = es.ask()
        evals = [_safe_eval(objective, c) for c in cands]
        fvals = np.array([f for f, _ in evals])
        bad = sum(flag for _, flag in evals)
        result.evaluations += len(cands)
        result.nonfinite += bad
        for k in rank(cands, fvals)[:1]:
            if fvals[k] < result.best_f or (
                fvals[k] == result.best_f and _lex_less(cands[k], result.best_x)
            ):
                result.best_f, result.best_x = float(fvals[k]), cands[k].copy()
        es.tell(cands, fvals)
        finite = fvals[np.isfinite(fvals)]
        result.history.append(
            {
                "generation": es.state.generation,
                "best_f": result.best_f,
                "mean_f": float(finite.mean()) if finite.size else math.inf,
                "sigma": es.state.sigma,
                "nonfinite": bad,
            }
        )
        if ftarget is not None and result.best_f <= ftarget:
            result.stop_reason = "ftarget"
            break
        if es.spread() < tolx:
            result.stop_reason = "tolx"
            break
    else:
        result.stop_reason = "steps"
    result.state = es.state
    return result


def _safe_eval(objective, x: np.ndarray) -> tuple[float, bool]:
    f = float(objective(x.copy()))
    if not math.isfinite(f):
        return math.inf, True
    return f, False
