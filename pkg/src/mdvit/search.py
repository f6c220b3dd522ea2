"""Gaussian-process policy search under a MAC budget.

The accuracy of a pruning policy is modelled by a GP over flattened
``(kappa, zeta, nu)`` vectors. Each iteration proposes the policy maximizing
expected improvement subject to the cost constraint, evaluates it and
refits. A budget-matched random search serves as the baseline.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.linalg import cho_solve, solve_triangular
from scipy.optimize import minimize_scalar
from scipy.special import ndtr

from .config import DIMENSIONS, PruningPolicy, VitConfig, dims_mask
from .flops import batch_cost, relaxed_cost

logger = logging.getLogger(__name__)

_SQRT_2PI = np.sqrt(2.0 * np.pi)


# -- constrained uniform sampling ------------------------------------------------------


def bounds_vector(cfg: VitConfig, rho_max, dims=DIMENSIONS) -> np.ndarray:
    """Upper bound of every flattened policy coordinate; inactive dimensions get 0."""
    if isinstance(rho_max, dict):
        row = np.array([float(rho_max[d]) for d in DIMENSIONS])
    else:
        row = np.broadcast_to(np.asarray(rho_max, dtype=np.float64), (3,)).copy()
    if np.any(row < 0) or np.any(row >= 1):
        raise ValueError(f"rho_max must lie in [0, 1), got {row.tolist()}")
    return np.tile(row, cfg.layers) * dims_mask(cfg.layers, dims)


class PolicySampler:
    """Uniform policies on the box ``[0, rho_max]``, rejected until exact cost <= budget."""

    def __init__(self, cfg: VitConfig, budget: float, rho_max=0.9, dims=DIMENSIONS, seed=0,
                 max_tries: int = 100_000):
        self.cfg = cfg
        self.budget = budget
        self.upper = bounds_vector(cfg, rho_max, dims)
        self.max_tries = max_tries
        self.rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        self._block = 256
        self._buffer: list = []
        floor = int(batch_cost(cfg, self.upper[None])[0])
        if floor > budget:
            raise ValueError(f"budget {budget:.0f} MACs is unsatisfiable: cheapest allowed policy costs {floor}")

    def _draw(self) -> tuple[np.ndarray, bool]:
        # draws come in blocks that consume the generator exactly like one row at a time,
        # so results do not depend on the block size
        if not self._buffer:
            block = self.rng.uniform(size=(self._block, self.upper.size)) * self.upper
            ok = batch_cost(self.cfg, block) <= self.budget
            self._buffer = list(zip(block, ok))[::-1]
        return self._buffer.pop()

    def sample_vector(self) -> np.ndarray:
        for _ in range(self.max_tries):
            v, ok = self._draw()
            if ok:
                return v
        raise RuntimeError(f"policy sampler exceeded {self.max_tries} tries "
                           f"(acceptance rate < {1 / self.max_tries:.1e}); budget too tight")

    def sample_vectors(self, n: int) -> np.ndarray:
        return np.stack([self.sample_vector() for _ in range(n)]) if n else np.zeros((0, self.upper.size))

    def sample(self) -> PruningPolicy:
        return PruningPolicy.from_vector(self.sample_vector())


def sample_policy(cfg: VitConfig, budget: float, rho_max=0.9, seed=0, dims=DIMENSIONS) -> PruningPolicy:
    return PolicySampler(cfg, budget, rho_max, dims, seed).sample()


# -- Gaussian process ------------------------------------------------------------------


def se_kernel(a: np.ndarray, b: np.ndarray, lengthscale: float, signal_var: float) -> np.ndarray:
    a, b = np.atleast_2d(a), np.atleast_2d(b)
    diff = a[:, None, :] - b[None, :, :]
    d2 = np.einsum("ijk,ijk->ij", diff, diff)
    return signal_var * np.exp(-0.5 / lengthscale**2 * d2)


@dataclass
class GpModel:
    points: np.ndarray
    values: np.ndarray
    lengthscale: float
    signal_var: float
    jitter: float
    mean: float
    chol: np.ndarray
    alpha: np.ndarray
    chol_inv: np.ndarray | None = None

    def posterior(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return gp_posterior(self, x)


def _factor(points, values, lengthscale, signal_var, jitter, mean):
    k = se_kernel(points, points, lengthscale, signal_var)
    k[np.diag_indices_from(k)] += jitter * signal_var
    try:
        chol = np.linalg.cholesky(k)
    except np.linalg.LinAlgError as e:
        raise ValueError("GP covariance is not positive definite (duplicate points with zero jitter?)") from e
    if not np.all(np.diag(chol) > 0):
        raise ValueError("GP covariance is singular (duplicate points with zero jitter?)")
    alpha = cho_solve((chol, True), values - mean)
    return chol, alpha


def _profile_lml(log_ls: float, points, resid, jitter) -> tuple[float, float]:
    """Log marginal likelihood with the signal variance profiled out; returns (lml, signal_var)."""
    m = len(resid)
    k = se_kernel(points, points, np.exp(log_ls), 1.0)
    k[np.diag_indices_from(k)] += jitter
    try:
        chol = np.linalg.cholesky(k)
    except np.linalg.LinAlgError:
        return -np.inf, 1.0
    beta = cho_solve((chol, True), resid)
    s2 = max(float(resid @ beta) / m, 1e-12)
    lml = -0.5 * m * np.log(s2) - np.log(np.diag(chol)).sum() - 0.5 * m * (1 + np.log(2 * np.pi))
    return lml, s2


def gp_fit(points, values, lengthscale: float | None = None, signal_var: float | None = None,
           jitter: float = 1e-6, mean: float | None = None, restarts: int = 5,
           ls_bounds: tuple[float, float] = (0.02, 20.0)) -> GpModel:
    """Fit a squared-exponential GP; unspecified hyper-parameters maximize the marginal likelihood.

    The signal variance has a closed-form optimum for a fixed length-scale, so
    the search alternates that with a bounded 1-d length-scale optimization
    started from ``restarts`` points spread over ``ls_bounds``.
    """
    x = np.atleast_2d(np.asarray(points, dtype=np.float64))
    y = np.asarray(values, dtype=np.float64).reshape(-1)
    if len(x) != len(y) or len(y) < 1:
        raise ValueError("need matching, non-empty points and values")
    mu = float(y.mean()) if mean is None else float(mean)
    resid = y - mu
    if lengthscale is None:
        lo, hi = np.log(ls_bounds[0]), np.log(ls_bounds[1])
        edges = np.linspace(lo, hi, restarts + 1)
        best = (-np.inf, None)
        for a, b in zip(edges[:-1], edges[1:]):
            r = minimize_scalar(lambda t: -_profile_lml(t, x, resid, jitter)[0], bounds=(a, b),
                                method="bounded", options={"xatol": 1e-4})
            if -r.fun > best[0]:
                best = (-r.fun, r.x)
        if best[1] is None:
            raise ValueError("marginal likelihood is not finite for any length-scale")
        lengthscale = float(np.exp(best[1]))
        if signal_var is None:
            signal_var = _profile_lml(best[1], x, resid, jitter)[1]
    if signal_var is None:
        signal_var = _profile_lml(np.log(lengthscale), x, resid, jitter)[1]
    chol, alpha = _factor(x, y, lengthscale, signal_var, jitter, mu)
    return GpModel(x, y, float(lengthscale), float(signal_var), jitter, mu, chol, alpha)


def gp_posterior(model: GpModel, x) -> tuple[np.ndarray, np.ndarray]:
    """Posterior mean and standard deviation at the rows of ``x``."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    ks = se_kernel(x, model.points, model.lengthscale, model.signal_var)
    mu = model.mean + ks @ model.alpha
    if model.chol_inv is None:
        model.chol_inv = solve_triangular(model.chol, np.eye(len(model.chol)), lower=True)
    v = ks @ model.chol_inv.T
    var = model.signal_var - np.einsum("ij,ij->i", v, v)
    return mu, np.sqrt(np.maximum(var, 0.0))


def ei_from_moments(mu, sd, best: float, xi: float = 0.0) -> np.ndarray:
    """Closed-form expected improvement of N(mu, sd^2) over ``best + xi``."""
    mu, sd = np.asarray(mu, dtype=np.float64), np.asarray(sd, dtype=np.float64)
    imp = mu - best - xi
    safe = np.where(sd > 0, sd, 1.0)
    with np.errstate(over="ignore"):  # tiny sd: z saturates to +-inf, which ndtr and exp handle
        z = imp / safe
        ei = imp * ndtr(z) + sd * np.exp(-0.5 * z * z) / _SQRT_2PI
    ei = np.where(sd > 0, ei, np.maximum(imp, 0.0))
    return np.maximum(ei, 0.0)


def expected_improvement(model: GpModel, x, best: float, xi: float = 0.0) -> np.ndarray:
    mu, sd = gp_posterior(model, x)
    return ei_from_moments(mu, sd, best, xi)


# -- constrained EI maximization --------------------------------------------------------


def _cell_box(cfg: VitConfig, v: np.ndarray, upper: np.ndarray, active: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Box of ratios sharing ``v``'s ceil'd retained counts (so the same exact cost)."""
    lo, hi = np.zeros_like(v), np.zeros_like(v)
    n_tok = cfg.seq_len
    sizes = lambda l: (cfg.ffn_dim, cfg.heads, n_tok)  # noqa: E731
    for l in range(cfg.layers):
        for j, n in enumerate(sizes(l)):
            i = 3 * l + j
            c = max(1, int(np.ceil((1.0 - v[i]) * n - 1e-9)))
            a = 1.0 - (c + 1e-9) / n
            b = 1.0 - (c - 1 + 1e-9) / n
            lo[i] = max(0.0, a + 1e-12)
            hi[i] = min(upper[i], b - 1e-9)
            if j == 2:
                n_tok = c
    lo = np.where(active, np.minimum(lo, v), 0.0)
    hi = np.where(active, np.maximum(hi, v), 0.0)
    return lo, hi


class _EiProblem:
    def __init__(self, model, cfg, budget, upper, best, xi):
        self.model, self.cfg, self.budget, self.upper = model, cfg, budget, upper
        self.active = upper > 0
        self.best, self.xi = best, xi

    def ei(self, x):
        return expected_improvement(self.model, x, self.best, self.xi)

    def grad(self, x, h=1e-6):
        idx = np.flatnonzero(self.active)
        pts = np.repeat(x[None], 2 * len(idx), axis=0)
        pts[np.arange(len(idx)), idx] += h
        pts[len(idx) + np.arange(len(idx)), idx] -= h
        vals = self.ei(pts)
        g = np.zeros_like(x)
        g[idx] = (vals[:len(idx)] - vals[len(idx):]) / (2 * h)
        return g

    def relaxed_ok(self, x):
        return relaxed_cost(self.cfg, x) <= self.budget

    def exact_ok(self, x):
        return batch_cost(self.cfg, x[None])[0] <= self.budget

    def cost_grad(self, x, h=1e-6):
        idx = np.flatnonzero(self.active)
        pts = np.repeat(x[None], 2 * len(idx), axis=0)
        pts[np.arange(len(idx)), idx] += h
        pts[len(idx) + np.arange(len(idx)), idx] -= h
        c = relaxed_cost(self.cfg, pts)
        g = np.zeros_like(x)
        g[idx] = (c[:len(idx)] - c[len(idx):]) / (2 * h)
        return g

    def restore(self, x, lo, hi):
        """Push ``x`` towards more pruning until the relaxed cost fits (cost falls in every ratio)."""
        if self.relaxed_ok(x):
            return x
        r = -self.cost_grad(x)
        r = np.where(self.active, np.maximum(r, 0.0), 0.0)
        if not np.any(r > 0):
            return None
        r = r / np.abs(r).max()
        far = np.clip(x + r, lo, hi)
        if not self.relaxed_ok(far):
            return None
        a, b = 0.0, 1.0
        for _ in range(50):
            mid = 0.5 * (a + b)
            if self.relaxed_ok(np.clip(x + mid * r, lo, hi)):
                b = mid
            else:
                a = mid
        return np.clip(x + b * r, lo, hi)

    def ascend(self, x, lo, hi, constrained: bool, iters: int = 200, tol: float = 1e-12):
        """Projected-gradient ascent of EI on the box [lo, hi] (plus the relaxed cost if constrained)."""
        fx = float(self.ei(x[None])[0])
        step = 0.1
        for _ in range(iters):
            g = self.grad(x)
            d = g.copy()
            d[(x <= lo) & (d < 0)] = 0.0
            d[(x >= hi) & (d > 0)] = 0.0
            if constrained:
                a = self.cost_grad(x)
                tight = relaxed_cost(self.cfg, x) >= self.budget * (1 - 1e-9)
                if tight and d @ a > 0:
                    a = np.where(d != 0, a, 0.0)
                    d = d - (d @ a) / max(a @ a, 1e-300) * a
            nd = np.linalg.norm(d)
            if nd < tol:
                break
            d /= nd
            moved = False
            while step > 1e-7:
                y = np.clip(x + step * d, lo, hi)
                if constrained:
                    y = self.restore(y, lo, hi)
                if y is not None:
                    fy = float(self.ei(y[None])[0])
                    if fy > fx:
                        x, fx, moved = y, fy, True
                        step = min(step * 2, 0.5)
                        break
                step *= 0.5
            if not moved:
                break
        return x, fx

    def repair(self, x, seq_mask):
        """Raise the token ratios uniformly (else all active ratios) until the exact cost fits."""
        if self.exact_ok(x):
            return x
        for mask in (seq_mask & self.active, self.active):
            if not np.any(mask):
                continue
            head = np.where(mask, self.upper - x, 0.0)
            if not self.exact_ok(x + head):
                continue
            a, b = 0.0, 1.0
            for _ in range(60):
                mid = 0.5 * (a + b)
                if self.exact_ok(x + mid * head):
                    b = mid
                else:
                    a = mid
            return x + b * head
        return None

    def cell_search(self, x, hops: int = 30):
        """Maximize EI over ratio boxes of constant exact cost, hopping into feasible neighbours.

        At a face of the current box where EI still increases outwards, the
        point just across the face lies in a neighbouring cell; the best such
        feasible neighbour that improves EI becomes the next box.
        """
        lo, hi = _cell_box(self.cfg, x, self.upper, self.active)
        x, fx = self.ascend(x, lo, hi, constrained=False)
        for _ in range(hops):
            g = self.grad(x)
            cands = []
            for i in np.flatnonzero(self.active):
                y = x.copy()
                if g[i] < 0 and x[i] <= lo[i] + 1e-12 and lo[i] > 0:
                    y[i] = max(lo[i] - 1e-7, 0.0)
                elif g[i] > 0 and x[i] >= hi[i] - 1e-12 and hi[i] < self.upper[i]:
                    y[i] = min(hi[i] + 2e-9, self.upper[i])
                else:
                    continue
                if self.exact_ok(y):
                    cands.append(y)
            if not cands:
                break
            cands = np.array(cands)
            f = self.ei(cands)
            j = int(np.argmax(f))
            if not f[j] > fx:
                break
            y = cands[j]
            lo, hi = _cell_box(self.cfg, y, self.upper, self.active)
            x, fx = self.ascend(y, lo, hi, constrained=False)
        return x, fx


def maximize_ei(model: GpModel, cfg: VitConfig, budget: float, rho_max=0.9, restarts: int = 8, seed=0,
                best: float | None = None, xi: float = 0.0, dims=DIMENSIONS, candidates: int = 512):
    """Most promising exact-cost-feasible policy vector and its EI.

    Starts are the best of ``candidates`` rejection-sampled feasible points
    plus the incumbent design point. Each start climbs EI under the relaxed
    (ceil-free) cost, is repaired to exact feasibility, then climbs inside
    boxes of constant exact cost.
    """
    upper = bounds_vector(cfg, rho_max, dims)
    if batch_cost(cfg, upper[None])[0] > budget:
        raise ValueError(f"budget {budget:.0f} MACs is infeasible for the allowed pruning ratios")
    best = float(np.max(model.values)) if best is None else best
    prob = _EiProblem(model, cfg, budget, upper, best, xi)
    sampler = PolicySampler(cfg, budget, rho_max, dims, seed=seed)
    pool = sampler.sample_vectors(candidates)
    feasible_design = [p for p in model.points if p.shape == upper.shape and np.all(p <= upper + 1e-12)
                       and np.all(p >= 0) and prob.exact_ok(p)]
    if feasible_design:
        pool = np.vstack([pool, np.array(feasible_design)])
    scores = prob.ei(pool)
    order = np.argsort(-scores, kind="stable")[:restarts]
    seq_mask = np.tile([False, False, True], cfg.layers)
    zeros = np.zeros_like(upper)
    best_x, best_f = pool[order[0]], float(scores[order[0]])
    for i in order:
        x0 = pool[i]
        x, _ = prob.ascend(x0.copy(), zeros, upper, constrained=True)
        x = prob.repair(x, seq_mask)
        if x is None:
            x = x0
        x, f = prob.cell_search(x)
        if f > best_f and prob.exact_ok(x):
            best_x, best_f = x, f
        # the raw start itself may sit in a better cell than the relaxed climb reached
        y, fy = prob.cell_search(x0.copy())
        if fy > best_f and prob.exact_ok(y):
            best_x, best_f = y, fy
    return np.clip(best_x, 0.0, upper), best_f


# -- search loops ------------------------------------------------------------------------


@dataclass
class SearchState:
    points: list[np.ndarray] = field(default_factory=list)
    values: list[float] = field(default_factory=list)
    history: list[dict] = field(default_factory=list)
    iteration: int = 0

    @property
    def best_value(self) -> float:
        return max(self.values)

    @property
    def best_vector(self) -> np.ndarray:
        return self.points[int(np.argmax(self.values))]

    @property
    def best_policy(self) -> PruningPolicy:
        return PruningPolicy.from_vector(self.best_vector)

    def incumbents(self) -> list[float]:
        return [h["incumbent"] for h in self.history]

    def stall_iteration(self, patience: int = 10) -> int | None:
        """First search iteration after which the incumbent did not improve for ``patience`` iterations."""
        inc = [(h["iteration"], h["incumbent"]) for h in self.history if h["phase"] == "gp"]
        for j, (it, v) in enumerate(inc):
            later = inc[j + 1:j + 1 + patience]
            if len(later) == patience and all(w <= v for _, w in later):
                return it
        return None

    def dumps_history(self) -> str:
        return "".join(json.dumps(h, sort_keys=True) + "\n" for h in self.history)


def _record(state: SearchState, cfg, phase: str, v: np.ndarray, acc: float, ei: float | None):
    state.points.append(v)
    state.values.append(float(acc))
    state.history.append({
        "iteration": state.iteration,
        "phase": phase,
        "policy": [float(t) for t in v],
        "relaxed_cost": float(relaxed_cost(cfg, v)),
        "exact_cost": int(batch_cost(cfg, v[None])[0]),
        "ei": None if ei is None else float(ei),
        "accuracy": float(acc),
        "incumbent": float(max(state.values)),
    })


def _dedupe(v, points, sampler: PolicySampler, rng, budget_ok, scale: float = 1e-3):
    """Jitter a proposal that coincides with an evaluated point, staying feasible."""
    if not any(np.max(np.abs(v - p)) < 1e-9 for p in points):
        return v
    for _ in range(100):
        y = np.clip(v + rng.uniform(-scale, scale, size=v.size) * (sampler.upper > 0), 0.0, sampler.upper)
        if budget_ok(y) and not any(np.max(np.abs(y - p)) < 1e-9 for p in points):
            return y
        scale *= 1.5
    return sampler.sample_vector()


def search(evaluator: Callable[[PruningPolicy], float], cfg: VitConfig, budget: float, m: int = 20,
           iterations: int = 30, seed: int = 0, rho_max=0.9, dims=DIMENSIONS, xi: float = 0.0,
           restarts: int = 8, jitter: float = 1e-6, on_record: Callable[[dict], None] | None = None) -> SearchState:
    """GP/EI search: ``m`` sampled policies, then ``iterations`` EI-maximizing proposals."""
    if m < 2:
        raise ValueError("initial population must have at least 2 policies")
    sampler = PolicySampler(cfg, budget, rho_max, dims, seed=[seed, 11])
    rng = np.random.default_rng([seed, 12])
    state = SearchState()
    for v in sampler.sample_vectors(m):
        _record(state, cfg, "init", v, evaluator(PruningPolicy.from_vector(v)), None)
        if on_record:
            on_record(state.history[-1])
    prior_mean = float(np.mean(state.values))
    ok = lambda y: batch_cost(cfg, y[None])[0] <= budget  # noqa: E731
    for it in range(1, iterations + 1):
        state.iteration = it
        model = gp_fit(np.array(state.points), np.array(state.values), jitter=jitter, mean=prior_mean)
        v, ei = maximize_ei(model, cfg, budget, rho_max, restarts, seed=[seed, 13, it],
                            best=state.best_value, xi=xi, dims=dims)
        v = _dedupe(v, state.points, sampler, rng, ok)
        _record(state, cfg, "gp", v, evaluator(PruningPolicy.from_vector(v)), ei)
        if on_record:
            on_record(state.history[-1])
        logger.debug("gp iter %d: acc=%.4f incumbent=%.4f", it, state.values[-1], state.best_value)
    return state


def random_search(evaluator: Callable[[PruningPolicy], float], cfg: VitConfig, budget: float,
                  evaluations: int, seed: int = 0, rho_max=0.9, dims=DIMENSIONS) -> SearchState:
    """Best of ``evaluations`` policies drawn from the constrained uniform sampler."""
    sampler = PolicySampler(cfg, budget, rho_max, dims, seed=[seed, 21])
    state = SearchState()
    for i, v in enumerate(sampler.sample_vectors(evaluations)):
        state.iteration = i
        _record(state, cfg, "random", v, evaluator(PruningPolicy.from_vector(v)), None)
    return state
