"""Quadratic program shared by every balancing problem.

    minimize    ||M g - t||^2 + g' P g
    subject to  sum_{i in S_k} a_i g_i = s_k   for each sum constraint k
                L <= g_i <= U

P is block diagonal; block b contributes ``diag_b * sum g_i^2 +
ones_b * (sum g_i)^2`` so P g is computed in O(n) without forming P. The
solver is accelerated projected gradient with a monotone restart: a step that
raises the objective is replaced by a plain projected-gradient step from the
last accepted point and the momentum is reset.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

logger = logging.getLogger(__name__)


class InfeasibleConstraint(ValueError):
    pass


class NonFiniteObjective(FloatingPointError):
    pass


class PenaltyStructure:
    """Block-diagonal random-effects penalty.

    Parameters
    ----------
    bounds : int array [B + 1]
        Block b covers positions ``bounds[b]:bounds[b+1]``; blocks must tile
        ``0:bounds[-1]``.
    scale_diag, scale_ones : arrays [B]
        Nonnegative block coefficients.
    """

    def __init__(self, bounds, scale_diag, scale_ones):
        self.bounds = np.asarray(bounds, dtype=np.int64)
        self.scale_diag = np.broadcast_to(np.asarray(scale_diag, dtype=float), (len(self.bounds) - 1,)).copy()
        self.scale_ones = np.broadcast_to(np.asarray(scale_ones, dtype=float), (len(self.bounds) - 1,)).copy()
        if self.bounds[0] != 0 or np.any(np.diff(self.bounds) <= 0):
            raise ValueError("block bounds must start at 0 and be strictly increasing")
        if np.any(self.scale_diag < 0) or np.any(self.scale_ones < 0):
            raise ValueError("penalty scales must be nonnegative")
        self._block_of = np.repeat(np.arange(len(self.scale_diag)), np.diff(self.bounds))

    @classmethod
    def from_blocks(cls, blocks: Sequence[tuple[range | tuple[int, int], float, float]]) -> PenaltyStructure:
        """Build from ``(range(start, stop), scale_diag, scale_ones)`` triples in order."""
        bounds = [0]
        for rng, _, _ in blocks:
            start, stop = (rng.start, rng.stop) if isinstance(rng, range) else rng
            if start != bounds[-1]:
                raise ValueError("blocks must be contiguous and ordered")
            bounds.append(stop)
        return cls(bounds, [b[1] for b in blocks], [b[2] for b in blocks])

    @property
    def size(self) -> int:
        return int(self.bounds[-1])

    @property
    def blocks(self) -> list[tuple[range, float, float]]:
        return [
            (range(int(a), int(b)), float(sd), float(so))
            for a, b, sd, so in zip(self.bounds[:-1], self.bounds[1:], self.scale_diag, self.scale_ones)
        ]

    def block_sums(self, gamma: np.ndarray) -> np.ndarray:
        return np.add.reduceat(gamma, self.bounds[:-1])

    def apply(self, gamma: np.ndarray) -> np.ndarray:
        """P @ gamma."""
        sums = self.block_sums(gamma)
        return self.scale_diag[self._block_of] * gamma + (self.scale_ones * sums)[self._block_of]

    def value(self, gamma: np.ndarray) -> float:
        sq = np.add.reduceat(gamma * gamma, self.bounds[:-1])
        sums = self.block_sums(gamma)
        return float(self.scale_diag @ sq + self.scale_ones @ (sums * sums))

    def dense(self) -> np.ndarray:
        P = np.zeros((self.size, self.size))
        for rng, sd, so in self.blocks:
            k = len(rng)
            P[rng.start:rng.stop, rng.start:rng.stop] = sd * np.eye(k) + so * np.ones((k, k))
        return P

    def max_eigenvalue(self) -> float:
        k = np.diff(self.bounds)
        return float(np.max(self.scale_diag + self.scale_ones * k)) if k.size else 0.0


def penalty_value(gamma, penalty: PenaltyStructure) -> float:
    gamma = np.asarray(gamma, dtype=float)
    if gamma.shape != (penalty.size,):
        raise ValueError(f"gamma has length {gamma.shape}, penalty expects {penalty.size}")
    return penalty.value(gamma)


@dataclass
class SumConstraint:
    """``sum(coef * gamma[indices]) == total``; ``coef`` defaults to ones."""

    indices: np.ndarray
    total: float
    coef: np.ndarray | None = None

    def __post_init__(self):
        if isinstance(self.indices, (range, slice)):
            r = self.indices if isinstance(self.indices, range) else range(self.indices.start, self.indices.stop)
            self.indices = np.arange(r.start, r.stop)
        self.indices = np.asarray(self.indices, dtype=np.int64)
        self.total = float(self.total)
        if self.coef is None:
            self.coef = np.ones(len(self.indices))
        self.coef = np.asarray(self.coef, dtype=float)
        if self.coef.shape != self.indices.shape or np.any(self.coef <= 0):
            raise ValueError("sum-constraint coefficients must be positive, one per index")

    def check_feasible(self, lower: float, upper: float) -> None:
        lo = lower * self.coef.sum() if np.isfinite(lower) else -np.inf
        hi = upper * self.coef.sum() if np.isfinite(upper) else np.inf
        slack = 1e-12 * max(1.0, abs(self.total))
        if not (lo - slack <= self.total <= hi + slack):
            raise InfeasibleConstraint(
                f"sum {self.total} unreachable with bounds [{lower}, {upper}] over {len(self.indices)} weights"
            )


def _project_one(v: np.ndarray, a: np.ndarray, s: float, lower: float, upper: float) -> np.ndarray:
    """Euclidean projection of v onto {sum(a*g) = s, lower <= g <= upper}.

    The projection is clip(v + lam*a) for the shift lam solving
    g(lam) = sum(a * clip(v + lam*a)) = s. g is nondecreasing and piecewise
    linear; its values at the sorted breakpoints follow from cumulative slope
    changes, so the right piece is found with one sort and solved exactly.
    """
    aa = a * a
    if np.isfinite(lower) and not np.isfinite(upper):
        out = _project_lower_only(v, a, aa, s, lower)
        if out is not None:
            return out
    pos, delta = [], []
    if np.isfinite(lower):
        pos.append((lower - v) / a)
        delta.append(aa)  # coordinate leaves the lower bound
    if np.isfinite(upper):
        pos.append((upper - v) / a)
        delta.append(-aa)  # coordinate reaches the upper bound
    if not pos:
        return v + (s - a @ v) / aa.sum() * a
    pos, delta = np.concatenate(pos), np.concatenate(delta)
    order = np.argsort(pos, kind="stable")
    pos, delta = pos[order], delta[order]
    slope0 = 0.0 if np.isfinite(lower) else float(aa.sum())
    slopes = slope0 + np.cumsum(delta)  # slope just right of each breakpoint
    g0 = float(a @ np.clip(v + pos[0] * a, lower, upper))
    gvals = g0 + np.concatenate([[0.0], np.cumsum(slopes[:-1] * np.diff(pos))])

    if s <= gvals[0]:
        lam = pos[0] if slope0 == 0.0 else pos[0] - (gvals[0] - s) / slope0
    elif s >= gvals[-1]:
        end_slope = slopes[-1]
        lam = pos[-1] if end_slope <= 0.0 else pos[-1] + (s - gvals[-1]) / end_slope
    else:
        j = int(np.searchsorted(gvals, s, side="right")) - 1
        lam = pos[j] if slopes[j] <= 0.0 else pos[j] + (s - gvals[j]) / slopes[j]
    out = np.clip(v + lam * a, lower, upper)
    # polish rounding error on the coordinates strictly inside the box
    resid = s - a @ out
    free = (out > lower) & (out < upper)
    if resid != 0.0 and free.any():
        out[free] += resid * a[free] / aa[free].sum()
        out = np.clip(out, lower, upper)
    return out


def _project_lower_only(v, a, aa, s, lower, max_rounds: int = 50):
    """Active-set shift search for a lower bound only (no sort).

    Coordinates whose shifted value falls to the bound are fixed there and
    the shift is recomputed; the fixed set only grows, so the loop ends at
    the exact shift. Returns None if it needs more than ``max_rounds`` rounds.
    """
    idx = np.arange(len(v))
    fixed_a = 0.0
    for _ in range(max_rounds):
        av, vv = a[idx], v[idx]
        lam = (s - lower * fixed_a - av @ vv) / (av @ av)
        keep = vv + lam * av > lower
        if keep.all():
            out = np.maximum(v + lam * a, lower)
            resid = s - a @ out
            inner = out > lower
            if resid != 0.0 and inner.any():
                out[inner] += resid * a[inner] / aa[inner].sum()
                out = np.maximum(out, lower)
            return out
        fixed_a += float(av[~keep].sum())
        idx = idx[keep]
        if not len(idx):
            return None
    return None


def project_feasible(v, sum_constraints: Sequence[SumConstraint], lower: float = 0.0,
                     upper: float = np.inf, check: bool = True) -> np.ndarray:
    """Project ``v`` onto the sum and box constraints (each constraint independently).

    Coordinates not covered by any sum constraint are simply clipped.
    """
    if lower > upper:
        raise InfeasibleConstraint(f"lower bound {lower} exceeds upper bound {upper}")
    v = np.asarray(v, dtype=float)
    out = np.clip(v, lower, upper)
    for sc in sum_constraints:
        if check:
            sc.check_feasible(lower, upper)
        out[sc.indices] = _project_one(v[sc.indices], sc.coef, sc.total, lower, upper)
    return out


@dataclass
class QpProblem:
    M: np.ndarray  # [d x k]; column i is the feature contribution of weight i
    t: np.ndarray  # [d]
    penalty: PenaltyStructure
    sum_constraints: list[SumConstraint]
    lower: float = 0.0
    upper: float = np.inf

    def __post_init__(self):
        self.M = np.atleast_2d(np.asarray(self.M, dtype=float))
        self.t = np.asarray(self.t, dtype=float).reshape(-1)
        if self.M.shape[0] != self.t.shape[0]:
            raise ValueError("M rows must match the target length")
        if self.M.shape[1] != self.penalty.size:
            raise ValueError("M columns must match the penalty size")
        if self.lower > self.upper:
            raise InfeasibleConstraint(f"lower bound {self.lower} exceeds upper bound {self.upper}")
        covered = np.concatenate([sc.indices for sc in self.sum_constraints]) if self.sum_constraints else np.array([], int)
        if len(np.unique(covered)) != len(covered):
            raise ValueError("sum constraints must not overlap")
        for sc in self.sum_constraints:
            sc.check_feasible(self.lower, self.upper)

    @property
    def k(self) -> int:
        return self.M.shape[1]

    def balance(self, gamma: np.ndarray) -> float:
        r = self.M @ gamma - self.t
        return float(r @ r)

    def objective(self, gamma: np.ndarray) -> float:
        return self.balance(gamma) + self.penalty.value(gamma)

    def gradient(self, gamma: np.ndarray) -> np.ndarray:
        return 2.0 * (self.M.T @ (self.M @ gamma - self.t)) + 2.0 * self.penalty.apply(gamma)

    def project(self, v: np.ndarray) -> np.ndarray:
        # feasibility was checked at construction
        return project_feasible(v, self.sum_constraints, self.lower, self.upper, check=False)


@dataclass
class QpSolution:
    gamma: np.ndarray
    kkt_residual: float
    iterations: int
    objective_balance: float
    objective_penalty: float
    converged: bool
    restart_objectives: list[float] = field(default_factory=list)

    @property
    def objective(self) -> float:
        return self.objective_balance + self.objective_penalty


def lipschitz_constant(problem: QpProblem, n_iter: int = 200, seed: int = 0) -> float:
    """Largest eigenvalue of the Hessian 2(M'M + P), by power iteration.

    The estimate is inflated by 1% and capped by the exact bound
    2(||M||_2^2 + max block eigenvalue).
    """
    d = problem.M.shape[0]
    mm = float(np.linalg.eigvalsh(problem.M @ problem.M.T)[-1]) if d else 0.0
    cap = 2.0 * (mm + problem.penalty.max_eigenvalue())
    if cap <= 0:
        return 0.0
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(problem.k)
    x /= np.linalg.norm(x)
    est = 0.0
    for _ in range(n_iter):
        hx = 2.0 * (problem.M.T @ (problem.M @ x) + problem.penalty.apply(x))
        new = float(np.linalg.norm(hx))
        if new == 0:
            break
        x = hx / new
        if abs(new - est) <= 1e-10 * new:
            est = new
            break
        est = new
    return min(cap, 1.01 * est) if est > 0 else cap


def kkt_residual(problem: QpProblem, gamma: np.ndarray) -> float:
    """Projected-gradient stationarity measure ``||g - proj(g - grad f(g))||_inf``."""
    return float(np.max(np.abs(gamma - problem.project(gamma - problem.gradient(gamma))), initial=0.0))


def solve(problem: QpProblem, max_iter: int = 10000, tol: float = 1e-8, check_every: int = 10) -> QpSolution:
    """Minimize the balancing QP by accelerated projected gradient."""
    x = problem.project(np.zeros(problem.k))
    lip = lipschitz_constant(problem)
    step = 1.0 / lip if lip > 0 else 1.0
    fx = problem.objective(x)
    if not np.isfinite(fx):
        raise NonFiniteObjective("objective is not finite at the starting point")
    y = x.copy()
    theta = 1.0
    restarts = [fx]
    resid = kkt_residual(problem, x)
    it = 0
    while resid >= tol and it < max_iter:
        it += 1
        x_new = problem.project(y - step * problem.gradient(y))
        f_new = problem.objective(x_new)
        if not np.isfinite(f_new):
            raise NonFiniteObjective(f"objective became non-finite at iteration {it}")
        if f_new > fx:
            theta = 1.0
            x_new = problem.project(x - step * problem.gradient(x))
            f_new = problem.objective(x_new)
            # a plain step of length 1/Lip descends in exact arithmetic; any increase
            # here is rounding noise, and rejecting it would stall near the optimum
            restarts.append(f_new)
        theta_next = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * theta * theta))
        y = x_new + ((theta - 1.0) / theta_next) * (x_new - x)
        x, fx, theta = x_new, f_new, theta_next
        if it % check_every == 0 or it == max_iter:
            resid = kkt_residual(problem, x)
    converged = resid < tol
    if not converged:
        logger.warning("QP solver stopped after %d iterations with KKT residual %.3g", it, resid)
    return QpSolution(
        gamma=x,
        kkt_residual=resid,
        iterations=it,
        objective_balance=problem.balance(x),
        objective_penalty=problem.penalty.value(x),
        converged=converged,
        restart_objectives=restarts,
    )
