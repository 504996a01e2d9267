"""L-BFGS with a discrete multi-scale line search.

One iteration: evaluate cost and gradient, form the two-loop direction,
try every step scale along it, keep the cheapest candidate, then push the
(s, y) pair into the history if it satisfies the curvature condition.

``lbfgs_iterate`` and friends operate on one vector. ``BatchLbfgs`` runs the
same iteration for many independent items at once; it is what the motion
pipeline uses.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from numba import njit

DEFAULT_SCALES = (0.01, 0.03, 0.1, 0.3, 1.0)


class NumericalFailure(ArithmeticError):
    pass


@dataclass
class LbfgsSettings:
    memory: int = 10
    scales: tuple[float, ...] = DEFAULT_SCALES
    curvature_eps: float = 1e-10
    grad_tol: float = 1e-5
    cost_tol: float = 1e-8
    max_iters: int = 100
    # Largest allowed |component| of a direction before scaling; None disables.
    max_step: float | None = 1.0

    def __post_init__(self):
        self.scales = tuple(float(s) for s in self.scales)
        validate_scales(self.scales)
        if self.memory < 1:
            raise ValueError("memory must be >= 1")

    def to_dict(self) -> dict:
        return {
            "memory": self.memory,
            "scales": list(self.scales),
            "curvature_eps": self.curvature_eps,
            "grad_tol": self.grad_tol,
            "cost_tol": self.cost_tol,
            "max_iters": self.max_iters,
            "max_step": self.max_step,
        }


def validate_scales(scales) -> None:
    if len(scales) < 1:
        raise ValueError("need at least one step scale")
    if any(s <= 0 for s in scales) or any(b <= a for a, b in zip(scales, scales[1:])):
        raise ValueError("step scales must be positive and strictly increasing")


@dataclass
class LbfgsState:
    memory: int = 10
    curvature_eps: float = 1e-10
    s_hist: list = field(default_factory=list)
    y_hist: list = field(default_factory=list)
    theta: np.ndarray | None = None
    grad: np.ndarray | None = None
    cost: float | None = None
    iteration: int = 0

    def push(self, s: np.ndarray, y: np.ndarray) -> bool:
        """Store (s, y) if s.y > curvature_eps; drops the oldest pair when full."""
        if float(s @ y) <= self.curvature_eps:
            return False
        self.s_hist.append(s)
        self.y_hist.append(y)
        if len(self.s_hist) > self.memory:
            del self.s_hist[0]
            del self.y_hist[0]
        return True

    def reset_history(self) -> None:
        self.s_hist.clear()
        self.y_hist.clear()


def two_loop_direction(state: LbfgsState, grad: np.ndarray) -> np.ndarray:
    q = np.array(grad, dtype=np.float64)
    alphas = []
    for s, y in zip(reversed(state.s_hist), reversed(state.y_hist)):
        rho = 1.0 / float(y @ s)
        a = rho * float(s @ q)
        q -= a * y
        alphas.append(a)
    if state.s_hist:
        s, y = state.s_hist[-1], state.y_hist[-1]
        gamma = float(s @ y) / float(y @ y)
    else:
        gamma = 1.0
    r = gamma * q
    for (s, y), a in zip(zip(state.s_hist, state.y_hist), reversed(alphas)):
        rho = 1.0 / float(y @ s)
        b = rho * float(y @ r)
        r += s * (a - b)
    return -r


def _finite_or_inf(c: float) -> float:
    return c if math.isfinite(c) else math.inf


def line_search_select(
    theta: np.ndarray,
    direction: np.ndarray,
    scales,
    cost_fn: Callable[[np.ndarray], float],
    current_cost: float | None = None,
    require_improvement: bool = True,
):
    """Pick the cheapest of ``theta + s * direction`` over ``scales``.

    Ties go to the smallest scale. Without strict improvement over
    ``current_cost`` the input is returned with scale 0.
    """
    scales = tuple(scales)
    costs = [_finite_or_inf(float(cost_fn(theta + s * direction))) for s in scales]
    best = int(np.argmin(costs))
    if require_improvement:
        if current_cost is None:
            current_cost = _finite_or_inf(float(cost_fn(theta)))
        if not costs[best] < current_cost:
            return np.array(theta, dtype=np.float64), 0.0
    return theta + scales[best] * direction, scales[best]


def _clip(direction: np.ndarray, max_step: float | None) -> np.ndarray:
    if max_step is None:
        return direction
    peak = np.max(np.abs(direction)) if direction.size else 0.0
    return direction * (max_step / peak) if peak > max_step else direction


def lbfgs_iterate(
    state: LbfgsState,
    theta: np.ndarray,
    cost_and_grad_fn,
    scales=DEFAULT_SCALES,
    max_step: float | None = None,
    require_improvement: bool = True,
):
    """Advance one iteration; returns (theta_next, state, cost_next).

    A failed line search clears the history so the next iteration falls back
    to steepest descent.
    """
    theta = np.asarray(theta, dtype=np.float64)
    if state.theta is not None and np.array_equal(state.theta, theta):
        f, g = state.cost, state.grad
    else:
        f, g = cost_and_grad_fn(theta)
        f = float(f)
        g = np.asarray(g, dtype=np.float64)
        if not (math.isfinite(f) and np.all(np.isfinite(g))):
            raise NumericalFailure("cost or gradient is not finite")
    d = _clip(two_loop_direction(state, g), max_step)
    theta_next, scale = line_search_select(
        theta, d, scales, lambda x: cost_and_grad_fn(x)[0], f, require_improvement
    )
    state.iteration += 1
    if scale == 0.0 and require_improvement:
        state.reset_history()
        state.theta, state.cost, state.grad = theta, f, g
        return theta, state, f
    f_next, g_next = cost_and_grad_fn(theta_next)
    f_next = float(f_next)
    g_next = np.asarray(g_next, dtype=np.float64)
    if not (math.isfinite(f_next) and np.all(np.isfinite(g_next))):
        raise NumericalFailure("cost or gradient is not finite")
    state.push(theta_next - theta, g_next - g)
    state.theta, state.cost, state.grad = theta_next, f_next, g_next
    return theta_next, state, f_next


@dataclass
class MinimizeResult:
    theta: np.ndarray
    cost: float
    grad_norm: float
    iterations: int
    converged: bool
    costs: list[float]


def minimize(cost_and_grad_fn, theta0, settings: LbfgsSettings | None = None) -> MinimizeResult:
    """Iterate until the gradient norm or the per-iteration improvement
    falls below tolerance, or ``max_iters`` is reached."""
    settings = settings or LbfgsSettings()
    state = LbfgsState(memory=settings.memory, curvature_eps=settings.curvature_eps)
    theta = np.array(theta0, dtype=np.float64)
    f, g = cost_and_grad_fn(theta)
    state.theta, state.cost, state.grad = theta, float(f), np.asarray(g, dtype=np.float64)
    costs = [float(f)]
    converged = np.linalg.norm(state.grad) < settings.grad_tol
    it = 0
    while not converged and it < settings.max_iters:
        had_history = bool(state.s_hist)
        theta, state, f_next = lbfgs_iterate(
            state, theta, cost_and_grad_fn, settings.scales, settings.max_step
        )
        it += 1
        improvement = costs[-1] - f_next
        costs.append(f_next)
        if np.linalg.norm(state.grad) < settings.grad_tol:
            converged = True
        elif improvement < settings.cost_tol and not (improvement == 0.0 and had_history):
            converged = True
    return MinimizeResult(theta, costs[-1], float(np.linalg.norm(state.grad)), it, converged, costs)


@njit(cache=True)
def _two_loop_batch(S, Y, count, idx, g, out):
    m = S.shape[1]
    n = S.shape[2]
    alpha = np.empty(m)
    q = np.empty(n)
    for row in range(idx.shape[0]):
        b = idx[row]
        for k in range(n):
            q[k] = g[row, k]
        c = count[b]
        for h in range(c - 1, -1, -1):
            sy = 0.0
            sq = 0.0
            for k in range(n):
                sy += S[b, h, k] * Y[b, h, k]
                sq += S[b, h, k] * q[k]
            a = sq / sy
            alpha[h] = a
            for k in range(n):
                q[k] -= a * Y[b, h, k]
        gamma = 1.0
        if c > 0:
            sy = 0.0
            yy = 0.0
            for k in range(n):
                sy += S[b, c - 1, k] * Y[b, c - 1, k]
                yy += Y[b, c - 1, k] * Y[b, c - 1, k]
            gamma = sy / yy
        for k in range(n):
            q[k] *= gamma
        for h in range(c):
            sy = 0.0
            yr = 0.0
            for k in range(n):
                sy += S[b, h, k] * Y[b, h, k]
                yr += Y[b, h, k] * q[k]
            beta = yr / sy
            for k in range(n):
                q[k] += S[b, h, k] * (alpha[h] - beta)
        for k in range(n):
            out[row, k] = -q[k]


@njit(cache=True)
def _push_batch(S, Y, count, idx, s, y, eps):
    m = S.shape[1]
    n = S.shape[2]
    for row in range(idx.shape[0]):
        b = idx[row]
        sy = 0.0
        for k in range(n):
            sy += s[row, k] * y[row, k]
        if sy <= eps:
            continue
        c = count[b]
        if c == m:
            for h in range(m - 1):
                for k in range(n):
                    S[b, h, k] = S[b, h + 1, k]
                    Y[b, h, k] = Y[b, h + 1, k]
            c = m - 1
        for k in range(n):
            S[b, c, k] = s[row, k]
            Y[b, c, k] = y[row, k]
        count[b] = c + 1


@dataclass
class BatchResult:
    theta: np.ndarray
    cost: np.ndarray
    converged: np.ndarray
    failed: np.ndarray
    iterations: int
    cost_trace: list[np.ndarray] | None = None


class BatchLbfgs:
    """Independent L-BFGS runs over the rows of a (B, n) array.

    ``cost_fn(X) -> (K,)`` and ``cost_grad_fn(X) -> ((K,), (K, n))`` must be
    row-wise pure. Items stop when converged; items whose cost or gradient
    becomes non-finite are marked failed and frozen.
    """

    def __init__(self, settings: LbfgsSettings):
        self.settings = settings

    def run(self, theta0, cost_fn, cost_grad_fn, record: bool = False) -> BatchResult:
        cfg = self.settings
        theta = np.array(theta0, dtype=np.float64)
        B, n = theta.shape
        scales = np.asarray(cfg.scales)
        N = scales.size
        S = np.zeros((B, cfg.memory, n))
        Y = np.zeros((B, cfg.memory, n))
        count = np.zeros(B, dtype=np.int64)
        f, g = cost_grad_fn(theta)
        f = np.array(f, dtype=np.float64)
        g = np.array(g, dtype=np.float64)
        failed = ~(np.isfinite(f) & np.all(np.isfinite(g), axis=1))
        converged = ~failed & (np.linalg.norm(g, axis=1) < cfg.grad_tol)
        trace = [f.copy()] if record else None
        it = 0
        while it < cfg.max_iters:
            idx = np.flatnonzero(~(converged | failed))
            if idx.size == 0:
                break
            it += 1
            d = np.empty((idx.size, n))
            _two_loop_batch(S, Y, count, idx, g[idx], d)
            if cfg.max_step is not None:
                peak = np.max(np.abs(d), axis=1)
                shrink = np.where(peak > cfg.max_step, cfg.max_step / np.maximum(peak, 1e-300), 1.0)
                d *= shrink[:, None]
            cand = theta[idx, None, :] + scales[None, :, None] * d[:, None, :]
            cc = np.asarray(cost_fn(cand.reshape(-1, n)), dtype=np.float64).reshape(idx.size, N)
            cc[~np.isfinite(cc)] = np.inf
            best = np.argmin(cc, axis=1)
            best_cost = cc[np.arange(idx.size), best]
            improved = best_cost < f[idx]

            stuck = idx[~improved]
            if stuck.size:
                had = count[stuck] > 0
                count[stuck[had]] = 0
                converged[stuck[~had]] = True

            moved = idx[improved]
            if moved.size:
                new_theta = cand[improved, best[improved]]
                f_new, g_new = cost_grad_fn(new_theta)
                f_new = np.array(f_new, dtype=np.float64)
                g_new = np.array(g_new, dtype=np.float64)
                bad = ~(np.isfinite(f_new) & np.all(np.isfinite(g_new), axis=1))
                failed[moved[bad]] = True
                ok = ~bad
                mv = moved[ok]
                _push_batch(S, Y, count, mv, new_theta[ok] - theta[mv], g_new[ok] - g[mv], cfg.curvature_eps)
                improvement = f[mv] - f_new[ok]
                theta[mv] = new_theta[ok]
                f[mv] = f_new[ok]
                g[mv] = g_new[ok]
                done = (np.linalg.norm(g_new[ok], axis=1) < cfg.grad_tol) | (improvement < cfg.cost_tol)
                converged[mv[done]] = True
            if record:
                trace.append(f.copy())
        return BatchResult(theta, f, converged, failed, it, trace)
