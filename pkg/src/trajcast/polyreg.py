"""Cubic polynomial regression over timestamped series.

The production path minimizes the mean squared residual with a hand-written
L-BFGS; :func:`fit_closed_form` solves the same least-squares problem through
a QR factorization and serves as an independent oracle.
"""

from dataclasses import dataclass, replace
from typing import Callable, NamedTuple, Sequence

import numpy as np

DEGREE = 3


class FitError(ValueError):
    pass


class DegenerateInputError(FitError):
    pass


class RankDeficientError(FitError):
    pass


class NonConvergenceError(FitError):
    def __init__(self, message, best):
        super().__init__(message)
        self.best = best


class PolyCoeffs(NamedTuple):
    theta0: float
    theta1: float
    theta2: float
    theta3: float


@dataclass(frozen=True)
class LbfgsConfig:
    memory: int = 10
    max_iters: int = 100
    grad_tol: float = 1e-8
    armijo_c: float = 1e-4
    backtrack: float = 0.5
    max_backtracks: int = 60

    def __post_init__(self):
        if self.memory < 1:
            raise ValueError("memory must be >= 1")
        if not self.grad_tol > 0:
            raise ValueError("grad_tol must be > 0")
        if not 0 < self.backtrack < 1:
            raise ValueError("backtrack factor must lie in (0, 1)")
        if not 0 < self.armijo_c < 1:
            raise ValueError("armijo constant must lie in (0, 1)")


DEFAULT_LBFGS = LbfgsConfig()
_F_SLACK = 1e-6
_X_STALL = 4 * np.finfo(float).eps
POLISH = 1e-4


@dataclass
class LbfgsResult:
    x: np.ndarray
    fun: float
    grad_norm: float
    iterations: int
    converged: bool


def lbfgs_minimize(fun_grad: Callable, x0, cfg: LbfgsConfig = DEFAULT_LBFGS) -> LbfgsResult:
    """Minimize a smooth function with L-BFGS and Armijo backtracking.

    ``fun_grad(x)`` must return ``(f, g)``. Never raises on non-convergence;
    the caller inspects ``converged``.
    """
    x = np.array(x0, dtype=float)
    f, g = fun_grad(x)
    s_hist, y_hist, rho_hist = [], [], []
    gnorm = float(np.linalg.norm(g))
    it = 0
    while gnorm > cfg.grad_tol and it < cfg.max_iters:
        # two-loop recursion
        q = g.copy()
        alphas = []
        for s, y, rho in zip(reversed(s_hist), reversed(y_hist), reversed(rho_hist)):
            a = rho * s.dot(q)
            alphas.append(a)
            q -= a * y
        if s_hist:
            gamma = s_hist[-1].dot(y_hist[-1]) / y_hist[-1].dot(y_hist[-1])
        else:
            gamma = 1.0 / gnorm
        r = gamma * q
        for s, y, rho, a in zip(s_hist, y_hist, rho_hist, reversed(alphas)):
            b = rho * y.dot(r)
            r += s * (a - b)
        d = -r
        slope = g.dot(d)
        if slope >= 0:
            # curvature memory went bad; restart along steepest descent
            s_hist.clear(), y_hist.clear(), rho_hist.clear()
            d = -g / gnorm
            slope = g.dot(d)

        step = 1.0
        for _ in range(cfg.max_backtracks):
            x_new = x + step * d
            f_new, g_new = fun_grad(x_new)
            if f_new <= f + cfg.armijo_c * step * slope:
                break
            # approximate Armijo (Hager-Zhang): near the optimum the decrease drops
            # below rounding in f, so accept on the directional derivative instead
            if f_new <= f + _F_SLACK * abs(f) and g_new.dot(d) <= (1.0 - 2.0 * cfg.armijo_c) * -slope:
                break
            step *= cfg.backtrack
        else:
            break

        s = x_new - x
        if np.linalg.norm(s) <= _X_STALL * (1.0 + np.linalg.norm(x)):
            x, f, g = x_new, f_new, g_new
            gnorm = float(np.linalg.norm(g))
            break
        y = g_new - g
        sy = s.dot(y)
        if sy > 1e-300:
            s_hist.append(s)
            y_hist.append(y)
            rho_hist.append(1.0 / sy)
            if len(s_hist) > cfg.memory:
                del s_hist[0], y_hist[0], rho_hist[0]
        x, f, g = x_new, f_new, g_new
        gnorm = float(np.linalg.norm(g))
        it += 1
    return LbfgsResult(x, float(f), gnorm, it, gnorm <= cfg.grad_tol)


def vandermonde(times) -> np.ndarray:
    t = np.asarray(times, dtype=float)
    return np.vander(t, DEGREE + 1, increasing=True)


def objective(theta, design, values):
    """Mean squared residual and its gradient."""
    r = design @ theta - values
    n = len(values)
    return r.dot(r) / n, (2.0 / n) * (design.T @ r)


def _validate(times, values):
    t = np.asarray(times, dtype=float)
    v = np.asarray(values, dtype=float)
    if t.ndim != 1 or t.shape != v.shape:
        raise FitError("times and values must be 1-D arrays of equal length")
    if len(t) < DEGREE + 1:
        raise FitError(f"need at least {DEGREE + 1} samples, got {len(t)}")
    if not (np.all(np.isfinite(t)) and np.all(np.isfinite(v))):
        raise FitError("non-finite sample")
    return t, v


def _monomial_from_scaled(c, center, half):
    """Expand sum c_k * ((t - center) / half)**k into monomial coefficients of t."""
    # binomial expansion of (t - center)^k / half^k
    out = np.zeros(DEGREE + 1)
    for k, ck in enumerate(c):
        scale = ck / half ** k
        for j in range(k + 1):
            out[j] += scale * _BINOM[k][j] * (-center) ** (k - j)
    return out


_BINOM = [[1], [1, 1], [1, 2, 1], [1, 3, 3, 1]]


def fit_lbfgs(times, values, cfg: LbfgsConfig = DEFAULT_LBFGS) -> PolyCoeffs:
    """Fit a cubic by L-BFGS on the mean squared residual.

    Time is mapped affinely onto [-1, 1] before minimizing (a fixed
    preconditioner); the result is expanded back to monomials in ``times``.
    """
    t, v = _validate(times, values)
    lo, hi = t.min(), t.max()
    if hi == lo:
        raise DegenerateInputError("all sample times identical")
    center = 0.5 * (lo + hi)
    half = 0.5 * (hi - lo)
    design = vandermonde((t - center) / half)
    vscale = max(float(np.max(np.abs(v))), 1.0)
    vn = v / vscale
    # grad_tol applies to the gradient in the caller's value units. The solver
    # aims POLISH times lower because the monomial expansion amplifies any
    # remaining error in the scaled coefficients; a stall at rounding level
    # still counts as converged when grad_tol itself is met.
    tol = cfg.grad_tol / vscale
    res = lbfgs_minimize(lambda th: objective(th, design, vn), np.zeros(DEGREE + 1),
                         replace(cfg, grad_tol=tol * POLISH))
    coeffs = PolyCoeffs(*map(float, _monomial_from_scaled(res.x * vscale, center, half)))
    if res.grad_norm > tol:
        raise NonConvergenceError(
            f"gradient norm {res.grad_norm:.3e} above {tol:.1e} after {res.iterations} iterations",
            coeffs,
        )
    return coeffs


def fit_closed_form(times, values) -> PolyCoeffs:
    t, v = _validate(times, values)
    if len(np.unique(t)) < DEGREE + 1:
        raise RankDeficientError(f"fewer than {DEGREE + 1} distinct sample times")
    q, r = np.linalg.qr(vandermonde(t))
    diag = np.abs(np.diag(r))
    if diag.min() <= 1e-12 * diag.max():
        raise RankDeficientError("Vandermonde matrix numerically rank deficient")
    return PolyCoeffs(*map(float, np.linalg.solve(r, q.T @ v)))


def evaluate(c, t):
    """Horner evaluation; ``t`` may be a scalar or an array."""
    return ((c[3] * t + c[2]) * t + c[1]) * t + c[0]


def mean_squared_residual(c, times, values) -> float:
    r = evaluate(c, np.asarray(times, dtype=float)) - np.asarray(values, dtype=float)
    return float(np.mean(r * r))


def fit_xy(times: Sequence[float], points, cfg: LbfgsConfig = DEFAULT_LBFGS):
    """Independent cubic fits for the x and y coordinates of ``points``."""
    t = np.asarray(times, dtype=float)
    p = np.asarray(points, dtype=float).reshape(-1, 2)
    if len(t) != len(p):
        raise FitError("times and points differ in length")
    if np.any(np.diff(t) <= 0):
        raise FitError("times must be strictly increasing")
    return fit_lbfgs(t, p[:, 0], cfg), fit_lbfgs(t, p[:, 1], cfg)
