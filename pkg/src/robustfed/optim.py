"""Deterministic minimiser for the low-dimensional variational fits.

Every iterative fit in the package optimises a smooth objective over a
handful of (mu, log sd) coordinates.  A short safeguarded gradient-descent
phase moves into the right basin, then damped Newton steps -- with
central-difference Hessians built from the analytic gradients and an
eigenvalue-modified solve -- take over.  Everything is full batch and
deterministic: same inputs, same iterates, no randomness anywhere.

Near machine precision the Armijo decrease on f becomes unresolvable in
float64; in that stall regime steps are accepted on gradient-norm decrease
instead, which lets callers ask for tolerances down to ~1e-12.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import OptimizerError

__all__ = ["OptimSettings", "OptimResult", "minimize"]

_GD_PHASE_ITERS = 40
_MAX_NEWTON = 200


@dataclass(frozen=True)
class OptimSettings:
    """Knobs for the iterative path; seed feeds Monte-Carlo objectives."""

    max_iter: int = 5000
    tol: float = 1e-8
    step0: float = 1.0
    seed: int = 0
    n_samples: int = 256


@dataclass
class OptimResult:
    x: np.ndarray
    value: float
    grad_norm: float
    iterations: int


def _sup(g: np.ndarray) -> float:
    return float(np.abs(g).max()) if g.size else 0.0


def _descent_phase(value_and_grad, x, f, g, tol, budget):
    """Armijo-backtracked gradient steps; returns the best point reached."""
    step = 1.0
    prev_x = prev_g = None
    for _ in range(budget):
        if _sup(g) <= tol:
            return x, f, g, True
        if prev_x is not None:
            s, y = x - prev_x, g - prev_g
            sy = float(s @ y)
            if sy > 0:
                step = float(s @ s) / sy
        step = float(np.clip(step, 1e-12, 1e6))
        g_sq = float(g @ g)
        trial, accepted = step, False
        while trial >= 1e-18:
            x_new = x - trial * g
            f_new, g_new = value_and_grad(x_new)
            if np.isfinite(f_new) and f_new <= f - 1e-4 * trial * g_sq:
                accepted = True
                break
            trial *= 0.5
        if not accepted:
            return x, f, g, False
        prev_x, prev_g = x, g
        x, f, g = x_new, f_new, g_new
        step = trial
    return x, f, g, False


def _fd_hessian(value_and_grad, x):
    n = x.shape[0]
    h = 1e-6 * np.maximum(1.0, np.abs(x))
    hess = np.empty((n, n))
    for i in range(n):
        e = np.zeros(n)
        e[i] = h[i]
        _, g_hi = value_and_grad(x + e)
        _, g_lo = value_and_grad(x - e)
        hess[:, i] = (g_hi - g_lo) / (2.0 * h[i])
    return 0.5 * (hess + hess.T)


def _modified_newton_direction(hess, g):
    """Solve with eigenvalues clamped away from zero so the step descends."""
    eigval, eigvec = np.linalg.eigh(hess)
    floor = max(1e-8 * float(np.abs(eigval).max()), 1e-12)
    safe = np.maximum(np.abs(eigval), floor)
    return eigvec @ ((eigvec.T @ g) / safe)


def minimize(
    value_and_grad: Callable[[np.ndarray], tuple[float, np.ndarray]],
    x0: np.ndarray,
    tol: float = 1e-8,
    max_iter: int = 5000,
    step0: float = 1.0,
) -> OptimResult:
    """Minimise f to gradient sup-norm <= tol; raises OptimizerError otherwise.

    Newton steps run first (warm starts are the common case); whenever one
    cannot be accepted, a burst of safeguarded gradient descent re-enters
    the basin and Newton resumes.
    """
    x = np.asarray(x0, dtype=np.float64).copy()
    f, g = value_and_grad(x)
    if not np.isfinite(f):
        raise OptimizerError("objective not finite at the starting point")
    gd_bursts_left = max(1, max_iter // _GD_PHASE_ITERS)
    for k in range(_MAX_NEWTON):
        gnorm = _sup(g)
        if gnorm <= tol:
            return OptimResult(x, f, gnorm, k)
        hess = _fd_hessian(value_and_grad, x)
        accepted = False
        if np.all(np.isfinite(hess)):
            direction = _modified_newton_direction(hess, g)
            scale = 1.0
            slope = float(g @ direction)
            flat_slack = 8.0 * np.finfo(np.float64).eps * max(1.0, abs(f))
            for _ in range(40):
                x_new = x - scale * direction
                f_new, g_new = value_and_grad(x_new)
                if np.isfinite(f_new) and (
                    f_new <= f - 1e-4 * scale * slope  # sufficient decrease
                    # stall regime: f no longer resolves, follow the gradient
                    or (f_new <= f + flat_slack and _sup(g_new) < 0.9 * gnorm)
                ):
                    accepted = True
                    break
                scale *= 0.5
        if accepted:
            x, f, g = x_new, f_new, g_new
            continue
        if gd_bursts_left == 0:
            break
        gd_bursts_left -= 1
        f_before = f
        x, f, g, done = _descent_phase(value_and_grad, x, f, g, tol, _GD_PHASE_ITERS)
        if done:
            return OptimResult(x, f, _sup(g), k)
        if _sup(g) >= gnorm and f >= f_before:
            break  # neither Newton nor descent can make progress
    gnorm = _sup(g)
    if gnorm <= tol:
        return OptimResult(x, f, gnorm, _MAX_NEWTON)
    raise OptimizerError(
        f"no convergence (|grad| = {gnorm:.3e} > tol {tol:.1e})",
        grad_norm=gnorm,
        iterations=max_iter,
    )
