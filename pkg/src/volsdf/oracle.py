"""Reference opacity along a ray by dense adaptive quadrature.

This is the ground truth the rectangle-rule bounds are certified against, so
it shares no code with :mod:`volsdf.bounds`.  The optical depth is integrated
with composite 5-point Gauss-Legendre on a uniform base partition of
``[0, far]`` (every query point is inserted as a breakpoint), and any cell
whose value disagrees with the sums over its halves or quarters is bisected
further.
The whole computation is then repeated at twice the base resolution and the
two opacity curves must agree to ``RICHARDSON_TOL``.
"""

from __future__ import annotations

import numpy as np
from numpy.polynomial.legendre import leggauss

from .density import DensityParams, laplace_cdf
from .sdf import SdfScene

MIN_RESOLUTION = 2**14
DEFAULT_RESOLUTION = 2**16
RICHARDSON_TOL = 1e-8

_NODES, _WEIGHTS = leggauss(5)
_EVALS_PER_CELL = 7 * _NODES.size  # whole cell, two halves, four quarters
_TOL_PER_LENGTH = 1e-12
_MAX_DEPTH = 60


class OracleError(RuntimeError):
    """The quadrature failed its self-consistency check."""


def _gauss(f, a, b):
    half = 0.5 * (b - a)
    x = (0.5 * (a + b))[:, None] + half[:, None] * _NODES
    return half * (f(x) @ _WEIGHTS)


def _cell_integrals(f, breaks, tol_per_length):
    # a cell is accepted only when whole, halves and quarters all agree, so a
    # kink that happens to fool one comparison is still caught by the other
    n = breaks.size - 1
    a, b = breaks[:-1], breaks[1:]
    m = 0.5 * (a + b)
    owner = np.arange(n)
    whole, left, right = _gauss(f, a, b), _gauss(f, a, m), _gauss(f, m, b)
    total = np.zeros(n)
    converged = True
    for depth in range(_MAX_DEPTH + 1):
        ql, qr = 0.5 * (a + m), 0.5 * (m + b)
        ll, lr, rl, rr = _gauss(f, a, ql), _gauss(f, ql, m), _gauss(f, m, qr), _gauss(f, qr, b)
        halves, quarters = left + right, ll + lr + rl + rr
        tol = tol_per_length * (b - a) + 1e-14 * np.abs(quarters)
        ok = (np.abs(whole - halves) <= tol) & (np.abs(halves - quarters) <= tol)
        if depth == _MAX_DEPTH or a.size > 8 * n:
            converged = bool(np.all(ok))
            ok[:] = True
        np.add.at(total, owner[ok], quarters[ok])
        if np.all(ok):
            break
        k = ~ok
        a, m, b, owner = np.concatenate([a[k], m[k]]), np.concatenate([ql[k], qr[k]]), \
            np.concatenate([m[k], b[k]]), np.concatenate([owner[k], owner[k]])
        whole = np.concatenate([left[k], right[k]])
        left = np.concatenate([ll[k], rl[k]])
        right = np.concatenate([lr[k], rr[k]])
    return total, converged


def optical_depth(ray, scene: SdfScene, params: DensityParams, t, resolution: int):
    """Integral of sigma over ``[0, t_j]`` for every query ``t_j``."""
    t = np.asarray(t, dtype=np.float64)
    far = ray.far
    if np.any(t < 0) or np.any(t > far):
        raise ValueError("oracle queries must lie in [0, far]")
    cells = max(1, resolution // _EVALS_PER_CELL)
    breaks = np.union1d(np.linspace(0.0, far, cells + 1), t)
    alpha, beta = params.alpha, params.beta
    o, v = ray.origin, ray.direction

    def f(s):
        return alpha * laplace_cdf(-scene.eval(o + s[..., None] * v), beta)

    # sigma cannot be evaluated more accurately than its slope times the
    # rounding error of the sample position, so the tolerance respects that floor
    slope = alpha / (2.0 * beta)
    floor = 8.0 * np.finfo(float).eps * slope * (np.linalg.norm(o) + far)
    per_cell, converged = _cell_integrals(f, breaks, max(_TOL_PER_LENGTH, floor))
    cum = np.concatenate([[0.0], np.cumsum(per_cell)])
    return cum[np.searchsorted(breaks, t)], converged


def opacity_oracle(ray, scene: SdfScene, params: DensityParams, resolution: int = DEFAULT_RESOLUTION,
                   t=None) -> np.ndarray:
    """True opacity ``1 - exp(-int_0^t sigma)`` at the query points ``t``.

    ``resolution`` counts integrand evaluations in the uniform base pass.
    Raises :class:`OracleError` when doubling it moves any value by
    ``RICHARDSON_TOL`` or more.
    """
    if resolution < MIN_RESOLUTION:
        raise ValueError(f"oracle resolution must be >= {MIN_RESOLUTION}")
    if t is None:
        t = np.linspace(0.0, ray.far, 257)
    coarse, ok1 = optical_depth(ray, scene, params, t, resolution)
    fine, ok2 = optical_depth(ray, scene, params, t, 2 * resolution)
    O_coarse = -np.expm1(-coarse)
    O_fine = -np.expm1(-fine)
    diff = float(np.max(np.abs(O_fine - O_coarse))) if O_fine.size else 0.0
    if not (ok1 and ok2) or not diff < RICHARDSON_TOL:
        raise OracleError(
            f"opacity oracle not self-consistent (max change {diff:.3g} on doubling"
            f" resolution {resolution}); raise the resolution"
        )
    return O_fine
