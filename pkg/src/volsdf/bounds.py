"""Rectangle-rule opacity along a ray and its certified error bounds.

Knot indices are 0-based here: a track with ``n`` knots has intervals
``k = 0 .. n-2`` and interval ``k`` is ``[t[k], t[k+1]]`` (left closed, so a
query exactly at ``t[k]`` belongs to interval ``k``; ``t[-1]`` belongs to the
last interval).

The array helpers at the bottom work along the last axis and accept leading
batch dimensions; the sampler uses them on many rays at once.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .density import DensityParams, sigma_from_sdf
from .sdf import SdfScene, _vec3


@dataclass(frozen=True, eq=False)
class Ray:
    origin: np.ndarray
    direction: np.ndarray
    far: float

    def __post_init__(self):
        object.__setattr__(self, "origin", _vec3(self.origin, "origin"))
        v = _vec3(self.direction, "direction")
        if abs(np.linalg.norm(v) - 1.0) > 1e-9:
            raise ValueError("ray direction must be a unit vector")
        object.__setattr__(self, "direction", v)
        if not self.far > 0:
            raise ValueError("ray far bound must be > 0")

    @classmethod
    def for_scene(cls, origin, direction, scene: SdfScene, far: Optional[float] = None) -> "Ray":
        """Ray with the default far bound ``2 r``; ``direction`` is normalised."""
        v = np.asarray(direction, dtype=np.float64)
        v = v / np.linalg.norm(v)
        return cls(origin, v, 2.0 * scene.bounding_radius if far is None else far)

    def at(self, t):
        t = np.asarray(t, dtype=np.float64)
        return self.origin + t[..., None] * self.direction


# ---------------------------------------------------------------------------
# per-interval geometry
# ---------------------------------------------------------------------------


def d_star(d_i, d_next, delta):
    """Distance from the segment to the complement of the two open balls.

    The balls have radius ``|d_i|`` and ``|d_next|`` and are centred at the
    segment endpoints.  Three regimes: the balls leave a gap on the segment
    (0); one endpoint angle is obtuse, so the nearest boundary point lies on a
    single sphere (the smaller radius, or ``max - delta`` when the larger ball
    swallows the smaller one); otherwise the nearest boundary point is on the
    intersection circle and the distance is the triangle height from Heron's
    formula.
    """
    a = np.abs(np.asarray(d_i, dtype=np.float64))
    b = np.abs(np.asarray(d_next, dtype=np.float64))
    delta = np.asarray(delta, dtype=np.float64)
    # Heron in Kahan's ordering (x >= y >= z) so thin triangles keep their
    # precision; a height can never exceed the shorter of its two sides
    x = np.maximum(np.maximum(a, b), delta)
    z = np.minimum(np.minimum(a, b), delta)
    y = a + b + delta - x - z
    radicand = (x + (y + z)) * (z - (x - y)) * (z + (x - y)) * (x + (y - z))
    h = 0.5 / delta * np.sqrt(np.maximum(radicand, 0.0))
    h = np.minimum(h, np.minimum(a, b))
    one_sided = np.maximum(np.minimum(a, b), np.maximum(a, b) - delta)
    out = np.where(np.abs(a * a - b * b) >= delta * delta, one_sided, h)
    return np.where(a + b <= delta, 0.0, out)


def lipschitz_bound(d_i, d_next, delta, params: DensityParams):
    """Bound on |d sigma / ds| inside one interval."""
    ds = d_star(d_i, d_next, delta)
    return params.alpha / (2.0 * params.beta) * np.exp(-ds / params.beta)


# ---------------------------------------------------------------------------
# tracks
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class SampleTrack:
    """Sorted knots along a ray with cached distances.

    ``sigma``, ``R`` (rectangle sum at the knots), ``E`` (error bound at the
    knots) and ``bounds`` (per-interval opacity error bounds) are computed for
    ``params`` at construction.  Use :meth:`with_params` to re-evaluate the
    same knots at another density scale; the distance caches are shared.
    """

    t: np.ndarray
    d: np.ndarray
    params: DensityParams
    dstar: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        t = np.asarray(self.t, dtype=np.float64)
        d = np.asarray(self.d, dtype=np.float64)
        if t.ndim != 1 or t.shape != d.shape or t.size < 2:
            raise ValueError("track needs matching 1-D knot and distance arrays, n >= 2")
        delta = np.diff(t)
        if not np.all(delta > 0):
            raise ValueError("knots must be strictly increasing")
        object.__setattr__(self, "t", t)
        object.__setattr__(self, "d", d)
        object.__setattr__(self, "delta", delta)
        if self.dstar is None:
            object.__setattr__(self, "dstar", d_star(d[:-1], d[1:], delta))
        p = self.params
        sigma = sigma_from_sdf(d, p.alpha, p.beta)
        R, E, bounds = bound_arrays(delta, sigma, self.dstar, p.alpha, p.beta)
        object.__setattr__(self, "sigma", sigma)
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "E", E)
        object.__setattr__(self, "bounds", bounds)

    @classmethod
    def build(cls, ray: Ray, scene: SdfScene, t, params: DensityParams) -> "SampleTrack":
        t = np.asarray(t, dtype=np.float64)
        return cls(t, scene.eval(ray.at(t)), params)

    @classmethod
    def uniform(cls, ray: Ray, scene: SdfScene, n: int, params: DensityParams) -> "SampleTrack":
        return cls.build(ray, scene, uniform_knots(ray.far, n), params)

    def with_params(self, params: DensityParams) -> "SampleTrack":
        if params == self.params:
            return self
        return SampleTrack(self.t, self.d, params, self.dstar)

    @property
    def n(self) -> int:
        return self.t.size

    @property
    def global_bound(self) -> float:
        return float(np.max(self.bounds))

    def interval_of(self, t):
        t = np.asarray(t, dtype=np.float64)
        if np.any(t < self.t[0]) or np.any(t > self.t[-1]) or np.any(np.isnan(t)):
            raise ValueError(f"query outside [{self.t[0]}, {self.t[-1]}]")
        return np.clip(np.searchsorted(self.t, t, side="right") - 1, 0, self.n - 2)


def uniform_knots(far: float, n: int) -> np.ndarray:
    if n < 2:
        raise ValueError("need at least two knots")
    return np.linspace(0.0, far, n)  # endpoints exact


def _params_track(track: SampleTrack, params: Optional[DensityParams]) -> SampleTrack:
    return track if params is None else track.with_params(params)


def rectangle_sum(track: SampleTrack, t):
    """Left Riemann sum of sigma over ``[0, t]``."""
    k = track.interval_of(t)
    return track.R[k] + (np.asarray(t, dtype=np.float64) - track.t[k]) * track.sigma[k]


def opacity_hat(track: SampleTrack, t):
    return -np.expm1(-rectangle_sum(track, t))


def error_hat(track: SampleTrack, t, params: Optional[DensityParams] = None):
    """Upper bound on the rectangle rule's optical-depth error at ``t``."""
    tr = _params_track(track, params)
    k = tr.interval_of(t)
    p = tr.params
    tail = (np.asarray(t, dtype=np.float64) - tr.t[k]) ** 2 * np.exp(-tr.dstar[k] / p.beta)
    return tr.E[k] + p.alpha / (4.0 * p.beta) * tail


def interval_bounds(track: SampleTrack, params: Optional[DensityParams] = None) -> np.ndarray:
    return _params_track(track, params).bounds


def interval_bound(track: SampleTrack, k: int, params: Optional[DensityParams] = None) -> float:
    """``exp(-R(t_k)) * (exp(E(t_{k+1})) - 1)`` for the 0-based interval ``k``."""
    if not 0 <= k <= track.n - 2:
        raise IndexError(f"interval index {k} out of range for {track.n} knots")
    return float(interval_bounds(track, params)[k])


def global_bound(track: SampleTrack, params: Optional[DensityParams] = None) -> float:
    return float(np.max(interval_bounds(track, params)))


TRACK_CSV_COLUMNS = ("t", "d", "sigma", "R_hat", "O_hat", "d_star_next", "interval_bound")


def write_track_csv(track: SampleTrack, fh) -> None:
    """Per-knot diagnostics; the last knot has no following interval."""
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(TRACK_CSV_COLUMNS)
    O = -np.expm1(-track.R)
    for i in range(track.n):
        last = i == track.n - 1
        w.writerow(
            [
                repr(float(track.t[i])),
                repr(float(track.d[i])),
                repr(float(track.sigma[i])),
                repr(float(track.R[i])),
                repr(float(O[i])),
                "" if last else repr(float(track.dstar[i])),
                "" if last else repr(float(track.bounds[i])),
            ]
        )


# ---------------------------------------------------------------------------
# array kernels (last axis = knots)
# ---------------------------------------------------------------------------


def bound_arrays(delta, sigma, dstar, alpha, beta):
    """Rectangle sums, error bounds at the knots and per-interval bounds.

    ``alpha`` and ``beta`` broadcast against the leading batch dimensions,
    e.g. shape ``(B, 1)`` for a ``(B, n)`` batch.
    """
    zero = np.zeros(delta.shape[:-1] + (1,))
    R = np.concatenate([zero, np.cumsum(delta * sigma[..., :-1], axis=-1)], axis=-1)
    w = delta * delta * np.exp(-dstar / beta)
    E = np.concatenate([zero, np.cumsum(w, axis=-1) * (alpha / (4.0 * beta))], axis=-1)
    Enext = E[..., 1:]
    with np.errstate(over="ignore", invalid="ignore"):
        bounds = np.exp(-R[..., :-1]) * np.expm1(Enext)
    bad = ~np.isfinite(bounds)
    if np.any(bad):
        # expm1 overflowed: use exp(E - R), capped to stay finite
        bounds[bad] = np.exp(np.minimum(Enext[bad] - R[..., :-1][bad], 700.0))
    return R, E, bounds


def batch_global_bound(delta, d, dstar, alpha, beta):
    sigma = sigma_from_sdf(d, alpha, beta)
    return np.max(bound_arrays(delta, sigma, dstar, alpha, beta)[2], axis=-1)
