"""Error-driven ray sampling.

Starting from a uniform knot set and a relaxed scale ``beta_plus`` that is
certified by the closed-form initial bound, knots are added where the
per-interval opacity bounds are largest and ``beta_plus`` is bisected back
towards the target ``beta``.  The final certified opacity estimate is then
inverted to draw the integration samples.

Everything runs on batches of rays at once (rows of 2-D arrays); the per-ray
functions are thin wrappers over the batched core.  Rows never interact, so a
ray's result does not depend on which batch it was processed in.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .bounds import (
    Ray,
    SampleTrack,
    batch_global_bound,
    bound_arrays,
    d_star,
    global_bound,
)
from .density import DensityParams, sigma_from_sdf
from .sdf import SdfScene

SAMPLE_MODES = ("random-stratified", "regular")
TRACE_COLUMNS = ("outer_iter", "knot_count", "beta_plus", "B_at_beta", "B_at_beta_plus")


@dataclass(frozen=True)
class SamplerConfig:
    epsilon: float = 0.1
    n_init: int = 128
    m_final: int = 64
    max_outer_iters: int = 5
    max_bisect_iters: int = 10
    rng_seed: int = 0
    final_sample_mode: str = "random-stratified"

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValueError("epsilon must be > 0")
        if self.n_init < 2:
            raise ValueError("n_init must be >= 2")
        if self.m_final < 2:
            raise ValueError("m_final must be >= 2")
        if self.max_outer_iters < 1:
            raise ValueError("max_outer_iters must be >= 1")
        if self.max_bisect_iters < 0:
            raise ValueError("max_bisect_iters must be >= 0")
        if not 0 <= self.rng_seed < 2**64:
            raise ValueError("rng_seed must be an unsigned 64-bit integer")
        if self.final_sample_mode not in SAMPLE_MODES:
            raise ValueError(f"final_sample_mode must be one of {SAMPLE_MODES}")


@dataclass(eq=False)
class SamplerReport:
    beta_plus: float
    converged: bool
    outer_iters_used: int
    total_knots: int
    certified_bound: float
    samples: np.ndarray
    track: Optional[SampleTrack] = field(default=None, repr=False)
    trace: list = field(default_factory=list, repr=False)


def beta_plus_init(params: DensityParams, far: float, n: int, epsilon: float) -> float:
    """Smallest scale that certifies a uniform ``n``-knot track on ``[0, far]``.

    With coupled parameters alpha moves with beta, so the condition
    ``alpha far^2 / (4 (n-1) beta) <= log(1 + eps)`` is solved with
    ``alpha = 1/beta``.
    """
    if n < 2:
        raise ValueError("n must be >= 2")
    return max(params.beta, _safe_beta(params, far * far / (n - 1), epsilon))


def _safe_beta(params: DensityParams, sum_delta_sq, epsilon):
    denom = 4.0 * math.log1p(epsilon)
    if params.coupled:
        return np.sqrt(sum_delta_sq / denom)
    return params.alpha * sum_delta_sq / denom


def _alpha_for(params: DensityParams, beta):
    return 1.0 / beta if params.coupled else np.full_like(beta, params.alpha)


def _batch_bound(params, delta, d, dstar, beta):
    beta = np.asarray(beta, dtype=np.float64)[:, None]
    return batch_global_bound(delta, d, dstar, _alpha_for(params, beta), beta)


def _batch_bisect(params, delta, d, dstar, lo, hi, epsilon, iters):
    lo, hi = lo.copy(), hi.copy()
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        ok = _batch_bound(params, delta, d, dstar, mid) <= epsilon
        hi = np.where(ok, mid, hi)
        lo = np.where(ok, lo, mid)
    return hi


def bisect_beta(track: SampleTrack, beta_lo: float, beta_hi: float, epsilon: float, max_iters: int) -> float:
    """Shrink ``beta_hi`` towards ``beta_lo`` keeping the bound at most ``epsilon``.

    Needs ``B(beta_lo) > epsilon >= B(beta_hi)``.  Returns the upper end of the
    final bracket, which is always certified.
    """
    p = track.params
    if not beta_lo <= beta_hi:
        raise ValueError("bisection bracket must satisfy beta_lo <= beta_hi")
    if not global_bound(track, p.with_beta(beta_lo)) > epsilon:
        raise ValueError("bisection needs B(beta_lo) > epsilon")
    if not global_bound(track, p.with_beta(beta_hi)) <= epsilon:
        raise ValueError("bisection needs B(beta_hi) <= epsilon")
    out = _batch_bisect(
        p, track.delta[None], track.d[None], track.dstar[None],
        np.array([beta_lo]), np.array([beta_hi]), epsilon, max_iters,
    )
    return float(out[0])


# ---------------------------------------------------------------------------
# upsampling
# ---------------------------------------------------------------------------


def allocate(bounds, n_add: int, widths=None) -> np.ndarray:
    """Split ``n_add`` new knots over intervals proportionally to ``bounds``.

    Largest-remainder rounding (ties go to the lower index).  Intervals holding
    the maximal bound always get at least one knot (the first ``n_add`` of them
    if there are more ties than knots).  Rows whose bounds are all zero fall
    back to allocation proportional to ``widths`` (uniform in ``t``).
    Works row-wise on 2-D input.
    """
    b = np.atleast_2d(np.asarray(bounds, dtype=np.float64))
    if n_add < 1:
        raise ValueError("n_add must be >= 1")
    w = np.where(np.isinf(b).any(axis=-1, keepdims=True), np.isinf(b).astype(float), b)
    total = w.sum(axis=-1, keepdims=True)
    if np.any(total <= 0):
        fallback = np.ones_like(w) if widths is None else np.atleast_2d(widths)
        w = np.where(total > 0, w, fallback)
        total = w.sum(axis=-1, keepdims=True)
    quota = n_add * (w / total)
    base = np.floor(quota)
    frac = quota - base
    rem = n_add - base.sum(axis=-1)
    order = np.argsort(-frac, axis=-1, kind="stable")
    rank = np.empty_like(order)
    np.put_along_axis(rank, order, np.arange(b.shape[-1])[None].repeat(b.shape[0], 0), axis=-1)
    counts = (base + (rank < rem[:, None])).astype(np.int64)

    is_max = w == w.max(axis=-1, keepdims=True)
    starved = np.flatnonzero(np.any(is_max & (counts == 0), axis=-1))
    for r in starved:
        tied = np.flatnonzero(is_max[r])[:n_add]
        need = tied[counts[r, tied] == 0]
        counts[r, need] += 1
        for _ in range(need.size):
            donors = np.where(np.isin(np.arange(counts.shape[1]), tied), -1, counts[r])
            counts[r, np.argmax(donors)] -= 1
    return counts


def _insert_knots(t, d, counts, origins, dirs, scene):
    """Equispaced new knots inside each interval; returns merged (t, d)."""
    B, n = t.shape
    delta = np.diff(t, axis=-1)
    flat = counts.ravel()
    iv = np.repeat(np.arange(flat.size), flat)
    starts = np.repeat(np.cumsum(flat) - flat, flat)
    j = (np.arange(iv.size) - starts + 1).astype(np.float64)
    c = flat[iv].astype(np.float64)
    t_new = (t[:, :-1].ravel()[iv] + delta.ravel()[iv] * (j / (c + 1.0))).reshape(B, -1)
    pts = origins[:, None, :] + t_new[..., None] * dirs[:, None, :]
    d_new = scene.eval(pts)
    t_all = np.concatenate([t, t_new], axis=-1)
    d_all = np.concatenate([d, d_new], axis=-1)
    order = np.argsort(t_all, axis=-1, kind="stable")
    return np.take_along_axis(t_all, order, -1), np.take_along_axis(d_all, order, -1)


def upsample(track: SampleTrack, bounds, n_add: int, ray: Ray, scene: SdfScene) -> SampleTrack:
    """Refine ``track`` with ``n_add`` knots placed according to ``bounds``.

    Only the new knots are evaluated against the scene.
    """
    counts = allocate(bounds, n_add, track.delta)
    t, d = _insert_knots(track.t[None], track.d[None], counts, ray.origin[None], ray.direction[None], scene)
    return SampleTrack(t[0], d[0], track.params)


# ---------------------------------------------------------------------------
# inverse CDF
# ---------------------------------------------------------------------------


def stratified_targets(m: int, mode: str, rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """``(j - zeta_j) / m`` for ``j = 1..m``; ``zeta = 1/2`` in regular mode."""
    j = np.arange(1, m + 1, dtype=np.float64)
    if mode == "regular":
        zeta = 0.5
    elif mode == "random-stratified":
        if rng is None:
            raise ValueError("random-stratified sampling needs an rng")
        zeta = 1.0 - rng.random(m)  # (0, 1]
    else:
        raise ValueError(f"unknown sample mode {mode!r}")
    return (j - zeta) / m


def _batch_invert(t, opacity, u):
    """Invert row-wise piecewise-linear CDFs ``opacity`` at targets ``u``."""
    G, n = t.shape
    total = opacity[:, -1:]
    transparent = total[:, 0] < 1e-12
    F = opacity / np.where(transparent[:, None], 1.0, total)
    off = 2.0 * np.arange(G)[:, None]
    k = np.searchsorted((F + off).ravel(), (u + off).ravel(), side="right").reshape(u.shape)
    k = np.clip(k - 1 - n * np.arange(G)[:, None], 0, n - 2)
    F0 = np.take_along_axis(F, k, -1)
    F1 = np.take_along_axis(F, k + 1, -1)
    t0 = np.take_along_axis(t, k, -1)
    t1 = np.take_along_axis(t, k + 1, -1)
    dF = F1 - F0
    frac = np.where(dF > 0, (u - F0) / np.where(dF > 0, dF, 1.0), 0.0)
    s = t0 + np.clip(frac, 0.0, 1.0) * (t1 - t0)
    uniform = t[:, :1] + u * (t[:, -1:] - t[:, :1])
    return np.where(transparent[:, None], uniform, s)


def inverse_cdf_sample(track: SampleTrack, beta_plus: float, m: int, mode: str,
                       rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """Sorted samples drawn from the piecewise-linear opacity estimate.

    The estimate uses ``track``'s knots at scale ``beta_plus`` and is
    normalised by its value at the far end.
    """
    tr = track.with_params(track.params.with_beta(beta_plus))
    O = -np.expm1(-tr.R)
    u = stratified_targets(m, mode, rng)
    return _batch_invert(tr.t[None], O[None], u[None])[0]


def ray_rng(seed: int, index: int) -> np.random.Generator:
    """Per-ray stream keyed by (global seed, ray/pixel index)."""
    return np.random.default_rng([int(index), int(seed)])


# ---------------------------------------------------------------------------
# the sampling loop
# ---------------------------------------------------------------------------


@dataclass
class BatchResult:
    """Per-ray outputs of :func:`sample_rays`, each indexed by ray."""

    beta_plus: np.ndarray
    converged: np.ndarray
    outer_iters: np.ndarray
    certified_bound: np.ndarray
    samples: np.ndarray  # (B, m)
    knots: list
    distances: list
    traces: list

    def report(self, i: int, params: DensityParams) -> SamplerReport:
        track = SampleTrack(self.knots[i], self.distances[i], params.with_beta(self.beta_plus[i]))
        return SamplerReport(
            beta_plus=float(self.beta_plus[i]),
            converged=bool(self.converged[i]),
            outer_iters_used=int(self.outer_iters[i]),
            total_knots=int(self.knots[i].size),
            certified_bound=float(self.certified_bound[i]),
            samples=self.samples[i],
            track=track,
            trace=self.traces[i],
        )


def sample_rays(origins, dirs, far, scene: SdfScene, params: DensityParams, config: SamplerConfig,
                indices=None, trace: bool = False) -> BatchResult:
    """Run the sampling algorithm on a batch of rays.

    ``indices`` are the per-ray stream indices for the final stratified draw
    (pixel index when rendering); defaults to ``0..B-1``.
    """
    origins = np.atleast_2d(np.asarray(origins, dtype=np.float64))
    dirs = np.atleast_2d(np.asarray(dirs, dtype=np.float64))
    B = origins.shape[0]
    far = np.broadcast_to(np.asarray(far, dtype=np.float64), (B,)).copy()
    indices = np.arange(B) if indices is None else np.asarray(indices)
    eps = config.epsilon
    beta = params.beta
    n0 = config.n_init
    m = config.m_final

    out_bp = np.empty(B)
    out_conv = np.zeros(B, dtype=bool)
    out_iters = np.zeros(B, dtype=np.int64)
    out_bound = np.empty(B)
    out_samples = np.empty((B, m))
    out_t: list = [None] * B
    out_d: list = [None] * B
    traces: list = [[] for _ in range(B)]

    rows = np.arange(B)
    t = far[:, None] * (np.arange(n0) / (n0 - 1.0))[None]
    d = scene.eval(origins[:, None, :] + t[..., None] * dirs[:, None, :])
    bp = np.array([beta_plus_init(params, f, n0, eps) for f in far])

    def geometry(t, d):
        delta = np.diff(t, axis=-1)
        return delta, d_star(d[:, :-1], d[:, 1:], delta)

    delta, dstar = geometry(t, d)
    B_beta = _batch_bound(params, delta, d, dstar, np.full(B, beta))
    conv = B_beta <= eps
    bp = np.where(conv, beta, bp)
    if trace:
        B_plus = _batch_bound(params, delta, d, dstar, bp)
        for r in range(B):
            traces[r].append((0, n0, float(bp[r]), float(B_beta[r]), float(B_plus[r])))

    it = 0
    while True:
        done = conv | (it >= config.max_outer_iters)
        if np.any(done):
            _finish(done, rows, t, d, delta, dstar, bp, conv, it, params, config, indices,
                    out_bp, out_conv, out_iters, out_bound, out_samples, out_t, out_d)
            keep = ~done
            rows, t, d, delta, dstar, bp = rows[keep], t[keep], d[keep], delta[keep], dstar[keep], bp[keep]
        if rows.size == 0:
            break
        it += 1
        # upsample proportionally to the bounds at the working scale
        bp_col = bp[:, None]
        sigma = sigma_from_sdf(d, _alpha_for(params, bp_col), bp_col)
        bounds = bound_arrays(delta, sigma, dstar, _alpha_for(params, bp_col), bp_col)[2]
        counts = allocate(bounds, n0, delta)
        t, d = _insert_knots(t, d, counts, origins[rows], dirs[rows], scene)
        delta, dstar = geometry(t, d)

        B_beta = _batch_bound(params, delta, d, dstar, np.full(rows.size, beta))
        conv = B_beta <= eps
        B_plus = _batch_bound(params, delta, d, dstar, bp)
        shrink = ~conv & (B_plus < eps)
        broken = ~conv & (B_plus > eps)
        new_bp = bp.copy()
        new_bp[conv] = beta
        if np.any(shrink):
            s = shrink
            new_bp[s] = _batch_bisect(params, delta[s], d[s], dstar[s], np.full(s.sum(), beta), bp[s],
                                      eps, config.max_bisect_iters)
        if np.any(broken):
            # refinement pushed the bound at beta_plus above eps; recertify from
            # the track-wise closed form, which holds for any knot set
            s = broken
            safe = _safe_beta(params, np.sum(delta[s] ** 2, axis=-1), eps) * (1.0 + 1e-9)
            safe = np.maximum(safe, beta)
            new_bp[s] = _batch_bisect(params, delta[s], d[s], dstar[s], np.full(s.sum(), beta), safe,
                                      eps, config.max_bisect_iters)
        bp = new_bp
        if trace:
            for i, r in enumerate(rows):
                traces[r].append((it, t.shape[1], float(bp[i]), float(B_beta[i]), float(B_plus[i])))

    return BatchResult(out_bp, out_conv, out_iters, out_bound, out_samples, out_t, out_d, traces)


def _finish(done, rows, t, d, delta, dstar, bp, conv, it, params, config, indices,
            out_bp, out_conv, out_iters, out_bound, out_samples, out_t, out_d):
    sel = np.flatnonzero(done)
    r = rows[sel]
    tt, dd, de, ds, b = t[sel], d[sel], delta[sel], dstar[sel], bp[sel]
    b_col = b[:, None]
    alpha = _alpha_for(params, b_col)
    sigma = sigma_from_sdf(dd, alpha, b_col)
    R, _, bounds = bound_arrays(de, sigma, ds, alpha, b_col)
    out_bp[r] = b
    out_conv[r] = conv[sel] & (np.abs(b - params.beta) <= 1e-12)
    out_iters[r] = it
    out_bound[r] = bounds.max(axis=-1)
    mode = config.final_sample_mode
    u = np.stack([
        stratified_targets(config.m_final, mode, ray_rng(config.rng_seed, indices[i]) if mode != "regular" else None)
        for i in r
    ])
    out_samples[r] = _batch_invert(tt, -np.expm1(-R), u)
    for k, i in enumerate(r):
        out_t[i] = tt[k]
        out_d[i] = dd[k]


def run_algorithm1(ray: Ray, scene: SdfScene, params: DensityParams, config: SamplerConfig,
                   index: int = 0, trace: bool = False) -> tuple[SamplerReport, np.ndarray]:
    """Sample one ray; returns the report and the final sorted samples."""
    res = sample_rays(ray.origin[None], ray.direction[None], ray.far, scene, params, config,
                      indices=[index], trace=trace)
    rep = res.report(0, params)
    return rep, rep.samples


def write_trace_csv(trace, fh) -> None:
    """One row per outer iteration (0 is the initial uniform track)."""
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(TRACE_COLUMNS)
    for it, knots, bp, b_beta, b_plus in trace:
        w.writerow([it, knots, repr(float(bp)), repr(float(b_beta)), repr(float(b_plus))])
