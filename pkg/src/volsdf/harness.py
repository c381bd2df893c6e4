"""Certification of the opacity bounds against the quadrature oracle, and the
sampling-strategy ablation."""

from __future__ import annotations

import csv
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .bounds import Ray
from .density import DensityParams, sigma_from_sdf
from .oracle import DEFAULT_RESOLUTION, RICHARDSON_TOL, OracleError, opacity_oracle
from .sampler import _batch_invert, ray_rng, sample_rays, stratified_targets
from .scenefile import SceneFile

RAY_CHUNK = 250
BOUND_SLACK = 1e-6
CERTIFY_COLUMNS = (
    "ray", "origin_x", "origin_y", "origin_z", "dir_x", "dir_y", "dir_z", "beta", "beta_plus",
    "converged", "outer_iters", "knots", "certified_bound", "oracle_max_error", "status",
)
STRATEGIES = ("uniform-256", "hierarchical-2level", "alg1-iter1", "alg1-iter5")
ABLATION_COLUMNS = ("ray", "strategy", "hits_surface", "knots", "beta_plus", "certified_bound", "max_error")


def random_rays(bounding_radius: float, n: int, seed: int):
    """Origins uniform on the sphere of radius ``r / 1.1``, aimed at points
    uniform in the ball of radius ``r / 2``."""
    rng = np.random.default_rng([int(seed), 0x5EED])
    u = rng.standard_normal((n, 3))
    origins = u / np.linalg.norm(u, axis=1, keepdims=True) * (bounding_radius / 1.1)
    v = rng.standard_normal((n, 3))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    targets = v * (0.5 * bounding_radius * rng.random((n, 1)) ** (1.0 / 3.0))
    dirs = targets - origins
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    return origins, dirs


def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return "1" if v else "0"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return "" if v is None else str(v)


def write_rows(fh, columns, rows) -> None:
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(columns)
    for row in rows:
        w.writerow([_fmt(row[c]) for c in columns])


def _map_chunks(fn, jobs, threads):
    if threads > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=threads) as ex:
            return list(ex.map(fn, jobs))
    return [fn(j) for j in jobs]


def _queries(t):
    """Knots plus interval midpoints."""
    return np.sort(np.concatenate([t, 0.5 * (t[:-1] + t[1:])]))


def _opacity_hat_at(t_knots, d_knots, params: DensityParams, q):
    """Rectangle-rule opacity of the track (t_knots, d_knots) at queries ``q``."""
    sigma = sigma_from_sdf(d_knots, params.alpha, params.beta)
    R = np.concatenate([[0.0], np.cumsum(np.diff(t_knots) * sigma[:-1])])
    k = np.clip(np.searchsorted(t_knots, q, side="right") - 1, 0, t_knots.size - 2)
    return -np.expm1(-(R[k] + (q - t_knots[k]) * sigma[k]))


# ---------------------------------------------------------------------------
# certification
# ---------------------------------------------------------------------------


@dataclass
class CertifyReport:
    rows: list
    violations: int
    oracle_failures: int
    epsilon: float

    @property
    def checked(self) -> int:
        return len(self.rows) - self.oracle_failures

    @property
    def passed(self) -> bool:
        return self.violations == 0


def _certify_chunk(job):
    start, origins, dirs, cfg, oracle_res = job
    scene = cfg.build_scene()
    params, sc = cfg.density, cfg.sampler
    far = cfg.ray_far
    res = sample_rays(origins, dirs, far, scene, params, sc, indices=np.arange(start, start + len(origins)))
    rows = []
    for i in range(len(origins)):
        bp = float(res.beta_plus[i])
        p_plus = params.with_beta(bp)
        t = res.knots[i]
        q = _queries(t)
        row = {
            "ray": start + i,
            "origin_x": origins[i, 0], "origin_y": origins[i, 1], "origin_z": origins[i, 2],
            "dir_x": dirs[i, 0], "dir_y": dirs[i, 1], "dir_z": dirs[i, 2],
            "beta": params.beta, "beta_plus": bp,
            "converged": bool(res.converged[i]), "outer_iters": int(res.outer_iters[i]),
            "knots": int(t.size), "certified_bound": float(res.certified_bound[i]),
        }
        try:
            O = opacity_oracle(Ray(origins[i], dirs[i], far), scene, p_plus, oracle_res, q)
        except OracleError:
            row.update(oracle_max_error=None, status="oracle_failed")
            rows.append(row)
            continue
        err = float(np.max(np.abs(O - _opacity_hat_at(t, res.distances[i], p_plus, q))))
        ok = err <= row["certified_bound"] + RICHARDSON_TOL and row["certified_bound"] <= sc.epsilon + BOUND_SLACK
        row.update(oracle_max_error=err, status="ok" if ok else "violation")
        rows.append(row)
    return rows


def certify(cfg: SceneFile, trials: int, oracle_resolution: int = DEFAULT_RESOLUTION,
            seed: int = 0, threads: int = 1) -> CertifyReport:
    """Sample ``trials`` random rays and check each certificate against the oracle.

    The oracle is run at the scale each ray was certified for (its ``beta_plus``)
    and compared at every knot and interval midpoint.
    """
    if trials < 1:
        raise ValueError("trials must be >= 1")
    cfg = cfg.with_seed(seed)
    origins, dirs = random_rays(cfg.bounding_radius, trials, seed)
    jobs = [(s, origins[s:s + RAY_CHUNK], dirs[s:s + RAY_CHUNK], cfg, oracle_resolution)
            for s in range(0, trials, RAY_CHUNK)]
    rows = [r for part in _map_chunks(_certify_chunk, jobs, threads) for r in part]
    return CertifyReport(
        rows=rows,
        violations=sum(r["status"] == "violation" for r in rows),
        oracle_failures=sum(r["status"] == "oracle_failed" for r in rows),
        epsilon=cfg.sampler.epsilon,
    )


# ---------------------------------------------------------------------------
# ablation
# ---------------------------------------------------------------------------


def _hierarchical(origin, direction, far, scene, params, rng, n_coarse=64, n_fine=128):
    """Coarse uniform pass with the true density, then inverse-CDF fine samples."""
    tc = np.linspace(0.0, far, n_coarse)
    dc = scene.eval(origin + tc[:, None] * direction)
    sigma = sigma_from_sdf(dc, params.alpha, params.beta)
    R = np.concatenate([[0.0], np.cumsum(np.diff(tc) * sigma[:-1])])
    u = stratified_targets(n_fine, "random-stratified", rng)
    tf = _batch_invert(tc[None], -np.expm1(-R)[None], u[None])[0]
    t = np.unique(np.concatenate([tc, tf]))
    return t, scene.eval(origin + t[:, None] * direction)


def _hits_surface(origin, direction, far, scene, n=4096):
    if scene.root is None:
        return False
    t = np.linspace(0.0, far, n)
    return bool(np.min(scene.root.eval(origin + t[:, None] * direction)) <= 0.0)


def _ablate_chunk(job):
    start, origins, dirs, cfg, oracle_res = job
    scene = cfg.build_scene()
    params, sc, far = cfg.density, cfg.sampler, cfg.ray_far
    idx = np.arange(start, start + len(origins))
    timings = dict.fromkeys(STRATEGIES, 0.0)

    tic = time.perf_counter()
    t_u = np.linspace(0.0, far, 256)
    d_u = scene.eval(origins[:, None, :] + t_u[None, :, None] * dirs[:, None, :])
    timings["uniform-256"] += time.perf_counter() - tic

    tic = time.perf_counter()
    hier = [_hierarchical(origins[i], dirs[i], far, scene, params, ray_rng(sc.rng_seed, idx[i]))
            for i in range(len(origins))]
    timings["hierarchical-2level"] += time.perf_counter() - tic

    alg = {}
    for name, iters in (("alg1-iter1", 1), ("alg1-iter5", 5)):
        tic = time.perf_counter()
        alg[name] = sample_rays(origins, dirs, far, scene, params, replace(sc, max_outer_iters=iters), indices=idx)
        timings[name] += time.perf_counter() - tic

    rows = []
    for i in range(len(origins)):
        tracks = {
            "uniform-256": (t_u, d_u[i], params, None),
            "hierarchical-2level": (hier[i][0], hier[i][1], params, None),
        }
        for name, res in alg.items():
            bp = float(res.beta_plus[i])
            tracks[name] = (res.knots[i], res.distances[i], params.with_beta(bp), float(res.certified_bound[i]))
        queries = {k: _queries(v[0]) for k, v in tracks.items()}
        allq = np.unique(np.concatenate(list(queries.values())))
        ray = Ray(origins[i], dirs[i], far)
        hits = _hits_surface(origins[i], dirs[i], far, scene)
        try:
            O = opacity_oracle(ray, scene, params, oracle_res, allq)
        except OracleError:
            O = None
        for name in STRATEGIES:
            t, d, p, cert = tracks[name]
            q = queries[name]
            err = None
            if O is not None:
                Oq = O[np.searchsorted(allq, q)]
                err = float(np.max(np.abs(Oq - _opacity_hat_at(t, d, p, q))))
            rows.append({
                "ray": start + i, "strategy": name, "hits_surface": hits, "knots": int(t.size),
                "beta_plus": p.beta if cert is not None else None, "certified_bound": cert, "max_error": err,
            })
    return rows, timings


@dataclass
class AblationReport:
    rows: list
    wall_time: dict = field(default_factory=dict)  # strategy -> seconds (not written to the CSV)

    def errors(self, strategy: str, hitting_only: bool = False) -> np.ndarray:
        return np.array([
            r["max_error"] for r in self.rows
            if r["strategy"] == strategy and r["max_error"] is not None and (r["hits_surface"] or not hitting_only)
        ])

    def median_error(self, strategy: str, hitting_only: bool = False) -> float:
        return float(np.median(self.errors(strategy, hitting_only)))


def ablate(cfg: SceneFile, rays: int, seed: int = 0, threads: int = 1,
           oracle_resolution: int = DEFAULT_RESOLUTION) -> AblationReport:
    """Compare the four sampling strategies on the same random rays.

    Each strategy's opacity estimate is checked against the oracle at the
    target scale, at its own knots and interval midpoints.  The alg1 variants
    are judged with the estimate they certify (at their ``beta_plus``).
    """
    if rays < 1:
        raise ValueError("rays must be >= 1")
    cfg = cfg.with_seed(seed)
    origins, dirs = random_rays(cfg.bounding_radius, rays, seed)
    jobs = [(s, origins[s:s + RAY_CHUNK], dirs[s:s + RAY_CHUNK], cfg, oracle_resolution)
            for s in range(0, rays, RAY_CHUNK)]
    parts = _map_chunks(_ablate_chunk, jobs, threads)
    wall = dict.fromkeys(STRATEGIES, 0.0)
    for _, tm in parts:
        for k, v in tm.items():
            wall[k] += v
    return AblationReport([r for rows, _ in parts for r in rows], wall)
