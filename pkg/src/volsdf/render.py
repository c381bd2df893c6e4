"""Discrete volume rendering, analytic radiance and image assembly."""

from __future__ import annotations

import csv
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .bounds import Ray
from .density import DensityParams, sigma_from_sdf
from .sampler import SamplerConfig, sample_rays
from .sdf import SdfScene, _vec3

PIXEL_CHUNK = 512
DIAG_COLUMNS = ("pixel_x", "pixel_y", "expected_depth", "residual_T", "beta_plus", "outer_iters")


def _rgb(v, name):
    a = _vec3(v, name)
    if np.any(a < 0) or np.any(a > 1):
        raise ValueError(f"{name} components must lie in [0, 1]")
    return a


def _unit(v, name):
    a = _vec3(v, name)
    n = np.linalg.norm(a)
    if n == 0:
        raise ValueError(f"{name} must be non-zero")
    return a / n


# ---------------------------------------------------------------------------
# radiance models; each maps (x, n, v) arrays of shape (..., 3) to rgb in [0,1]
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class Lambertian:
    albedo: np.ndarray
    light_dir: np.ndarray
    ambient: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "albedo", _rgb(self.albedo, "albedo"))
        object.__setattr__(self, "light_dir", _unit(self.light_dir, "light_dir"))
        if self.ambient < 0:
            raise ValueError("ambient must be >= 0")

    def __call__(self, x, n, v):
        lit = np.maximum(n @ self.light_dir, 0.0)
        return np.clip(self.albedo * (self.ambient + lit)[..., None], 0.0, 1.0)


@dataclass(frozen=True)
class NormalShading:
    def __call__(self, x, n, v):
        return np.clip(0.5 * (n + 1.0), 0.0, 1.0)


@dataclass(frozen=True, eq=False)
class Phong:
    albedo: np.ndarray
    light_dir: np.ndarray
    specular: float = 0.5
    shininess: float = 32.0

    def __post_init__(self):
        object.__setattr__(self, "albedo", _rgb(self.albedo, "albedo"))
        object.__setattr__(self, "light_dir", _unit(self.light_dir, "light_dir"))
        if self.specular < 0 or self.shininess <= 0:
            raise ValueError("phong needs specular >= 0 and shininess > 0")

    def __call__(self, x, n, v):
        nl = n @ self.light_dir
        refl = 2.0 * nl[..., None] * n - self.light_dir
        rv = np.maximum(np.sum(refl * -v, axis=-1), 0.0)
        spec = self.specular * rv**self.shininess * (nl > 0)
        out = self.albedo * np.maximum(nl, 0.0)[..., None] + spec[..., None]
        return np.clip(out, 0.0, 1.0)


@dataclass(frozen=True, eq=False)
class ConstantEmission:
    rgb: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "rgb", _rgb(self.rgb, "rgb"))

    def __call__(self, x, n, v):
        return np.broadcast_to(self.rgb, np.shape(x)).copy()


# ---------------------------------------------------------------------------
# camera
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class Camera:
    """Pinhole camera; one ray through each pixel centre, row-major from the top."""

    position: np.ndarray
    look_at: np.ndarray
    up: np.ndarray
    fov: float  # vertical, radians
    width: int
    height: int

    def __post_init__(self):
        object.__setattr__(self, "position", _vec3(self.position, "position"))
        object.__setattr__(self, "look_at", _vec3(self.look_at, "look_at"))
        object.__setattr__(self, "up", _unit(self.up, "up"))
        if not 0 < self.fov < math.pi:
            raise ValueError("fov must lie in (0, pi)")
        if self.width < 1 or self.height < 1:
            raise ValueError("image size must be at least 1x1")
        fwd = self.look_at - self.position
        if np.linalg.norm(fwd) == 0:
            raise ValueError("look_at must differ from position")
        if np.linalg.norm(np.cross(fwd, self.up)) < 1e-12:
            raise ValueError("up must not be parallel to the viewing direction")

    def basis(self):
        fwd = self.look_at - self.position
        fwd = fwd / np.linalg.norm(fwd)
        right = np.cross(fwd, self.up)
        right /= np.linalg.norm(right)
        return fwd, right, np.cross(right, fwd)

    def pixel_directions(self) -> np.ndarray:
        fwd, right, up = self.basis()
        half_h = math.tan(0.5 * self.fov)
        half_w = half_h * self.width / self.height
        xs = ((np.arange(self.width) + 0.5) / self.width * 2.0 - 1.0) * half_w
        ys = (1.0 - (np.arange(self.height) + 0.5) / self.height * 2.0) * half_h
        X, Y = np.meshgrid(xs, ys)
        d = fwd + X[..., None] * right + Y[..., None] * up
        d /= np.linalg.norm(d, axis=-1, keepdims=True)
        return d.reshape(-1, 3)


# ---------------------------------------------------------------------------
# quadrature
# ---------------------------------------------------------------------------


def discrete_weights(samples, sigmas):
    """Compositing weights for sorted samples along the last axis.

    ``p_i = exp(-sigma_i delta_i)``; the first ``m - 1`` weights are
    ``(1 - p_i) prod_{j<i} p_j`` and the last is the residual transmittance
    ``prod_{j<m} p_j``.  They sum to one by telescoping.
    """
    s = np.asarray(samples, dtype=np.float64)
    sig = np.asarray(sigmas, dtype=np.float64)
    if s.shape[-1] < 2:
        raise ValueError("need at least two samples")
    tau = np.diff(s, axis=-1) * sig[..., :-1]
    zero = np.zeros(tau.shape[:-1] + (1,))
    T = np.exp(-np.concatenate([zero, np.cumsum(tau, axis=-1)], axis=-1))
    w = np.empty_like(T)
    w[..., :-1] = -np.expm1(-tau) * T[..., :-1]
    w[..., -1] = T[..., -1]
    return w


@dataclass
class PixelSample:
    color: np.ndarray
    expected_depth: float
    residual_transmittance: float
    beta_plus: float
    outer_iters: int
    converged: bool
    certified_bound: float


def _shade_batch(origins, dirs, far, scene, params, radiance, config, indices, background):
    res = sample_rays(origins, dirs, far, scene, params, config, indices=indices)
    B = origins.shape[0]
    # integrate from the camera to the far bound: S plus the two ends
    nodes = np.concatenate([np.zeros((B, 1)), res.samples, np.broadcast_to(far, (B,))[:, None]], axis=-1)
    pts = origins[:, None, :] + nodes[..., None] * dirs[:, None, :]
    sig = sigma_from_sdf(scene.eval(pts), params.alpha, params.beta)
    w = discrete_weights(nodes, sig)
    normals, _ = scene.grad(pts[:, :-1])
    L = radiance(pts[:, :-1], normals, np.broadcast_to(dirs[:, None, :], normals.shape))
    color = np.einsum("bi,bic->bc", w[:, :-1], L) + w[:, -1:] * background
    depth = np.sum(w * nodes, axis=-1)
    return color, depth, w[:, -1], res


def render_ray(ray: Ray, scene: SdfScene, params: DensityParams, radiance, config: SamplerConfig,
               background=(0.0, 0.0, 0.0), index: int = 0) -> PixelSample:
    bg = np.asarray(background, dtype=np.float64)
    color, depth, resid, res = _shade_batch(
        ray.origin[None], ray.direction[None], ray.far, scene, params, radiance, config, [index], bg
    )
    return PixelSample(color[0], float(depth[0]), float(resid[0]), float(res.beta_plus[0]),
                       int(res.outer_iters[0]), bool(res.converged[0]), float(res.certified_bound[0]))


@dataclass
class RenderResult:
    image: np.ndarray  # (H, W, 3) linear rgb
    expected_depth: np.ndarray  # (H, W)
    residual: np.ndarray
    beta_plus: np.ndarray
    outer_iters: np.ndarray
    certified_bound: np.ndarray


def _render_chunk(args):
    start, stop, dirs, origin, far, scene, params, radiance, config, bg = args
    B = stop - start
    origins = np.broadcast_to(origin, (B, 3)).copy()
    color, depth, resid, res = _shade_batch(origins, dirs, far, scene, params, radiance, config,
                                            np.arange(start, stop), bg)
    return color, depth, resid, res.beta_plus, res.outer_iters, res.certified_bound


def render_image(scene: SdfScene, camera: Camera, params: DensityParams, radiance, config: SamplerConfig,
                 workers: int = 1, background=(0.0, 0.0, 0.0), far: Optional[float] = None) -> RenderResult:
    """Render every pixel; output is identical for any ``workers``.

    Pixels are processed in fixed chunks and each pixel draws from its own
    random stream, so scheduling cannot change the result.
    """
    far = 2.0 * scene.bounding_radius if far is None else far
    dirs = camera.pixel_directions()
    npix = dirs.shape[0]
    bg = np.asarray(background, dtype=np.float64)
    jobs = [
        (s, min(s + PIXEL_CHUNK, npix), dirs[s:s + PIXEL_CHUNK], camera.position, far, scene, params,
         radiance, config, bg)
        for s in range(0, npix, PIXEL_CHUNK)
    ]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            parts = list(ex.map(_render_chunk, jobs))
    else:
        parts = [_render_chunk(j) for j in jobs]
    cols = [np.concatenate(x) for x in zip(*parts)]
    H, W = camera.height, camera.width
    return RenderResult(
        image=cols[0].reshape(H, W, 3),
        expected_depth=cols[1].reshape(H, W),
        residual=cols[2].reshape(H, W),
        beta_plus=cols[3].reshape(H, W),
        outer_iters=cols[4].reshape(H, W),
        certified_bound=cols[5].reshape(H, W),
    )


def encode_srgb(image) -> np.ndarray:
    """Linear [0,1] to 8 bit: gamma 1/2.2, then round half up."""
    v = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0) ** (1.0 / 2.2) * 255.0
    return np.floor(v + 0.5).astype(np.uint8)


def ppm_bytes(image) -> bytes:
    img = encode_srgb(image)
    h, w = img.shape[:2]
    return b"P6\n%d %d\n255\n" % (w, h) + img.tobytes()


def write_ppm(path, image) -> None:
    with open(path, "wb") as fh:
        fh.write(ppm_bytes(image))


def read_ppm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        data = fh.read()
    parts = data.split(maxsplit=4)
    if parts[0] != b"P6" or int(parts[3]) != 255:
        raise ValueError(f"{path}: not an 8-bit binary PPM")
    w, h = int(parts[1]), int(parts[2])
    return np.frombuffer(parts[4][: w * h * 3], dtype=np.uint8).reshape(h, w, 3)


def write_diagnostics_csv(fh, result: RenderResult) -> None:
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(DIAG_COLUMNS)
    H, W = result.expected_depth.shape
    for y in range(H):
        for x in range(W):
            w.writerow([
                x, y,
                repr(float(result.expected_depth[y, x])),
                repr(float(result.residual[y, x])),
                repr(float(result.beta_plus[y, x])),
                int(result.outer_iters[y, x]),
            ])
