"""Analytic signed distance fields with CSG composition.

Every node evaluates on point arrays of shape ``(..., 3)`` and returns
distances of shape ``(...,)``.  Gradients come back together with a boolean
``smooth`` mask that is ``False`` wherever a branch had to be picked at a
non-differentiable point (exact min/max ties, primitive centres).  Ties always
resolve to the lowest child index so renders are reproducible.

Sign convention: negative inside the object, positive in free space.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import numpy.typing as npt

_F = npt.NDArray[np.float64]
_B = npt.NDArray[np.bool_]

_FALLBACK_DIR = np.array([0.0, 0.0, 1.0])


def _vec3(v, name: str) -> np.ndarray:
    a = np.asarray(v, dtype=np.float64).reshape(-1)
    if a.shape != (3,) or not np.all(np.isfinite(a)):
        raise ValueError(f"{name} must be a finite 3-vector, got {v!r}")
    return a


def _unit_or_fallback(v: _F) -> tuple[_F, _B]:
    n = np.linalg.norm(v, axis=-1, keepdims=True)
    ok = n[..., 0] > 0.0
    out = np.where(n > 0.0, v / np.where(n > 0.0, n, 1.0), _FALLBACK_DIR)
    return out, ok


class SdfNode:
    """Base class of the scene graph."""

    def eval(self, p: _F) -> _F:
        raise NotImplementedError

    def grad(self, p: _F) -> tuple[_F, _B]:
        raise NotImplementedError


@dataclass(frozen=True, eq=False)
class Sphere(SdfNode):
    center: np.ndarray
    radius: float

    def __post_init__(self):
        object.__setattr__(self, "center", _vec3(self.center, "center"))
        if not self.radius > 0:
            raise ValueError("sphere radius must be > 0")

    def eval(self, p):
        return np.linalg.norm(p - self.center, axis=-1) - self.radius

    def grad(self, p):
        return _unit_or_fallback(p - self.center)


@dataclass(frozen=True, eq=False)
class Box(SdfNode):
    """Axis-aligned box."""

    center: np.ndarray
    half_extents: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "center", _vec3(self.center, "center"))
        object.__setattr__(self, "half_extents", _vec3(self.half_extents, "half_extents"))
        if not np.all(self.half_extents > 0):
            raise ValueError("box half extents must be > 0")

    def eval(self, p):
        q = np.abs(p - self.center) - self.half_extents
        outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
        inside = np.minimum(np.max(q, axis=-1), 0.0)
        return outside + inside

    def grad(self, p):
        rel = p - self.center
        sgn = np.where(rel < 0.0, -1.0, 1.0)
        q = np.abs(rel) - self.half_extents
        qpos = np.maximum(q, 0.0)
        nout = np.linalg.norm(qpos, axis=-1, keepdims=True)
        is_out = nout[..., 0] > 0.0
        g_out = sgn * qpos / np.where(nout > 0.0, nout, 1.0)
        axis = np.argmax(q, axis=-1)
        g_in = sgn * (np.arange(3) == axis[..., None])
        qmax = np.max(q, axis=-1, keepdims=True)
        ties = np.sum(q == qmax, axis=-1) > 1
        g = np.where(is_out[..., None], g_out, g_in)
        # on a symmetry plane the sign of rel is ambiguous for the inside branch
        on_plane = np.take_along_axis(rel, axis[..., None], axis=-1)[..., 0] == 0.0
        smooth = is_out | ~(ties | on_plane)
        return g, smooth


@dataclass(frozen=True, eq=False)
class Torus(SdfNode):
    """Torus whose ring lies in the xy-plane (symmetry axis along z)."""

    center: np.ndarray
    major_radius: float
    minor_radius: float

    def __post_init__(self):
        object.__setattr__(self, "center", _vec3(self.center, "center"))
        if not (self.major_radius > 0 and self.minor_radius > 0):
            raise ValueError("torus radii must be > 0")

    def _q(self, p):
        rel = p - self.center
        rho = np.hypot(rel[..., 0], rel[..., 1])
        return rel, rho, rho - self.major_radius

    def eval(self, p):
        rel, _, qx = self._q(p)
        return np.hypot(qx, rel[..., 2]) - self.minor_radius

    def grad(self, p):
        rel, rho, qx = self._q(p)
        qn = np.hypot(qx, rel[..., 2])
        ok_q = qn > 0.0
        ok_rho = rho > 0.0
        qn_s = np.where(ok_q, qn, 1.0)
        rho_s = np.where(ok_rho, rho, 1.0)
        radial = qx / qn_s
        g = np.stack(
            [
                radial * np.where(ok_rho, rel[..., 0] / rho_s, 1.0),
                radial * np.where(ok_rho, rel[..., 1] / rho_s, 0.0),
                rel[..., 2] / qn_s,
            ],
            axis=-1,
        )
        g = np.where(ok_q[..., None], g, _FALLBACK_DIR)
        return g, ok_q & ok_rho


@dataclass(frozen=True, eq=False)
class Plane(SdfNode):
    """Half-space ``normal . x < offset`` is inside."""

    normal: np.ndarray
    offset: float = 0.0

    def __post_init__(self):
        n = _vec3(self.normal, "normal")
        if abs(np.linalg.norm(n) - 1.0) > 1e-9:
            raise ValueError("plane normal must have unit length")
        object.__setattr__(self, "normal", n)

    def eval(self, p):
        return p @ self.normal - self.offset

    def grad(self, p):
        shape = np.shape(p)[:-1]
        return np.broadcast_to(self.normal, shape + (3,)).copy(), np.ones(shape, dtype=bool)


@dataclass(frozen=True, eq=False)
class Translate(SdfNode):
    child: SdfNode
    offset: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "offset", _vec3(self.offset, "offset"))

    def eval(self, p):
        return self.child.eval(p - self.offset)

    def grad(self, p):
        return self.child.grad(p - self.offset)


def _select(children, p, pick):
    values = np.stack([c.eval(p) for c in children], axis=0)
    idx = pick(values, axis=0)  # first occurrence on ties
    best = np.take_along_axis(values, idx[None], axis=0)[0]
    ties = np.sum(values == best, axis=0) > 1
    grads, smooth = zip(*(c.grad(p) for c in children))
    grads = np.stack(grads, axis=0)
    smooth = np.stack(smooth, axis=0)
    g = np.take_along_axis(grads, idx[None, ..., None], axis=0)[0]
    s = np.take_along_axis(smooth, idx[None], axis=0)[0] & ~ties
    return g, s


@dataclass(frozen=True, eq=False)
class Union(SdfNode):
    children: tuple = field(default_factory=tuple)

    def __post_init__(self):
        object.__setattr__(self, "children", tuple(self.children))
        if not self.children:
            raise ValueError("union needs at least one child")

    def eval(self, p):
        return np.min(np.stack([c.eval(p) for c in self.children], axis=0), axis=0)

    def grad(self, p):
        return _select(self.children, p, np.argmin)


@dataclass(frozen=True, eq=False)
class Intersection(SdfNode):
    """Max of the children.

    Not an exact distance near edges of the composed solid, so the opacity
    error bounds are only checked empirically on scenes that use it.
    """

    children: tuple = field(default_factory=tuple)

    def __post_init__(self):
        object.__setattr__(self, "children", tuple(self.children))
        if not self.children:
            raise ValueError("intersection needs at least one child")

    def eval(self, p):
        return np.max(np.stack([c.eval(p) for c in self.children], axis=0), axis=0)

    def grad(self, p):
        return _select(self.children, p, np.argmax)


@dataclass(frozen=True, eq=False)
class Complement(SdfNode):
    child: SdfNode

    def eval(self, p):
        return -self.child.eval(p)

    def grad(self, p):
        g, s = self.child.grad(p)
        return -g, s


@dataclass(frozen=True, eq=False)
class SdfScene:
    """Scene root clamped by a bounding sphere of radius ``bounding_radius``.

    The effective distance is ``min(root(x), r - |x|)`` so every ray is
    eventually occluded.  ``root=None`` is an empty scene (only the clamp).
    """

    root: Optional[SdfNode]
    bounding_radius: float

    def __post_init__(self):
        if not self.bounding_radius > 0:
            raise ValueError("bounding_radius must be > 0")

    def eval(self, p) -> _F:
        p = np.asarray(p, dtype=np.float64)
        clamp = self.bounding_radius - np.linalg.norm(p, axis=-1)
        if self.root is None:
            return clamp
        return np.minimum(self.root.eval(p), clamp)

    def grad(self, p) -> tuple[_F, _B]:
        p = np.asarray(p, dtype=np.float64)
        n, ok = _unit_or_fallback(p)
        g_clamp = -n
        if self.root is None:
            return g_clamp, ok
        d_root = self.root.eval(p)
        clamp = self.bounding_radius - np.linalg.norm(p, axis=-1)
        g_root, s_root = self.root.grad(p)
        use_root = d_root <= clamp
        g = np.where(use_root[..., None], g_root, g_clamp)
        s = np.where(use_root, s_root, ok) & (d_root != clamp)
        return g, s


def eval_sdf(scene: SdfScene, x) -> _F:
    """Signed distance of ``scene`` at ``x`` (shape ``(..., 3)``)."""
    return scene.eval(x)


def grad_sdf(scene: SdfScene, x) -> tuple[_F, _B]:
    """Analytic gradient of the clamped distance plus a smoothness mask."""
    return scene.grad(x)


def union(nodes: Sequence[SdfNode]) -> SdfNode:
    return nodes[0] if len(nodes) == 1 else Union(tuple(nodes))
