"""Sectioned key-value scene files.

A scene file is a list of ``[section]`` headers each followed by
``key = value`` lines; ``#`` starts a comment.  ``[object]`` may repeat and
objects are combined in file order according to their ``role``.  Vectors
are written as comma-separated numbers.

Every error carries the file name, the line number and the key.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field, fields, replace
from typing import Optional

from .density import DensityParams
from .render import Camera, ConstantEmission, Lambertian, NormalShading, Phong
from .sampler import SAMPLE_MODES, SamplerConfig
from .sdf import Box, Complement, Intersection, Plane, SdfScene, Sphere, Torus, Translate, Union

SECTIONS = ("scene", "object", "density", "camera", "sampler", "radiance", "output")
REQUIRED = ("scene", "density")
OBJECT_TYPES = ("sphere", "box", "torus", "plane")
ROLES = ("union", "intersect", "subtract")
RADIANCE_MODELS = ("lambertian", "normal", "phong", "constant")


class SceneFileError(ValueError):
    def __init__(self, path, line, key, message):
        self.path, self.line, self.key = path, line, key
        where = f"{path}:{line}" if line else f"{path}"
        what = f" key '{key}'" if key else ""
        super().__init__(f"{where}:{what} {message}")


# ---------------------------------------------------------------------------
# value parsers
# ---------------------------------------------------------------------------


def _float(s):
    v = float(s)
    if not math.isfinite(v):
        raise ValueError("must be finite")
    return v


def _int(s):
    return int(s)


def _vec3(s):
    parts = [p.strip() for p in s.split(",")]
    if len(parts) != 3:
        raise ValueError("expected three comma-separated numbers")
    return tuple(_float(p) for p in parts)


def _bool(s):
    low = s.lower()
    if low in ("true", "yes", "1"):
        return True
    if low in ("false", "no", "0"):
        return False
    raise ValueError("expected true or false")


def _str(s):
    if not s:
        raise ValueError("must not be empty")
    return s


def _choice(options):
    def parse(s):
        if s not in options:
            raise ValueError(f"must be one of {', '.join(options)}")
        return s

    return parse


def _fmt(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, tuple):
        return ", ".join(repr(float(x)) for x in v)
    return str(v)


# key -> parser, per section
_OBJECT_KEYS = {
    "type": _choice(OBJECT_TYPES),
    "role": _choice(ROLES),
    "center": _vec3,
    "radius": _float,
    "half_extents": _vec3,
    "major_radius": _float,
    "minor_radius": _float,
    "normal": _vec3,
    "offset": _float,
    "translate": _vec3,
}
_OBJECT_FIELDS = {
    "sphere": ("center", "radius"),
    "box": ("center", "half_extents"),
    "torus": ("center", "major_radius", "minor_radius"),
    "plane": ("normal", "offset"),
}
_KEYS = {
    "scene": {"bounding_radius": _float, "far": _float},
    "density": {"beta": _float, "alpha": _float, "coupled": _bool},
    "camera": {"position": _vec3, "look_at": _vec3, "up": _vec3, "fov_deg": _float, "width": _int, "height": _int},
    "sampler": {
        "epsilon": _float,
        "n_init": _int,
        "m_final": _int,
        "max_outer_iters": _int,
        "max_bisect_iters": _int,
        "seed": _int,
        "mode": _choice(SAMPLE_MODES),
    },
    "radiance": {
        "model": _choice(RADIANCE_MODELS),
        "albedo": _vec3,
        "light_dir": _vec3,
        "ambient": _float,
        "specular": _float,
        "shininess": _float,
        "rgb": _vec3,
    },
    "output": {"image": _str, "csv": _str, "background": _vec3},
    "object": _OBJECT_KEYS,
}
_RADIANCE_FIELDS = {
    "lambertian": ("albedo", "light_dir", "ambient"),
    "normal": (),
    "phong": ("albedo", "light_dir", "specular", "shininess"),
    "constant": ("rgb",),
}


# ---------------------------------------------------------------------------
# validated config
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ObjectSpec:
    type: str
    role: str = "union"
    center: Optional[tuple] = None
    radius: Optional[float] = None
    half_extents: Optional[tuple] = None
    major_radius: Optional[float] = None
    minor_radius: Optional[float] = None
    normal: Optional[tuple] = None
    offset: Optional[float] = None
    translate: Optional[tuple] = None

    def build(self):
        if self.type == "sphere":
            node = Sphere(self.center, self.radius)
        elif self.type == "box":
            node = Box(self.center, self.half_extents)
        elif self.type == "torus":
            node = Torus(self.center, self.major_radius, self.minor_radius)
        else:
            node = Plane(self.normal, self.offset)
        if self.translate is not None:
            node = Translate(node, self.translate)
        return node


@dataclass(frozen=True)
class CameraSpec:
    position: tuple
    look_at: tuple
    up: tuple
    fov_deg: float
    width: int
    height: int

    def build(self) -> Camera:
        return Camera(self.position, self.look_at, self.up, math.radians(self.fov_deg), self.width, self.height)


@dataclass(frozen=True)
class RadianceSpec:
    model: str = "lambertian"
    albedo: Optional[tuple] = (0.8, 0.8, 0.8)
    light_dir: Optional[tuple] = (0.0, 0.0, 1.0)
    ambient: Optional[float] = 0.1
    specular: Optional[float] = 0.5
    shininess: Optional[float] = 32.0
    rgb: Optional[tuple] = (1.0, 1.0, 1.0)

    def build(self):
        if self.model == "lambertian":
            return Lambertian(self.albedo, self.light_dir, self.ambient)
        if self.model == "normal":
            return NormalShading()
        if self.model == "phong":
            return Phong(self.albedo, self.light_dir, self.specular, self.shininess)
        return ConstantEmission(self.rgb)


@dataclass(frozen=True)
class OutputSpec:
    image: Optional[str] = None
    csv: Optional[str] = None
    background: tuple = (0.0, 0.0, 0.0)


@dataclass(frozen=True)
class SceneFile:
    bounding_radius: float
    density: DensityParams
    objects: tuple = ()
    far: Optional[float] = None
    camera: Optional[CameraSpec] = None
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    radiance: RadianceSpec = field(default_factory=RadianceSpec)
    output: OutputSpec = field(default_factory=OutputSpec)
    path: str = field(default="<string>", compare=False)

    def build_scene(self) -> SdfScene:
        root = None
        for obj in self.objects:
            node = obj.build()
            if root is None:
                root = Complement(node) if obj.role == "subtract" else node
            elif obj.role == "union":
                root = Union((root, node))
            elif obj.role == "intersect":
                root = Intersection((root, node))
            else:
                root = Intersection((root, Complement(node)))
        return SdfScene(root, self.bounding_radius)

    @property
    def ray_far(self) -> float:
        return 2.0 * self.bounding_radius if self.far is None else self.far

    def with_seed(self, seed: int) -> "SceneFile":
        return replace(self, sampler=replace(self.sampler, rng_seed=seed))


# ---------------------------------------------------------------------------
# parsing
# ---------------------------------------------------------------------------


@dataclass
class _Section:
    name: str
    line: int
    values: dict = field(default_factory=dict)  # key -> parsed value
    lines: dict = field(default_factory=dict)  # key -> line number


def _tokenize(text, path):
    sections = []
    cur = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("["):
            if not line.endswith("]"):
                raise SceneFileError(path, lineno, None, f"malformed section header {line!r}")
            name = line[1:-1].strip()
            if name not in SECTIONS:
                raise SceneFileError(path, lineno, None, f"unknown section [{name}]")
            if name != "object" and any(s.name == name for s in sections):
                raise SceneFileError(path, lineno, None, f"duplicate section [{name}]")
            cur = _Section(name, lineno)
            sections.append(cur)
            continue
        if "=" not in line:
            raise SceneFileError(path, lineno, None, f"expected 'key = value', got {line!r}")
        key, value = (p.strip() for p in line.split("=", 1))
        if cur is None:
            raise SceneFileError(path, lineno, key, "appears before any section header")
        parsers = _KEYS[cur.name]
        if key not in parsers:
            raise SceneFileError(path, lineno, key, f"unknown key in [{cur.name}]")
        if key in cur.values:
            raise SceneFileError(path, lineno, key, "given twice")
        try:
            cur.values[key] = parsers[key](value)
        except ValueError as exc:
            raise SceneFileError(path, lineno, key, f"bad value {value!r}: {exc}") from None
        cur.lines[key] = lineno
    return sections


def _need(sec: _Section, key, path):
    if key not in sec.values:
        raise SceneFileError(path, sec.line, key, f"missing in [{sec.name}]")
    return sec.values[key]


def _blame(sec: _Section, exc, path):
    """Attach a constraint failure from an owning type to the key it names."""
    msg = str(exc)
    for key, line in sec.lines.items():
        if key in msg:
            return SceneFileError(path, line, key, msg)
    return SceneFileError(path, sec.line, None, f"[{sec.name}] {msg}")


def _object(sec, path):
    kind = _need(sec, "type", path)
    allowed = set(_OBJECT_FIELDS[kind]) | {"type", "role", "translate"}
    for key in sec.values:
        if key not in allowed:
            raise SceneFileError(path, sec.lines[key], key, f"not a parameter of a {kind}")
    for key in _OBJECT_FIELDS[kind]:
        if key != "offset":
            _need(sec, key, path)
    vals = dict(sec.values)
    if kind == "plane":
        vals.setdefault("offset", 0.0)
    spec = ObjectSpec(**vals)
    try:
        spec.build()
    except ValueError as exc:
        raise _blame(sec, exc, path) from None
    return spec


def parse_scene(text: str, path: str = "<string>") -> SceneFile:
    secs = _tokenize(text, path)
    by_name = {s.name: s for s in secs if s.name != "object"}
    for name in REQUIRED:
        if name not in by_name:
            raise SceneFileError(path, None, None, f"missing required section [{name}]")

    scene = by_name["scene"]
    r = _need(scene, "bounding_radius", path)
    if not r > 0:
        raise SceneFileError(path, scene.lines["bounding_radius"], "bounding_radius", "must be > 0")
    far = scene.values.get("far")
    if far is not None and not far > 0:
        raise SceneFileError(path, scene.lines["far"], "far", "must be > 0")

    objects = tuple(_object(s, path) for s in secs if s.name == "object")

    dens = by_name["density"]
    beta = _need(dens, "beta", path)
    coupled = dens.values.get("coupled", "alpha" not in dens.values)
    try:
        density = DensityParams(beta, dens.values.get("alpha"), coupled)
    except ValueError as exc:
        raise _blame(dens, exc, path) from None

    camera = None
    if "camera" in by_name:
        cam = by_name["camera"]
        vals = {k: _need(cam, k, path) for k in _KEYS["camera"]}
        camera = CameraSpec(**vals)
        if not 0 < vals["fov_deg"] < 180:
            raise SceneFileError(path, cam.lines["fov_deg"], "fov_deg", "must lie in (0, 180)")
        try:
            camera.build()
        except ValueError as exc:
            raise _blame(cam, exc, path) from None

    sampler = SamplerConfig()
    if "sampler" in by_name:
        smp = by_name["sampler"]
        rename = {"seed": "rng_seed", "mode": "final_sample_mode"}
        try:
            sampler = SamplerConfig(**{rename.get(k, k): v for k, v in smp.values.items()})
        except ValueError as exc:
            raise _blame(smp, exc, path) from None

    radiance = RadianceSpec()
    if "radiance" in by_name:
        rad = by_name["radiance"]
        model = rad.values.get("model", "lambertian")
        for key in rad.values:
            if key != "model" and key not in _RADIANCE_FIELDS[model]:
                raise SceneFileError(path, rad.lines[key], key, f"not a parameter of the {model} model")
        radiance = replace(RadianceSpec(), **rad.values)
        try:
            radiance.build()
        except ValueError as exc:
            raise _blame(rad, exc, path) from None

    output = OutputSpec()
    if "output" in by_name:
        out = by_name["output"]
        output = OutputSpec(**out.values)
        bg = output.background
        if any(not 0 <= c <= 1 for c in bg):
            raise SceneFileError(path, out.lines["background"], "background", "components must lie in [0, 1]")

    return SceneFile(r, density, objects, far, camera, sampler, radiance, output, path)


def load_scene(path) -> SceneFile:
    path = os.fspath(path)
    with open(path, encoding="utf-8") as fh:
        return parse_scene(fh.read(), path)


# ---------------------------------------------------------------------------
# serialisation
# ---------------------------------------------------------------------------


def serialize_scene(cfg: SceneFile) -> str:
    """Canonical text form; ``parse_scene`` of it gives back an equal config."""
    out = ["[scene]", f"bounding_radius = {_fmt(cfg.bounding_radius)}"]
    if cfg.far is not None:
        out.append(f"far = {_fmt(cfg.far)}")
    for obj in cfg.objects:
        out += ["", "[object]"]
        for f in fields(obj):
            v = getattr(obj, f.name)
            if v is not None:
                out.append(f"{f.name} = {_fmt(v)}")
    d = cfg.density
    out += ["", "[density]", f"beta = {_fmt(d.beta)}", f"coupled = {_fmt(d.coupled)}"]
    if not d.coupled:
        out.append(f"alpha = {_fmt(d.alpha)}")
    if cfg.camera is not None:
        out += ["", "[camera]"] + [f"{f.name} = {_fmt(getattr(cfg.camera, f.name))}" for f in fields(cfg.camera)]
    s = cfg.sampler
    out += [
        "", "[sampler]",
        f"epsilon = {_fmt(s.epsilon)}",
        f"n_init = {s.n_init}",
        f"m_final = {s.m_final}",
        f"max_outer_iters = {s.max_outer_iters}",
        f"max_bisect_iters = {s.max_bisect_iters}",
        f"seed = {s.rng_seed}",
        f"mode = {s.final_sample_mode}",
    ]
    rad = cfg.radiance
    out += ["", "[radiance]", f"model = {rad.model}"]
    out += [f"{k} = {_fmt(getattr(rad, k))}" for k in _RADIANCE_FIELDS[rad.model]]
    o = cfg.output
    out += ["", "[output]"]
    if o.image is not None:
        out.append(f"image = {o.image}")
    if o.csv is not None:
        out.append(f"csv = {o.csv}")
    out.append(f"background = {_fmt(o.background)}")
    return "\n".join(out) + "\n"
