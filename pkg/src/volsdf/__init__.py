"""Certified volume rendering of signed-distance scenes."""

from .bounds import Ray, SampleTrack, d_star, error_hat, global_bound, interval_bound, lipschitz_bound, opacity_hat
from .density import DensityParams, laplace_cdf, sigma_from_sdf
from .oracle import OracleError, opacity_oracle
from .render import Camera, ConstantEmission, Lambertian, NormalShading, Phong, discrete_weights, render_image, render_ray
from .sampler import SamplerConfig, SamplerReport, run_algorithm1
from .scenefile import SceneFile, SceneFileError, load_scene, parse_scene, serialize_scene
from .sdf import Box, Complement, Intersection, Plane, SdfScene, Sphere, Torus, Translate, Union, eval_sdf, grad_sdf

__version__ = "0.1.0"
