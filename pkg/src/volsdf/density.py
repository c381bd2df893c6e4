"""Density as a Laplace-CDF transform of the signed distance."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .sdf import SdfScene


@dataclass(frozen=True)
class DensityParams:
    """``sigma(x) = alpha * Psi_beta(-d(x))``.

    With ``coupled=True`` (the default) alpha is tied to ``1 / beta``; passing
    an explicit ``alpha`` then has to agree with that to 1e-12.
    """

    beta: float
    alpha: Optional[float] = None
    coupled: bool = True

    def __post_init__(self):
        if not (self.beta > 0 and np.isfinite(self.beta)):
            raise ValueError(f"beta must be > 0, got {self.beta}")
        if self.alpha is None:
            if not self.coupled:
                raise ValueError("decoupled density needs an explicit alpha")
            object.__setattr__(self, "alpha", 1.0 / self.beta)
        if not (self.alpha > 0 and np.isfinite(self.alpha)):
            raise ValueError(f"alpha must be > 0, got {self.alpha}")
        if self.coupled and abs(self.alpha * self.beta - 1.0) > 1e-12:
            raise ValueError("coupled density requires alpha == 1/beta")

    def with_beta(self, beta: float) -> "DensityParams":
        """Same family at another scale (alpha follows beta when coupled)."""
        if self.coupled:
            return DensityParams(beta=beta)
        return DensityParams(beta=beta, alpha=self.alpha, coupled=False)


def laplace_cdf(s, beta):
    """CDF of the zero-mean Laplace distribution with scale ``beta``.

    Only ``exp(-|s|/beta)`` is ever evaluated, so the result is overflow free
    for any finite input.
    """
    s = np.asarray(s, dtype=np.float64)
    half_tail = 0.5 * np.exp(-np.abs(s) / beta)
    return np.where(s <= 0.0, half_tail, 1.0 - half_tail)


def laplace_pdf(s, beta):
    s = np.asarray(s, dtype=np.float64)
    return np.exp(-np.abs(s) / beta) / (2.0 * beta)


def sigma_from_sdf(d, alpha, beta):
    """Density for precomputed signed distances; alpha/beta may broadcast."""
    return alpha * laplace_cdf(-np.asarray(d, dtype=np.float64), beta)


def density_at(scene: SdfScene, params: DensityParams, x):
    return sigma_from_sdf(scene.eval(x), params.alpha, params.beta)
