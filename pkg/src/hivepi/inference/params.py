"""Flat parameter layout for the posterior.

Every region- or site-indexed effect is stored standardised, with
``sigma = exp(log_sigma)``:

* intercept effects (``z_rho``, ``z_alpha0``, ``z_delta``, ``z_m``) are
  ``sigma * z``;
* region spline deviations carry both an N(0, sigma) prior per coefficient
  and an N(0, 1) prior on first differences, so their prior precision is
  ``I / sigma^2 + D'D``. They are stored whitened against it:
  ``deviation = V diag(s) z`` where ``V, lam`` are the eigenvectors and
  eigenvalues of ``D'D`` and ``s = sigma / sqrt(1 + sigma^2 lam)``. A priori
  ``z ~ N(0, I)`` independently of ``sigma``, which keeps the sampler out of
  the funnel that ``sigma * z`` with a difference penalty creates.

Mean coefficients (``beta_*_0``, ``rho0``, ``alpha0``) and the dispersion
parameters are stored directly on their unconstrained scale.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields
from functools import lru_cache

import numpy as np


@lru_cache(maxsize=None)
def smoothing_eigen(k: int) -> tuple[np.ndarray, np.ndarray]:
    """Eigenvectors (columns) and eigenvalues of ``D'D`` for ``k`` coefficients.

    ``D`` is the (k-1, k) first-difference matrix; the eigenvectors are the
    cosine basis, written out so the result is identical on every platform.
    """
    j = np.arange(k)[:, None] + 0.5
    m = np.arange(k)[None, :]
    V = np.cos(np.pi * m * j / k) * np.where(m == 0, math.sqrt(1.0 / k), math.sqrt(2.0 / k))
    lam = 4.0 * np.sin(np.pi * np.arange(k) / (2.0 * k)) ** 2
    V.setflags(write=False)
    lam.setflags(write=False)
    return V, lam


def spline_scales(log_sigma: float, k: int) -> np.ndarray:
    """Per-eigendirection prior sd ``sigma / sqrt(1 + sigma^2 lam)``."""
    sigma = math.exp(log_sigma)
    return sigma / np.sqrt(1.0 + sigma * sigma * smoothing_eigen(k)[1])


def spline_deviation(z, log_sigma: float) -> np.ndarray:
    """Region spline deviations (R, K) from whitened coordinates."""
    z = np.asarray(z, dtype=float)
    V, _ = smoothing_eigen(z.shape[-1])
    return (z * spline_scales(log_sigma, z.shape[-1])) @ V.T


def spline_whiten(deviation, log_sigma: float) -> np.ndarray:
    """Inverse of :func:`spline_deviation`."""
    dev = np.asarray(deviation, dtype=float)
    V, _ = smoothing_eigen(dev.shape[-1])
    return (dev @ V) / spline_scales(log_sigma, dev.shape[-1])


@dataclass(frozen=True)
class ParameterLayout:
    n_regions: int
    n_sites: int
    n_kappa: int
    n_alpha: int
    art_era: bool = False
    region_ids: tuple[str, ...] = ()
    site_ids: tuple[str, ...] = ()

    def shapes(self) -> list[tuple[str, tuple[int, ...]]]:
        R, S = self.n_regions, self.n_sites
        out = [
            ("beta_kappa_0", (self.n_kappa,)),
            ("z_kappa", (R, self.n_kappa)),
            ("log_sigma_kappa", ()),
            ("beta_alpha_0", (self.n_alpha,)),
            ("z_alpha", (R, self.n_alpha)),
            ("log_sigma_alpha_star", ()),
            ("rho0", ()),
            ("z_rho", (R,)),
            ("log_sigma_rho", ()),
        ]
        if self.art_era:
            out += [("alpha0", ()), ("z_alpha0", (R,)), ("log_sigma_alpha", ())]
        out += [
            ("z_delta", (S,)),
            ("log_sigma_delta", ()),
            ("z_m", (R,)),
            ("log_sigma_m", ()),
            ("log_omega_lin", ()),
            ("log_theta_quad", ()),
        ]
        return out

    def slices(self) -> dict[str, tuple[slice, tuple[int, ...]]]:
        out, start = {}, 0
        for name, shape in self.shapes():
            n = int(np.prod(shape)) if shape else 1
            out[name] = (slice(start, start + n), shape)
            start += n
        return out

    @property
    def size(self) -> int:
        return sum(int(np.prod(s)) if s else 1 for _, s in self.shapes())

    def names(self) -> list[str]:
        """Column names for every scalar, in pack order."""
        rid = self.region_ids or tuple(str(i) for i in range(self.n_regions))
        sid = self.site_ids or tuple(str(i) for i in range(self.n_sites))
        names = []
        for name, shape in self.shapes():
            if shape == ():
                names.append(name)
            elif name.startswith("z_") and len(shape) == 2:
                names += [f"{name}[{rid[r]},{i}]" for r in range(shape[0]) for i in range(shape[1])]
            elif name == "z_delta":
                names += [f"{name}[{s}]" for s in sid]
            elif name in ("z_rho", "z_alpha0", "z_m"):
                names += [f"{name}[{r}]" for r in rid]
            else:
                names += [f"{name}[{i}]" for i in range(shape[0])]
        return names

    def unpack(self, x) -> "ParameterVector":
        x = np.asarray(x, dtype=float)
        if x.shape != (self.size,):
            raise ValueError(f"expected {self.size} parameters, got {x.shape}")
        vals = {}
        for name, (sl, shape) in self.slices().items():
            vals[name] = float(x[sl][0]) if shape == () else x[sl].reshape(shape).copy()
        if not self.art_era:
            vals.update(alpha0=0.0, z_alpha0=np.zeros(self.n_regions), log_sigma_alpha=0.0)
        return ParameterVector(layout=self, **vals)

    def zeros(self) -> "ParameterVector":
        return self.unpack(np.zeros(self.size))


@dataclass
class ParameterVector:
    layout: ParameterLayout
    beta_kappa_0: np.ndarray
    z_kappa: np.ndarray
    log_sigma_kappa: float
    beta_alpha_0: np.ndarray
    z_alpha: np.ndarray
    log_sigma_alpha_star: float
    rho0: float
    z_rho: np.ndarray
    log_sigma_rho: float
    z_delta: np.ndarray
    log_sigma_delta: float
    z_m: np.ndarray
    log_sigma_m: float
    log_omega_lin: float
    log_theta_quad: float
    alpha0: float = 0.0
    z_alpha0: np.ndarray | None = None
    log_sigma_alpha: float = 0.0

    def pack(self) -> np.ndarray:
        x = np.empty(self.layout.size)
        for name, (sl, shape) in self.layout.slices().items():
            x[sl] = np.ravel(getattr(self, name))
        return x

    # natural-scale views

    @property
    def beta_kappa(self) -> np.ndarray:
        """Region deviations of the transmission spline (R, K)."""
        return spline_deviation(self.z_kappa, self.log_sigma_kappa)

    @property
    def beta_alpha(self) -> np.ndarray:
        return spline_deviation(self.z_alpha, self.log_sigma_alpha_star)

    @property
    def rho_dev(self) -> np.ndarray:
        return np.exp(self.log_sigma_rho) * self.z_rho

    @property
    def alpha_dev(self) -> np.ndarray:
        return np.exp(self.log_sigma_alpha) * np.asarray(self.z_alpha0)

    @property
    def delta_s(self) -> np.ndarray:
        return np.exp(self.log_sigma_delta) * self.z_delta

    def to_dict(self) -> dict[str, object]:
        out = {}
        for f in fields(self):
            if f.name == "layout":
                continue
            v = getattr(self, f.name)
            out[f.name] = v.tolist() if isinstance(v, np.ndarray) else v
        return out

    def named(self) -> dict[str, float]:
        return dict(zip(self.layout.names(), self.pack().tolist()))
