"""Circulant embedding of exponential correlations on the torus grid.

The correlation between extended-grid cells depends only on their
wrap-around (toroidal) lag, so the correlation matrix is block circulant and
diagonalised by the 2-d DFT. Its eigenvalues are the DFT of the base row.
"""

from __future__ import annotations

import functools
import logging
from dataclasses import dataclass

import numpy as np

from . import _fft
from .pattern import GridSpec

log = logging.getLogger(__name__)

#: fraction of the trace that may be clamped before embedding is declared failed
MAX_CLAMPED_FRACTION = 0.01
#: negative eigenvalues above ``-EPS_REL * max`` are treated as round-off
EPS_REL = 1e-12


class EmbeddingError(RuntimeError):
    """Circulant embedding produced too much negative spectral mass."""


@functools.lru_cache(maxsize=32)
def toroidal_distances(spec: GridSpec) -> np.ndarray:
    """Distance from cell (0, 0) to every cell on the ``Me x Ne`` torus."""
    r = np.arange(spec.Me)
    c = np.arange(spec.Ne)
    dy = np.minimum(r, spec.Me - r) * spec.cell_height
    dx = np.minimum(c, spec.Ne - c) * spec.cell_width
    d = np.hypot(dy[:, None], dx[None, :])
    d.setflags(write=False)
    return d


@dataclass(frozen=True, eq=False)
class SpectralKernel:
    """Eigenvalues of the embedded correlation matrix for one range ``phi``.

    Only the non-redundant half spectrum (``Me x (Ne//2 + 1)``) is stored;
    :attr:`eigenvalues` rebuilds the full ``Me x Ne`` array.
    """

    spec: GridSpec
    phi: float
    half_eigenvalues: np.ndarray
    sqrt_half: np.ndarray
    n_clamped: int
    clamped_fraction: float

    @property
    def eigenvalues(self) -> np.ndarray:
        Ne = self.spec.Ne
        h = self.half_eigenvalues
        # the base row is even in each axis, so the spectrum is too
        return np.concatenate([h, h[:, 1:Ne - Ne // 2][:, ::-1]], axis=1)

    def dense(self) -> np.ndarray:
        """Dense ``(Me*Ne) x (Me*Ne)`` correlation matrix (small grids only)."""
        return dense_correlation(self.spec, self.phi)


def half_spectrum_weights(spec: GridSpec) -> np.ndarray:
    """Multiplicity of each half-spectrum column in the full spectrum."""
    w = np.full(spec.Ne // 2 + 1, 2.0)
    w[0] = 1.0
    if spec.Ne % 2 == 0:
        w[-1] = 1.0
    return w


def base_row(spec: GridSpec, phi: float) -> np.ndarray:
    return np.exp(-toroidal_distances(spec) / phi)


def build_kernel(spec: GridSpec, phi: float) -> SpectralKernel:
    if not phi > 0:
        raise ValueError(f"phi must be positive, got {phi}")
    half = _fft.rfft2(base_row(spec, phi)).real
    lam_max = half.max()
    neg = half < 0
    significant = half < -EPS_REL * lam_max
    # trace is Me*Ne (unit diagonal); interior half-spectrum columns count twice
    frac = 0.0
    if neg.any():
        frac = float(-(half_spectrum_weights(spec) * np.where(neg, half, 0.0)).sum()
                     / (spec.Me * spec.Ne))
    if significant.any():
        log.debug("phi=%g: clamped %d negative eigenvalues (%.3g of trace)",
                  phi, int(significant.sum()), frac)
    if frac > MAX_CLAMPED_FRACTION:
        raise EmbeddingError(
            f"embedding failed for phi={phi:g} ({frac:.2%} of spectral mass negative); "
            "increase grid extension or lower phi")
    half = np.where(neg, 0.0, half)
    return SpectralKernel(spec, float(phi), half, np.sqrt(half),
                          int(significant.sum()), frac)


@functools.lru_cache(maxsize=256)
def cached_kernel(spec: GridSpec, phi: float) -> SpectralKernel:
    return build_kernel(spec, phi)


def _as_grid(v, spec):
    v = np.asarray(v, dtype=float)
    if v.shape[-1] == spec.Me * spec.Ne and v.shape[-2:] != spec.shape:
        return v.reshape(v.shape[:-1] + spec.shape), True
    return v, False


def sqrt_matvec(kernel: SpectralKernel, v) -> np.ndarray:
    """Apply the symmetric square root of the embedded correlation matrix.

    ``v`` may be shaped ``(..., Me, Ne)`` or ``(..., Me*Ne)``; the result has
    the same shape. The operator is self-adjoint.
    """
    spec = kernel.spec
    g, flat = _as_grid(v, spec)
    out = _fft.irfft2(kernel.sqrt_half * _fft.rfft2(g), spec.shape)
    return out.reshape(np.shape(v)) if flat else out


def matvec(kernel: SpectralKernel, v) -> np.ndarray:
    """Apply the embedded correlation matrix itself."""
    spec = kernel.spec
    g, flat = _as_grid(v, spec)
    out = _fft.irfft2(kernel.half_eigenvalues * _fft.rfft2(g), spec.shape)
    return out.reshape(np.shape(v)) if flat else out


def sample_field(kernel: SpectralKernel, rng: np.random.Generator) -> np.ndarray:
    """Zero-mean Gaussian field with unit variance and the kernel's correlation."""
    return sqrt_matvec(kernel, rng.standard_normal(kernel.spec.shape))


def dense_correlation(spec: GridSpec, phi: float) -> np.ndarray:
    """Toroidal correlation matrix built entry by entry (test oracle)."""
    r, c = np.divmod(np.arange(spec.Me * spec.Ne), spec.Ne)
    dr = np.abs(r[:, None] - r[None, :])
    dc = np.abs(c[:, None] - c[None, :])
    dy = np.minimum(dr, spec.Me - dr) * spec.cell_height
    dx = np.minimum(dc, spec.Ne - dc) * spec.cell_width
    return np.exp(-np.hypot(dx, dy) / phi)
