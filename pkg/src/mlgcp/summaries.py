"""Dependence summaries per posterior draw and their pointwise quantiles.

For types ``j`` and ``j'`` at distance ``d``:

* inter-type covariance ``psi(d) = sum_k alpha_jk alpha_j'k exp(-d/phi0_k)``
* cross pair correlation ``g(d) = exp(1[j=j'] sigma_j^2 exp(-d/phi_j) + psi(d))``
* cross-correlation ``ccf(d) = psi_jj'(d) / sqrt(psi_jj(0) psi_j'j'(0))``
* proportion of variance ``pv(d) = psi_jj(d) / log g_jj(d)``

``g > 1`` (equivalently ``psi > 0``) means attraction. Undefined values (a
type with no loadings, a zero variance) are NaN in memory and ``NA`` in
files.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .model import ModelState

#: loadings/variances below this are treated as zero in denominators
UNDEFINED_TOL = 1e-12
QUANTILE_LEVELS = (0.025, 0.5, 0.975)


def params_state(m, sigma, phi, phi0, alpha) -> ModelState:
    """A field-free state holding only the scalar parameters."""
    return ModelState(np.asarray(m, float), np.asarray(sigma, float), np.asarray(phi, float),
                      np.asarray(phi0, float), np.asarray(alpha, float), None, None)


def _d(d):
    d = np.asarray(d, dtype=float)
    if (d < 0).any():
        raise ValueError("distances must be non-negative")
    return d


def _out(x, d):
    return float(x) if np.ndim(d) == 0 else x


def inter_cov_psi(state: ModelState, j: int, jj: int, d):
    d = _d(d)
    if state.K == 0:
        return _out(np.zeros_like(d), d)
    w = state.alpha[j] * state.alpha[jj]
    val = np.exp(-d[..., None] / state.phi0) @ w
    return _out(val, d)


def cross_pcf(state: ModelState, j: int, jj: int, d):
    d = _d(d)
    log_g = np.asarray(inter_cov_psi(state, j, jj, d), dtype=float)
    if j == jj:
        log_g = log_g + state.sigma[j] ** 2 * np.exp(-d / state.phi[j])
    return _out(np.exp(log_g), d)


def ccf(state: ModelState, j: int, jj: int, d):
    d = _d(d)
    a = state.alpha
    denom = math.sqrt(float(a[j] @ a[j]) * float(a[jj] @ a[jj])) if state.K else 0.0
    if denom < UNDEFINED_TOL:
        return _out(np.full(d.shape, np.nan), d)
    return _out(np.asarray(inter_cov_psi(state, j, jj, d)) / denom, d)


def pv(state: ModelState, j: int, d):
    d = _d(d)
    shared = np.asarray(inter_cov_psi(state, j, j, d), dtype=float)
    total = shared + state.sigma[j] ** 2 * np.exp(-d / state.phi[j])
    with np.errstate(invalid="ignore", divide="ignore"):
        val = np.where(total < UNDEFINED_TOL, np.nan, shared / np.where(total == 0, 1, total))
    return _out(val, d)


def intensity(state: ModelState, j: int) -> float:
    """Marginal intensity of type ``j``."""
    return math.exp(state.m[j] + 0.5 * state.sigma[j] ** 2
                    + 0.5 * float(np.sum(state.alpha[j] ** 2)))


def conditional_intensity(state: ModelState, j: int, jj: int, d):
    """Intensity of type ``j'`` at distance ``d`` from a type-``j`` point."""
    return intensity(state, jj) * np.asarray(cross_pcf(state, j, jj, d))


# ---------------------------------------------------------------------------
# vectorised over draws


@dataclass
class DrawArrays:
    sigma: np.ndarray  # (R, J)
    phi: np.ndarray  # (R, J)
    phi0: np.ndarray  # (R, K)
    alpha: np.ndarray  # (R, J, K)

    @classmethod
    def from_states(cls, states) -> "DrawArrays":
        if not states:
            raise ValueError("no draws")
        return cls(np.array([s.sigma for s in states]), np.array([s.phi for s in states]),
                   np.array([s.phi0 for s in states]), np.array([s.alpha for s in states]))

    @property
    def K(self) -> int:
        return self.phi0.shape[1]

    def psi(self, j, jj, d) -> np.ndarray:
        d = _d(d)
        R = self.sigma.shape[0]
        if self.K == 0:
            return np.zeros((R, d.size))
        decay = np.exp(-d[None, :, None] / self.phi0[:, None, :])  # (R, D, K)
        w = self.alpha[:, j] * self.alpha[:, jj]  # (R, K)
        return np.einsum("rdk,rk->rd", decay, w)

    def log_g(self, j, jj, d) -> np.ndarray:
        d = _d(d)
        out = self.psi(j, jj, d)
        if j == jj:
            out = out + self.sigma[:, j, None] ** 2 * np.exp(-d[None, :] / self.phi[:, j, None])
        return out

    def g(self, j, jj, d) -> np.ndarray:
        return np.exp(self.log_g(j, jj, d))

    def ccf(self, j, jj, d) -> np.ndarray:
        num = self.psi(j, jj, d)
        if self.K == 0:
            return np.full(num.shape, np.nan)
        denom = np.sqrt(np.sum(self.alpha[:, j] ** 2, axis=1) * np.sum(self.alpha[:, jj] ** 2, axis=1))
        bad = denom < UNDEFINED_TOL
        with np.errstate(invalid="ignore", divide="ignore"):
            out = num / np.where(bad, 1.0, denom)[:, None]
        out[bad] = np.nan
        return out

    def pv(self, j, d) -> np.ndarray:
        shared = self.psi(j, j, d)
        total = self.log_g(j, j, d)
        bad = total < UNDEFINED_TOL
        with np.errstate(invalid="ignore", divide="ignore"):
            out = shared / np.where(bad, 1.0, total)
        out[bad] = np.nan
        return out


@dataclass
class CurveSet:
    """Per-draw values of one summary over a distance lattice."""

    name: str
    distances: np.ndarray
    values: np.ndarray  # (draws, distances)

    def __post_init__(self):
        self.distances = np.asarray(self.distances, dtype=float)
        if self.distances.ndim != 1 or (np.diff(self.distances) <= 0).any():
            raise ValueError("distances must be strictly increasing")
        self.values = np.asarray(self.values, dtype=float).reshape(-1, self.distances.size)

    @property
    def n_undefined(self) -> int:
        return int(np.isnan(self.values).any(axis=1).sum())

    @property
    def quantiles(self) -> np.ndarray:
        """2.5/50/97.5% pointwise quantiles (linear interpolation), shape (3, D).

        Undefined draws are skipped; a column with no defined draw is NaN.
        """
        out = np.full((len(QUANTILE_LEVELS), self.distances.size), np.nan)
        for i in range(self.distances.size):
            col = self.values[:, i]
            col = col[~np.isnan(col)]
            if col.size:
                out[:, i] = np.quantile(col, QUANTILE_LEVELS)
        return out

    def value_at(self, d: float) -> np.ndarray:
        """Per-draw values at one lattice distance."""
        idx = np.flatnonzero(np.isclose(self.distances, d, rtol=0, atol=1e-12))
        if idx.size == 0:
            raise ValueError(f"distance {d} is not on the lattice")
        return self.values[:, idx[0]]


def default_distances(window=None, n: int = 61) -> np.ndarray:
    """0-30 length units for real images, 0-0.25 for unit-scale windows."""
    if window is not None and max(window.width, window.height) <= 1.0:
        return np.linspace(0.0, 0.25, n)
    return np.linspace(0.0, 30.0, n)


@dataclass
class Summary:
    curves: dict = field(default_factory=dict)
    reference_distance: float = 1.0
    #: per-draw values at the reference distance, keyed like ``curves``
    at_reference: dict = field(default_factory=dict)


def curve_key(kind: str, j: int, jj: int | None = None) -> str:
    return f"{kind}_{j + 1}" if jj is None else f"{kind}_{j + 1}-{jj + 1}"


def summarize_states(states, J: int, distances=None, pairs=None, types=None,
                     reference_distance: float = 1.0) -> Summary:
    """Evaluate g, ψ, CCF (pairs) and PV (types) for every draw."""
    d = np.asarray(default_distances() if distances is None else distances, dtype=float)
    pairs = [(j, jj) for j in range(J) for jj in range(j + 1, J)] if pairs is None else pairs
    types = list(range(J)) if types is None else types
    arr = DrawArrays.from_states(states)
    ref = np.array([reference_distance])
    out = Summary(reference_distance=reference_distance)
    for j, jj in pairs:
        for kind, fn in (("ccf", arr.ccf), ("g", arr.g), ("psi", arr.psi)):
            key = curve_key(kind, j, jj)
            out.curves[key] = CurveSet(key, d, fn(j, jj, d))
            out.at_reference[key] = fn(j, jj, ref)[:, 0]
    for j in types:
        key = curve_key("pv", j)
        out.curves[key] = CurveSet(key, d, arr.pv(j, d))
        out.at_reference[key] = arr.pv(j, ref)[:, 0]
    return out


def summarize_archive(archive, distances=None, pairs=None, types=None,
                      reference_distance: float = 1.0) -> Summary:
    if distances is None:
        distances = default_distances(archive.spec.window)
    return summarize_states(archive.states, archive.J, distances, pairs, types,
                            reference_distance)


def fmt(v) -> str:
    """Number formatting for output files; undefined values become NA."""
    return "NA" if v is None or not np.isfinite(v) else repr(float(v))


def write_summary(summary: Summary, directory, svg: bool = False) -> list:
    """Write one quantile CSV per curve and a long-format per-draw CSV."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    written = []
    for key, cs in summary.curves.items():
        path = d / f"{key}.csv"
        q = cs.quantiles
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["d", "q025", "q50", "q975"])
            for i, dist in enumerate(cs.distances):
                w.writerow([fmt(dist)] + [fmt(v) for v in q[:, i]])
        written.append(path)
    path = d / "draws.csv"
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["quantity", "draw", "d", "value"])
        for key, vals in summary.at_reference.items():
            for r, v in enumerate(vals):
                w.writerow([key, r, fmt(summary.reference_distance), fmt(v)])
    written.append(path)
    if svg:
        written.extend(write_svg(summary, d))
    return written


def write_svg(summary: Summary, directory) -> list:
    """Median and 95% band line plots for CCF and PV curves."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    paths = []
    with matplotlib.rc_context({"svg.hashsalt": "mlgcp"}):
        for key, cs in summary.curves.items():
            if not key.startswith(("ccf", "pv")):
                continue
            q = cs.quantiles
            fig, ax = plt.subplots(figsize=(4, 3))
            ax.plot(cs.distances, q[1], color="k")
            ax.plot(cs.distances, q[0], color="k", ls="--")
            ax.plot(cs.distances, q[2], color="k", ls="--")
            ax.axhline(0.0, color="0.7", lw=0.8)
            ax.set_xlabel("distance")
            ax.set_ylabel(key.split("_")[0].upper())
            ax.set_title(key)
            fig.tight_layout()
            path = Path(directory) / f"{key}.svg"
            fig.savefig(path, format="svg", metadata={"Date": None})
            plt.close(fig)
            paths.append(path)
    return paths
