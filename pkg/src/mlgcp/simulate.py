"""Simulation of multivariate LGCP patterns, with two built-in parameter sets."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from .fftfield import build_kernel, sample_field
from .model import m_for_expected_count
from .pattern import GridSpec, PointPattern, Window

PRESETS = ("scenario1", "scenario2")


@dataclass(frozen=True)
class ScenarioPreset:
    name: str
    sigma: tuple
    phi: tuple
    phi0: tuple
    #: loadings, one row per type
    alpha: tuple
    expected_count: float = 1000.0
    window: Window = Window(0.0, 1.0, 0.0, 1.0)

    def __post_init__(self):
        J = len(self.sigma)
        if len(self.phi) != J or len(self.alpha) != J:
            raise ValueError("sigma, phi and alpha rows must have one entry per type")
        if any(len(row) != len(self.phi0) for row in self.alpha):
            raise ValueError("each alpha row needs one entry per shared process")
        if not self.expected_count > 0:
            raise ValueError("expected_count must be positive")

    @property
    def J(self) -> int:
        return len(self.sigma)

    @property
    def K(self) -> int:
        return len(self.phi0)

    @property
    def alpha_matrix(self) -> np.ndarray:
        return np.array(self.alpha, dtype=float).reshape(self.J, self.K)

    @property
    def m(self) -> np.ndarray:
        return m_for_expected_count(self.expected_count, self.window.area,
                                    self.sigma, self.alpha_matrix)


def _rows_from_vec(vec, K, J):
    """Loadings listed shared-process-fastest, i.e. the K x J matrix read by columns."""
    return tuple(tuple(vec[j * K:(j + 1) * K]) for j in range(J))


def preset(name: str) -> ScenarioPreset:
    r = math.sqrt(0.5)
    if name == "scenario1":
        vec = (r, 0, 1, 0, -1, 1, 0, -1, 0, -0.5)
        return ScenarioPreset(name, (1.0,) * 5, (0.01, 0.1, 0.02, 0.03, 0.04), (0.08, 0.1),
                              _rows_from_vec(vec, 2, 5))
    if name == "scenario2":
        vec = (r, 0, 0, -1, 1, 0, 0, r, 0, 0, 0, -r, 1, -1, 1)
        return ScenarioPreset(name, (1.0,) * 5, (0.01, 0.1, 0.02, 0.03, 0.04),
                              (0.08, 0.1, 0.05), _rows_from_vec(vec, 3, 5))
    raise ValueError(f"unknown preset {name!r}; choose from {', '.join(PRESETS)}")


def simulate_Y(params: ScenarioPreset, spec: GridSpec, rng: np.random.Generator) -> np.ndarray:
    """Log-intensity fields ``(J, Me, Ne)`` drawn from the prior of the latent fields."""
    if spec.window != params.window:
        raise ValueError("grid window and preset window differ")
    alpha = params.alpha_matrix
    Y = np.empty((params.J,) + spec.shape)
    shared = [sample_field(build_kernel(spec, p), rng) for p in params.phi0]
    for j in range(params.J):
        own = sample_field(build_kernel(spec, params.phi[j]), rng)
        Y[j] = params.m[j] + params.sigma[j] * own
        for k, field in enumerate(shared):
            Y[j] += alpha[j, k] * field
    return Y


def simulate_pattern(params: ScenarioPreset, spec: GridSpec, rng: np.random.Generator,
                     types=None):
    """Draw a pattern from cell-level Poisson counts scattered uniformly in cells.

    Returns ``(pattern, Y)`` where ``Y`` is the true log-intensity on the
    extended grid.
    """
    Y = simulate_Y(params, spec, rng)
    M, N = spec.M, spec.N
    rate = spec.cell_area * np.exp(Y[:, :M, :N])
    counts = rng.poisson(rate)
    t, row, col = np.nonzero(counts)
    reps = counts[t, row, col]
    t, row, col = np.repeat(t, reps), np.repeat(row, reps), np.repeat(col, reps)
    w = spec.window
    x = w.x_min + (col + rng.uniform(size=col.size)) * spec.cell_width
    y = w.y_min + (row + rng.uniform(size=row.size)) * spec.cell_height
    # keep points strictly inside the window despite rounding at the top edge
    x = np.minimum(x, w.x_max)
    y = np.minimum(y, w.y_max)
    types = tuple(types) if types is not None else tuple(f"type{j + 1}" for j in range(params.J))
    return PointPattern(w, types, t, x, y), Y


def truth_dict(params: ScenarioPreset, distances) -> dict:
    """Parameters and derived dependence curves for a preset, JSON-ready."""
    from . import summaries

    state = summaries.params_state(params.m, params.sigma, params.phi, params.phi0,
                                   params.alpha_matrix)
    d = np.asarray(distances, dtype=float)
    J = params.J
    out = {
        "preset": params.name,
        "window": [params.window.x_min, params.window.x_max,
                   params.window.y_min, params.window.y_max],
        "expected_count": params.expected_count,
        "m": params.m.tolist(),
        "sigma": list(params.sigma),
        "phi": list(params.phi),
        "phi0": list(params.phi0),
        "alpha": params.alpha_matrix.tolist(),
        "rho": [summaries.intensity(state, j) for j in range(J)],
        "distances": d.tolist(),
        "ccf": {},
        "pv": {},
    }
    for j in range(J):
        for jj in range(j + 1, J):
            out["ccf"][f"{j + 1}-{jj + 1}"] = _nullable(summaries.ccf(state, j, jj, d))
        out["pv"][str(j + 1)] = _nullable(summaries.pv(state, j, d))
    return out


def _nullable(values):
    return [None if not np.isfinite(v) else float(v) for v in np.atleast_1d(values)]


def write_truth(path, params: ScenarioPreset, distances) -> None:
    with open(path, "w") as fh:
        json.dump(truth_dict(params, distances), fh, indent=2, sort_keys=True)
        fh.write("\n")
