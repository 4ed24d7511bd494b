"""Joint posterior of the multivariate LGCP on the extended grid.

Log-intensity of type ``j`` (non-centred form)::

    Y_j = m_j + sigma_j * C_j^{1/2} gamma_j + sum_k alpha_jk * C_0k^{1/2} gamma_0k

with ``gamma`` standard normal fields, ``C`` exponential correlations with
ranges ``phi_j`` / ``phi0_k`` and unit shared variances. The gridded Poisson
log-likelihood drops the ``log n!`` constant::

    sum_j sum_i n_ij * Y_ij - A_i * exp(Y_ij)

The density is over ``(m, sigma, log phi, log phi0, alpha, tau2, lambda2,
gamma)``: range priors are uniform on the log scale, ``sigma`` has a
Gamma(shape, rate) prior on its natural scale.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import gammaln

from .fftfield import SpectralKernel, cached_kernel, sqrt_matvec
from .pattern import GriddedData, GridSpec, Window

#: exp() argument cap for the likelihood
Y_CLIP = 700.0

LOG_2PI = math.log(2 * math.pi)


class NonFiniteError(FloatingPointError):
    """A log-density or gradient evaluated to inf/nan."""

    def __init__(self, block: str, value=None):
        super().__init__(f"non-finite value in block {block!r}: {value}")
        self.block = block


@dataclass
class Hyperparams:
    mu_m: float = 0.0
    h_m: float = 1e5
    a_sigma: float = 10.0
    b_sigma: float = 10.0
    l_phi: float = math.log(0.0025)
    u_phi: float = math.log(0.25)
    l_phi0: float = math.log(0.0025)
    u_phi0: float = math.log(0.25)
    h_alpha: float = 1.0
    prior_alpha: str = "lasso"
    a_lambda: float = 0.7
    b_lambda: float = 0.7

    def __post_init__(self):
        if not (self.u_phi > self.l_phi and self.u_phi0 > self.l_phi0):
            raise ValueError("range prior bounds must satisfy upper > lower")
        if self.prior_alpha not in ("lasso", "normal"):
            raise ValueError(f"prior_alpha must be 'lasso' or 'normal', got {self.prior_alpha!r}")
        if min(self.a_sigma, self.b_sigma, self.h_alpha, self.a_lambda, self.b_lambda) <= 0:
            raise ValueError("shape/rate/variance hyperparameters must be positive")

    @classmethod
    def for_window(cls, window: Window, lower_frac: float = 0.0025,
                   upper_frac: float = 0.25, **overrides) -> "Hyperparams":
        """Defaults with range priors scaled to the window.

        Ranges are uniform on the log scale between ``lower_frac`` and
        ``upper_frac`` (25%) of the longer window side.
        """
        D = max(window.width, window.height)
        lo, hi = math.log(lower_frac * D), math.log(upper_frac * D)
        kw = dict(l_phi=lo, u_phi=hi, l_phi0=lo, u_phi0=hi)
        kw.update(overrides)
        return cls(**kw)

    @property
    def lasso(self) -> bool:
        return self.prior_alpha == "lasso"


@dataclass
class ModelState:
    """All unknowns at one MCMC iteration.

    Latent fields are ``(J, Me, Ne)`` and ``(K, Me, Ne)`` arrays; snapshots
    kept in an archive may drop them (``None``).
    """

    m: np.ndarray
    sigma: np.ndarray
    phi: np.ndarray
    phi0: np.ndarray
    alpha: np.ndarray
    gamma_type: np.ndarray | None
    gamma_shared: np.ndarray | None
    tau2: np.ndarray | None = None
    lambda2: float | None = None

    def __post_init__(self):
        self.m = np.asarray(self.m, dtype=float)
        self.sigma = np.asarray(self.sigma, dtype=float)
        self.phi = np.asarray(self.phi, dtype=float)
        self.phi0 = np.asarray(self.phi0, dtype=float).reshape(-1)
        J = self.m.size
        self.alpha = np.asarray(self.alpha, dtype=float).reshape(J, self.phi0.size)
        if self.tau2 is not None:
            self.tau2 = np.asarray(self.tau2, dtype=float).reshape(self.alpha.shape)
        if not (self.sigma.size == self.phi.size == J):
            raise ValueError("m, sigma and phi must have one entry per type")
        if self.K > J:
            raise ValueError(f"K={self.K} exceeds J={J}: at most one shared process per type")
        if (self.sigma < 0).any() or (self.phi <= 0).any() or (self.phi0 <= 0).any():
            raise ValueError("sigma must be >= 0 and ranges > 0")

    @property
    def J(self) -> int:
        return self.m.size

    @property
    def K(self) -> int:
        return self.phi0.size

    def copy(self, latent: bool = True) -> "ModelState":
        def c(a):
            return None if a is None else np.array(a, copy=True)

        return replace(
            self, m=c(self.m), sigma=c(self.sigma), phi=c(self.phi), phi0=c(self.phi0),
            alpha=c(self.alpha), tau2=c(self.tau2),
            gamma_type=c(self.gamma_type) if latent else None,
            gamma_shared=c(self.gamma_shared) if latent else None)

    def scalars(self) -> dict:
        """Flat name -> value mapping of the non-field parameters."""
        out = {}
        for j in range(self.J):
            out[f"m[{j}]"] = self.m[j]
        for j in range(self.J):
            out[f"sigma[{j}]"] = self.sigma[j]
        for j in range(self.J):
            out[f"phi[{j}]"] = self.phi[j]
        for k in range(self.K):
            out[f"phi0[{k}]"] = self.phi0[k]
        for j in range(self.J):
            for k in range(self.K):
                out[f"alpha[{j},{k}]"] = self.alpha[j, k]
        if self.tau2 is not None:
            for j in range(self.J):
                for k in range(self.K):
                    out[f"tau2[{j},{k}]"] = self.tau2[j, k]
        if self.lambda2 is not None:
            out["lambda2"] = self.lambda2
        return out

    @classmethod
    def from_scalars(cls, values: dict, J: int, K: int) -> "ModelState":
        m = [values[f"m[{j}]"] for j in range(J)]
        sigma = [values[f"sigma[{j}]"] for j in range(J)]
        phi = [values[f"phi[{j}]"] for j in range(J)]
        phi0 = [values[f"phi0[{k}]"] for k in range(K)]
        alpha = [[values[f"alpha[{j},{k}]"] for k in range(K)] for j in range(J)]
        tau2 = None
        if K and f"tau2[0,0]" in values:
            tau2 = [[values[f"tau2[{j},{k}]"] for k in range(K)] for j in range(J)]
        lam = values.get("lambda2")
        return cls(m, sigma, phi, phi0, np.reshape(alpha, (J, K)), None, None,
                   None if tau2 is None else np.reshape(tau2, (J, K)),
                   None if lam is None else float(lam))


@dataclass
class KernelSet:
    """Spectral kernels for the current range parameters."""

    type_kernels: list[SpectralKernel]
    shared_kernels: list[SpectralKernel]

    @classmethod
    def for_state(cls, state: ModelState, spec: GridSpec) -> "KernelSet":
        return cls([cached_kernel(spec, float(p)) for p in state.phi],
                   [cached_kernel(spec, float(p)) for p in state.phi0])


@dataclass
class Diagnostics:
    """Counters collected while evaluating the model and sampling."""

    clipped_exp: int = 0
    nonfinite_hamiltonian: int = 0
    out_of_support: dict = field(default_factory=dict)

    def bump_support(self, name: str) -> None:
        self.out_of_support[name] = self.out_of_support.get(name, 0) + 1


def latent_components(state: ModelState, kernels: KernelSet):
    """``(C_j^{1/2} gamma_j, C_0k^{1/2} gamma_0k)`` stacked as arrays."""
    u = np.stack([sqrt_matvec(kern, g) for kern, g in zip(kernels.type_kernels, state.gamma_type)])
    if state.K:
        s = np.stack([sqrt_matvec(kern, g)
                      for kern, g in zip(kernels.shared_kernels, state.gamma_shared)])
    else:
        s = np.zeros((0,) + u.shape[1:])
    return u, s


def reconstruct_Y(state: ModelState, kernels: KernelSet) -> np.ndarray:
    """Log-intensity fields, shape ``(J, Me, Ne)``."""
    u, s = latent_components(state, kernels)
    return (state.m[:, None, None] + state.sigma[:, None, None] * u
            + np.einsum("jk,kab->jab", state.alpha, s))


def guarded_exp(Y, diag: Diagnostics | None = None):
    over = Y > Y_CLIP
    if over.any():
        if diag is not None:
            diag.clipped_exp += int(over.sum())
        Y = np.minimum(Y, Y_CLIP)
    return np.exp(Y)


def log_likelihood(Y, data: GriddedData, diag: Diagnostics | None = None) -> float:
    """Gridded Poisson log-likelihood without the ``log n!`` term."""
    M, N = data.spec.M, data.spec.N
    Yi = np.asarray(Y)[:, :M, :N]
    n = data.interior_counts
    A = data.interior_areas
    ll = float(np.sum(n * Yi) - np.sum(A * guarded_exp(Yi, diag)))
    if not math.isfinite(ll):
        raise NonFiniteError("likelihood", ll)
    return ll


def log_prior_parts(state: ModelState, hyper: Hyperparams) -> dict:
    """Log prior density split by block (normalising constants included)."""
    parts = {}
    g2 = float(np.sum(state.gamma_type ** 2))
    n_g = state.gamma_type.size
    if state.K:
        g2 += float(np.sum(state.gamma_shared ** 2))
        n_g += state.gamma_shared.size
    parts["gamma"] = -0.5 * g2 - 0.5 * n_g * LOG_2PI

    if math.isinf(hyper.h_m):
        parts["m"] = 0.0
    else:
        parts["m"] = float(np.sum(-0.5 * (state.m - hyper.mu_m) ** 2 / hyper.h_m
                                  - 0.5 * math.log(2 * math.pi * hyper.h_m)))
    a, b = hyper.a_sigma, hyper.b_sigma
    with np.errstate(divide="ignore"):
        parts["sigma"] = float(np.sum(a * math.log(b) - gammaln(a)
                                      + (a - 1) * np.log(state.sigma) - b * state.sigma))
    parts["phi"] = _log_uniform(np.log(state.phi), hyper.l_phi, hyper.u_phi)
    parts["phi0"] = _log_uniform(np.log(state.phi0), hyper.l_phi0, hyper.u_phi0)

    if state.K == 0:
        parts["alpha"] = 0.0
    elif hyper.lasso:
        var = hyper.h_alpha * state.tau2
        parts["alpha"] = float(np.sum(-0.5 * state.alpha ** 2 / var - 0.5 * np.log(2 * math.pi * var)))
        lam2 = state.lambda2
        # tau2 ~ Gamma(1, rate=lambda2); lambda2 ~ Gamma(a, rate=b)
        parts["tau2"] = float(np.sum(math.log(lam2) - lam2 * state.tau2))
    else:
        var = hyper.h_alpha
        parts["alpha"] = float(np.sum(-0.5 * state.alpha ** 2 / var - 0.5 * math.log(2 * math.pi * var)))
    if hyper.lasso and state.lambda2 is not None:
        al, bl = hyper.a_lambda, hyper.b_lambda
        parts["lambda2"] = (al * math.log(bl) - math.lgamma(al)
                            + (al - 1) * math.log(state.lambda2) - bl * state.lambda2)
    return parts


def _log_uniform(x, lo, hi) -> float:
    x = np.asarray(x)
    if x.size == 0:
        return 0.0
    if ((x < lo) | (x > hi)).any():
        return -math.inf
    return -x.size * math.log(hi - lo)


def log_prior(state: ModelState, hyper: Hyperparams) -> float:
    return sum(log_prior_parts(state, hyper).values())


def log_posterior(state: ModelState, data: GriddedData, hyper: Hyperparams,
                  kernels: KernelSet | None = None, diag: Diagnostics | None = None) -> float:
    """Unnormalised log posterior; raises :class:`NonFiniteError` on inf/nan."""
    if kernels is None:
        kernels = KernelSet.for_state(state, data.spec)
    total = log_likelihood(reconstruct_Y(state, kernels), data, diag)
    for name, v in log_prior_parts(state, hyper).items():
        if not math.isfinite(v):
            raise NonFiniteError(name, v)
        total += v
    return total


def grad_gamma(state: ModelState, data: GriddedData, hyper: Hyperparams,
               kernels: KernelSet, block: tuple[str, int],
               diag: Diagnostics | None = None) -> np.ndarray:
    """Gradient of the log posterior with respect to one latent field.

    ``block`` is ``("type", j)`` or ``("shared", k)``. Uses the
    self-adjointness of the square-root operator.
    """
    kind, idx = block
    Y = reconstruct_Y(state, kernels)
    resid = data.counts - data.areas * guarded_exp(Y, diag)
    if kind == "type":
        g = state.sigma[idx] * sqrt_matvec(kernels.type_kernels[idx], resid[idx])
        g -= state.gamma_type[idx]
    elif kind == "shared":
        combo = np.einsum("j,jab->ab", state.alpha[:, idx], resid)
        g = sqrt_matvec(kernels.shared_kernels[idx], combo) - state.gamma_shared[idx]
    else:
        raise ValueError(f"unknown block kind {kind!r}")
    if not np.isfinite(g).all():
        raise NonFiniteError(f"{kind}[{idx}]")
    return g


def intensity_rho(state: ModelState, j: int) -> float:
    """Marginal intensity of type ``j``."""
    return math.exp(state.m[j] + 0.5 * state.sigma[j] ** 2 + 0.5 * float(np.sum(state.alpha[j] ** 2)))


def m_for_expected_count(expected_count, area, sigma, alpha) -> np.ndarray:
    """Mean log-intensity giving ``expected_count`` points per type in ``area``."""
    sigma = np.asarray(sigma, dtype=float)
    alpha = np.asarray(alpha, dtype=float).reshape(sigma.size, -1)
    return (np.log(np.asarray(expected_count, dtype=float) / area)
            - 0.5 * sigma ** 2 - 0.5 * np.sum(alpha ** 2, axis=1))
