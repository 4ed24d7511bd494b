"""MCMC for the multivariate LGCP.

One sweep updates every latent field by HMC (one block at a time), then the
scalar parameters by Metropolis-Hastings (``m``, ``sigma``, ``phi``,
``phi0``, ``alpha``) and, under the lasso prior, ``tau2`` and ``lambda2`` by
exact Gibbs draws. Step sizes adapt only during burn-in.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, NamedTuple

import numpy as np
from scipy.special import expit

from . import _fft
from .fftfield import EmbeddingError, build_kernel
from .model import (Diagnostics, Hyperparams, KernelSet, ModelState, NonFiniteError,
                    guarded_exp, log_prior_parts)
from .pattern import GriddedData, GridSpec, Window

log = logging.getLogger(__name__)


class SamplerError(RuntimeError):
    """The chain hit a non-finite log posterior; carries the last good state."""

    def __init__(self, msg, last_good_state=None, iteration=None):
        super().__init__(msg)
        self.last_good_state = last_good_state
        self.iteration = iteration


@dataclass
class SamplerConfig:
    n_iter: int = 2000
    burn_in: int = 1000
    thin: int = 1
    hmc_leapfrog_steps: int = 10
    hmc_target_accept: float = 0.65
    mh_target_accept: float = 0.44
    seed: int = 0
    hmc_initial_step: float = 0.1
    #: relative uniform jitter applied to each HMC step size
    hmc_step_jitter: float = 0.2
    store_fields: bool = True
    store_latent: bool = False

    def __post_init__(self):
        if not 0 <= self.burn_in < self.n_iter:
            raise ValueError("need 0 <= burn_in < n_iter")
        if self.thin < 1:
            raise ValueError("thin must be >= 1")
        if self.hmc_leapfrog_steps < 1:
            raise ValueError("need at least one leapfrog step")
        for name in ("hmc_target_accept", "mh_target_accept"):
            if not 0 < getattr(self, name) < 1:
                raise ValueError(f"{name} must lie in (0, 1)")

    @property
    def n_kept(self) -> int:
        return (self.n_iter - self.burn_in) // self.thin


# ---------------------------------------------------------------------------
# chain state with cached spectral quantities


class Chain:
    """Current state plus cached fields used by the updates.

    ``G_type``/``G_shared`` are half-spectrum FFTs of the latent fields,
    ``u``/``s`` the correlated fields ``C^{1/2} gamma`` on the extended grid
    and ``Y`` the interior log-intensities ``(J, M, N)``.
    """

    def __init__(self, data: GriddedData, hyper: Hyperparams, state: ModelState):
        if state.J != data.J:
            raise ValueError(f"state has J={state.J}, data has J={data.J}")
        self.data = data
        self.hyper = hyper
        self.state = state
        self.spec = data.spec
        self.n = data.interior_counts.astype(float)
        self.A = np.array(data.interior_areas, dtype=float)
        self.diag = Diagnostics()
        self.refresh()

    def refresh(self) -> None:
        st, shape = self.state, self.spec.shape
        self.kernels = KernelSet.for_state(st, self.spec)
        self.G_type = _fft.rfft2(st.gamma_type)
        self.u = _fft.irfft2(self._sqrt_stack(self.kernels.type_kernels) * self.G_type, shape)
        if st.K:
            self.G_shared = _fft.rfft2(st.gamma_shared)
            self.s = _fft.irfft2(self._sqrt_stack(self.kernels.shared_kernels) * self.G_shared,
                                 shape)
        else:
            nh = self.spec.Ne // 2 + 1
            self.G_shared = np.zeros((0, self.spec.Me, nh), dtype=complex)
            self.s = np.zeros((0,) + shape)
        self.recompute_Y()

    def _sqrt_stack(self, kernels):
        return np.stack([k.sqrt_half for k in kernels])

    def recompute_Y(self) -> None:
        M, N = self.spec.M, self.spec.N
        st = self.state
        self.Y = (st.m[:, None, None] + st.sigma[:, None, None] * self.u[:, :M, :N]
                  + np.einsum("jk,kab->jab", st.alpha, self.s[:, :M, :N]))

    def full_Y(self) -> np.ndarray:
        st = self.state
        return (st.m[:, None, None] + st.sigma[:, None, None] * self.u
                + np.einsum("jk,kab->jab", st.alpha, self.s))

    def log_likelihood(self) -> float:
        return float(np.sum(self.n * self.Y) - np.sum(self.A * guarded_exp(self.Y, self.diag)))

    def log_posterior(self) -> float:
        total = self.log_likelihood()
        for name, v in log_prior_parts(self.state, self.hyper).items():
            if not math.isfinite(v):
                raise NonFiniteError(name, v)
            total += v
        if not math.isfinite(total):
            raise NonFiniteError("likelihood", total)
        return total


def initial_state(data: GriddedData, hyper: Hyperparams, K: int,
                  rng: np.random.Generator) -> ModelState:
    """Starting point: prior-centre scalars, small loadings, prior-drawn fields."""
    J = data.J
    if K > J:
        raise ValueError(f"K={K} exceeds J={J}")
    shape = data.spec.shape
    sigma = np.full(J, hyper.a_sigma / hyper.b_sigma)
    phi = np.full(J, math.exp(0.5 * (hyper.l_phi + hyper.u_phi)))
    phi0 = np.full(K, math.exp(0.5 * (hyper.l_phi0 + hyper.u_phi0)))
    alpha = 0.1 * rng.standard_normal((J, K))
    area = data.observed_area
    if area > 0:
        G = data.counts.sum(axis=(1, 2))
        m = (np.log(np.maximum(G, 0.5) / area) - 0.5 * sigma ** 2
             - 0.5 * np.sum(alpha ** 2, axis=1))
    else:
        m = np.full(J, hyper.mu_m)
    gamma_type = rng.standard_normal((J,) + shape)
    gamma_shared = rng.standard_normal((K,) + shape)
    tau2 = np.ones((J, K)) if hyper.lasso else None
    lambda2 = 1.0 if hyper.lasso else None
    return ModelState(m, sigma, phi, phi0, alpha, gamma_type, gamma_shared, tau2, lambda2)


# ---------------------------------------------------------------------------
# HMC for the latent fields


class HMCResult(NamedTuple):
    accepted: bool
    accept_prob: float
    delta_H: float


def _half_norm2(X, Ne):
    """Squared l2 norm of a real field from its half spectrum (Parseval)."""
    # interior columns stand for two conjugate columns of the full spectrum
    total = 2.0 * np.vdot(X, X).real - np.vdot(X[:, 0], X[:, 0]).real
    if Ne % 2 == 0:
        total -= np.vdot(X[:, -1], X[:, -1]).real
    return float(total) / (X.shape[-2] * Ne)


class BlockTarget:
    """Log conditional of one latent field, evaluated in the Fourier domain.

    Only the types whose log-intensity depends on the block enter the
    likelihood: type ``j`` for its own field, types with a non-zero loading
    for a shared field.
    """

    def __init__(self, chain: Chain, block: tuple[str, int]):
        st, spec = chain.state, chain.spec
        kind, idx = block
        if kind == "type":
            self.kernel = chain.kernels.type_kernels[idx]
            self.gamma, self.G, self.fields = st.gamma_type, chain.G_type, chain.u
            coef = np.zeros(st.J)
            coef[idx] = st.sigma[idx]
        elif kind == "shared":
            self.kernel = chain.kernels.shared_kernels[idx]
            self.gamma, self.G, self.fields = st.gamma_shared, chain.G_shared, chain.s
            coef = st.alpha[:, idx]
        else:
            raise ValueError(f"unknown block kind {kind!r}")
        self.chain, self.idx = chain, idx
        self.M, self.N, self.shape = spec.M, spec.N, spec.shape
        self.types = np.flatnonzero(coef)
        self.weights = coef[self.types]
        c = self.weights[:, None, None]
        n = chain.n[self.types]
        base = chain.Y[self.types] - c * self.fields[idx][: self.M, : self.N]
        if self.types.size == 1:
            # common case (type blocks): work on 2-d arrays
            c, n, base = c.item(), n[0], base[0]
        self.c, self.n, self.base = c, n, base
        self.sq = self.kernel.sqrt_half

    @property
    def coupled(self) -> bool:
        return self.types.size > 0

    def gradient(self, Gh):
        """Gradient (half spectrum), the correlated field and interior log-intensities."""
        if not self.coupled:
            return -Gh, None, None
        f = _fft.filtered_irfft2(self.sq, Gh, self.shape)
        Y = self.base + self.c * f[: self.M, : self.N]
        resid = self.n - self.chain.A * np.exp(Y)
        r = self.c * resid if resid.ndim == 2 else np.tensordot(self.weights, resid, axes=1)
        return self.sq * _fft.rfft2(r, s=self.shape) - Gh, f, Y

    def loglik(self, Y) -> float:
        if not self.coupled:
            return 0.0
        return float(np.vdot(self.n, Y)
                     - np.sum(self.chain.A * guarded_exp(Y, self.chain.diag)))


def hmc_update(chain: Chain, block: tuple[str, int], step_size: float,
               n_leapfrog: int, rng: np.random.Generator) -> HMCResult:
    """One HMC transition for a single latent field, identity mass matrix.

    The leapfrog runs in the Fourier domain, where the correlation square
    root is diagonal, so each step costs one forward and one inverse FFT.
    """
    tgt = BlockTarget(chain, block)
    shape, idx = tgt.shape, tgt.idx
    if step_size == 0:
        # degenerate leapfrog: the proposal is the current point
        rng.standard_normal(shape)
        return HMCResult(True, 1.0, 0.0)

    G0 = tgt.G[idx]
    p0 = rng.standard_normal(shape)
    Gn = G0.copy()
    gamma = tgt.gamma[idx]
    with np.errstate(over="ignore", invalid="ignore"):
        grad, _, Y0 = tgt.gradient(G0)
        H0 = -tgt.loglik(Y0) + 0.5 * float(np.vdot(gamma, gamma)) + 0.5 * float(np.vdot(p0, p0))

        Pn = _fft.rfft2(p0) + 0.5 * step_size * grad
        for step in range(n_leapfrog):
            Gn += step_size * Pn
            grad, f, Y = tgt.gradient(Gn)
            if step < n_leapfrog - 1:
                Pn += step_size * grad
        Pn += 0.5 * step_size * grad
        Ne = chain.spec.Ne
        H1 = -tgt.loglik(Y) + 0.5 * _half_norm2(Gn, Ne) + 0.5 * _half_norm2(Pn, Ne)

    if not math.isfinite(H1):
        chain.diag.nonfinite_hamiltonian += 1
        return HMCResult(False, 0.0, math.inf)
    dH = H1 - H0
    accept_prob = math.exp(min(0.0, -dH))
    if rng.uniform() >= accept_prob:
        return HMCResult(False, accept_prob, dH)

    new_gamma = _fft.irfft2(Gn, shape)
    tgt.gamma[idx] = new_gamma
    tgt.G[idx] = _fft.rfft2(new_gamma)
    if tgt.coupled:
        tgt.fields[idx] = f
        chain.Y[tgt.types] = Y
    else:
        tgt.fields[idx] = _fft.filtered_irfft2(tgt.sq, tgt.G[idx], shape)
    return HMCResult(True, accept_prob, dH)


class DualAveraging:
    """Step-size adaptation targeting a mean acceptance probability."""

    def __init__(self, step0: float, target: float, gamma: float = 0.05,
                 t0: float = 10.0, kappa: float = 0.75):
        self.mu = math.log(10 * step0)
        self.target = target
        self.gamma, self.t0, self.kappa = gamma, t0, kappa
        self.t = 0
        self.hbar = 0.0
        self.log_step = math.log(step0)
        self.log_step_bar = 0.0

    def update(self, accept_prob: float) -> float:
        self.t += 1
        t = self.t
        w = 1.0 / (t + self.t0)
        self.hbar = (1 - w) * self.hbar + w * (self.target - accept_prob)
        self.log_step = self.mu - math.sqrt(t) / self.gamma * self.hbar
        eta = t ** -self.kappa
        self.log_step_bar = eta * self.log_step + (1 - eta) * self.log_step_bar
        return math.exp(self.log_step)

    @property
    def final_step(self) -> float:
        return math.exp(self.log_step_bar) if self.t else math.exp(self.log_step)


# ---------------------------------------------------------------------------
# Metropolis-Hastings for scalar parameters


@dataclass
class ProposalScale:
    """Scale state for one scalar parameter.

    When the log conditional has negative curvature ``H`` at the current
    point the proposal sd is ``hess_mult / sqrt(-H)``; otherwise it is
    ``rw_sd``. Both multipliers are tuned by Robbins-Monro during burn-in.
    """

    hess_mult: float = 2.4
    rw_sd: float = 0.1
    n_prop: int = 0
    n_acc: int = 0

    def sd(self, hess) -> tuple[float, str]:
        if hess is not None and math.isfinite(hess) and hess < 0:
            return self.hess_mult / math.sqrt(-hess), "hess"
        return self.rw_sd, "rw"

    def adapt(self, route: str, accept_prob: float, t: int, target: float) -> None:
        gain = (t + 1) ** -0.6
        factor = math.exp(gain * (accept_prob - target))
        if route == "hess":
            self.hess_mult = min(max(self.hess_mult * factor, 1e-3), 1e3)
        else:
            self.rw_sd = min(max(self.rw_sd * factor, 1e-8), 1e8)

    @property
    def accept_rate(self) -> float:
        return self.n_acc / self.n_prop if self.n_prop else float("nan")


class MHResult(NamedTuple):
    value: float
    accepted: bool
    accept_prob: float
    route: str
    payload: object
    in_support: bool


#: a log target returns (log density, curvature or None, payload); None log
#: density marks a point outside the support
ScalarTarget = Callable[[float], tuple]


def _norm_logpdf(x, mean, sd):
    return -0.5 * ((x - mean) / sd) ** 2 - math.log(sd)


def scalar_mh(x: float, target: ScalarTarget, scale: ProposalScale,
              rng: np.random.Generator, current=None) -> MHResult:
    """Metropolis-Hastings step with a curvature-scaled normal proposal.

    The proposal sd depends on the point it is drawn from, so the reverse
    density is evaluated with the curvature at the proposed point.
    """
    with np.errstate(over="ignore", invalid="ignore"):
        lp0, h0, _ = current if current is not None else target(x)
        sd0, route = scale.sd(h0)
        x1 = x + sd0 * rng.standard_normal()
        u = rng.uniform()
        # far-out proposals may overflow; they end up rejected below
        lp1, h1, payload = target(x1)
    if lp1 is None:
        return MHResult(x, False, 0.0, route, None, False)
    sd1, _ = scale.sd(h1)
    log_r = lp1 - lp0 + _norm_logpdf(x, x1, sd1) - _norm_logpdf(x1, x, sd0)
    if not math.isfinite(log_r):
        return MHResult(x, False, 0.0, route, None, True)
    accept_prob = math.exp(min(0.0, log_r))
    if u < accept_prob:
        return MHResult(x1, True, accept_prob, route, payload, True)
    return MHResult(x, False, accept_prob, route, None, True)


def _type_terms(chain, j, Y):
    lam = chain.A * guarded_exp(Y, chain.diag)
    return float(np.sum(chain.n[j] * Y) - np.sum(lam)), lam


def _bounded(hyper, name):
    return (hyper.l_phi, hyper.u_phi) if name == "phi" else (hyper.l_phi0, hyper.u_phi0)


def to_unbounded(log_phi: float, lo: float, hi: float) -> float:
    p = (log_phi - lo) / (hi - lo)
    return math.log(p) - math.log1p(-p)


def make_target(chain: Chain, param: tuple) -> tuple[float, ScalarTarget]:
    """Current transformed value and log conditional for ``param``.

    ``param`` is ``("m", j)``, ``("sigma", j)``, ``("alpha", j, k)``,
    ``("phi", j)`` or ``("phi0", k)``. Transformed scales: identity for
    ``m`` and ``alpha``, log for ``sigma``, logit of the position of
    ``log phi`` inside its prior bounds for ranges (Jacobians included).
    """
    st, hyper = chain.state, chain.hyper
    M, N, shape = chain.spec.M, chain.spec.N, chain.spec.shape
    name = param[0]

    if name == "m":
        j = param[1]
        m0, Y0 = st.m[j], chain.Y[j]
        flat = math.isinf(hyper.h_m)

        def target(x):
            Y = Y0 + (x - m0)
            ll, lam = _type_terms(chain, j, Y)
            lp = ll if flat else ll - 0.5 * (x - hyper.mu_m) ** 2 / hyper.h_m
            hess = -float(lam.sum()) - (0.0 if flat else 1.0 / hyper.h_m)
            return lp, hess, Y

        return m0, target

    if name == "sigma":
        j = param[1]
        s0, Y0, uj = st.sigma[j], chain.Y[j], chain.u[j][:M, :N]
        a, b = hyper.a_sigma, hyper.b_sigma

        def target(x):
            sig = math.exp(x)
            Y = Y0 + (sig - s0) * uj
            ll, lam = _type_terms(chain, j, Y)
            su = sig * uj
            d1 = float(np.sum((chain.n[j] - lam) * su))
            d2 = d1 - float(np.sum(lam * su * su))
            return ll + a * x - b * sig, d2 - b * sig, Y

        return math.log(s0), target

    if name == "alpha":
        j, k = param[1], param[2]
        a0, Y0, sk = st.alpha[j, k], chain.Y[j], chain.s[k][:M, :N]
        var = hyper.h_alpha * (st.tau2[j, k] if hyper.lasso else 1.0)

        def target(x):
            Y = Y0 + (x - a0) * sk
            ll, lam = _type_terms(chain, j, Y)
            return ll - 0.5 * x * x / var, -float(np.sum(lam * sk * sk)) - 1.0 / var, Y

        return a0, target

    if name in ("phi", "phi0"):
        i = param[1]
        lo, hi = _bounded(hyper, name)
        if name == "phi":
            cur, Gh = st.phi[i], chain.G_type[i]
            old = chain.u[i][:M, :N]
            coef = np.zeros(st.J)
            coef[i] = st.sigma[i]
        else:
            cur, Gh = st.phi0[i], chain.G_shared[i]
            old = chain.s[i][:M, :N]
            coef = st.alpha[:, i]
        types = np.flatnonzero(coef)
        c = coef[types][:, None, None]
        Y0 = chain.Y[types]
        n = chain.n[types]

        def target(x):
            p = float(expit(x))
            if not 0.0 < p < 1.0:
                return None, None, None
            phi = math.exp(lo + (hi - lo) * p)
            try:
                kern = build_kernel(chain.spec, phi)
            except EmbeddingError:
                return None, None, None
            f = _fft.filtered_irfft2(kern.sqrt_half, Gh, shape)
            Y = Y0 + c * (f[:M, :N] - old)
            lam = chain.A * guarded_exp(Y, chain.diag)
            ll = float(np.sum(n * Y) - np.sum(lam))
            log_jac = math.log(hi - lo) + math.log(p) + math.log1p(-p)
            return ll + log_jac, None, (phi, kern, f, Y)

        x0 = to_unbounded(math.log(cur), lo, hi)
        # the current point needs no new kernel: reuse the cached fields
        p0 = float(expit(x0))
        ll0 = float(np.sum(n * Y0) - np.sum(chain.A * guarded_exp(Y0, chain.diag)))
        target.current = (ll0 + math.log(hi - lo) + math.log(p0) + math.log1p(-p0), None, None)
        return x0, target

    raise ValueError(f"unknown parameter {param!r}")


def _commit(chain: Chain, param: tuple, x: float, payload) -> None:
    st = chain.state
    name = param[0]
    if name == "m":
        st.m[param[1]] = x
        chain.Y[param[1]] = payload
    elif name == "sigma":
        st.sigma[param[1]] = math.exp(x)
        chain.Y[param[1]] = payload
    elif name == "alpha":
        j, k = param[1], param[2]
        st.alpha[j, k] = x
        chain.Y[j] = payload
    else:
        i = param[1]
        phi, kern, f, Y = payload
        if name == "phi":
            st.phi[i] = phi
            chain.kernels.type_kernels[i] = kern
            chain.u[i] = f
            types = [i] if st.sigma[i] != 0 else []
        else:
            st.phi0[i] = phi
            chain.kernels.shared_kernels[i] = kern
            chain.s[i] = f
            types = np.flatnonzero(st.alpha[:, i])
        chain.Y[types] = Y


def numerical_curvature(target: ScalarTarget, x: float, h: float = 0.05):
    """Central second difference of a scalar log target, or None."""
    f0 = target(x)[0]
    fp = target(x + h)[0]
    fm = target(x - h)[0]
    if f0 is None or fp is None or fm is None:
        return None
    return (fp - 2 * f0 + fm) / (h * h)


def mh_update(chain: Chain, param: tuple, scale: ProposalScale,
              rng: np.random.Generator) -> MHResult:
    """One MH step for a scalar parameter; updates ``chain`` in place."""
    x, target = make_target(chain, param)
    res = scalar_mh(x, target, scale, rng, current=getattr(target, "current", None))
    scale.n_prop += 1
    if not res.in_support:
        chain.diag.bump_support(param[0])
    if res.accepted:
        scale.n_acc += 1
        _commit(chain, param, res.value, res.payload)
    return res


def gibbs_tau2(state: ModelState, hyper: Hyperparams, rng: np.random.Generator) -> ModelState:
    """Exact draws of the lasso mixing variances and the shrinkage rate.

    ``1/tau2`` given ``alpha != 0`` is inverse Gaussian with mean
    ``sqrt(2 lambda2 h) / |alpha|`` and shape ``2 lambda2``; at
    ``alpha == 0`` it reduces to ``tau2 ~ Gamma(1/2, rate=lambda2)``.
    """
    if not hyper.lasso:
        raise ValueError("tau2/lambda2 exist only under the lasso prior")
    lam2 = state.lambda2
    a = np.abs(state.alpha)
    if a.size:
        nz = a > 0
        tau2 = np.empty_like(a)
        if nz.any():
            inv = rng.wald(math.sqrt(2 * lam2 * hyper.h_alpha) / a[nz], 2 * lam2)
            tau2[nz] = 1.0 / inv
        if (~nz).any():
            tau2[~nz] = rng.gamma(0.5, 1.0 / lam2, size=int((~nz).sum()))
        state.tau2 = tau2
    state.lambda2 = float(rng.gamma(hyper.a_lambda + a.size,
                                    1.0 / (hyper.b_lambda + float(np.sum(state.tau2)))))
    return state


def lambda2_conditional(hyper: Hyperparams, tau2) -> tuple[float, float]:
    """(shape, rate) of the Gamma full conditional of ``lambda2``."""
    tau2 = np.asarray(tau2)
    return hyper.a_lambda + tau2.size, hyper.b_lambda + float(tau2.sum())


# ---------------------------------------------------------------------------
# chain orchestration


@dataclass
class PosteriorArchive:
    types: tuple
    K: int
    spec: GridSpec
    hyper: Hyperparams
    config: SamplerConfig
    states: list
    kept_iterations: list
    logpost_trace: np.ndarray
    accept_rates: dict
    Y_samples: np.ndarray | None = None
    step_sizes: dict = field(default_factory=dict)
    diagnostics: dict = field(default_factory=dict)
    flags: list = field(default_factory=list)

    @property
    def J(self) -> int:
        return len(self.types)

    @property
    def R(self) -> int:
        return len(self.states)

    def trace(self, name: str) -> np.ndarray:
        return np.array([s.scalars()[name] for s in self.states])


def parameter_list(J: int, K: int) -> list:
    return ([("m", j) for j in range(J)] + [("sigma", j) for j in range(J)]
            + [("phi", j) for j in range(J)] + [("phi0", k) for k in range(K)]
            + [("alpha", j, k) for j in range(J) for k in range(K)])


def param_label(param) -> str:
    return f"{param[0]}[{','.join(str(i) for i in param[1:])}]"


def _refresh_range_scale(chain, param, scale):
    x, target = make_target(chain, param)
    h = numerical_curvature(target, x)
    if h is not None and h < 0:
        scale.rw_sd = min(2.4 / math.sqrt(-h), 5.0)


def run_chain(data: GriddedData, hyper: Hyperparams, K: int, config: SamplerConfig,
              init: ModelState | None = None,
              on_draw: Callable[[np.ndarray], None] | None = None) -> PosteriorArchive:
    """Run one chain and return the thinned archive.

    ``on_draw`` is called with the full log-intensity ``(J, Me, Ne)`` at
    every kept iteration, e.g. to accumulate DIC without storing fields.
    """
    J = data.J
    if K > J:
        raise ValueError(f"K={K} exceeds the number of types J={J}")
    rng = np.random.default_rng(config.seed)
    state = init.copy() if init is not None else initial_state(data, hyper, K, rng)
    chain = Chain(data, hyper, state)

    blocks = [("type", j) for j in range(J)] + [("shared", k) for k in range(K)]
    steps = {b: config.hmc_initial_step for b in blocks}
    adapters = {b: DualAveraging(config.hmc_initial_step, config.hmc_target_accept) for b in blocks}
    hmc_acc = {b: 0 for b in blocks}
    params = parameter_list(J, K)
    scales = {p: ProposalScale(rw_sd=0.3 if p[0] in ("phi", "phi0") else 0.1) for p in params}
    range_params = [p for p in params if p[0] in ("phi", "phi0")]

    n_kept = config.n_kept
    shape = data.spec.shape
    Y_samples = np.empty((n_kept, J) + shape) if config.store_fields else None
    states, kept = [], []
    trace = np.empty(config.n_iter)
    jit = config.hmc_step_jitter
    last_good = chain.state.copy(latent=False)

    for t in range(config.n_iter):
        adapting = t < config.burn_in
        for b in blocks:
            eps = steps[b] * (1.0 + jit * (2.0 * rng.uniform() - 1.0))
            res = hmc_update(chain, b, eps, config.hmc_leapfrog_steps, rng)
            if adapting:
                steps[b] = adapters[b].update(res.accept_prob)
            else:
                hmc_acc[b] += res.accepted

        if adapting and t % 100 == 0 and t < max(config.burn_in // 2, 1):
            for p in range_params:
                _refresh_range_scale(chain, p, scales[p])
        if t == config.burn_in:
            for sc in scales.values():
                sc.n_prop = sc.n_acc = 0
        for p in params:
            res = mh_update(chain, p, scales[p], rng)
            if adapting:
                scales[p].adapt(res.route, res.accept_prob, t, config.mh_target_accept)
        if hyper.lasso:
            gibbs_tau2(chain.state, hyper, rng)

        try:
            lp = chain.log_posterior()
        except NonFiniteError as exc:
            raise SamplerError(f"iteration {t}: {exc}", last_good, t) from exc
        trace[t] = lp
        last_good = chain.state.copy(latent=False)

        if t == config.burn_in - 1:
            for b in blocks:
                steps[b] = adapters[b].final_step
        if not adapting and (t - config.burn_in + 1) % config.thin == 0:
            r = len(states)
            if r < n_kept:
                states.append(chain.state.copy(latent=config.store_latent))
                kept.append(t)
                if Y_samples is not None or on_draw is not None:
                    Y = chain.full_Y()
                    if Y_samples is not None:
                        Y_samples[r] = Y
                    if on_draw is not None:
                        on_draw(Y)

    n_post = config.n_iter - config.burn_in
    accept = {f"hmc:{b[0]}[{b[1]}]": hmc_acc[b] / n_post for b in blocks}
    for p in params:
        accept[f"mh:{param_label(p)}"] = scales[p].accept_rate
    flags = _acceptance_flags(accept, config)
    diag = asdict(chain.diag)
    diag["embedding_clamped"] = {
        "type": [k.n_clamped for k in chain.kernels.type_kernels],
        "shared": [k.n_clamped for k in chain.kernels.shared_kernels]}
    return PosteriorArchive(
        types=data.types, K=K, spec=data.spec, hyper=hyper, config=config,
        states=states, kept_iterations=kept, logpost_trace=trace, accept_rates=accept,
        Y_samples=Y_samples,
        step_sizes={f"{b[0]}[{b[1]}]": steps[b] for b in blocks},
        diagnostics=diag, flags=flags)


def _acceptance_flags(accept: dict, config: SamplerConfig) -> list:
    flags = []
    for k, v in accept.items():
        if not math.isfinite(v):
            continue
        if k.startswith("hmc:") and v < config.hmc_target_accept - 0.15:
            flags.append(f"{k} acceptance {v:.3f} below {config.hmc_target_accept - 0.15:.2f}")
        if k.startswith("mh:") and not 0.1 <= v <= 0.7:
            flags.append(f"{k} acceptance {v:.3f} outside [0.1, 0.7]")
    for f in flags:
        log.warning("acceptance flag: %s", f)
    return flags


# ---------------------------------------------------------------------------
# convergence diagnostics


def autocorrelation(x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    n = x.size
    x = x - x.mean()
    nfft = 1 << (2 * n - 1).bit_length()
    f = np.fft.rfft(x, nfft)
    ac = np.fft.irfft(f * np.conj(f), nfft)[:n]
    return ac / ac[0] if ac[0] > 0 else np.ones(n)


def effective_sample_size(x) -> float:
    """ESS via Geyer's initial monotone sequence estimator."""
    x = np.asarray(x, dtype=float)
    n = x.size
    if n < 4 or np.ptp(x) == 0:
        return float(n)
    rho = autocorrelation(x)
    pairs = rho[: n - 1 - (n - 1) % 2].reshape(-1, 2).sum(axis=1)
    tau = -1.0
    prev = math.inf
    for p in pairs:
        if p <= 0:
            break
        p = min(p, prev)
        tau += 2 * p
        prev = p
    return float(n / max(tau, 1e-12))


def mc_standard_error(x) -> float:
    x = np.asarray(x, dtype=float)
    return float(np.std(x, ddof=1) / math.sqrt(effective_sample_size(x)))


# ---------------------------------------------------------------------------
# persistence


def _f(v) -> str:
    return repr(float(v))


def save_archive(archive: PosteriorArchive, directory) -> Path:
    """Write ``meta.json``, ``trace.csv``, ``logpost.csv`` and ``fields/``."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    spec = archive.spec
    meta = {
        "types": list(archive.types),
        "K": archive.K,
        "grid": {"window": asdict(spec.window), "M": spec.M, "N": spec.N,
                 "Me": spec.Me, "Ne": spec.Ne},
        "hyper": asdict(archive.hyper),
        "config": asdict(archive.config),
        "n_kept": archive.R,
        "accept_rates": archive.accept_rates,
        "step_sizes": archive.step_sizes,
        "diagnostics": archive.diagnostics,
        "flags": archive.flags,
        "fields_layout": "little-endian float64, row-major (Me, Ne, J)",
    }
    with open(d / "meta.json", "w") as fh:
        json.dump(_jsonable(meta), fh, indent=2, sort_keys=True)
        fh.write("\n")
    names = list(archive.states[0].scalars()) if archive.states else []
    with open(d / "trace.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["iteration"] + names)
        for it, s in zip(archive.kept_iterations, archive.states):
            vals = s.scalars()
            w.writerow([it] + [_f(vals[n]) for n in names])
    with open(d / "logpost.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["iteration", "logpost"])
        for it, v in enumerate(archive.logpost_trace):
            w.writerow([it, _f(v)])
    if archive.Y_samples is not None:
        fd = d / "fields"
        fd.mkdir(exist_ok=True)
        for r, it in enumerate(archive.kept_iterations):
            arr = np.ascontiguousarray(np.moveaxis(archive.Y_samples[r], 0, -1), dtype="<f8")
            arr.tofile(fd / f"{it:08d}.bin")
    return d


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else None
    return obj


def load_archive(directory, load_fields: bool = True) -> PosteriorArchive:
    d = Path(directory)
    with open(d / "meta.json") as fh:
        meta = json.load(fh)
    g = meta["grid"]
    spec = GridSpec(Window(**g["window"]), g["M"], g["N"], g["Me"], g["Ne"])
    J, K = len(meta["types"]), meta["K"]
    states, kept = [], []
    with open(d / "trace.csv", newline="") as fh:
        reader = csv.DictReader(fh)
        for row in reader:
            kept.append(int(row.pop("iteration")))
            states.append(ModelState.from_scalars({k: float(v) for k, v in row.items()}, J, K))
    logpost = np.loadtxt(d / "logpost.csv", delimiter=",", skiprows=1, ndmin=2)[:, 1]
    Y = None
    fd = d / "fields"
    if load_fields and fd.is_dir():
        Y = np.empty((len(kept), J, spec.Me, spec.Ne))
        for r, it in enumerate(kept):
            arr = np.fromfile(fd / f"{it:08d}.bin", dtype="<f8").reshape(spec.Me, spec.Ne, J)
            Y[r] = np.moveaxis(arr, -1, 0)
    return PosteriorArchive(
        types=tuple(meta["types"]), K=K, spec=spec, hyper=Hyperparams(**meta["hyper"]),
        config=SamplerConfig(**meta["config"]), states=states, kept_iterations=kept,
        logpost_trace=logpost, accept_rates=meta["accept_rates"], Y_samples=Y,
        step_sizes=meta.get("step_sizes", {}), diagnostics=meta.get("diagnostics", {}),
        flags=meta.get("flags", []))
