import math

import numpy as np
import pytest
from scipy import stats

from mlgcp.model import Hyperparams, ModelState, NonFiniteError
from mlgcp.sampler import (Chain, DualAveraging, ProposalScale, SamplerConfig, SamplerError,
                           effective_sample_size, gibbs_tau2, hmc_update, lambda2_conditional,
                           load_archive, make_target, mh_update, run_chain, save_archive,
                           scalar_mh)

from conftest import random_instance


def masked(data):
    """Same grid with every cell excluded (prior-only posterior)."""
    from mlgcp.pattern import GriddedData

    return GriddedData(data.spec, data.types, np.zeros_like(data.counts),
                       np.zeros_like(data.areas), np.zeros_like(data.mask), data.dropped)


def test_scalar_mh_recovers_conjugate_normal():
    rng = np.random.default_rng(5)
    mean, sd = 1.5, 0.4

    def target(x):
        return -0.5 * ((x - mean) / sd) ** 2, -1.0 / sd ** 2, None

    scale = ProposalScale()
    x, draws = 0.0, []
    for t in range(20000):
        res = scalar_mh(x, target, scale, rng)
        if t < 2000:
            scale.adapt(res.route, res.accept_prob, t, 0.44)
        else:
            draws.append(res.value)
        x = res.value
    draws = np.array(draws)
    se = draws.std() / math.sqrt(effective_sample_size(draws))
    assert abs(draws.mean() - mean) < 4 * se
    assert draws.std() == pytest.approx(sd, rel=0.05)


def test_scalar_mh_without_curvature_uses_random_walk():
    rng = np.random.default_rng(1)

    def target(x):
        return -0.5 * x * x, 1.0, None  # positive curvature: not usable

    res = scalar_mh(0.0, target, ProposalScale(rw_sd=0.5), rng)
    assert res.route == "rw"


def test_scalar_mh_rejects_out_of_support():
    rng = np.random.default_rng(1)

    def target(x):
        return (0.0, None, None) if x == 0.0 else (None, None, None)

    res = scalar_mh(0.0, target, ProposalScale(), rng)
    assert not res.accepted and not res.in_support and res.value == 0.0


def test_hmc_zero_step_is_always_accepted(rng):
    data, hyper, state = random_instance(rng, 2, 1)
    chain = Chain(data, hyper, state)
    before = state.gamma_type.copy()
    res = hmc_update(chain, ("type", 0), 0.0, 10, rng)
    assert res.accepted and np.array_equal(state.gamma_type, before)


def test_hmc_keeps_cache_consistent(rng):
    data, hyper, state = random_instance(rng, 3, 2, M=6, N=6)
    chain = Chain(data, hyper, state)
    accepted = 0
    for _ in range(20):
        for block in [("type", 0), ("type", 1), ("type", 2), ("shared", 0), ("shared", 1)]:
            accepted += hmc_update(chain, block, 0.05, 5, rng).accepted
    assert accepted > 0
    Y = chain.Y.copy()
    lp = chain.log_posterior()
    chain.refresh()
    assert np.allclose(chain.Y, Y, atol=1e-10)
    assert chain.log_posterior() == pytest.approx(lp, rel=1e-10)


def test_hmc_exact_on_standard_normal(rng):
    """Masked data: each field is standard normal and HMC must preserve it."""
    data, hyper, state = random_instance(rng, 1, 0, M=4, N=4)
    chain = Chain(masked(data), hyper, state)
    draws = []
    for t in range(3000):
        hmc_update(chain, ("type", 0), 0.4 + 0.2 * rng.uniform(), 10, rng)
        draws.append(state.gamma_type[0, 1, 2])
    draws = np.array(draws[200:])
    ess = effective_sample_size(draws)
    assert abs(draws.mean()) < 4 / math.sqrt(ess)
    assert abs(np.mean(draws ** 2) - 1) < 4 * math.sqrt(2 / ess)


def test_mh_updates_keep_cache_consistent(rng):
    data, hyper, state = random_instance(rng, 3, 2, M=6, N=6)
    chain = Chain(data, hyper, state)
    params = [("m", 0), ("sigma", 1), ("alpha", 2, 1), ("phi", 0), ("phi0", 1)]
    scales = {p: ProposalScale(rw_sd=0.3) for p in params}
    for _ in range(30):
        for p in params:
            mh_update(chain, p, scales[p], rng)
    assert sum(s.n_acc for s in scales.values()) > 0
    Y = chain.Y.copy()
    chain.refresh()
    assert np.allclose(chain.Y, Y, atol=1e-10)


def test_sigma_curvature_matches_numerical(rng):
    data, hyper, state = random_instance(rng, 2, 1, M=6, N=6)
    chain = Chain(data, hyper, state)
    for p in [("m", 1), ("sigma", 0), ("alpha", 1, 0)]:
        x, target = make_target(chain, p)
        h = 1e-4
        num = (target(x + h)[0] - 2 * target(x)[0] + target(x - h)[0]) / h ** 2
        assert target(x)[1] == pytest.approx(num, rel=1e-4)


def test_range_proposal_on_boundary_is_rejected(rng):
    data, hyper, state = random_instance(rng, 2, 1)
    chain = Chain(data, hyper, state)
    _, target = make_target(chain, ("phi", 0))
    assert target(800.0)[0] is None and target(-800.0)[0] is None


def test_inverse_gaussian_conditional():
    rng = np.random.default_rng(2)
    J = 30
    hyper = Hyperparams()
    alpha = np.full((J, J), 0.8)
    alpha[0, 0] = 0.0
    st = ModelState(np.zeros(J), np.ones(J), np.full(J, 0.1), np.full(J, 0.1), alpha, None, None,
                    np.ones((J, J)), 2.0)
    inv = []
    zero = []
    for _ in range(40):
        st.lambda2 = 2.0
        gibbs_tau2(st, hyper, rng)
        inv.append(1 / st.tau2[1:].ravel())
        zero.append(st.tau2[0, 0])
    inv = np.concatenate(inv)
    mean = math.sqrt(2 * 2.0 * 1.0) / 0.8
    shape = 2 * 2.0
    assert inv.mean() == pytest.approx(mean, rel=0.02)
    assert inv.var() == pytest.approx(mean ** 3 / shape, rel=0.06)
    assert np.isfinite(zero).all() and min(zero) > 0


def test_lasso_hierarchy_prior_recovery():
    """Alternating alpha | tau2 from its prior with the Gibbs step leaves the prior invariant."""
    rng = np.random.default_rng(9)
    hyper = Hyperparams()
    J = K = 2
    st = ModelState(np.zeros(J), np.ones(J), np.full(J, 0.1), np.full(K, 0.1),
                    np.zeros((J, K)), None, None, np.ones((J, K)), 1.0)
    lam, tau = [], []
    for _ in range(30000):
        st.alpha = rng.normal(0.0, np.sqrt(hyper.h_alpha * st.tau2))
        gibbs_tau2(st, hyper, rng)
        lam.append(st.lambda2)
        tau.append(st.tau2[0, 0])
    lam = np.array(lam)
    # lambda2 ~ Gamma(0.7, rate 0.7); tau2 ~ Exp(rate lambda2) -> P(tau2 < t) = E[1 - exp(-lambda2 t)]
    for q in (0.1, 0.5, 0.9):
        x = stats.gamma(0.7, scale=1 / 0.7).ppf(q)
        ind = (lam < x).astype(float)
        se = math.sqrt(q * (1 - q) / effective_sample_size(ind))
        assert abs(ind.mean() - q) < 4 * se
    t = 1.0
    p = 1 - (1 + t / 0.7) ** -0.7
    ind = (np.array(tau) < t).astype(float)
    assert abs(ind.mean() - p) < 4 * math.sqrt(p * (1 - p) / effective_sample_size(ind))


def test_lambda2_conditional_parameters():
    shape, rate = lambda2_conditional(Hyperparams(), np.array([[1.0, 2.0], [0.5, 0.5]]))
    assert (shape, rate) == (0.7 + 4, 0.7 + 4.0)


def test_gibbs_requires_lasso():
    st = ModelState(np.zeros(1), np.ones(1), np.ones(1), np.ones(1), np.zeros((1, 1)), None, None)
    with pytest.raises(ValueError):
        gibbs_tau2(st, Hyperparams(prior_alpha="normal"), np.random.default_rng(0))


def test_dual_averaging_converges_to_target():
    da = DualAveraging(1.0, 0.65)
    step = 1.0
    for _ in range(2000):
        # acceptance falls with the step size
        step = da.update(math.exp(-step))
    assert math.exp(-da.final_step) == pytest.approx(0.65, abs=0.02)


def test_run_chain_bookkeeping_and_determinism(tmp_path, rng):
    data, hyper, state = random_instance(rng, 2, 1)
    cfg = SamplerConfig(n_iter=60, burn_in=20, thin=3, seed=11)
    a = run_chain(data, hyper, 1, cfg)
    b = run_chain(data, hyper, 1, cfg)
    assert a.R == (60 - 20) // 3
    assert a.kept_iterations[0] == 22 and a.kept_iterations[-1] == 58
    assert np.array_equal(a.logpost_trace, b.logpost_trace)
    assert a.Y_samples.shape == (a.R, 2) + data.spec.shape
    save_archive(a, tmp_path / "a")
    save_archive(b, tmp_path / "b")
    for name in ("meta.json", "trace.csv", "logpost.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    back = load_archive(tmp_path / "a")
    assert back.R == a.R and back.K == 1
    assert np.array_equal(back.Y_samples, a.Y_samples)
    assert np.array_equal(back.logpost_trace, a.logpost_trace)
    for s, t in zip(a.states, back.states):
        assert s.scalars() == t.scalars()


def test_run_chain_normal_prior_and_no_shared(rng):
    data, _, _ = random_instance(rng, 2, 0, lasso=False)
    arc = run_chain(data, Hyperparams(prior_alpha="normal"), 0,
                    SamplerConfig(n_iter=30, burn_in=10, store_fields=False))
    assert arc.R == 20 and arc.Y_samples is None
    assert "tau2" not in " ".join(arc.states[0].scalars())


def test_run_chain_rejects_too_many_shared(rng):
    data, hyper, _ = random_instance(rng, 2, 0)
    with pytest.raises(ValueError, match="exceeds"):
        run_chain(data, hyper, 3, SamplerConfig(n_iter=10, burn_in=5))


def test_nonfinite_posterior_raises_with_last_good_state(rng, monkeypatch):
    data, hyper, _ = random_instance(rng, 2, 1)
    calls = {"n": 0}
    original = Chain.log_posterior

    def flaky(self):
        calls["n"] += 1
        if calls["n"] == 5:
            raise NonFiniteError("likelihood", float("nan"))
        return original(self)

    monkeypatch.setattr(Chain, "log_posterior", flaky)
    with pytest.raises(SamplerError) as info:
        run_chain(data, hyper, 1, SamplerConfig(n_iter=10, burn_in=5))
    assert info.value.iteration == 4
    assert isinstance(info.value.last_good_state, ModelState)


def test_config_validation():
    with pytest.raises(ValueError):
        SamplerConfig(n_iter=10, burn_in=10)
    with pytest.raises(ValueError):
        SamplerConfig(hmc_target_accept=1.2)


def test_effective_sample_size():
    rng = np.random.default_rng(0)
    iid = rng.standard_normal(20000)
    assert effective_sample_size(iid) == pytest.approx(20000, rel=0.1)
    rho = 0.8
    x = np.empty(50000)
    x[0] = 0
    e = rng.standard_normal(50000)
    for i in range(1, 50000):
        x[i] = rho * x[i - 1] + e[i]
    assert effective_sample_size(x) == pytest.approx(50000 * (1 - rho) / (1 + rho), rel=0.15)
