import json
import logging
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mlgcp.pooling import (PooledInput, PoolConfig, PoolingError, image_estimate,
                           inverse_transform, pool, read_pool_csv, transform,
                           write_pool_outputs)


def test_transform_fixed_points():
    assert transform(0.0, "fisher_z") == 0.0
    assert transform(0.5, "logit") == 0.0
    assert transform(0.7071, "fisher_z") == pytest.approx(0.8814, abs=1e-4)
    assert transform(0.7071, "fisher_z") == math.atanh(0.7071)


@settings(max_examples=100, deadline=None)
@given(st.floats(-0.999, 0.999), st.floats(0.001, 0.999))
def test_round_trip(r, p):
    assert inverse_transform(transform(r, "fisher_z"), "fisher_z") == pytest.approx(r, abs=1e-12)
    assert inverse_transform(transform(p, "logit"), "logit") == pytest.approx(p, abs=1e-12)


def test_clipping_is_reported(caplog):
    diag = {}
    with caplog.at_level(logging.WARNING):
        z = transform(np.array([1.0, -1.0, 0.2]), "fisher_z", diag)
    assert diag["clipped"] == 2 and np.all(np.isfinite(z))
    assert "clipped 2" in caplog.text
    assert np.isfinite(transform(0.0, "logit", diag)) and diag["clipped"] == 3
    with pytest.raises(PoolingError):
        transform(0.5, "probit")
    with pytest.raises(PoolingError):
        transform(np.nan, "logit")


def test_back_transform_ranges():
    z = np.linspace(-50, 50, 101)
    assert np.all(np.abs(inverse_transform(z, "fisher_z")) <= 1)
    p = inverse_transform(z, "logit")
    assert np.all((p >= 0) & (p <= 1))


def test_image_estimate():
    draws = np.array([0.1, 0.2, 0.3, 0.5])
    z, v = image_estimate(draws, "fisher_z")
    t = np.arctanh(draws)
    assert z == pytest.approx(np.median(t)) and v == pytest.approx(np.var(t, ddof=1))


def test_validation():
    with pytest.raises(PoolingError):
        PooledInput([0, 1], [0.1, 0.2], [0.1, 0.0])
    with pytest.raises(PoolingError):
        PooledInput([0, 1], [0.1, 0.2], [0.1])
    with pytest.raises(PoolingError):
        PooledInput([0], [0.1], [0.1], kind="other")


def hierarchical_data(rng, L=5, n=20, mu=0.3, omega=0.4, kappa=0.2, v=0.05):
    theta = mu + omega * rng.standard_normal(L)
    subj = np.repeat(np.arange(L), n)
    vv = np.full(L * n, v)
    z = theta[subj] + np.sqrt(vv + kappa ** 2) * rng.standard_normal(L * n)
    return PooledInput(subj, z, vv)


def test_consensus():
    data = PooledInput(np.repeat([0, 1, 2, 3], 10), np.full(40, 0.4), np.full(40, 1e-4))
    res = pool(data, PoolConfig(n_iter=4000, burn_in=1000, seed=1))
    assert abs(res.mu.mean() - 0.4) < 0.02
    assert res.mu.std() < 0.05
    assert np.allclose(res.theta.mean(axis=0), 0.4, atol=0.01)


def test_symmetric_subjects():
    a = 0.5
    data = PooledInput(np.repeat([0, 1], 10), np.r_[np.full(10, a), np.full(10, -a)],
                       np.full(20, 0.02))
    res = pool(data, PoolConfig(n_iter=6000, burn_in=1000, seed=2))
    se = res.mu.std() / math.sqrt(len(res.mu) / 20)  # crude autocorrelation allowance
    assert abs(res.mu.mean()) < 3 * se
    assert abs(res.mu_mean) < 0.01


def test_permutation_within_subject(rng):
    data = hierarchical_data(rng, L=3, n=6)
    perm = np.concatenate([np.arange(i * 6, (i + 1) * 6)[::-1] for i in range(3)])
    shuffled = PooledInput(data.subject[perm], data.z[perm], data.v[perm])
    a = pool(data, PoolConfig(n_iter=2000, burn_in=500, seed=4))
    b = pool(shuffled, PoolConfig(n_iter=2000, burn_in=500, seed=4))
    assert np.allclose(a.mu, b.mu, atol=1e-10)
    assert np.allclose(a.theta_mean, b.theta_mean, atol=1e-10)


def test_shrinkage_direction(rng):
    for rep in range(5):
        res = pool(hierarchical_data(rng), PoolConfig(n_iter=3000, burn_in=500, seed=rep))
        for t, s in zip(res.theta_mean, res.subject_means):
            lo, hi = sorted([s, res.mu_mean])
            assert lo < t < hi


def test_monotone_uncertainty(rng):
    data = hierarchical_data(rng, L=4, n=5, omega=0.1, kappa=0.05, v=0.5)
    doubled = PooledInput(data.subject, data.z, 2 * data.v)
    cfg = PoolConfig(n_iter=20000, burn_in=2000, seed=9)
    assert pool(doubled, cfg).mu.std() >= pool(data, cfg).mu.std()


def test_single_subject_warns(caplog):
    with caplog.at_level(logging.WARNING):
        res = pool(PooledInput([0, 0, 0], [0.1, 0.2, 0.3], [0.01] * 3),
                   PoolConfig(n_iter=300, burn_in=100))
    assert "one subject" in caplog.text
    assert res.theta.shape == (200, 1)


def test_csv_round_trip(tmp_path, rng):
    path = tmp_path / "in.csv"
    lines = ["subject,image,z,v,kind,pair_or_type,distance"]
    for s in ("a", "b"):
        for m in range(3):
            lines.append(f"{s},{m},{rng.normal():.6f},0.05,fisher_z,1-2,0.0")
            lines.append(f"{s},{m},{rng.normal():.6f},0.05,logit,1,0.0")
    path.write_text("\n".join(lines) + "\n")
    groups = read_pool_csv(path)
    assert [(g.kind, g.quantity) for g in groups] == [("fisher_z", "1-2"), ("logit", "1")]
    assert groups[0].subjects == ["a", "b"]
    res = [pool(g, PoolConfig(n_iter=300, burn_in=100, seed=1)) for g in groups]
    write_pool_outputs(res, tmp_path / "out")
    out = json.loads((tmp_path / "out" / "pooled.json").read_text())
    assert len(out) == 2 and set(out[0]["subjects"]) == {"a", "b"}
    lo, med, hi = out[1]["global"]["original"]
    assert 0 <= lo <= med <= hi <= 1
    draws = (tmp_path / "out" / "pooled_draws.csv").read_text().splitlines()
    assert draws[0] == "kind,quantity,distance,draw,parameter,value"
    assert len(draws) == 1 + 2 * 200 * 3


def test_csv_errors(tmp_path):
    p = tmp_path / "bad.csv"
    p.write_text("subject,z,v\n1,0.1,0.1\n")
    with pytest.raises(PoolingError, match="missing columns"):
        read_pool_csv(p)
    p.write_text("subject,image,z,v,kind,pair_or_type,distance\na,1,x,0.1,logit,1,0\n")
    with pytest.raises(PoolingError, match=":2:"):
        read_pool_csv(p)
