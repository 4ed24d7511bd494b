import json
import math

import numpy as np
import pytest

from mlgcp.pattern import grid_bin, make_grid
from mlgcp.simulate import ScenarioPreset, preset, simulate_pattern, simulate_Y, truth_dict, write_truth


def test_scenario1_values():
    p = preset("scenario1")
    assert (p.J, p.K) == (5, 2)
    assert p.alpha[2] == (-1, 1)
    assert p.phi == (0.01, 0.1, 0.02, 0.03, 0.04) and p.phi0 == (0.08, 0.1)
    assert float(np.sum(p.alpha_matrix[2] ** 2)) == 2.0


def test_scenario2_values():
    p = preset("scenario2")
    assert p.K == 3 and p.phi0 == (0.08, 0.1, 0.05)
    assert p.alpha_matrix[4].tolist() == [1, -1, 1]


def test_unknown_preset_lists_choices():
    with pytest.raises(ValueError, match="scenario1, scenario2"):
        preset("scenario3")


def test_preset_validation():
    with pytest.raises(ValueError):
        ScenarioPreset("bad", (1.0,), (0.1,), (0.1,), ((1.0,),), expected_count=0)
    with pytest.raises(ValueError):
        ScenarioPreset("bad", (1.0, 1.0), (0.1,), (0.1,), ((1.0,),))


def test_offset_gives_expected_count():
    p = preset("scenario1")
    for j in range(p.J):
        var = p.sigma[j] ** 2 + float(np.sum(p.alpha_matrix[j] ** 2))
        assert math.exp(p.m[j] + var / 2) * p.window.area == pytest.approx(1000.0, rel=1e-12)


def test_homogeneous_limit():
    p = ScenarioPreset("flat", (0.0, 0.0), (0.1, 0.1), (0.1,), ((0.0,), (0.0,)), 200.0)
    spec = make_grid(p.window, 8, 8)
    rng = np.random.default_rng(3)
    counts = np.array([simulate_pattern(p, spec, rng)[0].counts for _ in range(200)])
    mean = counts.mean(axis=0)
    se = counts.std(axis=0, ddof=1) / math.sqrt(200)
    assert np.all(np.abs(mean - 200.0) < 3 * se)


def test_intensity_calibration_of_fields():
    p = preset("scenario1")
    spec = make_grid(p.window, 16, 16)
    rng = np.random.default_rng(11)
    tot = np.array([(np.exp(simulate_Y(p, spec, rng)[:, :16, :16]).mean(axis=(1, 2)))
                    for _ in range(200)]) * p.window.area
    mean, se = tot.mean(axis=0), tot.std(axis=0, ddof=1) / math.sqrt(len(tot))
    assert np.all(np.abs(mean - 1000.0) < 3 * se)


def test_deterministic_and_inside_window():
    p = preset("scenario1")
    spec = make_grid(p.window, 16, 16)
    a, Ya = simulate_pattern(p, spec, np.random.default_rng(5))
    b, Yb = simulate_pattern(p, spec, np.random.default_rng(5))
    assert np.array_equal(a.x, b.x) and np.array_equal(a.type_index, b.type_index)
    assert np.array_equal(Ya, Yb)
    assert np.all(p.window.contains(a.x, a.y))
    assert a.types == tuple(f"type{j}" for j in range(1, 6))
    # cell counts equal the simulated Poisson counts per cell
    data = grid_bin(a, spec)
    assert data.counts.sum() == a.x.size


def test_types_3_and_4_repel():
    p = preset("scenario1")
    spec = make_grid(p.window, 32, 32)
    rng = np.random.default_rng(8)
    ratios = []
    for _ in range(10):
        pattern, _ = simulate_pattern(p, spec, rng)
        n = grid_bin(pattern, spec).interior_counts
        # same-cell cross pair correlation estimate
        ratios.append((n[2] * n[3]).mean() / (n[2].mean() * n[3].mean()))
    assert np.mean(ratios) < 1.0


def test_truth_matches_independent_formulas(tmp_path):
    p = preset("scenario1")
    write_truth(tmp_path / "truth.json", p, [0.0, 0.05])
    t = json.loads((tmp_path / "truth.json").read_text())
    a = [list(r) for r in p.alpha]
    for j in range(5):
        for jj in range(j + 1, 5):
            for i, d in enumerate([0.0, 0.05]):
                num = sum(a[j][k] * a[jj][k] * math.exp(-d / p.phi0[k]) for k in range(2))
                den = math.sqrt(sum(x * x for x in a[j]) * sum(x * x for x in a[jj]))
                assert t["ccf"][f"{j + 1}-{jj + 1}"][i] == pytest.approx(num / den, abs=1e-14)
        shared = sum(x * x for x in a[j])
        assert t["pv"][str(j + 1)][0] == pytest.approx(shared / (shared + 1.0), abs=1e-14)
        assert t["rho"][j] == pytest.approx(1000.0, rel=1e-12)
    assert truth_dict(p, [0.0])["ccf"]["1-2"] == [pytest.approx(1.0)]
