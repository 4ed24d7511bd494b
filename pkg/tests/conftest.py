import numpy as np
import pytest

from mlgcp.model import Hyperparams, ModelState
from mlgcp.pattern import GriddedData, Window, make_grid


def random_instance(rng, J, K, M=4, N=4, mask_frac=0.0, lasso=True):
    """Small random data set and parameter state for oracle tests."""
    spec = make_grid(Window(0.0, 1.0, 0.0, 1.0), M, N)
    shape = spec.shape
    keep = np.zeros(shape, dtype=bool)
    keep[:M, :N] = rng.uniform(size=(M, N)) >= mask_frac
    counts = np.zeros((J,) + shape, dtype=np.int64)
    counts[:, keep] = rng.poisson(3.0, size=(J, int(keep.sum())))
    areas = np.where(keep, spec.cell_area, 0.0)
    data = GriddedData(spec, tuple(f"t{j}" for j in range(J)), counts, areas, keep,
                       np.zeros(J, dtype=np.int64))
    hyper = Hyperparams(prior_alpha="lasso" if lasso else "normal")
    state = ModelState(
        m=rng.normal(3.0, 0.3, J), sigma=rng.uniform(0.5, 1.5, J),
        phi=np.exp(rng.uniform(np.log(0.05), np.log(0.2), J)),
        phi0=np.exp(rng.uniform(np.log(0.05), np.log(0.2), K)),
        alpha=rng.normal(0, 0.7, (J, K)),
        gamma_type=rng.standard_normal((J,) + shape),
        gamma_shared=rng.standard_normal((K,) + shape),
        tau2=rng.uniform(0.5, 2.0, (J, K)) if lasso else None,
        lambda2=1.3 if lasso else None)
    return data, hyper, state


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


#: acceptance outcomes, printed after the run as one line per criterion
ACCEPTANCE = {}


@pytest.fixture
def acceptance():
    def record(number: int, title: str, passed: bool, detail: str) -> bool:
        ACCEPTANCE[number] = (title, bool(passed), detail)
        print(f"criterion {number} [{'PASS' if passed else 'FAIL'}] {title}: {detail}")
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        title, passed, detail = ACCEPTANCE[number]
        terminalreporter.write_line(
            f"criterion {number:2d} {'PASS' if passed else 'FAIL'}  {title}: {detail}")
