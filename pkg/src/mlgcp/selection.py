"""DIC for mixture/random-effect models and selection of the number of shared processes.

With per-draw cell rates ``A_i exp(Y_ij)`` and the full Poisson pmf::

    DIC = -4/R sum_r sum_ij log f(n_ij | rate_ij^r)
          + 2 sum_ij log( 1/R sum_r f(n_ij | rate_ij^r) )

Only unmasked interior cells carry data; masked and extension cells have
area 0 and zero counts, for which ``f(0 | 0) = 1``.
"""

from __future__ import annotations

import csv
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from scipy.special import gammaln

from .model import Hyperparams
from .pattern import GriddedData
from .sampler import SamplerConfig, run_chain, save_archive

log = logging.getLogger(__name__)


class DicError(ValueError):
    pass


class DicAccumulator:
    """Streaming DIC: feed one log-intensity draw at a time."""

    def __init__(self, data: GriddedData):
        spec = data.spec
        self.M, self.N = spec.M, spec.N
        A = data.interior_areas
        n = data.interior_counts.astype(float)
        if ((A == 0) & (n > 0)).any():
            raise DicError("cells with zero area hold points; masked counts must be dropped")
        self.cells = A > 0
        self.n = n[:, self.cells]  # (J, cells)
        self.log_area = np.log(A[self.cells])
        self.area = A[self.cells]
        self.log_fact = gammaln(self.n + 1.0)
        self.R = 0
        self.sum_loglik = 0.0
        self.lse = None

    def cell_logpmf(self, Y) -> np.ndarray:
        """Per-cell Poisson log pmf for one draw; ``Y`` is (J, Me, Ne) or (J, M, N)."""
        Yc = np.asarray(Y)[:, : self.M, : self.N][:, self.cells]
        return self.n * (self.log_area + Yc) - self.area * np.exp(Yc) - self.log_fact

    def add(self, Y) -> None:
        lp = self.cell_logpmf(Y)
        self.R += 1
        self.sum_loglik += float(lp.sum())
        self.lse = lp if self.lse is None else np.logaddexp(self.lse, lp)

    __call__ = add

    @property
    def value(self) -> float:
        if self.R == 0:
            raise DicError("no draws accumulated")
        mixture = float(np.sum(self.lse - math.log(self.R)))
        return -4.0 / self.R * self.sum_loglik + 2.0 * mixture


def dic3(archive, data: GriddedData) -> float:
    """DIC from the stored log-intensity draws of an archive."""
    if archive.Y_samples is None or len(archive.Y_samples) == 0:
        raise DicError("archive holds no log-intensity fields (fit with store_fields=True)")
    acc = DicAccumulator(data)
    for Y in archive.Y_samples:
        acc.add(Y)
    return acc.value


def dic3_from_fields(Y_samples, data: GriddedData) -> float:
    acc = DicAccumulator(data)
    for Y in Y_samples:
        acc.add(Y)
    return acc.value


def evidence_band(delta: float) -> str:
    """Rule-of-thumb reading of a DIC difference from the best model."""
    if delta < 2:
        return "negligible"
    if delta <= 6:
        return "positive"
    return "strong"


@dataclass(frozen=True)
class DicRow:
    K: int
    prior: str
    dic: float
    delta: float

    @property
    def band(self) -> str:
        return evidence_band(self.delta)


@dataclass(frozen=True)
class DicTable:
    rows: tuple

    @classmethod
    def from_values(cls, values: dict, prior: str) -> "DicTable":
        if not values:
            raise ValueError("no candidates")
        best = min(values.values())
        return cls(tuple(DicRow(K, prior, v, v - best) for K, v in sorted(values.items())))

    @property
    def selected_K(self) -> int:
        # ties go to the smaller model
        return min(self.rows, key=lambda r: (r.dic, r.K)).K

    def dic(self, K: int) -> float:
        for r in self.rows:
            if r.K == K:
                return r.dic
        raise KeyError(K)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["K", "prior", "DIC", "delta", "band"])
            for r in self.rows:
                w.writerow([r.K, r.prior, repr(r.dic), repr(r.delta), r.band])


def seed_for(seed: int, *keys: int) -> int:
    """Independent integer seed for a sub-run (one K, one replicate, ...)."""
    return int(np.random.SeedSequence([int(seed), *map(int, keys)]).generate_state(1)[0])


def fit_dic(data: GriddedData, hyper: Hyperparams, K: int, config: SamplerConfig,
            archive_dir=None, keep_fields: bool = False):
    """Fit one candidate and return ``(DIC, archive)``."""
    acc = DicAccumulator(data)
    cfg = replace(config, seed=seed_for(config.seed, K), store_fields=keep_fields)
    archive = run_chain(data, hyper, K, cfg, on_draw=acc)
    if archive_dir is not None:
        save_archive(archive, Path(archive_dir) / f"K{K}")
    return acc.value, archive


def _fit_worker(args):
    data, hyper, K, config, archive_dir = args
    value, _ = fit_dic(data, hyper, K, config, archive_dir)
    return K, value


def select_K(data: GriddedData, hyper: Hyperparams, config: SamplerConfig,
             K_range=None, jobs: int = 1, archive_dir=None) -> DicTable:
    """Fit every candidate ``K`` and tabulate DIC; the minimiser is selected."""
    J = data.J
    K_range = list(range(J + 1)) if K_range is None else sorted(set(K_range))
    if any(K < 0 or K > J for K in K_range):
        raise ValueError(f"candidate K must lie in 0..{J}")
    tasks = [(data, hyper, K, config, archive_dir) for K in K_range]
    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            values = dict(ex.map(_fit_worker, tasks))
    else:
        values = dict(map(_fit_worker, tasks))
    table = DicTable.from_values(values, hyper.prior_alpha)
    log.info("DIC by K: %s; selected K=%d",
             {r.K: round(r.dic, 2) for r in table.rows}, table.selected_K)
    return table
