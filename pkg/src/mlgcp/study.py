"""Replicated simulate -> fit -> select studies with per-replicate checkpoints.

Each replicate simulates a preset on an ``n x n`` grid, fits every candidate
number of shared processes, records DIC for each and the CCF(0) posterior
interval of every pair from the fit at ``coverage_K``. Results are written
as one JSON file per replicate under a directory keyed by the settings and
a fingerprint of the code that produces them, so an interrupted study
resumes where it stopped and stale results are never reused.

Run from the command line::

    python -m mlgcp.study --cache DIR [--jobs N] [--replicates R]
"""

from __future__ import annotations

import argparse
import ast
import hashlib
import json
import logging
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import summaries
from .model import Hyperparams
from .pattern import grid_bin, make_grid
from .sampler import SamplerConfig
from .selection import fit_dic, seed_for
from .simulate import preset, simulate_pattern

log = logging.getLogger(__name__)

#: modules whose code determines study results, with top-level definitions
#: (I/O and presentation helpers) that do not
_FINGERPRINT_MODULES = {
    "_fft": (), "fftfield": (), "model": (), "pattern": (), "simulate": ("truth_dict", "write_truth"),
    "sampler": ("save_archive", "load_archive", "_jsonable", "_f", "autocorrelation",
                "effective_sample_size", "mc_standard_error"),
    "selection": ("dic3", "dic3_from_fields", "DicTable", "DicRow", "evidence_band", "select_K",
                  "_fit_worker"),
    "summaries": ("CurveSet", "Summary", "default_distances", "curve_key", "summarize_states",
                  "summarize_archive", "fmt", "write_summary", "write_svg",
                  "conditional_intensity", "cross_pcf", "intensity", "pv"),
    "study": ("main", "_job", "study_dir", "load_results", "run_study", "coverage",
              "selection_within", "mean_delta_dic", "total_seconds", "code_fingerprint",
              "_strip_docstrings", "StudySettings"),
}


@dataclass(frozen=True)
class StudySettings:
    preset: str = "scenario1"
    n_replicates: int = 20
    grid: int = 32
    n_iter: int = 20000
    burn_in: int = 10000
    thin: int = 10
    K_max: int | None = None
    coverage_K: int = 2
    prior: str = "lasso"
    seed: int = 20240611

    def key(self) -> str:
        blob = json.dumps({"settings": asdict(self), "code": code_fingerprint()}, sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _strip_docstrings(tree):
    for node in ast.walk(tree):
        if isinstance(node, (ast.Module, ast.ClassDef, ast.FunctionDef, ast.AsyncFunctionDef)):
            body = node.body
            if body and isinstance(body[0], ast.Expr) and isinstance(body[0].value, ast.Constant) \
                    and isinstance(body[0].value.value, str):
                node.body = body[1:] or [ast.Pass()]
    return tree


def code_fingerprint() -> str:
    """Hash of the result-producing modules, ignoring comments and docstrings."""
    h = hashlib.sha256()
    here = Path(__file__).parent
    for name, skip in _FINGERPRINT_MODULES.items():
        tree = _strip_docstrings(ast.parse((here / f"{name}.py").read_text()))
        tree.body = [n for n in tree.body if getattr(n, "name", None) not in skip]
        h.update(name.encode())
        h.update(ast.dump(tree).encode())
    return h.hexdigest()[:16]


def run_replicate(settings: StudySettings, r: int) -> dict:
    params = preset(settings.preset)
    spec = make_grid(params.window, settings.grid, settings.grid)
    base_seed = seed_for(settings.seed, r)
    pattern, _ = simulate_pattern(params, spec, np.random.default_rng(seed_for(base_seed, 0)))
    data = grid_bin(pattern, spec)
    hyper = Hyperparams.for_window(params.window, prior_alpha=settings.prior)
    config = SamplerConfig(n_iter=settings.n_iter, burn_in=settings.burn_in, thin=settings.thin,
                           seed=seed_for(base_seed, 1), store_fields=False)
    truth = summaries.params_state(params.m, params.sigma, params.phi, params.phi0,
                                   params.alpha_matrix)
    K_max = data.J if settings.K_max is None else settings.K_max
    out = {"replicate": r, "seed": base_seed, "counts": pattern.counts.tolist(),
           "dic": {}, "seconds": {}, "flags": {}, "accept": {}, "ccf0": {}}
    for K in range(K_max + 1):
        t0 = time.perf_counter()
        value, archive = fit_dic(data, hyper, K, config)
        out["seconds"][str(K)] = time.perf_counter() - t0
        out["dic"][str(K)] = value
        out["flags"][str(K)] = archive.flags
        out["accept"][str(K)] = archive.accept_rates
        if K == settings.coverage_K:
            arr = summaries.DrawArrays.from_states(archive.states)
            for j in range(data.J):
                for jj in range(j + 1, data.J):
                    draws = arr.ccf(j, jj, [0.0])[:, 0]
                    lo, med, hi = np.quantile(draws, summaries.QUANTILE_LEVELS)
                    true = summaries.ccf(truth, j, jj, 0.0)
                    out["ccf0"][f"{j + 1}-{jj + 1}"] = {
                        "q025": lo, "q50": med, "q975": hi, "truth": true,
                        "covered": bool(lo <= true <= hi)}
        log.info("replicate %d K=%d DIC=%.2f (%.0f s)", r, K, value, out["seconds"][str(K)])
    dic = {int(k): v for k, v in out["dic"].items()}
    out["selected_K"] = min(dic, key=lambda k: (dic[k], k))
    return out


def _job(args):
    settings, r, path = args
    result = run_replicate(settings, r)
    tmp = path.with_suffix(".tmp")
    tmp.write_text(json.dumps(result, indent=1, sort_keys=True) + "\n")
    os.replace(tmp, path)
    return result


def study_dir(settings: StudySettings, cache: Path) -> Path:
    return Path(cache) / f"{settings.preset}-{settings.key()}"


def load_results(settings: StudySettings, cache) -> dict:
    """Completed replicates found in the cache, by replicate index."""
    d = study_dir(settings, cache)
    out = {}
    for r in range(settings.n_replicates):
        p = d / f"rep{r:03d}.json"
        if p.exists():
            out[r] = json.loads(p.read_text())
    return out


def run_study(settings: StudySettings, cache, jobs: int = 1) -> list:
    """Run (or resume) a study and return the per-replicate results in order."""
    d = study_dir(settings, cache)
    d.mkdir(parents=True, exist_ok=True)
    (d / "settings.json").write_text(
        json.dumps({"settings": asdict(settings), "code": code_fingerprint()}, indent=1,
                   sort_keys=True) + "\n")
    done = load_results(settings, cache)
    todo = [(settings, r, d / f"rep{r:03d}.json")
            for r in range(settings.n_replicates) if r not in done]
    if todo:
        log.info("%d of %d replicates to run in %s", len(todo), settings.n_replicates, d)
    if jobs > 1 and len(todo) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            for res in ex.map(_job, todo):
                done[res["replicate"]] = res
    else:
        for task in todo:
            res = _job(task)
            done[res["replicate"]] = res
    return [done[r] for r in range(settings.n_replicates)]


def coverage(results) -> tuple[int, int]:
    """Covered and total CCF(0) intervals over all pairs and replicates."""
    flags = [c["covered"] for res in results for c in res["ccf0"].values()]
    return sum(flags), len(flags)


def selection_within(results, true_K: int, tol: int = 1) -> float:
    return float(np.mean([abs(res["selected_K"] - true_K) <= tol for res in results]))


def mean_delta_dic(results, K_from: int, K_to: int) -> float:
    return float(np.mean([res["dic"][str(K_to)] - res["dic"][str(K_from)] for res in results]))


def total_seconds(results) -> float:
    return float(sum(sum(res["seconds"].values()) for res in results))


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="python -m mlgcp.study", description=__doc__.splitlines()[0])
    ap.add_argument("--cache", required=True, type=Path)
    ap.add_argument("--jobs", type=int, default=int(os.environ.get("MLGCP_JOBS", "1")))
    ap.add_argument("--replicates", type=int, default=StudySettings.n_replicates)
    ap.add_argument("--iters", type=int, default=StudySettings.n_iter)
    ap.add_argument("--burnin", type=int, default=StudySettings.burn_in)
    ap.add_argument("--thin", type=int, default=StudySettings.thin)
    ap.add_argument("--grid", type=int, default=StudySettings.grid)
    ap.add_argument("--preset", default=StudySettings.preset)
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    settings = StudySettings(preset=args.preset, n_replicates=args.replicates, grid=args.grid,
                             n_iter=args.iters, burn_in=args.burnin, thin=args.thin)
    results = run_study(settings, args.cache, args.jobs)
    cov, n = coverage(results)
    print(f"CCF(0) coverage {cov}/{n} = {cov / n:.3f}")
    print(f"selected K within 1 of {settings.coverage_K}: "
          f"{selection_within(results, settings.coverage_K):.3f}")
    print(f"mean DIC(K={settings.coverage_K}) - DIC(K=0): "
          f"{mean_delta_dic(results, 0, settings.coverage_K):.2f}")
    print(f"compute time {total_seconds(results) / 3600:.2f} h")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
