"""Batch command line: ``mlgcp {simulate,fit,select,summarize,pool}``.

Every command reads an optional YAML config (see ``DEFAULTS``), applies
flag overrides, and echoes the resolved config to ``<out>/config.yaml``;
running again with ``--config <out>/config.yaml`` reproduces the outputs.

Exit codes: 0 success, 1 runtime failure, 2 usage or config error.
"""

from __future__ import annotations

import argparse
import copy
import json
import logging
import sys
from pathlib import Path

import numpy as np
import yaml

from . import pooling, summaries
from .model import Hyperparams
from .pattern import PatternError, Window, grid_bin, load_mask, load_pattern, make_grid
from .sampler import (SamplerConfig, SamplerError, effective_sample_size, load_archive,
                      mc_standard_error, run_chain, save_archive)
from .selection import DicError, select_K
from .simulate import PRESETS, preset, simulate_pattern, write_truth

log = logging.getLogger("mlgcp")

DEFAULTS = {
    "seed": 0,
    "jobs": 1,
    "out": "mlgcp-out",
    "data": {
        "pattern": None,  # type,x,y CSV
        "mask": None,  # M x N 0/1 raster, 1 = excluded
        "window": None,  # [x_min, x_max, y_min, y_max]; default: bounding box
        "grid": [32, 32],
    },
    "simulate": {"preset": "scenario1", "replicates": 1},
    "model": {
        "K": 2,
        "K_range": None,  # candidates for select; default 0..J
        "prior": "lasso",
        # overrides of the default hyperparameters, e.g. {a_sigma: 10}
        "hyper": {},
        "range_fraction": [0.0025, 0.25],
    },
    "mcmc": {
        "iters": 2000,
        "burnin": 1000,
        "thin": 1,
        "leapfrog": 10,
        "hmc_target": 0.65,
        "mh_target": 0.44,
        "store_fields": True,
    },
    "summarize": {
        "archive": None,
        "distances": None,  # list, or {start, stop, num}; default by window size
        "pairs": None,  # e.g. ["1-2", "3-4"]; default all
        "reference_distance": None,  # default: first distance
        "svg": False,
    },
    "pool": {"input": None, "iters": 6000, "burnin": 1000, "thin": 1},
}


class UsageError(Exception):
    pass


def _merge(base: dict, extra: dict, where: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in (extra or {}).items():
        if key not in out:
            raise UsageError(f"unknown config key {where}{key!r}")
        if isinstance(out[key], dict) and key != "hyper":
            if not isinstance(value, dict):
                raise UsageError(f"config key {where}{key!r} must be a mapping")
            out[key] = _merge(out[key], value, f"{where}{key}.")
        else:
            out[key] = value
    return out


def resolve_config(args) -> dict:
    cfg = copy.deepcopy(DEFAULTS)
    if args.config is not None:
        try:
            loaded = yaml.safe_load(Path(args.config).read_text()) or {}
        except (OSError, yaml.YAMLError) as exc:
            raise UsageError(f"cannot read config: {exc}") from None
        if not isinstance(loaded, dict):
            raise UsageError("config must be a mapping")
        cfg = _merge(cfg, loaded)
    overrides = {
        ("seed",): args.seed, ("jobs",): args.jobs, ("out",): args.out,
        ("data", "grid"): list(args.grid) if args.grid else None,
        ("data", "pattern"): args.pattern, ("data", "mask"): args.mask,
        ("simulate", "preset"): args.preset,
        ("model", "K"): args.K, ("model", "prior"): args.prior,
        ("mcmc", "iters"): args.iters, ("mcmc", "burnin"): args.burnin,
        ("mcmc", "thin"): args.thin,
        ("summarize", "archive"): args.archive, ("pool", "input"): args.input,
    }
    for path, value in overrides.items():
        if value is None:
            continue
        node = cfg
        for key in path[:-1]:
            node = node[key]
        node[path[-1]] = value
    if args.command == "pool":
        for key, flag in (("iters", args.iters), ("burnin", args.burnin), ("thin", args.thin)):
            if flag is not None:
                cfg["pool"][key] = flag
    return cfg


def echo_config(cfg: dict, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.yaml").write_text(yaml.safe_dump(cfg, sort_keys=True))


def _setup_logging(out: Path) -> None:
    root = logging.getLogger("mlgcp")
    root.setLevel(logging.INFO)
    for h in list(root.handlers):
        root.removeHandler(h)
        h.close()
    fh = logging.FileHandler(out / "run.log", mode="w")
    fh.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s"))
    root.addHandler(fh)
    sh = logging.StreamHandler(sys.stderr)
    sh.setFormatter(logging.Formatter("%(levelname)s: %(message)s"))
    sh.setLevel(logging.WARNING)
    root.addHandler(sh)


# ---------------------------------------------------------------------------
# config -> objects


def sampler_config(cfg: dict) -> SamplerConfig:
    mc = cfg["mcmc"]
    try:
        return SamplerConfig(n_iter=int(mc["iters"]), burn_in=int(mc["burnin"]),
                             thin=int(mc["thin"]), hmc_leapfrog_steps=int(mc["leapfrog"]),
                             hmc_target_accept=float(mc["hmc_target"]),
                             mh_target_accept=float(mc["mh_target"]), seed=int(cfg["seed"]),
                             store_fields=bool(mc["store_fields"]))
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid mcmc settings: {exc}") from None


def load_data(cfg: dict):
    d = cfg["data"]
    if d["pattern"] is None:
        raise UsageError("no pattern given (data.pattern or --pattern)")
    window = None
    if d["window"] is not None:
        try:
            window = Window(*map(float, d["window"]))
        except (TypeError, ValueError) as exc:
            raise UsageError(f"invalid data.window: {exc}") from None
    try:
        M, N = (int(v) for v in d["grid"])
    except (TypeError, ValueError):
        raise UsageError("data.grid must be two integers M N") from None
    pattern = load_pattern(d["pattern"], window=window)
    spec = make_grid(pattern.window, M, N)
    mask = load_mask(d["mask"], M, N) if d["mask"] is not None else None
    data = grid_bin(pattern, spec, mask)
    if data.dropped.any():
        log.info("dropped %s points in masked cells", data.dropped.tolist())
    return data


def hyperparams(cfg: dict, window: Window) -> Hyperparams:
    m = cfg["model"]
    lo, hi = m["range_fraction"]
    try:
        return Hyperparams.for_window(window, float(lo), float(hi), prior_alpha=m["prior"],
                                      **(m["hyper"] or {}))
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid model settings: {exc}") from None


def _check_K(K: int, J: int) -> None:
    if K < 0 or K > J:
        raise UsageError(f"K={K} is outside 0..{J}: the number of shared processes should not "
                         f"exceed the number of types (J={J})")


def parse_distances(spec, window: Window) -> np.ndarray:
    if spec is None:
        return summaries.default_distances(window)
    if isinstance(spec, dict):
        try:
            return np.linspace(float(spec["start"]), float(spec["stop"]), int(spec["num"]))
        except (KeyError, TypeError, ValueError):
            raise UsageError("summarize.distances mapping needs start, stop, num") from None
    return np.asarray(spec, dtype=float)


def parse_pairs(spec, J: int):
    if spec is None:
        return None
    pairs = []
    for item in spec:
        try:
            a, b = (int(v) - 1 for v in str(item).split("-"))
        except ValueError:
            raise UsageError(f"bad pair {item!r}; use e.g. '1-2'") from None
        if not (0 <= a < J and 0 <= b < J) or a == b:
            raise UsageError(f"pair {item!r} out of range for {J} types")
        pairs.append((a, b))
    return pairs


# ---------------------------------------------------------------------------
# commands


def cmd_simulate(cfg: dict, out: Path) -> None:
    sim = cfg["simulate"]
    try:
        params = preset(sim["preset"])
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    M, N = (int(v) for v in cfg["data"]["grid"])
    spec = make_grid(params.window, M, N)
    rng = np.random.default_rng(int(cfg["seed"]))
    n_rep = int(sim["replicates"])
    for r in range(n_rep):
        pattern, _ = simulate_pattern(params, spec, rng)
        name = "pattern.csv" if n_rep == 1 else f"pattern_{r:03d}.csv"
        pattern.to_csv(out / name)
        log.info("%s: counts %s", name, pattern.counts.tolist())
    write_truth(out / "truth.json", params, summaries.default_distances(params.window))


def convergence_report(archive) -> dict:
    report = {"accept_rates": archive.accept_rates, "step_sizes": archive.step_sizes,
              "flags": archive.flags, "diagnostics": archive.diagnostics, "parameters": {}}
    for name in archive.states[0].scalars():
        x = archive.trace(name)
        report["parameters"][name] = {
            "mean": float(np.mean(x)), "ess": float(effective_sample_size(x)),
            "mcse": float(mc_standard_error(x))}
    return report


def cmd_fit(cfg: dict, out: Path) -> None:
    data = load_data(cfg)
    K = int(cfg["model"]["K"])
    _check_K(K, data.J)
    hyper = hyperparams(cfg, data.spec.window)
    config = sampler_config(cfg)
    archive = run_chain(data, hyper, K, config)
    save_archive(archive, out / "archive")
    report = convergence_report(archive)
    with open(out / "convergence.json", "w") as fh:
        json.dump(report, fh, indent=2, sort_keys=True, default=str)
        fh.write("\n")
    log.info("kept %d draws", len(archive.states))


def cmd_select(cfg: dict, out: Path) -> None:
    data = load_data(cfg)
    K_range = cfg["model"]["K_range"]
    if K_range is not None:
        K_range = [int(k) for k in K_range]
        for K in K_range:
            _check_K(K, data.J)
    hyper = hyperparams(cfg, data.spec.window)
    config = sampler_config(cfg)
    table = select_K(data, hyper, config, K_range, jobs=int(cfg["jobs"]))
    table.to_csv(out / "dic.csv")
    log.info("selected K=%d", table.selected_K)
    print(f"selected K={table.selected_K}")


def cmd_summarize(cfg: dict, out: Path) -> None:
    s = cfg["summarize"]
    if s["archive"] is None:
        raise UsageError("no archive given (summarize.archive or --archive)")
    archive = load_archive(s["archive"], load_fields=False)
    d = parse_distances(s["distances"], archive.spec.window)
    ref = float(d[0] if s["reference_distance"] is None else s["reference_distance"])
    summary = summaries.summarize_archive(archive, d, parse_pairs(s["pairs"], archive.J),
                                          reference_distance=ref)
    summaries.write_summary(summary, out, svg=bool(s["svg"]))


def cmd_pool(cfg: dict, out: Path) -> None:
    p = cfg["pool"]
    if p["input"] is None:
        raise UsageError("no pooling input given (pool.input or --input)")
    groups = pooling.read_pool_csv(p["input"])
    try:
        pc = pooling.PoolConfig(int(p["iters"]), int(p["burnin"]), int(p["thin"]), int(cfg["seed"]))
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid pool settings: {exc}") from None
    rng = np.random.default_rng(int(cfg["seed"]))
    results = [pooling.pool(g, pc, rng) for g in groups]
    pooling.write_pool_outputs(results, out)


COMMANDS = {"simulate": cmd_simulate, "fit": cmd_fit, "select": cmd_select,
            "summarize": cmd_summarize, "pool": cmd_pool}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="mlgcp", description=__doc__.splitlines()[0])
    ap.add_argument("command", choices=sorted(COMMANDS))
    ap.add_argument("--config", type=Path, help="YAML config; flags override its values")
    ap.add_argument("--seed", type=int)
    ap.add_argument("--jobs", type=int)
    ap.add_argument("--out", help="output directory (created if missing)")
    ap.add_argument("--grid", type=int, nargs=2, metavar=("M", "N"))
    ap.add_argument("--K", type=int, help="number of shared processes")
    ap.add_argument("--prior", choices=("lasso", "normal"))
    ap.add_argument("--iters", type=int)
    ap.add_argument("--burnin", type=int)
    ap.add_argument("--thin", type=int)
    ap.add_argument("--preset", help=f"simulation preset: {', '.join(PRESETS)}")
    ap.add_argument("--pattern", help="type,x,y CSV to fit")
    ap.add_argument("--mask", help="0/1 exclusion raster")
    ap.add_argument("--archive", help="archive directory to summarize")
    ap.add_argument("--input", help="pooling input CSV")
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        cfg = resolve_config(args)
        out = Path(cfg["out"])
        echo_config(cfg, out)
        _setup_logging(out)
        log.info("mlgcp %s, effective config in %s", args.command, out / "config.yaml")
        COMMANDS[args.command](cfg, out)
    except UsageError as exc:
        print(f"mlgcp: error: {exc}", file=sys.stderr)
        return 2
    except (PatternError, pooling.PoolingError) as exc:
        print(f"mlgcp: input error: {exc}", file=sys.stderr)
        return 2
    except (SamplerError, DicError, FloatingPointError, OSError, ValueError) as exc:
        log.error("%s failed: %s", args.command, exc)
        print(f"mlgcp: {args.command} failed: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
