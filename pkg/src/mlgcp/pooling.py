"""Hierarchical pooling of image-level estimates across subjects.

Image ``m`` of subject ``l`` contributes a transformed estimate ``z`` with
sampling variance ``v``::

    z_lm ~ N(theta_l, v_lm + kappa^2)     theta_l ~ N(mu, omega^2)
    mu ~ N(0, 10^2)                       kappa, omega ~ half-N(0, 1)

``theta`` and ``mu`` are drawn from their normal full conditionals;
``kappa`` and ``omega`` by random-walk Metropolis on the log scale.
CCF values are pooled on the Fisher-z scale, PV values on the logit scale.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

CLIP = 1e-6
KINDS = ("fisher_z", "logit")
MU_PRIOR_SD = 10.0


class PoolingError(ValueError):
    pass


def transform(x, kind: str, diagnostics: dict | None = None):
    """Fisher-z (``atanh``) for correlations, log-odds for proportions.

    Boundary values are clipped to ``±(1 - 1e-6)`` or ``[1e-6, 1 - 1e-6]``;
    the number of clipped values is added to ``diagnostics["clipped"]``.
    """
    x = np.asarray(x, dtype=float)
    if kind == "fisher_z":
        lo, hi = -1 + CLIP, 1 - CLIP
    elif kind == "logit":
        lo, hi = CLIP, 1 - CLIP
    else:
        raise PoolingError(f"unknown transform {kind!r}; choose from {KINDS}")
    if np.isnan(x).any():
        raise PoolingError("cannot transform undefined (NaN) values")
    clipped = (x < lo) | (x > hi)
    if clipped.any():
        n = int(clipped.sum())
        log.warning("clipped %d value(s) to the open interval before %s", n, kind)
        if diagnostics is not None:
            diagnostics["clipped"] = diagnostics.get("clipped", 0) + n
        x = np.clip(x, lo, hi)
    out = np.arctanh(x) if kind == "fisher_z" else np.log(x) - np.log1p(-x)
    return float(out) if out.ndim == 0 else out


def inverse_transform(z, kind: str):
    z = np.asarray(z, dtype=float)
    if kind == "fisher_z":
        out = np.tanh(z)
    elif kind == "logit":
        out = 0.5 * (1.0 + np.tanh(0.5 * z))  # overflow-free logistic
    else:
        raise PoolingError(f"unknown transform {kind!r}; choose from {KINDS}")
    return float(out) if out.ndim == 0 else out


def image_estimate(draws, kind: str) -> tuple[float, float]:
    """Posterior median and variance of a per-draw quantity on the transformed scale."""
    z = np.atleast_1d(transform(np.asarray(draws, dtype=float), kind))
    if z.size < 2:
        raise PoolingError("need at least two draws for an image-level variance")
    return float(np.median(z)), float(np.var(z, ddof=1))


@dataclass
class PooledInput:
    subject: np.ndarray  # labels, one per image
    z: np.ndarray
    v: np.ndarray
    image: np.ndarray | None = None
    kind: str = "fisher_z"
    quantity: str = ""
    distance: float | None = None

    def __post_init__(self):
        self.subject = np.asarray(self.subject)
        self.z = np.asarray(self.z, dtype=float)
        self.v = np.asarray(self.v, dtype=float)
        if self.image is None:
            self.image = np.arange(self.z.size)
        if not (self.subject.shape == self.z.shape == self.v.shape) or self.z.ndim != 1:
            raise PoolingError("subject, z and v must be equally long vectors")
        if self.z.size == 0:
            raise PoolingError("no images")
        if not np.isfinite(self.z).all():
            raise PoolingError("z values must be finite")
        if not (self.v > 0).all():
            raise PoolingError("sampling variances v must be positive")
        if self.kind not in KINDS:
            raise PoolingError(f"unknown transform {self.kind!r}")

    @property
    def subjects(self) -> list:
        """Subject labels in first-appearance order."""
        seen = {}
        for s in self.subject.tolist():
            seen.setdefault(s, len(seen))
        return list(seen)


@dataclass
class PoolConfig:
    n_iter: int = 6000
    burn_in: int = 1000
    thin: int = 1
    seed: int = 0

    def __post_init__(self):
        if not 0 <= self.burn_in < self.n_iter or self.thin < 1:
            raise PoolingError("need 0 <= burn_in < n_iter and thin >= 1")


@dataclass
class PooledResult:
    kind: str
    subjects: list
    mu: np.ndarray
    theta: np.ndarray  # (draws, L)
    kappa: np.ndarray
    omega: np.ndarray
    #: Rao-Blackwellised posterior means: the means of theta and mu given
    #: (kappa, omega) with mu integrated out, averaged over draws
    theta_mean: np.ndarray
    mu_mean: float
    subject_means: np.ndarray
    accept: dict = field(default_factory=dict)
    quantity: str = ""
    distance: float | None = None

    def quantiles(self, levels=(0.025, 0.5, 0.975)) -> dict:
        """Posterior quantiles on the transformed and the original scale."""
        def q(x):
            z = np.quantile(x, levels)
            return {"transformed": z.tolist(),
                    "original": np.atleast_1d(inverse_transform(z, self.kind)).tolist()}

        return {
            "levels": list(levels),
            "global": q(self.mu),
            "subjects": {str(s): q(self.theta[:, i]) for i, s in enumerate(self.subjects)},
            "kappa": np.quantile(self.kappa, levels).tolist(),
            "omega": np.quantile(self.omega, levels).tolist(),
        }


def _log_halfnormal_on_log(x, y):
    # half-N(0, 1) density of exp(y) times the Jacobian exp(y); x = exp(y)
    return -0.5 * x * x + y


def _collapsed_means(idx, z, v, L, kappa2, omega2):
    """Posterior means of theta and mu given kappa and omega, mu integrated out."""
    p_img = 1.0 / (v + kappa2)
    p_subj = np.bincount(idx, weights=p_img, minlength=L)
    zbar = np.bincount(idx, weights=p_img * z, minlength=L) / p_subj
    # marginally zbar_l ~ N(mu, 1/p_subj + omega2)
    w_mu = 1.0 / (1.0 / p_subj + omega2)
    mu_mean = float(w_mu @ zbar / (w_mu.sum() + 1.0 / MU_PRIOR_SD ** 2))
    shrink = p_subj / (p_subj + 1.0 / omega2)
    return shrink * zbar + (1.0 - shrink) * mu_mean, mu_mean


def pool(data: PooledInput, config: PoolConfig | None = None, rng=None) -> PooledResult:
    config = config or PoolConfig()
    rng = rng if rng is not None else np.random.default_rng(config.seed)
    subjects = data.subjects
    L = len(subjects)
    if L < 2:
        log.warning("only one subject: the global level is informed by the prior alone")
    idx = np.array([subjects.index(s) for s in data.subject.tolist()])
    z, v = data.z, data.v
    counts = np.bincount(idx, minlength=L)
    subject_means = np.bincount(idx, weights=z, minlength=L) / counts

    mu = float(np.mean(subject_means))
    theta = subject_means.copy()
    log_kappa, log_omega = math.log(0.1), math.log(max(np.std(subject_means), 0.1))
    steps = {"kappa": 0.5, "omega": 0.5}
    acc = {"kappa": 0, "omega": 0}

    n_keep = (config.n_iter - config.burn_in) // config.thin
    out_mu = np.empty(n_keep)
    out_theta = np.empty((n_keep, L))
    out_kappa = np.empty(n_keep)
    out_omega = np.empty(n_keep)
    rb_theta = np.zeros(L)
    rb_mu = 0.0
    r = 0

    def loglik_kappa(lk):
        var = v + math.exp(2 * lk)
        return float(-0.5 * np.sum(np.log(var) + (z - theta[idx]) ** 2 / var))

    def loglik_omega(lo):
        w2 = math.exp(2 * lo)
        return float(-0.5 * np.sum(math.log(w2) + (theta - mu) ** 2 / w2))

    for t in range(config.n_iter):
        kappa2, omega2 = math.exp(2 * log_kappa), math.exp(2 * log_omega)
        # theta_l | rest
        prec_img = 1.0 / (v + kappa2)
        prec = np.bincount(idx, weights=prec_img, minlength=L) + 1.0 / omega2
        num = np.bincount(idx, weights=prec_img * z, minlength=L) + mu / omega2
        cond_mean = num / prec
        theta = cond_mean + rng.standard_normal(L) / np.sqrt(prec)
        # mu | theta, omega
        prec_mu = L / omega2 + 1.0 / MU_PRIOR_SD ** 2
        mu = float(theta.sum() / omega2 / prec_mu + rng.standard_normal() / math.sqrt(prec_mu))
        # log kappa, log omega by random-walk Metropolis
        for name in ("kappa", "omega"):
            cur = log_kappa if name == "kappa" else log_omega
            f = loglik_kappa if name == "kappa" else loglik_omega
            prop = cur + steps[name] * rng.standard_normal()
            log_r = (f(prop) + _log_halfnormal_on_log(math.exp(prop), prop)
                     - f(cur) - _log_halfnormal_on_log(math.exp(cur), cur))
            accept = math.log(rng.uniform()) < log_r
            if accept:
                if name == "kappa":
                    log_kappa = prop
                else:
                    log_omega = prop
            if t < config.burn_in:
                steps[name] *= math.exp((t + 1) ** -0.6 * ((1.0 if accept else 0.0) - 0.44))
            else:
                acc[name] += accept
        if t >= config.burn_in and (t - config.burn_in + 1) % config.thin == 0 and r < n_keep:
            out_mu[r], out_theta[r] = mu, theta
            out_kappa[r], out_omega[r] = math.exp(log_kappa), math.exp(log_omega)
            t_mean, m_mean = _collapsed_means(idx, z, v, L, out_kappa[r] ** 2, out_omega[r] ** 2)
            rb_theta += t_mean
            rb_mu += m_mean
            r += 1
    n_post = config.n_iter - config.burn_in
    return PooledResult(data.kind, subjects, out_mu, out_theta, out_kappa, out_omega,
                        rb_theta / max(r, 1), rb_mu / max(r, 1), subject_means,
                        {k: acc[k] / n_post for k in acc}, data.quantity, data.distance)


# ---------------------------------------------------------------------------
# files

POOL_COLUMNS = ("subject", "image", "z", "v", "kind", "pair_or_type", "distance")


def read_pool_csv(path) -> list:
    """Read pooled inputs, one :class:`PooledInput` per (kind, quantity, distance)."""
    groups: dict = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = set(POOL_COLUMNS) - set(reader.fieldnames or ())
        if missing:
            raise PoolingError(f"{path}: missing columns {sorted(missing)}")
        for lineno, row in enumerate(reader, start=2):
            try:
                key = (row["kind"].strip(), row["pair_or_type"].strip(), float(row["distance"]))
                rec = (row["subject"].strip(), row["image"].strip(), float(row["z"]), float(row["v"]))
            except ValueError as exc:
                raise PoolingError(f"{path}:{lineno}: {exc}") from None
            groups.setdefault(key, []).append(rec)
    if not groups:
        raise PoolingError(f"{path}: no rows")
    out = []
    for (kind, quantity, distance), recs in groups.items():
        s, im, z, v = zip(*recs)
        out.append(PooledInput(np.array(s), np.array(z), np.array(v), np.array(im), kind,
                               quantity, distance))
    return out


def write_pool_outputs(results: list, directory) -> None:
    """``pooled.json`` with quantiles per group plus ``pooled_draws.csv``."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    summary = []
    for res in results:
        entry = {"kind": res.kind, "quantity": res.quantity, "distance": res.distance,
                 "accept": res.accept,
                 "mu_posterior_mean": res.mu_mean,
                 "theta_posterior_mean": res.theta_mean.tolist()}
        entry.update(res.quantiles())
        summary.append(entry)
    with open(d / "pooled.json", "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    with open(d / "pooled_draws.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["kind", "quantity", "distance", "draw", "parameter", "value"])
        for res in results:
            head = [res.kind, res.quantity, repr(res.distance)]
            for r in range(res.mu.size):
                w.writerow(head + [r, "mu", repr(float(res.mu[r]))])
                for i, s in enumerate(res.subjects):
                    w.writerow(head + [r, f"theta[{s}]", repr(float(res.theta[r, i]))])
