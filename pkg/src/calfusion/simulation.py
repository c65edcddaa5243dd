"""Monte Carlo study on the synthetic two-covariate design.

Data-generating process (``V1, V2`` independent standard normal)::

    W | V  ~ N(-0.5 + 1.5 V1 + V2 + 3 V1 V2, 1)
    R | V  ~ Bernoulli(expit(0.3 - 0.75 V1 + 0.75 V2))
    Y | W, V ~ N(1 + 2 W + 2 V1 - 1.5 V2, 0.4)

The working-model bank is ``(pi1, pi2, a1, a2)``: correct and misspecified
propensity models followed by correct and misspecified imputation models.
Estimator labels such as ``"MR-1011"`` select a subset with a 0/1 mask over
those four positions.
"""

from __future__ import annotations

import csv
import io
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit
from scipy.stats import norm

from .data import FusedDataset
from .errors import CalfusionError, ConfigError
from .estimators import default_t, get_link
from .models import ModelSpec, design_from_v
from .pipeline import ModelBank, estimate_dr, estimate_mr, fit_bank, stream

THETA0 = np.array([1.0, 2.0, 2.0, -1.5])
V_NAMES = ("V1", "V2")
W_NAMES = ("W",)
PROPENSITY_SPECS = ("1 + V1 + V2", "1 + V1")
IMPUTATION_SPECS = ("1 + V1 + V2 + V1:V2", "1 + V1 + V1:V2")
T_SPEC = "1 + V1 + V2 + V1:V2"
Y_VARIANCE = 0.4


def y_noise_sd(reading: str) -> float:
    """SD of the outcome noise under the two readings of ``N(., 0.4)``."""
    if reading == "variance":
        return math.sqrt(Y_VARIANCE)
    if reading == "sd":
        return Y_VARIANCE
    raise ConfigError(f"y_noise must be 'variance' or 'sd', got {reading!r}")


def true_propensity(v: np.ndarray) -> np.ndarray:
    v = np.atleast_2d(v)
    return expit(0.3 - 0.75 * v[:, 0] + 0.75 * v[:, 1])


def true_w_mean(v: np.ndarray) -> np.ndarray:
    v = np.atleast_2d(v)
    return -0.5 + 1.5 * v[:, 0] + v[:, 1] + 3 * v[:, 0] * v[:, 1]


def generate_dataset(n: int, seed=None, *, y_noise: str = "variance") -> FusedDataset:
    if n < 10:
        raise ConfigError("n must be at least 10")
    rng = np.random.default_rng(seed)
    v = rng.standard_normal((n, 2))
    w = true_w_mean(v) + rng.standard_normal(n)
    r = (rng.random(n) < true_propensity(v)).astype(float)
    y = THETA0[0] + THETA0[1] * w + THETA0[2] * v[:, 0] + THETA0[3] * v[:, 1] + y_noise_sd(y_noise) * rng.standard_normal(n)
    return FusedDataset(
        r, v, np.where(r == 1, y, np.nan), np.where(r == 0, w, np.nan)[:, None], V_NAMES, W_NAMES,
    )


def simulation_bank() -> ModelBank:
    return ModelBank.parse(PROPENSITY_SPECS, IMPUTATION_SPECS, V_NAMES)


def parse_estimator(label: str) -> tuple[str, list[int], list[int]]:
    """``"MR-1011"`` -> ``("MR", [0], [0, 1])``."""
    try:
        method, mask = label.split("-")
    except ValueError:
        raise ConfigError(f"estimator label {label!r} is not METHOD-MASK") from None
    method = method.upper()
    if method not in ("MR", "DR") or len(mask) != 4 or set(mask) - {"0", "1"} or "1" not in mask:
        raise ConfigError(f"bad estimator label {label!r}")
    props = [j for j in range(2) if mask[j] == "1"]
    imps = [k for k in range(2) if mask[2 + k] == "1"]
    if method == "DR" and (len(props) != 1 or len(imps) != 1):
        raise ConfigError(f"{label}: the doubly robust estimator needs one model of each kind")
    return method, props, imps


@dataclass(frozen=True)
class SimConfig:
    n: int
    reps: int
    seed: int = 20240501
    estimators: tuple[str, ...] = ("MR-1111",)
    D: int = 100
    ci_level: float = 0.95
    y_noise: str = "variance"
    workers: int = 1

    def __post_init__(self):
        if self.reps < 1:
            raise ConfigError("reps must be >= 1")
        if self.n < 10:
            raise ConfigError("n must be >= 10")
        if self.D < 1:
            raise ConfigError("D must be >= 1")
        if not self.estimators:
            raise ConfigError("no estimators configured")
        y_noise_sd(self.y_noise)
        for label in self.estimators:
            parse_estimator(label)


@dataclass
class SimSummary:
    config: SimConfig
    raw: list[dict]  # one record per (rep, estimator, parameter)
    failures: list[dict]  # one record per failed (rep, estimator)
    rows: list[dict] = field(default_factory=list)

    def __post_init__(self):
        if not self.rows:
            self.rows = aggregate(self.raw, self.failures, self.config)

    def cell(self, estimator: str, param: int) -> dict:
        for row in self.rows:
            if row["estimator"] == estimator and row["param"] == param:
                return row
        raise KeyError((estimator, param))

    def estimates(self, estimator: str) -> np.ndarray:
        """(reps_ok, p) matrix of raw estimates for one estimator."""
        return _matrix(self.raw, estimator, "estimate")

    def standard_errors(self, estimator: str) -> np.ndarray:
        return _matrix(self.raw, estimator, "se")

    def summary_csv(self) -> str:
        buf = io.StringIO()
        cols = ["estimator", "n", "param", "label", "bias_x100", "rmse_x100", "cp_x100", "n_ok", "n_failed"]
        wr = csv.writer(buf, lineterminator="\n")
        wr.writerow(cols)
        for row in self.rows:
            wr.writerow([
                row["estimator"], self.config.n, f"theta{row['param'] + 1}", row["label"],
                f"{100 * row['bias']:.4f}", f"{100 * row['rmse']:.4f}", f"{100 * row['cp']:.2f}",
                row["n_ok"], row["n_failed"],
            ])
        return buf.getvalue()

    def raw_csv(self) -> str:
        buf = io.StringIO()
        cols = ["rep", "estimator", "param", "estimate", "se", "ci_low", "ci_high", "hit"]
        wr = csv.DictWriter(buf, fieldnames=cols, lineterminator="\n", extrasaction="ignore")
        wr.writeheader()
        for rec in self.raw:
            wr.writerow({k: (format(v, ".17g") if isinstance(v, float) else v) for k, v in rec.items()})
        return buf.getvalue()

    def failures_csv(self) -> str:
        buf = io.StringIO()
        wr = csv.DictWriter(buf, fieldnames=["rep", "estimator", "error", "message"], lineterminator="\n")
        wr.writeheader()
        wr.writerows(self.failures)
        return buf.getvalue()

    def table(self) -> str:
        """Aligned text table; bias, RMSE and coverage multiplied by 100."""
        ests = list(dict.fromkeys(r["estimator"] for r in self.rows))
        p = len(THETA0)
        head = f"{'Estimator':<10}" + "".join(f"| {'theta' + str(k + 1):^20}" for k in range(p))
        sub = f"{'':<10}" + "".join(f"| {'Bias':>6}{'RMSE':>7}{'CP':>7}" for _ in range(p))
        lines = [f"n = {self.config.n}, reps = {self.config.reps}", head, sub, "-" * len(sub)]
        for est in ests:
            line = f"{est:<10}"
            for k in range(p):
                c = self.cell(est, k)
                line += f"| {100 * c['bias']:>6.0f}{100 * c['rmse']:>7.0f}{100 * c['cp']:>7.1f}"
            lines.append(line)
        n_fail = len(self.failures)
        lines.append(f"failed (rep, estimator) pairs: {n_fail}")
        return "\n".join(lines)


def _matrix(raw, estimator, key):
    recs = [r for r in raw if r["estimator"] == estimator]
    reps = sorted({r["rep"] for r in recs})
    p = 1 + max(r["param"] for r in recs)
    out = np.full((len(reps), p), np.nan)
    pos = {rep: i for i, rep in enumerate(reps)}
    for r in recs:
        out[pos[r["rep"]], r["param"]] = r[key]
    return out


def aggregate(raw, failures, config: SimConfig) -> list[dict]:
    labels = ["intercept", "W", "V1", "V2"]
    rows = []
    for est in config.estimators:
        n_failed = sum(1 for f in failures if f["estimator"] == est)
        recs = [r for r in raw if r["estimator"] == est]
        for k in range(len(THETA0)):
            vals = np.array([r["estimate"] for r in recs if r["param"] == k])
            hits = np.array([r["hit"] for r in recs if r["param"] == k], dtype=float)
            if vals.size:
                err = vals - THETA0[k]
                bias, rmse, cp = float(err.mean()), float(np.sqrt(np.mean(err**2))), float(hits.mean())
            else:
                bias = rmse = cp = math.nan
            rows.append({
                "estimator": est, "param": k, "label": labels[k], "bias": bias, "rmse": rmse, "cp": cp,
                "n_ok": int(vals.size), "n_failed": n_failed,
            })
    return rows


def run_replication(config: SimConfig, rep: int):
    """One replication: generate, fit the needed models, run every estimator."""
    data = generate_dataset(config.n, stream(config.seed, rep, 0), y_noise=config.y_noise)
    t_fn = default_t(data, ModelSpec.parse(T_SPEC, V_NAMES))
    link = get_link("identity")
    parsed = {label: parse_estimator(label) for label in config.estimators}
    need_p = sorted({j for _, ps, _ in parsed.values() for j in ps})
    need_i = sorted({k for _, _, ims in parsed.values() for k in ims})
    full = simulation_bank()
    bank = ModelBank(tuple(full.propensity[j] for j in need_p), tuple(full.imputation[k] for k in need_i))
    raw, failures = [], []
    try:
        fitted = fit_bank(data, bank, t_fn, link, D=config.D,
                          draw_rngs=[stream(config.seed, rep, 1, k) for k in need_i])
    except CalfusionError as exc:
        for label in config.estimators:
            failures.append({"rep": rep, "estimator": label, "error": type(exc).__name__, "message": str(exc)})
        return raw, failures
    pos_p = {j: a for a, j in enumerate(need_p)}
    pos_i = {k: a for a, k in enumerate(need_i)}
    z = norm.ppf(0.5 + config.ci_level / 2)
    for label in config.estimators:
        method, ps, ims = parsed[label]
        sub = fitted.subset([pos_p[j] for j in ps], [pos_i[k] for k in ims])
        try:
            if method == "MR":
                report = estimate_mr(data, sub, t_fn, link, variance="plugin" if ps else None)
            else:
                report = estimate_dr(data, sub, t_fn, link)
        except (CalfusionError, np.linalg.LinAlgError) as exc:
            failures.append({"rep": rep, "estimator": label, "error": type(exc).__name__, "message": str(exc)})
            continue
        se = report.se if report.se is not None else np.full(len(THETA0), np.nan)
        for k in range(len(THETA0)):
            est = float(report.theta_hat[k])
            lo, hi = est - z * float(se[k]), est + z * float(se[k])
            raw.append({
                "rep": rep, "estimator": label, "param": k, "estimate": est, "se": float(se[k]),
                "ci_low": lo, "ci_high": hi, "hit": int(lo <= THETA0[k] <= hi),
            })
    return raw, failures


def _run_chunk(args):
    config, reps = args
    raw, failures = [], []
    for rep in reps:
        r, f = run_replication(config, rep)
        raw.extend(r)
        failures.extend(f)
    return raw, failures


def run_monte_carlo(config: SimConfig, *, workers=None, progress=None) -> SimSummary:
    """Run ``config.reps`` replications and aggregate bias, RMSE and CI coverage.

    Replications with solver failures are excluded from the aggregates and
    listed in ``SimSummary.failures``.  Results do not depend on ``workers``.
    """
    workers = config.workers if workers is None else workers
    reps = list(range(config.reps))
    chunk = max(1, min(50, config.reps // max(1, 4 * workers)))
    chunks = [(config, reps[i:i + chunk]) for i in range(0, len(reps), chunk)]
    raw, failures = [], []
    if workers <= 1:
        results = map(_run_chunk, chunks)
    else:
        pool = ProcessPoolExecutor(max_workers=workers)
        results = pool.map(_run_chunk, chunks)
    try:
        for i, (r, f) in enumerate(results):
            raw.extend(r)
            failures.extend(f)
            if progress is not None:
                progress(min((i + 1) * chunk, config.reps), config.reps)
    finally:
        if workers > 1:
            pool.shutdown()
    raw.sort(key=lambda x: (x["rep"], config.estimators.index(x["estimator"]), x["param"]))
    failures.sort(key=lambda x: (x["rep"], config.estimators.index(x["estimator"])))
    return SimSummary(config, raw, failures)


def efficiency_bound_oracle(mc_draws: int = 1_000_000, seed=None, *, y_noise: str = "variance") -> np.ndarray:
    """Efficiency bound ``Gamma^{-1} Omega Gamma^{-T}`` under the true design.

    With the identity link and ``t(V) = (1, V1, V2, V1 V2)``::

        Var(Y t | V) = t t' (theta_W^2 Var(W | V) + sigma_Y^2)
        Var(s | V)   = t t' theta_W^2 Var(W | V)
        Gamma        = -E[t (1, E(W | V), V1, V2)']

    and the outer expectations are averaged over ``mc_draws`` draws of V.
    """
    rng = np.random.default_rng(seed)
    v = rng.standard_normal((mc_draws, 2))
    t = design_from_v(ModelSpec.parse(T_SPEC, V_NAMES), v)
    pi = true_propensity(v)
    var_w = 1.0
    sig2 = y_noise_sd(y_noise) ** 2
    var_yt = THETA0[1] ** 2 * var_w + sig2
    var_s = THETA0[1] ** 2 * var_w
    weight = var_yt / pi + var_s / (1 - pi)
    omega = (t * weight[:, None]).T @ t / mc_draws
    xbar = np.column_stack([np.ones(mc_draws), true_w_mean(v), v])
    gamma = -t.T @ xbar / mc_draws
    g_inv = np.linalg.inv(gamma)
    bound = g_inv @ omega @ g_inv.T
    return 0.5 * (bound + bound.T)


__all__ = [
    "THETA0", "SimConfig", "SimSummary", "generate_dataset", "run_monte_carlo", "run_replication",
    "efficiency_bound_oracle", "parse_estimator", "simulation_bank",
]
