"""Estimating equations for the regression parameter.

The target ``theta`` is laid out as ``(intercept, W..., V...)`` so that the
linear predictor for a row is ``theta @ (1, W, V)``.  Three systems share
the same machinery:

* the imputation-only equation for one imputation model (``solve_theta_k``),
* the calibration-weighted equation (``solve_mr``),
* the augmented inverse-propensity equation (``solve_dr``).

Each is written as ``U(theta) = sum_i c_i * t_i(theta) * e_i(theta)`` where
``e_i`` is a scalar residual-like quantity, which gives a single analytic
Jacobian routine for all three.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np
from scipy.special import expit
from scipy.stats import norm

from . import kernels
from .data import FusedDataset
from .errors import (
    DimensionError,
    ExtremeWeightWarning,
    NonconvergenceError,
    SingularJacobianError,
)
from .models import ImputationFit, ModelSpec, PropensityFit, design_from_v, draw_imputations, predict_propensity


# ---------------------------------------------------------------------------
# links and t-functions


@dataclass(frozen=True)
class OutcomeLink:
    kind: str
    mu: Callable[[np.ndarray], np.ndarray]
    mu_prime: Callable[[np.ndarray], np.ndarray]
    code: int
    # maps an outcome onto the linear-predictor scale for warm starts
    to_linear: Callable[[np.ndarray], np.ndarray]


def _logit_clip(y):
    y = np.clip(y, 1e-3, 1 - 1e-3)
    return np.log(y / (1 - y))


LINKS = {
    "identity": OutcomeLink("identity", lambda x: x, np.ones_like, kernels.IDENTITY, lambda y: y),
    "logistic": OutcomeLink(
        "logistic", expit, lambda x: expit(x) * (1 - expit(x)), kernels.LOGISTIC, _logit_clip
    ),
    "exponential": OutcomeLink(
        "exponential", np.exp, np.exp, kernels.EXPONENTIAL, lambda y: np.log(np.maximum(y, 1e-3))
    ),
}


def get_link(name: str) -> OutcomeLink:
    try:
        return LINKS[name]
    except KeyError:
        raise ValueError(f"unsupported link {name!r}; supported links: {sorted(LINKS)}") from None


@dataclass(frozen=True)
class TFunction:
    """Instrument function ``t(V; theta)`` with values in R^p.

    Either a :class:`ModelSpec` (theta-free design expansion of V) or a
    callable ``fn(v, theta) -> (n, p)`` with optional ``jac(v, theta) ->
    (n, p, p)``; a missing ``jac`` falls back to central differences.
    """

    p: int
    spec: Optional[ModelSpec] = None
    fn: Optional[Callable] = None
    jac: Optional[Callable] = None

    def __post_init__(self):
        if (self.spec is None) == (self.fn is None):
            raise ValueError("give exactly one of spec or fn")
        if self.spec is not None and len(self.spec) != self.p:
            raise DimensionError(f"t spec has {len(self.spec)} terms but p = {self.p}")

    @property
    def theta_free(self) -> bool:
        return self.spec is not None

    def values(self, v: np.ndarray, theta=None) -> np.ndarray:
        if self.spec is not None:
            return design_from_v(self.spec, v)
        out = np.asarray(self.fn(v, theta), dtype=float)
        if out.shape != (len(v), self.p):
            raise DimensionError(f"t returned shape {out.shape}, expected {(len(v), self.p)}")
        return out

    def jacobian(self, v: np.ndarray, theta) -> np.ndarray:
        if self.theta_free:
            return np.zeros((len(v), self.p, self.p))
        if self.jac is not None:
            return np.asarray(self.jac(v, theta), dtype=float)
        eps = 1e-6
        out = np.empty((len(v), self.p, self.p))
        for k in range(self.p):
            e = np.zeros(self.p)
            e[k] = eps * max(1.0, abs(theta[k]))
            out[:, :, k] = (self.values(v, theta + e) - self.values(v, theta - e)) / (2 * e[k])
        return out


def n_params(data: FusedDataset) -> int:
    return 1 + len(data.w_names) + len(data.v_names)


def param_labels(data: FusedDataset) -> list[str]:
    return ["intercept"] + [f"W:{c}" for c in data.w_names] + [f"V:{c}" for c in data.v_names]


def default_t(data: FusedDataset, v_spec: ModelSpec) -> TFunction:
    """Theta-free t: the design expansion of ``v_spec`` at V."""
    p = n_params(data)
    if len(v_spec) != p:
        raise DimensionError(f"t spec has {len(v_spec)} terms; theta has dimension {p}")
    return TFunction(p=p, spec=v_spec)


def regressors(w: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Rows ``(1, W, V)`` matching the theta layout."""
    return np.column_stack([np.ones(len(v)), w, v])


# ---------------------------------------------------------------------------
# reports


@dataclass(frozen=True)
class EstimateReport:
    theta_hat: np.ndarray
    method: str
    labels: tuple[str, ...]
    variance: Optional[np.ndarray] = None
    level: float = 0.95
    solver: dict = field(default_factory=dict)
    diagnostics: dict = field(default_factory=dict)
    warnings: tuple[str, ...] = ()

    @property
    def se(self) -> Optional[np.ndarray]:
        if self.variance is None:
            return None
        return np.sqrt(np.clip(np.diag(self.variance), 0.0, None))

    @property
    def ci(self) -> Optional[np.ndarray]:
        """``(p, 2)`` array of Wald limits at ``level``."""
        se = self.se
        if se is None:
            return None
        z = norm.ppf(0.5 + self.level / 2)
        return np.column_stack([self.theta_hat - z * se, self.theta_hat + z * se])

    def with_variance(self, cov, /, **diagnostics) -> "EstimateReport":
        cov = np.asarray(cov, dtype=float)
        cov = 0.5 * (cov + cov.T)
        diag = dict(self.diagnostics)
        diag.update(diagnostics)
        return replace(self, variance=cov, diagnostics=diag)

    def to_dict(self) -> dict:
        out = {
            "method": self.method,
            "labels": list(self.labels),
            "theta_hat": self.theta_hat.tolist(),
            "level": self.level,
            "solver": _jsonable(self.solver),
            "diagnostics": _jsonable(self.diagnostics),
            "warnings": list(self.warnings),
        }
        if self.variance is not None:
            out["variance"] = self.variance.tolist()
            out["se"] = self.se.tolist()
            out["ci"] = self.ci.tolist()
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "EstimateReport":
        var = d.get("variance")
        return cls(
            theta_hat=np.asarray(d["theta_hat"], dtype=float),
            method=d["method"],
            labels=tuple(d["labels"]),
            variance=None if var is None else np.asarray(var, dtype=float),
            level=d.get("level", 0.95),
            solver=d.get("solver", {}),
            diagnostics=d.get("diagnostics", {}),
            warnings=tuple(d.get("warnings", ())),
        )

    def table(self) -> str:
        lines = [f"{self.method} estimate"]
        se, ci = self.se, self.ci
        head = f"{'':>4} {'parameter':<16}{'estimate':>12}"
        if se is not None:
            head += f"{'se':>12}{'ci_low':>12}{'ci_high':>12}"
        lines.append(head)
        for k, lab in enumerate(self.labels):
            row = f"{'t' + str(k + 1):>4} {lab:<16}{self.theta_hat[k]:>12.5f}"
            if se is not None:
                row += f"{se[k]:>12.5f}{ci[k, 0]:>12.5f}{ci[k, 1]:>12.5f}"
            lines.append(row)
        return "\n".join(lines)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


# ---------------------------------------------------------------------------
# estimating systems


class _DrawMoments:
    """Averages over imputation draws of mu(theta @ (1, W^d, V)) and its gradient."""

    def __init__(self, draws: np.ndarray, v: np.ndarray, link: OutcomeLink):
        self.draws = np.ascontiguousarray(draws, dtype=float)
        self.wbar = self.draws.mean(axis=1)
        self.v = v
        self.link = link
        self.q = draws.shape[2]

    def __call__(self, theta):
        q = self.q
        th_w = theta[1:1 + q]
        base = theta[0] + self.v @ theta[1 + q:]
        if self.link.code == kernels.IDENTITY:
            mean = base + self.wbar @ th_w
            grad = regressors(self.wbar, self.v)
            return mean, grad
        mu_bar, dmu_bar, dmu_w = kernels.link_draw_moments(base, self.draws, np.ascontiguousarray(th_w), self.link.code)
        grad = np.column_stack([dmu_bar, dmu_w, dmu_bar[:, None] * self.v])
        return mu_bar, grad


class EstimatingSystem:
    """``U(theta) = sum_i c_i t_i(theta) e_i(theta)``; subclasses supply ``e`` and ``de``."""

    def __init__(self, data: FusedDataset, t_fn: TFunction, link: OutcomeLink, coef):
        if t_fn.p != n_params(data):
            raise DimensionError(f"t has dimension {t_fn.p}, theta has {n_params(data)}")
        self.data = data
        self.t_fn = t_fn
        self.link = link
        self.coef = np.asarray(coef, dtype=float)
        self.p = t_fn.p
        self.aux = data.auxiliary
        self.prim = data.primary
        self.x_aux = regressors(data.w[self.aux], data.v[self.aux])
        self.y = np.where(self.prim, data.y, 0.0)
        self._t = t_fn.values(data.v) if t_fn.theta_free else None

    @property
    def linear(self) -> bool:
        return self.link.code == kernels.IDENTITY and self.t_fn.theta_free

    def t(self, theta):
        return self._t if self._t is not None else self.t_fn.values(self.data.v, theta)

    def _mu_aux(self, theta):
        """mu and mu' * x at auxiliary rows, scattered to length n (zeros elsewhere)."""
        n = self.data.n
        eta = self.x_aux @ theta
        mu = np.zeros(n)
        dmu = np.zeros((n, self.p))
        mu[self.aux] = self.link.mu(eta)
        dmu[self.aux] = self.link.mu_prime(eta)[:, None] * self.x_aux
        return mu, dmu

    def contributions(self, theta) -> np.ndarray:
        """Per-row terms ``c_i t_i e_i`` (shape ``(n, p)``)."""
        e, _ = self.pieces(theta, need_grad=False)
        return (self.coef * e)[:, None] * self.t(theta)

    def residual(self, theta) -> np.ndarray:
        e, _ = self.pieces(theta, need_grad=False)
        return self.t(theta).T @ (self.coef * e)

    def jacobian(self, theta) -> np.ndarray:
        e, de = self.pieces(theta, need_grad=True)
        jac = self.t(theta).T @ (self.coef[:, None] * de)
        if not self.t_fn.theta_free:
            jac += np.einsum("n,npk->pk", self.coef * e, self.t_fn.jacobian(self.data.v, theta))
        return jac

    def pieces(self, theta, need_grad):  # pragma: no cover - abstract
        raise NotImplementedError


class ImputationSystem(EstimatingSystem):
    """Sample version of the moment equation with E(Y | V) replaced by the
    average of mu over draws from one imputation model."""

    def __init__(self, data, draws, t_fn, link):
        super().__init__(data, t_fn, link, np.full(data.n, 1.0 / data.n))
        self.moments = _DrawMoments(draws, data.v, link)

    def pieces(self, theta, need_grad):
        ebar, debar = self.moments(theta)
        mu, dmu = self._mu_aux(theta)
        e = np.where(self.prim, self.y - ebar, ebar - mu)
        if not need_grad:
            return e, None
        de = np.where(self.prim[:, None], -debar, debar - dmu)
        return e, de


class CalibratedSystem(EstimatingSystem):
    """``sum_prim w1_i Y_i t_i - sum_aux w0_i mu_i t_i``."""

    def __init__(self, data, omega1, omega0, t_fn, link):
        coef = np.zeros(data.n)
        coef[data.primary] = omega1
        coef[data.auxiliary] = omega0
        super().__init__(data, t_fn, link, coef)

    def pieces(self, theta, need_grad):
        mu, dmu = self._mu_aux(theta)
        e = np.where(self.prim, self.y, -mu)
        return e, (-dmu if need_grad else None)


class AugmentedIPWSystem(EstimatingSystem):
    """Augmented inverse-propensity moment built from the efficient influence function."""

    def __init__(self, data, pi, draws, t_fn, link):
        super().__init__(data, t_fn, link, np.full(data.n, 1.0 / data.n))
        self.a = np.where(data.primary, 1.0 / pi, 0.0)
        self.b = np.where(data.auxiliary, 1.0 / (1.0 - pi), 0.0)
        self.moments = _DrawMoments(draws, data.v, link)

    def pieces(self, theta, need_grad):
        ebar, debar = self.moments(theta)
        mu, dmu = self._mu_aux(theta)
        e = self.a * (self.y - ebar) - self.b * (mu - ebar)
        if not need_grad:
            return e, None
        de = -self.a[:, None] * debar - self.b[:, None] * (dmu - debar)
        return e, de


# ---------------------------------------------------------------------------
# solver


@dataclass
class SolveInfo:
    converged: bool
    iterations: int
    residual_norm: float
    start: str = "zero"

    def as_dict(self):
        return {
            "converged": self.converged,
            "iterations": self.iterations,
            "residual_norm": self.residual_norm,
            "start": self.start,
        }


def _newton_step(jac, res):
    try:
        cond = np.linalg.cond(jac)
    except np.linalg.LinAlgError:
        cond = np.inf
    if not np.isfinite(cond) or cond > 1e13:
        raise SingularJacobianError(f"estimating-equation Jacobian is singular (cond={cond:.3g})")
    return np.linalg.solve(jac, -res)


def newton_solve(system, theta0, *, tol=1e-10, max_iter=100):
    """Damped Newton on ``system.residual``; backtracks on the residual norm."""
    theta = np.array(theta0, dtype=float)
    res = system.residual(theta)
    norm0 = np.linalg.norm(res)
    for it in range(1, max_iter + 1):
        if np.max(np.abs(res)) < tol:
            return theta, SolveInfo(True, it - 1, float(np.max(np.abs(res))))
        step = _newton_step(system.jacobian(theta), res)
        t = 1.0
        for _ in range(40):
            cand = theta + t * step
            res_new = system.residual(cand)
            norm_new = np.linalg.norm(res_new)
            if np.isfinite(norm_new) and norm_new <= (1 - 1e-4 * t) * norm0:
                break
            t *= 0.5
        else:
            # no decrease available: at the floating-point floor or stuck
            break
        theta, res, norm0 = cand, res_new, norm_new
    conv = bool(np.max(np.abs(res)) < tol)
    return theta, SolveInfo(conv, it, float(np.max(np.abs(res))))


def solve_system(system: EstimatingSystem, starts=None, *, tol=1e-10, max_iter=100, force_newton=False):
    """Root of ``system``; linear systems are solved in closed form.

    Non-linear systems run Newton from every start in ``starts`` (dict of
    label -> vector).  The first converged root is returned; two converged
    roots further apart than 1e-6 raise :class:`NonconvergenceError`.
    """
    p = system.p
    if system.linear and not force_newton:
        zero = np.zeros(p)
        theta = _newton_step(system.jacobian(zero), system.residual(zero))
        resid = float(np.max(np.abs(system.residual(theta))))
        return theta, SolveInfo(True, 1, resid, start="closed-form")
    if starts is None:
        starts = {"zero": np.zeros(p)}
    found = []
    errors = []
    for label, start in starts.items():
        try:
            theta, info = newton_solve(system, start, tol=tol, max_iter=max_iter)
        except SingularJacobianError as exc:
            errors.append(exc)
            continue
        if info.converged:
            info.start = label
            found.append((theta, info))
    if not found:
        if errors:
            raise errors[0]
        raise NonconvergenceError(f"Newton failed from starts {list(starts)}")
    theta, info = found[0]
    for other, _ in found[1:]:
        if np.max(np.abs(other - theta)) > 1e-6:
            raise NonconvergenceError("Newton starts converged to different roots")
    return theta, info


def _ols_start(data: FusedDataset, draws: np.ndarray, link: OutcomeLink) -> np.ndarray:
    """Primary-sample OLS of the linearised outcome on (1, mean imputed W, V)."""
    prim = data.primary
    x = regressors(draws[prim].mean(axis=1), data.v[prim])
    coef, *_ = np.linalg.lstsq(x, link.to_linear(data.y[prim]), rcond=None)
    return coef


# ---------------------------------------------------------------------------
# public operations


def solve_theta_k(imp_fit: ImputationFit, data: FusedDataset, t_fn: TFunction, link: OutcomeLink,
                  D: int = 100, rng=None, *, draws=None, return_info=False):
    """Imputation-only estimate of theta under one imputation model."""
    if draws is None:
        draws = draw_imputations(imp_fit, data, D, rng)
    system = ImputationSystem(data, draws, t_fn, link)
    starts = {"zero": np.zeros(system.p), "ols": _ols_start(data, draws, link)}
    theta, info = solve_system(system, starts)
    return (theta, info) if return_info else theta


def solve_mr(calib, data: FusedDataset, t_fn: TFunction, link: OutcomeLink, *, init=None) -> EstimateReport:
    """Calibration-weighted estimate from a :class:`CalibrationResult`."""
    system = CalibratedSystem(data, calib.omega1, calib.omega0, t_fn, link)
    starts = {"zero": np.zeros(system.p)}
    if init is not None:
        starts["init"] = np.asarray(init, dtype=float)
    theta, info = solve_system(system, starts)
    return EstimateReport(
        theta_hat=theta, method="MR", labels=tuple(param_labels(data)), solver=info.as_dict(),
        diagnostics={"calibration": calib.diagnostics},
    )


def solve_dr(prop_fit: PropensityFit, imp_fit: ImputationFit, data: FusedDataset, t_fn: TFunction,
             link: OutcomeLink, D: int = 100, rng=None, *, draws=None, extreme=1e3) -> EstimateReport:
    """Augmented inverse-propensity (doubly robust) estimate with one model of each kind."""
    if draws is None:
        draws = draw_imputations(imp_fit, data, D, rng)
    pi = predict_propensity(prop_fit, data)
    notes = []
    inv = np.where(data.primary, 1.0 / pi, 1.0 / (1.0 - pi))
    if inv.max() > extreme:
        msg = f"max inverse propensity weight {inv.max():.3g} exceeds {extreme:g}"
        warnings.warn(msg, ExtremeWeightWarning, stacklevel=2)
        notes.append(f"ExtremeWeightWarning: {msg}")
    system = AugmentedIPWSystem(data, pi, draws, t_fn, link)
    starts = {"zero": np.zeros(system.p), "ols": _ols_start(data, draws, link)}
    theta, info = solve_system(system, starts)
    return EstimateReport(
        theta_hat=theta, method="DR", labels=tuple(param_labels(data)), solver=info.as_dict(),
        diagnostics={"max_inverse_weight": float(inv.max())}, warnings=tuple(notes),
    )
