"""Variance estimation and combination of estimates.

``estimate_variance_mr`` is the sample-average plug-in for the asymptotic
variance of the calibrated estimator when one propensity model (the
*reference* model) is correct.  Its influence function is

    L = Gamma^{-1} [Q - E(Q Psi') E(Psi Psi')^{-1} Psi]

with ``Q`` built from the primary and auxiliary residual moments and their
projections on the constraint rows, and ``Psi`` the logistic score of the
reference model.  Expectations of quantities seen in one sample only are
taken with inverse-propensity weights from the reference model, and so
are ``H`` and ``T`` so that each projection is fitted within one sample.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .calibration import CalibrationResult, ConstraintSet
from .data import FusedDataset
from .errors import CalfusionError, DimensionError, InferenceError, SingularMatrixError
from .estimators import AugmentedIPWSystem, CalibratedSystem, EstimateReport, OutcomeLink, TFunction, regressors
from .models import PropensityFit, build_design_matrix, predict_propensity


def _checked_inverse(a, name, max_cond=1e12):
    a = np.atleast_2d(a)
    if a.size == 0:
        return a, 1.0
    cond = np.linalg.cond(a)
    if not np.isfinite(cond) or cond > max_cond:
        raise SingularMatrixError(f"{name} is not invertible (cond={cond:.3g})")
    return np.linalg.inv(a), float(cond)


@dataclass(frozen=True)
class VariancePlugIn:
    Gamma_hat: np.ndarray
    F_hat: np.ndarray
    H_hat: np.ndarray
    G_hat: np.ndarray
    T_hat: np.ndarray
    score_cov: np.ndarray
    cross_cov: np.ndarray
    L_cov: np.ndarray
    influence: np.ndarray  # (n, p) rows of L
    reference_ps_index: int
    n: int
    condition: dict
    max_leverage: float = 0.0

    @property
    def variance(self) -> np.ndarray:
        """Estimated variance of theta_hat (``L_cov / n``)."""
        return self.L_cov / self.n

    @property
    def se(self) -> np.ndarray:
        return np.sqrt(np.diag(self.L_cov) / self.n)

    def summary(self) -> dict:
        return {
            "method": "plugin",
            "reference_ps_index": self.reference_ps_index,
            "assumption": f"propensity model {self.reference_ps_index + 1} correctly specified",
            "condition_numbers": self.condition,
            "max_leverage": self.max_leverage,
        }


def estimate_variance_mr(theta_hat, calib: CalibrationResult, constraints: ConstraintSet,
                         prop_fits, data: FusedDataset, t_fn: TFunction, link: OutcomeLink,
                         reference_ps_index: int = 0) -> VariancePlugIn:
    """Plug-in variance of the calibrated estimator.

    ``reference_ps_index`` is the 0-based position, within ``prop_fits``, of
    the propensity model taken as correctly specified.
    """
    if not prop_fits:
        raise InferenceError("plug-in variance needs at least one propensity model; use the bootstrap")
    if not 0 <= reference_ps_index < len(prop_fits):
        raise InferenceError(f"reference_ps_index {reference_ps_index} out of range")
    theta = np.asarray(theta_hat, dtype=float)
    n = data.n
    r = data.r
    ref: PropensityFit = prop_fits[reference_ps_index]
    pi = predict_propensity(ref, data)
    x_ps = build_design_matrix(ref.spec, data)
    h = constraints.h
    tv = t_fn.values(data.v, theta)

    prim, aux = data.primary, data.auxiliary
    w1 = np.zeros(n)
    w1[calib.idx1] = calib.omega1
    w0 = np.zeros(n)
    w0[calib.idx0] = calib.omega0
    yt = np.where(prim, data.y, 0.0)[:, None] * tv
    mu = np.zeros(n)
    mu[aux] = link.mu(regressors(data.w[aux], data.v[aux]) @ theta)
    s = mu[:, None] * tv
    e_yt = w1 @ yt
    e_s = w0 @ s
    a = np.where(prim[:, None], yt - e_yt, 0.0)
    b = np.where(aux[:, None], s - e_s, 0.0)

    F = (a / pi[:, None] ** 2).T @ h / n
    G = (b / (1 - pi)[:, None] ** 2).T @ h / n
    # H and T are weighted the same way as F and G, so F H^-1 and G T^-1 are
    # weighted least-squares fits within one sample
    H = (r[:, None] * h / pi[:, None] ** 2).T @ h / n
    T = ((1 - r)[:, None] * h / (1 - pi)[:, None] ** 2).T @ h / n
    H_inv, cond_h = _checked_inverse(H, "H")
    T_inv, cond_t = _checked_inverse(T, "T")

    # Q = R/pi (a - B1 h) + B1 h - (1-R)/(1-pi) (b - B0 h) - B0 h.  The
    # in-sample residuals of the two heavily weighted fits understate their
    # spread, so they are replaced by leave-one-out residuals e / (1 - leverage)
    B1, B0 = F @ H_inv, G @ T_inv
    lev1 = r * np.einsum("ij,jk,ik->i", h, H_inv, h) / (n * pi**2)
    lev0 = (1 - r) * np.einsum("ij,jk,ik->i", h, T_inv, h) / (n * (1 - pi) ** 2)
    if max(lev1.max(initial=0.0), lev0.max(initial=0.0)) >= 1:
        raise SingularMatrixError("a single row determines the projection fit (leverage 1)")
    e1 = (a - h @ B1.T) / (1 - lev1)[:, None]
    e0 = (b - h @ B0.T) / (1 - lev0)[:, None]
    Q = (r / pi)[:, None] * e1 + h @ B1.T - ((1 - r) / (1 - pi))[:, None] * e0 - h @ B0.T

    psi = (r - pi)[:, None] * x_ps
    S = psi.T @ psi / n
    C = Q.T @ psi / n
    S_inv, cond_s = _checked_inverse(S, "E(Psi Psi')")

    gamma = CalibratedSystem(data, calib.omega1, calib.omega0, t_fn, link).jacobian(theta)
    gamma_inv, cond_g = _checked_inverse(gamma, "Gamma")
    L = (Q - psi @ (C @ S_inv).T) @ gamma_inv.T
    L_cov = np.cov(L, rowvar=False, ddof=1).reshape(len(theta), len(theta))
    L_cov = 0.5 * (L_cov + L_cov.T)
    return VariancePlugIn(
        Gamma_hat=gamma, F_hat=F, H_hat=H, G_hat=G, T_hat=T, score_cov=S, cross_cov=C,
        L_cov=L_cov, influence=L, reference_ps_index=reference_ps_index, n=n,
        condition={"H": cond_h, "T": cond_t, "score_cov": cond_s, "Gamma": cond_g},
        max_leverage=float(max(lev1.max(initial=0.0), lev0.max(initial=0.0))),
    )


def estimate_variance_dr(theta_hat, prop_fit: PropensityFit, data: FusedDataset, t_fn: TFunction,
                         link: OutcomeLink, draws: np.ndarray) -> np.ndarray:
    """Sandwich variance of the doubly robust estimate (variance of theta_hat).

    ``draws`` must be the imputation draws used for the point estimate.
    """
    theta = np.asarray(theta_hat, dtype=float)
    pi = predict_propensity(prop_fit, data)
    system = AugmentedIPWSystem(data, pi, draws, t_fn, link)
    n = data.n
    phi = system.contributions(theta) * n
    gamma_inv, _ = _checked_inverse(system.jacobian(theta), "Gamma")
    meat = phi.T @ phi / n
    var = gamma_inv @ meat @ gamma_inv.T / n
    return 0.5 * (var + var.T)


def rubin_combine(reports) -> EstimateReport:
    """Pool replicate analyses: mean estimate, within + (1 + 1/M) * between variance."""
    reports = list(reports)
    M = len(reports)
    if M < 2:
        raise InferenceError("Rubin's rule requires M ≥ 2")
    p = len(reports[0].theta_hat)
    if any(len(rep.theta_hat) != p for rep in reports):
        raise DimensionError("reports have different parameter dimensions")
    if any(rep.variance is None for rep in reports):
        raise InferenceError("every report needs a variance for Rubin's rule")
    thetas = np.array([rep.theta_hat for rep in reports])
    within = np.mean([rep.variance for rep in reports], axis=0)
    between = np.atleast_2d(np.cov(thetas, rowvar=False, ddof=1))
    total = within + (1 + 1 / M) * between
    base = reports[0]
    combined = EstimateReport(
        theta_hat=thetas.mean(axis=0), method=f"{base.method} (Rubin, M={M})", labels=base.labels,
        level=base.level,
    )
    return combined.with_variance(total, rubin={"M": M, "within": within, "between": between})


def bootstrap_variance(estimate_fn, data: FusedDataset, B: int = 500, seed=None):
    """Row-resampling bootstrap within each sample.

    ``estimate_fn(dataset) -> theta`` is re-run on every resample; failed
    resamples are skipped and counted.  Returns ``(variance, n_failed)``.
    """
    rng = np.random.default_rng(seed)
    idx1, idx0 = data.primary_idx, data.auxiliary_idx
    draws = []
    failed = 0
    for _ in range(B):
        rows = np.concatenate([rng.choice(idx1, idx1.size), rng.choice(idx0, idx0.size)])
        try:
            draws.append(np.asarray(estimate_fn(data.take(np.sort(rows)))))
        except (CalfusionError, np.linalg.LinAlgError):
            failed += 1
    if len(draws) < 2:
        raise InferenceError("bootstrap produced fewer than two successful resamples")
    return np.atleast_2d(np.cov(np.array(draws), rowvar=False, ddof=1)), failed
