"""Empirical-likelihood calibration weights for the two samples.

The constraint rows ``h_i`` stack the centred fitted propensities of every
propensity model and the centred imputation moments ``g_i`` of every
imputation model.  Within each sample the weights maximise the product of
weights subject to ``sum_i w_i h_i = 0``; their dual is the convex problem

    minimise  G(rho) = -mean_i log(1 + rho @ h_i)

whose stationary point solves ``sum_i h_i / (1 + rho @ h_i) = 0``.  The
weights are then ``w_i proportional to 1 / (1 + rho @ h_i)``.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import kernels
from .data import FusedDataset
from .errors import (
    CalibrationError,
    DegenerateConstraintError,
    NoInteriorSolutionError,
    NonpositiveSlackError,
    SingularHessianError,
)
from .estimators import OutcomeLink, TFunction, _DrawMoments
from .models import ImputationFit, PropensityFit, draw_imputations, predict_propensity

SLACK_FLOOR = 1e-12


@dataclass(frozen=True)
class ConstraintSet:
    h: np.ndarray  # (n, n_kept) centred constraint rows
    tau_hat: np.ndarray  # (J,)
    psi_hat: np.ndarray  # (K, p)
    g: np.ndarray  # (n, K, p)
    pi: np.ndarray  # (n, J) fitted propensities
    labels: tuple[str, ...]  # labels of the kept columns
    kept: np.ndarray  # indices of kept columns in the full J + pK layout
    dropped: tuple[str, ...] = ()


def _centre_and_check(raw, labels, on_degenerate):
    h = raw - raw.mean(axis=0)
    scale = 1.0 + np.abs(raw).max(axis=0) if raw.size else np.ones(raw.shape[1])
    degenerate = np.flatnonzero(np.abs(h).max(axis=0, initial=0.0) <= 1e-12 * scale)
    if degenerate.size:
        names = [labels[c] for c in degenerate]
        if on_degenerate == "raise":
            raise DegenerateConstraintError(f"constraint columns carry no information: {names}", names)
        warnings.warn(f"dropping degenerate constraint columns {names}", RuntimeWarning, stacklevel=3)
    kept = np.setdiff1d(np.arange(h.shape[1]), degenerate)
    return h[:, kept], kept, tuple(labels[c] for c in degenerate)


def imputation_moments(theta, draws, t_fn: TFunction, link: OutcomeLink, data: FusedDataset) -> np.ndarray:
    """``g_i = mean_d s(W_i^d, V_i; theta)`` for every row; shape ``(n, p)``."""
    ebar, _ = _DrawMoments(draws, data.v, link)(np.asarray(theta, dtype=float))
    return t_fn.values(data.v, theta) * ebar[:, None]


def build_constraints(prop_fits: Sequence[PropensityFit], imp_fits: Sequence[ImputationFit], thetas,
                      t_fn: TFunction, link: OutcomeLink, data: FusedDataset, D: int = 100, rng=None,
                      *, draws=None, on_degenerate="raise") -> ConstraintSet:
    """Constraint matrix for a model bank.

    ``draws`` (one ``(n, D, q)`` array per imputation model) are generated
    from ``rng`` when not supplied; pass the same draws used for the
    per-model thetas so both share one Monte Carlo sample.
    ``on_degenerate`` is ``"raise"`` or ``"drop"``.
    """
    prop_fits, imp_fits = list(prop_fits), list(imp_fits)
    if len(thetas) != len(imp_fits):
        raise ValueError("need one theta per imputation model")
    if draws is None:
        rng = np.random.default_rng(rng)
        draws = [draw_imputations(f, data, D, rng) for f in imp_fits]
    n, p = data.n, t_fn.p
    J, K = len(prop_fits), len(imp_fits)
    pi = np.column_stack([predict_propensity(f, data) for f in prop_fits]) if J else np.empty((n, 0))
    g = np.empty((n, K, p))
    for k in range(K):
        g[:, k, :] = imputation_moments(thetas[k], draws[k], t_fn, link, data)
    raw = np.column_stack([pi, g.reshape(n, K * p)])
    labels = [f"pi{j + 1}" for j in range(J)] + [f"g{k + 1}[{c + 1}]" for k in range(K) for c in range(p)]
    h, kept, dropped = _centre_and_check(raw, labels, on_degenerate)
    return ConstraintSet(
        h=h, tau_hat=pi.mean(axis=0), psi_hat=g.mean(axis=0), g=g, pi=pi,
        labels=tuple(labels[c] for c in kept), kept=kept, dropped=dropped,
    )


def solve_multiplier(h_rows, init=None, *, tol=1e-10, max_iter=200, full_output=False):
    """Lagrange multiplier of the empirical-likelihood weights for one sample.

    Damped Newton on ``G``; the step is halved until every slack
    ``1 + rho @ h_i`` exceeds ``SLACK_FLOOR`` and then until the Armijo
    condition holds.  Columns are rescaled internally to unit RMS, which
    leaves the weights unchanged.  Converged when the sup-norm of the mean
    gradient is below ``tol``.
    """
    h = np.atleast_2d(np.asarray(h_rows, dtype=float))
    m, q = h.shape
    if q == 0:
        rho = np.zeros(0)
        info = {"iterations": 0, "grad_norm": 0.0, "min_slack": 1.0}
        return (rho, info) if full_output else rho
    scale = np.sqrt(np.mean(h**2, axis=0))
    scale[scale == 0] = 1.0
    hs = np.ascontiguousarray(h / scale)
    rho = np.zeros(q) if init is None else np.asarray(init, dtype=float) * scale
    if kernels.el_objective(hs, rho)[1] <= SLACK_FLOOR:
        raise NonpositiveSlackError("initial multiplier is infeasible")

    it = 0
    for it in range(max_iter + 1):
        obj, grad, hess, smin = kernels.el_terms(hs, rho)
        gnorm = float(np.max(np.abs(grad * scale)))
        if gnorm < tol:
            break
        if it == max_iter:
            raise NoInteriorSolutionError(
                f"multiplier did not converge in {max_iter} Newton steps (|grad|={gnorm:.3g}); "
                "zero may lie outside the convex hull of the constraint rows"
            )
        try:
            chol = np.linalg.cholesky(hess)
        except np.linalg.LinAlgError:
            raise SingularHessianError("calibration Hessian is not positive definite") from None
        if np.min(np.diag(chol)) ** 2 < 1e-14 * np.max(np.diag(hess)):
            raise SingularHessianError("calibration Hessian is numerically singular (collinear constraints)")
        step = -np.linalg.solve(chol.T, np.linalg.solve(chol, grad))
        decrement = float(-grad @ step)
        if decrement < 1e-30:
            break
        # below ~1e-13 the objective change is lost in rounding, so only
        # feasibility is enforced (pure Newton in its quadratic regime)
        exact = decrement < 1e-13
        t = 1.0
        for _ in range(60):
            new_obj, new_smin = kernels.el_objective(hs, rho + t * step)
            if new_smin > SLACK_FLOOR and (exact or new_obj <= obj - 1e-4 * t * decrement):
                break
            t *= 0.5
        else:
            raise NoInteriorSolutionError("line search failed to keep slacks positive")
        rho = rho + t * step
        if np.max(np.abs(rho / scale)) > 1e6:
            raise NoInteriorSolutionError("multiplier diverges (|rho| > 1e6); no interior solution")

    _, grad, _, smin = kernels.el_terms(hs, rho)
    out = rho / scale
    info = {"iterations": it, "grad_norm": float(np.max(np.abs(grad * scale))), "min_slack": float(smin)}
    return (out, info) if full_output else out


def compute_weights(h_rows, multiplier) -> np.ndarray:
    """Normalised weights ``1 / (1 + rho @ h_i)``."""
    h = np.atleast_2d(np.asarray(h_rows, dtype=float))
    slack = 1.0 + h @ np.asarray(multiplier, dtype=float) if h.shape[1] else np.ones(h.shape[0])
    if np.any(slack <= 0):
        raise NonpositiveSlackError(f"nonpositive slack {slack.min():.3g}")
    w = 1.0 / slack
    return w / w.sum()


@dataclass(frozen=True)
class CalibrationResult:
    rho_hat: np.ndarray
    alpha_hat: np.ndarray
    omega1: np.ndarray  # weights of the primary rows, ordered as idx1
    omega0: np.ndarray  # weights of the auxiliary rows, ordered as idx0
    idx1: np.ndarray
    idx0: np.ndarray
    diagnostics: dict = field(default_factory=dict)


def _solve_sample(h, which):
    try:
        rho, info = solve_multiplier(h, full_output=True)
        w = compute_weights(h, rho)
    except CalibrationError as exc:
        raise type(exc)(f"{which} sample: {exc}") from exc
    return rho, w, info


def calibrate(constraints: ConstraintSet, data: FusedDataset) -> CalibrationResult:
    """Solve both calibration problems (primary -> rho, auxiliary -> alpha)."""
    idx1, idx0 = data.primary_idx, data.auxiliary_idx
    h = constraints.h
    rho, w1, info1 = _solve_sample(h[idx1], "primary")
    alpha, w0, info0 = _solve_sample(h[idx0], "auxiliary")
    diag = {"primary": info1, "auxiliary": info0, "dropped_columns": list(constraints.dropped)}
    return CalibrationResult(rho, alpha, w1, w0, idx1, idx0, diag)
