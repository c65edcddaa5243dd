"""End-to-end estimation on one dataset with a bank of working models."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .calibration import ConstraintSet, build_constraints, calibrate
from .data import FusedDataset
from .estimators import EstimateReport, OutcomeLink, TFunction, solve_dr, solve_mr, solve_theta_k
from .inference import bootstrap_variance, estimate_variance_dr, estimate_variance_mr
from .models import ImputationFit, ModelSpec, PropensityFit, draw_imputations, fit_imputation, fit_propensity


def stream(seed, *key) -> np.random.Generator:
    """Independent generator keyed by ``(seed, *key)``; order of use does not matter."""
    if isinstance(seed, np.random.SeedSequence):
        seq = np.random.SeedSequence(seed.entropy, spawn_key=tuple(seed.spawn_key) + tuple(key))
    else:
        seq = np.random.SeedSequence(seed, spawn_key=tuple(key))
    return np.random.default_rng(seq)


@dataclass(frozen=True)
class ModelBank:
    propensity: tuple[ModelSpec, ...] = ()
    imputation: tuple[ModelSpec, ...] = ()

    @classmethod
    def parse(cls, propensity: Sequence[str], imputation: Sequence[str], v_names) -> "ModelBank":
        return cls(
            tuple(ModelSpec.parse(s, v_names) for s in propensity),
            tuple(ModelSpec.parse(s, v_names) for s in imputation),
        )


@dataclass
class FittedModelBank:
    prop_fits: list[PropensityFit]
    imp_fits: list[ImputationFit]
    draws: list[np.ndarray]
    thetas: list[np.ndarray]
    solver: list[dict] = field(default_factory=list)

    def subset(self, props: Sequence[int], imps: Sequence[int]) -> "FittedModelBank":
        return FittedModelBank(
            [self.prop_fits[j] for j in props],
            [self.imp_fits[k] for k in imps],
            [self.draws[k] for k in imps],
            [self.thetas[k] for k in imps],
            [self.solver[k] for k in imps] if self.solver else [],
        )


def fit_bank(data: FusedDataset, bank: ModelBank, t_fn: TFunction, link: OutcomeLink, D: int = 100,
             seed=None, *, draw_rngs=None) -> FittedModelBank:
    """Fit every working model, draw imputations and solve each imputation-only theta.

    Imputation model ``k`` draws from ``stream(seed, k)`` unless explicit
    ``draw_rngs`` are given.
    """
    prop_fits = [fit_propensity(s, data) for s in bank.propensity]
    imp_fits = [fit_imputation(s, data) for s in bank.imputation]
    if draw_rngs is None:
        draw_rngs = [stream(seed, k) for k in range(len(imp_fits))]
    draws = [draw_imputations(f, data, D, g) for f, g in zip(imp_fits, draw_rngs)]
    thetas, solver = [], []
    for f, dr in zip(imp_fits, draws):
        theta, info = solve_theta_k(f, data, t_fn, link, draws=dr, return_info=True)
        thetas.append(theta)
        solver.append(info.as_dict())
    return FittedModelBank(prop_fits, imp_fits, draws, thetas, solver)


def mr_constraints(data, fitted: FittedModelBank, t_fn, link) -> ConstraintSet:
    return build_constraints(
        fitted.prop_fits, fitted.imp_fits, fitted.thetas, t_fn, link, data,
        draws=fitted.draws, on_degenerate="drop",
    )


def estimate_mr(data: FusedDataset, fitted: FittedModelBank, t_fn: TFunction, link: OutcomeLink, *,
                variance: Optional[str] = "plugin", reference: int = 0, bootstrap_fn=None,
                B: int = 500, seed=None, return_parts=False):
    """Calibrated estimate with its variance.

    ``variance`` is ``"plugin"``, ``"bootstrap"`` (needs ``bootstrap_fn``,
    a callable mapping a dataset to theta) or ``None``.
    """
    constraints = mr_constraints(data, fitted, t_fn, link)
    calib = calibrate(constraints, data)
    init = fitted.thetas[0] if fitted.thetas else None
    report = solve_mr(calib, data, t_fn, link, init=init)
    report = EstimateReport(
        report.theta_hat, report.method, report.labels, solver=report.solver,
        diagnostics={**report.diagnostics, "constraints": list(constraints.labels)},
    )
    plug = None
    if variance == "plugin":
        plug = estimate_variance_mr(report.theta_hat, calib, constraints, fitted.prop_fits, data, t_fn, link,
                                    reference_ps_index=reference)
        report = report.with_variance(plug.variance, variance=plug.summary())
    elif variance == "bootstrap":
        var, failed = bootstrap_variance(bootstrap_fn, data, B=B, seed=seed)
        report = report.with_variance(var, variance={"method": "bootstrap", "B": B, "failed": failed})
    if return_parts:
        return report, {"constraints": constraints, "calibration": calib, "plugin": plug}
    return report


def estimate_dr(data: FusedDataset, fitted: FittedModelBank, t_fn: TFunction, link: OutcomeLink, *,
                prop: int = 0, imp: int = 0, variance: bool = True) -> EstimateReport:
    """Doubly robust estimate from one propensity and one imputation model of ``fitted``."""
    draws = fitted.draws[imp]
    report = solve_dr(fitted.prop_fits[prop], fitted.imp_fits[imp], data, t_fn, link, draws=draws)
    if variance:
        var = estimate_variance_dr(report.theta_hat, fitted.prop_fits[prop], data, t_fn, link, draws)
        report = report.with_variance(var, variance={"method": "sandwich"})
    return report


def run_estimator(data, bank: ModelBank, t_fn, link, *, method="MR", D=100, seed=None,
                  variance="plugin", reference=0, B=500) -> EstimateReport:
    """Fit ``bank`` on ``data`` and return the requested estimate; CLI entry point."""
    fitted = fit_bank(data, bank, t_fn, link, D=D, seed=seed)
    if method == "DR":
        if len(bank.propensity) != 1 or len(bank.imputation) != 1:
            raise ValueError("the doubly robust estimator takes exactly one propensity and one imputation model")
        return estimate_dr(data, fitted, t_fn, link, variance=variance is not None)
    if variance == "bootstrap":
        def refit(d):
            f = fit_bank(d, bank, t_fn, link, D=D, seed=seed)
            return estimate_mr(d, f, t_fn, link, variance=None).theta_hat

        return estimate_mr(data, fitted, t_fn, link, variance="bootstrap", bootstrap_fn=refit, B=B,
                           seed=stream(seed, 99))
    return estimate_mr(data, fitted, t_fn, link, variance=variance, reference=reference)
