"""Pure-numpy kernels; reference semantics for the numba versions."""

import numpy as np

IDENTITY, LOGISTIC, EXPONENTIAL = 0, 1, 2


def el_objective(h, rho):
    """``(-mean log(1 + h @ rho), min slack)``; objective is +inf off the domain."""
    slack = 1.0 + h @ rho
    smin = slack.min() if slack.size else 1.0
    if smin <= 0.0:
        return np.inf, smin
    return -np.mean(np.log(slack)), smin


def el_terms(h, rho):
    """Objective, gradient, Hessian (all per-row means) and min slack."""
    m = h.shape[0]
    slack = 1.0 + h @ rho
    smin = slack.min()
    if smin <= 0.0:
        q = h.shape[1]
        return np.inf, np.full(q, np.nan), np.full((q, q), np.nan), smin
    inv = 1.0 / slack
    obj = -np.mean(np.log(slack))
    grad = -(h.T @ inv) / m
    hw = h * inv[:, None]
    hess = (hw.T @ hw) / m
    return obj, grad, hess, smin


def _mu(eta, kind):
    if kind == IDENTITY:
        return eta, np.ones_like(eta)
    if kind == LOGISTIC:
        mu = 0.5 * (1.0 + np.tanh(0.5 * eta))
        return mu, mu * (1.0 - mu)
    mu = np.exp(eta)
    return mu, mu


def link_draw_moments(base, draws, theta_w, kind):
    """Per-row averages over imputation draws.

    With ``eta[i, d] = base[i] + draws[i, d] @ theta_w`` returns
    ``mean_d mu(eta)``, ``mean_d mu'(eta)`` and ``mean_d mu'(eta) * draws[i, d]``.
    """
    eta = base[:, None] + draws @ theta_w
    mu, dmu = _mu(eta, kind)
    return mu.mean(axis=1), dmu.mean(axis=1), np.einsum("nd,ndq->nq", dmu, draws) / draws.shape[1]
