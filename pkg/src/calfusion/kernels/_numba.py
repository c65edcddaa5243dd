"""numba-compiled kernels; same contracts as :mod:`._numpy`."""

import math

import numpy as np
from numba import njit

IDENTITY, LOGISTIC, EXPONENTIAL = 0, 1, 2


@njit(cache=True)
def el_objective(h, rho):
    m, q = h.shape
    total = 0.0
    smin = 1.0 if m == 0 else np.inf
    for i in range(m):
        s = 1.0
        for k in range(q):
            s += h[i, k] * rho[k]
        if s < smin:
            smin = s
        if s <= 0.0:
            return np.inf, smin
        total += math.log(s)
    return -total / m, smin


@njit(cache=True)
def el_terms(h, rho):
    m, q = h.shape
    grad = np.zeros(q)
    hess = np.zeros((q, q))
    total = 0.0
    smin = np.inf
    for i in range(m):
        s = 1.0
        for k in range(q):
            s += h[i, k] * rho[k]
        if s < smin:
            smin = s
        if s <= 0.0:
            return np.inf, np.full(q, np.nan), np.full((q, q), np.nan), smin
        total += math.log(s)
        inv = 1.0 / s
        inv2 = inv * inv
        for a in range(q):
            grad[a] -= h[i, a] * inv
            ha = h[i, a] * inv2
            for b in range(a + 1):
                hess[a, b] += ha * h[i, b]
    for a in range(q):
        grad[a] /= m
        for b in range(a + 1):
            hess[a, b] /= m
            hess[b, a] = hess[a, b]
    return -total / m, grad, hess, smin


@njit(cache=True)
def link_draw_moments(base, draws, theta_w, kind):
    n, D, q = draws.shape
    mu_bar = np.zeros(n)
    dmu_bar = np.zeros(n)
    dmu_w = np.zeros((n, q))
    for i in range(n):
        for d in range(D):
            eta = base[i]
            for k in range(q):
                eta += draws[i, d, k] * theta_w[k]
            if kind == IDENTITY:
                mu = eta
                dmu = 1.0
            elif kind == LOGISTIC:
                mu = 1.0 / (1.0 + math.exp(-eta))
                dmu = mu * (1.0 - mu)
            else:
                mu = math.exp(eta)
                dmu = mu
            mu_bar[i] += mu
            dmu_bar[i] += dmu
            for k in range(q):
                dmu_w[i, k] += dmu * draws[i, d, k]
        mu_bar[i] /= D
        dmu_bar[i] /= D
        for k in range(q):
            dmu_w[i, k] /= D
    return mu_bar, dmu_bar, dmu_w
