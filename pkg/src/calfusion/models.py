"""Working models for the source propensity and for W given V.

Each working model is a :class:`ModelSpec`: an ordered list of polynomial
terms in the common covariates.  Propensity models are logistic regressions
of the source flag on the spec's design; imputation models are Gaussian
linear regressions of each auxiliary covariate, fitted on the auxiliary rows.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.special import expit, log_expit

from .data import FusedDataset
from .errors import RankError, SeparationError, SingularError, SpecError


@dataclass(frozen=True, order=True)
class Term:
    kind: str  # "intercept" | "main" | "interaction" | "quadratic"
    i: int = -1
    j: int = -1

    def __post_init__(self):
        if self.kind not in ("intercept", "main", "interaction", "quadratic"):
            raise SpecError(f"unknown term kind {self.kind!r}")
        if self.kind == "interaction":
            if self.i == self.j:
                raise SpecError("use a quadratic term for a self-interaction")
            a, b = sorted((self.i, self.j))
            object.__setattr__(self, "i", a)
            object.__setattr__(self, "j", b)

    def label(self, names: Sequence[str]) -> str:
        if self.kind == "intercept":
            return "1"
        if self.kind == "main":
            return names[self.i]
        if self.kind == "quadratic":
            return f"{names[self.i]}^2"
        return f"{names[self.i]}:{names[self.j]}"


def Intercept() -> Term:
    return Term("intercept")


def Main(i: int) -> Term:
    return Term("main", i)


def Interaction(i: int, j: int) -> Term:
    return Term("interaction", i, j)


def Quadratic(i: int) -> Term:
    return Term("quadratic", i)


_NAME = r"[A-Za-z_][A-Za-z0-9_.]*"
_TERM_RE = re.compile(rf"^(?:(1)|({_NAME})\^2|({_NAME}):({_NAME})|({_NAME}))$")


@dataclass(frozen=True)
class ModelSpec:
    """Ordered, duplicate-free list of design terms."""

    terms: tuple[Term, ...]

    def __post_init__(self):
        terms = tuple(self.terms)
        if not terms:
            raise SpecError("a model spec needs at least one term")
        if len(set(terms)) != len(terms):
            raise SpecError("duplicate terms in model spec")
        for t in terms:
            if t.kind != "intercept" and (t.i < 0 or t.j < -1):
                raise SpecError(f"negative covariate index in {t}")
        object.__setattr__(self, "terms", terms)

    def __len__(self):
        return len(self.terms)

    @classmethod
    def parse(cls, text: str, v_names: Sequence[str]) -> "ModelSpec":
        """Parse ``"1 + V1 + V2 + V1:V2 + V1^2"`` against covariate names."""
        index = {name: k for k, name in enumerate(v_names)}

        def lookup(name):
            if name not in index:
                raise SpecError(f"unknown covariate {name!r} in {text!r} (known: {list(v_names)})")
            return index[name]

        terms = []
        for raw in text.split("+"):
            tok = raw.replace(" ", "")
            match = _TERM_RE.match(tok)
            if match is None:
                raise SpecError(f"cannot parse term {raw.strip()!r} in {text!r}")
            one, sq, a, b, main = match.groups()
            if one:
                terms.append(Intercept())
            elif sq:
                terms.append(Quadratic(lookup(sq)))
            elif a:
                terms.append(Interaction(lookup(a), lookup(b)))
            else:
                terms.append(Main(lookup(main)))
        return cls(tuple(terms))

    def to_text(self, v_names: Sequence[str]) -> str:
        return " + ".join(t.label(v_names) for t in self.terms)

    def max_index(self) -> int:
        return max((max(t.i, t.j) for t in self.terms), default=-1)


def design_from_v(spec: ModelSpec, v: np.ndarray) -> np.ndarray:
    """Design matrix for raw covariate rows ``v`` (shape ``(n, p_v)``)."""
    v = np.atleast_2d(np.asarray(v, dtype=float))
    if spec.max_index() >= v.shape[1]:
        raise IndexError(f"model spec references covariate {spec.max_index()} but only {v.shape[1]} exist")
    out = np.empty((v.shape[0], len(spec)))
    for c, t in enumerate(spec.terms):
        if t.kind == "intercept":
            out[:, c] = 1.0
        elif t.kind == "main":
            out[:, c] = v[:, t.i]
        elif t.kind == "quadratic":
            out[:, c] = v[:, t.i] ** 2
        else:
            out[:, c] = v[:, t.i] * v[:, t.j]
    return out


def build_design_matrix(spec: ModelSpec, data: FusedDataset, rows=None) -> np.ndarray:
    """One column per term, in spec order; ``rows`` is any numpy row selector."""
    v = data.v if rows is None else data.v[rows]
    return design_from_v(spec, v)


# ---------------------------------------------------------------------------
# propensity models


@dataclass(frozen=True)
class PropensityFit:
    spec: ModelSpec
    eta_hat: np.ndarray
    converged: bool
    iterations: int
    loglik: float


def logistic_loglik(eta, x, r):
    z = x @ eta
    return float(np.sum(r * log_expit(z) + (1 - r) * log_expit(-z)))


def logistic_score(eta, x, r):
    return x.T @ (r - expit(x @ eta))


def logistic_hessian(eta, x, r):
    p = expit(x @ eta)
    return -(x.T * (p * (1 - p))) @ x


def fit_propensity(spec: ModelSpec, data: FusedDataset, *, tol=1e-10, max_iter=100) -> PropensityFit:
    """Logistic MLE of the source flag by Newton-Raphson with step halving.

    Convergence is declared when the sup-norm of the per-observation mean
    score drops below ``tol``.
    """
    x = build_design_matrix(spec, data)
    r = data.r
    n = data.n
    eta = np.zeros(x.shape[1])
    ll = logistic_loglik(eta, x, r)
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        grad = logistic_score(eta, x, r)
        if np.max(np.abs(grad)) / n < tol:
            converged = True
            it -= 1
            break
        hess = logistic_hessian(eta, x, r)
        try:
            chol = np.linalg.cholesky(-hess)
        except np.linalg.LinAlgError:
            raise SingularError(f"logistic Hessian not invertible for {spec}") from None
        step = np.linalg.solve(chol.T, np.linalg.solve(chol, grad))
        t = 1.0
        for _ in range(50):
            cand = eta + t * step
            ll_new = logistic_loglik(cand, x, r)
            if ll_new >= ll - 1e-12 * abs(ll):
                break
            t *= 0.5
        eta, ll = cand, ll_new
        if np.linalg.norm(eta) > 1e3:
            raise SeparationError(f"coefficients diverge (|eta| > 1e3); perfect separation suspected")
    else:
        grad = logistic_score(eta, x, r)
        converged = bool(np.max(np.abs(grad)) / n < tol)
    # under separation the score vanishes before |eta| gets large
    if np.all(np.abs(expit(x @ eta) - r) < 1e-6):
        raise SeparationError(f"fitted probabilities reproduce R exactly; perfect separation for {spec}")
    return PropensityFit(spec, eta, converged, it, ll)


def predict_propensity(fit: PropensityFit, data: FusedDataset) -> np.ndarray:
    return expit(build_design_matrix(fit.spec, data) @ fit.eta_hat)


# ---------------------------------------------------------------------------
# imputation models


@dataclass(frozen=True)
class ImputationFit:
    spec: ModelSpec
    gamma_hat: np.ndarray  # (q, n_terms)
    sigma_hat: np.ndarray  # (q,)

    def mean(self, v: np.ndarray) -> np.ndarray:
        """Conditional mean of W at covariate rows ``v``; shape ``(n, q)``."""
        return design_from_v(self.spec, v) @ self.gamma_hat.T


def fit_imputation(spec: ModelSpec, data: FusedDataset) -> ImputationFit:
    """Component-wise Gaussian MLE of W on the auxiliary rows.

    The residual SD uses the MLE denominator ``n0``.
    """
    aux = data.auxiliary
    x = build_design_matrix(spec, data, aux)
    w = data.w[aux]
    n0, k = x.shape
    if n0 < k + 1:
        raise RankError(f"auxiliary sample ({n0} rows) too small for {k} terms")
    if np.linalg.matrix_rank(x) < k:
        raise RankError(f"rank-deficient imputation design for {spec}")
    coef, *_ = np.linalg.lstsq(x, w, rcond=None)
    resid = w - x @ coef
    sigma = np.sqrt(np.mean(resid**2, axis=0))
    return ImputationFit(spec, coef.T.copy(), sigma)


def draw_imputations(fit: ImputationFit, data: FusedDataset, D: int, rng) -> np.ndarray:
    """``D`` draws of W from the fitted model at every row; shape ``(n, D, q)``."""
    if D < 1:
        raise ValueError("D must be at least 1")
    rng = np.random.default_rng(rng)
    mean = fit.mean(data.v)
    eps = rng.standard_normal((data.n, D, mean.shape[1]))
    return mean[:, None, :] + fit.sigma_hat[None, None, :] * eps
