"""Rank-ordered (exploded) multinomial logit: likelihood, MLE and simulation."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import optimize

from . import _kernels
from .domain import DomainError, ProgramOption, Student
from .features import MAX_RANKED, Design, pair_features, spec_features


class NumericalError(RuntimeError):
    """Estimation failed for numerical reasons."""


class ConvergenceError(NumericalError):
    pass


class SeparationError(NumericalError):
    pass


class SingularHessianError(NumericalError):
    def __init__(self, message: str, smallest_eigenvalue: float):
        super().__init__(f"{message} (smallest eigenvalue {smallest_eigenvalue:.3e})")
        self.smallest_eigenvalue = smallest_eigenvalue


@dataclass(frozen=True)
class LogitParams:
    """Coefficients over ``feature_names`` plus school fixed effects.

    ``alpha`` covers every school but the last in ``school_ids``, whose
    effect is pinned to zero.
    """

    beta: np.ndarray
    alpha: np.ndarray
    feature_names: tuple[str, ...]
    school_ids: tuple[str, ...]

    def __post_init__(self) -> None:
        beta = np.asarray(self.beta, dtype=float).copy()
        alpha = np.asarray(self.alpha, dtype=float).copy()
        beta.flags.writeable = alpha.flags.writeable = False
        object.__setattr__(self, "beta", beta)
        object.__setattr__(self, "alpha", alpha)
        object.__setattr__(self, "feature_names", tuple(self.feature_names))
        object.__setattr__(self, "school_ids", tuple(self.school_ids))
        if beta.shape != (len(self.feature_names),):
            raise DomainError("beta length must match feature_names")
        if alpha.shape != (len(self.school_ids) - 1,):
            raise DomainError("alpha length must be n_schools - 1")
        if not (np.isfinite(beta).all() and np.isfinite(alpha).all()):
            raise DomainError("non-finite logit parameters")

    @property
    def alpha_full(self) -> np.ndarray:
        return np.append(self.alpha, 0.0)

    @property
    def theta(self) -> np.ndarray:
        return np.concatenate([self.beta, self.alpha])

    def with_theta(self, theta: np.ndarray) -> "LogitParams":
        k = len(self.feature_names)
        return LogitParams(theta[:k], theta[k:], self.feature_names, self.school_ids)

    def coefficient(self, name: str) -> float:
        return float(self.beta[self.feature_names.index(name)])

    def utilities(self, design: Design) -> np.ndarray:
        _check_design(self, design)
        return design.X @ self.beta + self.alpha_full[design.school]

    def draw_utilities(self, design: Design, rng: np.random.Generator) -> np.ndarray:
        return self.utilities(design) + rng.gumbel(size=design.valid.shape)

    @classmethod
    def zeros(cls, feature_names: Sequence[str], school_ids: Sequence[str]) -> "LogitParams":
        return cls(np.zeros(len(feature_names)), np.zeros(len(school_ids) - 1), feature_names, school_ids)


def _check_design(params: LogitParams, design: Design) -> None:
    if design.feature_names != params.feature_names:
        raise DomainError("design features do not match the parameters")
    if design.school_ids != params.school_ids:
        raise DomainError("design schools do not match the parameters")


# --------------------------------------------------------------------------
# likelihood


def stage_log_normalizers(v: np.ndarray, valid: np.ndarray) -> np.ndarray:
    """Log of the sum of exp(v) over each position and everything after it."""
    vm = np.where(valid, v, -np.inf)
    with np.errstate(invalid="ignore"):
        return np.logaddexp.accumulate(vm[:, ::-1], axis=1)[:, ::-1]


def _shifted_tails(v: np.ndarray, valid: np.ndarray):
    """Row-max shift M, exp(v - M) and its reverse cumulative sums.

    Returns ``None`` when a tail sum underflows, in which case callers take
    the log-space path.
    """
    M = np.where(valid, v, -np.inf).max(axis=1, keepdims=True)
    e = np.where(valid, np.exp(np.where(valid, v, M) - M), 0.0)
    tails = np.cumsum(e[:, ::-1], axis=1)[:, ::-1]
    if (tails[valid] < 1e-280).any():
        return None
    return M, e, tails


def ranking_loglik_terms(v: np.ndarray, design: Design) -> np.ndarray:
    """Per-student log-likelihood of the observed rankings given utilities ``v``."""
    if not np.isfinite(np.where(design.valid, v, 0.0)).all():
        raise DomainError("non-finite utilities")
    if _kernels.ENABLED:
        return _kernels.terms(np.ascontiguousarray(v, dtype=float), design.n_valid, design.n_stage)
    fast = _shifted_tails(v, design.valid)
    if fast is not None:
        M, _, tails = fast
        lse = M + np.log(np.where(design.stage, tails, 1.0))
    else:
        lse = stage_log_normalizers(v, design.valid)
    terms = np.where(design.stage, v - np.where(design.stage, lse, 0.0), 0.0)
    return terms.sum(axis=1)


def ranking_loglik_vgrad(v: np.ndarray, design: Design) -> np.ndarray:
    """d loglik / d v, shape (n, L).

    Position d loses exp(v_d) / (stage-c normalizer) for every ranked stage
    c at or before d, so the correction is a running sum over stages.
    """
    if _kernels.ENABLED:
        return _kernels.vgrad(np.ascontiguousarray(v, dtype=float), design.n_valid, design.n_stage)
    fast = _shifted_tails(v, design.valid)
    if fast is not None:
        _, e, tails = fast
        inv = np.where(design.stage, 1.0 / np.where(design.stage, tails, 1.0), 0.0)
        probs = e * np.cumsum(inv, axis=1)
    else:
        lse = stage_log_normalizers(v, design.valid)
        with np.errstate(invalid="ignore", over="ignore"):
            run = np.logaddexp.accumulate(np.where(design.stage, -lse, -np.inf), axis=1)
            probs = np.where(design.valid, np.exp(v + run), 0.0)
    return design.stage.astype(float) - probs


def ranking_loglik_vgrad_dense(v: np.ndarray, design: Design) -> np.ndarray:
    """Same gradient via an explicit (n, L, L) stage-by-position array."""
    lse = stage_log_normalizers(v, design.valid)
    L = v.shape[1]
    upper = np.triu(np.ones((L, L), dtype=bool))
    mask = design.stage[:, :, None] & upper[None] & design.valid[:, None, :]
    with np.errstate(invalid="ignore"):
        logp = np.where(mask, v[:, None, :] - np.where(design.stage, lse, 0.0)[:, :, None], -np.inf)
    probs = np.exp(logp).sum(axis=1)
    return design.stage.astype(float) - probs


def rank_loglik(params: LogitParams, design: Design) -> float:
    """Sum over students and ranked stages of v_chosen - log(sum over the rest)."""
    return float(ranking_loglik_terms(params.utilities(design), design).sum())


def rank_loglik_grad(params: LogitParams, design: Design) -> np.ndarray:
    """Gradient with respect to ``params.theta`` (beta then alpha)."""
    g = ranking_loglik_vgrad(params.utilities(design), design)
    return _theta_grad(g, design, len(params.school_ids))


def _theta_grad(g: np.ndarray, design: Design, n_schools: int) -> np.ndarray:
    gb = np.einsum("nl,nlk->k", g, design.X)
    ga = np.bincount(design.school.ravel(), weights=np.where(design.valid, g, 0.0).ravel(), minlength=n_schools)
    return np.concatenate([gb, ga[:-1]])


def naive_rank_loglik(params: LogitParams, design: Design) -> float:
    """Unstabilized double loop over students and stages, for cross-checks."""
    total = 0.0
    v = params.utilities(design)
    for i in range(design.n_students):
        alts = np.flatnonzero(design.valid[i])
        for c in np.flatnonzero(design.stage[i]):
            rest = [d for d in alts if d >= c]
            total += math.log(math.exp(v[i, c]) / sum(math.exp(v[i, d]) for d in rest))
    return total


# --------------------------------------------------------------------------
# estimation


@dataclass(frozen=True)
class LogitFit:
    params: LogitParams
    covariance: np.ndarray
    log_likelihood: float
    n_students: int
    n_choices: int
    gradient_norm: float = 0.0
    iterations: int = 0

    @property
    def standard_errors(self) -> np.ndarray:
        return np.sqrt(np.clip(np.diag(self.covariance), 0.0, None))

    def names(self) -> list[str]:
        return list(self.params.feature_names) + [f"alpha[{s}]" for s in self.params.school_ids[:-1]]

    def draw_params(self, rng: np.random.Generator) -> LogitParams:
        """Coefficients drawn from the asymptotic normal of the estimator."""
        theta = rng.multivariate_normal(self.params.theta, self.covariance, method="cholesky")
        return self.params.with_theta(theta)

    def to_dict(self) -> dict:
        return {
            "model": "logit",
            "feature_names": list(self.params.feature_names),
            "school_ids": list(self.params.school_ids),
            "beta": self.params.beta.tolist(),
            "alpha": self.params.alpha.tolist(),
            "standard_errors": dict(zip(self.names(), self.standard_errors.tolist())),
            "covariance": self.covariance.tolist(),
            "log_likelihood": self.log_likelihood,
            "n_students": self.n_students,
            "n_choices": self.n_choices,
            "gradient_norm": self.gradient_norm,
            "iterations": self.iterations,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "LogitFit":
        params = LogitParams(d["beta"], d["alpha"], d["feature_names"], d["school_ids"])
        return cls(
            params,
            np.asarray(d["covariance"], dtype=float),
            float(d["log_likelihood"]),
            int(d["n_students"]),
            int(d["n_choices"]),
            float(d.get("gradient_norm", 0.0)),
            int(d.get("iterations", 0)),
        )

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "LogitFit":
        return cls.from_dict(json.loads(Path(path).read_text()))


def numeric_hessian(grad, theta: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central differences of an analytic gradient, symmetrized."""
    k = len(theta)
    H = np.empty((k, k))
    for j in range(k):
        e = np.zeros(k)
        e[j] = h
        H[:, j] = (grad(theta + e) - grad(theta - e)) / (2 * h)
    return 0.5 * (H + H.T)


SEPARATION_BOUND = 50.0


def fit_mle(
    data,
    spec: str | Sequence[str] = "reduced",
    denominator: str = "ranked",
    max_iter: int = 2000,
    tol: float = 1e-6,
) -> LogitFit:
    """Maximum likelihood by BFGS, polished with Newton steps.

    ``data`` is a ``Dataset`` or a prebuilt ``Design`` (then ``spec`` and
    ``denominator`` are taken from it). The covariance is the inverse of
    the negative Hessian at the optimum.
    """
    design = data if isinstance(data, Design) else data.design(spec_features(spec), denominator)
    if not (design.stage.sum(axis=1) >= 2).any() and not (
        design.valid.sum(axis=1) > design.stage.sum(axis=1)
    ).any():
        raise DomainError("need at least one student with two or more alternatives")
    base = LogitParams.zeros(design.feature_names, design.school_ids)

    def ll(theta):
        return rank_loglik(base.with_theta(theta), design)

    def grad(theta):
        return rank_loglik_grad(base.with_theta(theta), design)

    def _finite(theta):
        return np.isfinite(theta).all()

    def obj(theta):
        if not _finite(theta) or np.abs(theta).max() > 1e6:
            return np.inf, np.zeros_like(theta)
        return -ll(theta), -grad(theta)

    res = optimize.minimize(
        obj, base.theta, jac=True, method="BFGS", options={"maxiter": max_iter, "gtol": 1e-9}
    )
    theta = res.x
    iterations = int(res.nit)

    def converged(theta):
        value = ll(theta)
        return np.linalg.norm(grad(theta)) < tol * (1 + abs(value))

    for _ in range(50):
        if converged(theta):
            break
        H = numeric_hessian(grad, theta)
        g = grad(theta)
        try:
            step = np.linalg.solve(-H, g)
        except np.linalg.LinAlgError:
            break
        value, t = ll(theta), 1.0
        while t > 1e-8:
            cand = theta + t * step
            if ll(cand) >= value - 1e-12:
                break
            t *= 0.5
        theta = theta + t * step
        iterations += 1

    H = numeric_hessian(grad, theta)
    info = -H
    evals, evecs = np.linalg.eigh(info)
    smallest = float(evals[0])
    scale = max(1.0, float(np.abs(evals).max()))
    if np.abs(theta).max() > SEPARATION_BOUND:
        raise SeparationError(f"|coefficient| exceeds {SEPARATION_BOUND}: likely perfect separation")
    if smallest <= 1e-8 * scale:
        direction = evecs[:, 0]
        value = ll(theta)
        step = 10.0 * (1.0 + np.abs(theta).max())
        gain = max(ll(theta + step * direction), ll(theta - step * direction)) - value
        if gain > 1e-11 * (1 + abs(value)):
            raise SeparationError("log-likelihood keeps rising along a flat direction: perfect separation")
        raise SingularHessianError("singular Hessian at the optimum", smallest)
    if not converged(theta):
        raise ConvergenceError(
            f"gradient norm {np.linalg.norm(grad(theta)):.3e} above tolerance after {iterations} iterations"
        )
    cov = np.linalg.inv(info)
    cov = 0.5 * (cov + cov.T)
    return LogitFit(
        base.with_theta(theta),
        cov,
        ll(theta),
        design.n_students,
        design.n_choices,
        float(np.linalg.norm(grad(theta))),
        iterations,
    )


# --------------------------------------------------------------------------
# simulation and interpretation


def option_utilities(
    params: LogitParams, student: Student, menu: Sequence[ProgramOption], miles: Sequence[float]
) -> np.ndarray:
    sidx = {s: k for k, s in enumerate(params.school_ids)}
    alpha = params.alpha_full
    out = np.empty(len(menu))
    for j, (p, d) in enumerate(zip(menu, miles)):
        f = pair_features(student, p, float(d))
        out[j] = sum(b * f[n] for b, n in zip(params.beta, params.feature_names)) + alpha[sidx[p.school_id]]
    return out


def simulate_ranking(
    params: LogitParams,
    student: Student,
    menu: Sequence[ProgramOption],
    miles: Sequence[float],
    rng: np.random.Generator,
    max_ranked: int = MAX_RANKED,
) -> list[str]:
    """Gumbel-perturbed utilities sorted best first, cut to ``max_ranked``."""
    if not menu:
        raise DomainError("empty menu")
    u = option_utilities(params, student, menu, miles) + rng.gumbel(size=len(menu))
    order = np.argsort(-u, kind="stable")[:max_ranked]
    return [menu[j].program_id for j in order]


def willingness_to_travel(params: LogitParams, feature: str) -> float:
    """Extra miles that offset the feature: -beta_feature / beta_distance."""
    b_dist = params.coefficient("distance")
    if b_dist == 0:
        raise DomainError("distance coefficient is zero")
    return -params.coefficient(feature) / b_dist


def miles_equivalent(beta_feature: float, beta_distance: float) -> float:
    if beta_distance == 0:
        raise DomainError("distance coefficient is zero")
    return -beta_feature / beta_distance


def closer_choice_probability(beta_distance: float, extra_miles: float = 1.0) -> float:
    """Probability of picking the closer of two otherwise identical options."""
    return 1.0 / (1.0 + math.exp(beta_distance * extra_miles))
