"""Mixed logit with block-diagonal normal random coefficients, fitted by a
Gibbs sampler that embeds per-student RWM, HMC for school effects and
Metropolis-within-Gibbs for the fixed coefficients."""

from __future__ import annotations

import csv
import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .domain import DomainError, ProgramOption, Student
from .features import MAX_RANKED, MIXED_FIXED, MIXED_RANDOM, Design, pair_features
from .logit import NumericalError, ranking_loglik_terms, ranking_loglik_vgrad
from .mcmc import (
    HMC_BAND,
    RWM_BAND,
    Blocks,
    HmcState,
    MwgState,
    TargetDensity,
    TuningSchedule,
    hmc_step,
    is_spd,
    mcse,
    mwg_sweep,
    retune,
    rwm_batch_step,
    sample_inverse_wishart,
    tune_hmc,
    tune_mwg,
)

MIXED_FEATURES = MIXED_FIXED + MIXED_RANDOM
RANDOM_BLOCKS = ((0,), (1,), (2, 3, 4))
BETA_BLOCKS = ((0,), (1,), (2,), (3, 4), (5, 6), (7, 8))
BETA_SCALES = (0.5, 0.5, 0.1, 0.1, 0.5, 0.5)
CORRELATION_PAIRS = ((2, 3), (2, 4), (3, 4))


def block_mask(blocks: Sequence[Sequence[int]] = RANDOM_BLOCKS, dim: int = len(MIXED_RANDOM)) -> np.ndarray:
    mask = np.zeros((dim, dim), dtype=bool)
    for b in blocks:
        mask[np.ix_(b, b)] = True
    return mask


@dataclass(frozen=True)
class MixedLogitParams:
    """School effects ``alpha`` (last school pinned to zero), fixed
    coefficients ``beta`` over MIXED_FIXED, and the mean ``b`` and
    block-diagonal covariance ``W`` of the random coefficients over
    MIXED_RANDOM."""

    alpha: np.ndarray
    beta: np.ndarray
    b: np.ndarray
    W: np.ndarray
    school_ids: tuple[str, ...]

    feature_names = MIXED_FEATURES

    def __post_init__(self) -> None:
        for name in ("alpha", "beta", "b", "W"):
            arr = np.asarray(getattr(self, name), dtype=float).copy()
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)
        object.__setattr__(self, "school_ids", tuple(self.school_ids))
        k, r = len(MIXED_FIXED), len(MIXED_RANDOM)
        if self.alpha.shape != (len(self.school_ids) - 1,):
            raise DomainError("alpha length must be n_schools - 1")
        if self.beta.shape != (k,) or self.b.shape != (r,) or self.W.shape != (r, r):
            raise DomainError("mixed logit parameter shapes do not match the feature lists")
        if np.abs(self.W[~block_mask()]).max(initial=0.0) > 0:
            raise DomainError("W must be block diagonal with blocks (1, 1, 3)")
        for blk in RANDOM_BLOCKS:
            sub = self.W[np.ix_(blk, blk)]
            if not is_spd(sub) and not np.allclose(sub, 0):
                raise DomainError("each W block must be symmetric positive definite")

    @property
    def alpha_full(self) -> np.ndarray:
        return np.append(self.alpha, 0.0)

    def draw_gamma(self, n: int, rng: np.random.Generator) -> np.ndarray:
        chol = _safe_cholesky(self.W)
        return self.b + rng.standard_normal((n, len(self.b))) @ chol.T

    def utilities(self, design: Design, gamma: np.ndarray) -> np.ndarray:
        data = MixedData.from_design(design)
        return data.base(self.alpha, self.beta) + data.random_part(gamma)

    def draw_utilities(self, design: Design, rng: np.random.Generator) -> np.ndarray:
        gamma = self.draw_gamma(design.n_students, rng)
        return self.utilities(design, gamma) + rng.gumbel(size=design.valid.shape)

    def summary(self) -> dict[str, float]:
        return derived_summary(self.W[None])[0]


def _safe_cholesky(W: np.ndarray) -> np.ndarray:
    out = np.zeros_like(W)
    for blk in RANDOM_BLOCKS:
        sub = W[np.ix_(blk, blk)]
        if np.allclose(sub, 0):
            continue
        out[np.ix_(blk, blk)] = np.linalg.cholesky(sub)
    return out


@dataclass(frozen=True)
class MixedData:
    """Design split into fixed features F (n, L, 9) and random features G (n, L, 5)."""

    design: Design
    F: np.ndarray
    G: np.ndarray

    @classmethod
    def from_design(cls, design: Design) -> "MixedData":
        missing = [n for n in MIXED_FEATURES if n not in design.feature_names]
        if missing:
            raise DomainError(f"design lacks mixed-logit features {missing}")
        F = np.ascontiguousarray(design.columns(MIXED_FIXED))
        G = np.ascontiguousarray(design.columns(MIXED_RANDOM))
        return cls(design, F, G)

    @property
    def n(self) -> int:
        return self.design.n_students

    @property
    def n_schools(self) -> int:
        return len(self.design.school_ids)

    def base(self, alpha: np.ndarray, beta: np.ndarray) -> np.ndarray:
        return np.append(alpha, 0.0)[self.design.school] + self.F @ beta

    def random_part(self, gamma: np.ndarray) -> np.ndarray:
        return np.einsum("nlk,nk->nl", self.G, gamma)

    def phi(self, alpha, beta, gamma) -> np.ndarray:
        """Per-student ranking log-likelihood given their coefficients."""
        return ranking_loglik_terms(self.base(alpha, beta) + self.random_part(gamma), self.design)


def conditional_loglik_phi(alpha, beta, gamma_i, design: Design, i: int) -> float:
    """Log-likelihood of student ``i``'s ranking given their random coefficients."""
    data = MixedData.from_design(design.subset(np.array([i])))
    return float(data.phi(np.asarray(alpha), np.asarray(beta), np.asarray(gamma_i)[None])[0])


def total_loglik(params: MixedLogitParams, design: Design, gamma: np.ndarray) -> float:
    return float(MixedData.from_design(design).phi(params.alpha, params.beta, gamma).sum())


# --------------------------------------------------------------------------
# sampler


@dataclass(frozen=True)
class ChainConfig:
    iterations: int = 50_000
    burn_in: int = 25_000
    thin: int = 1
    seed: int = 0
    growth: float = 1.2
    growth_every: int = 5000
    gamma_scale: float = 0.05
    gamma_tune: tuple[float, float] = (1000.0, 1500.0)
    step_size: float = 0.015
    n_leapfrog: int = 20
    hmc_tune: float = 1000.0
    beta_scales: tuple[float, ...] = BETA_SCALES
    beta_tune: tuple[float, float] = (100.0, 150.0)
    trace: bool = False
    divergence_patience: int = 100
    init: str = "zeros"

    def __post_init__(self) -> None:
        if self.iterations <= self.burn_in:
            raise DomainError("iterations must exceed burn_in")
        if self.burn_in < 0 or self.thin < 1:
            raise DomainError("burn_in must be non-negative and thin positive")
        if len(self.beta_scales) != len(BETA_BLOCKS):
            raise DomainError(f"need {len(BETA_BLOCKS)} beta block scales")
        if self.init not in ("zeros", "logit"):
            raise DomainError(f"unknown chain initialization {self.init!r}")


@dataclass
class ChainState:
    """Everything one Gibbs iteration reads and writes."""

    alpha: np.ndarray
    beta: np.ndarray
    b: np.ndarray
    W: np.ndarray
    gamma: np.ndarray
    gamma_scale: np.ndarray
    gamma_accepted: np.ndarray
    gamma_proposed: np.ndarray
    gamma_next_tune: np.ndarray
    hmc: HmcState
    hmc_next_tune: int
    mwg: MwgState
    mwg_next_tune: int
    iteration: int = 0
    nan_streak: int = 0
    last_loglik: float = 0.0

    def params(self, school_ids: Sequence[str]) -> MixedLogitParams:
        return MixedLogitParams(self.alpha, self.beta, self.b, self.W, school_ids)


def initial_state(data: MixedData, config: ChainConfig, schedule: TuningSchedule, rng) -> ChainState:
    n, r = data.n, len(MIXED_RANDOM)
    alpha = np.zeros(data.n_schools - 1)
    beta = np.zeros(len(MIXED_FIXED))
    b = np.zeros(r)
    if config.init == "logit":
        # Start at the plain-logit optimum with every coefficient held fixed.
        from .logit import fit_mle

        design = data.design
        sub = Design(
            design.columns(MIXED_FEATURES), design.program, design.school, design.valid, design.stage,
            MIXED_FEATURES, design.school_ids,
        )
        fit = fit_mle(sub)
        k = len(MIXED_FIXED)
        beta, b, alpha = fit.params.beta[:k].copy(), fit.params.beta[k:].copy(), fit.params.alpha.copy()
    dummy = TargetDensity(lambda x: 0.0, len(alpha), lambda x: np.zeros_like(x))
    return ChainState(
        alpha=alpha,
        beta=beta,
        b=b,
        W=np.eye(r),
        gamma=np.tile(b, (n, 1)),
        gamma_scale=np.full(n, config.gamma_scale),
        gamma_accepted=np.zeros(n, dtype=np.int64),
        gamma_proposed=np.zeros(n, dtype=np.int64),
        gamma_next_tune=schedule.draw_interval(*config.gamma_tune, 0, rng, size=n),
        hmc=HmcState.start(alpha, dummy, config.step_size, config.n_leapfrog),
        hmc_next_tune=int(config.hmc_tune),
        mwg=MwgState.start(beta, TargetDensity(lambda x: 0.0, len(beta)), config.beta_scales),
        mwg_next_tune=int(schedule.draw_interval(*config.beta_tune, 0, rng)),
    )


def _block_inverse(W: np.ndarray) -> np.ndarray:
    out = np.zeros_like(W)
    for blk in RANDOM_BLOCKS:
        out[np.ix_(blk, blk)] = np.linalg.inv(W[np.ix_(blk, blk)])
    return out


def gibbs_iteration(
    state: ChainState,
    data: MixedData,
    config: ChainConfig,
    schedule: TuningSchedule,
    rng: np.random.Generator,
    trace: list | None = None,
) -> ChainState:
    """One pass of the five conditional updates, in place; returns ``state``."""
    t = state.iteration + 1
    n = data.n
    tuning = not schedule.frozen(t)

    # 1. random coefficients, one RWM step per student
    base = data.base(state.alpha, state.beta)
    W_inv = _block_inverse(state.W)

    def log_gamma(g):
        d = g - state.b
        prior = -0.5 * np.einsum("nk,kl,nl->n", d, W_inv, d)
        return ranking_loglik_terms(base + data.random_part(g), data.design) + prior

    current = log_gamma(state.gamma)
    state.gamma, _, acc = rwm_batch_step(state.gamma, current, state.gamma_scale, log_gamma, rng)
    state.gamma_accepted += acc
    state.gamma_proposed += 1
    if tuning:
        due = np.flatnonzero(state.gamma_next_tune <= t)
        if len(due):
            rate = state.gamma_accepted[due] / state.gamma_proposed[due]
            state.gamma_scale[due] = retune(state.gamma_scale[due], rate, RWM_BAND)
            state.gamma_accepted[due] = 0
            state.gamma_proposed[due] = 0
            state.gamma_next_tune[due] = t + schedule.draw_interval(*config.gamma_tune, t, rng, size=len(due))
            for i, a, s in zip(due, rate, state.gamma_scale[due]):
                schedule.record(t, "gamma", int(i), float(a), float(s))

    # 2. mean of the random coefficients
    chol = _safe_cholesky(state.W / n)
    state.b = state.gamma.mean(axis=0) + chol @ rng.standard_normal(len(state.b))

    # 3. covariance blocks
    W = np.zeros_like(state.W)
    dev = state.gamma - state.b
    for blk in RANDOM_BLOCKS:
        k = len(blk)
        D = dev[:, blk]
        Psi = k * np.eye(k) + D.T @ D
        W[np.ix_(blk, blk)] = sample_inverse_wishart(k + n, Psi, rng)
    state.W = W

    # 4. school effects, one HMC step
    rand = data.random_part(state.gamma)
    fixed = data.F @ state.beta
    S = data.n_schools

    def alpha_logdensity(a):
        v = np.append(a, 0.0)[data.design.school] + fixed + rand
        return float(ranking_loglik_terms(v, data.design).sum())

    def alpha_grad(a):
        v = np.append(a, 0.0)[data.design.school] + fixed + rand
        g = ranking_loglik_vgrad(v, data.design)
        w = np.where(data.design.valid, g, 0.0)
        return np.bincount(data.design.school.ravel(), weights=w.ravel(), minlength=S)[:-1]

    alpha_target = TargetDensity(alpha_logdensity, S - 1, alpha_grad)
    h = state.hmc
    h = HmcState(
        state.alpha, alpha_logdensity(state.alpha), alpha_grad(state.alpha), h.step_size, h.n_leapfrog,
        h.accepted, h.proposed, h.diverged,
    )
    h = hmc_step(h, alpha_target, rng)
    if tuning and t >= state.hmc_next_tune:
        rate = h.acceptance
        h = tune_hmc(h, HMC_BAND)
        schedule.record(t, "alpha", 0, float(rate), h.step_size)
        state.hmc_next_tune = t + max(1, int(config.hmc_tune * schedule.T(t)))
    state.hmc = h
    state.alpha = h.x

    # 5. fixed coefficients, one MWG sweep
    alpha_part = np.append(state.alpha, 0.0)[data.design.school] + rand

    def beta_logdensity(x):
        return float(ranking_loglik_terms(alpha_part + data.F @ x, data.design).sum())

    beta_target = TargetDensity(beta_logdensity, len(state.beta))
    m = state.mwg
    m = MwgState(state.beta, beta_logdensity(state.beta), m.scales, m.accepted, m.proposed)
    m = mwg_sweep(m, BETA_SPLIT, beta_target, rng)
    if tuning and t >= state.mwg_next_tune:
        rates = m.acceptance
        m = tune_mwg(m, RWM_BAND)
        for k, (a, s) in enumerate(zip(rates, m.scales)):
            schedule.record(t, "beta", k, float(a), float(s))
        state.mwg_next_tune = t + int(schedule.draw_interval(*config.beta_tune, t, rng))
    state.mwg = m
    state.beta = m.x

    state.last_loglik = m.log_density
    state.nan_streak = state.nan_streak + 1 if not math.isfinite(m.log_density) else 0
    if state.nan_streak >= config.divergence_patience:
        raise NumericalError(f"log-likelihood non-finite for {state.nan_streak} iterations at step {t}")
    state.iteration = t
    if trace is not None:
        trace.append((t, "gamma", float(acc.mean()), float(state.gamma_scale.mean())))
        trace.append((t, "alpha", float(h.acceptance), float(h.step_size)))
        for k in range(len(BETA_BLOCKS)):
            trace.append((t, f"beta{k}", float(m.acceptance[k]), float(m.scales[k])))
    return state


BETA_SPLIT = Blocks(BETA_BLOCKS, len(MIXED_FIXED))


@dataclass
class Posterior:
    """Retained draws, one row per kept iteration."""

    iterations: np.ndarray
    alpha: np.ndarray
    beta: np.ndarray
    b: np.ndarray
    W: np.ndarray
    school_ids: tuple[str, ...]
    loglik: np.ndarray
    diagnostics: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.iterations)

    def sample(self, k: int) -> MixedLogitParams:
        return MixedLogitParams(self.alpha[k], self.beta[k], self.b[k], self.W[k], self.school_ids)

    def draw(self, rng: np.random.Generator) -> MixedLogitParams:
        return self.sample(int(rng.integers(len(self))))

    def columns(self) -> dict[str, np.ndarray]:
        cols: dict[str, np.ndarray] = {"iteration": self.iterations.astype(float)}
        for j, s in enumerate(self.school_ids[:-1]):
            cols[f"alpha[{s}]"] = self.alpha[:, j]
        for j, name in enumerate(MIXED_FIXED):
            cols[f"beta[{name}]"] = self.beta[:, j]
        for j, name in enumerate(MIXED_RANDOM):
            cols[f"b[{name}]"] = self.b[:, j]
        mask = block_mask()
        for i in range(len(MIXED_RANDOM)):
            for j in range(i, len(MIXED_RANDOM)):
                if mask[i, j]:
                    cols[f"W[{MIXED_RANDOM[i]},{MIXED_RANDOM[j]}]"] = self.W[:, i, j]
        cols["loglik"] = self.loglik
        return cols

    def write_csv(self, path: str | Path) -> None:
        cols = self.columns()
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(cols)
            for row in zip(*cols.values()):
                w.writerow([repr(float(x)) for x in row])

    @classmethod
    def read_csv(cls, path: str | Path) -> "Posterior":
        with Path(path).open(newline="") as fh:
            rows = list(csv.reader(fh))
        header, data = rows[0], np.array(rows[1:], dtype=float).reshape(-1, len(rows[0]))
        col = {h: data[:, j] for j, h in enumerate(header)}
        schools = [h[6:-1] for h in header if h.startswith("alpha[")]
        r = len(MIXED_RANDOM)
        W = np.zeros((len(data), r, r))
        for h in header:
            if h.startswith("W["):
                a, c = h[2:-1].split(",")
                i, j = MIXED_RANDOM.index(a), MIXED_RANDOM.index(c)
                W[:, i, j] = W[:, j, i] = col[h]
        last = json.loads(Path(path).with_suffix(".meta.json").read_text())["normalized_school"]
        return cls(
            col["iteration"].astype(np.int64),
            np.column_stack([col[f"alpha[{s}]"] for s in schools]) if schools else np.zeros((len(data), 0)),
            np.column_stack([col[f"beta[{n}]"] for n in MIXED_FIXED]),
            np.column_stack([col[f"b[{n}]"] for n in MIXED_RANDOM]),
            W,
            tuple(schools) + (last,),
            col["loglik"],
        )

    def save(self, path: str | Path) -> None:
        """Columnar CSV of draws plus a small sidecar naming the pinned school."""
        path = Path(path)
        self.write_csv(path)
        path.with_suffix(".meta.json").write_text(
            json.dumps({"normalized_school": self.school_ids[-1]}, indent=2) + "\n"
        )


def run_chain(design: Design, config: ChainConfig) -> Posterior:
    """Full sampler run: tuning stops at burn-in, draws after it are kept."""
    data = MixedData.from_design(design)
    rng = np.random.default_rng([config.seed, 7])
    schedule = TuningSchedule(config.growth, config.growth_every, freeze_at=config.burn_in + 1)
    state = initial_state(data, config, schedule, rng)
    keep = list(range(config.burn_in + config.thin, config.iterations + 1, config.thin))
    K = len(keep)
    out = {
        "alpha": np.empty((K, data.n_schools - 1)),
        "beta": np.empty((K, len(MIXED_FIXED))),
        "b": np.empty((K, len(MIXED_RANDOM))),
        "W": np.empty((K, len(MIXED_RANDOM), len(MIXED_RANDOM))),
        "loglik": np.empty(K),
    }
    trace: list | None = [] if config.trace else None
    started = time.perf_counter()
    k = 0
    for t in range(1, config.iterations + 1):
        gibbs_iteration(state, data, config, schedule, rng, trace)
        if k < K and t == keep[k]:
            out["alpha"][k] = state.alpha
            out["beta"][k] = state.beta
            out["b"][k] = state.b
            out["W"][k] = state.W
            out["loglik"][k] = state.last_loglik
            k += 1
    if any(e.iteration > config.burn_in for e in schedule.events):
        raise RuntimeError("tuning fired inside the retained window")
    diagnostics = {
        "seconds": time.perf_counter() - started,
        "tuning_events": len(schedule.events),
        "last_tuning_iteration": max((e.iteration for e in schedule.events), default=0),
        "final_gamma_scale_mean": float(state.gamma_scale.mean()),
        "final_step_size": float(state.hmc.step_size),
        "final_beta_scales": state.mwg.scales.tolist(),
        "hmc_divergences": int(state.hmc.diverged),
        "trace": trace,
        "events": schedule.events,
    }
    return Posterior(
        np.array(keep, dtype=np.int64), out["alpha"], out["beta"], out["b"], out["W"],
        tuple(design.school_ids), out["loglik"], diagnostics,
    )


def write_trace(trace: Sequence[tuple], path: str | Path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["iteration", "block", "acceptance", "scale"])
        w.writerows(trace)


# --------------------------------------------------------------------------
# summaries


def derived_summary(W: np.ndarray) -> list[dict[str, float]]:
    """Standard deviations of every random coefficient and the three
    within-block correlations, for each covariance draw in ``W`` (k, 5, 5)."""
    sd = np.sqrt(np.clip(np.diagonal(W, axis1=1, axis2=2), 0.0, None))
    rows = []
    for k in range(len(W)):
        row = {f"sigma[{n}]": float(sd[k, j]) for j, n in enumerate(MIXED_RANDOM)}
        for i, j in CORRELATION_PAIRS:
            denom = sd[k, i] * sd[k, j]
            rho = W[k, i, j] / denom if denom > 0 else 0.0
            row[f"rho[{MIXED_RANDOM[i]},{MIXED_RANDOM[j]}]"] = float(np.clip(rho, -1.0, 1.0))
        rows.append(row)
    return rows


@dataclass(frozen=True)
class CoefficientSummary:
    name: str
    mean: float
    sd: float
    mcse: float


def summarize_posterior(posterior: Posterior) -> dict[str, CoefficientSummary]:
    """Posterior mean, standard deviation and Monte Carlo standard error of
    every fixed coefficient, random-coefficient mean, standard deviation and
    within-block correlation, plus the school effects."""
    if len(posterior) == 0:
        raise DomainError("empty posterior")
    draws: dict[str, np.ndarray] = {}
    for j, name in enumerate(MIXED_FIXED):
        draws[f"beta[{name}]"] = posterior.beta[:, j]
    for j, name in enumerate(MIXED_RANDOM):
        draws[f"b[{name}]"] = posterior.b[:, j]
    derived = derived_summary(posterior.W)
    for key in derived[0]:
        draws[key] = np.array([row[key] for row in derived])
    for j, s in enumerate(posterior.school_ids[:-1]):
        draws[f"alpha[{s}]"] = posterior.alpha[:, j]
    out = {}
    for name, x in draws.items():
        sd = float(np.std(x, ddof=1)) if len(x) > 1 else 0.0
        out[name] = CoefficientSummary(name, float(np.mean(x)), sd, mcse(x) if len(x) > 1 else 0.0)
    return out


def summary_json(summary: dict[str, CoefficientSummary], posterior: Posterior) -> dict:
    diag = {k: v for k, v in posterior.diagnostics.items() if k not in ("trace", "events")}
    return {
        "model": "mlogit",
        "school_ids": list(posterior.school_ids),
        "retained_draws": len(posterior),
        "coefficients": {k: {"mean": v.mean, "posterior_sd": v.sd, "mcse": v.mcse} for k, v in summary.items()},
        "diagnostics": diag,
    }


# --------------------------------------------------------------------------
# simulation


def simulate_ranking_mixed(
    sample: MixedLogitParams,
    student: Student,
    menu: Sequence[ProgramOption],
    miles: Sequence[float],
    rng: np.random.Generator,
    max_ranked: int = MAX_RANKED,
) -> list[str]:
    """Draw the student's coefficients, add Gumbel shocks, sort, cut to ten."""
    if not menu:
        raise DomainError("empty menu")
    gamma = sample.draw_gamma(1, rng)[0]
    sidx = {s: k for k, s in enumerate(sample.school_ids)}
    alpha = sample.alpha_full
    u = np.empty(len(menu))
    for j, (p, d) in enumerate(zip(menu, miles)):
        f = pair_features(student, p, float(d))
        u[j] = (
            alpha[sidx[p.school_id]]
            + sum(c * f[n] for c, n in zip(sample.beta, MIXED_FIXED))
            + sum(c * f[n] for c, n in zip(gamma, MIXED_RANDOM))
        )
    u += rng.gumbel(size=len(menu))
    order = np.argsort(-u, kind="stable")[:max_ranked]
    return [menu[j].program_id for j in order]
