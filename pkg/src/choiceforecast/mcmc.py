"""Sampling kernels: random-walk Metropolis, Metropolis-within-Gibbs, HMC,
inverse-Wishart draws, tuning schedules and chain diagnostics."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np
from scipy import linalg

LogDensity = Callable[[np.ndarray], float]
GradLogDensity = Callable[[np.ndarray], np.ndarray]

RWM_BAND = (0.4, 0.6)
HMC_BAND = (0.5, 0.8)
SCALE_UP = 1.25
SCALE_DOWN = 0.8


def _safe(value: float) -> float:
    """NaN log-densities count as -inf so the proposal is rejected."""
    return value if value == value else -math.inf


@dataclass(frozen=True)
class TargetDensity:
    log_density: LogDensity
    dimension: int
    grad_log_density: GradLogDensity | None = None


# --------------------------------------------------------------------------
# tuning


@dataclass
class TuningEvent:
    iteration: int
    kernel: str
    index: int
    acceptance: float
    scale: float


@dataclass
class TuningSchedule:
    """Interval parameter T that grows by ``growth`` every ``growth_every``
    iterations; nothing is tuned at or after ``freeze_at``."""

    growth: float = 1.2
    growth_every: int = 5000
    freeze_at: int | None = None
    events: list[TuningEvent] = field(default_factory=list)

    def T(self, iteration: int) -> float:
        return self.growth ** (iteration // self.growth_every)

    def frozen(self, iteration: int) -> bool:
        return self.freeze_at is not None and iteration >= self.freeze_at

    def draw_interval(self, low: float, high: float, iteration: int, rng: np.random.Generator, size=None):
        """Waiting time Uniform(low*T, high*T), at least one iteration."""
        T = self.T(iteration)
        return np.maximum(1, np.floor(rng.uniform(low * T, high * T, size=size))).astype(np.int64)

    def record(self, iteration: int, kernel: str, index: int, acceptance: float, scale: float) -> None:
        if self.frozen(iteration):
            raise RuntimeError(f"tuning event for {kernel} after the freeze point")
        self.events.append(TuningEvent(iteration, kernel, index, acceptance, scale))


def retune(scale, rate, band: tuple[float, float]):
    """Multiply by 1.25 above the band, by 0.8 below it."""
    lo, hi = band
    return np.where(rate > hi, scale * SCALE_UP, np.where(rate < lo, scale * SCALE_DOWN, scale))


# --------------------------------------------------------------------------
# random-walk Metropolis


@dataclass(frozen=True)
class RwmState:
    """``scale`` is the variance of each proposal coordinate."""

    x: np.ndarray
    log_density: float
    scale: float = 0.05
    accepted: int = 0
    proposed: int = 0

    def __post_init__(self) -> None:
        if not self.scale > 0:
            raise ValueError("RWM scale must be positive")

    @classmethod
    def start(cls, x, target: TargetDensity, scale: float = 0.05) -> "RwmState":
        x = np.asarray(x, dtype=float)
        return cls(x, _safe(float(target.log_density(x))), scale)

    @property
    def acceptance(self) -> float:
        return self.accepted / self.proposed if self.proposed else 0.0


def rwm_step(state: RwmState, target: TargetDensity, rng: np.random.Generator) -> RwmState:
    y = state.x + math.sqrt(state.scale) * rng.standard_normal(state.x.shape)
    ly = _safe(float(target.log_density(y)))
    log_u = math.log(rng.random())
    if ly > -math.inf and log_u < ly - state.log_density:
        return replace(state, x=y, log_density=ly, accepted=state.accepted + 1, proposed=state.proposed + 1)
    return replace(state, proposed=state.proposed + 1)


def tune_rwm(state: RwmState, band: tuple[float, float] = RWM_BAND) -> RwmState:
    """Rescale from the acceptance rate since the last tuning and reset counters."""
    scale = float(retune(state.scale, state.acceptance, band))
    return replace(state, scale=scale, accepted=0, proposed=0)


def rwm_batch_step(
    x: np.ndarray,
    log_density: np.ndarray,
    scale: np.ndarray,
    batch_log_density: Callable[[np.ndarray], np.ndarray],
    rng: np.random.Generator,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Independent RWM steps for many chains at once.

    ``x`` is (n, d); ``batch_log_density`` maps (n, d) to (n,). Returns the
    new points, their log-densities and the acceptance mask.
    """
    y = x + np.sqrt(scale)[:, None] * rng.standard_normal(x.shape)
    ly = batch_log_density(y)
    ly = np.where(np.isnan(ly), -np.inf, ly)
    log_u = np.log(rng.random(len(x)))
    with np.errstate(invalid="ignore"):
        accept = (ly > -np.inf) & (log_u < ly - log_density)
    return np.where(accept[:, None], y, x), np.where(accept, ly, log_density), accept


# --------------------------------------------------------------------------
# Metropolis within Gibbs


@dataclass(frozen=True)
class Blocks:
    """Partition of coordinates into sub-vectors sampled one after another."""

    index: tuple[tuple[int, ...], ...]
    dimension: int

    def __post_init__(self) -> None:
        flat = [i for b in self.index for i in b]
        if len(flat) != len(set(flat)):
            raise ValueError("blocks overlap")
        if sorted(flat) != list(range(self.dimension)):
            raise ValueError("blocks must cover every coordinate exactly once")
        if any(len(b) == 0 for b in self.index):
            raise ValueError("empty block")

    def __len__(self) -> int:
        return len(self.index)


@dataclass(frozen=True)
class MwgState:
    x: np.ndarray
    log_density: float
    scales: np.ndarray
    accepted: np.ndarray
    proposed: np.ndarray

    @classmethod
    def start(cls, x, target: TargetDensity, scales: Sequence[float]) -> "MwgState":
        x = np.asarray(x, dtype=float)
        k = len(scales)
        return cls(
            x,
            _safe(float(target.log_density(x))),
            np.asarray(scales, dtype=float),
            np.zeros(k, dtype=np.int64),
            np.zeros(k, dtype=np.int64),
        )

    @property
    def acceptance(self) -> np.ndarray:
        return self.accepted / np.maximum(self.proposed, 1)


def mwg_sweep(state: MwgState, blocks: Blocks, target: TargetDensity, rng: np.random.Generator) -> MwgState:
    """One RWM step per block, in order, each seeing the latest other blocks."""
    if len(blocks) != len(state.scales):
        raise ValueError("one scale per block required")
    x = state.x.copy()
    lx = state.log_density
    accepted = state.accepted.copy()
    proposed = state.proposed.copy()
    for b, idx in enumerate(blocks.index):
        idx = list(idx)
        y = x.copy()
        y[idx] += math.sqrt(state.scales[b]) * rng.standard_normal(len(idx))
        ly = _safe(float(target.log_density(y)))
        proposed[b] += 1
        if ly > -math.inf and math.log(rng.random()) < ly - lx:
            x, lx = y, ly
            accepted[b] += 1
    return MwgState(x, lx, state.scales, accepted, proposed)


def tune_mwg(state: MwgState, band: tuple[float, float] = RWM_BAND) -> MwgState:
    scales = retune(state.scales, state.acceptance, band)
    k = len(scales)
    return MwgState(state.x, state.log_density, scales, np.zeros(k, np.int64), np.zeros(k, np.int64))


# --------------------------------------------------------------------------
# Hamiltonian Monte Carlo


@dataclass(frozen=True)
class HmcState:
    x: np.ndarray
    log_density: float
    grad: np.ndarray
    step_size: float = 0.015
    n_leapfrog: int = 20
    accepted: int = 0
    proposed: int = 0
    diverged: int = 0

    def __post_init__(self) -> None:
        if not self.step_size > 0:
            raise ValueError("HMC step size must be positive")
        if self.n_leapfrog < 1:
            raise ValueError("HMC needs at least one leapfrog step")

    @classmethod
    def start(cls, x, target: TargetDensity, step_size: float = 0.015, n_leapfrog: int = 20) -> "HmcState":
        if target.grad_log_density is None:
            raise ValueError("HMC needs a gradient")
        x = np.asarray(x, dtype=float)
        return cls(x, _safe(float(target.log_density(x))), np.asarray(target.grad_log_density(x)), step_size, n_leapfrog)

    @property
    def acceptance(self) -> float:
        return self.accepted / self.proposed if self.proposed else 0.0


def leapfrog(
    x: np.ndarray, p: np.ndarray, grad: GradLogDensity, step: float, n_steps: int, grad_x: np.ndarray | None = None
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Half momentum step, alternating full steps, final half step.

    The momentum moves up the log-density gradient. Returns the end point,
    end momentum and gradient at the end point.
    """
    y = x.copy()
    g = grad(y) if grad_x is None else grad_x
    p = p + 0.5 * step * g
    for _ in range(n_steps - 1):
        y = y + step * p
        g = grad(y)
        p = p + step * g
    y = y + step * p
    g = grad(y)
    p = p + 0.5 * step * g
    return y, p, g


def hamiltonian_error(target: TargetDensity, x, p0, y, p) -> float:
    """Change in total energy along a trajectory (zero for exact dynamics)."""
    h0 = 0.5 * float(p0 @ p0) - float(target.log_density(x))
    h1 = 0.5 * float(p @ p) - float(target.log_density(y))
    return h1 - h0


def hmc_step(
    state: HmcState,
    target: TargetDensity,
    rng: np.random.Generator,
    momentum: np.ndarray | None = None,
    jitter: bool = True,
) -> HmcState:
    """One HMC transition with step size jittered in [0.85, 1.15] times nominal.

    ``momentum`` overrides the Normal(0, I) momentum draw (test harnesses).
    """
    grad = target.grad_log_density
    step = state.step_size * (rng.uniform(0.85, 1.15) if jitter else 1.0)
    p0 = rng.standard_normal(state.x.shape) if momentum is None else np.asarray(momentum, dtype=float)
    with np.errstate(all="ignore"):
        y, p, g = leapfrog(state.x, p0, grad, step, state.n_leapfrog, state.grad)
        ly = _safe(float(target.log_density(y)))
    log_u = math.log(rng.random())
    ok = np.isfinite(y).all() and np.isfinite(p).all() and np.isfinite(g).all() and ly > -math.inf
    if not ok:
        return replace(state, proposed=state.proposed + 1, diverged=state.diverged + 1)
    log_a = ly - state.log_density + 0.5 * (float(p0 @ p0) - float(p @ p))
    if log_u < log_a:
        return replace(
            state, x=y, log_density=ly, grad=g, accepted=state.accepted + 1, proposed=state.proposed + 1
        )
    return replace(state, proposed=state.proposed + 1)


def tune_hmc(state: HmcState, band: tuple[float, float] = HMC_BAND) -> HmcState:
    step = float(retune(state.step_size, state.acceptance, band))
    return replace(state, step_size=step, accepted=0, proposed=0)


# --------------------------------------------------------------------------
# inverse Wishart


def sample_wishart(nu: float, scale: np.ndarray, rng: np.random.Generator, size: int | None = None) -> np.ndarray:
    """Wishart(nu, scale) by the Bartlett decomposition: L A A^T L^T."""
    scale = np.atleast_2d(np.asarray(scale, dtype=float))
    d = scale.shape[0]
    if nu <= d - 1:
        raise ValueError(f"degrees of freedom {nu} must exceed dimension - 1 = {d - 1}")
    try:
        L = np.linalg.cholesky(scale)
    except np.linalg.LinAlgError:
        raise ValueError("scale matrix is not symmetric positive definite") from None
    n = 1 if size is None else size
    A = np.zeros((n, d, d))
    A[:, np.arange(d), np.arange(d)] = np.sqrt(rng.chisquare(nu - np.arange(d), size=(n, d)))
    rows, cols = np.tril_indices(d, -1)
    A[:, rows, cols] = rng.standard_normal((n, len(rows)))
    LA = L @ A
    W = LA @ np.swapaxes(LA, 1, 2)
    return W[0] if size is None else W


def sample_inverse_wishart(
    nu: float, Psi: np.ndarray, rng: np.random.Generator, size: int | None = None
) -> np.ndarray:
    """Inverse-Wishart(nu, Psi): invert a Wishart(nu, Psi^-1) draw.

    The mean is Psi / (nu - d - 1) when nu > d + 1.
    """
    Psi = np.atleast_2d(np.asarray(Psi, dtype=float))
    if not np.allclose(Psi, Psi.T):
        raise ValueError("scale matrix is not symmetric")
    try:
        c = linalg.cho_factor(Psi, lower=True)
    except linalg.LinAlgError:
        raise ValueError("scale matrix is not symmetric positive definite") from None
    Psi_inv = linalg.cho_solve(c, np.eye(Psi.shape[0]))
    Psi_inv = 0.5 * (Psi_inv + Psi_inv.T)
    W = sample_wishart(nu, Psi_inv, rng, size=1 if size is None else size)
    out = np.linalg.inv(W)
    out = 0.5 * (out + np.swapaxes(out, 1, 2))
    return out[0] if size is None else out


def is_spd(M: np.ndarray) -> bool:
    try:
        np.linalg.cholesky(M)
    except np.linalg.LinAlgError:
        return False
    return bool(np.allclose(M, M.T))


# --------------------------------------------------------------------------
# diagnostics


def autocorrelation(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    n = len(x)
    x = x - x.mean()
    size = 1 << (2 * n - 1).bit_length()
    f = np.fft.rfft(x, size)
    acov = np.fft.irfft(f * np.conj(f), size)[:n] / n
    return acov / acov[0] if acov[0] > 0 else np.zeros(n)


def effective_sample_size(x: np.ndarray) -> float:
    """ESS with Geyer's initial monotone positive sequence estimator."""
    x = np.asarray(x, dtype=float)
    n = len(x)
    if n < 4 or np.ptp(x) == 0:
        return float(n)
    rho = autocorrelation(x)
    pairs = rho[: 2 * (n // 2)].reshape(-1, 2).sum(axis=1)
    positive = np.flatnonzero(pairs <= 0)
    m = positive[0] if len(positive) else len(pairs)
    gamma = np.minimum.accumulate(pairs[:m]) if m else np.zeros(0)
    tau = -1.0 + 2.0 * gamma.sum()
    return float(n / max(tau, 1.0 / n))


def mcse(x: np.ndarray) -> float:
    """Monte Carlo standard error of the mean of a chain."""
    x = np.asarray(x, dtype=float)
    if len(x) < 2:
        return 0.0
    return float(np.std(x, ddof=1) / math.sqrt(effective_sample_size(x)))
