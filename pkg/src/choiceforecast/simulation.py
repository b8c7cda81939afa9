"""Four-layer simulation engine, outcome metrics and forecast reports.

Each simulation draws, from its own seeded substreams: an applicant pool,
demand coefficients, rankings and lottery numbers. It then runs deferred
acceptance and tabulates per-neighborhood outcomes for each grade.
"""

from __future__ import annotations

import copy
import csv
import math
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np

from .dataio import substream
from .domain import NEIGHBORHOODS, DistanceModel, MenuPolicy, ProgramOption, Student, build_menu
from .features import MAX_RANKED, menu_design, rank_from_utilities, school_index
from .mechanism import Market, access_table, deferred_acceptance
from .naive import naive_rankings
from .population import TARGET_GRADES, ParticipationModel, PoolTemplate, draw_pool_indices

SCALAR_METRICS = ("unassigned", "access", "distance")
SHARE_KS = (1, 2, 3)
METRICS = SCALAR_METRICS + tuple(f"top{k}" for k in SHARE_KS)
REFERENCES = ("self_in", "leave_one_out")


class SimulationError(RuntimeError):
    """A module error raised inside one simulation, tagged with its index."""

    def __init__(self, index: int, cause: BaseException) -> None:
        super().__init__(f"simulation {index}: {type(cause).__name__}: {cause}")
        self.index = index
        self.cause = cause


# --------------------------------------------------------------------------
# demand models


class NaiveDemand:
    """Rule-based rankings; no coefficients to draw."""

    name = "naive"
    has_coefficients = False

    def prepare(self, students, programs, menus, miles, school_ids):
        ids = {p.program_id: j for j, p in enumerate(programs)}
        ranked = naive_rankings(students, programs, menus, miles, MAX_RANKED)
        return [np.array([ids[pid] for pid in ranked[s.id]], dtype=np.int64) for s in students]

    def draw_coefficients(self, rng: np.random.Generator) -> None:
        return None

    def rank(self, prepared, rows: np.ndarray, params, rng: np.random.Generator) -> list[np.ndarray]:
        return [prepared[r] for r in rows]


class _UtilityDemand:
    has_coefficients = True
    feature_names: Sequence[str] = ()
    school_ids: Sequence[str] = ()

    def prepare(self, students, programs, menus, miles, school_ids):
        return menu_design(students, programs, menus, miles, self.feature_names, self.school_ids)

    def rank(self, prepared, rows: np.ndarray, params, rng: np.random.Generator) -> list[np.ndarray]:
        design = prepared.subset(rows)
        return rank_from_utilities(design, params.draw_utilities(design, rng), MAX_RANKED)


class LogitDemand(_UtilityDemand):
    """Coefficients drawn from the estimator's asymptotic normal."""

    name = "logit"

    def __init__(self, fit) -> None:
        self.fit = fit
        self.feature_names = fit.params.feature_names
        self.school_ids = fit.params.school_ids

    def draw_coefficients(self, rng: np.random.Generator):
        return self.fit.draw_params(rng)


class MixedDemand(_UtilityDemand):
    """Coefficients drawn uniformly from retained posterior draws."""

    name = "mixed"

    def __init__(self, posterior) -> None:
        from .mixedlogit import MIXED_FEATURES

        self.posterior = posterior
        self.feature_names = MIXED_FEATURES
        self.school_ids = posterior.school_ids

    def draw_coefficients(self, rng: np.random.Generator):
        return self.posterior.draw(rng)


class FixedDemand(_UtilityDemand):
    """Known coefficients (no estimation uncertainty); used for synthetic truth."""

    name = "fixed"
    has_coefficients = False

    def __init__(self, params) -> None:
        self.params = params
        self.feature_names = params.feature_names
        self.school_ids = params.school_ids

    def draw_coefficients(self, rng: np.random.Generator):
        return self.params


# --------------------------------------------------------------------------
# outcomes


@dataclass(frozen=True)
class SimulationOutcome:
    """Per (grade, neighborhood) outcomes of one assignment.

    Arrays are indexed ``[grade, neighborhood]``; ``shares[k]`` adds a
    school axis. Cells without students (or, for distance, without
    assigned students; for shares, without votes) hold NaN.
    """

    grades: tuple[str, ...]
    schools: tuple[str, ...]
    n_students: np.ndarray
    unassigned: np.ndarray
    access: np.ndarray
    distance: np.ndarray
    shares: Mapping[int, np.ndarray]

    def metric(self, name: str) -> np.ndarray:
        if name in SCALAR_METRICS:
            return getattr(self, name)
        return self.shares[int(name.removeprefix("top"))]


def market_shares(
    rankings: Sequence[Sequence[int]],
    neighborhoods: Sequence[int],
    program_school: Sequence[int],
    n_schools: int,
    k: int,
    n_neighborhoods: int = len(NEIGHBORHOODS),
) -> np.ndarray:
    """(neighborhood, school) share of the top-``k`` votes.

    Every program among a student's first ``k`` is one vote for its school,
    so two programs of one school count twice. Rows without votes are NaN.
    """
    if k not in SHARE_KS:
        raise ValueError(f"k must be one of {SHARE_KS}")
    school_of = np.asarray(program_school, dtype=np.int64)
    tops = [np.asarray(r[:k], dtype=np.int64) for r in rankings]
    sizes = np.array([len(t) for t in tops], dtype=np.int64)
    flat = np.concatenate(tops) if tops else np.zeros(0, dtype=np.int64)
    nb = np.repeat(np.asarray(neighborhoods, dtype=np.int64), sizes)
    votes = np.bincount(nb * n_schools + school_of[flat], minlength=n_neighborhoods * n_schools)
    votes = votes.reshape(n_neighborhoods, n_schools).astype(float)
    total = votes.sum(axis=1, keepdims=True)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(total > 0, votes / np.where(total > 0, total, 1.0), np.nan)


def tabulate_outcome(
    students: Sequence[Student],
    programs: Sequence[ProgramOption],
    rankings: Sequence[Sequence[int]],
    menus: Sequence[Sequence[str]],
    miles: np.ndarray,
    grades: Sequence[str] = TARGET_GRADES,
) -> SimulationOutcome:
    """Run deferred acceptance on one market and tabulate its outcomes.

    ``rankings`` holds program indices; ``miles`` is (students, programs).
    """
    ids = [p.program_id for p in programs]
    col = {pid: j for j, pid in enumerate(ids)}
    schools = school_index(programs)
    sidx = {s: j for j, s in enumerate(schools)}
    program_school = np.array([sidx[p.school_id] for p in programs], dtype=np.int64)
    nb_index = {nb: k for k, nb in enumerate(NEIGHBORHOODS)}
    g_index = {g: k for k, g in enumerate(grades)}

    ranking_ids = {s.id: tuple(ids[j] for j in r) for s, r in zip(students, rankings)}
    market = Market(tuple(students), tuple(programs), ranking_ids)
    matching = deferred_acceptance(market, check_ties=False)
    access = access_table(market, matching, {s.id: menus[i] for i, s in enumerate(students)})

    G, N = len(grades), len(NEIGHBORHOODS)
    n = np.zeros((G, N), dtype=np.int64)
    unassigned = np.zeros((G, N), dtype=np.int64)
    acc_sum = np.zeros((G, N))
    dist_sum = np.zeros((G, N))
    dist_n = np.zeros((G, N))
    groups: dict[int, tuple[list, list]] = {g: ([], []) for g in range(G)}
    for i, s in enumerate(students):
        g = g_index.get(s.grade)
        if g is None:
            continue
        k = nb_index[s.neighborhood]
        n[g, k] += 1
        acc_sum[g, k] += access[s.id]
        pid = matching.assignment[s.id]
        if pid is None:
            unassigned[g, k] += 1
        else:
            dist_sum[g, k] += miles[i, col[pid]]
            dist_n[g, k] += 1
        groups[g][0].append(rankings[i])
        groups[g][1].append(k)
    with np.errstate(invalid="ignore", divide="ignore"):
        access_mean = np.where(n > 0, acc_sum / np.maximum(n, 1), np.nan)
        distance = np.where(dist_n > 0, dist_sum / np.maximum(dist_n, 1), np.nan)
    shares = {
        k: np.stack([market_shares(groups[g][0], groups[g][1], program_school, len(schools), k) for g in range(G)])
        for k in SHARE_KS
    }
    return SimulationOutcome(tuple(grades), tuple(schools), n, unassigned, access_mean, distance, shares)


def dataset_outcome(dataset, grades: Sequence[str] = TARGET_GRADES) -> SimulationOutcome:
    """Outcomes of a recorded year: its rankings, lotteries and capacities."""
    col = {p.program_id: j for j, p in enumerate(dataset.programs)}
    rankings = [np.array([col[pid] for pid in dataset.observed_rankings.get(s.id, ())], dtype=np.int64) for s in dataset.students]
    menus = [dataset.menus[s.id] for s in dataset.students]
    return tabulate_outcome(dataset.students, dataset.programs, rankings, menus, dataset.miles, grades)


# --------------------------------------------------------------------------
# engine


@dataclass(frozen=True)
class SimulationConfig:
    n_simulations: int = 400
    seed: int = 0
    workers: int = 1
    reference: str = "self_in"

    def __post_init__(self) -> None:
        if self.n_simulations < 1:
            raise ValueError("n_simulations must be at least 1")
        if self.reference not in REFERENCES:
            raise ValueError(f"reference must be one of {REFERENCES}")


@dataclass
class SimulationInputs:
    """Everything a simulation needs; ``programs`` carry the capacities used."""

    demand: Any
    participation: ParticipationModel
    template: PoolTemplate
    programs: tuple[ProgramOption, ...]
    policy: MenuPolicy
    distance: DistanceModel = field(default_factory=DistanceModel)
    grades: tuple[str, ...] = TARGET_GRADES
    _prepared: Any = field(default=None, init=False, repr=False)

    def prepare(self) -> "SimulationInputs":
        """Menus, distances and demand design for every template student."""
        if self._prepared is not None:
            return self
        students = self.template.students
        programs = tuple(self.programs)
        miles = self.distance.matrix_for(students, programs) if students else np.zeros((0, len(programs)))
        menus = {s.id: build_menu(s, programs, self.policy, self.distance, miles[i]).options for i, s in enumerate(students)}
        state = self.demand.prepare(students, programs, menus, miles, school_index(programs)) if students else None
        self._prepared = (miles, [menus[s.id] for s in students], state)
        return self


def _relabel(student: Student, sid: str, lottery: float) -> Student:
    # Shallow copy of an already validated student; skips re-validation.
    out = copy.copy(student)
    object.__setattr__(out, "id", sid)
    object.__setattr__(out, "lottery_number", lottery)
    return out


def simulate_one(inputs: SimulationInputs, seed: int, index: int) -> SimulationOutcome:
    inputs.prepare()
    miles, menus, state = inputs._prepared
    rows, _ = draw_pool_indices(inputs.participation, inputs.template, substream(seed, index, "population"))
    params = inputs.demand.draw_coefficients(substream(seed, index, "coefficient"))
    rankings = inputs.demand.rank(state, rows, params, substream(seed, index, "preference")) if len(rows) else []
    lottery = substream(seed, index, "lottery").random(len(rows))
    template = inputs.template.students
    students = [_relabel(template[r], f"{k:06d}-{template[r].id}", float(u)) for k, (r, u) in enumerate(zip(rows, lottery))]
    return tabulate_outcome(students, inputs.programs, rankings, [menus[r] for r in rows], miles[rows], inputs.grades)


_WORKER_INPUTS: SimulationInputs | None = None


def _init_worker(inputs: SimulationInputs) -> None:
    global _WORKER_INPUTS
    _WORKER_INPUTS = inputs


def _worker_run(args: tuple[int, int]) -> SimulationOutcome:
    seed, index = args
    assert _WORKER_INPUTS is not None
    try:
        return simulate_one(_WORKER_INPUTS, seed, index)
    except Exception as exc:
        raise SimulationError(index, exc) from exc


def run_simulation(config: SimulationConfig, inputs: SimulationInputs) -> list[SimulationOutcome]:
    """All simulations in index order; results do not depend on ``workers``."""
    inputs.prepare()
    jobs = [(config.seed, s) for s in range(config.n_simulations)]
    if config.workers <= 1 or config.n_simulations == 1:
        out = []
        for seed, s in jobs:
            try:
                out.append(simulate_one(inputs, seed, s))
            except Exception as exc:
                raise SimulationError(s, exc) from exc
        return out
    with ProcessPoolExecutor(config.workers, initializer=_init_worker, initargs=(inputs,)) as pool:
        return list(pool.map(_worker_run, jobs, chunksize=max(1, len(jobs) // (4 * config.workers))))


# --------------------------------------------------------------------------
# errors, tail distributions and reports


def tv_distance(p: Sequence[float], q: Sequence[float]) -> float:
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    if p.shape != q.shape:
        raise ValueError(f"share vectors differ in length: {p.shape} vs {q.shape}")
    return 0.5 * float(np.abs(p - q).sum())


def rmse(errors: Sequence[float]) -> float:
    """Root mean square over neighborhoods; NaN entries (empty cells) are skipped."""
    e = np.asarray(errors, dtype=float)
    if e.size == 0:
        raise ValueError("rmse of an empty error vector")
    e = e[~np.isnan(e)]
    return float(np.sqrt(np.mean(e * e))) if e.size else math.nan


def neighborhood_errors(value: np.ndarray, predicted: np.ndarray) -> np.ndarray:
    """Absolute error per neighborhood, or total variation distance when the
    arrays carry a trailing school axis."""
    value = np.asarray(value, dtype=float)
    predicted = np.asarray(predicted, dtype=float)
    if value.shape != predicted.shape:
        raise ValueError("outcome and prediction shapes differ")
    if value.ndim == 1:
        return np.abs(value - predicted)
    return 0.5 * np.abs(value - predicted).sum(axis=-1)


def _predicted_means(simulated: np.ndarray, reference: str) -> np.ndarray:
    """Cross-simulation mean, or for ``leave_one_out`` one mean per simulation
    that excludes it. NaN entries are ignored."""
    finite = ~np.isnan(simulated)
    total = np.where(finite, simulated, 0.0).sum(axis=0)
    count = finite.sum(axis=0)
    with np.errstate(invalid="ignore", divide="ignore"):
        if reference == "self_in":
            mean = np.where(count > 0, total / np.maximum(count, 1), np.nan)
            return np.broadcast_to(mean, simulated.shape)
        if reference == "leave_one_out":
            t = total[None] - np.where(finite, simulated, 0.0)
            c = count[None] - finite
            return np.where(c > 0, t / np.maximum(c, 1), np.nan)
    raise ValueError(f"reference must be one of {REFERENCES}")


def _share_rows(x: np.ndarray) -> np.ndarray:
    """Share rows with any NaN become all-NaN so TV comes out NaN."""
    bad = np.isnan(x).any(axis=-1, keepdims=True)
    return np.where(bad, np.nan, x)


@dataclass(frozen=True)
class TailResult:
    expected_rmse: float
    actual_rmse: float
    p_value: float
    simulated_rmse: np.ndarray

    def survival_curve(self) -> tuple[np.ndarray, np.ndarray]:
        """(rmse, fraction of simulations with at least that rmse)."""
        x = np.sort(self.simulated_rmse[~np.isnan(self.simulated_rmse)])
        surv = 1.0 - np.arange(len(x)) / max(len(x), 1)
        return x, surv


def pvalue_from_tail(
    simulated: np.ndarray,
    actual: np.ndarray,
    predicted: np.ndarray | None = None,
    reference: str = "self_in",
) -> TailResult:
    """Tail probability of the realized RMSE among simulated RMSEs.

    ``simulated`` is (S, neighborhoods) for scalar metrics or (S,
    neighborhoods, schools) for market shares. Each simulation's RMSE is
    taken about the cross-simulation mean (``self_in``) or the mean of the
    other simulations (``leave_one_out``); the realized RMSE is taken about
    ``predicted`` (default: the cross-simulation mean).
    """
    sim = np.asarray(simulated, dtype=float)
    if sim.shape[0] < 2:
        raise ValueError("need at least two simulations")
    shares = sim.ndim == 3
    if shares:
        sim = _share_rows(sim)
    refs = _predicted_means(sim, reference)
    if predicted is None:
        predicted = _predicted_means(sim, "self_in")[0]
    actual = np.asarray(actual, dtype=float)
    if shares:
        actual = _share_rows(actual)
    sim_rmse = np.array([rmse(neighborhood_errors(sim[s], refs[s])) for s in range(sim.shape[0])])
    act = rmse(neighborhood_errors(actual, predicted))
    valid = sim_rmse[~np.isnan(sim_rmse)]
    if math.isnan(act) or valid.size == 0:
        return TailResult(float(np.mean(valid)) if valid.size else math.nan, act, math.nan, sim_rmse)
    p = float(np.mean(valid >= act - 1e-12 * max(1.0, act)))
    return TailResult(float(valid.mean()), act, p, sim_rmse)


def stack_metric(outcomes: Sequence[SimulationOutcome], name: str) -> np.ndarray:
    """(S, grades, neighborhoods[, schools]) array of one metric."""
    return np.stack([o.metric(name).astype(float) for o in outcomes])


@dataclass(frozen=True)
class MetricSummary:
    mean: np.ndarray
    low: np.ndarray
    high: np.ndarray


def summarize_metric(values: np.ndarray) -> MetricSummary:
    """Mean and 2.5/97.5 percentiles across simulations, ignoring NaN."""
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        mean = np.nanmean(values, axis=0)
        low, high = np.nanpercentile(values, [2.5, 97.5], axis=0)
    # Guard the ordering against floating round-off in the percentile interpolation.
    return MetricSummary(mean, np.minimum(low, mean), np.maximum(high, mean))


@dataclass(frozen=True)
class ForecastReport:
    grades: tuple[str, ...]
    schools: tuple[str, ...]
    summaries: Mapping[str, MetricSummary]
    actual: SimulationOutcome | None = None
    tails: Mapping[tuple[str, str], TailResult] = field(default_factory=dict)


def build_report(
    outcomes: Sequence[SimulationOutcome],
    actual: SimulationOutcome | None = None,
    reference: str = "self_in",
) -> ForecastReport:
    if not outcomes:
        raise ValueError("no simulations to report")
    first = outcomes[0]
    summaries = {m: summarize_metric(stack_metric(outcomes, m)) for m in METRICS}
    tails: dict[tuple[str, str], TailResult] = {}
    if len(outcomes) >= 2:
        for m in METRICS:
            values = stack_metric(outcomes, m)
            for g, grade in enumerate(first.grades):
                act = actual.metric(m)[g] if actual is not None else summaries[m].mean[g]
                tails[(m, grade)] = pvalue_from_tail(values[:, g], act, summaries[m].mean[g], reference)
    return ForecastReport(first.grades, first.schools, summaries, actual, tails)


def _fmt(x: float) -> str:
    return "" if x is None or (isinstance(x, float) and math.isnan(x)) else f"{float(x):.10g}"


def write_report(report: ForecastReport, out_dir: str | Path) -> list[Path]:
    """Per-metric tables, tail curves and a p-value table as CSV files."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    has_actual = report.actual is not None
    for m in METRICS:
        s = report.summaries[m]
        for g, grade in enumerate(report.grades):
            path = out / f"{m}_{grade}.csv"
            with path.open("w", newline="") as fh:
                w = csv.writer(fh, lineterminator="\n")
                head = ["neighborhood"] + (["school"] if m not in SCALAR_METRICS else [])
                w.writerow(head + ["mean", "ci_low", "ci_high"] + (["actual"] if has_actual else []))
                for k, nb in enumerate(NEIGHBORHOODS):
                    if m in SCALAR_METRICS:
                        row = [nb, _fmt(s.mean[g, k]), _fmt(s.low[g, k]), _fmt(s.high[g, k])]
                        if has_actual:
                            row.append(_fmt(report.actual.metric(m)[g, k]))
                        w.writerow(row)
                        continue
                    for j, school in enumerate(report.schools):
                        row = [nb, school, _fmt(s.mean[g, k, j]), _fmt(s.low[g, k, j]), _fmt(s.high[g, k, j])]
                        if has_actual:
                            row.append(_fmt(report.actual.metric(m)[g, k, j]))
                        w.writerow(row)
            written.append(path)
    if report.tails:
        path = out / "rmse_summary.csv"
        with path.open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["metric", "grade", "expected_rmse"] + (["actual_rmse", "p_value"] if has_actual else []))
            for (m, grade), t in report.tails.items():
                row = [m, grade, _fmt(t.expected_rmse)]
                if has_actual:
                    row += [_fmt(t.actual_rmse), _fmt(t.p_value)]
                w.writerow(row)
        written.append(path)
        for (m, grade), t in report.tails.items():
            path = out / f"tail_{m}_{grade}.csv"
            x, surv = t.survival_curve()
            with path.open("w", newline="") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(["rmse", "survival"])
                for a, b in zip(x, surv):
                    w.writerow([_fmt(a), _fmt(b)])
            written.append(path)
    return written
