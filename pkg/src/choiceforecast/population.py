"""Applicant-pool forecast: trend-or-mean cell forecasts and pool resampling."""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from scipy import stats

from .domain import NEIGHBORHOODS, NEXT_GRADE, DomainError, ProgramOption, Student

TARGET_GRADES = ("K1", "K2")
SIGNIFICANCE = 0.05


@dataclass(frozen=True)
class TrendSeries:
    """Least-squares line through a yearly series, evaluated at ``target_year``.

    ``se`` is the residual standard error with n - 2 degrees of freedom;
    ``p_value`` is the two-sided t-test of a zero slope.
    """

    years: tuple[int, ...]
    values: tuple[float, ...]
    target_year: int
    slope: float
    intercept: float
    prediction: float
    se: float
    p_value: float

    @classmethod
    def fit(cls, years: Sequence[int], values: Sequence[float], target_year: int) -> "TrendSeries":
        x = np.asarray(years, dtype=float)
        y = np.asarray(values, dtype=float)
        if len(x) != len(y):
            raise DomainError("years and values differ in length")
        if len(x) < 3:
            raise DomainError(f"trend needs at least 3 observations, got {len(x)}")
        if np.any(np.diff(x) <= 0):
            raise DomainError("years must be strictly increasing")
        xc = x - x.mean()
        sxx = float(xc @ xc)
        slope = float(xc @ (y - y.mean())) / sxx
        intercept = float(y.mean() - slope * x.mean())
        resid = y - (intercept + slope * x)
        dof = len(x) - 2
        ssr = float(resid @ resid)
        # Exact fits leave round-off residuals; treat them as zero.
        if ssr <= 1e-24 * max(1.0, float(y @ y)):
            ssr = 0.0
        se = math.sqrt(ssr / dof)
        se_slope = se / math.sqrt(sxx)
        if se_slope > 0:
            p = float(2.0 * stats.t.sf(abs(slope) / se_slope, dof))
        else:
            p = 0.0 if abs(slope) > 0 else 1.0
        return cls(
            tuple(int(v) for v in years),
            tuple(float(v) for v in values),
            int(target_year),
            slope,
            intercept,
            intercept + slope * target_year,
            se,
            p,
        )

    @property
    def significant(self) -> bool:
        return self.p_value < SIGNIFICANCE


@dataclass(frozen=True)
class CellForecast:
    """Normal forecast for one quantity; ``method`` is "trend" or "mean"."""

    mean: float
    sd: float
    method: str = "mean"
    p_value: float | None = None
    n_obs: int = 0

    def __post_init__(self) -> None:
        if not self.sd >= 0:
            raise DomainError("forecast sd must be non-negative")

    def to_dict(self) -> dict:
        return {"mean": self.mean, "sd": self.sd, "method": self.method, "p_value": self.p_value, "n_obs": self.n_obs}

    @classmethod
    def from_dict(cls, d: Mapping) -> "CellForecast":
        return cls(float(d["mean"]), float(d["sd"]), d.get("method", "mean"), d.get("p_value"), int(d.get("n_obs", 0)))


def fit_trend_or_mean(
    years: Sequence[int],
    values: Sequence[float],
    target_year: int,
    always_trend: bool = False,
) -> CellForecast:
    """Regression forecast when the slope is significant at 5% (two-sided),
    otherwise the sample mean and sample standard deviation."""
    trend = TrendSeries.fit(years, values, target_year)
    if always_trend or trend.significant:
        return CellForecast(trend.prediction, trend.se, "trend", trend.p_value, len(trend.years))
    v = np.asarray(values, dtype=float)
    return CellForecast(float(v.mean()), float(v.std(ddof=1)), "mean", trend.p_value, len(v))


def _short_forecast(values: Sequence[float]) -> CellForecast:
    """Fallback for cells with fewer than three observations."""
    v = np.asarray(values, dtype=float)
    if len(v) == 0:
        return CellForecast(0.0, 0.0, "empty", None, 0)
    return CellForecast(float(v.mean()), float(v.std(ddof=1)) if len(v) > 1 else 0.0, "mean", None, len(v))


def _cell_forecast(years: Sequence[int], values: Sequence[float], target_year: int) -> CellForecast:
    if len(values) >= 3:
        return fit_trend_or_mean(years, values, target_year)
    return _short_forecast(values)


Cell = tuple[str, str]


def all_cells() -> list[Cell]:
    return [(g, nb) for g in TARGET_GRADES for nb in NEIGHBORHOODS]


@dataclass(frozen=True)
class ParticipationModel:
    """Citywide new-applicant total, per-cell share of that total, and
    per-cell continuing ratio, each a normal forecast for ``target_year``."""

    target_year: int
    total_new: CellForecast
    proportions: Mapping[Cell, CellForecast]
    continuing_ratio: Mapping[Cell, CellForecast]

    def __post_init__(self) -> None:
        missing = set(all_cells()) - set(self.proportions)
        if missing:
            raise DomainError(f"proportion forecasts missing for {sorted(missing)}")
        missing = set(all_cells()) - set(self.continuing_ratio)
        if missing:
            raise DomainError(f"continuing-ratio forecasts missing for {sorted(missing)}")

    def to_dict(self) -> dict:
        def table(cells: Mapping[Cell, CellForecast]) -> dict:
            return {g: {nb: cells[(g, nb)].to_dict() for nb in NEIGHBORHOODS} for g in TARGET_GRADES}

        return {
            "target_year": self.target_year,
            "total_new": self.total_new.to_dict(),
            "proportions": table(self.proportions),
            "continuing_ratio": table(self.continuing_ratio),
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "ParticipationModel":
        def table(t: Mapping) -> dict[Cell, CellForecast]:
            return {(g, nb): CellForecast.from_dict(v) for g, row in t.items() for nb, v in row.items()}

        return cls(
            int(d["target_year"]),
            CellForecast.from_dict(d["total_new"]),
            table(d["proportions"]),
            table(d["continuing_ratio"]),
        )

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "ParticipationModel":
        return cls.from_dict(json.loads(Path(path).read_text()))

    @classmethod
    def fixed(
        cls,
        target_year: int,
        total: float,
        proportions: Mapping[Cell, float],
        ratios: Mapping[Cell, float] | float = 1.0,
    ) -> "ParticipationModel":
        """Degenerate model with every standard deviation zero."""
        props = {c: CellForecast(float(proportions.get(c, 0.0)), 0.0) for c in all_cells()}
        if isinstance(ratios, Mapping):
            rat = {c: CellForecast(float(ratios.get(c, 0.0)), 0.0) for c in all_cells()}
        else:
            rat = {c: CellForecast(float(ratios), 0.0) for c in all_cells()}
        return cls(target_year, CellForecast(float(total), 0.0), props, rat)


# --------------------------------------------------------------------------
# observed participation series


def is_new_applicant(student: Student) -> bool:
    return student.continuing_program is None


def next_grade_program(
    program: ProgramOption, grade: str, programs: Sequence[ProgramOption]
) -> ProgramOption | None:
    """Program a student assigned to ``program`` continues in at ``grade``:
    same school, admitting that grade, preferring the same ELL status."""
    if program.grade is None:
        return program
    options = [p for p in programs if p.school_id == program.school_id and p.grade in (grade, None)]
    if not options:
        return None
    options.sort(key=lambda p: (p.is_ell_program != program.is_ell_program, p.program_id))
    return options[0]


def potential_continuers(dataset) -> list[Student]:
    """Students assigned in ``dataset`` who could continue next year, as
    next-grade applicants holding their next-grade continuing program."""
    if dataset.assignments is None:
        raise DomainError(f"year {dataset.year}: continuing students need assignments")
    table = dataset.program_table
    out = []
    for s in dataset.students:
        pid = dataset.assignments.get(s.id)
        nxt = NEXT_GRADE.get(s.grade)
        if pid is None or nxt not in TARGET_GRADES:
            continue
        target = next_grade_program(table[pid], nxt, dataset.programs)
        if target is None:
            continue
        out.append(replace(s, grade=nxt, continuing_program=target.program_id, lottery_number=0.5))
    return out


@dataclass(frozen=True)
class ParticipationSeries:
    years: tuple[int, ...]
    total_new: tuple[float, ...]
    proportions: Mapping[Cell, tuple[float, ...]]
    ratio_years: Mapping[Cell, tuple[int, ...]]
    ratios: Mapping[Cell, tuple[float, ...]]


def participation_series(history: Mapping[int, object]) -> ParticipationSeries:
    """Yearly totals, cell shares and continuing ratios from datasets keyed by year.

    A continuing ratio for year t needs year t - 1; cells with no
    potential continuers that year contribute no observation.
    """
    years = tuple(sorted(history))
    totals, props = [], {c: [] for c in all_cells()}
    ratio_years: dict[Cell, list[int]] = {c: [] for c in all_cells()}
    ratios: dict[Cell, list[float]] = {c: [] for c in all_cells()}
    for y in years:
        d = history[y]
        new = [s for s in d.students if is_new_applicant(s)]
        totals.append(float(len(new)))
        counts: dict[Cell, int] = {}
        for s in new:
            counts[(s.grade, s.neighborhood)] = counts.get((s.grade, s.neighborhood), 0) + 1
        for c in all_cells():
            props[c].append(counts.get(c, 0) / len(new) if new else 0.0)
        prev = history.get(y - 1)
        if prev is None or prev.assignments is None:
            continue
        pot: dict[Cell, int] = {}
        for s in potential_continuers(prev):
            pot[(s.grade, s.neighborhood)] = pot.get((s.grade, s.neighborhood), 0) + 1
        came: dict[Cell, int] = {}
        for s in d.students:
            if not is_new_applicant(s):
                came[(s.grade, s.neighborhood)] = came.get((s.grade, s.neighborhood), 0) + 1
        for c in all_cells():
            if pot.get(c, 0) > 0:
                ratio_years[c].append(y)
                ratios[c].append(came.get(c, 0) / pot[c])
    return ParticipationSeries(
        years,
        tuple(totals),
        {c: tuple(v) for c, v in props.items()},
        {c: tuple(v) for c, v in ratio_years.items()},
        {c: tuple(v) for c, v in ratios.items()},
    )


def fit_participation(history: Mapping[int, object], target_year: int) -> ParticipationModel:
    """Forecast model from at least three years of history.

    The citywide total always follows its regression line; shares and
    continuing ratios keep a trend only when its slope is significant.
    """
    series = participation_series(history)
    if len(series.years) < 3:
        raise DomainError(f"participation forecast needs at least 3 years, got {len(series.years)}")
    if target_year <= series.years[-1]:
        raise DomainError("target year must follow the history")
    total = fit_trend_or_mean(series.years, series.total_new, target_year, always_trend=True)
    props = {c: _cell_forecast(series.years, series.proportions[c], target_year) for c in all_cells()}
    rats = {c: _cell_forecast(series.ratio_years[c], series.ratios[c], target_year) for c in all_cells()}
    return ParticipationModel(target_year, total, props, rats)


# --------------------------------------------------------------------------
# drawing a pool


@dataclass(frozen=True)
class PoolDraw:
    """One realization of the participation shocks."""

    total: float
    proportions: Mapping[Cell, float]
    ratios: Mapping[Cell, float]
    counts: Mapping[Cell, int]


def draw_shocks(model: ParticipationModel, rng: np.random.Generator) -> PoolDraw:
    """Independent normal draws; cell count = round(max(0, total x share)).

    Shares are used as drawn (not renormalized) and ratios are clamped to
    [0, 1].
    """
    cells = all_cells()
    total = model.total_new.mean + model.total_new.sd * rng.standard_normal()
    z = rng.standard_normal((2, len(cells)))
    props = {c: model.proportions[c].mean + model.proportions[c].sd * z[0, k] for k, c in enumerate(cells)}
    ratios = {
        c: min(1.0, max(0.0, model.continuing_ratio[c].mean + model.continuing_ratio[c].sd * z[1, k]))
        for k, c in enumerate(cells)
    }
    counts = {c: int(round(max(0.0, total * props[c]))) for c in cells}
    return PoolDraw(float(total), props, ratios, counts)


@dataclass(frozen=True)
class PoolTemplate:
    """Base-year students a pool is resampled from.

    ``students`` lists the new applicants of the target grades followed by
    the potential continuers; ``new_by_cell`` and ``cont_by_cell`` index
    into it.
    """

    students: tuple[Student, ...]
    new_by_cell: Mapping[Cell, np.ndarray]
    cont_by_cell: Mapping[Cell, np.ndarray]
    year: int = 0

    @classmethod
    def from_dataset(cls, dataset) -> "PoolTemplate":
        new = [s for s in dataset.students if is_new_applicant(s) and s.grade in TARGET_GRADES]
        cont = potential_continuers(dataset) if dataset.assignments is not None else []
        students = tuple(new) + tuple(cont)
        new_by: dict[Cell, list[int]] = {c: [] for c in all_cells()}
        cont_by: dict[Cell, list[int]] = {c: [] for c in all_cells()}
        for k, s in enumerate(students):
            (new_by if k < len(new) else cont_by)[(s.grade, s.neighborhood)].append(k)
        as_arr = lambda m: {c: np.asarray(v, dtype=np.int64) for c, v in m.items()}  # noqa: E731
        return cls(students, as_arr(new_by), as_arr(cont_by), dataset.year)


def draw_pool_indices(
    model: ParticipationModel, template: PoolTemplate, rng: np.random.Generator
) -> tuple[np.ndarray, PoolDraw]:
    """Template rows of one simulated pool (new applicants with
    replacement, then the continuers kept), with the shocks behind it."""
    shocks = draw_shocks(model, rng)
    rows = []
    for c in all_cells():
        n = shocks.counts[c]
        base = template.new_by_cell.get(c, np.zeros(0, dtype=np.int64))
        if n > 0 and len(base) == 0:
            warnings.warn(f"no base-year new applicants in {c[0]} {c[1]}; drawing 0 instead of {n}", stacklevel=2)
            continue
        if n > 0:
            rows.append(base[rng.integers(0, len(base), size=n)])
    for c in all_cells():
        pool = template.cont_by_cell.get(c, np.zeros(0, dtype=np.int64))
        if len(pool):
            rows.append(pool[rng.random(len(pool)) < shocks.ratios[c]])
    idx = np.concatenate(rows) if rows else np.zeros(0, dtype=np.int64)
    return idx, shocks


def pool_students(template: PoolTemplate, rows: np.ndarray, target_year: int) -> list[Student]:
    """Fresh ids for the drawn rows so repeated draws stay distinct."""
    return [replace(template.students[r], id=f"{target_year}-{k:06d}-{template.students[r].id}") for k, r in enumerate(rows)]


def draw_applicant_pool(model: ParticipationModel, base_year_data, rng: np.random.Generator) -> list[Student]:
    """Applicant pool for ``model.target_year`` resampled from the base year."""
    template = base_year_data if isinstance(base_year_data, PoolTemplate) else PoolTemplate.from_dataset(base_year_data)
    rows, _ = draw_pool_indices(model, template, rng)
    return pool_students(template, rows, model.target_year)
