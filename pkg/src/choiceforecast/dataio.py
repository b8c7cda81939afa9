"""Dataset loading, validation, capacity inference and synthetic markets."""

from __future__ import annotations

import csv
import json
import math
import warnings
from collections import Counter
from dataclasses import dataclass, field, replace
from functools import cached_property
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np

from .domain import (
    GRADES,
    NEIGHBORHOODS,
    NEXT_GRADE,
    RACES,
    DistanceModel,
    DomainError,
    MenuPolicy,
    ProgramOption,
    Student,
    build_menu,
    haversine_matrix,
    make_policy,
)
from .features import MAX_RANKED, Design, menu_design, rank_from_utilities, ranking_design, school_index

SCHEMA_VERSION = 1

STUDENT_COLUMNS = (
    "id",
    "grade",
    "neighborhood",
    "geocode",
    "lat",
    "lon",
    "race",
    "income",
    "is_ell",
    "ell_language",
    "continuing_program",
    "sibling_schools",
    "lottery_number",
    "ranking",
    "menu",
)
PROGRAM_COLUMNS = (
    "program_id",
    "school_id",
    "grade",
    "tier",
    "capacity",
    "mcas_share",
    "pct_white_asian",
    "lat",
    "lon",
    "is_ell_program",
    "ell_language",
)
DISTANCE_COLUMNS = ("geocode", "school_id", "miles")


class DataValidationError(DomainError):
    """Input files violate the schema; the message lists every bad row."""


@dataclass(frozen=True)
class Dataset:
    """One application year.

    ``menus`` maps student id to the programs the student could rank;
    ``assignments`` (optional) maps student id to the assigned program id
    or ``None`` when the student went unassigned.
    """

    students: tuple[Student, ...]
    programs: tuple[ProgramOption, ...]
    observed_rankings: Mapping[str, tuple[str, ...]]
    year: int
    menus: Mapping[str, tuple[str, ...]]
    distance: DistanceModel = field(default_factory=DistanceModel)
    assignments: Mapping[str, str | None] | None = None

    def __post_init__(self) -> None:
        errors = _validate(self)
        if errors:
            raise DataValidationError("\n".join(errors))

    @cached_property
    def miles(self) -> np.ndarray:
        return self.distance.matrix_for(self.students, self.programs)

    @cached_property
    def school_ids(self) -> tuple[str, ...]:
        return school_index(self.programs)

    @cached_property
    def program_table(self) -> dict[str, ProgramOption]:
        return {p.program_id: p for p in self.programs}

    def design(
        self,
        feature_names: Sequence[str],
        denominator: str = "ranked",
    ) -> Design:
        return ranking_design(
            self.students,
            self.programs,
            self.observed_rankings,
            self.miles,
            feature_names,
            denominator,
            self.menus,
            self.school_ids,
        )

    def with_students(self, keep: Sequence[str]) -> "Dataset":
        ids = set(keep)
        students = tuple(s for s in self.students if s.id in ids)
        sub = lambda m: {k: v for k, v in m.items() if k in ids}  # noqa: E731
        return replace(
            self,
            students=students,
            observed_rankings=sub(self.observed_rankings),
            menus=sub(self.menus),
            assignments=None if self.assignments is None else sub(self.assignments),
        )


def _validate(d: Dataset) -> list[str]:
    errors: list[str] = []
    progs: dict[str, ProgramOption] = {}
    for p in d.programs:
        if p.program_id in progs:
            errors.append(f"program {p.program_id}: duplicate id")
        progs[p.program_id] = p
    seen: set[str] = set()
    for row, s in enumerate(d.students, start=1):
        tag = f"student row {row} ({s.id})"
        if s.id in seen:
            errors.append(f"{tag}: duplicate id")
        seen.add(s.id)
        if s.continuing_program is not None and s.continuing_program not in progs:
            errors.append(f"{tag}: unknown continuing program {s.continuing_program}")
        ranking = d.observed_rankings.get(s.id)
        menu = d.menus.get(s.id)
        if menu is None or not menu:
            errors.append(f"{tag}: empty menu")
            menu = ()
        if not ranking:
            errors.append(f"{tag}: empty ranking")
            continue
        if len(ranking) > MAX_RANKED:
            errors.append(f"{tag}: {len(ranking)} ranked programs, more than {MAX_RANKED}")
        if len(set(ranking)) != len(ranking):
            errors.append(f"{tag}: program ranked twice")
        menu_set = set(menu)
        for pid in ranking:
            if pid not in progs:
                errors.append(f"{tag}: ranking references unknown program {pid}")
            elif pid not in menu_set:
                errors.append(f"{tag}: ranked program {pid} is not on the menu")
        for pid in menu:
            if pid not in progs:
                errors.append(f"{tag}: menu references unknown program {pid}")
    if d.assignments is not None:
        for sid, pid in d.assignments.items():
            if sid not in seen:
                errors.append(f"assignment for unknown student {sid}")
            elif pid is not None and pid not in progs:
                errors.append(f"student {sid}: assigned to unknown program {pid}")
    return errors


# --------------------------------------------------------------------------
# CSV round trip


def _split(cell: str) -> list[str]:
    return [x for x in cell.split(";") if x] if cell else []


def _opt(cell: str) -> str | None:
    return cell if cell != "" else None


def _num(x: float) -> str:
    return repr(float(x))


def _read_csv(path: Path, required: Sequence[str], errors: list[str]) -> list[dict[str, str]]:
    if not path.exists():
        errors.append(f"{path.name}: file not found")
        return []
    with path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        missing = [c for c in required if c not in (reader.fieldnames or [])]
        if missing:
            errors.append(f"{path.name}: missing columns {missing}")
            return []
        return list(reader)


def _parse_program(row: dict[str, str]) -> ProgramOption:
    return ProgramOption(
        program_id=row["program_id"],
        school_id=row["school_id"],
        tier=int(row["tier"]),
        capacity=int(row["capacity"]),
        mcas_share=float(row["mcas_share"]),
        pct_white_asian=float(row["pct_white_asian"]),
        school_location=(float(row["lat"]), float(row["lon"])),
        is_ell_program=row["is_ell_program"] == "1",
        ell_language=_opt(row["ell_language"]),
        grade=_opt(row.get("grade", "")),
    )


def _parse_student(row: dict[str, str]) -> Student:
    return Student(
        id=row["id"],
        grade=row["grade"],
        neighborhood=row["neighborhood"],
        geocode=row["geocode"],
        home_location=(float(row["lat"]), float(row["lon"])),
        race=row["race"],
        income_estimate=float(row["income"]),
        is_ell=row["is_ell"] == "1",
        ell_language=_opt(row["ell_language"]),
        continuing_program=_opt(row["continuing_program"]),
        sibling_schools=frozenset(_split(row["sibling_schools"])),
        lottery_number=float(row["lottery_number"]),
    )


def load_dataset(
    path: str | Path,
    schema_version: int = SCHEMA_VERSION,
    policy: MenuPolicy | None = None,
) -> Dataset:
    """Read ``students.csv``, ``programs.csv``, ``distances.csv`` and ``meta.json``.

    Rankings longer than ten are cut to the first ten with a warning.
    Menus come from the ``menu`` column when present, otherwise they are
    built with ``policy`` (home-based by default).
    """
    root = Path(path)
    errors: list[str] = []
    meta_path = root / "meta.json"
    meta: dict[str, Any] = {}
    if meta_path.exists():
        meta = json.loads(meta_path.read_text())
    else:
        errors.append("meta.json: file not found")
    if meta and meta.get("schema_version") != schema_version:
        errors.append(f"meta.json: schema_version {meta.get('schema_version')} != {schema_version}")

    required = [c for c in STUDENT_COLUMNS if c != "menu"]
    prog_rows = _read_csv(root / "programs.csv", [c for c in PROGRAM_COLUMNS if c != "grade"], errors)
    stu_rows = _read_csv(root / "students.csv", required, errors)
    dist_rows: list[dict[str, str]] = []
    if (root / "distances.csv").exists():
        dist_rows = _read_csv(root / "distances.csv", DISTANCE_COLUMNS, errors)
    if errors:
        raise DataValidationError("\n".join(errors))

    programs: list[ProgramOption] = []
    for r, row in enumerate(prog_rows, start=1):
        try:
            programs.append(_parse_program(row))
        except (ValueError, KeyError) as exc:
            errors.append(f"programs.csv row {r}: {exc}")
    matrix: dict[tuple[str, str], float] = {}
    for r, row in enumerate(dist_rows, start=1):
        try:
            miles = float(row["miles"])
            if not miles >= 0:
                raise ValueError("negative distance")
            matrix[(row["geocode"], row["school_id"])] = miles
        except ValueError as exc:
            errors.append(f"distances.csv row {r}: {exc}")

    students: list[Student] = []
    rankings: dict[str, tuple[str, ...]] = {}
    menus: dict[str, tuple[str, ...]] = {}
    assignments: dict[str, str | None] | None = None
    has_menu = bool(stu_rows) and "menu" in stu_rows[0]
    if stu_rows and "assigned_program" in stu_rows[0]:
        assignments = {}
    known = {p.program_id for p in programs}
    for r, row in enumerate(stu_rows, start=1):
        try:
            s = _parse_student(row)
        except (ValueError, KeyError) as exc:
            errors.append(f"students.csv row {r}: {exc}")
            continue
        ranking = _split(row["ranking"])
        if not ranking:
            errors.append(f"students.csv row {r} ({s.id}): empty ranking")
        bad = [p for p in ranking if p not in known]
        if bad:
            errors.append(f"students.csv row {r} ({s.id}): ranking references unknown program {bad[0]}")
        if len(ranking) > MAX_RANKED:
            warnings.warn(
                f"students.csv row {r} ({s.id}): {len(ranking)} ranked programs truncated to {MAX_RANKED}",
                stacklevel=2,
            )
            ranking = ranking[:MAX_RANKED]
        if s.continuing_program is not None and s.continuing_program not in known:
            errors.append(f"students.csv row {r} ({s.id}): unknown continuing program {s.continuing_program}")
        students.append(s)
        rankings[s.id] = tuple(ranking)
        if has_menu:
            menus[s.id] = tuple(_split(row["menu"]))
        if assignments is not None:
            assignments[s.id] = _opt(row["assigned_program"])
    if errors:
        raise DataValidationError("\n".join(errors))

    distance = DistanceModel(matrix)
    if not has_menu:
        policy = policy or make_policy(None)
        miles = distance.matrix_for(students, programs)
        for i, s in enumerate(students):
            menus[s.id] = build_menu(s, programs, policy, distance, miles[i]).options
    return Dataset(
        tuple(students),
        tuple(programs),
        rankings,
        int(meta["year"]),
        menus,
        distance,
        assignments,
    )


def save_dataset(dataset: Dataset, path: str | Path) -> None:
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    (root / "meta.json").write_text(
        json.dumps({"year": dataset.year, "schema_version": SCHEMA_VERSION}, indent=2) + "\n"
    )
    with (root / "programs.csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(PROGRAM_COLUMNS)
        for p in dataset.programs:
            w.writerow(
                [
                    p.program_id,
                    p.school_id,
                    p.grade or "",
                    p.tier,
                    p.capacity,
                    _num(p.mcas_share),
                    _num(p.pct_white_asian),
                    _num(p.school_location[0]),
                    _num(p.school_location[1]),
                    int(p.is_ell_program),
                    p.ell_language or "",
                ]
            )
    cols = STUDENT_COLUMNS + (("assigned_program",) if dataset.assignments is not None else ())
    with (root / "students.csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for s in dataset.students:
            row = [
                s.id,
                s.grade,
                s.neighborhood,
                s.geocode,
                _num(s.home_location[0]),
                _num(s.home_location[1]),
                s.race,
                _num(s.income_estimate),
                int(s.is_ell),
                s.ell_language or "",
                s.continuing_program or "",
                ";".join(sorted(s.sibling_schools)),
                _num(s.lottery_number),
                ";".join(dataset.observed_rankings[s.id]),
                ";".join(dataset.menus[s.id]),
            ]
            if dataset.assignments is not None:
                row.append(dataset.assignments.get(s.id) or "")
            w.writerow(row)
    with (root / "distances.csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(DISTANCE_COLUMNS)
        for (geo, school), miles in sorted(dataset.distance.matrix.items()):
            w.writerow([geo, school, _num(miles)])


def load_history(path: str | Path, policy: MenuPolicy | None = None) -> dict[int, Dataset]:
    """Every dataset directory below ``path``, keyed by year."""
    out: dict[int, Dataset] = {}
    for sub in sorted(Path(path).iterdir()):
        if (sub / "meta.json").exists():
            d = load_dataset(sub, policy=policy)
            if d.year in out:
                raise DataValidationError(f"year {d.year} appears twice under {path}")
            out[d.year] = d
    if not out:
        raise DataValidationError(f"no dataset directories under {path}")
    return dict(sorted(out.items()))


def save_history(history: Mapping[int, Dataset], path: str | Path) -> None:
    for year, d in history.items():
        save_dataset(d, Path(path) / str(year))


def infer_capacities(
    assignments: Mapping[str, str | None], programs: Sequence[ProgramOption] = ()
) -> dict[str, int]:
    """Seats per program = students assigned there; unassigned students are ignored."""
    counts = Counter(pid for pid in assignments.values() if pid is not None)
    table = {p.program_id: 0 for p in programs}
    if programs:
        unknown = set(counts) - set(table)
        if unknown:
            raise DataValidationError(f"assignments reference unknown programs {sorted(unknown)}")
    table.update(counts)
    return table


def with_capacities(programs: Sequence[ProgramOption], capacity: Mapping[str, int]) -> tuple[ProgramOption, ...]:
    return tuple(replace(p, capacity=int(capacity.get(p.program_id, 0))) for p in programs)


# --------------------------------------------------------------------------
# synthetic markets

CENTER = (42.31, -71.08)
MILES_PER_DEG_LAT = 69.05
_LAYERS = {"geography": 0, "population": 1, "coefficient": 2, "preference": 3, "lottery": 4}
LANGUAGES = ("spanish", "chinese", "haitian", "vietnamese")


def substream(seed: int, *path: int | str) -> np.random.Generator:
    """Independent generator for a named layer under ``seed``."""
    keys = [int(seed)] + [_LAYERS[p] if isinstance(p, str) else int(p) for p in path]
    return np.random.default_rng(keys)


def miles_to_degrees(dy: np.ndarray, dx: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    lat = CENTER[0] + dy / MILES_PER_DEG_LAT
    lon = CENTER[1] + dx / (MILES_PER_DEG_LAT * math.cos(math.radians(CENTER[0])))
    return lat, lon


@dataclass(frozen=True)
class SyntheticConfig:
    """Knobs for a synthetic market.

    ``params`` is any object with ``feature_names`` and a
    ``draw_utilities(design, rng)`` method (see ``logit.LogitParams`` and
    ``mixedlogit.MixedLogitParams``). ``program_jitter`` spreads program
    characteristics within a school, which keeps school-level traits
    separately identified from school fixed effects.
    """

    params: Any
    n_students: int = 500
    n_schools: int = 10
    programs_per_school: int = 2
    grades: tuple[str, ...] = ("K1",)
    seed: int = 0
    geography_seed: int = 0
    year: int = 2013
    grid_miles: float = 1.5
    school_locations: tuple[tuple[float, float], ...] | None = None
    program_jitter: float = 0.0
    ell_programs: bool = True
    p_ell: float = 0.25
    p_sibling: float = 0.15
    p_continuing: float = 0.2
    capacity_ratio: float = 0.9
    rank_length: int | None = None
    menu: Mapping[str, Any] | None = None
    assign: bool = True

    def __post_init__(self) -> None:
        if self.n_students <= 0:
            raise DomainError("n_students must be positive")
        if self.n_schools < 2 or self.programs_per_school < 1:
            raise DomainError("need at least two schools and one program per school")
        if not self.grades or any(g not in GRADES for g in self.grades):
            raise DomainError(f"grades must be drawn from {GRADES}")
        if self.school_locations is not None and len(self.school_locations) != self.n_schools:
            raise DomainError("school_locations must list one location per school")
        if self.params is None or not hasattr(self.params, "draw_utilities"):
            raise DomainError("params must provide draw_utilities")


@dataclass(frozen=True)
class Geography:
    neighborhood_centers: np.ndarray  # (14, 2) miles
    programs: tuple[ProgramOption, ...]


def make_geography(config: SyntheticConfig) -> Geography:
    """Neighborhoods on a jittered grid, schools scattered among them."""
    rng = substream(config.geography_seed, "geography")
    g = config.grid_miles
    cells = [(r, c) for r in range(4) for c in range(4)][: len(NEIGHBORHOODS)]
    centers = np.array([((r - 1.5) * g, (c - 1.5) * g) for r, c in cells])
    centers = centers + rng.uniform(-0.3 * g, 0.3 * g, size=centers.shape)

    home = rng.integers(0, len(NEIGHBORHOODS), size=config.n_schools)
    offsets = rng.normal(0.0, 0.35 * g, size=(config.n_schools, 2))
    pos = centers[home] + offsets
    lat, lon = miles_to_degrees(pos[:, 0], pos[:, 1])
    locations = np.column_stack([lat, lon])
    if config.school_locations is not None:
        locations = np.asarray(config.school_locations, dtype=float)
    spread = haversine_matrix(locations, locations).max()
    if not spread > 1e-6:
        raise DomainError("degenerate geography: all schools are co-located")

    mcas = rng.uniform(0.15, 0.85, size=config.n_schools)
    wa = np.clip(0.1 + 0.6 * mcas + rng.normal(0, 0.1, config.n_schools), 0.02, 0.95)
    rank = np.argsort(np.argsort(-mcas, kind="stable"), kind="stable")
    tier = 1 + (4 * rank) // config.n_schools
    width = len(str(config.n_schools - 1))

    programs: list[ProgramOption] = []
    for grade in config.grades:
        for s in range(config.n_schools):
            for k in range(config.programs_per_school):
                j = config.program_jitter
                pm = float(np.clip(mcas[s] + rng.uniform(-j, j), 0.0, 1.0))
                pw = float(np.clip(wa[s] + rng.uniform(-j, j), 0.0, 1.0))
                ell = config.ell_programs and k == 1
                programs.append(
                    ProgramOption(
                        program_id=f"S{s:0{width}d}-{grade}-{k}",
                        school_id=f"S{s:0{width}d}",
                        tier=int(tier[s]),
                        capacity=0,
                        mcas_share=pm,
                        pct_white_asian=pw,
                        school_location=(float(locations[s, 0]), float(locations[s, 1])),
                        is_ell_program=ell,
                        ell_language=LANGUAGES[int(rng.integers(len(LANGUAGES)))] if ell else None,
                        grade=grade,
                    )
                )
    return Geography(centers, tuple(programs))


def _draw_students(
    config: SyntheticConfig,
    geo: Geography,
    rng: np.random.Generator,
    grade: str,
    n: int,
    id_prefix: str,
) -> list[Student]:
    g = config.grid_miles
    n_nb = len(NEIGHBORHOODS)
    # Neighborhood composition is a property of the geography, not the draw.
    grng = substream(config.geography_seed, "geography", 1)
    race_mix = grng.dirichlet(np.full(len(RACES), 2.0), size=n_nb)
    income_scale = grng.uniform(0.2, 0.6, size=n_nb)

    nb = rng.integers(0, n_nb, size=n)
    pos = geo.neighborhood_centers[nb] + rng.normal(0.0, 0.3 * g, size=(n, 2))
    lat, lon = miles_to_degrees(pos[:, 0], pos[:, 1])
    u_race = rng.random(n)
    income = rng.gamma(2.0, income_scale[nb])
    ell = rng.random(n) < config.p_ell
    lang = rng.integers(0, len(LANGUAGES), size=n)
    sib = rng.random(n) < config.p_sibling
    sib_pick = rng.integers(0, 10**9, size=n)
    cont = rng.random(n) < config.p_continuing
    cont_pick = rng.integers(0, 10**9, size=n)

    grade_progs = [p for p in geo.programs if p.grade in (grade, None) and not p.is_ell_program]
    schools = sorted({p.school_id for p in geo.programs})
    out = []
    for i in range(n):
        race = RACES[int(np.searchsorted(np.cumsum(race_mix[nb[i]]), u_race[i] * race_mix[nb[i]].sum()))]
        cont_prog = None
        if cont[i] and grade != "K0" and grade_progs:
            cont_prog = grade_progs[int(cont_pick[i] % len(grade_progs))].program_id
        sibs = frozenset([schools[int(sib_pick[i] % len(schools))]]) if sib[i] else frozenset()
        out.append(
            Student(
                id=f"{id_prefix}{i:05d}",
                grade=grade,
                neighborhood=NEIGHBORHOODS[int(nb[i])],
                geocode=f"{id_prefix}{i:05d}",
                home_location=(float(lat[i]), float(lon[i])),
                race=race,
                income_estimate=float(income[i]),
                is_ell=bool(ell[i]),
                ell_language=LANGUAGES[int(lang[i])] if ell[i] else None,
                continuing_program=cont_prog,
                sibling_schools=sibs,
            )
        )
    return out


def draw_rankings(
    students: Sequence[Student],
    programs: Sequence[ProgramOption],
    menus: Mapping[str, Sequence[str]],
    miles: np.ndarray,
    params: Any,
    rng: np.random.Generator,
    max_ranked: int | None = MAX_RANKED,
    school_ids: Sequence[str] | None = None,
) -> dict[str, tuple[str, ...]]:
    """Rankings of each student's menu under a random-utility model."""
    if not students:
        return {}
    design = menu_design(students, programs, menus, miles, params.feature_names, school_ids)
    utilities = params.draw_utilities(design, rng)
    ranked = rank_from_utilities(design, utilities, max_ranked)
    ids = [p.program_id for p in programs]
    return {s.id: tuple(ids[j] for j in r) for s, r in zip(students, ranked)}


def _lotteries(students: Sequence[Student], rng: np.random.Generator) -> list[Student]:
    draws = rng.random(len(students))
    return [replace(s, lottery_number=float(u)) for s, u in zip(students, draws)]


def _assign_capacities(
    programs: Sequence[ProgramOption], counts: Mapping[str, int], ratio: float, rng: np.random.Generator
) -> tuple[ProgramOption, ...]:
    out = []
    by_grade: dict[str | None, list[int]] = {}
    for j, p in enumerate(programs):
        by_grade.setdefault(p.grade, []).append(j)
    caps = np.zeros(len(programs), dtype=int)
    for grade, idx in by_grade.items():
        seats = int(round(ratio * counts.get(grade, 0)))
        caps[idx] = rng.multinomial(seats, np.full(len(idx), 1.0 / len(idx)))
    for j, p in enumerate(programs):
        out.append(replace(p, capacity=int(caps[j])))
    return tuple(out)


def _finish_market(
    config: SyntheticConfig,
    programs: tuple[ProgramOption, ...],
    students: list[Student],
    year: int,
    seed_path: tuple[int, ...] = (),
) -> Dataset:
    policy = make_policy(config.menu)
    distance = DistanceModel()
    miles = distance.matrix_for(students, programs) if students else np.zeros((0, len(programs)))
    menus = {s.id: build_menu(s, programs, policy, distance, miles[i]).options for i, s in enumerate(students)}
    rng_pref = substream(config.seed, *seed_path, "preference")
    max_ranked = MAX_RANKED if config.rank_length is None else min(MAX_RANKED, config.rank_length)
    rankings = draw_rankings(
        students, programs, menus, miles, config.params, rng_pref, max_ranked, school_index(programs)
    )
    students = _lotteries(students, substream(config.seed, *seed_path, "lottery"))
    assignments = None
    if config.assign:
        from .mechanism import Market, deferred_acceptance

        market = Market(tuple(students), programs, rankings)
        assignments = dict(deferred_acceptance(market).assignment)
    return Dataset(tuple(students), programs, rankings, year, menus, distance, assignments)


def generate_synthetic(config: SyntheticConfig) -> Dataset:
    """One synthetic application year, reproducible from the config seeds."""
    geo = make_geography(config)
    rng = substream(config.seed, "population")
    students: list[Student] = []
    for grade in config.grades:
        students += _draw_students(config, geo, rng, grade, config.n_students, f"{config.year}-{grade}-")
    counts = Counter(s.grade for s in students)
    programs = _assign_capacities(geo.programs, counts, config.capacity_ratio, substream(config.seed, "population", 1))
    return _finish_market(config, programs, students, config.year)


def generate_history(
    config: SyntheticConfig,
    years: Sequence[int],
    growth: float = 0.03,
    noise: float = 0.05,
) -> dict[int, Dataset]:
    """Consecutive synthetic years with a trending applicant count.

    Grades must include K0 and K1 so that continuing students exist: each
    year's K1 and K2 applicants include last year's K0 and K1 assignees,
    who apply with the next-grade program of their school as continuing
    program.
    """
    if list(years) != list(range(years[0], years[0] + len(years))):
        raise DomainError("years must be consecutive")
    geo = make_geography(config)
    by_school_grade: dict[tuple[str, str | None], list[str]] = {}
    for p in geo.programs:
        if not p.is_ell_program:
            by_school_grade.setdefault((p.school_id, p.grade), []).append(p.program_id)
    # Capacities are a school property: fixed across years, sized for the first year.
    first_counts = {g: config.n_students for g in config.grades}
    programs = _assign_capacities(geo.programs, first_counts, config.capacity_ratio, substream(config.seed, "population", 1))
    table = {p.program_id: p for p in programs}

    history: dict[int, Dataset] = {}
    prev: Dataset | None = None
    for t, year in enumerate(years):
        rng = substream(config.seed, year, "population")
        students: list[Student] = []
        for grade in config.grades:
            n = int(round(config.n_students * (1 + growth) ** t * math.exp(noise * rng.standard_normal())))
            prefix = f"{year}-{grade}-"
            students += [replace(s, continuing_program=None) for s in _draw_students(config, geo, rng, grade, n, prefix)]
        if prev is not None and prev.assignments is not None:
            continuers = []
            for s in prev.students:
                pid = prev.assignments.get(s.id)
                nxt = NEXT_GRADE.get(s.grade)
                if pid is None or nxt is None or nxt not in config.grades or rng.random() > 0.8:
                    continue
                options = by_school_grade.get((table[pid].school_id, nxt))
                if not options:
                    continue
                continuers.append(
                    replace(s, id=f"{year}-c-{s.id}", grade=nxt, continuing_program=options[0])
                )
            students += continuers
        ds = _finish_market(config, programs, students, year, (year,))
        history[year] = ds
        prev = ds
    return history
