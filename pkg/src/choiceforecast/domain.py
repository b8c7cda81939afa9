"""Core entities, distances, priorities and choice-menu construction."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

GRADES = ("K0", "K1", "K2")
NEXT_GRADE = {"K0": "K1", "K1": "K2"}
RACES = ("black", "hispanic", "white", "asian", "other", "unknown")
N_TIERS = 4
WALK_ZONE_MILES = 1.0
EARTH_RADIUS_MILES = 3958.7613

NEIGHBORHOODS = (
    "Allston-Brighton",
    "Charlestown",
    "Downtown",
    "East Boston",
    "Hyde Park",
    "Jamaica Plain",
    "Mattapan",
    "North Dorchester",
    "Roslindale",
    "Roxbury",
    "South Boston",
    "South Dorchester",
    "South End",
    "West Roxbury",
)


class DomainError(ValueError):
    """Invalid entity or configuration."""


class EmptyMenuError(DomainError):
    pass


class MissingDistanceError(DomainError):
    pass


@dataclass(frozen=True)
class Student:
    id: str
    grade: str
    neighborhood: str
    geocode: str
    home_location: tuple[float, float]
    race: str
    income_estimate: float
    is_ell: bool = False
    ell_language: str | None = None
    continuing_program: str | None = None
    sibling_schools: frozenset[str] = field(default_factory=frozenset)
    lottery_number: float = 0.5

    def __post_init__(self) -> None:
        if self.grade not in GRADES:
            raise DomainError(f"student {self.id}: unknown grade {self.grade!r}")
        if self.race not in RACES:
            raise DomainError(f"student {self.id}: unknown race {self.race!r}")
        if not 0.0 <= self.lottery_number <= 1.0:
            raise DomainError(f"student {self.id}: lottery number outside [0, 1]")
        if not self.income_estimate >= 0.0:
            raise DomainError(f"student {self.id}: negative income estimate")
        if not isinstance(self.sibling_schools, frozenset):
            object.__setattr__(self, "sibling_schools", frozenset(self.sibling_schools))

    @property
    def black_hispanic(self) -> bool:
        return self.race in ("black", "hispanic")


@dataclass(frozen=True)
class ProgramOption:
    """A school program.

    ``grade`` is the entry grade the program admits; ``None`` means the
    program is open to applicants of any grade.
    """

    program_id: str
    school_id: str
    tier: int
    capacity: int
    mcas_share: float
    pct_white_asian: float
    school_location: tuple[float, float]
    is_ell_program: bool = False
    ell_language: str | None = None
    grade: str | None = None

    def __post_init__(self) -> None:
        if self.capacity < 0:
            raise DomainError(f"program {self.program_id}: negative capacity")
        if not 1 <= self.tier <= N_TIERS:
            raise DomainError(f"program {self.program_id}: tier must be in 1..{N_TIERS}")
        for name in ("mcas_share", "pct_white_asian"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise DomainError(f"program {self.program_id}: {name} outside [0, 1]")
        if self.grade is not None and self.grade not in GRADES:
            raise DomainError(f"program {self.program_id}: unknown grade {self.grade!r}")

    def admits(self, student: Student) -> bool:
        if self.grade is not None and self.grade != student.grade:
            return False
        return student.is_ell or not self.is_ell_program


@dataclass(frozen=True)
class ChoiceMenu:
    student_id: str
    options: tuple[str, ...]

    def __contains__(self, program_id: object) -> bool:
        return program_id in self.options

    def __len__(self) -> int:
        return len(self.options)

    def __iter__(self):
        return iter(self.options)


@dataclass(frozen=True, order=True)
class Priority:
    """Program-side rank of an applicant; smaller compares better."""

    level: int
    lottery: float


def check_program_table(programs: Iterable[ProgramOption]) -> dict[str, ProgramOption]:
    table: dict[str, ProgramOption] = {}
    for p in programs:
        if p.program_id in table and table[p.program_id] != p:
            raise DomainError(f"program {p.program_id} defined twice")
        table[p.program_id] = p
    return table


# --------------------------------------------------------------------------
# distances


def haversine_miles(a: tuple[float, float], b: tuple[float, float]) -> float:
    lat1, lon1 = map(math.radians, a)
    lat2, lon2 = map(math.radians, b)
    h = math.sin((lat2 - lat1) / 2) ** 2 + math.cos(lat1) * math.cos(lat2) * math.sin((lon2 - lon1) / 2) ** 2
    return 2 * EARTH_RADIUS_MILES * math.asin(min(1.0, math.sqrt(h)))


def haversine_matrix(homes: np.ndarray, sites: np.ndarray) -> np.ndarray:
    """Pairwise great-circle miles between ``homes`` (n, 2) and ``sites`` (m, 2), degrees."""
    h = np.radians(np.asarray(homes, dtype=float))[:, None, :]
    s = np.radians(np.asarray(sites, dtype=float))[None, :, :]
    dlat = s[..., 0] - h[..., 0]
    dlon = s[..., 1] - h[..., 1]
    a = np.sin(dlat / 2) ** 2 + np.cos(h[..., 0]) * np.cos(s[..., 0]) * np.sin(dlon / 2) ** 2
    return 2 * EARTH_RADIUS_MILES * np.arcsin(np.minimum(1.0, np.sqrt(a)))


@dataclass(frozen=True)
class DistanceModel:
    """Home-to-school miles.

    Entries of ``matrix`` are keyed by ``(geocode, school_id)`` and take
    precedence; otherwise the great-circle distance is used when
    ``fallback`` is enabled.
    """

    matrix: Mapping[tuple[str, str], float] = field(default_factory=dict)
    fallback: bool = True

    def __call__(self, student: Student, program: ProgramOption) -> float:
        key = (student.geocode, program.school_id)
        if key in self.matrix:
            return float(self.matrix[key])
        if not self.fallback:
            raise MissingDistanceError(f"no distance for geocode {key[0]} to school {key[1]}")
        return haversine_miles(student.home_location, program.school_location)

    def matrix_for(self, students: Sequence[Student], programs: Sequence[ProgramOption]) -> np.ndarray:
        """(len(students), len(programs)) array of miles."""
        out = np.full((len(students), len(programs)), np.nan)
        if self.fallback and students and programs:
            out = haversine_matrix(
                [s.home_location for s in students], [p.school_location for p in programs]
            )
        if self.matrix:
            geo_rows: dict[str, list[int]] = {}
            for i, s in enumerate(students):
                geo_rows.setdefault(s.geocode, []).append(i)
            for j, p in enumerate(programs):
                for geocode, rows in geo_rows.items():
                    miles = self.matrix.get((geocode, p.school_id))
                    if miles is not None:
                        out[rows, j] = miles
        if np.isnan(out).any():
            i, j = np.argwhere(np.isnan(out))[0]
            raise MissingDistanceError(
                f"no distance for geocode {students[i].geocode} to school {programs[j].school_id}"
            )
        return out


# --------------------------------------------------------------------------
# priorities


def priority_of(student: Student, program: ProgramOption) -> Priority:
    """Continuing beats sibling beats everyone else; the lottery breaks ties.

    Walk-zone priority is deliberately absent here; see
    ``mechanism.split_walk_zone_market`` for the legacy variant.
    """
    if student.continuing_program == program.program_id:
        level = 0
    elif program.school_id in student.sibling_schools:
        level = 1
    else:
        level = 2
    return Priority(level, student.lottery_number)


# --------------------------------------------------------------------------
# menus


@dataclass(frozen=True)
class SchoolView:
    """School-level facts a menu rule may consult for one student."""

    school_id: str
    tier: int
    miles: float


MenuRule = Callable[[Student, Sequence[SchoolView]], Iterable[str]]


def _closest(schools: Iterable[SchoolView], k: int) -> list[str]:
    ranked = sorted(schools, key=lambda s: (s.miles, s.school_id))
    return [s.school_id for s in ranked[:k]]


@dataclass(frozen=True)
class WithinRadius:
    miles: float = WALK_ZONE_MILES

    def __call__(self, student: Student, schools: Sequence[SchoolView]) -> set[str]:
        return {s.school_id for s in schools if s.miles <= self.miles}


@dataclass(frozen=True)
class ClosestOfTier:
    """The ``k`` closest schools whose tier is at most ``max_tier``."""

    max_tier: int
    k: int

    def __call__(self, student: Student, schools: Sequence[SchoolView]) -> set[str]:
        return set(_closest((s for s in schools if s.tier <= self.max_tier), self.k))


@dataclass(frozen=True)
class ClosestOf:
    """The ``k`` closest schools among a configured list (ties by school id)."""

    school_ids: frozenset[str]
    k: int

    def __call__(self, student: Student, schools: Sequence[SchoolView]) -> set[str]:
        return set(_closest((s for s in schools if s.school_id in self.school_ids), self.k))


@dataclass(frozen=True)
class NeighborhoodList:
    """Fixed school lists per neighborhood (custom menus, zone overlays)."""

    schools_by_neighborhood: Mapping[str, frozenset[str]]

    def __call__(self, student: Student, schools: Sequence[SchoolView]) -> set[str]:
        return set(self.schools_by_neighborhood.get(student.neighborhood, ()))


@dataclass(frozen=True)
class MenuPolicy:
    """Union of rules, each yielding school ids."""

    name: str
    rules: tuple[MenuRule, ...]

    def school_ids(self, student: Student, schools: Sequence[SchoolView]) -> set[str]:
        chosen: set[str] = set()
        for rule in self.rules:
            chosen.update(rule(student, schools))
        return chosen


def home_based_policy(
    option_schools: Iterable[str] = (),
    n_option_schools: int = 3,
    walk_miles: float = WALK_ZONE_MILES,
    extra_rules: Sequence[MenuRule] = (),
) -> MenuPolicy:
    rules: list[MenuRule] = [
        WithinRadius(walk_miles),
        ClosestOfTier(1, 2),
        ClosestOfTier(2, 4),
        ClosestOfTier(3, 6),
    ]
    option_schools = frozenset(option_schools)
    if option_schools:
        rules.append(ClosestOf(option_schools, n_option_schools))
    return MenuPolicy("home_based", tuple(rules) + tuple(extra_rules))


def three_zone_policy(
    zone_of_neighborhood: Mapping[str, str],
    zone_of_school: Mapping[str, str],
    citywide_schools: Iterable[str] = (),
    walk_miles: float = WALK_ZONE_MILES,
) -> MenuPolicy:
    zone_schools: dict[str, set[str]] = {}
    for school, zone in zone_of_school.items():
        zone_schools.setdefault(zone, set()).add(school)
    citywide = frozenset(citywide_schools)
    by_nbhd = {
        nbhd: frozenset(zone_schools.get(zone, set()) | citywide)
        for nbhd, zone in zone_of_neighborhood.items()
    }
    return MenuPolicy("three_zone", (WithinRadius(walk_miles), NeighborhoodList(by_nbhd)))


def custom_policy(rules: Sequence[MenuRule]) -> MenuPolicy:
    return MenuPolicy("custom", tuple(rules))


def make_policy(config: Mapping[str, object] | None) -> MenuPolicy:
    """Build a policy from the ``[menu]`` config table."""
    config = dict(config or {})
    name = config.pop("policy", "home_based")
    walk = float(config.get("walk_miles", WALK_ZONE_MILES))
    if name == "home_based":
        return home_based_policy(
            option_schools=config.get("option_schools", ()),
            n_option_schools=int(config.get("n_option_schools", 3)),
            walk_miles=walk,
        )
    if name == "three_zone":
        return three_zone_policy(
            config["zone_of_neighborhood"],
            config["zone_of_school"],
            config.get("citywide_schools", ()),
            walk_miles=walk,
        )
    if name == "custom":
        lists = {k: frozenset(v) for k, v in dict(config.get("neighborhood_schools", {})).items()}
        rules: list[MenuRule] = [NeighborhoodList(lists)]
        if config.get("include_walk_zone", True):
            rules.append(WithinRadius(walk))
        return custom_policy(rules)
    raise DomainError(f"unknown menu policy {name!r}")


def school_views(
    student: Student,
    programs: Sequence[ProgramOption],
    distance: DistanceModel,
    miles: Sequence[float] | None = None,
) -> list[SchoolView]:
    """One view per school offering at least one program the student may take.

    A school's tier is the best tier among its programs.
    """
    views: dict[str, SchoolView] = {}
    for j, p in enumerate(programs):
        if not p.admits(student):
            continue
        d = distance(student, p) if miles is None else float(miles[j])
        old = views.get(p.school_id)
        if old is None or p.tier < old.tier:
            views[p.school_id] = SchoolView(p.school_id, p.tier, d)
    return list(views.values())


def build_menu(
    student: Student,
    programs: Sequence[ProgramOption],
    policy: MenuPolicy,
    distance: DistanceModel,
    miles: Sequence[float] | None = None,
) -> ChoiceMenu:
    """Programs the student may rank, ordered by distance then program id.

    ``miles`` optionally supplies precomputed distances aligned with
    ``programs``.
    """
    views = school_views(student, programs, distance, miles)
    schools = policy.school_ids(student, views)
    schools.update(student.sibling_schools)
    cont = None
    if student.continuing_program is not None:
        for p in programs:
            if p.program_id == student.continuing_program:
                cont = p
                schools.add(p.school_id)
                break
    keep: list[tuple[float, str]] = []
    for j, p in enumerate(programs):
        if (p.school_id in schools and p.admits(student)) or p is cont:
            d = distance(student, p) if miles is None else float(miles[j])
            keep.append((d, p.program_id))
    if not keep:
        raise EmptyMenuError(f"student {student.id} has no reachable programs")
    keep.sort()
    return ChoiceMenu(student.id, tuple(pid for _, pid in keep))
