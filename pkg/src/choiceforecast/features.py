"""Student-by-program features and padded design arrays.

Every model consumes a :class:`Design`: per student, a row of alternatives
(ranked programs first, in rank order, optionally followed by the unranked
rest of the menu) with a feature tensor and school indices for the fixed
effects.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from typing import Mapping, Sequence

import numpy as np

from .domain import WALK_ZONE_MILES, DomainError, ProgramOption, Student

MAX_RANKED = 10

_DEMOGRAPHICS = ("black", "asian", "hispanic", "other", "unknown", "income")
_SCHOOL_TRAITS = ("mcas", "pct_white_asian", "distance")

BASE_FEATURES = (
    "distance",
    "continuing",
    "sibling",
    "ell_match",
    "ell_language_match",
    "walk_zone",
    "mcas",
    "pct_white_asian",
    "distance_x_black_hispanic",
    "distance_x_income",
    "mcas_x_black",
    "mcas_x_income",
    "pct_white_asian_x_black_hispanic",
    "pct_white_asian_x_income",
)
CATALOG = BASE_FEATURES + tuple(
    f"{t}_x_{d}" for t in _SCHOOL_TRAITS for d in _DEMOGRAPHICS if f"{t}_x_{d}" not in BASE_FEATURES
)

SIMPLE = ("distance", "continuing", "sibling", "ell_match", "ell_language_match", "walk_zone")
REDUCED = SIMPLE + (
    "distance_x_black_hispanic",
    "distance_x_income",
    "mcas_x_black",
    "mcas_x_income",
    "pct_white_asian_x_black_hispanic",
    "pct_white_asian_x_income",
)
FULL = SIMPLE + tuple(f"{t}_x_{d}" for t in _SCHOOL_TRAITS for d in _DEMOGRAPHICS)

SPECS: dict[str, tuple[str, ...]] = {"simple": SIMPLE, "reduced": REDUCED, "full": FULL}

# Mixed logit: fixed-coefficient features F and random-coefficient features G.
MIXED_FIXED = (
    "continuing",
    "sibling",
    "ell_language_match",
    "distance_x_black_hispanic",
    "distance_x_income",
    "mcas_x_black",
    "mcas_x_income",
    "pct_white_asian_x_black_hispanic",
    "pct_white_asian_x_income",
)
MIXED_RANDOM = ("ell_match", "walk_zone", "distance", "mcas", "pct_white_asian")


def spec_features(spec: str | Sequence[str]) -> tuple[str, ...]:
    if isinstance(spec, str):
        try:
            return SPECS[spec]
        except KeyError:
            raise DomainError(f"unknown feature specification {spec!r}") from None
    names = tuple(spec)
    unknown = [n for n in names if n not in CATALOG]
    if unknown:
        raise DomainError(f"unknown features {unknown}")
    return names


def pair_features(student: Student, program: ProgramOption, miles: float) -> dict[str, float]:
    """Every catalog feature for one student-program pair."""
    ell_match = float(student.is_ell and program.is_ell_program)
    lang = float(
        ell_match
        and student.ell_language is not None
        and program.ell_language == student.ell_language
    )
    demo = {
        "black": float(student.race == "black"),
        "asian": float(student.race == "asian"),
        "hispanic": float(student.race == "hispanic"),
        "other": float(student.race == "other"),
        "unknown": float(student.race == "unknown"),
        "income": float(student.income_estimate),
        "black_hispanic": float(student.black_hispanic),
    }
    trait = {"mcas": program.mcas_share, "pct_white_asian": program.pct_white_asian, "distance": miles}
    out = {
        "distance": miles,
        "continuing": float(student.continuing_program == program.program_id),
        "sibling": float(program.school_id in student.sibling_schools),
        "ell_match": ell_match,
        "ell_language_match": lang,
        "walk_zone": float(miles <= WALK_ZONE_MILES),
        "mcas": program.mcas_share,
        "pct_white_asian": program.pct_white_asian,
    }
    for name in CATALOG:
        if "_x_" in name:
            t, d = name.split("_x_")
            out[name] = trait[t] * demo[d]
    return out


@dataclass(frozen=True)
class FeatureVectors:
    fixed: np.ndarray
    random: np.ndarray
    school_index: int


def feature_vectors(
    student: Student, program: ProgramOption, miles: float, school_index: int
) -> FeatureVectors:
    """Mixed-logit F and G vectors for one pair, in MIXED_FIXED / MIXED_RANDOM order."""
    f = pair_features(student, program, miles)
    return FeatureVectors(
        np.array([f[n] for n in MIXED_FIXED]),
        np.array([f[n] for n in MIXED_RANDOM]),
        school_index,
    )


@dataclass(frozen=True)
class Design:
    """Padded alternatives for a set of students.

    ``X`` is (n, L, K) over ``feature_names``; ``program`` holds indices
    into the program list (-1 for padding); ``school`` indexes
    ``school_ids`` (0 for padding); ``stage`` marks ranked positions, each
    of which contributes one logit stage to the likelihood.
    """

    X: np.ndarray
    program: np.ndarray
    school: np.ndarray
    valid: np.ndarray
    stage: np.ndarray
    feature_names: tuple[str, ...]
    school_ids: tuple[str, ...]

    @property
    def n_students(self) -> int:
        return self.X.shape[0]

    @cached_property
    def n_valid(self) -> np.ndarray:
        return self.valid.sum(axis=1).astype(np.int64)

    @cached_property
    def n_stage(self) -> np.ndarray:
        return self.stage.sum(axis=1).astype(np.int64)

    @property
    def n_choices(self) -> int:
        return int(self.stage.sum())

    def columns(self, names: Sequence[str]) -> np.ndarray:
        idx = [self.feature_names.index(n) for n in names]
        return self.X[:, :, idx]

    def subset(self, rows: np.ndarray) -> "Design":
        return Design(
            self.X[rows],
            self.program[rows],
            self.school[rows],
            self.valid[rows],
            self.stage[rows],
            self.feature_names,
            self.school_ids,
        )


def school_index(programs: Sequence[ProgramOption]) -> tuple[str, ...]:
    """Sorted school ids; the last one carries the normalized fixed effect."""
    return tuple(sorted({p.school_id for p in programs}))


def _student_columns(students: Sequence[Student]) -> dict[str, np.ndarray]:
    race = np.array([s.race for s in students], dtype=object)
    return {
        "black": (race == "black").astype(float),
        "asian": (race == "asian").astype(float),
        "hispanic": (race == "hispanic").astype(float),
        "other": (race == "other").astype(float),
        "unknown": (race == "unknown").astype(float),
        "black_hispanic": np.isin(race, ["black", "hispanic"]).astype(float),
        "income": np.array([s.income_estimate for s in students], dtype=float),
    }


def build_design(
    students: Sequence[Student],
    programs: Sequence[ProgramOption],
    alternatives: Sequence[Sequence[str]],
    n_ranked: Sequence[int],
    miles: np.ndarray,
    feature_names: Sequence[str] = CATALOG,
    school_ids: Sequence[str] | None = None,
) -> Design:
    """Vectorized feature construction.

    ``alternatives[i]`` lists program ids for student ``i`` with the
    ``n_ranked[i]`` ranked ones first; ``miles`` is (n, len(programs)).
    """
    n = len(students)
    feature_names = tuple(feature_names)
    pidx = {p.program_id: j for j, p in enumerate(programs)}
    school_ids = tuple(school_ids) if school_ids is not None else school_index(programs)
    sidx = {s: k for k, s in enumerate(school_ids)}
    L = max((len(a) for a in alternatives), default=1) or 1

    program = np.full((n, L), -1, dtype=np.int64)
    for i, alts in enumerate(alternatives):
        program[i, : len(alts)] = [pidx[a] for a in alts]
    valid = program >= 0
    safe = np.where(valid, program, 0)
    n_ranked = np.asarray(n_ranked, dtype=np.int64)
    stage = np.arange(L)[None, :] < n_ranked[:, None]
    if (n_ranked > valid.sum(axis=1)).any():
        raise DomainError("ranked positions beyond the listed alternatives")

    prog_school = np.array([sidx[p.school_id] for p in programs], dtype=np.int64)
    school = np.where(valid, prog_school[safe], 0)

    d = np.take_along_axis(np.asarray(miles, dtype=float), safe, axis=1) if len(programs) else np.zeros((n, L))
    cont = np.array(
        [pidx.get(s.continuing_program, -2) if s.continuing_program else -2 for s in students],
        dtype=np.int64,
    )
    sib = np.zeros((n, len(school_ids)), dtype=bool)
    for i, s in enumerate(students):
        for sch in s.sibling_schools:
            k = sidx.get(sch)
            if k is not None:
                sib[i, k] = True
    langs: dict[str | None, int] = {}
    stu_lang = np.array(
        [langs.setdefault(s.ell_language, len(langs)) if s.ell_language else -1 for s in students]
    )
    prog_lang = np.array(
        [langs.setdefault(p.ell_language, len(langs)) if p.ell_language else -2 for p in programs]
    )
    is_ell = np.array([s.is_ell for s in students], dtype=bool)
    prog_ell = np.array([p.is_ell_program for p in programs], dtype=bool)
    mcas = np.array([p.mcas_share for p in programs], dtype=float)[safe]
    wa = np.array([p.pct_white_asian for p in programs], dtype=float)[safe]

    demo = _student_columns(students)
    ell_match = is_ell[:, None] & prog_ell[safe]
    cols = {
        "distance": d,
        "continuing": (program == cont[:, None]),
        "sibling": np.take_along_axis(sib, school, axis=1),
        "ell_match": ell_match,
        "ell_language_match": ell_match & (prog_lang[safe] == stu_lang[:, None]),
        "walk_zone": d <= WALK_ZONE_MILES,
        "mcas": mcas,
        "pct_white_asian": wa,
    }
    trait = {"mcas": mcas, "pct_white_asian": wa, "distance": d}
    X = np.zeros((n, L, len(feature_names)))
    for k, name in enumerate(feature_names):
        if name in cols:
            col = cols[name]
        elif "_x_" in name:
            t, dem = name.split("_x_")
            col = trait[t] * demo[dem][:, None]
        else:
            raise DomainError(f"unknown feature {name!r}")
        X[:, :, k] = np.where(valid, col, 0.0)
    if not np.isfinite(X).all():
        raise DomainError("non-finite feature values")
    return Design(X, program, school, valid, stage, feature_names, school_ids)


def ranking_design(
    students: Sequence[Student],
    programs: Sequence[ProgramOption],
    rankings: Mapping[str, Sequence[str]],
    miles: np.ndarray,
    feature_names: Sequence[str] = CATALOG,
    denominator: str = "ranked",
    menus: Mapping[str, Sequence[str]] | None = None,
    school_ids: Sequence[str] | None = None,
) -> Design:
    """Design for estimation.

    ``denominator="ranked"`` lists only ranked programs, so each stage's
    normalizing sum runs over the student's remaining ranked options.
    ``"full_menu"`` appends unranked menu programs, which then enter every
    stage's normalizing sum.
    """
    if denominator not in ("ranked", "full_menu"):
        raise DomainError(f"unknown likelihood denominator {denominator!r}")
    if denominator == "full_menu" and menus is None:
        raise DomainError("full_menu likelihood needs choice menus")
    alts, m = [], []
    for s in students:
        ranked = list(rankings[s.id])
        extra = []
        if denominator == "full_menu":
            chosen = set(ranked)
            extra = [p for p in menus[s.id] if p not in chosen]
        alts.append(ranked + extra)
        m.append(len(ranked))
    return build_design(students, programs, alts, m, miles, feature_names, school_ids)


def menu_design(
    students: Sequence[Student],
    programs: Sequence[ProgramOption],
    menus: Mapping[str, Sequence[str]],
    miles: np.ndarray,
    feature_names: Sequence[str] = CATALOG,
    school_ids: Sequence[str] | None = None,
) -> Design:
    """Design over whole menus with no ranked stages, for simulating rankings."""
    alts = [list(menus[s.id]) for s in students]
    return build_design(students, programs, alts, [0] * len(students), miles, feature_names, school_ids)


def rank_from_utilities(
    design: Design, utilities: np.ndarray, max_ranked: int | None = MAX_RANKED
) -> list[np.ndarray]:
    """Program indices sorted by utility, best first, cut to ``max_ranked``.

    Padding slots sort last; ties keep menu order (stable sort).
    """
    u = np.where(design.valid, utilities, -np.inf)
    order = np.argsort(-u, axis=1, kind="stable")
    ranked = np.take_along_axis(design.program, order, axis=1)
    sizes = design.valid.sum(axis=1)
    if max_ranked is not None:
        sizes = np.minimum(sizes, max_ranked)
    return [ranked[i, : sizes[i]] for i in range(design.n_students)]
