"""Rule-based ranking: a fixed lexicographic hierarchy of program traits."""

from __future__ import annotations

from typing import Mapping, Sequence

from .domain import DomainError, ProgramOption, Student
from .features import MAX_RANKED

CRITERIA = (
    "present_program",
    "present_school",
    "sibling_school",
    "ell_program",
    "ell_home_language",
    "tier",
    "distance",
)


def naive_key(
    student: Student,
    program: ProgramOption,
    miles: float,
    present_school: str | None,
) -> tuple:
    """Sort key for one option; smaller sorts earlier.

    Continuing-student rules only fire for continuing students and ELL
    rules only for ELL students; a final program-id key makes the order
    strict.
    """
    continuing = student.continuing_program is not None
    ell = student.is_ell
    return (
        0 if continuing and program.program_id == student.continuing_program else 1,
        0 if continuing and program.school_id == present_school else 1,
        0 if program.school_id in student.sibling_schools else 1,
        0 if ell and program.is_ell_program else 1,
        0 if ell and program.is_ell_program and program.ell_language == student.ell_language else 1,
        program.tier,
        miles,
        program.program_id,
    )


def rank_naive(
    student: Student,
    menu: Sequence[ProgramOption],
    miles: Sequence[float],
    programs: Mapping[str, ProgramOption] | None = None,
    max_ranked: int | None = None,
) -> list[str]:
    """Whole menu ordered by the hierarchy; ``programs`` resolves the
    continuing program's school when it is not itself on the menu."""
    if not menu:
        raise DomainError(f"student {student.id}: empty menu")
    present_school = None
    if student.continuing_program is not None:
        for p in menu:
            if p.program_id == student.continuing_program:
                present_school = p.school_id
        if present_school is None and programs is not None and student.continuing_program in programs:
            present_school = programs[student.continuing_program].school_id
    order = sorted(
        range(len(menu)),
        key=lambda j: naive_key(student, menu[j], float(miles[j]), present_school),
    )
    ranked = [menu[j].program_id for j in order]
    return ranked if max_ranked is None else ranked[:max_ranked]


def naive_rankings(
    students: Sequence[Student],
    programs: Sequence[ProgramOption],
    menus: Mapping[str, Sequence[str]],
    miles,
    max_ranked: int = MAX_RANKED,
) -> dict[str, tuple[str, ...]]:
    """Truncated naive rankings for a whole market; ``miles`` is (n, P)."""
    index = {p.program_id: j for j, p in enumerate(programs)}
    table = {p.program_id: p for p in programs}
    out = {}
    for i, s in enumerate(students):
        idx = [index[pid] for pid in menus[s.id]]
        out[s.id] = tuple(
            rank_naive(s, [programs[j] for j in idx], [miles[i][j] for j in idx], table, max_ranked)
        )
    return out
