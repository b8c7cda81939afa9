"""Student-proposing deferred acceptance, admission cutoffs and access to quality."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Mapping, Sequence

from .domain import DomainError, Priority, ProgramOption, Student, WALK_ZONE_MILES, priority_of

UNASSIGNED = "UNASSIGNED"
QUALITY_TIERS = (1, 2)

PriorityFn = Callable[[Student, ProgramOption], Priority]


@dataclass(frozen=True)
class Market:
    students: tuple[Student, ...]
    programs: tuple[ProgramOption, ...]
    rankings: Mapping[str, Sequence[str]]
    priority: PriorityFn = priority_of

    def __post_init__(self) -> None:
        object.__setattr__(self, "students", tuple(self.students))
        object.__setattr__(self, "programs", tuple(self.programs))


@dataclass(frozen=True)
class Matching:
    """Outcome of one DA run.

    ``admitted[j]`` lists ``(priority, student_id)`` pairs sorted best
    first; ``round_admitted`` records the round in which each assigned
    student was last (and finally) accepted.
    """

    assignment: Mapping[str, str | None]
    admitted: Mapping[str, tuple[tuple[Priority, str], ...]]
    capacity: Mapping[str, int]
    round_admitted: Mapping[str, int] = field(default_factory=dict)

    def is_full(self, program_id: str) -> bool:
        return len(self.admitted[program_id]) >= self.capacity[program_id]

    def worst_admit(self, program_id: str) -> Priority | None:
        adm = self.admitted[program_id]
        return adm[-1][0] if adm else None


def _check_lotteries(market: Market, table: Mapping[str, ProgramOption]) -> None:
    seen: dict[tuple[str, int, float], str] = {}
    for s in market.students:
        for pid in market.rankings.get(s.id, ()):
            pr = market.priority(s, table[pid])
            key = (pid, pr.level, pr.lottery)
            other = seen.get(key)
            if other is not None and other != s.id:
                raise DomainError(
                    f"students {other} and {s.id} share lottery {pr.lottery} at program {pid}, level {pr.level}"
                )
            seen[key] = s.id


def deferred_acceptance(market: Market, check_ties: bool = True) -> Matching:
    """Round-synchronous student-proposing DA.

    Every round, each student without a tentative seat proposes to the
    next program on the list; each program keeps the best applicants up to
    capacity among those held and the new proposers.
    """
    table = {p.program_id: p for p in market.programs}
    by_id = {s.id: s for s in market.students}
    for sid, ranking in market.rankings.items():
        for pid in ranking:
            if pid not in table:
                raise DomainError(f"student {sid} ranks unknown program {pid}")
    if check_ties:
        _check_lotteries(market, table)

    capacity = {p.program_id: p.capacity for p in market.programs}
    # Plain (level, lottery, id) tuples sort much faster than Priority objects.
    held: dict[str, list[tuple[int, float, str]]] = {pid: [] for pid in table}
    next_choice = {s.id: 0 for s in market.students}
    accepted_round: dict[str, int] = {}
    free = [s.id for s in market.students]
    rnd = 0
    while free:
        rnd += 1
        proposals: dict[str, list[tuple[int, float, str]]] = {}
        for sid in free:
            ranking = market.rankings.get(sid, ())
            k = next_choice[sid]
            if k >= len(ranking):
                continue
            pid = ranking[k]
            next_choice[sid] = k + 1
            pr = market.priority(by_id[sid], table[pid])
            proposals.setdefault(pid, []).append((pr.level, pr.lottery, sid))
        if not proposals:
            break
        rejected: list[str] = []
        for pid, new in proposals.items():
            pool = held[pid] + new
            pool.sort()
            cap = capacity[pid]
            keep, drop = pool[:cap], pool[cap:]
            held[pid] = keep
            for *_, sid in new:
                accepted_round[sid] = rnd
            rejected.extend(sid for *_, sid in drop)
        free = [sid for sid in rejected if next_choice[sid] < len(market.rankings.get(sid, ()))]

    assignment: dict[str, str | None] = {s.id: None for s in market.students}
    for pid, adm in held.items():
        for *_, sid in adm:
            assignment[sid] = pid
    rounds = {sid: accepted_round[sid] for sid, pid in assignment.items() if pid is not None}
    admitted = {pid: tuple((Priority(lv, lot), sid) for lv, lot, sid in adm) for pid, adm in held.items()}
    return Matching(assignment, admitted, capacity, rounds)


def blocking_pairs(market: Market, matching: Matching) -> list[tuple[str, str]]:
    """(student, program) pairs where the student prefers the program and
    the program has an empty seat or admits someone it ranks lower."""
    table = {p.program_id: p for p in market.programs}
    out = []
    for s in market.students:
        ranking = list(market.rankings.get(s.id, ()))
        own = matching.assignment.get(s.id)
        cut = ranking.index(own) if own is not None else len(ranking)
        for pid in ranking[:cut]:
            if not matching.is_full(pid):
                out.append((s.id, pid))
                continue
            worst = matching.worst_admit(pid)
            if worst is not None and market.priority(s, table[pid]) < worst:
                out.append((s.id, pid))
    return out


def access_to_quality(
    market: Market,
    matching: Matching,
    student: Student,
    menu: Sequence[str],
    tiers: Sequence[int] = QUALITY_TIERS,
) -> float:
    """Highest lottery number that would still win the student a seat at
    some quality-tier program on the menu, holding everyone else fixed.

    An open seat gives 1.0. At a full program, a better priority level
    than the worst admit also gives 1.0, the same level gives the worst
    admit's lottery number, and a worse level gives 0.
    """
    table = {p.program_id: p for p in market.programs}
    best = 0.0
    for pid in menu:
        p = table.get(pid)
        if p is None or p.tier not in tiers or not p.admits(student) and student.continuing_program != pid:
            continue
        best = max(best, _seat_threshold(market, matching, student, p))
        if best >= 1.0:
            break
    return best


def _seat_threshold(market: Market, matching: Matching, student: Student, program: ProgramOption) -> float:
    if not matching.is_full(program.program_id):
        return 1.0
    worst = matching.worst_admit(program.program_id)
    if worst is None:  # zero capacity
        return 0.0
    level = market.priority(student, program).level
    if level < worst.level:
        return 1.0
    if level == worst.level:
        return float(worst.lottery)
    return 0.0


def access_table(
    market: Market, matching: Matching, menus: Mapping[str, Sequence[str]], tiers: Sequence[int] = QUALITY_TIERS
) -> dict[str, float]:
    """``access_to_quality`` for every student, sharing per-program cutoffs."""
    table = {p.program_id: p for p in market.programs}
    quality = {pid for pid, p in table.items() if p.tier in tiers}
    open_seat = {pid for pid in quality if not matching.is_full(pid)}
    worst = {pid: matching.worst_admit(pid) for pid in quality - open_seat}
    out = {}
    for s in market.students:
        best = 0.0
        for pid in menus[s.id]:
            if pid not in quality:
                continue
            p = table[pid]
            if not p.admits(s) and s.continuing_program != pid:
                continue
            if pid in open_seat:
                best = 1.0
                break
            w = worst[pid]
            if w is None:
                continue
            level = market.priority(s, p).level
            if level < w.level:
                best = 1.0
                break
            if level == w.level and w.lottery > best:
                best = float(w.lottery)
        out[s.id] = best
    return out


def write_matching_csv(matching: Matching, path: str | Path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["student_id", "program_id", "round_admitted"])
        for sid, pid in matching.assignment.items():
            w.writerow([sid, pid if pid is not None else UNASSIGNED, matching.round_admitted.get(sid, "")])


# --------------------------------------------------------------------------
# legacy walk-zone priority


def split_walk_zone_market(
    market: Market,
    miles: Callable[[Student, ProgramOption], float],
    walk_share: float = 0.5,
    walk_miles: float = WALK_ZONE_MILES,
) -> tuple[Market, Callable[[Matching], Matching]]:
    """Two sub-programs per program: a walk half that ranks walk-zone
    applicants ahead of everyone at the same priority level, and an open
    half without walk priority.

    Each student's ranking lists the walk half before the open half of the
    same program. Returns the split market and a function mapping its
    matching back onto original program ids.
    """
    walk_ids, open_ids, parent = {}, {}, {}
    programs = []
    for p in market.programs:
        n_walk = int(math.ceil(walk_share * p.capacity))
        w = replace(p, program_id=f"{p.program_id}#walk", capacity=n_walk)
        o = replace(p, program_id=f"{p.program_id}#open", capacity=p.capacity - n_walk)
        walk_ids[p.program_id], open_ids[p.program_id] = w.program_id, o.program_id
        parent[w.program_id] = parent[o.program_id] = p
        programs += [w, o]

    base = market.priority

    def priority(student: Student, program: ProgramOption) -> Priority:
        orig = parent[program.program_id]
        pr = base(student, orig)
        if program.program_id.endswith("#walk"):
            near = miles(student, orig) <= walk_miles
            return Priority(2 * pr.level + (0 if near else 1), pr.lottery)
        return Priority(2 * pr.level, pr.lottery)

    rankings = {
        sid: [x for pid in r for x in (walk_ids[pid], open_ids[pid])] for sid, r in market.rankings.items()
    }

    def merge(m: Matching) -> Matching:
        assignment = {sid: (parent[pid].program_id if pid else None) for sid, pid in m.assignment.items()}
        admitted: dict[str, list[tuple[Priority, str]]] = {p.program_id: [] for p in market.programs}
        by_id = {s.id: s for s in market.students}
        for pid, adm in m.admitted.items():
            orig = parent[pid]
            admitted[orig.program_id] += [(base(by_id[sid], orig), sid) for _, sid in adm]
        return Matching(
            assignment,
            {k: tuple(sorted(v)) for k, v in admitted.items()},
            {p.program_id: p.capacity for p in market.programs},
            dict(m.round_admitted),
        )

    return Market(market.students, tuple(programs), rankings, priority), merge
