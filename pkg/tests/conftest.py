from __future__ import annotations

import os

import numpy as np
import pytest
from hypothesis import settings

from choiceforecast.dataio import SyntheticConfig, generate_synthetic
from choiceforecast.domain import ProgramOption, Student
from choiceforecast.features import REDUCED, SIMPLE
from choiceforecast.logit import LogitParams

settings.register_profile("default", deadline=None, max_examples=60)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

ORIGIN = (42.30, -71.10)


def make_student(sid="s1", **kw) -> Student:
    base = dict(
        id=sid,
        grade="K1",
        neighborhood="Roxbury",
        geocode=sid,
        home_location=ORIGIN,
        race="black",
        income_estimate=0.5,
    )
    base.update(kw)
    return Student(**base)


def make_program(pid="P1", school="A", tier=2, capacity=1, location=ORIGIN, **kw) -> ProgramOption:
    base = dict(
        program_id=pid,
        school_id=school,
        tier=tier,
        capacity=capacity,
        mcas_share=0.5,
        pct_white_asian=0.3,
        school_location=location,
    )
    base.update(kw)
    return ProgramOption(**base)


def school_ids(n: int) -> tuple[str, ...]:
    width = len(str(n - 1))
    return tuple(f"S{s:0{width}d}" for s in range(n))


def truth_params(features=SIMPLE, n_schools: int = 6, seed: int = 0) -> LogitParams:
    rng = np.random.default_rng(seed)
    values = {
        "distance": -0.5,
        "continuing": 3.0,
        "sibling": 1.5,
        "ell_match": 1.0,
        "ell_language_match": 0.5,
        "walk_zone": 0.3,
    }
    beta = np.array([values.get(f, rng.uniform(-0.5, 0.5)) for f in features])
    alpha = np.linspace(-0.5, 0.5, n_schools - 1)
    return LogitParams(beta, alpha, tuple(features), school_ids(n_schools))


@pytest.fixture(scope="session")
def small_dataset():
    params = truth_params(SIMPLE, 6)
    return generate_synthetic(SyntheticConfig(params, n_students=120, n_schools=6, seed=5, program_jitter=0.2))


@pytest.fixture(scope="session")
def reduced_truth():
    return truth_params(REDUCED, 6)


@pytest.fixture(scope="session")
def small_history():
    """Four years of an eight-school market with K0-K2 applicants and assignments."""
    from choiceforecast.dataio import generate_history

    params = truth_params(SIMPLE, 8)
    cfg = SyntheticConfig(params, n_students=150, n_schools=8, grades=("K0", "K1", "K2"), seed=3, program_jitter=0.3)
    return generate_history(cfg, [2010, 2011, 2012, 2013])


def pytest_terminal_summary(terminalreporter):
    import sys

    module = sys.modules.get("test_acceptance")
    if module is None or not module.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in module.summary_lines():
        terminalreporter.write_line(line)
