from __future__ import annotations

import csv
import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from choiceforecast import simulation as sim_mod
from choiceforecast.dataio import substream
from choiceforecast.domain import NEIGHBORHOODS, make_policy
from choiceforecast.features import SIMPLE
from choiceforecast.population import PoolTemplate, fit_participation
from choiceforecast.simulation import (
    METRICS,
    FixedDemand,
    NaiveDemand,
    SimulationConfig,
    SimulationInputs,
    build_report,
    dataset_outcome,
    market_shares,
    pvalue_from_tail,
    rmse,
    run_simulation,
    simulate_one,
    stack_metric,
    summarize_metric,
    tv_distance,
    write_report,
)

from conftest import truth_params

N_NB = len(NEIGHBORHOODS)


# --------------------------------------------------------------------------
# metric arithmetic


def test_tv_distance_examples():
    assert tv_distance([0.2, 0.8], [0.2, 0.8]) == 0.0
    assert tv_distance([1, 0], [0, 1]) == 1.0
    assert tv_distance([0.5, 0.5], [0.25, 0.75]) == 0.25
    with pytest.raises(ValueError):
        tv_distance([1.0], [0.5, 0.5])


@given(st.integers(0, 10**6), st.integers(2, 10))
def test_tv_triangle_inequality(seed, n):
    rng = np.random.default_rng(seed)
    p, q, r = rng.dirichlet(np.ones(n), size=3)
    assert tv_distance(p, r) <= tv_distance(p, q) + tv_distance(q, r) + 1e-12
    assert 0.0 <= tv_distance(p, q) <= 1.0 + 1e-12


def test_rmse_examples():
    assert rmse([3, 4]) == pytest.approx(math.sqrt(12.5))
    assert round(rmse([3, 4]), 4) == 3.5355
    assert rmse(np.zeros(14)) == 0.0
    assert rmse([3, np.nan, 4]) == rmse([3, 4])
    with pytest.raises(ValueError):
        rmse([])


@given(st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=30))
def test_rmse_matches_two_pass(values):
    total = 0.0
    for v in values:
        total += v * v
    assert rmse(values) == pytest.approx(math.sqrt(total / len(values)), rel=1e-12, abs=1e-12)


def test_pvalue_exact_prediction_is_one():
    rng = np.random.default_rng(0)
    sims = rng.normal(size=(50, N_NB))
    res = pvalue_from_tail(sims, sims.mean(axis=0))
    assert res.actual_rmse == pytest.approx(0.0, abs=1e-12) and res.p_value == 1.0


def test_pvalue_worse_than_every_simulation_is_zero():
    rng = np.random.default_rng(1)
    sims = rng.normal(size=(50, N_NB))
    res = pvalue_from_tail(sims, sims.mean(axis=0) + 100)
    assert res.p_value == 0.0
    assert res.expected_rmse == pytest.approx(np.mean(res.simulated_rmse))


def test_pvalue_leave_one_out_and_shares():
    rng = np.random.default_rng(2)
    sims = rng.normal(size=(30, N_NB))
    a = pvalue_from_tail(sims, sims[0], reference="self_in")
    b = pvalue_from_tail(sims, sims[0], reference="leave_one_out")
    assert (b.simulated_rmse > a.simulated_rmse).all()
    shares = rng.dirichlet(np.ones(5), size=(30, N_NB))
    res = pvalue_from_tail(shares, shares[3])
    assert 0.0 <= res.p_value <= 1.0
    with pytest.raises(ValueError):
        pvalue_from_tail(sims[:1], sims[0])


def test_pvalue_calibration_when_actual_is_exchangeable():
    """Leave-one-out references put simulated and realized errors on the same
    footing; the self-in mean sits closer to each simulation than to a fresh
    outcome, so its p-values run small."""
    rng = np.random.default_rng(3)
    loo, self_in = [], []
    for _ in range(1500):
        draws = rng.normal(size=(41, N_NB))
        loo.append(pvalue_from_tail(draws[:40], draws[40], reference="leave_one_out").p_value)
        self_in.append(pvalue_from_tail(draws[:40], draws[40]).p_value)
    loo, self_in = np.array(loo), np.array(self_in)
    # exact rank statistic: P(p < 0.05) = 2 / 41
    assert np.mean(loo < 0.05) == pytest.approx(2 / 41, abs=0.015)
    assert np.mean(loo) == pytest.approx(0.5 + 0.5 / 40, abs=0.03)
    assert np.mean(self_in < 0.05) > np.mean(loo < 0.05)


def test_market_share_examples():
    # one student, top-1 at school 0
    s = market_shares([[0]], [0], [0, 0, 1], 2, 1)
    assert s[0].tolist() == [1.0, 0.0]
    assert np.isnan(s[1:]).all()
    # two choices in one school count as two votes there
    s = market_shares([[0, 1, 2]], [0], [0, 0, 1], 2, 2)
    assert s[0].tolist() == [1.0, 0.0]
    with pytest.raises(ValueError):
        market_shares([[0]], [0], [0], 1, 4)


@given(st.integers(0, 10**6), st.sampled_from([1, 2, 3]))
def test_market_shares_sum_to_one(seed, k):
    rng = np.random.default_rng(seed)
    n_prog, n_sch = 8, 5
    school = rng.integers(0, n_sch, n_prog)
    rankings = [rng.permutation(n_prog)[: rng.integers(1, n_prog)] for _ in range(40)]
    nbs = rng.integers(0, N_NB, 40)
    s = market_shares(rankings, nbs, school, n_sch, k)
    rows = ~np.isnan(s).any(axis=1)
    np.testing.assert_allclose(s[rows].sum(axis=1), 1.0)
    assert set(np.flatnonzero(rows)) == set(nbs.tolist())


def test_percentile_interval_matches_hand_computation():
    values = np.arange(1.0, 41.0)[:, None]
    s = summarize_metric(values)
    # linear interpolation at positions 0.975 and 38.025
    assert s.low[0] == pytest.approx(1.975)
    assert s.high[0] == pytest.approx(39.025)
    assert s.mean[0] == pytest.approx(20.5)
    const = summarize_metric(np.full((40, 3), 2.5))
    assert (const.low == 2.5).all() and (const.high == 2.5).all()


# --------------------------------------------------------------------------
# engine


@pytest.fixture(scope="module")
def sim_inputs(small_history):
    model = fit_participation({y: small_history[y] for y in (2010, 2011, 2012)}, 2013)
    base = small_history[2012]
    return SimulationInputs(
        FixedDemand(truth_params(SIMPLE, 8)), model, PoolTemplate.from_dataset(base), base.programs, make_policy(None)
    )


@pytest.fixture(scope="module")
def outcomes(sim_inputs):
    return run_simulation(SimulationConfig(6, seed=4), sim_inputs)


def test_same_seed_same_outcomes(sim_inputs, outcomes):
    again = run_simulation(SimulationConfig(6, seed=4), sim_inputs)
    for a, b in zip(outcomes, again):
        for m in METRICS:
            np.testing.assert_array_equal(a.metric(m), b.metric(m))
    other = simulate_one(sim_inputs, 5, 0)
    assert not np.array_equal(other.n_students, outcomes[0].n_students) or not np.array_equal(
        np.nan_to_num(other.access), np.nan_to_num(outcomes[0].access)
    )


def test_workers_do_not_change_results(sim_inputs, outcomes):
    par = run_simulation(SimulationConfig(6, seed=4, workers=2), sim_inputs)
    for a, b in zip(outcomes, par):
        for m in METRICS:
            np.testing.assert_array_equal(a.metric(m), b.metric(m))


def test_outcome_invariants(sim_inputs, outcomes):
    for o in outcomes:
        assert (o.unassigned <= o.n_students).all()
        acc = o.access[~np.isnan(o.access)]
        assert ((acc >= 0) & (acc <= 1)).all()
        assert np.array_equal(np.isnan(o.access), o.n_students == 0)
        d = o.distance[~np.isnan(o.distance)]
        assert (d >= 0).all()
        for k in (1, 2, 3):
            s = o.shares[k]
            rows = ~np.isnan(s).any(axis=-1)
            np.testing.assert_allclose(s[rows].sum(axis=-1), 1.0)


def test_unassigned_total_matches_matching(small_history):
    actual = dataset_outcome(small_history[2013], ("K0", "K1", "K2"))
    d = small_history[2013]
    assert actual.unassigned.sum() == sum(pid is None for pid in d.assignments.values())
    assert actual.n_students.sum() == len(d.students)


def test_zero_capacity_leaves_everyone_unassigned(sim_inputs):
    empty = tuple(replace(p, capacity=0) for p in sim_inputs.programs)
    inputs = SimulationInputs(sim_inputs.demand, sim_inputs.participation, sim_inputs.template, empty, sim_inputs.policy)
    for o in run_simulation(SimulationConfig(2, seed=1), inputs):
        np.testing.assert_array_equal(o.unassigned, o.n_students)
        acc = o.access[o.n_students > 0]
        assert (acc == 0).all()


def test_naive_model_has_no_coefficient_layer(sim_inputs):
    naive = NaiveDemand()
    assert naive.draw_coefficients(np.random.default_rng(0)) is None and not naive.has_coefficients
    inputs = SimulationInputs(naive, sim_inputs.participation, sim_inputs.template, sim_inputs.programs, sim_inputs.policy)
    outs = run_simulation(SimulationConfig(2, seed=0), inputs)
    assert len(outs) == 2


def test_changing_lottery_stream_keeps_pool_and_rankings(sim_inputs, outcomes, monkeypatch):
    def shifted(seed, *path):
        if path and path[-1] == "lottery":
            return substream(seed + 1000, *path)
        return substream(seed, *path)

    monkeypatch.setattr(sim_mod, "substream", shifted)
    other = simulate_one(sim_inputs, 4, 0)
    base = outcomes[0]
    np.testing.assert_array_equal(other.n_students, base.n_students)
    for k in (1, 2, 3):
        np.testing.assert_array_equal(other.shares[k], base.shares[k])
    assert not np.array_equal(np.nan_to_num(other.distance), np.nan_to_num(base.distance))


def test_config_validation():
    with pytest.raises(ValueError):
        SimulationConfig(0)
    with pytest.raises(ValueError):
        SimulationConfig(2, reference="median")


# --------------------------------------------------------------------------
# reports


def test_report_means_and_files(outcomes, small_history, tmp_path):
    actual = dataset_outcome(small_history[2013])
    report = build_report(outcomes, actual)
    stacked = stack_metric(outcomes, "access")
    np.testing.assert_allclose(report.summaries["access"].mean, np.nanmean(stacked, axis=0), equal_nan=True)
    for m in METRICS:
        s = report.summaries[m]
        ok = ~np.isnan(s.mean)
        assert (s.low[ok] <= s.mean[ok]).all() and (s.mean[ok] <= s.high[ok]).all()
    paths = write_report(report, tmp_path)
    names = {p.name for p in paths}
    assert {"unassigned_K1.csv", "top2_K2.csv", "rmse_summary.csv", "tail_access_K1.csv"} <= names
    rows = list(csv.DictReader(open(tmp_path / "rmse_summary.csv")))
    assert len(rows) == len(METRICS) * 2
    assert all(r["p_value"] == "" or 0 <= float(r["p_value"]) <= 1 for r in rows)
    top = list(csv.DictReader(open(tmp_path / "top1_K1.csv")))
    assert len(top) == N_NB * len(report.schools)
