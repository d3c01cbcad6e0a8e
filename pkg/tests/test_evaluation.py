import csv

import numpy as np
import pytest
from scipy import stats

from subsidyctl.core import SeededRng, Trajectory
from subsidyctl.evaluation import (
    GAMMA_GRID,
    P_SENTINEL,
    BehaviorCloning,
    EvalReport,
    day_rng,
    emit_report,
    evaluate_trajectory,
    fixed_lambda_policy,
    lambda_grid,
    paired_compare,
    run_policy,
    score,
    sweep_table,
    tune_fixed_lambda,
)
from subsidyctl.market import rollout

from oracles import paired_t_textbook


class TestScore:
    def test_satisfied(self):
        assert score(500, 0.08, 0.10) == 500

    @pytest.mark.parametrize("beta,expected", [(1.0, 50.0), (2.0, 25.0)])
    def test_formula(self, beta, expected):
        assert score(100, 0.20, 0.10, beta) == pytest.approx(expected, rel=1e-15)

    def test_continuity_at_cap(self):
        assert score(100, 0.10, 0.10) == 100
        assert score(100, 0.10 * (1 + 1e-12), 0.10) == pytest.approx(100, rel=1e-9)

    def test_decreasing_in_beta(self):
        vals = [score(100, 0.15, 0.10, b) for b in (0.25, 0.5, 1.0, 2.0, 4.0)]
        assert np.all(np.diff(vals) < 0)

    def test_decreasing_in_rate(self):
        vals = [score(100, c, 0.10) for c in np.linspace(0.1001, 0.5, 30)]
        assert np.all(np.diff(vals) < 0) and vals[0] < 100

    def test_undefined_rate(self):
        assert score(7, float("nan"), 0.1) == 7

    def test_validation(self):
        with pytest.raises(ValueError):
            score(1, 0.1, 1.2)
        with pytest.raises(ValueError):
            score(1, 0.1, 0.1, beta=0)


class TestDayResult:
    def test_flags(self, profiles):
        tr = rollout(profiles["A"], fixed_lambda_policy(0.3), 0, 10, SeededRng(0))
        r = evaluate_trajectory(tr, 0.01, 0.001, "x")
        assert r.violated and r.under_gap == 0.0
        r = evaluate_trajectory(tr, 0.9, 0.05, "x")
        assert not r.violated and r.under_gap == pytest.approx(0.9 - tr.c_real)

    def test_violation_needs_tolerance(self, profiles):
        tr = rollout(profiles["A"], fixed_lambda_policy(1.0), 0, 10, SeededRng(0))
        C = tr.c_real - 0.001
        assert not evaluate_trajectory(tr, C, 0.002, "x").violated
        assert evaluate_trajectory(tr, C, 0.0005, "x").violated


class TestPaired:
    def test_identical(self):
        r = paired_compare([1.0, 2.0, 3.0], [1.0, 2.0, 3.0])
        assert (r.mean_diff, r.p_value) == (0.0, 0.5)

    def test_constant_shift(self):
        b = np.arange(21.0)
        r = paired_compare(b + 1, b)
        assert r.mean_diff == 1.0 and r.p_value == P_SENTINEL and r.n == 21

    def test_textbook_t(self):
        rng = np.random.default_rng(3)
        for _ in range(20):
            a = rng.standard_normal(21) + 0.2
            b = rng.standard_normal(21)
            r = paired_compare(a, b)
            assert abs(r.t_stat - paired_t_textbook(list(a), list(b))) <= 1e-9
            ref = stats.ttest_rel(a, b, alternative="greater")
            np.testing.assert_allclose(r.p_value, ref.pvalue, rtol=1e-10)
            assert r.ci_low < r.mean_diff < r.ci_high

    def test_length_checks(self):
        with pytest.raises(ValueError):
            paired_compare([1.0], [2.0])
        with pytest.raises(ValueError):
            paired_compare([1.0, 2.0], [2.0])


class TestFixedLambda:
    def test_constant(self):
        pol = fixed_lambda_policy(2.5)
        assert all(pol(None, t) == 2.5 for t in range(5))

    def test_range(self):
        for bad in (0.0, 31.0):
            with pytest.raises(ValueError):
                fixed_lambda_policy(bad)

    def test_grid(self):
        g = lambda_grid()
        assert g.size == 15 and g[0] == pytest.approx(0.2) and g[-1] == pytest.approx(30.0)

    def test_tuning_picks_best(self, profiles):
        lvl, means = tune_fixed_lambda(profiles["C"], range(3), 10, 0)
        assert means.size == 15 and lvl == lambda_grid()[int(np.argmax(means))]

    def test_rate_monotone_in_level(self, profiles):
        p = profiles["C"]
        levels = lambda_grid(6, 0.3, 20.0)
        rates = [np.mean([rollout(p, fixed_lambda_policy(l), s % 7, 10, SeededRng(s, 5)).c_real
                          for s in range(100)]) for l in levels]
        assert np.all(np.diff(rates) <= 0)


class TestBehaviorCloning:
    def test_constant_target(self, tiny_logs):
        trajs = [Trajectory(tr.city_id, tr.day_index, 10, tr.states, np.full(144, 1.7), tr.rides,
                            tr.gmv, tr.drv, tr.subsidy) for tr in tiny_logs]
        bc = BehaviorCloning(seed=0).fit(trajs)
        pred = bc.predict(np.concatenate([tr.states for tr in tiny_logs]))
        assert np.max(np.abs(pred - 1.7)) < 0.05

    def test_clamped_and_deterministic(self, tiny_logs):
        a = BehaviorCloning(hidden=(8,), max_iter=20, seed=1).fit(tiny_logs)
        b = BehaviorCloning(hidden=(8,), max_iter=20, seed=1).fit(tiny_logs)
        X = 1e4 * np.random.default_rng(0).standard_normal((50, 20))
        pa = a.predict(X)
        np.testing.assert_array_equal(pa, b.predict(X))
        assert np.all((pa > 0) & (pa <= 30))

    def test_array_interface(self, rng):
        X = rng.standard_normal((200, 20))
        y = 1.0 + 0.5 * X[:, 0]
        bc = BehaviorCloning(max_iter=200).fit(X, y)
        assert bc.score(X, y) > 0.9
        assert isinstance(bc.policy()(X[0], 0), float)


def tiny_report(profiles, name="p", level=1.0):
    return run_policy(lambda p: fixed_lambda_policy(level), name, [profiles["C"]], range(2), 10, 0)


class TestReports:
    def test_common_random_numbers(self, profiles):
        a, b = tiny_report(profiles, "a"), tiny_report(profiles, "b")
        np.testing.assert_array_equal(a.column("rides"), b.column("rides"))
        assert a.key() == b.key()
        assert day_rng(0, 1, 3).random() == day_rng(0, 1, 3).random()

    def test_gamma_grid(self):
        assert GAMMA_GRID == (0.2, 0.4, 0.6, 0.8, 1.0, 1.2, 1.4, 1.6, 1.8, 2.0)

    def test_sweep_sign(self, profiles):
        reps = {g: tiny_report(profiles, level=l) for g, l in ((0.5, 5.0), (1.0, 1.0), (1.5, 0.3))}
        rows, rho = sweep_table(reps)
        assert [r.gamma for r in rows] == [0.5, 1.0, 1.5]
        assert rho == pytest.approx(1.0)
        _, rho = sweep_table({g: reps[1.5 - g + 0.5] for g in reps})
        assert rho == pytest.approx(-1.0)

    def test_emit_empty(self, tmp_path):
        paths = emit_report([], tmp_path)
        for p in paths.values():
            assert len(p.read_text().splitlines()) == 1

    def test_emit_deterministic_and_consistent(self, profiles, tmp_path):
        rep = tiny_report(profiles)
        p1 = emit_report([rep], tmp_path / "a")
        p2 = emit_report([rep], tmp_path / "b")
        for k in p1:
            assert p1[k].read_bytes() == p2[k].read_bytes()
        with open(p1["rate_curve"]) as fh:
            rows = list(csv.DictReader(fh))
        C = profiles["C"].cap_C
        for d in rep.days:
            last = [r for r in rows if int(r["day"]) == d.day_index][-1]
            assert abs(float(last["rate_minus_C"]) - (d.c_real - C)) <= 1e-12
        with open(p1["kpi_curves"]) as fh:
            kpi = list(csv.DictReader(fh))
        cum = [r for r in kpi if r["metric"] == "rides_cum" and r["day"] == "0"][-1]
        assert float(cum["value"]) == rep.days[0].rides
        with open(p1["summary"]) as fh:
            assert next(csv.reader(fh)) == ["policy", "city", "mean_score", "mean_rides", "mean_gmv",
                                            "violations", "mean_under_gap"]

    def test_report_aggregates(self, profiles):
        rep = tiny_report(profiles)
        (row,) = rep.summary_rows()
        assert row[1] == "C" and row[2] == pytest.approx(rep.column("score").mean())
        assert rep.n_violations == row[5]
