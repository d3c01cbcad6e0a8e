import numpy as np
import pytest

from subsidyctl.controller import FUTURE_H, ControllerState, controller_policy, decide, run_day, time_decisions
from subsidyctl.core import SeededRng
from subsidyctl.market import CityProfile, initial_state, rollout, step


@pytest.fixture(scope="module")
def planner(tiny_planner):
    return tiny_planner.planner("A")


def history(profile, n, seed=0):
    rng = SeededRng(seed, 3)
    st = initial_state(profile, 0, 10, rng)
    rows = [st.x]
    for _ in range(n - 1):
        st, _ = step(st, profile, 1.0, rng)
        rows.append(st.x)
    return rows


def fresh(planner, profile, **kw):
    ctx = planner.context_for(profile.city_id, 0, profile.cap_C, profile.tolerance_delta)
    return ControllerState(ctx, **kw)


class TestDecide:
    def test_first_window(self, planner, profiles):
        st = fresh(planner, profiles["A"])
        st.history = history(profiles["A"], 1)
        lam = decide(st, 0, planner, SeededRng(0))
        assert 0 < lam <= 30

    def test_bounds(self, planner, profiles):
        st = fresh(planner, profiles["A"])
        st.history = history(profiles["A"], 3)
        with pytest.raises(ValueError, match="history"):
            decide(st, 5, planner, SeededRng(0))
        with pytest.raises(IndexError):
            decide(st, planner.T, planner, SeededRng(0))

    def test_replay_identical(self, planner, profiles):
        h = history(profiles["A"], 30)
        seqs = []
        for _ in range(2):
            st, rng, out = fresh(planner, profiles["A"]), SeededRng(1), []
            for t in range(30):
                st.observe(h[t])
                out.append(decide(st, t, planner, rng))
            seqs.append(out)
        assert seqs[0] == seqs[1]

    def test_gamma_changes_decisions(self, planner, profiles):
        h = history(profiles["A"], 20)
        seqs = {}
        for g in (1.0, 2.0):
            st, rng = fresh(planner, profiles["A"], gamma=g), SeededRng(1)
            seqs[g] = []
            for t in range(20):
                st.observe(h[t])
                seqs[g].append(decide(st, t, planner, rng))
        assert seqs[1.0] != seqs[2.0]

    def test_sampler_prefix_is_history(self, planner, profiles):
        h = history(profiles["A"], 12)
        st = fresh(planner, profiles["A"])
        st.history = h
        seen = []
        orig = planner.eps

        def spy(z, tau, c):
            seen.append(np.array(z[:12]))
            return orig(z, tau, c)

        planner.eps = spy
        try:
            decide(st, 11, planner, SeededRng(0))
        finally:
            planner.eps = orig
        ref = planner.scaler.transform(np.asarray(h))
        assert seen
        for z in seen:
            np.testing.assert_array_equal(z, ref)

    def test_replan_cadence(self, planner, profiles):
        h = history(profiles["A"], 9)
        st = fresh(planner, profiles["A"], replan_every=3)
        plans = []
        for t in range(9):
            st.observe(h[t])
            decide(st, t, planner, SeededRng(t))
            plans.append(st.plan_t)
        assert plans == [0, 0, 0, 3, 3, 3, 6, 6, 6]
        # observed rows overwrite the cached plan
        np.testing.assert_array_equal(st.plan[:9], planner.scaler.transform(np.asarray(h)))

    def test_truncation_keeps_future(self, planner, profiles):
        T = planner.T
        st = fresh(planner, profiles["A"], truncate=True)
        st.history = history(profiles["A"], T - 2)
        lam = decide(st, T - 3, planner, SeededRng(0))
        assert 0 < lam <= 30
        assert st.offset == (T - 2) - (T - FUTURE_H)
        assert st.plan.shape[0] == T

    def test_invalid_state(self, planner, profiles):
        with pytest.raises(ValueError):
            fresh(planner, profiles["A"], replan_every=0)
        with pytest.raises(ValueError):
            fresh(planner, profiles["A"], gamma=-1.0)


class TestRunDay:
    def test_zero_demand(self, tiny_planner):
        prof = CityProfile("Z", demand_curve=(0.0,) * 24)
        tr = tiny_planner.run_day(prof, 0, SeededRng(0), SeededRng(1))
        assert tr.extras["final_rho"] == 0.0
        assert np.all((tr.actions > 0) & (tr.actions <= 30))
        assert np.all(tr.states[:, -1] == 0.0)

    def test_rate_in_unit_interval(self, tiny_planner, profiles):
        for seed in range(50):
            tr = tiny_planner.run_day(profiles["B"], seed % 7, SeededRng(seed), SeededRng(seed, 1))
            assert 0.0 <= tr.extras["final_rho"] < 1.0
            assert tr.extras["decide_seconds"] > 0

    def test_deterministic(self, tiny_planner, profiles):
        a = tiny_planner.run_day(profiles["A"], 1, SeededRng(3), SeededRng(4))
        b = tiny_planner.run_day(profiles["A"], 1, SeededRng(3), SeededRng(4))
        np.testing.assert_array_equal(a.actions, b.actions)
        np.testing.assert_array_equal(a.states, b.states)

    def test_policy_adapter_matches(self, tiny_planner, profiles, planner):
        st = tiny_planner.controller("A", profiles["A"].cap_C, profiles["A"].tolerance_delta, 1)
        via_rollout = rollout(profiles["A"], controller_policy(st, planner, SeededRng(4)), 1, 10, SeededRng(3))
        direct = tiny_planner.run_day(profiles["A"], 1, SeededRng(3), SeededRng(4))
        np.testing.assert_array_equal(via_rollout.actions, direct.actions)


def test_timing_harness(planner, profiles):
    ctx = planner.context_for("A", 0, 0.1, 0.01)
    assert time_decisions(planner, ctx, n=3) > 0
