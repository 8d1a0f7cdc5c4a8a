import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ffgg.asynchrony import (
    AsyncConfig,
    DelayModel,
    IncompleteTraceError,
    check_theorem8,
    check_virtual_identity,
    recommend_async_stepsize,
    run_async,
    virtual_iterates,
)
from ffgg.local import LocalSolveSpec
from ffgg.problem import InvalidInputError, generate_consistent, problem_l


def consistent(seed=0):
    return generate_consistent(6, 20, 4, 2, seed)


class TestDelayModel:
    def test_validation(self):
        with pytest.raises(InvalidInputError):
            DelayModel("fixed", value=0.0)
        with pytest.raises(InvalidInputError):
            DelayModel("uniform_int", lo=3, hi=2)
        with pytest.raises(InvalidInputError):
            DelayModel("per_client_period", periods=(1.0, -1.0))
        with pytest.raises(InvalidInputError):
            DelayModel("poisson")

    def test_config_validation(self):
        with pytest.raises(InvalidInputError):
            AsyncConfig(0.1, 5, 3, pool_size=2)
        with pytest.raises(InvalidInputError):
            AsyncConfig(0.0, 5, 1)


class TestRunAsync:
    def test_single_worker_is_sequential(self, t1):
        trace = run_async(t1, AsyncConfig(0.5, 2, 1), DelayModel("fixed", 1.0))
        np.testing.assert_allclose(trace.thetas[:, 0], [0.0, 1.0, 1.5])
        assert [a.delay for a in trace.applied] == [0, 0]
        assert trace.tau_max_observed == 1

    def test_two_worker_round_robin(self, t3):
        trace = run_async(t3, AsyncConfig(0.05, 12, 2), DelayModel("per_client_period", periods=(1.0, 1.0)))
        # both start at time 0; client 0 finishes first, then they alternate
        assert [a.client for a in trace.applied[:4]] == [0, 1, 0, 1]
        assert [a.delay for a in trace.applied[1:]] == [1] * 11
        # the applied client read theta^{Prev+1} and waited one iteration
        for a in trace.applied[1:]:
            assert a.r - trace.prev_map[(a.client, a.r)] == 2

    def test_fixed_point(self, t3):
        trace = run_async(t3, AsyncConfig(0.05, 10, 2, theta0=(2.0,)), DelayModel("fixed", 1.0))
        assert all(np.all(a.update == 0.0) for a in trace.applied)
        np.testing.assert_allclose(trace.thetas, 2.0)
        np.testing.assert_allclose(trace.virtual_thetas, 2.0)

    def test_pool_larger_than_problem(self, t3):
        with pytest.raises(InvalidInputError):
            run_async(t3, AsyncConfig(0.05, 3, 2, pool_size=3), DelayModel("fixed"))

    @settings(max_examples=25, deadline=None)
    @given(st.integers(1, 6), st.integers(0, 3), st.integers(1, 4), st.integers(0, 100))
    def test_active_set_law(self, active, extra_pool, hi, seed):
        ps = consistent(seed % 3)
        pool = min(active + extra_pool, ps.m_clients)
        cfg = AsyncConfig(0.01, 40, active, pool, sampling_seed=seed)
        trace = run_async(ps, cfg, DelayModel("uniform_int", lo=1, hi=hi, seed=seed))
        assert len(trace.active_sets) == trace.iterations + 1
        for r, a in enumerate(trace.applied):
            cur, nxt = trace.active_sets[r], trace.active_sets[r + 1]
            assert len(cur) == active and a.client in cur
            assert nxt == (cur - {a.client}) | {trace.sampled[r]}
            assert a.delay + 1 <= trace.tau_max_observed
            assert set(trace.active_sets[r]) <= set(range(pool))

    @pytest.mark.parametrize("active,d", [(1, 1.0), (3, 1.0), (4, 2.5), (6, 0.5)])
    def test_fixed_delay_bound(self, active, d):
        # jobs finish in batches of `active`; ties go to the lower client id, so a job read
        # at the start of one batch can be applied at the end of the next
        ps = consistent()
        trace = run_async(ps, AsyncConfig(0.01, 60, active, 6), DelayModel("fixed", d))
        assert max(a.delay for a in trace.applied) <= 2 * (active - 1)

    def test_deterministic(self):
        ps = consistent()
        cfg = AsyncConfig(0.01, 50, 3, 5, sampling_seed=4)
        dm = DelayModel("uniform_int", lo=1, hi=5, seed=2)
        a, b = run_async(ps, cfg, dm), run_async(ps, cfg, dm)
        assert a.thetas.tobytes() == b.thetas.tobytes() and a.jsonl_text() == b.jsonl_text()
        assert a.metrics.csv_text() == b.metrics.csv_text()

    def test_jsonl(self, t3, tmp_path):
        trace = run_async(t3, AsyncConfig(0.05, 3, 2), DelayModel("fixed"))
        path = tmp_path / "trace.jsonl"
        trace.write_jsonl(path)
        recs = [json.loads(line) for line in path.read_text().splitlines()]
        assert [r["r"] for r in recs] == [0, 1, 2]
        assert set(recs[0]) == {"r", "j_r", "d_jr", "finish_time", "f_norm2"}


class TestVirtualIterates:
    def test_single_client_initialization(self, t1):
        trace = run_async(t1, AsyncConfig(0.5, 2, 1), DelayModel("fixed"))
        np.testing.assert_allclose(trace.virtual_thetas[0], [1.0])

    def test_identity_on_t3(self, t3):
        trace = run_async(t3, AsyncConfig(0.05, 100, 2), DelayModel("per_client_period", periods=(1.0, 1.7)))
        ok, err = check_virtual_identity(trace, t3, 0.05)
        assert ok and err <= 1e-12

    @settings(max_examples=15, deadline=None)
    @given(st.integers(1, 6), st.integers(0, 1000))
    def test_identity_random(self, active, seed):
        ps = consistent(seed % 4)
        trace = run_async(ps, AsyncConfig(0.02, 80, active, 6, seed),
                          DelayModel("uniform_int", lo=1, hi=6, seed=seed))
        assert check_virtual_identity(trace, ps, 0.02)[0]

    def test_inexact_reports_residual(self):
        ps = consistent()
        cfg = AsyncConfig(0.02, 40, 3, 6, spec=LocalSolveSpec("gd", 1, w0="random", seed=1))
        ok, err = check_virtual_identity(run_async(ps, cfg, DelayModel("fixed")), ps, 0.02)
        assert not ok and err > 1e-10

    def test_incomplete_trace(self, t3):
        trace = run_async(t3, AsyncConfig(0.05, 5, 2), DelayModel("fixed"))
        trace.sampled = trace.sampled[:2]
        with pytest.raises(IncompleteTraceError):
            virtual_iterates(trace, t3, 0.05)


class TestStepsize:
    def test_plug_in(self):
        assert recommend_async_stepsize(2.0, 1, 2) == pytest.approx(1 / 8)
        assert recommend_async_stepsize(3.0, 1, 1) == pytest.approx(1 / (6 * math.sqrt(2)))

    def test_quadrupling_halves(self):
        assert recommend_async_stepsize(1.7, 3, 20) == pytest.approx(2 * recommend_async_stepsize(1.7, 3, 80))

    def test_rejects_nonpositive(self):
        with pytest.raises(InvalidInputError):
            recommend_async_stepsize(0.0, 1, 1)


class TestTheorem8:
    def test_single_client(self, t1):
        gamma = recommend_async_stepsize(2.0, 1, 1)
        trace = run_async(t1, AsyncConfig(gamma, 30, 1), DelayModel("fixed"))
        v = check_theorem8(trace, t1, 2.0, gamma, [2.0])
        assert v.holds and v.worst_margin > 0

    def test_fixed_point(self, t3):
        trace = run_async(t3, AsyncConfig(0.05, 5, 2, theta0=(2.0,)), DelayModel("fixed"))
        assert check_theorem8(trace, t3, 8.0, 0.05, [2.0]).holds

    @pytest.mark.parametrize("seed", range(10))
    @pytest.mark.parametrize("tau_max", [1, 8])
    def test_seeded_instances(self, seed, tau_max):
        ps = generate_consistent(8, 20, 4, 2, seed)
        big_l = problem_l(ps)
        active = 1 if tau_max == 1 else 8
        gamma = recommend_async_stepsize(big_l, active, tau_max)
        dm = DelayModel("fixed") if tau_max == 1 else DelayModel("per_client_period", periods=(1.0,) * 8)
        trace = run_async(ps, AsyncConfig(gamma, 300, active, 8, seed), dm)
        assert trace.tau_max_observed <= tau_max
        assert check_theorem8(trace, ps, big_l, gamma, ps.planted_theta_star).holds
