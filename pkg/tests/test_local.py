import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ffgg.local import (
    CohortSolver,
    LocalSolveSpec,
    gd_propagator,
    gd_weights,
    recommend_tau,
    solve_cohort,
    solve_local,
)
from ffgg.problem import ClientConstants, InvalidInputError, ProblemSet, generate_uniform, grad_w, w_star
from ffgg.suite import random_client


def constants(**kw):
    base = dict(l_phi=0.0, l_cocoercive=2.0, mu_w=1.0, l_ww=1.0, l_cross=1.0, lip_a=1.0, lip_c=1.0)
    base.update(kw)
    return ClientConstants(**base)


class TestSpec:
    def test_rejects_bad_kind(self):
        with pytest.raises(InvalidInputError):
            LocalSolveSpec("newton")

    def test_rejects_nonpositive_stepsize(self):
        with pytest.raises(InvalidInputError):
            LocalSolveSpec("gd", 3, gamma_w=0.0)

    def test_rejects_negative_tau(self):
        with pytest.raises(InvalidInputError):
            LocalSolveSpec("cg", -1)

    def test_explicit_w0(self, t1_client):
        res = solve_local(t1_client, [0.0], LocalSolveSpec("gd", 1, 0.5, w0=(1.0,)))
        np.testing.assert_allclose(res.w, [2.0])

    def test_explicit_w0_wrong_length(self, t1_client):
        with pytest.raises(InvalidInputError):
            solve_local(t1_client, [0.0], LocalSolveSpec("gd", 1, 0.5, w0=(1.0, 2.0)))


class TestSolveLocal:
    def test_gd_one_step(self, t1_client):
        res = solve_local(t1_client, [0.0], LocalSolveSpec("gd", 1, 1.0))
        np.testing.assert_allclose(res.w, [3.0])
        assert res.iterations == 1 and res.grad_norm == pytest.approx(0.0)

    def test_cg_one_step(self, t1_client):
        np.testing.assert_allclose(solve_local(t1_client, [0.0], LocalSolveSpec("cg", 1)).w, [3.0])

    def test_gd_two_steps(self, t1_client):
        np.testing.assert_allclose(solve_local(t1_client, [0.0], LocalSolveSpec("gd", 2, 0.5)).w, [2.25])

    def test_exact(self, t1_client):
        np.testing.assert_allclose(solve_local(t1_client, [1.0], LocalSolveSpec()).w, [3.0])

    def test_random_start_reproducible(self, t1_client):
        spec = LocalSolveSpec("gd", 1, 0.1, w0="random", seed=4)
        a = solve_local(t1_client, [0.0], spec, stream=(2,)).w
        b = solve_local(t1_client, [0.0], spec, stream=(2,)).w
        c = solve_local(t1_client, [0.0], spec, stream=(3,)).w
        assert a.tobytes() == b.tobytes() and a.tobytes() != c.tobytes()

    def test_dist_bound_present_and_valid(self):
        c = random_client(3)
        theta = np.ones(c.d_theta)
        res = solve_local(c, theta, LocalSolveSpec("gd", 5))
        assert res.dist_bound is not None
        assert np.linalg.norm(res.w - w_star(c, theta)) <= res.dist_bound * (1 + 1e-10)

    def test_no_dist_bound_for_large_step(self, t1_client):
        assert solve_local(t1_client, [0.0], LocalSolveSpec("gd", 1, 5.0)).dist_bound is None

    def test_cg_rejects_pseudo_huber(self):
        with pytest.raises(InvalidInputError):
            solve_local(random_client(1, "pseudo_huber"), np.zeros(random_client(1).d_theta), LocalSolveSpec("cg", 2))

    @settings(max_examples=200, deadline=None)
    @given(st.integers(0, 100_000), st.sampled_from([1, 5, 25]))
    def test_gd_contraction(self, seed, tau):
        c = random_client(seed)
        btb = c.b_mat.T @ c.b_mat
        eig = np.linalg.eigvalsh(btb)
        theta = np.random.default_rng(seed).standard_normal(c.d_theta)
        w_opt = w_star(c, theta)
        res = solve_local(c, theta, LocalSolveSpec("gd", tau, 1.0 / eig[-1]))
        factor = max(1.0 - max(eig[0], 0.0) / eig[-1], 0.0) ** tau
        assert np.linalg.norm(res.w - w_opt) ** 2 <= factor * np.linalg.norm(w_opt) ** 2 * (1 + 1e-10) + 1e-24

    @settings(max_examples=60, deadline=None)
    @given(st.integers(0, 100_000))
    def test_cg_finite_termination(self, seed):
        c = random_client(seed)
        theta = np.random.default_rng(seed).standard_normal(c.d_theta)
        res = solve_local(c, theta, LocalSolveSpec("cg", c.d_w))
        assert res.grad_norm <= 1e-8 * (1 + np.linalg.norm(c.y))
        # w* is the min-norm solution; CG from zero stays in range(B^T) and lands on it
        assert np.linalg.norm(res.w - w_star(c, theta)) <= 1e-8

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 100_000))
    def test_gd_gradient_nonincreasing(self, seed):
        c = random_client(seed)
        theta = np.random.default_rng(seed).standard_normal(c.d_theta)
        norms = [solve_local(c, theta, LocalSolveSpec("gd", t)).grad_norm for t in range(0, 12)]
        assert all(b <= a * (1 + 1e-10) + 1e-14 for a, b in zip(norms, norms[1:]))


class TestCohort:
    @pytest.mark.parametrize("spec", [
        LocalSolveSpec(), LocalSolveSpec("gd", 7), LocalSolveSpec("gd", 3, 0.2), LocalSolveSpec("cg", 2),
        LocalSolveSpec("gd", 4, w0="random", seed=3),
    ])
    def test_batched_matches_per_client(self, spec):
        ps = generate_uniform(4, 30, 5, 3, 2)
        theta = np.linspace(-1, 1, 5)
        ids = [0, 2, 3]
        batched = solve_cohort(ps, ids, theta, spec, stream=(9,))
        for row, i in zip(batched, ids):
            single = solve_local(ps.clients[i], theta, spec, stream=(9, i)).w
            np.testing.assert_allclose(row, single, atol=1e-12)

    def test_solver_reuse(self):
        ps = generate_uniform(3, 20, 4, 2, 0)
        solver = CohortSolver(ps, LocalSolveSpec("gd", 5))
        a = solver([0, 1, 2], np.ones(4))
        b = solver([0, 1, 2], np.ones(4))
        assert a.tobytes() == b.tobytes()

    def test_pseudo_huber_fallback(self):
        c = random_client(2, "pseudo_huber")
        ps = ProblemSet((c, c))
        out = solve_cohort(ps, [0, 1], np.zeros(c.d_theta), LocalSolveSpec())
        assert np.linalg.norm(grad_w(c, np.zeros(c.d_theta), out[0])) <= 1e-10 * (1 + np.linalg.norm(c.y))


class TestPropagator:
    def test_weights_zero_eigenvalue(self):
        np.testing.assert_allclose(gd_weights(np.array([0.0, 1.0]), 0.5, 3), [1.5, 1 - 0.125])

    def test_weights_unstable_branch(self):
        # step * lam = 3 leaves the stable range; (1 - (1 - 3)^2) / 1 = -3
        np.testing.assert_allclose(gd_weights(np.array([1.0]), 3.0, 2), [-3.0])

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 10_000), st.integers(0, 40))
    def test_matches_explicit_loop(self, seed, k):
        rng = np.random.default_rng(seed)
        m = rng.standard_normal((6, 4))
        h = m.T @ m
        step = 1.0 / np.linalg.eigvalsh(h)[-1]
        g0 = rng.standard_normal(4)
        w = np.zeros(4)
        for _ in range(k):
            w = w - step * (h @ w + g0)
        vals, vecs = np.linalg.eigh(h)
        prop = gd_propagator(vals[None], vecs[None], np.array([step]), k)[0]
        np.testing.assert_allclose(w, -prop @ g0, atol=1e-12 * (1 + np.abs(w).max()))


class TestRecommendTau:
    def test_decoupled(self):
        assert recommend_tau(constants(lip_a=0.0, lip_c=0.0), 2.0, 1.0, 100, 1.0) == 0

    def test_worked_example(self):
        cc = constants()
        assert recommend_tau(cc, 2.0, 1.0, math.e**2, 1.0) == 4

    def test_zero_mu_w(self):
        with pytest.raises(InvalidInputError):
            recommend_tau(constants(mu_w=0.0), 2.0, 1.0, 100, 1.0)

    def test_invalid_inputs(self):
        with pytest.raises(InvalidInputError):
            recommend_tau(constants(), 2.0, 1.0, 100, 0.0)

    @settings(max_examples=50, deadline=None)
    @given(st.floats(0.1, 10), st.floats(0.1, 10), st.floats(0.1, 5), st.floats(0.05, 1), st.integers(1, 10**6))
    def test_logarithmic_growth(self, la, lc, lcross, mu, r):
        cc = constants(lip_a=la, lip_c=lc, l_cross=lcross, mu_w=mu, l_ww=1.0)
        t1 = recommend_tau(cc, 2.0, 1.0, r, 1.0)
        t2 = recommend_tau(cc, 2.0, 1.0, 2 * r, 1.0)
        assert t1 <= t2 <= t1 + math.ceil(2 * (1.0 / mu) * math.log(2)) + 1
