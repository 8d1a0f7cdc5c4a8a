import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import t3_duplicated
from ffgg.byzantine import (
    Aggregator,
    Attack,
    ByzConfig,
    StochasticModel,
    aggregate,
    alie_z,
    apply_attack,
    byz_admissibility,
    check_theorem9,
    estimate_c,
    run_br_ffgg,
)
from ffgg.local import LocalSolveSpec
from ffgg.methods import ServerConfig, run_ffgg
from ffgg.problem import InvalidInputError, generate_consistent, problem_l

ROBUST = [
    Aggregator("cw_median"),
    Aggregator("trimmed_mean", k=1),
    Aggregator("geometric_median"),
    Aggregator("bucketing", bucket_size=2),
]

vectors = st.integers(0, 10_000).map(lambda s: np.random.default_rng(s).standard_normal((7, 3)))


class TestValidation:
    def test_byz_fraction(self):
        with pytest.raises(InvalidInputError):
            ByzConfig(4, frozenset({0, 1}))
        with pytest.raises(InvalidInputError):
            ByzConfig(3, frozenset({3}))
        assert ByzConfig(5, frozenset({1, 4})).g_count == 3

    def test_aggregator(self):
        with pytest.raises(InvalidInputError):
            Aggregator("krum")
        with pytest.raises(InvalidInputError):
            Aggregator("bucketing", inner=Aggregator("bucketing"))
        with pytest.raises(InvalidInputError):
            aggregate(Aggregator("trimmed_mean", k=2), np.zeros((4, 2)))
        with pytest.raises(InvalidInputError):
            aggregate(Aggregator(), np.zeros((0, 2)))

    def test_attack(self):
        with pytest.raises(InvalidInputError):
            Attack("label_flip")
        with pytest.raises(InvalidInputError):
            Attack("sign_flip", kappa=math.inf)
        with pytest.raises(InvalidInputError):
            Attack("shift_to")

    def test_stochastic(self):
        with pytest.raises(InvalidInputError):
            StochasticModel(0.5)


class TestAggregators:
    pts = np.array([[0.0, 0.0], [1.0, 1.0], [100.0, -100.0]])

    def test_cw_median_example(self):
        np.testing.assert_array_equal(aggregate(Aggregator("cw_median"), self.pts), [1.0, 0.0])

    def test_trimmed_mean_example(self):
        np.testing.assert_array_equal(aggregate(Aggregator("trimmed_mean", k=1), self.pts), [1.0, 0.0])

    def test_mean_example(self):
        np.testing.assert_allclose(aggregate(Aggregator(), self.pts), [101 / 3, -33.0])

    def test_geometric_median_collinear(self):
        x = np.array([[0.0], [1.0], [10.0]])
        assert aggregate(Aggregator("geometric_median"), x)[0] == pytest.approx(1.0, abs=1e-8)

    def test_bucket_size_one_is_inner(self):
        x = np.random.default_rng(0).standard_normal((6, 3))
        np.testing.assert_array_equal(aggregate(Aggregator("bucketing", bucket_size=1), x, (3,)),
                                      aggregate(Aggregator("cw_median"), x))

    @pytest.mark.parametrize("agg", ROBUST + [Aggregator()], ids=lambda a: a.label)
    @settings(max_examples=30, deadline=None)
    @given(x=vectors, seed=st.integers(0, 1000))
    def test_permutation_invariant(self, agg, x, seed):
        perm = np.random.default_rng(seed).permutation(len(x))
        np.testing.assert_allclose(aggregate(agg, x[perm], (5,)), aggregate(agg, x, (5,)), atol=1e-9)

    @pytest.mark.parametrize("agg", ROBUST + [Aggregator()], ids=lambda a: a.label)
    @settings(max_examples=30, deadline=None)
    @given(x=vectors, shift=st.lists(st.floats(-50, 50), min_size=3, max_size=3))
    def test_translation_equivariant(self, agg, x, shift):
        t = np.array(shift)
        np.testing.assert_allclose(aggregate(agg, x + t, (5,)), aggregate(agg, x, (5,)) + t, atol=1e-7)

    def test_bucketing_deterministic_in_seed(self):
        x = np.random.default_rng(1).standard_normal((9, 2))
        agg = Aggregator("bucketing", bucket_size=2)
        assert aggregate(agg, x, (1, 2)).tobytes() == aggregate(agg, x, (1, 2)).tobytes()


class TestAttacks:
    good = np.array([[1.0], [3.0]])

    def test_sign_flip(self):
        assert [v.tolist() for v in apply_attack(Attack("sign_flip"), self.good, 2)] == [[-2.0], [-2.0]]

    def test_ipm_zero(self):
        assert np.all(apply_attack(Attack("ipm", epsilon=0.0), self.good, 1)[0] == 0.0)

    def test_alie_zero_is_mean(self):
        np.testing.assert_array_equal(apply_attack(Attack("alie", z=0.0), self.good, 1)[0], [2.0])

    def test_alie_default_scale(self):
        # M = 10, B = 2: s = 4, Phi^{-1}(0.6)
        assert alie_z(10, 2) == pytest.approx(0.2533471, abs=1e-6)

    def test_no_byzantine(self):
        assert apply_attack(Attack("gauss"), self.good, 0) == []

    def test_shift_to_length(self):
        with pytest.raises(InvalidInputError):
            apply_attack(Attack("shift_to", target=(1.0, 2.0)), self.good, 1)

    def test_gauss_seeded(self):
        a = apply_attack(Attack("gauss"), self.good, 2, (4,))
        b = apply_attack(Attack("gauss"), self.good, 2, (4,))
        assert np.array_equal(np.array(a), np.array(b))


class TestStochastic:
    @settings(max_examples=50, deadline=None)
    @given(st.floats(1.0, 9.0), st.integers(0, 1000), st.integers(0, 50))
    def test_surely_bounded(self, rho, seed, r):
        xi = StochasticModel(rho, seed).factors(20, r)
        assert np.all(xi * xi <= rho * (1 + 1e-12))

    def test_unbiased(self):
        xi = StochasticModel(4.0, 1).factors(200_000, 0)
        assert abs(xi.mean() - 1.0) < 0.01


class TestRunBR:
    def test_no_byzantine_mean_matches_ffgg(self):
        ps = generate_consistent(5, 30, 6, 3, 0)
        cfg = ServerConfig(1.0 / problem_l(ps), 15, ps.m_clients)
        br = run_br_ffgg(ps, ByzConfig(5), Aggregator(), Attack(), StochasticModel(), cfg)
        plain = run_ffgg(ps, LocalSolveSpec(), cfg)
        assert br.thetas.tobytes() == plain.thetas.tobytes()

    def test_population_mismatch(self, t3):
        with pytest.raises(InvalidInputError):
            run_br_ffgg(t3, ByzConfig(4, frozenset({0})), Aggregator(), Attack(), StochasticModel(),
                        ServerConfig(0.1, 1, 2))

    def test_median_survives_where_mean_breaks(self):
        # 10 good clients (F = theta - 2 or 4 theta - 8) plus 2 sign flippers at slots 3 and 8
        ps = t3_duplicated(10)
        byz = ByzConfig(12, frozenset({3, 8}))
        cfg = ServerConfig(0.1, 30, 10, theta0=(3.0,))
        atk = Attack("sign_flip", kappa=10.0)
        med = run_br_ffgg(ps, byz, Aggregator("cw_median"), atk, StochasticModel(), cfg, theta_star=[2.0])
        mean = run_br_ffgg(ps, byz, Aggregator(), atk, StochasticModel(), cfg, theta_star=[2.0])
        d_med, d_mean = med.column("dist2"), mean.column("dist2")
        assert np.all(np.diff(d_med) < 0)
        assert d_mean[-1] >= 100 * d_mean[0]
        assert check_theorem9(med, 1.0, 0.1).holds
        assert not check_theorem9(mean, 1.0, 0.1).holds

    def test_constant_columns(self, t3):
        traj = run_br_ffgg(t3, ByzConfig(2), Aggregator("cw_median"), Attack(), StochasticModel(),
                           ServerConfig(0.1, 2, 2))
        header = traj.csv_text().splitlines()[0].split(",")
        assert {"aggregator", "attack", "delta"} <= set(header)


class TestEstimateC:
    def test_mean_is_unbounded_median_is_not(self):
        c_mean = estimate_c(Aggregator(), 0.1, 20, 5, trials=5)
        c_med = estimate_c(Aggregator("cw_median"), 0.1, 20, 5, trials=5)
        assert c_mean > 100 * c_med and math.isfinite(c_med)

    def test_deterministic(self):
        agg = Aggregator("bucketing")
        assert estimate_c(agg, 0.1, 20, 3, trials=4, seed=2) == estimate_c(agg, 0.1, 20, 3, trials=4, seed=2)

    def test_delta_zero_warns_for_non_mean(self):
        with pytest.warns(UserWarning):
            estimate_c(Aggregator("cw_median"), 0.0, 10, 3, trials=2)

    def test_rejects_bad_delta(self):
        with pytest.raises(InvalidInputError):
            estimate_c(Aggregator(), 0.5, 10, 3)


class TestAdmissibility:
    def test_worked_example(self):
        adm = byz_admissibility(1.0, 1.0, 1.0, 1.0, 11, 1.0)
        assert adm.delta_max == pytest.approx(5 / 11)
        # gamma_max = 1 / (4 (L + 2 c delta S)) with delta S = 1/2
        assert adm.gamma_max == pytest.approx(1 / 8)

    def test_no_similarity_gap(self):
        adm = byz_admissibility(1.0, 2.0, 0.0, 1.0, 5, 1.0)
        assert adm.delta_max == math.inf and adm.gamma_max == pytest.approx(1 / 8)

    def test_rejects_bad_inputs(self):
        with pytest.raises(InvalidInputError):
            byz_admissibility(1.0, 1.0, 1.0, 1.0, 1, 1.0)
        with pytest.raises(InvalidInputError):
            byz_admissibility(1.0, 1.0, 1.0, 0.5, 5, 1.0)

    @settings(max_examples=50, deadline=None)
    @given(st.floats(0.01, 1), st.floats(1, 10), st.floats(0, 5), st.floats(1, 4), st.integers(2, 50))
    def test_monotone_in_rho(self, mu, big_l, l_sim, rho, g):
        a = byz_admissibility(mu, big_l, l_sim, rho, g, 1.0)
        b = byz_admissibility(mu, big_l, l_sim, rho + 1, g, 1.0)
        assert b.delta_max <= a.delta_max
