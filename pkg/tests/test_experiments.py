import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ffgg.experiments import (
    RUNNERS,
    ProblemCfg,
    RunConfig,
    _byz_ids,
    _jsonable,
    config_hash,
    default_config,
    risk_argmin_oracle,
)
from ffgg.problem import expected_risk, generate_uniform, solve_root, without_regularizer


class TestConfig:
    @pytest.mark.parametrize("experiment", sorted(RUNNERS))
    def test_defaults_validate_and_roundtrip(self, experiment):
        cfg = default_config(experiment)
        again = RunConfig.model_validate(cfg.model_dump(mode="json", by_alias=True))
        assert config_hash(again) == config_hash(cfg)

    def test_hash_changes_with_content(self):
        a = RunConfig(experiment="tau_sweep")
        b = RunConfig(experiment="tau_sweep", seeds=[1])
        assert config_hash(a) != config_hash(b)

    def test_problem_seed_defaults_to_run_seed(self):
        assert ProblemCfg(m_clients=2, n=10, d_theta=3, d_w=2).build(5).seed == 5
        assert ProblemCfg(m_clients=2, n=10, d_theta=3, d_w=2, seed=1).build(5).seed == 1

    def test_jsonable_non_finite(self):
        assert _jsonable({"x": math.inf, "y": [np.float64(1.5), np.int64(2)]}) == {"x": "inf", "y": [1.5, 2]}


class TestByzIds:
    @settings(max_examples=50, deadline=None)
    @given(st.integers(3, 60), st.integers(0, 20))
    def test_spread_and_count(self, m_total, b):
        b = min(b, (m_total - 1) // 2)
        ids = _byz_ids(m_total, b)
        assert len(ids) == b and all(0 <= i < m_total for i in ids)


class TestRiskOracle:
    @pytest.mark.parametrize("seed", range(3))
    def test_matches_root_and_is_a_minimum(self, seed):
        ps = without_regularizer(generate_uniform(3, 25, 4, 2, seed))
        theta = risk_argmin_oracle(ps)
        assert np.linalg.norm(theta - solve_root(ps)) <= 1e-8 * (1 + np.linalg.norm(theta))
        rng = np.random.default_rng(seed)
        base = expected_risk(ps, theta)
        for _ in range(20):
            assert expected_risk(ps, theta + 1e-3 * rng.standard_normal(4)) >= base
