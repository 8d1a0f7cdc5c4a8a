import numpy as np
import pytest

from ffgg.problem import ProblemSet, QuadClient


def scalar_client(a, y_theta, y_w, penalty="quadratic"):
    """``A = col(a, 0)``, ``B = col(0, 1)``, ``y = (y_theta, y_w)``, no regularizer."""
    return QuadClient(
        np.array([[a], [0.0]]), np.array([[0.0], [1.0]]), np.array([y_theta, y_w]),
        np.zeros((0, 1)), np.zeros(0), penalty=penalty,
    )


@pytest.fixture
def t1_client():
    # F(theta) = theta - 2, w* = 3
    return scalar_client(1.0, 2.0, 3.0)


@pytest.fixture
def t1(t1_client):
    return ProblemSet((t1_client,), planted_theta_star=np.array([2.0]))


@pytest.fixture
def t2():
    # F1 = theta - 2, F2 = 4 theta - 4, mean root 6/5
    return ProblemSet((scalar_client(1.0, 2.0, 3.0), scalar_client(2.0, 2.0, 5.0)))


@pytest.fixture
def t3():
    # F1 = theta - 2, F2 = 4 theta - 8, shared root 2
    return ProblemSet((scalar_client(1.0, 2.0, 3.0), scalar_client(2.0, 4.0, 5.0)), planted_theta_star=np.array([2.0]))


def t3_duplicated(copies):
    return ProblemSet(
        tuple(scalar_client(1.0, 2.0, 3.0) if i % 2 == 0 else scalar_client(2.0, 4.0, 5.0) for i in range(copies)),
        planted_theta_star=np.array([2.0]),
    )
