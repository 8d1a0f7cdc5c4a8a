"""Discrete-event simulation of asynchronous FFGG.

Clients compute at the server iterate they read when they started. The
server applies whichever update finishes first, then a fresh client starts
at the new iterate. Time is virtual; server iterations are counted in
application order.
"""

from __future__ import annotations

import heapq
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from ._rng import make_rng
from .local import LocalSolveSpec, cohort_deltas, solve_cohort
from .methods import MetricsLog, Trajectory, Verdict, _prefix_check
from .problem import InvalidInputError, ProblemSet

DELAY_KINDS = ("fixed", "uniform_int", "per_client_period")


class IncompleteTraceError(ValueError):
    """The trace lacks the records needed to rebuild virtual iterates."""


@dataclass(frozen=True)
class DelayModel:
    """Compute durations of client jobs.

    ``fixed``: every job takes ``value``. ``uniform_int``: an integer drawn
    uniformly from ``[lo, hi]`` with ``seed``. ``per_client_period``: client
    ``m`` always takes ``periods[m]``.
    """

    kind: str
    value: float = 1.0
    lo: int = 1
    hi: int = 1
    seed: int = 0
    periods: tuple = ()

    def __post_init__(self):
        if self.kind not in DELAY_KINDS:
            raise InvalidInputError(f"unknown delay model {self.kind!r}")
        if self.kind == "fixed" and not self.value > 0:
            raise InvalidInputError("fixed delay must be positive")
        if self.kind == "uniform_int" and not 1 <= self.lo <= self.hi:
            raise InvalidInputError("uniform_int needs 1 <= lo <= hi")
        if self.kind == "per_client_period":
            periods = tuple(float(p) for p in self.periods)
            if not periods or min(periods) <= 0:
                raise InvalidInputError("periods must be positive")
            object.__setattr__(self, "periods", periods)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "value": self.value, "lo": self.lo, "hi": self.hi,
                "seed": self.seed, "periods": list(self.periods)}


@dataclass(frozen=True)
class AsyncConfig:
    gamma_theta: float
    iterations: int
    active_clients: int
    pool_size: Optional[int] = None
    sampling_seed: int = 0
    theta0: Optional[tuple] = None
    spec: LocalSolveSpec = field(default_factory=LocalSolveSpec)

    def __post_init__(self):
        if not self.gamma_theta > 0:
            raise InvalidInputError("gamma_theta must be positive")
        if self.iterations < 0 or self.active_clients < 1:
            raise InvalidInputError("need iterations >= 0 and active_clients >= 1")
        if self.pool_size is not None and self.pool_size < self.active_clients:
            raise InvalidInputError("active_clients must not exceed pool_size")
        if self.theta0 is not None:
            object.__setattr__(self, "theta0", tuple(float(v) for v in np.ravel(self.theta0)))

    def to_dict(self) -> dict:
        return {
            "gamma_theta": self.gamma_theta,
            "iterations": self.iterations,
            "active_clients": self.active_clients,
            "pool_size": self.pool_size,
            "sampling_seed": self.sampling_seed,
            "theta0": None if self.theta0 is None else list(self.theta0),
            "spec": self.spec.to_dict(),
        }


@dataclass
class AppliedUpdate:
    r: int
    client: int
    delay: int
    finish_time: float
    update: np.ndarray


@dataclass
class AsyncTrace:
    """Event-level record of an asynchronous run.

    ``active_sets[r]`` is the set of clients in flight before iteration ``r``
    (one more entry than applied updates);
    ``prev_map[(m, r)]`` is ``Prev(m, r)``, the last iteration ``j < r`` at
    which ``m`` was sampled (``-1`` for clients of the initial set), so
    ``m`` is computing at ``thetas[prev_map[(m, r)] + 1]``. ``sampled[r]`` is
    the client started after iteration ``r``.
    """

    thetas: np.ndarray
    applied: list
    active_sets: list
    prev_map: dict
    sampled: list
    initial_clients: list
    gamma_theta: float
    tau_max_observed: int
    spec: LocalSolveSpec
    config_echo: dict
    f_norm2: list = field(default_factory=list)
    virtual_thetas: Optional[np.ndarray] = None
    metrics: Optional[Trajectory] = None

    @property
    def iterations(self) -> int:
        return len(self.applied)

    def jsonl_text(self) -> str:
        lines = []
        for a in self.applied:
            rec = {"r": a.r, "j_r": a.client, "d_jr": a.delay, "finish_time": a.finish_time,
                   "f_norm2": self.f_norm2[a.r + 1] if self.f_norm2 else None}
            lines.append(json.dumps(rec))
        return "".join(line + "\n" for line in lines)

    def write_jsonl(self, path) -> None:
        Path(path).write_text(self.jsonl_text(), encoding="utf-8", newline="\n")


def _duration(dm: DelayModel, client: int, rng) -> float:
    if dm.kind == "fixed":
        return float(dm.value)
    if dm.kind == "uniform_int":
        return float(rng.integers(dm.lo, dm.hi + 1))
    if client >= len(dm.periods):
        raise InvalidInputError(f"no period given for client {client}")
    return dm.periods[client]


def run_async(ps: ProblemSet, cfg: AsyncConfig, dm: DelayModel, theta_star=None):
    """Simulate asynchronous FFGG.

    The returned trace carries a per-iteration metrics trajectory in the
    synchronous CSV schema as ``trace.metrics``.
    """
    pool = cfg.pool_size if cfg.pool_size is not None else cfg.active_clients
    if pool > ps.m_clients:
        raise InvalidInputError(f"pool_size {pool} exceeds M={ps.m_clients}")
    theta = np.zeros(ps.d_theta) if cfg.theta0 is None else np.array(cfg.theta0, dtype=float)
    if theta.shape != (ps.d_theta,):
        raise InvalidInputError("theta0 has the wrong length")
    sample_rng = make_rng(cfg.sampling_seed)
    delay_rng = make_rng(dm.seed, 1)
    spec = cfg.spec
    steps_per_job = spec.steps()

    def start(client: int, read_iter: int, now: float, theta_read: np.ndarray):
        w = solve_cohort(ps, [client], theta_read, spec, (read_iter,))
        upd = cohort_deltas(ps, [client], theta_read, w)[0]
        finish = now + _duration(dm, client, delay_rng)
        heapq.heappush(heap, (finish, client, read_iter, upd))

    heap: list = []
    initial = sorted(int(i) for i in sample_rng.choice(pool, size=cfg.active_clients, replace=False))
    for m in initial:
        start(m, 0, 0.0, theta)
    last_sampled = {m: -1 for m in initial}

    log = MetricsLog(ps, theta_star)
    log.record(theta, 0)
    applied, active_sets, sampled = [], [], []
    prev_map: dict = {}
    in_flight = set(initial)
    tau_max = 0
    steps = 0
    for r in range(cfg.iterations):
        active_sets.append(frozenset(in_flight))
        for m in in_flight:
            prev_map[(m, r)] = last_sampled[m]
        finish, client, read_iter, upd = heapq.heappop(heap)
        delay = r - read_iter
        tau_max = max(tau_max, delay + 1)
        theta = theta - cfg.gamma_theta * upd
        steps += steps_per_job
        applied.append(AppliedUpdate(r, client, delay, finish, upd))
        log.record(theta, steps)
        in_flight.discard(client)
        free = [m for m in range(pool) if m not in in_flight]
        new = int(free[int(sample_rng.integers(len(free)))])
        sampled.append(new)
        last_sampled[new] = r
        in_flight.add(new)
        start(new, r + 1, finish, theta)
    active_sets.append(frozenset(in_flight))
    for m in in_flight:
        prev_map[(m, cfg.iterations)] = last_sampled[m]

    echo = {"method": "async_ffgg", "async": cfg.to_dict(), "delay": dm.to_dict(),
            "server": {"gamma_theta": cfg.gamma_theta}}
    traj = log.trajectory("async_ffgg", echo)
    trace = AsyncTrace(
        thetas=traj.thetas,
        applied=applied,
        active_sets=active_sets,
        prev_map=prev_map,
        sampled=sampled,
        initial_clients=initial,
        gamma_theta=cfg.gamma_theta,
        tau_max_observed=tau_max,
        spec=spec,
        config_echo=echo,
        f_norm2=[m.f_norm2 for m in traj.per_round],
    )
    trace.virtual_thetas = virtual_iterates(trace, ps, cfg.gamma_theta)
    trace.metrics = traj
    return trace


def _ops(ps: ProblemSet, theta: np.ndarray) -> np.ndarray:
    return ps.operators(theta)


def virtual_iterates(trace: AsyncTrace, ps: ProblemSet, gamma_theta: float) -> np.ndarray:
    """Rebuild the virtual sequence
    ``hat0 = theta^0 - gamma sum_{m in C^0} F_m(theta^0)`` and
    ``hat^{r+1} = hat^r - gamma F_{m_r}(theta^{r+1})``, where ``m_r`` starts
    computing at ``theta^{r+1}``.
    """
    n_it = trace.iterations
    if (len(trace.sampled) < n_it or not trace.initial_clients or len(trace.thetas) < n_it + 1
            or len(trace.active_sets) < n_it + 1):
        raise IncompleteTraceError("trace is missing sampled-client records")
    thetas = trace.thetas
    ops0 = _ops(ps, thetas[0])
    acc = np.zeros(ps.d_theta)
    for m in sorted(trace.initial_clients):
        acc = acc + ops0[m]
    hats = [thetas[0] - gamma_theta * acc]
    for r in range(n_it):
        m = trace.sampled[r]
        hats.append(hats[-1] - gamma_theta * _ops(ps, thetas[r + 1])[m])
    return np.array(hats)


def check_virtual_identity(trace: AsyncTrace, ps: ProblemSet, gamma_theta: float):
    """Check ``theta^r - hat^r = gamma sum_{m in C^r} F_m(theta^{Prev(m,r)+1})`` at every ``r``.

    Returns:
        ``(holds, max_abs_err)``. With inexact local solves the identity is
        not expected to hold; the error then measures the inexactness.
    """
    hats = virtual_iterates(trace, ps, gamma_theta)
    cache: dict = {}

    def ops_at(i):
        if i not in cache:
            cache[i] = _ops(ps, trace.thetas[i])
        return cache[i]

    worst = 0.0
    for r in range(trace.iterations + 1):
        acc = np.zeros(ps.d_theta)
        for m in sorted(trace.active_sets[r]):
            acc = acc + ops_at(trace.prev_map[(m, r)] + 1)[m]
        lhs = trace.thetas[r] - hats[r]
        worst = max(worst, float(np.max(np.abs(lhs - gamma_theta * acc))))
    return worst <= 1e-10, worst


def recommend_async_stepsize(big_l: float, m_active: int, tau_max: int) -> float:
    """``1 / (2 L sqrt(2 M tau_max))``."""
    if not (big_l > 0 and m_active > 0 and tau_max > 0):
        raise InvalidInputError("all inputs must be positive")
    return 1.0 / (2.0 * big_l * math.sqrt(2.0 * m_active * tau_max))


def check_theorem8(trace: AsyncTrace, ps: ProblemSet, big_l: float, gamma_theta: float, theta_star,
                   rel_tol: float = 1e-12) -> Verdict:
    """Prefix check of ``min_{r<R} ||F(theta^r)||^2 <= 2 L ||hat^0 - theta*||^2 / (gamma R)``."""
    hats = virtual_iterates(trace, ps, gamma_theta)
    d0 = hats[0] - np.asarray(theta_star, dtype=float)
    min_f = np.minimum.accumulate(np.array(trace.f_norm2, dtype=float))
    return _prefix_check(min_f, 2.0 * big_l * float(d0 @ d0), gamma_theta, rel_tol)
