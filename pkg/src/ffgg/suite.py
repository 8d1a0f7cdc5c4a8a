"""Acceptance suite: one function per criterion, each returning a verdict."""

from __future__ import annotations

import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List

import numpy as np

from ._rng import make_rng
from .experiments import (
    AsyncCfg,
    AsyncScenarioCfg,
    ByzantineCfg,
    DelayCfg,
    MethodCompareCfg,
    ProblemCfg,
    RunConfig,
    ServerCfg,
    TauSweepCfg,
    ThmCfg,
    default_config,
    risk_argmin_oracle,
    run_experiment,
    theorem7_tau,
    write_result,
)
from .local import LocalSolveSpec
from .methods import ServerConfig, check_theorem1, check_theorem7, run_ffgg
from .problem import (
    QuadClient,
    check_cocoercivity,
    check_sum_cocoercivity,
    client_constants,
    estimate_cocoercivity,
    generate_consistent,
    generate_uniform,
    problem_l,
    solve_root,
    without_regularizer,
)

DESK = dict(m_clients=8, n=1000, d_theta=100, d_w=50)


@dataclass
class CriterionResult:
    number: int
    title: str
    passed: bool
    detail: str
    rows: List[dict] = field(default_factory=list)

    def line(self) -> str:
        return f"[{'PASS' if self.passed else 'FAIL'}] criterion {self.number}: {self.title}: {self.detail}"


def _from_experiment(number: int, title: str, cfg: RunConfig) -> CriterionResult:
    res = run_experiment(cfg)
    failed = [v["check"] for v in res.verdicts if not v["holds"]]
    detail = f"{len(res.verdicts) - len(failed)}/{len(res.verdicts)} checks hold"
    if failed:
        detail += "; failing: " + ", ".join(failed)
    return CriterionResult(number, title, not failed and bool(res.verdicts), detail, res.verdicts)


def criterion_1(seeds=range(20), rounds: int = 200) -> CriterionResult:
    rows = []
    for s in seeds:
        ps = generate_consistent(seed=s, **DESK)
        big_l = problem_l(ps)
        traj = run_ffgg(ps, LocalSolveSpec("exact"), ServerConfig(1.0 / big_l, rounds, ps.m_clients, s))
        v = check_theorem1(traj, big_l, ps.planted_theta_star)
        rows.append({"seed": s, "holds": v.holds, "worst_margin": v.worst_margin, "worst_prefix": v.worst_prefix})
    worst = min(r["worst_margin"] for r in rows)
    ok = all(r["holds"] for r in rows)
    return CriterionResult(1, "exact-solve rate bound", ok, f"{len(rows)} instances, worst relative margin {worst:.3g}", rows)


def criterion_2() -> CriterionResult:
    return _from_experiment(2, "tau sweep ordering and floor", default_config("tau_sweep"))


def criterion_3() -> CriterionResult:
    return _from_experiment(3, "FFGG beats the baselines", default_config("method_compare"))


def criterion_4(seeds=range(10), rounds: int = 200) -> CriterionResult:
    rows = []
    for s in seeds:
        ps = generate_consistent(seed=s, **DESK)
        big_l = problem_l(ps)
        tau = theorem7_tau(ps, big_l, rounds)
        traj = run_ffgg(ps, LocalSolveSpec("gd", tau), ServerConfig(1.0 / big_l, rounds, ps.m_clients, s))
        v = check_theorem7(traj, big_l, ps.planted_theta_star)
        rows.append({"seed": s, "tau": tau, "holds": v.holds, "worst_margin": v.worst_margin,
                     "worst_prefix": v.worst_prefix})
    worst = min(r["worst_margin"] for r in rows)
    ok = all(r["holds"] for r in rows)
    taus = sorted({r["tau"] for r in rows})
    return CriterionResult(4, "inexact-solve rate bound", ok,
                           f"{len(rows)} instances, tau in [{taus[0]}, {taus[-1]}], worst relative margin {worst:.3g}", rows)


def criterion_5() -> CriterionResult:
    return _from_experiment(5, "asynchronous identity, bound and residual", default_config("async"))


def criterion_6() -> CriterionResult:
    return _from_experiment(6, "Byzantine envelope and mean breakdown", default_config("byzantine"))


def criterion_7(seeds=range(20)) -> CriterionResult:
    rows = []
    for s in seeds:
        ps = without_regularizer(generate_uniform(seed=s, **DESK))
        root = solve_root(ps)
        err = float(np.linalg.norm(root - risk_argmin_oracle(ps)))
        tol = 1e-8 * (1.0 + float(np.linalg.norm(root)))
        rows.append({"seed": s, "holds": err <= tol, "error": err, "tolerance": tol})
    worst = max(r["error"] for r in rows)
    return CriterionResult(7, "root minimizes the post-fine-tuning risk", all(r["holds"] for r in rows),
                           f"{len(rows)} instances, worst error {worst:.3g}", rows)


def random_client(seed: int, penalty: str = "quadratic", d_theta=None) -> QuadClient:
    """Gaussian client of random shape; some draws get a rank-deficient ``B`` or no ``H``."""
    rng = make_rng(seed, 77)
    d_theta = int(rng.integers(1, 7)) if d_theta is None else d_theta
    d_w = int(rng.integers(1, 5))
    n = int(rng.integers(d_w + 1, 20))
    b = rng.standard_normal((n, d_w))
    if d_w > 1 and rng.random() < 0.3:
        b[:, -1] = b[:, 0]
    n_phi = 0 if rng.random() < 0.3 else int(rng.integers(1, 6))
    return QuadClient(
        rng.standard_normal((n, d_theta)), b, rng.standard_normal(n),
        rng.standard_normal((n_phi, d_theta)), rng.standard_normal(n_phi),
        penalty=penalty, huber_scale=float(rng.uniform(0.5, 2.0)),
    )


def criterion_8(n_quadratic: int = 50, n_huber: int = 8, n_sums: int = 20, n_pairs: int = 1000) -> CriterionResult:
    rows = []
    for i in range(n_quadratic):
        c = random_client(i)
        l_c = client_constants(c, np.zeros(c.d_theta)).l_cocoercive
        rep = check_cocoercivity(c, l_c, n_pairs=n_pairs, radius=3.0, seed=i)
        rows.append({"case": f"quadratic_{i}", "holds": rep.min_slack >= -1e-10, "min_slack": rep.min_slack})
    for i in range(n_huber):
        c = random_client(1000 + i, penalty="pseudo_huber")
        l_est = 1.1 * estimate_cocoercivity(c, n_pairs=2 * n_pairs, radius=3.0, seed=2 * i)
        rep = check_cocoercivity(c, l_est, n_pairs=n_pairs, radius=3.0, seed=2 * i + 1)
        rows.append({"case": f"pseudo_huber_{i}", "holds": rep.min_slack >= -1e-10, "min_slack": rep.min_slack,
                     "l_estimate": l_est})
    for i in range(n_sums):
        first = random_client(2000 + i)
        second = random_client(3000 + i, d_theta=first.d_theta)
        l_c = max(client_constants(c, np.zeros(c.d_theta)).l_cocoercive for c in (first, second))
        rep = check_sum_cocoercivity(first, second, l_c, n_pairs=n_pairs, radius=3.0, seed=i)
        rows.append({"case": f"sum_{i}", "holds": rep.min_slack >= -1e-10, "min_slack": rep.min_slack})
    worst = min(r["min_slack"] for r in rows)
    return CriterionResult(8, "cocoercivity property suite", all(r["holds"] for r in rows),
                           f"{len(rows)} cases, smallest slack {worst:.3g}", rows)


def determinism_configs() -> Dict[str, RunConfig]:
    """Reduced-scale configs covering every experiment type."""
    small = ProblemCfg(m_clients=4, n=60, d_theta=8, d_w=4)
    small_c = ProblemCfg(generator="consistent", m_clients=4, n=60, d_theta=8, d_w=4)
    return {
        "tau_sweep": RunConfig(experiment="tau_sweep", problem=small, server=ServerCfg(rounds=40),
                               tau_sweep=TauSweepCfg(taus=[1, 3], target_rel=1.0), seeds=[0, 1]),
        "method_compare": RunConfig(experiment="method_compare", problem=small, server=ServerCfg(rounds=30),
                                    method_compare=MethodCompareCfg(taus=[10]), seeds=[0, 1]),
        "async": RunConfig(
            experiment="async", problem=small_c, seeds=[0],
            async_=AsyncCfg(identity_iterations=50, scenarios=[
                AsyncScenarioCfg(name="uniform", active_clients=3, pool_size=4, tau_max=6, iterations=100,
                                 delay=DelayCfg(kind="uniform_int", lo=1, hi=3, seed=4)),
            ]),
        ),
        "byzantine": RunConfig(
            experiment="byzantine", problem=ProblemCfg(generator="consistent", m_clients=8, n=40, d_theta=5, d_w=3),
            server=ServerCfg(rounds=30), seeds=[0, 1],
            byzantine=ByzantineCfg(c_trials=10, mu_samples=20),
        ),
        "theorem_checks": RunConfig(experiment="theorem_checks", problem=small_c,
                                    theorem_checks=ThmCfg(rounds=30), seeds=[0]),
    }


def output_bytes(run_dir: Path) -> Dict[str, bytes]:
    return {p.relative_to(run_dir).as_posix(): p.read_bytes() for p in sorted(run_dir.rglob("*")) if p.is_file()}


def criterion_9() -> CriterionResult:
    rows = []
    with tempfile.TemporaryDirectory() as tmp:
        for name, cfg in determinism_configs().items():
            first = output_bytes(write_result(run_experiment(cfg), Path(tmp) / name / "a"))
            second = output_bytes(write_result(run_experiment(cfg), Path(tmp) / name / "b"))
            csvs = [k for k in first if k.endswith(".csv")]
            same = first == second and bool(csvs)
            rows.append({"experiment": name, "holds": same, "files": len(first), "csv_files": len(csvs)})
    n_files = sum(r["files"] for r in rows)
    return CriterionResult(9, "byte-identical reruns", all(r["holds"] for r in rows),
                           f"{len(rows)} experiment types, {n_files} files compared", rows)


CRITERIA: Dict[int, Callable[[], CriterionResult]] = {
    1: criterion_1,
    2: criterion_2,
    3: criterion_3,
    4: criterion_4,
    5: criterion_5,
    6: criterion_6,
    7: criterion_7,
    8: criterion_8,
    9: criterion_9,
}


def run_suite(numbers=None) -> List[CriterionResult]:
    numbers = sorted(CRITERIA) if numbers is None else numbers
    return [CRITERIA[n]() for n in numbers]
