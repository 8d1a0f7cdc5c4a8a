"""Experiment configs, runners and reports behind the command line."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
import platform
from pathlib import Path
from typing import Dict, List, Literal, Optional, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator

from . import __version__
from .asynchrony import (
    AsyncConfig,
    DelayModel,
    check_theorem8,
    check_virtual_identity,
    recommend_async_stepsize,
    run_async,
)
from .byzantine import (
    Aggregator,
    Attack,
    ByzConfig,
    StochasticModel,
    byz_admissibility,
    check_theorem9,
    estimate_c,
    run_br_ffgg,
)
from .local import LocalSolveSpec, recommend_tau
from .methods import (
    BaselineConfig,
    ServerConfig,
    Trajectory,
    check_theorem1,
    check_theorem7,
    run_baseline,
    run_ffgg,
)
from .problem import (
    ProblemSet,
    client_constants,
    estimate_mu_lsim,
    generate_consistent,
    generate_uniform,
    load_problem,
    problem_l,
    solve_root,
    without_regularizer,
)

EXPERIMENTS = ("tau_sweep", "method_compare", "async", "byzantine", "theorem_checks")


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class ProblemCfg(_Strict):
    """Instance generator. ``seed=None`` uses each run seed as the instance seed."""

    generator: Literal["uniform", "consistent"] = "uniform"
    m_clients: int = Field(8, ge=1)
    n: int = Field(1000, ge=1)
    d_theta: int = Field(100, ge=1)
    d_w: int = Field(50, ge=1)
    seed: Optional[int] = None
    file: Optional[str] = None

    def build(self, run_seed: int) -> ProblemSet:
        if self.file is not None:
            return load_problem(self.file)
        seed = run_seed if self.seed is None else self.seed
        gen = generate_uniform if self.generator == "uniform" else generate_consistent
        return gen(self.m_clients, self.n, self.d_theta, self.d_w, seed)


class LocalCfg(_Strict):
    kind: Literal["exact", "gd", "cg"] = "exact"
    tau: int = Field(0, ge=0)
    gamma_w: Optional[float] = Field(None, gt=0)
    w0: Literal["zero", "random"] = "zero"
    seed: int = 0

    def spec(self) -> LocalSolveSpec:
        return LocalSolveSpec(self.kind, self.tau, self.gamma_w, self.w0, self.seed)


class ServerCfg(_Strict):
    """``gamma_theta=None`` means ``gamma_scale / L``."""

    gamma_theta: Optional[float] = Field(None, gt=0)
    gamma_scale: float = Field(1.0, gt=0)
    rounds: int = Field(200, ge=0)
    cohort_size: Optional[int] = Field(None, ge=1)
    sampling_seed: int = 0

    def build(self, ps: ProblemSet, big_l: float, seed_offset: int = 0) -> ServerConfig:
        gamma = self.gamma_theta if self.gamma_theta is not None else self.gamma_scale / big_l
        cohort = self.cohort_size if self.cohort_size is not None else ps.m_clients
        return ServerConfig(gamma, self.rounds, cohort, self.sampling_seed + seed_offset)


class TauSweepCfg(_Strict):
    taus: List[int] = [1, 5, 10, 20, 30, 40]
    solver: Literal["gd", "cg"] = "cg"
    floor_rel: float = Field(1e-12, ge=0)
    target_rel: float = Field(1e-12, gt=0)


class MethodCompareCfg(_Strict):
    taus: List[int] = [100, 200, 500]
    lam: float = Field(0.1, gt=0)
    l2gd_rule: Literal["literal", "inverse"] = "literal"
    min_win_fraction: float = Field(0.8, ge=0, le=1)


class DelayCfg(_Strict):
    kind: Literal["fixed", "uniform_int", "per_client_period"] = "fixed"
    value: float = Field(1.0, gt=0)
    lo: int = Field(1, ge=1)
    hi: int = Field(1, ge=1)
    seed: int = 0
    periods: List[float] = []

    def build(self) -> DelayModel:
        return DelayModel(self.kind, self.value, self.lo, self.hi, self.seed, tuple(self.periods))


class AsyncScenarioCfg(_Strict):
    name: str
    active_clients: int = Field(ge=1)
    pool_size: Optional[int] = Field(None, ge=1)
    delay: DelayCfg = DelayCfg()
    tau_max: int = Field(ge=1)
    iterations: int = Field(ge=0)


class AsyncCfg(_Strict):
    scenarios: List[AsyncScenarioCfg] = [
        AsyncScenarioCfg(name="tau1", active_clients=1, pool_size=16, tau_max=1, iterations=1000),
        AsyncScenarioCfg(
            name="tau8", active_clients=8, pool_size=8, tau_max=8, iterations=3000,
            delay=DelayCfg(kind="per_client_period", periods=[1.0] * 8),
        ),
        AsyncScenarioCfg(
            name="tau64", active_clients=8, pool_size=8, tau_max=64, iterations=8000,
            delay=DelayCfg(kind="per_client_period", periods=[1.0] * 7 + [9.0]),
        ),
    ]
    identity_iterations: int = Field(500, ge=1)
    residual_target: float = Field(1e-6, gt=0)


class AggCfg(_Strict):
    kind: Literal["mean", "cw_median", "trimmed_mean", "geometric_median", "bucketing"] = "mean"
    k: int = Field(0, ge=0)
    bucket_size: int = Field(2, ge=1)
    inner: Optional[Literal["mean", "cw_median", "trimmed_mean", "geometric_median"]] = None

    def build(self) -> Aggregator:
        inner = Aggregator(self.inner, k=self.k) if self.inner is not None else None
        return Aggregator(self.kind, k=self.k, bucket_size=self.bucket_size, inner=inner)


class AttackCfg(_Strict):
    kind: Literal["none", "sign_flip", "gauss", "alie", "ipm", "shift_to"] = "none"
    kappa: float = 1.0
    sigma: float = 1.0
    z: Optional[float] = None
    epsilon: float = 0.1
    target: List[float] = []

    def build(self) -> Attack:
        return Attack(self.kind, self.kappa, self.sigma, self.z, self.epsilon, tuple(self.target))


class ByzantineCfg(_Strict):
    """Byzantine suite on one instance; run seeds drive bucketing and noise."""

    b_count: int = Field(2, ge=0)
    aggregators: List[AggCfg] = [AggCfg(kind="bucketing", bucket_size=2, inner="cw_median"), AggCfg(kind="mean")]
    attacks: List[AttackCfg] = [
        AttackCfg(kind="sign_flip", kappa=10.0),
        AttackCfg(kind="alie"),
        AttackCfg(kind="ipm", epsilon=0.1),
    ]
    rho_in: float = Field(1.0, ge=1)
    c_trials: int = Field(100, ge=1)
    mu_samples: int = Field(200, ge=1)
    mean_ratio: float = Field(100.0, gt=0)


class ThmCfg(_Strict):
    rounds: int = Field(200, ge=1)
    theorem7: bool = True


class RunConfig(_Strict):
    experiment: Literal["tau_sweep", "method_compare", "async", "byzantine", "theorem_checks"]
    problem: ProblemCfg = ProblemCfg()
    server: ServerCfg = ServerCfg()
    local: LocalCfg = LocalCfg()
    tau_sweep: TauSweepCfg = TauSweepCfg()
    method_compare: MethodCompareCfg = MethodCompareCfg()
    async_: AsyncCfg = Field(AsyncCfg(), alias="async")
    byzantine: ByzantineCfg = ByzantineCfg()
    theorem_checks: ThmCfg = ThmCfg()
    output_dir: Optional[str] = None
    seeds: List[int] = [0]

    model_config = ConfigDict(extra="forbid", frozen=True, populate_by_name=True)

    @field_validator("seeds")
    @classmethod
    def _unique(cls, v):
        if len(set(v)) != len(v):
            raise ValueError("seeds must be distinct")
        return v


def default_config(experiment: str) -> RunConfig:
    """Acceptance-scale configuration of each experiment."""
    if experiment == "tau_sweep":
        return RunConfig(experiment="tau_sweep", server=ServerCfg(rounds=3000), seeds=[0, 1, 2, 3, 4])
    if experiment == "method_compare":
        return RunConfig(experiment="method_compare", server=ServerCfg(rounds=1000), seeds=[0, 1, 2, 3, 4])
    if experiment == "async":
        return RunConfig(
            experiment="async",
            problem=ProblemCfg(generator="consistent", m_clients=16, n=40, d_theta=5, d_w=3),
            seeds=[0],
        )
    if experiment == "byzantine":
        return RunConfig(
            experiment="byzantine",
            problem=ProblemCfg(generator="consistent", m_clients=18, n=40, d_theta=5, d_w=3, seed=0),
            server=ServerCfg(rounds=300),
            seeds=list(range(10)),
        )
    if experiment == "theorem_checks":
        return RunConfig(
            experiment="theorem_checks",
            problem=ProblemCfg(generator="consistent"),
            seeds=list(range(10)),
        )
    raise ValueError(f"unknown experiment {experiment!r}")


def config_hash(cfg: RunConfig) -> str:
    text = json.dumps(cfg.model_dump(mode="json", by_alias=True), sort_keys=True)
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


# ---------------------------------------------------------------------------
# results
# ---------------------------------------------------------------------------


class SeriesResult:
    """Per-seed trajectories of one curve, plus the metric the report plots."""

    def __init__(self, name: str, figure: str, metric: str):
        self.name = name
        self.figure = figure
        self.metric = metric
        self.runs: Dict[int, Trajectory] = {}
        self.jsonl: Dict[int, str] = {}


class ExperimentResult:
    def __init__(self, cfg: RunConfig):
        self.cfg = cfg
        self.series: Dict[str, SeriesResult] = {}
        self.verdicts: List[dict] = []
        self.notes: Dict[str, object] = {}

    def add(self, name: str, figure: str, metric: str, seed: int, traj: Trajectory) -> None:
        if name not in self.series:
            self.series[name] = SeriesResult(name, figure, metric)
        self.series[name].runs[seed] = traj

    def verdict(self, name: str, holds: bool, **detail) -> None:
        self.verdicts.append({"check": name, "holds": bool(holds), **{k: _jsonable(v) for k, v in detail.items()}})

    @property
    def all_hold(self) -> bool:
        return all(v["holds"] for v in self.verdicts)


def _jsonable(v):
    if isinstance(v, (np.floating, float)):
        v = float(v)
        return v if math.isfinite(v) else repr(v)
    if isinstance(v, np.integer):
        return int(v)
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    if isinstance(v, dict):
        return {str(k): _jsonable(x) for k, x in v.items()}
    return v


# ---------------------------------------------------------------------------
# runners
# ---------------------------------------------------------------------------


def run_tau_sweep(cfg: RunConfig) -> ExperimentResult:
    res = ExperimentResult(cfg)
    sw = cfg.tau_sweep
    taus = sorted(sw.taus)
    for seed in cfg.seeds:
        ps = cfg.problem.build(seed)
        big_l = problem_l(ps)
        scfg = cfg.server.build(ps, big_l)
        finals = []
        for tau in taus:
            spec = LocalSolveSpec(sw.solver, tau, cfg.local.gamma_w)
            traj = run_ffgg(ps, spec, scfg)
            res.add(f"tau_{tau}", "tau_sweep", "min_f_norm2", seed, traj)
            finals.append(traj.per_round[-1].min_f_norm2 / traj.per_round[0].f_norm2)
        clipped = [max(f, sw.floor_rel) for f in finals]
        ordered = all(clipped[i + 1] <= clipped[i] for i in range(len(clipped) - 1))
        res.verdict(f"tau_sweep_monotone_seed{seed}", ordered, relative_final=dict(zip(taus, finals)))
        res.verdict(f"tau_sweep_reaches_floor_seed{seed}", finals[-1] <= sw.target_rel,
                    tau=taus[-1], relative_final=finals[-1], target=sw.target_rel)
    return res


def run_method_compare(cfg: RunConfig) -> ExperimentResult:
    res = ExperimentResult(cfg)
    mc = cfg.method_compare
    wins = {tau: 0 for tau in mc.taus}
    for seed in cfg.seeds:
        ps = cfg.problem.build(seed)
        big_l = problem_l(ps)
        scfg = cfg.server.build(ps, big_l)
        for tau in mc.taus:
            finals = {}
            traj = run_ffgg(ps, LocalSolveSpec("gd", tau, cfg.local.gamma_w), scfg)
            res.add(f"tau{tau}_ffgg", f"compare_tau{tau}", "f_norm2", seed, traj)
            finals["ffgg"] = traj.per_round[-1].f_norm2
            for kind in ("scaffold", "local_gd", "l2gd"):
                bcfg = BaselineConfig(kind, tau, lam=mc.lam, l2gd_rule=mc.l2gd_rule)
                traj = run_baseline(ps, bcfg, scfg)
                res.add(f"tau{tau}_{kind}", f"compare_tau{tau}", "f_norm2", seed, traj)
                finals[kind] = traj.per_round[-1].f_norm2
            best_other = min(v for k, v in finals.items() if k != "ffgg")
            won = finals["ffgg"] < best_other
            wins[tau] += int(won)
            res.verdict(f"compare_tau{tau}_seed{seed}", won, finals=finals)
    need = math.ceil(mc.min_win_fraction * len(cfg.seeds) - 1e-9)
    for tau in mc.taus:
        res.verdict(f"compare_tau{tau}_wins", wins[tau] >= need, wins=wins[tau], needed=need)
    return res


def run_async_suite(cfg: RunConfig) -> ExperimentResult:
    res = ExperimentResult(cfg)
    ac = cfg.async_
    for seed in cfg.seeds:
        ps = cfg.problem.build(seed)
        big_l = problem_l(ps)
        theta_star = ps.planted_theta_star
        spec = cfg.local.spec()
        for sc in ac.scenarios:
            gamma = recommend_async_stepsize(big_l, sc.active_clients, sc.tau_max)
            acfg = AsyncConfig(gamma, sc.iterations, sc.active_clients, sc.pool_size, seed, None, spec)
            trace = run_async(ps, acfg, sc.delay.build())
            res.add(f"async_{sc.name}", "async", "f_norm2", seed, trace.metrics)
            res.series[f"async_{sc.name}"].jsonl[seed] = trace.jsonl_text()
            f = np.array(trace.f_norm2)
            rel = float(np.min(f) / f[0]) if f[0] > 0 else 0.0
            res.verdict(f"async_{sc.name}_delay_bound_seed{seed}", trace.tau_max_observed <= sc.tau_max,
                        observed=trace.tau_max_observed, target=sc.tau_max)
            if theta_star is not None and spec.exact:
                v8 = check_theorem8(trace, ps, big_l, gamma, theta_star)
                res.verdict(f"async_{sc.name}_theorem8_seed{seed}", v8.holds,
                            worst_margin=v8.worst_margin, worst_prefix=v8.worst_prefix)
            res.verdict(f"async_{sc.name}_residual_seed{seed}", rel <= ac.residual_target,
                        relative_min_f_norm2=rel, target=ac.residual_target)
            short = AsyncConfig(gamma, ac.identity_iterations, sc.active_clients, sc.pool_size, seed, None, spec)
            short_trace = run_async(ps, short, sc.delay.build())
            ok, err = check_virtual_identity(short_trace, ps, gamma)
            res.verdict(f"async_{sc.name}_virtual_identity_seed{seed}", ok or not spec.exact, max_abs_err=err,
                        diagnostic_only=not spec.exact)
    return res


def _byz_ids(m_total: int, b_count: int) -> frozenset:
    if b_count == 0:
        return frozenset()
    step = m_total / b_count
    return frozenset(int(math.floor(i * step + step / 2)) for i in range(b_count))


def run_byzantine_suite(cfg: RunConfig) -> ExperimentResult:
    res = ExperimentResult(cfg)
    bc = cfg.byzantine
    base_seed = cfg.problem.seed if cfg.problem.seed is not None else 0
    ps = cfg.problem.build(base_seed)
    theta_star = ps.planted_theta_star
    big_l = problem_l(ps)
    m_total = ps.m_clients + bc.b_count
    byz = ByzConfig(m_total, _byz_ids(m_total, bc.b_count))
    mu, l_sim = estimate_mu_lsim(ps, theta_star, n_samples=bc.mu_samples, seed=base_seed)
    aggs = [a.build() for a in bc.aggregators]
    robust = [a for a in aggs if a.kind != "mean"]
    ref = robust[0] if robust else aggs[0]
    c_hat = estimate_c(ref, byz.delta, m_total, ps.d_theta, trials=bc.c_trials, seed=base_seed) if byz.delta > 0 else 1.0
    adm = byz_admissibility(mu, big_l, l_sim, bc.rho_in, byz.g_count, max(c_hat, 1e-12), delta=byz.delta)
    gamma = cfg.server.gamma_theta if cfg.server.gamma_theta is not None else min(adm.gamma_max, 1.0 / big_l)
    res.notes.update({"mu_hat": mu, "l_sim_hat": l_sim, "c_hat": c_hat, "delta": byz.delta,
                      "delta_max": adm.delta_max, "gamma_max": adm.gamma_max, "gamma_theta": gamma,
                      "constants_are_estimates": True})
    finals: Dict[tuple, float] = {}
    for agg in aggs:
        for atk_cfg in bc.attacks:
            atk = atk_cfg.build()
            name = f"{agg.label}x{atk.label}"
            trajs = []
            for seed in cfg.seeds:
                scfg = ServerConfig(gamma, cfg.server.rounds, ps.m_clients, seed)
                traj = run_br_ffgg(ps, byz, agg, atk, StochasticModel(bc.rho_in, seed), scfg)
                res.add(name, "byzantine", "dist2", seed, traj)
                trajs.append(traj)
            avg_final = float(np.mean([t.per_round[-1].dist2 for t in trajs]))
            finals[(agg.label, atk.label)] = avg_final
            if agg.kind != "mean":
                v9 = check_theorem9(trajs, mu, gamma)
                res.verdict(f"theorem9_{name}", v9.holds, worst_margin=v9.worst_margin,
                            worst_round=v9.worst_prefix, final_dist2=avg_final)
    for atk_cfg in bc.attacks:
        if atk_cfg.kind != "sign_flip":
            continue
        for agg in robust:
            mean_final = finals.get(("mean", "sign_flip"))
            if mean_final is None:
                continue
            rob = finals[(agg.label, "sign_flip")]
            ratio = mean_final / rob if rob > 0 else math.inf
            res.verdict(f"mean_vs_{agg.label}_sign_flip", ratio >= bc.mean_ratio, ratio=ratio,
                        mean_final=mean_final, robust_final=rob)
    return res


def theorem7_tau(ps: ProblemSet, big_l: float, rounds: int, theta0=None) -> int:
    """Largest per-client tau recommended for the inexact-solve rate at ``gamma_w = 1 / l_ww``."""
    theta_star = ps.planted_theta_star
    theta0 = np.zeros(ps.d_theta) if theta0 is None else np.asarray(theta0, dtype=float)
    r0 = max(float(np.linalg.norm(theta0 - theta_star)), 1e-300)
    taus = []
    for c in ps.clients:
        cc = client_constants(c, theta_star)
        taus.append(recommend_tau(cc, big_l, 1.0 / cc.l_ww, rounds, r0))
    return max(taus)


def risk_argmin_oracle(ps: ProblemSet) -> np.ndarray:
    """Minimizer of the post-fine-tuning risk by stacked least squares.

    Projects out ``range(B_m)`` with a QR basis, independently of the
    pseudoinverse route used by :func:`solve_root`.
    """
    rows, rhs = [], []
    for c in ps.clients:
        q, _ = np.linalg.qr(c.b_mat)
        rows.append(c.a_mat - q @ (q.T @ c.a_mat))
        rhs.append(c.y - q @ (q.T @ c.y))
    return np.linalg.lstsq(np.vstack(rows), np.concatenate(rhs), rcond=None)[0]


def run_theorem_checks(cfg: RunConfig) -> ExperimentResult:
    res = ExperimentResult(cfg)
    tc = cfg.theorem_checks
    for seed in cfg.seeds:
        ps = cfg.problem.build(seed)
        if ps.planted_theta_star is None:
            raise ValueError("theorem checks need a consistent instance")
        big_l = problem_l(ps)
        theta_star = ps.planted_theta_star
        scfg = ServerConfig(cfg.server.gamma_scale / big_l, tc.rounds, ps.m_clients, seed)
        traj = run_ffgg(ps, LocalSolveSpec("exact"), scfg)
        res.add("theorem1_exact", "theorems", "min_f_norm2", seed, traj)
        v = check_theorem1(traj, big_l, theta_star)
        res.verdict(f"theorem1_seed{seed}", v.holds, worst_margin=v.worst_margin, worst_prefix=v.worst_prefix)
        if tc.theorem7:
            tau = theorem7_tau(ps, big_l, tc.rounds)
            traj7 = run_ffgg(ps, LocalSolveSpec("gd", tau), scfg)
            res.add("theorem7_gd", "theorems", "min_f_norm2", seed, traj7)
            v7 = check_theorem7(traj7, big_l, theta_star)
            res.verdict(f"theorem7_seed{seed}", v7.holds, tau=tau, worst_margin=v7.worst_margin,
                        worst_prefix=v7.worst_prefix)
        bare = without_regularizer(ps)
        root = solve_root(bare)
        err = float(np.linalg.norm(root - risk_argmin_oracle(bare)))
        tol = 1e-8 * (1.0 + float(np.linalg.norm(root)))
        res.verdict(f"theorem5_seed{seed}", err <= tol, error=err, tolerance=tol)
    return res


RUNNERS = {
    "tau_sweep": run_tau_sweep,
    "method_compare": run_method_compare,
    "async": run_async_suite,
    "byzantine": run_byzantine_suite,
    "theorem_checks": run_theorem_checks,
}


def run_experiment(cfg: RunConfig) -> ExperimentResult:
    return RUNNERS[cfg.experiment](cfg)


# ---------------------------------------------------------------------------
# output
# ---------------------------------------------------------------------------


def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8", newline="\n")


def environment_echo(cfg: RunConfig) -> dict:
    return {
        "package_version": __version__,
        "numpy_version": np.__version__,
        "python_version": platform.python_version(),
        "config_sha256": config_hash(cfg),
    }


def write_result(res: ExperimentResult, out_dir) -> Path:
    """Write per-seed CSV/JSON files, a manifest, verdicts and a summary."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = {
        "experiment": res.cfg.experiment,
        "environment": environment_echo(res.cfg),
        "config": res.cfg.model_dump(mode="json", by_alias=True),
        "series": [],
        "notes": _jsonable(res.notes),
    }
    for s in res.series.values():
        files = []
        for seed in sorted(s.runs):
            rel = Path(s.name) / f"seed_{seed}.csv"
            s.runs[seed].write(out / rel)
            files.append(rel.as_posix())
            if seed in s.jsonl:
                _write(out / s.name / f"seed_{seed}.jsonl", s.jsonl[seed])
        manifest["series"].append({"name": s.name, "figure": s.figure, "metric": s.metric, "files": files})
    _write(out / "manifest.json", json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    _write(out / "verdicts.json", json.dumps(res.verdicts, indent=2) + "\n")
    write_report(out)
    return out


class ReportError(Exception):
    """The run directory is incomplete; ``missing`` lists every absent file."""

    def __init__(self, missing: List[str]):
        super().__init__("missing files:\n" + "\n".join(missing))
        self.missing = missing


def _read_metric(path: Path, metric: str) -> np.ndarray:
    with path.open(encoding="utf-8", newline="") as fh:
        rows = list(csv.DictReader(fh))
    return np.array([float(r[metric]) if r[metric] != "" else math.nan for r in rows])


def _num(v: float) -> str:
    return repr(float(v))


def write_report(run_dir) -> List[Path]:
    """Reduce per-seed CSVs to long-format figure data and a markdown summary.

    Output is a pure function of the run directory. Each figure gets
    ``report/<figure>.csv`` with columns ``series,round,value,lo,hi`` where
    ``value`` is the median over seeds and ``lo``/``hi`` the min/max band.
    """
    run_dir = Path(run_dir)
    manifest_path = run_dir / "manifest.json"
    if not manifest_path.exists():
        raise ReportError([str(manifest_path)])
    manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    missing = [str(run_dir / f) for s in manifest["series"] for f in s["files"] if not (run_dir / f).exists()]
    if missing:
        raise ReportError(missing)
    figures: Dict[str, list] = {}
    summary_rows = []
    for s in manifest["series"]:
        if not s["files"]:
            continue
        curves = [_read_metric(run_dir / f, s["metric"]) for f in s["files"]]
        length = min(len(c) for c in curves)
        stack = np.array([c[:length] for c in curves])
        med = np.median(stack, axis=0)
        lo = np.min(stack, axis=0)
        hi = np.max(stack, axis=0)
        figures.setdefault(s["figure"], []).append((s["name"], med, lo, hi))
        summary_rows.append((s["figure"], s["name"], s["metric"], len(curves), length - 1, med[-1], lo[-1], hi[-1]))
    written = []
    for fig, series in sorted(figures.items()):
        buf = io.StringIO()
        buf.write("series,round,value,lo,hi\n")
        for name, med, lo, hi in series:
            for r in range(len(med)):
                buf.write(f"{name},{r},{_num(med[r])},{_num(lo[r])},{_num(hi[r])}\n")
        path = run_dir / "report" / f"{fig}.csv"
        _write(path, buf.getvalue())
        written.append(path)
    lines = [f"# {manifest['experiment']}", "",
             f"config sha256: `{manifest['environment']['config_sha256']}`", "",
             "| figure | series | metric | seeds | rounds | final median | final min | final max |",
             "|---|---|---|---|---|---|---|---|"]
    for row in summary_rows:
        fig, name, metric, n, rounds, med, lo, hi = row
        lines.append(f"| {fig} | {name} | {metric} | {n} | {rounds} | {med:.3e} | {lo:.3e} | {hi:.3e} |")
    verdict_path = run_dir / "verdicts.json"
    if verdict_path.exists():
        verdicts = json.loads(verdict_path.read_text(encoding="utf-8"))
        if verdicts:
            lines += ["", "| check | holds |", "|---|---|"]
            lines += [f"| {v['check']} | {'yes' if v['holds'] else 'NO'} |" for v in verdicts]
    path = run_dir / "report" / "summary.md"
    _write(path, "\n".join(lines) + "\n")
    written.append(path)
    return written
