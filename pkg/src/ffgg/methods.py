"""Synchronous server loops: FFGG, Local FFGG and the federated baselines."""

from __future__ import annotations

import io
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import NamedTuple, Optional, Sequence

import numpy as np

from ._rng import make_rng
from .local import CohortSolver, bmv, take, LocalSolveSpec, cohort_deltas, gd_displacement, gd_propagator
from .problem import (
    InvalidInputError,
    ProblemSet,
    UnsupportedError,
    grad_theta,
    grad_w,
    joint_smoothness,
    mean_operator,
    post_tuning_risk,
)

CSV_COLUMNS = ("round", "f_norm2", "min_f_norm2", "dist2", "risk", "local_steps_used")


@dataclass(frozen=True)
class ServerConfig:
    gamma_theta: float
    rounds: int
    cohort_size: int
    sampling_seed: int = 0
    theta0: Optional[tuple] = None

    def __post_init__(self):
        if not self.gamma_theta > 0 or not math.isfinite(self.gamma_theta):
            raise InvalidInputError("gamma_theta must be positive and finite")
        if int(self.rounds) != self.rounds or self.rounds < 0:
            raise InvalidInputError("rounds must be a nonnegative integer")
        if int(self.cohort_size) != self.cohort_size or self.cohort_size < 1:
            raise InvalidInputError("cohort_size must be at least 1")
        if self.theta0 is not None:
            object.__setattr__(self, "theta0", tuple(float(v) for v in np.ravel(self.theta0)))

    def start(self, ps: ProblemSet) -> np.ndarray:
        if self.cohort_size > ps.m_clients:
            raise InvalidInputError(f"cohort_size {self.cohort_size} exceeds M={ps.m_clients}")
        if self.theta0 is None:
            return np.zeros(ps.d_theta)
        theta = np.array(self.theta0, dtype=float)
        if theta.shape != (ps.d_theta,):
            raise InvalidInputError(f"theta0 has length {theta.size}, expected {ps.d_theta}")
        return theta

    def to_dict(self) -> dict:
        d = asdict(self)
        d["theta0"] = None if self.theta0 is None else list(self.theta0)
        return d


@dataclass(frozen=True)
class MetricsRecord:
    round: int
    f_norm2: float
    min_f_norm2: float
    dist2: Optional[float]
    risk: Optional[float]
    local_steps_used: int


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (int, np.integer)) and not isinstance(v, bool):
        return str(int(v))
    if isinstance(v, str):
        return v
    return repr(float(v))


@dataclass
class Trajectory:
    """Server iterates ``theta^0 .. theta^R`` with one metrics record per iterate.

    ``extra`` holds additional per-round CSV columns (name -> list of values)
    and ``constant_columns`` columns that repeat one value on every row.
    """

    thetas: np.ndarray
    per_round: list
    method_tag: str
    config_echo: dict
    extra: dict = field(default_factory=dict)
    constant_columns: dict = field(default_factory=dict)

    @property
    def rounds(self) -> int:
        return len(self.per_round) - 1

    def column(self, name: str) -> np.ndarray:
        if name in self.extra:
            return np.array(self.extra[name], dtype=float)
        vals = [getattr(m, name) for m in self.per_round]
        return np.array([np.nan if v is None else v for v in vals], dtype=float)

    def csv_text(self) -> str:
        names = list(CSV_COLUMNS) + list(self.extra) + list(self.constant_columns)
        buf = io.StringIO()
        buf.write(",".join(names) + "\n")
        for i, m in enumerate(self.per_round):
            row = [getattr(m, c) for c in CSV_COLUMNS]
            row += [self.extra[k][i] for k in self.extra]
            row += list(self.constant_columns.values())
            buf.write(",".join(_fmt(v) for v in row) + "\n")
        return buf.getvalue()

    def write(self, csv_path) -> None:
        """Write the metrics CSV and a sidecar ``.json`` with the config echo."""
        csv_path = Path(csv_path)
        csv_path.parent.mkdir(parents=True, exist_ok=True)
        csv_path.write_text(self.csv_text(), encoding="utf-8", newline="\n")
        side = {"method_tag": self.method_tag, "config_echo": self.config_echo}
        csv_path.with_suffix(".json").write_text(
            json.dumps(side, indent=2, sort_keys=True) + "\n", encoding="utf-8", newline="\n"
        )


class MetricsLog:
    """Accumulates per-iterate metrics for a problem set."""

    def __init__(self, ps: ProblemSet, theta_star=None):
        self.ps = ps
        if theta_star is None:
            theta_star = ps.planted_theta_star
        self.theta_star = None if theta_star is None else np.asarray(theta_star, dtype=float)
        self.records: list = []
        self.thetas: list = []
        self._best = math.inf

    def record(self, theta: np.ndarray, local_steps: int) -> float:
        theta = np.array(theta, dtype=float)
        with np.errstate(over="ignore", invalid="ignore"):
            f2 = math.inf
            if np.all(np.isfinite(theta)):
                f = mean_operator(self.ps, theta)
                f2 = float(f @ f)
            if not math.isfinite(f2):
                f2 = math.inf
            dist2 = None
            if self.theta_star is not None:
                diff = theta - self.theta_star
                dist2 = float(diff @ diff) if math.isfinite(f2) else math.inf
            risk = None
            if self.ps.quadratic:
                risk = post_tuning_risk(self.ps, theta) if math.isfinite(f2) else math.inf
        self._best = min(self._best, f2)
        self.records.append(MetricsRecord(len(self.records), f2, self._best, dist2, risk, int(local_steps)))
        self.thetas.append(theta)
        return f2

    def trajectory(self, tag: str, echo: dict, **kw) -> Trajectory:
        return Trajectory(np.array(self.thetas), self.records, tag, echo, **kw)


def sample_cohort(m_clients: int, size: int, seed: int, round_index: int) -> list:
    """Uniform cohort without replacement, sorted; full participation uses no randomness."""
    if size >= m_clients:
        return list(range(m_clients))
    rng = make_rng(seed, round_index)
    return sorted(int(i) for i in rng.choice(m_clients, size=size, replace=False))


def ordered_mean(rows: np.ndarray) -> np.ndarray:
    """Mean of the rows, summed in row order."""
    acc = np.zeros(rows.shape[1])
    for row in rows:
        acc = acc + row
    return acc / rows.shape[0]


def run_ffgg(ps: ProblemSet, spec: LocalSolveSpec, cfg: ServerConfig, theta_star=None) -> Trajectory:
    """Fine-tuning followed by a global gradient step.

    Each round the sampled clients fine-tune ``w`` from scratch at the
    current ``theta``, send ``grad_theta f_m(theta, w_m)``, and the server
    steps along the average.
    """
    theta = cfg.start(ps)
    solver = CohortSolver(ps, spec)
    log = MetricsLog(ps, theta_star)
    steps = 0
    log.record(theta, steps)
    for r in range(cfg.rounds):
        ids = sample_cohort(ps.m_clients, cfg.cohort_size, cfg.sampling_seed, r)
        ws = solver(ids, theta, (r,))
        deltas = cohort_deltas(ps, ids, theta, ws)
        theta = theta - cfg.gamma_theta * ordered_mean(deltas)
        steps += spec.steps() * len(ids)
        log.record(theta, steps)
    echo = {"method": "ffgg", "server": cfg.to_dict(), "local": spec.to_dict()}
    return log.trajectory("ffgg", echo)


def run_local_ffgg(
    ps: ProblemSet,
    cfg: ServerConfig,
    k_inner: int,
    gamma_w: Optional[float],
    init_spec: LocalSolveSpec,
    theta_star=None,
) -> Trajectory:
    """Alternating local updates of ``w`` and ``theta`` followed by displacement averaging.

    The server applies the mean displacement without a further stepsize.
    ``gamma_w=None`` uses ``1 / ||B_m^T B_m||`` per client.
    """
    if k_inner < 1:
        raise InvalidInputError("k_inner must be at least 1")
    if gamma_w is not None and not gamma_w > 0:
        raise InvalidInputError("gamma_w must be positive")
    theta = cfg.start(ps)
    log = MetricsLog(ps, theta_star)
    steps = 0
    log.record(theta, steps)
    quad = ps.quadratic
    solver = CohortSolver(ps, init_spec)
    for r in range(cfg.rounds):
        ids = sample_cohort(ps.m_clients, cfg.cohort_size, cfg.sampling_seed, r)
        ws = solver(ids, theta, (r,))
        thetas = np.tile(theta, (len(ids), 1))
        if quad:
            st = ps.stack
            gw = np.full(len(ids), gamma_w) if gamma_w is not None else 1.0 / take(st.l_ww, ids)
            for _ in range(k_inner):
                gr_w = bmv(take(st.bta, ids), thetas) + bmv(take(st.btb, ids), ws) - take(st.bty, ids)
                ws = ws - gw[:, None] * gr_w
                gr_t = bmv(take(st.g_mat, ids), thetas) + bmv(take(st.e_mat, ids), ws) - take(st.g_vec, ids)
                thetas = thetas - cfg.gamma_theta * gr_t
        else:
            for j, i in enumerate(ids):
                c = ps.clients[i]
                g = gamma_w if gamma_w is not None else 1.0 / float(np.linalg.eigvalsh(c.b_mat.T @ c.b_mat)[-1])
                for _ in range(k_inner):
                    ws[j] = ws[j] - g * grad_w(c, thetas[j], ws[j])
                    thetas[j] = thetas[j] - cfg.gamma_theta * grad_theta(c, thetas[j], ws[j])
        disp = theta[None, :] - thetas
        theta = theta - ordered_mean(disp)
        steps += (init_spec.steps() + k_inner) * len(ids)
        log.record(theta, steps)
    echo = {
        "method": "local_ffgg",
        "server": cfg.to_dict(),
        "k_inner": int(k_inner),
        "gamma_w": gamma_w,
        "init": init_spec.to_dict(),
    }
    return log.trajectory("local_ffgg", echo)


# ---------------------------------------------------------------------------
# baselines
# ---------------------------------------------------------------------------

BASELINES = ("local_gd", "scaffold", "l2gd")
L2GD_RULES = ("literal", "inverse")


@dataclass(frozen=True)
class BaselineConfig:
    """Baseline method settings.

    ``inner_lr=None`` means ``1 / (L_f tau)`` with ``L_f`` the joint smoothness
    constant. ``outer_lr=None`` means 1 for Local GD and 0.5 for Scaffold.
    For L2GD, ``l2gd_rule="literal"`` uses ``max{L_f/(1-p), lambda/p} / (2M)`` as
    the stepsize and ``"inverse"`` uses ``M / (2 max{...})``. ``w_init`` is
    ``"zero"`` or ``"best_response"`` (``w_m*(theta^0)``, averaged over
    clients for the methods with a shared ``w``).
    """

    kind: str
    tau: int
    lam: float = 0.1
    p: Optional[float] = None
    inner_lr: Optional[float] = None
    outer_lr: Optional[float] = None
    l2gd_rule: str = "literal"
    w_init: str = "zero"

    def __post_init__(self):
        if self.kind not in BASELINES:
            raise InvalidInputError(f"unknown baseline {self.kind!r}")
        if self.w_init not in ("zero", "best_response"):
            raise InvalidInputError(f"unknown w_init {self.w_init!r}")
        if int(self.tau) != self.tau or self.tau < 1:
            raise InvalidInputError("tau must be a positive integer")
        if self.kind == "l2gd":
            if not 0 < self.prob < 1:
                raise InvalidInputError("l2gd needs 0 < p < 1")
            if not self.lam > 0:
                raise InvalidInputError("l2gd needs lambda > 0")
            if self.l2gd_rule not in L2GD_RULES:
                raise InvalidInputError(f"unknown l2gd rule {self.l2gd_rule!r}")

    @property
    def prob(self) -> float:
        return self.p if self.p is not None else 1.0 / self.tau

    def to_dict(self) -> dict:
        return asdict(self)


def _joint_grads(st, ids, thetas, ws):
    g_t = bmv(take(st.g_mat, ids), thetas) + bmv(take(st.e_mat, ids), ws) - take(st.g_vec, ids)
    g_w = bmv(take(st.bta, ids), thetas) + bmv(take(st.btb, ids), ws) - take(st.bty, ids)
    return g_t, g_w


def joint_objective(ps: ProblemSet, thetas: np.ndarray, ws: np.ndarray) -> float:
    """``(1/M) sum_m f_m(theta_m, w_m)`` for quadratic clients."""
    st = ps.stack
    x = np.hstack([thetas, ws])
    lin = np.hstack([st.g_vec, st.bty])
    with np.errstate(over="ignore", invalid="ignore"):
        quad = np.sum(x * bmv(ps.joint_hessians, x), axis=1)
        vals = 0.5 * quad - np.einsum("bi,bi->b", lin, x) + ps.joint_consts
        return float(np.sum(vals) / ps.m_clients)


def run_baseline(ps: ProblemSet, bcfg: BaselineConfig, cfg: ServerConfig, theta_star=None) -> Trajectory:
    """Run Local GD, Scaffold or L2GD on the joint problem in ``(theta, w)``.

    Runs of local gradient steps are applied through the closed-form
    propagator of :func:`ffgg.local.gd_propagator`.

    ``f_norm2`` is ``||F(theta)||^2`` at the method's shared (or averaged)
    ``theta``; the extra ``joint_objective`` column is the average loss at
    the method's own ``w``. A run that overflows is marked with ``inf``
    from that round on.
    """
    if not ps.quadratic:
        raise UnsupportedError("baselines need quadratic clients")
    st = ps.stack
    m = ps.m_clients
    l_f = joint_smoothness(ps)
    jvals, jvecs = ps.joint_eigh
    tau = int(bcfg.tau)
    lr = bcfg.inner_lr if bcfg.inner_lr is not None else 1.0 / (l_f * tau)
    theta = cfg.start(ps)
    log = MetricsLog(ps, theta_star)
    joint = []
    echo = {"method": bcfg.kind, "server": cfg.to_dict(), "baseline": bcfg.to_dict(), "l_f": l_f, "inner_lr": lr}
    if bcfg.w_init == "zero":
        w_start = np.zeros((m, ps.d_w))
    else:
        w_start = st.c_vec - bmv(st.d_mat, np.tile(theta, (m, 1)))

    def finish_diverged(steps):
        while len(log.records) < cfg.rounds + 1:
            log.record(np.full(ps.d_theta, np.inf), steps)
            joint.append(math.inf)

    if bcfg.kind in ("local_gd", "scaffold"):
        outer = bcfg.outer_lr if bcfg.outer_lr is not None else (1.0 if bcfg.kind == "local_gd" else 0.5)
        echo["outer_lr"] = outer
        prop = gd_propagator(jvals, jvecs, lr, tau)
        w = ordered_mean(w_start)
        c_glob = np.zeros(ps.d_theta + ps.d_w)
        c_loc = np.zeros((m, ps.d_theta + ps.d_w))
        steps = 0
        log.record(theta, steps)
        joint.append(joint_objective(ps, np.tile(theta, (m, 1)), np.tile(w, (m, 1))))
        for r in range(cfg.rounds):
            ids = sample_cohort(m, cfg.cohort_size, cfg.sampling_seed, r)
            th = np.tile(theta, (len(ids), 1))
            ww = np.tile(w, (len(ids), 1))
            g_t, g_w = _joint_grads(st, ids, th, ww)
            grad0 = np.hstack([g_t, g_w])
            if bcfg.kind == "scaffold":
                grad0 = grad0 + c_glob[None, :] - c_loc[ids]
            disp = -bmv(take(prop, ids), grad0)
            d_theta = disp[:, : ps.d_theta]
            d_w = disp[:, ps.d_theta :]
            if bcfg.kind == "scaffold":
                disp = np.hstack([d_theta, d_w])
                new_loc = c_loc[ids] - c_glob[None, :] - disp / (tau * lr)
                dc = new_loc - c_loc[ids]
                c_loc[ids] = new_loc
                c_glob = c_glob + ordered_mean(dc) * (len(ids) / m)
            theta = theta + outer * ordered_mean(d_theta)
            w = w + outer * ordered_mean(d_w)
            steps += tau * len(ids)
            if not (np.all(np.isfinite(theta)) and np.all(np.isfinite(w))):
                finish_diverged(steps)
                break
            log.record(theta, steps)
            joint.append(joint_objective(ps, np.tile(theta, (m, 1)), np.tile(w, (m, 1))))
    else:
        p = bcfg.prob
        lam = bcfg.lam
        big = max(l_f / (1 - p), lam / p)
        alpha = big / (2 * m) if bcfg.l2gd_rule == "literal" else m / (2 * big)
        echo.update({"alpha": alpha, "p": p, "lambda": lam})
        rng = make_rng(cfg.sampling_seed, 0x12)
        ids = list(range(m))
        th = np.tile(theta, (m, 1))
        ww = w_start.copy()
        steps = 0
        log.record(ordered_mean(th), steps)
        joint.append(joint_objective(ps, th, ww))
        local_coef = alpha / (m * (1 - p))
        avg_coef = alpha * lam / (m * p)
        for _ in range(cfg.rounds):
            streak = int(rng.geometric(p)) - 1
            if streak:
                g_t, g_w = _joint_grads(st, ids, th, ww)
                disp = gd_displacement(jvals, jvecs, np.hstack([g_t, g_w]), local_coef, streak)
                th = th + disp[:, : ps.d_theta]
                ww = ww + disp[:, ps.d_theta :]
                steps += m * streak
            with np.errstate(over="ignore", invalid="ignore"):
                th = th - avg_coef * (th - ordered_mean(th)[None, :])
                ww = ww - avg_coef * (ww - ordered_mean(ww)[None, :])
            if not (np.all(np.isfinite(th)) and np.all(np.isfinite(ww))):
                finish_diverged(steps)
                break
            log.record(ordered_mean(th), steps)
            joint.append(joint_objective(ps, th, ww))
    return log.trajectory(bcfg.kind, echo, extra={"joint_objective": joint})


# ---------------------------------------------------------------------------
# theorem checkers
# ---------------------------------------------------------------------------


class Verdict(NamedTuple):
    """Outcome of a bound check.

    ``worst_margin`` is the smallest ``bound - achieved`` over the checked
    prefixes and ``worst_prefix`` the prefix where it occurs. ``holds``
    allows a relative slack of ``rel_tol`` times the bound.
    """

    holds: bool
    worst_margin: float
    worst_prefix: int


def _prefix_check(min_f: np.ndarray, numerator: float, gamma: float, rel_tol: float) -> Verdict:
    holds = True
    worst, worst_r = math.inf, 0
    for r_pref in range(1, len(min_f)):
        bound = numerator / (gamma * r_pref)
        achieved = min_f[r_pref - 1]
        margin = bound - achieved
        if not margin >= -rel_tol * max(bound, 1e-300):
            holds = False
        if margin < worst:
            worst, worst_r = margin, r_pref
    if worst == math.inf:
        worst = 0.0
    return Verdict(holds, float(worst), worst_r)


def _gamma(traj: Trajectory) -> float:
    return float(traj.config_echo["server"]["gamma_theta"])


def check_theorem1(traj: Trajectory, big_l: float, theta_star, rel_tol: float = 1e-12) -> Verdict:
    """Check ``min_{r<R} ||F(theta^r)||^2 <= L ||theta^0 - theta*||^2 / (gamma R)`` for every prefix ``R``."""
    d0 = traj.thetas[0] - np.asarray(theta_star, dtype=float)
    return _prefix_check(traj.column("min_f_norm2"), big_l * float(d0 @ d0), _gamma(traj), rel_tol)


def check_theorem7(traj: Trajectory, big_l: float, theta_star, rel_tol: float = 1e-12) -> Verdict:
    """Inexact-solve version of :func:`check_theorem1` with a four times looser bound."""
    d0 = traj.thetas[0] - np.asarray(theta_star, dtype=float)
    return _prefix_check(traj.column("min_f_norm2"), 4.0 * big_l * float(d0 @ d0), _gamma(traj), rel_tol)
