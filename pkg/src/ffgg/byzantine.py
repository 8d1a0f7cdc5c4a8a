"""Byzantine clients, robust aggregation and Byzantine-robust FFGG."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from statistics import NormalDist
from typing import Optional, Sequence

import numpy as np

from ._rng import make_rng
from .local import LocalSolveSpec, cohort_deltas, solve_cohort
from .methods import MetricsLog, ServerConfig, Trajectory, Verdict, ordered_mean
from .problem import InvalidInputError, ProblemSet

AGGREGATORS = ("mean", "cw_median", "trimmed_mean", "geometric_median", "bucketing")
ATTACKS = ("none", "sign_flip", "gauss", "alie", "ipm", "shift_to")


@dataclass(frozen=True)
class ByzConfig:
    """Population split: ``m_total`` clients of which ``byz_ids`` are Byzantine."""

    m_total: int
    byz_ids: frozenset = frozenset()

    def __post_init__(self):
        ids = frozenset(int(i) for i in self.byz_ids)
        object.__setattr__(self, "byz_ids", ids)
        if any(i < 0 or i >= self.m_total for i in ids):
            raise InvalidInputError("byz_ids must lie in [0, m_total)")
        if self.m_total - len(ids) < 1:
            raise InvalidInputError("at least one good client is required")
        if not self.delta < 0.5:
            raise InvalidInputError(f"Byzantine fraction {self.delta} must be below 1/2")

    @property
    def b_count(self) -> int:
        return len(self.byz_ids)

    @property
    def g_count(self) -> int:
        return self.m_total - self.b_count

    @property
    def delta(self) -> float:
        return self.b_count / self.m_total

    def to_dict(self) -> dict:
        return {"m_total": self.m_total, "byz_ids": sorted(self.byz_ids), "delta": self.delta}


@dataclass(frozen=True)
class Aggregator:
    """Aggregation rule.

    Attributes:
        kind: one of ``AGGREGATORS``.
        k: number trimmed from each side for ``trimmed_mean``.
        tol, max_iter: Weiszfeld stopping rule for ``geometric_median``.
        bucket_size, inner: bucketing parameters; ``inner`` must not itself
            be bucketing.
    """

    kind: str = "mean"
    k: int = 0
    tol: float = 1e-10
    max_iter: int = 1000
    bucket_size: int = 2
    inner: Optional["Aggregator"] = None

    def __post_init__(self):
        if self.kind not in AGGREGATORS:
            raise InvalidInputError(f"unknown aggregator {self.kind!r}")
        if self.kind == "bucketing":
            inner = self.inner if self.inner is not None else Aggregator("cw_median")
            if inner.kind == "bucketing":
                raise InvalidInputError("bucketing cannot wrap bucketing")
            if self.bucket_size < 1:
                raise InvalidInputError("bucket_size must be at least 1")
            object.__setattr__(self, "inner", inner)

    @property
    def label(self) -> str:
        if self.kind == "bucketing":
            return f"bucketing{self.bucket_size}_{self.inner.label}"
        if self.kind == "trimmed_mean":
            return f"trimmed_mean{self.k}"
        return self.kind

    def to_dict(self) -> dict:
        d = {"kind": self.kind, "k": self.k, "tol": self.tol, "max_iter": self.max_iter,
             "bucket_size": self.bucket_size}
        d["inner"] = None if self.inner is None else self.inner.to_dict()
        return d


def _as_matrix(vectors) -> np.ndarray:
    x = np.asarray(vectors, dtype=float)
    if x.ndim != 2 or x.shape[0] == 0:
        raise InvalidInputError("aggregate needs a nonempty list of equal-length vectors")
    return x


def _canonical(x: np.ndarray) -> np.ndarray:
    """Rows sorted lexicographically, so the result ignores input order."""
    return x[np.lexsort(x.T[::-1])]


def aggregate(agg: Aggregator, vectors, seed: Sequence[int] = (0,)) -> np.ndarray:
    """Combine client vectors with the rule ``agg``.

    ``seed`` keys the bucketing permutation; other rules are deterministic.
    """
    x = _as_matrix(vectors)
    n = x.shape[0]
    if agg.kind == "mean":
        return ordered_mean(x)
    if agg.kind == "cw_median":
        return np.median(x, axis=0)
    if agg.kind == "trimmed_mean":
        if 2 * agg.k >= n:
            raise InvalidInputError(f"cannot trim {agg.k} from each side of {n} vectors")
        xs = np.sort(x, axis=0)
        return np.mean(xs[agg.k : n - agg.k], axis=0)
    if agg.kind == "geometric_median":
        z = np.median(x, axis=0)
        for _ in range(agg.max_iter):
            dist = np.linalg.norm(x - z, axis=1)
            wts = 1.0 / np.maximum(dist, 1e-12)
            z_new = (wts @ x) / np.sum(wts)
            step = float(np.linalg.norm(z_new - z))
            z = z_new
            if step <= agg.tol:
                break
        return z
    seed = tuple(seed) if isinstance(seed, (tuple, list)) else (int(seed),)
    perm = make_rng(*seed).permutation(n)
    xs = _canonical(x)[perm]
    means = np.stack([ordered_mean(xs[i : i + agg.bucket_size]) for i in range(0, n, agg.bucket_size)])
    return aggregate(agg.inner, means, seed)


@dataclass(frozen=True)
class Attack:
    """Omniscient attack model.

    ``sign_flip`` sends ``-kappa`` times the good mean, ``gauss`` the good
    mean plus ``N(0, sigma^2 I)``, ``alie`` the good mean plus ``z`` times the
    coordinate-wise standard deviation, ``ipm`` ``-epsilon`` times the good
    mean, ``shift_to`` the fixed vector ``target``. ``none`` sends the good
    mean.
    """

    kind: str = "none"
    kappa: float = 1.0
    sigma: float = 1.0
    z: Optional[float] = None
    epsilon: float = 0.1
    target: tuple = ()

    def __post_init__(self):
        if self.kind not in ATTACKS:
            raise InvalidInputError(f"unknown attack {self.kind!r}")
        for name in ("kappa", "sigma", "epsilon"):
            if not math.isfinite(getattr(self, name)):
                raise InvalidInputError(f"{name} must be finite")
        if self.z is not None and not math.isfinite(self.z):
            raise InvalidInputError("z must be finite")
        object.__setattr__(self, "target", tuple(float(v) for v in self.target))
        if self.kind == "shift_to" and not self.target:
            raise InvalidInputError("shift_to needs a target vector")

    @property
    def label(self) -> str:
        return self.kind

    def to_dict(self) -> dict:
        return {"kind": self.kind, "kappa": self.kappa, "sigma": self.sigma, "z": self.z,
                "epsilon": self.epsilon, "target": list(self.target)}


def alie_z(m_total: int, b_count: int) -> float:
    """Conventional ALIE scale: ``Phi^{-1}((M - s) / M)`` with ``s = floor(M/2 + 1) - B``."""
    s = math.floor(m_total / 2 + 1) - b_count
    q = (m_total - s) / m_total
    if not 0 < q < 1:
        return 0.0
    return NormalDist().inv_cdf(q)


def apply_attack(atk: Attack, good_updates, b_count: int, seed: Sequence[int] = (0,)) -> list:
    """Messages of ``b_count`` Byzantine clients that observe all good updates."""
    good = _as_matrix(good_updates)
    mean = ordered_mean(good)
    if b_count == 0:
        return []
    if atk.kind == "none":
        return [mean.copy() for _ in range(b_count)]
    if atk.kind == "sign_flip":
        return [-atk.kappa * mean for _ in range(b_count)]
    if atk.kind == "ipm":
        return [-atk.epsilon * mean for _ in range(b_count)]
    if atk.kind == "alie":
        z = atk.z if atk.z is not None else alie_z(good.shape[0] + b_count, b_count)
        return [mean + z * np.std(good, axis=0) for _ in range(b_count)]
    if atk.kind == "shift_to":
        target = np.array(atk.target)
        if target.shape != mean.shape:
            raise InvalidInputError("shift_to target has the wrong length")
        return [target.copy() for _ in range(b_count)]
    seed = tuple(seed) if isinstance(seed, (tuple, list)) else (int(seed),)
    rng = make_rng(*seed)
    return [mean + atk.sigma * rng.standard_normal(mean.shape) for _ in range(b_count)]


@dataclass(frozen=True)
class StochasticModel:
    """Multiplicative noise ``g_m = xi F_m`` with ``xi ~ U[1 - a, 1 + a]``.

    ``a = sqrt(rho_in) - 1``, so every sample satisfies
    ``||g_m||^2 <= rho_in ||F_m||^2`` and ``E g_m = F_m``.
    """

    rho_in: float = 1.0
    noise_seed: int = 0

    def __post_init__(self):
        if not self.rho_in >= 1 or not math.isfinite(self.rho_in):
            raise InvalidInputError("rho_in must be a finite number >= 1")

    @property
    def half_width(self) -> float:
        return math.sqrt(self.rho_in) - 1.0

    def factors(self, count: int, round_index: int) -> np.ndarray:
        a = self.half_width
        return make_rng(self.noise_seed, round_index).uniform(1.0 - a, 1.0 + a, size=count)

    def to_dict(self) -> dict:
        return {"rho_in": self.rho_in, "noise_seed": self.noise_seed}


def run_br_ffgg(
    ps: ProblemSet,
    byz: ByzConfig,
    agg: Aggregator,
    atk: Attack,
    sm: StochasticModel,
    cfg: ServerConfig,
    theta_star=None,
) -> Trajectory:
    """Byzantine-robust FFGG with full participation.

    Good clients are the clients of ``ps`` in order and occupy the ids not
    in ``byz.byz_ids``. Metrics use the good-client mean operator.
    """
    if byz.g_count != ps.m_clients:
        raise InvalidInputError(f"ByzConfig has {byz.g_count} good clients, problem has {ps.m_clients}")
    theta = cfg.start(ps)
    log = MetricsLog(ps, theta_star)
    log.record(theta, 0)
    good_ids = list(range(ps.m_clients))
    good_slots = [i for i in range(byz.m_total) if i not in byz.byz_ids]
    byz_slots = sorted(byz.byz_ids)
    exact = LocalSolveSpec()
    for r in range(cfg.rounds):
        ws = solve_cohort(ps, good_ids, theta, exact)
        good = cohort_deltas(ps, good_ids, theta, ws)
        if sm.rho_in != 1.0:
            good = good * sm.factors(ps.m_clients, r)[:, None]
        if byz.b_count:
            msgs = np.empty((byz.m_total, ps.d_theta))
            msgs[good_slots] = good
            msgs[byz_slots] = np.array(apply_attack(atk, good, byz.b_count, (cfg.sampling_seed, r, 1)))
        else:
            msgs = good
        theta = theta - cfg.gamma_theta * aggregate(agg, msgs, (cfg.sampling_seed, r, 2))
        log.record(theta, 0)
    echo = {
        "method": "br_ffgg",
        "server": cfg.to_dict(),
        "byzantine": byz.to_dict(),
        "aggregator": agg.to_dict(),
        "attack": atk.to_dict(),
        "stochastic": sm.to_dict(),
    }
    cols = {"aggregator": agg.label, "attack": atk.label, "delta": byz.delta}
    return log.trajectory("br_ffgg", echo, constant_columns=cols)


def estimate_c(
    agg: Aggregator,
    delta: float,
    m_total: int,
    dim: int,
    trials: int = 100,
    seed: int = 0,
    shift_scale: float = 100.0,
) -> float:
    """Empirical ``max ||x_hat - x_bar||^2 / (delta sigma^2)`` over trials and an attack battery.

    Good vectors are standard Gaussian; ``sigma^2`` is their mean pairwise
    squared distance. The battery is sign flip, ALIE and a shift to a point
    ``shift_scale * sqrt(dim)`` away. The result is an estimate, never a
    certified constant.
    """
    if not 0 <= delta < 0.5:
        raise InvalidInputError("delta must lie in [0, 1/2)")
    if trials < 1:
        raise InvalidInputError("trials must be positive")
    b = int(math.floor(delta * m_total + 1e-9))
    g = m_total - b
    if g < 2:
        raise InvalidInputError("need at least two good vectors")
    battery = [Attack("sign_flip", kappa=1.0), Attack("alie"), None]
    worst = 0.0
    for t in range(trials):
        rng = make_rng(seed, t)
        good = rng.standard_normal((g, dim))
        xbar = ordered_mean(good)
        diffs = good[:, None, :] - good[None, :, :]
        sigma2 = float(np.sum(diffs**2) / (g * (g - 1)))
        if sigma2 == 0.0:
            continue
        for k, atk in enumerate(battery):
            if atk is None:
                target = xbar + shift_scale * math.sqrt(dim) * np.eye(dim)[0]
                atk = Attack("shift_to", target=tuple(target))
            bad = apply_attack(atk, good, b, (seed, t, k))
            msgs = np.vstack([good] + ([np.array(bad)] if b else []))
            dev = aggregate(agg, msgs, (seed, t, k)) - xbar
            dev2 = float(dev @ dev)
            if b == 0:
                worst = max(worst, dev2 / sigma2)
            else:
                worst = max(worst, dev2 / (delta * sigma2))
    if b == 0 and worst > 0:
        warnings.warn("delta = 0: reporting the clean-data deviation ratio ||x_hat - x_bar||^2 / sigma^2")
    return worst


@dataclass(frozen=True)
class ByzAdmissibility:
    delta_max: float
    gamma_max: float
    mu: float
    l_sim: float
    c: float
    rho_in: float
    g_count: int
    delta: float


def byz_admissibility(mu: float, big_l: float, l_sim: float, rho_in: float, g_count: int, c: float,
                      delta: Optional[float] = None) -> ByzAdmissibility:
    """Largest admissible Byzantine fraction and stepsize.

    With ``S = (rho_in + 1/(G-1)) l_sim + (rho_in - 1) L``:
    ``delta_max = mu / (2 c S)`` and
    ``gamma_max = 1 / (4 ((rho_in - 1)(L + l_sim)/G + L + 2 c delta S))``,
    where ``delta`` defaults to ``delta_max``.
    """
    if g_count < 2:
        raise InvalidInputError("g_count must be at least 2")
    if not (mu > 0 and big_l > 0 and c > 0 and rho_in >= 1 and l_sim >= 0):
        raise InvalidInputError("need mu, L, c > 0, rho_in >= 1 and l_sim >= 0")
    s = (rho_in + 1.0 / (g_count - 1)) * l_sim + (rho_in - 1.0) * big_l
    delta_max = mu / (2.0 * c * s) if s > 0 else math.inf
    d = delta_max if delta is None else float(delta)
    byz_term = 2.0 * c * d * s if s > 0 else 0.0
    gamma_max = 1.0 / (4.0 * ((rho_in - 1.0) * (big_l + l_sim) / g_count + big_l + byz_term))
    return ByzAdmissibility(delta_max, gamma_max, mu, l_sim, c, rho_in, g_count, d)


def check_theorem9(trajs, mu: float, gamma_theta: float, theta_star=None, rel_tol: float = 1e-12) -> Verdict:
    """Check ``dist2(r) <= (1 - gamma mu / 2)^r dist2(0)`` at every round.

    ``trajs`` is one trajectory or a list whose ``dist2`` columns are
    averaged round by round. When ``theta_star`` is given the distances are
    recomputed from the stored iterates.
    """
    if isinstance(trajs, Trajectory):
        trajs = [trajs]
    cols = []
    for t in trajs:
        if theta_star is not None:
            diff = t.thetas - np.asarray(theta_star, dtype=float)[None, :]
            cols.append(np.sum(diff * diff, axis=1))
        else:
            cols.append(t.column("dist2"))
    avg = np.mean(np.array(cols), axis=0)
    rate = 1.0 - gamma_theta * mu / 2.0
    holds, worst, worst_r = True, math.inf, 0
    for r, achieved in enumerate(avg):
        env = rate**r * avg[0]
        margin = env - achieved
        if not margin >= -rel_tol * max(env, 1e-300):
            holds = False
        if margin < worst:
            worst, worst_r = margin, r
    return Verdict(holds, float(worst), worst_r)
