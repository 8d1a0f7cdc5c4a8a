"""Client-side fine-tuners that approximate the best response ``w*(theta)``."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence, Union

import numpy as np

from ._rng import make_rng
from .problem import (
    ClientConstants,
    InvalidInputError,
    ProblemSet,
    QuadClient,
    grad_theta,
    grad_w,
    w_star,
)

KINDS = ("exact", "gd", "cg")


@dataclass(frozen=True)
class LocalSolveSpec:
    """How a client approximates its best response.

    Attributes:
        kind: ``"exact"``, ``"gd"`` or ``"cg"``.
        tau: number of local iterations (ignored by ``exact``).
        gamma_w: GD stepsize; ``None`` means ``1 / ||B^T B||``.
        w0: ``"zero"``, ``"random"`` or an explicit starting vector.
        seed: seed of the random start when ``w0 == "random"``.
    """

    kind: str = "exact"
    tau: int = 0
    gamma_w: Optional[float] = None
    w0: Union[str, tuple] = "zero"
    seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise InvalidInputError(f"unknown local solver {self.kind!r}")
        if int(self.tau) != self.tau or self.tau < 0:
            raise InvalidInputError("tau must be a nonnegative integer")
        if self.kind == "gd" and self.gamma_w is not None and not self.gamma_w > 0:
            raise InvalidInputError(f"invalid stepsize gamma_w={self.gamma_w}")
        if isinstance(self.w0, str):
            if self.w0 not in ("zero", "random"):
                raise InvalidInputError(f"unknown w0 {self.w0!r}")
        else:
            object.__setattr__(self, "w0", tuple(float(v) for v in self.w0))

    @property
    def exact(self) -> bool:
        return self.kind == "exact"

    def steps(self) -> int:
        """Local iterations charged per solve."""
        return 0 if self.exact else int(self.tau)

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "tau": int(self.tau),
            "gamma_w": self.gamma_w,
            "w0": self.w0 if isinstance(self.w0, str) else list(self.w0),
            "seed": self.seed,
        }


@dataclass(frozen=True)
class LocalSolveResult:
    w: np.ndarray
    iterations: int
    grad_norm: float
    dist_bound: Optional[float] = None


def bmv(mats: np.ndarray, vecs: np.ndarray) -> np.ndarray:
    """Batched matrix-vector product ``mats[i] @ vecs[i]``."""
    return (mats @ vecs[..., None])[..., 0]


def take(arr: np.ndarray, ids: Sequence[int]) -> np.ndarray:
    """Rows ``ids`` of a per-client array; a full sorted cohort returns ``arr`` itself."""
    return arr if len(ids) == arr.shape[0] else arr[ids]


def _l_ww(c: QuadClient) -> float:
    return float(np.linalg.eigvalsh(c.b_mat.T @ c.b_mat)[-1])


def initial_w(spec: LocalSolveSpec, d_w: int, stream: Sequence[int] = ()) -> np.ndarray:
    """Starting point of a local solve; ``stream`` separates random draws per call site."""
    if spec.w0 == "zero":
        return np.zeros(d_w)
    if spec.w0 == "random":
        return make_rng(spec.seed, *stream).standard_normal(d_w)
    w = np.array(spec.w0, dtype=float)
    if w.shape != (d_w,):
        raise InvalidInputError(f"w0 has length {w.size}, expected {d_w}")
    return w


def solve_local(c: QuadClient, theta, spec: LocalSolveSpec, stream: Sequence[int] = ()) -> LocalSolveResult:
    """Approximate ``w*(theta)`` for one client according to ``spec``."""
    theta = np.asarray(theta, dtype=float)
    if theta.shape != (c.d_theta,):
        raise InvalidInputError(f"theta has shape {theta.shape}, expected ({c.d_theta},)")
    if spec.exact:
        w = w_star(c, theta)
        return LocalSolveResult(w, 0, float(np.linalg.norm(grad_w(c, theta, w))))

    w = initial_w(spec, c.d_w, stream)
    w_init = w.copy()
    if spec.kind == "gd":
        gamma = spec.gamma_w if spec.gamma_w is not None else 1.0 / _l_ww(c)
        for _ in range(spec.tau):
            w = w - gamma * grad_w(c, theta, w)
        bound = None
        if c.quadratic:
            eigs = np.linalg.eigvalsh(c.b_mat.T @ c.b_mat)
            if gamma <= 1.0 / eigs[-1]:
                factor = max(1.0 - gamma * max(eigs[0], 0.0), 0.0)
                bound = factor ** (spec.tau / 2) * float(np.linalg.norm(w_init - w_star(c, theta)))
        return LocalSolveResult(w, spec.tau, float(np.linalg.norm(grad_w(c, theta, w))), bound)

    if not c.quadratic:
        raise InvalidInputError("cg applies to the quadratic family only")
    btb = c.b_mat.T @ c.b_mat
    rhs = c.b_mat.T @ (c.y - c.a_mat @ theta)
    w = _cg(btb[None], rhs[None], w[None], spec.tau)[0]
    return LocalSolveResult(w, spec.tau, float(np.linalg.norm(grad_w(c, theta, w))))


def _cg(mats: np.ndarray, rhs: np.ndarray, w: np.ndarray, iters: int) -> np.ndarray:
    """Plain conjugate gradient on a batch of SPD systems ``mats[i] w = rhs[i]``.

    A system whose residual is exactly zero stays frozen.
    """
    w = w.copy()
    r = rhs - bmv(mats, w)
    p = r.copy()
    rr = np.einsum("bi,bi->b", r, r)
    for _ in range(iters):
        ap = bmv(mats, p)
        pap = np.einsum("bi,bi->b", p, ap)
        alpha = np.divide(rr, pap, out=np.zeros_like(rr), where=pap > 0)
        w += alpha[:, None] * p
        r -= alpha[:, None] * ap
        rr_new = np.einsum("bi,bi->b", r, r)
        beta = np.divide(rr_new, rr, out=np.zeros_like(rr), where=rr > 0)
        p = r + beta[:, None] * p
        rr = rr_new
    return w


class CohortSolver:
    """Batched local solves for a fixed problem set and spec.

    For quadratic clients the ``gd`` solver uses the closed-form propagator
    of :func:`gd_propagator`, built once per solver; results match
    :func:`solve_local` client by client up to rounding.
    """

    def __init__(self, ps: ProblemSet, spec: LocalSolveSpec):
        self.ps = ps
        self.spec = spec
        self._prop = None
        if ps.quadratic and spec.kind == "gd":
            st = ps.stack
            gamma = np.full(ps.m_clients, spec.gamma_w) if spec.gamma_w is not None else 1.0 / st.l_ww
            vals, vecs = ps.btb_eigh
            self._prop = gd_propagator(vals, vecs, gamma, spec.tau)

    def __call__(self, ids: Sequence[int], theta, stream: Sequence[int] = ()) -> np.ndarray:
        ps, spec = self.ps, self.spec
        ids = list(ids)
        theta = np.asarray(theta, dtype=float)
        if not ps.quadratic:
            return np.stack([solve_local(ps.clients[i], theta, spec, (*stream, i)).w for i in ids])
        st = ps.stack
        if spec.exact:
            return take(st.c_vec, ids) - take(st.d_mat, ids) @ theta
        w = np.stack([initial_w(spec, ps.d_w, (*stream, i)) for i in ids])
        rhs = take(st.bty, ids) - take(st.bta, ids) @ theta
        if spec.kind == "cg":
            return _cg(take(st.btb, ids), rhs, w, spec.tau)
        grad0 = bmv(take(st.btb, ids), w) - rhs
        return w - bmv(take(self._prop, ids), grad0)


def solve_cohort(
    ps: ProblemSet, ids: Sequence[int], theta, spec: LocalSolveSpec, stream: Sequence[int] = ()
) -> np.ndarray:
    """Local solutions for several clients at a common ``theta``, shape ``(k, d_w)``."""
    return CohortSolver(ps, spec)(ids, theta, stream)


def gd_weights(vals: np.ndarray, step, k: int) -> np.ndarray:
    """``sum_{i<k} step (1 - step lam)^i`` for each eigenvalue ``lam``."""
    step = np.broadcast_to(np.asarray(step, dtype=float)[..., None] if np.ndim(step) else step, vals.shape)
    x = step * vals
    out = np.empty_like(vals)
    zero = vals == 0
    stable = (~zero) & (x > 0) & (x < 1)
    out[zero] = step[zero] * k
    out[stable] = -np.expm1(k * np.log1p(-x[stable])) / vals[stable]
    rest = ~(zero | stable)
    with np.errstate(over="ignore", invalid="ignore"):
        out[rest] = (1.0 - (1.0 - x[rest]) ** k) / vals[rest]
    return out


def gd_propagator(vals, vecs, step, k: int) -> np.ndarray:
    """Matrices ``P`` such that ``k`` gradient steps of size ``step`` move a
    quadratic's iterate by ``-P g_0``, with ``g_0`` the starting gradient.

    With Hessian ``V diag(vals) V^T`` the gradient evolves as
    ``g_{i+1} = (I - step H) g_i``, hence ``P = V diag(weights) V^T`` with
    :func:`gd_weights`. Applying ``P`` equals running the steps one by one
    up to rounding.
    """
    weights = gd_weights(vals, step, k)
    with np.errstate(over="ignore", invalid="ignore"):
        return (vecs * weights[:, None, :]) @ np.swapaxes(vecs, 1, 2)


def gd_displacement(vals, vecs, grad0, step, k: int) -> np.ndarray:
    """``-P g_0`` for the propagator of :func:`gd_propagator`, without forming ``P``."""
    weights = gd_weights(vals, step, k)
    with np.errstate(over="ignore", invalid="ignore"):
        coeff = bmv(np.swapaxes(vecs, 1, 2), grad0)
        return -bmv(vecs, weights * coeff)


def cohort_deltas(ps: ProblemSet, ids: Sequence[int], theta, ws: np.ndarray) -> np.ndarray:
    """``grad_theta f_m(theta, w_m)`` for each client in ``ids``."""
    ids = list(ids)
    theta = np.asarray(theta, dtype=float)
    if ps.quadratic:
        st = ps.stack
        return take(st.g_mat, ids) @ theta + bmv(take(st.e_mat, ids), ws) - take(st.g_vec, ids)
    return np.stack([grad_theta(ps.clients[i], theta, w) for i, w in zip(ids, ws)])


def recommend_tau(cc: ClientConstants, big_l: float, gamma_w: float, r_rounds: int, r0: float) -> int:
    """Local GD steps sufficient for the inexact-solve rate.

    With ``a = 2 l_cross lip_a / L`` and ``b = 2 l_cross lip_c / L`` this returns
    the smallest integer at least
    ``max{2 log(aR), 2 log(bR/r0), log(b^2 R / r0^2)} / (gamma_w mu_w)``,
    dropping log terms whose argument is at most 1. With ``gamma_w = 1/l_ww``
    the prefactor is the condition number ``l_ww / mu_w``.

    Raises:
        InvalidInputError: if ``mu_w`` is zero (no finite tau exists) or an
            input is out of range.
    """
    if not r0 > 0 or not big_l > 0 or not gamma_w > 0 or r_rounds < 1:
        raise InvalidInputError("recommend_tau needs r0, L, gamma_w > 0 and R >= 1")
    a = 2.0 * cc.l_cross * cc.lip_a / big_l
    b = 2.0 * cc.l_cross * cc.lip_c / big_l
    terms = [0.0]
    for coef, arg in ((2.0, a * r_rounds), (2.0, b * r_rounds / r0), (1.0, b * b * r_rounds / r0**2)):
        if arg > 1.0:
            terms.append(coef * math.log(arg))
    top = max(terms)
    if top == 0.0:
        return 0
    if cc.mu_w <= 0:
        raise InvalidInputError("mu_w = 0: the local problem is not strongly convex, tau is unbounded")
    return int(math.ceil(top / (gamma_w * cc.mu_w) - 1e-9))
