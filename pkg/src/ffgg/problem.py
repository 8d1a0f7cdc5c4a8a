"""Problem instances for partially personalized federated learning.

Each client ``m`` holds a loss ``f_m(theta, w)`` in the shared parameters
``theta`` and its private parameters ``w``::

    f_m(theta, w) = 1/2 ||H theta - b||^2 + psi(A theta + B w - y)

with ``psi`` either the squared norm (least squares) or a pseudo-Huber
penalty. The server-side object of interest is the operator
``F_m(theta) = grad_theta f_m(theta, w_m*(theta))`` where ``w_m*`` is the
client's best response, and the federated problem is to find a root of
the client average of ``F_m``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Callable, NamedTuple, Optional, Sequence, Union

import numpy as np

from ._rng import make_rng

FORMAT_VERSION = 1
PENALTIES = ("quadratic", "pseudo_huber")


class InvalidInputError(ValueError):
    """Raised for non-finite or dimensionally inconsistent inputs."""


class UnsupportedError(ValueError):
    """Raised when an operation is not defined for the given client family."""


class NoUniqueRootError(np.linalg.LinAlgError):
    """The averaged linear system is singular; carries the minimum-norm solution."""

    def __init__(self, message: str, min_norm_solution: np.ndarray):
        super().__init__(message)
        self.min_norm_solution = min_norm_solution


def _frozen(x, ndim: int, name: str) -> np.ndarray:
    arr = np.array(x, dtype=float, copy=True)
    if ndim == 2 and arr.ndim == 1 and arr.size == 0:
        arr = arr.reshape(0, 0)
    if arr.ndim != ndim:
        raise InvalidInputError(f"{name} must be {ndim}-dimensional, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise InvalidInputError(f"{name} has non-finite entries")
    arr.flags.writeable = False
    return arr


# ---------------------------------------------------------------------------
# dense linear algebra
# ---------------------------------------------------------------------------


def pinv(m: np.ndarray, tol: float = 1e-12) -> np.ndarray:
    """Moore-Penrose pseudoinverse through the SVD.

    Singular values at or below ``tol * sigma_max`` are treated as zero.
    """
    if tol <= 0:
        raise InvalidInputError("tol must be positive")
    m = np.asarray(m, dtype=float)
    if m.ndim != 2:
        raise InvalidInputError(f"expected a matrix, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise InvalidInputError("matrix has non-finite entries")
    if m.size == 0:
        return np.zeros((m.shape[1], m.shape[0]))
    u, s, vt = np.linalg.svd(m, full_matrices=False)
    cutoff = tol * s[0] if s.size else 0.0
    keep = s > cutoff
    inv_s = np.zeros_like(s)
    inv_s[keep] = 1.0 / s[keep]
    return (vt.T * inv_s) @ u.T


def _spectral_norm(m: np.ndarray) -> float:
    if m.size == 0:
        return 0.0
    return float(np.linalg.norm(m, 2))


# ---------------------------------------------------------------------------
# clients
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class QuadClient:
    """One client's data: ``A`` (n x d_theta), ``B`` (n x d_w), ``y`` (n,),
    ``H`` (n_phi x d_theta, zero rows disables the regularizer) and ``b`` (n_phi,).
    """

    a_mat: np.ndarray
    b_mat: np.ndarray
    y: np.ndarray
    h_mat: np.ndarray
    b_vec: np.ndarray
    penalty: str = "quadratic"
    huber_scale: float = 1.0

    def __post_init__(self):
        a = _frozen(self.a_mat, 2, "a_mat")
        b = _frozen(self.b_mat, 2, "b_mat")
        y = _frozen(self.y, 1, "y")
        h = _frozen(self.h_mat, 2, "h_mat")
        bv = _frozen(self.b_vec, 1, "b_vec")
        if h.shape == (0, 0):
            h = np.zeros((0, a.shape[1]))
            h.flags.writeable = False
        if a.shape[0] != b.shape[0] or a.shape[0] != y.shape[0]:
            raise InvalidInputError(
                f"row mismatch: A {a.shape}, B {b.shape}, y {y.shape}"
            )
        if h.shape[1] != a.shape[1] or h.shape[0] != bv.shape[0]:
            raise InvalidInputError(f"regularizer mismatch: H {h.shape}, b {bv.shape}")
        if self.penalty not in PENALTIES:
            raise InvalidInputError(f"unknown penalty {self.penalty!r}")
        if not (self.huber_scale > 0 and math.isfinite(self.huber_scale)):
            raise InvalidInputError("huber_scale must be positive")
        for name, val in (("a_mat", a), ("b_mat", b), ("y", y), ("h_mat", h), ("b_vec", bv)):
            object.__setattr__(self, name, val)

    @property
    def d_theta(self) -> int:
        return self.a_mat.shape[1]

    @property
    def d_w(self) -> int:
        return self.b_mat.shape[1]

    @property
    def n(self) -> int:
        return self.a_mat.shape[0]

    @property
    def quadratic(self) -> bool:
        return self.penalty == "quadratic"

    @cached_property
    def b_pinv(self) -> np.ndarray:
        return pinv(self.b_mat)

    @cached_property
    def affine(self) -> "AffineForm":
        """Closed-form pieces of the quadratic client (see :class:`AffineForm`)."""
        if not self.quadratic:
            raise UnsupportedError("affine form exists only for quadratic clients")
        a, bm, h = self.a_mat, self.b_mat, self.h_mat
        bp = self.b_pinv
        hth = h.T @ h
        ata = a.T @ a
        atb = a.T @ bm
        d = bp @ a
        c = bp @ self.y
        # A^T P A = A^T A - (A^T B) B^+ A with P = I - B B^+
        k_mat = hth + ata - atb @ d
        k_mat = 0.5 * (k_mat + k_mat.T)
        k_vec = h.T @ self.b_vec + a.T @ self.y - atb @ c
        py = self.y - bm @ c
        const = 0.5 * float(self.b_vec @ self.b_vec) + 0.5 * float(py @ py)
        return AffineForm(
            g_mat=hth + ata,
            e_mat=atb,
            g_vec=h.T @ self.b_vec + a.T @ self.y,
            btb=bm.T @ bm,
            bta=bm.T @ a,
            bty=bm.T @ self.y,
            d_mat=d,
            c_vec=c,
            k_mat=k_mat,
            k_vec=k_vec,
            risk_const=const,
        )


class AffineForm(NamedTuple):
    """Precomputed blocks of a quadratic client.

    ``grad_theta f = g_mat theta + e_mat w - g_vec``,
    ``grad_w f = bta theta + btb w - bty``,
    ``w*(theta) = c_vec - d_mat theta`` and
    ``F(theta) = k_mat theta - k_vec``.
    """

    g_mat: np.ndarray
    e_mat: np.ndarray
    g_vec: np.ndarray
    btb: np.ndarray
    bta: np.ndarray
    bty: np.ndarray
    d_mat: np.ndarray
    c_vec: np.ndarray
    k_mat: np.ndarray
    k_vec: np.ndarray
    risk_const: float


def _check_theta(c: QuadClient, theta) -> np.ndarray:
    theta = np.asarray(theta, dtype=float)
    if theta.shape != (c.d_theta,):
        raise InvalidInputError(f"theta has shape {theta.shape}, expected ({c.d_theta},)")
    return theta


def _check_w(c: QuadClient, w) -> np.ndarray:
    w = np.asarray(w, dtype=float)
    if w.shape != (c.d_w,):
        raise InvalidInputError(f"w has shape {w.shape}, expected ({c.d_w},)")
    return w


def _psi(c: QuadClient, r: np.ndarray) -> float:
    if c.quadratic:
        return 0.5 * float(r @ r)
    s = c.huber_scale
    return float(s * s * np.sum(np.sqrt(1.0 + (r / s) ** 2) - 1.0))


def _psi_grad(c: QuadClient, r: np.ndarray) -> np.ndarray:
    if c.quadratic:
        return r
    s = c.huber_scale
    return r / np.sqrt(1.0 + (r / s) ** 2)


def _psi_curv(c: QuadClient, r: np.ndarray) -> np.ndarray:
    """Diagonal of the Hessian of psi."""
    if c.quadratic:
        return np.ones_like(r)
    s = c.huber_scale
    return (1.0 + (r / s) ** 2) ** -1.5


def residual(c: QuadClient, theta, w) -> np.ndarray:
    return c.a_mat @ theta + c.b_mat @ w - c.y


def objective(c: QuadClient, theta, w) -> float:
    theta, w = _check_theta(c, theta), _check_w(c, w)
    reg = c.h_mat @ theta - c.b_vec
    return 0.5 * float(reg @ reg) + _psi(c, residual(c, theta, w))


def grad_theta(c: QuadClient, theta, w) -> np.ndarray:
    """Partial gradient of ``f`` in the shared parameters."""
    theta, w = _check_theta(c, theta), _check_w(c, w)
    g = c.a_mat.T @ _psi_grad(c, residual(c, theta, w))
    if c.h_mat.shape[0]:
        g = g + c.h_mat.T @ (c.h_mat @ theta - c.b_vec)
    return g


def grad_w(c: QuadClient, theta, w) -> np.ndarray:
    """Partial gradient of ``f`` in the private parameters."""
    theta, w = _check_theta(c, theta), _check_w(c, w)
    return c.b_mat.T @ _psi_grad(c, residual(c, theta, w))


def w_star(c: QuadClient, theta) -> np.ndarray:
    """Best response ``argmin_w f(theta, w)``.

    Quadratic clients use the pseudoinverse; pseudo-Huber clients run damped
    Newton from the least-squares point.
    """
    theta = _check_theta(c, theta)
    w = c.b_pinv @ (c.y - c.a_mat @ theta)
    if c.quadratic:
        return w

    base = c.a_mat @ theta - c.y
    tol = 1e-12 * (1.0 + float(np.linalg.norm(c.y)))

    def value(w_):
        return _psi(c, base + c.b_mat @ w_)

    f_cur = value(w)
    for _ in range(200):
        r = base + c.b_mat @ w
        g = c.b_mat.T @ _psi_grad(c, r)
        if np.linalg.norm(g) <= tol:
            break
        hess = c.b_mat.T @ (_psi_curv(c, r)[:, None] * c.b_mat)
        step = np.linalg.lstsq(hess, g, rcond=None)[0]
        if np.linalg.norm(step) <= 1e-15 * (1.0 + float(np.linalg.norm(w))):
            break
        slope = float(g @ step)
        if slope <= 1e-13 * (1.0 + abs(f_cur)):
            # decrease below rounding of f: the full Newton step is safe and quadratically convergent
            w = w - step
            f_cur = value(w)
            continue
        t = 1.0
        while True:
            w_new = w - t * step
            f_new = value(w_new)
            if f_new <= f_cur - 1e-4 * t * slope or t < 1e-12:
                break
            t *= 0.5
        w, f_cur = w_new, f_new
    return w


def operator_f(c: QuadClient, theta) -> np.ndarray:
    """``F(theta) = grad_theta f(theta, w*(theta))``.

    For the quadratic family this is evaluated through the projector form
    ``H^T(H theta - b) + A^T (I - B B^+)(A theta - y)``.
    """
    theta = _check_theta(c, theta)
    if c.quadratic:
        r = c.a_mat @ theta - c.y
        pr = r - c.b_mat @ (c.b_pinv @ r)
        out = c.a_mat.T @ pr
        if c.h_mat.shape[0]:
            out = out + c.h_mat.T @ (c.h_mat @ theta - c.b_vec)
        return out
    return grad_theta(c, theta, w_star(c, theta))


# ---------------------------------------------------------------------------
# problem sets
# ---------------------------------------------------------------------------


class QuadStack(NamedTuple):
    """:class:`AffineForm` blocks stacked along a leading client axis."""

    g_mat: np.ndarray
    e_mat: np.ndarray
    g_vec: np.ndarray
    btb: np.ndarray
    bta: np.ndarray
    bty: np.ndarray
    d_mat: np.ndarray
    c_vec: np.ndarray
    k_mat: np.ndarray
    k_vec: np.ndarray
    risk_const: np.ndarray
    l_ww: np.ndarray
    mean_k_mat: np.ndarray
    mean_k_vec: np.ndarray
    mean_risk_const: float


@dataclass(frozen=True, eq=False)
class ProblemSet:
    clients: tuple
    generator: str = "custom"
    seed: int = 0
    planted_theta_star: Optional[np.ndarray] = None
    planted_w_stars: Optional[tuple] = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        clients = tuple(self.clients)
        if not clients:
            raise InvalidInputError("a problem set needs at least one client")
        d_theta = clients[0].d_theta
        d_w = clients[0].d_w
        for i, c in enumerate(clients):
            if c.d_theta != d_theta or c.d_w != d_w:
                raise InvalidInputError(f"client {i} has dims ({c.d_theta}, {c.d_w}), expected ({d_theta}, {d_w})")
        object.__setattr__(self, "clients", clients)
        if self.planted_theta_star is not None:
            object.__setattr__(self, "planted_theta_star", _frozen(self.planted_theta_star, 1, "planted_theta_star"))
        if self.planted_w_stars is not None:
            ws = tuple(_frozen(w, 1, "planted_w_star") for w in self.planted_w_stars)
            object.__setattr__(self, "planted_w_stars", ws)

    @property
    def m_clients(self) -> int:
        return len(self.clients)

    @property
    def d_theta(self) -> int:
        return self.clients[0].d_theta

    @property
    def d_w(self) -> int:
        return self.clients[0].d_w

    @property
    def quadratic(self) -> bool:
        return all(c.quadratic for c in self.clients)

    @cached_property
    def stack(self) -> QuadStack:
        if not self.quadratic:
            raise UnsupportedError("stacked closed forms need quadratic clients")
        forms = [c.affine for c in self.clients]
        k_mat = np.stack([f.k_mat for f in forms])
        k_vec = np.stack([f.k_vec for f in forms])
        consts = np.array([f.risk_const for f in forms])
        btb = np.stack([f.btb for f in forms])
        l_ww = np.array([np.linalg.eigvalsh(m)[-1] if m.size else 0.0 for m in btb])
        mk = np.zeros_like(k_mat[0])
        mv = np.zeros_like(k_vec[0])
        for i in range(len(forms)):
            mk += k_mat[i]
            mv += k_vec[i]
        m = len(forms)
        return QuadStack(
            g_mat=np.stack([f.g_mat for f in forms]),
            e_mat=np.stack([f.e_mat for f in forms]),
            g_vec=np.stack([f.g_vec for f in forms]),
            btb=btb,
            bta=np.stack([f.bta for f in forms]),
            bty=np.stack([f.bty for f in forms]),
            d_mat=np.stack([f.d_mat for f in forms]),
            c_vec=np.stack([f.c_vec for f in forms]),
            k_mat=k_mat,
            k_vec=k_vec,
            risk_const=consts,
            l_ww=l_ww,
            mean_k_mat=mk / m,
            mean_k_vec=mv / m,
            mean_risk_const=float(np.sum(consts) / m),
        )

    @cached_property
    def btb_eigh(self) -> tuple:
        """Eigendecompositions of every ``B_m^T B_m``: ``(values (M, d_w), vectors (M, d_w, d_w))``."""
        return np.linalg.eigh(self.stack.btb)

    @cached_property
    def joint_hessians(self) -> np.ndarray:
        """Hessians of every ``f_m`` jointly in ``(theta, w)``, shape ``(M, D, D)``."""
        st = self.stack
        top = np.concatenate([st.g_mat, st.e_mat], axis=2)
        bottom = np.concatenate([st.bta, st.btb], axis=2)
        return np.concatenate([top, bottom], axis=1)

    @cached_property
    def joint_consts(self) -> np.ndarray:
        """Constant terms ``1/2 ||y_m||^2 + 1/2 ||b_m||^2`` of every ``f_m``."""
        return np.array([0.5 * float(c.y @ c.y) + 0.5 * float(c.b_vec @ c.b_vec) for c in self.clients])

    @cached_property
    def joint_eigh(self) -> tuple:
        return np.linalg.eigh(self.joint_hessians)

    def operators(self, theta) -> np.ndarray:
        """All client operators at ``theta`` as an ``(M, d_theta)`` array."""
        theta = np.asarray(theta, dtype=float)
        if self.quadratic:
            st = self.stack
            return st.k_mat @ theta - st.k_vec
        return np.stack([operator_f(c, theta) for c in self.clients])


def mean_operator(ps: ProblemSet, theta) -> np.ndarray:
    """Client average of ``F_m``, accumulated in ascending client order."""
    theta = _check_theta(ps.clients[0], theta)
    if ps.quadratic:
        st = ps.stack
        return st.mean_k_mat @ theta - st.mean_k_vec
    acc = np.zeros(ps.d_theta)
    for c in ps.clients:
        acc = acc + operator_f(c, theta)
    return acc / ps.m_clients


def post_tuning_risk(ps: ProblemSet, theta) -> float:
    """``(1/M) sum_m f_m(theta, w_m*(theta))`` for quadratic clients."""
    st = ps.stack
    theta = np.asarray(theta, dtype=float)
    return float(0.5 * theta @ (st.mean_k_mat @ theta) - st.mean_k_vec @ theta + st.mean_risk_const)


def solve_root(ps: ProblemSet, tol: float = 1e-12) -> np.ndarray:
    """Root of the averaged quadratic operator by dense factorization."""
    if not ps.quadratic:
        raise UnsupportedError("solve_root needs quadratic clients")
    mat = np.zeros((ps.d_theta, ps.d_theta))
    rhs = np.zeros(ps.d_theta)
    for c in ps.clients:
        form = c.affine
        mat += form.k_mat
        rhs += form.k_vec
    s = np.linalg.svd(mat, compute_uv=False)
    if s.size and s[-1] <= tol * s[0] or not s.size or s[0] == 0.0:
        sol = np.linalg.lstsq(mat, rhs, rcond=None)[0]
        raise NoUniqueRootError("averaged operator system is singular", sol)
    return np.linalg.solve(mat, rhs)


def expected_risk(ps: ProblemSet, theta) -> float:
    """``(1/M) sum_m 1/2 ||P_m (A_m theta - y_m)||^2`` with ``P_m = I - B_m B_m^+``.

    Only defined without the ``H`` regularizer.
    """
    total = 0.0
    for c in ps.clients:
        if not c.quadratic:
            raise UnsupportedError("expected_risk needs quadratic clients")
        if c.h_mat.shape[0]:
            raise UnsupportedError("expected_risk is defined with the regularizer disabled")
        r = c.a_mat @ np.asarray(theta, dtype=float) - c.y
        pr = r - c.b_mat @ (c.b_pinv @ r)
        total += 0.5 * float(pr @ pr)
    return total / ps.m_clients


# ---------------------------------------------------------------------------
# generators
# ---------------------------------------------------------------------------


def _draw_matrices(rng, n, d_theta, d_w):
    h = rng.random((n, d_theta)) / d_theta
    a = rng.random((n, d_theta)) / d_theta
    b = rng.random((n, d_w)) / d_w
    return h, a, b


def _check_counts(**counts):
    for name, v in counts.items():
        if int(v) != v or v < 1:
            raise InvalidInputError(f"{name} must be a positive integer, got {v!r}")


def generate_uniform(m_clients: int, n: int, d_theta: int, d_w: int, seed: int) -> ProblemSet:
    """Matrices ~ U[0,1] divided by their column count; ``b``, ``y`` ~ U[0,1]."""
    _check_counts(m_clients=m_clients, n=n, d_theta=d_theta, d_w=d_w)
    rng = make_rng(seed)
    clients = []
    for _ in range(m_clients):
        h, a, b = _draw_matrices(rng, n, d_theta, d_w)
        b_vec = rng.random(n)
        y = rng.random(n)
        clients.append(QuadClient(a, b, y, h, b_vec))
    return ProblemSet(tuple(clients), "uniform", int(seed), meta={"vector_scaling": "U[0,1] undivided"})


def generate_consistent(m_clients: int, n: int, d_theta: int, d_w: int, seed: int) -> ProblemSet:
    """Like :func:`generate_uniform` but with a planted shared root.

    ``y_m = A_m theta* + B_m w*_m`` and ``b_m = H_m theta*`` so every client
    operator vanishes at ``theta*``.
    """
    _check_counts(m_clients=m_clients, n=n, d_theta=d_theta, d_w=d_w)
    if n < d_w:
        raise InvalidInputError("consistent instances need n >= d_w")
    rng = make_rng(seed)
    theta_star = rng.random(d_theta)
    clients, w_stars = [], []
    for _ in range(m_clients):
        h, a, b = _draw_matrices(rng, n, d_theta, d_w)
        w_m = rng.random(d_w)
        clients.append(QuadClient(a, b, a @ theta_star + b @ w_m, h, h @ theta_star))
        w_stars.append(w_m)
    ps = ProblemSet(
        tuple(clients), "consistent", int(seed), theta_star, tuple(w_stars),
        meta={"vector_scaling": "planted, U[0,1] roots"},
    )
    for i, c in enumerate(ps.clients):
        res = np.linalg.norm(operator_f(c, theta_star))
        if res > 1e-10:
            raise InvalidInputError(f"planted root residual {res:.3e} on client {i}")
    return ps


# ---------------------------------------------------------------------------
# constants and numeric certificates
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ClientConstants:
    l_phi: float
    l_cocoercive: float
    mu_w: float
    l_ww: float
    l_cross: float
    lip_a: float
    lip_c: float


def client_constants(c: QuadClient, theta_star) -> ClientConstants:
    if not c.quadratic:
        raise UnsupportedError("analytic constants need a quadratic client; use estimate_cocoercivity")
    theta_star = _check_theta(c, theta_star)
    a, bm, bp = c.a_mat, c.b_mat, c.b_pinv
    l_phi = _spectral_norm(c.h_mat.T @ c.h_mat) if c.h_mat.shape[0] else 0.0
    pa = a - bm @ (bp @ a)
    l_proj = _spectral_norm(a.T @ pa)
    btb_eigs = np.linalg.eigvalsh(bm.T @ bm)
    return ClientConstants(
        l_phi=l_phi,
        l_cocoercive=2.0 * max(l_phi, l_proj),
        mu_w=max(float(btb_eigs[0]), 0.0),
        l_ww=float(btb_eigs[-1]),
        l_cross=_spectral_norm(a.T @ bm),
        lip_a=_spectral_norm(bp @ a),
        lip_c=float(np.linalg.norm(bp @ (c.y - a @ theta_star))),
    )


def problem_l(ps: ProblemSet) -> float:
    """Largest per-client cocoercivity constant of the quadratic family."""
    zero = np.zeros(ps.d_theta)
    return max(client_constants(c, zero).l_cocoercive for c in ps.clients)


def joint_smoothness(ps: ProblemSet) -> float:
    """``L_f``: the largest smoothness constant of any ``f_m`` jointly in (theta, w)."""
    best = 0.0
    for c in ps.clients:
        if not c.quadratic:
            raise UnsupportedError("joint smoothness is closed-form only for quadratic clients")
        full = np.hstack([c.a_mat, c.b_mat])
        hess = full.T @ full
        if c.h_mat.shape[0]:
            hess[: c.d_theta, : c.d_theta] += c.h_mat.T @ c.h_mat
        best = max(best, float(np.linalg.eigvalsh(hess)[-1]))
    return best


Target = Union[QuadClient, ProblemSet]


def _operator_fn(target: Target) -> Callable[[np.ndarray], np.ndarray]:
    if isinstance(target, ProblemSet):
        return lambda th: mean_operator(target, th)
    return lambda th: operator_f(target, th)


def _dim(target: Target) -> int:
    return target.d_theta


def _ball(rng, n: int, d: int, radius: float) -> np.ndarray:
    g = rng.standard_normal((n, d))
    g /= np.linalg.norm(g, axis=1, keepdims=True)
    return g * (radius * rng.random(n) ** (1.0 / d))[:, None]


def _sample_pairs(target: Target, n_pairs, radius, seed, center):
    rng = make_rng(seed)
    d = _dim(target)
    if center is None and isinstance(target, ProblemSet):
        center = target.planted_theta_star
    centers = [np.zeros(d)] if center is None else [np.zeros(d), np.asarray(center, dtype=float)]
    per = [n_pairs // len(centers) + (1 if i < n_pairs % len(centers) else 0) for i in range(len(centers))]
    pairs = []
    for ctr, k in zip(centers, per):
        p1 = ctr + _ball(rng, k, d, radius)
        p2 = ctr + _ball(rng, k, d, radius)
        pairs.extend(zip(p1, p2))
    return pairs


@dataclass(frozen=True)
class CocoercivityReport:
    pairs_tested: int
    min_slack: float
    violating_pair: Optional[tuple] = None


def check_cocoercivity(
    target: Target,
    l_const: float,
    n_pairs: int = 1000,
    radius: float = 1.0,
    seed: int = 0,
    center=None,
    tol: float = 1e-10,
) -> CocoercivityReport:
    """Sample pairs and report the smallest cocoercivity slack
    ``<F1 - F2, t1 - t2> - (1/L)||F1 - F2||^2``.

    Pairs are drawn uniformly from a ball around the origin, and around
    ``center`` (default: the planted root of a problem set) when given.
    """
    if l_const <= 0:
        raise InvalidInputError("l_const must be positive")
    op = _operator_fn(target)
    min_slack = math.inf
    worst = None
    for t1, t2 in _sample_pairs(target, n_pairs, radius, seed, center):
        df = op(t1) - op(t2)
        slack = float(df @ (t1 - t2)) - float(df @ df) / l_const
        if slack < min_slack:
            min_slack, worst = slack, (t1, t2)
    violating = worst if min_slack < -tol else None
    return CocoercivityReport(n_pairs, min_slack, violating)


def check_sum_cocoercivity(
    first: Target, second: Target, l_const: float, n_pairs=1000, radius=1.0, seed=0, tol=1e-10,
) -> CocoercivityReport:
    """Check that ``F1 + F2`` is ``1/(2L)``-cocoercive when each is ``1/L``-cocoercive."""
    op1, op2 = _operator_fn(first), _operator_fn(second)

    class _Sum:
        d_theta = _dim(first)

    pairs = _sample_pairs(_Sum(), n_pairs, radius, seed, None)
    min_slack, worst = math.inf, None
    for t1, t2 in pairs:
        df = op1(t1) + op2(t1) - op1(t2) - op2(t2)
        slack = float(df @ (t1 - t2)) - float(df @ df) / (2.0 * l_const)
        if slack < min_slack:
            min_slack, worst = slack, (t1, t2)
    return CocoercivityReport(n_pairs, min_slack, worst if min_slack < -tol else None)


def estimate_cocoercivity(target: Target, n_pairs: int = 1000, radius: float = 1.0, seed: int = 0, center=None) -> float:
    """Smallest ``L`` consistent with the sampled pairs: ``max ||dF||^2 / <dF, dt>``.

    An empirical estimate, not a certificate.
    """
    op = _operator_fn(target)
    best = 0.0
    for t1, t2 in _sample_pairs(target, n_pairs, radius, seed, center):
        df = op(t1) - op(t2)
        inner = float(df @ (t1 - t2))
        nrm = float(df @ df)
        if nrm == 0.0:
            continue
        if inner <= 0.0:
            return math.inf
        best = max(best, nrm / inner)
    return best


def estimate_mu_lsim(
    ps: ProblemSet,
    theta_star,
    n_samples: int = 200,
    radius: float = 1.0,
    seed: int = 0,
    refine_steps: int = 200,
) -> tuple:
    """Empirical quasi-strong-monotonicity and similarity constants.

    ``mu`` is the smallest sampled ``<F(t), t - t*> / ||t - t*||^2`` and
    ``l_sim`` the largest sampled ratio of the operator spread
    ``(1/G) sum ||F_m(t)||^2 - ||F(t)||^2`` to ``<F(t), t - t*>``.
    Besides random points in the ball, a shifted power iteration on the
    secant map adaptively samples the direction of weakest monotonicity.
    Both values are estimates, never certified bounds.
    """
    theta_star = np.asarray(theta_star, dtype=float)
    rng = make_rng(seed)
    d = ps.d_theta
    mu, l_sim = math.inf, 0.0
    scale = 0.0

    def visit(theta):
        nonlocal mu, l_sim, scale
        diff = theta - theta_star
        nd2 = float(diff @ diff)
        if nd2 == 0.0:
            return None
        ops = ps.operators(theta)
        fbar = mean_operator(ps, theta)
        inner = float(fbar @ diff)
        spread = float(np.mean(np.sum((ops - fbar) ** 2, axis=1)))
        mu = min(mu, inner / nd2)
        scale = max(scale, float(np.linalg.norm(fbar)) / math.sqrt(nd2))
        if inner > 0:
            l_sim = max(l_sim, spread / inner)
        elif spread > 0:
            l_sim = math.inf
        return fbar

    for offset in _ball(rng, n_samples, d, radius):
        visit(theta_star + offset)

    u = rng.standard_normal(d)
    u /= np.linalg.norm(u)
    rho = radius / 2
    shift = 1.05 * scale
    for _ in range(refine_steps):
        fbar = visit(theta_star + rho * u)
        if fbar is None:
            break
        nxt = shift * u - fbar / rho
        norm = np.linalg.norm(nxt)
        if norm == 0.0:
            break
        u = nxt / norm
    return mu, l_sim


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------


def problem_to_dict(ps: ProblemSet) -> dict:
    first = ps.clients[0]
    out = {
        "version": FORMAT_VERSION,
        "generator": ps.generator,
        "seed": ps.seed,
        "dims": {
            "m_clients": ps.m_clients,
            "n": first.n,
            "d_theta": ps.d_theta,
            "d_w": ps.d_w,
            "n_phi": first.h_mat.shape[0],
        },
        "clients": [
            {
                "A": c.a_mat.tolist(),
                "B": c.b_mat.tolist(),
                "H": c.h_mat.tolist(),
                "y": c.y.tolist(),
                "b": c.b_vec.tolist(),
                "penalty": c.penalty,
                "huber_scale": c.huber_scale,
            }
            for c in ps.clients
        ],
        "meta": dict(ps.meta),
    }
    if ps.planted_theta_star is not None:
        out["planted_theta_star"] = ps.planted_theta_star.tolist()
    if ps.planted_w_stars is not None:
        out["planted_w_stars"] = [w.tolist() for w in ps.planted_w_stars]
    return out


def problem_from_dict(doc: dict) -> ProblemSet:
    if doc.get("version") != FORMAT_VERSION:
        raise InvalidInputError(f"unsupported problem format version {doc.get('version')!r}")
    d_theta = doc["dims"]["d_theta"]
    clients = []
    for c in doc["clients"]:
        h = np.array(c["H"], dtype=float)
        if h.size == 0:
            h = np.zeros((0, d_theta))
        clients.append(
            QuadClient(
                np.array(c["A"], dtype=float), np.array(c["B"], dtype=float), np.array(c["y"], dtype=float),
                h, np.array(c["b"], dtype=float), c.get("penalty", "quadratic"), c.get("huber_scale", 1.0),
            )
        )
    planted = doc.get("planted_theta_star")
    w_stars = doc.get("planted_w_stars")
    return ProblemSet(
        tuple(clients), doc["generator"], doc["seed"],
        None if planted is None else np.array(planted, dtype=float),
        None if w_stars is None else tuple(np.array(w, dtype=float) for w in w_stars),
        meta=dict(doc.get("meta", {})),
    )


def save_problem(ps: ProblemSet, path) -> None:
    Path(path).write_text(json.dumps(problem_to_dict(ps)) + "\n", encoding="utf-8", newline="\n")


def load_problem(path) -> ProblemSet:
    return problem_from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def with_clients(ps: ProblemSet, clients: Sequence[QuadClient]) -> ProblemSet:
    """Copy of ``ps`` holding ``clients`` (planted root kept, per-client roots dropped)."""
    return ProblemSet(tuple(clients), ps.generator, ps.seed, ps.planted_theta_star, None, dict(ps.meta))


def without_regularizer(ps: ProblemSet) -> ProblemSet:
    """Copy of ``ps`` with every ``H_m`` block removed."""
    clients = [
        QuadClient(c.a_mat, c.b_mat, c.y, np.zeros((0, c.d_theta)), np.zeros(0), c.penalty, c.huber_scale)
        for c in ps.clients
    ]
    return with_clients(ps, clients)
