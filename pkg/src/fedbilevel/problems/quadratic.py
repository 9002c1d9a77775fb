"""Quadratic bilevel instance with closed-form oracles.

Client ``m`` has

    g_m(x, y) = 1/2 y'Q_m y - y'P_m x - y'r_m
    f_m(x, y) = 1/2 (y - u_m)'S_m (y - u_m) + 1/2 x'R_m x

Stochastic oracles add zero-mean Gaussian noise scaled so that the expected
squared (Frobenius) norm of every perturbation equals ``sigma**2``.  Sampled
lower-level Hessians are symmetrized and never clipped.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..rng import PROBLEM, stream
from .base import BilevelProblem, InvalidArgument, ProblemConstants, neumann_chain_dense


def _sym(A):
    return 0.5 * (A + A.T)


@dataclass
class QuadraticBilevelSpec:
    Q: np.ndarray  # (M, p, p)
    P: np.ndarray  # (M, p, d)
    r: np.ndarray  # (M, p)
    S: np.ndarray  # (M, p, p)
    u: np.ndarray  # (M, p)
    R: np.ndarray  # (M, d, d)
    sigma: float = 0.0
    # per-client index sets when g_m only involves a block of y (meta-learning)
    blocks: list | None = None
    # constants that are unbounded on R^d x R^p are taken over ||x||, ||y|| <= radius
    radius: float = 1.0
    batch_size: int = 1
    _checked: bool = field(default=False, repr=False)

    def __post_init__(self):
        self.Q = np.asarray(self.Q, dtype=float)
        self.P = np.asarray(self.P, dtype=float)
        self.r = np.asarray(self.r, dtype=float)
        self.S = np.asarray(self.S, dtype=float)
        self.u = np.asarray(self.u, dtype=float)
        self.R = np.asarray(self.R, dtype=float)
        if self.Q.ndim != 3:
            raise InvalidArgument("Q must have shape (M, p, p)")
        M, p, _ = self.Q.shape
        if self.P.ndim != 3 or self.P.shape[:2] != (M, p):
            raise InvalidArgument("P must have shape (M, p, d)")
        d = self.P.shape[2]
        expected = {"Q": (M, p, p), "r": (M, p), "S": (M, p, p), "u": (M, p), "R": (M, d, d)}
        for name, shape in expected.items():
            if getattr(self, name).shape != shape:
                raise InvalidArgument(f"{name} has shape {getattr(self, name).shape}, expected {shape}")
        if self.sigma < 0 or self.batch_size < 1 or self.radius <= 0:
            raise InvalidArgument("sigma >= 0, batch_size >= 1 and radius > 0 are required")
        if self.blocks is not None:
            if len(self.blocks) != M:
                raise InvalidArgument("one block per client required")
            self.blocks = [np.asarray(b, dtype=int) for b in self.blocks]
        for name in ("Q", "S", "R"):
            A = getattr(self, name)
            if not np.allclose(A, np.transpose(A, (0, 2, 1)), atol=1e-12):
                raise InvalidArgument(f"{name}_m must be symmetric")
        for m in range(M):
            lo, hi = self.spectrum(m)
            if lo <= 0:
                raise InvalidArgument(f"Q_{m} is not positive definite on its block (min eig {lo})")
            for name in ("S", "R"):
                if np.linalg.eigvalsh(getattr(self, name)[m]).min() < -1e-12:
                    raise InvalidArgument(f"{name}_{m} must be positive semidefinite")
        self._checked = True

    @property
    def num_clients(self):
        return self.Q.shape[0]

    @property
    def dim_lower(self):
        return self.Q.shape[1]

    @property
    def dim_upper(self):
        return self.P.shape[2]

    def block(self, m):
        if self.blocks is None:
            return np.arange(self.dim_lower)
        return self.blocks[m]

    def spectrum(self, m):
        b = self.block(m)
        ev = np.linalg.eigvalsh(self.Q[m][np.ix_(b, b)])
        return float(ev[0]), float(ev[-1])

    # averaged data -------------------------------------------------------
    def mean(self, name):
        return getattr(self, name).mean(axis=0)

    def constants(self) -> ProblemConstants:
        M = self.num_clients
        rad = self.radius
        spec = [self.spectrum(m) for m in range(M)]
        mu = min(s[0] for s in spec)
        L_g = max(s[1] for s in spec)
        nrm = lambda A: float(np.linalg.norm(A, 2))  # noqa: E731
        L_f = max(max(nrm(self.R[m]), nrm(self.S[m])) for m in range(M))
        C_gxy = max(nrm(self.P[m]) for m in range(M))
        C_fy = max(nrm(self.S[m]) * (rad + np.linalg.norm(self.u[m])) for m in range(M))
        df = dg = 0.0
        for m in range(M):
            for j in range(m + 1, M):
                Su = self.S[m] @ self.u[m] - self.S[j] @ self.u[j]
                df = max(df, nrm(self.R[m] - self.R[j]) * rad,
                         nrm(self.S[m] - self.S[j]) * rad + np.linalg.norm(Su))
                dQ, dP = nrm(self.Q[m] - self.Q[j]), nrm(self.P[m] - self.P[j])
                dg = max(dg, dQ * rad + dP * rad + np.linalg.norm(self.r[m] - self.r[j]), dQ, dP)
        return ProblemConstants(mu=mu, L_g=L_g, L_f=L_f, L_gxy=0.0, L_gyy=0.0, C_fy=float(C_fy),
                                C_gxy=C_gxy, sigma=float(self.sigma), delta_f=float(df), delta_g=float(dg))


def exact_lower_solution(spec: QuadraticBilevelSpec, x) -> np.ndarray:
    """Minimizer of the client-averaged lower objective at ``x``."""
    x = np.asarray(x, dtype=float)
    return np.linalg.solve(spec.mean("Q"), spec.mean("P") @ x + spec.mean("r"))


def upper_value(spec: QuadraticBilevelSpec, x) -> float:
    """``F(x)``: average upper objective at ``(x, y*(x))``."""
    x = np.asarray(x, dtype=float)
    y = exact_lower_solution(spec, x)
    tot = 0.0
    for m in range(spec.num_clients):
        e = y - spec.u[m]
        tot += 0.5 * e @ spec.S[m] @ e + 0.5 * x @ spec.R[m] @ x
    return tot / spec.num_clients


def exact_hypergradient(spec: QuadraticBilevelSpec, x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    y = exact_lower_solution(spec, x)
    gx = spec.mean("R") @ x
    gy = np.mean([spec.S[m] @ (y - spec.u[m]) for m in range(spec.num_clients)], axis=0)
    # averaged cross Hessian is -mean(P)^T
    return gx + spec.mean("P").T @ np.linalg.solve(spec.mean("Q"), gy)


def exact_indirect_grad(spec: QuadraticBilevelSpec, client: int, x, y) -> np.ndarray:
    """Per-client indirect gradient with the exact local Hessian inverse."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    m = client
    b = spec.block(m)
    gy = spec.S[m] @ (y - spec.u[m])
    z = np.zeros_like(y)
    z[b] = np.linalg.solve(spec.Q[m][np.ix_(b, b)], gy[b])
    return spec.R[m] @ x + spec.P[m].T @ z


def stationary_point(spec: QuadraticBilevelSpec) -> np.ndarray:
    """The unique ``x`` with zero hypergradient (``F`` is a convex quadratic)."""
    d = spec.dim_upper
    g0 = exact_hypergradient(spec, np.zeros(d))
    H = np.column_stack([exact_hypergradient(spec, e) - g0 for e in np.eye(d)])
    return np.linalg.solve(H, -g0)


class QuadraticProblem(BilevelProblem):
    constant_hessian = True

    def __init__(self, spec: QuadraticBilevelSpec):
        self.spec = spec
        self.dim_upper = spec.dim_upper
        self.dim_lower = spec.dim_lower
        self.num_clients = spec.num_clients
        self.batch_size = spec.batch_size
        self._constants = spec.constants()
        p, d = self.dim_lower, self.dim_upper
        b = spec.batch_size
        s = spec.sigma
        self._masks = []
        self._scale_yy = []
        self._scale_xy = []
        self._scale_gy = []
        for m in range(self.num_clients):
            blk = spec.block(m)
            pm = len(blk)
            mask = np.zeros(p)
            mask[blk] = 1.0
            self._masks.append(mask)
            self._scale_yy.append(s * np.sqrt(2.0 / (pm * (pm + 1))) / np.sqrt(b))
            self._scale_xy.append(s / np.sqrt(pm * d * b))
            self._scale_gy.append(s / np.sqrt(pm * b))
        self._scale_fx = s / np.sqrt(d * b)
        self._scale_fy = s / np.sqrt(p * b)
        self._hess_mask = [np.outer(mk, mk) for mk in self._masks]
        self._aff = None

    @property
    def constants(self):
        return self._constants

    @property
    def has_exact(self):
        return True

    # -- sampling -------------------------------------------------------------
    def draw(self, client, rng, kind, count=None):
        p, d = self.dim_lower, self.dim_upper
        n = 1 if count is None else count
        if kind == "f":
            out = [(rng.standard_normal(d), rng.standard_normal(p)) for _ in range(n)]
        elif kind == "g":
            out = rng.standard_normal((n, p)) * self._masks[client]
        elif kind == "gxy":
            out = rng.standard_normal((n, p, d)) * self._masks[client][:, None]
        elif kind == "gyy":
            out = rng.standard_normal((n, p, p))
            if self.spec.blocks is not None:
                out *= self._hess_mask[client]
        else:
            raise InvalidArgument(f"unknown sample kind {kind!r}")
        return out[0] if count is None else out

    # -- oracles ----------------------------------------------------------------
    def grad_x_f(self, client, x, y, sample=None):
        g = self.spec.R[client] @ x
        if sample is not None:
            g = g + self._scale_fx * sample[0]
        return g

    def grad_y_f(self, client, x, y, sample=None):
        g = self.spec.S[client] @ (y - self.spec.u[client])
        if sample is not None:
            g = g + self._scale_fy * sample[1]
        return g

    def grad_y_g(self, client, x, y, sample=None):
        sp = self.spec
        g = sp.Q[client] @ y - sp.P[client] @ x - sp.r[client]
        if sample is not None:
            g = g + self._scale_gy[client] * sample
        return g

    def hvp_yy(self, client, x, y, vec, sample=None):
        return self.hessian_yy(client, sample) @ vec

    def hvp_xy(self, client, x, y, vec, sample=None):
        return self.hessian_xy(client, sample) @ vec

    def hessian_yy(self, client, sample=None):
        H = self.spec.Q[client]
        if sample is not None:
            H = H + self._scale_yy[client] * _sym(sample)
        return H

    def hessian_xy(self, client, sample=None):
        """``d x p`` matrix of mixed second derivatives of ``g_m``."""
        P = self.spec.P[client]
        if sample is not None:
            P = P + self._scale_xy[client] * sample
        return -P.T

    def neumann_chain(self, client, x, y, stack, step, vecs, accumulate=False):
        stack = np.asarray(stack, dtype=float).reshape(-1, self.dim_lower, self.dim_lower)
        return neumann_chain_dense(self.spec.Q[client], stack, self._scale_yy[client], step, vecs, accumulate)

    # -- exact oracles -------------------------------------------------------------
    # All three are affine, so the maps are built once and reused by the
    # per-iteration metrics; the module-level functions stay the reference.
    def _affine(self):
        if self._aff is None:
            sp, d, p = self.spec, self.dim_upper, self.dim_lower
            c_y = exact_lower_solution(sp, np.zeros(d))
            A_y = np.column_stack([exact_lower_solution(sp, e) - c_y for e in np.eye(d)])
            c_F = exact_hypergradient(sp, np.zeros(d))
            A_F = np.column_stack([exact_hypergradient(sp, e) - c_F for e in np.eye(d)])
            ind = []
            for m in range(self.num_clients):
                c = exact_indirect_grad(sp, m, np.zeros(d), np.zeros(p))
                Gy = np.column_stack([exact_indirect_grad(sp, m, np.zeros(d), e) - c for e in np.eye(p)])
                ind.append((sp.R[m], Gy, c))
            self._aff = (A_y, c_y, A_F, c_F, ind)
        return self._aff

    def exact_lower_solution(self, x):
        A, c = self._affine()[:2]
        return A @ np.asarray(x, dtype=float) + c

    def exact_hypergradient(self, x):
        A, c = self._affine()[2:4]
        return A @ np.asarray(x, dtype=float) + c

    def exact_indirect_grad(self, client, x, y):
        R, Gy, c = self._affine()[4][client]
        return R @ np.asarray(x, dtype=float) + Gy @ np.asarray(y, dtype=float) + c

    def upper_value(self, x):
        return upper_value(self.spec, x)

    def lower_value(self, client, x, y):
        sp = self.spec
        return 0.5 * y @ sp.Q[client] @ y - y @ sp.P[client] @ x - y @ sp.r[client]


def _orthogonal(rng, n):
    A = rng.standard_normal((n, n))
    q, r = np.linalg.qr(A)
    return q * np.sign(np.diag(r))


def _spd(rng, n, lo, hi):
    ev = np.linspace(lo, hi, n) if n > 1 else np.array([lo])
    U = _orthogonal(rng, n)
    return _sym((U * ev) @ U.T)


def random_quadratic(d=5, p=5, M=2, mu=0.5, L_g=1.0, sigma=0.0, hetero=0.5, c_gxy=1.0,
                     shared_hessians=True, upper_reg=0.1, seed=0, radius=None,
                     batch_size=1, attainable=False) -> QuadraticBilevelSpec:
    """Random instance with ``eig(Q_m)`` spanning exactly ``[mu, L_g]``.

    ``hetero`` scales the client-to-client differences of ``r``, ``u``, ``S``
    and ``R``.  With ``shared_hessians`` every client has the same ``Q`` and
    ``P``; then the average of the exact per-client indirect gradients at
    ``y*(x)`` is the true hypergradient.  ``radius=None`` picks a ball that
    contains the origin and twice the stationary pair.

    ``attainable`` places the upper target on the lower solution curve,
    ``u0 = y*(x0)`` for a random ``x0``.  With ``upper_reg=0`` and ``hetero=0``
    the stationary point is ``x0`` and every ``grad_y f_m`` vanishes there,
    so the randomised Neumann estimator has no variance floor at the optimum.
    """
    rng = stream(seed, PROBLEM)
    Q0 = _spd(rng, p, mu, L_g)
    k = min(p, d)
    sv = np.linspace(0.5 * c_gxy, c_gxy, k)
    P0 = (_orthogonal(rng, p)[:, :k] * sv) @ _orthogonal(rng, d)[:, :k].T
    r0 = rng.standard_normal(p)
    u0 = rng.standard_normal(p)
    if attainable:
        u0 = np.linalg.solve(Q0, P0 @ rng.standard_normal(d) + r0)
    S0 = _spd(rng, p, 0.5, 1.0)
    Q, P, r, S, u, R = [], [], [], [], [], []
    for _ in range(M):
        if shared_hessians:
            Q.append(Q0)
            P.append(P0)
        else:
            Q.append(_spd(rng, p, mu, L_g))
            Pm = P0 + hetero * 0.2 * rng.standard_normal((p, d))
            Pm *= c_gxy / np.linalg.norm(Pm, 2)
            P.append(Pm)
        r.append(r0 + hetero * rng.standard_normal(p))
        u.append(u0 + hetero * rng.standard_normal(p))
        S.append(S0 + 0.5 * hetero * _spd(rng, p, 0.0, 1.0))
        R.append(upper_reg * (1 + hetero * rng.random()) * np.eye(d))
    spec = QuadraticBilevelSpec(np.array(Q), np.array(P), np.array(r), np.array(S), np.array(u),
                                np.array(R), sigma=sigma, batch_size=batch_size)
    if radius is None:
        xs = stationary_point(spec)
        ys = exact_lower_solution(spec, xs)
        radius = max(1.0, 2 * max(np.linalg.norm(xs), np.linalg.norm(ys)))
    spec.radius = float(radius)
    return spec


def make_quadratic_problem(spec: QuadraticBilevelSpec) -> QuadraticProblem:
    return QuadraticProblem(spec)
