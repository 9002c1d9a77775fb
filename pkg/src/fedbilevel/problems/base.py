"""Bilevel problem interface and the Lipschitz/heterogeneity constants."""
from __future__ import annotations

import math
from abc import ABC, abstractmethod
from dataclasses import dataclass, fields

import numpy as np

from .. import kernels
from ..rng import ORACLE, stream


class InvalidArgument(ValueError):
    """Bad client index, wrong dimension or an infeasible construction."""


class DomainError(ValueError):
    """Non-finite input to an oracle."""


@dataclass(frozen=True)
class ProblemConstants:
    mu: float
    L_g: float
    L_f: float
    L_gxy: float
    L_gyy: float
    C_fy: float
    C_gxy: float
    sigma: float = 0.0
    delta_f: float = 0.0
    delta_g: float = 0.0

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if not math.isfinite(v) or v < 0:
                raise InvalidArgument(f"constant {f.name}={v} must be finite and non-negative")
        if self.mu <= 0:
            raise InvalidArgument("mu must be positive")
        if self.mu > self.L_g * (1 + 1e-12):
            raise InvalidArgument(f"mu={self.mu} exceeds L_g={self.L_g}")

    def derived(self, K: int = 1) -> "DerivedConstants":
        return DerivedConstants.from_constants(self, K)


def _lk_squared(c: ProblemConstants, K: int) -> float:
    mu, Lg = c.mu, c.L_g
    denom = 2 * mu * Lg - mu ** 2
    out = 2 * c.L_f ** 2
    out += 6 * c.C_gxy ** 2 * c.L_f ** 2 * K / denom
    out += 6 * c.C_fy ** 2 * c.L_gxy ** 2 * K / denom
    num = 6 * c.C_gxy ** 2 * c.L_f ** 2 * K ** 3 * c.L_gyy ** 2
    if num > 0:
        gap = (Lg - mu) ** 2
        out += math.inf if gap == 0 else num / (gap * denom)
    return out


@dataclass(frozen=True)
class DerivedConstants:
    """Closed-form constants computed from :class:`ProblemConstants`.

    ``L_bar`` governs the tracking-error split, ``L_hat`` the smoothness of the
    exact per-client indirect gradient and ``L_K`` that of the sampled
    estimator with ``K`` Neumann terms.
    """

    kappa: float
    L_y: float
    L: float
    L_bar: float
    L_hat: float
    L_K: float
    delta_hat: float

    @classmethod
    def from_constants(cls, c: ProblemConstants, K: int = 1) -> "DerivedConstants":
        mu = c.mu
        kappa = c.C_gxy / mu
        jac_lip = c.C_gxy * c.L_gyy / mu ** 2 + c.L_gxy / mu
        L_y = jac_lip * (1 + kappa)
        L = (c.L_f + c.C_gxy * c.L_f / mu + c.C_fy * jac_lip) * (1 + kappa)
        L_bar_sq = (
            c.L_f ** 2
            + c.L_gxy ** 2 * c.C_fy ** 2 / mu ** 2
            + c.L_gyy ** 2 * c.C_gxy ** 2 * c.C_fy ** 2 / mu ** 4
            + c.L_f ** 2 * c.C_gxy ** 2 / mu ** 2
        )
        L_hat = math.sqrt(8 * L_bar_sq)
        return cls(
            kappa=kappa,
            L_y=L_y,
            L=L,
            L_bar=math.sqrt(L_bar_sq),
            L_hat=L_hat,
            L_K=math.sqrt(_lk_squared(c, K)),
            delta_hat=math.sqrt(delta_hat_squared(c, c.delta_f, c.delta_g)),
        )


def delta_hat_squared(c: ProblemConstants, delta_f: float, delta_g: float) -> float:
    """Heterogeneity bound on exact per-client indirect gradients."""
    mu = c.mu
    return (
        4 * delta_f ** 2
        + 4 * c.C_fy ** 2 * delta_g ** 2 / mu ** 2
        + 4 * c.C_gxy ** 2 * c.C_fy ** 2 * delta_g ** 2 / mu ** 4
        + 4 * c.C_gxy ** 2 * delta_f ** 2 / mu ** 2
    )


class BilevelProblem(ABC):
    """Federated bilevel problem with per-client stochastic oracles.

    Samples are drawn explicitly with :meth:`draw` and then passed to the
    oracle methods, so one realization can be evaluated at several points
    (the variance-reduced recursions need exactly that).  A ``None`` sample
    means the noiseless oracle.  Sample kinds:

    ``"f"``   upper-level sample xi (feeds ``grad_x_f`` and ``grad_y_f``)
    ``"g"``   lower-level sample for ``grad_y_g``
    ``"gxy"`` lower-level sample for ``hvp_xy``
    ``"gyy"`` lower-level sample for ``hvp_yy``
    """

    dim_upper: int
    dim_lower: int
    num_clients: int
    batch_size: int = 1
    # lower Hessians independent of (x, y): one chain pass can serve several points
    constant_hessian: bool = False

    # -- sampling -----------------------------------------------------------
    @abstractmethod
    def draw(self, client: int, rng: np.random.Generator, kind: str, count: int | None = None):
        """Draw one sample (``count=None``) or a stack of ``count`` samples."""

    # -- oracles -------------------------------------------------------------
    @abstractmethod
    def grad_x_f(self, client, x, y, sample=None) -> np.ndarray: ...

    @abstractmethod
    def grad_y_f(self, client, x, y, sample=None) -> np.ndarray: ...

    @abstractmethod
    def grad_y_g(self, client, x, y, sample=None) -> np.ndarray: ...

    @abstractmethod
    def hvp_yy(self, client, x, y, vec, sample=None) -> np.ndarray: ...

    @abstractmethod
    def hvp_xy(self, client, x, y, vec, sample=None) -> np.ndarray: ...

    @property
    @abstractmethod
    def constants(self) -> ProblemConstants: ...

    @property
    def has_exact(self) -> bool:
        return False

    def neumann_chain(self, client, x, y, stack, step, vecs, accumulate=False):
        """Apply ``prod_i (I - step * H_i)`` (first sample acts first) to each row of ``vecs``.

        ``stack`` comes from ``draw(client, rng, "gyy", count)``.  Subclasses
        with dense Hessians override this with the compiled kernel.
        """
        cur = np.array(vecs, dtype=float, copy=True, ndmin=2)
        out = cur.copy() if accumulate else None
        for s in self.iter_stack(stack):
            for r in range(cur.shape[0]):
                cur[r] = cur[r] - step * self.hvp_yy(client, x, y, cur[r], s)
            if accumulate:
                out += cur
        return out if accumulate else cur

    def iter_stack(self, stack):
        return iter(stack)

    # -- validation helpers ----------------------------------------------------
    def check_client(self, client):
        if not (0 <= int(client) < self.num_clients) or int(client) != client:
            raise InvalidArgument(f"client index {client} out of range [0, {self.num_clients})")

    def check_point(self, x, y):
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        if x.shape != (self.dim_upper,):
            raise InvalidArgument(f"x has shape {x.shape}, expected ({self.dim_upper},)")
        if y.shape != (self.dim_lower,):
            raise InvalidArgument(f"y has shape {y.shape}, expected ({self.dim_lower},)")
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
            raise DomainError("non-finite x or y")
        return x, y

    def check_vec(self, vec, n):
        vec = np.asarray(vec, dtype=float)
        if vec.shape != (n,):
            raise InvalidArgument(f"vector has shape {vec.shape}, expected ({n},)")
        return vec


# ---------------------------------------------------------------------------
# seed-addressed oracle entry points


def _oracle_rng(seed, client):
    return stream(seed, ORACLE, client)


def sample_partials(problem: BilevelProblem, client: int, x, y, seed: int):
    """Stochastic ``(grad_x f, grad_y f, grad_y g)`` at ``(x, y)``, reproducible per seed."""
    problem.check_client(client)
    x, y = problem.check_point(x, y)
    rng = _oracle_rng(seed, client)
    xi = problem.draw(client, rng, "f")
    zeta = problem.draw(client, rng, "g")
    return (
        problem.grad_x_f(client, x, y, xi),
        problem.grad_y_f(client, x, y, xi),
        problem.grad_y_g(client, x, y, zeta),
    )


def hvp_yy_g(problem: BilevelProblem, client: int, x, y, vec, seed: int) -> np.ndarray:
    problem.check_client(client)
    x, y = problem.check_point(x, y)
    vec = problem.check_vec(vec, problem.dim_lower)
    s = problem.draw(client, _oracle_rng(seed, client), "gyy")
    return problem.hvp_yy(client, x, y, vec, s)


def hvp_xy_g(problem: BilevelProblem, client: int, x, y, vec, seed: int) -> np.ndarray:
    """Cross second derivative ``d/dx (grad_y g)^T vec``, a vector of length ``dim_upper``."""
    problem.check_client(client)
    x, y = problem.check_point(x, y)
    vec = problem.check_vec(vec, problem.dim_lower)
    s = problem.draw(client, _oracle_rng(seed, client), "gxy")
    return problem.hvp_xy(client, x, y, vec, s)


@dataclass
class HeterogeneityReport:
    delta_f: float
    delta_g: float
    # largest pairwise gap of exact indirect gradients, and its bound
    # from the measured delta_f/delta_g; None unless the problem has exact oracles
    delta_hat: float | None = None
    delta_hat_bound: float | None = None

    def __iter__(self):
        yield self.delta_f
        yield self.delta_g

    @property
    def within_bound(self) -> bool | None:
        if self.delta_hat is None:
            return None
        return self.delta_hat <= self.delta_hat_bound * (1 + 1e-9) + 1e-12


def measure_heterogeneity(problem: BilevelProblem, x, y, num_probe_points: int = 1,
                          radius: float = 1.0, seed: int = 0) -> HeterogeneityReport:
    """Largest client-to-client gap of the noiseless partials over probe points.

    The first probe point is ``(x, y)``; the rest are drawn uniformly in the
    ball of the given radius around it.  Hessian gaps are measured in spectral
    norm when the problem exposes dense Hessians, otherwise through products
    with random unit vectors.
    """
    if num_probe_points < 1:
        raise InvalidArgument("num_probe_points must be >= 1")
    x, y = problem.check_point(x, y)
    rng = stream(seed, ORACLE, 0, 1)
    M = problem.num_clients
    points = [(x, y)]
    for _ in range(num_probe_points - 1):
        dx = rng.standard_normal(problem.dim_upper)
        dy = rng.standard_normal(problem.dim_lower)
        scale = radius * rng.random() / max(np.sqrt(dx @ dx + dy @ dy), 1e-300)
        points.append((x + scale * dx, y + scale * dy))

    dense = hasattr(problem, "hessian_yy") and hasattr(problem, "hessian_xy")
    probes = [rng.standard_normal(problem.dim_lower) for _ in range(4)]
    probes = [v / np.linalg.norm(v) for v in probes]

    df = dg = 0.0
    dhat = 0.0 if problem.has_exact else None
    for px, py in points:
        gx = [problem.grad_x_f(m, px, py) for m in range(M)]
        gyf = [problem.grad_y_f(m, px, py) for m in range(M)]
        gyg = [problem.grad_y_g(m, px, py) for m in range(M)]
        if dense:
            Hyy = [problem.hessian_yy(m) for m in range(M)]
            Hxy = [problem.hessian_xy(m) for m in range(M)]
        ind = [problem.exact_indirect_grad(m, px, py) for m in range(M)] if dhat is not None else None
        for m in range(M):
            for j in range(m + 1, M):
                df = max(df, np.linalg.norm(gx[m] - gx[j]), np.linalg.norm(gyf[m] - gyf[j]))
                dg = max(dg, np.linalg.norm(gyg[m] - gyg[j]))
                if dense:
                    dg = max(dg, np.linalg.norm(Hyy[m] - Hyy[j], 2), np.linalg.norm(Hxy[m] - Hxy[j], 2))
                else:
                    for v in probes:
                        dg = max(
                            dg,
                            np.linalg.norm(problem.hvp_yy(m, px, py, v) - problem.hvp_yy(j, px, py, v)),
                            np.linalg.norm(problem.hvp_xy(m, px, py, v) - problem.hvp_xy(j, px, py, v)),
                        )
                if ind is not None:
                    dhat = max(dhat, np.linalg.norm(ind[m] - ind[j]))
    bound = None
    if dhat is not None:
        bound = math.sqrt(delta_hat_squared(problem.constants, df, dg))
    return HeterogeneityReport(float(df), float(dg), None if dhat is None else float(dhat), bound)


def neumann_chain_dense(Q, noise, scale, step, vecs, accumulate=False):
    return kernels.neumann_chain(
        np.ascontiguousarray(Q, dtype=np.float64),
        np.ascontiguousarray(noise, dtype=np.float64),
        float(scale),
        float(step),
        np.ascontiguousarray(np.atleast_2d(vecs), dtype=np.float64),
        bool(accumulate),
    )
