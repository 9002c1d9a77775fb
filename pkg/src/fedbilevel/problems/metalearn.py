"""Distributed meta-learning with quadratic task losses.

Client ``m`` owns task ``m`` with parameters ``y^m`` (a block of ``y``) and a
shared parameter ``x``:

    g_m = 1/(2n) ||Phi_m y^m - t_m||^2 + c/2 ||y^m - E_m x||^2 + r/2 ||y^m||^2
    f_m = 1/(2n') ||Phi'_m y^m - t'_m||^2 + upper_reg/2 ||x||^2

(train data unprimed, test data primed).  Everything is quadratic, so the
problem is assembled into a block-structured :class:`QuadraticBilevelSpec`.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..rng import PROBLEM, stream
from .base import InvalidArgument
from .data import Dataset
from .quadratic import QuadraticBilevelSpec, QuadraticProblem


@dataclass
class MetaLearnSpec:
    train: list[Dataset]  # regression targets in ``labels``
    test: list[Dataset]
    dim_shared: int
    coupling: float = 1.0
    reg: float = 0.1
    upper_reg: float = 0.0
    # E_m maps x into task m's parameter space; defaults to eye(p_m, d)
    maps: list[np.ndarray] | None = None
    sigma: float = 0.0
    batch_size: int = 1

    @property
    def task_dims(self):
        return [t.dim for t in self.train]


def metalearn_quadratic_spec(spec: MetaLearnSpec) -> QuadraticBilevelSpec:
    M = len(spec.train)
    if M < 1 or len(spec.test) != M:
        raise InvalidArgument("need one train and one test set per task")
    if spec.coupling + spec.reg <= 0:
        raise InvalidArgument("coupling + reg must be positive for strong convexity")
    d = spec.dim_shared
    dims = spec.task_dims
    p = sum(dims)
    offs = np.concatenate([[0], np.cumsum(dims)])
    Q = np.zeros((M, p, p))
    P = np.zeros((M, p, d))
    r = np.zeros((M, p))
    S = np.zeros((M, p, p))
    u = np.zeros((M, p))
    R = np.stack([spec.upper_reg * np.eye(d)] * M)
    blocks = []
    for m, (tr, te) in enumerate(zip(spec.train, spec.test)):
        if len(tr) == 0 or len(te) == 0:
            raise InvalidArgument(f"task {m} has an empty dataset")
        if te.dim != tr.dim:
            raise InvalidArgument(f"task {m}: train/test feature dims differ")
        b = np.arange(offs[m], offs[m + 1])
        blocks.append(b)
        pm = dims[m]
        E = np.eye(pm, d) if spec.maps is None else np.asarray(spec.maps[m], dtype=float)
        if E.shape != (pm, d):
            raise InvalidArgument(f"task {m}: map has shape {E.shape}, expected {(pm, d)}")
        Phi, t = tr.features, tr.labels
        n = len(t)
        Q[m][np.ix_(b, b)] = Phi.T @ Phi / n + (spec.coupling + spec.reg) * np.eye(pm)
        P[m][b] = spec.coupling * E
        r[m][b] = Phi.T @ t / n
        Pt, tt = te.features, te.labels
        Sm = Pt.T @ Pt / len(tt)
        S[m][np.ix_(b, b)] = Sm
        u[m][b] = np.linalg.pinv(Sm) @ (Pt.T @ tt / len(tt))
    return QuadraticBilevelSpec(Q, P, r, S, u, R, sigma=spec.sigma, blocks=blocks,
                                batch_size=spec.batch_size)


def make_metalearn_problem(spec: MetaLearnSpec) -> QuadraticProblem:
    return QuadraticProblem(metalearn_quadratic_spec(spec))


def random_tasks(M=3, d=4, task_dim=4, n_train=20, n_test=20, noise=0.1, seed=0):
    """Linear-regression tasks whose true weights scatter around a common centre."""
    rng = stream(seed, PROBLEM, 4)
    centre = rng.standard_normal(task_dim)
    train, test = [], []
    for _ in range(M):
        w = centre + 0.3 * rng.standard_normal(task_dim)
        for n, out in ((n_train, train), (n_test, test)):
            A = rng.standard_normal((n, task_dim))
            out.append(Dataset(A, A @ w + noise * rng.standard_normal(n)))
    return train, test
