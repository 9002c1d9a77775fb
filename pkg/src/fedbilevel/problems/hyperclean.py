"""Federated data hyper-cleaning.

Upper variable ``x`` holds one logit per training sample (across all
clients); the weight of sample ``i`` is ``sigmoid(x_i)``.  Client ``m`` has

    g_m(x, y) = mean_{i in train_m} sigmoid(x_i) * l(a_i'y, b_i) + nu * ||y||^2
    f_m(x, y) = mean_{j in val_m} l(a_j'y, b_j)

with ``l`` the binary logistic loss and labels ``b`` in {0, 1}.  Stochastic
oracles average over a minibatch drawn uniformly with replacement.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from .base import BilevelProblem, InvalidArgument, ProblemConstants, measure_heterogeneity
from .data import Dataset


def sigmoid(x):
    return expit(x)


def _sigmoid_prime(x):
    s = expit(x)
    return s * (1.0 - s)


def _loss(z, b):
    # log(1 + exp(-s z)) with s = 2b - 1
    return np.logaddexp(0.0, -(2 * b - 1) * z)


def _dloss(z, b):
    return expit(z) - b


def _d2loss(z):
    s = expit(z)
    return s * (1.0 - s)


@dataclass
class HyperCleanSpec:
    train: list[Dataset]
    val: list[Dataset]
    nu: float = 0.1
    weight_fn: object = field(default=sigmoid)
    weight_grad: object = field(default=_sigmoid_prime)
    corruption_rate: float = 0.0
    # per-client boolean masks of flipped training labels (reporting only)
    corrupted: list[np.ndarray] | None = None
    batch_size: int = 1


class HyperCleanProblem(BilevelProblem):
    def __init__(self, spec: HyperCleanSpec):
        if spec.nu <= 0:
            raise InvalidArgument("nu must be positive (the lower level loses strong convexity otherwise)")
        if len(spec.train) != len(spec.val) or not spec.train:
            raise InvalidArgument("need matching, non-empty train/val lists")
        for m, (tr, va) in enumerate(zip(spec.train, spec.val)):
            if len(tr) == 0 or len(va) == 0:
                raise InvalidArgument(f"client {m} has an empty dataset")
            if tr.dim != spec.train[0].dim or va.dim != spec.train[0].dim:
                raise InvalidArgument("feature dimension differs between datasets")
        if spec.batch_size < 1:
            raise InvalidArgument("batch_size must be >= 1")
        self.spec = spec
        self.num_clients = len(spec.train)
        self.dim_lower = spec.train[0].dim
        sizes = [len(t) for t in spec.train]
        self.offsets = np.concatenate([[0], np.cumsum(sizes)])
        self.dim_upper = int(self.offsets[-1])
        self.batch_size = spec.batch_size
        self._constants = self._estimate_constants()

    # -- helpers ---------------------------------------------------------------
    def _slice(self, m):
        return slice(self.offsets[m], self.offsets[m + 1])

    def _train(self, m, idx=None):
        tr = self.spec.train[m]
        if idx is None:
            return tr.features, tr.labels, np.arange(len(tr))
        return tr.features[idx], tr.labels[idx], idx

    def _val(self, m, idx=None):
        va = self.spec.val[m]
        if idx is None:
            return va.features, va.labels
        return va.features[idx], va.labels[idx]

    def _estimate_constants(self):
        nu = self.spec.nu
        a_tr = max(float(np.max(np.sum(t.features ** 2, axis=1))) for t in self.spec.train)
        a_va = max(float(np.max(np.sum(v.features ** 2, axis=1))) for v in self.spec.val)
        na_tr, na_va = np.sqrt(a_tr), np.sqrt(a_va)
        # |sigmoid'| <= 1/4, |sigmoid''| <= 1/(6 sqrt 3), |l'| <= 1, |l''| <= 1/4, |l'''| <= 1/(6 sqrt 3)
        c3 = 1.0 / (6 * np.sqrt(3.0))
        c = ProblemConstants(
            mu=2 * nu,
            L_g=2 * nu + 0.25 * a_tr,
            L_f=0.25 * a_va,
            L_gxy=c3 * na_tr + a_tr / 16,
            L_gyy=a_tr / 16 + c3 * a_tr * na_tr,
            C_fy=na_va,
            C_gxy=0.25 * na_tr,
            sigma=2 * max(na_tr, na_va),
        )
        self._constants = c
        x0, y0 = np.zeros(self.dim_upper), np.zeros(self.dim_lower)
        df, dg = measure_heterogeneity(self, x0, y0)
        return ProblemConstants(**{**c.__dict__, "delta_f": df, "delta_g": dg})

    @property
    def constants(self):
        return self._constants

    # -- sampling -------------------------------------------------------------------
    def draw(self, client, rng, kind, count=None):
        B = self.batch_size
        n = len(self.spec.val[client]) if kind == "f" else len(self.spec.train[client])
        if kind not in ("f", "g", "gxy", "gyy"):
            raise InvalidArgument(f"unknown sample kind {kind!r}")
        shape = (B,) if count is None else (count, B)
        return rng.integers(0, n, size=shape)

    # -- oracles ------------------------------------------------------------------------
    def grad_x_f(self, client, x, y, sample=None):
        return np.zeros(self.dim_upper)

    def grad_y_f(self, client, x, y, sample=None):
        A, b = self._val(client, sample)
        return A.T @ _dloss(A @ y, b) / len(b)

    def _weights(self, client, x, local):
        return self.spec.weight_fn(x[self._slice(client)][local])

    def grad_y_g(self, client, x, y, sample=None):
        A, b, loc = self._train(client, sample)
        w = self._weights(client, x, loc)
        return A.T @ (w * _dloss(A @ y, b)) / len(b) + 2 * self.spec.nu * y

    def hvp_yy(self, client, x, y, vec, sample=None):
        A, b, loc = self._train(client, sample)
        w = self._weights(client, x, loc)
        return A.T @ (w * _d2loss(A @ y) * (A @ vec)) / len(b) + 2 * self.spec.nu * vec

    def hvp_xy(self, client, x, y, vec, sample=None):
        A, b, loc = self._train(client, sample)
        xs = x[self._slice(client)][loc]
        coef = self.spec.weight_grad(xs) * _dloss(A @ y, b) * (A @ vec) / len(b)
        out = np.zeros(self.dim_upper)
        np.add.at(out, self.offsets[client] + loc, coef)
        return out

    def hessian_yy(self, client, x, y):
        A, b, loc = self._train(client)
        w = self._weights(client, x, loc)
        return (A.T * (w * _d2loss(A @ y))) @ A / len(b) + 2 * self.spec.nu * np.eye(self.dim_lower)

    # -- objectives and deterministic solves ----------------------------------------------
    def lower_value(self, client, x, y):
        A, b, loc = self._train(client)
        w = self._weights(client, x, loc)
        return float(np.mean(w * _loss(A @ y, b)) + self.spec.nu * y @ y)

    def upper_value_at(self, client, y):
        A, b = self._val(client)
        return float(np.mean(_loss(A @ y, b)))

    def solve_lower(self, x, y0=None, tol=1e-12, max_iter=100):
        """Newton's method on the client-averaged lower objective."""
        y = np.zeros(self.dim_lower) if y0 is None else np.array(y0, dtype=float)
        M = self.num_clients
        for _ in range(max_iter):
            g = sum(self.grad_y_g(m, x, y) for m in range(M)) / M
            if np.linalg.norm(g) < tol:
                break
            H = sum(self.hessian_yy(m, x, y) for m in range(M)) / M
            y = y - np.linalg.solve(H, g)
        return y

    def hypergradient(self, x, y=None):
        """Hypergradient at ``x`` using dense Hessians and a Newton lower solve."""
        M = self.num_clients
        y = self.solve_lower(x, y)
        H = sum(self.hessian_yy(m, x, y) for m in range(M)) / M
        gy = sum(self.grad_y_f(m, x, y) for m in range(M)) / M
        z = np.linalg.solve(H, gy)
        return -sum(self.hvp_xy(m, x, y, z) for m in range(M)) / M

    def sample_weights(self, x):
        return self.spec.weight_fn(np.asarray(x, dtype=float))


def make_hyperclean_problem(spec: HyperCleanSpec) -> HyperCleanProblem:
    return HyperCleanProblem(spec)
