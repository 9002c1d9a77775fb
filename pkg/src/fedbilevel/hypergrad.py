"""Stochastic Neumann-series hypergradient estimator and its bias."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from .problems.base import BilevelProblem, InvalidArgument, ProblemConstants
from .problems.quadratic import exact_indirect_grad as _exact_indirect_grad
from .rng import ORACLE, stream

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class NeumannConfig:
    K: int
    step: float | None = None  # defaults to 1 / L_g
    seed: int = 0

    def resolve_step(self, constants: ProblemConstants) -> float:
        if self.K < 1 or int(self.K) != self.K:
            raise InvalidArgument(f"K must be a positive integer, got {self.K}")
        step = 1.0 / constants.L_g if self.step is None else float(self.step)
        if not 0 < step <= (1.0 / constants.L_g) * (1 + 1e-12):
            raise InvalidArgument(f"Neumann step {step} outside (0, 1/L_g] with L_g={constants.L_g}")
        return step


@dataclass
class HyperDraw:
    """One composite sample: the upper sample, the cross-Hessian sample and the chain."""

    k: int
    xi: object
    zeta0: object
    chain: object
    seed: object = None


@dataclass
class HypergradSample:
    value: np.ndarray
    samples_consumed: int
    index_k: int
    seed: object = None


def draw_hyper(problem: BilevelProblem, client: int, rng: np.random.Generator, K: int,
               enumerate_k: bool = False, seed=None) -> HyperDraw:
    """Draw ``k ~ U{0..K-1}`` then the samples; ``enumerate_k`` draws the full chain of ``K-1``."""
    k = int(rng.integers(0, K))
    xi = problem.draw(client, rng, "f")
    zeta0 = problem.draw(client, rng, "gxy")
    n_chain = K - 1 if enumerate_k else k
    chain = problem.draw(client, rng, "gyy", n_chain)
    return HyperDraw(k, xi, zeta0, chain, seed)


def hypergrad_from_draw(problem: BilevelProblem, client: int, points, draw: HyperDraw, K: int,
                        step: float) -> list[np.ndarray]:
    """Evaluate the estimator at each ``(x, y)`` in ``points`` with one shared draw."""
    gys = [problem.grad_y_f(client, x, y, draw.xi) for x, y in points]
    if problem.constant_hessian and len(points) > 1:
        x0, y0 = points[0]
        Z = problem.neumann_chain(client, x0, y0, draw.chain, step, np.array(gys))
    else:
        Z = [problem.neumann_chain(client, x, y, draw.chain, step, gy)[0] for (x, y), gy in zip(points, gys)]
    out = []
    for (x, y), z in zip(points, Z):
        out.append(problem.grad_x_f(client, x, y, draw.xi) - K * step * problem.hvp_xy(client, x, y, z, draw.zeta0))
    return out


def neumann_hypergrad(problem: BilevelProblem, client: int, x, y, cfg: NeumannConfig) -> HypergradSample:
    problem.check_client(client)
    x, y = problem.check_point(x, y)
    step = cfg.resolve_step(problem.constants)
    draw = draw_hyper(problem, client, stream(cfg.seed, ORACLE, client), cfg.K, seed=cfg.seed)
    (value,) = hypergrad_from_draw(problem, client, [(x, y)], draw, cfg.K, step)
    return HypergradSample(value, cfg.K + 1, draw.k, cfg.seed)


def neumann_enumerated(problem: BilevelProblem, client: int, x, y, cfg: NeumannConfig):
    """Average of the estimator over every ``k`` with one shared chain of ``K-1`` samples.

    Returns ``(value, draw)``; the draw lets callers rebuild the sampled Hessians.
    """
    problem.check_client(client)
    x, y = problem.check_point(x, y)
    step = cfg.resolve_step(problem.constants)
    draw = draw_hyper(problem, client, stream(cfg.seed, ORACLE, client), cfg.K, enumerate_k=True,
                      seed=cfg.seed)
    return _enumerated_value(problem, client, x, y, draw, step), draw


def _enumerated_value(problem, client, x, y, draw, step):
    # K * step * mean_k(prefix_k) == step * sum_k prefix_k
    gy = problem.grad_y_f(client, x, y, draw.xi)
    z = problem.neumann_chain(client, x, y, draw.chain, step, gy, accumulate=True)[0]
    return problem.grad_x_f(client, x, y, draw.xi) - step * problem.hvp_xy(client, x, y, z, draw.zeta0)


def exact_indirect_grad(spec, client, x, y):
    """Per-client target of the estimator, with the exact local Hessian inverse (quadratic only)."""
    spec = getattr(spec, "spec", spec)
    return _exact_indirect_grad(spec, client, x, y)


def bias_bound(constants: ProblemConstants, K: int) -> float:
    if K < 1:
        raise InvalidArgument("K must be >= 1")
    c = constants
    return c.C_gxy * c.C_fy / c.mu * (1.0 - c.mu / c.L_g) ** K


def empirical_bias(problem, client, x, y, cfg: NeumannConfig, num_samples: int = 1000,
                   enumerate_k: bool = False, return_stderr: bool = False):
    """Norm of (mean estimate - exact indirect gradient) over ``num_samples`` seeded draws.

    With ``enumerate_k`` each draw is averaged over all ``k`` exactly; for a
    noiseless problem a single such draw already has no Monte-Carlo error.
    """
    if not hasattr(problem, "exact_indirect_grad"):
        raise InvalidArgument("empirical_bias needs a problem with an exact indirect gradient")
    if not enumerate_k and num_samples < 1000:
        raise InvalidArgument("num_samples must be >= 1000")
    x, y = problem.check_point(x, y)
    step = cfg.resolve_step(problem.constants)
    target = problem.exact_indirect_grad(client, x, y)
    vals = np.empty((num_samples, problem.dim_upper))
    for i in range(num_samples):
        rng = stream(cfg.seed, ORACLE, client, i)
        if enumerate_k:
            draw = draw_hyper(problem, client, rng, cfg.K, enumerate_k=True)
            vals[i] = _enumerated_value(problem, client, x, y, draw, step)
        else:
            draw = draw_hyper(problem, client, rng, cfg.K)
            vals[i] = hypergrad_from_draw(problem, client, [(x, y)], draw, cfg.K, step)[0]
    mean = vals.mean(axis=0)
    bias = float(np.linalg.norm(mean - target))
    if num_samples > 1:
        se = float(np.sqrt(vals.var(axis=0, ddof=1).sum() / num_samples))
    else:
        se = 0.0
    return (bias, se) if return_stderr else bias


def choose_K(constants: ProblemConstants, T: int) -> int:
    """Smallest Neumann length of the form ceil((L_g/mu) log(C_gxy C_fy T / mu)), at least 1."""
    if T < 1:
        raise InvalidArgument("T must be >= 1")
    c = constants
    arg = c.C_gxy * c.C_fy * T / c.mu
    if arg <= 0:
        log.warning("choose_K: log argument %g is not positive; using K=1", arg)
        return 1
    return max(1, math.ceil(c.L_g / c.mu * math.log(arg)))
