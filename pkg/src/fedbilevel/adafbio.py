"""AdaFBiO building blocks: schedules, STORM estimators and adaptive matrices.

The server owns an :class:`AdaptiveState`; ``A_t`` is diagonal (stored as
``A_diag``) and ``B_t`` is a multiple of the identity (``B_scalar``).
"""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .hypergrad import HypergradSample, draw_hyper, hypergrad_from_draw
from .problems.base import InvalidArgument

log = logging.getLogger(__name__)

RULES = ("norm_scalar", "adabelief", "amsgrad", "identity")


class ConfigError(InvalidArgument):
    """A schedule or experiment setting violates a required inequality."""


class ContractViolation(RuntimeError):
    pass


class NumericalError(FloatingPointError):
    def __init__(self, msg, iteration=None):
        super().__init__(msg if iteration is None else f"{msg} (iteration {iteration})")
        self.iteration = iteration


@dataclass
class ScheduleConfig:
    k: float = 1.0
    n: float | None = None  # None -> max(2, M k^3, q^3)
    c1: float = 1.0
    c2: float = 1.0
    gamma: float = 0.1
    lam: float = 0.1
    q: int | None = None  # None -> ceil(T^(1/3))
    T: int = 100
    K: int | None = None  # None -> choose_K(constants, T)
    rho: float = 0.01
    varrho: float | str = 0.9  # or "track_beta": varrho_t = 1 - beta_t
    vartheta: float | None = None  # c2 / c1
    tau: float | None = None  # lam / gamma
    theta: float = 1.0
    b_hat: float = 1000.0
    neumann_step: float | None = None  # None -> 1 / L_g

    def resolved(self, M: int, constants=None, validate: bool = True) -> "ScheduleConfig":
        """Copy with every ``None`` default filled in, then validated unless ``validate`` is false."""
        from .hypergrad import choose_K

        c = replace(self)
        if c.q is None:
            c.q = max(1, math.ceil(round(c.T ** (1 / 3), 12)))
        if c.n is None:
            c.n = max(2.0, math.ceil(M * c.k ** 3), float(c.q) ** 3)
        if c.K is None:
            if constants is None:
                raise ConfigError("K unset and no problem constants to choose it from")
            c.K = choose_K(constants, c.T)
        if c.vartheta is None:
            c.vartheta = c.c2 / c.c1
        if c.tau is None:
            c.tau = c.lam / c.gamma
        if validate:
            c.validate(M)
        return c

    def validate(self, M: int):
        def need(ok, what):
            if not ok:
                raise ConfigError(what)

        need(self.k > 0, "k > 0")
        need(self.T >= 1 and int(self.T) == self.T, "T must be a positive integer")
        need(self.q is not None and self.q >= 1 and int(self.q) == self.q, "q must be a positive integer")
        need(self.K is not None and self.K >= 1 and int(self.K) == self.K, "K must be a positive integer")
        need(self.n is not None and self.n >= 2, "n >= 2")
        need(self.c1 > 0 and self.c2 > 0, "c1 > 0 and c2 > 0")
        need(self.gamma > 0 and self.lam > 0, "gamma > 0 and lambda > 0")
        need(self.rho > 0, "rho > 0")
        need(0 < self.theta <= 1, "0 < theta <= 1")
        need(self.b_hat > 0, "b_hat > 0")
        if self.varrho != "track_beta":
            need(isinstance(self.varrho, (int, float)) and 0 <= self.varrho < 1,
                 "varrho in [0, 1) or 'track_beta'")
        e0 = eta(0, self, M)
        need(e0 <= 1, f"eta_0 = k M^(1/3) / n^(1/3) = {e0:.6g} <= 1 (needs n >= M k^3)")
        need(self.c1 * e0 ** 2 <= 1, f"alpha_1 = c1 eta_0^2 = {self.c1 * e0 ** 2:.6g} <= 1")
        need(self.c2 * e0 ** 2 <= 1, f"beta_1 = c2 eta_0^2 = {self.c2 * e0 ** 2:.6g} <= 1")
        if self.vartheta is not None:
            need(math.isclose(self.c2, self.vartheta * self.c1, rel_tol=1e-9), "c2 = vartheta * c1")
        if self.tau is not None:
            need(math.isclose(self.lam, self.tau * self.gamma, rel_tol=1e-9), "lambda = tau * gamma")

    def to_dict(self):
        return asdict(self)


def eta(t: int, cfg: ScheduleConfig, M: int) -> float:
    if t < 0:
        raise InvalidArgument("t must be >= 0")
    return cfg.k * M ** (1 / 3) / (cfg.n + t) ** (1 / 3)


def alpha_next(t, cfg, M):
    """``alpha_{t+1}`` (paired with ``eta_t``)."""
    return cfg.c1 * eta(t, cfg, M) ** 2


def beta_next(t, cfg, M):
    return cfg.c2 * eta(t, cfg, M) ** 2


# ---------------------------------------------------------------------------
# STORM recursions


def storm_update_v(v_old, grad_new, grad_old, alpha):
    if not 0 < alpha <= 1:
        raise InvalidArgument(f"alpha={alpha} outside (0, 1]")
    return grad_new + (1.0 - alpha) * (v_old - grad_old)


def storm_update_w(w_old, hg_new: HypergradSample, hg_old: HypergradSample, beta):
    if not 0 < beta <= 1:
        raise InvalidArgument(f"beta={beta} outside (0, 1]")
    if hg_new.seed != hg_old.seed:
        raise ContractViolation("hypergradient pair was not drawn from the same sample")
    return hg_new.value + (1.0 - beta) * (w_old - hg_old.value)


# ---------------------------------------------------------------------------
# adaptive matrices


@dataclass
class AdaptiveState:
    rule: str
    a: np.ndarray
    b: float
    A_diag: np.ndarray
    B_scalar: float
    anchor_w: np.ndarray
    anchor_v: np.ndarray
    ema: np.ndarray | None = None  # amsgrad: EMA that the running max ``a`` tracks
    clamp_hits: int = 0

    @classmethod
    def initial(cls, rule: str, d: int, p: int, rho: float) -> "AdaptiveState":
        if rule not in RULES:
            raise InvalidArgument(f"unknown adaptive rule {rule!r}; choose from {RULES}")
        one = rule == "identity"
        return cls(
            rule=rule,
            a=np.zeros(d),
            b=0.0,
            A_diag=np.ones(d) if one else np.full(d, float(rho)),
            B_scalar=1.0 if one else float(rho),
            anchor_w=np.zeros(d),
            anchor_v=np.zeros(p),
            ema=np.zeros(d) if rule == "amsgrad" else None,
        )


def update_adaptive(state: AdaptiveState, w_bar, v_bar, cfg: ScheduleConfig, varrho: float | None = None):
    """One server-side matrix update from the averaged estimators; returns a new state."""
    w_bar = np.asarray(w_bar, dtype=float)
    v_bar = np.asarray(v_bar, dtype=float)
    if not (np.all(np.isfinite(w_bar)) and np.all(np.isfinite(v_bar))):
        raise NumericalError("non-finite averaged estimator in update_adaptive")
    if state.rule == "identity":
        return replace(state, A_diag=np.ones_like(state.A_diag), B_scalar=1.0)
    if varrho is None:
        if cfg.varrho == "track_beta":
            raise InvalidArgument("varrho='track_beta' needs an explicit varrho value per call")
        varrho = cfg.varrho
    r = float(varrho)
    ema = state.ema
    if state.rule == "adabelief":
        dw = w_bar - state.anchor_w
        a = r * state.a + (1 - r) * dw * dw
        b = r * state.b + (1 - r) * float(np.linalg.norm(v_bar - state.anchor_v))
    else:
        second = w_bar * w_bar
        if state.rule == "amsgrad":
            ema = r * state.ema + (1 - r) * second
            a = np.maximum(state.a, ema)
        else:
            a = r * state.a + (1 - r) * second
        b = r * state.b + (1 - r) * float(np.linalg.norm(v_bar))
    hits = state.clamp_hits
    if b > cfg.b_hat:
        log.info("b_t=%g clamped to b_hat=%g", b, cfg.b_hat)
        b = float(cfg.b_hat)
        hits += 1
    return AdaptiveState(
        rule=state.rule,
        a=a,
        b=b,
        A_diag=np.sqrt(a) + cfg.rho,
        B_scalar=b + cfg.rho,
        anchor_w=w_bar.copy(),
        anchor_v=v_bar.copy(),
        ema=ema,
        clamp_hits=hits,
    )


# ---------------------------------------------------------------------------
# client state and updates


@dataclass
class ClientState:
    x: np.ndarray
    y: np.ndarray
    v: np.ndarray
    w: np.ndarray
    samples_used: int = 0

    def check_finite(self, iteration=None):
        for name in ("x", "y", "v", "w"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise NumericalError(f"client state {name} is not finite", iteration)


def local_step(cs: ClientState, adapt: AdaptiveState, eta_t: float, cfg: ScheduleConfig) -> ClientState:
    if not 0 < eta_t <= 1:
        raise InvalidArgument(f"eta_t={eta_t} outside (0, 1]")
    y_hat = cs.y - cfg.lam * cs.v / adapt.B_scalar
    x_hat = cs.x - cfg.gamma * (cs.w / adapt.A_diag)
    return ClientState(
        x=cs.x + eta_t * (x_hat - cs.x),
        y=cs.y + eta_t * (y_hat - cs.y),
        v=cs.v,
        w=cs.w,
        samples_used=cs.samples_used,
    )


def init_estimators(problem, client, x1, y1, q: int, K: int, rng, step: float | None = None):
    """Minibatch initial estimators from ``q`` lower samples and ``q`` composite samples.

    Returns ``(v1, w1, samples)``.  ``rng`` may be a generator or an integer seed.
    """
    if q < 1:
        raise InvalidArgument("q must be >= 1")
    if not isinstance(rng, np.random.Generator):
        from .rng import CLIENT, stream

        rng = stream(int(rng), CLIENT, client, 0)
    if step is None:
        step = 1.0 / problem.constants.L_g
    x1 = np.asarray(x1, dtype=float)
    y1 = np.asarray(y1, dtype=float)
    v = np.zeros(problem.dim_lower)
    w = np.zeros(problem.dim_upper)
    for _ in range(q):
        zeta = problem.draw(client, rng, "g")
        v += problem.grad_y_g(client, x1, y1, zeta)
        d = draw_hyper(problem, client, rng, K)
        w += hypergrad_from_draw(problem, client, [(x1, y1)], d, K, step)[0]
    return v / q, w / q, q * (K + 2) * problem.batch_size


@dataclass
class OutputSelection:
    index: int  # 0-based position in the trace (iteration index - 1)
    x: np.ndarray
    # diagnostic only: iterate with the smallest recorded gradient norm
    argmin_index: int | None = None
    argmin_x: np.ndarray | None = field(default=None, repr=False)


def select_output(xbars, seed, grad_norms=None) -> OutputSelection:
    """Uniformly random iterate from ``xbars``, reproducible per seed."""
    if len(xbars) == 0:
        raise InvalidArgument("empty trace")
    if isinstance(seed, np.random.Generator):
        rng = seed
    else:
        from .rng import OUTPUT, stream

        rng = stream(int(seed), OUTPUT)
    i = int(rng.integers(0, len(xbars)))
    out = OutputSelection(i, np.asarray(xbars[i]))
    if grad_norms is not None:
        gn = np.asarray(grad_norms, dtype=float)
        if np.any(np.isfinite(gn)):
            j = int(np.nanargmin(gn))
            out.argmin_index = j
            out.argmin_x = np.asarray(xbars[j])
    return out
