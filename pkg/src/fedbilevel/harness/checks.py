"""Sufficient conditions on the schedule for the convergence guarantee.

The conditions are sufficient, not necessary, so a failing check is reported
and never blocks a run.  Under the ``identity`` rule they are evaluated with
``rho = b_hat = 1``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

from ..adafbio import ScheduleConfig
from ..hypergrad import choose_K


@dataclass
class Check:
    name: str
    lhs: float
    rhs: float
    passed: bool
    note: str = ""

    def line(self) -> str:
        tag = "PASS" if self.passed else "FAIL"
        s = f"[{tag}] {self.name}: {self.lhs:.6g} vs {self.rhs:.6g}"
        return s + (f"  ({self.note})" if self.note and not self.passed else "")


@dataclass
class ConstantsReport:
    checks: list[Check] = field(default_factory=list)
    schedule: dict = field(default_factory=dict)
    derived: dict = field(default_factory=dict)

    @property
    def failures(self) -> list[Check]:
        return [c for c in self.checks if not c.passed]

    @property
    def warnings(self) -> list[str]:
        return [c.note for c in self.failures if c.note]

    def to_dict(self):
        return {
            "schedule": self.schedule,
            "derived": self.derived,
            "checks": [dict(name=c.name, lhs=c.lhs, rhs=c.rhs, passed=c.passed, note=c.note) for c in self.checks],
            "failures": [c.name for c in self.failures],
        }

    def text(self) -> str:
        return "\n".join(c.line() for c in self.checks)


def _le(name, lhs, rhs, note=""):
    return Check(name, float(lhs), float(rhs), bool(lhs <= rhs * (1 + 1e-12)), note)


def _ge(name, lhs, rhs, note=""):
    return Check(name, float(lhs), float(rhs), bool(lhs >= rhs * (1 - 1e-12)), note)


def _eq(name, lhs, rhs):
    return Check(name, float(lhs), float(rhs), math.isclose(lhs, rhs, rel_tol=1e-9))


def check_constants(cfg: ScheduleConfig, problem, rule: str = "norm_scalar", constants=None) -> ConstantsReport:
    """Evaluate every condition on ``(k, n, c1, c2, tau, theta, gamma, lambda, K)``.

    ``problem`` supplies ``num_clients`` and (unless ``constants`` is given)
    the problem constants.
    """
    c = problem.constants if constants is None else constants
    M = problem.num_clients
    s = cfg.resolved(M, c, validate=False)  # report violations, never raise
    rho, b_hat = (1.0, 1.0) if rule == "identity" else (s.rho, s.b_hat)
    D = c.derived(s.K)
    Lg2 = c.L_g ** 2
    S = D.L_K ** 2 + Lg2
    Lb2, Lh2 = D.L_bar ** 2, D.L_hat ** 2
    mu = c.mu
    k, n, q, lam, gam, th = s.k, s.n, s.q, s.lam, s.gamma, s.theta
    Gamma = (5 * th ** 2 * Lh2 * gam * rho / (36 * S)
             + 125 * th ** 2 * Lb2 * Lg2 * gam * rho / (27 * mu ** 2 * S)
             + 8 * S * lam ** 2 * gam / rho
             + 17 * th ** 2 * Lh2 * rho * gam / (72 * S))
    floor_c = 2 / (3 * k ** 3)
    K_star = choose_K(c, s.T)
    checks = [
        _ge("n >= 2", n, 2),
        _ge("n >= M k^3", n, M * k ** 3),
        _ge("n >= M (c1 k)^3", n, M * (s.c1 * k) ** 3),
        _ge("n >= M (c2 k)^3", n, M * (s.c2 * k) ** 3),
        _ge("n >= (12 k lambda q)^3 M^(5/2) (L_K^2 + L_g^2)^(3/2) / (theta rho)^3", n,
            (12 * k * lam * q) ** 3 * M ** 2.5 * S ** 1.5 / (th * rho) ** 3),
        _eq("c2 = vartheta c1", s.c2, s.vartheta * s.c1),
        _ge("c1 >= 2/(3k^3) + 1000 Lbar^2 / (3 mu^2)", s.c1, floor_c + 1000 * Lb2 / (3 * mu ** 2)),
        _le("c1 <= 72 lambda^2 q (L_K^2 + L_g^2) / (rho^2 sqrt(vartheta^2 Lhat^2 + L_g^2))", s.c1,
            72 * lam ** 2 * q * S / (rho ** 2 * math.sqrt(s.vartheta ** 2 * Lh2 + Lg2))),
        _ge("c2 >= 2/(3k^3) + 34", s.c2, floor_c + 34),
        _eq("lambda = tau gamma", lam, s.tau * gam),
        _le("tau <= min(sqrt(15 M rho gamma / Gamma) / 8, 1)", s.tau,
            min(math.sqrt(15 * M * rho * gam / Gamma) / 8, 1.0)),
        _le("theta <= min(9 Lbar sqrt(75 lambda (L_K^2+L_g^2) M mu / (rho (30 Lhat^2 mu^2 + 1000 Lbar^2 L_g^2"
            " + 52 Lhat^2 mu^2))), 1)", th,
            min(9 * D.L_bar * math.sqrt(75 * lam * S * M * mu
                                        / (rho * (30 * Lh2 * mu ** 2 + 1000 * Lb2 * Lg2 + 52 * Lh2 * mu ** 2))),
                1.0)),
        _le("lambda <= 225 M rho Lbar^2 / (184 mu (L_K^2 + L_g^2))", lam, 225 * M * rho * Lb2 / (184 * mu * S)),
        _le("gamma <= (rho/8) sqrt(1 / (125 Lbar^2 kappa^2 b_hat^2 / (6 mu^2 lambda^2) + (L_g^2 + L_K^2)/M))",
            gam, rho / 8 * math.sqrt(1 / (125 * Lb2 * D.kappa ** 2 * b_hat ** 2 / (6 * mu ** 2 * lam ** 2) + S / M))),
        _le("gamma <= n^(1/3) rho / (4 L k M^(1/3))", gam,
            n ** (1 / 3) * rho / (4 * D.L * k * M ** (1 / 3)) if D.L > 0 else math.inf),
        _ge("K >= ceil((L_g/mu) log(C_gxy C_fy T / mu))", s.K, K_star,
            note=f"K={s.K} < {K_star}: the Neumann bias may exceed 1/T"),
    ]
    derived = {k_: float(v) for k_, v in D.__dict__.items()}
    derived.update(Gamma=Gamma, K_star=K_star, rho_used=rho, b_hat_used=b_hat)
    return ConstantsReport(checks, s.to_dict(), derived)
