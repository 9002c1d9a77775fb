import numpy as np
import pytest

from fedbilevel import QuadraticBilevelSpec, make_quadratic_problem, random_quadratic

# one line per acceptance criterion, printed in the terminal summary
ACCEPTANCE = {}


def record(number, title, passed, detail):
    ACCEPTANCE[number] = f"[{'PASS' if passed else 'FAIL'}] criterion {number:>2}: {title} ({detail})"


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[k])


def unit_instance(p=4, d=4, seed=1):
    """Single client, eig(Q) spanning [0.5, 1], ||P|| = 1, S = I, u = 0, radius 1.

    So mu = 0.5, L_g = 1 and C_gxy = C_fy = 1 exactly (up to roundoff).
    """
    rng = np.random.default_rng(seed)
    U = np.linalg.qr(rng.standard_normal((p, p)))[0]
    Q = (U * np.linspace(0.5, 1.0, p)) @ U.T
    Q = 0.5 * (Q + Q.T)
    P = np.linalg.qr(rng.standard_normal((max(p, d), max(p, d))))[0][:p, :d]
    P /= np.linalg.norm(P, 2)
    spec = QuadraticBilevelSpec(Q[None], P[None], np.zeros((1, p)), np.eye(p)[None], np.zeros((1, p)),
                                np.zeros((1, d, d)), radius=1.0)
    return spec, U


def scalar_spec(sigma=0.0):
    """g = y^2/2 - x y, f = (y - 1)^2/2 + x^2/2, so F(x) = (x - 1)^2/2 + x^2/2."""
    one = np.ones((1, 1, 1))
    return QuadraticBilevelSpec(one, one, np.zeros((1, 1)), one, np.ones((1, 1)), one, sigma=sigma)


@pytest.fixture
def small_problem():
    return make_quadratic_problem(random_quadratic(d=3, p=4, M=3, sigma=0.1, seed=7))


@pytest.fixture
def hetero_problem():
    return make_quadratic_problem(random_quadratic(d=3, p=3, M=3, sigma=0.1, shared_hessians=False,
                                                   hetero=0.5, seed=11))
