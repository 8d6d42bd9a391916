"""Shared fixtures and small hand-checkable plants."""
from dataclasses import dataclass

import numpy as np
import pytest

from neural_npv import diff_engine as de
from neural_npv import networks as nw
from neural_npv import systems as sy


@dataclass(frozen=True)
class LinearPlant(sy.NpvSystem):
    """xdot = a * x + b * u, independent of theta."""

    a: float = -1.0
    b: float = 0.0

    def dynamics(self, x, u, theta):
        out = self.a * x
        if self.b:
            out = out + self.b * u
        return out

    def equilibrium_input(self, theta):
        return np.zeros(np.shape(de._val(theta))[:-1] + (self.n_u,))

    def jacobians(self, theta):
        return self.a * np.eye(self.n), self.b * np.ones((self.n, self.n_u))


def linear_plant(n=2, a=-1.0, b=0.0, half=1.0, rate=0.1):
    return LinearPlant(
        name="linear",
        n=n,
        n_u=1,
        n_theta=1,
        x_box=((-half,) * n, (half,) * n),
        theta_box=((0.0,), (1.0,)),
        rate_box=((-rate,), (rate,)),
        u_lo=np.array([-1.0]),
        u_hi=np.array([1.0]),
        a=a,
        b=b,
    )


def quadratic_lyapunov(system, epsilon=1e-2):
    """V = eps |z|^2 (all-zero phi network)."""
    rng = np.random.default_rng(0)
    net = de.init_network([system.net_in_width, 4, system.enc_width], rng, zero=True)
    return nw.LyapunovFunction(net, epsilon)


def zero_controller(system):
    rng = np.random.default_rng(0)
    return nw.PdController(de.init_network([system.net_in_width, 4, system.n_u], rng, zero=True))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def pendulum():
    return sy.make_system("pendulum")


@pytest.fixture(scope="session")
def quadrotor():
    return sy.make_system("quadrotor")


@pytest.fixture
def pendulum_models(pendulum):
    rng = np.random.default_rng(7)
    phi = de.init_network([4, 16, 16, 3], rng, gain=0.5)
    pi = de.init_network([4, 16, 16, 1], rng)
    return nw.LyapunovFunction(phi), nw.PdController(pi)


@pytest.fixture
def quadrotor_models(quadrotor):
    rng = np.random.default_rng(8)
    phi = de.init_network([9, 16, 16, 6], rng, gain=0.5)
    pi = de.init_network([9, 16, 16, 3], rng)
    return nw.LyapunovFunction(phi), nw.PdController(pi)


# -- acceptance summary ------------------------------------------------------------

ACCEPTANCE_LINES = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[key])
