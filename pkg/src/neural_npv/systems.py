"""Parameter-varying plants, linearization and LQR gain scheduling."""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import diff_engine as de

__all__ = [
    "ConfigurationError",
    "SolverError",
    "NpvSystem",
    "InvertedPendulum",
    "Quadrotor",
    "ParamTrajectory",
    "eval_dynamics",
    "equilibrium_input",
    "linearize",
    "vertices",
    "solve_care",
    "lqr_gain_schedule",
    "GainSchedule",
    "theta_grid",
    "make_system",
]


class ConfigurationError(ValueError):
    pass


class SolverError(RuntimeError):
    pass


@dataclass(frozen=True)
class NpvSystem:
    """Base plant descriptor.

    Boxes are ``(lo, hi)`` array pairs.  Subclasses implement ``dynamics``
    and ``equilibrium_input`` with ``diff_engine`` ops so that they can be
    evaluated on plain arrays or on tape variables.
    """

    name: str
    n: int
    n_u: int
    n_theta: int
    x_box: tuple
    theta_box: tuple
    rate_box: tuple
    u_lo: np.ndarray
    u_hi: np.ndarray

    def __post_init__(self):
        for label, box, width in (
            ("x_box", self.x_box, self.n),
            ("theta_box", self.theta_box, self.n_theta),
            ("rate_box", self.rate_box, self.n_theta),
        ):
            lo, hi = (np.asarray(b, dtype=np.float64) for b in box)
            if lo.shape != (width,) or hi.shape != (width,) or np.any(lo > hi):
                raise ConfigurationError(f"{label} must be two length-{width} bounds with lo <= hi")
        if np.shape(self.u_lo) != (self.n_u,) or np.any(np.asarray(self.u_lo) >= np.asarray(self.u_hi)):
            raise ConfigurationError(f"input bounds must have length {self.n_u} with u_lo < u_hi")
        for name in self._positive:
            if not getattr(self, name) > 0:
                raise ConfigurationError(f"{name} must be positive")

    _positive = ()

    # -- encoder -----------------------------------------------------------
    @property
    def enc_width(self) -> int:
        return self.n

    @property
    def net_in_width(self) -> int:
        return self.enc_width + self.n_theta

    def encode(self, x):
        return x

    def encode_tangent(self, x, dx):
        """Push a state tangent (K, B, n) through the encoder."""
        return dx

    def displacement(self, x):
        """Encoded displacement from the equilibrium, z = enc(x) - enc(0)."""
        return x

    def wrap(self, x: np.ndarray) -> np.ndarray:
        """Canonical representative of a state (identity unless angular)."""
        return x

    # -- plant ---------------------------------------------------------------
    def dynamics(self, x, u, theta):  # pragma: no cover - abstract
        raise NotImplementedError

    def equilibrium_input(self, theta):  # pragma: no cover - abstract
        raise NotImplementedError

    def jacobians(self, theta: np.ndarray):  # pragma: no cover - abstract
        raise NotImplementedError

    @property
    def x_lo(self):
        return np.asarray(self.x_box[0], dtype=np.float64)

    @property
    def x_hi(self):
        return np.asarray(self.x_box[1], dtype=np.float64)

    @property
    def theta_lo(self):
        return np.asarray(self.theta_box[0], dtype=np.float64)

    @property
    def theta_hi(self):
        return np.asarray(self.theta_box[1], dtype=np.float64)

    def rate_vertices(self) -> np.ndarray:
        return vertices(self.rate_box)

    def theta_vertices(self) -> np.ndarray:
        return vertices(self.theta_box)

    def sample_x(self, rng, count):
        return rng.uniform(self.x_lo, self.x_hi, size=(count, self.n))

    def sample_theta(self, rng, count):
        return rng.uniform(self.theta_lo, self.theta_hi, size=(count, self.n_theta))

    def check_interior_equilibrium(self, per_axis: int = 9):
        """Raise unless u*(theta) is strictly inside the input bounds on a grid."""
        grid = theta_grid(self, per_axis)
        u = np.asarray(self.equilibrium_input(grid))
        bad = ~np.all((u > self.u_lo) & (u < self.u_hi), axis=1)
        if np.any(bad):
            raise ConfigurationError(
                f"{self.name}: equilibrium input not strictly inside bounds at theta={grid[bad][0]}"
            )


def _col(a, j):
    return a[..., j : j + 1]


@dataclass(frozen=True)
class InvertedPendulum(NpvSystem):
    """Pendulum about the upright position; theta scales actuator effectiveness."""

    mass: float = 0.1
    length: float = 0.5
    damping: float = 0.2
    gravity: float = 9.81

    _positive = ("mass", "length", "gravity")

    @property
    def enc_width(self) -> int:
        return 3

    def encode(self, x):
        phi = _col(x, 0)
        return de.concat([de.sin(phi), de.cos(phi), _col(x, 1)])

    def encode_tangent(self, x, dx):
        phi = _col(x, 0)
        dphi = _col(dx, 0)
        return de.concat([de.cos(phi) * dphi, -de.sin(phi) * dphi, _col(dx, 1)])

    def displacement(self, x):
        phi = _col(x, 0)
        return de.concat([de.sin(phi), de.cos(phi) - 1.0, _col(x, 1)])

    def wrap(self, x):
        x = np.array(x, dtype=np.float64)
        x[..., 0] = np.mod(x[..., 0] + np.pi, 2 * np.pi) - np.pi
        return x

    @property
    def inertia(self):
        return self.mass * self.length**2

    def dynamics(self, x, u, theta):
        phi, dphi = _col(x, 0), _col(x, 1)
        acc = (
            (self.gravity / self.length) * de.sin(phi)
            - (self.damping / self.inertia) * dphi
            + theta * u / self.inertia
        )
        return de.concat([dphi, acc])

    def equilibrium_input(self, theta):
        return np.zeros(np.shape(de._val(theta))[:-1] + (1,))

    def jacobians(self, theta):
        theta = np.asarray(theta, dtype=np.float64).reshape(-1)
        a = np.array([[0.0, 1.0], [self.gravity / self.length, -self.damping / self.inertia]])
        b = np.array([[0.0], [theta[0] / self.inertia]])
        return a, b


@dataclass(frozen=True)
class Quadrotor(NpvSystem):
    """Translational quadrotor dynamics (NED, yaw fixed at zero).

    u = (thrust, roll, pitch); theta is an external force in the inertial frame.
    """

    mass: float = 0.5
    gravity: float = 9.81

    _positive = ("mass", "gravity")

    def _thrust_dir(self, u):
        roll, pitch = _col(u, 1), _col(u, 2)
        return (
            de.cos(roll) * de.sin(pitch),
            -de.sin(roll),
            de.cos(pitch) * de.cos(roll),
        )

    def dynamics(self, x, u, theta):
        tau = _col(u, 0)
        rx, ry, rz = self._thrust_dir(u)
        m = self.mass
        acc = [
            -tau * rx / m + _col(theta, 0) / m,
            -tau * ry / m + _col(theta, 1) / m,
            self.gravity - tau * rz / m + _col(theta, 2) / m,
        ]
        return de.concat([x[..., 3:6]] + acc)

    def equilibrium_input(self, theta):
        tx, ty, tz = _col(theta, 0), _col(theta, 1), _col(theta, 2)
        vert = self.mass * self.gravity + tz
        tau = de.sqrt(tx * tx + ty * ty + vert * vert)
        roll = de.arcsin(-ty / tau)
        pitch = de.arctan(tx / vert)
        return de.concat([tau, roll, pitch])

    def jacobians(self, theta):
        theta = np.asarray(theta, dtype=np.float64).reshape(1, -1)
        u = np.asarray(self.equilibrium_input(theta))[0]
        tau, roll, pitch = u
        m = self.mass
        a = np.zeros((6, 6))
        a[:3, 3:] = np.eye(3)
        cr, sr, cp, sp = np.cos(roll), np.sin(roll), np.cos(pitch), np.sin(pitch)
        b = np.zeros((6, 3))
        # d acc / d tau
        b[3:, 0] = [-cr * sp / m, sr / m, -cp * cr / m]
        # d acc / d roll
        b[3:, 1] = [tau * sr * sp / m, tau * cr / m, tau * cp * sr / m]
        # d acc / d pitch
        b[3:, 2] = [-tau * cr * cp / m, 0.0, tau * sp * cr / m]
        return a, b


def make_system(name: str, **overrides) -> NpvSystem:
    """Benchmark plants with the published domains and bounds."""
    if name == "pendulum":
        kw = dict(
            name="pendulum",
            n=2,
            n_u=1,
            n_theta=1,
            x_box=((-np.pi, -6.0), (np.pi, 6.0)),
            theta_box=((0.2,), (1.0,)),
            rate_box=((-0.1,), (0.1,)),
            u_lo=np.array([-3.0]),
            u_hi=np.array([3.0]),
        )
        kw.update(overrides)
        sys = InvertedPendulum(**kw)
    elif name == "quadrotor":
        kw = dict(
            name="quadrotor",
            n=6,
            n_u=3,
            n_theta=3,
            x_box=((-6.0,) * 6, (6.0,) * 6),
            theta_box=((-2.0,) * 3, (2.0,) * 3),
            rate_box=((-0.5,) * 3, (0.5,) * 3),
            u_lo=np.array([0.0, -np.pi / 2, -np.pi]),
            u_hi=np.array([11.3, np.pi / 2, np.pi]),
        )
        kw.update(overrides)
        sys = Quadrotor(**kw)
    else:
        raise ConfigurationError(f"unknown system {name!r}")
    sys.check_interior_equilibrium()
    return sys


# ---------------------------------------------------------------------------
# operations
# ---------------------------------------------------------------------------


def eval_dynamics(system: NpvSystem, x, u, theta):
    """x_dot = f(x, u, theta); accepts single vectors or batches."""
    single = np.ndim(de._val(x)) == 1
    if single:
        x, u, theta = (np.atleast_2d(np.asarray(a, dtype=np.float64)) for a in (x, u, theta))
        return np.asarray(system.dynamics(x, u, theta))[0]
    return system.dynamics(x, u, theta)


def equilibrium_input(system: NpvSystem, theta) -> np.ndarray:
    theta = np.asarray(theta, dtype=np.float64)
    single = theta.ndim == 1
    tb = np.atleast_2d(theta)
    u = np.asarray(system.equilibrium_input(tb))
    if not np.all(np.isfinite(u)) or np.any(u <= system.u_lo) or np.any(u >= system.u_hi):
        raise ConfigurationError(f"{system.name}: equilibrium input infeasible for theta={theta}")
    return u[0] if single else u


def linearize(system: NpvSystem, theta) -> tuple[np.ndarray, np.ndarray]:
    """Analytic (A, B) at (x*, u*(theta))."""
    return system.jacobians(np.asarray(theta, dtype=np.float64))


def vertices(box) -> np.ndarray:
    """Corners of a box in lexicographic order, duplicates removed."""
    lo = np.atleast_1d(np.asarray(box[0], dtype=np.float64))
    hi = np.atleast_1d(np.asarray(box[1], dtype=np.float64))
    if lo.shape != hi.shape:
        raise ValueError("box bounds have different shapes")
    if np.any(lo > hi):
        raise ValueError(f"box has lo > hi: {lo} > {hi}")
    axes = [(l,) if l == h else (l, h) for l, h in zip(lo, hi)]
    return np.array(list(itertools.product(*axes)), dtype=np.float64)


def theta_grid(system: NpvSystem, per_axis: int = 9) -> np.ndarray:
    axes = [np.linspace(l, h, per_axis) for l, h in zip(system.theta_lo, system.theta_hi)]
    return np.array(list(itertools.product(*axes)), dtype=np.float64)


def _riccati_rhs(a, b_rinv_bt, q, p):
    at = np.swapaxes(a, -1, -2)
    return at @ p + p @ a - p @ b_rinv_bt @ p + q


def solve_care(a, b, q, r, dt=1e-3, tol=1e-10, max_steps=2_000_000, labels=None, max_retries=6):
    """Continuous algebraic Riccati equation by backward DRE integration.

    Integrates dP/ds = A'P + PA - P B R^-1 B' P + Q from P = Q with RK4
    until ||dP/ds||_inf < tol.  Accepts a stack of problems (leading axis)
    and integrates them together; each one freezes once converged.  A
    problem whose integration blows up (stiff flow) restarts from Q with a
    quarter of the step, at most ``max_retries`` times.

    Returns (P, K) with K = R^-1 B' P.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    r = np.asarray(r, dtype=np.float64)
    single = a.ndim == 2
    if single:
        a, b = a[None], b[None]
    g = a.shape[0]
    q = np.broadcast_to(q, a.shape).copy()
    r = np.broadcast_to(r, (g,) + r.shape[-2:])
    rinv_bt = np.linalg.solve(r, np.swapaxes(b, -1, -2))
    s = b @ rinv_bt
    p = q.copy()
    steps = np.full(g, float(dt))
    retries = np.zeros(g, dtype=int)
    active = np.ones(g, dtype=bool)
    with np.errstate(over="ignore", invalid="ignore"):
        for _ in range(max_steps):
            idx = np.flatnonzero(active)
            if idx.size == 0:
                break
            aa, ss, qq, pp = a[idx], s[idx], q[idx], p[idx]
            k1 = _riccati_rhs(aa, ss, qq, pp)
            blown = ~np.all(np.isfinite(k1), axis=(1, 2))
            if np.any(blown):
                for i in idx[blown]:
                    if retries[i] >= max_retries:
                        raise SolverError(f"Riccati integration diverged at {_label(labels, i)}")
                    retries[i] += 1
                    steps[i] /= 4.0
                    p[i] = q[i]
                continue
            done = np.max(np.abs(k1), axis=(1, 2)) < tol
            active[idx[done]] = False
            keep = ~done
            idx, aa, ss, qq, pp, k1 = idx[keep], aa[keep], ss[keep], qq[keep], pp[keep], k1[keep]
            if idx.size == 0:
                break
            h = steps[idx][:, None, None]
            k2 = _riccati_rhs(aa, ss, qq, pp + 0.5 * h * k1)
            k3 = _riccati_rhs(aa, ss, qq, pp + 0.5 * h * k2)
            k4 = _riccati_rhs(aa, ss, qq, pp + h * k3)
            pp = pp + h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
            p[idx] = 0.5 * (pp + np.swapaxes(pp, -1, -2))
        else:
            raise SolverError(
                f"Riccati integration did not converge at {_label(labels, np.flatnonzero(active)[0])}"
            )
    k = rinv_bt @ p
    if single:
        return p[0], k[0]
    return p, k


def _label(labels, i):
    if labels is None:
        return f"problem {i}"
    return f"theta={np.asarray(labels)[i]}"


def care_residual(a, b, q, r, p) -> float:
    rinv_bt = np.linalg.solve(r, b.T)
    res = a.T @ p + p @ a - p @ b @ rinv_bt @ p + q
    return float(np.max(np.abs(res)))


@dataclass
class GainSchedule:
    """Table theta_i -> K(theta_i) with nearest-neighbour lookup."""

    thetas: np.ndarray
    gains: np.ndarray  # (G, n_u, n)
    riccati: np.ndarray  # (G, n, n)

    def lookup(self, theta: np.ndarray) -> np.ndarray:
        theta = np.atleast_2d(theta)
        d = np.sum((theta[:, None, :] - self.thetas[None, :, :]) ** 2, axis=-1)
        return self.gains[np.argmin(d, axis=1)]

    def __len__(self):
        return len(self.thetas)


def lqr_gain_schedule(system: NpvSystem, grid=None, q=None, r=None) -> GainSchedule:
    if grid is None:
        grid = theta_grid(system, 9)
    grid = np.atleast_2d(np.asarray(grid, dtype=np.float64))
    q = np.eye(system.n) if q is None else np.asarray(q, dtype=np.float64)
    r = np.eye(system.n_u) if r is None else np.asarray(r, dtype=np.float64)
    ab = [linearize(system, th) for th in grid]
    a = np.stack([m[0] for m in ab])
    b = np.stack([m[1] for m in ab])
    if np.linalg.matrix_rank(np.concatenate([b[i] for i in range(len(b))], 1)) == 0:
        raise SolverError("input matrix is identically zero")
    p, k = solve_care(a, b, q, r, labels=grid)
    for i in range(len(grid)):
        eig = np.linalg.eigvals(a[i] - b[i] @ k[i])
        if np.max(eig.real) >= 0:
            raise SolverError(f"closed loop not Hurwitz at theta={grid[i]}")
    return GainSchedule(grid, k, p)


# ---------------------------------------------------------------------------
# parameter trajectories
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ParamTrajectory:
    """Closed-form theta(t) together with its derivative."""

    value: Callable[[float], np.ndarray]
    rate: Callable[[float], np.ndarray]
    name: str = "custom"

    def __call__(self, t):
        return np.atleast_1d(self.value(t)), np.atleast_1d(self.rate(t))

    @staticmethod
    def constant(theta) -> "ParamTrajectory":
        theta = np.atleast_1d(np.asarray(theta, dtype=np.float64))
        return ParamTrajectory(lambda t: theta, lambda t: np.zeros_like(theta), "constant")

    @staticmethod
    def pendulum_demo() -> "ParamTrajectory":
        return ParamTrajectory(
            lambda t: np.array([0.6 + 0.4 * np.cos(t)]),
            lambda t: np.array([-0.4 * np.sin(t)]),
            "0.6+0.4cos(t)",
        )

    @staticmethod
    def quadrotor_demo() -> "ParamTrajectory":
        """The published disturbance; its rate exceeds the [-0.5, 0.5] bound."""
        return ParamTrajectory(
            lambda t: np.array(
                [2 * np.sin(np.pi * t), 2 * np.cos(0.75 * np.pi * t), 2 * np.cos(0.5 * np.pi * t)]
            ),
            lambda t: np.array(
                [
                    2 * np.pi * np.cos(np.pi * t),
                    -1.5 * np.pi * np.sin(0.75 * np.pi * t),
                    -np.pi * np.sin(0.5 * np.pi * t),
                ]
            ),
            "published",
        )

    @staticmethod
    def quadrotor_rate_limited() -> "ParamTrajectory":
        """Same shape with frequencies slowed so that |theta_dot| <= 0.5."""
        w = np.array([0.25, 0.2, 0.15])
        return ParamTrajectory(
            lambda t: np.array([2 * np.sin(w[0] * t), 2 * np.cos(w[1] * t), 2 * np.cos(w[2] * t)]),
            lambda t: np.array(
                [2 * w[0] * np.cos(w[0] * t), -2 * w[1] * np.sin(w[1] * t), -2 * w[2] * np.sin(w[2] * t)]
            ),
            "rate-limited",
        )

    def check(self, system: NpvSystem, horizon: float, samples: int = 2001) -> bool:
        """Sampled check that theta stays in the value box and rate box."""
        lo_r, hi_r = (np.asarray(v, dtype=np.float64) for v in system.rate_box)
        for t in np.linspace(0.0, horizon, samples):
            th, rate = self(t)
            if np.any(th < system.theta_lo - 1e-12) or np.any(th > system.theta_hi + 1e-12):
                return False
            if np.any(rate < lo_r - 1e-12) or np.any(rate > hi_r + 1e-12):
                return False
        return True
