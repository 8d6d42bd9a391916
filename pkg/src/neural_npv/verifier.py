"""Empirical verification: adversarial attacks inside the level set and
closed-loop simulation from level-set samples."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field, asdict
from typing import Callable, Optional

import numpy as np

from . import diff_engine as de
from . import networks as nw
from .networks import LyapunovFunction, PdController
from .systems import NpvSystem, ParamTrajectory
from .trainer import pgd_attack

__all__ = [
    "EmptyLevelSetError",
    "Trajectory",
    "VerificationReport",
    "VerifierConfig",
    "LevelSetSample",
    "RoaGrid",
    "integrate",
    "sample_level_set",
    "verify_pgd",
    "verify_trajectories",
    "roa_slice_grid",
    "box_in_level_set",
    "make_policy",
]


class EmptyLevelSetError(RuntimeError):
    pass


@dataclass
class VerifierConfig:
    samples: int = 100_000
    tol: float = 1e-3
    pgd_steps: int = 100
    restarts: int = 5
    step_size: float = 0.02
    chunk: int = 2048
    level_probes: int = 64
    level_steps: int = 10
    level_refine: int = 4
    gate_probes: int = 2
    gate_steps: int = 2
    traj_count: int = 10_000
    dt: float = 0.005
    horizon: float = 20.0
    conv_radius: float = 1e-2
    max_draws: int = 10_000_000

    def level_kw(self):
        return dict(probe_count=self.level_probes, pgd_steps=self.level_steps, refine=self.level_refine)


@dataclass
class Trajectory:
    t: np.ndarray  # (T,)
    x: np.ndarray  # (T, n) or (T, B, n)
    u: np.ndarray
    theta: np.ndarray
    v: Optional[np.ndarray]
    diverged: bool = False

    def to_csv(self, path):
        """Columns t, x..., u..., theta..., V (single trajectory)."""
        if self.x.ndim != 2:
            raise ValueError("CSV export expects a single trajectory")
        n, m, p = self.x.shape[1], self.u.shape[1], self.theta.shape[1]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(
                ["t"] + [f"x{i}" for i in range(n)] + [f"u{i}" for i in range(m)]
                + [f"theta{i}" for i in range(p)] + ["V"]
            )
            v = self.v if self.v is not None else np.full(len(self.t), np.nan)
            for k in range(len(self.t)):
                w.writerow([repr(float(a)) for a in
                            [self.t[k], *self.x[k], *self.u[k], *self.theta[k], v[k]]])


@dataclass
class VerificationReport:
    scheme: str
    sample_count: int
    violation_count: int = 0
    violation_rate: float = 0.0
    tolerance: Optional[float] = None
    worst: Optional[dict] = None
    convergence_fraction: Optional[float] = None
    monotone_fraction: Optional[float] = None
    input_bound_fraction: Optional[float] = None
    diverged: int = 0
    level_set_acceptance: Optional[float] = None
    seed: Optional[int] = None

    def to_dict(self):
        return asdict(self)

    def to_json(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")


def make_policy(pi: PdController, system: NpvSystem):
    return lambda x, theta: nw.control(pi, system, x, theta)


# ---------------------------------------------------------------------------
# simulation
# ---------------------------------------------------------------------------


def _theta_at(traj: ParamTrajectory, t, batch):
    th, rate = traj(t)
    return np.broadcast_to(th, (batch, th.size)), np.broadcast_to(rate, (batch, rate.size))


def _rk4(system, policy, x, t, dt, traj):
    b = x.shape[0]
    th0, _ = _theta_at(traj, t, b)
    u0 = policy(x, th0)
    k1 = system.dynamics(x, u0, th0)
    thh, _ = _theta_at(traj, t + 0.5 * dt, b)
    k2 = system.dynamics(x + 0.5 * dt * k1, policy(x + 0.5 * dt * k1, thh), thh)
    k3 = system.dynamics(x + 0.5 * dt * k2, policy(x + 0.5 * dt * k2, thh), thh)
    th1, _ = _theta_at(traj, t + dt, b)
    k4 = system.dynamics(x + dt * k3, policy(x + dt * k3, th1), th1)
    return x + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4), u0, th0


def _step_count(dt, horizon):
    """Number of uniform steps; the horizon must be a whole multiple of dt."""
    if not dt > 0 or horizon < dt:
        raise ValueError("need dt > 0 and horizon >= dt")
    steps = int(round(horizon / dt))
    if abs(steps * dt - horizon) > 1e-9 * horizon:
        raise ValueError(f"horizon {horizon} is not a multiple of dt {dt}")
    return steps


def integrate(system, policy, x0, theta_traj: ParamTrajectory, dt, horizon, V=None, blowup=1e6):
    """Classical RK4 with the policy re-evaluated at every stage.

    ``policy(x, theta) -> u`` works on batches.  ``x0`` may be one state or
    a batch; the stored arrays follow the same layout.
    """
    steps = _step_count(dt, horizon)
    x = np.atleast_2d(np.asarray(x0, dtype=np.float64))
    single = np.ndim(x0) == 1
    ts, xs, us, ths, vs = [], [], [], [], []
    diverged = False
    for k in range(steps + 1):
        t = k * dt
        th, _ = _theta_at(theta_traj, t, x.shape[0])
        ts.append(t)
        xs.append(x)
        ths.append(th)
        us.append(np.asarray(policy(x, th)))
        if V is not None:
            vs.append(nw.lyapunov_value(V, system, x, th))
        if k == steps:
            break
        if np.max(np.linalg.norm(x, axis=-1)) > blowup:
            diverged = True
            break
        x, _, _ = _rk4(system, policy, x, t, dt, theta_traj)
    sel = (lambda a: np.stack(a)[:, 0]) if single else np.stack
    return Trajectory(
        np.array(ts), sel(xs), sel(us), sel(ths), sel(vs) if V is not None else None, diverged
    )


# ---------------------------------------------------------------------------
# level set
# ---------------------------------------------------------------------------


@dataclass
class LevelSetSample:
    points: np.ndarray
    acceptance_rate: float
    draws: int


def sample_level_set(
    V: LyapunovFunction,
    system: NpvSystem,
    rho: float,
    count: int,
    rng,
    probe_count=64,
    pgd_steps=10,
    refine=4,
    batch=4096,
    max_draws=10_000_000,
) -> LevelSetSample:
    """Uniform rejection sampling of {x in X : max_theta V(x, theta) <= rho}.

    Candidates are screened with the theta-box vertices first (any probe
    above rho already proves exclusion), then the survivors get the full
    maximization.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    kept, draws, accepted = [], 0, 0
    ver = system.theta_vertices()
    while accepted < count:
        if draws >= max_draws:
            rate = accepted / draws
            if rate < 1e-4:
                raise EmptyLevelSetError(
                    f"level set {{V <= {rho}}} looks empty: {accepted}/{draws} draws accepted"
                )
        x = system.sample_x(rng, batch)
        draws += batch
        th = np.broadcast_to(ver[:, None, :], (len(ver), batch, system.n_theta))
        v_ver, _ = nw.lyapunov_dual(V, system, np.broadcast_to(x, (len(ver),) + x.shape), th)
        x = x[np.max(v_ver, axis=0) <= rho]
        if len(x):
            _, lvl = nw.level_theta(V, system, x, probe_count, pgd_steps, rng, refine=refine)
            x = x[lvl <= rho]
        kept.append(x)
        accepted += len(x)
    pts = np.concatenate(kept)[:count]
    return LevelSetSample(pts, accepted / draws, draws)


class _LevelGate:
    """Cheap warm-started membership test used to keep PGD iterates in the level set."""

    def __init__(self, V, system, rho, rng, theta_star, probes, steps):
        self.V, self.system, self.rho, self.rng = V, system, rho, rng
        self.warm = theta_star.copy()
        self.probes, self.steps = probes, steps

    def __call__(self, p):
        x = p[:, : self.system.n]
        th, lvl = nw.level_theta(
            self.V, self.system, x, self.probes, self.steps, self.rng,
            warm=self.warm[None], refine=2,
        )
        ok = lvl <= self.rho
        self.warm[ok] = th[ok]
        return ok


# ---------------------------------------------------------------------------
# verification campaigns
# ---------------------------------------------------------------------------


def worst_vertex_residual(V, pi, system, k3):
    def residual(x, theta):
        return nw.condition_residual(V, pi, system, x, theta, k3)

    return residual


def _attack_objective(residual):
    def objective(p, n):
        tape = de.GradTape()
        pv = tape.var(p)
        r = residual(pv[:, :n], pv[:, n:])
        score = de.reduce_max(r, axis=-1)
        (g,) = tape.gradient(de.reduce_sum(score), [pv])
        return score.value, g

    return objective


def verify_pgd(
    V: LyapunovFunction,
    pi: PdController,
    system: NpvSystem,
    rho: float,
    n_adv: int,
    tol: float,
    config: VerifierConfig,
    rng,
    k3: float = 0.1,
    residual: Optional[Callable] = None,
    seed: Optional[int] = None,
    level_sample: Optional[LevelSetSample] = None,
) -> VerificationReport:
    """Attack the decrease condition inside the level set.

    For each of ``n_adv`` level-set states, ``config.restarts`` attacks
    (the sampled parameter, then fresh random parameters) run
    ``config.pgd_steps`` sign-gradient steps on max over rate vertices of
    dV/dt + k3 |z|^2.  Iterates leaving the level set are rolled back.  A
    sample violates when its best value exceeds ``tol``.
    """
    if n_adv < 1:
        raise ValueError("n_adv must be >= 1")
    residual = residual or worst_vertex_residual(V, pi, system, k3)
    if level_sample is None:
        level_sample = sample_level_set(
            V, system, rho, n_adv, rng, max_draws=config.max_draws, **config.level_kw()
        )
    xs = level_sample.points[:n_adv]
    thetas = system.sample_theta(rng, n_adv)
    objective = _attack_objective(residual)
    lo = np.concatenate([system.x_lo, system.theta_lo])
    hi = np.concatenate([system.x_hi, system.theta_hi])
    n = system.n
    best_v = np.full(n_adv, -np.inf)
    best_p = np.zeros((n_adv, n + system.n_theta))
    for s in range(0, n_adv, config.chunk):
        xc = xs[s : s + config.chunk]
        theta_star, _ = nw.level_theta(V, system, xc, rng=rng, **config.level_kw())
        for r in range(max(1, config.restarts)):
            th = thetas[s : s + config.chunk] if r == 0 else system.sample_theta(rng, len(xc))
            gate = _LevelGate(V, system, rho, rng, theta_star, config.gate_probes, config.gate_steps)
            res = pgd_attack(
                lambda p: objective(p, n), (lo, hi), np.concatenate([xc, th], axis=1),
                config.pgd_steps, config.step_size, mode="sign", accept=gate,
            )
            better = res.values > best_v[s : s + len(xc)]
            best_v[s : s + len(xc)][better] = res.values[better]
            best_p[s : s + len(xc)][better] = res.points[better]
    # the gate is approximate: re-check final iterates with the full estimator
    lvl = np.concatenate([
        nw.level_theta(V, system, best_p[s : s + config.chunk, :n], rng=rng, **config.level_kw())[1]
        for s in range(0, n_adv, config.chunk)
    ])
    outside = lvl > rho
    if np.any(outside):
        p0 = np.concatenate([xs[outside], thetas[outside]], axis=1)
        v0, _ = objective(p0, n)
        best_p[outside], best_v[outside] = p0, v0
    count = int(np.sum(best_v > tol))
    i = int(np.argmax(best_v))
    x_w, th_w = best_p[i, :n], best_p[i, n:]
    r_w = np.asarray(residual(x_w[None], th_w[None]))[0]
    rates = system.rate_vertices()
    worst = dict(
        x=x_w.tolist(), theta=th_w.tolist(), theta_rate=rates[int(np.argmax(r_w))].tolist(),
        value=float(best_v[i]),
    )
    return VerificationReport(
        "pgd", n_adv, count, count / n_adv, tol, worst,
        level_set_acceptance=level_sample.acceptance_rate, seed=seed,
    )


def verify_trajectories(
    V: LyapunovFunction,
    pi: PdController,
    system: NpvSystem,
    rho: float,
    count: int,
    theta_traj: ParamTrajectory,
    dt: float,
    horizon: float,
    rng,
    config: Optional[VerifierConfig] = None,
    policy: Optional[Callable] = None,
    seed: Optional[int] = None,
    initial_states: Optional[np.ndarray] = None,
) -> VerificationReport:
    """Simulate from level-set samples; check convergence, V decrease, bounds."""
    if count < 1:
        raise ValueError("count must be >= 1")
    config = config or VerifierConfig()
    policy = policy or make_policy(pi, system)
    acceptance = None
    if initial_states is None:
        sample = sample_level_set(V, system, rho, count, rng, max_draws=config.max_draws, **config.level_kw())
        initial_states, acceptance = sample.points, sample.acceptance_rate
    steps = _step_count(dt, horizon)
    x0 = np.asarray(initial_states, dtype=np.float64)[:count]
    converged = np.zeros(count, dtype=bool)
    monotone = np.ones(count, dtype=bool)
    in_bounds = np.ones(count, dtype=bool)
    alive = np.ones(count, dtype=bool)
    for s in range(0, count, config.chunk):
        x = x0[s : s + config.chunk].copy()
        sl = slice(s, s + len(x))
        v_prev = None
        ok_mono = np.ones(len(x), dtype=bool)
        ok_bnd = np.ones(len(x), dtype=bool)
        live = np.ones(len(x), dtype=bool)
        for k in range(steps + 1):
            t = k * dt
            th, _ = _theta_at(theta_traj, t, len(x))
            v = nw.lyapunov_value(V, system, x, th)
            if v_prev is not None:
                ok_mono &= v <= v_prev + 1e-6 * (1.0 + v_prev)
            v_prev = v
            if k == steps:
                break
            x_new, u, _ = _rk4(system, policy, x, t, dt, theta_traj)
            u = np.asarray(u)
            ok_bnd &= np.all((u >= system.u_lo) & (u <= system.u_hi), axis=1)
            blown = ~np.all(np.isfinite(x_new), axis=1) | (np.linalg.norm(x_new, axis=1) > 1e6)
            live &= ~blown
            x = np.where(blown[:, None], x, x_new)
        final = np.linalg.norm(system.wrap(x), axis=1)
        converged[sl] = live & (final <= config.conv_radius)
        monotone[sl] = ok_mono & live
        in_bounds[sl] = ok_bnd
        alive[sl] = live
    return VerificationReport(
        "trajectory",
        count,
        violation_count=int(np.sum(~converged)),
        violation_rate=float(np.mean(~converged)),
        convergence_fraction=float(np.mean(converged)),
        monotone_fraction=float(np.mean(monotone)),
        input_bound_fraction=float(np.mean(in_bounds)),
        diverged=int(np.sum(~alive)),
        level_set_acceptance=acceptance,
        seed=seed,
    )


# ---------------------------------------------------------------------------
# slices
# ---------------------------------------------------------------------------


@dataclass
class RoaGrid:
    axes: tuple
    axis_values: tuple  # (values along axes[0], values along axes[1])
    fixed: np.ndarray
    levels: np.ndarray  # (res1, res0): rows follow axes[1], columns axes[0]
    rho: float

    @property
    def member(self) -> np.ndarray:
        return self.levels <= self.rho

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            fh.write(f"# axes={list(self.axes)} rho={self.rho!r} fixed={self.fixed.tolist()}\n")
            w = csv.writer(fh)
            w.writerow([f"x{self.axes[0]}", f"x{self.axes[1]}", "level", "member"])
            for j, b in enumerate(self.axis_values[1]):
                for i, a in enumerate(self.axis_values[0]):
                    w.writerow([repr(float(a)), repr(float(b)), repr(float(self.levels[j, i])),
                                int(self.member[j, i])])

    def to_svg(self, path, cell=6):
        ny, nx = self.levels.shape
        width, height = nx * cell, ny * cell
        parts = [
            f'<svg xmlns="http://www.w3.org/2000/svg" width="{width + 80}" height="{height + 60}">',
            f'<g transform="translate(60,10)">',
        ]
        finite = np.isfinite(self.levels)
        top = max(self.rho, float(np.max(self.levels[finite]))) if finite.any() else self.rho
        for j in range(ny):
            for i in range(nx):
                lv = self.levels[j, i]
                if lv <= self.rho:
                    shade = int(80 + 120 * lv / self.rho)
                    color = f"rgb(30,{shade},60)"
                else:
                    shade = int(255 - 155 * min(1.0, (lv - self.rho) / max(top - self.rho, 1e-12)))
                    color = f"rgb({shade},{shade},{shade})"
                y = (ny - 1 - j) * cell
                parts.append(f'<rect x="{i * cell}" y="{y}" width="{cell}" height="{cell}" fill="{color}"/>')
        a0, a1 = self.axis_values
        parts.append(
            f'<text x="{width / 2}" y="{height + 30}" font-size="12" text-anchor="middle">'
            f"x{self.axes[0]} [{a0[0]:.3g}, {a0[-1]:.3g}]</text>"
        )
        parts.append(
            f'<text x="-40" y="{height / 2}" font-size="12" transform="rotate(-90 -40 {height / 2})" '
            f'text-anchor="middle">x{self.axes[1]} [{a1[0]:.3g}, {a1[-1]:.3g}]</text>'
        )
        parts.append("</g></svg>")
        with open(path, "w") as fh:
            fh.write("\n".join(parts) + "\n")


def roa_slice_grid(
    V: LyapunovFunction,
    system: NpvSystem,
    rho: float,
    axes=(0, 1),
    resolution=101,
    fixed_values=None,
    rng=None,
    probe_count=64,
    pgd_steps=10,
    refine=4,
    bounds=None,
) -> RoaGrid:
    """Level-set membership over a 2-D slice of the state box."""
    a0, a1 = axes
    if not (0 <= a0 < system.n and 0 <= a1 < system.n and a0 != a1):
        raise ValueError(f"invalid slice axes {axes}")
    res = (resolution, resolution) if np.isscalar(resolution) else tuple(resolution)
    if min(res) < 2:
        raise ValueError("resolution must be >= 2 per axis")
    fixed = np.zeros(system.n) if fixed_values is None else np.asarray(fixed_values, dtype=np.float64)
    if bounds is None:
        bounds = ((system.x_lo[a0], system.x_hi[a0]), (system.x_lo[a1], system.x_hi[a1]))
    g0 = np.linspace(*bounds[0], res[0])
    g1 = np.linspace(*bounds[1], res[1])
    pts = np.tile(fixed, (res[0] * res[1], 1))
    mesh1, mesh0 = np.meshgrid(g1, g0, indexing="ij")
    pts[:, a0] = mesh0.ravel()
    pts[:, a1] = mesh1.ravel()
    rng = np.random.default_rng(0) if rng is None else rng
    _, lvl = nw.level_theta(V, system, pts, probe_count, pgd_steps, rng, refine=refine)
    return RoaGrid((a0, a1), (g0, g1), fixed, lvl.reshape(res[1], res[0]), rho)


def box_in_level_set(
    V: LyapunovFunction,
    system: NpvSystem,
    rho: float,
    lo,
    hi,
    per_axis: int = 41,
    rng=None,
    probe_count=64,
    pgd_steps=10,
    refine=4,
):
    """Check a state box against the level set on a uniform grid (faces included).

    Returns (contained, largest level value on the grid).
    """
    lo = np.asarray(lo, dtype=np.float64)
    hi = np.asarray(hi, dtype=np.float64)
    if lo.shape != (system.n,) or hi.shape != (system.n,) or np.any(lo > hi):
        raise ValueError("box bounds must be length-n with lo <= hi")
    if per_axis < 2:
        raise ValueError("per_axis must be >= 2")
    axes = [np.linspace(a, b, per_axis) for a, b in zip(lo, hi)]
    pts = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, system.n)
    rng = np.random.default_rng(0) if rng is None else rng
    _, lvl = nw.level_theta(V, system, pts, probe_count, pgd_steps, rng, refine=refine)
    worst = float(np.max(lvl))
    return worst <= rho, worst
