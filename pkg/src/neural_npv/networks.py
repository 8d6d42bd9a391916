"""Parameter-dependent Lyapunov function and bounded controller.

V(x, theta) = (phi(x, theta) . z)^2 + eps |z|^2, with z the encoded
displacement from the equilibrium, and

    u = u_lo + (tanh(h(x, theta) - h(x*, theta) + atanh(u_eq_norm)) + 1) / 2 * (u_hi - u_lo)

where h is the controller network's linear head and u_eq_norm the
equilibrium input normalized to [-1, 1].
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import diff_engine as de
from .diff_engine import DualBatch, NetworkParams, TapedParams
from .systems import NpvSystem, ConfigurationError, vertices

__all__ = [
    "LyapunovFunction",
    "PdController",
    "encode_state",
    "lyapunov_value",
    "quadratic_floor",
    "lyapunov_gradients",
    "lyapunov_dual",
    "control",
    "vdot",
    "vdot_vertices",
    "condition_residual",
    "level_value",
    "level_theta",
    "PREACT_LIMIT",
]

# |pre-activation| cap so that tanh stays strictly inside (-1, 1) in float64
PREACT_LIMIT = 15.0


@dataclass
class LyapunovFunction:
    phi_net: NetworkParams
    epsilon: float = 1e-2

    def __post_init__(self):
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")


@dataclass
class PdController:
    pi_net: NetworkParams


def _batch(a, width):
    a = np.asarray(a, dtype=np.float64)
    if a.ndim == 1:
        return a.reshape(1, width), True
    return a, False


def _in(system, x, theta):
    return de.concat([system.encode(x), theta])


def encode_state(system: NpvSystem, x):
    """(encoded state, encoded displacement from x*)."""
    return system.encode(x), system.displacement(x)


# -- Lyapunov -----------------------------------------------------------------


def lyapunov_dual(
    V: LyapunovFunction,
    system: NpvSystem,
    x,
    theta,
    dx=None,
    dtheta=None,
    params: Optional[TapedParams] = None,
):
    """V and its directional derivatives along (dx_k, dtheta_k).

    ``dx``: (K, B, n), ``dtheta``: (K, B, n_theta), either may be None
    (zero).  Returns (V (B,), dV (K, B) or None).
    """
    z = system.displacement(x)
    inp = _in(system, x, theta)
    tangents = None
    tz = None
    if dx is not None or dtheta is not None:
        k = np.shape(de._val(dx if dx is not None else dtheta))[0]
        xs = np.shape(de._val(x))
        ts = np.shape(de._val(theta))
        if dx is None:
            dx = np.zeros((k,) + xs)
        if dtheta is None:
            dtheta = np.zeros((k,) + ts)
        tz = system.encode_tangent(x, dx)
        tangents = de.concat([tz, dtheta])
    out = de.forward_dual(V.phi_net, DualBatch(inp, tangents), params)
    phi = out.primal
    s = de.reduce_sum(phi * z, axis=-1)
    floor = V.epsilon * de.reduce_sum(z * z, axis=-1)
    val = s * s + floor
    if tangents is None:
        return val, None
    ds = de.reduce_sum(out.tangents * z + phi * tz, axis=-1)
    dval = 2.0 * s * ds + (2.0 * V.epsilon) * de.reduce_sum(z * tz, axis=-1)
    return val, dval


def lyapunov_value(V: LyapunovFunction, system: NpvSystem, x, theta):
    x, single = _batch(x, system.n)
    theta, _ = _batch(theta, system.n_theta)
    val, _ = lyapunov_dual(V, system, x, theta)
    return float(val[0]) if single else val


def quadratic_floor(V: LyapunovFunction, system: NpvSystem, x):
    """eps |z|^2, computed exactly as inside ``lyapunov_value``."""
    x, single = _batch(x, system.n)
    z = system.displacement(x)
    val = V.epsilon * np.sum(z * z, axis=-1)
    return float(val[0]) if single else val


def _basis_tangents(dim, batch_shape, offset, total):
    t = np.zeros((total,) + batch_shape + (dim,))
    for i in range(dim):
        t[offset + i, ..., i] = 1.0
    return t


def lyapunov_gradients(V: LyapunovFunction, system: NpvSystem, x, theta):
    """(dV/dx, dV/dtheta) via forward mode along every coordinate."""
    x, single = _batch(x, system.n)
    theta, _ = _batch(theta, system.n_theta)
    b = x.shape[0]
    total = system.n + system.n_theta
    dx = _basis_tangents(system.n, (b,), 0, total)
    dth = _basis_tangents(system.n_theta, (b,), system.n, total)
    _, dv = lyapunov_dual(V, system, x, theta, dx, dth)
    gx = dv[: system.n].T
    gth = dv[system.n :].T
    if single:
        return gx[0], gth[0]
    return gx, gth


# -- controller -----------------------------------------------------------------


def control(pi: PdController, system: NpvSystem, x, theta, params: Optional[TapedParams] = None):
    """Bounded, equilibrium-anchored control input."""
    single = np.ndim(de._val(x)) == 1
    if single:
        x, _ = _batch(x, system.n)
        theta, _ = _batch(theta, system.n_theta)
    lo, hi = system.u_lo, system.u_hi
    u_eq = system.equilibrium_input(theta)
    u_eq_norm = 2.0 * (u_eq - lo) / (hi - lo) - 1.0
    x_eq = np.zeros(np.shape(de._val(x)))
    h = de.forward(pi.pi_net, _in(system, x, theta), params)
    h_eq = de.forward(pi.pi_net, _in(system, x_eq, theta), params)
    pre = de.clip(h - h_eq + de.arctanh(u_eq_norm), -PREACT_LIMIT, PREACT_LIMIT)
    u = lo + (de.tanh(pre) + 1.0) * (0.5 * (hi - lo))
    if single:
        return np.asarray(u)[0]
    return u


def closed_loop(pi: PdController, system: NpvSystem, x, theta, params=None):
    return system.dynamics(x, control(pi, system, x, theta, params), theta)


# -- derivative along trajectories ------------------------------------------------


def vdot_vertices(
    V: LyapunovFunction,
    pi: PdController,
    system: NpvSystem,
    x,
    theta,
    rates: Optional[np.ndarray] = None,
    v_params: Optional[TapedParams] = None,
    pi_params: Optional[TapedParams] = None,
    return_parts: bool = False,
):
    """dV/dt at every rate in ``rates`` (default: vertices of the rate box).

    Returns (B, R).  Computed as dV/dx . f  +  sum_j dV/dtheta_j * rate_j,
    using 1 + n_theta forward-mode tangents.
    """
    if rates is None:
        rates = system.rate_vertices()
    rates = np.atleast_2d(np.asarray(rates, dtype=np.float64))
    f = closed_loop(pi, system, x, theta, pi_params)
    bshape = np.shape(de._val(x))[:-1]
    k = 1 + system.n_theta
    dx = de.concat([_expand0(f), np.zeros((system.n_theta,) + bshape + (system.n,))], axis=0)
    dth = _basis_tangents(system.n_theta, bshape, 1, k)
    val, dv = lyapunov_dual(V, system, x, theta, dx, dth, v_params)
    along_f = dv[0]
    d_theta = de.stack([dv[1 + j] for j in range(system.n_theta)], axis=-1)
    out = _expand_last(along_f) + de.linear(d_theta, rates)
    if return_parts:
        return out, val
    return out


def _expand0(a):
    if isinstance(a, de.Var):
        return de.stack([a], axis=0)
    return a[None]


def _expand_last(a):
    if isinstance(a, de.Var):
        return de.stack([a], axis=-1)
    return a[..., None]


def vdot(V, pi, system, x, theta, theta_rate):
    """dV/dt for a specific rate vector (single point or batch)."""
    single = np.ndim(x) == 1
    x, _ = _batch(x, system.n)
    theta, _ = _batch(theta, system.n_theta)
    rate = np.atleast_2d(np.asarray(theta_rate, dtype=np.float64))
    if rate.shape[0] == 1:
        out = vdot_vertices(V, pi, system, x, theta, rate)[:, 0]
    else:
        # per-sample rates: evaluate along f and theta-basis, then contract
        zero = np.zeros((1, system.n_theta))
        base = vdot_vertices(V, pi, system, x, theta, np.vstack([zero, np.eye(system.n_theta)]))
        out = base[:, 0] + np.sum((base[:, 1:] - base[:, :1]) * rate, axis=-1)
    return float(out[0]) if single else out


def condition_residual(
    V, pi, system, x, theta, k3, v_params=None, pi_params=None, raw_norm=False
):
    """vdot + k3 |z|^2 at every rate vertex, shape (B, R)."""
    vd = vdot_vertices(V, pi, system, x, theta, None, v_params, pi_params)
    z = x if raw_norm else system.displacement(x)
    dist = de.reduce_sum(z * z, axis=-1)
    return vd + _expand_last(k3 * dist)


# -- level set ----------------------------------------------------------------------


def _v_and_theta_grad(V, system, x, theta):
    """V and dV/dtheta for a (P, B) grid of theta probes per x."""
    p = theta.shape[0]
    xb = np.broadcast_to(x, (p,) + x.shape)
    dth = _basis_tangents(system.n_theta, theta.shape[:-1], 0, system.n_theta)
    val, dv = lyapunov_dual(V, system, xb, theta, None, dth)
    return val, np.moveaxis(dv, 0, -1)


def level_theta(
    V: LyapunovFunction,
    system: NpvSystem,
    x,
    probe_count: int = 64,
    pgd_steps: int = 10,
    rng=None,
    warm=None,
    refine: int = 4,
    step_frac: float = 0.1,
):
    """Approximate argmax over theta of V(x, theta) and the maximum.

    Probes: ``probe_count`` random thetas, the box vertices (if n_theta <= 4)
    and optional warm starts, screened with one forward pass.  The best
    ``refine`` probes per point then take ``pgd_steps`` sign-gradient
    ascent steps of size ``step_frac`` * half-width, halving a probe's step
    whenever it fails to improve.  Returns (theta* (B, n_theta), value (B,)).
    """
    if probe_count < 1 and warm is None:
        raise ValueError("probe_count must be >= 1")
    x = np.asarray(x, dtype=np.float64)
    b = x.shape[0]
    lo, hi = system.theta_lo, system.theta_hi
    half = 0.5 * (hi - lo)
    rng = np.random.default_rng(0) if rng is None else rng
    probes = [rng.uniform(lo, hi, size=(probe_count, b, system.n_theta))]
    if system.n_theta <= 4:
        ver = system.theta_vertices()
        probes.append(np.broadcast_to(ver[:, None, :], (len(ver), b, system.n_theta)))
    if warm is not None:
        probes.append(np.asarray(warm, dtype=np.float64).reshape(-1, b, system.n_theta))
    theta = np.concatenate(probes, axis=0)
    xb = np.broadcast_to(x, (theta.shape[0],) + x.shape)
    val, _ = lyapunov_dual(V, system, xb, theta)
    if pgd_steps > 0 and refine < theta.shape[0]:
        top = np.argsort(-val, axis=0, kind="stable")[:refine]
        cols = np.arange(b)[None, :]
        theta, val = theta[top, cols], val[top, cols]
    val, grad = _v_and_theta_grad(V, system, x, theta)
    step = np.broadcast_to(step_frac * half, theta.shape).copy()
    for _ in range(pgd_steps):
        cand = np.clip(theta + step * np.sign(grad), lo, hi)
        cval, cgrad = _v_and_theta_grad(V, system, x, cand)
        better = cval > val
        theta = np.where(better[..., None], cand, theta)
        val = np.where(better, cval, val)
        grad = np.where(better[..., None], cgrad, grad)
        step = np.where(better[..., None], step, 0.5 * step)
    best = np.argmax(val, axis=0)
    cols = np.arange(b)
    return theta[best, cols], val[best, cols]


def level_value(V, system, x, probe_count=64, pgd_steps=10, rng=None, refine=4):
    """max over theta in the parameter box of V(x, theta) (approximate)."""
    xb, single = _batch(x, system.n)
    _, val = level_theta(V, system, xb, probe_count, pgd_steps, rng, refine=refine)
    return float(val[0]) if single else val
