"""Two-stage counterexample-guided training of the certificate and controller."""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, asdict
from typing import Callable, Optional

import numpy as np

from . import diff_engine as de
from . import networks as nw
from .networks import LyapunovFunction, PdController
from .systems import NpvSystem, GainSchedule

log = logging.getLogger(__name__)

LOSS_MODES = ("per-vertex-hinge", "paper-sum", "worst-vertex")

__all__ = [
    "TrainConfig",
    "SampleBuffer",
    "AdamState",
    "PgdResult",
    "TrainingError",
    "adam_step",
    "pgd_attack",
    "reduce_residual",
    "stage1_loss",
    "stage2_losses",
    "pretrain_controller",
    "pretrain_lyapunov",
    "lifted_riccati",
    "sample_near_equilibrium",
    "run_stage1",
    "run_stage2",
    "LOSS_MODES",
]


class TrainingError(RuntimeError):
    """Raised on divergence; ``last_good`` holds the last finite parameters."""

    def __init__(self, message, last_good=None):
        super().__init__(message)
        self.last_good = last_good


@dataclass
class TrainConfig:
    n_iter: int = 500
    n_iter_stage2: Optional[int] = None  # None: same as n_iter
    n_epoch: int = 10
    n_pgd: int = 20
    n_stagnation: int = 100
    stage1_patience: int = 100
    samples_per_iter: int = 1024
    k3: float = 0.1
    pgd_step: float = 0.05
    pgd_mode: str = "sign"
    beta1: float = 1.0
    beta2: float = 0.5
    rho: float = 1.0
    lr: float = 1e-5
    epsilon: float = 1e-2
    buffer_capacity: int = 200_000
    minibatch: int = 4096
    max_batches_per_epoch: Optional[int] = None
    loss_mode: str = "per-vertex-hinge"
    distance: str = "encoded"
    optimizer: str = "adam"
    train_lyapunov: bool = True
    train_controller: bool = True
    level_probes: int = 8
    level_steps: int = 4
    level_refine: int = 2
    volume_samples: int = 2048
    pretrain_samples: int = 20_000
    pretrain_epochs: int = 30
    pretrain_lr: float = 1e-3
    pretrain_minibatch: int = 512
    pretrain_near_fraction: float = 0.5
    certificate_epochs: int = 30
    certificate_lr: float = 3e-3
    certificate_minibatch: int = 256
    certificate_delta: float = 1e-2
    seed: int = 0

    def __post_init__(self):
        if self.loss_mode not in LOSS_MODES:
            raise ValueError(f"loss_mode must be one of {LOSS_MODES}")
        if self.distance not in ("encoded", "raw"):
            raise ValueError("distance must be 'encoded' or 'raw'")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError("optimizer must be 'adam' or 'sgd'")
        if self.pgd_mode not in ("sign", "gradient"):
            raise ValueError("pgd_mode must be 'sign' or 'gradient'")
        for name in ("rho", "lr", "epsilon", "k3", "pgd_step"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        for name in ("beta1", "beta2"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        for name in ("n_iter", "n_epoch", "n_pgd", "samples_per_iter", "buffer_capacity", "minibatch"):
            if getattr(self, name) < 0 or (name != "n_iter" and getattr(self, name) == 0 and name != "n_pgd"):
                raise ValueError(f"{name} must be positive")

    @property
    def stage2_iters(self) -> int:
        return self.n_iter if self.n_iter_stage2 is None else self.n_iter_stage2

    def to_dict(self):
        return asdict(self)


# ---------------------------------------------------------------------------
# buffers and optimizer
# ---------------------------------------------------------------------------


class SampleBuffer:
    """FIFO store of (x, theta) points with their insertion iteration."""

    def __init__(self, capacity: int, n: int, n_theta: int):
        self.capacity = int(capacity)
        self.x = np.zeros((0, n))
        self.theta = np.zeros((0, n_theta))
        self.inserted = np.zeros(0, dtype=np.int64)

    def __len__(self):
        return len(self.x)

    def add(self, x, theta, iteration: int) -> int:
        x = np.asarray(x, dtype=np.float64).reshape(-1, self.x.shape[1])
        theta = np.asarray(theta, dtype=np.float64).reshape(-1, self.theta.shape[1])
        self.x = np.concatenate([self.x, x])[-self.capacity :]
        self.theta = np.concatenate([self.theta, theta])[-self.capacity :]
        self.inserted = np.concatenate(
            [self.inserted, np.full(len(x), iteration, dtype=np.int64)]
        )[-self.capacity :]
        return len(x)

    def batches(self, rng, size, max_batches=None):
        order = rng.permutation(len(self))
        starts = range(0, len(order), size)
        if max_batches is not None:
            starts = list(starts)[:max_batches]
        for s in starts:
            idx = order[s : s + size]
            yield self.x[idx], self.theta[idx]


@dataclass
class AdamState:
    m: list
    v: list
    step: int = 0
    skipped: int = 0

    @classmethod
    def zeros_like(cls, params):
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params])


def adam_step(params, grads, state: AdamState, lr, b1=0.9, b2=0.999, eps=1e-8):
    """One bias-corrected Adam update.  Non-finite gradients skip the step."""
    if len(params) != len(grads) or any(p.shape != g.shape for p, g in zip(params, grads)):
        raise de.ShapeError("parameters and gradients are not aligned")
    if not all(np.all(np.isfinite(g)) for g in grads):
        state.skipped += 1
        return list(params), state
    state.step += 1
    t = state.step
    new = []
    for i, (p, g) in enumerate(zip(params, grads)):
        state.m[i] = b1 * state.m[i] + (1 - b1) * g
        state.v[i] = b2 * state.v[i] + (1 - b2) * g * g
        m_hat = state.m[i] / (1 - b1**t)
        v_hat = state.v[i] / (1 - b2**t)
        new.append(p - lr * m_hat / (np.sqrt(v_hat) + eps))
    return new, state


def _sgd_step(params, grads, state: AdamState, lr):
    if not all(np.all(np.isfinite(g)) for g in grads):
        state.skipped += 1
        return list(params), state
    state.step += 1
    return [p - lr * g for p, g in zip(params, grads)], state


# ---------------------------------------------------------------------------
# adversary
# ---------------------------------------------------------------------------


@dataclass
class PgdResult:
    points: np.ndarray
    values: np.ndarray
    start_values: np.ndarray
    nonfinite: int = 0


def pgd_attack(
    objective: Callable[[np.ndarray], tuple[np.ndarray, np.ndarray]],
    box,
    starts,
    steps: int,
    step_size: float,
    mode: str = "gradient",
    accept: Optional[Callable[[np.ndarray], np.ndarray]] = None,
) -> PgdResult:
    """Projected gradient ascent inside a box, keeping each start's best iterate.

    ``objective(points) -> (values (B,), grads (B, d))``.  The per-axis step
    is ``step_size`` times the box half-width, applied to the raw gradient
    (``mode='gradient'``) or its sign (``mode='sign'``).  ``accept`` may veto
    iterates (e.g. outside a level set); vetoed points stay where they were.
    """
    lo = np.asarray(box[0], dtype=np.float64)
    hi = np.asarray(box[1], dtype=np.float64)
    if np.any(lo > hi):
        raise ValueError("empty box")
    p = np.array(starts, dtype=np.float64)
    if np.any(p < lo - 1e-12) or np.any(p > hi + 1e-12):
        raise ValueError("starts must lie inside the box")
    scale = step_size * 0.5 * (hi - lo)
    val, grad = objective(p)
    start_val = val.copy()
    best_p, best_v = p.copy(), val.copy()
    dead = ~np.isfinite(val)
    for _ in range(steps):
        dead |= ~np.all(np.isfinite(grad), axis=1)
        direction = np.sign(grad) if mode == "sign" else grad
        direction = np.where(dead[:, None], 0.0, np.nan_to_num(direction))
        cand = np.clip(p + scale * direction, lo, hi)
        if accept is not None:
            ok = accept(cand)
            cand = np.where(ok[:, None], cand, p)
        p = cand
        val, grad = objective(p)
        improved = (val > best_v) & ~dead & np.isfinite(val)
        best_p[improved] = p[improved]
        best_v[improved] = val[improved]
    best_p[dead] = np.array(starts, dtype=np.float64)[dead]
    best_v[dead] = start_val[dead]
    return PgdResult(best_p, best_v, start_val, int(dead.sum()))


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


def reduce_residual(residual, mode: str):
    """Per-sample hinge penalties from a (B, R) residual over rate vertices."""
    if mode == "per-vertex-hinge":
        return de.reduce_sum(de.relu(residual), axis=-1)
    if mode == "paper-sum":
        return de.relu(de.reduce_sum(residual, axis=-1))
    if mode == "worst-vertex":
        return de.relu(de.reduce_max(residual, axis=-1))
    raise ValueError(f"unknown loss mode {mode!r}")


def violation_score(residual, mode: str):
    """Signed violation used by the adversary and the CEX check."""
    if mode == "paper-sum":
        return de.reduce_sum(residual, axis=-1)
    return de.reduce_max(residual, axis=-1)


def stage1_loss(V, pi, system, x, theta, k3, loss_mode, v_params=None, pi_params=None, raw_norm=False):
    r = nw.condition_residual(V, pi, system, x, theta, k3, v_params, pi_params, raw_norm)
    return de.reduce_mean(reduce_residual(r, loss_mode))


def stage2_losses(
    V,
    pi,
    system,
    cex_x,
    cex_theta,
    cand_x,
    rho,
    k3,
    cex_theta_star=None,
    cand_theta_star=None,
    v_params=None,
    pi_params=None,
    raw_norm=False,
    level_kw=None,
):
    """(L_cert, L_grow).

    ``*_theta_star`` are the level-set maximizers over theta; when omitted
    they are estimated with :func:`networks.level_theta`.  The max over theta
    is differentiated at the maximizer.
    """
    level_kw = level_kw or {}
    if cex_theta_star is None:
        cex_theta_star, _ = nw.level_theta(V, system, cex_x, **level_kw)
    if cand_theta_star is None:
        cand_theta_star, _ = nw.level_theta(V, system, cand_x, **level_kw)
    r = nw.condition_residual(V, pi, system, cex_x, cex_theta, k3, v_params, pi_params, raw_norm)
    worst = de.reduce_max(r, axis=-1)
    lvl_cex, _ = nw.lyapunov_dual(V, system, cex_x, cex_theta_star, params=v_params)
    l_cert = de.reduce_mean(de.relu(de.minimum(worst, rho - lvl_cex)))
    lvl_cand, _ = nw.lyapunov_dual(V, system, cand_x, cand_theta_star, params=v_params)
    l_grow = de.reduce_mean(de.relu(lvl_cand - rho))
    return l_cert, l_grow


# ---------------------------------------------------------------------------
# objectives for the adversary
# ---------------------------------------------------------------------------


def _split(system, p):
    return p[:, : system.n], p[:, system.n :]


def stage1_objective(V, pi, system, k3, mode, raw_norm=False):
    def objective(p):
        tape = de.GradTape()
        pv = tape.var(p)
        x, theta = pv[:, : system.n], pv[:, system.n :]
        r = nw.condition_residual(V, pi, system, x, theta, k3, raw_norm=raw_norm)
        score = violation_score(r, mode)
        (g,) = tape.gradient(de.reduce_sum(score), [pv])
        return score.value, g

    return objective


def stage2_objective(V, pi, system, k3, rho, rng, level_kw, raw_norm=False):
    def objective(p):
        x_np = p[:, : system.n]
        theta_star, _ = nw.level_theta(V, system, x_np, rng=rng, **level_kw)
        tape = de.GradTape()
        pv = tape.var(p)
        x, theta = pv[:, : system.n], pv[:, system.n :]
        r = nw.condition_residual(V, pi, system, x, theta, k3, raw_norm=raw_norm)
        lvl, _ = nw.lyapunov_dual(V, system, x, theta_star)
        score = de.minimum(de.reduce_max(r, axis=-1), rho - lvl)
        (g,) = tape.gradient(de.reduce_sum(score), [pv])
        return score.value, g

    return objective


def joint_box(system):
    return (
        np.concatenate([system.x_lo, system.theta_lo]),
        np.concatenate([system.x_hi, system.theta_hi]),
    )


# ---------------------------------------------------------------------------
# training loops
# ---------------------------------------------------------------------------


class _Learner:
    """Parameter bookkeeping shared by the stages."""

    def __init__(self, V: LyapunovFunction, pi: PdController, cfg: TrainConfig):
        self.V, self.pi, self.cfg = V, pi, cfg
        self.state = AdamState.zeros_like(self.arrays())

    def arrays(self):
        return self.V.phi_net.arrays() + self.pi.pi_net.arrays()

    def split(self, arrays):
        k = len(self.V.phi_net.arrays())
        return arrays[:k], arrays[k:]

    def tape(self):
        tape = de.GradTape()
        return tape, self.V.phi_net.on_tape(tape), self.pi.pi_net.on_tape(tape)

    def step(self, tape, loss, vp, pp):
        grads = tape.gradient(loss, vp.leaves + pp.leaves)
        gv, gp = self.split(grads)
        if not self.cfg.train_lyapunov:
            gv = [np.zeros_like(g) for g in gv]
        if not self.cfg.train_controller:
            gp = [np.zeros_like(g) for g in gp]
        stepper = adam_step if self.cfg.optimizer == "adam" else _sgd_step
        new, self.state = stepper(self.arrays(), gv + gp, self.state, self.cfg.lr)
        av, ap = self.split(new)
        self.V = LyapunovFunction(self.V.phi_net.with_arrays(av), self.V.epsilon)
        self.pi = PdController(self.pi.pi_net.with_arrays(ap))


def _check_loss(value, learner, last_good):
    if not np.isfinite(value):
        raise TrainingError("loss diverged (non-finite)", last_good)


def _history_row(stage, it, viol, buf, loss, t0, **extra):
    row = dict(
        iteration=it,
        stage=stage,
        violation_rate=float(viol),
        buffer_size=int(buf),
        loss=float(loss),
        loss_cert=float("nan"),
        loss_grow=float("nan"),
        lambda_volume=float("nan"),
        wall_time=time.perf_counter() - t0,
    )
    row.update({k: float(v) for k, v in extra.items()})
    return row


def run_stage1(system: NpvSystem, V, pi, cfg: TrainConfig, rng, callback=None):
    """Counterexample-guided joint synthesis over the whole region of interest."""
    learner = _Learner(V, pi, cfg)
    buffer = SampleBuffer(cfg.buffer_capacity, system.n, system.n_theta)
    box = joint_box(system)
    raw = cfg.distance == "raw"
    history = []
    t0 = time.perf_counter()
    stall = 0
    for it in range(cfg.n_iter):
        starts = np.concatenate(
            [system.sample_x(rng, cfg.samples_per_iter), system.sample_theta(rng, cfg.samples_per_iter)],
            axis=1,
        )
        obj = stage1_objective(learner.V, learner.pi, system, cfg.k3, cfg.loss_mode, raw)
        res = pgd_attack(obj, box, starts, cfg.n_pgd, cfg.pgd_step, cfg.pgd_mode)
        bad = res.values > 0
        added = buffer.add(res.points[bad, : system.n], res.points[bad, system.n :], it)
        viol = bad.mean()
        last_good = (learner.V, learner.pi)
        losses = []
        if len(buffer):
            for _ in range(cfg.n_epoch):
                for xb, tb in buffer.batches(rng, cfg.minibatch, cfg.max_batches_per_epoch):
                    tape, vp, pp = learner.tape()
                    loss = stage1_loss(learner.V, learner.pi, system, xb, tb, cfg.k3, cfg.loss_mode, vp, pp, raw)
                    _check_loss(loss.value, learner, last_good)
                    losses.append(float(loss.value))
                    learner.step(tape, loss, vp, pp)
        row = _history_row(1, it, viol, len(buffer), np.mean(losses) if losses else 0.0, t0)
        history.append(row)
        if callback:
            callback(row)
        log.info("stage1 it=%d viol=%.4f buf=%d loss=%.4g", it, viol, len(buffer), row["loss"])
        stall = stall + 1 if added == 0 else 0
        if viol < 0.01 and stall >= cfg.stage1_patience:
            break
    return learner.V, learner.pi, history


def estimate_volume(V, system, rho, points, rng, level_kw):
    _, lvl = nw.level_theta(V, system, points, rng=rng, **level_kw)
    return float(np.mean(lvl <= rho))


def _level_kw(cfg):
    return dict(probe_count=cfg.level_probes, pgd_steps=cfg.level_steps, refine=cfg.level_refine)


def run_stage2(system: NpvSystem, V, pi, cfg: TrainConfig, rng, callback=None):
    """Level-set-guided refinement of the certified region."""
    learner = _Learner(V, pi, cfg)
    cex = SampleBuffer(cfg.buffer_capacity, system.n, system.n_theta)
    cand = SampleBuffer(cfg.buffer_capacity, system.n, system.n_theta)
    box = joint_box(system)
    raw = cfg.distance == "raw"
    lkw = _level_kw(cfg)
    vol_points = system.sample_x(rng, cfg.volume_samples)
    history = []
    t0 = time.perf_counter()
    stall = 0
    for it in range(cfg.stage2_iters):
        starts = np.concatenate(
            [system.sample_x(rng, cfg.samples_per_iter), system.sample_theta(rng, cfg.samples_per_iter)],
            axis=1,
        )
        obj = stage2_objective(learner.V, learner.pi, system, cfg.k3, cfg.rho, rng, lkw, raw)
        res = pgd_attack(obj, box, starts, cfg.n_pgd, cfg.pgd_step, cfg.pgd_mode)
        bad = res.values > 0
        added = cex.add(res.points[bad, : system.n], res.points[bad, system.n :], it)
        viol = bad.mean()
        cand.add(system.sample_x(rng, cfg.samples_per_iter), system.sample_theta(rng, cfg.samples_per_iter), it)
        last_good = (learner.V, learner.pi)
        totals, certs, grows = [], [], []
        for _ in range(cfg.n_epoch):
            cand_iter = cand.batches(rng, cfg.minibatch, cfg.max_batches_per_epoch)
            cex_iter = cex.batches(rng, cfg.minibatch, cfg.max_batches_per_epoch) if len(cex) else None
            for cx, _ in cand_iter:
                tape, vp, pp = learner.tape()
                cand_star, _ = nw.level_theta(learner.V, system, cx, rng=rng, **lkw)
                lvl_c, _ = nw.lyapunov_dual(learner.V, system, cx, cand_star, params=vp)
                l_grow = de.reduce_mean(de.relu(lvl_c - cfg.rho))
                batch = next(cex_iter, None) if cex_iter is not None else None
                if batch is not None:
                    ex, et = batch
                    ex_star, _ = nw.level_theta(learner.V, system, ex, rng=rng, **lkw)
                    l_cert, _ = stage2_losses(
                        learner.V, learner.pi, system, ex, et, cx[:1], cfg.rho, cfg.k3,
                        ex_star, cand_star[:1], vp, pp, raw,
                    )
                else:
                    l_cert = 0.0
                total = cfg.beta1 * de.relu(l_cert) + cfg.beta2 * de.relu(l_grow)
                if not isinstance(total, de.Var):
                    continue
                _check_loss(total.value, learner, last_good)
                totals.append(float(total.value))
                certs.append(float(de._val(l_cert)))
                grows.append(float(l_grow.value))
                learner.step(tape, total, vp, pp)
        vol = estimate_volume(learner.V, system, cfg.rho, vol_points, rng, lkw)
        row = _history_row(
            2, it, viol, len(cex), np.mean(totals) if totals else 0.0, t0,
            loss_cert=np.mean(certs) if certs else 0.0,
            loss_grow=np.mean(grows) if grows else 0.0,
            lambda_volume=vol,
        )
        history.append(row)
        if callback:
            callback(row)
        log.info(
            "stage2 it=%d viol=%.4f cex=%d cert=%.3g grow=%.3g vol=%.3f",
            it, viol, len(cex), row["loss_cert"], row["loss_grow"], vol,
        )
        stall = stall + 1 if added == 0 else 0
        if viol < 0.01 and stall >= cfg.n_stagnation:
            break
    return learner.V, learner.pi, history


# ---------------------------------------------------------------------------
# controller initialization
# ---------------------------------------------------------------------------


def lqr_targets(system: NpvSystem, schedule: GainSchedule, x, theta, margin=0.01):
    """u*(theta) - K(theta) x, clamped strictly inside the bounds."""
    k = schedule.lookup(theta)
    u = np.asarray(system.equilibrium_input(theta)) - np.einsum("bij,bj->bi", k, x)
    pad = margin * (system.u_hi - system.u_lo)
    return np.clip(u, system.u_lo + pad, system.u_hi - pad)


def pretrain_controller(
    pi: PdController,
    system: NpvSystem,
    schedule: GainSchedule,
    sample_count: int,
    epochs: int,
    rng,
    lr: float = 1e-3,
    minibatch: int = 512,
    near_fraction: float = 0.0,
):
    """Fit the controller to the gain-scheduled LQR law. Returns (pi, mse per epoch).

    ``near_fraction`` of the samples are pulled toward the equilibrium so the
    local gains, which the saturated far-field targets barely constrain, are
    fitted as well.
    """
    if len(schedule) == 0:
        raise ValueError("empty gain schedule")
    x = sample_near_equilibrium(system, rng, sample_count, near_fraction)
    theta = system.sample_theta(rng, sample_count)
    target = lqr_targets(system, schedule, x, theta)
    arrays = pi.pi_net.arrays()
    state = AdamState.zeros_like(arrays)
    net = pi.pi_net
    history = []
    recent = []
    for ep in range(epochs):
        order = rng.permutation(sample_count)
        losses = []
        for s in range(0, sample_count, minibatch):
            idx = order[s : s + minibatch]
            tape = de.GradTape()
            pp = net.on_tape(tape)
            u = nw.control(PdController(net), system, x[idx], theta[idx], pp)
            err = u - target[idx]
            loss = de.reduce_mean(de.reduce_sum(err * err, axis=-1))
            value = float(loss.value)
            recent.append(value)
            _check_fit(recent, value, ep)
            grads = tape.gradient(loss, pp.leaves)
            arrays, state = adam_step(arrays, grads, state, lr)
            net = net.with_arrays(arrays)
            losses.append(value)
        history.append(float(np.mean(losses)))
        log.info("pretrain epoch=%d mse=%.5f", ep, history[-1])
    return PdController(net), history


def _check_fit(recent, value, epoch):
    """Divergence test for the supervised fits: non-finite, or 10x above both
    the loss 100 steps ago and the first loss."""
    if not np.isfinite(value):
        raise TrainingError(f"pretraining diverged at epoch {epoch}: loss {value}")
    if len(recent) > 100 and value > 10 * max(recent[-101], recent[0]):
        raise TrainingError(f"pretraining diverged at epoch {epoch}: {recent[-101]:.3g} -> {value:.3g}")


def sample_near_equilibrium(system: NpvSystem, rng, count: int, near_fraction: float = 0.0):
    """Uniform samples of X, the first ``near_fraction`` of them shrunk toward
    x* = 0 by a log-uniform factor in [1e-3, 1]."""
    if not 0.0 <= near_fraction <= 1.0:
        raise ValueError("near_fraction must lie in [0, 1]")
    x = system.sample_x(rng, count)
    k = int(round(near_fraction * count))
    if k:
        x[:k] *= np.exp(rng.uniform(np.log(1e-3), 0.0, (k, 1)))
    return x


# ---------------------------------------------------------------------------
# certificate initialization
# ---------------------------------------------------------------------------


def lifted_riccati(system: NpvSystem, schedule: GainSchedule) -> np.ndarray:
    """Riccati matrix at the central grid point, expressed on the encoding.

    With J the encoder Jacobian at x*, P_z = J+^T P J+ + lambda_max(P) (I - J J+):
    the state directions keep the LQR cost-to-go and the directions the encoder
    adds (cos(phi) - 1 for an angle) get the stiffest weight, which keeps
    other equilibria of the encoding (phi = pi) outside small level sets.
    """
    p = schedule.riccati[len(schedule) // 2]
    x0 = np.zeros((1, system.n))
    jac = np.asarray(system.encode_tangent(x0, np.eye(system.n)[:, None, :]))[:, 0, :].T
    jp = np.linalg.pinv(jac)
    null = np.eye(system.enc_width) - jac @ jp
    return jp.T @ p @ jp + np.max(np.linalg.eigvalsh(p)) * null


def pretrain_lyapunov(
    V: LyapunovFunction,
    system: NpvSystem,
    target: np.ndarray,
    sample_count: int,
    epochs: int,
    rng,
    lr: float = 3e-3,
    minibatch: int = 256,
    delta: float = 1e-2,
    gradient_weight: float = 1.0,
):
    """Fit V(x, theta) and grad_x V to the quadratic z^T target z.

    Errors are scaled by |z|^2 + delta, so the fit is relative away from x*
    without chasing the direction-dependent shape a smooth phi cannot produce
    at x* itself.  Returns (V, loss per epoch).
    """
    target = np.asarray(target, dtype=np.float64)
    if target.shape != (system.enc_width,) * 2:
        raise ValueError(f"target must be {system.enc_width}x{system.enc_width}")
    x = system.sample_x(rng, sample_count)
    theta = system.sample_theta(rng, sample_count)
    z = np.asarray(system.displacement(x))
    basis = np.broadcast_to(np.eye(system.n)[:, None, :], (system.n,) + x.shape)
    dz = np.asarray(system.encode_tangent(x, basis))
    value_t = np.einsum("bi,ij,bj->b", z, target, z)
    grad_t = 2.0 * np.einsum("kbi,ij,bj->kb", dz, target, z)
    scale = np.sum(z * z, axis=-1) + delta
    arrays = V.phi_net.arrays()
    state = AdamState.zeros_like(arrays)
    net = V.phi_net
    history = []
    recent = []
    for ep in range(epochs):
        order = rng.permutation(sample_count)
        losses = []
        for s in range(0, sample_count, minibatch):
            idx = order[s : s + minibatch]
            tape = de.GradTape()
            pp = net.on_tape(tape)
            cur = LyapunovFunction(net, V.epsilon)
            val, dval = nw.lyapunov_dual(cur, system, x[idx], theta[idx], basis[:, idx], None, pp)
            ev = val - value_t[idx]
            eg = dval - grad_t[:, idx]
            loss = de.reduce_mean(ev * ev / scale[idx] ** 2) + gradient_weight * de.reduce_mean(
                de.reduce_sum(eg * eg, axis=0) / scale[idx]
            )
            value = float(loss.value)
            recent.append(value)
            _check_fit(recent, value, ep)
            grads = tape.gradient(loss, pp.leaves)
            arrays, state = adam_step(arrays, grads, state, lr)
            net = net.with_arrays(arrays)
            losses.append(value)
        history.append(float(np.mean(losses)))
        log.info("certificate fit epoch=%d loss=%.5f", ep, history[-1])
    return LyapunovFunction(net, V.epsilon), history
