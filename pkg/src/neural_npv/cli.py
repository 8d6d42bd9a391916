"""Command-line pipeline: configuration, checkpoints and command dispatch.

Usage::

    neural-npv pretrain   --config run.json --out runs/pendulum
    neural-npv train      --config run.json --out runs/pendulum
    neural-npv verify-pgd --config run.json --out runs/pendulum --require
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import json
import logging
import math
import os
import platform
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__
from . import diff_engine as de
from . import networks as nw
from . import systems as sy
from . import trainer as tr
from . import verifier as vf
from .networks import LyapunovFunction, PdController

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
COMMANDS = ("pretrain", "train", "verify-pgd", "verify-traj", "simulate", "roa")

DEFAULT_WIDTHS = {
    "pendulum": ([4, 64, 128, 3], [4, 64, 128, 1]),
    "quadrotor": ([9, 64, 128, 6], [9, 64, 128, 64, 3]),
}

DEFAULT_REQUIRE = {
    "max_violation_rate": 0.01,
    "min_convergence": 0.99,
    "min_input_bound": 1.0,
}


class ConfigError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------


@dataclass
class RunConfig:
    system: str = "pendulum"
    system_overrides: dict = field(default_factory=dict)
    phi_dims: Optional[list] = None
    pi_dims: Optional[list] = None
    phi_init_gain: float = 0.1
    lqr_grid: int = 9
    lqr_q: Optional[list] = None
    lqr_r: Optional[list] = None
    train: tr.TrainConfig = field(default_factory=tr.TrainConfig)
    verify: vf.VerifierConfig = field(default_factory=vf.VerifierConfig)
    simulate_states: Optional[list] = None
    roa_axes: list = field(default_factory=lambda: [0, 1])
    roa_resolution: int = 101
    roa_fixed: Optional[list] = None
    certify_box: Optional[list] = None  # [lo, hi] that the level set must contain
    require: dict = field(default_factory=lambda: dict(DEFAULT_REQUIRE))
    out_dir: str = "runs/default"
    seed: int = 0

    def build_system(self) -> sy.NpvSystem:
        overrides = {}
        for k, v in self.system_overrides.items():
            if k.endswith("_box"):
                v = tuple(tuple(row) for row in v)
            elif k in ("u_lo", "u_hi"):
                v = np.asarray(v, dtype=np.float64)
            overrides[k] = v
        return sy.make_system(self.system, **overrides)

    def to_dict(self):
        return dataclasses.asdict(self)

    def validate(self):
        if self.system not in DEFAULT_WIDTHS:
            raise ConfigError(f"system: unknown plant {self.system!r}")
        try:
            system = self.build_system()
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"system_overrides: {exc}") from exc
        phi_def, pi_def = DEFAULT_WIDTHS[self.system]
        if self.phi_dims is None:
            self.phi_dims = list(phi_def)
        if self.pi_dims is None:
            self.pi_dims = list(pi_def)
        width = system.net_in_width
        if self.phi_dims[0] != width:
            raise ConfigError(f"phi_dims: input width {self.phi_dims[0]} != encoded state + n_theta = {width}")
        if self.pi_dims[0] != width:
            raise ConfigError(f"pi_dims: input width {self.pi_dims[0]} != encoded state + n_theta = {width}")
        if self.phi_dims[-1] != system.enc_width:
            raise ConfigError(f"phi_dims: output width {self.phi_dims[-1]} != encoded state width {system.enc_width}")
        if self.pi_dims[-1] != system.n_u:
            raise ConfigError(f"pi_dims: output width {self.pi_dims[-1]} != n_u = {system.n_u}")
        if len(self.roa_axes) != 2:
            raise ConfigError("roa_axes: need exactly two axes")
        if self.certify_box is not None:
            box = np.asarray(self.certify_box, dtype=np.float64)
            if box.shape != (2, system.n) or np.any(box[0] > box[1]):
                raise ConfigError(f"certify_box: need [lo, hi] with {system.n} entries each and lo <= hi")
        unknown = set(self.require) - set(DEFAULT_REQUIRE)
        if unknown:
            raise ConfigError(f"require: unknown thresholds {sorted(unknown)}")
        return system


def _build(cls, data: dict, where: str):
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
    try:
        return cls(**data)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def config_from_dict(data: dict) -> RunConfig:
    data = dict(data)
    train = _build(tr.TrainConfig, data.pop("train", {}), "train")
    verify = _build(vf.VerifierConfig, data.pop("verify", {}), "verify")
    require = dict(DEFAULT_REQUIRE)
    require.update(data.pop("require", {}))
    cfg = _build(RunConfig, data, "config")
    cfg.train, cfg.verify, cfg.require = train, verify, require
    cfg.validate()
    return cfg


def load_config(path, out_dir=None, echo=True) -> RunConfig:
    """Read a JSON config; absent fields take defaults, unknown keys are errors."""
    try:
        with open(path) as fh:
            data = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not valid JSON ({exc})") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be an object")
    cfg = config_from_dict(data)
    if out_dir is not None:
        cfg.out_dir = str(out_dir)
    if echo:
        Path(cfg.out_dir).mkdir(parents=True, exist_ok=True)
        save_config(Path(cfg.out_dir) / "effective_config.json", cfg)
    return cfg


def save_config(path, cfg: RunConfig):
    write_json(path, cfg.to_dict())


# ---------------------------------------------------------------------------
# JSON with full-precision floats
# ---------------------------------------------------------------------------


def _fmt_float(v: float) -> str:
    if math.isnan(v) or math.isinf(v):
        return json.dumps(v)
    return format(v, ".17g")


def _encode(obj, indent, level):
    pad = " " * (indent * (level + 1))
    end = " " * (indent * level)
    if isinstance(obj, (bool, np.bool_)) or obj is None:
        return json.dumps(bool(obj) if obj is not None else None)
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if isinstance(obj, (float, np.floating)):
        return _fmt_float(float(obj))
    if isinstance(obj, str):
        return json.dumps(obj)
    if isinstance(obj, np.ndarray):
        return _encode(obj.tolist(), indent, level)
    if isinstance(obj, (list, tuple)):
        if all(isinstance(v, (int, float, np.floating, np.integer)) and not isinstance(v, bool) for v in obj):
            return "[" + ", ".join(_encode(v, indent, level) for v in obj) + "]"
        items = [pad + _encode(v, indent, level + 1) for v in obj]
        return "[\n" + ",\n".join(items) + "\n" + end + "]" if items else "[]"
    if isinstance(obj, dict):
        items = [pad + json.dumps(str(k)) + ": " + _encode(v, indent, level + 1) for k, v in sorted(obj.items())]
        return "{\n" + ",\n".join(items) + "\n" + end + "}" if items else "{}"
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def write_json(path, obj, indent=1):
    """Deterministic JSON: sorted keys, floats with 17 significant digits."""
    text = _encode(obj, indent, 0) + "\n"
    with open(path, "w") as fh:
        fh.write(text)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


@dataclass
class Checkpoint:
    config: dict
    lyapunov: LyapunovFunction
    controller: PdController
    history_digest: dict
    seed: int
    stage: str
    version: int = CHECKPOINT_VERSION


def _net_to_dict(net: de.NetworkParams):
    return dict(
        layer_dims=list(net.layer_dims),
        output_activation=net.output_activation,
        weights=[w.tolist() for w in net.weights],
        biases=[b.tolist() for b in net.biases],
    )


def _net_from_dict(d) -> de.NetworkParams:
    return de.NetworkParams(
        list(d["layer_dims"]),
        [np.array(w, dtype=np.float64) for w in d["weights"]],
        [np.array(b, dtype=np.float64) for b in d["biases"]],
        d.get("output_activation", "identity"),
    )


def history_digest(history) -> dict:
    keep = {k: v for k, v in history[-1].items() if k != "wall_time"} if history else {}
    clean = [{k: v for k, v in row.items() if k != "wall_time"} for row in history]
    return dict(
        rows=len(history),
        sha256=hashlib.sha256(json.dumps(clean, sort_keys=True).encode()).hexdigest(),
        final=keep,
    )


def save_checkpoint(path, ckpt: Checkpoint):
    write_json(
        path,
        dict(
            format_version=ckpt.version,
            stage=ckpt.stage,
            seed=ckpt.seed,
            config=ckpt.config,
            lyapunov=dict(epsilon=ckpt.lyapunov.epsilon, network=_net_to_dict(ckpt.lyapunov.phi_net)),
            controller=dict(network=_net_to_dict(ckpt.controller.pi_net)),
            history_digest=ckpt.history_digest,
        ),
    )


def load_checkpoint(path) -> Checkpoint:
    try:
        with open(path) as fh:
            d = json.load(fh)
    except FileNotFoundError:
        raise
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt checkpoint ({exc})") from exc
    if not isinstance(d, dict) or d.get("format_version") != CHECKPOINT_VERSION:
        got = d.get("format_version") if isinstance(d, dict) else None
        raise CheckpointError(f"{path}: format version {got!r}, expected {CHECKPOINT_VERSION}")
    try:
        V = LyapunovFunction(_net_from_dict(d["lyapunov"]["network"]), float(d["lyapunov"]["epsilon"]))
        pi = PdController(_net_from_dict(d["controller"]["network"]))
        return Checkpoint(d["config"], V, pi, d["history_digest"], int(d["seed"]), d["stage"])
    except (KeyError, TypeError, ValueError, de.ShapeError) as exc:
        raise CheckpointError(f"{path}: malformed checkpoint ({exc})") from exc


# ---------------------------------------------------------------------------
# pipeline steps
# ---------------------------------------------------------------------------


def _rng(cfg: RunConfig, command: str):
    return np.random.default_rng([cfg.seed, COMMANDS.index(command)])


def init_models(cfg: RunConfig, rng):
    zero_phi = cfg.phi_init_gain == 0
    phi = de.init_network(cfg.phi_dims, rng, gain=cfg.phi_init_gain or 1.0, zero=zero_phi)
    pi = de.init_network(cfg.pi_dims, rng)
    return LyapunovFunction(phi, cfg.train.epsilon), PdController(pi)


def gain_schedule(cfg: RunConfig, system):
    q = None if cfg.lqr_q is None else np.diag(cfg.lqr_q)
    r = None if cfg.lqr_r is None else np.diag(cfg.lqr_r)
    return sy.lqr_gain_schedule(system, sy.theta_grid(system, cfg.lqr_grid), q, r)


def _write_history(path, history):
    if not history:
        return
    keys = [k for k in history[0] if k != "wall_time"]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(keys)
        for row in history:
            w.writerow([repr(row[k]) if isinstance(row[k], float) else row[k] for k in keys])


def _write_timings(out, name, history):
    write_json(Path(out) / f"timing_{name}.json", [row.get("wall_time", 0.0) for row in history])


def _checkpoint(cfg, V, pi, history, stage):
    # the output directory is left out so reruns elsewhere stay byte-identical
    config = {k: v for k, v in cfg.to_dict().items() if k != "out_dir"}
    return Checkpoint(config, V, pi, history_digest(history), cfg.seed, stage)


def run_pretrain(cfg: RunConfig, system, rng):
    V, pi = init_models(cfg, rng)
    schedule = gain_schedule(cfg, system)
    t = cfg.train
    mse, fit = [], []
    if t.pretrain_epochs > 0:
        pi, mse = tr.pretrain_controller(
            pi, system, schedule, t.pretrain_samples, t.pretrain_epochs, rng,
            t.pretrain_lr, t.pretrain_minibatch, t.pretrain_near_fraction,
        )
    if t.certificate_epochs > 0:
        V, fit = tr.pretrain_lyapunov(
            V, system, tr.lifted_riccati(system, schedule), t.pretrain_samples, t.certificate_epochs,
            rng, t.certificate_lr, t.certificate_minibatch, t.certificate_delta,
        )
    history = [dict(iteration=i, stage=0, phase="controller", loss=m) for i, m in enumerate(mse)]
    history += [dict(iteration=i, stage=0, phase="certificate", loss=f) for i, f in enumerate(fit)]
    return V, pi, history


def cmd_pretrain(cfg: RunConfig, args) -> int:
    system = cfg.validate()
    out = Path(cfg.out_dir)
    V, pi, history = run_pretrain(cfg, system, _rng(cfg, "pretrain"))
    _write_history(out / "history_pretrain.csv", history)
    save_checkpoint(out / "pretrain.json", _checkpoint(cfg, V, pi, history, "pretrain"))
    return 0


def cmd_train(cfg: RunConfig, args) -> int:
    system = cfg.validate()
    out = Path(cfg.out_dir)
    rng = _rng(cfg, "train")
    if args.checkpoint:
        ck = load_checkpoint(args.checkpoint)
        V, pi = ck.lyapunov, ck.controller
    else:
        V, pi, h0 = run_pretrain(cfg, system, rng)
        _write_history(out / "history_pretrain.csv", h0)
        save_checkpoint(out / "pretrain.json", _checkpoint(cfg, V, pi, h0, "pretrain"))
    V, pi, h1 = tr.run_stage1(system, V, pi, cfg.train, rng)
    _write_history(out / "history_stage1.csv", h1)
    _write_timings(out, "stage1", h1)
    save_checkpoint(out / "stage1.json", _checkpoint(cfg, V, pi, h1, "stage1"))
    V, pi, h2 = tr.run_stage2(system, V, pi, cfg.train, rng)
    _write_history(out / "history_stage2.csv", h2)
    _write_timings(out, "stage2", h2)
    save_checkpoint(out / "stage2.json", _checkpoint(cfg, V, pi, h1 + h2, "stage2"))
    return 0


def _load_models(cfg, args):
    path = Path(args.checkpoint) if args.checkpoint else Path(cfg.out_dir) / "stage2.json"
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path} (run `train` first or pass --checkpoint)")
    ck = load_checkpoint(path)
    return ck.lyapunov, ck.controller


def _gate(report: vf.VerificationReport, cfg: RunConfig) -> list:
    req = cfg.require
    failed = []
    if report.scheme == "pgd" and report.violation_rate > req["max_violation_rate"]:
        failed.append(f"violation rate {report.violation_rate:.4g} > {req['max_violation_rate']}")
    if report.scheme == "trajectory":
        if report.convergence_fraction < req["min_convergence"]:
            failed.append(f"convergence {report.convergence_fraction:.4g} < {req['min_convergence']}")
        if report.input_bound_fraction < req["min_input_bound"]:
            failed.append(f"input-bound fraction {report.input_bound_fraction:.4g} < {req['min_input_bound']}")
    return failed


def _finish(report, cfg, args, name) -> int:
    path = Path(cfg.out_dir) / name
    write_json(path, report.to_dict())
    print(f"{name}: " + ", ".join(f"{k}={v}" for k, v in report.to_dict().items() if k != "worst"))
    failed = _gate(report, cfg)
    for msg in failed:
        print(f"threshold not met: {msg}", file=sys.stderr)
    return 1 if (failed and args.require) else 0


def default_trajectory(system) -> sy.ParamTrajectory:
    if system.name == "pendulum":
        return sy.ParamTrajectory.pendulum_demo()
    return sy.ParamTrajectory.quadrotor_rate_limited()


def cmd_verify_pgd(cfg: RunConfig, args) -> int:
    system = cfg.validate()
    V, pi = _load_models(cfg, args)
    n = args.samples or cfg.verify.samples
    report = vf.verify_pgd(
        V, pi, system, cfg.train.rho, n, cfg.verify.tol, cfg.verify, _rng(cfg, "verify-pgd"),
        k3=cfg.train.k3, seed=cfg.seed,
    )
    return _finish(report, cfg, args, "verify_pgd.json")


def cmd_verify_traj(cfg: RunConfig, args) -> int:
    system = cfg.validate()
    V, pi = _load_models(cfg, args)
    n = args.samples or cfg.verify.traj_count
    report = vf.verify_trajectories(
        V, pi, system, cfg.train.rho, n, default_trajectory(system), cfg.verify.dt,
        cfg.verify.horizon, _rng(cfg, "verify-traj"), config=cfg.verify, seed=cfg.seed,
    )
    return _finish(report, cfg, args, "verify_traj.json")


def _default_states(system):
    if system.name == "pendulum":
        return [[0.5, 0.0], [-1.0, 1.0], [2.0, -2.0], [np.pi - 0.1, 0.0]]
    return [[1.0, -1.0, 0.5, 0.0, 0.0, 0.0], [-2.0, 2.0, -1.0, 0.5, -0.5, 0.0]]


def cmd_simulate(cfg: RunConfig, args) -> int:
    system = cfg.validate()
    V, pi = _load_models(cfg, args)
    policy = vf.make_policy(pi, system)
    trajs = [default_trajectory(system)]
    if system.name == "quadrotor":
        trajs.append(sy.ParamTrajectory.quadrotor_demo())
    states = cfg.simulate_states or _default_states(system)
    out = Path(cfg.out_dir)
    for tj in trajs:
        tag = "".join(c if c.isalnum() else "_" for c in tj.name)
        for i, x0 in enumerate(states):
            run = vf.integrate(system, policy, np.asarray(x0, float), tj, cfg.verify.dt, cfg.verify.horizon, V=V)
            run.to_csv(out / f"trajectory_{tag}_{i}.csv")
            print(f"trajectory {tj.name} #{i}: |x(T)|={np.linalg.norm(system.wrap(run.x[-1])):.3g} diverged={run.diverged}")
    return 0


def cmd_roa(cfg: RunConfig, args) -> int:
    system = cfg.validate()
    V, _ = _load_models(cfg, args)
    grid = vf.roa_slice_grid(
        V, system, cfg.train.rho, tuple(cfg.roa_axes), cfg.roa_resolution, cfg.roa_fixed,
        rng=_rng(cfg, "roa"), **cfg.verify.level_kw(),
    )
    out = Path(cfg.out_dir)
    grid.to_csv(out / "roa.csv")
    grid.to_svg(out / "roa.svg")
    summary = dict(rho=cfg.train.rho, member_fraction=float(grid.member.mean()), box=None)
    print(f"roa slice: member fraction {grid.member.mean():.4f}")
    status = 0
    if cfg.certify_box is not None:
        lo, hi = cfg.certify_box
        ok, worst = vf.box_in_level_set(
            V, system, cfg.train.rho, lo, hi, rng=_rng(cfg, "roa"), **cfg.verify.level_kw()
        )
        summary["box"] = dict(lo=list(lo), hi=list(hi), contained=bool(ok), max_level=worst)
        print(f"box {lo}..{hi}: contained={ok} max level {worst:.4g} (rho {cfg.train.rho})")
        if not ok:
            print("threshold not met: box not inside the level set", file=sys.stderr)
            status = 1 if args.require else 0
    write_json(out / "roa_summary.json", summary)
    return status


HANDLERS = {
    "pretrain": cmd_pretrain,
    "train": cmd_train,
    "verify-pgd": cmd_verify_pgd,
    "verify-traj": cmd_verify_traj,
    "simulate": cmd_simulate,
    "roa": cmd_roa,
}


def dispatch(command: str, cfg: RunConfig, args=None) -> int:
    """Run one pipeline command; returns the process exit status."""
    if command not in HANDLERS:
        raise ConfigError(f"unknown command {command!r}; choose from {COMMANDS}")
    args = args or argparse.Namespace(checkpoint=None, samples=None, require=False)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_config(out / "effective_config.json", cfg)
    started = time.time()
    status = HANDLERS[command](cfg, args)
    write_json(
        out / f"metadata_{command.replace('-', '_')}.json",
        dict(
            command=command,
            started=time.strftime("%Y-%m-%dT%H:%M:%S", time.gmtime(started)),
            elapsed_seconds=time.time() - started,
            package_version=__version__,
            numpy=np.__version__,
            python=platform.python_version(),
            exit_status=status,
        ),
    )
    return status


def build_parser():
    p = argparse.ArgumentParser(prog="neural-npv", description=__doc__.splitlines()[0])
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", help="JSON run configuration (defaults if omitted)")
    p.add_argument("--checkpoint", help="checkpoint to start from / verify")
    p.add_argument("--out", help="output directory")
    p.add_argument("--seed", type=int)
    p.add_argument("--samples", type=int, help="verification sample count")
    p.add_argument("--require", action="store_true", help="exit nonzero when a threshold fails")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def _limit_threads():
    n = int(os.environ.get("NEURAL_NPV_THREADS", "1"))
    if n < 1:
        raise ConfigError("NEURAL_NPV_THREADS must be >= 1")
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        with _limit_threads():
            if args.config:
                cfg = load_config(args.config, out_dir=args.out, echo=False)
            else:
                cfg = config_from_dict({})
                if args.out:
                    cfg.out_dir = args.out
            if args.seed is not None:
                cfg.seed = args.seed
                cfg.train.seed = args.seed
            return dispatch(args.command, cfg, args)
    except (ConfigError, CheckpointError, FileNotFoundError, sy.ConfigurationError,
            sy.SolverError, tr.TrainingError, vf.EmptyLevelSetError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
