"""
Pendulum with a varying length, end to end
==========================================

Train a gain-scheduled controller together with a parameter-dependent
Lyapunov certificate for a pendulum whose length varies in [0.2, 1.0],
then check the certificate three ways: adversarial search inside the
certified set, closed-loop simulation under a moving length, and a
region-of-attraction slice.

Verification sizes are cut down so the script finishes in a few minutes;
the acceptance run uses the full sizes from configs/pendulum_desk.json.
Outputs go to ./pendulum_demo_output.
"""
from pathlib import Path

import numpy as np

from neural_npv import cli
from neural_npv import networks as nw
from neural_npv import systems as sy
from neural_npv import trainer as tr
from neural_npv import verifier as vf

out = Path("pendulum_demo_output")
out.mkdir(exist_ok=True)
cfg = cli.load_config(Path(__file__).resolve().parent.parent / "configs" / "pendulum_desk.json", echo=False)
system = cfg.validate()
rng = np.random.default_rng(0)

# %% The gain schedule the controller imitates first
sched = cli.gain_schedule(cfg, system)
for th, k in zip(sched.thetas[::4], sched.gains[::4]):
    print(f"length {th[0]:.2f}: LQR gain {np.round(k[0], 3)}")

# %% Pretraining: controller toward LQR, certificate toward the lifted Riccati quadratic
V, pi, pre = cli.run_pretrain(cfg, system, rng)
print("\npretraining losses (last controller / last certificate):",
      [row["loss"] for row in pre if row["phase"] == "controller"][-1],
      [row["loss"] for row in pre if row["phase"] == "certificate"][-1])

# %% Stage I shrinks violations anywhere in the box, Stage II grows the certified set
V, pi, h1 = tr.run_stage1(system, V, pi, cfg.train, rng)
print("stage I violation rate: first", h1[0]["violation_rate"], "last", h1[-1]["violation_rate"])
V, pi, h2 = tr.run_stage2(system, V, pi, cfg.train, rng)
print("stage II certified volume fraction: first", h2[0]["lambda_volume"], "last", h2[-1]["lambda_volume"])

# %% Adversarial check on a small sample of the certified set
vcfg = vf.VerifierConfig(samples=2000, restarts=2, traj_count=200)
rep = vf.verify_pgd(V, pi, system, cfg.train.rho, vcfg.samples, vcfg.tol, vcfg, rng, k3=cfg.train.k3)
print("\nPGD violation rate:", rep.violation_rate, "worst residual:", rep.worst["value"])

# %% Simulation while the length follows 0.6 + 0.4 cos t
traj_rep = vf.verify_trajectories(V, pi, system, cfg.train.rho, vcfg.traj_count,
                                  sy.ParamTrajectory.pendulum_demo(), vcfg.dt, vcfg.horizon, rng, vcfg)
print("converged:", traj_rep.convergence_fraction, " inputs within bounds:", traj_rep.input_bound_fraction)

single = vf.integrate(system, vf.make_policy(pi, system), np.array([0.4, -0.3]),
                      sy.ParamTrajectory.pendulum_demo(), 0.01, 10.0, V=V)
single.to_csv(out / "trajectory.csv")
print("V along one trajectory:", np.round(single.v[::200], 4))

# %% Region of attraction slice at the worst-case length
grid = vf.roa_slice_grid(V, system, cfg.train.rho, resolution=61, rng=rng)
grid.to_svg(out / "roa.svg")
inside, level = vf.box_in_level_set(V, system, cfg.train.rho, [-0.5, -0.5], [0.5, 0.5], rng=rng)
print(f"\nslice member fraction {grid.member.mean():.3f}; box [-0.5, 0.5]^2 inside: {inside} (max level {level:.3f})")
print("wrote", sorted(p.name for p in out.iterdir()))
