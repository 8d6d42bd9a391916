"""
Quadrotor hover under a wind disturbance
========================================

The scheduling parameter is a constant acceleration disturbance. For each
value there is an equilibrium thrust and attitude that cancels it, and an
LQR gain for the linearization there. This script tabulates both and
shows why the published disturbance trajectory needs a slowed variant.
"""
import numpy as np

from neural_npv import systems as sy

quad = sy.make_system("quadrotor")
print("state box:", quad.x_box)
print("theta box:", quad.theta_box, " rate box:", quad.rate_box)
print("input bounds:", quad.u_lo, quad.u_hi)

# %% Equilibrium inputs over a grid of disturbances
grid = sy.theta_grid(quad, 5)
u_eq = sy.equilibrium_input(quad, grid)
residual = sy.eval_dynamics(quad, np.zeros((len(grid), quad.n)), u_eq, grid)
print("\ngrid points:", len(grid))
print("max |f(0, u*, theta)|:", np.max(np.abs(residual)))
print("thrust range:", u_eq[:, 0].min(), "to", u_eq[:, 0].max())
print("largest attitude angle (deg):", np.degrees(np.max(np.abs(u_eq[:, 1:]))))

# %% Gain schedule
sched = sy.lqr_gain_schedule(quad, sy.theta_grid(quad, 3))
worst = max(np.max(np.linalg.eigvals(a - b @ k).real)
            for a, b, k in ((*sy.linearize(quad, th), k) for th, k in zip(sched.thetas, sched.gains)))
print("\nschedule size:", len(sched.thetas), " slowest closed-loop real part:", worst)

# %% The disturbance trajectories
printed = sy.ParamTrajectory.quadrotor_demo()
slowed = sy.ParamTrajectory.quadrotor_rate_limited()
t = np.linspace(0.0, 20.0, 2001)
for traj in (printed, slowed):
    rate = np.array([traj.rate(s) for s in t])
    print(f"{traj.name:>14}: max |theta_dot| = {np.max(np.abs(rate)):.3f}, inside rate box: {traj.check(quad, 20.0)}")
