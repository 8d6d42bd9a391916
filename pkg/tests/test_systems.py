import numpy as np
import pytest
import scipy.linalg
from hypothesis import given, settings, strategies as st

from neural_npv import systems as sy


# -- dynamics ------------------------------------------------------------


def test_pendulum_origin_is_stationary(pendulum, rng):
    th = pendulum.sample_theta(rng, 5)
    f = sy.eval_dynamics(pendulum, np.zeros((5, 2)), np.zeros((5, 1)), th)
    assert np.array_equal(f, np.zeros((5, 2)))


def test_pendulum_horizontal_hand_value(pendulum):
    f = sy.eval_dynamics(pendulum, np.array([np.pi / 2, 0.0]), np.array([0.0]), np.array([0.5]))
    np.testing.assert_allclose(f, [0.0, 19.62], atol=1e-12)


def test_pendulum_input_effectiveness_scales_with_theta(pendulum):
    f = sy.eval_dynamics(pendulum, np.zeros(2), np.array([1.0]), np.array([0.5]))
    np.testing.assert_allclose(f, [0.0, 0.5 / (0.1 * 0.25)], rtol=1e-14)


def test_quadrotor_hover_has_zero_acceleration(quadrotor, rng):
    x = rng.uniform(-6, 6, size=(4, 6))
    u = np.tile([0.5 * 9.81, 0.0, 0.0], (4, 1))
    f = sy.eval_dynamics(quadrotor, x, u, np.zeros((4, 3)))
    np.testing.assert_array_equal(f[:, :3], x[:, 3:])
    np.testing.assert_allclose(f[:, 3:], 0.0, atol=1e-14)


def test_quadrotor_ned_sign_of_thrust(quadrotor):
    # more thrust than hover with level attitude accelerates upward (negative down axis)
    f = sy.eval_dynamics(quadrotor, np.zeros(6), np.array([6.0, 0.0, 0.0]), np.zeros(3))
    assert f[5] < 0 and abs(f[3]) < 1e-15 and abs(f[4]) < 1e-15


# -- equilibria ----------------------------------------------------------


def test_pendulum_equilibrium_input_is_zero(pendulum, rng):
    assert np.array_equal(sy.equilibrium_input(pendulum, pendulum.sample_theta(rng, 7)), np.zeros((7, 1)))


def test_quadrotor_equilibrium_at_zero_disturbance(quadrotor):
    np.testing.assert_allclose(sy.equilibrium_input(quadrotor, np.zeros(3)), [0.5 * 9.81, 0.0, 0.0], atol=1e-15)


def test_quadrotor_equilibrium_upward_disturbance(quadrotor):
    u = sy.equilibrium_input(quadrotor, np.array([0.0, 0.0, -2.0]))
    np.testing.assert_allclose(u, [2.905, 0.0, 0.0], atol=1e-12)


def test_equilibrium_residual_on_dense_grid(quadrotor):
    grid = sy.theta_grid(quadrotor, 10)
    u = sy.equilibrium_input(quadrotor, grid)
    f = sy.eval_dynamics(quadrotor, np.zeros((len(grid), 6)), u, grid)
    assert np.max(np.abs(f)) <= 1e-8
    assert np.all((u > quadrotor.u_lo) & (u < quadrotor.u_hi))


def test_worst_case_thrust_matches_design_note(quadrotor):
    u = sy.equilibrium_input(quadrotor, quadrotor.theta_vertices())
    assert np.max(u[:, 0]) == pytest.approx(np.sqrt(8 + (0.5 * 9.81 + 2) ** 2), rel=1e-12)
    assert np.max(u[:, 0]) == pytest.approx(7.46, abs=0.01)
    # worst attitude is arctan(2 / (m g - 2)), about 34.5 degrees
    assert np.max(np.abs(u[:, 1:])) == pytest.approx(np.arctan(2 / (0.5 * 9.81 - 2)), rel=1e-12)
    assert np.max(np.abs(u[:, 1:])) < np.deg2rad(35)


def test_infeasible_equilibrium_rejected():
    with pytest.raises(sy.ConfigurationError):
        sy.make_system("quadrotor", u_hi=np.array([5.0, np.pi / 2, np.pi]))
    with pytest.raises(sy.ConfigurationError):
        sy.make_system("pendulum", u_lo=np.array([0.0]))


def test_unknown_system_rejected():
    with pytest.raises(sy.ConfigurationError):
        sy.make_system("bicycle")


# -- linearization ---------------------------------------------------------


def test_pendulum_jacobians_hand_values(pendulum):
    a, b = sy.linearize(pendulum, np.array([0.7]))
    np.testing.assert_allclose(a, [[0, 1], [19.62, -8.0]], rtol=1e-14)
    np.testing.assert_allclose(b, [[0], [40 * 0.7]], rtol=1e-14)


def test_quadrotor_hover_jacobians(quadrotor):
    a, b = sy.linearize(quadrotor, np.zeros(3))
    np.testing.assert_array_equal(a[:3, 3:], np.eye(3))
    np.testing.assert_array_equal(a[3:, :], np.zeros((3, 6)))
    np.testing.assert_allclose(b[:, 0], [0, 0, 0, 0, 0, -1 / 0.5], atol=1e-15)


def _fd_jacobians(system, theta, h=1e-6):
    u0 = sy.equilibrium_input(system, theta)
    x0 = np.zeros(system.n)
    a = np.column_stack(
        [(sy.eval_dynamics(system, x0 + h * e, u0, theta) - sy.eval_dynamics(system, x0 - h * e, u0, theta)) / (2 * h)
         for e in np.eye(system.n)]
    )
    b = np.column_stack(
        [(sy.eval_dynamics(system, x0, u0 + h * e, theta) - sy.eval_dynamics(system, x0, u0 - h * e, theta)) / (2 * h)
         for e in np.eye(system.n_u)]
    )
    return a, b


@pytest.mark.parametrize("name", ["pendulum", "quadrotor"])
def test_analytic_jacobians_match_finite_differences(name, rng):
    system = sy.make_system(name)
    for theta in system.sample_theta(rng, 10):
        a, b = sy.linearize(system, theta)
        fa, fb = _fd_jacobians(system, theta)
        scale_a, scale_b = max(1.0, np.max(np.abs(a))), max(1.0, np.max(np.abs(b)))
        assert np.max(np.abs(a - fa)) / scale_a <= 1e-6
        assert np.max(np.abs(b - fb)) / scale_b <= 1e-6


def test_quadrotor_state_matrix_is_theta_independent(quadrotor, rng):
    a0, _ = sy.linearize(quadrotor, np.zeros(3))
    for theta in quadrotor.sample_theta(rng, 5):
        assert np.array_equal(sy.linearize(quadrotor, theta)[0], a0)


# -- vertices --------------------------------------------------------------


def test_pendulum_rate_vertices(pendulum):
    np.testing.assert_array_equal(sy.vertices(pendulum.rate_box), [[-0.1], [0.1]])


def test_quadrotor_rate_vertices(quadrotor):
    ver = sy.vertices(quadrotor.rate_box)
    assert ver.shape == (8, 3)
    assert set(map(tuple, ver)) == {(a, b, c) for a in (-0.5, 0.5) for b in (-0.5, 0.5) for c in (-0.5, 0.5)}
    assert [tuple(v) for v in ver] == sorted(tuple(v) for v in ver)


@settings(max_examples=50, deadline=None)
@given(
    lo=st.lists(st.floats(-5, 5, allow_nan=False), min_size=1, max_size=4),
    widths=st.lists(st.sampled_from([0.0, 0.5, 2.0]), min_size=4, max_size=4),
)
def test_vertex_count_is_two_to_nondegenerate_axes(lo, widths):
    hi = [a + w for a, w in zip(lo, widths)]
    ver = sy.vertices((lo, hi))
    nondegenerate = sum(1 for a, b in zip(lo, hi) if b > a)
    assert len(ver) == 2**nondegenerate
    assert np.all(ver >= np.array(lo)) and np.all(ver <= np.array(hi))


def test_inverted_box_rejected():
    with pytest.raises(ValueError):
        sy.vertices(((1.0,), (0.0,)))


# -- Riccati --------------------------------------------------------------


def test_scalar_riccati():
    p, k = sy.solve_care(np.array([[1.0]]), np.array([[1.0]]), np.eye(1), np.eye(1))
    assert p[0, 0] == pytest.approx(1 + np.sqrt(2), abs=1e-6)
    assert k[0, 0] == pytest.approx(1 + np.sqrt(2), abs=1e-6)


def test_double_integrator_riccati():
    a = np.array([[0.0, 1.0], [0.0, 0.0]])
    b = np.array([[0.0], [1.0]])
    p, k = sy.solve_care(a, b, np.eye(2), np.eye(1))
    np.testing.assert_allclose(k, [[1.0, np.sqrt(3)]], atol=1e-6)
    assert sy.care_residual(a, b, np.eye(2), np.eye(1), p) <= 1e-6


@pytest.mark.parametrize("r", [1e-4, 1e-6])
def test_stiff_riccati_recovers_by_shrinking_the_step(r):
    a, b = np.array([[1.0]]), np.array([[1.0]])
    with pytest.raises(sy.SolverError):
        sy.solve_care(a, b, np.eye(1), np.array([[r]]), max_retries=0)
    p, _ = sy.solve_care(a, b, np.eye(1), np.array([[r]]))
    assert p[0, 0] == pytest.approx((1 + np.sqrt(1 + 1 / r)) * r, rel=1e-6)


def test_hurwitz_plant_without_state_cost_needs_no_feedback():
    a = np.array([[-1.0, 0.3], [0.0, -2.0]])
    p, k = sy.solve_care(a, np.array([[0.0], [1.0]]), np.zeros((2, 2)), np.eye(1))
    assert np.array_equal(p, np.zeros((2, 2))) and np.array_equal(k, np.zeros((1, 2)))


@pytest.mark.parametrize("seed", range(4))
def test_riccati_matches_scipy(seed):
    rng = np.random.default_rng(seed)
    a = rng.normal(size=(3, 3))
    b = rng.normal(size=(3, 2))
    q = np.diag(rng.uniform(0.5, 2, 3))
    r = np.diag(rng.uniform(0.5, 2, 2))
    p, _ = sy.solve_care(a, b, q, r)
    ref = scipy.linalg.solve_continuous_are(a, b, q, r)
    np.testing.assert_allclose(p, ref, rtol=1e-6, atol=1e-6)


def test_unstabilizable_plant_reports_theta():
    a = np.array([[[1.0]]])
    b = np.array([[[0.0]]])
    with pytest.raises(sy.SolverError, match="0.42"):
        sy.solve_care(a, b, np.eye(1), np.eye(1), max_steps=20_000, labels=[np.array([0.42])])


@pytest.mark.parametrize("name", ["pendulum", "quadrotor"])
def test_gain_schedule_residual_and_stability(name):
    system = sy.make_system(name)
    sched = sy.lqr_gain_schedule(system, sy.theta_grid(system, 3 if name == "quadrotor" else 9))
    for th, k, p in zip(sched.thetas, sched.gains, sched.riccati):
        a, b = sy.linearize(system, th)
        assert sy.care_residual(a, b, np.eye(system.n), np.eye(system.n_u), p) <= 1e-6
        assert np.max(np.linalg.eigvals(a - b @ k).real) < 0


def test_pendulum_gain_grows_when_actuation_weakens(pendulum):
    sched = sy.lqr_gain_schedule(pendulum, np.array([[0.2], [1.0]]))
    assert np.linalg.norm(sched.gains[0]) > np.linalg.norm(sched.gains[1])


def test_single_point_schedule(pendulum):
    sched = sy.lqr_gain_schedule(pendulum, np.array([[0.5]]))
    assert len(sched) == 1
    np.testing.assert_array_equal(sched.lookup(np.array([[0.9], [0.2]]))[1], sched.gains[0])


def test_schedule_lookup_is_nearest_neighbour(pendulum):
    sched = sy.lqr_gain_schedule(pendulum, np.array([[0.2], [0.6], [1.0]]))
    got = sched.lookup(np.array([[0.25], [0.79], [0.81]]))
    np.testing.assert_array_equal(got, sched.gains[[0, 1, 2]])


# -- parameter trajectories --------------------------------------------------


def test_pendulum_demo_trajectory_values_and_rates(pendulum):
    tj = sy.ParamTrajectory.pendulum_demo()
    t = np.linspace(0, 20, 2001)
    th = np.array([tj(s)[0][0] for s in t])
    rate = np.array([tj(s)[1][0] for s in t])
    assert th.min() >= 0.2 - 1e-12 and th.max() <= 1.0
    # the published demo moves at up to 0.4/s, beyond the certified |rate| <= 0.1
    assert np.max(np.abs(rate)) == pytest.approx(0.4, abs=1e-4)
    assert not tj.check(pendulum, 20.0)
    assert sy.ParamTrajectory.constant([0.5]).check(pendulum, 20.0)
    th, rate = tj(0.0)
    assert th[0] == pytest.approx(1.0) and rate[0] == 0.0


def test_published_quadrotor_trajectory_exceeds_rate_box(quadrotor):
    assert not sy.ParamTrajectory.quadrotor_demo().check(quadrotor, 20.0)
    assert sy.ParamTrajectory.quadrotor_rate_limited().check(quadrotor, 20.0)


@pytest.mark.parametrize(
    "traj", [sy.ParamTrajectory.pendulum_demo(), sy.ParamTrajectory.quadrotor_demo(),
             sy.ParamTrajectory.quadrotor_rate_limited()]
)
def test_trajectory_rate_is_the_derivative(traj):
    h = 1e-6
    for t in (0.3, 1.7, 5.2):
        fd = (traj(t + h)[0] - traj(t - h)[0]) / (2 * h)
        np.testing.assert_allclose(traj(t)[1], fd, atol=1e-7)
