import math

import numpy as np
import pytest

from nsldp.galerkin import build_torus_model, linear_model
from nsldp.probes import (
    CoupledPair,
    WeightFunction,
    coupled_step,
    coupled_trajectory,
    doubly_log_probe,
    energy_constants,
    exp_moment_probe,
    foias_decay_check,
    hitting_time,
    moment_probe,
    recurrence_moment,
)
from nsldp.sde import make_rng, simulate, step


@pytest.fixture(scope="module")
def decay1():
    return linear_model([1.0], 0.0, allow_degenerate_noise=True)


def test_weight_function():
    w = WeightFunction(2)
    x = np.array([[0.0, 0.0], [1.0, 0.0], [2.0, 1.0]])
    vals = w(x)
    assert np.all(vals >= 1.0) and np.all(np.diff(vals) > 0)
    assert vals[2] == 5.0**2 + 1.0
    assert w.window(x) == vals[2]
    with pytest.raises(ValueError):
        WeightFunction(0)


def test_coupled_step_first_component_is_sde_step(torus2):
    rng = np.random.default_rng(0)
    u, v = rng.standard_normal(torus2.n_modes), rng.standard_normal(torus2.n_modes)
    xi = rng.standard_normal(torus2.n_modes)
    pair = coupled_step(torus2, CoupledPair(u, v, 3, 2.0), 0.01, xi)
    np.testing.assert_array_equal(pair.u, step(torus2, u, 0.01, xi))


def test_identical_pair_stays_identical(torus2):
    u0 = np.random.default_rng(1).standard_normal(torus2.n_modes)
    U, V = coupled_trajectory(torus2, u0, u0.copy(), 4, 3.0, 2.0, 0.01, 5)
    np.testing.assert_array_equal(U, V)


def test_zero_tensor_difference_decays_per_mode():
    alpha = np.array([1.0, 2.0, 3.0])
    model = linear_model(alpha, 0.5)
    u0, w0 = np.zeros(3), np.array([0.3, -0.2, 0.1])
    N, a, dt = 2, 4.0, 0.01
    U, V = coupled_trajectory(model, u0, u0 + w0, N, a, 1.0, dt, 2)
    beta = alpha + a * (np.arange(3) < N)
    t = dt * np.arange(len(U))[:, None]
    np.testing.assert_allclose(V - U, np.exp(-beta * t) * w0, rtol=1e-12, atol=1e-15)


def test_no_penalty_reduces_to_same_noise_solutions(torus2):
    rng = np.random.default_rng(3)
    u0, u0p = rng.standard_normal(torus2.n_modes), rng.standard_normal(torus2.n_modes)
    U, V = coupled_trajectory(torus2, u0, u0p, 0, 0.0, 1.0, 0.01, 9)
    np.testing.assert_array_equal(U, simulate(torus2, u0, 1.0, 0.01, 9).states)
    np.testing.assert_allclose(V, simulate(torus2, u0p, 1.0, 0.01, 9).states, atol=1e-12)


def test_foias_bound_examples(torus2):
    u0 = np.zeros(torus2.n_modes)
    u0p = u0.copy()
    u0p[0] = 0.1
    table = foias_decay_check(torus2, u0, u0p, 6, 5.0, 1.0, 0.01, seed=1)
    bound = table.column("bound")
    assert bound[0] == 0.1
    assert bound[-1] == pytest.approx(6.738e-4, abs=1e-6)
    assert table.passed
    assert table.summary["coupling"] == "synchronous surrogate"
    assert table.metadata["seed"] == 1 and table.metadata["dt"] == 0.01


def test_foias_zero_tensor_strictly_below():
    model = linear_model([1.0, 2.0], 0.3)
    table = foias_decay_check(model, np.zeros(2), np.array([0.5, 0.5]), 2, 1.0, 1.0, 0.01)
    ratio = table.column("ratio")
    assert ratio[0] == 1.0 and np.all(ratio[1:] < 1.0)


def test_foias_rejects_far_start(torus2):
    with pytest.raises(ValueError):
        foias_decay_check(torus2, np.zeros(torus2.n_modes), np.full(torus2.n_modes, 1.0), 2, 1.0, 1.0, 0.01)


def test_hitting_time_examples(decay1, torus2):
    assert hitting_time(decay1, [0.5], 1.0, 5.0, 0.01, 0) == 0.0
    tau = hitting_time(decay1, [2.0], 1.0, 5.0, 0.001, 0)
    assert abs(tau - math.log(2.0)) <= 0.001
    assert hitting_time(torus2, np.full(torus2.n_modes, 3.0), 1e9, 1.0, 0.01, 0) == 0.0
    assert hitting_time(decay1, [2.0], 1.0, 0.5, 0.01, 0) == math.inf
    with pytest.raises(ValueError):
        hitting_time(decay1, [2.0], 0.0, 1.0, 0.01, 0)


def test_window_hitting_time_waits_for_window(decay1):
    tau = hitting_time(decay1, [2.0], 1.0, 5.0, 0.01, 0, window=0.5)
    assert tau == pytest.approx(math.log(2.0) + 0.5, abs=0.011)


def test_recurrence_trivial(torus2):
    table = recurrence_moment(torus2, 0.5, 10.0, 100, 1.0, 0.01, 0)
    assert table.summary["estimate"] == 1.0 and table.passed
    table = recurrence_moment(torus2, 0.0, 0.5, 100, 20.0, 0.01, 0, initial=np.full(torus2.n_modes, 1.0))
    assert table.summary["estimate"] == 1.0
    with pytest.raises(ValueError):
        recurrence_moment(torus2, 0.0, 0.5, 50, 1.0, 0.01, 0)


def _ou_recurrence_reference(alpha, b, r, kappa, dt, x0):
    """``E exp(kappa tau)`` for the sampled OU chain by value iteration on a grid."""
    decay = math.exp(-alpha * dt)
    s = b * math.sqrt(-math.expm1(-2 * alpha * dt) / (2 * alpha))
    xs = np.linspace(-6.0, 6.0, 4801)
    z, wz = np.polynomial.hermite_e.hermegauss(60)
    wz = wz / wz.sum()
    inside = np.abs(xs) <= r
    g = np.ones_like(xs)
    nxt = decay * xs[:, None] + s * z[None, :]
    for _ in range(20000):
        new = np.where(inside, 1.0, math.exp(kappa * dt) * (np.interp(nxt, xs, g) @ wz))
        if np.max(np.abs(new - g)) < 1e-13:
            break
        g = new
    return float(np.interp(x0, xs, g))


def test_recurrence_matches_ou_reference():
    alpha, b, r, kappa, dt, x0 = 2.0, 1.0, 0.3, 0.5, 0.01, 2.0
    model = linear_model([alpha], b)
    table = recurrence_moment(model, kappa, r, 4000, 20.0, dt, 7, initial=np.array([x0]))
    ref = _ou_recurrence_reference(alpha, b, r, kappa, dt, x0)
    assert table.summary["timeout_fraction"] == 0.0
    assert abs(table.summary["estimate"] - ref) <= 4 * table.summary["std_error"] + 1e-3


def test_moment_probe_pure_decay(decay1):
    table = moment_probe(decay1, 2, [0.0, 0.5, 1.0, 1.5, 2.0], 1000, 0, np.array([1.5]), sup_window=0.5)
    t = table.column("t")
    np.testing.assert_allclose(table.column("moment"), np.exp(-4 * t) * 1.5**4, rtol=1e-12)
    np.testing.assert_allclose(table.column("sup_moment"), table.column("moment"), rtol=1e-12)
    assert table.summary["decay_rate"] == pytest.approx(4.0, rel=1e-6)
    assert table.passed


def test_moment_probe_plateau_from_rest():
    model = build_torus_model(1, {0: 1.0}, 0.3)
    table = moment_probe(model, 1, [1.0, 2.0, 3.0, 4.0, 6.0], 1000, 1, np.zeros(model.n_modes))
    m = table.column("moment")
    assert abs(m[-1] - m[-2]) <= 4 * math.hypot(*table.column("std_error")[-2:])


def test_energy_constants(torus2):
    gamma0, K = energy_constants(torus2)
    assert gamma0 == pytest.approx(1.0)
    assert K == pytest.approx(5.0)


def test_exp_moment_deterministic(decay1):
    t, u0 = 1.0, np.array([1.0])
    table = exp_moment_probe(decay1, [0.5, 1.0, 2.0], t, 50, 0, u0=u0, dt=0.01)
    traj = simulate(decay1, u0, t, 0.01, 0)
    from nsldp.sde import trapezoid

    energy = traj.states[-1, 0] ** 2 + trapezoid(traj.states[:, 0] ** 2, 0.01)
    np.testing.assert_allclose(table.column("log_moment_rate"), np.array([0.5, 1.0, 2.0]) * energy / t, rtol=1e-12)
    assert table.summary["kappa_unstable"] is None


def test_exp_moment_exceedance_monotone(torus2):
    table = exp_moment_probe(torus2, [0.05, 0.1, 0.2], 1.0, 2000, 3, dt=0.01)
    freq = np.array(table.summary["exceedance"])
    assert np.all(np.diff(freq) <= 0)
    assert table.passed
    with pytest.raises(ValueError):
        exp_moment_probe(torus2, [0.2, 0.1], 1.0, 10, 3)


def test_doubly_log_closed_form(decay1):
    t, T = 0.5, 0.5
    u0s = [np.array([0.0]), np.array([1.0]), np.array([2.0])]
    table = doubly_log_probe(decay1, t, T, 1000, 0, u0s)
    expected = [math.log1p(math.log1p(t * math.exp(-2 * t) * float(u[0] ** 2))) for u in u0s]
    np.testing.assert_allclose(table.column("statistic"), expected, rtol=1e-10)
    assert table.passed
    assert table.column("statistic")[0] <= table.summary["intercept"] + 1e-12 or table.summary["slope"] >= 0


def test_doubly_log_time_increment(torus2):
    u0s = [np.zeros(torus2.n_modes), np.full(torus2.n_modes, 0.5)]
    a = doubly_log_probe(torus2, 1.0, 0.5, 1000, 2, u0s)
    b = doubly_log_probe(torus2, 2.0, 0.5, 1000, 2, u0s)
    assert a.passed and b.passed
    # the affine envelope C (x + 1 + t) grows by C per unit of t
    C = max(a.summary["C_hat"], b.summary["C_hat"])
    assert np.all(b.column("statistic") - a.column("statistic") <= C * (1 + b.summary["margin"]))


def test_probe_table_metadata(decay1):
    table = recurrence_moment(decay1, 0.1, 0.5, 100, 10.0, 0.01, 4, initial=np.array([1.0]))
    head = table.to_tsv().splitlines()[0]
    for key in ("seed=4", "dt=0.01", "count=100"):
        assert key in head
