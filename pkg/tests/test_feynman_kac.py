import math

import numpy as np
import pytest

from nsldp.chain_oracle import exact_pressure, random_chain
from nsldp.feynman_kac import (
    BlowupError,
    MCBudget,
    constant_potential,
    duhamel_residual,
    fk_expectation,
    fk_functional,
    path_values,
    potential_from_doc,
    potential_to_doc,
    pressure_mc,
    random_potential,
    state_potential,
    window_potential,
)
from nsldp.galerkin import build_torus_model, linear_model
from nsldp.sde import ensemble, simulate, trapezoid


@pytest.fixture(scope="module")
def path(torus2):
    return simulate(torus2, np.ones(torus2.n_modes), 2.0, 0.01, 4)


def test_fk_functional_trivial_cases(path):
    f = lambda x: x[..., 0] ** 2  # noqa: E731
    assert fk_functional(path, constant_potential(0.0), f, 1.0) == pytest.approx(path.at(1.0)[0] ** 2, rel=1e-15)
    assert fk_functional(path, constant_potential(0.7), None, 2.0) == pytest.approx(math.exp(1.4), rel=1e-13)


def test_fk_functional_matches_direct_sum(path):
    V = random_potential(3, 4, 1.0, np.random.default_rng(0))
    t = 1.5
    m = round(t / path.dt)
    vals = [float(V(path.states[i])) for i in range(m + 1)]
    direct = path.dt * (0.5 * vals[0] + sum(vals[1:-1]) + 0.5 * vals[-1])
    assert fk_functional(path, V, None, t) == pytest.approx(math.exp(direct), rel=1e-13)


def test_fk_expectation_trivial(torus2):
    u0 = np.ones(torus2.n_modes)
    res = fk_expectation(torus2, constant_potential(0.0), None, u0, 0.5, 20, 1)
    assert res.mean == 1.0 and res.std_error == 0.0
    f = lambda x: np.sum(x, axis=-1)  # noqa: E731
    res = fk_expectation(torus2, random_potential(2, 2, 1.0, np.random.default_rng(1)), f, u0, 0.0, 5, 1)
    assert res.mean == pytest.approx(float(np.sum(u0)), rel=1e-15)
    with pytest.raises(ValueError):
        fk_expectation(torus2, constant_potential(0.0), None, u0, 0.5, 1, 1)


def test_fk_expectation_linear_gaussian():
    """``E exp(eps int_0^t u_1)`` for an OU mode started at ``x0``."""
    a, b, x0, t, eps = 1.0, 1.0, 0.5, 1.0, 0.1
    model = linear_model([a], b)
    mean = x0 * (1 - math.exp(-a * t)) / a
    var = b**2 / a**2 * (t - 2 * (1 - math.exp(-a * t)) / a + (1 - math.exp(-2 * a * t)) / (2 * a))
    exact = math.exp(eps * mean + 0.5 * eps**2 * var)
    V = lambda x: eps * x[..., 0]  # noqa: E731
    res = fk_expectation(model, V, None, np.array([x0]), t, 20_000, 3, dt=0.01)
    assert abs(res.mean - exact) <= 4 * res.std_error + 1e-4
    assert abs(res.mean - (1 + eps * mean)) < 2 * eps**2


def test_positivity_and_monotonicity(torus2):
    u0 = np.zeros(torus2.n_modes)
    V1 = random_potential(2, 3, 0.5, np.random.default_rng(4))
    V2 = V1.shifted(0.1)
    f = lambda x: 1.0 + x[..., 0] ** 2  # noqa: E731
    r1 = fk_expectation(torus2, V1, f, u0, 0.5, 50, 8)
    r2 = fk_expectation(torus2, V2, f, u0, 0.5, 50, 8)
    assert 0 < r1.mean < r2.mean


def test_blowup_error():
    model = build_torus_model(3, None, 1.0)
    u0 = 1e3 * np.random.default_rng(0).standard_normal(model.n_modes)
    with pytest.raises(BlowupError):
        fk_expectation(model, constant_potential(0.0), None, u0, 10.0, 10, 0, dt=0.5)


def test_pressure_constant_potential(torus2):
    est = pressure_mc(torus2, constant_potential(0.3), [0.5, 1.0, 1.5], 20, 2, np.zeros(torus2.n_modes))
    assert est.value == 0.3
    assert len(est.per_t_logmeans) == 3


def test_pressure_shift_covariance(torus2):
    V = random_potential(2, 3, 1.0, np.random.default_rng(5))
    u0 = np.zeros(torus2.n_modes)
    base = pressure_mc(torus2, V, [0.5, 1.0, 1.5, 2.0], 40, 6, u0)
    for c in (0.25, -1.0, 3.0):
        shifted = pressure_mc(torus2, V.shifted(c), [0.5, 1.0, 1.5, 2.0], 40, 6, u0)
        assert shifted.value == base.value + c
        assert shifted.std_error == base.std_error


def test_pressure_rejects_short_grid(torus2):
    with pytest.raises(ValueError):
        pressure_mc(torus2, constant_potential(0.0), [1.0, 2.0], 10, 0, np.zeros(torus2.n_modes))


@pytest.mark.parametrize("clocking", ["discrete", "continuous"])
def test_chain_pressure_mc_matches_exact(clocking):
    chain = random_chain(3, np.random.default_rng(9), clocking)
    V = np.array([0.4, -0.3, 0.1])
    t = [10.0, 20.0, 30.0, 40.0]
    est = pressure_mc(chain, V, t, 4000, 13)
    exact = exact_pressure(chain, V)
    assert abs(est.value - exact) <= 3 * est.std_error + 0.01


def test_window_potential_reductions(path):
    params = {"c0": 0.2, "coeffs": [0.5], "features": [[1.0, -1.0]], "offsets": [0.1]}
    V0 = window_potential(params, 2, 0.0)
    Vs = state_potential([0.5], [[1.0, -1.0]], [0.1], 0.2)
    np.testing.assert_array_equal(V0(path.states), Vs(path.states))
    Vc = window_potential({"c0": 0.4}, 2, 0.1, 0.01)
    np.testing.assert_array_equal(path_values(Vc, path.states, 0.01), 0.4)


def test_window_potential_time_average(path):
    phi = np.array([[0.7, -0.2, 0.4]])
    Vw = window_potential({"coeffs": [1.0], "features": phi}, 3, 0.05, 0.01)
    Vs = state_potential([1.0], phi)
    window = path.states[10:16]
    avg_state_feature = np.mean(Vs.feature_values(window))
    assert Vw.feature_values(window)[0] == pytest.approx(avg_state_feature, rel=1e-14)


def test_window_path_values_match_direct(path):
    rng = np.random.default_rng(2)
    W = 4
    feats = rng.standard_normal((2, W + 1, 3))
    V = window_potential({"coeffs": [0.3, -0.6], "features": feats, "offsets": [0.0, 0.5]}, 3, W * 0.01, 0.01)
    vals = path_values(V, path.states, 0.01)
    for s in (0, 2, 4, 50, 150):
        idx = np.maximum(np.arange(s - W, s + 1), 0)
        assert vals[s] == pytest.approx(float(V(path.states[idx])), abs=1e-14)


def test_potential_bound_and_documents():
    with pytest.raises(ValueError):
        state_potential([1.0, 1.0], [[1.0], [2.0]], bound=1.5)
    V = random_potential(3, 2, 2.0, np.random.default_rng(3), c0=0.5)
    back = potential_from_doc(potential_to_doc(V))
    x = np.random.default_rng(4).standard_normal((5, 3))
    np.testing.assert_array_equal(back(x), V(x))
    x = np.random.default_rng(5).standard_normal((10, 3)) * 100
    assert np.all(np.abs(V(x)) <= V.bound)


@pytest.mark.parametrize("clocking", ["discrete", "continuous"])
def test_duhamel_on_chains(clocking):
    rng = np.random.default_rng(21)
    chain = random_chain(4, rng, clocking)
    f = rng.standard_normal(4)
    assert duhamel_residual(chain, np.zeros(4), f, 1.0).residual == 0.0
    for _ in range(3):
        rep = duhamel_residual(chain, rng.normal(size=4), f, 1.0, nodes=100)
        assert rep.residual <= 1e-6


def test_duhamel_constant_potential(fixture_ctmc):
    c, t = 0.8, 1.0
    rep = duhamel_residual(fixture_ctmc, np.full(2, c), np.ones(2), t)
    np.testing.assert_allclose(rep.lhs, math.exp(c * t) - 1.0, rtol=1e-12)
    assert rep.residual <= 1e-12


def test_duhamel_on_model_zero_potential():
    model = linear_model([1.0, 2.0], 0.5)
    budget = MCBudget(probes=(np.array([1.0, 0.0]),), outer=20, inner=10, nodes=3, dt=0.05, seed=1)
    rep = duhamel_residual((model, budget), constant_potential(0.0, 2), lambda x: x[..., 0], 0.2)
    assert rep.residual == 0.0


def test_duhamel_on_model_resolved():
    model = linear_model([1.0, 2.0], 0.5)
    budget = MCBudget(probes=(np.array([1.0, 0.0]),), outer=200, inner=50, nodes=5, dt=0.05, seed=2)
    V = state_potential([0.5], [[1.0, 0.0]])
    rep = duhamel_residual((model, budget), V, None, 0.2)
    assert rep.resolved
    assert rep.std_error > 0


def test_trapezoid_is_exact_for_constants(torus2):
    ens = ensemble(torus2, np.zeros(torus2.n_modes), 3, 1.0, 0.1, 0)
    vals = path_values(constant_potential(2.0), ens.states, 0.1)
    np.testing.assert_allclose(trapezoid(vals, 0.1), 2.0, rtol=1e-15)
