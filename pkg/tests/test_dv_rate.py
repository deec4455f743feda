import math

import numpy as np
import pytest

from nsldp.chain_oracle import FiniteChain, exact_rate_legendre, random_chain, stationary
from nsldp.dv_rate import (
    GeneratorProbe,
    ModelSemigroup,
    QuadratureSpec,
    constant_family,
    contraction_gap,
    cutoff,
    dv_entropy,
    dv_integrand,
    exact_rate,
    generator_apply,
    legendre_rate,
    level3_rate_markov,
    optimal_kernel,
    past_conditioned_entropy,
    pattern_search,
    potential_family,
    relative_entropy,
    resolvent,
    resolvent_approximation,
    variational_rate,
)
from nsldp.empirical import EmpiricalMeasure
from nsldp.galerkin import linear_model


def test_relative_entropy_examples():
    assert relative_entropy([0.3, 0.7], [0.3, 0.7]) == 0.0
    assert relative_entropy([1.0, 0.0], [0.5, 0.5]) == pytest.approx(0.693147, abs=1e-6)
    assert relative_entropy([0.5, 0.5], [1.0, 0.0]) == math.inf


def test_relative_entropy_on_measures():
    pts = np.array([[0.0], [1.0]])
    a = EmpiricalMeasure(pts, np.array([0.5, 0.5]), {"kind": "state"})
    b = EmpiricalMeasure(pts[::-1], np.array([0.25, 0.75]), {"kind": "state"})
    expected = 0.5 * math.log(0.5 / 0.75) + 0.5 * math.log(0.5 / 0.25)
    assert relative_entropy(a, b) == pytest.approx(expected, rel=1e-14)


def test_relative_entropy_variational_form():
    rng = np.random.default_rng(0)
    p, q = rng.dirichlet(np.ones(4)), rng.dirichlet(np.ones(4))
    V = np.log(p / q)
    assert relative_entropy(p, q) == pytest.approx(float(V @ p - math.log(np.exp(V) @ q)), abs=1e-12)


def test_pattern_search_quadratic():
    x, fx, evals, ok = pattern_search(lambda x: -np.sum((x - [1.0, -2.0]) ** 2), np.zeros(2), 5000)
    np.testing.assert_allclose(x, [1.0, -2.0], atol=1e-8)
    assert ok and evals <= 5000


def test_legendre_rate_examples(fixture_chain):
    pi = stationary(fixture_chain)
    r = legendre_rate(fixture_chain, pi, seed=1)
    assert abs(r.value) <= 1e-8
    r = legendre_rate(fixture_chain, [1.0, 0.0], seed=1)
    assert r.value == pytest.approx(-math.log(0.9), abs=1e-6)
    assert r.value <= exact_rate(fixture_chain, [1.0, 0.0]).value + 1e-6
    r = legendre_rate(fixture_chain, [0.2, 0.8], constant_family(2), seed=1)
    assert abs(r.value) <= 1e-12
    assert len(r.diagnostics["restarts"]) == 8


def test_legendre_rate_budget_flag(fixture_chain):
    r = legendre_rate(fixture_chain, [0.3, 0.7], search_budget=16, restarts=1)
    assert not r.converged
    assert r.value <= exact_rate(fixture_chain, [0.3, 0.7]).value + 1e-6


def test_legendre_needs_family_for_oracle():
    with pytest.raises(ValueError):
        legendre_rate(lambda V: 0.0, [1.0])


@pytest.mark.parametrize("clocking", ["discrete", "continuous"])
def test_search_routes_match_exact(clocking):
    rng = np.random.default_rng(31)
    chain = random_chain(3, rng, clocking)
    lam = rng.dirichlet(np.ones(3))
    exact = exact_rate(chain, lam)
    assert exact.mode == "exact_chain"
    leg = legendre_rate(chain, lam, seed=2)
    var = variational_rate(lam, GeneratorProbe(chain), seed=2)
    assert leg.value == pytest.approx(exact.value, abs=1e-6)
    assert var.value == pytest.approx(exact.value, abs=1e-6)
    assert var.value == pytest.approx(leg.value, abs=1e-6)


def test_variational_stationary_is_zero(fixture_chain):
    r = variational_rate(stationary(fixture_chain), GeneratorProbe(fixture_chain), seed=0)
    assert abs(r.value) <= 1e-8
    assert dv_integrand(fixture_chain, np.full(2, 3.0), [0.4, 0.6]) == pytest.approx(0.0, abs=1e-15)


def test_resolvent_of_constant(fixture_ctmc, fixture_chain):
    for chain in (fixture_ctmc, fixture_chain):
        for alpha in (0.5, 1.0, 10.0):
            res = resolvent(chain, np.ones(2), alpha)
            np.testing.assert_allclose(res.values, 1.0 / alpha, rtol=1e-10)
            assert not res.flagged


def test_resolvent_rules_agree(fixture_ctmc):
    f = np.array([1.0, 3.0])
    exact = resolvent(fixture_ctmc, f, 2.0, QuadratureSpec(rule="exact")).values
    np.testing.assert_allclose(resolvent(fixture_ctmc, f, 2.0).values, exact, rtol=1e-10)
    trap = resolvent(fixture_ctmc, f, 2.0, QuadratureSpec(rule="trapezoid", nodes=4001, horizon=20.0))
    np.testing.assert_allclose(trap.values, exact, rtol=1e-5)
    short = resolvent(fixture_ctmc, f, 2.0, QuadratureSpec(rule="trapezoid", nodes=101, horizon=1.0))
    assert short.flagged


def test_resolvent_limit_monotone():
    chain = random_chain(4, np.random.default_rng(3), "continuous")
    f = np.array([1.0, 2.0, 0.5, 4.0])
    errs = [np.abs(a * resolvent(chain, f, a).values - f) for a in (1.0, 10.0, 100.0)]
    assert np.all(errs[1] <= errs[0]) and np.all(errs[2] <= errs[1])


def test_resolvent_commutes_with_semigroup():
    from scipy.linalg import expm

    chain = random_chain(4, np.random.default_rng(4), "continuous")
    f = np.array([1.0, -2.0, 0.5, 3.0])
    Pt = expm(0.7 * chain.generator)
    left = Pt @ resolvent(chain, f, 1.5).values
    right = resolvent(chain, Pt @ f, 1.5).values
    np.testing.assert_allclose(left, right, atol=1e-8)


def test_resolvent_rejects_bad_alpha(fixture_ctmc):
    with pytest.raises(ValueError):
        resolvent(fixture_ctmc, np.ones(2), 0.0)


def test_model_resolvent_of_constant():
    model = linear_model([1.0, 2.0], 0.5)
    sg = ModelSemigroup(model, np.zeros((1, 2)), count=20, dt=0.01, seed=0)
    res = resolvent(sg, lambda x: np.ones(x.shape[:-1]), 2.0, QuadratureSpec(tol=1e-6))
    assert res.values[0] == pytest.approx(0.5, rel=1e-4)
    assert not res.flagged


def test_generator_examples(fixture_chain, fixture_ctmc):
    probe = GeneratorProbe(fixture_chain)
    np.testing.assert_allclose(generator_apply(probe, np.ones(2)), 0.0, atol=1e-15)
    f = np.array([1.0, 5.0])
    np.testing.assert_array_equal(generator_apply(probe, f), (fixture_chain.matrix - np.eye(2)) @ f)
    probe = GeneratorProbe(fixture_ctmc, dt_fd=1e-4)
    np.testing.assert_allclose(generator_apply(probe, f, method="fd"), fixture_ctmc.matrix @ f, atol=1e-7)


def test_generator_of_resolvent_range():
    chain = random_chain(3, np.random.default_rng(5), "continuous")
    g = np.array([1.0, 2.0, 0.5])
    alpha = 3.0
    Rg = resolvent(chain, g, alpha).values
    probe = GeneratorProbe(chain, dt_fd=1e-4)
    by_fd = generator_apply(probe, Rg, method="fd")
    by_identity = generator_apply(probe, Rg, resolvent_source=g, alpha=alpha)
    np.testing.assert_allclose(by_fd, by_identity, atol=1e-6)
    lam = np.array([0.2, 0.5, 0.3])
    two_ways = [float(lam @ (-generator_apply(probe, Rg, method=m) / Rg)) for m in ("matrix",)]
    two_ways.append(float(lam @ (-by_identity / Rg)))
    assert two_ways[0] == pytest.approx(two_ways[1], abs=1e-8)


def test_generator_positivity_checks(fixture_chain):
    with pytest.raises(ValueError):
        GeneratorProbe(fixture_chain, domain_family=(np.array([1.0, -1.0]),))
    with pytest.raises(ValueError):
        generator_apply(GeneratorProbe(fixture_chain), np.array([0.0, 1.0]), require_positive=True)


def test_generator_on_deterministic_model():
    model = linear_model([1.0, 2.0], 0.0, allow_degenerate_noise=True)
    probes = np.array([[1.0, 0.5], [-2.0, 1.0]])
    sg = ModelSemigroup(model, probes, count=2, dt=0.01, seed=0)
    Lf = generator_apply(GeneratorProbe(sg, dt_fd=0.02), lambda x: x[..., 0])
    np.testing.assert_allclose(Lf, -probes[:, 0], atol=1e-3)


def test_variational_on_model_is_finite():
    model = linear_model([1.0], 0.5)
    probes = np.array([[0.0], [0.5]])
    sg = ModelSemigroup(model, probes, count=200, dt=0.01, seed=0)
    lam = EmpiricalMeasure(probes, np.array([0.5, 0.5]), {"kind": "state"})
    r = variational_rate(lam, GeneratorProbe(sg, dt_fd=0.02), 20, family=potential_family([[1.0]]), restarts=2)
    assert np.isfinite(r.value) and r.value >= 0.0
    assert r.diagnostics["evaluations"] <= 40


def test_dv_entropy_examples(fixture_chain):
    P = fixture_chain.matrix
    assert dv_entropy((fixture_chain, P)) == 0.0
    Q = np.full((2, 2), 0.5)
    h1 = dv_entropy((fixture_chain, Q))
    expected = 0.5 * (0.5 * math.log(0.5 / 0.9) + 0.5 * math.log(0.5 / 0.1)) \
        + 0.5 * (0.5 * math.log(0.5 / 0.2) + 0.5 * math.log(0.5 / 0.8))
    assert h1 == pytest.approx(expected, rel=1e-14)
    assert h1 == pytest.approx(0.3670, abs=1e-4)
    for t in (2, 3, 7):
        assert dv_entropy((fixture_chain, Q), t) == t * h1
    with pytest.raises(ValueError):
        dv_entropy((fixture_chain, Q), 0)


def test_dv_entropy_absolute_continuity():
    P = FiniteChain(np.array([[0.0, 1.0], [0.5, 0.5]]))
    assert dv_entropy((P, np.full((2, 2), 0.5))) == math.inf


def test_level3_past_conditioning():
    rng = np.random.default_rng(6)
    chain = random_chain(3, rng)
    Q = random_chain(3, rng).matrix
    vals = [past_conditioned_entropy(chain, Q, k) for k in (1, 2, 3)]
    assert max(vals) - min(vals) <= 1e-12
    assert level3_rate_markov(chain, Q) == dv_entropy((chain, Q), 1)
    assert level3_rate_markov(chain, chain.matrix) == 0.0


@pytest.mark.parametrize("clocking", ["discrete", "continuous"])
def test_contraction(clocking):
    rng = np.random.default_rng(8)
    chain = random_chain(3, rng, clocking)
    assert contraction_gap(chain, chain.matrix) == pytest.approx(0.0, abs=1e-8)
    for _ in range(10):
        Q = random_chain(3, rng, clocking).matrix
        assert contraction_gap(chain, Q) >= -1e-8
    lam = rng.dirichlet(np.ones(3))
    K = optimal_kernel(chain, lam)
    assert contraction_gap(chain, K) == pytest.approx(0.0, abs=1e-7)


def test_cutoff_pipeline():
    chain = random_chain(3, np.random.default_rng(9), "continuous")
    np.testing.assert_array_equal(cutoff([0.05, 1.0, 30.0], 10.0), [0.1, 1.0, 10.0])
    f = np.array([0.4, 1.0, 3.0])
    lam = np.array([0.3, 0.3, 0.4])
    table = resolvent_approximation(chain, f, lam, [1.0, 10.0, 100.0, 1000.0], [2.0, 3.0, 10.0])
    errs = np.abs(table.values[:, -1] - table.base)
    assert np.all(np.diff(errs) < 0)
    assert errs[-1] < 1e-2 * max(1.0, abs(table.base))
    # once N exceeds max(f, 1/min f) the cutoff is the identity
    np.testing.assert_array_equal(table.values[:, 2], table.values[:, 3])
    for row in table.values:
        assert row[-1] <= row[-2] + 1e-12
    assert table.base == pytest.approx(dv_integrand(chain, f, lam), rel=1e-15)
    assert exact_rate_legendre(chain, lam) >= table.base - 1e-8
