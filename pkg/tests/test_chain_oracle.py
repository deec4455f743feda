import math

import numpy as np
import pytest

from nsldp.chain_oracle import (
    ChainError,
    FiniteChain,
    chain_from_doc,
    chain_to_doc,
    exact_pressure,
    exact_rate_legendre,
    exact_rate_variational,
    ldp_frequency,
    met_convergence,
    pf_eigen,
    random_chain,
    stationary,
    tilt,
)

LOG2 = math.log(2.0)


def test_stationary_examples(fixture_chain):
    np.testing.assert_allclose(stationary(fixture_chain), [2 / 3, 1 / 3], atol=1e-14)
    P = np.array([[0.5, 0.3, 0.2], [0.2, 0.5, 0.3], [0.3, 0.2, 0.5]])
    np.testing.assert_allclose(stationary(FiniteChain(P)), np.full(3, 1 / 3), atol=1e-14)
    with pytest.raises(ChainError):
        stationary(FiniteChain(np.eye(2)))


def test_chain_validation():
    with pytest.raises(ChainError):
        FiniteChain(np.array([[0.5, 0.6], [0.5, 0.5]]))
    with pytest.raises(ChainError):
        FiniteChain(np.array([[-1.0, 1.0], [-0.5, 0.5]]), "continuous")


def test_tilt_examples(fixture_chain):
    np.testing.assert_array_equal(tilt(fixture_chain, [0.0, 0.0]).matrix, fixture_chain.matrix)
    # the potential acts on rows: V = (log 2, 0) doubles the first row only
    np.testing.assert_allclose(tilt(fixture_chain, [LOG2, 0.0]).matrix, [[1.8, 0.2], [0.2, 0.8]], atol=1e-15)
    np.testing.assert_allclose(tilt(fixture_chain, [LOG2, LOG2]).matrix, [[1.8, 0.2], [0.4, 1.6]], atol=1e-15)
    V1, V2 = np.array([0.3, -1.0]), np.array([0.5, 0.2])
    np.testing.assert_allclose(tilt(tilt(fixture_chain, V1), V2).matrix, tilt(fixture_chain, V1 + V2).matrix,
                               rtol=1e-15)


def test_pf_eigen_examples(fixture_chain):
    pf = pf_eigen(tilt(fixture_chain, [0.0, 0.0]))
    assert pf.c == pytest.approx(1.0, abs=1e-14)
    np.testing.assert_allclose(pf.h, 1.0, atol=1e-12)
    np.testing.assert_allclose(pf.mu, [2 / 3, 1 / 3], atol=1e-12)
    pf = pf_eigen(tilt(fixture_chain, [LOG2, LOG2]))
    assert pf.c == pytest.approx(2.0, abs=1e-12)
    assert pf.residual <= 1e-10
    pf = pf_eigen(tilt(fixture_chain, [LOG2, 0.0]))
    assert pf.c == pytest.approx(1.3 + math.sqrt(0.29), abs=1e-12)


@pytest.mark.parametrize("clocking", ["discrete", "continuous"])
def test_pf_is_spectral_radius(clocking):
    rng = np.random.default_rng(7)
    for _ in range(10):
        chain = random_chain(5, rng, clocking)
        V = rng.normal(size=5)
        pf = pf_eigen(tilt(chain, V))
        ev = np.linalg.eigvals(tilt(chain, V).matrix)
        if clocking == "discrete":
            assert pf.c >= np.max(np.abs(ev)) - 1e-10
        else:
            assert pf.log_c >= np.max(ev.real) - 1e-10
        assert pf.residual <= 1e-10
        assert np.all(pf.h > 0) and np.all(pf.mu > 0)
        assert pf.mu.sum() == pytest.approx(1.0, abs=1e-14)
        assert float(pf.h @ pf.mu) == pytest.approx(1.0, abs=1e-12)


def test_exact_pressure_examples(fixture_chain):
    assert exact_pressure(fixture_chain, [0.0, 0.0]) == pytest.approx(0.0, abs=1e-14)
    assert exact_pressure(fixture_chain, [LOG2, LOG2]) == pytest.approx(LOG2, abs=1e-12)
    V = np.array([0.4, -0.2])
    assert exact_pressure(fixture_chain, V + 1.5) == pytest.approx(exact_pressure(fixture_chain, V) + 1.5, abs=1e-12)


@pytest.mark.parametrize("clocking", ["discrete", "continuous"])
def test_pressure_convex_and_methods_agree(clocking):
    rng = np.random.default_rng(11)
    chain = random_chain(4, rng, clocking)
    for _ in range(20):
        a, b = rng.normal(size=4), rng.normal(size=4)
        qa, qb = exact_pressure(chain, a), exact_pressure(chain, b)
        assert exact_pressure(chain, 0.5 * (a + b)) <= 0.5 * (qa + qb) + 1e-8
        assert exact_pressure(chain, a, method="dense") == pytest.approx(qa, abs=1e-10)


def test_rate_examples(fixture_chain, fixture_ctmc):
    pi = stationary(fixture_chain)
    assert exact_rate_legendre(fixture_chain, pi) <= 1e-8
    assert exact_rate_variational(fixture_chain, pi) == pytest.approx(0.0, abs=1e-8)
    assert exact_rate_legendre(fixture_chain, [1.0, 0.0]) == pytest.approx(-math.log(0.9), abs=1e-8)
    assert exact_rate_variational(fixture_chain, [1.0, 0.0]) == pytest.approx(-math.log(0.9), abs=1e-8)
    # continuous clocking: staying in state 0 costs its exit rate
    assert exact_rate_legendre(fixture_ctmc, [1.0, 0.0]) == pytest.approx(0.1, abs=1e-7)
    assert exact_rate_variational(fixture_ctmc, [1.0, 0.0]) == pytest.approx(0.1, abs=1e-7)


def test_rate_convex_on_segments(fixture_chain):
    for a, b in [(0.1, 0.9), (0.0, 0.5), (0.3, 1.0)]:
        pa, pb = np.array([a, 1 - a]), np.array([b, 1 - b])
        mid = exact_rate_legendre(fixture_chain, 0.5 * (pa + pb))
        assert mid <= 0.5 * (exact_rate_legendre(fixture_chain, pa) + exact_rate_legendre(fixture_chain, pb)) + 1e-8


@pytest.mark.parametrize("clocking", ["discrete", "continuous"])
@pytest.mark.parametrize("n", [2, 3, 4, 6])
def test_rate_duality(n, clocking):
    rng = np.random.default_rng(100 + n)
    chain = random_chain(n, rng, clocking)
    for _ in range(3):
        lam = rng.dirichlet(np.ones(n))
        leg = exact_rate_legendre(chain, lam)
        var = exact_rate_variational(chain, lam)
        assert leg == pytest.approx(var, abs=1e-6)
        assert leg > 1e-6


def test_rate_rejects_bad_lambda(fixture_chain):
    with pytest.raises(ChainError):
        exact_rate_legendre(fixture_chain, [0.7, 0.7])


def test_met_examples(fixture_chain):
    V = [LOG2, LOG2]
    h = pf_eigen(tilt(fixture_chain, V)).h
    rep = met_convergence(fixture_chain, V, h, 30)
    assert np.max(rep.errors) <= 1e-12
    # V constant makes h constant, so f = 1 converges at once
    assert np.max(met_convergence(fixture_chain, V, [1.0, 1.0], 30).errors) <= 1e-12
    rep = met_convergence(fixture_chain, V, [1.0, 3.0], 30)
    assert rep.spectral_ratio == pytest.approx(0.7, abs=1e-12)
    assert rep.limit_ratio == pytest.approx(0.7, abs=1e-6)
    assert rep.passed
    rep = met_convergence(fixture_chain, [0.0, 0.0], [1.0, 3.0], 60)
    assert rep.errors[-1] <= 1e-8
    assert rep.passed


def test_semigroup_property(fixture_ctmc):
    V = np.array([0.3, -0.4])
    A = fixture_ctmc.fk_semigroup(V, 0.7)
    B = fixture_ctmc.fk_semigroup(V, 0.5)
    np.testing.assert_allclose(A @ B, fixture_ctmc.fk_semigroup(V, 1.2), atol=1e-10)


def test_ldp_near_stationary(fixture_chain):
    table = ldp_frequency(fixture_chain, stationary(fixture_chain), 0.2, [50, 100], 2000, 3)
    assert table.last.frequency > 0.9
    assert table.last.rate < 0.01
    # the search grid misses 2/3 by at most 1/4000, where the rate is O(1e-8)
    assert table.inf_closed == pytest.approx(0.0, abs=1e-6)


def test_ldp_small_sample_flagged(fixture_chain):
    table = ldp_frequency(fixture_chain, [1.0, 0.0], 0.05, [200], 50, 3)
    assert table.last.flagged
    assert "rate" in table.to_tsv()


def test_chain_document_round_trip():
    chain = random_chain(3, np.random.default_rng(0), "continuous")
    back = chain_from_doc(chain_to_doc(chain))
    np.testing.assert_array_equal(back.matrix, chain.matrix)
    assert back.clocking == "continuous"
