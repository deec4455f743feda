import json
import math

import numpy as np
import pytest

from nsldp.galerkin import (
    CancellationViolation,
    NoiseViolation,
    SpectrumViolation,
    apply_nonlinearity,
    apply_stokes,
    build_custom_model,
    build_torus_model,
    cancellation_defect,
    export_model,
    import_model,
    linear_model,
    load_model,
    norm1_sq,
    norm_dual_sq,
    norm_sq,
    project,
    save_model,
)


def _physical_advection(model, K, u, grid=16):
    """Project ``(u . grad) u`` onto the modes using fields sampled on a grid.

    With maximal wavenumber ``K`` the product has wavenumbers up to ``2K``,
    so a ``grid > 4K`` point rule computes the mean exactly.
    """
    x = 2 * math.pi * np.arange(grid) / grid
    X, Y = np.meshgrid(x, x, indexing="ij")
    fields, grads = [], []
    for label in model.index_map:
        kind, vec = label[:3], tuple(int(c) for c in label[3:].strip("()").split(","))
        k = np.array(vec, dtype=float)
        n = np.array([-k[1], k[0]]) / np.linalg.norm(k)
        phase = k[0] * X + k[1] * Y
        s = math.sqrt(2.0)
        if kind == "cos":
            val, dval = s * np.cos(phase), -s * np.sin(phase)
        else:
            val, dval = s * np.sin(phase), s * np.cos(phase)
        fields.append(n[:, None, None] * val)
        # grads[c][d] = d/dx_d of component c
        grads.append(n[:, None, None, None] * k[None, :, None, None] * dval)
    vel = sum(c * f for c, f in zip(u, fields))
    jac = sum(c * g for c, g in zip(u, grads))
    adv = np.einsum("dxy,cdxy->cxy", vel, jac)
    return np.array([np.mean(np.sum(adv * f, axis=0)) for f in fields])


@pytest.mark.parametrize("K", [1, 2])
def test_torus_tensor_matches_physical_space(K):
    model = build_torus_model(K)
    rng = np.random.default_rng(K)
    for _ in range(5):
        u = rng.standard_normal(model.n_modes)
        np.testing.assert_allclose(apply_nonlinearity(model, u), _physical_advection(model, K, u), atol=1e-12)


def test_lowest_shell_has_four_unit_modes():
    model = build_torus_model(1, None, 0.1)
    assert model.n_modes == 4
    np.testing.assert_array_equal(model.eigenvalues, 1.0)


def test_spectrum_of_second_shell():
    model = build_torus_model(2)
    assert set(model.eigenvalues.tolist()) == {1.0, 2.0, 4.0}
    assert np.all(np.diff(model.eigenvalues) >= 0)


def test_torus_eigenvalue_is_squared_wavenumber():
    model = build_torus_model(3)
    for a, label in zip(model.eigenvalues, model.index_map):
        k = [int(c) for c in label[3:].strip("()").split(",")]
        assert a == k[0] ** 2 + k[1] ** 2


@pytest.mark.parametrize("K", [1, 2, 3])
def test_cancellation_random_and_single_mode(K):
    model = build_torus_model(K)
    rng = np.random.default_rng(0)
    states = np.concatenate([np.eye(model.n_modes), rng.standard_normal((200, model.n_modes))])
    states *= np.exp(rng.normal(0, 2, size=(len(states), 1)))
    assert np.max(cancellation_defect(model, states)) <= 1e-10


def test_noise_must_be_positive():
    with pytest.raises(NoiseViolation):
        build_torus_model(1, None, 0.0)
    with pytest.raises(NoiseViolation):
        build_torus_model(1, None, {2: -1.0})


def test_linear_model_is_valid():
    model = build_custom_model([1.0, 2.0], np.zeros((2, 2, 2)), [0.0, 0.0], [1.0, 1.0])
    u = np.array([0.3, -2.0])
    np.testing.assert_array_equal(apply_nonlinearity(model, u), 0.0)


def test_single_term_tensor_rejected():
    T = np.zeros((2, 2, 2))
    T[0, 0, 0] = 1.0
    with pytest.raises(CancellationViolation):
        build_custom_model([1.0, 2.0], T, None, [1.0, 1.0])


@pytest.mark.parametrize("alpha", [[0.0, 1.0], [-1.0, 2.0], [2.0, 1.0]])
def test_spectrum_rejected(alpha):
    with pytest.raises(SpectrumViolation):
        build_custom_model(alpha, np.zeros((2, 2, 2)), None, [1.0, 1.0])


def test_export_round_trip_bit_exact(tmp_path):
    model = build_torus_model(2, {0: 1.0, 3: -0.5}, lambda a: 0.3 / a)
    doc = export_model(model)
    again = import_model(json.loads(json.dumps(doc)))
    for name in ("eigenvalues", "noise_amps", "forcing", "tensor_idx", "tensor_val"):
        np.testing.assert_array_equal(getattr(model, name), getattr(again, name))
    assert again.index_map == model.index_map
    assert again.model_id == model.model_id
    path = tmp_path / "model.json"
    save_model(model, path)
    assert export_model(load_model(path)) == doc


def test_tensor_entry_order_irrelevant():
    model = build_torus_model(1)
    dense = model.dense_tensor()
    idx = np.argwhere(dense != 0)
    rng = np.random.default_rng(3)
    perm = rng.permutation(len(idx))
    entries = np.column_stack([idx[perm], dense[tuple(idx[perm].T)]])
    again = build_custom_model(model.eigenvalues, entries, None, model.noise_amps)
    u = rng.standard_normal(model.n_modes)
    np.testing.assert_allclose(apply_nonlinearity(again, u), apply_nonlinearity(model, u), atol=1e-15)


def test_stokes_and_norms(torus2):
    u = np.zeros(torus2.n_modes)
    u[0] = 1.0
    np.testing.assert_array_equal(apply_stokes(torus2, u), torus2.eigenvalues[0] * u)
    np.testing.assert_array_equal(apply_stokes(torus2, np.zeros(torus2.n_modes)), 0.0)
    v = np.random.default_rng(1).standard_normal(torus2.n_modes)
    assert float(np.sum(apply_stokes(torus2, v) * v)) == float(norm1_sq(torus2, v))
    assert norm_sq(v) == pytest.approx(np.sum(v**2))
    assert norm_dual_sq(torus2, v) == pytest.approx(np.sum(v**2 / torus2.eigenvalues))


def test_dimension_mismatch(torus2):
    with pytest.raises(ValueError):
        apply_stokes(torus2, np.zeros(3))
    with pytest.raises(ValueError):
        apply_nonlinearity(torus2, np.zeros(torus2.n_modes + 1))


def test_nonlinearity_zero_state(torus2):
    np.testing.assert_array_equal(apply_nonlinearity(torus2, np.zeros(torus2.n_modes)), 0.0)


def test_projection_identities():
    u = np.random.default_rng(2).standard_normal(7)
    p, q = project(u, 0)
    np.testing.assert_array_equal(p, 0.0)
    np.testing.assert_array_equal(q, u)
    p, q = project(u, 7)
    np.testing.assert_array_equal(p, u)
    np.testing.assert_array_equal(q, 0.0)
    for N in range(8):
        p, q = project(u, N)
        np.testing.assert_array_equal(p + q, u)
        np.testing.assert_array_equal(project(p, N)[0], p)
        assert norm_sq(p) + norm_sq(q) == pytest.approx(norm_sq(u), rel=1e-15)
    with pytest.raises(ValueError):
        project(u, 8)


def test_batched_nonlinearity_matches_rows(torus2):
    U = np.random.default_rng(4).standard_normal((6, torus2.n_modes))
    batched = apply_nonlinearity(torus2, U)
    for row, out in zip(U, batched):
        np.testing.assert_array_equal(apply_nonlinearity(torus2, row), out)


def test_linear_model_helper():
    model = linear_model([1.0, 2.0], 0.0, allow_degenerate_noise=True)
    assert model.B0 == 0.0
    with pytest.raises(NoiseViolation):
        linear_model([1.0, 2.0], 0.0)
