"""Spectral Galerkin truncation of the forced 2D Navier-Stokes system.

A model is the tuple (alpha, T, h, b): Stokes eigenvalues, a trilinear
tensor for the projected nonlinearity, deterministic forcing and noise
amplitudes, all expressed in an orthonormal eigenbasis. Viscosity is 1.

The concrete instance is a periodic-box surrogate built from real Fourier
modes (see :func:`build_torus_model`); arbitrary validated tuples can be
supplied through :func:`build_custom_model`.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Any, Mapping, Sequence

import numpy as np

CANCELLATION_TOL = 1e-10


class ModelError(ValueError):
    """Base class for invalid model data."""


class CancellationViolation(ModelError):
    """The tensor does not satisfy <B(u,u), u> = 0."""


class SpectrumViolation(ModelError):
    """Eigenvalues are not positive and nondecreasing."""


class NoiseViolation(ModelError):
    """Some noise amplitude is not strictly positive."""


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class GalerkinModel:
    """Finite spectral truncation.

    Attributes
    ----------
    eigenvalues : ndarray, shape (n,)
        Stokes eigenvalues, positive and nondecreasing.
    noise_amps : ndarray, shape (n,)
        Noise amplitudes ``b_j``. Zero entries are allowed only for models
        built with ``allow_degenerate_noise`` (deterministic checks).
    forcing : ndarray, shape (n,)
        Forcing coefficients ``h_j``.
    tensor_idx : ndarray, shape (nnz, 3)
        Sparse entries ``(i, j, k)`` of the tensor, symmetric in ``(i, j)``
        and sorted by ``k``.
    tensor_val : ndarray, shape (nnz,)
        Values of the entries.
    index_map : tuple
        Human-readable label per mode.
    """

    eigenvalues: np.ndarray
    noise_amps: np.ndarray
    forcing: np.ndarray
    tensor_idx: np.ndarray
    tensor_val: np.ndarray
    index_map: tuple = field(default=())

    @property
    def n_modes(self) -> int:
        return int(self.eigenvalues.shape[0])

    @property
    def B0(self) -> float:
        """Total noise intensity, sum of b_j^2."""
        return float(np.sum(self.noise_amps**2))

    @property
    def B1(self) -> float:
        """Sum of alpha_j b_j^2."""
        return float(np.sum(self.eigenvalues * self.noise_amps**2))

    @cached_property
    def _segments(self) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        # reduceat layout: entries are sorted by k, one segment per present k
        k = self.tensor_idx[:, 2]
        if k.size == 0:
            empty = np.zeros(0, dtype=np.int64)
            return empty, empty, empty, empty
        present, starts = np.unique(k, return_index=True)
        return (
            self.tensor_idx[:, 0].copy(),
            self.tensor_idx[:, 1].copy(),
            starts.astype(np.int64),
            present.astype(np.int64),
        )

    @cached_property
    def model_id(self) -> str:
        doc = json.dumps(export_model(self), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(doc.encode()).hexdigest()[:16]

    def dense_tensor(self) -> np.ndarray:
        """Dense copy ``T[i, j, k]`` (for small models and tests)."""
        n = self.n_modes
        T = np.zeros((n, n, n))
        i, j, k = self.tensor_idx.T
        np.add.at(T, (i, j, k), self.tensor_val)
        return T


# --------------------------------------------------------------------------
# norms and linear operators


def norm_sq(u: np.ndarray) -> np.ndarray:
    """Squared H-norm ``sum u_j^2`` along the last axis."""
    u = np.asarray(u, dtype=float)
    return np.sum(u * u, axis=-1)


def norm1_sq(model: GalerkinModel, u: np.ndarray) -> np.ndarray:
    """Squared U-norm ``sum alpha_j u_j^2``."""
    u = np.asarray(u, dtype=float)
    return np.sum((model.eigenvalues * u) * u, axis=-1)


def norm_dual_sq(model: GalerkinModel, u: np.ndarray) -> np.ndarray:
    """Squared dual norm ``sum u_j^2 / alpha_j``."""
    u = np.asarray(u, dtype=float)
    return np.sum(u * u / model.eigenvalues, axis=-1)


def _check_dim(model: GalerkinModel, u: np.ndarray) -> np.ndarray:
    u = np.asarray(u, dtype=float)
    if u.shape[-1:] != (model.n_modes,):
        raise ValueError(f"state has trailing dimension {u.shape[-1:]}, model has {model.n_modes} modes")
    return u


def apply_stokes(model: GalerkinModel, u: np.ndarray) -> np.ndarray:
    """Return ``Lu`` with ``(Lu)_j = alpha_j u_j``."""
    u = _check_dim(model, u)
    return model.eigenvalues * u


def apply_nonlinearity(model: GalerkinModel, u: np.ndarray) -> np.ndarray:
    """Return ``B(u, u)`` for a single state or a batch along leading axes.

    The contraction is evaluated row by row in a fixed entry order, so a
    state's result does not depend on the batch it is computed in.
    """
    u = _check_dim(model, u)
    out = np.zeros(u.shape)
    ii, jj, starts, present = model._segments
    if present.size == 0:
        return out
    prod = (u[..., ii] * u[..., jj]) * model.tensor_val
    out[..., present] = np.add.reduceat(prod, starts, axis=-1)
    return out


def project(u: np.ndarray, N: int) -> tuple[np.ndarray, np.ndarray]:
    """Split ``u`` into ``(P_N u, Q_N u)``.

    ``P_N`` keeps the first ``N`` coefficients. The two parts are exact
    copies of disjoint slices, so their sum reproduces ``u`` bit for bit.
    """
    u = np.asarray(u, dtype=float)
    n = u.shape[-1]
    if not 0 <= N <= n:
        raise ValueError(f"projection level {N} outside [0, {n}]")
    p = np.zeros_like(u)
    q = np.zeros_like(u)
    p[..., :N] = u[..., :N]
    q[..., N:] = u[..., N:]
    return p, q


def cancellation_defect(model: GalerkinModel, u: np.ndarray) -> np.ndarray:
    """Relative defect ``|<B(u,u),u>| / (||u|| max(||B(u,u)||, 1))``."""
    u = _check_dim(model, u)
    b = apply_nonlinearity(model, u)
    num = np.abs(np.sum(b * u, axis=-1))
    den = np.sqrt(norm_sq(u)) * np.maximum(np.sqrt(norm_sq(b)), 1.0)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(den > 0, num / np.where(den > 0, den, 1.0), 0.0)


# --------------------------------------------------------------------------
# construction


def _symmetrize_entries(idx: np.ndarray, val: np.ndarray, n: int) -> tuple[np.ndarray, np.ndarray]:
    T = np.zeros((n, n, n))
    if len(val):
        np.add.at(T, (idx[:, 0], idx[:, 1], idx[:, 2]), val)
    T = 0.5 * (T + T.transpose(1, 0, 2))
    return _dense_to_sparse(T)


def _dense_to_sparse(T: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    nz = np.nonzero(T)
    idx = np.stack(nz, axis=1).astype(np.int64)
    val = T[nz]
    order = np.lexsort((idx[:, 1], idx[:, 0], idx[:, 2]))
    return idx[order], val[order]


def _probe_states(n: int, count: int = 32) -> np.ndarray:
    rng = np.random.default_rng(20240601)
    probes = [np.eye(n), rng.standard_normal((count, n)), 10.0 * rng.standard_normal((4, n))]
    return np.concatenate(probes, axis=0)


def build_custom_model(
    eigenvalues: Sequence[float],
    tensor: Any,
    forcing: Sequence[float] | None = None,
    noise_amps: Sequence[float] | None = None,
    *,
    index_map: Sequence[str] | None = None,
    allow_degenerate_noise: bool = False,
) -> GalerkinModel:
    """Validate ``(alpha, T, h, b)`` and return a model.

    Parameters
    ----------
    eigenvalues : sequence of float
        Positive, nondecreasing.
    tensor : array of shape (n, n, n) or iterable of (i, j, k, value)
        Trilinear tensor; symmetrized in ``(i, j)`` on load.
    forcing, noise_amps : sequence of float, optional
        Default to zeros and ones respectively.
    allow_degenerate_noise : bool
        Permit ``b_j = 0``. Only meant for deterministic checks; the
        non-degenerate contract is the default.

    Raises
    ------
    SpectrumViolation, NoiseViolation, CancellationViolation
    """
    alpha = np.asarray(eigenvalues, dtype=float).ravel()
    n = alpha.size
    if n == 0:
        raise SpectrumViolation("model needs at least one mode")
    if not np.all(np.isfinite(alpha)) or np.any(alpha <= 0):
        raise SpectrumViolation("eigenvalues must be positive and finite")
    if np.any(np.diff(alpha) < 0):
        raise SpectrumViolation("eigenvalues must be nondecreasing")

    h = np.zeros(n) if forcing is None else np.asarray(forcing, dtype=float).ravel()
    b = np.ones(n) if noise_amps is None else np.asarray(noise_amps, dtype=float).ravel()
    if h.shape != (n,) or b.shape != (n,):
        raise ValueError("forcing and noise_amps must match the number of modes")
    if not (np.all(np.isfinite(h)) and np.all(np.isfinite(b))):
        raise ModelError("forcing and noise amplitudes must be finite")
    if allow_degenerate_noise:
        if np.any(b < 0):
            raise NoiseViolation("noise amplitudes must be nonnegative")
    elif np.any(b <= 0):
        raise NoiseViolation("noise amplitudes must be strictly positive")

    arr = np.asarray(tensor, dtype=float) if not isinstance(tensor, np.ndarray) else tensor.astype(float)
    if arr.ndim == 3:
        if arr.shape != (n, n, n):
            raise ValueError(f"dense tensor must have shape {(n, n, n)}")
        raw_idx, raw_val = _dense_to_sparse(arr)
    else:
        arr = arr.reshape(-1, 4) if arr.size else np.zeros((0, 4))
        raw_idx = arr[:, :3].astype(np.int64)
        raw_val = arr[:, 3]
        if np.any(raw_idx < 0) or np.any(raw_idx >= n) or np.any(raw_idx != arr[:, :3]):
            raise ValueError("tensor indices out of range")
    idx, val = _symmetrize_entries(raw_idx, raw_val, n)

    labels = tuple(index_map) if index_map is not None else tuple(f"mode{j}" for j in range(n))
    model = GalerkinModel(_readonly(alpha), _readonly(b), _readonly(h), idx, _readonly(val), labels)
    idx.setflags(write=False)

    worst = float(np.max(cancellation_defect(model, _probe_states(n))))
    if not worst <= CANCELLATION_TOL:
        raise CancellationViolation(f"<B(u,u),u> defect {worst:.3e} exceeds {CANCELLATION_TOL:g}")
    return model


def _torus_wavevectors(K: int) -> list[tuple[int, int]]:
    vecs = []
    for k1 in range(0, K + 1):
        for k2 in range(-K, K + 1):
            if k1 * k1 + k2 * k2 == 0 or k1 * k1 + k2 * k2 > K * K:
                continue
            if k1 > 0 or k2 > 0:
                vecs.append((k1, k2))
    vecs.sort(key=lambda k: (k[0] ** 2 + k[1] ** 2, k[0], k[1]))
    return vecs


def _resolve_amplitudes(spec: Any, alpha: np.ndarray, default: float) -> np.ndarray:
    n = alpha.size
    if spec is None:
        return np.full(n, default)
    if callable(spec):
        return np.asarray([float(spec(a)) for a in alpha])
    if isinstance(spec, Mapping):
        out = np.full(n, default)
        for key, value in spec.items():
            out[int(key)] = float(value)
        return out
    arr = np.asarray(spec, dtype=float)
    if arr.ndim == 0:
        return np.full(n, float(arr))
    if arr.shape != (n,):
        raise ValueError(f"expected {n} coefficients, got shape {arr.shape}")
    return arr.copy()


def build_torus_model(
    max_wavenumber: int,
    forcing_spec: Any = None,
    noise_spec: Any = 1.0,
    *,
    allow_degenerate_noise: bool = False,
) -> GalerkinModel:
    """Galerkin model on the periodic box ``[0, 2 pi]^2``.

    Each wavevector pair ``{k, -k}`` with ``0 < |k| <= max_wavenumber``
    contributes the two divergence-free fields ``sqrt(2) n_k cos(k.x)`` and
    ``sqrt(2) n_k sin(k.x)`` where ``n_k = k^perp / |k|``. With the spatial
    mean as inner product these are orthonormal and ``alpha = |k|^2``.

    Parameters
    ----------
    max_wavenumber : int
        Radius of the retained disc of wavevectors.
    forcing_spec : None, float, sequence, mapping or callable
        Forcing per mode; a callable receives ``alpha_j``.
    noise_spec : float, sequence, mapping or callable
        Noise amplitudes per mode.

    Returns
    -------
    GalerkinModel
        Modes are ordered by ``|k|^2``, then ``k``, cosine before sine.
    """
    if int(max_wavenumber) != max_wavenumber or max_wavenumber < 1:
        raise ValueError("max_wavenumber must be a positive integer")
    K = int(max_wavenumber)
    vecs = _torus_wavevectors(K)
    modes = []  # (wavevector, unit normal, {sign: complex coefficient}, label)
    s = math.sqrt(2.0) / 2.0
    for k in vecs:
        norm = math.hypot(*k)
        nvec = np.array([-k[1], k[0]], dtype=float) / norm
        modes.append((np.array(k), nvec, {1: complex(s, 0.0), -1: complex(s, 0.0)}, f"cos{k}"))
        modes.append((np.array(k), nvec, {1: complex(0.0, -s), -1: complex(0.0, s)}, f"sin{k}"))
    n = len(modes)
    alpha = np.array([float(m[0] @ m[0]) for m in modes])

    # <(e_i . grad) e_j, e_k> summed over matching Fourier triads
    A = np.zeros((n, n, n))
    for i, (p, ni, ci, _) in enumerate(modes):
        for j, (q, nj, cj, _) in enumerate(modes):
            for k, (r, nk, ck, _) in enumerate(modes):
                acc = 0j
                for sg, a in ci.items():
                    for tg, bcoef in cj.items():
                        for rg, ccoef in ck.items():
                            if np.any(sg * p + tg * q + rg * r):
                                continue
                            acc += a * bcoef * ccoef * 1j * tg * float(ni @ q) * float(nj @ nk)
                if acc != 0:
                    A[i, j, k] = acc.real
    # exact skew symmetry in (j, k) before the (i, j) symmetrization
    A = 0.5 * (A - A.transpose(0, 2, 1))
    A[np.abs(A) < 1e-14] = 0.0

    h = _resolve_amplitudes(forcing_spec, alpha, 0.0)
    b = _resolve_amplitudes(noise_spec, alpha, 1.0)
    if not allow_degenerate_noise and np.any(b <= 0):
        raise NoiseViolation("noise_spec must give b_j > 0 for every retained mode")
    labels = [m[3] for m in modes]
    return build_custom_model(alpha, A, h, b, index_map=labels, allow_degenerate_noise=allow_degenerate_noise)


# --------------------------------------------------------------------------
# persistence


def export_model(model: GalerkinModel) -> dict:
    """Structured document with the full model; floats round-trip exactly."""
    return {
        "n_modes": model.n_modes,
        "eigenvalues": [float(x) for x in model.eigenvalues],
        "noise_amps": [float(x) for x in model.noise_amps],
        "forcing": [float(x) for x in model.forcing],
        "tensor": [
            [int(i), int(j), int(k), float(v)] for (i, j, k), v in zip(model.tensor_idx, model.tensor_val)
        ],
        "index_map": list(model.index_map),
    }


def import_model(doc: Mapping[str, Any]) -> GalerkinModel:
    """Rebuild and re-validate a model from :func:`export_model` output."""
    for key in ("n_modes", "eigenvalues", "noise_amps", "forcing", "tensor"):
        if key not in doc:
            raise ModelError(f"model document lacks field {key!r}")
    b = np.asarray(doc["noise_amps"], dtype=float)
    model = build_custom_model(
        doc["eigenvalues"],
        np.asarray(doc["tensor"], dtype=float).reshape(-1, 4),
        doc["forcing"],
        b,
        index_map=doc.get("index_map"),
        allow_degenerate_noise=bool(np.any(b == 0)),
    )
    if model.n_modes != int(doc["n_modes"]):
        raise ModelError("n_modes does not match the eigenvalue list")
    return model


def save_model(model: GalerkinModel, path) -> None:
    with open(path, "w") as fh:
        json.dump(export_model(model), fh, indent=1)
        fh.write("\n")


def load_model(path) -> GalerkinModel:
    with open(path) as fh:
        return import_model(json.load(fh))


def model_from_config(cfg: Mapping[str, Any]) -> GalerkinModel:
    """Build a model from a small config mapping.

    Recognised forms: ``{"torus": K, "forcing": ..., "noise": ...}``,
    ``{"file": path}`` and ``{"eigenvalues": ..., "tensor": ..., ...}``.
    """
    if "file" in cfg:
        return load_model(cfg["file"])
    if "torus" in cfg:
        return build_torus_model(
            int(cfg["torus"]),
            cfg.get("forcing"),
            cfg.get("noise", 1.0),
            allow_degenerate_noise=bool(cfg.get("allow_degenerate_noise", False)),
        )
    if "eigenvalues" in cfg:
        tensor = cfg.get("tensor")
        n = len(cfg["eigenvalues"])
        if tensor is None:
            tensor = np.zeros((n, n, n))
        return build_custom_model(
            cfg["eigenvalues"],
            tensor,
            cfg.get("forcing"),
            cfg.get("noise_amps"),
            allow_degenerate_noise=bool(cfg.get("allow_degenerate_noise", False)),
        )
    raise ModelError("model config needs one of 'torus', 'file' or 'eigenvalues'")


def linear_model(eigenvalues: Sequence[float], noise_amps: Sequence[float] | float = 1.0,
                 forcing: Sequence[float] | None = None, **kw) -> GalerkinModel:
    """Zero-tensor (Ornstein-Uhlenbeck) model."""
    alpha = np.asarray(eigenvalues, dtype=float)
    n = alpha.size
    b = np.full(n, float(noise_amps)) if np.ndim(noise_amps) == 0 else noise_amps
    return build_custom_model(alpha, np.zeros((0, 4)), forcing, b, **kw)


