"""Exponential Euler integration of the spectral SDE.

The scheme treats the Stokes and noise parts exactly (the stochastic
convolution of each mode is Gaussian with known variance) and the
nonlinearity and forcing explicitly:

    u'_j = e^{-a_j dt} u_j + dt e^{-a_j dt} (h_j - B(u,u)_j) + b_j s_j(dt) xi_j

with ``s_j(dt)^2 = (1 - e^{-2 a_j dt}) / (2 a_j)``.

Every trajectory draws its increments from its own counter-based stream,
seeded with ``split_seed(master, i)``, so ensembles do not depend on how
they are batched or ordered.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterator, Sequence

import numpy as np

from .galerkin import GalerkinModel, apply_nonlinearity, norm1_sq, norm_sq

MASK64 = (1 << 64) - 1
DEFAULT_BATCH = 512


class NonFiniteState(FloatingPointError):
    """A step produced a non-finite coefficient.

    Attributes
    ----------
    step : int
        Index of the first state that is not finite (``step >= 1``).
    """

    def __init__(self, step: int, message: str | None = None):
        self.step = int(step)
        super().__init__(message or f"non-finite state at step {self.step}")


class GridError(ValueError):
    """A time is not a multiple of the step or lies past the horizon."""


def split_seed(master: int, index: int) -> int:
    """Counter-based child seed ``hash64(master, index)``."""
    payload = (int(master) & MASK64).to_bytes(8, "little") + (int(index) & MASK64).to_bytes(8, "little")
    return int.from_bytes(hashlib.blake2b(payload, digest_size=8, person=b"nsldp-split").digest(), "little")


def make_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=int(seed) & MASK64))


def grid_index(t: float, dt: float, *, name: str = "t") -> int:
    """Return ``m`` with ``t = m dt`` or raise :class:`GridError`."""
    m = round(t / dt)
    if m < 0 or not math.isclose(m * dt, t, rel_tol=1e-9, abs_tol=1e-12):
        raise GridError(f"{name}={t!r} is not on the grid of step {dt!r}")
    return int(m)


@dataclass(frozen=True)
class _StepCoefficients:
    dt: float
    decay: np.ndarray
    ddecay: np.ndarray
    noise: np.ndarray

    @classmethod
    def of(cls, model: GalerkinModel, dt: float) -> "_StepCoefficients":
        if not dt > 0:
            raise ValueError("dt must be positive")
        a = model.eigenvalues
        decay = np.exp(-a * dt)
        sigma = np.sqrt(-np.expm1(-2.0 * a * dt) / (2.0 * a))
        return cls(float(dt), decay, dt * decay, model.noise_amps * sigma)


def _advance(model: GalerkinModel, c: _StepCoefficients, u: np.ndarray, xi: np.ndarray) -> np.ndarray:
    drift = model.forcing - apply_nonlinearity(model, u)
    return c.decay * u + c.ddecay * drift + c.noise * xi


def drift_map(model: GalerkinModel, u: np.ndarray, dt: float) -> np.ndarray:
    """Deterministic part of one step (the conditional mean of ``u'``)."""
    c = _StepCoefficients.of(model, dt)
    return c.decay * u + c.ddecay * (model.forcing - apply_nonlinearity(model, u))


def step_noise_std(model: GalerkinModel, dt: float) -> np.ndarray:
    """Per-mode standard deviation ``b_j s_j(dt)`` of the noise part."""
    return _StepCoefficients.of(model, dt).noise.copy()


def step(model: GalerkinModel, u: np.ndarray, dt: float, gaussian_increments: np.ndarray) -> np.ndarray:
    """Advance a state (or a batch of states) by one step.

    Parameters
    ----------
    model : GalerkinModel
    u : ndarray, shape (..., n)
    dt : float
    gaussian_increments : ndarray, shape (..., n)
        Independent standard normal draws ``xi``.

    Raises
    ------
    NonFiniteState
        If the result has a non-finite coefficient.
    """
    u = np.asarray(u, dtype=float)
    xi = np.asarray(gaussian_increments, dtype=float)
    if u.shape[-1] != model.n_modes or xi.shape != u.shape:
        raise ValueError("state and increments must both have the model dimension")
    with np.errstate(over="ignore", invalid="ignore"):
        out = _advance(model, _StepCoefficients.of(model, dt), u, xi)
    if not np.all(np.isfinite(out)):
        raise NonFiniteState(1)
    return out


@dataclass(frozen=True, eq=False)
class Trajectory:
    """States on the grid ``0, dt, 2 dt, ...``; time of row ``i`` is ``i * dt``."""

    dt: float
    states: np.ndarray
    seed: int
    model_id: str

    @property
    def n_steps(self) -> int:
        return self.states.shape[0] - 1

    @property
    def horizon(self) -> float:
        return self.n_steps * self.dt

    def time(self, i: int) -> float:
        return i * self.dt

    def index(self, t: float) -> int:
        m = grid_index(t, self.dt)
        if m > self.n_steps:
            raise GridError(f"t={t!r} is past the horizon {self.horizon!r}")
        return m

    def at(self, t: float) -> np.ndarray:
        return self.states[self.index(t)]


@dataclass(eq=False)
class TrajectoryEnsemble:
    """Stored ensemble; rows of ``states`` are the surviving trajectories.

    ``indices[r]`` is the ensemble index of row ``r`` and ``seeds[r]`` its
    stream seed. Blown-up members appear only in ``failures`` (index to
    failing step), never in ``states``.
    """

    model: GalerkinModel
    dt: float
    states: np.ndarray
    indices: np.ndarray
    seeds: np.ndarray
    master_seed: int
    count: int
    failures: dict = field(default_factory=dict)

    @property
    def n_steps(self) -> int:
        return self.states.shape[1] - 1

    @property
    def horizon(self) -> float:
        return self.n_steps * self.dt

    @property
    def model_id(self) -> str:
        return self.model.model_id

    @property
    def blowup_fraction(self) -> float:
        return len(self.failures) / self.count

    @property
    def trajectories(self) -> list[Trajectory]:
        return [Trajectory(self.dt, self.states[r], int(self.seeds[r]), self.model_id) for r in range(len(self.indices))]

    def __len__(self) -> int:
        return len(self.indices)

    def index(self, t: float) -> int:
        m = grid_index(t, self.dt)
        if m > self.n_steps:
            raise GridError(f"t={t!r} is past the horizon {self.horizon!r}")
        return m


InitialSampler = Callable[[np.random.Generator], np.ndarray]


def _initial_state(model: GalerkinModel, sampler, seed: int) -> np.ndarray:
    if callable(sampler):
        u0 = np.asarray(sampler(make_rng(split_seed(seed, 1))), dtype=float)
    else:
        u0 = np.asarray(sampler, dtype=float)
    if u0.shape != (model.n_modes,):
        raise ValueError(f"initial state must have shape ({model.n_modes},)")
    return u0


def _integrate_batch(
    model: GalerkinModel, u0: np.ndarray, seeds: Sequence[int], m: int, dt: float
) -> tuple[np.ndarray, np.ndarray]:
    """Integrate a batch; returns states and the first failing step per row (0 if none)."""
    k, n = u0.shape
    xi = np.empty((k, m, n))
    for r, s in enumerate(seeds):
        xi[r] = make_rng(s).standard_normal((m, n))
    c = _StepCoefficients.of(model, dt)
    states = np.empty((k, m + 1, n))
    states[:, 0] = u0
    failed = np.zeros(k, dtype=np.int64)
    u = u0.copy()
    with np.errstate(over="ignore", invalid="ignore"):
        for i in range(m):
            u = _advance(model, c, u, xi[:, i])
            bad = ~np.all(np.isfinite(u), axis=1)
            if bad.any():
                fresh = bad & (failed == 0)
                failed[fresh] = i + 1
                u[bad] = 0.0
            states[:, i + 1] = u
    return states, failed


def simulate(model: GalerkinModel, u0, horizon: float, dt: float, seed: int) -> Trajectory:
    """Integrate one trajectory on ``[0, horizon]``.

    Raises
    ------
    NonFiniteState
        Carrying the index of the first non-finite state.
    """
    m = grid_index(horizon, dt, name="horizon")
    u0 = np.asarray(u0, dtype=float)
    if u0.shape != (model.n_modes,):
        raise ValueError(f"initial state must have shape ({model.n_modes},)")
    states, failed = _integrate_batch(model, u0[None, :], [int(seed)], m, dt)
    if failed[0]:
        raise NonFiniteState(int(failed[0]))
    return Trajectory(float(dt), states[0], int(seed), model.model_id)


def iter_ensemble(
    model: GalerkinModel,
    initial_sampler,
    count: int,
    horizon: float,
    dt: float,
    master_seed: int,
    *,
    batch_size: int = DEFAULT_BATCH,
    order: Sequence[int] | None = None,
) -> Iterator[TrajectoryEnsemble]:
    """Yield the ensemble in consecutive chunks (useful when it does not fit in memory)."""
    if count < 1:
        raise ValueError("count must be >= 1")
    m = grid_index(horizon, dt, name="horizon")
    members = list(range(count)) if order is None else [int(i) for i in order]
    for lo in range(0, len(members), batch_size):
        chunk = members[lo : lo + batch_size]
        seeds = [split_seed(master_seed, i) for i in chunk]
        u0 = np.stack([_initial_state(model, initial_sampler, s) for s in seeds])
        states, failed = _integrate_batch(model, u0, seeds, m, dt)
        ok = failed == 0
        yield TrajectoryEnsemble(
            model,
            float(dt),
            states[ok],
            np.asarray(chunk, dtype=np.int64)[ok],
            np.asarray(seeds, dtype=np.uint64)[ok],
            int(master_seed),
            len(chunk),
            {int(i): int(f) for i, f in zip(chunk, failed) if f},
        )


def concat_ensembles(parts: Sequence[TrajectoryEnsemble]) -> TrajectoryEnsemble:
    """Merge chunks and sort rows by ensemble index."""
    first = parts[0]
    states = np.concatenate([p.states for p in parts])
    indices = np.concatenate([p.indices for p in parts])
    seeds = np.concatenate([p.seeds for p in parts])
    order = np.argsort(indices, kind="stable")
    failures: dict = {}
    for p in parts:
        failures.update(p.failures)
    return TrajectoryEnsemble(
        first.model,
        first.dt,
        np.ascontiguousarray(states[order]),
        indices[order],
        seeds[order],
        first.master_seed,
        sum(p.count for p in parts),
        dict(sorted(failures.items())),
    )


def ensemble(
    model: GalerkinModel,
    initial_sampler,
    count: int,
    horizon: float,
    dt: float,
    master_seed: int,
    *,
    batch_size: int = DEFAULT_BATCH,
    order: Sequence[int] | None = None,
) -> TrajectoryEnsemble:
    """Generate ``count`` trajectories; member ``i`` uses ``split_seed(master_seed, i)``.

    Parameters
    ----------
    initial_sampler : array or callable
        A fixed initial state, or ``sampler(rng) -> u0`` drawing from the
        initial law with a stream derived from the member's seed.
    order : sequence of int, optional
        Execution order of the members (a permutation of ``range(count)``);
        the stored result does not depend on it.
    """
    parts = list(iter_ensemble(model, initial_sampler, count, horizon, dt, master_seed,
                               batch_size=batch_size, order=order))
    return concat_ensembles(parts)


# --------------------------------------------------------------------------
# energy identity


def trapezoid(values: np.ndarray, dt: float, axis: int = -1) -> np.ndarray:
    """Composite trapezoid rule on a uniform grid."""
    v = np.moveaxis(np.asarray(values, dtype=float), axis, -1)
    if v.shape[-1] < 2:
        return np.zeros(v.shape[:-1])
    return dt * (0.5 * v[..., 0] + np.sum(v[..., 1:-1], axis=-1) + 0.5 * v[..., -1])


@dataclass(frozen=True)
class EnergyTerms:
    """Per-path pieces of the energy identity at time ``t``."""

    final_sq: np.ndarray
    dissipation: np.ndarray
    work: np.ndarray
    initial_sq: np.ndarray
    martingale: np.ndarray
    noise_input: float

    def lhs(self, corrected: bool = False) -> np.ndarray:
        top = self.final_sq - self.martingale if corrected else self.final_sq
        return top + 2.0 * self.dissipation

    def rhs(self) -> np.ndarray:
        return 2.0 * self.work + self.initial_sq + self.noise_input


def energy_terms(ens: TrajectoryEnsemble, t: float) -> EnergyTerms:
    """Evaluate the energy identity pieces path by path.

    ``martingale`` is the discrete martingale part of ``||u_t||^2``: the sum
    over steps of ``||u_{n+1}||^2 - E[||u_{n+1}||^2 | u_n]``, which the scheme
    gives in closed form. Subtracting it leaves the deterministic
    (discretization) part of the residual with far lower variance.
    """
    m = ens.index(t)
    model = ens.model
    X = ens.states[:, : m + 1]
    noise_in = float(model.B0 * (m * ens.dt))
    if m == 0:
        z = np.zeros(X.shape[0])
        sq = norm_sq(X[:, 0])
        return EnergyTerms(sq, z, z.copy(), sq.copy(), z.copy(), noise_in)
    sq = norm_sq(X)
    diss = trapezoid(norm1_sq(model, X), ens.dt)
    work = trapezoid(X @ model.forcing, ens.dt)
    var = float(np.sum(step_noise_std(model, ens.dt) ** 2))
    incr = np.empty((X.shape[0], m))
    for lo in range(0, m, 256):
        hi = min(m, lo + 256)
        incr[:, lo:hi] = sq[:, lo + 1 : hi + 1] - norm_sq(drift_map(model, X[:, lo:hi], ens.dt)) - var
    mart = np.sum(incr, axis=1)
    return EnergyTerms(sq[:, -1], diss, work, sq[:, 0], mart, noise_in)


def _combine_terms(parts: Sequence[EnergyTerms]) -> EnergyTerms:
    cat = lambda name: np.concatenate([getattr(p, name) for p in parts])  # noqa: E731
    return EnergyTerms(cat("final_sq"), cat("dissipation"), cat("work"), cat("initial_sq"),
                       cat("martingale"), parts[0].noise_input)


def residual_from_terms(terms: EnergyTerms, corrected: bool = False) -> float:
    lhs = float(np.mean(terms.lhs(corrected)))
    rhs = float(np.mean(terms.rhs()))
    return (lhs - rhs) / max(abs(rhs), 1.0)


def energy_identity_residual(ens: TrajectoryEnsemble, t: float, *, corrected: bool = False) -> float:
    """Relative residual of the energy identity at time ``t``.

    Returns ``(LHS - RHS) / max(|RHS|, 1)`` where, averaged over paths,
    ``LHS = ||u_t||^2 + 2 int ||u||_1^2`` and
    ``RHS = 2 int <u, h> + ||u_0||^2 + B_0 t``, with trapezoid integrals.

    With ``corrected=True`` the discrete martingale is removed path by path
    (an unbiased control variate), isolating the deterministic component.
    """
    return residual_from_terms(energy_terms(ens, t), corrected)


def energy_identity_streamed(
    model: GalerkinModel,
    initial_sampler,
    count: int,
    t: float,
    dt: float,
    master_seed: int,
    *,
    batch_size: int = DEFAULT_BATCH,
) -> tuple[float, float, EnergyTerms]:
    """Energy residual (plain, corrected) for an ensemble too large to store.

    Chunks are reduced to per-path terms which are concatenated in index
    order, so the result equals :func:`energy_identity_residual` on the
    full stored ensemble.
    """
    parts = [energy_terms(chunk, t) for chunk in
             iter_ensemble(model, initial_sampler, count, t, dt, master_seed, batch_size=batch_size)]
    terms = _combine_terms(parts)
    return residual_from_terms(terms, False), residual_from_terms(terms, True), terms


# --------------------------------------------------------------------------
# persistence


def save_trajectory(traj: Trajectory, path) -> None:
    """Write a header line followed by the row-major little-endian float64 state matrix."""
    header = {"model_id": traj.model_id, "dt": repr(float(traj.dt)), "n_steps": traj.n_steps,
              "n_modes": int(traj.states.shape[1]), "seed": int(traj.seed), "dtype": "<f8"}
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        fh.write(np.ascontiguousarray(traj.states, dtype="<f8").tobytes())


def load_trajectory(path) -> Trajectory:
    with open(path, "rb") as fh:
        header = json.loads(fh.readline())
        data = np.frombuffer(fh.read(), dtype="<f8")
    states = data.reshape(header["n_steps"] + 1, header["n_modes"]).astype(float)
    return Trajectory(float(header["dt"]), states, int(header["seed"]), header["model_id"])


def save_ensemble(ens: TrajectoryEnsemble, directory) -> list[Path]:
    """Persist each member as its own file plus an ``index.json`` listing them."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    written = []
    members = []
    for r, idx in enumerate(ens.indices):
        name = f"traj_{int(idx):06d}.bin"
        save_trajectory(Trajectory(ens.dt, ens.states[r], int(ens.seeds[r]), ens.model_id), directory / name)
        written.append(directory / name)
        members.append({"index": int(idx), "seed": int(ens.seeds[r]), "file": name})
    index = {"model_id": ens.model_id, "dt": repr(float(ens.dt)), "n_steps": ens.n_steps,
             "master_seed": int(ens.master_seed), "count": ens.count, "members": members,
             "failures": [{"index": k, "step": v} for k, v in sorted(ens.failures.items())]}
    with open(directory / "index.json", "w") as fh:
        json.dump(index, fh, indent=1, sort_keys=True)
        fh.write("\n")
    written.append(directory / "index.json")
    return written


def load_ensemble(directory, model: GalerkinModel) -> TrajectoryEnsemble:
    directory = Path(directory)
    with open(directory / "index.json") as fh:
        index = json.load(fh)
    if index["model_id"] != model.model_id:
        raise ValueError("ensemble was generated with a different model")
    trajs = [load_trajectory(directory / m["file"]) for m in index["members"]]
    states = np.stack([tr.states for tr in trajs]) if trajs else np.zeros((0, index["n_steps"] + 1, model.n_modes))
    return TrajectoryEnsemble(
        model,
        float(index["dt"]),
        states,
        np.asarray([m["index"] for m in index["members"]], dtype=np.int64),
        np.asarray([m["seed"] for m in index["members"]], dtype=np.uint64),
        int(index["master_seed"]),
        int(index["count"]),
        {f["index"]: f["step"] for f in index["failures"]},
    )
