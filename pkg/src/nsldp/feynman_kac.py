"""Feynman-Kac functionals, Monte Carlo pressure and the Duhamel identity.

Potentials are bounded functions of the first ``N`` spectral coefficients,

    F(x) = c0 + sum_i c_i tanh(<x, phi_i> + d_i),

evaluated either on single states or on trajectory windows. Window
potentials act on the backward windows ``u_[s-T, s]`` (times before 0 are
filled with ``u_0``), i.e. on the Markov process of path segments.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np
from scipy import linalg
from scipy.special import logsumexp

from .chain_oracle import FiniteChain, stationary
from .galerkin import GalerkinModel
from .sde import (TrajectoryEnsemble, Trajectory, grid_index, iter_ensemble, make_rng, split_seed,
                  trapezoid)

MAX_BLOWUP = 0.01


class BlowupError(RuntimeError):
    """Too many ensemble members became non-finite."""


@dataclass(frozen=True, eq=False)
class Potential:
    """Saturated affine potential of the first ``N`` coefficients.

    Attributes
    ----------
    N : int
        Projection level.
    c0 : float
    coeffs : ndarray, shape (k,)
    features : ndarray, shape (k, N) or (k, W + 1, N)
        Feature vectors; window potentials carry one row per grid point.
    offsets : ndarray, shape (k,)
    bound : float
        Sup-norm bound, at least ``|c0| + sum |c_i|``.
    T, dt : float
        Window length (0 for state potentials) and its grid step.
    """

    N: int
    c0: float
    coeffs: np.ndarray
    features: np.ndarray
    offsets: np.ndarray
    bound: float
    T: float = 0.0
    dt: float = 0.0

    def __post_init__(self):
        k = len(self.coeffs)
        if self.features.shape[0] != k or len(self.offsets) != k:
            raise ValueError("coeffs, features and offsets must have matching lengths")
        if self.features.shape[-1] != self.N:
            raise ValueError("features must act on the first N coefficients")
        if abs(self.c0) + float(np.sum(np.abs(self.coeffs))) > self.bound * (1 + 1e-12):
            raise ValueError("|c0| + sum|c_i| exceeds the declared bound")

    @property
    def is_window(self) -> bool:
        return self.T > 0

    @property
    def window_steps(self) -> int:
        return self.features.shape[1] - 1 if self.is_window else 0

    def feature_values(self, x: np.ndarray) -> np.ndarray:
        """``<x, phi_i>`` for states ``(..., n)`` or windows ``(..., W+1, n)``."""
        x = np.asarray(x, dtype=float)
        if self.is_window:
            xs = x[..., : self.N]
            return np.einsum("...rn,krn->...k", xs, self.features)
        return x[..., : self.N] @ self.features.T

    def nonconstant(self, x: np.ndarray) -> np.ndarray:
        return np.tanh(self.feature_values(x) + self.offsets) @ self.coeffs

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return self.c0 + self.nonconstant(x)

    def shifted(self, c: float) -> "Potential":
        """``V + c``."""
        return replace(self, c0=self.c0 + c, bound=self.bound + abs(c))


def state_potential(coeffs, features, offsets=None, c0: float = 0.0, *, bound: float | None = None) -> Potential:
    """State potential; ``N`` is read off the feature vectors."""
    coeffs = np.atleast_1d(np.asarray(coeffs, dtype=float))
    features = np.atleast_2d(np.asarray(features, dtype=float))
    offsets = np.zeros(len(coeffs)) if offsets is None else np.atleast_1d(np.asarray(offsets, dtype=float))
    b = abs(c0) + float(np.sum(np.abs(coeffs))) if bound is None else float(bound)
    return Potential(features.shape[1], float(c0), coeffs, features, offsets, b)


def constant_potential(c: float, N: int = 1) -> Potential:
    return Potential(N, float(c), np.zeros(0), np.zeros((0, N)), np.zeros(0), abs(c))


def window_potential(F_params: Mapping, N: int, T: float, dt: float | None = None) -> Potential:
    """Potential on length-``T`` windows.

    ``F_params`` holds ``c0``, ``coeffs``, ``offsets`` and ``features``. A
    feature of shape ``(N,)`` is read as a time-averaged feature, i.e.
    ``phi / (W + 1)`` on every grid point of the window; shape ``(W+1, N)``
    gives per-point weights. ``T = 0`` returns a state potential.
    """
    coeffs = np.atleast_1d(np.asarray(F_params.get("coeffs", []), dtype=float))
    offsets = np.asarray(F_params.get("offsets", np.zeros(len(coeffs))), dtype=float)
    c0 = float(F_params.get("c0", 0.0))
    feats = np.asarray(F_params.get("features", np.zeros((len(coeffs), N))), dtype=float)
    bound = F_params.get("bound")
    bound = abs(c0) + float(np.sum(np.abs(coeffs))) if bound is None else float(bound)
    if T == 0:
        return Potential(N, c0, coeffs, feats.reshape(len(coeffs), N), offsets, bound)
    if dt is None:
        raise ValueError("window potentials need the grid step dt")
    W = grid_index(T, dt, name="T")
    if feats.ndim == 2:
        feats = np.repeat(feats[:, None, :] / (W + 1), W + 1, axis=1)
    if feats.shape != (len(coeffs), W + 1, N):
        raise ValueError(f"window features must have shape {(len(coeffs), W + 1, N)}")
    return Potential(N, c0, coeffs, feats, offsets, bound, float(W * dt), float(dt))


def random_potential(N: int, k: int, bound: float, rng: np.random.Generator, c0: float = 0.0) -> Potential:
    raw = rng.standard_normal(k)
    coeffs = raw / np.sum(np.abs(raw)) * (bound - abs(c0))
    return state_potential(coeffs, rng.standard_normal((k, N)), rng.standard_normal(k), c0, bound=bound)


def potential_to_doc(V: Potential) -> dict:
    return {"N": V.N, "T": V.T, "dt": V.dt, "bound": V.bound, "c0": V.c0,
            "coeffs": V.coeffs.tolist(), "offsets": V.offsets.tolist(), "features": V.features.tolist()}


def potential_from_doc(doc: Mapping) -> Potential:
    feats = np.asarray(doc["features"], dtype=float)
    N = int(doc["N"])
    coeffs = np.asarray(doc["coeffs"], dtype=float)
    if feats.size == 0:
        feats = feats.reshape((len(coeffs), N))
    return Potential(N, float(doc["c0"]), coeffs, feats,
                     np.asarray(doc["offsets"], dtype=float), float(doc["bound"]),
                     float(doc.get("T", 0.0)), float(doc.get("dt", 0.0)))


def save_potential(V: Potential, path) -> None:
    with open(path, "w") as fh:
        json.dump(potential_to_doc(V), fh, sort_keys=True)
        fh.write("\n")


# --------------------------------------------------------------------------
# path functionals


def path_values(V, states: np.ndarray, dt: float, *, nonconstant: bool = False) -> np.ndarray:
    """``V`` along paths ``states`` of shape ``(..., m+1, n)``; returns ``(..., m+1)``."""
    if isinstance(V, Potential):
        ev = V.nonconstant if nonconstant else V
        if not V.is_window:
            return ev(states)
        if not math.isclose(V.dt, dt, rel_tol=1e-9):
            raise ValueError("window potential and trajectory use different grids")
        W = V.window_steps
        m1 = states.shape[-2]
        xs = states[..., : V.N]
        pad = np.concatenate([np.repeat(xs[..., :1, :], W, axis=-2), xs], axis=-2)
        feats = np.zeros(states.shape[:-2] + (m1, len(V.coeffs)))
        for r in range(W + 1):
            feats += pad[..., r : r + m1, :] @ V.features[:, r, :].T
        vals = np.tanh(feats + V.offsets) @ V.coeffs
        return vals if nonconstant else V.c0 + vals
    return np.asarray(V(states), dtype=float)


def _f_values(f, x: np.ndarray) -> np.ndarray:
    if f is None:
        return np.ones(x.shape[:-1])
    if np.isscalar(f):
        return np.full(x.shape[:-1], float(f))
    return np.asarray(f(x), dtype=float)


def fk_functional(traj: Trajectory, V, f, t: float) -> float:
    """``f(u_t) exp(int_0^t V(u_s) ds)`` with the trapezoid rule on the grid."""
    m = traj.index(t)
    vals = path_values(V, traj.states[: m + 1], traj.dt)
    return float(_f_values(f, traj.states[m]) * math.exp(float(trapezoid(vals, traj.dt))))


def log_weights(ens: TrajectoryEnsemble, V, t_indices: Sequence[int], *, nonconstant: bool = False) -> np.ndarray:
    """``int_0^t V`` per member (rows) and per grid index (columns)."""
    top = max(t_indices)
    vals = path_values(V, ens.states[:, : top + 1], ens.dt, nonconstant=nonconstant)
    out = np.empty((len(ens), len(t_indices)))
    for c, m in enumerate(t_indices):
        out[:, c] = trapezoid(vals[:, : m + 1], ens.dt) if m > 0 else 0.0
    return out


@dataclass(frozen=True)
class FKResult:
    mean: float
    std_error: float
    blowup_fraction: float
    count: int


def _check_blowups(failures: int, count: int) -> float:
    frac = failures / count
    if frac > MAX_BLOWUP:
        raise BlowupError(f"{failures} of {count} paths blew up ({100 * frac:.2f}% > 1%)")
    return frac


def fk_expectation(model: GalerkinModel, V, f, u0, t: float, count: int, seed: int, *,
                   dt: float = 0.01, batch_size: int = 512) -> FKResult:
    """Monte Carlo estimate of ``E_u0[f(u_t) exp(int_0^t V)]`` with its standard error."""
    if count < 2:
        raise ValueError("count must be >= 2")
    m = grid_index(t, dt)
    samples, failures = [], 0
    for chunk in iter_ensemble(model, u0, count, t, dt, seed, batch_size=batch_size):
        failures += len(chunk.failures)
        lw = log_weights(chunk, V, [m])[:, 0]
        samples.append(_f_values(f, chunk.states[:, m]) * np.exp(lw))
    frac = _check_blowups(failures, count)
    x = np.concatenate(samples)
    return FKResult(float(np.mean(x)), float(np.std(x, ddof=1) / math.sqrt(len(x))), frac, count)


# --------------------------------------------------------------------------
# pressure


@dataclass(frozen=True)
class PressureEstimate:
    """Least-squares slope of ``log E exp(int V)`` against ``t``.

    ``per_t_logmeans`` holds ``(t, (1/t) log mean)`` pairs.
    """

    value: float
    std_error: float
    t_grid: tuple
    per_t_logmeans: tuple
    log_means: tuple
    mc_error: float
    fit_error: float
    jackknife_bias: float
    count: int
    blowup_fraction: float = 0.0

    def to_tsv(self) -> str:
        lines = [f"# value={self.value!r} std_error={self.std_error!r} mc_error={self.mc_error!r} "
                 f"fit_error={self.fit_error!r} jackknife_bias={self.jackknife_bias!r} count={self.count}",
                 "t\tlog_mean\tper_t_rate"]
        for t, L in zip(self.t_grid, self.log_means):
            lines.append(f"{t!r}\t{L!r}\t{L / t!r}")
        return "\n".join(lines) + "\n"


def _slope(t: np.ndarray, y: np.ndarray) -> float:
    tc = t - t.mean()
    return float(np.sum(tc * (y - y.mean())) / np.sum(tc * tc))


def pressure_from_log_weights(lw: np.ndarray, t_list: Sequence[float], c0: float = 0.0,
                              groups: int = 20, blowup_fraction: float = 0.0) -> PressureEstimate:
    """Slope estimate from per-member exponents ``lw`` (rows: members, columns: times).

    ``c0`` is a constant part of the potential that was left out of
    ``lw``; it is added after the fit so that shifting ``V`` by a constant
    moves the estimate by exactly that constant.
    """
    t = np.asarray(t_list, dtype=float)
    M = lw.shape[0]
    logmean = lambda a: logsumexp(a, axis=0) - math.log(a.shape[0])  # noqa: E731
    L = logmean(lw)
    s = _slope(t, L)
    resid = L - (L.mean() + s * (t - t.mean()))
    dof = max(len(t) - 2, 1)
    fit_se = math.sqrt(float(np.sum(resid**2)) / dof / float(np.sum((t - t.mean()) ** 2)))
    g = min(groups, M)
    blocks = np.array_split(np.arange(M), g)
    loo = []
    for b in blocks:
        keep = np.ones(M, dtype=bool)
        keep[b] = False
        loo.append(_slope(t, logmean(lw[keep])))
    loo = np.asarray(loo)
    jk_se = math.sqrt((g - 1) / g * float(np.sum((loo - loo.mean()) ** 2)))
    jk_bias = (g - 1) * (float(loo.mean()) - s)
    Lfull = L + c0 * t
    per_t = tuple((float(ti), float(Li / ti)) for ti, Li in zip(t, Lfull))
    return PressureEstimate(s + c0, math.sqrt(jk_se**2 + fit_se**2), tuple(float(x) for x in t), per_t,
                            tuple(float(x) for x in Lfull), jk_se, fit_se, jk_bias, M, blowup_fraction)


def ctmc_occupation_integrals(chain: FiniteChain, V, t_list: Sequence[float], count: int, seed: int,
                              init=None) -> np.ndarray:
    """Exact ``int_0^t V(X_s) ds`` along simulated paths of a continuous chain.

    Path ``i`` uses the stream ``split_seed(seed, i)``: one uniform for the
    initial state, then an exponential holding time and a uniform jump
    choice per transition.
    """
    if chain.clocking != "continuous":
        raise ValueError("expected a continuous-time chain")
    G = chain.matrix
    n = chain.n_states
    V = np.asarray(V, dtype=float)
    rates = -np.diag(G)
    jump = np.where(np.eye(n, dtype=bool), 0.0, G) / np.where(rates > 0, rates, 1.0)[:, None]
    cjump = np.cumsum(jump, axis=1)
    init = stationary(chain) if init is None else np.asarray(init, dtype=float)
    cinit = np.cumsum(init)
    cinit[-1] = 1.0
    ts = np.asarray(t_list, dtype=float)
    out = np.zeros((count, len(ts)))
    tmax = float(ts.max())
    for i in range(count):
        rng = make_rng(split_seed(seed, i))
        x = int(np.searchsorted(cinit, rng.random(), side="right"))
        now = 0.0
        acc = np.zeros(len(ts))
        while now < tmax:
            hold = rng.exponential(1.0 / rates[x]) if rates[x] > 0 else math.inf
            end = now + hold
            acc += V[x] * np.clip(np.minimum(end, ts) - now, 0.0, None)
            now = end
            if now < tmax:
                x = min(int(np.searchsorted(cjump[x], rng.random(), side="right")), n - 1)
        out[i] = acc
    return out


def dtmc_occupation_sums(chain: FiniteChain, V, t_list: Sequence[int], count: int, seed: int,
                         init=None) -> np.ndarray:
    """``sum_{k<t} V(X_k)`` along simulated paths of a discrete chain."""
    from .chain_oracle import sample_occupation_counts

    counts = sample_occupation_counts(chain, [int(t) for t in t_list], count, seed, init)
    V = np.asarray(V, dtype=float)
    return np.stack([counts[int(t)] @ V for t in t_list], axis=1)


def pressure_mc(provider, V, t_list: Sequence[float], count: int, seed: int, init_sampler=None, *,
                dt: float = 0.01, batch_size: int = 512) -> PressureEstimate:
    """Monte Carlo pressure: slope of ``log E exp(int_0^t V)`` over ``t_list``.

    Parameters
    ----------
    provider : GalerkinModel or FiniteChain
        For a model, ``init_sampler`` is a fixed state or ``sampler(rng)``;
        for a chain it is an initial law (defaults to the stationary one).
    V : Potential, callable, or vector (chains)
    """
    t = [float(x) for x in t_list]
    if len(t) < 3 or any(b <= a for a, b in zip(t, t[1:])):
        raise ValueError("t_list needs at least three increasing times")
    if isinstance(provider, FiniteChain):
        Vv = np.asarray(V, dtype=float)
        if provider.clocking == "continuous":
            lw = ctmc_occupation_integrals(provider, Vv, t, count, seed, init_sampler)
        else:
            lw = dtmc_occupation_sums(provider, Vv, t, count, seed, init_sampler)
        return pressure_from_log_weights(lw, t)
    model = provider
    idx = [grid_index(x, dt) for x in t]
    c0 = V.c0 if isinstance(V, Potential) else 0.0
    parts, failures = [], 0
    for chunk in iter_ensemble(model, init_sampler, count, t[-1], dt, seed, batch_size=batch_size):
        failures += len(chunk.failures)
        parts.append(log_weights(chunk, V, idx, nonconstant=isinstance(V, Potential)))
    frac = _check_blowups(failures, count)
    return pressure_from_log_weights(np.concatenate(parts), t, c0, blowup_fraction=frac)


# --------------------------------------------------------------------------
# Duhamel identity


@dataclass(frozen=True)
class DuhamelReport:
    residual: float
    std_error: float
    nodes: int
    rule: str
    resolved: bool = True
    lhs: np.ndarray = field(default_factory=lambda: np.zeros(0))
    rhs: np.ndarray = field(default_factory=lambda: np.zeros(0))


def quadrature_nodes(t: float, nodes: int, rule: str) -> tuple[np.ndarray, np.ndarray]:
    """Nodes and weights on ``[0, t]``."""
    if rule == "trapezoid":
        s = np.linspace(0.0, t, nodes)
        w = np.full(nodes, t / (nodes - 1))
        w[0] = w[-1] = t / (2 * (nodes - 1))
        return s, w
    if rule == "gauss":
        x, w = np.polynomial.legendre.leggauss(nodes)
        return 0.5 * t * (x + 1.0), 0.5 * t * w
    raise ValueError(f"unknown quadrature rule {rule!r}")


def _chain_duhamel(chain: FiniteChain, V, f, t: float, nodes: int, rule: str) -> DuhamelReport:
    V = np.asarray(V, dtype=float)
    f = np.asarray(f, dtype=float)
    if chain.clocking == "discrete":
        # exact telescoping sum: (DP)^t - P^t = sum_s P^{t-1-s} (D - I) P (DP)^s
        k = int(round(t))
        P = chain.matrix
        DP = np.exp(V)[:, None] * P
        lhs = np.linalg.matrix_power(DP, k) @ f - np.linalg.matrix_power(P, k) @ f
        rhs = np.zeros_like(f)
        for s in range(k):
            inner = (np.exp(V) - 1.0) * (P @ (np.linalg.matrix_power(DP, s) @ f))
            rhs += np.linalg.matrix_power(P, k - 1 - s) @ inner
        return DuhamelReport(float(np.max(np.abs(lhs - rhs))), 0.0, k, "telescoping", True, lhs, rhs)
    G = chain.matrix
    GV = G + np.diag(V)
    lhs = linalg.expm(t * GV) @ f - linalg.expm(t * G) @ f
    s, w = quadrature_nodes(t, nodes, rule)
    rhs = np.zeros_like(f)
    for si, wi in zip(s, w):
        rhs += wi * (linalg.expm((t - si) * G) @ (V * (linalg.expm(si * GV) @ f)))
    return DuhamelReport(float(np.max(np.abs(lhs - rhs))), 0.0, nodes, rule, True, lhs, rhs)


@dataclass(frozen=True)
class MCBudget:
    """Nested Monte Carlo budget for the model version of the Duhamel check."""

    probes: tuple
    outer: int = 200
    inner: int = 100
    nodes: int = 5
    dt: float = 0.01
    seed: int = 0


def _model_duhamel(model: GalerkinModel, budget: MCBudget, V, f, t: float) -> DuhamelReport:
    m = grid_index(t, budget.dt)
    s_nodes, w = quadrature_nodes(t, budget.nodes, "trapezoid")
    worst, worst_se = 0.0, 0.0
    L, R = [], []
    for p, u in enumerate(budget.probes):
        u = np.asarray(u, dtype=float)
        base_seed = split_seed(budget.seed, p)
        ens = next(iter_ensemble(model, u, budget.outer, t, budget.dt, base_seed, batch_size=budget.outer))
        lw = log_weights(ens, V, [m])[:, 0]
        fv = _f_values(f, ens.states[:, m])
        lhs_samples = fv * np.expm1(lw)
        lhs = float(lhs_samples.mean())
        lhs_var = float(lhs_samples.var(ddof=1)) / len(lhs_samples)
        # g(s) = E_u[ V(u_{t-s}) (P^V_s f)(u_{t-s}) ], inner expectation by fresh paths
        g_vals, g_vars = [], []
        for k, s in enumerate(s_nodes):
            j = grid_index(t - s, budget.dt)
            starts = ens.states[:, j]
            inner_vals = np.empty(len(starts))
            for r, x in enumerate(starts):
                if s == 0:
                    inner_vals[r] = _f_values(f, x[None])[0]
                    continue
                sub = next(iter_ensemble(model, x, budget.inner, float(s), budget.dt,
                                         split_seed(base_seed, 1000 * (k + 1) + r), batch_size=budget.inner))
                ms = grid_index(s, budget.dt)
                inner_vals[r] = float(np.mean(_f_values(f, sub.states[:, ms]) * np.exp(log_weights(sub, V, [ms])[:, 0])))
            vals = np.asarray(V(starts), dtype=float) * inner_vals
            g_vals.append(float(vals.mean()))
            g_vars.append(float(vals.var(ddof=1)) / len(vals))
        rhs = float(np.dot(w, g_vals))
        se = math.sqrt(lhs_var + float(np.dot(w**2, g_vars)))
        L.append(lhs)
        R.append(rhs)
        if abs(lhs - rhs) >= worst:
            worst, worst_se = abs(lhs - rhs), se
    return DuhamelReport(worst, worst_se, budget.nodes, "trapezoid", worst <= 3.0 * worst_se + 1e-12,
                         np.asarray(L), np.asarray(R))


def duhamel_residual(semigroup_provider, V, f, t: float, *, nodes: int = 100, rule: str = "gauss") -> DuhamelReport:
    """``sup |P^V_t f - P_t f - int_0^t P_{t-s}(V P^V_s f) ds|`` over probe states.

    ``semigroup_provider`` is a :class:`FiniteChain` (exact matrix
    semigroups, every state a probe) or a pair ``(model, MCBudget)``. For the
    model the Monte Carlo uncertainty is reported and ``resolved`` tells
    whether the residual is within three standard errors of zero.
    """
    if isinstance(semigroup_provider, FiniteChain):
        return _chain_duhamel(semigroup_provider, V, f, t, nodes, rule)
    model, budget = semigroup_provider
    return _model_duhamel(model, budget, V, f, t)

