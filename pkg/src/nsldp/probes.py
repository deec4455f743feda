"""Numerical probes of the dynamics: coupling decay, hitting times, moments.

The coupling is synchronous: both components see the same Gaussian
increments, and the second one carries the penalty ``a P_N (v - u)`` plus
the low-mode correction ``P_N (B(u) - B(v))``. With ``w = v - u`` the pair
obeys

    dw/dt + L w + a P_N w + Q_N (B(v) - B(u)) = 0,

so the low modes of ``w`` decay at least like ``e^{-a t}``. This is a
surrogate for a maximal coupling, which needs transition densities.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.optimize import OptimizeWarning, curve_fit
from scipy.special import logsumexp

from .galerkin import GalerkinModel, apply_nonlinearity, norm1_sq, norm_dual_sq, norm_sq
from .sde import (NonFiniteState, _StepCoefficients, _advance, grid_index, iter_ensemble, make_rng, simulate,
                  split_seed)

TIMEOUT = math.inf
FOIAS_SLACK = 10.0


@dataclass(frozen=True)
class ProbeTable:
    """Delimiter-separated probe output with reproduction metadata and a summary."""

    columns: tuple
    rows: tuple
    metadata: dict
    summary: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return bool(self.summary.get("passed", True))

    def column(self, name: str) -> np.ndarray:
        i = self.columns.index(name)
        return np.array([r[i] for r in self.rows], dtype=float)

    def to_tsv(self) -> str:
        meta = " ".join(f"{k}={v!r}" for k, v in sorted(self.metadata.items()))
        lines = [f"# {meta}", "\t".join(self.columns)]
        lines += ["\t".join(repr(float(x)) for x in r) for r in self.rows]
        return "\n".join(lines) + "\n"

    def to_doc(self) -> dict:
        return {"columns": list(self.columns), "rows": [list(map(float, r)) for r in self.rows],
                "metadata": dict(self.metadata), "summary": dict(self.summary)}


@dataclass(frozen=True)
class WeightFunction:
    """``w_m(u) = |u|^{2m} + 1``; on windows the norm is the sup over the window."""

    m: int

    def __post_init__(self):
        if self.m < 1:
            raise ValueError("m must be a positive integer")

    def __call__(self, u: np.ndarray) -> np.ndarray:
        return norm_sq(np.asarray(u, dtype=float)) ** self.m + 1.0

    def window(self, x: np.ndarray) -> np.ndarray:
        """Window argument of shape ``(..., W+1, n)``."""
        return np.max(norm_sq(np.asarray(x, dtype=float)), axis=-1) ** self.m + 1.0


# --------------------------------------------------------------------------
# coupling


@dataclass(frozen=True)
class CoupledPair:
    u: np.ndarray
    u_prime: np.ndarray
    N: int
    a: float
    shared_seed: int = 0

    def __post_init__(self):
        if np.shape(self.u) != np.shape(self.u_prime):
            raise ValueError("both components must live on the same model")
        if self.a < 0 or self.N < 0:
            raise ValueError("N and a must be nonnegative")


def _w_decay(model: GalerkinModel, N: int, a: float, dt: float) -> np.ndarray:
    beta = model.eigenvalues.copy()
    beta[:N] += a
    return np.exp(-beta * dt)


def _coupled_advance(model, c, wdecay, N, u, v, xi, dt):
    w = v - u
    diff = apply_nonlinearity(model, v) - apply_nonlinearity(model, u)
    diff[..., :N] = 0.0
    u_new = _advance(model, c, u, xi)
    w_new = wdecay * (w - dt * diff)
    return u_new, u_new + w_new


def coupled_step(model: GalerkinModel, pair: CoupledPair, dt: float, noise: np.ndarray) -> CoupledPair:
    """One synchronous step; the first component moves exactly as :func:`sde.step`.

    The difference is advanced by ``w' = e^{-beta dt}(w - dt Q_N(B(v) - B(u)))``
    with ``beta_j = alpha_j + a 1{j < N}``, so ``v' = u'`` whenever ``v = u``.
    """
    c = _StepCoefficients.of(model, dt)
    with np.errstate(over="ignore", invalid="ignore"):
        u, v = _coupled_advance(model, c, _w_decay(model, pair.N, pair.a, dt), pair.N,
                                np.asarray(pair.u, dtype=float), np.asarray(pair.u_prime, dtype=float),
                                np.asarray(noise, dtype=float), dt)
    if not (np.all(np.isfinite(u)) and np.all(np.isfinite(v))):
        raise NonFiniteState(1)
    return CoupledPair(u, v, pair.N, pair.a, pair.shared_seed)


def coupled_trajectory(model: GalerkinModel, u0, u0_prime, N: int, a: float, horizon: float, dt: float,
                       seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Both component paths, each of shape ``(m+1, n)``; increments as in :func:`sde.simulate`."""
    m = grid_index(horizon, dt, name="horizon")
    xi = make_rng(seed).standard_normal((m, model.n_modes))
    c = _StepCoefficients.of(model, dt)
    wd = _w_decay(model, N, a, dt)
    U = np.empty((m + 1, model.n_modes))
    Vp = np.empty_like(U)
    U[0], Vp[0] = u0, u0_prime
    with np.errstate(over="ignore", invalid="ignore"):
        for i in range(m):
            U[i + 1], Vp[i + 1] = _coupled_advance(model, c, wd, N, U[i], Vp[i], xi[i], dt)
            if not (np.all(np.isfinite(U[i + 1])) and np.all(np.isfinite(Vp[i + 1]))):
                raise NonFiniteState(i + 1)
    return U, Vp


def foias_decay_check(model: GalerkinModel, u0, u0_prime, N: int, a: float, horizon: float, dt: float, *,
                      seed: int = 0, slack_const: float = FOIAS_SLACK) -> ProbeTable:
    """Check ``|P_N w(t)| <= e^{-a t} d (1 + C dt)`` at every grid time.

    The summary carries the worst ratio, the slack ``C dt`` and, on
    failure, the first violating time.
    """
    u0 = np.asarray(u0, dtype=float)
    u0_prime = np.asarray(u0_prime, dtype=float)
    d = float(np.sqrt(norm_sq(u0 - u0_prime)))
    if d > 1.0:
        raise ValueError("initial distance must be at most 1")
    U, Vp = coupled_trajectory(model, u0, u0_prime, N, a, horizon, dt, seed)
    times = dt * np.arange(len(U))
    low = np.sqrt(norm_sq((Vp - U)[:, :N]))
    bound = d * np.exp(-a * times)
    slack = slack_const * dt
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(bound > 0, low / bound, np.where(low > 0, np.inf, 0.0))
    bad = np.nonzero(low > bound * (1 + slack))[0]
    summary = {"passed": bad.size == 0, "worst_ratio": float(np.max(ratio)), "slack": slack,
               "distance": d, "failing_time": float(times[bad[0]]) if bad.size else None,
               "coupling": "synchronous surrogate"}
    rows = tuple(zip(times, low, bound, ratio))
    meta = {"seed": seed, "dt": dt, "count": 1, "N": N, "a": a}
    return ProbeTable(("t", "low_mode_distance", "bound", "ratio"), rows, meta, summary)


# --------------------------------------------------------------------------
# hitting times


def _first_hit(norms: np.ndarray, radius: float, dt: float) -> np.ndarray:
    """First grid time with ``norms <= radius`` along the last axis, ``inf`` if none."""
    hit = norms <= radius
    first = np.argmax(hit, axis=-1).astype(float)
    return np.where(hit.any(axis=-1), first * dt, TIMEOUT)


def _window_sup(norms: np.ndarray, W: int) -> np.ndarray:
    """Running max over backward windows of ``W + 1`` points (``u_0`` fills times before 0)."""
    out = norms.copy()
    for r in range(1, W + 1):
        shifted = np.concatenate([np.repeat(norms[..., :1], r, axis=-1), norms[..., :-r]], axis=-1)
        np.maximum(out, shifted, out=out)
    return out


def hitting_time(model: GalerkinModel, u0, radius: float, horizon: float, dt: float, seed: int, *,
                 window: float = 0.0) -> float:
    """``inf{t : |u_t| <= radius}`` on the grid, :data:`TIMEOUT` past ``horizon``.

    ``window > 0`` uses the window sup-norm over ``[t - window, t]``.
    """
    if radius <= 0:
        raise ValueError("radius must be positive")
    u0 = np.asarray(u0, dtype=float)
    if window == 0 and norm_sq(u0) <= radius**2:
        return 0.0
    traj = simulate(model, u0, horizon, dt, seed)
    norms = np.sqrt(norm_sq(traj.states))
    if window:
        norms = _window_sup(norms, grid_index(window, dt, name="window"))
    return float(_first_hit(norms, radius, dt))


def recurrence_moment(model: GalerkinModel, kappa: float, radius: float, count: int, horizon: float, dt: float,
                      master_seed: int, *, initial=None, window: float = 0.0,
                      batch_size: int = 512) -> ProbeTable:
    """Monte Carlo ``E exp(kappa tau)`` over paths that hit the ball before ``horizon``.

    Only stability is asserted: the two half-samples agree within three
    combined standard errors and fewer than 1% of the paths time out.
    """
    if count < 100:
        raise ValueError("count must be >= 100")
    initial = np.zeros(model.n_modes) if initial is None else initial
    taus = []
    for chunk in iter_ensemble(model, initial, count, horizon, dt, master_seed, batch_size=batch_size):
        norms = np.sqrt(norm_sq(chunk.states))
        if window:
            norms = _window_sup(norms, grid_index(window, dt, name="window"))
        taus.append(_first_hit(norms, radius, dt))
        taus.append(np.full(len(chunk.failures), TIMEOUT))
    tau = np.concatenate(taus)
    done = np.isfinite(tau)
    timeout = 1.0 - done.mean()
    x = np.exp(kappa * tau[done])

    def stats(v):
        return float(v.mean()), float(v.std(ddof=1) / math.sqrt(len(v))) if len(v) > 1 else math.inf

    est, se = stats(x)
    half = len(x) // 2
    (e1, s1), (e2, s2) = stats(x[:half]), stats(x[half:])
    stable = abs(e1 - e2) <= 3.0 * math.hypot(s1, s2) if math.isfinite(s1 + s2) and s1 + s2 > 0 else e1 == e2
    summary = {"estimate": est, "std_error": se, "timeout_fraction": float(timeout), "stable": bool(stable),
               "passed": bool(stable and timeout < 0.01 and math.isfinite(est)),
               "mean_tau": float(tau[done].mean()) if done.any() else None}
    rows = ((0.0, e1, s1), (1.0, e2, s2), (2.0, est, se))
    meta = {"seed": master_seed, "dt": dt, "count": count, "kappa": kappa, "radius": radius}
    return ProbeTable(("half", "estimate", "std_error"), rows, meta, summary)


# --------------------------------------------------------------------------
# moment suite


def _decay_model(t, A, r, C):
    return A * np.exp(-r * t) + C


def moment_probe(model: GalerkinModel, m: int, t_grid: Sequence[float], count: int, master_seed: int, u0, *,
                 dt: float = 0.01, sup_window: float = 1.0, batch_size: int = 512) -> ProbeTable:
    """``E|u_t|^{2m}`` and ``E sup_{[t, t+T]} |u|^{2m}`` with a fit ``A e^{-r t} + C``.

    The summary reports ``decay_rate = r``, ``offset = C`` and whether
    ``r >= 0.8 m alpha_1``.
    """
    if count < 1000:
        raise ValueError("count must be >= 1000")
    t_grid = [float(t) for t in t_grid]
    idx = [grid_index(t, dt) for t in t_grid]
    W = grid_index(sup_window, dt, name="sup_window")
    horizon = (max(idx) + W) * dt
    s1 = np.zeros(len(idx))
    s2 = np.zeros(len(idx))
    q1 = np.zeros(len(idx))
    q2 = np.zeros(len(idx))
    fails = 0
    for chunk in iter_ensemble(model, u0, count, horizon, dt, master_seed, batch_size=batch_size):
        fails += len(chunk.failures)
        p = norm_sq(chunk.states) ** m
        a = p[:, idx]
        b = np.stack([p[:, i : i + W + 1].max(axis=1) for i in idx], axis=1)
        s1 += a.sum(0)
        q1 += (a * a).sum(0)
        s2 += b.sum(0)
        q2 += (b * b).sum(0)
    n = count - fails
    mean, sup_mean = s1 / n, s2 / n
    se = np.sqrt(np.maximum(q1 / n - mean**2, 0) / (n - 1))
    sup_se = np.sqrt(np.maximum(q2 / n - sup_mean**2, 0) / (n - 1))
    t = np.asarray(t_grid)
    alpha1 = float(model.eigenvalues.min())
    try:
        p0 = (max(mean[0] - mean[-1], 1e-12), 2.0 * m * alpha1, max(mean[-1], 0.0))
        with warnings.catch_warnings():
            # a flat table leaves the covariance undefined; only the point fit is used
            warnings.simplefilter("ignore", OptimizeWarning)
            (A, r, C), _ = curve_fit(_decay_model, t, mean, p0=p0, sigma=np.maximum(se, 1e-12 * np.abs(mean) + 1e-300),
                                     maxfev=20000)
    except (RuntimeError, ValueError):
        A, r, C = math.nan, math.nan, math.nan
    floor = 0.8 * m * alpha1
    summary = {"decay_rate": float(r), "offset": float(C), "amplitude": float(A), "rate_floor": floor,
               "passed": bool(r >= floor), "blowups": fails}
    rows = tuple(zip(t, mean, se, sup_mean, sup_se))
    meta = {"seed": master_seed, "dt": dt, "count": count, "m": m, "sup_window": sup_window}
    return ProbeTable(("t", "moment", "std_error", "sup_moment", "sup_std_error"), rows, meta, summary)


def energy_constants(model: GalerkinModel) -> tuple[float, float]:
    """``(gamma0, K)`` with ``gamma0 = 1 / (4 max b_j^2 / alpha_j)`` and ``K = B0 + 2 |h|_{-1}^2``.

    These come from the Ito formula for ``|u|^2`` and the exponential
    martingale inequality; ``gamma0`` is infinite without noise.
    """
    ratio = float(np.max(model.noise_amps**2 / model.eigenvalues))
    gamma0 = math.inf if ratio == 0 else 1.0 / (4.0 * ratio)
    return gamma0, float(model.B0 + 2.0 * norm_dual_sq(model, model.forcing))


def exp_moment_probe(model: GalerkinModel, kappa_list: Sequence[float], t: float, count: int, master_seed: int, *,
                     u0=None, dt: float = 0.01, rho_grid: Sequence[float] | None = None,
                     instability: float = 0.5, groups: int = 20, batch_size: int = 512) -> ProbeTable:
    """``(1/t) log E exp(kappa E(t))`` with ``E(t) = |u_t|^2 + int_0^t |u|_1^2``.

    The first ``kappa`` whose relative jackknife error exceeds
    ``instability`` is reported as the destabilization point. The summary
    also holds the exceedance curve of ``sup_s (E(s) - K s) - |u0|^2 >= rho``
    next to ``e^{-gamma0 rho}`` for the analytic pair ``(gamma0, K)`` and a
    least-squares empirical ``gamma0``.
    """
    kappa = np.asarray(kappa_list, dtype=float)
    if np.any(np.diff(kappa) <= 0):
        raise ValueError("kappa_list must be increasing")
    u0 = np.zeros(model.n_modes) if u0 is None else np.asarray(u0, dtype=float)
    gamma0, K = energy_constants(model)
    m = grid_index(t, dt)
    E_t, sup_excess = [], []
    for chunk in iter_ensemble(model, u0, count, t, dt, master_seed, batch_size=batch_size):
        n1 = norm1_sq(model, chunk.states)
        cum = np.concatenate([np.zeros((len(n1), 1)), np.cumsum(0.5 * dt * (n1[:, 1:] + n1[:, :-1]), axis=1)], axis=1)
        energy = norm_sq(chunk.states) + cum
        E_t.append(energy[:, m])
        sup_excess.append(np.max(energy - K * dt * np.arange(m + 1), axis=1) - float(norm_sq(u0)))
    E = np.concatenate(E_t)
    S = np.concatenate(sup_excess)
    M = len(E)
    blocks = np.array_split(np.arange(M), min(groups, M))
    rows, unstable = [], None
    for k in kappa:
        z = k * E
        L = (logsumexp(z) - math.log(M)) / t
        loo = []
        for b in blocks:
            keep = np.ones(M, dtype=bool)
            keep[b] = False
            loo.append(logsumexp(z[keep]) - math.log(keep.sum()))
        loo = np.asarray(loo)
        g = len(blocks)
        # jackknife error of log mean exp equals the relative error of the mean
        rel = math.sqrt((g - 1) / g * float(np.sum((loo - loo.mean()) ** 2)))
        if unstable is None and rel > instability:
            unstable = float(k)
        rows.append((float(k), float(L), rel))
    if rho_grid is None:
        top = float(np.quantile(S, 0.99)) if M else 1.0
        rho_grid = np.linspace(0.0, max(top, 1e-6), 11)
    rho = np.asarray(rho_grid, dtype=float)
    freq = np.array([float(np.mean(S >= r)) for r in rho])
    pos = freq > 0
    emp_gamma = float(-np.polyfit(rho[pos], np.log(freq[pos]), 1)[0]) if pos.sum() >= 2 else math.nan
    bound = np.exp(-gamma0 * rho) if math.isfinite(gamma0) else (rho <= 0).astype(float)
    summary = {"kappa_unstable": unstable, "gamma0": gamma0, "K": K, "gamma0_empirical": emp_gamma,
               "rho": rho.tolist(), "exceedance": freq.tolist(), "exceedance_bound": bound.tolist(),
               "monotone": bool(np.all(np.diff(freq) <= 0)),
               "passed": bool(np.all(np.diff(freq) <= 0) and np.all(freq <= bound + 3 * np.sqrt(bound * (1 - bound) / M) + 1.0 / M))}
    meta = {"seed": master_seed, "dt": dt, "count": count, "t": t}
    return ProbeTable(("kappa", "log_moment_rate", "relative_error"), tuple(rows), meta, summary)


def doubly_log_probe(model: GalerkinModel, t: float, T: float, count: int, master_seed: int,
                     u0_list: Sequence, *, dt: float = 0.01, margin: float = 0.1,
                     batch_size: int = 512) -> ProbeTable:
    """``E log(1 + log(1 + t sup_{[t, t+T]} |u|_1^2))`` per initial state.

    The summary holds the regression against ``|u0|^2``, the smallest
    constant ``C`` with ``stat <= C (|u0|^2 + 1 + t)`` on the family, and
    whether the fitted line stays below ``(1 + margin) C (x + 1 + t)`` on the
    range of ``x = |u0|^2``.
    """
    if count < 1000:
        raise ValueError("count must be >= 1000")
    i0 = grid_index(t, dt)
    W = grid_index(T, dt, name="T")
    rows = []
    for j, u0 in enumerate(u0_list):
        u0 = np.asarray(u0, dtype=float)
        acc, acc2, n = 0.0, 0.0, 0
        for chunk in iter_ensemble(model, u0, count, (i0 + W) * dt, dt, split_seed(master_seed, j),
                                   batch_size=batch_size):
            s = norm1_sq(model, chunk.states[:, i0 : i0 + W + 1]).max(axis=1)
            v = np.log1p(np.log1p(t * s))
            acc += float(v.sum())
            acc2 += float((v * v).sum())
            n += len(v)
        mean = acc / n
        se = math.sqrt(max(acc2 / n - mean**2, 0.0) / max(n - 1, 1))
        rows.append((float(norm_sq(u0)), mean, se))
    x = np.array([r[0] for r in rows])
    y = np.array([r[1] for r in rows])
    C_hat = float(np.max(y / (x + 1.0 + t)))
    if len(x) >= 2 and np.ptp(x) > 0:
        slope, intercept = np.polyfit(x, y, 1)
    else:
        slope, intercept = 0.0, float(y.mean())
    env = (1.0 + margin) * C_hat
    ends = np.array([x.min(), x.max()])
    ok = bool(np.all(intercept + slope * ends < env * (ends + 1.0 + t)))
    summary = {"C_hat": C_hat, "slope": float(slope), "intercept": float(intercept), "margin": margin,
               "passed": ok}
    meta = {"seed": master_seed, "dt": dt, "count": count, "t": t, "T": T}
    return ProbeTable(("norm_sq_u0", "statistic", "std_error"), tuple(rows), meta, summary)
