"""Occupation and empirical measures, periodization and dual-Lipschitz distances.

Time averages ``(1/t) int delta_{u_s} ds`` are represented by uniform atoms on
the left-endpoint grid ``s = 0, dt, ..., t - dt``. Window measures carry
points of shape ``(W + 1, n)`` where ``W = T / dt``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Callable, Mapping

import numpy as np
from scipy import sparse
from scipy.optimize import linprog

from .sde import GridError, Trajectory, grid_index

METRIC_NOTE = ("window distances use the grid sup metric or the truncated weighted metric "
               "sum_m 2^-m min(1, sup_[m-1,m) |x-y|); no Skorokhod time changes")
WEIGHT_TOL = 1e-12


@dataclass(frozen=True, eq=False)
class EmpiricalMeasure:
    """Finitely supported probability measure.

    Attributes
    ----------
    points : ndarray, shape (m, n) or (m, W + 1, n)
    weights : ndarray, shape (m,)
    space_tag : dict
        ``{"kind": "state"}`` or ``{"kind": "window", "T": T, "dt": dt}``.
    """

    points: np.ndarray
    weights: np.ndarray
    space_tag: Mapping

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        if w.ndim != 1 or w.size != len(self.points) or w.size == 0:
            raise ValueError("need one positive weight per atom and at least one atom")
        if np.any(w <= 0) or abs(float(np.sum(w)) - 1.0) > WEIGHT_TOL:
            raise ValueError("weights must be positive and sum to 1")

    @property
    def kind(self) -> str:
        return self.space_tag["kind"]

    def integrate(self, f: Callable[[np.ndarray], float]) -> float:
        """``<f, mu>`` for a function of one point."""
        return float(sum(w * f(p) for p, w in zip(self.points, self.weights)))


def _state_measure(points: np.ndarray) -> EmpiricalMeasure:
    m = len(points)
    return EmpiricalMeasure(np.array(points, dtype=float), np.full(m, 1.0 / m), {"kind": "state"})


def _window_measure(points: np.ndarray, T: float, dt: float) -> EmpiricalMeasure:
    m = len(points)
    return EmpiricalMeasure(np.array(points, dtype=float), np.full(m, 1.0 / m),
                            {"kind": "window", "T": float(T), "dt": float(dt)})


def _steps(t: float, traj: Trajectory, name: str = "t") -> int:
    m = grid_index(t, traj.dt, name=name)
    if m > traj.n_steps:
        raise GridError(f"{name}={t!r} exceeds the horizon {traj.horizon!r}")
    return m


def occupation_measure(traj: Trajectory, t: float) -> EmpiricalMeasure:
    """Uniform atoms on the states at times ``0, dt, ..., t - dt``."""
    m = _steps(t, traj)
    if m < 1:
        raise GridError("occupation measure needs t >= dt")
    return _state_measure(traj.states[:m])


def window_starts(m: int, W: int, backward: bool) -> np.ndarray:
    """Index table ``(m, W + 1)`` of the windows starting (or ending) at ``s``."""
    s = np.arange(m)[:, None]
    r = np.arange(W + 1)[None, :]
    return np.maximum(s - W + r, 0) if backward else s + r


def windowed_empirical(traj: Trajectory, T: float, t: float, *, backward: bool = False) -> EmpiricalMeasure:
    """Uniform atoms on the length-``T`` windows at ``s = 0, ..., t - dt``.

    Forward windows are ``u_[s, s+T]`` and need ``t + T <= horizon``. With
    ``backward=True`` the atom at ``s`` is ``u_[s-T, s]`` and times before 0
    are filled with ``u_0``.
    """
    m = _steps(t, traj)
    W = grid_index(T, traj.dt, name="T")
    if m < 1:
        raise GridError("windowed measure needs t >= dt")
    if not backward and m - 1 + W > traj.n_steps:
        raise GridError("forward windows run past the horizon")
    return _window_measure(traj.states[window_starts(m, W, backward)], W * traj.dt, traj.dt)


@dataclass(frozen=True, eq=False)
class PeriodizedTrajectory:
    """Periodic extension of ``base`` (states on ``[0, t)``) with ``offset`` applied."""

    base: np.ndarray
    dt: float
    offset: int = 0

    @property
    def period(self) -> float:
        return len(self.base) * self.dt

    def at_index(self, i) -> np.ndarray:
        return self.base[(np.asarray(i) + self.offset) % len(self.base)]

    def at(self, r: float) -> np.ndarray:
        return self.at_index(round(r / self.dt))

    def window(self, start: int, W: int) -> np.ndarray:
        return self.at_index(start + np.arange(W + 1))


def periodize(traj: Trajectory, t: float) -> PeriodizedTrajectory:
    """Periodic extension of the trajectory restricted to ``[0, t)``."""
    m = _steps(t, traj)
    if m < 1:
        raise GridError("period must be positive")
    return PeriodizedTrajectory(np.array(traj.states[:m]), float(traj.dt))


def periodized_empirical(source, t: float | None = None, T: float = 0.0) -> EmpiricalMeasure:
    """Uniform atoms on the wrapped windows of length ``T`` starting at each grid point of a period."""
    per = source if isinstance(source, PeriodizedTrajectory) else periodize(source, t)
    m = len(per.base)
    W = grid_index(T, per.dt, name="T")
    idx = (window_starts(m, W, False) + per.offset) % m
    return _window_measure(per.base[idx], W * per.dt, per.dt)


@dataclass(frozen=True, eq=False)
class Window:
    """Finite path segment; ``start`` is the time of its first row."""

    states: np.ndarray
    dt: float
    start: float = 0.0


def shift(obj, s: float):
    """Time shift ``theta_s u(.) = u(s + .)``.

    Trajectories and windows lose their first ``s / dt`` rows; periodized
    trajectories only change their offset.
    """
    if isinstance(obj, PeriodizedTrajectory):
        k = grid_index(s, obj.dt, name="s")
        return PeriodizedTrajectory(obj.base, obj.dt, (obj.offset + k) % len(obj.base))
    if isinstance(obj, Trajectory):
        k = grid_index(s, obj.dt, name="s")
        if k > obj.n_steps:
            raise GridError("shift beyond the horizon")
        return Trajectory(obj.dt, obj.states[k:], obj.seed, obj.model_id)
    if isinstance(obj, Window):
        k = grid_index(s, obj.dt, name="s")
        if k >= len(obj.states):
            raise GridError("shift beyond the window")
        return Window(obj.states[k:], obj.dt, obj.start + k * obj.dt)
    raise TypeError(f"cannot shift {type(obj).__name__}")


# --------------------------------------------------------------------------
# metrics


def state_distance(x: np.ndarray, y: np.ndarray) -> float:
    return float(np.sqrt(np.sum((np.asarray(x) - np.asarray(y)) ** 2)))


def window_distance(x: np.ndarray, y: np.ndarray) -> float:
    """Max over grid points of the H-distance."""
    return float(np.max(np.sqrt(np.sum((np.asarray(x) - np.asarray(y)) ** 2, axis=-1))))


def weighted_window_distance(x: np.ndarray, y: np.ndarray, dt: float) -> float:
    """``sum_m 2^-m min(1, sup over [m-1, m) of |x - y|)``, truncated at the window length.

    Unit intervals are half open (right-continuous convention); the final
    grid point is attached to the last interval.
    """
    gaps = np.sqrt(np.sum((np.asarray(x) - np.asarray(y)) ** 2, axis=-1))
    times = np.arange(len(gaps)) * dt
    unit = np.floor(times + 1e-9).astype(int)
    last = max(int(math.ceil(times[-1] - 1e-9)), 1)
    unit = np.minimum(unit, last - 1)
    total = 0.0
    for k in range(last):
        sel = gaps[unit == k]
        if sel.size:
            total += 2.0 ** -(k + 1) * min(1.0, float(sel.max()))
    return total


def _pairwise(points: np.ndarray, metric: str, dt: float | None) -> np.ndarray:
    K = len(points)
    if metric == "state":
        flat = points.reshape(K, -1)
        diff = flat[:, None, :] - flat[None, :, :]
        return np.sqrt(np.sum(diff * diff, axis=-1))
    D = np.zeros((K, K))
    for i in range(K):
        gaps = np.sqrt(np.sum((points[i][None] - points[i + 1 :]) ** 2, axis=-1))  # (K-i-1, W+1)
        if metric == "window":
            row = gaps.max(axis=1) if gaps.size else gaps
        else:
            row = np.array([weighted_window_distance(points[i], q, dt) for q in points[i + 1 :]])
        D[i, i + 1 :] = row
        D[i + 1 :, i] = row
    return D


def _merge_support(mu1: EmpiricalMeasure, mu2: EmpiricalMeasure) -> tuple[np.ndarray, np.ndarray]:
    # masses of each side are summed separately so equal measures cancel exactly
    net: dict[bytes, list] = {}
    for side, mu in enumerate((mu1, mu2)):
        for p, w in zip(mu.points, mu.weights):
            key = np.ascontiguousarray(p, dtype=float).tobytes()
            entry = net.setdefault(key, [p, 0.0, 0.0])
            entry[1 + side] += w
    pts = [v[0] for v in net.values() if v[1] != v[2]]
    mass = np.array([v[1] - v[2] for v in net.values() if v[1] != v[2]])
    return (np.array(pts) if pts else np.zeros((0,) + mu1.points.shape[1:])), mass


def dual_lipschitz(mu1: EmpiricalMeasure, mu2: EmpiricalMeasure, metric: str | None = None) -> float:
    """``sup { <f, mu1> - <f, mu2> : ||f||_inf + Lip(f) <= 1 }``, solved exactly.

    The supremum only involves the values of ``f`` on the atoms carrying net
    mass (any admissible function on that set extends to the whole space),
    giving the linear program

        max  sum_i c_i f_i
        s.t. |f_i| <= M,  f_i - f_j <= (1 - M) d_ij,  0 <= M <= 1.

    Parameters
    ----------
    metric : {"state", "window", "weighted"}, optional
        Defaults to ``"state"`` for state measures and ``"window"`` for
        window measures.
    """
    if mu1.kind != mu2.kind or mu1.points.shape[1:] != mu2.points.shape[1:]:
        raise ValueError("measures live on different spaces")
    metric = metric or ("state" if mu1.kind == "state" else "window")
    if metric not in ("state", "window", "weighted"):
        raise ValueError(f"unknown metric {metric!r}")
    dt = mu1.space_tag.get("dt")
    pts, c = _merge_support(mu1, mu2)
    if len(c) == 0:
        return 0.0
    return dual_lipschitz_masses(c, _pairwise(pts, metric, dt))


def dual_lipschitz_masses(c: np.ndarray, D: np.ndarray) -> float:
    """LP value for a signed mass vector ``c`` (summing to 0) on points with distance matrix ``D``."""
    c = np.asarray(c, dtype=float)
    keep = c != 0.0
    c = c[keep]
    D = np.asarray(D, dtype=float)[np.ix_(keep, keep)]
    K = len(c)
    if K == 0:
        return 0.0
    iu, ju = np.nonzero(~np.eye(K, dtype=bool))
    P = len(iu)
    # variables: f_0..f_{K-1}, M
    rows = np.concatenate([np.arange(P), np.arange(P), np.arange(P)])
    cols = np.concatenate([iu, ju, np.full(P, K)])
    vals = np.concatenate([np.ones(P), -np.ones(P), D[iu, ju]])
    lip = sparse.csr_matrix((vals, (rows, cols)), shape=(P, K + 1))
    eye = sparse.identity(K, format="csr")
    mcol = sparse.csr_matrix(-np.ones((K, 1)))
    box = sparse.vstack([sparse.hstack([eye, mcol]), sparse.hstack([-eye, mcol])])
    A = sparse.vstack([lip, box]).tocsc()
    b = np.concatenate([D[iu, ju], np.zeros(2 * K)])
    cost = np.concatenate([-c, [0.0]])
    bounds = [(None, None)] * K + [(0.0, 1.0)]
    res = linprog(cost, A_ub=A, b_ub=b, bounds=bounds, method="highs")
    if res.status != 0:
        raise RuntimeError(f"dual-Lipschitz LP failed: {res.message}")
    return float(max(0.0, -res.fun))


@dataclass(frozen=True)
class ExpEquivalence:
    gap: float
    bound: float
    slack: float
    coupling_bound: float
    metric: str

    @property
    def passed(self) -> bool:
        return self.gap <= self.bound + self.slack


def exp_equiv_gap(traj: Trajectory, t: float, T_cap: float, *, metric: str = "weighted") -> ExpEquivalence:
    """Distance between the length-``T_cap`` window projections of the
    periodized and the plain empirical measures at time ``t``.

    Returns the LP distance with the reference bound ``2 log 2 / t``, the
    grid slack ``2 dt`` and the trivial coupling bound
    ``(1/m) sum_s d(window_s, periodized window_s)``.
    """
    m = _steps(t, traj)
    W = grid_index(T_cap, traj.dt, name="T_cap")
    if m < 1:
        raise GridError("t must be positive")
    plain = windowed_empirical(traj, W * traj.dt, t)
    wrapped = periodized_empirical(traj, t, W * traj.dt)
    gap = dual_lipschitz(wrapped, plain, metric)
    if metric == "weighted":
        per_atom = [weighted_window_distance(a, b, traj.dt) for a, b in zip(wrapped.points, plain.points)]
    else:
        per_atom = [window_distance(a, b) for a, b in zip(wrapped.points, plain.points)]
    coupling = float(np.mean(per_atom))
    return ExpEquivalence(gap, 2.0 * math.log(2.0) / t, 2.0 * traj.dt, coupling, metric)


# --------------------------------------------------------------------------
# persistence


def measure_to_doc(mu: EmpiricalMeasure) -> dict:
    return {
        "space_tag": dict(mu.space_tag),
        "metric_note": METRIC_NOTE,
        "atoms": [{"weight": float(w), "coeffs": np.asarray(p).tolist()} for p, w in zip(mu.points, mu.weights)],
    }


def measure_from_doc(doc: Mapping) -> EmpiricalMeasure:
    atoms = doc["atoms"]
    return EmpiricalMeasure(np.array([a["coeffs"] for a in atoms], dtype=float),
                            np.array([a["weight"] for a in atoms], dtype=float), dict(doc["space_tag"]))


def save_measure(mu: EmpiricalMeasure, path) -> None:
    with open(path, "w") as fh:
        json.dump(measure_to_doc(mu), fh, sort_keys=True)
        fh.write("\n")


def load_measure(path) -> EmpiricalMeasure:
    with open(path) as fh:
        return measure_from_doc(json.load(fh))
