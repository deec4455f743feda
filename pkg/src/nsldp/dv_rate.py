"""Rate functions: Legendre and Donsker-Varadhan forms, resolvents, entropies.

Chains are handled exactly (matrix semigroups). For the Galerkin model the
semigroup is estimated by Monte Carlo on a finite probe set, and the two
rate forms only ever give lower bounds since the search runs over finite
parametric families.

For discrete chains the variational objective is ``sum lam log(f / Pf)``,
the form dual to tilting ``e^V P``. The generator ``P - I`` of the
Poissonized chain is used wherever an operator ``L`` is needed (resolvent,
cutoff pipeline).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy import linalg
from scipy.special import logsumexp

from .chain_oracle import (ChainError, FiniteChain, exact_pressure, exact_rate_legendre,
                           exact_rate_variational, pf_eigen, stationary, tilt)
from .empirical import EmpiricalMeasure
from .feynman_kac import Potential, constant_potential, state_potential
from .galerkin import GalerkinModel
from .sde import grid_index, iter_ensemble, make_rng, split_seed, trapezoid

EXACT_AGREEMENT = 1e-6


@dataclass(frozen=True)
class RateEstimate:
    value: float
    mode: str
    argmax_params: np.ndarray
    diagnostics: dict = field(default_factory=dict)
    converged: bool = True


def relative_entropy(mu1, mu2) -> float:
    """``sum mu1 log(mu1 / mu2)``, ``+inf`` when ``mu1`` charges a ``mu2``-null atom.

    Accepts probability vectors on a common index set or two
    :class:`EmpiricalMeasure` objects (atoms matched by exact coordinates).
    On a finite space this equals ``sup_V (<V, mu1> - log <e^V, mu2>)``.
    """
    if isinstance(mu1, EmpiricalMeasure):
        keys = {}
        for p, w in zip(mu2.points, mu2.weights):
            k = np.ascontiguousarray(p, dtype=float).tobytes()
            keys[k] = keys.get(k, 0.0) + float(w)
        a, b = [], []
        acc = {}
        for p, w in zip(mu1.points, mu1.weights):
            k = np.ascontiguousarray(p, dtype=float).tobytes()
            acc[k] = acc.get(k, 0.0) + float(w)
        for k, w in acc.items():
            a.append(w)
            b.append(keys.get(k, 0.0))
        p, q = np.asarray(a), np.asarray(b)
    else:
        p, q = np.asarray(mu1, dtype=float), np.asarray(mu2, dtype=float)
    if p.shape != q.shape:
        raise ValueError("measures live on different index sets")
    charged = p > 0
    if np.any(q[charged] <= 0):
        return math.inf
    return float(np.sum(p[charged] * np.log(p[charged] / q[charged])))


# --------------------------------------------------------------------------
# derivative-free search


@dataclass(frozen=True)
class ParamFamily:
    """Finite-dimensional family ``params -> V`` (or ``-> log f``)."""

    dim: int
    build: Callable[[np.ndarray], object]
    name: str = "custom"
    scale: float = 1.0


def vector_family(n: int) -> ParamFamily:
    """All real vectors on ``n`` states."""
    return ParamFamily(n, lambda p: np.asarray(p, dtype=float), "vector")


def constant_family(n: int | None = None, N: int = 1) -> ParamFamily:
    """Constants: vectors when ``n`` is given, otherwise constant potentials."""
    if n is not None:
        return ParamFamily(1, lambda p: np.full(n, float(p[0])), "constant")
    return ParamFamily(1, lambda p: constant_potential(float(p[0]), N), "constant")


def potential_family(features, offsets=None, *, with_constant: bool = False) -> ParamFamily:
    """Potentials ``c0 + sum c_i tanh(<x, phi_i> + d_i)`` with the ``c_i`` (and ``c0``) free."""
    features = np.atleast_2d(np.asarray(features, dtype=float))
    k = features.shape[0]
    offsets = np.zeros(k) if offsets is None else np.asarray(offsets, dtype=float)

    def build(p):
        c0 = float(p[k]) if with_constant else 0.0
        return state_potential(p[:k], features, offsets, c0)

    return ParamFamily(k + int(with_constant), build, "potential")


def pattern_search(objective: Callable[[np.ndarray], float], x0: np.ndarray, budget: int, *,
                   step: float = 1.0, min_step: float = 1e-11, max_step: float = 64.0):
    """Hooke-Jeeves maximization.

    Returns ``(x, value, evaluations, converged)``; ``converged`` means the
    mesh shrank below ``min_step`` before the budget ran out.
    """
    x = np.array(x0, dtype=float)
    fx = objective(x)
    evals = 1
    d = len(x)

    def explore(base, fbase, h):
        nonlocal evals
        y, fy = base.copy(), fbase
        for i in range(d):
            for sgn in (1.0, -1.0):
                if evals >= budget:
                    return y, fy
                z = y.copy()
                z[i] += sgn * h
                fz = objective(z)
                evals += 1
                if fz > fy:
                    y, fy = z, fz
                    break
        return y, fy

    while evals < budget and step > min_step:
        y, fy = explore(x, fx, step)
        if fy > fx:
            # pattern moves along the improving direction while they keep paying off
            while evals < budget:
                direction = y - x
                x, fx = y, fy
                z, fz = explore(x + direction, objective(x + direction), step)
                evals += 1
                if fz > fx:
                    y, fy = z, fz
                else:
                    break
            step = min(2.0 * step, max_step)
        else:
            step *= 0.5
    return x, float(fx), evals, step <= min_step


def _multistart(objective, family: ParamFamily, budget: int, seed: int, restarts: int, mode: str) -> RateEstimate:
    per_start = max(budget // restarts, 2 * family.dim + 2)
    best = None
    trace = []
    total = 0
    all_conv = True
    for r in range(restarts):
        s = split_seed(seed, r)
        x0 = np.zeros(family.dim) if r == 0 else make_rng(s).normal(scale=family.scale, size=family.dim)
        x, fx, ev, conv = pattern_search(objective, x0, per_start)
        total += ev
        trace.append({"restart": r, "seed": int(s), "value": fx, "evaluations": ev, "converged": conv})
        if best is None or fx > best[1]:
            best = (x, fx, conv)
        all_conv &= conv
    x, fx, conv = best
    diag = {"evaluations": total, "restarts": trace, "family": family.name, "seed": seed}
    return RateEstimate(fx, mode, x, diag, conv)


def _pair(V, lam) -> float:
    if isinstance(lam, EmpiricalMeasure):
        if callable(V):
            return float(np.dot(lam.weights, V(lam.points)))
        raise TypeError("an empirical target needs a callable potential")
    return float(np.dot(np.asarray(V, dtype=float), np.asarray(lam, dtype=float)))


def legendre_rate(pressure_oracle, lam, V_family: ParamFamily | None = None, search_budget: int = 8000, *,
                  seed: int = 0, restarts: int = 8) -> RateEstimate:
    """Lower bound ``sup_{V in family} (<V, lam> - Q(V))`` by pattern search with restarts.

    ``pressure_oracle`` is a :class:`FiniteChain` (exact pressure) or any
    callable ``V -> Q(V)``, e.g. a Monte Carlo pressure. Budget exhaustion
    returns the best value found with ``converged=False``.
    """
    if isinstance(pressure_oracle, FiniteChain):
        chain = pressure_oracle
        chain.require_irreducible()
        Q = lambda V: exact_pressure(chain, V, method="dense")  # noqa: E731
        if V_family is None:
            V_family = vector_family(chain.n_states)
    else:
        Q = pressure_oracle
        if V_family is None:
            raise ValueError("a parametric family is needed for a non-chain pressure oracle")

    def objective(p):
        V = V_family.build(p)
        return _pair(V, lam) - Q(V)

    return _multistart(objective, V_family, search_budget, seed, restarts, "legendre")


def exact_rate(chain: FiniteChain, lam) -> RateEstimate:
    """Both exact chain routes; raises if they disagree by more than ``1e-6``."""
    a = exact_rate_legendre(chain, lam, full=True)
    b = exact_rate_variational(chain, lam, full=True)
    if abs(a.value - b.value) > EXACT_AGREEMENT:
        raise ChainError(f"exact rate routes disagree: {a.value!r} vs {b.value!r}")
    return RateEstimate(a.value, "exact_chain", a.argmax,
                        {"legendre": a.value, "variational": b.value, "f_argmax": b.argmax},
                        a.converged and b.converged)


# --------------------------------------------------------------------------
# semigroups, resolvent, generator


@dataclass(frozen=True)
class ModelSemigroup:
    """Monte Carlo semigroup of the Galerkin model on a finite probe set."""

    model: GalerkinModel
    probes: np.ndarray
    count: int = 2000
    dt: float = 0.01
    seed: int = 0

    def expect(self, f, times: Sequence[float]) -> np.ndarray:
        """``E_u f(u_t)`` for each probe (rows) and each grid time (columns).

        All times share one ensemble per probe, so differences in ``t`` are
        computed with common random numbers.
        """
        idx = [grid_index(t, self.dt) for t in times]
        out = np.empty((len(self.probes), len(idx)))
        horizon = max(idx) * self.dt
        for p, u in enumerate(np.atleast_2d(self.probes)):
            acc = np.zeros(len(idx))
            for chunk in iter_ensemble(self.model, u, self.count, max(horizon, self.dt), self.dt,
                                       split_seed(self.seed, p)):
                vals = np.asarray(f(chunk.states[:, idx]), dtype=float)
                acc += vals.sum(axis=0)
            out[p] = acc / self.count
        return out

    def path_mean(self, g: Callable[[np.ndarray, np.ndarray], np.ndarray], horizon: float) -> np.ndarray:
        """``E_u g(path, times)`` averaged over paths, one row per probe."""
        rows = []
        for p, u in enumerate(np.atleast_2d(self.probes)):
            acc = None
            for chunk in iter_ensemble(self.model, u, self.count, horizon, self.dt, split_seed(self.seed, p)):
                times = self.dt * np.arange(chunk.states.shape[1])
                v = np.asarray(g(chunk.states, times), dtype=float).sum(axis=0)
                acc = v if acc is None else acc + v
            rows.append(acc / self.count)
        return np.asarray(rows)


def _chain_semigroup(chain: FiniteChain, t: float) -> np.ndarray:
    return linalg.expm(t * chain.generator)


@dataclass(frozen=True)
class QuadratureSpec:
    """Resolvent quadrature: ``rule`` in {"laguerre", "trapezoid", "exact"}.

    ``horizon`` truncates the trapezoid rule; for Gauss-Laguerre it is the
    largest node.
    """

    rule: str = "laguerre"
    nodes: int = 64
    horizon: float | None = None
    tol: float = 1e-8


@dataclass(frozen=True)
class ResolventResult:
    values: np.ndarray
    tail_bound: float
    flagged: bool
    rule: str

    def __array__(self, dtype=None, copy=None):
        return np.asarray(self.values, dtype=dtype)


def _laguerre(alpha: float, nodes: int):
    x, w = np.polynomial.laguerre.laggauss(nodes)
    return x / alpha, w / alpha


def resolvent(semigroup_provider, f, alpha: float, quadrature_spec: QuadratureSpec | None = None) -> ResolventResult:
    """``R_alpha f = int_0^inf e^{-alpha t} P_t f dt`` on the probe set.

    Chains evaluate ``P_t`` exactly and also accept ``rule="exact"``, the
    linear solve ``(alpha - L)^{-1} f``. The model uses the trapezoid rule on
    the simulation grid. The reported tail is ``e^{-alpha T_q} sup|f| / alpha``.
    """
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    q = quadrature_spec or QuadratureSpec()
    if isinstance(semigroup_provider, FiniteChain):
        chain = semigroup_provider
        f = np.asarray(f, dtype=float)
        sup = float(np.max(np.abs(f)))
        if q.rule == "exact":
            vals = np.linalg.solve(alpha * np.eye(chain.n_states) - chain.generator, f)
            return ResolventResult(vals, 0.0, False, "exact")
        if q.rule == "laguerre":
            t, w = _laguerre(alpha, q.nodes)
            vals = sum(wi * (_chain_semigroup(chain, ti) @ f) for ti, wi in zip(t, w))
            T_q = float(t[-1])
        elif q.rule == "trapezoid":
            T_q = q.horizon if q.horizon is not None else 40.0 / alpha
            t = np.linspace(0.0, T_q, q.nodes)
            w = np.full(q.nodes, t[1] - t[0])
            w[0] = w[-1] = 0.5 * (t[1] - t[0])
            vals = sum(wi * math.exp(-alpha * ti) * (_chain_semigroup(chain, ti) @ f) for ti, wi in zip(t, w))
        else:
            raise ValueError(f"unknown rule {q.rule!r}")
        tail = math.exp(-alpha * T_q) * sup / alpha
        return ResolventResult(np.asarray(vals), tail, tail > q.tol, q.rule)
    sg: ModelSemigroup = semigroup_provider
    T_q = q.horizon if q.horizon is not None else -math.log(q.tol * alpha) / alpha
    T_q = max(sg.dt, math.ceil(T_q / sg.dt - 1e-9) * sg.dt)

    def g(states, times):
        return trapezoid(np.exp(-alpha * times) * np.asarray(f(states), dtype=float), sg.dt)

    vals = sg.path_mean(g, T_q)
    sup = float(np.max(np.abs(f(np.atleast_2d(sg.probes)))))
    tail = math.exp(-alpha * T_q) * sup / alpha
    return ResolventResult(vals, tail, tail > q.tol, "trapezoid")


@dataclass(frozen=True)
class GeneratorProbe:
    """Generator access for a chain or a :class:`ModelSemigroup`.

    ``domain_family`` lists strictly positive test functions (vectors for
    chains, callables ``exp(W)`` for the model).
    """

    base_semigroup: object
    dt_fd: float = 1e-3
    domain_family: tuple = ()

    def __post_init__(self):
        for f in self.domain_family:
            if np.min(self._on_probes(f)) <= 0:
                raise ValueError("domain functions must be strictly positive")

    @property
    def is_chain(self) -> bool:
        return isinstance(self.base_semigroup, FiniteChain)

    def _on_probes(self, f) -> np.ndarray:
        if self.is_chain:
            return np.asarray(f, dtype=float)
        return np.asarray(f(np.atleast_2d(self.base_semigroup.probes)), dtype=float)


def generator_apply(probe: GeneratorProbe, f, *, method: str = "auto", resolvent_source=None,
                    alpha: float | None = None, require_positive: bool = False) -> np.ndarray:
    """``L f`` on the probe set.

    Methods: ``"matrix"`` (chains), ``"fd"`` (Richardson-extrapolated
    difference quotient ``(P_h f - f) / h``), and ``"resolvent"`` when ``f =
    R_alpha g``: then ``L f = alpha f - g`` with ``g = resolvent_source``.
    ``"auto"`` picks matrix for chains and finite differences for the model.
    """
    fv = probe._on_probes(f)
    if require_positive and np.min(fv) <= 0:
        raise ValueError("variational use needs a strictly positive f")
    if method == "auto":
        method = "resolvent" if resolvent_source is not None else ("matrix" if probe.is_chain else "fd")
    if method == "resolvent":
        if resolvent_source is None or alpha is None:
            raise ValueError("resolvent method needs resolvent_source and alpha")
        return alpha * fv - probe._on_probes(resolvent_source)
    if method == "matrix":
        if not probe.is_chain:
            raise ValueError("matrix method needs a chain")
        return probe.base_semigroup.generator @ fv
    if method != "fd":
        raise ValueError(f"unknown method {method!r}")
    h = probe.dt_fd
    if probe.is_chain:
        Ph = _chain_semigroup(probe.base_semigroup, h) @ fv
        Ph2 = _chain_semigroup(probe.base_semigroup, h / 2) @ fv
    else:
        sg: ModelSemigroup = probe.base_semigroup
        if abs(h / sg.dt - round(h / sg.dt)) > 1e-9 or round(h / sg.dt) % 2:
            raise ValueError("dt_fd must be an even multiple of the simulation step")
        E = sg.expect(f, [h / 2, h])
        Ph2, Ph = E[:, 0], E[:, 1]
    d1 = (Ph - fv) / h
    d2 = (Ph2 - fv) / (h / 2)
    return 2.0 * d2 - d1


def variational_rate(lam, generator_probe: GeneratorProbe, search_budget: int = 8000, *,
                     family: ParamFamily | None = None, seed: int = 0, restarts: int = 8) -> RateEstimate:
    """Lower bound ``sup_f int -L f / f d lam`` over ``f = exp(g)``, ``g`` in ``family``.

    On discrete chains the objective is ``sum lam log(f / Pf)``. For the
    model ``lam`` is an :class:`EmpiricalMeasure` on the probe states, ``g``
    a potential from ``family``, and ``L`` is estimated by finite
    differences.
    """
    if generator_probe.is_chain:
        chain: FiniteChain = generator_probe.base_semigroup
        chain.require_irreducible()
        lam = np.asarray(lam, dtype=float)
        fam = family or vector_family(chain.n_states)
        if chain.clocking == "discrete":
            with np.errstate(divide="ignore"):
                logP = np.log(chain.matrix)

            def objective(p):
                g = fam.build(p)
                return float(lam @ (g - logsumexp(logP + g[None, :], axis=1)))
        else:
            G = chain.matrix

            def objective(p):
                g = fam.build(p)
                return -float(lam @ (G * np.exp(g[None, :] - g[:, None])).sum(axis=1))

        return _multistart(objective, fam, search_budget, seed, restarts, "variational")
    if family is None:
        raise ValueError("the model needs a potential family")
    if not isinstance(lam, EmpiricalMeasure):
        raise TypeError("the model target must be an EmpiricalMeasure on the probes")

    def objective(p):
        W = family.build(p)
        f = lambda x: np.exp(W(x))  # noqa: E731
        Lf = generator_apply(generator_probe, f)
        return float(np.dot(lam.weights, -Lf / np.exp(W(lam.points))))

    return _multistart(objective, family, search_budget, seed, restarts, "variational")


# --------------------------------------------------------------------------
# entropies


@dataclass(frozen=True)
class MarkovProcessMeasure:
    """Stationary Markov process with kernel ``Q`` observed against the reference chain."""

    reference: FiniteChain
    kernel: np.ndarray

    def __post_init__(self):
        Q = FiniteChain(self.kernel, self.reference.clocking)
        Q.require_irreducible()
        object.__setattr__(self, "kernel", Q.matrix)

    @property
    def stationary(self) -> np.ndarray:
        return stationary(FiniteChain(self.kernel, self.reference.clocking))


def _as_process(process_measure) -> MarkovProcessMeasure:
    if isinstance(process_measure, MarkovProcessMeasure):
        return process_measure
    P, Q = process_measure
    P = P if isinstance(P, FiniteChain) else FiniteChain(P)
    return MarkovProcessMeasure(P, np.asarray(Q, dtype=float))


def _entropy_rate(pm: MarkovProcessMeasure) -> float:
    pi = pm.stationary
    P, Q = pm.reference.matrix, pm.kernel
    if pm.reference.clocking == "discrete":
        return float(sum(pi[x] * relative_entropy(Q[x], P[x]) for x in range(len(pi))))
    total = 0.0
    for x in range(len(pi)):
        for y in range(len(pi)):
            if x == y:
                continue
            q, p = Q[x, y], P[x, y]
            if q > 0 and p <= 0:
                return math.inf
            total += pi[x] * ((q * math.log(q / p) if q > 0 else 0.0) - q + p)
    return total


def dv_entropy(process_measure, t: int = 1) -> float:
    """Entropy of the stationary ``Q``-process relative to ``P`` over ``[0, t]``.

    By the chain rule this is ``t * sum_x pi_Q(x) KL(Q(x, .) || P(x, .))``;
    continuous clocking uses the jump-rate analogue
    ``sum_{x != y} pi(x) (q log(q/p) - q + p)``.
    """
    if int(t) != t or t < 1:
        raise ValueError("t must be a positive integer")
    return int(t) * _entropy_rate(_as_process(process_measure))


def level3_rate_markov(chain: FiniteChain, kernel) -> float:
    """Level-3 rate of a stationary Markov measure; conditioning on the past reduces to the current state."""
    return dv_entropy(MarkovProcessMeasure(chain, np.asarray(kernel, dtype=float)), 1)


def past_conditioned_entropy(chain: FiniteChain, kernel, k: int) -> float:
    """``E KL(law(X_1 | X_{-k+1..0}) || P(X_0, .))`` by enumerating length-``k`` pasts (discrete)."""
    pm = MarkovProcessMeasure(chain, np.asarray(kernel, dtype=float))
    if chain.clocking != "discrete":
        raise ValueError("past enumeration is implemented for discrete chains")
    Q, P, pi = pm.kernel, chain.matrix, pm.stationary
    n = len(pi)
    total = 0.0
    words = [((x,), pi[x]) for x in range(n)]
    for _ in range(k - 1):
        words = [(w + (y,), p * Q[w[-1], y]) for w, p in words for y in range(n) if Q[w[-1], y] > 0]
    for w, p in words:
        joint = np.array([p * Q[w[-1], y] for y in range(n)])
        cond = joint / joint.sum()
        total += p * relative_entropy(cond, P[w[-1]])
    return float(total)


def optimal_kernel(chain: FiniteChain, lam) -> np.ndarray:
    """Doob transform of the optimal tilt: the kernel whose stationary law is ``lam`` with minimal entropy."""
    V = exact_rate_legendre(chain, lam, full=True).argmax
    pf = pf_eigen(tilt(chain, V))
    h = pf.h
    if chain.clocking == "discrete":
        M = np.exp(V)[:, None] * chain.matrix
        return M * h[None, :] / (pf.c * h[:, None])
    G = chain.matrix
    K = G * h[None, :] / h[:, None]
    np.fill_diagonal(K, 0.0)
    np.fill_diagonal(K, -K.sum(axis=1))
    return K


def contraction_gap(chain: FiniteChain, kernel) -> float:
    """``H(Q-process) - I(pi_Q)``, nonnegative by the contraction principle."""
    pm = MarkovProcessMeasure(chain, np.asarray(kernel, dtype=float))
    H = _entropy_rate(pm)
    return H - exact_rate_legendre(chain, pm.stationary)


# --------------------------------------------------------------------------
# cutoff and resolvent approximation


def cutoff(f, N: float) -> np.ndarray:
    """``f_N = (f ^ N) v (1/N)``."""
    return np.clip(np.asarray(f, dtype=float), 1.0 / N, N)


def dv_integrand(chain: FiniteChain, f, lam) -> float:
    """``int -L f / f d lam`` with ``L`` the chain generator (``P - I`` for discrete chains)."""
    f = np.asarray(f, dtype=float)
    if np.min(f) <= 0:
        raise ValueError("f must be strictly positive")
    return float(np.dot(lam, -(chain.generator @ f) / f))


@dataclass(frozen=True)
class ApproximationTable:
    """Values of ``int -L R_a f_N / R_a f_N d lam``; ``N = inf`` means no cutoff."""

    base: float
    alphas: tuple
    Ns: tuple
    values: np.ndarray  # (len(alphas), len(Ns) + 1), last column without cutoff


def resolvent_approximation(chain: FiniteChain, f, lam, alphas: Sequence[float], Ns: Sequence[float],
                            quadrature_spec: QuadratureSpec | None = None) -> ApproximationTable:
    """Cutoff-then-resolvent pipeline, using ``L R_a g = a R_a g - g``."""
    f = np.asarray(f, dtype=float)
    lam = np.asarray(lam, dtype=float)
    q = quadrature_spec or QuadratureSpec(rule="exact")
    vals = np.empty((len(alphas), len(Ns) + 1))
    for i, a in enumerate(alphas):
        for j, g in enumerate([cutoff(f, N) for N in Ns] + [f]):
            Rg = resolvent(chain, g, a, q).values
            vals[i, j] = float(np.dot(lam, -(a * Rg - g) / Rg))
    return ApproximationTable(dv_integrand(chain, f, lam), tuple(alphas), tuple(Ns), vals)
