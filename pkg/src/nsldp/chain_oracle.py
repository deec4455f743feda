"""Exact finite-state oracles.

Tilted kernels, Perron-Frobenius data, pressures and rate functions of small
Markov chains in discrete or continuous clocking. For a discrete chain the
Feynman-Kac operator over one step is ``diag(e^V) P``; for a continuous
chain with generator ``G`` it is ``expm(t (G + diag V))``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np
from scipy import linalg
from scipy.optimize import minimize
from scipy.sparse.csgraph import connected_components
from scipy.special import logsumexp

from .sde import make_rng, split_seed

ROW_TOL = 1e-12
V_BOUND = 50.0


class ChainError(ValueError):
    """Invalid chain data or an operation that needs irreducibility."""


@dataclass(frozen=True, eq=False)
class FiniteChain:
    """Finite Markov chain.

    Attributes
    ----------
    matrix : ndarray, shape (n, n)
        Row-stochastic ``P`` (discrete) or generator ``G`` (continuous).
    clocking : {"discrete", "continuous"}
    state_labels : ndarray, shape (n, d)
        Coordinates of the states, used as the metric for occupation
        measures. Defaults to ``0, 1, ..., n-1`` on the line.
    """

    matrix: np.ndarray
    clocking: str = "discrete"
    state_labels: np.ndarray | None = None

    def __post_init__(self):
        A = np.array(self.matrix, dtype=float)
        if A.ndim != 2 or A.shape[0] != A.shape[1] or A.shape[0] == 0:
            raise ChainError("chain matrix must be square and nonempty")
        if not np.all(np.isfinite(A)):
            raise ChainError("chain matrix must be finite")
        if self.clocking == "discrete":
            if np.any(A < 0) or np.max(np.abs(A.sum(axis=1) - 1.0)) > ROW_TOL:
                raise ChainError("transition matrix must be nonnegative with unit row sums")
        elif self.clocking == "continuous":
            off = A - np.diag(np.diag(A))
            if np.any(off < 0) or np.max(np.abs(A.sum(axis=1))) > ROW_TOL:
                raise ChainError("generator must have nonnegative off-diagonal entries and zero row sums")
        else:
            raise ChainError(f"unknown clocking {self.clocking!r}")
        A.setflags(write=False)
        object.__setattr__(self, "matrix", A)
        labels = np.arange(A.shape[0], dtype=float)[:, None] if self.state_labels is None else \
            np.asarray(self.state_labels, dtype=float).reshape(A.shape[0], -1)
        object.__setattr__(self, "state_labels", labels)

    @property
    def n_states(self) -> int:
        return self.matrix.shape[0]

    @property
    def generator(self) -> np.ndarray:
        """``G`` for continuous chains, ``P - I`` for discrete ones."""
        if self.clocking == "continuous":
            return self.matrix
        return self.matrix - np.eye(self.n_states)

    def is_irreducible(self) -> bool:
        adj = (self.matrix - np.diag(np.diag(self.matrix))) > 0
        if self.n_states == 1:
            return True
        ncomp, _ = connected_components(adj, directed=True, connection="strong")
        return ncomp == 1

    def require_irreducible(self) -> None:
        if not self.is_irreducible():
            raise ChainError("chain is not irreducible")

    def semigroup(self, t: float) -> np.ndarray:
        """Transition operator at time ``t`` (integer ``t`` for discrete chains)."""
        if self.clocking == "discrete":
            k = int(round(t))
            if k != t or k < 0:
                raise ChainError("discrete chains only have integer times")
            return np.linalg.matrix_power(self.matrix, k)
        return linalg.expm(t * self.matrix)

    def fk_semigroup(self, V: np.ndarray, t: float) -> np.ndarray:
        """Feynman-Kac operator ``f -> E_x[f(X_t) exp(sum or int of V)]``.

        For discrete chains the exponent is ``sum_{k<t} V(X_k)``.
        """
        V = np.asarray(V, dtype=float)
        if self.clocking == "discrete":
            k = int(round(t))
            if k != t or k < 0:
                raise ChainError("discrete chains only have integer times")
            return np.linalg.matrix_power(np.exp(V)[:, None] * self.matrix, k)
        return linalg.expm(t * (self.matrix + np.diag(V)))


def two_state_fixture(clocking: str = "discrete") -> FiniteChain:
    """``P = [[0.9, 0.1], [0.2, 0.8]]``; continuous clocking uses ``G = P - I``."""
    P = np.array([[0.9, 0.1], [0.2, 0.8]])
    return FiniteChain(P if clocking == "discrete" else P - np.eye(2), clocking)


def random_chain(n: int, rng: np.random.Generator, clocking: str = "discrete", *, sparsity: float = 0.0) -> FiniteChain:
    """Random irreducible chain; entries are kept on a directed cycle so irreducibility is guaranteed."""
    A = rng.random((n, n)) + 0.05
    if sparsity > 0:
        A *= rng.random((n, n)) >= sparsity
    for i in range(n):
        A[i, (i + 1) % n] = max(A[i, (i + 1) % n], 0.1)
    if clocking == "discrete":
        return FiniteChain(A / A.sum(axis=1, keepdims=True), "discrete")
    np.fill_diagonal(A, 0.0)
    np.fill_diagonal(A, -A.sum(axis=1))
    return FiniteChain(A, "continuous")


def stationary(chain: FiniteChain) -> np.ndarray:
    """Unique invariant law of an irreducible chain."""
    chain.require_irreducible()
    n = chain.n_states
    A = chain.generator.T.copy()
    A[-1, :] = 1.0
    rhs = np.zeros(n)
    rhs[-1] = 1.0
    pi = np.linalg.solve(A, rhs)
    pi = np.clip(pi, 0.0, None)
    return pi / pi.sum()


@dataclass(frozen=True, eq=False)
class TiltedKernel:
    """``e^{V(x)} P(x, y)`` (discrete) or ``G + diag(V)`` (continuous)."""

    base: FiniteChain
    V: np.ndarray
    matrix: np.ndarray

    @property
    def clocking(self) -> str:
        return self.base.clocking


def tilt(chain, V) -> TiltedKernel:
    """Tilt a chain (or an already tilted kernel, accumulating potentials)."""
    if isinstance(chain, TiltedKernel):
        base, V0 = chain.base, chain.V
        Vn = np.asarray(V, dtype=float)
        if base.clocking == "discrete":
            return TiltedKernel(base, V0 + Vn, np.exp(Vn)[:, None] * chain.matrix)
        return TiltedKernel(base, V0 + Vn, chain.matrix + np.diag(Vn))
    V = np.asarray(V, dtype=float).ravel()
    if V.shape != (chain.n_states,):
        raise ChainError("potential must have one value per state")
    if chain.clocking == "discrete":
        return TiltedKernel(chain, V, np.exp(V)[:, None] * chain.matrix)
    return TiltedKernel(chain, V, chain.matrix + np.diag(V))


@dataclass(frozen=True)
class PFData:
    """Principal eigentriple of a tilted kernel.

    ``c`` is the eigenvalue of the unit-time operator, so for continuous
    chains ``c = exp(Q)`` with ``Q`` the principal eigenvalue of
    ``G + diag V``. ``h > 0`` is normalized by ``<h, mu> = 1``.
    """

    c: float
    h: np.ndarray
    mu: np.ndarray
    log_c: float
    iterations: int
    residual: float
    converged: bool
    dense_gap: float = math.nan
    shift: float = 0.0


def _power(A: np.ndarray, tol: float, max_iter: int) -> tuple[np.ndarray, float, int, bool]:
    n = A.shape[0]
    x = np.full(n, 1.0 / n)
    rho = 0.0
    for it in range(1, max_iter + 1):
        y = A @ x
        s = y.sum()
        if not s > 0:
            return x, 0.0, it, False
        y = y / s
        if np.max(np.abs(y - x)) <= tol * np.max(np.abs(y)):
            return y, float((A @ y).sum() / y.sum()), it, True
        x = y
        rho = s
    return x, float(rho), max_iter, False


def pf_eigen(tilted: TiltedKernel, tol: float = 1e-15, max_iter: int = 200000,
             *, cross_check: bool = True) -> PFData:
    """Power iteration for the principal eigentriple.

    Right and left vectors are iterated separately on a nonnegative matrix
    (the tilted kernel itself, or ``G + diag V + sI`` for continuous
    chains). If plain iteration stalls (periodic structure) it is repeated
    on a shifted matrix. For ``n <= 16`` the eigenvalue is compared with a
    dense eigensolve and the difference stored in ``dense_gap``.
    """
    tilted.base.require_irreducible()
    M = tilted.matrix
    n = M.shape[0]
    s = float(max(0.0, -np.min(np.diag(M)))) if tilted.clocking == "continuous" else 0.0
    A = M + s * np.eye(n)
    scale = float(np.max(A))
    A = A / scale
    budget = max_iter // 2 if tilted.clocking == "discrete" else max_iter
    h, rh, it1, ok1 = _power(A, tol, budget)
    mu, rl, it2, ok2 = _power(A.T, tol, budget)
    extra = 0.0
    if not (ok1 and ok2):
        extra = 1.0
        A2 = A + extra * np.eye(n)
        h, rh, j1, ok1 = _power(A2, tol, max_iter - budget)
        mu, rl, j2, ok2 = _power(A2.T, tol, max_iter - budget)
        it1, it2 = it1 + j1, it2 + j2
        rh -= extra
    rho = rh * scale - s
    mu = mu / mu.sum()
    h = h / float(h @ mu)
    if tilted.clocking == "discrete":
        c = rho
        log_c = math.log(c)
        r = max(np.max(np.abs(M @ h - c * h)) / np.max(h), np.max(np.abs(mu @ M - c * mu)) / np.max(mu))
        resid = r / c
    else:
        log_c = rho
        c = math.exp(rho)
        r = max(np.max(np.abs(M @ h - rho * h)) / np.max(h), np.max(np.abs(mu @ M - rho * mu)) / np.max(mu))
        resid = r / max(1.0, abs(rho))
    gap = math.nan
    if cross_check and n <= 16:
        ev = np.linalg.eigvals(M)
        dense = float(np.max(np.abs(ev))) if tilted.clocking == "discrete" else float(np.max(ev.real))
        gap = abs(dense - rho)
    return PFData(float(c), h, mu, float(log_c), int(max(it1, it2)), float(resid), bool(ok1 and ok2), gap, s + extra)


# --------------------------------------------------------------------------
# dense spectral route (used by the rate optimizers)


def _dense_pressure(chain: FiniteChain, V: np.ndarray, grad: bool = False):
    """Pressure and its gradient ``mu * h`` from a dense eigendecomposition."""
    if chain.clocking == "discrete":
        top = float(np.max(V))
        M = np.exp(V - top)[:, None] * chain.matrix
    else:
        top = 0.0
        M = chain.matrix + np.diag(V)
    w, vl, vr = linalg.eig(M, left=True, right=True)
    k = int(np.argmax(np.abs(w))) if chain.clocking == "discrete" else int(np.argmax(w.real))
    lam = float(w[k].real)
    Q = math.log(lam) + top if chain.clocking == "discrete" else lam
    if not grad:
        return Q
    h = np.abs(vr[:, k].real)
    mu = np.abs(vl[:, k].real)
    mu = mu / mu.sum()
    h = h / float(h @ mu)
    return Q, mu * h


def exact_pressure(chain: FiniteChain, V, *, method: str = "power") -> float:
    """``Q(V) = log c_V``.

    ``method="power"`` goes through :func:`pf_eigen`; ``"dense"`` uses a
    full eigendecomposition.
    """
    V = np.asarray(V, dtype=float)
    if method == "dense":
        chain.require_irreducible()
        return _dense_pressure(chain, V)
    return pf_eigen(tilt(chain, V), cross_check=False).log_c


@dataclass(frozen=True)
class ExactRate:
    value: float
    argmax: np.ndarray
    converged: bool
    iterations: int
    mode: str


def _check_lambda(chain: FiniteChain, lam) -> np.ndarray:
    lam = np.asarray(lam, dtype=float).ravel()
    if lam.shape != (chain.n_states,) or np.any(lam < 0) or abs(lam.sum() - 1.0) > 1e-10:
        raise ChainError("lambda must be a probability vector on the states")
    return lam


def exact_rate_legendre(chain: FiniteChain, lam, budget: int = 2000, *, full: bool = False):
    """``sup_V <V, lam> - Q(V)`` by quasi-Newton ascent with the analytic gradient ``lam - mu h``.

    The potential is gauge-fixed to vanish at the most charged state and
    parametrized as ``V = sinh(x)``, which lets boundary targets (where the
    supremum is only approached as ``|V| -> inf``) converge quickly. The
    objective is concave in ``V`` so a single start suffices.
    """
    chain.require_irreducible()
    lam = _check_lambda(chain, lam)
    n = chain.n_states
    ref = int(np.argmax(lam))
    free = [i for i in range(n) if i != ref]
    xmax = math.asinh(V_BOUND) if chain.clocking == "discrete" else math.asinh(1e8)

    def full_v(x):
        V = np.zeros(n)
        V[free] = np.sinh(x)
        return V

    def neg(x):
        V = full_v(x)
        Q, g = _dense_pressure(chain, V, grad=True)
        return -(float(V @ lam) - Q), -(lam - g)[free] * np.cosh(x)

    if n == 1:
        res_val, x, ok, nit = 0.0, np.zeros(0), True, 0
    else:
        res = minimize(neg, np.zeros(n - 1), jac=True, method="L-BFGS-B",
                       bounds=[(-xmax, xmax)] * (n - 1),
                       options=dict(maxiter=budget, ftol=1e-16, gtol=1e-14, maxcor=20))
        res_val, x, ok, nit = -float(res.fun), res.x, bool(res.success), int(res.nit)
    out = ExactRate(max(res_val, 0.0) if res_val > -1e-12 else res_val, full_v(x), ok, nit, "legendre")
    return out if full else out.value


def exact_rate_variational(chain: FiniteChain, lam, budget: int = 2000, *, full: bool = False):
    """Donsker-Varadhan form over positive ``f = exp(g)`` with ``f`` fixed to 1 at the most charged state.

    Discrete clocking maximizes ``sum lam log(f / Pf)``, continuous clocking
    ``sum lam (-G f / f)``.
    """
    chain.require_irreducible()
    lam = _check_lambda(chain, lam)
    n = chain.n_states
    A = chain.matrix
    ref = int(np.argmax(lam))
    free = [i for i in range(n) if i != ref]
    with np.errstate(divide="ignore"):
        logP = np.log(A) if chain.clocking == "discrete" else None

    def full_g(x):
        g = np.zeros(n)
        g[free] = x
        return g

    def neg(x):
        g = full_g(x)
        if chain.clocking == "discrete":
            lse = logsumexp(logP + g[None, :], axis=1)
            val = float(lam @ (g - lse))
            W = np.exp(logP + g[None, :] - lse[:, None])  # P_xy f_y / (Pf)_x
            grad = lam - lam @ W
        else:
            E = np.exp(g[None, :] - g[:, None])
            GE = A * E
            val = -float(lam @ GE.sum(axis=1))
            grad = -(lam @ GE) + lam * GE.sum(axis=1)
        return -val, -grad[free]

    if n == 1:
        val, x, ok, nit = 0.0, np.zeros(0), True, 0
    else:
        res = minimize(neg, np.zeros(n - 1), jac=True, method="L-BFGS-B",
                       bounds=[(-V_BOUND, V_BOUND)] * (n - 1),
                       options=dict(maxiter=budget, ftol=1e-16, gtol=1e-13, maxcor=20))
        val, x, ok, nit = -float(res.fun), res.x, bool(res.success), int(res.nit)
    out = ExactRate(val, np.exp(full_g(x)), ok, nit, "variational")
    return out if full else out.value


# --------------------------------------------------------------------------
# multiplicative ergodic theorem


@dataclass(frozen=True)
class METReport:
    errors: np.ndarray
    ratios: np.ndarray
    spectral_ratio: float
    limit_ratio: float
    passed: bool


def subdominant_ratio(tilted: TiltedKernel) -> float:
    """``|lambda_2| / c`` of the unit-time operator from a dense solve."""
    ev = np.linalg.eigvals(tilted.matrix)
    if tilted.clocking == "discrete":
        mods = np.sort(np.abs(ev))[::-1]
        return float(mods[1] / mods[0]) if len(mods) > 1 else 0.0
    re = np.sort(ev.real)[::-1]
    return float(math.exp(re[1] - re[0])) if len(re) > 1 else 0.0


def met_convergence(chain: FiniteChain, V, f, horizon: int = 40, *, floor: float = 1e-12) -> METReport:
    """Errors ``e_t = max |c^-t (P^V)^t f - <f, mu> h|`` for ``t = 1..horizon``.

    ``limit_ratio`` is the last ratio ``e_{t+1}/e_t`` computed while both
    errors are above ``floor`` (below it rounding dominates).
    """
    tk = tilt(chain, V)
    pf = pf_eigen(tk)
    K = tk.matrix / pf.c if chain.clocking == "discrete" else linalg.expm(tk.matrix) / pf.c
    f = np.asarray(f, dtype=float)
    target = float(f @ pf.mu) * pf.h
    x = f.copy()
    errs = []
    for _ in range(int(horizon)):
        x = K @ x
        errs.append(float(np.max(np.abs(x - target))))
    errs = np.asarray(errs)
    with np.errstate(divide="ignore", invalid="ignore"):
        ratios = errs[1:] / errs[:-1]
    spectral = subdominant_ratio(tk)
    good = np.nonzero((errs[1:] > floor) & (errs[:-1] > floor))[0]
    limit = float(ratios[good[-1]]) if good.size else 0.0
    return METReport(errs, ratios, spectral, limit, limit <= spectral + 0.05)


# --------------------------------------------------------------------------
# large deviations frequencies


def ball_distance(chain: FiniteChain, p: np.ndarray, q: np.ndarray) -> float:
    """Dual-Lipschitz distance of two laws on the states (label metric)."""
    from .empirical import dual_lipschitz_masses

    L = chain.state_labels
    D = np.sqrt(((L[:, None, :] - L[None, :, :]) ** 2).sum(-1))
    return dual_lipschitz_masses(np.asarray(p, float) - np.asarray(q, float), D)


def simplex_grid(n: int, res: int) -> np.ndarray:
    """All probability vectors with entries in ``{0, 1/res, ..., 1}``."""
    if n == 1:
        return np.ones((1, 1))
    out = []
    for head in range(res + 1):
        for tail in simplex_grid(n - 1, res - head):
            out.append(np.concatenate([[head / res], tail * (res - head) / res if res - head else tail * 0]))
    return np.array(out)


def ball_rate_infimum(chain: FiniteChain, center, radius: float, resolution: int | None = None) -> tuple[float, float]:
    """Infimum of the exact rate over the closed and the open ball, by grid search."""
    n = chain.n_states
    res = resolution or {1: 1, 2: 2000, 3: 80}.get(n, 20)
    best_closed = best_open = math.inf
    for p in simplex_grid(n, res):
        d = ball_distance(chain, p, center)
        if d <= radius + 1e-12:
            r = exact_rate_legendre(chain, p)
            best_closed = min(best_closed, r)
            if d < radius - 1e-12:
                best_open = min(best_open, r)
    return best_closed, best_open


@dataclass(frozen=True)
class LDPRow:
    k: int
    hits: int
    frequency: float
    rate: float
    mc_slack: float
    flagged: bool


@dataclass(frozen=True)
class LDPTable:
    rows: list
    inf_closed: float
    inf_open: float
    center: np.ndarray
    radius: float
    samples: int
    seed: int

    @property
    def last(self) -> LDPRow:
        return self.rows[-1]

    def bracketed(self, slack: float | None = None) -> bool:
        row = self.last
        s = row.mc_slack if slack is None else slack
        return self.inf_closed - s <= row.rate <= self.inf_open + s

    def to_tsv(self) -> str:
        lines = ["k\thits\tfrequency\trate\tmc_slack\tflagged"]
        for r in self.rows:
            lines.append(f"{r.k}\t{r.hits}\t{r.frequency!r}\t{r.rate!r}\t{r.mc_slack!r}\t{int(r.flagged)}")
        return "\n".join(lines) + "\n"


def sample_occupation_counts(chain: FiniteChain, k_list: Sequence[int], samples: int, seed: int,
                             init=None) -> dict[int, np.ndarray]:
    """Visit counts over the first ``k`` states of ``samples`` discrete-time paths.

    Path ``i`` draws its uniforms from the stream ``split_seed(seed, i)``.
    """
    if chain.clocking != "discrete":
        raise ChainError("frequency experiments run on discrete chains")
    n = chain.n_states
    kmax = int(max(k_list))
    init = stationary(chain) if init is None else np.asarray(init, dtype=float)
    U = np.empty((samples, kmax))
    for i in range(samples):
        U[i] = make_rng(split_seed(seed, i)).random(kmax)
    cum = np.cumsum(chain.matrix, axis=1)
    cum[:, -1] = 1.0
    cinit = np.cumsum(init)
    cinit[-1] = 1.0
    x = np.searchsorted(cinit, U[:, 0], side="right")
    counts = np.zeros((samples, n), dtype=np.int64)
    out = {}
    wanted = set(int(k) for k in k_list)
    rows = np.arange(samples)
    for step in range(kmax):
        counts[rows, x] += 1
        if step + 1 in wanted:
            out[step + 1] = counts.copy()
        if step + 1 < kmax:
            x = (U[:, step + 1][:, None] > cum[x]).sum(axis=1)
    return out


def ldp_frequency(chain: FiniteChain, center, radius: float, k_list: Sequence[int], samples: int, seed: int,
                  *, init=None, min_hits: int = 5) -> LDPTable:
    """Empirical ``-(1/k) log P{zeta_k in ball}`` against the exact infimum over the ball.

    ``mc_slack`` is three delta-method standard errors of the empirical
    rate; rows with fewer than ``min_hits`` hits are flagged.
    """
    center = np.asarray(center, dtype=float)
    counts = sample_occupation_counts(chain, k_list, samples, seed, init)
    rows = []
    for k in sorted(counts):
        C = counts[k]
        uniq, inv = np.unique(C, axis=0, return_inverse=True)
        inside = np.array([ball_distance(chain, u / k, center) <= radius + 1e-12 for u in uniq])
        hits = int(inside[inv.ravel()].sum())
        freq = hits / samples
        rate = -math.log(freq) / k if hits else math.inf
        slack = 3.0 * math.sqrt((1 - freq) / (freq * samples)) / k if hits else math.inf
        rows.append(LDPRow(int(k), hits, freq, rate, slack, hits < min_hits))
    lo, hi = ball_rate_infimum(chain, center, radius)
    return LDPTable(rows, lo, hi, center, float(radius), int(samples), int(seed))


# --------------------------------------------------------------------------
# documents


def chain_to_doc(chain: FiniteChain) -> dict:
    return {"n_states": chain.n_states, "clocking": chain.clocking,
            "kernel": chain.matrix.tolist(), "state_labels": chain.state_labels.tolist()}


def chain_from_doc(doc: Mapping) -> FiniteChain:
    if "fixture" in doc:
        return two_state_fixture(doc.get("clocking", "discrete"))
    for key in ("n_states", "kernel"):
        if key not in doc:
            raise ChainError(f"chain document lacks field {key!r}")
    kernel = np.asarray(doc["kernel"], dtype=float)
    if kernel.shape != (int(doc["n_states"]),) * 2:
        raise ChainError("kernel shape does not match n_states")
    return FiniteChain(kernel, doc.get("clocking", "discrete"), doc.get("state_labels"))


def pf_to_tsv(pf: PFData) -> str:
    lines = [f"# c={pf.c!r} log_c={pf.log_c!r} iterations={pf.iterations} residual={pf.residual!r} "
             f"converged={pf.converged} dense_gap={pf.dense_gap!r}", "state\th\tmu"]
    for i, (a, b) in enumerate(zip(pf.h, pf.mu)):
        lines.append(f"{i}\t{float(a)!r}\t{float(b)!r}")
    return "\n".join(lines) + "\n"


def save_chain(chain: FiniteChain, path) -> None:
    with open(path, "w") as fh:
        json.dump(chain_to_doc(chain), fh, indent=1)
        fh.write("\n")


