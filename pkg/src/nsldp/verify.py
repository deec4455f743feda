"""Acceptance criteria grouped into named suites.

Every criterion is a function of a :class:`VerifyContext` and returns a
:class:`Criterion` with its measured values. The torus builder is
injectable, which is how the mutation test swaps in a model with a broken
tensor.
"""

from __future__ import annotations

import math
import tempfile
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import chain_oracle as co
from . import dv_rate as dv
from .empirical import exp_equiv_gap
from .feynman_kac import duhamel_residual, pressure_mc
from .galerkin import apply_nonlinearity, build_torus_model, linear_model, norm_sq
from .probes import foias_decay_check
from .sde import energy_identity_streamed, load_trajectory, make_rng, save_trajectory, simulate, split_seed, step


@dataclass(frozen=True)
class VerifyContext:
    model_builder: Callable = build_torus_model
    workdir: Path | None = None


@dataclass(frozen=True)
class Criterion:
    name: str
    passed: bool
    values: dict = field(default_factory=dict)
    seconds: float = 0.0

    def line(self) -> str:
        shown = ", ".join(f"{k}={_fmt(v)}" for k, v in self.values.items())
        return f"{'PASS' if self.passed else 'FAIL'} {self.name}: {shown} ({self.seconds:.1f}s)"

    def to_doc(self) -> dict:
        return {"name": self.name, "passed": bool(self.passed), "seconds": self.seconds,
                "values": {k: _plain(v) for k, v in self.values.items()}}


def _fmt(v) -> str:
    if isinstance(v, float):
        return f"{v:.6g}"
    if isinstance(v, (list, tuple)):
        return "[" + ", ".join(_fmt(x) for x in v) + "]"
    return str(v)


def _plain(v):
    if isinstance(v, (np.floating, np.integer)):
        return v.item()
    if isinstance(v, np.ndarray):
        return v.tolist()
    if isinstance(v, (list, tuple)):
        return [_plain(x) for x in v]
    return v


# fixtures shared by several criteria
ENERGY_FORCING = {0: 1.0, 3: -0.5}
ENERGY_NOISE = 0.5
TORUS_FORCING = {0: 1.0}
TORUS_NOISE = 0.5


def energy_initial_state(n: int) -> np.ndarray:
    u0 = np.zeros(n)
    u0[0], u0[5], u0[9] = 1.0, -1.0, 0.5
    return u0


# --------------------------------------------------------------------------
# criteria


def cancellation(ctx: VerifyContext) -> dict:
    model = ctx.model_builder(3)
    rng = make_rng(split_seed(20240601, 0))
    U = rng.standard_normal((1000, model.n_modes)) * np.exp(rng.normal(0.0, 2.0, size=(1000, 1)))
    B = apply_nonlinearity(model, U)
    lhs = np.abs(np.sum(B * U, axis=1))
    rhs = 1e-10 * np.sqrt(norm_sq(U)) * np.maximum(np.sqrt(norm_sq(B)), 1.0)
    return {"passed": bool(np.all(lhs <= rhs)), "worst_ratio": float(np.max(lhs / rhs)),
            "states": len(U), "n_modes": model.n_modes, "time_limit": 10.0}


def energy_identity(ctx: VerifyContext) -> dict:
    model = ctx.model_builder(2, ENERGY_FORCING, ENERGY_NOISE)
    u0 = energy_initial_state(model.n_modes)
    plain, coarse, _ = energy_identity_streamed(model, u0, 10_000, 1.0, 1e-3, 7)
    _, fine, _ = energy_identity_streamed(model, u0, 10_000, 1.0, 5e-4, 7)
    ratio = abs(coarse) / abs(fine) if fine else math.inf
    return {"passed": abs(plain) <= 0.05 and ratio >= 1.5, "residual": plain,
            "deterministic_dt": coarse, "deterministic_half_dt": fine, "halving_ratio": ratio,
            "time_limit": 300.0}


def ou_exactness(ctx: VerifyContext) -> dict:
    alpha = np.array([1.0, 2.0, 3.0, 4.0])
    b = np.array([1.0, 0.5, 2.0, 1.0])
    model = linear_model(alpha, b)
    u0 = np.array([1.0, -2.0, 0.5, 3.0])
    dt, n = 0.1, 100_000
    xi = make_rng(split_seed(99, 0)).standard_normal((n, 4))
    X = step(model, np.broadcast_to(u0, (n, 4)).copy(), dt, xi)
    mean = np.exp(-alpha * dt) * u0
    var = b**2 * (1 - np.exp(-2 * alpha * dt)) / (2 * alpha)
    z_mean = np.abs(X.mean(0) - mean) / np.sqrt(var / n)
    z_var = np.abs(X.var(0, ddof=1) - var) / (var * math.sqrt(2.0 / n))
    return {"passed": bool(np.all(z_mean <= 4) and np.all(z_var <= 4)),
            "max_z_mean": float(z_mean.max()), "max_z_var": float(z_var.max()), "draws": n}


def duhamel(ctx: VerifyContext) -> dict:
    rng = make_rng(split_seed(5, 0))
    worst = 0.0
    for _ in range(5):
        chain = co.random_chain(4, rng, "continuous")
        V, f = rng.standard_normal(4), rng.standard_normal(4)
        worst = max(worst, duhamel_residual(chain, V, f, 1.0, nodes=100).residual)
    return {"passed": worst <= 1e-6, "worst_residual": worst, "chains": 5, "nodes": 100, "time_limit": 10.0}


def oracle_eigen(ctx: VerifyContext) -> dict:
    P = co.two_state_fixture()
    log2 = math.log(2.0)
    doubled = co.pf_eigen(co.tilt(P, [log2, log2]))
    literal = co.pf_eigen(co.tilt(P, [log2, 0.0]))
    base = co.pf_eigen(co.tilt(P, [0.0, 0.0]))
    literal_c = 1.3 + math.sqrt(0.29)
    ok = (abs(doubled.c - 2.0) <= 1e-10 and abs(doubled.log_c - log2) <= 1e-10
          and abs(literal.c - literal_c) <= 1e-10 and abs(base.c - 1.0) <= 1e-10
          and np.max(np.abs(base.mu - [2 / 3, 1 / 3])) <= 1e-10
          and doubled.converged and literal.converged and base.converged)
    return {"passed": bool(ok), "c_tilt_2P": doubled.c, "Q_tilt_2P": doubled.log_c,
            "c_V_log2_0": literal.c, "c_V_0": base.c, "mu_V_0": base.mu.tolist(),
            "dense_gap": max(doubled.dense_gap, literal.dense_gap, base.dense_gap)}


def rate_duality(ctx: VerifyContext) -> dict:
    rng = make_rng(split_seed(6, 0))
    worst, worst_stat = 0.0, 0.0
    for i in range(20):
        n = int(rng.integers(2, 7))
        chain = co.random_chain(n, rng, "discrete" if i % 2 == 0 else "continuous")
        lam = rng.dirichlet(np.ones(n))
        a = co.exact_rate_legendre(chain, lam)
        b = co.exact_rate_variational(chain, lam)
        worst = max(worst, abs(a - b))
        pi = co.stationary(chain)
        worst_stat = max(worst_stat, co.exact_rate_legendre(chain, pi), co.exact_rate_variational(chain, pi))
    fix = co.exact_rate_legendre(co.two_state_fixture(), [1.0, 0.0])
    err = abs(fix + math.log(0.9))
    return {"passed": worst <= 1e-6 and worst_stat <= 1e-8 and err <= 1e-6, "worst_gap": worst,
            "worst_stationary_rate": worst_stat, "fixture_rate": fix, "fixture_error": err}


def resolvent_calculus(ctx: VerifyContext) -> dict:
    rng = make_rng(split_seed(7, 0))
    chains = [co.two_state_fixture(), co.two_state_fixture("continuous"), co.random_chain(4, rng, "continuous")]
    monotone, gen_err, comm_err = True, 0.0, 0.0
    errs_all = []
    for chain in chains:
        f = rng.uniform(0.5, 2.0, chain.n_states)
        errs = [float(np.max(np.abs(a * dv.resolvent(chain, f, a).values - f))) for a in (1.0, 10.0, 100.0)]
        errs_all.append(errs)
        monotone &= errs[0] > errs[1] > errs[2]
        Rf = dv.resolvent(chain, f, 3.0).values
        probe = dv.GeneratorProbe(chain)
        direct = dv.generator_apply(probe, Rf, method="matrix")
        ident = dv.generator_apply(probe, Rf, resolvent_source=f, alpha=3.0)
        gen_err = max(gen_err, float(np.max(np.abs(direct - ident))))
        Pt = dv._chain_semigroup(chain, 0.7)
        comm_err = max(comm_err, float(np.max(np.abs(Pt @ Rf - dv.resolvent(chain, Pt @ f, 3.0).values))))
    return {"passed": bool(monotone and gen_err <= 1e-8 and comm_err <= 1e-8), "alpha_errors": errs_all,
            "generator_identity_error": gen_err, "commutation_error": comm_err}


def entropy_properties(ctx: VerifyContext) -> dict:
    P = co.two_state_fixture()
    pm = dv.MarkovProcessMeasure(P, np.full((2, 2), 0.5))
    H1 = dv.dv_entropy(pm, 1)
    scaling = all(dv.dv_entropy(pm, t) == t * H1 for t in range(1, 11))
    rng = make_rng(split_seed(8, 0))
    worst = math.inf
    for i in range(100):
        n = int(rng.integers(2, 5))
        Pc = co.random_chain(n, rng, "discrete")
        Q = 0.5 * Pc.matrix + 0.5 * rng.dirichlet(np.ones(n), size=n)
        worst = min(worst, dv.contraction_gap(Pc, Q))
    witness = max(abs(dv.contraction_gap(P, dv.optimal_kernel(P, [0.3, 0.7]))),
                  abs(dv.contraction_gap(co.two_state_fixture("continuous"),
                                         dv.optimal_kernel(co.two_state_fixture("continuous"), [0.3, 0.7]))))
    return {"passed": bool(scaling and abs(H1 - 0.3670) <= 1e-4 and worst >= -1e-8 and witness <= 1e-6),
            "H": H1, "scaling_exact": scaling, "min_gap": worst, "witness_gap": witness}


def met(ctx: VerifyContext) -> dict:
    P = co.two_state_fixture()
    V = [math.log(2.0)] * 2
    rep = co.met_convergence(P, V, [1.0, 3.0], horizon=40)
    pf = co.pf_eigen(co.tilt(P, V))
    rep_h = co.met_convergence(P, V, pf.h, horizon=40)
    return {"passed": bool(abs(rep.limit_ratio - 0.7) <= 0.05 and np.all(rep_h.errors <= 1e-12)),
            "limit_ratio": rep.limit_ratio, "spectral_ratio": rep.spectral_ratio,
            "max_error_f_eq_h": float(np.max(rep_h.errors))}


def exp_equivalence(ctx: VerifyContext) -> dict:
    model = ctx.model_builder(2, TORUS_FORCING, TORUS_NOISE)
    traj = simulate(model, np.zeros(model.n_modes), 23.0, 0.02, 3)
    with tempfile.TemporaryDirectory() as tmp:
        path = Path(tmp) / "traj.bin"
        save_trajectory(traj, path)
        stored = load_trajectory(path)
    gaps, bounds, ok = [], [], True
    for t in (5.0, 10.0, 20.0):
        r = exp_equiv_gap(stored, t, 2.0)
        gaps.append(r.gap)
        bounds.append(r.bound + r.slack)
        ok &= r.passed and r.slack <= 2 * stored.dt
    return {"passed": bool(ok), "gaps": gaps, "bounds": bounds}


def coupling_decay(ctx: VerifyContext) -> dict:
    model = ctx.model_builder(2, TORUS_FORCING, TORUS_NOISE)
    n = model.n_modes
    rng = make_rng(split_seed(10, 0))
    u0 = rng.standard_normal(n)
    d = rng.standard_normal(n)
    d *= 0.1 / math.sqrt(float(norm_sq(d)))
    ok, worst = True, 0.0
    for N in (1, n // 2, n):
        for a in (1.0, 5.0):
            rep = foias_decay_check(model, u0, u0 + d, N, a, 2.0, 0.01, seed=11)
            ok &= rep.passed
            worst = max(worst, rep.summary["worst_ratio"])
    return {"passed": bool(ok), "worst_ratio": worst, "slack": 10 * 0.01, "levels": [1, n // 2, n],
            "time_limit": 60.0}


def ldp_bracket(ctx: VerifyContext) -> dict:
    table = co.ldp_frequency(co.two_state_fixture(), [1.0, 0.0], 0.05, [50, 100, 200], 100_000, 11)
    row = table.last
    err = abs(row.rate - table.inf_closed)
    return {"passed": bool(err <= 0.05), "rate": row.rate, "hits": row.hits, "exact_inf": table.inf_closed,
            "difference": err, "time_limit": 120.0}


def pressure_consistency(ctx: VerifyContext) -> dict:
    chain = co.two_state_fixture("continuous")
    V = [math.log(2.0), 0.0]
    exact = co.exact_pressure(chain, V)
    ests = [pressure_mc(chain, V, [10, 15, 20, 25, 30], 20_000, 5 + k, init) for k, init in
            enumerate(([1.0, 0.0], [0.2, 0.8]))]
    each = [abs(e.value - exact) <= 3 * e.std_error for e in ests]
    cross = abs(ests[0].value - ests[1].value) <= 3 * math.hypot(ests[0].std_error, ests[1].std_error)
    return {"passed": bool(all(each) and cross), "exact": exact, "estimates": [e.value for e in ests],
            "std_errors": [e.std_error for e in ests]}


def determinism(ctx: VerifyContext) -> dict:
    from .runner import example_configs, run_config

    ok, files = True, 0
    with tempfile.TemporaryDirectory() as tmp:
        for name, cfg in example_configs().items():
            a = run_config(cfg, Path(tmp) / "a")
            b = run_config(cfg, Path(tmp) / "b")
            ok &= a.manifest == b.manifest and bool(a.manifest)
            files += len(a.manifest)
    return {"passed": bool(ok), "configs": len(example_configs()), "artifacts": files}


CRITERIA = {
    "cancellation": cancellation,
    "energy_identity": energy_identity,
    "ou_exactness": ou_exactness,
    "duhamel": duhamel,
    "oracle_eigen": oracle_eigen,
    "rate_duality": rate_duality,
    "resolvent": resolvent_calculus,
    "entropy": entropy_properties,
    "met": met,
    "exp_equivalence": exp_equivalence,
    "coupling_decay": coupling_decay,
    "ldp_bracket": ldp_bracket,
    "pressure_consistency": pressure_consistency,
    "determinism": determinism,
}

SUITES = {
    "algebraic": ["cancellation", "ou_exactness", "duhamel", "oracle_eigen", "rate_duality", "resolvent",
                  "entropy", "met"],
    "stochastic": ["energy_identity", "exp_equivalence", "coupling_decay", "ldp_bracket", "pressure_consistency"],
    "determinism": ["determinism"],
    "acceptance": list(CRITERIA),
}


def run_criterion(name: str, ctx: VerifyContext | None = None) -> Criterion:
    ctx = ctx or VerifyContext()
    start = time.perf_counter()
    values = CRITERIA[name](ctx)
    seconds = time.perf_counter() - start
    passed = bool(values.pop("passed"))
    limit = values.get("time_limit")
    if limit is not None and seconds > limit:
        passed = False
    return Criterion(name, passed, values, seconds)


def run_suite(suite: str, ctx: VerifyContext | None = None, *, echo: Callable[[str], None] | None = None) -> list:
    if suite not in SUITES:
        raise KeyError(f"unknown suite {suite!r}; available: {', '.join(SUITES)}")
    out = []
    for name in SUITES[suite]:
        c = run_criterion(name, ctx)
        if echo:
            echo(c.line())
        out.append(c)
    return out
