"""Config-driven experiment runs with a hashed run registry.

A run directory is named after the kind and the hash of the canonical
config, holds ``config.json``, the numeric artifacts and ``record.json``.
The manifest lists a sha256 for every file except the record itself, which
carries the timestamps, so reruns of a config give identical manifests.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
import shutil
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Mapping

import numpy as np
import yaml
from filelock import FileLock

from . import chain_oracle as co
from . import dv_rate as dv
from .feynman_kac import potential_from_doc, pressure_mc, state_potential
from .galerkin import ModelError, export_model, model_from_config, norm_sq
from .probes import (doubly_log_probe, exp_moment_probe, foias_decay_check, hitting_time, moment_probe,
                     recurrence_moment)
from .sde import energy_identity_residual, ensemble, make_rng, save_ensemble, split_seed

OUTPUT_ENV = "NSLDP_OUTPUT_ROOT"
KINDS = ("simulate", "pressure", "rate", "oracle", "couple", "probes", "entropy")
REQUIRED = object()


class ConfigError(ValueError):
    """Invalid config; ``problems`` lists every violated field."""

    def __init__(self, problems: list[str]):
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


class AssertionFailure(RuntimeError):
    pass


@dataclass
class RunRecord:
    config_hash: str
    run_dir: Path
    started: str
    finished: str
    manifest: dict
    assertions: dict
    parameters: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return all(a["passed"] for a in self.assertions.values())

    def to_doc(self) -> dict:
        return {"config_hash": self.config_hash, "started": self.started, "finished": self.finished,
                "manifest": self.manifest, "assertions": self.assertions, "parameters": self.parameters,
                "passed": self.passed}


# --------------------------------------------------------------------------
# config handling


def load_config(path) -> dict:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError([f"cannot read config {str(path)!r}: {exc.strerror}"]) from exc
    try:
        doc = json.loads(text) if path.suffix == ".json" else yaml.safe_load(text)
    except (json.JSONDecodeError, yaml.YAMLError) as exc:
        raise ConfigError([f"config is not valid {'JSON' if path.suffix == '.json' else 'YAML'}: {exc}"]) from exc
    if not isinstance(doc, dict):
        raise ConfigError(["config must be a mapping"])
    return doc


def canonical(doc: Mapping) -> str:
    return json.dumps(_jsonable(doc), sort_keys=True, separators=(",", ":"))


def _jsonable(x):
    if isinstance(x, Mapping):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.ndarray):
        return _jsonable(x.tolist())
    if isinstance(x, (np.floating, np.integer, np.bool_)):
        return x.item()
    if isinstance(x, float) and not math.isfinite(x):
        return repr(x)
    return x


def config_hash(cfg: Mapping) -> str:
    body = {k: v for k, v in cfg.items() if k != "output"}
    return hashlib.sha256(canonical(body).encode()).hexdigest()


def _float(v):
    if isinstance(v, bool):
        raise TypeError
    return float(v)


def _int(v):
    if isinstance(v, bool) or float(v) != int(float(v)):
        raise TypeError
    return int(float(v))


def _floats(v):
    if not isinstance(v, (list, tuple)):
        raise TypeError
    return [_float(x) for x in v]


def _ints(v):
    if not isinstance(v, (list, tuple)):
        raise TypeError
    return [_int(x) for x in v]


def _opt(conv):
    return lambda v: None if v is None else conv(v)


def _mapping(v):
    if not isinstance(v, Mapping):
        raise TypeError
    return dict(v)


def _strs(v):
    if not isinstance(v, (list, tuple)) or not all(isinstance(x, str) for x in v):
        raise TypeError
    return list(v)


def _matrix(v):
    a = np.asarray(v, dtype=float)
    if a.ndim != 2:
        raise TypeError
    return a.tolist()


def _probe_list(v):
    if not isinstance(v, (list, tuple)) or not all(isinstance(x, Mapping) and "probe" in x for x in v):
        raise TypeError
    return [dict(x) for x in v]


SCHEMAS = {
    "simulate": {"horizon": (_float, REQUIRED), "dt": (_float, REQUIRED), "count": (_int, 1),
                 "u0": (_opt(_floats), None), "batch_size": (_int, 512), "energy_t": (_opt(_float), None)},
    "pressure": {"t_list": (_floats, REQUIRED), "count": (_int, REQUIRED), "dt": (_float, 0.01),
                 "V": (_opt(_floats), None), "potential": (_opt(_mapping), None), "init": (_opt(_floats), None)},
    "rate": {"lam": (_floats, REQUIRED), "modes": (_strs, ["exact", "legendre", "variational"]),
             "budget": (_int, 8000), "restarts": (_int, 8)},
    "oracle": {"V": (_floats, REQUIRED), "f": (_opt(_floats), None), "horizon": (_int, 40)},
    "couple": {"N_list": (_ints, REQUIRED), "a_list": (_floats, REQUIRED), "horizon": (_float, REQUIRED),
               "dt": (_float, REQUIRED), "distance": (_float, 0.1), "u0": (_opt(_floats), None)},
    "probes": {"probes": (_probe_list, REQUIRED)},
    "entropy": {"kernel": (_matrix, REQUIRED), "t_max": (_int, 10)},
}
NEEDS = {"simulate": "model", "couple": "model", "probes": "model", "rate": "chain", "oracle": "chain",
         "entropy": "chain", "pressure": None}

PROBE_SCHEMAS = {
    "hitting": {"radius": (_float, REQUIRED), "horizon": (_float, REQUIRED), "dt": (_float, REQUIRED),
                "u0": (_floats, REQUIRED), "window": (_float, 0.0)},
    "recurrence": {"kappa": (_float, REQUIRED), "radius": (_float, REQUIRED), "count": (_int, REQUIRED),
                   "horizon": (_float, REQUIRED), "dt": (_float, REQUIRED), "u0": (_opt(_floats), None)},
    "moment": {"m": (_int, REQUIRED), "t_grid": (_floats, REQUIRED), "count": (_int, REQUIRED),
               "u0": (_floats, REQUIRED), "dt": (_float, 0.01), "sup_window": (_float, 1.0)},
    "exp_moment": {"kappa_list": (_floats, REQUIRED), "t": (_float, REQUIRED), "count": (_int, REQUIRED),
                   "dt": (_float, 0.01), "u0": (_opt(_floats), None)},
    "doubly_log": {"t": (_float, REQUIRED), "T": (_float, REQUIRED), "count": (_int, REQUIRED),
                   "u0_list": (lambda v: [_floats(x) for x in v], REQUIRED), "dt": (_float, 0.01)},
}


def _apply_schema(schema: Mapping, given: Mapping, where: str, problems: list) -> dict:
    out = {}
    for key in given:
        if key not in schema:
            problems.append(f"{where}.{key}: unknown parameter")
    for key, (conv, default) in schema.items():
        if key not in given:
            if default is REQUIRED:
                problems.append(f"{where}.{key}: required")
            else:
                out[key] = default
            continue
        try:
            out[key] = conv(given[key])
        except (TypeError, ValueError):
            problems.append(f"{where}.{key}: invalid value {given[key]!r}")
    return out


def validate(cfg: Mapping) -> dict:
    """Check a config and return its parameters with defaults filled in.

    Raises
    ------
    ConfigError
        Listing every problem found.
    """
    problems = []
    if not isinstance(cfg, Mapping):
        raise ConfigError(["config must be a mapping"])
    for key in cfg:
        if key not in ("kind", "master_seed", "model", "chain", "params", "output"):
            problems.append(f"{key}: unknown field")
    kind = cfg.get("kind")
    if kind not in KINDS:
        problems.append(f"kind: must be one of {', '.join(KINDS)} (got {kind!r})")
    seed = cfg.get("master_seed")
    try:
        _int(seed)
        if int(seed) < 0:
            problems.append("master_seed: must be nonnegative")
    except (TypeError, ValueError):
        problems.append("master_seed: required integer")
    params = cfg.get("params", {})
    if not isinstance(params, Mapping):
        problems.append("params: must be a mapping")
        params = {}
    resolved = {}
    if kind in KINDS:
        need = NEEDS[kind]
        if need == "model" and not isinstance(cfg.get("model"), Mapping):
            problems.append("model: required mapping")
        if need == "chain" and not isinstance(cfg.get("chain"), Mapping):
            problems.append("chain: required mapping")
        if need is None and not (isinstance(cfg.get("model"), Mapping) or isinstance(cfg.get("chain"), Mapping)):
            problems.append("model or chain: one is required")
        resolved = _apply_schema(SCHEMAS[kind], params, "params", problems)
        if kind == "probes" and "probes" in resolved:
            out = []
            for i, spec in enumerate(resolved["probes"]):
                name = spec.get("probe")
                if name not in PROBE_SCHEMAS:
                    problems.append(f"params.probes[{i}].probe: unknown probe {name!r}")
                    continue
                body = {k: v for k, v in spec.items() if k != "probe"}
                out.append({"probe": name, **_apply_schema(PROBE_SCHEMAS[name], body, f"params.probes[{i}]", problems)})
            resolved["probes"] = out
        if kind == "pressure" and isinstance(cfg.get("chain"), Mapping) and resolved.get("V") is None:
            problems.append("params.V: required for chain pressure")
        if kind == "pressure" and isinstance(cfg.get("model"), Mapping) and resolved.get("potential") is None:
            problems.append("params.potential: required for model pressure")
    if problems:
        raise ConfigError(problems)
    return resolved


# --------------------------------------------------------------------------
# execution


class _Writer:
    def __init__(self, root: Path):
        self.root = root

    def text(self, name: str, body: str) -> None:
        (self.root / name).write_text(body)

    def json(self, name: str, doc) -> None:
        (self.root / name).write_text(json.dumps(_jsonable(doc), sort_keys=True, indent=1) + "\n")


def _check(assertions: dict, name: str, passed: bool, **values) -> None:
    assertions[name] = {"passed": bool(passed), "values": _jsonable(values)}


def _model(cfg):
    try:
        return model_from_config(cfg["model"])
    except (ModelError, ValueError, KeyError, OSError) as exc:
        raise ConfigError([f"model: {exc}"]) from exc


def _chain(cfg):
    try:
        return co.chain_from_doc(cfg["chain"])
    except (co.ChainError, ValueError, KeyError) as exc:
        raise ConfigError([f"chain: {exc}"]) from exc


def _run_simulate(cfg, p, seed, out: _Writer, checks):
    model = _model(cfg)
    u0 = np.zeros(model.n_modes) if p["u0"] is None else np.asarray(p["u0"])
    ens = ensemble(model, u0, p["count"], p["horizon"], p["dt"], seed, batch_size=p["batch_size"])
    out.json("model.json", export_model(model))
    save_ensemble(ens, out.root / "ensemble")
    sq = norm_sq(ens.states).mean(axis=0) if len(ens) else np.zeros(0)
    out.text("mean_energy.tsv", "t\tmean_norm_sq\n" + "".join(f"{i * p['dt']!r}\t{v!r}\n" for i, v in enumerate(sq)))
    _check(checks, "blowup_fraction", ens.blowup_fraction <= 0.01, blowup_fraction=ens.blowup_fraction)
    if p["energy_t"] is not None:
        r = energy_identity_residual(ens, p["energy_t"])
        out.json("energy.json", {"t": p["energy_t"], "residual": r})
        _check(checks, "energy_identity_finite", math.isfinite(r), residual=r)


def _run_pressure(cfg, p, seed, out, checks):
    if "chain" in cfg:
        chain = _chain(cfg)
        est = pressure_mc(chain, p["V"], p["t_list"], p["count"], seed, p["init"])
        exact = co.exact_pressure(chain, p["V"])
        out.text("pressure.tsv", est.to_tsv())
        out.json("pressure.json", {"value": est.value, "std_error": est.std_error, "exact": exact})
        _check(checks, "matches_exact", abs(est.value - exact) <= 3 * est.std_error,
               value=est.value, exact=exact, std_error=est.std_error)
        return
    model = _model(cfg)
    doc = p["potential"]
    V = potential_from_doc(doc) if "features" in doc and "N" in doc else state_potential(
        doc.get("coeffs", []), doc.get("features", [[0.0] * model.n_modes]), doc.get("offsets"), doc.get("c0", 0.0))
    u0 = np.zeros(model.n_modes) if p["init"] is None else np.asarray(p["init"])
    est = pressure_mc(model, V, p["t_list"], p["count"], seed, u0, dt=p["dt"])
    out.text("pressure.tsv", est.to_tsv())
    _check(checks, "finite", math.isfinite(est.value) and math.isfinite(est.std_error), value=est.value,
           std_error=est.std_error, blowup_fraction=est.blowup_fraction)


def _run_rate(cfg, p, seed, out, checks):
    chain = _chain(cfg)
    lam = np.asarray(p["lam"])
    doc = {"target": lam, "clocking": chain.clocking}
    exact = None
    if "exact" in p["modes"]:
        ex = dv.exact_rate(chain, lam)
        exact = ex.value
        doc["exact_chain"] = {"value": ex.value, "argmax": ex.argmax_params, "diagnostics": ex.diagnostics}
        _check(checks, "exact_routes_agree",
               abs(ex.diagnostics["legendre"] - ex.diagnostics["variational"]) <= dv.EXACT_AGREEMENT,
               legendre=ex.diagnostics["legendre"], variational=ex.diagnostics["variational"])
    for mode in ("legendre", "variational"):
        if mode not in p["modes"]:
            continue
        if mode == "legendre":
            r = dv.legendre_rate(chain, lam, search_budget=p["budget"], seed=seed, restarts=p["restarts"])
        else:
            r = dv.variational_rate(lam, dv.GeneratorProbe(chain), p["budget"], seed=seed, restarts=p["restarts"])
        doc[mode] = {"value": r.value, "argmax": r.argmax_params, "converged": r.converged,
                     "diagnostics": r.diagnostics}
        _check(checks, f"{mode}_nonnegative", r.value >= -1e-8, value=r.value)
        if exact is not None:
            _check(checks, f"{mode}_below_exact", r.value <= exact + 1e-6, value=r.value, exact=exact)
    out.json("rate.json", doc)


def _run_oracle(cfg, p, seed, out, checks):
    chain = _chain(cfg)
    tk = co.tilt(chain, p["V"])
    pf = co.pf_eigen(tk)
    out.text("pf.tsv", co.pf_to_tsv(pf))
    f = np.ones(chain.n_states) if p["f"] is None else np.asarray(p["f"])
    rep = co.met_convergence(chain, p["V"], f, p["horizon"])
    out.text("met.tsv", "t\terror\n" + "".join(f"{i + 1}\t{e!r}\n" for i, e in enumerate(rep.errors)))
    out.json("oracle.json", {"c": pf.c, "log_c": pf.log_c, "h": pf.h, "mu": pf.mu,
                             "spectral_ratio": rep.spectral_ratio, "limit_ratio": rep.limit_ratio})
    _check(checks, "power_converged", pf.converged, residual=pf.residual, dense_gap=pf.dense_gap)
    _check(checks, "met_ratio", rep.passed, limit_ratio=rep.limit_ratio, spectral_ratio=rep.spectral_ratio)


def _run_couple(cfg, p, seed, out, checks):
    model = _model(cfg)
    rng = make_rng(split_seed(seed, 0))
    u0 = rng.standard_normal(model.n_modes) if p["u0"] is None else np.asarray(p["u0"])
    d = rng.standard_normal(model.n_modes)
    d *= p["distance"] / math.sqrt(float(norm_sq(d)))
    for N in p["N_list"]:
        for a in p["a_list"]:
            rep = foias_decay_check(model, u0, u0 + d, N, a, p["horizon"], p["dt"], seed=split_seed(seed, 1))
            out.text(f"coupling_N{N}_a{a!r}.tsv", rep.to_tsv())
            _check(checks, f"decay_N{N}_a{a!r}", rep.passed, **{k: v for k, v in rep.summary.items() if k != "passed"})


def _run_probes(cfg, p, seed, out, checks):
    model = _model(cfg)
    for i, spec in enumerate(p["probes"]):
        s = split_seed(seed, i)
        kind = spec["probe"]
        tag = f"{i:02d}_{kind}"
        if kind == "hitting":
            tau = hitting_time(model, spec["u0"], spec["radius"], spec["horizon"], spec["dt"], s, window=spec["window"])
            out.json(f"{tag}.json", {"tau": tau, "seed": s})
            _check(checks, tag, True, tau=tau)
            continue
        if kind == "recurrence":
            t = recurrence_moment(model, spec["kappa"], spec["radius"], spec["count"], spec["horizon"], spec["dt"],
                                  s, initial=spec["u0"])
        elif kind == "moment":
            t = moment_probe(model, spec["m"], spec["t_grid"], spec["count"], s, spec["u0"], dt=spec["dt"],
                             sup_window=spec["sup_window"])
        elif kind == "exp_moment":
            t = exp_moment_probe(model, spec["kappa_list"], spec["t"], spec["count"], s, u0=spec["u0"], dt=spec["dt"])
        else:
            t = doubly_log_probe(model, spec["t"], spec["T"], spec["count"], s, spec["u0_list"], dt=spec["dt"])
        out.text(f"{tag}.tsv", t.to_tsv())
        out.json(f"{tag}.json", t.to_doc())
        _check(checks, tag, t.passed, **{k: v for k, v in t.summary.items() if k != "passed"})


def _run_entropy(cfg, p, seed, out, checks):
    chain = _chain(cfg)
    try:
        pm = dv.MarkovProcessMeasure(chain, np.asarray(p["kernel"]))
    except (co.ChainError, ValueError) as exc:
        raise ConfigError([f"params.kernel: {exc}"]) from exc
    H = [dv.dv_entropy(pm, t) for t in range(1, p["t_max"] + 1)]
    gap = dv.contraction_gap(chain, pm.kernel)
    out.text("entropy.tsv", "t\tH\n" + "".join(f"{t}\t{h!r}\n" for t, h in enumerate(H, start=1)))
    out.json("entropy.json", {"H": H[0], "contraction_gap": gap, "stationary": pm.stationary,
                              "note": "Markov process measures only"})
    _check(checks, "scaling", all(h == t * H[0] for t, h in enumerate(H, start=1)), H=H[0])
    _check(checks, "contraction", gap >= -1e-8, gap=gap)


DISPATCH = {"simulate": _run_simulate, "pressure": _run_pressure, "rate": _run_rate, "oracle": _run_oracle,
            "couple": _run_couple, "probes": _run_probes, "entropy": _run_entropy}


def output_root(cfg: Mapping, override=None) -> Path:
    if override is not None:
        return Path(override)
    if cfg.get("output"):
        return Path(cfg["output"])
    return Path(os.environ.get(OUTPUT_ENV, "nsldp_runs"))


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def build_manifest(run_dir: Path) -> dict:
    files = sorted(p for p in run_dir.rglob("*") if p.is_file() and p.name != "record.json")
    return {str(p.relative_to(run_dir)): _sha256(p) for p in files}


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def run_config(cfg: Mapping, out_root=None) -> RunRecord:
    """Validate, execute and persist one config.

    Configuration problems raise :class:`ConfigError` before anything is
    written. Any other exception moves the partial output to
    ``<root>/failed/``.
    """
    params = validate(cfg)
    kind = cfg["kind"]
    seed = int(cfg["master_seed"])
    digest = config_hash(cfg)
    root = output_root(cfg, out_root)
    root.mkdir(parents=True, exist_ok=True)
    name = f"{kind}-{digest[:12]}"
    final = root / name
    with FileLock(str(root / f".{name}.lock")):
        staging = root / f".{name}.partial"
        if staging.exists():
            shutil.rmtree(staging)
        staging.mkdir()
        started = _now()
        writer = _Writer(staging)
        writer.json("config.json", {k: v for k, v in cfg.items() if k != "output"})
        checks: dict = {}
        try:
            DISPATCH[kind](cfg, params, seed, writer, checks)
        except BaseException:
            failed = root / "failed"
            failed.mkdir(exist_ok=True)
            dest = failed / f"{name}-{datetime.now(timezone.utc).strftime('%Y%m%dT%H%M%S%f')}"
            shutil.move(str(staging), str(dest))
            raise
        manifest = build_manifest(staging)
        record = RunRecord(digest, final, started, _now(), manifest, checks, _jsonable(params))
        writer.json("record.json", record.to_doc())
        if final.exists():
            shutil.rmtree(final)
        staging.rename(final)
    return record


def inspect_run(run_dir) -> dict:
    """Record of a run plus a fresh check of its manifest against the files on disk."""
    run_dir = Path(run_dir)
    with open(run_dir / "record.json") as fh:
        doc = json.load(fh)
    current = build_manifest(run_dir)
    doc["manifest_ok"] = current == doc["manifest"]
    return doc


def example_configs() -> dict:
    """Small configs, one per kind, used by the determinism criterion."""
    log2 = math.log(2.0)
    torus = {"torus": 2, "forcing": {0: 1.0}, "noise": 0.5}
    return {
        "simulate": {"kind": "simulate", "master_seed": 1, "model": torus,
                     "params": {"horizon": 0.5, "dt": 0.01, "count": 4, "energy_t": 0.5}},
        "oracle": {"kind": "oracle", "master_seed": 0, "chain": {"fixture": True},
                   "params": {"V": [log2, log2], "f": [1.0, 3.0]}},
        "pressure": {"kind": "pressure", "master_seed": 2, "chain": {"fixture": True, "clocking": "continuous"},
                     "params": {"V": [log2, 0.0], "t_list": [2.0, 4.0, 6.0], "count": 500}},
        "rate": {"kind": "rate", "master_seed": 3, "chain": {"fixture": True},
                 "params": {"lam": [0.3, 0.7], "budget": 800, "restarts": 2}},
        "couple": {"kind": "couple", "master_seed": 4, "model": torus,
                   "params": {"N_list": [1, 12], "a_list": [1.0, 5.0], "horizon": 0.5, "dt": 0.01}},
        "probes": {"kind": "probes", "master_seed": 5, "model": torus,
                   "params": {"probes": [{"probe": "hitting", "radius": 1.0, "horizon": 2.0, "dt": 0.01,
                                          "u0": [2.0] + [0.0] * 11},
                                         {"probe": "recurrence", "kappa": 0.5, "radius": 2.0, "count": 100,
                                          "horizon": 2.0, "dt": 0.01, "u0": [2.5] + [0.0] * 11}]}},
        "entropy": {"kind": "entropy", "master_seed": 6, "chain": {"fixture": True},
                    "params": {"kernel": [[0.5, 0.5], [0.5, 0.5]], "t_max": 5}},
    }
