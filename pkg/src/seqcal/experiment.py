"""Replicated experiments: spec parsing, the run matrix and result files.

A spec is an INI file::

    [experiment]
    schema = 1
    testbed = sine2d
    discrepancy = false
    methods = Ap, Ay, Lhs, Rnd
    n0 = 10
    n = 90
    replicates = 10
    seed = 1
    output = results/sine2d

Optional sections: ``[candidates]`` (n_pair, n_explore), ``[reference]``
(z_ref_size), ``[fit]`` (n_starts, n_starts_warm, maxiter),
``[method.AyFixed]`` (theta_fixed, scaled) and ``[external]`` (command,
timeout) to route simulator calls through a child process.

Output files (all under ``output``):

``results.csv``
    one row per (replicate, iteration, method) with columns
    ``replicate, iteration, method, mad_p, mad_y, theta_hat, wall_ms``;
    ``theta_hat`` is space separated for p > 1 and empty metrics mean
    "not computed".
``acquired/<method>_rep<r>.csv``
    acquired scaled inputs and outputs per run.
``summary.json``
    per-method medians and quartiles per iteration plus interval scores
    and quantile widths; see ``report.summarize``.
``manifest.json``
    the experiment spec, seeds and per-replicate hashes of the initial design and field
    data (identical across methods by construction).
"""
from __future__ import annotations

import configparser
import csv
import hashlib
import json
import logging
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import metrics
from .designer import DesignConfig, DiscrepancyMode, Method, initial_design, run
from .errors import ConfigError
from .external import ExternalSimSpec, ExternalSimulator
from .gp import FitConfig
from .report import summarize
from .testbeds import TESTBEDS, get_testbed, make_field_data

log = logging.getLogger(__name__)

SCHEMA = 1
CSV_COLUMNS = ("replicate", "iteration", "method", "mad_p", "mad_y", "theta_hat", "wall_ms")
WORKERS_ENV = "SEQCAL_WORKERS"


@dataclass
class ExperimentSpec:
    testbed: str
    methods: list
    n0: int
    n: int
    replicates: int
    output: str
    seed: int = 0
    discrepancy: bool = False
    discrepancy_mode: str | None = None
    workers: int = 1
    n_pair: int | None = None
    n_explore: int | None = None
    z_ref_size: int | None = None
    n_starts: int = 8
    n_starts_warm: int = 3
    maxiter: int = 200
    fit_space_filling: bool = True
    metrics: bool = True
    theta_fixed: list | None = None
    external_command: str | None = None
    external_timeout: float = 30.0
    extra: dict = field(default_factory=dict)

    def validate(self):
        if self.testbed not in TESTBEDS:
            raise ConfigError(f"unknown testbed {self.testbed!r}")
        if self.replicates < 1:
            raise ConfigError("replicates must be >= 1")
        if not self.methods:
            raise ConfigError("no methods listed")
        for m in self.methods:
            try:
                Method(m)
            except ValueError:
                raise ConfigError(f"unknown method {m!r}") from None
        if self.n0 < 2 or self.n < 1:
            raise ConfigError("need n0 >= 2 and n >= 1")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")
        if "AyFixed" in self.methods and self.theta_fixed is None:
            raise ConfigError("AyFixed needs [method.AyFixed] theta_fixed")
        if self.discrepancy_mode is not None:
            try:
                DiscrepancyMode(self.discrepancy_mode)
            except ValueError:
                raise ConfigError(f"unknown discrepancy_mode {self.discrepancy_mode!r}") from None
        return self

    @property
    def resolved_discrepancy_mode(self) -> DiscrepancyMode:
        if self.discrepancy_mode is not None:
            return DiscrepancyMode(self.discrepancy_mode)
        return DiscrepancyMode.FitDiscrepancy if self.discrepancy else DiscrepancyMode.KnownSigma


def _floats(text):
    return [float(v) for v in text.replace(",", " ").split()]


def load_spec(path) -> ExperimentSpec:
    cp = configparser.ConfigParser()
    try:
        with open(path) as fh:
            cp.read_file(fh)
    except (OSError, configparser.Error) as err:
        raise ConfigError(f"cannot read spec {path}: {err}") from err
    if not cp.has_section("experiment"):
        raise ConfigError("spec has no [experiment] section")
    ex = cp["experiment"]
    try:
        schema = ex.getint("schema", SCHEMA)
        if schema != SCHEMA:
            raise ConfigError(f"unsupported schema {schema}")
        if "testbed" not in ex:
            raise ConfigError("missing testbed id")
        spec = ExperimentSpec(
            testbed=ex["testbed"].strip(),
            methods=[m.strip() for m in ex.get("methods", "Ap").split(",") if m.strip()],
            n0=ex.getint("n0"),
            n=ex.getint("n"),
            replicates=ex.getint("replicates", 1),
            output=ex.get("output", "results"),
            seed=ex.getint("seed", 0),
            discrepancy=ex.getboolean("discrepancy", False),
            discrepancy_mode=ex.get("discrepancy_mode"),
            workers=ex.getint("workers", 1),
            fit_space_filling=ex.getboolean("fit_space_filling", True),
            metrics=ex.getboolean("metrics", True),
        )
        if spec.n0 is None or spec.n is None:
            raise ConfigError("n0 and n are required")
        if cp.has_section("candidates"):
            spec.n_pair = cp["candidates"].getint("n_pair")
            spec.n_explore = cp["candidates"].getint("n_explore")
        if cp.has_section("reference"):
            spec.z_ref_size = cp["reference"].getint("z_ref_size")
        if cp.has_section("fit"):
            f = cp["fit"]
            spec.n_starts = f.getint("n_starts", spec.n_starts)
            spec.n_starts_warm = f.getint("n_starts_warm", spec.n_starts_warm)
            spec.maxiter = f.getint("maxiter", spec.maxiter)
        if cp.has_section("method.AyFixed"):
            spec.theta_fixed = _floats(cp["method.AyFixed"]["theta_fixed"])
        if cp.has_section("external"):
            spec.external_command = cp["external"]["command"]
            spec.external_timeout = cp["external"].getfloat("timeout", 30.0)
    except (ValueError, KeyError) as err:
        raise ConfigError(f"invalid spec value: {err}") from err
    base = Path(path).parent
    if not os.path.isabs(spec.output):
        spec.output = str(base / spec.output)
    return spec.validate()


# -- seeds and shared inputs -------------------------------------------------


def replicate_rng(master: int, rep: int):
    return np.random.default_rng(np.random.SeedSequence(master, spawn_key=(rep,)))


def method_seed(master: int, rep: int, method: Method) -> int:
    ss = np.random.SeedSequence(master, spawn_key=(rep, method.code))
    return int(ss.generate_state(1, dtype=np.uint64)[0] >> 1)


def replicate_inputs(spec: ExperimentSpec, rep: int):
    """Model, field data and initial design shared by every method of a replicate."""
    model = get_testbed(spec.testbed, **({"discrepancy": True} if spec.discrepancy else {}))
    rng = replicate_rng(spec.seed, rep)
    fe = make_field_data(model, rng)
    init = initial_design(fe, spec.n0, rng)
    return model, fe, init


def array_hash(*arrays) -> str:
    h = hashlib.sha256()
    for a in arrays:
        h.update(np.ascontiguousarray(a, dtype=float).tobytes())
    return h.hexdigest()[:16]


def design_config(spec: ExperimentSpec, model, method: Method, rep: int) -> DesignConfig:
    ref_rng = np.random.default_rng(np.random.SeedSequence(spec.seed, spawn_key=(rep, 0)))
    theta_ref = model.theta_ref(ref_rng)
    x_ref = model.x_ref(ref_rng)
    return DesignConfig(
        n0=spec.n0, n=spec.n, acquisition=method,
        n_pair=spec.n_pair if spec.n_pair is not None else model.n_pair,
        n_explore=spec.n_explore if spec.n_explore is not None else model.n_explore,
        theta_ref=theta_ref, x_ref=x_ref, z_ref_size=spec.z_ref_size,
        discrepancy=spec.resolved_discrepancy_mode,
        seed=method_seed(spec.seed, rep, method),
        fit=FitConfig(n_starts=spec.n_starts, maxiter=spec.maxiter),
        n_starts_warm=spec.n_starts_warm,
        theta_fixed=np.array(spec.theta_fixed) if spec.theta_fixed is not None else None,
        fit_space_filling=spec.fit_space_filling,
    )


@dataclass
class RunResult:
    replicate: int
    method: str
    rows: list
    acquired: np.ndarray
    outputs: np.ndarray
    theta_ls: np.ndarray
    status: str
    error: str | None
    init_hash: str
    field_hash: str
    q: int


def run_one(spec: ExperimentSpec, rep: int, method_name: str) -> RunResult:
    """One (replicate, method) run with per-iteration metrics."""
    method = Method(method_name)
    model, fe, init = replicate_inputs(spec, rep)
    cfg = design_config(spec, model, method, rep)
    truth_p = None
    do_mad_p = spec.metrics and model.bias is None
    if do_mad_p:
        truth_p = metrics.true_posterior(fe, cfg.theta_ref, model.eval_scaled)
    truth_y = model.field_mean_scaled(cfg.x_ref) if spec.metrics else None

    rows = []
    last = [time.perf_counter()]

    def monitor(t, state):
        if t == 0:
            last[0] = time.perf_counter()
            return
        mp = my = None
        th = state.theta_hat
        if spec.metrics and state.e is not None:
            if do_mad_p:
                mp = metrics.mad_p(state.e, fe, cfg.theta_ref, truth=truth_p)
            my = metrics.mad_y(state.e, fe, cfg.x_ref, th, truth_y)
        now = time.perf_counter()
        rows.append({
            "replicate": rep, "iteration": t, "method": method.value, "mad_p": mp, "mad_y": my,
            "theta_hat": None if th is None else " ".join(repr(float(v)) for v in th),
            "wall_ms": round(1e3 * (now - last[0]), 3),
        })
        last[0] = now

    if spec.external_command:
        sim = ExternalSimulator(ExternalSimSpec(spec.external_command, fe.q, fe.prior.p,
                                                timeout=spec.external_timeout))

        def simulate(z, _sim=sim):
            x = model.x_box.from_unit(z[:fe.q])
            th = model.theta_box.from_unit(z[fe.q:])
            return _sim(np.concatenate([x, th]))
    else:
        sim = None
        simulate = model.simulator()
    try:
        hist = run(simulate, fe, cfg, init_design=init, monitor=monitor)
    finally:
        if sim is not None:
            sim.close()
    return RunResult(
        rep, method.value, rows, hist.acquired, np.array([r.eta for r in hist.records]),
        model.least_squares_theta(fe), hist.status, hist.error,
        array_hash(init), array_hash(fe.field_x, fe.y), fe.q,
    )


def _run_job(args):
    return run_one(*args)


def worker_count(spec: ExperimentSpec) -> int:
    env = os.environ.get(WORKERS_ENV)
    if env:
        try:
            n = int(env)
        except ValueError:
            raise ConfigError(f"{WORKERS_ENV} must be an integer") from None
        if n < 1:
            raise ConfigError(f"{WORKERS_ENV} must be >= 1")
        return n
    return spec.workers


def run_experiment(spec: ExperimentSpec, workers: int | None = None) -> list:
    """Run every (replicate, method) pair and write all result files."""
    spec.validate()
    jobs = [(spec, r, m) for r in range(spec.replicates) for m in spec.methods]
    workers = workers or worker_count(spec)
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_job, jobs))
    else:
        results = [_run_job(j) for j in jobs]
    write_results(spec, results)
    return results


def write_results(spec: ExperimentSpec, results):
    out = Path(spec.output)
    (out / "acquired").mkdir(parents=True, exist_ok=True)
    order = {m: i for i, m in enumerate(spec.methods)}
    results = sorted(results, key=lambda r: (r.replicate, order[r.method]))
    with open(out / "results.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=CSV_COLUMNS)
        w.writeheader()
        for res in results:
            for row in res.rows:
                w.writerow({k: ("" if row[k] is None else row[k]) for k in CSV_COLUMNS})
    for res in results:
        q = res.q
        p = res.acquired.shape[1] - q if res.acquired.size else len(res.theta_ls)
        cols = ["iteration"] + [f"x{i + 1}" for i in range(q)] + [f"theta{j + 1}" for j in range(p)] + ["eta"]
        with open(out / "acquired" / f"{res.method}_rep{res.replicate}.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(cols)
            for t, (z, eta) in enumerate(zip(res.acquired, res.outputs), start=1):
                w.writerow([t] + [repr(float(v)) for v in z] + [repr(float(eta))])
    manifest = {
        "schema": SCHEMA,
        "spec": {k: v for k, v in asdict(spec).items() if k != "extra"},
        "runs": [
            {"replicate": r.replicate, "method": r.method, "status": r.status, "error": r.error,
             "init_hash": r.init_hash, "field_hash": r.field_hash,
             "theta_ls": [float(v) for v in r.theta_ls]}
            for r in results
        ],
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2))
    (out / "summary.json").write_text(json.dumps(summarize(out), indent=2))
