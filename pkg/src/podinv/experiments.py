"""Experiment drivers: single reconstructions, parameter sweeps, lambda iteration and timing.

Each driver writes deterministic results (``summary.json``, ``results.csv``,
field dumps) and keeps wall-clock measurements in ``timing.json`` /
``timing.csv`` so that repeated runs with the same seeds produce identical
result files.
"""

from __future__ import annotations

import dataclasses
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from functools import cached_property
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.stats import spearmanr
from skimage.filters import threshold_otsu

from . import export
from .config import ExperimentConfig
from .errors import ConfigError, ExportError
from .forward import TimeGrid, forward_map_full, solve_full
from .inverse import (
    ForwardEngine,
    FullEngine,
    InverseResult,
    PodEngine,
    gradient_descent,
    lambda_fixed_point,
)
from .mesh_fem import Field, assemble_operators, build_mesh, l2_norm
from .pod import (
    PodBasis,
    build_snapshot_set,
    estimate_epod,
    load_basis,
    pod_from_snapshots,
    reduce_operators,
    save_basis,
    tail_ratio,
)
from .sensors import Observation, add_noise, empirical_norm, make_sensor_grid, write_observation_csv
from .sources import letter_source, load_glyphs, make_source, parse_source

OUTPUT_ROOT_ENV = "PODINV_OUTPUT_ROOT"

DEFAULT_VALUES = {
    "sweep-h": "4 8 16 32",
    "sweep-lambda": "1e-4 1e-5 1e-6 1e-7 1e-8 1e-9 1e-10",
    "sweep-npod": "5:full",
}

RESULT_COLUMNS = ["parameter", "trial", "seed", "sensor_error", "l2_error", "relative_l2_error", "iterations", "converged"]


def resolve_output(path) -> Path:
    """Relative output paths are taken relative to ``$PODINV_OUTPUT_ROOT`` when it is set."""
    p = Path(path)
    root = os.environ.get(OUTPUT_ROOT_ENV)
    if root and not p.is_absolute():
        p = Path(root) / p
    return p


def _prepare_dir(path) -> Path:
    p = resolve_output(path)
    try:
        p.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ExportError(f"cannot create output directory {p}: {exc}") from exc
    return p


def support_jaccard(f_hat: Field, truth: Field) -> tuple[float, float]:
    """Jaccard overlap of the Otsu-thresholded reconstruction with the truth support.

    The truth support is ``f* > max(f*) / 2``. Returns ``(jaccard, threshold)``.
    """
    vals = f_hat.coeffs
    if np.ptp(vals) == 0:
        return 0.0, float(vals[0])
    thr = float(threshold_otsu(vals))
    est = vals > thr
    ref = truth.coeffs > 0.5 * truth.coeffs.max()
    union = np.count_nonzero(est | ref)
    return (np.count_nonzero(est & ref) / union if union else 0.0), thr


def error_metrics(engine: ForwardEngine, f_hat: Field, truth: Field, clean: np.ndarray) -> dict:
    """``||S f_hat - S f*||_n`` (with the engine's own forward map) and L2 errors."""
    l2 = l2_norm(Field(f_hat.coeffs - truth.coeffs, f_hat.mesh))
    ref = l2_norm(truth)
    return {
        "sensor_error": empirical_norm(engine.apply(f_hat.coeffs) - clean),
        "l2_error": l2,
        "relative_l2_error": l2 / ref if ref > 0 else float("nan"),
    }


@dataclass(eq=False)
class Problem:
    """Discretization, sensors and training data for one mesh size."""

    cfg: ExperimentConfig
    n_div: int

    def __post_init__(self):
        p = self.cfg.pde
        self.mesh = build_mesh(self.n_div)
        self.ops = assemble_operators(self.mesh, p.a, p.c)
        self.grid = TimeGrid.from_step(p.T, p.dt)
        self.sensors = make_sensor_grid(self.cfg.sensors.k)
        self.glyphs = load_glyphs(self.cfg.snapshots.glyphs) if self.cfg.snapshots.glyphs else None
        self.zero = Field.zeros(self.mesh)
        self.timing = {}

    @classmethod
    def from_config(cls, cfg: ExperimentConfig, n_div: Optional[int] = None) -> "Problem":
        return cls(cfg, cfg.pde.n_div if n_div is None else n_div)

    def source(self, token: str) -> Field:
        spec = parse_source(token)
        if spec.kind == "letter" and self.glyphs is not None:
            return letter_source(spec.letter, self.mesh, spec.amplitude, glyphs=self.glyphs)
        return make_source(spec, self.mesh)

    def snapshots(self):
        fields = [self.source(tok) for tok in self.cfg.snapshots.sources]
        trajs = [solve_full(self.ops, f, self.zero, self.grid) for f in fields]
        return build_snapshot_set(trajs, self.cfg.snapshots.include_differences)

    @cached_property
    def basis(self) -> PodBasis:
        t0 = time.perf_counter()
        s = self.cfg.snapshots
        if s.basis:
            path = Path(s.basis)
            if not path.is_file():
                raise ConfigError(f"snapshots.basis: file not found: {path}")
            basis = load_basis(path, self.mesh)
        else:
            basis = pod_from_snapshots(self.snapshots(), s.epsilon)
            basis.provenance.update(
                sources=list(s.sources),
                include_differences=s.include_differences,
                epsilon=s.epsilon,
                h=self.mesh.h,
                dt=self.grid.dt,
                T=self.grid.T,
            )
        self.timing["basis"] = time.perf_counter() - t0
        return basis

    def engine(self, variant: str, rank: Optional[int] = None) -> ForwardEngine:
        if variant == "fem":
            return FullEngine(self.ops, self.grid, self.sensors)
        basis = self.basis if rank is None else self.basis.truncate(rank)
        red = reduce_operators(basis, self.ops, self.sensors)
        return PodEngine(red, self.grid, self.sensors, basis=basis)

    def clean_data(self, f: Field) -> np.ndarray:
        return forward_map_full(self.ops, f, self.zero, self.grid, self.sensors)

    def observe(self, clean: np.ndarray, seed: int) -> Observation:
        s = self.cfg.sensors
        return add_noise(clean, s.sigma, seed=seed, distribution=s.noise)


def _parallel_map(fn: Callable, items: Sequence, workers: int) -> list:
    """Apply ``fn`` to independent work items; results come back in input order."""
    if workers <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def _trial_seeds(cfg: ExperimentConfig) -> list:
    return [cfg.sensors.seed + i for i in range(cfg.experiment.trials)]


def _config_dict(cfg: ExperimentConfig) -> dict:
    return dataclasses.asdict(cfg)


def _result_row(param, trial, seed, result: InverseResult, metrics: dict) -> dict:
    return dict(
        parameter=param,
        trial=trial,
        seed=seed,
        iterations=result.iterations,
        converged=result.converged,
        **metrics,
    )


def _write_field(out: Path, stem: str, f: Field) -> None:
    export.write_field_csv(f, out / f"{stem}.csv")
    export.export_field_image(f, out / f"{stem}.pgm")


def _parse_values(cfg: ExperimentConfig, kind: str, full_rank: Optional[int] = None) -> list:
    text = cfg.experiment.values.strip() or DEFAULT_VALUES[kind]
    try:
        if kind == "sweep-npod":
            if ":" in text:
                lo, _, hi = text.partition(":")
                hi_val = full_rank if hi.strip() == "full" else int(hi)
                vals = list(range(int(lo), hi_val + 1))
            else:
                vals = [int(v) for v in text.replace(",", " ").split()]
            if not vals or min(vals) < 1 or max(vals) > full_rank:
                raise ConfigError(f"experiment.values: ranks must lie in [1, {full_rank}], got {text!r}")
            return vals
        if kind == "sweep-h":
            return [int(v) for v in text.replace(",", " ").split()]
        return [float(v) for v in text.replace(",", " ").split()]
    except ValueError as exc:
        raise ConfigError(f"experiment.values: cannot parse {text!r} for {kind}") from exc


def _sweep_summary(rows: list, log_param: bool = False) -> dict:
    params = sorted({r["parameter"] for r in rows})
    points = []
    for p in params:
        sel = [r for r in rows if r["parameter"] == p]
        points.append({
            "parameter": p,
            "trials": len(sel),
            "mean_sensor_error_sq": float(np.mean([r["sensor_error"] ** 2 for r in sel])),
            "mean_l2_error": float(np.mean([r["l2_error"] for r in sel])),
        })
    means = np.array([pt["mean_sensor_error_sq"] for pt in points])
    out = {"points": points}
    if len(points) >= 2:
        x = np.log10(params) if log_param else np.asarray(params, dtype=float)
        rho = spearmanr(x, means).statistic
        slope = np.polyfit(np.log10(np.asarray(params, dtype=float)), np.log10(means), 1)[0]
        best = int(np.argmin(means))
        out.update(
            spearman=float(rho),
            loglog_slope=float(slope),
            argmin_parameter=params[best],
            interior_minimum=0 < best < len(params) - 1,
        )
    return out


def _finish(out: Path, summary: dict, rows: Optional[list], timing: dict, timing_rows: Optional[list] = None) -> dict:
    if rows is not None:
        export.write_rows_csv(rows, out / "results.csv", RESULT_COLUMNS)
    if timing_rows is not None:
        cols = list(timing_rows[0]) if timing_rows else ["parameter", "trial", "wall_time"]
        export.write_rows_csv(timing_rows, out / "timing.csv", cols)
    export.write_json(summary, out / "summary.json")
    export.write_json(timing, out / "timing.json")
    return summary


def run_recover(cfg: ExperimentConfig, out: Path) -> dict:
    e = cfg.experiment
    prob = Problem.from_config(cfg)
    truth = prob.source(e.truth)
    clean = prob.clean_data(truth)
    obs = prob.observe(clean, cfg.sensors.seed)
    t0 = time.perf_counter()
    engine = prob.engine(e.engine)
    t_engine = time.perf_counter() - t0
    res = gradient_descent(engine, obs, cfg.inverse)
    metrics = error_metrics(engine, res.f_hat, truth, clean)
    jac, thr = support_jaccard(res.f_hat, truth)

    summary = {"kind": "recover", "truth": e.truth, "engine": e.engine, **export.result_to_dict(res), **metrics}
    summary.update(jaccard=jac, otsu_threshold=thr, n_sensors=prob.sensors.n, config=_config_dict(cfg))
    if e.engine == "pod":
        b = prob.basis
        summary.update(n_pod=b.rank, rho=b.rho, e_pod=estimate_epod(prob.mesh.h, prob.grid.dt, prob.grid.T, b.rho))
    _write_field(out, "f_hat", res.f_hat)
    _write_field(out, "truth", truth)
    write_observation_csv(out / "observation.csv", prob.sensors, obs)
    rows = [_result_row(e.truth, 0, cfg.sensors.seed, res, metrics)]
    timing = dict(res.timing, engine_setup=t_engine, **prob.timing)
    return _finish(out, summary, rows, timing)


def _sweep(cfg: ExperimentConfig, out: Path, kind: str) -> dict:
    e = cfg.experiment
    seeds = _trial_seeds(cfg)
    prob = Problem.from_config(cfg)
    timing = {}

    if kind == "sweep-h":
        ref = Problem.from_config(cfg, e.reference_n_div)
        clean = ref.clean_data(ref.source(e.truth))
        obs = [ref.observe(clean, s) for s in seeds]
        values = _parse_values(cfg, kind)
        setups = {}
        for n_div in values:
            p = prob if n_div == prob.n_div else Problem.from_config(cfg, n_div)
            t0 = time.perf_counter()
            setups[n_div] = (p, p.engine(e.engine), p.source(e.truth))
            timing[f"setup_n_div_{n_div}"] = time.perf_counter() - t0

        def task(item):
            n_div, trial = item
            p, eng, truth = setups[n_div]
            res = gradient_descent(eng, obs[trial], cfg.inverse)
            return res, error_metrics(eng, res.f_hat, truth, clean)

        param_of = lambda n_div: 1.0 / n_div  # noqa: E731
    else:
        truth = prob.source(e.truth)
        clean = prob.clean_data(truth)
        obs = [prob.observe(clean, s) for s in seeds]
        if kind == "sweep-lambda":
            values = _parse_values(cfg, kind)
            eng = prob.engine(e.engine)

            def task(item):
                lam, trial = item
                res = gradient_descent(eng, obs[trial], replace(cfg.inverse, lambda_n=lam))
                return res, error_metrics(eng, res.f_hat, truth, clean)
        else:
            if e.engine != "pod":
                raise ConfigError("sweep-npod needs experiment.engine = pod")
            values = _parse_values(cfg, kind, prob.basis.rank)
            engines = {r: prob.engine("pod", rank=r) for r in values}

            def task(item):
                rank, trial = item
                eng = engines[rank]
                res = gradient_descent(eng, obs[trial], cfg.inverse)
                return res, error_metrics(eng, res.f_hat, truth, clean)

        param_of = lambda v: v  # noqa: E731

    items = [(v, t) for v in values for t in range(len(seeds))]

    def timed(item):
        t0 = time.perf_counter()
        res, metrics = task(item)
        return res, metrics, time.perf_counter() - t0

    outcomes = _parallel_map(timed, items, e.workers)
    rows, timing_rows = [], []
    for (v, t), (res, metrics, wall) in zip(items, outcomes):
        rows.append(_result_row(param_of(v), t, seeds[t], res, metrics))
        timing_rows.append({"parameter": param_of(v), "trial": t, "wall_time": wall})
    summary = {"kind": kind, "truth": e.truth, "engine": e.engine, "trials": len(seeds)}
    summary.update(_sweep_summary(rows, log_param=kind == "sweep-lambda"))
    if kind != "sweep-h" and e.engine == "pod":
        summary.update(n_pod=prob.basis.rank, rho=prob.basis.rho)
    summary["config"] = _config_dict(cfg)
    timing.update(prob.timing, total_trials=float(sum(r["wall_time"] for r in timing_rows)))
    return _finish(out, summary, rows, timing, timing_rows)


def run_lambda_iteration(cfg: ExperimentConfig, out: Path) -> dict:
    e = cfg.experiment
    prob = Problem.from_config(cfg)
    truth = prob.source(e.truth)
    clean = prob.clean_data(truth)
    eng = prob.engine(e.engine)
    seeds = _trial_seeds(cfg)

    def task(seed):
        t0 = time.perf_counter()
        hist, res = lambda_fixed_point(
            eng, prob.observe(clean, seed), d=2, inner_config=cfg.inverse,
            max_outer=cfg.outer_max, norm_tol=cfg.outer_tol,
        )
        return hist, res, time.perf_counter() - t0

    outcomes = _parallel_map(task, seeds, e.workers)
    rows, hist_rows, timing_rows, trials = [], [], [], []
    for t, (seed, (hist, res, wall)) in enumerate(zip(seeds, outcomes)):
        metrics = error_metrics(eng, res.f_hat, truth, clean)
        rows.append(_result_row(hist[-1], t, seed, res, metrics))
        hist_rows.extend({"trial": t, "step": j, "lambda": lam} for j, lam in enumerate(hist))
        timing_rows.append({"parameter": hist[-1], "trial": t, "wall_time": wall})
        rel = abs(hist[-1] - hist[-2]) / hist[-2]
        trials.append({"trial": t, "seed": seed, "outer_steps": len(hist) - 1,
                       "lambda_final": hist[-1], "lambda_relative_change": rel, **metrics})
        if t == 0:
            _write_field(out, "f_hat", res.f_hat)
    export.write_rows_csv(hist_rows, out / "lambda_history.csv", ["trial", "step", "lambda"])
    summary = {
        "kind": "lambda-iter", "truth": e.truth, "engine": e.engine,
        "lambda_initial": hist_rows[0]["lambda"],
        "mean_lambda_final": float(np.mean([tr["lambda_final"] for tr in trials])),
        "trials": trials, "config": _config_dict(cfg),
    }
    return _finish(out, summary, rows, dict(prob.timing), timing_rows)


def run_timing(cfg: ExperimentConfig, out: Path) -> dict:
    """Reconstruct every training source with both engines and compare optimisation times."""
    prob = Problem.from_config(cfg)
    pod = prob.engine("pod")
    t0 = time.perf_counter()
    fem = prob.engine("fem")
    t_fem_setup = time.perf_counter() - t0

    rows, timing_rows = [], []
    for tok in cfg.snapshots.sources:
        truth = prob.source(tok)
        clean = prob.clean_data(truth)
        obs = prob.observe(clean, cfg.sensors.seed)
        row, trow = {"truth": tok}, {"truth": tok}
        for name, eng in (("pod", pod), ("fem", fem)):
            t1 = time.perf_counter()
            res = gradient_descent(eng, obs, cfg.inverse)
            trow[f"{name}_time"] = time.perf_counter() - t1
            m = error_metrics(eng, res.f_hat, truth, clean)
            row.update({f"{name}_iterations": res.iterations, f"{name}_l2_error": m["l2_error"],
                        f"{name}_sensor_error": m["sensor_error"]})
        rows.append(row)
        timing_rows.append(trow)

    pod_total = sum(r["pod_time"] for r in timing_rows)
    fem_total = sum(r["fem_time"] for r in timing_rows)
    cols = ["truth", "pod_iterations", "fem_iterations", "pod_l2_error", "fem_l2_error", "pod_sensor_error", "fem_sensor_error"]
    export.write_rows_csv(rows, out / "results.csv", cols)
    summary = {"kind": "timing", "n_pod": prob.basis.rank, "rho": prob.basis.rho, "truths": rows, "config": _config_dict(cfg)}
    timing = dict(prob.timing, fem_setup=t_fem_setup, pod_total=pod_total, fem_total=fem_total,
                  speedup=fem_total / pod_total if pod_total > 0 else float("inf"))
    return _finish(out, summary, None, timing, timing_rows)


def run_experiment(cfg: ExperimentConfig, output: Optional[str] = None) -> dict:
    """Run the experiment named by ``cfg.experiment.kind`` and write its outputs.

    Returns the summary dictionary that is also written to ``summary.json``.
    """
    cfg.validate()
    out = _prepare_dir(output or cfg.experiment.output)
    kind = cfg.experiment.kind
    if kind == "recover":
        return run_recover(cfg, out)
    if kind in ("sweep-h", "sweep-lambda", "sweep-npod"):
        return _sweep(cfg, out, kind)
    if kind == "lambda-iter":
        return run_lambda_iteration(cfg, out)
    return run_timing(cfg, out)


def run_snapshots(cfg: ExperimentConfig, output: Optional[str] = None) -> dict:
    """Compute and store the training snapshot matrix."""
    out = _prepare_dir(output or cfg.experiment.output)
    prob = Problem.from_config(cfg)
    t0 = time.perf_counter()
    snaps = prob.snapshots()
    elapsed = time.perf_counter() - t0
    try:
        np.savez(out / "snapshots.npz", data=snaps.data, steps=snaps.steps, n_sources=snaps.n_sources,
                 include_differences=snaps.include_differences, n_div=prob.n_div)
    except OSError as exc:
        raise ExportError(f"cannot write snapshots: {exc}") from exc
    summary = {"kind": "snapshots", "n_snapshots": snaps.n_snapshots, "n_sources": snaps.n_sources,
               "steps": snaps.steps, "n_nodes": prob.mesh.n_nodes, "config": _config_dict(cfg)}
    return _finish(out, summary, None, {"snapshots": elapsed})


def run_basis(cfg: ExperimentConfig, output: Optional[str] = None) -> dict:
    """Build the POD basis, store it and its eigenvalue spectrum."""
    out = _prepare_dir(output or cfg.experiment.output)
    prob = Problem.from_config(cfg)
    basis = prob.basis
    phi = basis.modes
    ortho = float(np.max(np.abs(phi.T @ (prob.mesh.mass @ phi) - np.eye(basis.rank))))
    save_basis(out / "basis.npz", basis)
    mu = basis.eigenvalues
    spectrum = [{"index": i + 1, "eigenvalue": float(mu[i]), "tail_ratio": tail_ratio(mu, i + 1)} for i in range(mu.size)]
    export.write_rows_csv(spectrum, out / "spectrum.csv", ["index", "eigenvalue", "tail_ratio"])
    for k in range(min(basis.rank, 4)):
        export.export_field_image(basis.mode(k), out / f"mode_{k + 1}.pgm")
    summary = {
        "kind": "basis", "n_pod": basis.rank, "rho": basis.rho, "n_snapshots": int(mu.size),
        "e_pod": estimate_epod(prob.mesh.h, prob.grid.dt, prob.grid.T, basis.rho),
        "orthonormality_error": ortho, "config": _config_dict(cfg),
    }
    return _finish(out, summary, None, dict(prob.timing))
