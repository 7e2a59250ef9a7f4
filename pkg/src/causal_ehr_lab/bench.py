"""Confounding-sweep and subsampling experiment suites.

A suite is a grid of cells (beta or subsample fraction) crossed with a list
of models. Work is scheduled per (cell, fitting unit): every deep model that
shares a training mode reuses one five-fold fit, and every baseline that
shares a penalty reuses one set of LR predictions. MEM pretraining runs once
per history cohort, before the cells are dispatched.
"""
from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .baselines import BASELINES, build_features, lr_predictions
from .cohort import Cohort
from .errors import CELError, CellTimeout, ValidationError
from .estimators import Z95, EstimateReport, cv_tmle_rr, naive_rr, sae, sae_se, tmle_rr
from .folds import kfold_split
from .model.config import MODES, ModelConfig, PRESETS
from .model.train import encode_cohort, fit, pretrain
from .synth import (
    GroundTruth,
    SynthConfig,
    compute_lambda,
    gen_histories,
    persistent_config,
    with_outcomes_for_beta,
)

log = logging.getLogger(__name__)

DEEP_MODELS = ("tarnet", "tarnet-mem", "dragonnet-cvtmle", "t-behrt-cvtmle")
ALL_MODELS = ("empirical", "lr", "lr-l1", "lr-l2", "lr-tmle") + DEEP_MODELS
# module-inclusion ladder, each step compared with the previous one
LADDER = ("tarnet", "tarnet-mem", "dragonnet-cvtmle", "t-behrt-cvtmle")
DEFAULT_FRACTIONS = (0.025, 0.05, 0.1, 0.25, 0.5, 1.0)


def parse_model(name: str) -> tuple[str, str, str]:
    """``(family, unit, estimator)`` for a model label.

    Deep labels are a training mode optionally suffixed ``-cvtmle`` (e.g.
    ``t-behrt-cvtmle``); bare modes use the plug-in estimator.
    """
    if name == "empirical":
        return "empirical", "empirical", "empirical"
    if name in BASELINES:
        penalty, est = BASELINES[name]
        return "lr", penalty, est
    if name.endswith("-cvtmle") and name[: -len("-cvtmle")] in MODES:
        return "deep", name[: -len("-cvtmle")], "cv-tmle"
    if name in MODES:
        return "deep", name, "naive"
    raise ValidationError(f"unknown model {name!r}")


@dataclass
class ExperimentConfig:
    synth: SynthConfig = field(default_factory=persistent_config)
    beta_grid: list = field(default_factory=lambda: [1.0, 5.0, 10.0])
    models: list = field(default_factory=lambda: ["empirical", "lr", "tarnet", "t-behrt-cvtmle"])
    k_folds: int = 5
    subsample_fractions: list | None = None
    withhold_confounder: bool = True
    withhold_from_baselines: bool = True
    model: ModelConfig = field(default_factory=lambda: PRESETS["desk"]())
    lr_lambda: float = 1.0
    cell_timeout: float | None = None
    seed: int = 0
    name: str = "suite"

    def __post_init__(self):
        if self.k_folds < 2:
            raise ValidationError("k_folds must be at least 2")
        if not self.beta_grid:
            raise ValidationError("beta_grid must be non-empty")
        for m in self.models:
            parse_model(m)
        if self.subsample_fractions is not None:
            if not self.subsample_fractions:
                raise ValidationError("subsample_fractions must be non-empty")
            if any(not (0 < f <= 1) for f in self.subsample_fractions):
                raise ValidationError("fractions must lie in (0, 1]")

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "synth": self.synth.to_dict(),
            "beta_grid": list(self.beta_grid),
            "models": list(self.models),
            "k_folds": self.k_folds,
            "subsample_fractions": None if self.subsample_fractions is None else list(self.subsample_fractions),
            "withhold_confounder": self.withhold_confounder,
            "withhold_from_baselines": self.withhold_from_baselines,
            "model": self.model.to_dict(),
            "lr_lambda": self.lr_lambda,
            "cell_timeout": self.cell_timeout,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        if "synth" in d:
            d["synth"] = SynthConfig.from_dict(d["synth"])
        preset = d.pop("preset", "desk")
        if preset not in PRESETS:
            raise ValidationError(f"preset must be one of {sorted(PRESETS)}")
        d["model"] = PRESETS[preset](**d.get("model", {}))
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValidationError(f"unknown experiment fields: {sorted(unknown)}")
        return cls(**d)

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def load_experiment(path, env: dict | None = None) -> ExperimentConfig:
    """Read an experiment JSON; ``CEL_SEED`` in ``env`` overrides the seed."""
    cfg = ExperimentConfig.from_dict(json.loads(Path(path).read_text()))
    return apply_env(cfg, os.environ if env is None else env)


def apply_env(cfg: ExperimentConfig, env) -> ExperimentConfig:
    if env.get("CEL_SEED"):
        cfg.seed = int(env["CEL_SEED"])
    return cfg


# ---------------------------------------------------------------------------
# report


@dataclass
class CellResult:
    model: str
    beta: float
    fraction: float | None
    truth: float | None
    report: EstimateReport | None = None
    status: str = "ok"
    error: str | None = None

    @property
    def abs_error(self) -> float | None:
        if self.report is None or self.truth is None:
            return None
        return abs(self.report.rr - self.truth)

    def to_dict(self) -> dict:
        return {
            "model": self.model,
            "beta": self.beta,
            "fraction": self.fraction,
            "truth": self.truth,
            "report": None if self.report is None else self.report.to_dict(),
            "status": self.status,
            "error": self.error,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CellResult":
        d = dict(d)
        if d.get("report") is not None:
            d["report"] = EstimateReport.from_dict(d["report"])
        return cls(**d)


@dataclass
class BenchReport:
    kind: str
    config: dict
    config_hash: str
    cells: list[CellResult]
    truths: dict
    sae: dict = field(default_factory=dict)
    deltas: dict = field(default_factory=dict)
    runtime: dict = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return all(c.status == "ok" for c in self.cells)

    def cell(self, model: str, beta: float | None = None, fraction: float | None = None) -> CellResult:
        for c in self.cells:
            if c.model == model and (beta is None or c.beta == beta) and (fraction is None or c.fraction == fraction):
                return c
        raise KeyError((model, beta, fraction))

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "config": self.config,
            "config_hash": self.config_hash,
            "cells": [c.to_dict() for c in self.cells],
            "truths": self.truths,
            "sae": self.sae,
            "deltas": self.deltas,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "BenchReport":
        d = dict(d)
        d["cells"] = [CellResult.from_dict(c) for c in d["cells"]]
        return cls(**d)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1, allow_nan=False)


def summarise(cells: list[CellResult], models: Sequence[str]) -> tuple[dict, dict]:
    """Per-model SAE with propagated SE, and module-inclusion deltas."""
    out = {}
    for m in models:
        mine = [c for c in cells if c.model == m]
        if not mine or any(c.truth is None for c in mine):
            continue
        if any(c.status != "ok" for c in mine):
            out[m] = {"sae": None, "se": None, "n_cells": len(mine), "complete": False}
            continue
        ses = [c.report.se for c in mine]
        out[m] = {
            "sae": sae([c.report.rr for c in mine], [c.truth for c in mine]),
            "se": sae_se(ses) if all(s is not None for s in ses) else None,
            "n_cells": len(mine),
            "complete": True,
        }
    deltas = {}
    present = [m for m in LADDER if m in out and out[m]["sae"] is not None]
    for prev, cur in zip(present, present[1:]):
        deltas[f"{prev}->{cur}"] = out[cur]["sae"] - out[prev]["sae"]
    if len(present) >= 2:
        deltas[f"{present[0]}->{present[-1]}"] = out[present[-1]]["sae"] - out[present[0]]["sae"]
    return out, deltas


CSV_COLUMNS = ("model", "beta", "fraction", "estimate", "ci_low", "ci_high", "truth", "abs_error", "status")
PLOT_COLUMNS = ("series", "model", "x_name", "x", "y", "y_low", "y_high", "truth")


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def report_csv(report: BenchReport) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for c in report.cells:
        r = c.report
        w.writerow([_fmt(x) for x in (
            c.model, c.beta, c.fraction, None if r is None else r.rr, None if r is None else r.ci_low,
            None if r is None else r.ci_high, c.truth, c.abs_error, c.status,
        )])
    return buf.getvalue()


def plot_csv(report: BenchReport) -> str:
    """Long-format series: estimate against beta or fraction per model, plus SAE bars."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(PLOT_COLUMNS)
    x_name = "fraction" if report.kind == "subsample" else "beta"
    for c in report.cells:
        if c.report is None:
            continue
        x = c.fraction if x_name == "fraction" else c.beta
        w.writerow([_fmt(v) for v in ("estimate", c.model, x_name, x, c.report.rr, c.report.ci_low,
                                      c.report.ci_high, c.truth)])
    for m, s in report.sae.items():
        if s["sae"] is None:
            continue
        lo = hi = None
        if s["se"] is not None:
            lo, hi = s["sae"] - s["se"], s["sae"] + s["se"]
        w.writerow([_fmt(v) for v in ("sae", m, "", None, s["sae"], lo, hi, None)])
    return buf.getvalue()


def emit_report(report: BenchReport, out_dir, formats: Sequence[str] = ("json", "csv", "plot")) -> list[Path]:
    """Write ``report.json``, ``estimates.csv``, ``plot_data.csv`` and ``runtime.json``.

    Timings live only in ``runtime.json`` so that the other files are
    byte-identical across reruns of the same configuration.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    if "json" in formats:
        written.append(out / "report.json")
        written[-1].write_text(report.to_json() + "\n")
    if "csv" in formats:
        written.append(out / "estimates.csv")
        written[-1].write_text(report_csv(report))
    if "plot" in formats:
        written.append(out / "plot_data.csv")
        written[-1].write_text(plot_csv(report))
    written.append(out / "runtime.json")
    written[-1].write_text(json.dumps(report.runtime, sort_keys=True, indent=1) + "\n")
    return written


# ---------------------------------------------------------------------------
# cell execution


def cell_seed(master: int, *coords: int) -> int:
    """Independent 31-bit seed per cell coordinate tuple."""
    return int(np.random.SeedSequence(master, spawn_key=tuple(coords)).generate_state(1)[0] & 0x7FFFFFFF)


def empirical_report(cohort: Cohort) -> EstimateReport:
    """Crude RR with a delta-method interval on the log scale."""
    arr = cohort.arrays()
    t, y = arr["t"], arr["y"]
    n1, n0 = int((t == 1).sum()), int((t == 0).sum())
    a, c = int(y[t == 1].sum()), int(y[t == 0].sum())
    if n1 == 0 or n0 == 0 or c == 0:
        raise CELError("empirical RR undefined: empty arm or no control events")
    rr = (a / n1) / (c / n0)
    se_log = math.sqrt(max(1 / a - 1 / n1, 0.0) + max(1 / c - 1 / n0, 0.0)) if a else math.inf
    return EstimateReport(rr=rr, ci_low=rr * math.exp(-Z95 * se_log), ci_high=rr * math.exp(Z95 * se_log),
                          method="empirical", se=rr * se_log, ci_kind="delta", n=len(t))


def withheld_inputs(synth: SynthConfig, cohort: Cohort) -> tuple[tuple[str, ...], tuple[int, ...], tuple[str, ...]]:
    """``(statics, codes, groups)`` naming the confounder in model inputs."""
    spec = synth.confounder
    if spec.kind == "persistent":
        return (spec.static,), (), ()
    return (), tuple(cohort.vocabulary.group_members(spec.group)), (spec.group,)


@dataclass
class _Job:
    unit: str
    family: str
    models: list
    beta: float
    fraction: float | None
    cohort: Cohort
    truth: float
    folds: np.ndarray
    exp: ExperimentConfig
    model_seed: int
    pretrained: dict | None


def _run_job(job: _Job, threads: int = 1) -> tuple[list[CellResult], float]:
    torch.set_num_threads(threads)
    t0 = time.monotonic()
    exp = job.exp
    deadline = None if exp.cell_timeout is None else t0 + exp.cell_timeout
    ws, wc, wg = withheld_inputs(exp.synth, job.cohort) if exp.withhold_confounder else ((), (), ())
    results = []
    try:
        if job.family == "empirical":
            reports = {"empirical": empirical_report(job.cohort)}
        elif job.family == "lr":
            bs, bg = (ws, wg) if exp.withhold_from_baselines else ((), ())
            X, _ = build_features(job.cohort, bs, bg)
            arr = job.cohort.arrays()
            preds = lr_predictions(X, arr["t"], arr["y"], job.folds, job.unit, exp.lr_lambda,
                                   ids=[p.id for p in job.cohort.patients])
            reports = {}
            for m in job.models:
                est = BASELINES[m][1]
                reports[m] = tmle_rr(preds) if est == "tmle" else naive_rr(preds)
                reports[m].method = m
        else:
            mc = exp.model.replace(seed=job.model_seed)
            res = fit(job.cohort, mc, job.unit, folds=job.folds, withheld_statics=ws, withheld_codes=wc,
                      deadline=deadline, pretrained=job.pretrained)
            reports = {}
            for m in job.models:
                est = parse_model(m)[2]
                reports[m] = cv_tmle_rr(res.predictions) if est == "cv-tmle" else naive_rr(res.predictions)
                reports[m].method = m
        if deadline is not None and time.monotonic() > deadline:
            raise CellTimeout("wall-clock budget exceeded")
        for m in job.models:
            results.append(CellResult(m, job.beta, job.fraction, job.truth, reports[m]))
    except CellTimeout as e:
        results = [CellResult(m, job.beta, job.fraction, job.truth, None, "timeout", str(e)) for m in job.models]
    except (CELError, ArithmeticError, ValueError) as e:
        log.warning("cell %s beta=%s fraction=%s failed: %s", job.unit, job.beta, job.fraction, e)
        results = [CellResult(m, job.beta, job.fraction, job.truth, None, "failed", f"{type(e).__name__}: {e}")
                   for m in job.models]
    return results, time.monotonic() - t0


def _jobs_for(exp: ExperimentConfig, cohort: Cohort, beta: float, fraction: float | None, truth: float,
              coords: tuple[int, ...], pretrained: dict | None) -> list[_Job]:
    folds = kfold_split(cohort.arrays()["t"], exp.k_folds, cell_seed(exp.seed, 0xF0, *coords))
    units: dict[tuple[str, str], list[str]] = {}
    for m in exp.models:
        family, unit, _ = parse_model(m)
        units.setdefault((family, unit), []).append(m)
    jobs = []
    for (family, unit), models in units.items():
        needs_pre = family == "deep" and unit in ("tarnet-mem", "t-behrt")
        jobs.append(_Job(unit, family, models, beta, fraction, cohort, truth, folds, exp,
                         cell_seed(exp.seed, 0xDE, *coords), pretrained if needs_pre else None))
    return jobs


def _pretrain_state(exp: ExperimentConfig, histories: Cohort) -> dict | None:
    """One MEM pass over the histories, shared by every outcome draw."""
    wants = any(parse_model(m)[0] == "deep" and parse_model(m)[1] in ("tarnet-mem", "t-behrt") for m in exp.models)
    if not wants or exp.model.epochs_pretrain == 0:
        return None
    from .model.masking import ReplacementPool
    from .model.net import TBEHRT

    ws, wc, _ = withheld_inputs(exp.synth, histories) if exp.withhold_confounder else ((), (), ())
    mc = exp.model.replace(seed=cell_seed(exp.seed, 0x9E))
    ec = encode_cohort(histories, mc.max_seq_len, ws, wc)
    torch.manual_seed(mc.seed)
    net = TBEHRT.for_vocab(mc, histories.vocabulary)
    pretrain(net, ec, mc, ReplacementPool(histories.vocabulary))
    return {k: v.clone() for k, v in net.state_dict().items()}


def _execute(jobs: list[_Job], n_jobs: int) -> tuple[list[CellResult], list[float]]:
    if n_jobs <= 1 or len(jobs) <= 1:
        out = [_run_job(j) for j in jobs]
    else:
        with ProcessPoolExecutor(max_workers=n_jobs) as pool:
            out = list(pool.map(_run_job, jobs))
    cells = [c for res, _ in out for c in res]
    return cells, [t for _, t in out]


def _order(cells: list[CellResult], exp: ExperimentConfig) -> list[CellResult]:
    rank = {m: i for i, m in enumerate(exp.models)}
    return sorted(cells, key=lambda c: (rank[c.model], c.beta, -1.0 if c.fraction is None else c.fraction))


def _histories(exp: ExperimentConfig) -> Cohort:
    return compute_lambda(gen_histories(exp.synth), exp.synth.confounder)


def run_confounding_suite(exp: ExperimentConfig, n_jobs: int = 1) -> BenchReport:
    """Sweep the beta grid on one set of histories; every model sees every cell."""
    t0 = time.monotonic()
    histories = _histories(exp)
    pre = _pretrain_state(exp, histories)
    t_pre = time.monotonic() - t0
    jobs, truths = [], {}
    for bi, beta in enumerate(exp.beta_grid):
        cohort, gt = with_outcomes_for_beta(histories, exp.synth, beta)
        truths[repr(float(beta))] = _truth_dict(gt)
        jobs += _jobs_for(exp, cohort, float(beta), None, gt.rr, (bi,), pre)
    cells, times = _execute(jobs, n_jobs)
    cells = _order(cells, exp)
    s, d = summarise(cells, exp.models)
    return BenchReport("confounding", exp.to_dict(), exp.config_hash(), cells, truths, s, d,
                       {"pretrain_s": t_pre, "job_s": times, "total_s": time.monotonic() - t0, "jobs": n_jobs})


def nested_subsamples(n: int, fractions: Sequence[float], seed: int, min_size: int) -> dict[float, np.ndarray]:
    """Index sets for each fraction, nested: a smaller fraction is a prefix of one shuffle."""
    perm = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=(0x5B,)))).permutation(n)
    out = {}
    for f in fractions:
        m = int(round(f * n))
        if m < min_size:
            raise ValidationError(f"fraction {f} leaves {m} patients, fewer than {min_size}")
        out[float(f)] = np.sort(perm[:m])
    return out


def run_subsample_suite(exp: ExperimentConfig, n_jobs: int = 1) -> BenchReport:
    """Nested subsamples of one cohort at ``beta_grid[0]``; truth is the full cohort's."""
    if not exp.subsample_fractions:
        raise ValidationError("subsample_fractions must be set for a subsample suite")
    t0 = time.monotonic()
    beta = float(exp.beta_grid[0])
    histories = _histories(exp)
    cohort, gt = with_outcomes_for_beta(histories, exp.synth, beta)
    subsets = nested_subsamples(len(cohort), exp.subsample_fractions, exp.seed, 2 * exp.k_folds)
    jobs = []
    t_pre = 0.0
    for fi, (f, idx) in enumerate(subsets.items()):
        sub = cohort.subset(idx) if len(idx) < len(cohort) else cohort
        tp = time.monotonic()
        pre = _pretrain_state(exp, sub)
        t_pre += time.monotonic() - tp
        jobs += _jobs_for(exp, sub, beta, f, gt.rr, (0, fi), pre)
    cells, times = _execute(jobs, n_jobs)
    cells = _order(cells, exp)
    s, d = summarise(cells, exp.models)
    return BenchReport("subsample", exp.to_dict(), exp.config_hash(), cells, {repr(beta): _truth_dict(gt)}, s, d,
                       {"pretrain_s": t_pre, "job_s": times, "total_s": time.monotonic() - t0, "jobs": n_jobs})


def _truth_dict(gt: GroundTruth) -> dict:
    return {k: float(v) for k, v in asdict(gt).items()}
