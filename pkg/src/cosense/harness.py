"""Experiment configuration, single runs, batches and report files."""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import logging
import math
import pickle
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np
import yaml

from .baselines import BASELINES, BaselinePolicy
from .dispatch import DispatchConfig
from .domain import Normalization
from .metrics import normalized_coverage, summarize
from .policy import LearnerConfig, UrbanHuRoPolicy, make_encoder, train_q
from .sensing import QFunction, SensingRewardConfig, TrainingError, load_checkpoint, save_checkpoint
from .simulator import (
    ConfigError,
    MapConfig,
    SimParams,
    WorkloadConfig,
    ingest_orders,
    build_grid,
    make_world,
    step,
    write_events,
)

log = logging.getLogger(__name__)

POLICIES = ("urbanhuro", *BASELINES)

# orders per slot by hour of day: lunch and dinner peaks
DEFAULT_PROFILE = [0.2, 0.1, 0.1, 0.1, 0.1, 0.2, 0.4, 0.8,
                   1.0, 1.0, 1.4, 2.4, 2.8, 1.6, 1.0, 1.0,
                   1.2, 2.0, 2.6, 2.2, 1.2, 0.8, 0.5, 0.3]


@dataclass
class SensingSection:
    w_reg: float = 1.0
    w_nbr: float = 0.5
    w_pen: float = 10.0
    staleness_window: int = 60


@dataclass
class SimSection:
    capacity: int = 3
    beta: float = 0.9
    guard_safety: int = 1


@dataclass
class DispatchSection:
    top_n: int = 3
    epsilon: float = 0.1
    n_workers: int = 1
    sigma_km: float | None = None
    backend: str = "serial"


@dataclass
class MetricsSection:
    overdue_penalty: float | None = None


@dataclass
class LearnerSection(LearnerConfig):
    checkpoint: str | None = None


@dataclass
class ExperimentConfig:
    map: MapConfig = field(default_factory=MapConfig)
    workload: WorkloadConfig = field(default_factory=lambda: WorkloadConfig(
        arrival_rate=list(DEFAULT_PROFILE), n_hotspots=6))
    dispatch: DispatchSection = field(default_factory=DispatchSection)
    sensing: SensingSection = field(default_factory=SensingSection)
    learner: LearnerSection = field(default_factory=LearnerSection)
    sim: SimSection = field(default_factory=SimSection)
    metrics: MetricsSection = field(default_factory=MetricsSection)
    normalization: Normalization = field(default_factory=Normalization)
    orders_csv: str | None = None

    # derived objects ------------------------------------------------------

    def sensing_config(self, ablation: str | None = None) -> SensingRewardConfig:
        s = self.sensing
        return SensingRewardConfig(s.w_reg, s.w_nbr, s.w_pen, s.staleness_window).ablate(ablation)

    def sim_params(self, ablation: str | None = None) -> SimParams:
        return SimParams(self.sim.capacity, self.sim.beta, self.sim.guard_safety, self.sensing_config(ablation))

    def dispatch_config(self, n_workers: int | None = None) -> DispatchConfig:
        d = self.dispatch
        sigma = d.sigma_km if d.sigma_km is not None else 2.0 * self.map.cell_size_km
        return DispatchConfig(d.top_n, d.epsilon, n_workers or d.n_workers, self.sim.capacity, sigma,
                              self.sim.beta, d.backend)

    @property
    def penalty(self) -> float:
        p = self.metrics.overdue_penalty
        return self.sensing.w_pen if p is None else p

    def to_dict(self) -> dict:
        return _plain(dataclasses.asdict(self))

    def fingerprint(self, for_model: bool = False) -> str:
        """Hash of the config; ``for_model`` drops settings that cannot change a trained model."""
        d = self.to_dict()
        if for_model:
            for k in ("n_workers", "backend"):
                d["dispatch"].pop(k)
            d["learner"].pop("checkpoint")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]

    def validate(self) -> None:
        try:
            self.map.validate()
            self.workload.validate()
            self.sim_params().validate()
            self.dispatch_config()
            self.sensing_config()
            self.learner.validate()
        except (ValueError, TypeError) as exc:
            raise ConfigError(str(exc)) from exc
        if self.workload.horizon > self.normalization.max_horizon:
            raise ConfigError("normalization.max_horizon must cover workload.horizon")


def _plain(x):
    if isinstance(x, dict):
        return {k: _plain(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_plain(v) for v in x]
    return x


def _build(cls, section: str, data: Any):
    if data is None:
        return cls()
    if not isinstance(data, dict):
        raise ConfigError(f"{section}: expected a mapping")
    names = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(names))
    if unknown:
        raise ConfigError(f"{section}: unknown field(s) {', '.join(unknown)}")
    kw = {}
    for k, v in data.items():
        if k in ("fee_range", "deadline_slack", "hidden") and isinstance(v, list):
            v = tuple(v)
        if k == "spatial_hotspots" and v is not None:
            v = [tuple(h) for h in v]
        kw[k] = v
    try:
        return cls(**kw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{section}: {exc}") from exc


_SECTIONS = {
    "map": MapConfig,
    "workload": WorkloadConfig,
    "dispatch": DispatchSection,
    "sensing": SensingSection,
    "learner": LearnerSection,
    "sim": SimSection,
    "metrics": MetricsSection,
    "normalization": Normalization,
}


def config_from_dict(data: dict | None) -> ExperimentConfig:
    data = dict(data or {})
    unknown = sorted(set(data) - set(_SECTIONS) - {"orders_csv"})
    if unknown:
        raise ConfigError(f"unknown section(s): {', '.join(unknown)}")
    base = ExperimentConfig()
    kw = {}
    for name, cls in _SECTIONS.items():
        if name not in data:
            continue
        sub = data[name] or {}
        if not isinstance(sub, dict):
            raise ConfigError(f"{name}: expected a mapping")
        unknown = sorted(set(sub) - {f.name for f in dataclasses.fields(cls)})
        if unknown:
            raise ConfigError(f"{name}: unknown field(s) {', '.join(unknown)}")
        merged = dataclasses.asdict(getattr(base, name))
        merged.update(sub)
        kw[name] = _build(cls, name, merged)
    cfg = dataclasses.replace(base, **kw, orders_csv=data.get("orders_csv"))
    _check_types(cfg)
    cfg.validate()
    return cfg


def _check_types(cfg: ExperimentConfig) -> None:
    for name in _SECTIONS:
        sec = getattr(cfg, name)
        for f in dataclasses.fields(sec):
            v = getattr(sec, f.name)
            if isinstance(v, bool) or v is None or isinstance(v, (list, tuple, str)):
                continue
            if not isinstance(v, (int, float)) or (isinstance(v, float) and not math.isfinite(v)):
                raise ConfigError(f"{name}.{f.name}: expected a finite number, got {v!r}")


def load_config(path) -> ExperimentConfig:
    try:
        with open(path) as fh:
            data = yaml.safe_load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"config {path} is not valid YAML: {exc}") from exc
    if data is not None and not isinstance(data, dict):
        raise ConfigError("config root must be a mapping")
    return config_from_dict(data)


# runs -------------------------------------------------------------------------


class NumericalFailure(RuntimeError):
    def __init__(self, message: str, checkpoint: str | None = None):
        super().__init__(message)
        self.checkpoint = checkpoint


@dataclass
class RunResult:
    report: dict
    event_log: list[tuple]
    rows: list[tuple]
    timing: dict


def make_world_for(cfg: ExperimentConfig, seed: int, ablation: str | None = None, n_rvs: int | None = None):
    wl = dataclasses.replace(cfg.workload)
    if n_rvs is not None:
        wl.n_rvs = n_rvs
    scheduled = None
    grid = None
    if cfg.orders_csv:
        grid = build_grid(cfg.map, seed)
        scheduled = ingest_orders(cfg.orders_csv, grid)
    return make_world(cfg.map, wl, cfg.sim_params(ablation), seed, scheduled=scheduled, grid=grid)


_MODEL_CACHE: dict[tuple[str, str | None], QFunction] = {}


def trained_q(cfg: ExperimentConfig, ablation: str | None = None) -> QFunction:
    """Q-function for a reward variant: from ``learner.checkpoint`` or trained once and cached."""
    if cfg.learner.checkpoint:
        return load_checkpoint(cfg.learner.checkpoint)
    key = (cfg.fingerprint(for_model=True), ablation)
    if key not in _MODEL_CACHE:
        seed0 = 10_000 + cfg.learner.seed * 100

        def factory(ep):
            return make_world_for(cfg, seed0 + ep, ablation)

        q, hist = train_q(factory, cfg.learner, cfg.dispatch_config(1), cfg.normalization)
        log.info("trained %s model: %d transitions", ablation or "full", hist.transitions)
        _MODEL_CACHE[key] = q
    return _MODEL_CACHE[key]


def run_experiment(
    cfg: ExperimentConfig,
    policy: str = "urbanhuro",
    seed: int = 0,
    out_dir=None,
    workers: int | None = None,
    ablation: str | None = None,
    n_rvs: int | None = None,
    q: QFunction | None = None,
) -> RunResult:
    if policy not in POLICIES:
        raise ConfigError(f"unknown policy {policy!r}; choose from {', '.join(POLICIES)}")
    if ablation is not None and policy != "urbanhuro":
        raise ConfigError("--ablation applies to the urbanhuro policy only")
    world = make_world_for(cfg, seed, ablation, n_rvs)
    dcfg = cfg.dispatch_config(workers)
    if policy == "urbanhuro":
        q = q if q is not None else trained_q(cfg, ablation)
        enc = make_encoder(world, cfg.normalization)
        if q.state_dim != enc.length:
            raise ConfigError(f"checkpoint state length {q.state_dim} does not match encoder length {enc.length}")
        actor = UrbanHuRoPolicy(q, enc, dcfg, seed=seed)
    else:
        actor = BaselinePolicy(policy)
    latencies = []
    traces = []
    try:
        while not world.done:
            t0 = time.perf_counter()
            try:
                disp, routing = actor.act(world)
            except (FloatingPointError, TrainingError) as exc:
                raise NumericalFailure(f"slot {world.t}: {exc}", _dump_world(world, out_dir)) from exc
            latencies.append(time.perf_counter() - t0)
            if isinstance(actor, UrbanHuRoPolicy) and actor.last_dispatch is not None:
                traces.append(actor.last_dispatch.trace_record())
            world, _ = step(world, disp, routing)
    finally:
        if isinstance(actor, UrbanHuRoPolicy):
            actor.close()
    summary = summarize(world.event_log, cfg.workload.horizon, cfg.penalty)
    report = {
        "policy": policy,
        "seed": seed,
        "ablation": ablation,
        "n_workers": dcfg.n_workers,
        "n_couriers": world.workload.n_couriers,
        "n_rvs": world.workload.n_rvs,
        "sensing_flags": dataclasses.asdict(world.params.sensing),
        "config": cfg.to_dict(),
        "metrics": summary,
        "dispatch_trace": {
            "slots": len(traces),
            "candidates_total": sum(t["candidates"] for t in traces),
            "passes_mean": round(float(np.mean([t["passes"] for t in traces])), 6) if traces else 0.0,
        },
    }
    from .metrics import metrics_rows

    rows = metrics_rows(world.event_log, cfg.workload.horizon, cfg.penalty)
    timing = {
        "dispatch_latency_mean_s": float(np.mean(latencies)) if latencies else 0.0,
        "dispatch_latency_max_s": float(np.max(latencies)) if latencies else 0.0,
        "slots": len(latencies),
    }
    result = RunResult(report, world.event_log, rows, timing)
    if out_dir is not None:
        write_outputs(result, out_dir, traces)
    return result


def _dump_world(world, out_dir) -> str | None:
    if out_dir is None:
        return None
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "checkpoint.pkl"
    with open(path, "wb") as fh:
        pickle.dump(world, fh)
    return str(path)


def write_outputs(result: RunResult, out_dir, traces: Sequence[dict] = ()) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "report.json", "w") as fh:
        json.dump(result.report, fh, indent=2, sort_keys=True)
        fh.write("\n")
    with open(out / "metrics.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["slot", "overdue_cum", "regions_visited_cum", "income_cum"])
        w.writerows(result.rows)
    write_events(result.event_log, out / "events.jsonl")
    with open(out / "timing.json", "w") as fh:
        json.dump(result.timing, fh, indent=2)
    if traces:
        with open(out / "dispatch_trace.jsonl", "w") as fh:
            for t in traces:
                fh.write(json.dumps(t, sort_keys=True) + "\n")


# batches ----------------------------------------------------------------------


def run_batch(cfg: ExperimentConfig, policies: Sequence[str], seeds: Sequence[int], rv_counts: Sequence[int],
              ablations: Sequence[str | None] = (None,), out_dir=None) -> list[dict]:
    """Run every (policy, rv count, seed) combination and return summary rows.

    Coverage is normalised against the full urbanhuro run of the same seed and
    fleet when that run is part of the batch.
    """
    rows = []
    logs: dict[tuple, list] = {}
    jobs = []
    for n in rv_counts:
        for p in policies:
            for ab in (ablations if p == "urbanhuro" else (None,)):
                for s in seeds:
                    jobs.append((p, ab, n, s))
    for p, ab, n, s in jobs:
        sub = None if out_dir is None else Path(out_dir) / f"{p}{'-' + ab if ab else ''}_rv{n}_s{s}"
        res = run_experiment(cfg, p, s, sub, ablation=ab, n_rvs=n)
        logs[(p, ab, n, s)] = res.event_log
        m = res.report["metrics"]
        rows.append({"policy": p, "ablation": ab, "n_rvs": n, "seed": s,
                     "overdue": m["overdue_total"], "coverage": m["coverage_mean_hourly"],
                     "regions_total": m["regions_visited_total"], "income": m["courier_income_mean_hourly"],
                     "completed": m["orders_completed"], "created": m["orders_created"]})
    for r in rows:
        ref = logs.get(("urbanhuro", None, r["n_rvs"], r["seed"]))
        r["c_n"] = None if ref is None else normalized_coverage(logs[(r["policy"], r["ablation"], r["n_rvs"], r["seed"])], ref)
    return rows


def aggregate(rows: Sequence[dict], key=("policy", "ablation", "n_rvs")) -> dict[tuple, dict]:
    groups: dict[tuple, list[dict]] = {}
    for r in rows:
        groups.setdefault(tuple(r[k] for k in key), []).append(r)
    out = {}
    for k, rs in groups.items():
        agg = {"n": len(rs)}
        for m in ("overdue", "coverage", "regions_total", "income", "completed", "c_n"):
            vals = [r[m] for r in rs if r.get(m) is not None]
            if vals:
                agg[m] = float(np.mean(vals))
                agg[m + "_std"] = float(np.std(vals))
        out[k] = agg
    return out


def save_model(q: QFunction, path) -> None:
    save_checkpoint(q, path)
