"""Experiment configs, run directories, evaluation tables and comparison reports.

A training run writes one directory per seed::

    <out>/seed_<s>/metrics.csv      one row per iteration
    <out>/seed_<s>/checkpoint.bin   model parameters (empty for the random policy)
    <out>/seed_<s>/manifest.json    full config, its hash, the seed and the env config

Nothing is written until the whole config has been validated.
"""
from __future__ import annotations

import csv
import hashlib
import json
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np
from threadpoolctl import threadpool_limits

from ._kv import read_kv
from .autodiff import load_checkpoint, save_checkpoint
from .recommender import Recommender
from .simulator import RuleBasedEnv, SimConfig
from .training import (METHODS, METRIC_FIELDS, PolicyGradientLearner, RandomLearner,
                       TrainConfig, ValueLearner, eval_seeds, evaluate, train)

MANIFEST_VERSION = 1
VALUE_METHODS = ("value_based", "value_based+ram")


class ConfigError(ValueError):
    """An invalid experiment setting; ``field`` names the offending key."""

    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


def parse_int_list(text: str) -> tuple[int, ...]:
    parts = [p.strip() for p in str(text).split(",") if p.strip()]
    if not parts:
        raise ValueError("empty list")
    return tuple(int(p) for p in parts)


@dataclass(frozen=True)
class ExperimentConfig:
    method: str = "rar_a"
    env: str | None = None
    seeds: tuple[int, ...] = (0,)
    out: str = "runs"
    alpha: float = 0.1
    beta: float = 0.1
    psi: float = 0.1
    omega: float = 5.0
    m: int = 4
    gamma: float = 0.99
    lr: float = 1e-3
    batch: int = 32
    iterations: int = 2000
    horizon: int = 30
    epsilon_start: float = 0.1
    epsilon_end: float = 0.01
    temperature: float = 0.05
    mean_baseline: bool = False
    target_pool: str = "mean"
    rar_width: int = 128
    eval_every: int = 100
    eval_students: int = 200
    eval_steps: tuple[int, ...] = (10, 30)

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in fields(cls)]

    @classmethod
    def from_strings(cls, raw: dict[str, str], base: ExperimentConfig | None = None,
                     base_dir: Path | None = None) -> ExperimentConfig:
        """Build from string values (a config file or CLI flags); unknown keys are rejected."""
        known = {f.name: f for f in fields(cls)}
        unknown = sorted(set(raw) - set(known))
        if unknown:
            raise ConfigError(unknown[0], f"unknown key (allowed: {', '.join(known)})")
        values = asdict(base) if base is not None else {}
        for key, text in raw.items():
            values[key] = _convert(key, known[key].type, text, base_dir)
        try:
            cfg = cls(**values)
        except TypeError as exc:
            raise ConfigError("config", str(exc)) from None
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path, base: ExperimentConfig | None = None) -> ExperimentConfig:
        path = Path(path)
        try:
            raw = read_kv(path)
        except (OSError, ValueError) as exc:
            raise ConfigError("config", str(exc)) from None
        return cls.from_strings(raw, base, path.parent)

    def train_config(self, seed: int) -> TrainConfig:
        kw = {f.name: getattr(self, f.name) for f in fields(TrainConfig) if f.name != "seed"}
        return TrainConfig(seed=seed, **kw)

    def sim_config(self) -> SimConfig:
        if self.env is None:
            return SimConfig()
        return SimConfig.load(self.env)

    def validate(self) -> None:
        """Raise :class:`ConfigError` naming the first bad field."""
        if self.method not in METHODS:
            raise ConfigError("method", f"must be one of {', '.join(METHODS)}; got {self.method!r}")
        if not self.seeds:
            raise ConfigError("seeds", "at least one seed is required")
        if len(set(self.seeds)) != len(self.seeds):
            raise ConfigError("seeds", f"duplicate seeds in {list(self.seeds)}")
        if not self.out:
            raise ConfigError("out", "an output directory is required")
        for seed in self.seeds:
            try:
                self.train_config(seed)
            except ValueError as exc:
                raise ConfigError(_blame(str(exc), seed), str(exc)) from None
        try:
            sim = self.sim_config()
            env = RuleBasedEnv(sim)
        except (OSError, ValueError) as exc:
            raise ConfigError("env", str(exc)) from None
        if self.horizon > env.horizon:
            raise ConfigError("horizon", f"{self.horizon} exceeds the environment horizon "
                                         f"{env.horizon}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["seeds"] = list(self.seeds)
        d["eval_steps"] = list(self.eval_steps)
        return d

    def config_hash(self) -> str:
        """Hash of everything that shapes a run, except the seed list and output location."""
        d = self.to_dict()
        d.pop("seeds")
        d.pop("out")
        d["env"] = env_fingerprint(self.sim_config())
        blob = json.dumps(d, sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def _convert(key: str, kind, text: str, base_dir: Path | None):
    kind = str(kind)
    try:
        if kind.startswith("tuple"):
            return parse_int_list(text)
        if kind == "bool":
            low = str(text).strip().lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(f"expected true/false, got {text!r}")
            return low in ("true", "1", "yes")
        if kind == "int":
            return int(text)
        if kind == "float":
            value = float(text)
            if not math.isfinite(value):
                raise ValueError(f"{text!r} is not finite")
            return value
    except ValueError as exc:
        raise ConfigError(key, f"cannot parse {text!r} ({exc})") from None
    if key == "env" and base_dir is not None and not Path(text).is_absolute():
        return str(base_dir / text)
    return str(text)


def _blame(message: str, seed: int) -> str:
    """Best guess at the field a TrainConfig error message refers to."""
    names = sorted(ExperimentConfig.field_names(), key=len, reverse=True)
    for name in names:
        if message.startswith((f"{name} ", f"{name}=")):
            return name
    for name in names:
        if f" {name}" in message or f"{name}=" in message:
            return name
    return "seeds" if "seed" in message else "config"


def env_fingerprint(sim: SimConfig) -> dict:
    """Simulator settings plus a digest of the knowledge graph they load."""
    d = asdict(sim)
    graph_text = sim.load_graph().dumps()
    d["graph"] = hashlib.sha256(graph_text.encode()).hexdigest()[:16]
    return d


# metrics CSV

def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_metrics(path, rows: Sequence[dict]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(METRIC_FIELDS)
        for row in rows:
            writer.writerow([_fmt(row[k]) for k in METRIC_FIELDS])


def read_metrics(path) -> list[dict]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != METRIC_FIELDS:
            raise ValueError(f"{path}: unexpected columns {reader.fieldnames}")
        rows = []
        for raw in reader:
            row = {}
            for k in METRIC_FIELDS:
                v = raw[k]
                row[k] = None if v == "" else (int(v) if k == "iteration" else float(v))
            rows.append(row)
    return rows


# training runs

def seed_dir(out, seed: int) -> Path:
    return Path(out) / f"seed_{seed}"


def _run_one(cfg: ExperimentConfig, seed: int, out_dir: Path) -> Path:
    tcfg = cfg.train_config(seed)
    sim = cfg.sim_config()
    start = time.perf_counter()
    result = train(tcfg, RuleBasedEnv(sim))
    elapsed = time.perf_counter() - start
    out_dir.mkdir(parents=True, exist_ok=True)
    write_metrics(out_dir / "metrics.csv", result.history)
    learner = result.learner
    state = {} if isinstance(learner, RandomLearner) else learner.model.state_dict()
    save_checkpoint(out_dir / "checkpoint.bin", state)
    manifest = dict(
        version=MANIFEST_VERSION,
        config=cfg.to_dict(),
        config_hash=cfg.config_hash(),
        seed=seed,
        env=env_fingerprint(sim),
        final_eval={str(t): list(v) for t, v in result.final_eval.items()},
        wall_clock_seconds=round(elapsed, 3),
    )
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return out_dir


def _single_threaded(fn, *args):
    with threadpool_limits(1):
        return fn(*args)


def _worker(args):
    return _single_threaded(_run_one, *args)


def run_training(cfg: ExperimentConfig, workers: int = 1) -> list[Path]:
    """Train every seed; independent seeds may run in parallel processes."""
    cfg.validate()
    jobs = [(cfg, s, seed_dir(cfg.out, s)) for s in cfg.seeds]
    if workers <= 1 or len(jobs) == 1:
        return [_worker(job) for job in jobs]
    with ProcessPoolExecutor(max_workers=min(workers, len(jobs))) as pool:
        return list(pool.map(_worker, jobs))


def read_manifest(path) -> dict:
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.json"
    manifest = json.loads(path.read_text())
    if manifest.get("version") != MANIFEST_VERSION:
        raise ValueError(f"{path}: unsupported manifest version {manifest.get('version')}")
    return manifest


def config_from_manifest(manifest: dict, out: str | None = None) -> ExperimentConfig:
    d = dict(manifest["config"])
    d["seeds"] = (manifest["seed"],)
    d["eval_steps"] = tuple(d["eval_steps"])
    if out is not None:
        d["out"] = out
    cfg = ExperimentConfig(**d)
    cfg.validate()
    if cfg.config_hash() != manifest["config_hash"]:
        raise ValueError("manifest config hash does not match its config (edited, or the "
                         "environment files changed)")
    return cfg


def rerun_manifest(path, out: str) -> Path:
    """Re-train the single seed a manifest describes into ``out``."""
    cfg = config_from_manifest(read_manifest(path), out)
    return run_training(cfg)[0]


# evaluation

@dataclass
class EvalTable:
    rows: dict[int, tuple[float, float]]
    students: int

    def format(self) -> str:
        lines = [f"{'t':>4}  {'mean':>10}  {'std':>10}   ({self.students} students)"]
        for t, (mu, sd) in sorted(self.rows.items()):
            lines.append(f"{t:>4}  {mu:>10.6f}  {sd:>10.6f}")
        return "\n".join(lines)


def load_learner(checkpoint, num_questions: int, greedy: bool = False):
    """A policy from a checkpoint file; an empty checkpoint means the random policy."""
    state = load_checkpoint(checkpoint)
    if not state:
        return RandomLearner(num_questions)
    model = Recommender.from_state_dict(state)
    if model.num_questions != num_questions:
        raise ValueError(
            f"checkpoint expects {model.num_questions} questions (f_e.weight has shape "
            f"{state['f_e.weight'].shape}) but the environment has {num_questions}"
        )
    return ValueLearner(model) if greedy else PolicyGradientLearner(model)


def evaluate_checkpoint(checkpoint, env_config: SimConfig | None = None,
                        seeds: Sequence[int] | None = None, steps: Sequence[int] = (10, 30),
                        greedy: bool | None = None) -> EvalTable:
    """Mean and std of the learning effect at each t over ``seeds`` (default: the held-out set).

    ``greedy`` defaults to whatever the run's manifest says about its method.
    """
    checkpoint = Path(checkpoint)
    if checkpoint.is_dir():
        checkpoint = checkpoint / "checkpoint.bin"
    if greedy is None:
        greedy = False
        manifest_path = checkpoint.parent / "manifest.json"
        if manifest_path.exists():
            greedy = read_manifest(manifest_path)["config"]["method"] in VALUE_METHODS
    env = RuleBasedEnv(env_config)
    steps = list(steps)
    bad = [t for t in steps if t < 0 or t > env.horizon]
    if bad:
        raise ValueError(f"evaluation steps {bad} outside [0, {env.horizon}]")
    seeds = list(eval_seeds(200) if seeds is None else seeds)
    learner = load_learner(checkpoint, env.num_questions, greedy)
    return EvalTable(evaluate(env, learner, seeds, steps, greedy=greedy), len(seeds))


# comparison reports

@dataclass
class RunSummary:
    label: str
    method: str
    env: dict
    config: dict
    per_seed: dict[int, dict[int, float]]       # seed -> t -> final eval mean
    losses: dict[int, tuple[float, float]]      # seed -> (first total, last total)
    wall_clock: float = 0.0


def _seed_dirs(run_dir: Path) -> list[Path]:
    if (run_dir / "manifest.json").exists():
        return [run_dir]
    dirs = sorted((p for p in run_dir.glob("seed_*") if (p / "manifest.json").exists()),
                  key=lambda p: int(p.name.split("_", 1)[1]))
    if not dirs:
        raise FileNotFoundError(f"{run_dir}: no completed runs (seed_*/manifest.json) found")
    return dirs


def load_run(run_dir) -> RunSummary:
    """Summarise a run directory from its metrics CSVs; manifests supply labels only."""
    run_dir = Path(run_dir)
    per_seed, losses, envs, methods, configs = {}, {}, [], set(), []
    wall = 0.0
    for d in _seed_dirs(run_dir):
        manifest = read_manifest(d)
        rows = read_metrics(d / "metrics.csv")
        if not rows:
            raise ValueError(f"{d}: empty metrics file")
        evals = [r for r in rows if r["eval_delta_t30"] is not None or
                 r["eval_delta_t10"] is not None]
        last = evals[-1] if evals else {}
        per_seed[manifest["seed"]] = {t: last.get(f"eval_delta_t{t}") for t in (10, 30)}
        losses[manifest["seed"]] = (rows[0]["total"], rows[-1]["total"])
        envs.append(manifest["env"])
        methods.add(manifest["config"]["method"])
        configs.append(manifest["config_hash"])
        wall += manifest.get("wall_clock_seconds", 0.0)
    if any(e != envs[0] for e in envs):
        raise ValueError(f"{run_dir}: seeds were trained on different environments")
    if len(set(configs)) != 1:
        raise ValueError(f"{run_dir}: seeds come from different configs")
    return RunSummary(run_dir.name, "/".join(sorted(methods)), envs[0],
                      read_manifest(_seed_dirs(run_dir)[0])["config"], per_seed, losses, wall)


@dataclass
class Comparison:
    runs: list[RunSummary]
    t: int = 30
    wins: dict[str, tuple[int, int]] = field(default_factory=dict)

    def format(self) -> str:
        lines = ["Learning effect at the final evaluation (mean +- std over seeds)", ""]
        lines.append(f"{'run':<24} {'method':<18} {'seeds':>5}  {'t=10':>20}  {'t=30':>20}  "
                     f"{'loss first -> last':>26}")
        for run in self.runs:
            cells = []
            for t in (10, 30):
                vals = [v[t] for v in run.per_seed.values() if v[t] is not None]
                cells.append(f"{np.mean(vals):.4f} +- {np.std(vals):.4f}" if vals else "n/a")
            first = np.mean([a for a, _ in run.losses.values()])
            last = np.mean([b for _, b in run.losses.values()])
            lines.append(f"{run.label:<24} {run.method:<18} {len(run.per_seed):>5}  "
                         f"{cells[0]:>20}  {cells[1]:>20}  {first:>12.3f} -> {last:<11.3f}")
        ref = self.runs[0]
        lines += ["", f"Per-seed t={self.t} against {ref.label} (win = strictly higher)", ""]
        seeds = sorted(ref.per_seed)
        header = f"{'seed':>6}" + "".join(f"  {r.label:>24}" for r in self.runs)
        lines.append(header)
        for s in seeds:
            lines.append(f"{s:>6}" + "".join(f"  {r.per_seed[s][self.t]:>24.6f}"
                                             for r in self.runs))
        lines.append("")
        for run in self.runs[1:]:
            w, l = self.wins[run.label]
            verdict = "higher" if w > l else ("lower" if l > w else "tied")
            lines.append(f"{run.label} vs {ref.label}: {w} wins / {l} losses "
                         f"over {len(seeds)} seeds ({verdict})")
        lines.append("")
        lines.append("Total training wall clock: " +
                     ", ".join(f"{r.label} {r.wall_clock:.0f}s" for r in self.runs))
        return "\n".join(lines) + "\n"


def compare_runs(run_dirs: Sequence, t: int = 30) -> Comparison:
    """Side-by-side table and per-seed wins/losses of every run against the first."""
    if len(run_dirs) < 2:
        raise ValueError("compare needs at least two runs")
    if t not in (10, 30):
        raise ValueError("t must be 10 or 30 (the logged evaluation columns)")
    runs = [load_run(d) for d in run_dirs]
    labels = [r.label for r in runs]
    for i, r in enumerate(runs):
        if labels.count(r.label) > 1:
            r.label = f"{r.label}#{i}"
    ref = runs[0]
    for run in runs[1:]:
        if run.env != ref.env:
            raise ValueError(f"{run.label} and {ref.label} used different environment configs")
        if sorted(run.per_seed) != sorted(ref.per_seed):
            raise ValueError(f"{run.label} and {ref.label} cover different seeds: "
                             f"{sorted(run.per_seed)} vs {sorted(ref.per_seed)}")
    comp = Comparison(runs, t)
    for run in runs[1:]:
        w = l = 0
        for s, vals in ref.per_seed.items():
            a, b = run.per_seed[s][t], vals[t]
            if a is None or b is None:
                continue
            w += a > b
            l += a < b
        comp.wins[run.label] = (w, l)
    return comp


def default_workers() -> int:
    return max(1, len(os.sched_getaffinity(0)) if hasattr(os, "sched_getaffinity")
               else (os.cpu_count() or 1))
