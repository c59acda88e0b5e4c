"""Experiment orchestration: configs, replicated-seed runs, aggregation, reports.

Output layout under the results directory::

    results.csv                      one MetricsRecord per policy
    static.csv                       static-vs-dynamic comparison (static_compare task)
    manifest.json                    config hash, tool version, completed runs
    runs/<policy>[@variant]/<seed>/  log.csv, summary.json, ckpt-<step>
    toy_affinity.tsv, toy_kl.tsv     toygauss task

Every run is keyed by a hash of everything that determines it, so re-running
a config only trains what is missing.
"""
from __future__ import annotations

import concurrent.futures as cf
import copy
import csv
import hashlib
import json
import logging
import math
import os
import re
from dataclasses import dataclass, field
from pathlib import Path

import jsonschema
import numpy as np
import yaml

from . import __version__
from . import metrics as X
from . import model as M
from .data import LabeledDataset, fit_stats, load_cifar_binary, make_synthetic_images, split_balanced, with_stats
from .errors import DivergenceError, ValidationError
from .rng import subseed
from .toygauss import DEFAULT_TRAIN as TOY_TRAIN
from .toygauss import GaussianMixtureSpec, run_toy_experiment, write_outputs
from .trainer import Checkpoint, TrainConfig, read_log_csv, switch_grid, train, write_log_csv
from .transforms import Policy

log = logging.getLogger(__name__)

TASKS = ("affinity", "diversity", "entropy", "switchoff", "static_compare", "toygauss")

DEFAULTS = {
    "dataset": {"source": "synthetic", "num_classes": 4, "side": 16, "train_size": 4096, "val_size": 1024, "test_size": 1024, "seed": 0},
    "model": {"architecture": "tinycnn", "hidden": 128, "conv_channels": 8, "init_scale": 1.0},
    "train": {
        "steps": 3000,
        "batch_size": 64,
        "base_lr": 0.1,
        "lr_schedule": "cosine",
        "decay_step": 0,
        "decay_factor": 10.0,
        "momentum": 0.9,
        "l2_coeff": 5e-4,
        "log_every": 25,
        "train_acc_threshold": 0.97,
        "final_loss_window": 10,
    },
    "switchoff": {"candidates": 5, "lo": 0.3, "hi": 0.95},
    "toygauss": {"delta_min": -3.0, "delta_max": 3.0, "resolution": 31, "val_per_class": 2000, "train_per_class": 1000, "steps": 2000, "seed": 0},
    "policies": ["Identity"],
    "seeds": list(range(1, 11)),
    "tasks": ["affinity", "diversity", "entropy"],
    "outputs": "results",
}

_num = {"type": "number"}
_int = {"type": "integer"}
_pos = {"type": "integer", "minimum": 1}

SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "dataset": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "source": {"enum": ["synthetic", "cifar"]},
                "path": {"type": "string"},
                "num_classes": {"type": "integer", "minimum": 2},
                "side": {"type": "integer", "minimum": 8},
                "train_size": _pos,
                "val_size": _pos,
                "test_size": _pos,
                "seed": _int,
            },
        },
        "model": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "architecture": {"enum": list(M.ARCHITECTURES)},
                "hidden": _pos,
                "conv_channels": _pos,
                "init_scale": {"type": "number", "minimum": 0},
            },
        },
        "train": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "steps": {"type": "integer", "minimum": 0},
                "batch_size": _pos,
                "base_lr": _num,
                "lr_schedule": {"enum": ["cosine", "step", "constant"]},
                "decay_step": _int,
                "decay_factor": _num,
                "momentum": _num,
                "l2_coeff": {"type": "number", "minimum": 0},
                "l2_off_step": {"type": ["integer", "null"]},
                "log_every": _pos,
                "train_acc_threshold": _num,
                "final_loss_window": _pos,
            },
        },
        "switchoff": {
            "type": "object",
            "additionalProperties": False,
            "properties": {"candidates": _pos, "lo": _num, "hi": _num},
        },
        "toygauss": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "delta_min": _num,
                "delta_max": _num,
                "resolution": _pos,
                "val_per_class": {"type": "integer", "minimum": 2},
                "train_per_class": _pos,
                "steps": _pos,
                "seed": _int,
            },
        },
        "policies": {
            "type": "array",
            "items": {"anyOf": [{"type": "string"}, {"type": "object", "required": ["ops"]}]},
        },
        "seeds": {"type": "array", "items": _int, "minItems": 1},
        "tasks": {"type": "array", "items": {"enum": list(TASKS)}, "minItems": 1, "uniqueItems": True},
        "outputs": {"type": "string"},
    },
}


@dataclass
class ExperimentConfig:
    dataset: dict
    model: dict
    train: dict
    switchoff: dict
    toygauss: dict
    policies: list[Policy]
    seeds: list[int]
    tasks: list[str]
    outputs: str
    raw: dict = field(repr=False, default_factory=dict)

    def model_spec(self, shape) -> M.ModelSpec:
        return M.ModelSpec(input_shape=shape, num_classes=self.dataset["num_classes"], **self.model)

    def train_config(self, **kw) -> TrainConfig:
        return TrainConfig(**self.train, **kw)

    def hash(self) -> str:
        return _digest({k: v for k, v in self.raw.items() if k != "outputs"})


def _digest(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()[:16]


def _merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def _policy_from(item) -> Policy:
    return Policy.parse(item) if isinstance(item, str) else Policy.from_dict(item)


def load_config(source=None, **overrides) -> ExperimentConfig:
    """Build a validated config from a YAML/JSON path, a dict, or defaults."""
    if source is None:
        user = {}
    elif isinstance(source, dict):
        user = source
    else:
        with open(source) as fh:
            user = yaml.safe_load(fh) or {}
        if not isinstance(user, dict):
            raise ValidationError(f"{source}: config must be a mapping")
    try:
        jsonschema.validate(user, SCHEMA)
    except jsonschema.ValidationError as exc:
        where = ".".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ValidationError(f"config field {where}: {exc.message}") from None
    raw = _merge(DEFAULTS, user)
    raw.update({k: v for k, v in overrides.items() if v is not None})
    try:
        policies = [_policy_from(p) for p in raw["policies"]]
    except ValidationError as exc:
        raise ValidationError(f"config field policies: {exc}") from None
    tasks = list(raw["tasks"])
    if not policies and set(tasks) != {"toygauss"}:
        raise ValidationError("config field policies: must be non-empty unless tasks == [toygauss]")
    if not raw["seeds"]:
        raise ValidationError("config field seeds: must be non-empty")
    ds = raw["dataset"]
    if ds["source"] == "cifar" and "path" not in ds:
        raise ValidationError("config field dataset.path: required for cifar source")
    if ds["source"] == "cifar" and ds.get("num_classes") != 10:
        ds["num_classes"] = 10
    cfg = ExperimentConfig(
        dataset=ds,
        model=raw["model"],
        train=raw["train"],
        switchoff=raw["switchoff"],
        toygauss=raw["toygauss"],
        policies=policies,
        seeds=[int(s) for s in raw["seeds"]],
        tasks=tasks,
        outputs=raw["outputs"],
        raw=raw,
    )
    try:
        cfg.train_config()
    except (ValidationError, TypeError) as exc:
        raise ValidationError(f"config field train: {exc}") from None
    return cfg


# --------------------------------------------------------------------------
# Data


@dataclass
class Splits:
    train: LabeledDataset
    val: LabeledDataset
    test: LabeledDataset


_SPLIT_CACHE: dict[str, Splits] = {}


def build_splits(dataset: dict) -> Splits:
    key = _digest(dataset)
    if key in _SPLIT_CACHE:
        return _SPLIT_CACHE[key]
    n_train, n_val, n_test = dataset["train_size"], dataset["val_size"], dataset["test_size"]
    k = dataset["num_classes"]
    seed = dataset["seed"]
    if dataset["source"] == "synthetic":
        per_class = math.ceil((n_train + n_val + n_test) / k)
        full = make_synthetic_images(k, per_class, dataset["side"], subseed(seed, "dataset"))
    else:
        full = load_cifar_binary(dataset["path"])
    train_ds, rest = split_balanced(full, n_train, n_val + n_test, subseed(seed, "split"))
    stats = fit_stats(train_ds)
    splits = Splits(
        with_stats(train_ds, stats),
        with_stats(rest.subset(np.arange(n_val)), stats),
        with_stats(rest.subset(np.arange(n_val, n_val + n_test)), stats),
    )
    _SPLIT_CACHE[key] = splits
    return splits


# --------------------------------------------------------------------------
# Runs


@dataclass(frozen=True)
class Job:
    policy: str  # canonical label
    seed: int
    mode: str = "dynamic"
    switch_step: int | None = None
    checkpoints: tuple[int, ...] = ()

    @property
    def variant(self) -> str:
        if self.switch_step is not None:
            return f"switch-{self.switch_step}"
        return self.mode

    def directory(self, root: Path) -> Path:
        name = safe_name(self.policy) + ("" if self.variant == "dynamic" else f"@{self.variant}")
        return root / "runs" / name / str(self.seed)


def safe_name(label: str) -> str:
    return re.sub(r"[^A-Za-z0-9.+-]", "_", label)


def _job_key(cfg: ExperimentConfig, job: Job) -> str:
    return _digest({"dataset": cfg.dataset, "model": cfg.model, "train": cfg.train, "job": [job.policy, job.seed, job.variant, list(job.checkpoints)]})


def _policy_by_label(cfg: ExperimentConfig, label: str) -> Policy:
    for p in cfg.policies:
        if p.label == label:
            return p
    return Policy.parse(label)


def _execute(cfg: ExperimentConfig, job: Job, root: Path) -> dict:
    """Train one run and write its log, checkpoints, and summary."""
    splits = build_splits(cfg.dataset)
    spec = cfg.model_spec(splits.train.shape)
    out = job.directory(root)
    out.mkdir(parents=True, exist_ok=True)
    policy = _policy_by_label(cfg, job.policy)
    try:
        if job.switch_step is None:
            config = cfg.train_config(policy=policy, mode=job.mode, seed=job.seed, checkpoint_steps=job.checkpoints + (cfg.train["steps"],))
            run = train(spec, splits.train, splits.val, config, ds_test=splits.test)
        else:
            base = Job(job.policy, job.seed, checkpoints=job.checkpoints).directory(root)
            params, velocity, state = M.load_checkpoint(base / f"ckpt-{job.switch_step}", spec)
            config = cfg.train_config(policy=policy, seed=job.seed, switch_off_step=job.switch_step)
            start = Checkpoint(int(state["step"]), params, velocity)
            run = train(spec, splits.train, splits.val, config, ds_test=splits.test, start=start)
    except DivergenceError as exc:
        summary = {"diverged": True, "step": exc.step}
        _write_json(out / "summary.json", summary)
        return summary
    write_log_csv(run, out / "log.csv")
    for step, ck in run.checkpoints.items():
        M.save_checkpoint(out / f"ckpt-{step}", spec, ck.params, ck.velocity, ck.rng_state(job.seed))
    summary = {
        "diverged": False,
        "val_acc": run.val_acc,
        "test_acc": run.test_acc,
        "final_train_loss": run.final_train_loss,
        "steps_to_threshold": run.steps_to_threshold,
    }
    _write_json(out / "summary.json", summary)
    return summary


def _write_json(path: Path, obj) -> None:
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
    os.replace(tmp, path)


def _worker(args):
    raw, job, root = args
    cfg = load_config(raw)
    return job, _execute(cfg, job, Path(root))


class Manifest:
    def __init__(self, path: Path, cfg: ExperimentConfig):
        self.path = path
        data = json.loads(path.read_text()) if path.exists() else {}
        self.runs: dict = data.get("runs", {})
        self.config_hash = cfg.hash()

    def done(self, key: str, run_dir: Path) -> bool:
        entry = self.runs.get(key)
        return entry is not None and (run_dir / "summary.json").exists()

    def record(self, key: str, job: Job, run_dir: Path, root: Path) -> None:
        self.runs[key] = {"policy": job.policy, "seed": job.seed, "variant": job.variant, "dir": str(run_dir.relative_to(root))}

    def save(self, trained: int, cached: int) -> None:
        _write_json(
            self.path,
            {
                "config_hash": self.config_hash,
                "tool_version": __version__,
                "last_invocation": {"trained": trained, "cached": cached, "all_cached": trained == 0},
                "runs": dict(sorted(self.runs.items())),
            },
        )


@dataclass
class ExperimentResult:
    out_dir: Path
    records: list
    trained: int = 0
    cached: int = 0
    static_rows: list = field(default_factory=list)


def _run_jobs(cfg: ExperimentConfig, jobs: list[Job], root: Path, manifest: Manifest, workers: int, counts: dict) -> dict:
    summaries, todo = {}, []
    for job in jobs:
        key = _job_key(cfg, job)
        d = job.directory(root)
        if manifest.done(key, d):
            summaries[job] = json.loads((d / "summary.json").read_text())
            counts["cached"] += 1
        else:
            todo.append(job)

    def finish(job, summary):
        summaries[job] = summary
        manifest.record(_job_key(cfg, job), job, job.directory(root), root)
        counts["trained"] += 1
        manifest.save(counts["trained"], counts["cached"])

    if workers > 1 and len(todo) > 1:
        with cf.ProcessPoolExecutor(max_workers=workers) as pool:
            for job, summary in pool.map(_worker, [(cfg.raw, j, str(root)) for j in todo]):
                finish(job, summary)
    else:
        for job in todo:
            finish(job, _execute(cfg, job, root))
    return summaries


def _ok(summary) -> bool:
    return summary is not None and not summary.get("diverged")


def run_experiment(cfg: ExperimentConfig, out_dir=None, jobs: int = 1) -> ExperimentResult:
    """Execute every requested task and write results; completed runs are reused."""
    root = Path(out_dir or cfg.outputs)
    root.mkdir(parents=True, exist_ok=True)
    manifest = Manifest(root / "manifest.json", cfg)
    counts = {"trained": 0, "cached": 0}
    result = ExperimentResult(root, [])
    tasks = set(cfg.tasks)

    if "toygauss" in tasks:
        t = cfg.toygauss
        gm = GaussianMixtureSpec([[-1.0, 0.0], [1.0, 0.0]], np.eye(2), t["train_per_class"])
        grid = run_toy_experiment(gm, (t["delta_min"], t["delta_max"]), t["resolution"], TOY_TRAIN.replace(steps=t["steps"]), t["seed"], t["val_per_class"])
        write_outputs(grid, root)
    if tasks == {"toygauss"}:
        manifest.save(0, 0)
        return result

    steps = cfg.train["steps"]
    grid_steps = switch_grid(steps, cfg.switchoff["candidates"], cfg.switchoff["lo"], cfg.switchoff["hi"]) if "switchoff" in tasks else ()
    need_aug = bool(tasks & {"diversity", "switchoff", "static_compare"})
    clean = Policy().label
    phase1: list[Job] = [Job(clean, s) for s in cfg.seeds]
    for p in cfg.policies:
        if p.is_identity:
            continue
        for s in cfg.seeds:
            if need_aug:
                phase1.append(Job(p.label, s, checkpoints=grid_steps))
            if "static_compare" in tasks:
                phase1.append(Job(p.label, s, mode="static"))
    phase1 = list(dict.fromkeys(phase1))
    summaries = _run_jobs(cfg, phase1, root, manifest, jobs, counts)

    phase2 = []
    if "switchoff" in tasks:
        for p in cfg.policies:
            if p.is_identity:
                continue
            for s in cfg.seeds:
                if _ok(summaries.get(Job(p.label, s, checkpoints=grid_steps))):
                    phase2.extend(Job(p.label, s, switch_step=g, checkpoints=grid_steps) for g in grid_steps if g < steps)
    summaries.update(_run_jobs(cfg, phase2, root, manifest, jobs, counts))
    manifest.save(counts["trained"], counts["cached"])

    splits = build_splits(cfg.dataset)
    spec = cfg.model_spec(splits.train.shape)
    for p in cfg.policies:
        result.records.append(_aggregate(cfg, p, spec, splits, summaries, root, grid_steps))
        if "static_compare" in tasks and not p.is_identity:
            result.static_rows.append(_static_row(cfg, p, summaries))
    X.write_results_csv(result.records, root / "results.csv")
    if result.static_rows:
        _write_static_csv(result.static_rows, root / "static.csv")
    result.trained, result.cached = counts["trained"], counts["cached"]
    return result


def _aggregate(cfg, policy: Policy, spec, splits: Splits, summaries: dict, root: Path, grid_steps) -> X.MetricsRecord:
    tasks = set(cfg.tasks)
    seeds = cfg.seeds
    label = policy.label
    clean_jobs = [Job(Policy().label, s) for s in seeds]
    aug_jobs = clean_jobs if policy.is_identity else [Job(label, s, checkpoints=grid_steps) for s in seeds]
    clean = [summaries.get(j) for j in clean_jobs]
    kw: dict = {"policy_label": label, "num_seeds": len(seeds)}
    if not all(_ok(s) for s in clean):
        log.warning("clean baseline diverged; leaving %s blank", label)
        return X.MetricsRecord(**kw)

    if "affinity" in tasks:
        diffs = []
        for s, job in zip(seeds, clean_jobs):
            params, _, _ = M.load_checkpoint(job.directory(root) / f"ckpt-{cfg.train['steps']}", spec)
            diffs.append(X.affinity(spec, params, splits.val, policy, subseed(s, "affinity"), splits.val.stats))
        kw["affinity"] = float(np.mean(diffs))
        if len(seeds) >= 2:
            # per-seed affinity is already a paired difference
            kw["affinity_sem"] = X.paired_sem([(d, 0.0) for d in diffs])[1]
    if "entropy" in tasks and policy.is_discrete:
        kw["diversity_entropy"] = X.diversity_entropy(policy, splits.train.shape)

    need_aug = bool(tasks & {"diversity", "switchoff", "static_compare"})
    if need_aug or policy.is_identity:
        aug = [summaries.get(j) for j in aug_jobs]
        if all(_ok(s) for s in aug):
            kw["test_acc"] = float(np.mean([s["test_acc"] for s in aug]))
            kw["test_acc_sem"] = X.sem([s["test_acc"] for s in aug]) if len(seeds) >= 2 else None
            if "diversity" in tasks:
                kw["diversity_loss"] = float(np.mean([s["final_train_loss"] for s in aug]))
                stt = [s["steps_to_threshold"] for s in aug]
                kw["steps_to_threshold"] = None if any(v is None for v in stt) else int(round(float(np.mean(stt))))
            if "switchoff" in tasks and not policy.is_identity and grid_steps:
                by_step = {}
                for g in grid_steps:
                    if g >= cfg.train["steps"]:
                        by_step[g] = aug
                        continue
                    runs = [summaries.get(Job(label, s, switch_step=g, checkpoints=grid_steps)) for s in seeds]
                    if all(_ok(r) for r in runs):
                        by_step[g] = runs
                if by_step:
                    best = max(sorted(by_step), key=lambda g: float(np.mean([r["val_acc"] for r in by_step[g]])))
                    kw["best_switch_step"] = best
                    kw["switch_off_lift"] = float(np.mean([r["test_acc"] - b["test_acc"] for r, b in zip(by_step[best], aug)]))
        else:
            log.warning("a run for %s diverged; leaving its training metrics blank", label)
    return X.MetricsRecord(**kw)


STATIC_COLUMNS = ("policy_label", "diversity_dynamic", "diversity_static", "diversity_gap", "diversity_gap_sem", "test_acc_dynamic", "test_acc_static", "num_seeds")


def _static_row(cfg, policy: Policy, summaries: dict) -> dict:
    seeds = cfg.seeds
    dyn = [summaries.get(j) for j in (Job(policy.label, s, checkpoints=_grid(cfg)) for s in seeds)]
    sta = [summaries.get(Job(policy.label, s, mode="static")) for s in seeds]
    row = {"policy_label": policy.label, "num_seeds": len(seeds)}
    if all(_ok(s) for s in dyn + sta):
        pairs = [(d["final_train_loss"], s["final_train_loss"]) for d, s in zip(dyn, sta)]
        row["diversity_dynamic"] = float(np.mean([a for a, _ in pairs]))
        row["diversity_static"] = float(np.mean([b for _, b in pairs]))
        if len(pairs) >= 2:
            row["diversity_gap"], row["diversity_gap_sem"] = X.paired_sem(pairs)
        row["test_acc_dynamic"] = float(np.mean([d["test_acc"] for d in dyn]))
        row["test_acc_static"] = float(np.mean([s["test_acc"] for s in sta]))
    return row


def _grid(cfg) -> tuple[int, ...]:
    if "switchoff" not in cfg.tasks:
        return ()
    return switch_grid(cfg.train["steps"], cfg.switchoff["candidates"], cfg.switchoff["lo"], cfg.switchoff["hi"])


def _write_static_csv(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(STATIC_COLUMNS)
        for r in rows:
            w.writerow([X._cell(r.get(c)) for c in STATIC_COLUMNS])


# --------------------------------------------------------------------------
# Reports


def report(results_dir) -> dict:
    """Write scatter.tsv, switchoff_curves.tsv, and table.txt from a results directory."""
    root = Path(results_dir)
    records = X.read_results_csv(root / "results.csv")
    outputs = {}

    with_entropy = any(r.diversity_entropy is not None for r in records)
    cols = ["policy_label", "affinity", "diversity_loss", "test_acc"] + (["diversity_entropy"] if with_entropy else [])
    lines = ["\t".join(cols)]
    for r in records:
        lines.append("\t".join(X._cell(getattr(r, c)) for c in cols))
    (root / "scatter.tsv").write_text("\n".join(lines) + "\n")
    outputs["scatter"] = root / "scatter.tsv"

    curves = ["policy_label\tswitch_step\tmean_val_acc\tmean_test_acc\tnum_seeds"]
    runs_dir = root / "runs"
    for r in records:
        for d in sorted(runs_dir.glob(safe_name(r.policy_label) + "@switch-*")) if runs_dir.exists() else []:
            step = int(d.name.rsplit("switch-", 1)[1])
            sums = [json.loads(p.read_text()) for p in sorted(d.glob("*/summary.json"))]
            sums = [s for s in sums if _ok(s)]
            if sums:
                curves.append(f"{r.policy_label}\t{step}\t{float(np.mean([s['val_acc'] for s in sums]))!r}\t{float(np.mean([s['test_acc'] for s in sums]))!r}\t{len(sums)}")
    curves[1:] = sorted(curves[1:], key=lambda line: (line.split("\t")[0], int(line.split("\t")[1])))
    (root / "switchoff_curves.tsv").write_text("\n".join(curves) + "\n")
    outputs["switchoff_curves"] = root / "switchoff_curves.tsv"

    ordered = sorted(records, key=lambda r: (r.test_acc is None, -(r.test_acc or 0.0)))
    width = max([len("policy")] + [len(r.policy_label) for r in records])
    rows = [f"{'policy':<{width}}  {'test_acc':>8}  {'affinity(pp)':>12}  {'diversity':>9}  {'lift(pp)':>8}"]
    for r in ordered:
        rows.append(
            f"{r.policy_label:<{width}}  {_fmt(r.test_acc, 100, '.2f'):>8}  {_fmt(r.affinity, 100, '+.2f'):>12}  "
            f"{_fmt(r.diversity_loss, 1, '.4f'):>9}  {_fmt(r.switch_off_lift, 100, '+.2f'):>8}"
        )
    (root / "table.txt").write_text("\n".join(rows) + "\n")
    outputs["table"] = root / "table.txt"
    return outputs


def _fmt(v, scale, spec) -> str:
    return "" if v is None else format(v * scale, spec)
