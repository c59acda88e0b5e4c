"""SGD with momentum, LR/L2 schedules, dynamic or static augmentation, switch-off.

Datasets arrive in scaled [0, 1] space with training statistics attached;
each batch is augmented first and normalized afterwards.  All randomness
is derived from ``(seed, purpose, step, index)``, so a run's only mutable
state is (params, velocity, step) and a checkpoint of those three resumes
it exactly.
"""
from __future__ import annotations

import csv
import dataclasses
import math
from dataclasses import dataclass, field

import numpy as np

from . import model as M
from .data import LabeledDataset, Stats, fit_stats, normalize_images
from .errors import DivergenceError, MissingCheckpointError, ValidationError
from .rng import stream, subseed
from .transforms import Policy, apply_policy_dynamic, dataset_fill, materialize_static

SCHEDULES = ("cosine", "step", "constant")
MODES = ("dynamic", "static")
LOG_FIELDS = ("step", "lr", "train_loss", "train_acc", "val_acc")


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 3000
    batch_size: int = 64
    base_lr: float = 0.1
    lr_schedule: str = "cosine"
    decay_step: int = 0
    decay_factor: float = 10.0
    momentum: float = 0.9
    l2_coeff: float = 5e-4
    l2_off_step: int | None = None
    policy: Policy = field(default_factory=Policy)
    mode: str = "dynamic"
    switch_off_step: int | None = None
    seed: int = 0
    log_every: int = 25
    train_acc_threshold: float = 0.97
    final_loss_window: int = 10
    checkpoint_steps: tuple[int, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "checkpoint_steps", tuple(sorted(set(int(s) for s in self.checkpoint_steps))))
        if self.steps < 0 or self.batch_size < 1 or self.log_every < 1 or self.final_loss_window < 1:
            raise ValidationError("steps must be >= 0; batch_size, log_every and final_loss_window >= 1")
        if self.lr_schedule not in SCHEDULES:
            raise ValidationError(f"lr_schedule must be one of {SCHEDULES}")
        if self.mode not in MODES:
            raise ValidationError(f"mode must be one of {MODES}")
        if self.switch_off_step is not None and not 0 <= self.switch_off_step <= self.steps:
            raise ValidationError(f"switch_off_step {self.switch_off_step} outside [0, {self.steps}]")
        if self.lr_schedule == "step" and self.decay_factor <= 0:
            raise ValidationError("decay_factor must be positive")
        if any(not 0 <= s <= self.steps for s in self.checkpoint_steps):
            raise ValidationError("checkpoint steps must lie in [0, steps]")

    def replace(self, **kw) -> "TrainConfig":
        return dataclasses.replace(self, **kw)


def lr_at(config: TrainConfig, step: int) -> float:
    if config.lr_schedule == "cosine":
        return config.base_lr * 0.5 * (1.0 + math.cos(math.pi * step / config.steps))
    if config.lr_schedule == "step":
        return config.base_lr / config.decay_factor if step >= config.decay_step else config.base_lr
    return config.base_lr


@dataclass(frozen=True, eq=False)
class Checkpoint:
    step: int
    params: M.Params
    velocity: np.ndarray

    def rng_state(self, seed: int) -> dict:
        return {"seed": int(seed), "step": int(self.step)}


@dataclass(eq=False)
class TrainRun:
    spec: M.ModelSpec
    config: TrainConfig
    init_params: M.Params
    final_params: M.Params
    final_velocity: np.ndarray
    log: list[dict]
    checkpoints: dict[int, Checkpoint]
    # number of policy applications per executed step (instrumentation)
    augment_counts: np.ndarray
    val_acc: float
    test_acc: float | None = None

    @property
    def final_train_loss(self) -> float:
        tail = self.log[-self.config.final_loss_window :]
        return float(np.mean([e["train_loss"] for e in tail])) if tail else float("nan")

    @property
    def steps_to_threshold(self) -> int | None:
        for e in self.log:
            if e["train_acc"] >= self.config.train_acc_threshold:
                return e["step"]
        return None


def _check_data(ds: LabeledDataset, spec: M.ModelSpec, what: str) -> None:
    if ds.shape != spec.input_shape:
        raise ValidationError(f"{what} images have shape {ds.shape}, model expects {spec.input_shape}")


def _batch_indices(n: int, batch_size: int, step: int, seed: int, cache: dict) -> np.ndarray:
    """Examples for ``step``: consecutive slices of a per-epoch permutation."""
    pos = np.arange(step * batch_size, (step + 1) * batch_size)
    epochs = pos // n
    out = np.empty(batch_size, dtype=np.int64)
    for e in np.unique(epochs):
        if e not in cache:
            if len(cache) > 2:
                cache.clear()
            cache[e] = stream(seed, "shuffle", int(e)).permutation(n)
        sel = epochs == e
        out[sel] = cache[e][pos[sel] % n]
    return out


def train(
    spec: M.ModelSpec,
    ds_train: LabeledDataset,
    ds_val: LabeledDataset,
    config: TrainConfig,
    ds_test: LabeledDataset | None = None,
    stats: Stats | None = None,
    start: Checkpoint | None = None,
    prefix: TrainRun | None = None,
) -> TrainRun:
    """Train from initialization (or from ``start``) and return the run record.

    ``ds_*`` hold scaled images; ``stats`` defaults to ``ds_train.stats`` or
    statistics fitted on ``ds_train``.  When resuming, ``prefix`` supplies
    the log and instrumentation recorded before ``start.step``.
    """
    for ds, what in ((ds_train, "training"), (ds_val, "validation"), (ds_test, "test")):
        if ds is not None:
            _check_data(ds, spec, what)
    if config.batch_size > len(ds_train):
        raise ValidationError(f"batch_size {config.batch_size} exceeds training set size {len(ds_train)}")
    policy = config.policy
    policy.check_image(ds_train.shape)
    if ds_train.normalized and not policy.is_identity:
        raise ValidationError("augmentation needs scaled, unnormalized training images")
    stats = stats or ds_train.stats or fit_stats(ds_train)
    fill = stats.mean if not ds_train.normalized else None

    def prep(images):
        return images if ds_train.normalized else normalize_images(images, stats)

    clean_images = ds_train.images
    aug_images = clean_images
    if config.mode == "static" and not policy.is_identity:
        aug_images = materialize_static(policy, ds_train, subseed(config.seed, "static"), fill=fill).images
    labels = ds_train.labels
    val_x = prep(ds_val.images)

    init_params = M.init(spec, config.seed)
    if start is None:
        params = init_params.copy()
        velocity = np.zeros_like(params.vector)
        step0 = 0
        log, counts = [], np.zeros(config.steps, dtype=np.int64)
    else:
        params = start.params.copy()
        velocity = start.velocity.copy()
        step0 = start.step
        log = [dict(e) for e in prefix.log if e["step"] <= step0] if prefix else []
        counts = np.zeros(config.steps, dtype=np.int64)
        if prefix is not None:
            counts[:step0] = prefix.augment_counts[:step0]

    checkpoints: dict[int, Checkpoint] = {}
    if prefix is not None:
        checkpoints.update({s: c for s, c in prefix.checkpoints.items() if s <= step0})

    def snapshot(s):
        if s in config.checkpoint_steps:
            checkpoints[s] = Checkpoint(s, params.copy(), velocity.copy())

    snapshot(step0)
    perm_cache: dict = {}
    n = len(labels)
    dynamic = config.mode == "dynamic" and not policy.is_identity
    for step in range(step0, config.steps):
        idx = _batch_indices(n, config.batch_size, step, config.seed, perm_cache)
        augmenting = config.switch_off_step is None or step < config.switch_off_step
        if dynamic and augmenting:
            batch = np.stack([
                apply_policy_dynamic(policy, clean_images[i], stream(config.seed, "augment", step, j), fill)
                for j, i in enumerate(idx)
            ])
            counts[step] = len(idx)
        elif augmenting and aug_images is not clean_images:
            batch = aug_images[idx]
            counts[step] = len(idx)
        else:
            batch = clean_images[idx]
        l2 = config.l2_coeff if config.l2_off_step is None or step < config.l2_off_step else 0.0
        ev = M.evaluate(spec, params, prep(batch), labels[idx], l2, want_grad=True)
        if not math.isfinite(ev.loss) or not np.all(np.isfinite(ev.grad)):
            raise DivergenceError(step, ev.loss)
        lr = lr_at(config, step)
        velocity = (config.momentum * velocity - lr * ev.grad).astype(velocity.dtype)
        params = M.Params(params.vector + velocity, params.layout)
        done = step + 1
        if done % config.log_every == 0 or done == config.steps:
            log.append({
                "step": done,
                "lr": lr,
                "train_loss": ev.loss,
                "train_acc": ev.accuracy,
                "val_acc": M.accuracy(spec, params, val_x, ds_val.labels),
            })
        snapshot(done)

    test_acc = None if ds_test is None else M.accuracy(spec, params, prep(ds_test.images), ds_test.labels)
    return TrainRun(
        spec=spec,
        config=config,
        init_params=init_params,
        final_params=params,
        final_velocity=velocity,
        log=log,
        checkpoints=checkpoints,
        augment_counts=counts,
        val_acc=M.accuracy(spec, params, val_x, ds_val.labels),
        test_acc=test_acc,
    )


def resume_without_augmentation(
    run: TrainRun,
    from_step: int,
    ds_train: LabeledDataset,
    ds_val: LabeledDataset,
    ds_test: LabeledDataset | None = None,
    stats: Stats | None = None,
) -> TrainRun:
    """Continue ``run`` from its checkpoint at ``from_step`` on clean data only."""
    if from_step == run.config.steps:
        return run
    if from_step not in run.checkpoints:
        raise MissingCheckpointError(f"run has no checkpoint at step {from_step}; available: {sorted(run.checkpoints)}")
    config = run.config.replace(switch_off_step=from_step)
    return train(run.spec, ds_train, ds_val, config, ds_test=ds_test, stats=stats, start=run.checkpoints[from_step], prefix=run)


def switch_grid(steps: int, count: int = 5, lo: float = 0.3, hi: float = 0.95) -> tuple[int, ...]:
    """Evenly spaced candidate switch-off steps between ``lo`` and ``hi`` of training."""
    if count < 1:
        return ()
    fracs = np.linspace(lo, hi, count) if count > 1 else np.array([lo])
    return tuple(sorted({int(round(f * steps)) for f in fracs}))


def write_log_csv(run: TrainRun, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=LOG_FIELDS, lineterminator="\n")
        w.writeheader()
        for e in run.log:
            w.writerow({k: (repr(float(e[k])) if k != "step" else e[k]) for k in LOG_FIELDS})


def read_log_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return [{"step": int(r["step"]), **{k: float(r[k]) for k in LOG_FIELDS[1:]}} for r in csv.DictReader(fh)]
