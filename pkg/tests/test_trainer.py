import math

import numpy as np
import pytest
from scipy.stats import norm

from augmetrics import model as M
from augmetrics.errors import DivergenceError, MissingCheckpointError, ValidationError
from augmetrics.toygauss import DEFAULT_SPEC, DEFAULT_TRAIN, train_toy_model
from augmetrics.trainer import (
    Checkpoint,
    TrainConfig,
    _batch_indices,
    lr_at,
    read_log_csv,
    resume_without_augmentation,
    switch_grid,
    train,
    write_log_csv,
)
from augmetrics.transforms import Policy

MLP = dict(architecture="mlp", hidden=16)


def _spec(ds):
    return M.ModelSpec(input_shape=ds.shape, num_classes=ds.num_classes, **MLP)


def _same_run(a, b):
    assert a.final_params.vector.tobytes() == b.final_params.vector.tobytes()
    assert a.final_velocity.tobytes() == b.final_velocity.tobytes()
    assert a.log == b.log and a.val_acc == b.val_acc


def test_lr_schedules():
    c = TrainConfig(steps=3000, base_lr=0.1)
    assert lr_at(c, 0) == 0.1
    assert abs(lr_at(c, 1500) - 0.05) < 1e-12
    s = c.replace(lr_schedule="step", decay_step=1000, decay_factor=10)
    assert lr_at(s, 999) == 0.1 and lr_at(s, 1000) == pytest.approx(0.01)
    assert lr_at(c.replace(lr_schedule="constant"), 2999) == 0.1


@pytest.mark.parametrize("kw", [dict(steps=-1), dict(lr_schedule="linear"), dict(mode="both"), dict(steps=10, switch_off_step=11), dict(steps=5, checkpoint_steps=(6,))])
def test_config_validation(kw):
    with pytest.raises(ValidationError):
        TrainConfig(**kw)


def test_zero_steps(small_task):
    tr, va = small_task
    run = train(_spec(tr), tr, va, TrainConfig(steps=0))
    assert run.final_params.vector.tobytes() == run.init_params.vector.tobytes()
    assert run.log == []


def test_batch_larger_than_train(small_task):
    tr, va = small_task
    with pytest.raises(ValidationError):
        train(_spec(tr), tr.subset(range(10)), va, TrainConfig(steps=1, batch_size=64))


def test_identity_policy_equals_no_policy(small_task):
    tr, va = small_task
    cfg = TrainConfig(steps=40, log_every=10, seed=3)
    a = train(_spec(tr), tr, va, cfg)
    b = train(_spec(tr), tr, va, cfg.replace(policy=Policy.parse("Identity")))
    c = train(_spec(tr), tr, va, cfg.replace(policy=Policy.parse("FlipLR(0%)+Cutout(4,0%)")))
    _same_run(a, b)
    _same_run(a, c)


def test_seed_pairing_shares_init(small_task):
    tr, va = small_task
    cfg = TrainConfig(steps=5, seed=4)
    a = train(_spec(tr), tr, va, cfg)
    b = train(_spec(tr), tr, va, cfg.replace(policy=Policy.parse("FlipUD(100%)")))
    assert np.array_equal(a.init_params.vector, b.init_params.vector)
    assert not np.array_equal(a.final_params.vector, b.final_params.vector)


def test_determinism(small_task):
    tr, va = small_task
    cfg = TrainConfig(steps=30, log_every=10, seed=1, policy=Policy.parse("Crop(2,100%)+FlipLR(50%)"))
    _same_run(train(_spec(tr), tr, va, cfg), train(_spec(tr), tr, va, cfg))


def test_epoch_shuffle_visits_each_example_once():
    cache = {}
    n, bs = 100, 10
    for epoch in range(3):
        seen = np.concatenate([_batch_indices(n, bs, epoch * 10 + k, 7, cache) for k in range(10)])
        assert np.array_equal(np.sort(seen), np.arange(n))
    first = np.concatenate([_batch_indices(n, bs, k, 7, {}) for k in range(10)])
    second = np.concatenate([_batch_indices(n, bs, 10 + k, 7, {}) for k in range(10)])
    assert not np.array_equal(first, second)


def test_log_fields_and_window(small_task, tmp_path):
    tr, va = small_task
    run = train(_spec(tr), tr, va, TrainConfig(steps=55, log_every=10, final_loss_window=3))
    assert [e["step"] for e in run.log] == [10, 20, 30, 40, 50, 55]
    assert run.final_train_loss == pytest.approx(np.mean([e["train_loss"] for e in run.log[-3:]]))
    one = run.config.replace(final_loss_window=1)
    object.__setattr__(run, "config", one)
    assert run.final_train_loss == run.log[-1]["train_loss"]
    write_log_csv(run, tmp_path / "log.csv")
    assert read_log_csv(tmp_path / "log.csv") == run.log
    assert (tmp_path / "log.csv").read_text().splitlines()[0] == "step,lr,train_loss,train_acc,val_acc"


def test_steps_to_threshold(small_task):
    tr, va = small_task
    run = train(_spec(tr), tr, va, TrainConfig(steps=20, log_every=5, train_acc_threshold=0.0))
    assert run.steps_to_threshold == 5
    run = train(_spec(tr), tr, va, TrainConfig(steps=20, log_every=5, train_acc_threshold=1.01))
    assert run.steps_to_threshold is None


def test_toy_bayes_rate():
    _, run = train_toy_model(DEFAULT_SPEC, DEFAULT_TRAIN, seed=0)
    assert abs(run.val_acc - norm.cdf(1.0)) < 0.02


def test_resume_fidelity_in_memory(small_task):
    tr, va = small_task
    cfg = TrainConfig(steps=60, log_every=10, seed=2, checkpoint_steps=(25,), policy=Policy.parse("Crop(2,100%)+FlipLR(50%)"))
    full = train(_spec(tr), tr, va, cfg)
    resumed = train(_spec(tr), tr, va, cfg, start=full.checkpoints[25], prefix=full)
    _same_run(full, resumed)


def test_resume_fidelity_through_file(small_task, tmp_path):
    tr, va = small_task
    spec = _spec(tr)
    cfg = TrainConfig(steps=50, log_every=10, seed=5, checkpoint_steps=(30,))
    full = train(spec, tr, va, cfg)
    ck = full.checkpoints[30]
    M.save_checkpoint(tmp_path / "ck", spec, ck.params, ck.velocity, ck.rng_state(5))
    params, vel, state = M.load_checkpoint(tmp_path / "ck", spec)
    resumed = train(spec, tr, va, cfg, start=Checkpoint(state["step"], params, vel))
    assert resumed.final_params.vector.tobytes() == full.final_params.vector.tobytes()
    assert resumed.log == [e for e in full.log if e["step"] > 30]


def test_resume_clean_run_is_its_own_suffix(small_task):
    tr, va = small_task
    cfg = TrainConfig(steps=40, log_every=10, checkpoint_steps=(20,))
    run = train(_spec(tr), tr, va, cfg)
    _same_run(run, resume_without_augmentation(run, 20, tr, va))
    assert resume_without_augmentation(run, 40, tr, va) is run
    with pytest.raises(MissingCheckpointError):
        resume_without_augmentation(run, 10, tr, va)


def test_switch_off_stops_augmentation(small_task):
    tr, va = small_task
    cfg = TrainConfig(steps=30, log_every=10, checkpoint_steps=(12,), policy=Policy.parse("FlipUD(100%)"))
    run = train(_spec(tr), tr, va, cfg)
    assert np.all(run.augment_counts == cfg.batch_size)
    off = resume_without_augmentation(run, 12, tr, va)
    assert np.all(off.augment_counts[:12] == cfg.batch_size) and not off.augment_counts[12:].any()
    direct = train(_spec(tr), tr, va, cfg.replace(switch_off_step=12))
    _same_run(off, direct)


def test_flipud_switch_off_helps(small_task):
    tr, va = small_task
    spec = M.ModelSpec("mlp", tr.shape, tr.num_classes, hidden=64)
    cfg = TrainConfig(steps=300, log_every=50, seed=1, checkpoint_steps=(100,), policy=Policy.parse("FlipUD(100%)"))
    run = train(spec, tr, va, cfg)
    off = resume_without_augmentation(run, 100, tr, va)
    assert off.val_acc >= run.val_acc


def test_static_mode_materializes_once(small_task):
    tr, va = small_task
    cfg = TrainConfig(steps=20, log_every=10, seed=1, mode="static", policy=Policy.parse("Rotate(variable,30deg,100%)"))
    a, b = train(_spec(tr), tr, va, cfg), train(_spec(tr), tr, va, cfg)
    _same_run(a, b)
    clean_static = train(_spec(tr), tr, va, cfg.replace(policy=Policy()))
    clean_dynamic = train(_spec(tr), tr, va, cfg.replace(policy=Policy(), mode="dynamic"))
    _same_run(clean_static, clean_dynamic)


def test_l2_off_step(small_task):
    tr, va = small_task
    base = TrainConfig(steps=20, log_every=5, l2_coeff=0.5)
    a = train(_spec(tr), tr, va, base)
    b = train(_spec(tr), tr, va, base.replace(l2_off_step=10))
    c = train(_spec(tr), tr, va, base.replace(l2_coeff=0.0))
    assert a.log[:2] == b.log[:2]
    assert b.log[2]["train_loss"] != a.log[2]["train_loss"]
    assert not np.array_equal(b.final_params.vector, c.final_params.vector)


def test_divergence_aborts_with_step(small_task):
    tr, va = small_task
    with pytest.raises(DivergenceError) as info:
        train(_spec(tr), tr, va, TrainConfig(steps=200, base_lr=1e6, momentum=0.99, lr_schedule="constant"))
    assert info.value.step < 200


def test_switch_grid():
    assert switch_grid(3000) == (900, 1388, 1875, 2362, 2850)
    assert all(0.3 * 100 <= s <= 0.95 * 100 for s in switch_grid(100))
    assert switch_grid(100, count=0) == ()
