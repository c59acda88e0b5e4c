import math

import numpy as np
import pytest

from augmetrics import model as M
from augmetrics.errors import NumericalError, ValidationError
from augmetrics.rng import stream

from gradcheck import max_relative_error

SPECS = [
    M.ModelSpec("linear", (4, 4, 1), 2),
    M.ModelSpec("mlp", (5, 5, 2), 3, hidden=12),
    M.ModelSpec("tinycnn", (6, 6, 2), 4, conv_channels=3),
]


def test_init_determinism_and_scale():
    spec = SPECS[1]
    a, b, c = M.init(spec, 1), M.init(spec, 1), M.init(spec, 2)
    assert np.array_equal(a.vector, b.vector) and not np.array_equal(a.vector, c.vector)
    assert np.all(a["b1"] == 0) and np.all(a["b2"] == 0)
    big = M.init(M.ModelSpec("linear", (20, 20, 1), 2), 0)
    assert big["W"].std() == pytest.approx(1 / 20, rel=0.1)


def test_init_scale_zero_gives_uniform_softmax():
    spec = M.ModelSpec("mlp", (4, 4, 1), 5, init_scale=0.0)
    p = M.init(spec, 3)
    assert not np.any(p.vector)
    x = stream(0, "x").standard_normal((7, 4, 4, 1))
    ev = M.evaluate(spec, p, x, np.zeros(7, int))
    assert np.allclose(ev.logits, 0) and ev.loss == pytest.approx(math.log(5), abs=1e-6)


@pytest.mark.parametrize("k", [2, 3, 10])
def test_zero_linear_loss_is_log_k(k):
    spec = M.ModelSpec("linear", (3, 3, 1), k, init_scale=0.0)
    p = M.init(spec, 0, dtype=np.float64)
    x = stream(1, "x").standard_normal((9, 3, 3, 1))
    assert M.evaluate(spec, p, x, np.arange(9) % k).loss == pytest.approx(math.log(k), abs=1e-12)


@pytest.mark.parametrize("spec", SPECS, ids=lambda s: s.architecture)
def test_gradients_match_finite_differences(spec):
    for seed in range(3):
        assert max_relative_error(spec, seed) < 1e-4


@pytest.mark.parametrize("spec", SPECS, ids=lambda s: s.architecture)
def test_gradients_strict_relative_error_small_eps(spec):
    # no floor: at eps=1e-5 truncation is negligible even for tiny coordinates
    assert max_relative_error(spec, 7, eps=1e-5, floor=1e-10) < 1e-4


def test_l2_gradient_only_on_weights():
    spec = SPECS[1]
    p = M.init(spec, 0, dtype=np.float64)
    x = stream(2, "x").standard_normal((4,) + spec.input_shape)
    y = np.array([0, 1, 2, 0])
    g0 = M.evaluate(spec, p, x, y, 0.0, True).grad
    g1 = M.evaluate(spec, p, x, y, 0.1, True).grad
    mask = p.weight_mask()
    assert np.allclose(g1[mask] - g0[mask], 0.1 * p.vector[mask])
    assert np.array_equal(g1[~mask], g0[~mask])
    l0 = M.evaluate(spec, p, x, y, 0.0).loss
    l1 = M.evaluate(spec, p, x, y, 0.1).loss
    assert l1 - l0 == pytest.approx(0.05 * np.sum(p.vector[mask] ** 2))


def test_softmax_shift_invariance():
    spec = M.ModelSpec("linear", (2, 2, 1), 3)
    p = M.init(spec, 4, dtype=np.float64)
    x = stream(3, "x").standard_normal((6, 2, 2, 1))
    y = np.arange(6) % 3
    shifted = p.copy()
    shifted["b"][:] += 37.5  # a constant added to every logit
    a, b = M.evaluate(spec, p, x, y), M.evaluate(spec, shifted, x, y)
    assert abs(a.loss - b.loss) < 1e-9 and a.accuracy == b.accuracy


def test_forced_correct_accuracy_and_ties():
    spec = M.ModelSpec("linear", (1, 1, 1), 3)
    p = M.init(spec, 0, dtype=np.float64)
    p["W"][:] = 0
    p["b"][:] = [0.0, 5.0, 0.0]
    x = np.zeros((4, 1, 1, 1))
    assert M.evaluate(spec, p, x, np.ones(4, int)).accuracy == 1.0
    p["b"][:] = [1.0, 1.0, 1.0]
    # exact ties go to the lowest index
    assert M.accuracy(spec, p, x, np.zeros(4, int)) == 1.0


def test_evaluate_is_pure():
    spec = SPECS[2]
    p = M.init(spec, 0)
    x = stream(5, "x").random((3,) + spec.input_shape).astype(np.float32)
    a = M.evaluate(spec, p, x, np.array([0, 1, 2]), 5e-4, True)
    b = M.evaluate(spec, p, x, np.array([0, 1, 2]), 5e-4, True)
    assert a.loss == b.loss and np.array_equal(a.grad, b.grad)


def test_non_finite_input():
    spec = SPECS[0]
    x = np.zeros((3, 4, 4, 1))
    x[2, 1, 1, 0] = np.nan
    with pytest.raises(NumericalError, match="index 2"):
        M.evaluate(spec, M.init(spec, 0), x, np.zeros(3, int))


def test_shape_mismatch():
    with pytest.raises(ValidationError):
        M.evaluate(SPECS[0], M.init(SPECS[0], 0), np.zeros((2, 3, 3, 1)), np.zeros(2, int))


def test_mean_log_likelihood():
    spec = M.ModelSpec("linear", (1, 1, 1), 2, init_scale=0.0)
    p = M.init(spec, 0, dtype=np.float64)
    x = np.ones((3, 1, 1, 1))
    assert M.mean_log_likelihood(spec, p, x) == pytest.approx(math.log(2), abs=1e-12)
    p["W"][:] = [[1000.0, 0.0]]
    val = M.mean_log_likelihood(spec, p, x)
    assert math.isfinite(val) and val == pytest.approx(1000.0, abs=1e-12)


@pytest.mark.parametrize("spec", SPECS, ids=lambda s: s.architecture)
def test_checkpoint_round_trip(tmp_path, spec):
    p = M.init(spec, 9)
    vel = stream(1, "v").standard_normal(len(p)).astype(np.float32)
    path = tmp_path / "ckpt"
    M.save_checkpoint(path, spec, p, vel, {"seed": 9, "step": 12})
    q, v2, state = M.load_checkpoint(path, spec)
    assert q.vector.tobytes() == p.vector.tobytes() and v2.tobytes() == vel.tobytes()
    assert state == {"seed": 9, "step": 12}
    with pytest.raises(ValidationError):
        M.load_checkpoint(path, M.ModelSpec("linear", (4, 4, 1), 3))


def test_params_layout_errors():
    with pytest.raises(ValidationError):
        M.Params.from_vector(SPECS[0], np.zeros(3))
    with pytest.raises(ValidationError):
        M.ModelSpec("resnet", (4, 4, 1), 2)
    with pytest.raises(ValidationError):
        M.ModelSpec("linear", (4, 4, 1), 1)
