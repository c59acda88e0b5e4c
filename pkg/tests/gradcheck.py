"""Central finite-difference oracle shared by the model tests and the acceptance suite."""
import numpy as np

from augmetrics import model as M
from augmetrics.rng import stream

# coordinates with |grad| below this are compared on an absolute scale; O(eps^2)
# truncation makes pure relative error meaningless for near-zero gradients
REL_FLOOR = 1e-2


def random_problem(spec, seed, n=10):
    p = M.init(spec, seed, dtype=np.float64)
    rng = stream(seed, "gradcheck")
    # non-zero biases so every parameter group is exercised
    v = p.vector + 0.1 * rng.standard_normal(len(p)) * ~p.weight_mask()
    x = rng.standard_normal((n,) + spec.input_shape)
    y = rng.integers(0, spec.num_classes, n)
    return M.Params(v, p.layout), x, y


def numeric_grad(spec, params, x, y, l2, eps):
    out = np.empty(len(params))
    v = params.vector.copy()
    for i in range(len(v)):
        old = v[i]
        v[i] = old + eps
        lp = M.evaluate(spec, M.Params(v, params.layout), x, y, l2).loss
        v[i] = old - eps
        lm = M.evaluate(spec, M.Params(v, params.layout), x, y, l2).loss
        v[i] = old
        out[i] = (lp - lm) / (2 * eps)
    return out


def max_relative_error(spec, seed, eps=1e-3, l2=5e-4, floor=REL_FLOOR, n=10):
    params, x, y = random_problem(spec, seed, n)
    g = M.evaluate(spec, params, x, y, l2, want_grad=True).grad
    num = numeric_grad(spec, params, x, y, l2, eps)
    denom = np.maximum(np.maximum(np.abs(g), np.abs(num)), floor)
    return float(np.max(np.abs(g - num) / denom))
