"""Small numpy classifiers with hand-written backward passes.

Three architectures share one flat parameter vector layout:

* ``linear``  -- softmax regression on the flattened input.
* ``mlp``     -- one tanh hidden layer.
* ``tinycnn`` -- 3x3 same-padded convolution, tanh, 2x2 average pool,
  linear head.

Activations are smooth (tanh, average pooling) so analytic gradients can
be checked against central differences without kink artifacts.
"""
from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import NumericalError, ValidationError
from .rng import stream

ARCHITECTURES = ("linear", "mlp", "tinycnn")


@dataclass(frozen=True)
class ModelSpec:
    architecture: str
    input_shape: tuple[int, int, int]
    num_classes: int
    hidden: int = 64
    conv_channels: int = 8
    init_scale: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(v) for v in self.input_shape))
        if self.architecture not in ARCHITECTURES:
            raise ValidationError(f"architecture must be one of {ARCHITECTURES}, got {self.architecture!r}")
        if self.num_classes < 2:
            raise ValidationError("num_classes must be >= 2")
        if self.hidden < 1 or self.conv_channels < 1:
            raise ValidationError("hidden and conv_channels must be >= 1")
        if len(self.input_shape) != 3:
            raise ValidationError("input_shape must be (H, W, C)")

    @property
    def input_dim(self) -> int:
        h, w, c = self.input_shape
        return h * w * c

    def to_dict(self) -> dict:
        d = asdict(self)
        d["input_shape"] = list(self.input_shape)
        return d

    def hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]

    def layout(self) -> dict[str, tuple[int, ...]]:
        """Parameter shapes in storage order; names ending in ``W``/``K`` are weights."""
        k = self.num_classes
        if self.architecture == "linear":
            return {"W": (self.input_dim, k), "b": (k,)}
        if self.architecture == "mlp":
            return {"W1": (self.input_dim, self.hidden), "b1": (self.hidden,), "W2": (self.hidden, k), "b2": (k,)}
        h, w, c = self.input_shape
        f = self.conv_channels
        return {"K": (9 * c, f), "bk": (f,), "W": ((h // 2) * (w // 2) * f, k), "b": (k,)}

    def fan_in(self, name: str) -> int:
        return self.layout()[name][0]


def _is_weight(name: str) -> bool:
    return name[0] in "WK"


@dataclass(frozen=True, eq=False)
class Params:
    vector: np.ndarray
    layout: dict[str, tuple[slice, tuple[int, ...]]] = field(compare=False)

    @classmethod
    def from_vector(cls, spec: ModelSpec, vector: np.ndarray) -> "Params":
        layout, pos = {}, 0
        for name, shape in spec.layout().items():
            n = int(np.prod(shape))
            layout[name] = (slice(pos, pos + n), shape)
            pos += n
        if vector.shape != (pos,):
            raise ValidationError(f"parameter vector has length {vector.size}, layout needs {pos}")
        return cls(vector, layout)

    def __getitem__(self, name: str) -> np.ndarray:
        sl, shape = self.layout[name]
        return self.vector[sl].reshape(shape)

    def __len__(self) -> int:
        return self.vector.size

    def weight_mask(self) -> np.ndarray:
        mask = np.zeros(self.vector.size, dtype=bool)
        for name, (sl, _) in self.layout.items():
            mask[sl] = _is_weight(name)
        return mask

    def astype(self, dtype) -> "Params":
        return Params(self.vector.astype(dtype), self.layout)

    def copy(self) -> "Params":
        return Params(self.vector.copy(), self.layout)


def init(spec: ModelSpec, seed: int, dtype=np.float32) -> Params:
    rng = stream(seed, "init")
    parts = []
    for name, shape in spec.layout().items():
        if _is_weight(name):
            parts.append(rng.standard_normal(shape).ravel() * (spec.init_scale / np.sqrt(spec.fan_in(name))))
        else:
            parts.append(np.zeros(int(np.prod(shape))))
    return Params.from_vector(spec, np.concatenate(parts).astype(dtype))


@dataclass
class BatchEval:
    logits: np.ndarray
    loss: float
    accuracy: float
    grad: np.ndarray | None = None


# --------------------------------------------------------------------------
# Forward / backward


def _im2col(x: np.ndarray) -> np.ndarray:
    b, h, w, c = x.shape
    p = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    cols = [p[:, dy : dy + h, dx : dx + w, :] for dy in range(3) for dx in range(3)]
    return np.concatenate(cols, axis=-1)  # (B, H, W, 9C)


def _forward(spec: ModelSpec, params: Params, x: np.ndarray):
    arch = spec.architecture
    b = x.shape[0]
    if arch == "linear":
        flat = x.reshape(b, -1)
        return flat @ params["W"] + params["b"], (flat,)
    if arch == "mlp":
        flat = x.reshape(b, -1)
        hid = np.tanh(flat @ params["W1"] + params["b1"])
        return hid @ params["W2"] + params["b2"], (flat, hid)
    h, w, c = spec.input_shape
    cols = _im2col(x)
    act = np.tanh(cols @ params["K"] + params["bk"])
    h2, w2 = h // 2, w // 2
    f = act.shape[-1]
    pooled = act[:, : 2 * h2, : 2 * w2].reshape(b, h2, 2, w2, 2, f).mean(axis=(2, 4))
    flat = pooled.reshape(b, -1)
    return flat @ params["W"] + params["b"], (cols, act, flat)


def _backward(spec: ModelSpec, params: Params, cache, dlogits: np.ndarray) -> np.ndarray:
    grad = np.zeros_like(params.vector)
    g = Params(grad, params.layout)
    arch = spec.architecture
    if arch == "linear":
        (flat,) = cache
        g["W"][...] = flat.T @ dlogits
        g["b"][...] = dlogits.sum(axis=0)
        return grad
    if arch == "mlp":
        flat, hid = cache
        g["W2"][...] = hid.T @ dlogits
        g["b2"][...] = dlogits.sum(axis=0)
        dz = (dlogits @ params["W2"].T) * (1 - hid * hid)
        g["W1"][...] = flat.T @ dz
        g["b1"][...] = dz.sum(axis=0)
        return grad
    cols, act, flat = cache
    b = dlogits.shape[0]
    h, w, _ = spec.input_shape
    h2, w2 = h // 2, w // 2
    f = act.shape[-1]
    g["W"][...] = flat.T @ dlogits
    g["b"][...] = dlogits.sum(axis=0)
    dpool = (dlogits @ params["W"].T).reshape(b, h2, 1, w2, 1, f) / 4.0
    dact = np.zeros_like(act)
    dact[:, : 2 * h2, : 2 * w2] = np.broadcast_to(dpool, (b, h2, 2, w2, 2, f)).reshape(b, 2 * h2, 2 * w2, f)
    dz = dact * (1 - act * act)
    g["K"][...] = cols.reshape(-1, cols.shape[-1]).T @ dz.reshape(-1, f)
    g["bk"][...] = dz.sum(axis=(0, 1, 2))
    return grad


def logits(spec: ModelSpec, params: Params, x: np.ndarray) -> np.ndarray:
    return _forward(spec, params, np.asarray(x, dtype=params.vector.dtype))[0]


def _logsumexp(z: np.ndarray) -> np.ndarray:
    m = z.max(axis=1, keepdims=True)
    return (m + np.log(np.exp(z - m).sum(axis=1, keepdims=True)))[:, 0]


def evaluate(spec: ModelSpec, params: Params, x: np.ndarray, y: np.ndarray, l2_coeff: float = 0.0, want_grad: bool = False) -> BatchEval:
    """Mean softmax cross-entropy plus ``l2_coeff * |weights|^2 / 2`` (biases excluded)."""
    x = np.asarray(x, dtype=params.vector.dtype)
    if x.shape[1:] != spec.input_shape:
        raise ValidationError(f"batch shape {x.shape[1:]} does not match model input {spec.input_shape}")
    finite = np.isfinite(x.reshape(len(x), -1)).all(axis=1)
    if not finite.all():
        raise NumericalError(f"non-finite input at batch index {int(np.flatnonzero(~finite)[0])}")
    y = np.asarray(y, dtype=np.int64)
    z, cache = _forward(spec, params, x)
    lse = _logsumexp(z)
    n = len(y)
    ce = float(np.mean(lse - z[np.arange(n), y])) if n else 0.0
    mask = params.weight_mask()
    wv = params.vector[mask]
    loss = ce + 0.5 * l2_coeff * float(np.dot(wv, wv))
    acc = float(np.mean(z.argmax(axis=1) == y)) if n else 0.0
    grad = None
    if want_grad:
        probs = np.exp(z - lse[:, None])
        probs[np.arange(n), y] -= 1
        grad = _backward(spec, params, cache, probs / max(n, 1))
        if l2_coeff:
            grad[mask] += l2_coeff * params.vector[mask]
    return BatchEval(z, loss, acc, grad)


def predict(spec: ModelSpec, params: Params, x: np.ndarray, batch_size: int = 1024) -> np.ndarray:
    return np.concatenate([logits(spec, params, x[i : i + batch_size]) for i in range(0, len(x), batch_size)] or [np.zeros((0, spec.num_classes))])


def accuracy(spec: ModelSpec, params: Params, x: np.ndarray, y: np.ndarray) -> float:
    if len(y) == 0:
        return 0.0
    return float(np.mean(predict(spec, params, x).argmax(axis=1) == y))


def correct(spec: ModelSpec, params: Params, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Per-example 0/1 correctness."""
    return (predict(spec, params, x).argmax(axis=1) == y).astype(np.float64)


def mean_log_likelihood(spec: ModelSpec, params: Params, x: np.ndarray) -> float:
    """Mean over examples of logsumexp(logits), max-stabilized."""
    z = predict(spec, params, x).astype(np.float64)
    return float(np.mean(_logsumexp(z))) if len(z) else 0.0


# --------------------------------------------------------------------------
# Checkpoint files

_MAGIC = b"AUGCKPT1\n"


def save_checkpoint(path: str | os.PathLike, spec: ModelSpec, params: Params, velocity: np.ndarray, rng_state: dict) -> None:
    """Header line (JSON) then params and velocity as little-endian float32."""
    header = {
        "spec_hash": spec.hash(),
        "spec": spec.to_dict(),
        "layout": {name: [sl.start, sl.stop, list(shape)] for name, (sl, shape) in params.layout.items()},
        "rng_state": rng_state,
        "size": len(params),
    }
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        fh.write(params.vector.astype("<f4").tobytes())
        fh.write(np.asarray(velocity).astype("<f4").tobytes())
    os.replace(tmp, path)


def load_checkpoint(path: str | os.PathLike, spec: ModelSpec):
    """Return ``(params, velocity, rng_state)``; refuses files written for another spec."""
    with open(path, "rb") as fh:
        if fh.readline() != _MAGIC:
            raise ValidationError(f"{path}: not a checkpoint file")
        header = json.loads(fh.readline())
        body = fh.read()
    if header["spec_hash"] != spec.hash():
        raise ValidationError(f"{path}: checkpoint was written for model spec {header['spec_hash']}, not {spec.hash()}")
    n = header["size"]
    arr = np.frombuffer(body, dtype="<f4")
    if arr.size != 2 * n:
        raise ValidationError(f"{path}: expected {2 * n} floats, found {arr.size}")
    params = Params.from_vector(spec, arr[:n].astype(np.float32))
    return params, arr[n:].astype(np.float32), header["rng_state"]
