"""Augmentation zoo, policies, and exact outcome enumeration.

All transforms act on a single (H, W, C) float image with values in
[0, 1] (scaled, not yet normalized).  Randomness is always passed in as an
explicit ``numpy.random.Generator``.

A transform first flips its own coin (``rng.random() < probability``);
when the coin fails the input is returned untouched.  Otherwise a
*parameter draw* is made (direction, offset, patch location, ...) and
recorded as a small hashable descriptor.  Draws that are provably the
identity map (the 0 degree arm of Rotate(square), the centered Crop offset)
are reported as ``IDENTITY``.
"""
from __future__ import annotations

import json
import math
import re
from dataclasses import asdict, dataclass, field, fields

import numpy as np
from scipy import ndimage

from .data import LabeledDataset
from .errors import NotDiscreteError, ValidationError
from .rng import stream

KINDS = (
    "Identity",
    "FlipLR",
    "FlipUD",
    "Crop",
    "Cutout",
    "RotateFixed",
    "RotateVariable",
    "RotateSquare",
    "ShearFixed",
    "ShearVariable",
    "PatchGaussianFixed",
    "PatchGaussianVariable",
    "FullGaussian",
    "RandomErasing",
    "SolarizeAdd",
)
DISCRETE_KINDS = frozenset({"Identity", "FlipLR", "FlipUD", "Crop", "Cutout", "RotateFixed", "RotateSquare", "ShearFixed"})
STANDARD_KINDS = ("Crop", "FlipLR", "Cutout")

IDENTITY = ("identity",)


@dataclass(frozen=True)
class TransformSpec:
    """One augmentation with its magnitude and application probability.

    Only the magnitude fields relevant to ``kind`` are used: ``degrees``
    (rotate/shear), ``pad`` (Crop), ``size`` (Cutout, PatchGaussian,
    RandomErasing), ``sigma`` (noise maximum std), ``threshold``/``add``
    (SolarizeAdd).
    """

    kind: str
    probability: float = 1.0
    degrees: float = 0.0
    pad: int = 0
    size: int = 0
    sigma: float = 0.0
    threshold: float = 0.0
    add: float = 0.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValidationError(f"unknown transform kind {self.kind!r}")
        if not 0.0 <= self.probability <= 1.0:
            raise ValidationError(f"{self.kind}: probability {self.probability} not in [0, 1]")
        for name in ("degrees", "pad", "size", "sigma", "threshold", "add"):
            if getattr(self, name) < 0:
                raise ValidationError(f"{self.kind}: {name} must be non-negative")
        if self.kind in ("Cutout", "PatchGaussianFixed", "PatchGaussianVariable", "RandomErasing") and self.size < 1:
            raise ValidationError(f"{self.kind}: size must be >= 1")

    @property
    def is_discrete(self) -> bool:
        return self.kind in DISCRETE_KINDS

    def check_image(self, shape) -> None:
        h, w = shape[:2]
        if self.kind in ("Cutout", "PatchGaussianFixed", "RandomErasing") and self.size > min(h, w):
            raise ValidationError(f"{self.kind}: size {self.size} exceeds image side {min(h, w)}")

    @property
    def label(self) -> str:
        return format_label(self)

    def to_dict(self) -> dict:
        out = {"kind": self.kind, "probability": self.probability}
        for name in _MAGNITUDE_FIELDS[self.kind]:
            out[name] = getattr(self, name)
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "TransformSpec":
        known = {f.name for f in fields(cls)}
        extra = set(d) - known
        if extra:
            raise ValidationError(f"unknown transform fields {sorted(extra)}")
        return cls(**d)


_MAGNITUDE_FIELDS = {
    "Identity": (),
    "FlipLR": (),
    "FlipUD": (),
    "Crop": ("pad",),
    "Cutout": ("size",),
    "RotateFixed": ("degrees",),
    "RotateVariable": ("degrees",),
    "RotateSquare": (),
    "ShearFixed": ("degrees",),
    "ShearVariable": ("degrees",),
    "PatchGaussianFixed": ("size", "sigma"),
    "PatchGaussianVariable": ("size", "sigma"),
    "FullGaussian": ("sigma",),
    "RandomErasing": ("size",),
    "SolarizeAdd": ("threshold", "add"),
}


# --------------------------------------------------------------------------
# Canonical labels, e.g. Rotate(fixed,60deg,50%) or Crop(4,100%)


def _num(x) -> str:
    return f"{x:g}" if isinstance(x, float) else str(x)


def _pct(p: float) -> str:
    return f"{p * 100:g}%"


def format_label(t: TransformSpec) -> str:
    k, p = t.kind, _pct(t.probability)
    if k == "Identity":
        return "Identity"
    if k in ("FlipLR", "FlipUD"):
        return f"{k}({p})"
    if k == "Crop":
        return f"Crop({t.pad},{p})"
    if k == "Cutout":
        return f"Cutout({t.size},{p})"
    if k == "RandomErasing":
        return f"RandomErasing({t.size},{p})"
    if k == "RotateSquare":
        return f"Rotate(square,{p})"
    if k.startswith(("Rotate", "Shear")):
        base, mode = ("Rotate", k[6:]) if k.startswith("Rotate") else ("Shear", k[5:])
        return f"{base}({mode.lower()},{_num(float(t.degrees))}deg,{p})"
    if k.startswith("PatchGaussian"):
        return f"PatchGaussian({k[13:].lower()},{t.size},{_num(float(t.sigma))},{p})"
    if k == "FullGaussian":
        return f"FullGaussian({_num(float(t.sigma))},{p})"
    if k == "SolarizeAdd":
        return f"SolarizeAdd({_num(float(t.threshold))},{_num(float(t.add))},{p})"
    raise AssertionError(k)


_LABEL_RE = re.compile(r"^\s*(\w+)\s*(?:\((.*)\))?\s*$")


def _parse_pct(s: str) -> float:
    s = s.strip()
    if not s.endswith("%"):
        raise ValidationError(f"probability {s!r} must be a percentage")
    return float(s[:-1]) / 100.0


def parse_label(label: str) -> TransformSpec:
    m = _LABEL_RE.match(label)
    if not m:
        raise ValidationError(f"cannot parse transform label {label!r}")
    name, argstr = m.group(1), m.group(2)
    args = [a.strip() for a in argstr.split(",")] if argstr else []
    try:
        if name == "Identity":
            return TransformSpec("Identity")
        p = _parse_pct(args[-1])
        if name in ("FlipLR", "FlipUD"):
            return TransformSpec(name, p)
        if name == "Crop":
            return TransformSpec("Crop", p, pad=int(args[0]))
        if name in ("Cutout", "RandomErasing"):
            return TransformSpec(name, p, size=int(args[0]))
        if name in ("Rotate", "Shear"):
            mode = args[0].lower()
            if name == "Rotate" and mode == "square":
                return TransformSpec("RotateSquare", p)
            deg = float(args[1].removesuffix("deg"))
            return TransformSpec(f"{name}{mode.capitalize()}", p, degrees=deg)
        if name == "PatchGaussian":
            return TransformSpec(f"PatchGaussian{args[0].lower().capitalize()}", p, size=int(args[1]), sigma=float(args[2]))
        if name == "FullGaussian":
            return TransformSpec("FullGaussian", p, sigma=float(args[0]))
        if name == "SolarizeAdd":
            return TransformSpec("SolarizeAdd", p, threshold=float(args[0]), add=float(args[1]))
    except (IndexError, ValueError) as exc:
        if isinstance(exc, ValidationError):
            raise
        raise ValidationError(f"bad arguments in transform label {label!r}: {exc}") from None
    raise ValidationError(f"unknown transform {name!r} in label {label!r}")


# --------------------------------------------------------------------------
# Policies


@dataclass(frozen=True)
class Policy:
    """Ordered composition: every pre_op in order, then Crop, FlipLR, Cutout."""

    pre_ops: tuple[TransformSpec, ...] = ()
    crop: TransformSpec | None = None
    flip_lr: TransformSpec | None = None
    cutout: TransformSpec | None = None

    def __post_init__(self):
        object.__setattr__(self, "pre_ops", tuple(self.pre_ops))
        for slot, kind in (("crop", "Crop"), ("flip_lr", "FlipLR"), ("cutout", "Cutout")):
            t = getattr(self, slot)
            if t is not None and t.kind != kind:
                raise ValidationError(f"slot {slot} holds a {t.kind}, expected {kind}")

    @classmethod
    def from_ops(cls, ops) -> "Policy":
        pre, slots = [], {}
        for t in ops:
            slot = {"Crop": "crop", "FlipLR": "flip_lr", "Cutout": "cutout"}.get(t.kind)
            if slot is None:
                pre.append(t)
            elif slot in slots:
                raise ValidationError(f"policy has more than one {t.kind}")
            else:
                slots[slot] = t
        return cls(tuple(pre), **slots)

    @classmethod
    def parse(cls, label: str) -> "Policy":
        """Parse ``A+B+...`` labels; ``Clean`` and ``Identity`` give the empty policy."""
        label = label.strip()
        if label in ("", "Clean", "Identity"):
            return cls()
        return cls.from_ops(parse_label(part) for part in _split_top(label))

    def ops(self) -> list[TransformSpec]:
        return [*self.pre_ops, *(t for t in (self.crop, self.flip_lr, self.cutout) if t is not None)]

    @property
    def label(self) -> str:
        ops = [t for t in self.ops() if t.kind != "Identity"]
        return "+".join(t.label for t in ops) if ops else "Identity"

    @property
    def is_identity(self) -> bool:
        """True when no transform can ever change an image."""
        return all(t.kind == "Identity" or t.probability == 0.0 for t in self.ops())

    @property
    def is_discrete(self) -> bool:
        return all(t.is_discrete for t in self.ops())

    def check_image(self, shape) -> None:
        for t in self.ops():
            t.check_image(shape)

    def to_dict(self) -> dict:
        return {"ops": [t.to_dict() for t in self.ops()]}

    @classmethod
    def from_dict(cls, d: dict) -> "Policy":
        return cls.from_ops(TransformSpec.from_dict(o) for o in d.get("ops", []))

    def to_text(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_text(cls, text: str) -> "Policy":
        return cls.from_dict(json.loads(text))


def _split_top(label: str) -> list[str]:
    parts, depth, cur = [], 0, ""
    for ch in label:
        depth += ch == "("
        depth -= ch == ")"
        if ch == "+" and depth == 0:
            parts.append(cur)
            cur = ""
        else:
            cur += ch
    parts.append(cur)
    return [p for p in (s.strip() for s in parts) if p]


# --------------------------------------------------------------------------
# Pixel operations


def _affine(img: np.ndarray, matrix: np.ndarray) -> np.ndarray:
    """Resample ``img`` with bilinear interpolation and zero fill.

    ``matrix`` maps output (x, y) offsets from the image center to source
    offsets; y points down.
    """
    h, w, c = img.shape
    # scipy works in (row, col) order
    rc = np.array([[matrix[1, 1], matrix[1, 0]], [matrix[0, 1], matrix[0, 0]]])
    center = np.array([(h - 1) / 2.0, (w - 1) / 2.0])
    offset = center - rc @ center
    out = np.empty_like(img)
    for ch in range(c):
        out[..., ch] = ndimage.affine_transform(img[..., ch], rc, offset=offset, order=1, mode="grid-constant", cval=0.0)
    return out


def rotate(img: np.ndarray, degrees: float) -> np.ndarray:
    """Rotate counter-clockwise (as displayed) about the image center."""
    t = math.radians(degrees)
    # inverse map: output offset -> source offset, with y pointing down
    m = np.array([[math.cos(t), -math.sin(t)], [math.sin(t), math.cos(t)]])
    return _affine(img, m)


def shear(img: np.ndarray, degrees: float) -> np.ndarray:
    """Horizontal shear by ``tan(degrees)``."""
    m = np.array([[1.0, math.tan(math.radians(degrees))], [0.0, 1.0]])
    return _affine(img, m)


def crop(img: np.ndarray, pad: int, dy: int, dx: int) -> np.ndarray:
    """Zero-pad by ``pad`` and cut the original size at offset (dy, dx) from center."""
    h, w, _ = img.shape
    padded = np.pad(img, ((pad, pad), (pad, pad), (0, 0)))
    return padded[pad + dy : pad + dy + h, pad + dx : pad + dx + w].copy()


def _box(center: int, size: int, limit: int) -> slice:
    lo = center - size // 2
    return slice(max(lo, 0), min(lo + size, limit))


def _draw_params(t: TransformSpec, shape, rng: np.random.Generator):
    h, w = shape[:2]
    k = t.kind
    if k in ("Identity",):
        return IDENTITY
    if k in ("FlipLR", "FlipUD", "SolarizeAdd"):
        return (k,)
    if k == "Crop":
        dy, dx = (int(v) - t.pad for v in rng.integers(0, 2 * t.pad + 1, size=2))
        return IDENTITY if dy == dx == 0 else ("crop", dy, dx)
    if k in ("Cutout", "RandomErasing"):
        cy, cx = int(rng.integers(0, h)), int(rng.integers(0, w))
        return (k, cy, cx)
    if k in ("RotateFixed", "ShearFixed"):
        sign = 1 if rng.random() < 0.5 else -1
        if t.degrees % 360 == 0 and k == "RotateFixed":
            return IDENTITY
        if t.degrees == 0:
            return IDENTITY
        return (k, sign * t.degrees)
    if k in ("RotateVariable", "ShearVariable"):
        sign = 1 if rng.random() < 0.5 else -1
        return (k, sign * rng.uniform(0.0, t.degrees))
    if k == "RotateSquare":
        quarter = int(rng.integers(0, 4))
        return IDENTITY if quarter == 0 else ("rot90", quarter)
    if k == "PatchGaussianFixed":
        y0, x0 = int(rng.integers(0, h - t.size + 1)), int(rng.integers(0, w - t.size + 1))
        return (k, y0, x0, t.size, rng.uniform(0.0, t.sigma))
    if k == "PatchGaussianVariable":
        size = int(rng.integers(1, t.size + 1))
        cy, cx = int(rng.integers(0, h)), int(rng.integers(0, w))
        return (k, cy, cx, size, rng.uniform(0.0, t.sigma))
    if k == "FullGaussian":
        return (k, rng.uniform(0.0, t.sigma))
    raise AssertionError(k)


def _apply_params(t: TransformSpec, img: np.ndarray, params, rng: np.random.Generator, fill) -> np.ndarray:
    if params == IDENTITY:
        return img
    k = params[0]
    h, w, c = img.shape
    if k == "FlipLR":
        return img[:, ::-1].copy()
    if k == "FlipUD":
        return img[::-1].copy()
    if k == "crop":
        return crop(img, t.pad, params[1], params[2])
    if k == "rot90":
        return np.rot90(img, params[1], axes=(0, 1)).copy()
    if k in ("RotateFixed", "RotateVariable"):
        return rotate(img, params[1])
    if k in ("ShearFixed", "ShearVariable"):
        return shear(img, params[1])
    if k == "Cutout":
        out = img.copy()
        out[_box(params[1], t.size, h), _box(params[2], t.size, w)] = _fill_value(fill, img)
        return out
    if k == "RandomErasing":
        out = img.copy()
        ys, xs = _box(params[1], t.size, h), _box(params[2], t.size, w)
        region = out[ys, xs]
        out[ys, xs] = rng.uniform(0.0, 1.0, size=region.shape)
        return out
    if k == "PatchGaussianFixed":
        _, y0, x0, size, sigma = params
        out = img.copy()
        region = out[y0 : y0 + size, x0 : x0 + size]
        out[y0 : y0 + size, x0 : x0 + size] = np.clip(region + rng.normal(0.0, sigma, size=region.shape), 0.0, 1.0)
        return out
    if k == "PatchGaussianVariable":
        _, cy, cx, size, sigma = params
        out = img.copy()
        ys, xs = _box(cy, size, h), _box(cx, size, w)
        region = out[ys, xs]
        out[ys, xs] = np.clip(region + rng.normal(0.0, sigma, size=region.shape), 0.0, 1.0)
        return out
    if k == "FullGaussian":
        return np.clip(img + rng.normal(0.0, params[1], size=img.shape), 0.0, 1.0).astype(img.dtype)
    if k == "SolarizeAdd":
        return np.where(img < t.threshold, np.minimum(img + t.add, 1.0), img).astype(img.dtype)
    raise AssertionError(k)


def _fill_value(fill, img):
    if fill is None:
        return np.full(img.shape[-1], 0.5, dtype=img.dtype)
    return np.asarray(fill, dtype=img.dtype)


def draw(t: TransformSpec, img: np.ndarray, rng: np.random.Generator, fill=None):
    """Apply ``t`` once and return ``(descriptor, image)``.

    The descriptor identifies the parameter draw; it is ``IDENTITY`` when
    the coin failed or the draw cannot change the image.
    """
    if t.kind == "Identity" or not rng.random() < t.probability:
        return IDENTITY, img
    params = _draw_params(t, img.shape, rng)
    return params, _apply_params(t, img, params, rng, fill)


def apply(t: TransformSpec, img: np.ndarray, rng: np.random.Generator, fill=None) -> np.ndarray:
    """Apply one transform. ``fill`` is the per-channel Cutout gray (default 0.5)."""
    return draw(t, img, rng, fill)[1]


def apply_policy_dynamic(policy: Policy, img: np.ndarray, rng: np.random.Generator, fill=None, trace: list | None = None) -> np.ndarray:
    """One fresh stochastic draw of the whole policy, in its mandated order."""
    for t in policy.ops():
        if trace is not None:
            trace.append(t.kind)
        img = draw(t, img, rng, fill)[1]
    return img


def dataset_fill(ds: LabeledDataset):
    """Per-channel mean of the scaled images, used as the Cutout gray."""
    if ds.stats is not None:
        return ds.stats.mean
    return ds.images.reshape(-1, ds.images.shape[-1]).mean(axis=0)


def materialize_static(policy: Policy, ds: LabeledDataset, seed: int, fill=None, tag: str = "static") -> LabeledDataset:
    """Replace every image by a single draw of ``policy``.

    Image ``i`` uses the stream ``(seed, tag, i)``, so the result does not
    depend on how the work is split.
    """
    policy.check_image(ds.shape)
    if policy.is_identity:
        return ds
    fill = dataset_fill(ds) if fill is None else fill
    out = np.empty_like(ds.images)
    for i, img in enumerate(ds.images):
        out[i] = apply_policy_dynamic(policy, img, stream(seed, tag, i), fill)
    return LabeledDataset(out, ds.labels, ds.num_classes, ds.stats, ds.normalized)


def augment_validation(policy: Policy, val: LabeledDataset, seed: int, fill=None) -> LabeledDataset:
    """Single static pass over a validation split, as Affinity requires."""
    return materialize_static(policy, val, seed, fill=fill, tag="augment-validation")


# --------------------------------------------------------------------------
# Exact outcome distributions


@dataclass(frozen=True)
class OutcomeDistribution:
    outcomes: tuple[tuple[tuple, float], ...]
    is_discrete: bool = True

    def as_dict(self) -> dict:
        return dict(self.outcomes)

    def entropy(self) -> float:
        return float(-sum(p * math.log(p) for _, p in self.outcomes))

    def __len__(self) -> int:
        return len(self.outcomes)


def enumerate_outcomes(t: TransformSpec, image_shape=(32, 32)) -> OutcomeDistribution:
    """Exact distribution over parameter draws, identity draws merged.

    ``image_shape`` only matters for Cutout, whose center ranges over all
    H*W pixels.
    """
    if not t.is_discrete:
        raise NotDiscreteError(f"{t.kind} has continuous parameters; use loss-based Diversity")
    p = t.probability
    arms: list[tuple[tuple, float]] = []
    if t.kind == "Identity":
        pass
    elif t.kind in ("FlipLR", "FlipUD"):
        arms = [((t.kind,), p)]
    elif t.kind in ("RotateFixed", "ShearFixed"):
        identity = t.degrees == 0 or (t.kind == "RotateFixed" and t.degrees % 360 == 0)
        arms = [(IDENTITY, p)] if identity else [((t.kind, t.degrees), p / 2), ((t.kind, -t.degrees), p / 2)]
    elif t.kind == "RotateSquare":
        arms = [(IDENTITY, p / 4)] + [(("rot90", q), p / 4) for q in (1, 2, 3)]
    elif t.kind == "Crop":
        n = (2 * t.pad + 1) ** 2
        offs = range(-t.pad, t.pad + 1)
        arms = [(IDENTITY if dy == dx == 0 else ("crop", dy, dx), p / n) for dy in offs for dx in offs]
    elif t.kind == "Cutout":
        h, w = image_shape[:2]
        arms = [(("Cutout", cy, cx), p / (h * w)) for cy in range(h) for cx in range(w)]
    merged: dict[tuple, float] = {IDENTITY: 1.0 - p}
    for desc, q in arms:
        merged[desc] = merged.get(desc, 0.0) + q
    outcomes = tuple((d, q) for d, q in merged.items() if q > 0)
    return OutcomeDistribution(outcomes)
