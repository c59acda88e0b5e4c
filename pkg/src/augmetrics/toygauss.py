"""Two-Gaussian testbed: Affinity vs. KL divergence over a grid of mean shifts.

A linear classifier is trained once on clean samples.  Each grid cell
draws a fresh validation set, shifts both class means by the cell's
``delta`` and records the model's accuracy change (Affinity) alongside
the closed-form class-averaged Gaussian KL.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.stats import norm

from . import model as M
from .data import GaussianMixtureSpec, Stats, make_gaussian_mixture
from .errors import ValidationError
from .metrics import kl_class_shift
from .rng import subseed
from .trainer import TrainConfig, TrainRun, train

DEFAULT_SPEC = GaussianMixtureSpec(means=[[-1.0, 0.0], [1.0, 0.0]], covariances=np.eye(2), samples_per_class=1000)
DEFAULT_TRAIN = TrainConfig(steps=2000, batch_size=64, base_lr=0.1, l2_coeff=0.0, log_every=100)


@dataclass
class ShiftGrid:
    axis: np.ndarray
    values_affinity: np.ndarray
    values_kl: np.ndarray
    affinity_sem: np.ndarray
    shifted_acc: np.ndarray
    shifted_acc_sem: np.ndarray
    clean_acc: np.ndarray
    weight: np.ndarray  # normal of the learned boundary, class 1 side positive
    bias: float
    run: TrainRun | None = field(default=None, repr=False)

    @property
    def resolution(self) -> int:
        return len(self.axis)

    def delta(self, i: int, j: int) -> np.ndarray:
        """Shift at row ``i`` (second coordinate) and column ``j`` (first coordinate)."""
        return np.array([self.axis[j], self.axis[i]])

    def index_of(self, value: float) -> int:
        k = int(np.argmin(np.abs(self.axis - value)))
        if not np.isclose(self.axis[k], value):
            raise ValidationError(f"{value} is not a grid coordinate")
        return k


def linear_boundary(spec: M.ModelSpec, params: M.Params) -> tuple[np.ndarray, float]:
    """Return (w, b) with class 1 predicted where ``w @ x + b > 0``."""
    if spec.architecture != "linear" or spec.num_classes != 2:
        raise ValidationError("boundary extraction needs a two-class linear model")
    W = params["W"].astype(np.float64)
    b = params["b"].astype(np.float64)
    return W[:, 1] - W[:, 0], float(b[1] - b[0])


def oracle_accuracy(weight, bias, gm: GaussianMixtureSpec, delta) -> float:
    """Exact accuracy of the half-space classifier on the shifted mixture (equal priors)."""
    weight = np.asarray(weight, dtype=np.float64)
    delta = np.asarray(delta, dtype=np.float64)
    accs = []
    for k in range(2):
        margin = weight @ (gm.means[k] + delta) + bias
        scale = np.sqrt(weight @ gm.covariances[k] @ weight)
        accs.append(norm.cdf(margin / scale) if k == 1 else norm.cdf(-margin / scale))
    return float(np.mean(accs))


def train_toy_model(gm: GaussianMixtureSpec, train_cfg: TrainConfig, seed: int):
    if gm.num_classes != 2 or gm.dim != 2:
        raise ValidationError("the toy experiment needs a two-class, two-dimensional mixture")
    spec = M.ModelSpec("linear", (1, 1, 2), 2)
    ds = make_gaussian_mixture(gm, subseed(seed, "toy-train")).as_images()
    val = make_gaussian_mixture(gm, subseed(seed, "toy-val")).as_images()
    unit = Stats(np.zeros(2, dtype=np.float32), np.ones(2, dtype=np.float32), (False, False))
    run = train(spec, ds, val, train_cfg.replace(seed=seed), stats=unit)
    return spec, run


def run_toy_experiment(
    gm: GaussianMixtureSpec = DEFAULT_SPEC,
    delta_range: tuple[float, float] = (-3.0, 3.0),
    resolution: int = 31,
    train_cfg: TrainConfig = DEFAULT_TRAIN,
    seed: int = 0,
    val_per_class: int = 2000,
) -> ShiftGrid:
    spec, run = train_toy_model(gm, train_cfg, seed)
    params = run.final_params.astype(np.float64)
    w, b = linear_boundary(spec, params)
    axis = np.linspace(delta_range[0], delta_range[1], resolution)
    shape = (resolution, resolution)
    aff, aff_sem, kl, acc, acc_sem, clean = (np.zeros(shape) for _ in range(6))
    cell_gm = GaussianMixtureSpec(gm.means, gm.covariances, val_per_class)
    for i in range(resolution):
        for j in range(resolution):
            delta = np.array([axis[j], axis[i]])
            base = make_gaussian_mixture(cell_gm, subseed(seed, "toy-cell", i, j))
            x0 = base.points.reshape(-1, 1, 1, 2)
            ok0 = M.correct(spec, params, x0, base.labels)
            ok1 = M.correct(spec, params, x0 + delta.reshape(1, 1, 1, 2), base.labels)
            d = ok1 - ok0
            n = len(d)
            aff[i, j] = d.mean()
            aff_sem[i, j] = d.std(ddof=1) / np.sqrt(n)
            acc[i, j] = ok1.mean()
            acc_sem[i, j] = ok1.std(ddof=1) / np.sqrt(n)
            clean[i, j] = ok0.mean()
            kl[i, j] = kl_class_shift(gm.means, gm.covariances, delta)
    return ShiftGrid(axis, aff, kl, aff_sem, acc, acc_sem, clean, w, b, run)


def write_tsv(values: np.ndarray, axis: np.ndarray, path) -> None:
    """Matrix with a header row of first-coordinate shifts and a leading column of second-coordinate shifts."""
    with open(path, "w") as fh:
        fh.write("dy\\dx\t" + "\t".join(repr(float(x)) for x in axis) + "\n")
        for i, y in enumerate(axis):
            fh.write(repr(float(y)) + "\t" + "\t".join(repr(float(v)) for v in values[i]) + "\n")


def read_tsv(path) -> tuple[np.ndarray, np.ndarray]:
    with open(path) as fh:
        header = fh.readline().rstrip("\n").split("\t")
        rows = [line.rstrip("\n").split("\t") for line in fh if line.strip()]
    axis = np.array([float(v) for v in header[1:]])
    values = np.array([[float(v) for v in r[1:]] for r in rows])
    return axis, values


def write_outputs(grid: ShiftGrid, out_dir) -> list:
    from pathlib import Path

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = [out / "toy_affinity.tsv", out / "toy_kl.tsv"]
    write_tsv(grid.values_affinity, grid.axis, paths[0])
    write_tsv(grid.values_kl, grid.axis, paths[1])
    return paths
