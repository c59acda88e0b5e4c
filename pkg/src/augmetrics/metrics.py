"""Affinity, Diversity variants, Switch-off Lift, paired errors, Gaussian KL."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, fields

import numpy as np

from . import model as M
from .data import LabeledDataset, Stats, fit_stats, normalize_images
from .errors import NotDiscreteError, NumericalError, ValidationError
from .transforms import Policy, augment_validation, enumerate_outcomes

RESULT_COLUMNS = (
    "policy_label",
    "affinity",
    "affinity_sem",
    "diversity_loss",
    "diversity_entropy",
    "steps_to_threshold",
    "test_acc",
    "test_acc_sem",
    "switch_off_lift",
    "best_switch_step",
    "num_seeds",
)


@dataclass(frozen=True)
class Aborted:
    """Stands in for a number when one of the contributing runs diverged."""

    reason: str = "diverged"


# --------------------------------------------------------------------------
# Affinity


def _prepared(ds: LabeledDataset, stats: Stats | None) -> np.ndarray:
    if ds.normalized:
        return ds.images
    return normalize_images(ds.images, stats or ds.stats or fit_stats(ds))


def affinity_detail(spec: M.ModelSpec, params: M.Params, val: LabeledDataset, policy: Policy, seed: int, stats: Stats | None = None):
    """Return ``(affinity, per-example correctness change, augmented split)``."""
    stats = stats or val.stats
    fill = None if stats is None else stats.mean
    aug = augment_validation(policy, val, seed, fill=fill)
    clean_ok = M.correct(spec, params, _prepared(val, stats), val.labels)
    if aug is val:
        diff = np.zeros_like(clean_ok)
    else:
        diff = M.correct(spec, params, _prepared(aug, stats), aug.labels) - clean_ok
    return float(diff.mean()) if len(diff) else 0.0, diff, aug


def affinity(spec: M.ModelSpec, params: M.Params, val: LabeledDataset, policy: Policy, seed: int, stats: Stats | None = None) -> float:
    """Accuracy on one static augmented pass of ``val`` minus accuracy on ``val``."""
    return affinity_detail(spec, params, val, policy, seed, stats)[0]


def mean_log_likelihood_shift(spec: M.ModelSpec, params: M.Params, val: LabeledDataset, policy: Policy, seed: int, stats: Stats | None = None) -> float:
    """Mean logsumexp(logits) on the augmented pass minus the same on clean data."""
    stats = stats or val.stats
    fill = None if stats is None else stats.mean
    aug = augment_validation(policy, val, seed, fill=fill)
    clean = M.mean_log_likelihood(spec, params, _prepared(val, stats))
    return M.mean_log_likelihood(spec, params, _prepared(aug, stats)) - clean


# --------------------------------------------------------------------------
# Diversity


def diversity_loss(runs):
    """Mean final training loss over seeds; an ``Aborted`` run poisons the result."""
    for r in runs:
        if isinstance(r, Aborted):
            return r
    if not runs:
        raise ValidationError("diversity_loss needs at least one run")
    return float(np.mean([r.final_train_loss for r in runs]))


def diversity_entropy(policy: Policy, image_shape=(32, 32)) -> float:
    """Conditional entropy H(X'|X) in nats, summed over independent constituent draws."""
    total = 0.0
    for t in policy.ops():
        if not t.is_discrete:
            raise NotDiscreteError(f"{t.label} is continuously parameterized")
        total += enumerate_outcomes(t, image_shape).entropy()
    return total


def steps_to_threshold(run, threshold: float | None = None) -> int | None:
    threshold = run.config.train_acc_threshold if threshold is None else threshold
    for e in run.log:
        if e["train_acc"] >= threshold:
            return e["step"]
    return None


# --------------------------------------------------------------------------
# Paired statistics and Switch-off Lift


def paired_sem(pairs) -> tuple[float, float]:
    """Mean and standard error of per-pair differences ``a - b``."""
    pairs = list(pairs)
    if len(pairs) < 2:
        raise ValidationError(f"paired_sem needs at least 2 pairs, got {len(pairs)}")
    d = np.array([a - b for a, b in pairs], dtype=np.float64)
    return float(d.mean()), float(d.std(ddof=1) / math.sqrt(len(d)))


def unpaired_sem(a, b) -> float:
    """Standard error of mean(a) - mean(b) treating the two samples as independent."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return float(math.sqrt(a.var(ddof=1) / len(a) + b.var(ddof=1) / len(b)))


def sem(values) -> float:
    v = np.asarray(values, dtype=np.float64)
    return float(v.std(ddof=1) / math.sqrt(len(v))) if len(v) > 1 else 0.0


def best_switch_step(switched_runs_by_step: dict) -> int:
    if not switched_runs_by_step:
        raise ValidationError("no switch-off candidates")
    means = {s: float(np.mean([r.val_acc for r in runs])) for s, runs in switched_runs_by_step.items()}
    return max(sorted(means), key=lambda s: means[s])


def switch_off_lift(base_runs, switched_runs_by_step: dict) -> tuple[float, int]:
    """Pick the switch step by mean validation accuracy; lift is the paired test-accuracy gain.

    ``switched_runs_by_step[s][i]`` must have been resumed from ``base_runs[i]``.
    """
    best = best_switch_step(switched_runs_by_step)
    switched = switched_runs_by_step[best]
    if len(switched) != len(base_runs):
        raise ValidationError("switched runs must pair one-to-one with base runs")
    d = [s.test_acc - b.test_acc for s, b in zip(switched, base_runs)]
    return float(np.mean(d)), best


# --------------------------------------------------------------------------
# Gaussian KL


def kl_gaussian(mean0, cov0, mean1, cov1) -> float:
    """KL(N0 || N1) in nats."""
    mean0, mean1 = np.asarray(mean0, dtype=np.float64), np.asarray(mean1, dtype=np.float64)
    cov0, cov1 = np.atleast_2d(np.asarray(cov0, dtype=np.float64)), np.atleast_2d(np.asarray(cov1, dtype=np.float64))
    try:
        l0 = np.linalg.cholesky(cov0)
        l1 = np.linalg.cholesky(cov1)
    except np.linalg.LinAlgError:
        raise NumericalError("covariance is singular or not positive definite") from None
    d = mean0.size
    diff = mean1 - mean0
    a = np.linalg.solve(l1, l0)
    z = np.linalg.solve(l1, diff)
    logdet = 2 * (np.log(np.diag(l1)).sum() - np.log(np.diag(l0)).sum())
    return float(0.5 * (np.sum(a * a) + z @ z - d + logdet))


def kl_class_shift(means, covariances, shift, priors=None) -> float:
    """Prior-weighted per-class KL between each class Gaussian and its shifted copy."""
    means = np.atleast_2d(means)
    covs = np.asarray(covariances, dtype=np.float64)
    if covs.ndim == 2:
        covs = np.broadcast_to(covs, (len(means),) + covs.shape)
    priors = np.full(len(means), 1.0 / len(means)) if priors is None else np.asarray(priors)
    shift = np.asarray(shift, dtype=np.float64)
    return float(sum(p * kl_gaussian(m, c, m + shift, c) for p, m, c in zip(priors, means, covs)))


# --------------------------------------------------------------------------
# Results records and CSV


@dataclass(frozen=True)
class MetricsRecord:
    policy_label: str
    affinity: float | None = None
    affinity_sem: float | None = None
    diversity_loss: float | None = None
    diversity_entropy: float | None = None
    steps_to_threshold: int | None = None
    test_acc: float | None = None
    test_acc_sem: float | None = None
    switch_off_lift: float | None = None
    best_switch_step: int | None = None
    num_seeds: int = 0


_INT_COLUMNS = {"steps_to_threshold", "best_switch_step", "num_seeds"}


def _cell(v) -> str:
    if v is None or isinstance(v, Aborted):
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def format_results_csv(records) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(RESULT_COLUMNS)
    for r in records:
        w.writerow([_cell(getattr(r, c)) for c in RESULT_COLUMNS])
    return buf.getvalue()


def write_results_csv(records, path) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(format_results_csv(records))


class ResultsParseError(ValueError):
    def __init__(self, line: int, msg: str):
        super().__init__(f"line {line}: {msg}")
        self.line = line


def read_results_csv(path) -> list[MetricsRecord]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or tuple(rows[0]) != RESULT_COLUMNS:
        raise ResultsParseError(1, f"header must be {','.join(RESULT_COLUMNS)}")
    out = []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != len(RESULT_COLUMNS):
            raise ResultsParseError(lineno, f"expected {len(RESULT_COLUMNS)} cells, found {len(row)}")
        kw = {}
        for col, cell in zip(RESULT_COLUMNS, row):
            if col == "policy_label":
                kw[col] = cell
            elif cell == "":
                kw[col] = None
            else:
                try:
                    kw[col] = int(cell) if col in _INT_COLUMNS else float(cell)
                except ValueError:
                    raise ResultsParseError(lineno, f"column {col}: cannot parse {cell!r}") from None
        if kw["num_seeds"] is None:
            kw["num_seeds"] = 0
        out.append(MetricsRecord(**kw))
    return out
