"""Segmentation metrics, per-class reports and k-fold cross-validation."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from .errors import ArgumentError, DataError, UndefinedMetricsError


@dataclass
class ConfusionMatrix:
    """Integer counts; rows are ground truth, columns are predictions."""

    counts: np.ndarray
    class_names: tuple = ()

    def __post_init__(self):
        self.counts = np.array(self.counts, dtype=np.int64)
        if self.counts.ndim != 2 or self.counts.shape[0] != self.counts.shape[1]:
            raise DataError(f"confusion matrix must be square, got shape {self.counts.shape}")
        if (self.counts < 0).any():
            raise DataError("confusion counts must be non-negative")
        m = self.counts.shape[0]
        self.class_names = tuple(self.class_names) or tuple(f"class{i}" for i in range(m))
        if len(self.class_names) != m:
            raise DataError(f"{len(self.class_names)} class names for {m} classes")

    @classmethod
    def empty(cls, num_classes: int, class_names=()) -> ConfusionMatrix:
        return cls(np.zeros((num_classes, num_classes), dtype=np.int64), class_names)

    @property
    def num_classes(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def __add__(self, other: ConfusionMatrix) -> ConfusionMatrix:
        if self.counts.shape != other.counts.shape:
            raise DataError("cannot merge confusion matrices of different sizes")
        return ConfusionMatrix(self.counts + other.counts, self.class_names)

    def __eq__(self, other):
        if not isinstance(other, ConfusionMatrix):
            return NotImplemented
        return self.counts.shape == other.counts.shape and bool((self.counts == other.counts).all())


def accumulate(cm: ConfusionMatrix, pred, gt) -> ConfusionMatrix:
    """Return a new matrix with ``counts[gt[i], pred[i]]`` incremented; ``cm`` is left untouched."""
    pred = np.asarray(pred, dtype=np.int64).ravel()
    gt = np.asarray(gt, dtype=np.int64).ravel()
    if pred.shape != gt.shape:
        raise DataError(f"prediction has {len(pred)} labels, ground truth has {len(gt)}")
    m = cm.num_classes
    for name, a in (("prediction", pred), ("ground truth", gt)):
        bad = np.flatnonzero((a < 0) | (a >= m))
        if len(bad):
            raise DataError(f"{name} label {a[bad[0]]} at index {bad[0]} outside [0, {m})")
    add = np.bincount(gt * m + pred, minlength=m * m).reshape(m, m)
    return ConfusionMatrix(cm.counts + add, cm.class_names)


def confusion(pred, gt, num_classes: int, class_names=()) -> ConfusionMatrix:
    return accumulate(ConfusionMatrix.empty(num_classes, class_names), pred, gt)


def _tp_fp_fn(cm: ConfusionMatrix):
    c = cm.counts
    tp = np.diag(c)
    return tp, c.sum(axis=0) - tp, c.sum(axis=1) - tp


def present_classes(cm: ConfusionMatrix) -> np.ndarray:
    """Classes that occur in the ground truth or the predictions."""
    tp, fp, fn = _tp_fp_fn(cm)
    return (tp + fp + fn) > 0


def iou_per_class(cm: ConfusionMatrix) -> np.ndarray:
    """TP / (TP + FP + FN) per class; NaN marks classes absent from both labelings."""
    tp, fp, fn = _tp_fp_fn(cm)
    union = tp + fp + fn
    out = np.full(cm.num_classes, np.nan)
    ok = union > 0
    out[ok] = tp[ok] / union[ok]
    return out


def class_accuracy(cm: ConfusionMatrix) -> np.ndarray:
    """Per-class recall; NaN for classes with no ground-truth points."""
    rows = cm.counts.sum(axis=1)
    out = np.full(cm.num_classes, np.nan)
    ok = rows > 0
    out[ok] = np.diag(cm.counts)[ok] / rows[ok]
    return out


@dataclass(frozen=True)
class Summary:
    mean_iou: float
    overall_accuracy: float
    mean_class_accuracy: float

    def as_tuple(self):
        return (self.mean_iou, self.overall_accuracy, self.mean_class_accuracy)


def _exact_mean(num, den) -> float:
    # rational arithmetic so the result is the correctly rounded true mean
    terms = [Fraction(int(a), int(b)) for a, b in zip(num, den) if b > 0]
    return float(sum(terms) / len(terms))


def summary(cm: ConfusionMatrix) -> Summary:
    if cm.total == 0:
        raise UndefinedMetricsError("metrics are undefined for an empty confusion matrix")
    tp, fp, fn = _tp_fp_fn(cm)
    return Summary(
        _exact_mean(tp, tp + fp + fn),
        float(Fraction(int(tp.sum()), cm.total)),
        _exact_mean(tp, cm.counts.sum(axis=1)),
    )


# ---------------------------------------------------------------------------
# cross-validation


def kfold_split(clouds, k: int = 6, fold: int = 0):
    """Split clouds by tag: the sorted unique tags are dealt round-robin into
    ``k`` folds and fold ``fold`` becomes the test set."""
    clouds = list(clouds)
    if k < 2:
        raise ArgumentError("k must be at least 2")
    if not 0 <= fold < k:
        raise ArgumentError(f"fold must lie in [0, {k}), got {fold}")
    tags = sorted({c.tag for c in clouds})
    if len(tags) < k:
        raise ArgumentError(f"need at least {k} distinct tags for {k} folds, got {len(tags)}")
    test_tags = {t for i, t in enumerate(tags) if i % k == fold}
    train = [c for c in clouds if c.tag not in test_tags]
    test = [c for c in clouds if c.tag in test_tags]
    return train, test


@dataclass
class CrossValidation:
    folds: list = field(default_factory=list)

    @property
    def pooled(self) -> ConfusionMatrix:
        total = self.folds[0]
        for cm in self.folds[1:]:
            total = total + cm
        return total


def evaluate_clouds(clouds, model, sampler, seed: int = 0) -> ConfusionMatrix:
    from .training import predict_scene

    clouds = list(clouds)
    cm = ConfusionMatrix.empty(model.config.num_classes, clouds[0].class_names if clouds else ())
    for c in clouds:
        cm = accumulate(cm, predict_scene(c, model, sampler, seed), c.labels)
    return cm


def cross_validate(clouds, cfg, k: int = 6, folds=None, log=None) -> CrossValidation:
    """Train and evaluate one model per fold; metrics come from the pooled counts."""
    from .training import train

    out = CrossValidation()
    for fold in folds if folds is not None else range(k):
        train_set, test_set = kfold_split(clouds, k, fold)
        model, _ = train(train_set, cfg)
        cm = evaluate_clouds(test_set, model, cfg.sampler, cfg.seed)
        if log is not None:
            log(f"fold {fold}: {len(train_set)} train / {len(test_set)} test clouds, "
                f"mean IoU {summary(cm).mean_iou:.4f}")
        out.folds.append(cm)
    return out


# ---------------------------------------------------------------------------
# reports


def _cell(v: float) -> str:
    return "absent" if math.isnan(v) else f"{v:.4f}"


def render_report(results: dict, title: str = "") -> str:
    """Fixed-width table (one row per model, one column per class) followed by
    ``metric.class = value`` lines.

    ``results`` maps a model name to its ConfusionMatrix; all matrices must
    share the same classes.
    """
    if not results:
        raise ArgumentError("nothing to report")
    names = next(iter(results.values())).class_names
    width = max(8, *(len(n) for n in names))
    label_w = max(10, *(len(m) for m in results))
    head = ["model".ljust(label_w), "mIoU".rjust(8), "OA".rjust(8), "mAcc".rjust(8)]
    head += [n.rjust(width) for n in names]
    lines = []
    if title:
        lines.append(f"# {title}")
    lines.append("# per-class IoU; metrics computed from counts pooled over all evaluated points")
    lines.append(" ".join(head))
    kv = []
    for model_name, cm in results.items():
        if cm.class_names != names:
            raise ArgumentError("all reported matrices must share class names")
        s = summary(cm)
        iou = iou_per_class(cm)
        row = [model_name.ljust(label_w)] + [f"{v:.4f}".rjust(8) for v in s.as_tuple()]
        row += [_cell(v).rjust(width) for v in iou]
        lines.append(" ".join(row))
        prefix = "" if len(results) == 1 else f"{model_name}."
        kv.append(f"{prefix}mean_iou = {s.mean_iou:.4f}")
        kv.append(f"{prefix}overall_accuracy = {s.overall_accuracy:.4f}")
        kv.append(f"{prefix}mean_class_accuracy = {s.mean_class_accuracy:.4f}")
        kv.extend(f"{prefix}iou.{n} = {_cell(v)}" for n, v in zip(names, iou))
    return "\n".join(lines) + "\n\n" + "\n".join(kv) + "\n"


def parse_report(text: str) -> dict[str, float]:
    """Read back the ``metric.class = value`` block; absent classes become NaN."""
    out = {}
    for line in text.splitlines():
        if "=" not in line or line.startswith("#"):
            continue
        key, value = (s.strip() for s in line.split("=", 1))
        out[key] = math.nan if value == "absent" else float(value)
    return out
