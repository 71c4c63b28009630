"""Training objectives and segmentation metrics.

Loss functions accept the prediction either as a :class:`Tensor` (the result
is a differentiable scalar tensor) or as a plain array (the result is a
float). Hard metrics threshold predictions by per-pixel argmax and are built
on :func:`confusion_counts`.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .tensor import ContractError, ShapeError, Tensor, log

EPS = 1e-6
CE_CLAMP = 1e-12


def _check_shapes(y_true, y_pred) -> None:
    if tuple(np.shape(y_true)) != tuple(y_pred.shape):
        raise ShapeError(f"shape mismatch: y_true {np.shape(y_true)} vs y_pred {y_pred.shape}")


def _as_pred(y_pred):
    return y_pred if isinstance(y_pred, Tensor) else np.asarray(y_pred, dtype=np.float64)


def _as_true(y_true, y_pred) -> np.ndarray:
    dtype = y_pred.data.dtype if isinstance(y_pred, Tensor) else np.float64
    return np.asarray(y_true, dtype=dtype)


def _scalar(value):
    return value if isinstance(value, Tensor) else float(value)


def dice_coefficient(y_true, y_pred, eps: float = EPS):
    """Global soft Dice over every element of every channel."""
    _check_shapes(y_true, y_pred)
    y_pred = _as_pred(y_pred)
    y_true = _as_true(y_true, y_pred)
    intersection = (y_true * y_pred).sum()
    return _scalar((2.0 * intersection + eps) / (float(y_true.sum()) + y_pred.sum() + eps))


def per_class_dice(y_true, y_pred, eps: float = EPS):
    """Soft Dice of each channel separately, shape ``[C]``."""
    _check_shapes(y_true, y_pred)
    y_pred = _as_pred(y_pred)
    y_true = _as_true(y_true, y_pred)
    axes = (0, 2, 3)
    intersection = (y_true * y_pred).sum(axis=axes)
    return (2.0 * intersection + eps) / (y_true.sum(axis=axes) + y_pred.sum(axis=axes) + eps)


def categorical_crossentropy(y_true, y_pred):
    """Mean over pixels of ``-sum_c y_true * log(y_pred + 1e-12)``."""
    _check_shapes(y_true, y_pred)
    y_pred = _as_pred(y_pred)
    y_true = _as_true(y_true, y_pred)
    n_pixels = y_true.size // y_true.shape[1]
    logp = log(y_pred + CE_CLAMP) if isinstance(y_pred, Tensor) else np.log(y_pred + CE_CLAMP)
    return _scalar(-(y_true * logp).sum() / n_pixels)


def combined_loss(y_true, y_pred, eps: float = EPS):
    """Cross-entropy plus ``1 - dice_coefficient``."""
    return categorical_crossentropy(y_true, y_pred) + (1.0 - dice_coefficient(y_true, y_pred, eps))


def categorical_dice_loss(y_true, y_pred, eps: float = EPS):
    """``1 -`` the class-averaged soft Dice."""
    scores = per_class_dice(y_true, y_pred, eps)
    return _scalar(1.0 - scores.mean())


LOSSES = {"combined": combined_loss, "categorical_dice": categorical_dice_loss}


# -- hard metrics ---------------------------------------------------------------
@dataclass
class ConfusionCounts:
    tp: np.ndarray
    fp: np.ndarray
    fn: np.ndarray
    tn: np.ndarray

    @property
    def total(self) -> int:
        return int(self.tp[0] + self.fp[0] + self.fn[0] + self.tn[0])

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn, self.tn + other.tn)

    @classmethod
    def zeros(cls, num_classes: int = 4) -> "ConfusionCounts":
        z = np.zeros(num_classes, dtype=np.int64)
        return cls(z.copy(), z.copy(), z.copy(), z.copy())


def confusion_counts(true_labels, pred_labels, num_classes: int = 4) -> ConfusionCounts:
    t = np.asarray(true_labels)
    p = np.asarray(pred_labels)
    if t.shape != p.shape:
        raise ShapeError(f"label maps differ in shape: {t.shape} vs {p.shape}")
    for arr, which in ((t, "true"), (p, "predicted")):
        if arr.size and (arr.min() < 0 or arr.max() >= num_classes):
            raise ContractError(f"{which} labels outside 0..{num_classes - 1}")
    joint = np.bincount((t.astype(np.int64) * num_classes + p.astype(np.int64)).ravel(),
                        minlength=num_classes * num_classes).reshape(num_classes, num_classes)
    tp = np.diag(joint).copy()
    fn = joint.sum(axis=1) - tp
    fp = joint.sum(axis=0) - tp
    tn = t.size - tp - fn - fp
    return ConfusionCounts(tp, fp, fn, tn)


def _labels(onehot_or_probs) -> np.ndarray:
    data = onehot_or_probs.data if isinstance(onehot_or_probs, Tensor) else np.asarray(onehot_or_probs)
    return data.argmax(axis=1)


def _counts_from_maps(y_true, y_pred) -> ConfusionCounts:
    _check_shapes(y_true, y_pred)
    return confusion_counts(_labels(y_true), _labels(y_pred), num_classes=np.shape(y_true)[1])


def sensitivity_from_counts(c: ConfusionCounts, eps: float = EPS) -> float:
    tp, fn = float(c.tp.sum()), float(c.fn.sum())
    return (tp + eps) / (tp + fn + eps)


def specificity_from_counts(c: ConfusionCounts, eps: float = EPS) -> float:
    tn, fp = float(c.tn.sum()), float(c.fp.sum())
    return (tn + eps) / (tn + fp + eps)


def mean_iou_from_counts(c: ConfusionCounts) -> float:
    denom = c.tp + c.fp + c.fn
    present = denom > 0
    if not present.any():
        raise ContractError("mean_iou: no class present in either label map")
    return float(np.mean(c.tp[present] / denom[present]))


def accuracy_from_counts(c: ConfusionCounts) -> float:
    return float(c.tp.sum()) / c.total


def sensitivity(y_true, y_pred, eps: float = EPS) -> float:
    """Micro-averaged true-positive rate of argmax predictions."""
    return sensitivity_from_counts(_counts_from_maps(y_true, y_pred), eps)


def specificity(y_true, y_pred, eps: float = EPS) -> float:
    """Micro-averaged true-negative rate of argmax predictions."""
    return specificity_from_counts(_counts_from_maps(y_true, y_pred), eps)


def mean_iou(true_labels, pred_labels, num_classes: int = 4) -> float:
    return mean_iou_from_counts(confusion_counts(true_labels, pred_labels, num_classes))


def categorical_accuracy(y_true, y_pred) -> float:
    _check_shapes(y_true, y_pred)
    return float(np.mean(_labels(y_true) == _labels(y_pred)))


@dataclass
class MetricsReport:
    dice: float
    mean_iou: float
    categorical_accuracy: float
    sensitivity: float
    specificity: float
    per_class_dice: list[float] = field(default_factory=list)

    def as_dict(self) -> dict:
        return asdict(self)

    def format(self) -> str:
        lines = [
            f"dice                  {self.dice:.6f}",
            f"mean_iou              {self.mean_iou:.6f}",
            f"categorical_accuracy  {self.categorical_accuracy:.6f}",
            f"sensitivity           {self.sensitivity:.6f}",
            f"specificity           {self.specificity:.6f}",
            "per_class_dice        " + " ".join(f"{d:.6f}" for d in self.per_class_dice),
        ]
        return "\n".join(lines)


class MetricAccumulator:
    """Sums the ingredients of every metric across batches.

    Ratios are formed only in :meth:`report`, so results do not depend on how
    the data was batched.
    """

    def __init__(self, num_classes: int = 4, eps: float = EPS):
        self.eps = eps
        self.num_classes = num_classes
        self.counts = ConfusionCounts.zeros(num_classes)
        self.intersection = np.zeros(num_classes)
        self.true_sum = np.zeros(num_classes)
        self.pred_sum = np.zeros(num_classes)
        self.ce_sum = 0.0
        self.pixels = 0

    def update(self, y_true, y_pred) -> None:
        _check_shapes(y_true, y_pred)
        t = np.asarray(y_true, dtype=np.float64)
        p = np.asarray(y_pred.data if isinstance(y_pred, Tensor) else y_pred, dtype=np.float64)
        axes = (0, 2, 3)
        self.intersection += (t * p).sum(axis=axes)
        self.true_sum += t.sum(axis=axes)
        self.pred_sum += p.sum(axis=axes)
        self.ce_sum += float(-(t * np.log(p + CE_CLAMP)).sum())
        self.pixels += t.size // t.shape[1]
        self.counts = self.counts + confusion_counts(t.argmax(axis=1), p.argmax(axis=1), self.num_classes)

    def dice(self) -> float:
        return (2.0 * self.intersection.sum() + self.eps) / (self.true_sum.sum() + self.pred_sum.sum() + self.eps)

    def class_dice(self) -> np.ndarray:
        return (2.0 * self.intersection + self.eps) / (self.true_sum + self.pred_sum + self.eps)

    def loss(self, kind: str = "combined") -> float:
        if kind == "combined":
            return self.ce_sum / self.pixels + (1.0 - self.dice())
        if kind == "categorical_dice":
            return 1.0 - float(self.class_dice().mean())
        raise ContractError(f"unknown loss {kind!r}")

    def report(self) -> MetricsReport:
        c = self.counts
        return MetricsReport(
            dice=float(self.dice()),
            mean_iou=mean_iou_from_counts(c),
            categorical_accuracy=accuracy_from_counts(c),
            sensitivity=sensitivity_from_counts(c, self.eps),
            specificity=specificity_from_counts(c, self.eps),
            per_class_dice=[float(d) for d in self.class_dice()],
        )


def metrics_report(y_true, y_pred, eps: float = EPS) -> MetricsReport:
    acc = MetricAccumulator(num_classes=np.shape(y_true)[1], eps=eps)
    acc.update(y_true, y_pred)
    return acc.report()
