"""Evaluation harness: confusion-matrix metrics, one-vs-rest ROC-AUC,
epoch traces with early stopping, CSV emission, and a synthetic labeled
dataset generator for desk-scale end-to-end runs.

All metric computations stay in integer arithmetic until the final
division so they can be checked against naive recounting oracles exactly.
"""

import csv
from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, UsageError
from .numerics import RandomStream
from .preprocess import ImagePatch

CATEGORY_NAMES = (
    "Lesion not found",
    "Image with no referral",
    "Visited for different Reasons",
    "Low Risk of Cancer",
    "High Risk of Cancer",
)


# ---------------------------------------------------------------------------
# confusion matrix and derived metrics


@dataclass
class ConfusionMatrix:
    """Row = true category, column = predicted category."""

    counts: np.ndarray

    @property
    def total(self):
        return int(self.counts.sum())


def confusion(truths, predictions, n_categories):
    """Count (true, predicted) pairs into an n x n matrix."""
    truths = np.asarray(truths)
    predictions = np.asarray(predictions)
    if truths.shape != predictions.shape:
        raise UsageError("truths and predictions must have equal length")
    if truths.size and (truths.min() < 0 or truths.max() >= n_categories
                        or predictions.min() < 0 or predictions.max() >= n_categories):
        raise UsageError(f"labels must lie in [0, {n_categories})")
    counts = np.zeros((n_categories, n_categories), dtype=np.int64)
    np.add.at(counts, (truths, predictions), 1)
    return ConfusionMatrix(counts=counts)


def f1_score(precision, recall):
    """Harmonic mean of precision and recall; 0 when both are 0."""
    if precision + recall == 0:
        return 0.0
    return 2.0 * precision * recall / (precision + recall)


@dataclass
class CategoryMetrics:
    precision: float
    recall: float
    f1: float
    support: int
    flags: tuple = ()


@dataclass
class MetricsReport:
    per_category: list
    accuracy: float


def precision_recall_f1(cm):
    """Per-category precision/recall/F1 plus overall accuracy.

    Zero-denominator cases report 0 and carry an explicit flag instead of
    propagating NaN.
    """
    counts = cm.counts
    if counts.sum() == 0:
        raise UsageError("confusion matrix is empty")
    k = counts.shape[0]
    rows = []
    for c in range(k):
        tp = int(counts[c, c])
        fp = int(counts[:, c].sum() - tp)
        fn = int(counts[c, :].sum() - tp)
        flags = []
        if tp + fp == 0:
            precision, recall = 0.0, _ratio(tp, tp + fn)
            flags.append("no_predictions")
        elif tp + fn == 0:
            precision, recall = _ratio(tp, tp + fp), 0.0
            flags.append("no_examples")
        else:
            precision = _ratio(tp, tp + fp)
            recall = _ratio(tp, tp + fn)
        if tp + fn == 0 and "no_examples" not in flags:
            flags.append("no_examples")
        rows.append(CategoryMetrics(precision=precision, recall=recall,
                                    f1=f1_score(precision, recall),
                                    support=tp + fn, flags=tuple(flags)))
    accuracy = float(np.trace(counts)) / float(counts.sum())
    return MetricsReport(per_category=rows, accuracy=accuracy)


def _ratio(num, den):
    return float(num) / float(den) if den else 0.0


# ---------------------------------------------------------------------------
# ROC-AUC, one-vs-rest


@dataclass
class AucReport:
    per_category: list          # float or None per category
    macro: float
    skipped: tuple = ()


def _midranks(values):
    """1-based ranks with ties sharing their average rank."""
    order = np.argsort(values, kind="mergesort")
    ranks = np.empty(len(values), dtype=np.float64)
    i = 0
    while i < len(values):
        j = i
        while j + 1 < len(values) and values[order[j + 1]] == values[order[i]]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def roc_auc_ovr(scores, truths):
    """Macro one-vs-rest AUC from per-example category scores.

    Ties count one half, matching exhaustive pairwise comparison.
    Categories without both a positive and a negative example are skipped
    and flagged rather than silently averaged.
    """
    scores = np.asarray(scores, dtype=np.float64)
    truths = np.asarray(truths)
    if scores.ndim != 2 or scores.shape[0] != truths.shape[0]:
        raise UsageError("scores must be (n_examples, n_categories) aligned with truths")
    k = scores.shape[1]
    per, skipped = [], []
    for c in range(k):
        pos = truths == c
        n_pos = int(pos.sum())
        n_neg = int(len(truths) - n_pos)
        if n_pos == 0 or n_neg == 0:
            per.append(None)
            skipped.append(c)
            continue
        ranks = _midranks(scores[:, c])
        rank_sum = float(ranks[pos].sum())
        auc = (rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)
        per.append(auc)
    computed = [a for a in per if a is not None]
    if not computed:
        raise UsageError("no category had both positive and negative examples")
    return AucReport(per_category=per, macro=float(np.mean(computed)),
                     skipped=tuple(skipped))


# ---------------------------------------------------------------------------
# epoch traces and early stopping


@dataclass
class EpochTrace:
    epoch: int
    train_loss: float
    train_accuracy: float
    val_loss: float
    val_accuracy: float

    def __post_init__(self):
        if not (0.0 <= self.train_accuracy <= 1.0 and 0.0 <= self.val_accuracy <= 1.0):
            raise ConfigurationError("accuracies must lie in [0, 1]")
        if self.train_loss < 0 or self.val_loss < 0:
            raise ConfigurationError("losses must be non-negative")


@dataclass
class EarlyStopCfg:
    patience: int = 4
    max_epochs: int = 30
    min_delta: float = 0.0

    def __post_init__(self):
        if self.patience < 1:
            raise ConfigurationError("early-stop patience must be >= 1")
        if self.max_epochs < 1:
            raise ConfigurationError("max_epochs must be >= 1")


@dataclass
class EarlyStopDecision:
    stop: bool
    best_epoch: int


def early_stop(trace, cfg):
    """Decide whether to halt given the epoch trace so far.

    Halts once validation accuracy has not improved by more than
    cfg.min_delta for cfg.patience consecutive epochs, or at
    cfg.max_epochs.  Best epoch is the earliest validation-accuracy
    maximum.
    """
    if not trace:
        raise UsageError("early_stop needs a non-empty trace")
    best_epoch = trace[0].epoch
    best_acc = trace[0].val_accuracy
    stale = 0
    for entry in trace[1:]:
        if entry.val_accuracy > best_acc + cfg.min_delta:
            best_acc = entry.val_accuracy
            best_epoch = entry.epoch
            stale = 0
        else:
            stale += 1
    stop = stale >= cfg.patience or len(trace) >= cfg.max_epochs
    return EarlyStopDecision(stop=stop, best_epoch=best_epoch)


# ---------------------------------------------------------------------------
# CSV emission


def write_curves_csv(path, traces):
    """Write per-epoch loss/accuracy curves."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "train_loss", "train_acc", "val_loss", "val_acc"])
        for t in traces:
            writer.writerow([t.epoch, repr(float(t.train_loss)), repr(float(t.train_accuracy)),
                             repr(float(t.val_loss)), repr(float(t.val_accuracy))])


def write_metrics_csv(path, category_names, report):
    """Write per-category precision/recall/F1/support rows."""
    if len(category_names) != len(report.per_category):
        raise UsageError("category name count does not match report rows")
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["category", "precision", "recall", "f1", "support"])
        for name, row in zip(category_names, report.per_category):
            writer.writerow([name, repr(float(row.precision)), repr(float(row.recall)),
                             repr(float(row.f1)), row.support])


def write_confusion_csv(path, category_names, cm):
    """Write the raw confusion counts with named rows/columns."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["true\\predicted", *category_names])
        for name, row in zip(category_names, cm.counts):
            writer.writerow([name, *[int(v) for v in row]])


# ---------------------------------------------------------------------------
# synthetic dataset


_BASE_COLORS = np.array([
    [0.55, 0.25, 0.25],   # smooth, reddish
    [0.30, 0.55, 0.35],   # coarse stripes, greenish
    [0.25, 0.35, 0.60],   # fine stripes, bluish
    [0.60, 0.55, 0.25],   # one large blob, yellowish
    [0.50, 0.30, 0.55],   # many small blobs, purplish
])


def synth_dataset(per_category, categories=5, extent=32, seed=0):
    """Generate `categories * per_category` labeled patches.

    The five families are pairwise distinguishable twice over: by base
    color on raw pixels (so a linear model separates them) and by spatial
    texture (so the signal survives per-image channel standardization).
    Deterministic under `seed`.
    """
    if extent < 16:
        raise ConfigurationError(f"synthetic patch extent must be >= 16, got {extent}")
    if not 2 <= categories <= len(_BASE_COLORS):
        raise ConfigurationError(f"categories must be in [2, {len(_BASE_COLORS)}]")
    root = RandomStream(seed)
    patches = []
    for label in range(categories):
        for i in range(per_category):
            stream = root.child(label, i)
            pixels = _render_family(label, extent, stream)
            patches.append(ImagePatch(pixels=pixels, label=label,
                                      source_id=f"synth-{label}-{i:04d}"))
    return patches


def _render_family(label, extent, stream):
    yy, xx = np.mgrid[0:extent, 0:extent].astype(np.float64)
    if label == 0:
        gy, gx = stream.normal(2, scale=0.04)
        pattern = gy * (yy / extent - 0.5) + gx * (xx / extent - 0.5)
        noise_scale = 0.02
    elif label in (1, 2):
        period = 10.0 + 4.0 * stream.uniform() if label == 1 else 3.0 + 1.5 * stream.uniform()
        phase = 2.0 * np.pi * stream.uniform()
        coord = yy if stream.uniform() < 0.5 else xx
        pattern = 0.22 * np.sin(2.0 * np.pi * coord / period + phase)
        noise_scale = 0.03
    elif label == 3:
        cy = extent * (0.35 + 0.3 * stream.uniform())
        cx = extent * (0.35 + 0.3 * stream.uniform())
        radius = extent / 4.0 * (0.8 + 0.4 * stream.uniform())
        d2 = (yy - cy) ** 2 + (xx - cx) ** 2
        pattern = 0.30 * np.exp(-d2 / (2.0 * radius ** 2))
        noise_scale = 0.03
    else:
        pattern = np.zeros((extent, extent))
        n_blobs = int(stream.integers(8, 13))
        for b in range(n_blobs):
            cy = extent * stream.uniform()
            cx = extent * stream.uniform()
            radius = extent / 16.0 * (0.8 + 0.4 * stream.uniform())
            sign = 1.0 if b % 2 == 0 else -1.0
            d2 = (yy - cy) ** 2 + (xx - cx) ** 2
            pattern += sign * 0.30 * np.exp(-d2 / (2.0 * radius ** 2))
        noise_scale = 0.03
    base = _BASE_COLORS[label]
    noise = stream.normal((3, extent, extent), scale=noise_scale)
    pixels = base[:, None, None] + pattern[None, :, :] + noise
    return np.clip(pixels, 0.0, 1.0).astype(np.float32)
