"""Classification metrics: confusion matrices, accuracy, classwise quality.

Class labels are 1-based everywhere in this module's interfaces. A
confusion matrix counts reference classes along rows and predicted
classes along columns; matrices merge by elementwise addition, which is
how several training runs pool into one joint matrix.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .autodiff import RawExec
from .data import resample_samples
from .errors import ContractError, DataError
from .model import class_name, forward_on_executor
from .ops import softmax


class QualityValue(NamedTuple):
    """Classwise quality percent; `undefined` marks an empty denominator."""

    percent: float
    undefined: bool


@dataclass(frozen=True)
class ConfusionMatrix:
    """N x N counts, rows = reference class, columns = predicted class."""

    counts: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.counts)
        if c.ndim != 2 or c.shape[0] != c.shape[1] or c.shape[0] < 1:
            raise ContractError(f"confusion matrix must be square, got {c.shape}")
        if not np.issubdtype(c.dtype, np.integer):
            raise ContractError("confusion matrix holds integer counts")
        if np.any(c < 0):
            raise ContractError("confusion matrix counts must be non-negative")
        object.__setattr__(self, "counts", c.astype(np.int64))

    @property
    def n_classes(self):
        return self.counts.shape[0]

    @property
    def total(self):
        return int(self.counts.sum())

    def __add__(self, other):
        if self.n_classes != other.n_classes:
            raise ContractError("cannot merge matrices of different sizes")
        return ConfusionMatrix(self.counts + other.counts)

    def row_normalized(self):
        """Rows as percentages; empty rows stay all-zero."""
        sums = self.counts.sum(axis=1, keepdims=True)
        out = np.zeros(self.counts.shape, dtype=np.float64)
        nonempty = sums[:, 0] > 0
        out[nonempty] = 100.0 * self.counts[nonempty] / sums[nonempty]
        return out


def _index(label):
    return label.index if hasattr(label, "index") else int(label)


def confusion(predictions, references, n_classes):
    """Tally predictions against references into an N x N matrix."""
    preds = [_index(p) for p in predictions]
    refs = [_index(r) for r in references]
    if len(preds) != len(refs):
        raise ContractError(
            f"{len(preds)} predictions vs {len(refs)} references")
    counts = np.zeros((n_classes, n_classes), dtype=np.int64)
    for r, p in zip(refs, preds):
        if not (1 <= r <= n_classes and 1 <= p <= n_classes):
            raise ContractError(
                f"label pair ({r}, {p}) outside [1, {n_classes}]")
        counts[r - 1, p - 1] += 1
    return ConfusionMatrix(counts)


def overall_accuracy(cm: ConfusionMatrix):
    """Percent of correctly classified samples: 100 * trace / total."""
    if cm.total == 0:
        raise ContractError("overall accuracy of an empty matrix is undefined")
    return 100.0 * float(np.trace(cm.counts)) / cm.total


def classwise_quality(cm: ConfusionMatrix, class_index):
    """Quality = 100 * TP / (TP + FN + FP) for a 1-based class index.

    A class that never appears and is never predicted has denominator 0;
    that comes back as 0.0 with the undefined flag set.
    """
    if not 1 <= class_index <= cm.n_classes:
        raise ContractError(
            f"class index {class_index} outside [1, {cm.n_classes}]")
    i = class_index - 1
    tp = int(cm.counts[i, i])
    fn = int(cm.counts[i].sum()) - tp
    fp = int(cm.counts[:, i].sum()) - tp
    denom = tp + fn + fp
    if denom == 0:
        return QualityValue(0.0, True)
    return QualityValue(100.0 * tp / denom, False)


@dataclass(frozen=True)
class MetricsReport:
    """Metrics of one or several runs over the same test set."""

    oa: float
    oa_sigma: float
    sigma_defined: bool
    quality: tuple
    matrix: ConfusionMatrix
    runs: int
    class_names: tuple
    run_oas: tuple

    def __post_init__(self):
        if not 0.0 <= self.oa <= 100.0:
            raise ContractError(f"OA {self.oa} outside [0, 100]")


def _names(n, class_names):
    if class_names is None:
        return tuple(class_name(i, n) for i in range(1, n + 1))
    if len(class_names) != n:
        raise ContractError(
            f"{len(class_names)} class names for {n} classes")
    return tuple(class_names)


def report_from_matrix(cm: ConfusionMatrix, class_names=None, runs=1,
                       run_oas=None):
    names = _names(cm.n_classes, class_names)
    oa = overall_accuracy(cm)
    run_oas = tuple(float(x) for x in (run_oas if run_oas is not None else [oa]))
    quality = tuple(classwise_quality(cm, i) for i in range(1, cm.n_classes + 1))
    if len(run_oas) >= 2:
        sigma, defined = float(np.std(run_oas, ddof=1)), True
    else:
        sigma, defined = 0.0, False
    return MetricsReport(oa=oa, oa_sigma=sigma, sigma_defined=defined,
                         quality=quality, matrix=cm, runs=runs,
                         class_names=names, run_oas=run_oas)


def predict_samples(params, model_config, samples, gsd=None):
    """1-based predicted class index per sample, in sample order."""
    if gsd is not None:
        samples = resample_samples(samples, gsd)
    preds = []
    for smp in samples:
        scores, _ = forward_on_executor(RawExec(), smp.image.pixels, params,
                                        model_config)
        preds.append(int(np.argmax(softmax(scores))) + 1)
    return preds


def score_samples(params, model_config, samples, gsd=None, class_names=None):
    """Run the model over labeled samples and compute a single-run report."""
    if not samples:
        raise ContractError("cannot score an empty sample list")
    preds = predict_samples(params, model_config, samples, gsd=gsd)
    refs = [s.label.index for s in samples]
    cm = confusion(preds, refs, model_config.class_count)
    return report_from_matrix(cm, class_names=class_names)


def aggregate_runs(reports):
    """Pool runs: mean OA, sample sigma (k - 1), quality on the joint matrix."""
    if not reports:
        raise ContractError("need at least one run to aggregate")
    n = reports[0].matrix.n_classes
    names = reports[0].class_names
    for r in reports:
        if r.matrix.n_classes != n:
            raise ContractError("runs disagree on the class count")
    joint = reports[0].matrix
    oas = list(reports[0].run_oas)
    for r in reports[1:]:
        joint = joint + r.matrix
        oas.extend(r.run_oas)
    if len(oas) >= 2:
        sigma, defined = float(np.std(oas, ddof=1)), True
    else:
        sigma, defined = 0.0, False
    quality = tuple(classwise_quality(joint, i) for i in range(1, n + 1))
    return MetricsReport(oa=float(np.mean(oas)), oa_sigma=sigma,
                         sigma_defined=defined, quality=quality, matrix=joint,
                         runs=len(oas), class_names=names, run_oas=tuple(oas))


def import_predictions(path, samples, classes):
    """Read a `image_id,predicted_class` CSV and align it to `samples`.

    Returns (references, predictions) as 1-based index lists covering the
    file's rows in order. Ids must match sample source ids; classes must
    be in the dataset's class list. An empty file yields empty lists.
    """
    by_id = {}
    for smp in samples:
        if smp.source_id in by_id:
            raise DataError(f"duplicate sample id {smp.source_id!r} in test set")
        by_id[smp.source_id] = smp
    classes = tuple(classes)
    refs, preds = [], []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is not None:
            need = {"image_id", "predicted_class"}
            if not need.issubset(reader.fieldnames):
                raise DataError(
                    f"{path}: header must contain {sorted(need)}, "
                    f"got {reader.fieldnames}")
            seen = set()
            for rowno, row in enumerate(reader, start=2):
                image_id = (row["image_id"] or "").strip()
                pred_name = (row["predicted_class"] or "").strip()
                if image_id not in by_id:
                    raise DataError(f"{path}:{rowno}: unknown image id {image_id!r}")
                if image_id in seen:
                    raise DataError(f"{path}:{rowno}: duplicate image id {image_id!r}")
                if pred_name not in classes:
                    raise DataError(f"{path}:{rowno}: unknown class {pred_name!r}")
                seen.add(image_id)
                refs.append(by_id[image_id].label.index)
                preds.append(classes.index(pred_name) + 1)
    return refs, preds
