"""How much weight two teachers put on the true label, compared sample by sample.

The headline number is mean_i log(f_a(x_i)[y_i] / f_b(x_i)[y_i]); with a the
dense teacher and b its pruned version, a non-negative value means the
pruned teacher's labels are the smoother ones.
"""
import csv
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from prunedistill.checkpoint import MaskedCheckpoint
from prunedistill.data import LabeledDataset
from prunedistill.errors import ConfigError, DataError
from prunedistill.losses import ALPHA, PROB_FLOOR, label_entropy, softmax
from prunedistill.network import predict_logits

log = logging.getLogger(__name__)

CSV_COLUMNS = ("sample_index", "true_label", "prob_a", "prob_b", "log_ratio")


@dataclass(frozen=True)
class SmoothnessReport:
    mean_log_ratio: float
    sample_index: np.ndarray
    true_label: np.ndarray
    prob_a: np.ndarray
    prob_b: np.ndarray
    log_ratio: np.ndarray
    ce_a: float
    ce_b: float
    true_weight_a: float
    true_weight_b: float
    entropy_a: float
    entropy_b: float
    alpha: float = ALPHA

    @property
    def per_sample(self) -> list[dict]:
        return [
            {
                "sample_index": int(i),
                "true_label": int(y),
                "prob_a": float(pa),
                "prob_b": float(pb),
                "log_ratio": float(r),
            }
            for i, y, pa, pb, r in zip(self.sample_index, self.true_label, self.prob_a, self.prob_b, self.log_ratio)
        ]

    def summary(self) -> dict:
        return {
            "mean_log_ratio": self.mean_log_ratio,
            "ce_a": self.ce_a,
            "ce_b": self.ce_b,
            "true_weight_a": self.true_weight_a,
            "true_weight_b": self.true_weight_b,
            "entropy_a": self.entropy_a,
            "entropy_b": self.entropy_b,
        }

    def to_csv(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="", encoding="utf-8") as f:
            writer = csv.DictWriter(f, fieldnames=CSV_COLUMNS)
            writer.writeheader()
            writer.writerows(self.per_sample)
        return path


def smoothness_from_probs(probs_a, probs_b, labels, sample_index=None, alpha: float = ALPHA) -> SmoothnessReport:
    probs_a = np.asarray(probs_a, dtype=np.float64)
    probs_b = np.asarray(probs_b, dtype=np.float64)
    labels = np.asarray(labels)
    if probs_a.shape != probs_b.shape:
        raise ConfigError(f"teachers disagree on output shape: {probs_a.shape} vs {probs_b.shape}")
    if len(labels) == 0:
        raise DataError("smoothness needs at least one sample")
    rows = np.arange(len(labels))
    pa = probs_a[rows, labels]
    pb = probs_b[rows, labels]
    log_a = np.log(np.maximum(pa, PROB_FLOOR))
    log_b = np.log(np.maximum(pb, PROB_FLOOR))
    # difference of logs: swapping a and b negates every term exactly
    ratio = log_a - log_b
    return SmoothnessReport(
        mean_log_ratio=float(np.mean(ratio)),
        sample_index=np.asarray(sample_index if sample_index is not None else rows),
        true_label=labels,
        prob_a=pa,
        prob_b=pb,
        log_ratio=ratio,
        ce_a=float(-np.mean(log_a)),
        ce_b=float(-np.mean(log_b)),
        true_weight_a=float(np.mean((1.0 - alpha) + alpha * pa)),
        true_weight_b=float(np.mean((1.0 - alpha) + alpha * pb)),
        entropy_a=float(np.mean(label_entropy(probs_a))),
        entropy_b=float(np.mean(label_entropy(probs_b))),
        alpha=alpha,
    )


def smoothness_report(
    teacher_a: MaskedCheckpoint,
    teacher_b: MaskedCheckpoint,
    data: LabeledDataset,
    split: str = "val",
    alpha: float = ALPHA,
) -> SmoothnessReport:
    """Compare two teachers, evaluated in eval mode with their masks applied, on one split."""
    if teacher_a.arch.num_classes != teacher_b.arch.num_classes:
        raise ConfigError(f"class counts differ: {teacher_a.arch.num_classes} vs {teacher_b.arch.num_classes}")
    images, labels = data.split(split)
    if len(labels) == 0:
        raise DataError(f"{data.name}: split {split!r} is empty")
    probs_a = softmax(predict_logits(teacher_a.arch, teacher_a.masked_params(), images))
    probs_b = softmax(predict_logits(teacher_b.arch, teacher_b.masked_params(), images))
    report = smoothness_from_probs(probs_a, probs_b, labels, data.indices(split), alpha)
    log.info(
        "smoothness on %s: mean log ratio %.5f (true-label prob %.4f vs %.4f)",
        split,
        report.mean_log_ratio,
        float(np.mean(report.prob_a)),
        float(np.mean(report.prob_b)),
    )
    return report
