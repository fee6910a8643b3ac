"""Evaluation metrics: sample accuracy, class-mean accuracy, confusion."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class EvalReport:
    acc_s: float                    # accuracy over all samples
    acc_c: float                    # mean of per-class accuracies
    confusion: np.ndarray           # (C, C) counts, rows = true class
    per_class_acc: np.ndarray       # NaN for classes absent from the split
    modality_mode: str = "both"
    config_hash: str = ""
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        per_class = [None if np.isnan(a) else float(a) for a in self.per_class_acc]
        return {"acc_s": self.acc_s, "acc_c": self.acc_c,
                "per_class": per_class,
                "confusion": self.confusion.tolist(),
                "modality": self.modality_mode,
                "config_hash": self.config_hash}


def compute_report(predictions, labels, num_classes: int,
                   modality_mode: str = "both", config_hash: str = "") -> EvalReport:
    """Classes with no test samples are excluded from the acc_c mean."""
    predictions = np.asarray(predictions, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    if predictions.shape != labels.shape or predictions.ndim != 1:
        raise ValueError(f"shape mismatch: {predictions.shape} vs {labels.shape}")
    if len(labels) == 0:
        raise ValueError("need at least one sample")
    if predictions.max() >= num_classes or labels.max() >= num_classes:
        raise ValueError("prediction/label out of class range")

    confusion = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(confusion, (labels, predictions), 1)
    counts = confusion.sum(axis=1)
    with np.errstate(invalid="ignore"):
        per_class = np.where(counts > 0, np.diag(confusion) / np.maximum(counts, 1), np.nan)
    acc_s = float(np.trace(confusion) / confusion.sum())
    acc_c = float(np.nanmean(per_class))
    return EvalReport(acc_s, acc_c, confusion, per_class, modality_mode, config_hash)
