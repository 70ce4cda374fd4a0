"""Pixel-level confusion counts, IoU and F1, pooled over a dataset."""
from __future__ import annotations

import csv
import os
from dataclasses import dataclass, asdict, field
from fractions import Fraction

import numpy as np

from wanseg.core.tensor import Tensor, no_grad
from wanseg.errors import ContractError

REPORT_FIELDS = ["dataset", "split", "method", "iou", "f1", "tp", "fp", "fn", "tn", "checkpoint_hash"]


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0

    def __post_init__(self):
        if min(self.tp, self.fp, self.fn, self.tn) < 0:
            raise ContractError("confusion counts must be non-negative")

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn, self.tn + other.tn)

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn


def confusion(pred_prob, mask, threshold: float = 0.5) -> ConfusionCounts:
    """Counts with ``prob >= threshold`` taken as positive."""
    p = pred_prob.data if isinstance(pred_prob, Tensor) else np.asarray(pred_prob)
    m = mask.data if isinstance(mask, Tensor) else np.asarray(mask)
    if p.shape != m.shape:
        raise ContractError(f"confusion shape mismatch: {p.shape} vs {m.shape}")
    if m.size and not np.all((m == 0) | (m == 1)):
        raise ContractError("mask must be binary")
    pred = p >= threshold
    gt = m.astype(bool)
    tp = int(np.count_nonzero(pred & gt))
    fp = int(np.count_nonzero(pred & ~gt))
    fn = int(np.count_nonzero(~pred & gt))
    return ConfusionCounts(tp, fp, fn, int(pred.size) - tp - fp - fn)


def iou_fraction(c: ConfusionCounts) -> Fraction:
    denom = c.tp + c.fp + c.fn
    return Fraction(1) if denom == 0 else Fraction(c.tp, denom)


def f1_fraction(c: ConfusionCounts) -> Fraction:
    denom = 2 * c.tp + c.fp + c.fn
    return Fraction(1) if denom == 0 else Fraction(2 * c.tp, denom)


def iou(c: ConfusionCounts) -> float:
    return float(iou_fraction(c))


def f1(c: ConfusionCounts) -> float:
    return float(f1_fraction(c))


@dataclass
class EvalReport:
    dataset: str
    split: str
    method: str
    counts: ConfusionCounts
    checkpoint_hash: str = ""
    extra: dict = field(default_factory=dict)

    @property
    def iou(self) -> float:
        return iou(self.counts)

    @property
    def f1(self) -> float:
        return f1(self.counts)

    def row(self) -> dict:
        c = asdict(self.counts)
        return {"dataset": self.dataset, "split": self.split, "method": self.method,
                "iou": f"{self.iou:.6f}", "f1": f"{self.f1:.6f}", **c,
                "checkpoint_hash": self.checkpoint_hash}

    def append_csv(self, path) -> None:
        new = not os.path.exists(path) or os.path.getsize(path) == 0
        with open(path, "a", newline="", encoding="utf-8") as fh:
            writer = csv.DictWriter(fh, fieldnames=REPORT_FIELDS)
            if new:
                writer.writeheader()
            writer.writerow(self.row())


def read_reports(path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != REPORT_FIELDS:
            return []
        rows = []
        for r in reader:
            r["iou"] = float(r["iou"])
            r["f1"] = float(r["f1"])
            rows.append(r)
        return rows


def predict(generator, images: np.ndarray, batch_size: int = 16) -> np.ndarray:
    """Segmentation probabilities for an (N, 3, H, W) array, evaluated in fixed batch order."""
    dtype = next(generator.parameters()).dtype
    outs = []
    with no_grad():
        for start in range(0, len(images), batch_size):
            _, seg, _ = generator(Tensor(images[start:start + batch_size].astype(dtype, copy=False)))
            outs.append(seg.data)
    if not outs:
        return np.zeros((0, 1) + images.shape[2:], dtype=dtype)
    return np.concatenate(outs)


def evaluate_dataset(generator, dataset, dataset_name: str = "", split: str = "", method: str = "",
                     checkpoint_hash: str = "", threshold: float = 0.5, batch_size: int = 16) -> EvalReport:
    """Micro-averaged metrics: counts are pooled over every pixel before IoU/F1 are taken."""
    if len(dataset) == 0:
        raise ContractError("cannot evaluate an empty dataset")
    masks = dataset.masks
    if masks is None:
        raise ContractError("evaluation needs dense masks for every sample")
    probs = predict(generator, dataset.images, batch_size)
    total = ConfusionCounts()
    for p, m in zip(probs, masks):
        total = total + confusion(p, m, threshold)
    return EvalReport(dataset_name, split, method, total, checkpoint_hash)
