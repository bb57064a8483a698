"""Evaluation: confusion-matrix class IoU / MIoU, per-image foreground IoU / FIoU, reports and tables."""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional, Sequence

import numpy as np
import torch

from .data import IGNORE

log = logging.getLogger(__name__)


def _np(a) -> np.ndarray:
    if isinstance(a, torch.Tensor):
        a = a.detach().cpu().numpy()
    return np.asarray(a)


class ConfusionAccumulator:
    """C x C counts indexed [ground truth, prediction]; ignored ground-truth pixels are skipped."""

    def __init__(self, num_classes: int, ignore_index: int = IGNORE):
        self.num_classes = num_classes
        self.ignore_index = ignore_index
        self.matrix = np.zeros((num_classes, num_classes), dtype=np.int64)

    def update(self, pred, gt) -> "ConfusionAccumulator":
        pred, gt = _np(pred).ravel().astype(np.int64), _np(gt).ravel().astype(np.int64)
        if pred.shape != gt.shape:
            raise ValueError("prediction and ground truth sizes differ")
        keep = gt != self.ignore_index
        pred, gt = pred[keep], gt[keep]
        n = self.num_classes
        if gt.size and (gt.min() < 0 or gt.max() >= n or pred.min() < 0 or pred.max() >= n):
            raise ValueError("class index out of range")
        self.matrix += np.bincount(n * gt + pred, minlength=n * n).reshape(n, n)
        return self

    def merge(self, other: "ConfusionAccumulator") -> "ConfusionAccumulator":
        out = ConfusionAccumulator(self.num_classes, self.ignore_index)
        out.matrix = self.matrix + other.matrix
        return out

    @property
    def total(self) -> int:
        return int(self.matrix.sum())

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            csv.writer(fh).writerows(self.matrix.tolist())

    @classmethod
    def from_csv(cls, path) -> "ConfusionAccumulator":
        with open(path, newline="") as fh:
            rows = [[int(v) for v in row] for row in csv.reader(fh) if row]
        acc = cls(len(rows))
        acc.matrix = np.array(rows, dtype=np.int64)
        return acc


def class_iou(confusion) -> List[Optional[float]]:
    """IoU_c = TP / (TP + FP + FN); classes that never occur (in gt or prediction) are None."""
    m = confusion.matrix if isinstance(confusion, ConfusionAccumulator) else np.asarray(confusion)
    tp = np.diag(m).astype(np.float64)
    union = m.sum(0) + m.sum(1) - np.diag(m)
    return [None if u == 0 else float(t / u) for t, u in zip(tp, union)]


def mean_iou(ious: Sequence[Optional[float]]) -> Optional[float]:
    present = [v for v in ious if v is not None]
    return float(np.mean(present)) if present else None


def foreground_iou(pred, gt, ignore_index: int = IGNORE) -> Optional[float]:
    """Binary foreground (class >= 1) IoU of one image; None when both foregrounds are empty."""
    pred, gt = _np(pred), _np(gt)
    keep = gt != ignore_index
    p = (pred >= 1) & keep
    g = (gt >= 1) & keep
    union = int((p | g).sum())
    if union == 0:
        return None
    return int((p & g).sum()) / union


def _class_mean_iou(pred, gt, num_classes, ignore_index=IGNORE) -> Optional[float]:
    acc = ConfusionAccumulator(num_classes, ignore_index).update(pred, gt)
    present = [c for c in range(1, num_classes) if acc.matrix[c].sum() > 0]
    ious = class_iou(acc)
    vals = [ious[c] for c in present]
    return float(np.mean(vals)) if vals else None


def fiou(preds: Sequence, gts: Sequence, mode: str = "binary", num_classes: Optional[int] = None):
    """(per-image IoU list with None for skipped images, FIoU over the scored ones).

    ``mode="class_mean"`` scores each image by the mean IoU of the object classes in
    its ground truth instead of the binary foreground IoU.
    """
    if len(preds) != len(gts):
        raise ValueError(f"{len(preds)} predictions for {len(gts)} ground truths")
    if mode == "binary":
        scores = [foreground_iou(p, g) for p, g in zip(preds, gts)]
    elif mode == "class_mean":
        if num_classes is None:
            raise ValueError("class_mean mode needs num_classes")
        scores = [_class_mean_iou(p, g, num_classes) for p, g in zip(preds, gts)]
    else:
        raise ValueError(f"unknown FIoU mode {mode!r}")
    scored = [s for s in scores if s is not None]
    return scores, (float(np.mean(scored)) if scored else None)


@dataclass
class EvalReport:
    user: str
    class_iou: List[Optional[float]]
    miou: Optional[float]
    per_image: Dict[str, Optional[float]]
    fiou: Optional[float]
    confusion: np.ndarray
    mean_entropy: Optional[float] = None
    tag: str = ""

    @property
    def n_images(self) -> int:
        return len(self.per_image)

    def to_dict(self) -> dict:
        return {
            "user": self.user, "tag": self.tag, "miou": self.miou, "fiou": self.fiou,
            "class_iou": self.class_iou, "per_image": self.per_image,
            "mean_entropy": self.mean_entropy, "confusion": self.confusion.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        return cls(user=d["user"], class_iou=d["class_iou"], miou=d["miou"], per_image=d["per_image"],
                   fiou=d["fiou"], confusion=np.array(d["confusion"], dtype=np.int64),
                   mean_entropy=d.get("mean_entropy"), tag=d.get("tag", ""))


def evaluate(preds: Mapping[str, object], gts: Mapping[str, object], num_classes: int,
             user: str = "user0", entropies: Optional[Mapping[str, float]] = None,
             fiou_mode: str = "binary", tag: str = "") -> EvalReport:
    ids = sorted(gts)
    missing = [i for i in ids if i not in preds]
    if missing:
        raise ValueError(f"no prediction for {missing[:3]}")
    acc = ConfusionAccumulator(num_classes)
    for i in ids:
        acc.update(preds[i], gts[i])
    ious = class_iou(acc)
    scores, f = fiou([preds[i] for i in ids], [gts[i] for i in ids], fiou_mode, num_classes)
    ent = float(np.mean([entropies[i] for i in ids])) if entropies else None
    return EvalReport(user, ious, mean_iou(ious), dict(zip(ids, scores)), f, acc.matrix.copy(), ent, tag)


def _fmt(v: Optional[float], scale: float = 100.0) -> str:
    return "-" if v is None else f"{v * scale:.2f}"


def render_table(rows: Sequence, columns: Sequence[str], title: str = "", label: str = "Method",
                 mean_column: bool = True) -> str:
    """Rows are (label, {column: value}) pairs; values in [0, 1] are printed as percentages."""
    header = [label] + [str(c) for c in columns] + (["Mean"] if mean_column else [])
    body = []
    for name, values in rows:
        cells = [values.get(c) for c in columns]
        line = [str(name)] + [_fmt(v) for v in cells]
        if mean_column:
            present = [v for v in cells if v is not None]
            line.append(_fmt(float(np.mean(present)) if present else None))
        body.append(line)
    widths = [max(len(r[i]) for r in [header] + body) for i in range(len(header))]
    fmt = lambda r: " | ".join(c.rjust(w) for c, w in zip(r, widths))
    out = [title] if title else []
    out += [fmt(header), "-+-".join("-" * w for w in widths)] + [fmt(r) for r in body]
    return "\n".join(out)


def make_report(reports: Iterable[EvalReport], class_names: Optional[Sequence[str]] = None) -> dict:
    """Per-user FIoU / MIoU with a Mean column plus a class-wise IoU table per user."""
    kept = []
    for r in reports:
        if r.n_images == 0:
            log.warning("user %s has no evaluated images; omitted from the report", r.user)
            continue
        kept.append(r)
    users = [r.user for r in kept]
    fiou_row = {r.user: r.fiou for r in kept}
    miou_row = {r.user: r.miou for r in kept}

    def _mean(row):
        vals = [v for v in row.values() if v is not None]
        return float(np.mean(vals)) if vals else None

    n_cls = len(kept[0].class_iou) if kept else 0
    names = list(class_names) if class_names else [str(c) for c in range(n_cls)]
    class_rows = [(r.user, {names[c]: r.class_iou[c] for c in range(n_cls)}) for r in kept]
    tables = {
        "summary": render_table([("FIoU", fiou_row), ("MIoU", miou_row)], users, label="Metric"),
        "class_iou": render_table(class_rows, names, label="User"),
    }
    return {
        "users": users,
        "fiou": fiou_row, "miou": miou_row,
        "mean_fiou": _mean(fiou_row), "mean_miou": _mean(miou_row),
        "reports": [r.to_dict() for r in kept],
        "tables": tables,
    }


def write_report(report: dict, out_dir, name: str = "report") -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / f"{name}.json"
    path.write_text(json.dumps(report, indent=1, sort_keys=True) + "\n")
    (out_dir / f"{name}.txt").write_text("\n\n".join(report["tables"].values()) + "\n")
    for r in report["reports"]:
        acc = ConfusionAccumulator(len(r["confusion"]))
        acc.matrix = np.array(r["confusion"], dtype=np.int64)
        acc.to_csv(out_dir / f"{name}_confusion_{r['user']}.csv")
    return path
