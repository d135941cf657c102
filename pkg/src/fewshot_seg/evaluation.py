"""mIoU evaluation, reports and overlay rendering."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from .io import write_ppm
from .validation import DimensionError

log = logging.getLogger(__name__)

OVERLAY_COLOR = np.array([1.0, 0.0, 0.0])
ACCUMULATION = "per-class summed intersection / summed union over episodes"


@dataclass
class EvalReport:
    class_ids: list
    intersection: dict
    union: dict
    iou: dict
    mean_iou: float
    episodes: int
    skipped: int = 0
    config_hash: str = ""
    seed: int = 0
    wall_clock: float = 0.0
    accumulation: str = ACCUMULATION
    extra: dict = field(default_factory=dict)

    def to_dict(self):
        d = asdict(self)
        d["intersection"] = {str(k): v for k, v in self.intersection.items()}
        d["union"] = {str(k): v for k, v in self.union.items()}
        d["iou"] = {str(k): v for k, v in self.iou.items()}
        return d


def compute_miou(predictions, ground_truths, class_ids, novel_classes=None, config_hash="", seed=0):
    """Accumulate intersections and unions per class, then average IoU over classes.

    Episodes whose union is empty are skipped (counted in ``skipped``).
    ``novel_classes`` restricts the mean; by default every class seen counts.
    """
    if not (len(predictions) == len(ground_truths) == len(class_ids)):
        raise DimensionError("predictions, ground truths and class ids must align")
    inter, union = {}, {}
    skipped = 0
    for pred, gt, c in zip(predictions, ground_truths, class_ids):
        pred = np.asarray(pred, dtype=bool)
        gt = np.asarray(gt, dtype=bool)
        if pred.shape != gt.shape:
            raise DimensionError(f"prediction {pred.shape} vs ground truth {gt.shape}")
        u = int((pred | gt).sum())
        c = int(c)
        if u == 0:
            skipped += 1
            log.warning("class %d: empty union, episode skipped", c)
            continue
        inter[c] = inter.get(c, 0) + int((pred & gt).sum())
        union[c] = union.get(c, 0) + u
    classes = sorted(union) if novel_classes is None else sorted(int(c) for c in novel_classes if int(c) in union)
    iou = {c: inter[c] / union[c] for c in sorted(union)}
    mean = float(np.mean([iou[c] for c in classes])) if classes else 0.0
    return EvalReport(classes, inter, union, iou, mean, len(class_ids), skipped, config_hash, seed)


def render_overlay(image, mask, path=None, color=OVERLAY_COLOR, alpha=0.5):
    """Blend ``color`` over masked pixels at ``alpha``; writes a PPM when ``path`` is given."""
    image = np.asarray(image, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != image.shape[:2]:
        raise DimensionError(f"mask {mask.shape} does not match image {image.shape[:2]}")
    out = image.copy()
    out[mask] = (1.0 - alpha) * image[mask] + alpha * np.asarray(color)
    if path is not None:
        write_ppm(path, out)
    return out


def format_table(rows, columns):
    """Aligned plain-text table from a list of dicts."""
    cells = [[str(c) for c in columns]]
    for r in rows:
        cells.append([f"{r[c]:.2f}" if isinstance(r[c], float) else str(r[c]) for c in columns])
    widths = [max(len(row[i]) for row in cells) for i in range(len(columns))]
    lines = ["  ".join(cell.rjust(w) if i else cell.ljust(w) for i, (cell, w) in enumerate(zip(row, widths)))
             for row in cells]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines)
