"""Detection metrics (COCO-style AP) and attention-map dumps."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np

from .setmatch import Box, iou

# mAP_total averages AP over these IoU thresholds.
IOU_THRESHOLDS = [round(0.5 + 0.05 * i, 2) for i in range(10)]


class CountMismatch(ValueError):
    pass


class NotRowStochastic(ValueError):
    pass


class BadLayout(ValueError):
    pass


@dataclass
class EvalReport:
    map_total: float
    ap50: float
    ap75: float
    per_threshold: dict  # threshold -> AP
    counts: dict  # threshold -> {"tp": int, "fp": int, "fn": int}

    def to_json(self) -> str:
        return json.dumps(
            {
                "map_total": self.map_total,
                "ap50": self.ap50,
                "ap75": self.ap75,
                "per_threshold": {f"{t:.2f}": ap for t, ap in self.per_threshold.items()},
                "counts": {f"{t:.2f}": c for t, c in self.counts.items()},
            },
            sort_keys=True,
            indent=2,
        )


def average_precision(dets, gts, iou_thresh: float, counts=None) -> float:
    """101-point interpolated AP over a set of images.

    dets: list of (score, image_id, Box), any order; ranked by descending
    score with insertion order breaking ties.  gts: dict image_id ->
    list of Box.  Images with no ground truth contribute false positives
    but no recall mass; with zero ground truths overall AP is 0.
    """
    n_gt = sum(len(v) for v in gts.values())
    order = sorted(range(len(dets)), key=lambda i: (-dets[i][0], i))
    matched = {img: [False] * len(boxes) for img, boxes in gts.items()}
    tp_flags = []
    for i in order:
        _, img, box = dets[i]
        best_iou, best_j = 0.0, -1
        for j, gt_box in enumerate(gts.get(img, [])):
            if matched.get(img, [])[j]:
                continue
            v = iou(box, gt_box)
            if v > best_iou:
                best_iou, best_j = v, j
        if best_j >= 0 and best_iou >= iou_thresh:
            matched[img][best_j] = True
            tp_flags.append(True)
        else:
            tp_flags.append(False)

    tp_cum = np.cumsum(tp_flags) if tp_flags else np.array([])
    if counts is not None:
        tp = int(tp_cum[-1]) if len(tp_cum) else 0
        counts["tp"] = tp
        counts["fp"] = len(tp_flags) - tp
        counts["fn"] = n_gt - tp
    if n_gt == 0:
        return 0.0
    if not tp_flags:
        return 0.0
    recalls = tp_cum / n_gt
    precisions = tp_cum / np.arange(1, len(tp_flags) + 1)
    # precision envelope, then 101-point interpolation
    for i in range(len(precisions) - 2, -1, -1):
        precisions[i] = max(precisions[i], precisions[i + 1])
    ap = 0.0
    for r in np.linspace(0.0, 1.0, 101):
        idx = np.searchsorted(recalls, r, side="left")
        ap += precisions[idx] if idx < len(precisions) else 0.0
    return ap / 101.0


def evaluate(detections, gts_per_image) -> EvalReport:
    """Aggregate AP report over the "moving" class.

    detections: dict image_id -> list of (score, Box), already filtered
    to confident predictions.  gts_per_image: dict image_id -> list of
    Box.  The two key sets must match.
    """
    if set(detections.keys()) != set(gts_per_image.keys()):
        raise CountMismatch(
            f"{len(detections)} detection images vs {len(gts_per_image)} gt images"
        )
    flat = []
    for img in sorted(detections.keys()):
        for score, box in detections[img]:
            if not np.isfinite(score):
                raise ValueError("non-finite detection score")
            flat.append((score, img, box))
    gts = {img: list(gts_per_image[img]) for img in sorted(gts_per_image.keys())}

    per_threshold = {}
    counts = {}
    for t in IOU_THRESHOLDS:
        c: dict = {}
        per_threshold[t] = average_precision(flat, gts, t, counts=c)
        counts[t] = c
    map_total = float(np.mean([per_threshold[t] for t in IOU_THRESHOLDS]))
    return EvalReport(
        map_total=map_total,
        ap50=per_threshold[0.5],
        ap75=per_threshold[0.75],
        per_threshold=per_threshold,
        counts=counts,
    )


def dump_attention(w: np.ndarray, grid, out_dir: str, prefix: str = "query") -> list:
    """Write each attention row as a min-max normalized binary PGM image.

    grid is (rows, cols) with rows*cols == w.shape[1].  Returns the list
    of written paths.
    """
    w = np.asarray(w, dtype=np.float64)
    if w.ndim != 2:
        raise BadLayout(f"attention map must be 2-D, got {w.shape}")
    rows, cols = grid
    if rows * cols != w.shape[1]:
        raise BadLayout(f"grid {grid} incompatible with {w.shape[1]} keys")
    if np.max(np.abs(w.sum(axis=1) - 1.0)) > 1e-6:
        raise NotRowStochastic("attention rows do not sum to 1")
    os.makedirs(out_dir, exist_ok=True)
    paths = []
    for q in range(w.shape[0]):
        img = w[q].reshape(rows, cols)
        lo, hi = img.min(), img.max()
        norm = (img - lo) / (hi - lo) if hi > lo else np.zeros_like(img)
        data = np.round(norm * 255.0).astype(np.uint8)
        path = os.path.join(out_dir, f"{prefix}_{q:03d}.pgm")
        with open(path, "wb") as f:
            f.write(f"P5\n{cols} {rows}\n255\n".encode("ascii"))
            f.write(data.tobytes())
        paths.append(path)
    return paths


def read_pgm(path: str) -> np.ndarray:
    with open(path, "rb") as f:
        blob = f.read()
    parts = blob.split(b"\n", 3)
    if parts[0] != b"P5":
        raise BadLayout("not a binary PGM")
    cols, rows = (int(x) for x in parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8, count=rows * cols).reshape(rows, cols)
