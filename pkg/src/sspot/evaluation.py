"""Detections from scorer maps, greedy IOU matching, per-class AP and mAP."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Sequence

import numpy as np

from .geometry import AnchorGrid, Box, decode_grid, iou
from .losses import OBJ

IOU_THRESHOLDS = (0.1, 0.5)


@dataclass(frozen=True)
class Detection:
    box: Box
    confidence: float
    class_probs: tuple[float, ...]

    @property
    def class_id(self) -> int:
        return self.box.class_id


def extract_detections(
    class_probs: np.ndarray,
    obj_probs: np.ndarray,
    box_params: np.ndarray,
    grid: AnchorGrid,
    conf_floor: float = 0.0,
    frames: Sequence[int] | None = None,
) -> list[list[Detection]]:
    """One candidate per cell and labeled frame, kept when p(obj) >= conf_floor.

    Inputs are the [K|2|4, T, rows, cols] head arrays. ``frames`` names the
    source frame of each time slot (defaults to 0..T-1).
    """
    class_probs, obj_probs, box_params = (np.asarray(a) for a in (class_probs, obj_probs, box_params))
    t = obj_probs.shape[1]
    if box_params.shape[2:] != (grid.rows, grid.cols):
        raise ValueError(f"head maps {list(box_params.shape)} do not match a {grid.rows}x{grid.cols} grid")
    frames = list(range(t)) if frames is None else list(frames)
    xywh = decode_grid(box_params, grid)
    labels = np.argmax(class_probs, axis=0)
    out: list[list[Detection]] = []
    for k in range(t):
        dets = []
        for r in range(grid.rows):
            for c in range(grid.cols):
                conf = float(obj_probs[OBJ, k, r, c])
                if conf < conf_floor:
                    continue
                x, y, w, h = (float(v) for v in xywh[:, k, r, c])
                box = Box(x, y, w, h, int(labels[k, r, c]), frames[k])
                dets.append(Detection(box, conf, tuple(float(p) for p in class_probs[:, k, r, c])))
        out.append(dets)
    return out


def _rank(dets: Sequence[Detection]) -> list[Detection]:
    # ties broken on geometry so the order never depends on input order
    return sorted(dets, key=lambda d: (-d.confidence, d.box.x, d.box.y, d.box.w, d.box.h, d.box.class_id))


def match_detections(dets: Sequence[Detection], gts: Sequence[Box], iou_thresh: float) -> list[tuple[Detection, bool]]:
    """Greedy matching by descending confidence; each GT can be claimed once.

    Returns (detection, is_true_positive) pairs in ranked order.
    """
    free = list(gts)
    result = []
    for det in _rank(dets):
        best, best_iou = None, -1.0
        for j, gt in enumerate(free):
            v = iou(det.box, gt)
            if v >= iou_thresh and v > best_iou:
                best, best_iou = j, v
        if best is None:
            result.append((det, False))
        else:
            free.pop(best)
            result.append((det, True))
    return result


def average_precision(matches: Sequence[tuple[float, bool]], n_gt: int) -> float:
    """All-points interpolated area under the precision-recall curve.

    ``matches`` holds (confidence, is_tp) pairs. The curve has one point per
    distinct confidence, so detections with equal confidence enter together
    and input order never matters. Arithmetic is exact (rationals); the
    result is the nearest float.
    """
    if n_gt < 0:
        raise ValueError("n_gt must be >= 0")
    if n_gt == 0:
        return 1.0 if not matches else 0.0
    if not matches:
        return 0.0
    ranked = sorted(((float(c), bool(t)) for c, t in matches), key=lambda m: -m[0])
    points: list[tuple[Fraction, Fraction]] = []  # (recall, precision) per threshold
    tp = fp = 0
    for i, (conf, is_tp) in enumerate(ranked):
        tp += is_tp
        fp += not is_tp
        if i + 1 == len(ranked) or ranked[i + 1][0] != conf:
            points.append((Fraction(tp, n_gt), Fraction(tp, tp + fp)))
    ap = Fraction(0)
    best = Fraction(0)
    # walk from high recall to low, carrying the precision envelope
    for k in range(len(points) - 1, -1, -1):
        recall, precision = points[k]
        best = max(best, precision)
        prev = points[k - 1][0] if k else Fraction(0)
        ap += (recall - prev) * best
    return float(ap)


@dataclass
class EvalReport:
    class_names: list[str]
    ap: dict[float, dict[str, float]] = field(default_factory=dict)
    mean_ap: dict[float, float] = field(default_factory=dict)
    gt_counts: dict[str, int] = field(default_factory=dict)
    det_counts: dict[str, int] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "iou": {
                f"{thr:g}": {"per_class": dict(self.ap[thr]), "mAP": self.mean_ap[thr]} for thr in sorted(self.ap)
            },
            "counts": {"gt": dict(self.gt_counts), "detections": dict(self.det_counts)},
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def table(self) -> str:
        thrs = sorted(self.ap)
        head = "class".ljust(10) + "".join(f"AP@{t:g}".rjust(10) for t in thrs) + "n_gt".rjust(7)
        lines = [head]
        for name in self.class_names:
            row = name.ljust(10) + "".join(f"{100 * self.ap[t][name]:10.2f}" for t in thrs)
            lines.append(row + f"{self.gt_counts.get(name, 0):7d}")
        lines.append("mAP".ljust(10) + "".join(f"{100 * self.mean_ap[t]:10.2f}" for t in thrs))
        return "\n".join(lines)


REPORT_SCHEMA = {
    "type": "object",
    "required": ["iou"],
    "properties": {
        "iou": {
            "type": "object",
            "patternProperties": {
                "^[0-9.]+$": {
                    "type": "object",
                    "required": ["per_class", "mAP"],
                    "properties": {
                        "per_class": {"type": "object", "additionalProperties": {"type": "number", "minimum": 0, "maximum": 1}},
                        "mAP": {"type": "number", "minimum": 0, "maximum": 1},
                    },
                }
            },
            "additionalProperties": False,
        }
    },
}


def mean_average_precision(
    detections: Sequence[Sequence[Detection]],
    ground_truth: Sequence[Sequence[Box]],
    class_names: Sequence[str],
    thresholds: Sequence[float] = IOU_THRESHOLDS,
) -> EvalReport:
    """Per-class AP pooled over frames, and their unweighted mean.

    ``detections[i]`` and ``ground_truth[i]`` belong to the same frame.
    The mean runs over classes that occur in the ground truth.
    """
    if not class_names:
        raise ValueError("need at least one class")
    if len(detections) != len(ground_truth):
        raise ValueError("detections and ground truth must list the same frames")
    report = EvalReport(list(class_names))
    for cid, name in enumerate(class_names):
        report.gt_counts[name] = sum(1 for gts in ground_truth for g in gts if g.class_id == cid)
        report.det_counts[name] = sum(1 for ds in detections for d in ds if d.class_id == cid)
    present = [n for n in class_names if report.gt_counts[n] > 0] or list(class_names)
    for thr in thresholds:
        per_class = {}
        for cid, name in enumerate(class_names):
            pairs = []
            for dets, gts in zip(detections, ground_truth):
                mine = [d for d in dets if d.class_id == cid]
                theirs = [g for g in gts if g.class_id == cid]
                pairs.extend((d.confidence, tp) for d, tp in match_detections(mine, theirs, thr))
            per_class[name] = average_precision(pairs, report.gt_counts[name])
        report.ap[float(thr)] = per_class
        report.mean_ap[float(thr)] = float(np.mean([per_class[n] for n in present]))
    return report


def nms(dets: Sequence[Detection], iou_thresh: float = 0.5) -> list[Detection]:
    """Class-wise non-maximum suppression. Not used by default."""
    kept: list[Detection] = []
    for d in _rank(dets):
        if all(k.class_id != d.class_id or iou(k.box, d.box) < iou_thresh for k in kept):
            kept.append(d)
    return kept


def predict_heads(params, x) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Scorer maps for one sample as plain arrays, without recording a graph."""
    from .model import encoder_forward, scorer_forward
    from .tensor import no_grad

    with no_grad():
        heads = scorer_forward(params, encoder_forward(params, x)[-1])
    return heads.class_probs.data, heads.obj_probs.data, heads.box_params.data


def evaluate_dataset(
    params, dataset, indices: Sequence[int], conf_floor: float = 0.0, use_nms: bool = False,
    thresholds: Sequence[float] = IOU_THRESHOLDS,
) -> EvalReport:
    """Run the model over samples and score its detections on the labeled frames."""
    cfg = params.config
    grid = cfg.grid
    frames = list(cfg.labeled_frames)
    all_dets: list[list[Detection]] = []
    all_gts: list[list[Box]] = []
    for idx in indices:
        x, boxes = dataset.load_sample(int(idx))
        cls_p, obj_p, box_p = predict_heads(params, x)
        per_frame = extract_detections(cls_p, obj_p, box_p, grid, conf_floor, frames)
        for f, dets in zip(frames, per_frame):
            all_dets.append(nms(dets) if use_nms else dets)
            all_gts.append([b for b in boxes if b.frame == f])
    return mean_average_precision(all_dets, all_gts, dataset.manifest.class_names, thresholds)
