"""COCO-protocol average precision and the gamma_h calibration sweep.

Matching is greedy in descending score order: each detection takes the
unmatched ground truth with the highest IoU at or above the threshold.
Precision is made monotone from the right and sampled at the 101 recall
points 0.00, 0.01, ..., 1.00.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np

from .geometry import BBox, boxes_to_array, iou_matrix

IOU_THRESHOLDS = tuple(np.round(np.arange(0.5, 0.951, 0.05), 2))
RECALL_POINTS = np.linspace(0.0, 1.0, 101)
SIZE_BREAKS = (144.0, 576.0)
GAMMA_GRID = IOU_THRESHOLDS

TP, FP, IGNORED = 1, 0, -1


@dataclass
class APReport:
    ap_50_95: Optional[float]
    ap_50: Optional[float]
    ap_75: Optional[float]
    ap_small: Optional[float]
    ap_medium: Optional[float]
    ap_large: Optional[float]
    # per IoU threshold: (recall, precision) arrays over the ranked detections
    curves: dict = field(default_factory=dict, repr=False)

    FIELDS = ("ap_50_95", "ap_50", "ap_75", "ap_small", "ap_medium", "ap_large")

    def values(self) -> dict[str, Optional[float]]:
        return {k: getattr(self, k) for k in self.FIELDS}

    def to_text(self) -> str:
        return "".join(f"{k}={_fmt(v)}\n" for k, v in self.values().items())

    def to_json(self) -> dict:
        return {
            **self.values(),
            "curves": {
                f"{t:.2f}": {"recall": list(map(float, r)), "precision": list(map(float, p))}
                for t, (r, p) in self.curves.items()
            },
        }

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=1) + "\n", encoding="utf-8")


def _fmt(v: Optional[float]) -> str:
    return "undefined" if v is None else repr(float(v))


def _as_array(boxes) -> np.ndarray:
    if isinstance(boxes, np.ndarray):
        return boxes.reshape(-1, 4)
    return boxes_to_array(boxes)


def match_detections(dets: Sequence[BBox], gts: Sequence[BBox], iou_thresh: float,
                     gt_ignore: Optional[Sequence[bool]] = None) -> np.ndarray:
    """TP/FP label per detection; ``dets`` must already be in descending score order.

    Ground truths flagged in ``gt_ignore`` may absorb a detection, which is
    then labelled ``IGNORED`` rather than TP or FP; a detection prefers any
    eligible non-ignored ground truth.
    """
    n = len(dets)
    if n == 0 or len(gts) == 0:
        return np.full(n, FP, dtype=int)
    ious = iou_matrix(_as_array(dets), _as_array(gts))
    ignore = np.zeros(len(gts), bool) if gt_ignore is None else np.asarray(gt_ignore, bool)
    return _match(ious, iou_thresh, ignore)


def _match(ious: np.ndarray, iou_thresh: float, ignore: np.ndarray) -> np.ndarray:
    n = ious.shape[0]
    labels = np.full(n, FP, dtype=int)
    if ious.shape[1] == 0:
        return labels
    ok = ious >= iou_thresh
    # detections that reach no ground truth are false positives whatever came before
    for i in np.nonzero(ok.any(axis=1))[0]:
        row = np.where(ok[i], ious[i], -1.0)
        for want_ignored in (False, True):
            cand = np.where(ignore == want_ignored, row, -1.0)
            j = int(np.argmax(cand))  # first index among ties
            if cand[j] >= 0:
                ok[:, j] = False
                labels[i] = IGNORED if want_ignored else TP
                break
    return labels


@dataclass
class _Image:
    image_id: int
    order: np.ndarray  # detection indices by descending score, ties by position
    scores: np.ndarray  # in ranked order
    det_area: np.ndarray
    gt_area: np.ndarray
    ious: np.ndarray  # (ranked dets, gts)


def _prepare(dets: Mapping[int, Sequence], gts: Mapping[int, Sequence[BBox]]) -> list[_Image]:
    out = []
    for image_id in sorted(set(dets) | set(gts)):
        g = _as_array(gts.get(image_id, []))
        d = list(dets.get(image_id, []))
        scores = np.array([x.score for x in d], dtype=float)
        order = np.lexsort((np.arange(len(d)), -scores))
        boxes = _as_array([d[k].box for k in order])
        ious = iou_matrix(boxes, g) if len(d) and len(g) else np.zeros((len(d), len(g)))
        out.append(_Image(image_id, order, scores[order], boxes[:, 2] * boxes[:, 3], g[:, 2] * g[:, 3], ious))
    return out


def _outside(area: np.ndarray, area_range: Optional[tuple[float, float]]) -> np.ndarray:
    if area_range is None:
        return np.zeros(len(area), bool)
    return (area < area_range[0]) | (area >= area_range[1])


def _ranked(images: list[_Image], iou_thresh: float,
            area_range: Optional[tuple[float, float]]) -> tuple[np.ndarray, np.ndarray, int]:
    lab, sc, ids, pos = [], [], [], []
    n_gt = 0
    for im in images:
        ignore = _outside(im.gt_area, area_range)
        n_gt += int((~ignore).sum())
        if len(im.order) == 0:
            continue
        labels = _match(im.ious, iou_thresh, ignore)
        if area_range is not None:
            # unmatched detections outside the stratum do not count against it
            labels = np.where((labels == FP) & _outside(im.det_area, area_range), IGNORED, labels)
        lab.append(labels)
        sc.append(im.scores)
        ids.append(np.full(len(labels), im.image_id))
        pos.append(im.order)
    if not lab:
        return np.zeros(0, int), np.zeros(0), n_gt
    lab, sc, ids, pos = (np.concatenate(a) for a in (lab, sc, ids, pos))
    rank = np.lexsort((pos, ids, -sc))
    return lab[rank], sc[rank], n_gt


def ranked_labels(dets: Mapping[int, Sequence], gts: Mapping[int, Sequence[BBox]], iou_thresh: float,
                  area_range: Optional[tuple[float, float]] = None) -> tuple[np.ndarray, np.ndarray, int]:
    """Labels and scores of all detections in global rank order, plus the ground-truth count.

    Ranks are by score descending, then image id, then position within the image.
    """
    return _ranked(_prepare(dets, gts), iou_thresh, area_range)


def pr_curve(labels: np.ndarray, n_gt: int) -> tuple[np.ndarray, np.ndarray]:
    kept = labels[labels != IGNORED]
    tp = np.cumsum(kept == TP)
    fp = np.cumsum(kept == FP)
    recall = tp / n_gt
    precision = tp / np.maximum(tp + fp, 1)
    return recall, precision


def interpolated_ap(recall: np.ndarray, precision: np.ndarray) -> float:
    if len(recall) == 0:
        return 0.0
    env = np.maximum.accumulate(precision[::-1])[::-1]
    idx = np.searchsorted(recall, RECALL_POINTS, side="left")
    sampled = np.where(idx < len(env), env[np.minimum(idx, len(env) - 1)], 0.0)
    return float(sampled.mean())


def average_precision(dets: Mapping[int, Sequence], gts: Mapping[int, Sequence[BBox]], iou_thresh: float,
                      area_range: Optional[tuple[float, float]] = None) -> Optional[float]:
    """101-point interpolated AP, or ``None`` when there is no ground truth."""
    return _ap(_prepare(dets, gts), iou_thresh, area_range)


def _ap(images: list[_Image], iou_thresh: float, area_range=None) -> Optional[float]:
    labels, _, n_gt = _ranked(images, iou_thresh, area_range)
    if n_gt == 0:
        return None
    return interpolated_ap(*pr_curve(labels, n_gt))


def _mean(vals: list[Optional[float]]) -> Optional[float]:
    if any(v is None for v in vals):
        return None
    return float(np.mean(vals))


def coco_ap(dets: Mapping[int, Sequence], gts: Mapping[int, Sequence[BBox]],
            size_breaks: tuple[float, float] = SIZE_BREAKS) -> APReport:
    images = _prepare(dets, gts)
    curves = {}
    per_t = []
    for t in IOU_THRESHOLDS:
        labels, _, n_gt = _ranked(images, t, None)
        if n_gt == 0:
            per_t.append(None)
            continue
        r, p = pr_curve(labels, n_gt)
        curves[float(t)] = (r, p)
        per_t.append(interpolated_ap(r, p))
    strata = [(0.0, size_breaks[0]), (size_breaks[0], size_breaks[1]), (size_breaks[1], np.inf)]
    by_size = [_mean([_ap(images, t, rng) for t in IOU_THRESHOLDS]) for rng in strata]
    return APReport(
        ap_50_95=_mean(per_t),
        ap_50=per_t[0],
        ap_75=per_t[IOU_THRESHOLDS.index(0.75)],
        ap_small=by_size[0],
        ap_medium=by_size[1],
        ap_large=by_size[2],
        curves=curves,
    )


def max_iou(boxes: Sequence[BBox], gts: Sequence[BBox]) -> np.ndarray:
    if len(boxes) == 0:
        return np.zeros(0)
    if len(gts) == 0:
        return np.zeros(len(boxes))
    return iou_matrix(_as_array(boxes), _as_array(gts)).max(axis=1)


@dataclass
class CalibrationResult:
    gamma_h: float
    table: list[tuple[float, float]]  # (gamma, metric)


def calibrate_gamma_h(pseudo: Mapping[int, Sequence], gts: Mapping[int, Sequence[BBox]],
                      grid: Sequence[float] = GAMMA_GRID, metric: str = "ap_50_95") -> CalibrationResult:
    """Pick the positive-group IoU threshold whose group scores best as a detector output.

    For each candidate, the pseudo boxes whose best IoU with ground truth
    reaches it are evaluated as if they were the detector's final output.
    Ties go to the smaller threshold.
    """
    if not any(len(v) for v in pseudo.values()):
        raise ValueError("no pseudo boxes to calibrate on")
    if metric not in ("ap_50_95", "ap_50"):
        raise ValueError(f"metric must be 'ap_50_95' or 'ap_50', got {metric!r}")
    best_iou = {i: max_iou([d.box for d in ds], gts.get(i, [])) for i, ds in pseudo.items()}
    table = []
    for g in grid:
        group = {i: [d for d, m in zip(ds, best_iou[i]) if m >= g] for i, ds in pseudo.items()}
        images = _prepare(group, gts)
        if metric == "ap_50":
            value = _ap(images, 0.5)
        else:
            value = _mean([_ap(images, t) for t in IOU_THRESHOLDS])
        table.append((float(g), 0.0 if value is None else float(value)))
    best = max(range(len(table)), key=lambda k: (table[k][1], -k))
    return CalibrationResult(table[best][0], table)
