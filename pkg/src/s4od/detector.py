"""A small anchor-based single-class detector.

The backbone is one learned layer over per-cell image statistics; each anchor
is scored from its RoI-pooled feature by a linear classification head and
refined by a linear regression head.  Everything is numpy with hand-written
gradients, so training is exactly reproducible from a seed.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
import scipy.sparse as sp

from .formats import FormatError, load_manifest, save_manifest
from .geometry import BBox, boxes_to_array, iou_matrix

log = logging.getLogger(__name__)

PARAMS_FORMAT = "s4od-detector-params/1"
N_BINS = 2  # RoI pooling grid is N_BINS x N_BINS
N_STATS = 4  # mean, variance, |d/dx|, |d/dy| per channel
VAR_GAIN = 10.0
GRAD_GAIN = 2.0
BBOX_CLIP = np.log(1000.0 / 16)


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class DetectorConfig:
    channels: int = 3
    d_feat: int = 8
    stride: int = 4
    context: int = 1  # featurizer sees the (2c+1) x (2c+1) block of cells around each cell
    scales: tuple[float, ...] = (8.0, 16.0, 24.0)
    aspects: tuple[float, ...] = (1.0, 0.5, 2.0)  # width / height
    pos_iou: float = 0.5
    safe_iou: float = 0.3
    neg_ratio: int = 3
    min_negatives: int = 8
    smooth_l1_beta: float = 1.0 / 9.0
    cls_weight: float = 1.0
    reg_weight: float = 1.0
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 1e-4
    epochs: int = 30
    batch_size: int = 16
    lr_decay_at: float = 0.75  # fraction of epochs after which lr drops 10x
    grad_clip: float = 10.0
    init_scale: float = 0.3

    @property
    def d_raw(self) -> int:
        return N_STATS * self.channels * (2 * self.context + 1) ** 2

    @property
    def roi_dim(self) -> int:
        return N_BINS * N_BINS * self.d_feat

    @property
    def anchors_per_cell(self) -> int:
        return len(self.scales) * len(self.aspects)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["scales"] = list(self.scales)
        d["aspects"] = list(self.aspects)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DetectorConfig":
        d = dict(d)
        d["scales"] = tuple(d["scales"])
        d["aspects"] = tuple(d["aspects"])
        return cls(**d)


PARAM_NAMES = ("W1", "b1", "wc", "bc", "Wr", "br")
# fixed input standardisation of the raw statistics; set once, never trained
FROZEN_NAMES = ("raw_mean", "raw_scale")


@dataclass
class DetectorParams:
    W1: np.ndarray  # (d_raw, d_feat) featurizer
    b1: np.ndarray  # (d_feat,)
    wc: np.ndarray  # (roi_dim,) classification head
    bc: np.ndarray  # (1,)
    Wr: np.ndarray  # (roi_dim, 4) regression head
    br: np.ndarray  # (4,)
    config: DetectorConfig = field(default_factory=DetectorConfig)
    raw_mean: Optional[np.ndarray] = None  # (d_raw,)
    raw_scale: Optional[np.ndarray] = None  # (d_raw,)

    def __post_init__(self):
        d = self.config.d_raw
        if self.raw_mean is None:
            self.raw_mean = np.zeros(d)
        if self.raw_scale is None:
            self.raw_scale = np.ones(d)

    @classmethod
    def zeros(cls, cfg: DetectorConfig = DetectorConfig()) -> "DetectorParams":
        return cls(
            np.zeros((cfg.d_raw, cfg.d_feat)), np.zeros(cfg.d_feat),
            np.zeros(cfg.roi_dim), np.zeros(1),
            np.zeros((cfg.roi_dim, 4)), np.zeros(4), cfg,
        )

    @classmethod
    def init(cls, cfg: DetectorConfig, rng: np.random.Generator) -> "DetectorParams":
        p = cls.zeros(cfg)
        p.W1 = rng.normal(0.0, cfg.init_scale, p.W1.shape)
        p.b1 = np.full(cfg.d_feat, 0.5)
        p.wc = rng.normal(0.0, 0.01, p.wc.shape)
        p.bc = np.array([-2.0])
        p.Wr = rng.normal(0.0, 0.001, p.Wr.shape)
        return p

    def arrays(self) -> dict[str, np.ndarray]:
        """Trainable arrays."""
        return {k: getattr(self, k) for k in PARAM_NAMES}

    def frozen(self) -> dict[str, np.ndarray]:
        return {k: getattr(self, k) for k in FROZEN_NAMES}

    def copy(self) -> "DetectorParams":
        return DetectorParams(
            **{k: v.copy() for k, v in self.arrays().items()},
            **{k: v.copy() for k, v in self.frozen().items()},
            config=self.config,
        )

    def flat(self) -> np.ndarray:
        return np.concatenate([v.ravel() for v in self.arrays().values()])

    def with_flat(self, vec: np.ndarray) -> "DetectorParams":
        out, i = {}, 0
        for k, v in self.arrays().items():
            out[k] = np.asarray(vec[i:i + v.size], float).reshape(v.shape)
            i += v.size
        return DetectorParams(**out, **self.frozen(), config=self.config)

    def tobytes(self) -> bytes:
        return self.flat().tobytes() + self.raw_mean.tobytes() + self.raw_scale.tobytes()

    def save(self, path, extra: Optional[dict] = None) -> None:
        save_manifest(path, PARAMS_FORMAT, self.config.to_dict(), {**self.arrays(), **self.frozen()}, extra)

    @classmethod
    def load(cls, path) -> "DetectorParams":
        config, arrays, _ = load_manifest(path, PARAMS_FORMAT)
        cfg = DetectorConfig.from_dict(config)
        missing = set(PARAM_NAMES + FROZEN_NAMES) - set(arrays)
        if missing:
            raise FormatError(f"{path}: missing arrays {sorted(missing)}")
        return cls(**{k: arrays[k] for k in PARAM_NAMES + FROZEN_NAMES}, config=cfg)


@dataclass
class Detection:
    box: BBox
    score: float
    roi_feature: Optional[np.ndarray] = None


# -- backbone ----------------------------------------------------------------

def grid_shape(W: int, H: int, stride: int) -> tuple[int, int]:
    return H // stride, W // stride


def raw_cell_stats(img: np.ndarray, stride: int = 4, context: int = 0) -> np.ndarray:
    """Per-cell channel mean, variance and mean absolute x/y differences.

    Returns ``(H // stride, W // stride, 4 * C * (2 * context + 1) ** 2)``.
    With ``context > 0`` each cell also carries the statistics of its
    neighbours (row-major over the block, zeros beyond the border).  Pixels
    beyond the last whole cell are ignored.
    """
    img = np.asarray(img, dtype=float)
    if img.ndim == 2:
        img = img[..., None]
    H, W, C = img.shape
    gh, gw = grid_shape(W, H, stride)
    gx = np.zeros_like(img)
    gx[:, :-1] = np.abs(img[:, 1:] - img[:, :-1])
    gy = np.zeros_like(img)
    gy[:-1] = np.abs(img[1:] - img[:-1])

    def cell_mean(a):
        # two single-axis sums are much faster than one reduction over (1, 3)
        return a[:gh * stride, :gw * stride].reshape(gh, stride, gw, stride, C).sum(axis=3).sum(axis=1) / stride**2

    mean = cell_mean(img)
    dev = img[:gh * stride, :gw * stride] - np.repeat(np.repeat(mean, stride, axis=0), stride, axis=1)
    var = cell_mean(dev * dev)
    stats = np.concatenate(
        [mean, VAR_GAIN * var, GRAD_GAIN * cell_mean(gx), GRAD_GAIN * cell_mean(gy)],
        axis=-1,
    )
    if context == 0:
        return stats
    r = context
    padded = np.pad(stats, ((r, r), (r, r), (0, 0)))
    return np.concatenate(
        [padded[dy:dy + gh, dx:dx + gw] for dy in range(2 * r + 1) for dx in range(2 * r + 1)], axis=-1
    )


def feature_map(img: np.ndarray, params: DetectorParams) -> np.ndarray:
    """Learned feature grid ``(H/stride, W/stride, d_feat)``."""
    raw = raw_cell_stats(img, params.config.stride, params.config.context)
    _, fm = _flat_fmap(raw, params)
    return fm.reshape(raw.shape[0], raw.shape[1], -1)


def standardize_inputs(params: DetectorParams, raws: Sequence[np.ndarray]) -> None:
    """Freeze per-statistic mean and scale of the featurizer input from ``raws``."""
    x = np.concatenate([r.reshape(-1, r.shape[-1]) for r in raws])
    params.raw_mean = x.mean(axis=0)
    params.raw_scale = 1.0 / np.maximum(x.std(axis=0), 1e-6)


# -- RoI pooling -------------------------------------------------------------

def _axis_weights(lo: np.ndarray, hi: np.ndarray, n: int) -> np.ndarray:
    """Normalised overlap of intervals ``[lo, hi]`` (cell units) with cells ``[j, j+1]``."""
    j = np.arange(n)
    ov = np.clip(np.minimum(hi[..., None], j + 1) - np.maximum(lo[..., None], j), 0.0, None)
    tot = ov.sum(axis=-1, keepdims=True)
    empty = tot[..., 0] <= 0
    if np.any(empty):
        centre = np.clip(np.floor((lo + hi) / 2), 0, n - 1).astype(int)
        ov[empty] = 0.0
        ov[empty, centre[empty]] = 1.0
        tot = ov.sum(axis=-1, keepdims=True)
    return ov / tot


def pool_matrix(boxes: np.ndarray, gh: int, gw: int, stride: int) -> np.ndarray:
    """Dense pooling operator: rows ``n * 4 + by * 2 + bx`` over flattened grid cells."""
    b = np.asarray(boxes, dtype=float).reshape(-1, 4) / stride
    x0, y0, w, h = b.T
    edges = np.arange(N_BINS + 1) / N_BINS
    xe = x0[:, None] + w[:, None] * edges
    ye = y0[:, None] + h[:, None] * edges
    ox = _axis_weights(xe[:, :-1], xe[:, 1:], gw)  # (N, 2, gw)
    oy = _axis_weights(ye[:, :-1], ye[:, 1:], gh)  # (N, 2, gh)
    m = oy[:, :, None, :, None] * ox[:, None, :, None, :]  # (N, by, bx, gh, gw)
    return m.reshape(len(b) * N_BINS * N_BINS, gh * gw)


def roi_pool(fmap: np.ndarray, box: BBox, stride: int = 4) -> np.ndarray:
    """Average-pool ``fmap`` under ``box`` on a 2x2 bin grid, bins concatenated."""
    gh, gw, d = fmap.shape
    m = pool_matrix(np.array(box.as_tuple()), gh, gw, stride)
    return (m @ fmap.reshape(gh * gw, d)).reshape(-1)


def roi_pool_many(fmap: np.ndarray, boxes: np.ndarray, stride: int = 4) -> np.ndarray:
    gh, gw, d = fmap.shape
    boxes = np.asarray(boxes, float).reshape(-1, 4)
    if len(boxes) == 0:
        return np.zeros((0, N_BINS * N_BINS * d))
    m = pool_matrix(boxes, gh, gw, stride)
    return (m @ fmap.reshape(gh * gw, d)).reshape(len(boxes), -1)


# -- anchors -----------------------------------------------------------------

@dataclass
class AnchorSet:
    W: int
    H: int
    gh: int
    gw: int
    boxes: np.ndarray  # (A, 4) xywh, clipped to the image
    dense: np.ndarray  # (A * 4, G) pooling rows
    pool: sp.csr_matrix  # (A, bins * G): bin-major sparse pooling, one block of G columns per bin
    rows: sp.csr_matrix  # sparse copy of ``dense``

    @property
    def n(self) -> int:
        return len(self.boxes)


def make_anchors(W: int, H: int, cfg: DetectorConfig) -> np.ndarray:
    """Anchors centred on every feature cell, ordered (cell row, cell col, scale, aspect)."""
    gh, gw = grid_shape(W, H, cfg.stride)
    shapes = []
    for s in cfg.scales:
        for a in cfg.aspects:
            shapes.append((s * np.sqrt(a), s / np.sqrt(a)))
    shapes = np.array(shapes)
    cy, cx = np.mgrid[0:gh, 0:gw]
    cx = (cx.ravel() + 0.5) * cfg.stride
    cy = (cy.ravel() + 0.5) * cfg.stride
    x1 = cx[:, None] - shapes[None, :, 0] / 2
    y1 = cy[:, None] - shapes[None, :, 1] / 2
    x2 = x1 + shapes[None, :, 0]
    y2 = y1 + shapes[None, :, 1]
    x1, x2 = np.clip(x1, 0, W), np.clip(x2, 0, W)
    y1, y2 = np.clip(y1, 0, H), np.clip(y2, 0, H)
    return np.stack([x1, y1, x2 - x1, y2 - y1], axis=-1).reshape(-1, 4)


_anchor_cache: dict = {}


def anchor_set(W: int, H: int, cfg: DetectorConfig) -> AnchorSet:
    key = (W, H, cfg.stride, cfg.scales, cfg.aspects)
    hit = _anchor_cache.get(key)
    if hit is None:
        gh, gw = grid_shape(W, H, cfg.stride)
        boxes = make_anchors(W, H, cfg)
        dense = pool_matrix(boxes, gh, gw, cfg.stride)
        nb = N_BINS * N_BINS
        pool = sp.csr_matrix(np.concatenate([dense[k::nb] for k in range(nb)], axis=1))
        hit = AnchorSet(W, H, gh, gw, boxes, dense, pool, sp.csr_matrix(dense))
        _anchor_cache[key] = hit
    return hit


def encode(anchors: np.ndarray, boxes: np.ndarray) -> np.ndarray:
    ax, ay, aw, ah = anchors.T
    bx, by, bw, bh = boxes.T
    return np.stack([
        (bx + bw / 2 - ax - aw / 2) / aw,
        (by + bh / 2 - ay - ah / 2) / ah,
        np.log(bw / aw),
        np.log(bh / ah),
    ], axis=-1)


def decode(anchors: np.ndarray, deltas: np.ndarray) -> np.ndarray:
    ax, ay, aw, ah = anchors.T
    dx, dy, dw, dh = deltas.T
    cx = ax + aw / 2 + aw * dx
    cy = ay + ah / 2 + ah * dy
    w = aw * np.exp(np.minimum(dw, BBOX_CLIP))
    h = ah * np.exp(np.minimum(dh, BBOX_CLIP))
    return np.stack([cx - w / 2, cy - h / 2, w, h], axis=-1)


def clip_boxes(boxes: np.ndarray, W: int, H: int) -> np.ndarray:
    x1 = np.clip(boxes[:, 0], 0, W)
    y1 = np.clip(boxes[:, 1], 0, H)
    x2 = np.clip(boxes[:, 0] + boxes[:, 2], 0, W)
    y2 = np.clip(boxes[:, 1] + boxes[:, 3], 0, H)
    return np.stack([x1, y1, x2 - x1, y2 - y1], axis=-1)


# -- inference ---------------------------------------------------------------

def _inputs(raw: np.ndarray, params: DetectorParams) -> np.ndarray:
    return (raw.reshape(-1, raw.shape[-1]) - params.raw_mean) * params.raw_scale


def _flat_fmap(raw: np.ndarray, params: DetectorParams) -> tuple[np.ndarray, np.ndarray]:
    return _featurize(_inputs(raw, params), params)


def _featurize(x: np.ndarray, params: DetectorParams) -> tuple[np.ndarray, np.ndarray]:
    pre = x @ params.W1 + params.b1
    return pre, np.maximum(pre, 0.0)


def _per_bin_outputs(fmap_flat: np.ndarray, anchors: AnchorSet, head: np.ndarray) -> np.ndarray:
    # a linear head on a pooled vector equals pooling each bin's per-cell head output
    nb = N_BINS * N_BINS
    d = fmap_flat.shape[1]
    per_cell = np.einsum("gd,kdj->kgj", fmap_flat, head.reshape(nb, d, -1), optimize=True)
    return anchors.pool @ per_cell.reshape(nb * len(fmap_flat), -1)


def anchor_logits(fmap_flat: np.ndarray, anchors: AnchorSet, params: DetectorParams) -> np.ndarray:
    """Classification logit of every anchor."""
    return _per_bin_outputs(fmap_flat, anchors, params.wc)[:, 0] + params.bc[0]


def anchor_outputs(fmap_flat: np.ndarray, anchors: AnchorSet, params: DetectorParams) -> tuple[np.ndarray, np.ndarray]:
    """Logits ``(A,)`` and regression deltas ``(A, 4)`` of every anchor."""
    head = np.concatenate([params.wc[:, None], params.Wr], axis=1)
    out = _per_bin_outputs(fmap_flat, anchors, head)
    return out[:, 0] + params.bc[0], out[:, 1:] + params.br


def sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def nms(boxes: np.ndarray, scores: np.ndarray, iou_thresh: float,
        order_key: Optional[np.ndarray] = None, max_keep: Optional[int] = None) -> np.ndarray:
    """Greedy NMS; indices of kept boxes in descending score order.

    A box is suppressed when its IoU with an already kept box exceeds
    ``iou_thresh``.  Ties in score are broken by ``order_key`` (default:
    input position), lowest first.  ``max_keep`` stops after that many boxes.
    """
    boxes = np.asarray(boxes, float).reshape(-1, 4)
    scores = np.asarray(scores, float)
    key = np.arange(len(scores)) if order_key is None else np.asarray(order_key)
    order = np.lexsort((key, -scores))
    x1, y1, w, h = boxes[order].T
    x2, y2 = x1 + w, y1 + h
    area = w * h
    keep = []
    alive = np.ones(len(order), dtype=bool)
    limit = len(order) if max_keep is None else max_keep
    for pos in range(len(order)):
        if len(keep) >= limit:
            break
        if not alive[pos]:
            continue
        keep.append(order[pos])
        iw = np.minimum(x2[pos], x2[pos + 1:]) - np.maximum(x1[pos], x1[pos + 1:])
        ih = np.minimum(y2[pos], y2[pos + 1:]) - np.maximum(y1[pos], y1[pos + 1:])
        inter = np.maximum(iw, 0.0) * np.maximum(ih, 0.0)
        iou = inter / (area[pos] + area[pos + 1:] - inter)
        alive[pos + 1:] &= ~(iou > iou_thresh)
    return np.array(keep, dtype=int)


def detect(img: np.ndarray, params: DetectorParams, score_floor: float = 0.05, nms_iou: float = 0.5,
           pre_nms_top_k: Optional[int] = None, max_detections: Optional[int] = None) -> list[Detection]:
    cfg = params.config
    H, W = img.shape[:2]
    raw = raw_cell_stats(img, cfg.stride, cfg.context)
    return detect_raw(raw, W, H, params, score_floor, nms_iou, pre_nms_top_k, max_detections)


def detect_raw(raw: np.ndarray, W: int, H: int, params: DetectorParams, score_floor: float = 0.05,
               nms_iou: float = 0.5, pre_nms_top_k: Optional[int] = None,
               max_detections: Optional[int] = None) -> list[Detection]:
    cfg = params.config
    anchors = anchor_set(W, H, cfg)
    _, fm = _flat_fmap(raw, params)
    logits, all_deltas = anchor_outputs(fm, anchors, params)
    scores = sigmoid(logits)
    cand = np.nonzero(scores >= score_floor)[0]
    if pre_nms_top_k is not None and len(cand) > pre_nms_top_k:
        top = np.lexsort((cand, -scores[cand]))[:pre_nms_top_k]
        cand = np.sort(cand[top])
    if len(cand) == 0:
        return []
    deltas = all_deltas[cand]
    boxes = clip_boxes(decode(anchors.boxes[cand], deltas), W, H)
    ok = (boxes[:, 2] > 1e-6) & (boxes[:, 3] > 1e-6)
    cand, boxes = cand[ok], boxes[ok]
    keep = nms(boxes, scores[cand], nms_iou, order_key=cand, max_keep=max_detections)
    if len(keep) == 0:
        return []
    gh, gw = grid_shape(W, H, cfg.stride)
    feats = (pool_matrix(boxes[keep], gh, gw, cfg.stride) @ fm).reshape(len(keep), -1)
    return [
        Detection(BBox(*map(float, boxes[k])), float(scores[cand[k]]), feats[i])
        for i, k in enumerate(keep)
    ]


# -- supervision and loss ----------------------------------------------------

@dataclass
class Supervision:
    """Per-image training targets.

    Positive boxes drive every loss term.  Anchors overlapping an ambiguous
    box form the safe zone and are excluded from every term.  Everything
    else is eligible for hard negative mining.
    """

    positives: list[BBox] = field(default_factory=list)
    ambiguous: list[BBox] = field(default_factory=list)


@dataclass
class Assignment:
    pos_idx: np.ndarray  # anchor indices
    targets: np.ndarray  # (P, 4) regression targets
    eligible: np.ndarray  # bool (A,), negative-eligible
    excluded: np.ndarray  # bool (A,), safe zone


def assign_anchors(anchors: AnchorSet, sup: Supervision, cfg: DetectorConfig) -> Assignment:
    A = anchors.n
    pos_mask = np.zeros(A, dtype=bool)
    targets = np.zeros((0, 4))
    pos_idx = np.zeros(0, dtype=int)
    if sup.positives:
        pb = boxes_to_array(sup.positives)
        ious = iou_matrix(anchors.boxes, pb)
        best = ious.argmax(axis=1)
        top = ious[np.arange(A), best]
        pos_mask = top >= cfg.pos_iou
        pos_idx = np.nonzero(pos_mask)[0]
        targets = encode(anchors.boxes[pos_idx], pb[best[pos_idx]])
    excluded = np.zeros(A, dtype=bool)
    if sup.ambiguous:
        amb = iou_matrix(anchors.boxes, boxes_to_array(sup.ambiguous)).max(axis=1)
        excluded = (amb > cfg.safe_iou) & ~pos_mask
    eligible = ~pos_mask & ~excluded
    return Assignment(pos_idx, targets, eligible, excluded)


def _smooth_l1(x: np.ndarray, beta: float) -> tuple[np.ndarray, np.ndarray]:
    ax = np.abs(x)
    quad = ax < beta
    val = np.where(quad, 0.5 * x * x / beta, ax - 0.5 * beta)
    grad = np.where(quad, x / beta, np.sign(x))
    return val, grad


@dataclass
class LossInfo:
    loss: float
    n_pos: int
    n_neg: int
    dlogits: np.ndarray  # (A,) gradient w.r.t. every anchor logit
    dreg: np.ndarray  # (A, 4) gradient w.r.t. every anchor's regression output


def zero_grads(params: DetectorParams) -> dict[str, np.ndarray]:
    return {k: np.zeros_like(v) for k, v in params.arrays().items()}


def backprop_featurizer(x, pre, dfmap, params, grads, weight=1.0) -> None:
    """Accumulate featurizer gradients; ``x`` is the standardized input, ``dfmap`` the upstream gradient."""
    dpre = dfmap * (pre > 0)
    grads["W1"] += weight * (x.T @ dpre)
    grads["b1"] += weight * dpre.sum(axis=0)


def _top_k_order(values: np.ndarray, k: int) -> np.ndarray:
    """Indices of the ``k`` largest values, descending, ties to the lower index.

    Same result as the first ``k`` of a stable argsort of ``-values``, without
    sorting everything; positions past ``k`` hold the rest in index order.
    """
    n = len(values)
    if k >= n:
        return np.argsort(-values, kind="stable")
    kth = np.partition(values, n - k)[n - k]
    above = np.nonzero(values > kth)[0]
    tied = np.nonzero(values == kth)[0][: k - len(above)]
    top = np.concatenate([above, tied])
    top = top[np.lexsort((top, -values[top]))]
    mask = np.ones(n, bool)
    mask[top] = False
    return np.concatenate([top, np.nonzero(mask)[0]])


def image_loss(raw: np.ndarray, anchors: AnchorSet, assign: Assignment, params: DetectorParams,
               grads: Optional[dict] = None, weight: float = 1.0, keep_info: bool = False,
               inputs: Optional[np.ndarray] = None):
    """Detection loss of one image; adds ``weight * dloss`` into ``grads`` when given.

    Returns the loss, or ``(loss, LossInfo)`` with ``keep_info``.  ``inputs``
    may carry the already standardized ``raw`` to skip recomputing it.
    """
    cfg = params.config
    x = _inputs(raw, params) if inputs is None else inputs
    pre, fm = _featurize(x, params)
    P = len(assign.pos_idx)
    elig = np.nonzero(assign.eligible)[0]
    k = min(max(cfg.neg_ratio * P, cfg.min_negatives), len(elig))
    if k > 0:
        logits_all = anchor_logits(fm, anchors, params)
        order = _top_k_order(logits_all[elig], k)
        neg_idx = elig[order[:k]]
    else:
        neg_idx = np.zeros(0, dtype=int)
    sampled = np.concatenate([assign.pos_idx, neg_idx])
    n = len(sampled)
    if n == 0:
        if keep_info:
            return 0.0, LossInfo(0.0, 0, 0, np.zeros(anchors.n), np.zeros((anchors.n, 4)))
        return 0.0

    rows = (sampled[:, None] * 4 + np.arange(4)).ravel()
    Q = anchors.dense[rows]  # (n * 4, G)
    pooled = (Q @ fm).reshape(n, -1)
    logits = pooled @ params.wc + params.bc[0]
    y = np.zeros(n)
    y[:P] = 1.0
    cls = np.logaddexp(0.0, logits) - y * logits
    loss = cfg.cls_weight * cls.sum() / n
    dlogit = cfg.cls_weight * (sigmoid(logits) - y) / n

    dreg = np.zeros((P, 4))
    if P:
        pred = pooled[:P] @ params.Wr + params.br
        val, g = _smooth_l1(pred - assign.targets, cfg.smooth_l1_beta)
        loss += cfg.reg_weight * val.sum() / P
        dreg = cfg.reg_weight * g / P

    if grads is not None:
        grads["wc"] += weight * (pooled.T @ dlogit)
        grads["bc"] += weight * dlogit.sum()
        dpooled = np.outer(dlogit, params.wc)
        if P:
            grads["Wr"] += weight * (pooled[:P].T @ dreg)
            grads["br"] += weight * dreg.sum(axis=0)
            dpooled[:P] += dreg @ params.Wr.T
        dfmap = Q.T @ dpooled.reshape(n * 4, -1)
        backprop_featurizer(x, pre, dfmap, params, grads, weight)

    if keep_info:
        dl = np.zeros(anchors.n)
        dl[sampled] = dlogit
        dr = np.zeros((anchors.n, 4))
        if P:
            dr[assign.pos_idx] = dreg
        return float(loss), LossInfo(float(loss), P, len(neg_idx), dl, dr)
    return float(loss)


def batch_loss(xs: Sequence[np.ndarray], assigns: Sequence[Assignment], anchors: AnchorSet,
               params: DetectorParams, grads: dict, weights: Sequence[float]) -> float:
    """``sum_i weights[i] * image_loss(image i)`` for same-sized images, in one vectorized pass.

    ``xs`` are standardized inputs.  Gradients are added into ``grads``.
    Agrees with summing :func:`image_loss` up to float rounding.
    """
    cfg = params.config
    B = len(xs)
    G = xs[0].shape[0]
    d = cfg.d_feat
    nb = N_BINS * N_BINS
    X = np.concatenate(xs)  # (B * G, d_raw)
    pre = X @ params.W1 + params.b1
    fm = np.maximum(pre, 0.0)
    fm3 = fm.reshape(B, G, d)

    # logits of every anchor in every image, for mining
    per_cell = np.einsum("bgd,kd->kgb", fm3, params.wc.reshape(nb, d), optimize=True)
    all_logits = anchors.pool @ per_cell.reshape(nb * G, B)  # (A, B)

    sampled, owner, is_pos, row_w, pos_w, targets = [], [], [], [], [], []
    for i, (a, w) in enumerate(zip(assigns, weights)):
        P = len(a.pos_idx)
        elig = np.nonzero(a.eligible)[0]
        k = min(max(cfg.neg_ratio * P, cfg.min_negatives), len(elig))
        neg = elig[_top_k_order(all_logits[elig, i], k)[:k]] if k > 0 else np.zeros(0, dtype=int)
        n = P + len(neg)
        if n == 0:
            continue
        sampled.append(np.concatenate([a.pos_idx, neg]))
        owner.append(np.full(n, i))
        is_pos.append(np.arange(n) < P)
        row_w.append(np.full(n, w / n))
        if P:
            pos_w.append(np.full(P, w / P))
            targets.append(a.targets)
    if not sampled:
        return 0.0
    sampled = np.concatenate(sampled)
    owner = np.concatenate(owner)
    is_pos = np.concatenate(is_pos)
    row_w = np.concatenate(row_w)
    N = len(sampled)

    # pooling rows of the sampled anchors, shifted onto each owner's block of cells
    Q = anchors.rows[(sampled[:, None] * nb + np.arange(nb)).ravel()].tocsr()
    Q.indices = Q.indices + np.repeat(np.repeat(owner, nb) * G, np.diff(Q.indptr))
    Q._shape = (N * nb, B * G)
    pooled = (Q @ fm).reshape(N, nb * d)

    logits = pooled @ params.wc + params.bc[0]
    y = is_pos.astype(float)
    cls = np.logaddexp(0.0, logits) - y * logits
    loss = cfg.cls_weight * float(row_w @ cls)
    dlogit = cfg.cls_weight * row_w * (sigmoid(logits) - y)
    grads["wc"] += pooled.T @ dlogit
    grads["bc"] += dlogit.sum()
    dpooled = np.outer(dlogit, params.wc)
    if pos_w:
        pos_w = np.concatenate(pos_w)
        pp = pooled[is_pos]
        val, g = _smooth_l1(pp @ params.Wr + params.br - np.concatenate(targets), cfg.smooth_l1_beta)
        loss += cfg.reg_weight * float(pos_w @ val.sum(axis=1))
        dreg = cfg.reg_weight * pos_w[:, None] * g
        grads["Wr"] += pp.T @ dreg
        grads["br"] += dreg.sum(axis=0)
        dpooled[is_pos] += dreg @ params.Wr.T
    dfm = Q.T @ dpooled.reshape(N * nb, d)
    dpre = dfm * (pre > 0)
    grads["W1"] += X.T @ dpre
    grads["b1"] += dpre.sum(axis=0)
    return loss


def detection_loss(img: np.ndarray, params: DetectorParams, sup: Supervision):
    """Loss and analytic gradients for one image.  Returns ``(loss, grads, info)``."""
    H, W = img.shape[:2]
    anchors = anchor_set(W, H, params.config)
    raw = raw_cell_stats(img, params.config.stride, params.config.context)
    assign = assign_anchors(anchors, sup, params.config)
    grads = zero_grads(params)
    loss, info = image_loss(raw, anchors, assign, params, grads, keep_info=True)
    return loss, grads, info


# -- training ----------------------------------------------------------------

@dataclass
class TrainItem:
    """One image prepared for training: raw statistics plus anchor assignment."""

    image_id: int
    raw: np.ndarray
    W: int
    H: int
    assign: Assignment


def prepare(img: np.ndarray, image_id: int, sup: Supervision, cfg: DetectorConfig,
            raw: Optional[np.ndarray] = None) -> TrainItem:
    """``raw`` may pass precomputed :func:`raw_cell_stats` of ``img``."""
    H, W = img.shape[:2]
    anchors = anchor_set(W, H, cfg)
    if raw is None:
        raw = raw_cell_stats(img, cfg.stride, cfg.context)
    return TrainItem(image_id, raw, W, H, assign_anchors(anchors, sup, cfg))


@dataclass
class TrainResult:
    params: DetectorParams
    losses: list[float]


class SGD:
    """SGD with momentum, weight decay, global-norm clipping and one 10x step decay."""

    def __init__(self, params: DetectorParams, cfg: DetectorConfig, epochs: int):
        self.cfg = cfg
        self.epochs = epochs
        self.velocity = {k: np.zeros_like(v) for k, v in params.arrays().items()}

    def lr(self, epoch: int) -> float:
        decay_epoch = int(self.cfg.lr_decay_at * self.epochs)
        return self.cfg.lr * (0.1 if epoch >= decay_epoch else 1.0)

    def step(self, params: DetectorParams, grads: dict, epoch: int) -> None:
        cfg = self.cfg
        norm = np.sqrt(sum(float((g * g).sum()) for g in grads.values()))
        scale = cfg.grad_clip / norm if norm > cfg.grad_clip else 1.0
        lr = self.lr(epoch)
        for k, g in grads.items():
            p = getattr(params, k)
            g = g * scale
            if k in ("W1", "wc", "Wr"):
                g = g + cfg.weight_decay * p
            v = self.velocity[k]
            v *= cfg.momentum
            v += g
            p -= lr * v


def _by_size(items: Sequence[TrainItem], batch: Sequence[int]) -> list[tuple[tuple[int, int], list[int]]]:
    groups: dict[tuple[int, int], list[int]] = {}
    for i in batch:
        groups.setdefault((items[i].W, items[i].H), []).append(i)
    return sorted(groups.items())


batch_loss_fn = batch_loss


# extra loss on a batch: (params, batch items, grads, epoch) -> loss added; must add its gradients into grads
ExtraLoss = Callable[[DetectorParams, Sequence[TrainItem], dict, int], float]


def train_detector(items: Sequence[TrainItem], cfg: DetectorConfig, seed: int, epochs: Optional[int] = None,
                   init: Optional[DetectorParams] = None,
                   extra_loss: Optional[ExtraLoss] = None) -> TrainResult:
    """Mini-batch SGD over ``items``.

    Images are visited in a seeded shuffled order; gradients within a batch
    are accumulated in image-id order so results are bitwise reproducible.
    ``extra_loss`` lets callers add terms (consistency) per batch.  Without
    ``init`` the parameters are freshly drawn and the input standardization
    is frozen from ``items``.
    """
    epochs = cfg.epochs if epochs is None else epochs
    if len(items) == 0:
        raise ValueError("training set is empty")
    rng = np.random.default_rng([seed, 0x5EED])
    if init is None:
        params = DetectorParams.init(cfg, np.random.default_rng([seed, 0x1417]))
        standardize_inputs(params, [it.raw for it in items])
    else:
        params = init.copy()
    if epochs == 0:
        return TrainResult(params, [])
    # the input standardization is frozen, so each image's inputs are computed once
    xs = [_inputs(it.raw, params) for it in items]
    opt = SGD(params, cfg, epochs)
    losses = []
    bs = cfg.batch_size
    for epoch in range(epochs):
        order = rng.permutation(len(items))
        total, count = 0.0, 0
        for start in range(0, len(order), bs):
            batch = sorted(order[start:start + bs], key=lambda i: items[i].image_id)
            grads = zero_grads(params)
            w = 1.0 / len(batch)
            batch_loss = 0.0
            for (W, H), idx in _by_size(items, batch):
                batch_loss += batch_loss_fn([xs[i] for i in idx], [items[i].assign for i in idx],
                                            anchor_set(W, H, cfg), params, grads, [w] * len(idx))
            if extra_loss is not None:
                batch_loss += extra_loss(params, [items[i] for i in batch], grads, epoch)
            if not np.isfinite(batch_loss) or not all(np.all(np.isfinite(g)) for g in grads.values()):
                raise TrainingDiverged(
                    f"non-finite loss {batch_loss!r} at epoch {epoch}, batch starting {start}; "
                    f"try a smaller lr (now {opt.lr(epoch)})"
                )
            opt.step(params, grads, epoch)
            total += batch_loss
            count += 1
        losses.append(total / count)
        log.debug("epoch %d loss %.5f", epoch, losses[-1])
    return TrainResult(params, losses)


# -- simulated teacher -------------------------------------------------------

@dataclass(frozen=True)
class SimTeacherConfig:
    rho: float = 0.0  # how strongly scores track true IoU, in [0, 1]
    copies: int = 4  # jittered copies per ground-truth box
    jitter: float = 0.35  # max corner noise as a fraction of box size
    spurious: int = 4  # boxes on distractors / background per image
    feature_signal: float = 3.0
    feature_dim: int = 32
    feature_seed: int = 7

    def direction(self) -> np.ndarray:
        v = np.random.default_rng(self.feature_seed).normal(size=self.feature_dim)
        return v / np.linalg.norm(v)


def _clip_to_image(b: np.ndarray, W: int, H: int) -> Optional[BBox]:
    x1, y1 = max(b[0], 0.0), max(b[1], 0.0)
    x2, y2 = min(b[0] + b[2], W), min(b[1] + b[3], H)
    if x2 - x1 < 1.0 or y2 - y1 < 1.0:
        return None
    return BBox(float(x1), float(y1), float(x2 - x1), float(y2 - y1))


def simulated_teacher(scene, cfg: SimTeacherConfig, rng: np.random.Generator) -> list[Detection]:
    """Synthetic pseudo boxes with a tunable score/IoU rank correlation.

    Scores are ``rho * iou + (1 - rho) * u`` with ``u`` uniform noise, so
    ``rho = 1`` gives scores equal to IoU and ``rho = 0`` makes them
    independent of it.  RoI features carry IoU along a fixed direction with
    strength ``feature_signal`` plus unit Gaussian noise.
    """
    W, H = scene.width, scene.height
    boxes: list[BBox] = []
    for g in scene.gt_boxes:
        if cfg.jitter <= 0:
            boxes.append(g)
            continue
        for _ in range(cfg.copies):
            amp = rng.uniform(0.0, cfg.jitter)
            noise = rng.normal(0.0, 1.0, 4) * amp * np.array([g.w, g.h, g.w, g.h])
            x1, y1 = g.x + noise[0], g.y + noise[1]
            x2, y2 = g.x2 + noise[2], g.y2 + noise[3]
            b = _clip_to_image(np.array([x1, y1, x2 - x1, y2 - y1]), W, H)
            if b is not None:
                boxes.append(b)
    anchors = list(scene.distractors)
    for i in range(cfg.spurious):
        if anchors and i < len(anchors):
            d = anchors[i]
            noise = rng.normal(0.0, 0.1, 4) * np.array([d.w, d.h, d.w, d.h])
            arr = np.array([d.x + noise[0], d.y + noise[1], d.w + noise[2], d.h + noise[3]])
        else:
            w, h = rng.uniform(6, 24, 2)
            arr = np.array([rng.uniform(0, W - w), rng.uniform(0, H - h), w, h])
        b = _clip_to_image(arr, W, H)
        if b is not None:
            boxes.append(b)
    if not boxes:
        return []
    if scene.gt_boxes:
        m = iou_matrix(boxes_to_array(boxes), boxes_to_array(scene.gt_boxes)).max(axis=1)
    else:
        m = np.zeros(len(boxes))
    u = rng.uniform(0.0, 1.0, len(boxes))
    scores = np.clip(cfg.rho * m + (1.0 - cfg.rho) * u, 0.0, 1.0)
    direction = cfg.direction()
    feats = cfg.feature_signal * (m - 0.5)[:, None] * direction + rng.normal(0.0, 1.0, (len(boxes), cfg.feature_dim))
    return [Detection(b, float(s), f) for b, s, f in zip(boxes, scores, feats)]
