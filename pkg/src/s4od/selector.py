"""Three-way grouping of pseudo boxes into Negative / Positive / Ambiguity.

Training rows come from the teacher's pseudo boxes on the labeled set: each
box is labelled by its best IoU with ground truth, then a two-tower network
learns to predict that label from the box's RoI feature, its confidence and
its normalized geometry.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from enum import IntEnum
from typing import Optional, Sequence

import numpy as np

from .formats import load_manifest, save_manifest
from .geometry import BBox, boxes_to_array, iou_matrix

log = logging.getLogger(__name__)

PARAMS_FORMAT = "s4od-selector-params/1"
N_META = 7  # score, x/W, y/H, w/W, h/H, W, H


class GroupLabel(IntEnum):
    # the order doubles as the argmax tie-break
    NEGATIVE = 0
    POSITIVE = 1
    AMBIGUITY = 2


N_CLASSES = len(GroupLabel)


def label_pseudo_boxes(boxes: Sequence[BBox], gts: Sequence[BBox], gamma_h: float,
                       gamma_l: float) -> np.ndarray:
    """Group each box by its best IoU ``m`` with ``gts``.

    ``m <= gamma_l`` is Negative, ``m >= gamma_h`` Positive, anything between
    Ambiguity.  With no ground truth every box is Negative.
    """
    if not gamma_l < gamma_h:
        raise ValueError(f"need gamma_l < gamma_h, got gamma_l={gamma_l}, gamma_h={gamma_h}")
    n = len(boxes)
    if n == 0:
        return np.zeros(0, dtype=int)
    if len(gts) == 0:
        m = np.zeros(n)
    else:
        m = iou_matrix(boxes_to_array(boxes), boxes_to_array(gts)).max(axis=1)
    out = np.full(n, int(GroupLabel.AMBIGUITY))
    out[m <= gamma_l] = GroupLabel.NEGATIVE
    out[m >= gamma_h] = GroupLabel.POSITIVE
    return out


@dataclass
class SelectorFeatures:
    """Selector inputs for a batch of boxes: RoI vectors and the seven scalar cues."""

    roi: np.ndarray  # (N, F)
    meta: np.ndarray  # (N, 7) score, nx, ny, nw, nh, W, H

    def __len__(self) -> int:
        return len(self.roi)

    def take(self, idx) -> "SelectorFeatures":
        return SelectorFeatures(self.roi[idx], self.meta[idx])

    @classmethod
    def concat(cls, parts: Sequence["SelectorFeatures"], roi_dim: int) -> "SelectorFeatures":
        parts = [p for p in parts if len(p)]
        if not parts:
            return cls(np.zeros((0, roi_dim)), np.zeros((0, N_META)))
        return cls(np.concatenate([p.roi for p in parts]), np.concatenate([p.meta for p in parts]))


def build_features(dets: Sequence, W: int, H: int, roi_dim: Optional[int] = None) -> SelectorFeatures:
    """Features of detections (objects with ``box``, ``score``, ``roi_feature``) from a ``W x H`` image."""
    if not dets:
        return SelectorFeatures(np.zeros((0, roi_dim or 0)), np.zeros((0, N_META)))
    roi = np.stack([np.asarray(d.roi_feature, dtype=float) for d in dets])
    meta = np.array([
        (d.score, d.box.x / W, d.box.y / H, d.box.w / W, d.box.h / H, float(W), float(H)) for d in dets
    ])
    return SelectorFeatures(roi, meta)


@dataclass(frozen=True)
class SelectorConfig:
    hidden_roi: int = 512
    hidden_meta: int = 128
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 1e-4
    epochs: int = 20
    batch_size: int = 64
    grad_clip: float = 10.0

    def to_dict(self) -> dict:
        return asdict(self)


PARAM_NAMES = ("A", "a", "B", "b", "Wo", "bo")


@dataclass
class SelectorParams:
    A: np.ndarray  # (F, hidden_roi)
    a: np.ndarray
    B: np.ndarray  # (7, hidden_meta)
    b: np.ndarray
    Wo: np.ndarray  # (hidden_roi + hidden_meta, 3)
    bo: np.ndarray  # (3,)
    roi_mean: np.ndarray  # frozen standardization of the RoI vector
    roi_scale: np.ndarray
    config: SelectorConfig = field(default_factory=SelectorConfig)

    @property
    def roi_dim(self) -> int:
        return self.A.shape[0]

    @classmethod
    def zeros(cls, roi_dim: int, cfg: SelectorConfig = SelectorConfig()) -> "SelectorParams":
        hr, hm = cfg.hidden_roi, cfg.hidden_meta
        return cls(
            np.zeros((roi_dim, hr)), np.zeros(hr), np.zeros((N_META, hm)), np.zeros(hm),
            np.zeros((hr + hm, N_CLASSES)), np.zeros(N_CLASSES),
            np.zeros(roi_dim), np.ones(roi_dim), cfg,
        )

    @classmethod
    def init(cls, roi_dim: int, cfg: SelectorConfig, rng: np.random.Generator) -> "SelectorParams":
        p = cls.zeros(roi_dim, cfg)
        p.A = rng.normal(0.0, np.sqrt(2.0 / roi_dim), p.A.shape)
        p.B = rng.normal(0.0, np.sqrt(2.0 / N_META), p.B.shape)
        p.Wo = rng.normal(0.0, np.sqrt(1.0 / p.Wo.shape[0]), p.Wo.shape)
        return p

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: getattr(self, k) for k in PARAM_NAMES}

    def copy(self) -> "SelectorParams":
        return SelectorParams(**{k: v.copy() for k, v in self.arrays().items()},
                              roi_mean=self.roi_mean.copy(), roi_scale=self.roi_scale.copy(), config=self.config)

    def flat(self) -> np.ndarray:
        return np.concatenate([v.ravel() for v in self.arrays().values()])

    def with_flat(self, vec: np.ndarray) -> "SelectorParams":
        out = self.copy()
        pos = 0
        for k, v in self.arrays().items():
            setattr(out, k, np.asarray(vec[pos:pos + v.size], dtype=float).reshape(v.shape).copy())
            pos += v.size
        return out

    def save(self, path) -> None:
        arrays = {**self.arrays(), "roi_mean": self.roi_mean, "roi_scale": self.roi_scale}
        save_manifest(path, PARAMS_FORMAT, self.config.to_dict(), arrays)

    @classmethod
    def load(cls, path) -> "SelectorParams":
        config, arrays, _ = load_manifest(path, PARAMS_FORMAT)
        cfg = SelectorConfig(**config)
        return cls(**{k: arrays[k] for k in PARAM_NAMES}, roi_mean=arrays["roi_mean"],
                   roi_scale=arrays["roi_scale"], config=cfg)


def _check_dims(params: SelectorParams, feats: SelectorFeatures) -> None:
    if feats.roi.ndim != 2 or feats.roi.shape[1] != params.roi_dim:
        raise ValueError(f"roi features have shape {feats.roi.shape}, selector expects (N, {params.roi_dim})")
    if feats.meta.ndim != 2 or feats.meta.shape[1] != N_META:
        raise ValueError(f"meta features have shape {feats.meta.shape}, selector expects (N, {N_META})")


def _forward(params: SelectorParams, feats: SelectorFeatures):
    xr = (feats.roi - params.roi_mean) * params.roi_scale
    hr = np.maximum(xr @ params.A + params.a, 0.0)
    hm = np.maximum(feats.meta @ params.B + params.b, 0.0)
    h = np.concatenate([hr, hm], axis=1)
    return xr, hr, hm, h, h @ params.Wo + params.bo


def logits(params: SelectorParams, feats: SelectorFeatures) -> np.ndarray:
    _check_dims(params, feats)
    return _forward(params, feats)[-1]


def softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def classify(params: SelectorParams, feats: SelectorFeatures) -> tuple[np.ndarray, np.ndarray]:
    """Group label per box and the three class probabilities (Negative, Positive, Ambiguity)."""
    z = logits(params, feats)
    return labels_from_logits(z), softmax(z)


def labels_from_logits(z: np.ndarray) -> np.ndarray:
    # argmax returns the first maximum, so ties follow GroupLabel order
    return np.argmax(z, axis=-1).astype(int)


def class_weights(labels: np.ndarray) -> np.ndarray:
    """Inverse-frequency weights, scaled so a balanced set gets weight 1 per class."""
    counts = np.bincount(labels, minlength=N_CLASSES).astype(float)
    present = counts > 0
    w = np.zeros(N_CLASSES)
    w[present] = len(labels) / (present.sum() * counts[present])
    return w


def selector_loss(params: SelectorParams, feats: SelectorFeatures, labels: np.ndarray,
                  weights: np.ndarray) -> tuple[float, dict[str, np.ndarray]]:
    """Class-weighted softmax cross-entropy, averaged over the batch, with gradients."""
    _check_dims(params, feats)
    n = len(labels)
    xr, hr, hm, h, z = _forward(params, feats)
    zs = z - z.max(axis=1, keepdims=True)
    logp = zs - np.log(np.exp(zs).sum(axis=1, keepdims=True))
    w = weights[labels]
    loss = float(-(w * logp[np.arange(n), labels]).sum() / n)

    dz = np.exp(logp)
    dz[np.arange(n), labels] -= 1.0
    dz *= (w / n)[:, None]
    dh = dz @ params.Wo.T
    hr_n = hr.shape[1]
    dhr = dh[:, :hr_n] * (hr > 0)
    dhm = dh[:, hr_n:] * (hm > 0)
    grads = {
        "A": xr.T @ dhr, "a": dhr.sum(axis=0),
        "B": feats.meta.T @ dhm, "b": dhm.sum(axis=0),
        "Wo": h.T @ dz, "bo": dz.sum(axis=0),
    }
    return loss, grads


def train_selector(feats: SelectorFeatures, labels: Sequence[int], cfg: SelectorConfig = SelectorConfig(),
                   seed: int = 0) -> tuple[SelectorParams, list[float]]:
    """Mini-batch SGD with momentum; returns params and the per-epoch mean loss."""
    labels = np.asarray(labels, dtype=int)
    if len(labels) != len(feats):
        raise ValueError(f"{len(feats)} feature rows but {len(labels)} labels")
    if len(np.unique(labels)) < 2:
        raise ValueError(f"selector training needs at least two groups, got {sorted(set(labels.tolist()))}")
    rng = np.random.default_rng([seed, 0x5E1])
    params = SelectorParams.init(feats.roi.shape[1], cfg, rng)
    params.roi_mean = feats.roi.mean(axis=0)
    params.roi_scale = 1.0 / np.maximum(feats.roi.std(axis=0), 1e-6)
    weights = class_weights(labels)
    velocity = {k: np.zeros_like(v) for k, v in params.arrays().items()}
    losses = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(labels))
        total = 0.0
        for start in range(0, len(order), cfg.batch_size):
            idx = np.sort(order[start:start + cfg.batch_size])
            loss, grads = selector_loss(params, feats.take(idx), labels[idx], weights)
            if not np.isfinite(loss):
                raise FloatingPointError(f"selector loss became {loss!r} in epoch {epoch}")
            norm = np.sqrt(sum(float((g * g).sum()) for g in grads.values()))
            scale = cfg.grad_clip / norm if norm > cfg.grad_clip else 1.0
            for k, g in grads.items():
                p = getattr(params, k)
                g = g * scale
                if k in ("A", "B", "Wo"):
                    g = g + cfg.weight_decay * p
                v = velocity[k]
                v *= cfg.momentum
                v += g
                p -= cfg.lr * v
            total += loss * len(idx)
        losses.append(total / len(labels))
        log.debug("selector epoch %d loss %.5f", epoch, losses[-1])
    return params, losses


def confidence_rule(scores: np.ndarray, thresh: float = 0.7) -> np.ndarray:
    """Score-threshold grouping: Positive above ``thresh``, Negative otherwise, never Ambiguity."""
    scores = np.asarray(scores, dtype=float)
    return np.where(scores > thresh, int(GroupLabel.POSITIVE), int(GroupLabel.NEGATIVE))
