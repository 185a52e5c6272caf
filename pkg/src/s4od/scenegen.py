"""Synthetic curated/web scene sets.

A scene is a noisy background with target objects (checkerboard texture) and
distractors (striped texture with the same mean intensity).  Web scenes are
drawn from a shifted distribution: dimmer textures, rescaled objects, and a
chance of containing no target at all.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .geometry import BBox

CURATED = "curated"
WEB = "web"


@dataclass(frozen=True)
class SceneConfig:
    width: int = 64
    height: int = 64
    channels: int = 3
    count_range: tuple[int, int] = (1, 3)
    size_range: tuple[float, float] = (4.0, 24.0)
    max_aspect: float = 2.0
    distractor_range: tuple[int, int] = (0, 2)
    background_mean: float = 0.3
    noise_sigma: float = 0.05
    target_intensity: float = 0.75
    intensity_spread: float = 0.1
    texture_amplitude: float = 0.12
    distractor_amplitude: float = 0.12
    ring_width: int = 1  # outline drawn in the last channel around targets and distractors
    ring_intensity: float = 0.9
    split: str = CURATED
    # applied only to web scenes
    web_intensity_shift: float = -0.15
    web_size_scale: float = 1.0
    web_absence_prob: float = 0.3
    web_extra_distractors: int = 1
    annotation_jitter: float = 0.0
    id_offset: int = 0

    def __post_init__(self):
        lo, hi = self.size_range
        if not (0 < lo <= hi):
            raise ValueError(f"size_range must satisfy 0 < lo <= hi, got {self.size_range}")
        scale = self.web_size_scale if self.split == WEB else 1.0
        if hi * scale * np.sqrt(self.max_aspect) > min(self.width, self.height):
            raise ValueError(
                f"size_range {self.size_range} (aspect {self.max_aspect}) exceeds image "
                f"{self.width}x{self.height}"
            )
        if not 0.0 <= self.web_absence_prob <= 1.0:
            raise ValueError("web_absence_prob must lie in [0, 1]")
        if self.count_range[0] < 0 or self.count_range[0] > self.count_range[1]:
            raise ValueError(f"bad count_range {self.count_range}")
        if self.split not in (CURATED, WEB):
            raise ValueError(f"split must be {CURATED!r} or {WEB!r}, got {self.split!r}")

    def for_split(self, split: str, **changes) -> "SceneConfig":
        return replace(self, split=split, **changes)


@dataclass
class Scene:
    image: np.ndarray
    gt_boxes: list[BBox]
    image_id: int
    split_tag: str = CURATED
    # rendered (un-jittered) target and distractor extents; hidden from learners
    true_boxes: list[BBox] = field(default_factory=list)
    distractors: list[BBox] = field(default_factory=list)

    @property
    def width(self) -> int:
        return self.image.shape[1]

    @property
    def height(self) -> int:
        return self.image.shape[0]


def _checker(h: int, w: int) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w]
    return np.where((xx + yy) % 2 == 0, 1.0, -1.0)


def _stripes(h: int, w: int, vertical: bool) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w]
    k = xx if vertical else yy
    return np.where(k % 2 == 0, 1.0, -1.0)


def _place(rng, cfg: SceneConfig, taken: list[BBox], scale: float) -> Optional[BBox]:
    lo, hi = cfg.size_range
    for _ in range(30):
        s = rng.uniform(lo, hi) * scale
        log_a = rng.uniform(-np.log(cfg.max_aspect), np.log(cfg.max_aspect))
        w = int(np.clip(round(s * np.exp(log_a / 2)), 2, cfg.width))
        h = int(np.clip(round(s * np.exp(-log_a / 2)), 2, cfg.height))
        x = int(rng.integers(0, cfg.width - w + 1))
        y = int(rng.integers(0, cfg.height - h + 1))
        b = BBox(float(x), float(y), float(w), float(h))
        # keep a one-pixel gap so textures never touch
        if all(
            b.x2 + 1 <= o.x or o.x2 + 1 <= b.x or b.y2 + 1 <= o.y or o.y2 + 1 <= b.y
            for o in taken
        ):
            return b
    return None


def _jitter(rng, b: BBox, sigma: float, W: int, H: int) -> BBox:
    if sigma <= 0:
        return b
    x1, y1, x2, y2 = np.array([b.x, b.y, b.x2, b.y2]) + rng.normal(0.0, sigma, 4)
    x1, x2 = np.clip([x1, x2], 0.0, W)
    y1, y2 = np.clip([y1, y2], 0.0, H)
    if x2 - x1 < 1.0 or y2 - y1 < 1.0:
        return b
    return BBox(float(x1), float(y1), float(x2 - x1), float(y2 - y1))


def generate_scene(cfg: SceneConfig, rng: np.random.Generator, image_id: int = 0) -> Scene:
    W, H, C = cfg.width, cfg.height, cfg.channels
    web = cfg.split == WEB
    shift = cfg.web_intensity_shift if web else 0.0
    scale = cfg.web_size_scale if web else 1.0

    img = cfg.background_mean + rng.normal(0.0, cfg.noise_sigma, (H, W, C))

    n_targets = int(rng.integers(cfg.count_range[0], cfg.count_range[1] + 1))
    if web and rng.random() < cfg.web_absence_prob:
        n_targets = 0
    n_distract = int(rng.integers(cfg.distractor_range[0], cfg.distractor_range[1] + 1))
    if web:
        n_distract += cfg.web_extra_distractors

    taken: list[BBox] = []
    targets: list[BBox] = []
    distractors: list[BBox] = []
    for kind, n in (("target", n_targets), ("distractor", n_distract)):
        for _ in range(n):
            b = _place(rng, cfg, taken, scale)
            if b is None:
                continue
            taken.append(b)
            x, y, w, h = (int(v) for v in b.as_tuple())
            level = cfg.target_intensity + shift + rng.uniform(-cfg.intensity_spread, cfg.intensity_spread)
            if kind == "target":
                tex = cfg.texture_amplitude * _checker(h, w)
                targets.append(b)
            else:
                tex = cfg.distractor_amplitude * _stripes(h, w, bool(rng.integers(2)))
                distractors.append(b)
            patch = img[y:y + h, x:x + w]
            patch[..., 0] = level + tex + rng.normal(0.0, cfg.noise_sigma, (h, w))
            if C > 1:
                patch[..., 1] = 0.5 * (level + cfg.background_mean) + tex + rng.normal(0.0, cfg.noise_sigma, (h, w))
            if C > 2 and cfg.ring_width > 0:
                r = min(cfg.ring_width, w // 2, h // 2)
                ring = np.ones((h, w), dtype=bool)
                ring[r:h - r, r:w - r] = False
                patch[..., C - 1][ring] = cfg.ring_intensity + shift + rng.normal(0.0, cfg.noise_sigma, int(ring.sum()))

    np.clip(img, 0.0, 1.0, out=img)
    gts = [_jitter(rng, b, cfg.annotation_jitter, W, H) for b in targets]
    return Scene(img, gts, image_id, cfg.split, true_boxes=targets, distractors=distractors)


def scene_seed(base: int, index: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([base, index])


def generate_dataset(cfg: SceneConfig, n: int, rng: np.random.Generator) -> list[Scene]:
    """``n`` independent scenes with ids ``cfg.id_offset + i``.

    Each scene gets its own seed derived from one draw of ``rng``, so scene
    ``i`` is reproducible without generating scenes ``0..i-1``.
    """
    if n < 0:
        raise ValueError(f"n must be non-negative, got {n}")
    base = int(rng.integers(2**63 - 1))
    return [
        generate_scene(cfg, np.random.default_rng(scene_seed(base, i)), cfg.id_offset + i)
        for i in range(n)
    ]


def withhold_labels(scenes: list[Scene]) -> list[Scene]:
    """Copy of ``scenes`` with ground truth removed from ``gt_boxes`` (kept in ``true_boxes``)."""
    return [replace(s, gt_boxes=[]) for s in scenes]
