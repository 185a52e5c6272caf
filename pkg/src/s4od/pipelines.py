"""Training regimes built on one teacher: BD, SOD, S2OD, S4OD, CSD and CSD-selective.

Every regime shares the same skeleton.  A teacher trained on the curated
set D labels the web set U.  The pseudo boxes are grouped, a student is
pre-trained on U with those groups, then fine-tuned on D with ground truth.
The regimes differ only in how boxes are grouped and in whether a
consistency term joins the pre-training loss.  The CSD baselines instead
train jointly on D and U, with consistency as the only signal from U.

Random streams are keyed by ``(seed, stage)`` so that switching a stage off
(for instance a zero consistency weight) never shifts another stage's draws.
"""

from __future__ import annotations

import json
import logging
import time
import warnings
from dataclasses import asdict, dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Callable, Optional, Sequence, Union

import numpy as np
import scipy.sparse as sp

from .detector import (
    N_BINS, Detection, DetectorConfig, DetectorParams, SimTeacherConfig, Supervision, TrainItem, _featurize,
    _inputs, anchor_set, assign_anchors, backprop_featurizer, detect, grid_shape, image_loss,
    pool_matrix, prepare, raw_cell_stats, simulated_teacher, train_detector, zero_grads,
)
from .evaluation import APReport, CalibrationResult, calibrate_gamma_h, coco_ap, max_iou
from .geometry import (
    BBox, Transform, flip_transform, output_size, rotate_flip_box, sample_transform, transform_box, transform_image,
)
from .scenegen import WEB, Scene, SceneConfig, generate_dataset, withhold_labels
from .selector import (
    GroupLabel, SelectorConfig, SelectorFeatures, SelectorParams, build_features, classify,
    confidence_rule, label_pseudo_boxes, train_selector,
)

log = logging.getLogger(__name__)


# stage keys for independent random streams
STAGE_TEACHER = 1
STAGE_SELECTOR = 2
STAGE_PRETRAIN = 3
STAGE_FINETUNE = 4
STAGE_TRANSFORM = 5
STAGE_JOINT = 6
STAGE_WEB_ORDER = 7
STAGE_DATA = 8


class PipelineError(RuntimeError):
    """A pipeline stage could not run; the message says which and why."""


class Method(str, Enum):
    BD = "BD"
    SOD = "SOD"
    S2OD = "S2OD"
    S4OD = "S4OD"
    CSD = "CSD"
    CSD_SELECTIVE = "CSD-selective"


def stage_seed(seed: int, stage: int, *more: int) -> int:
    return int(np.random.SeedSequence([seed, stage, *more]).generate_state(1)[0])


@dataclass(frozen=True)
class PipelineConfig:
    method: Method = Method.S4OD
    sod_conf_thresh: float = 0.7
    gamma_h: Union[float, str] = "calibrate"
    gamma_l: float = 0.05
    calibration_metric: str = "ap_50_95"
    consistency_weight: float = 1.0
    teacher_epochs: int = 30
    pretrain_epochs: int = 20
    finetune_epochs: int = 15
    iterations: int = 1
    seed: int = 0
    # pseudo labeling and evaluation
    score_floor: float = 0.05
    nms_iou: float = 0.5
    pre_nms_top_k: int = 1000
    max_detections: int = 100
    detector: DetectorConfig = field(default_factory=DetectorConfig)
    selector: SelectorConfig = field(default_factory=SelectorConfig)

    def __post_init__(self):
        object.__setattr__(self, "method", Method(self.method))
        if not 0.0 < self.sod_conf_thresh <= 1.0:
            raise ValueError(f"sod_conf_thresh must lie in (0, 1], got {self.sod_conf_thresh}")
        if not 0.0 < self.gamma_l < 1.0:
            raise ValueError(f"gamma_l must lie in (0, 1), got {self.gamma_l}")
        if isinstance(self.gamma_h, str):
            if self.gamma_h != "calibrate":
                raise ValueError(f"gamma_h must be a number or 'calibrate', got {self.gamma_h!r}")
        else:
            if not 0.0 < self.gamma_h < 1.0:
                raise ValueError(f"gamma_h must lie in (0, 1), got {self.gamma_h}")
            if self.gamma_l >= self.gamma_h:
                raise ValueError(f"gamma_l ({self.gamma_l}) must be below gamma_h ({self.gamma_h})")
        if self.iterations < 1:
            raise ValueError(f"iterations must be >= 1, got {self.iterations}")
        if self.consistency_weight < 0:
            raise ValueError("consistency_weight must be non-negative")
        for name in ("teacher_epochs", "pretrain_epochs", "finetune_epochs"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["method"] = self.method.value
        d["detector"] = self.detector.to_dict()
        d["selector"] = self.selector.to_dict()
        return d


# -- data --------------------------------------------------------------------

@dataclass
class Datasets:
    curated: list[Scene]  # D, with (jittered) ground truth
    web: list[Scene]  # U, labels withheld; hidden extents kept in true_boxes
    test: list[Scene]  # held-out curated scenes
    _raw: dict = field(default_factory=dict, repr=False, compare=False)
    _memo: dict = field(default_factory=dict, repr=False, compare=False)

    def memo(self, what: str, teacher, cfg: "PipelineConfig", compute: Callable):
        """Cache per (teacher object, detection settings); the teacher is kept alive with the entry."""
        key = (what, id(teacher), cfg.score_floor, cfg.nms_iou, cfg.pre_nms_top_k, cfg.max_detections)
        hit = self._memo.get(key)
        if hit is None or hit[0] is not teacher:
            hit = self._memo[key] = (teacher, compute())
        return hit[1]

    def raw(self, scene: Scene, cfg: DetectorConfig, transform: Optional[Transform] = None) -> np.ndarray:
        """Cell statistics of ``scene`` (optionally transformed), computed once per detector layout."""
        key = (scene.image_id, cfg.stride, cfg.context, transform)
        r = self._raw.get(key)
        if r is None:
            img = scene.image if transform is None else transform_image(scene.image, transform)
            r = self._raw[key] = raw_cell_stats(img, cfg.stride, cfg.context)
        return r

    def items(self, scenes: Sequence[Scene], sups: Sequence[Supervision], cfg: DetectorConfig) -> list[TrainItem]:
        return [prepare(s.image, s.image_id, sup, cfg, self.raw(s, cfg)) for s, sup in zip(scenes, sups)]

    def curated_items(self, cfg: DetectorConfig) -> list[TrainItem]:
        return self.items(self.curated, [Supervision(list(s.gt_boxes)) for s in self.curated], cfg)


@dataclass(frozen=True)
class BenchmarkConfig:
    n_curated: int = 500
    n_web: int = 2000
    n_test: int = 300
    annotation_jitter: float = 1.5
    scene: SceneConfig = field(default_factory=lambda: SceneConfig(size_range=(8.0, 24.0)))

    def to_dict(self) -> dict:
        return asdict(self)


def make_datasets(bench: BenchmarkConfig, seed: int) -> Datasets:
    rng = np.random.default_rng([seed, STAGE_DATA])
    base = bench.scene
    curated = generate_dataset(replace(base, annotation_jitter=bench.annotation_jitter, id_offset=0),
                               bench.n_curated, rng)
    web = generate_dataset(base.for_split(WEB, id_offset=100_000), bench.n_web, rng)
    test = generate_dataset(replace(base, id_offset=200_000), bench.n_test, rng)
    return Datasets(curated, withhold_labels(web), test)


# -- teacher and pseudo labels -------------------------------------------------

Teacher = Union[DetectorParams, Callable[[Scene], list[Detection]]]


def run_detector(params: DetectorParams, scenes: Sequence[Scene], cfg: PipelineConfig) -> dict[int, list[Detection]]:
    return {
        s.image_id: detect(s.image, params, cfg.score_floor, cfg.nms_iou, cfg.pre_nms_top_k, cfg.max_detections)
        for s in scenes
    }


def pseudo_label(teacher: Teacher, scenes: Sequence[Scene], cfg: PipelineConfig = PipelineConfig()
                 ) -> dict[int, list[Detection]]:
    """Teacher detections per image; ``teacher`` is detector params or a callable such as a simulated teacher."""
    if isinstance(teacher, DetectorParams):
        return run_detector(teacher, scenes, cfg)
    return {s.image_id: list(teacher(s)) for s in scenes}


def simulated(cfg: SimTeacherConfig, seed: int) -> Callable[[Scene], list[Detection]]:
    """A simulated teacher whose output for a scene depends only on ``(seed, image_id)``."""
    def run(scene: Scene) -> list[Detection]:
        return simulated_teacher(scene, cfg, np.random.default_rng([seed, scene.image_id]))
    return run


def train_teacher(curated: Sequence[Scene], cfg: PipelineConfig, items: Optional[list[TrainItem]] = None
                  ) -> DetectorParams:
    if items is None:
        items = [prepare(s.image, s.image_id, Supervision(list(s.gt_boxes)), cfg.detector) for s in curated]
    return train_detector(items, cfg.detector, stage_seed(cfg.seed, STAGE_TEACHER), cfg.teacher_epochs).params


def evaluate(params: DetectorParams, scenes: Sequence[Scene], cfg: PipelineConfig) -> APReport:
    dets = run_detector(params, scenes, cfg)
    return coco_ap(dets, {s.image_id: s.gt_boxes for s in scenes})


# -- grouping ----------------------------------------------------------------

# (detections, scene) -> GroupLabel per detection
Grouper = Callable[[Sequence[Detection], Scene], np.ndarray]


def confidence_grouper(thresh: float) -> Grouper:
    def group(dets, scene):
        return confidence_rule(np.array([d.score for d in dets]), thresh)
    return group


def selector_grouper(params: SelectorParams) -> Grouper:
    def group(dets, scene):
        if not dets:
            return np.zeros(0, dtype=int)
        labels, _ = classify(params, build_features(dets, scene.width, scene.height))
        return labels
    return group


def oracle_grouper(gamma_h: float, gamma_l: float) -> Grouper:
    """Groups from the hidden true extents; an upper bound for tests."""
    def group(dets, scene):
        return label_pseudo_boxes([d.box for d in dets], scene.true_boxes, gamma_h, gamma_l)
    return group


def all_ambiguous(dets, scene) -> np.ndarray:
    return np.full(len(dets), int(GroupLabel.AMBIGUITY))


@dataclass
class SelectorRun:
    params: SelectorParams
    gamma_h: float
    calibration: Optional[CalibrationResult]
    n_rows: int
    losses: list[float]


def fit_selector(teacher: Teacher, curated: Sequence[Scene], cfg: PipelineConfig) -> SelectorRun:
    """Calibrate gamma_h and train the selector on the teacher's own boxes over the labeled set."""
    pseudo = pseudo_label(teacher, curated, cfg)
    gts = {s.image_id: s.gt_boxes for s in curated}
    calib = None
    if cfg.gamma_h == "calibrate":
        grid = [g for g in (0.5, 0.55, 0.6, 0.65, 0.7, 0.75, 0.8, 0.85, 0.9, 0.95) if g > cfg.gamma_l]
        try:
            calib = calibrate_gamma_h(pseudo, gts, grid, cfg.calibration_metric)
        except ValueError as e:
            raise PipelineError(f"gamma_h calibration failed: {e}") from None
        gamma_h = calib.gamma_h
    else:
        gamma_h = float(cfg.gamma_h)
    feats, labels = [], []
    for s in curated:
        dets = pseudo[s.image_id]
        feats.append(build_features(dets, s.width, s.height, cfg.detector.roi_dim))
        labels.append(label_pseudo_boxes([d.box for d in dets], s.gt_boxes, gamma_h, cfg.gamma_l))
    feats = SelectorFeatures.concat(feats, cfg.detector.roi_dim)
    labels = np.concatenate(labels) if labels else np.zeros(0, int)
    try:
        params, losses = train_selector(feats, labels, cfg.selector, stage_seed(cfg.seed, STAGE_SELECTOR))
    except (ValueError, FloatingPointError) as e:
        raise PipelineError(f"selector training failed on {len(labels)} teacher boxes: {e}") from None
    return SelectorRun(params, gamma_h, calib, len(labels), losses)


@dataclass
class Grouping:
    """Grouped pseudo boxes for one web image."""

    image_id: int
    dets: list[Detection]
    labels: np.ndarray

    _by_label: dict = field(default_factory=dict, repr=False, compare=False)

    def boxes(self, label: GroupLabel) -> list[BBox]:
        hit = self._by_label.get(int(label))
        if hit is None:
            hit = self._by_label[int(label)] = [d.box for d, l in zip(self.dets, self.labels.tolist()) if l == label]
        return list(hit)

    @property
    def supervision(self) -> Supervision:
        return Supervision(self.boxes(GroupLabel.POSITIVE), self.boxes(GroupLabel.AMBIGUITY))


def group_pseudo_boxes(pseudo: dict[int, list[Detection]], scenes: Sequence[Scene],
                       grouper: Grouper) -> dict[int, Grouping]:
    return {s.image_id: Grouping(s.image_id, pseudo[s.image_id], np.asarray(grouper(pseudo[s.image_id], s), int))
            for s in scenes}


def grouping_stats(groups: dict[int, Grouping], scenes: Sequence[Scene], gamma: float = 0.5) -> dict:
    """Group sizes and Positive-group precision/recall against the hidden true extents."""
    counts = {g.name.lower(): 0 for g in GroupLabel}
    tp = n_pos = n_true = covered = 0
    for s in scenes:
        grp = groups[s.image_id]
        for g in GroupLabel:
            counts[g.name.lower()] += int((grp.labels == g).sum())
        pos = grp.boxes(GroupLabel.POSITIVE)
        n_pos += len(pos)
        n_true += len(s.true_boxes)
        if pos and s.true_boxes:
            tp += int((max_iou(pos, s.true_boxes) >= gamma).sum())
            covered += int((max_iou(s.true_boxes, pos) >= gamma).sum())
    return {
        **counts,
        "positive_precision": tp / n_pos if n_pos else None,
        "positive_recall": covered / n_true if n_true else None,
        "match_iou": gamma,
    }


# -- consistency -------------------------------------------------------------

@dataclass
class _Branch:
    raw: np.ndarray
    x: np.ndarray
    pre: np.ndarray
    fm: np.ndarray
    gh: int
    gw: int


def _branch(img: np.ndarray, params: DetectorParams, raw: Optional[np.ndarray] = None) -> _Branch:
    cfg = params.config
    if raw is None:
        raw = raw_cell_stats(img, cfg.stride, cfg.context)
    x = _inputs(raw, params)
    pre, fm = _featurize(x, params)
    return _Branch(raw, x, pre, fm, raw.shape[0], raw.shape[1])


def bin_permutation(transform: Transform) -> np.ndarray:
    """For each RoI bin of a box, the bin of the transformed box that covers the same part of it."""
    n = N_BINS
    perm = np.zeros(n * n, dtype=int)
    for by in range(n):
        for bx in range(n):
            m = rotate_flip_box(BBox(float(bx), float(by), 1.0, 1.0), transform.rotation, transform.hflip, n, n)
            perm[by * n + bx] = int(m.y) * n + int(m.x)
    return perm


@dataclass
class PairPools:
    """RoI pooling of box pairs: rows of ``src`` on the image, bin-aligned rows of ``dst`` on its transform."""
    src_boxes: list[BBox]
    dst_boxes: list[BBox]
    src: sp.csr_matrix
    dst: sp.csr_matrix


def pair_pools(boxes: Sequence[BBox], transform: Transform, W: int, H: int, cfg: DetectorConfig) -> PairPools:
    pairs = [(b, tb) for b, tb in ((b, transform_box(b, transform, W, H)) for b in boxes) if tb is not None]
    tW, tH = output_size(transform, W, H)
    gh, gw = grid_shape(W, H, cfg.stride)
    tgh, tgw = grid_shape(tW, tH, cfg.stride)
    if not pairs:
        return PairPools([], [], sp.csr_matrix((0, gh * gw)), sp.csr_matrix((0, tgh * tgw)))
    n = len(pairs)
    nb = N_BINS * N_BINS
    Ms = pool_matrix(np.array([p[0].as_tuple() for p in pairs]), gh, gw, cfg.stride)
    Md = pool_matrix(np.array([p[1].as_tuple() for p in pairs]), tgh, tgw, cfg.stride)
    Md = Md[(np.arange(n)[:, None] * nb + bin_permutation(transform)[None, :]).ravel()]
    return PairPools([p[0] for p in pairs], [p[1] for p in pairs], sp.csr_matrix(Ms), sp.csr_matrix(Md))


def consistency_loss(params: DetectorParams, img: np.ndarray, positives: Sequence[BBox], transform: Transform,
                     ambiguous: Sequence[BBox] = (), detection: bool = True,
                     grads: Optional[dict] = None, weight: float = 1.0, raw: Optional[np.ndarray] = None,
                     traw: Optional[np.ndarray] = None, pools: Optional[PairPools] = None) -> float:
    """Feature consistency under ``transform``, optionally plus the detection loss on the transformed image.

    The consistency term is the sum over ``positives`` of the L2 distance
    between the RoI feature of the box on ``img`` and the RoI feature of the
    transformed box on the transformed image, with the transformed box's bins
    reordered so that each bin is compared with the bin covering the same
    part of the object.  The detection term uses the
    transformed positives and ambiguous boxes as supervision.  Gradients
    (times ``weight``) are added into ``grads`` when given.  ``raw`` and
    ``traw`` may carry precomputed cell statistics of ``img`` and of the
    transformed image, ``pools`` the precomputed ``pair_pools`` of ``positives``.
    """
    cfg = params.config
    H, W = img.shape[:2]
    if pools is None:
        pools = pair_pools(positives, transform, W, H, cfg)
    if traw is None:
        traw = raw_cell_stats(transform_image(img, transform), cfg.stride, cfg.context)
    src = _branch(img, params, raw)
    dst = _branch(None, params, traw)
    d = cfg.d_feat
    loss = 0.0
    n = len(pools.src_boxes)
    if n:
        diff = (pools.src @ src.fm).reshape(n, -1) - (pools.dst @ dst.fm).reshape(n, -1)
        norms = np.sqrt((diff * diff).sum(axis=1))
        loss += float(norms.sum())
        # the norm is not differentiable at 0; take the zero subgradient there
        g = np.divide(diff, norms[:, None], out=np.zeros_like(diff), where=norms[:, None] > 0)
        g = g.reshape(n * N_BINS * N_BINS, d)
    if detection:
        t_amb = [tb for tb in (transform_box(b, transform, W, H) for b in ambiguous) if tb is not None]
        anchors = anchor_set(*output_size(transform, W, H), cfg)
        assign = assign_anchors(anchors, Supervision(list(pools.dst_boxes), t_amb), cfg)
        if grads is not None:
            loss += image_loss(dst.raw, anchors, assign, params, grads, weight, inputs=dst.x)
        else:
            loss += image_loss(dst.raw, anchors, assign, params, inputs=dst.x)
    if grads is not None and n:
        backprop_featurizer(src.x, src.pre, pools.src.T @ g, params, grads, weight)
        backprop_featurizer(dst.x, dst.pre, -(pools.dst.T @ g), params, grads, weight)
    return loss


def _web_transform(seed: int, epoch: int, image_id: int, positives, W: int, H: int) -> Transform:
    rng = np.random.default_rng([seed, STAGE_TRANSFORM, epoch, image_id])
    return sample_transform(rng, positives, W, H)


def s4od_extra_loss(web: dict[int, Scene], groups: dict[int, Grouping], weight: float, seed: int,
                    raw_of: Optional[Callable[[Scene], np.ndarray]] = None):
    """Per-batch consistency term over each web image's Positive group, one fresh transform per epoch."""
    def extra(params, batch: Sequence[TrainItem], grads, epoch):
        cons = zero_grads(params)
        total = 0.0
        w = 1.0 / len(batch)
        for it in batch:
            s = web[it.image_id]
            grp = groups[it.image_id]
            pos = grp.boxes(GroupLabel.POSITIVE)
            t = _web_transform(seed, epoch, it.image_id, pos, s.width, s.height)
            total += w * consistency_loss(params, s.image, pos, t, grp.boxes(GroupLabel.AMBIGUITY),
                                          detection=True, grads=cons, weight=w, raw=raw_of and raw_of(s))
        for k, g in cons.items():
            grads[k] += weight * g
        return weight * total
    return extra


def csd_extra_loss(web: Sequence[Scene], groups: dict[int, Grouping], weight: float, selective: bool,
                   batch_size: int, seed: int, raw_of: Optional[Callable[..., np.ndarray]] = None):
    """Flip consistency on a cycling batch of web images, alongside each labeled batch."""
    rng = np.random.default_rng([seed, STAGE_WEB_ORDER])
    state = {"order": np.zeros(0, int), "pos": 0}
    flip = flip_transform()

    def next_batch():
        if state["pos"] + batch_size > len(state["order"]):
            state["order"] = rng.permutation(len(web))
            state["pos"] = 0
        idx = state["order"][state["pos"]:state["pos"] + batch_size]
        state["pos"] += batch_size
        return sorted((web[i] for i in idx), key=lambda s: s.image_id)

    pools: dict[int, PairPools] = {}

    def pools_of(s: Scene, cfg: DetectorConfig) -> PairPools:
        # the flip and the boxes never change, so the pooling pairs are built once per image
        hit = pools.get(s.image_id)
        if hit is None:
            grp = groups[s.image_id]
            boxes = grp.boxes(GroupLabel.POSITIVE) if selective else [d.box for d in grp.dets]
            hit = pools[s.image_id] = pair_pools(boxes, flip, s.width, s.height, cfg)
        return hit

    def extra(params, batch, grads, epoch):
        scenes = next_batch()
        cons = zero_grads(params)
        total = 0.0
        w = 1.0 / len(scenes)
        for s in scenes:
            pp = pools_of(s, params.config)
            total += w * consistency_loss(params, s.image, pp.src_boxes, flip, detection=False, grads=cons, weight=w,
                                          raw=raw_of and raw_of(s), traw=raw_of and raw_of(s, flip), pools=pp)
        for k, g in cons.items():
            grads[k] += weight * g
        return weight * total
    return extra


# -- runs --------------------------------------------------------------------

@dataclass
class RunRecord:
    method: str
    seed: int
    iteration: int
    teacher: dict  # APReport values of the teacher on the test set
    student: dict
    gamma_h: Optional[float] = None
    gamma_table: Optional[list] = None
    pseudo: Optional[dict] = None  # grouping statistics on U
    pretrain_skipped: bool = False
    seconds: float = 0.0
    config: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, d: dict) -> "RunRecord":
        return cls(**d)


@dataclass
class RunResult:
    params: DetectorParams
    record: RunRecord
    selector: Optional[SelectorParams] = None


def _record(cfg: PipelineConfig, method: Method, teacher_ap: dict, student: DetectorParams, data: Datasets,
            t0: float, iteration: int = 1, **kw) -> RunRecord:
    return RunRecord(
        method=method.value, seed=cfg.seed, iteration=iteration, teacher=teacher_ap,
        student=evaluate(student, data.test, cfg).values(), seconds=time.perf_counter() - t0,
        config=cfg.to_dict(), **kw,
    )


def _finetune(data: Datasets, cfg: PipelineConfig, init: Optional[DetectorParams]) -> DetectorParams:
    # ground truth of D only; pseudo boxes never reach this stage
    items = data.curated_items(cfg.detector)
    return train_detector(items, cfg.detector, stage_seed(cfg.seed, STAGE_FINETUNE), cfg.finetune_epochs,
                          init=init).params


def self_train(data: Datasets, teacher: Teacher, grouper: Grouper, cfg: PipelineConfig,
               consistency_weight: float = 0.0, use_consistency: bool = False,
               pseudo: Optional[dict[int, list[Detection]]] = None):
    """Pseudo-label U, group, pre-train a student on U, fine-tune on D.  Returns ``(params, groups, skipped)``.

    ``pseudo`` may carry the teacher's detections on U when already computed.
    """
    if pseudo is None:
        pseudo = web_pseudo_labels(data, teacher, cfg)
    groups = group_pseudo_boxes(pseudo, data.web, grouper)
    n_pos = sum(int((g.labels == GroupLabel.POSITIVE).sum()) for g in groups.values())
    skipped = False
    if n_pos == 0:
        warnings.warn("no pseudo box was grouped Positive; skipping pre-training and fine-tuning only",
                      RuntimeWarning, stacklevel=2)
        skipped = True
        pre = None
    else:
        items = data.items(data.web, [groups[s.image_id].supervision for s in data.web], cfg.detector)
        extra = None
        if use_consistency:
            web = {s.image_id: s for s in data.web}
            extra = s4od_extra_loss(web, groups, consistency_weight, cfg.seed,
                                    lambda s: data.raw(s, cfg.detector))
        pre = train_detector(items, cfg.detector, stage_seed(cfg.seed, STAGE_PRETRAIN), cfg.pretrain_epochs,
                             extra_loss=extra).params
    return _finetune(data, cfg, pre), groups, skipped


def web_pseudo_labels(data: Datasets, teacher: Teacher, cfg: PipelineConfig) -> dict[int, list[Detection]]:
    return data.memo("web", teacher, cfg, lambda: pseudo_label(teacher, data.web, cfg))


def _teacher_ap(teacher: Teacher, data: Datasets, cfg: PipelineConfig) -> dict:
    def compute():
        gts = {s.image_id: s.gt_boxes for s in data.test}
        return coco_ap(pseudo_label(teacher, data.test, cfg), gts).values()
    return data.memo("test_ap", teacher, cfg, compute)


def run_bd(data: Datasets, cfg: PipelineConfig) -> RunResult:
    t0 = time.perf_counter()
    params = train_teacher(data.curated, cfg, data.curated_items(cfg.detector))
    ap = evaluate(params, data.test, cfg).values()
    rec = RunRecord(Method.BD.value, cfg.seed, 1, ap, ap, seconds=time.perf_counter() - t0, config=cfg.to_dict())
    return RunResult(params, rec)


def run_sod(data: Datasets, cfg: PipelineConfig, teacher: Teacher) -> RunResult:
    t0 = time.perf_counter()
    params, groups, skipped = self_train(data, teacher, confidence_grouper(cfg.sod_conf_thresh), cfg)
    rec = _record(cfg, Method.SOD, _teacher_ap(teacher, data, cfg), params, data, t0,
                  pseudo=grouping_stats(groups, data.web), pretrain_skipped=skipped)
    return RunResult(params, rec)


def run_s2od(data: Datasets, cfg: PipelineConfig, teacher: Teacher, grouper: Optional[Grouper] = None,
             method: Method = Method.S2OD) -> RunResult:
    """Selective self-training; ``grouper`` replaces the learned selector when given."""
    t0 = time.perf_counter()
    sel = None
    if grouper is None:
        sel = fit_selector(teacher, data.curated, cfg)
        grouper = selector_grouper(sel.params)
    use_cons = method == Method.S4OD
    params, groups, skipped = self_train(data, teacher, grouper, cfg, cfg.consistency_weight, use_cons)
    rec = _record(
        cfg, method, _teacher_ap(teacher, data, cfg), params, data, t0,
        gamma_h=None if sel is None else sel.gamma_h,
        gamma_table=None if sel is None or sel.calibration is None else sel.calibration.table,
        pseudo=grouping_stats(groups, data.web), pretrain_skipped=skipped,
    )
    return RunResult(params, rec, None if sel is None else sel.params)


def run_s4od(data: Datasets, cfg: PipelineConfig, teacher: Teacher, grouper: Optional[Grouper] = None) -> RunResult:
    return run_s2od(data, cfg, teacher, grouper, method=Method.S4OD)


def run_csd(data: Datasets, cfg: PipelineConfig, teacher: Teacher, selective: bool = False,
            grouper: Optional[Grouper] = None) -> RunResult:
    """Joint training on D (detection loss) and U (flip consistency only).

    Plain CSD applies consistency to every pseudo box; the selective variant
    keeps only the selector's Positive group.
    """
    t0 = time.perf_counter()
    method = Method.CSD_SELECTIVE if selective else Method.CSD
    sel = None
    if grouper is None:
        if selective:
            sel = fit_selector(teacher, data.curated, cfg)
            grouper = selector_grouper(sel.params)
        else:
            grouper = all_ambiguous  # grouping is unused when every box takes part
    pseudo = web_pseudo_labels(data, teacher, cfg)
    groups = group_pseudo_boxes(pseudo, data.web, grouper)
    items = data.curated_items(cfg.detector)
    seed = stage_seed(cfg.seed, STAGE_JOINT)
    extra = csd_extra_loss(data.web, groups, cfg.consistency_weight, selective, cfg.detector.batch_size, seed,
                           lambda s, t=None: data.raw(s, cfg.detector, t))
    params = train_detector(items, cfg.detector, seed, cfg.teacher_epochs, extra_loss=extra).params
    rec = _record(cfg, method, _teacher_ap(teacher, data, cfg), params, data, t0,
                  gamma_h=None if sel is None else sel.gamma_h,
                  gamma_table=None if sel is None or sel.calibration is None else sel.calibration.table,
                  pseudo=grouping_stats(groups, data.web) if selective else None)
    return RunResult(params, rec, None if sel is None else sel.params)


def run_method(data: Datasets, cfg: PipelineConfig, teacher: Optional[Teacher] = None) -> RunResult:
    m = cfg.method
    if m == Method.BD:
        return run_bd(data, cfg)
    if teacher is None:
        teacher = train_teacher(data.curated, cfg)
    if m == Method.SOD:
        return run_sod(data, cfg, teacher)
    if m == Method.S2OD:
        return run_s2od(data, cfg, teacher)
    if m == Method.S4OD:
        return run_s4od(data, cfg, teacher)
    return run_csd(data, cfg, teacher, selective=m == Method.CSD_SELECTIVE)


def iterate(data: Datasets, cfg: PipelineConfig, k: Optional[int] = None,
            teacher: Optional[Teacher] = None) -> list[RunResult]:
    """Run ``cfg.method`` ``k`` times, each student becoming the next teacher."""
    k = cfg.iterations if k is None else k
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    out = []
    for i in range(1, k + 1):
        res = run_method(data, cfg, teacher)
        res.record.iteration = i
        out.append(res)
        teacher = res.params
    return out


# -- benchmark ---------------------------------------------------------------

BENCHMARK_METHODS = (Method.BD, Method.SOD, Method.S2OD, Method.S4OD, Method.CSD, Method.CSD_SELECTIVE)


def run_benchmark_seed(bench: BenchmarkConfig, cfg: PipelineConfig, seed: int,
                       methods: Sequence[Method] = BENCHMARK_METHODS) -> list[RunRecord]:
    """Every method on one seed's data, all sharing one BD teacher and one trained selector."""
    cfg = replace(cfg, seed=seed)
    data = make_datasets(bench, seed)
    bd = run_bd(data, cfg)
    teacher = bd.params
    records = [bd.record] if Method.BD in methods else []
    sel = None
    if any(m in methods for m in (Method.S2OD, Method.S4OD, Method.CSD_SELECTIVE)):
        sel = fit_selector(teacher, data.curated, cfg)
    for m in methods:
        if m == Method.BD:
            continue
        mc = replace(cfg, method=m)
        t0 = time.perf_counter()
        if m == Method.SOD:
            res = run_sod(data, mc, teacher)
        elif m in (Method.S2OD, Method.S4OD):
            res = run_s2od(data, mc, teacher, selector_grouper(sel.params), method=m)
        else:
            selective = m == Method.CSD_SELECTIVE
            res = run_csd(data, mc, teacher, selective, selector_grouper(sel.params) if selective else None)
        if sel is not None and m != Method.SOD and m != Method.CSD:
            res.record.gamma_h = sel.gamma_h
            res.record.gamma_table = None if sel.calibration is None else sel.calibration.table
        res.record.seconds = time.perf_counter() - t0
        records.append(res.record)
        log.info("seed %d %s ap=%s (%.1fs)", seed, m.value, res.record.student["ap_50_95"], res.record.seconds)
    return records


def sensitivity_seed(bench: BenchmarkConfig, cfg: PipelineConfig, seed: int,
                     sod_thresholds: Sequence[float] = (0.5, 0.7, 0.9),
                     s4od_gammas: Sequence[tuple[float, float]] = ((0.5, 0.1), (0.6, 0.05))) -> list[RunRecord]:
    """SOD at each confidence threshold and S4OD at each fixed ``(gamma_h, gamma_l)``, on one shared teacher.

    Each record's ``config`` carries the threshold pair it was run with.
    """
    cfg = replace(cfg, seed=seed)
    data = make_datasets(bench, seed)
    teacher = run_bd(data, cfg).params
    records = []
    for t in sod_thresholds:
        records.append(run_sod(data, replace(cfg, method=Method.SOD, sod_conf_thresh=t), teacher).record)
    for gh, gl in s4od_gammas:
        records.append(run_s4od(data, replace(cfg, method=Method.S4OD, gamma_h=gh, gamma_l=gl), teacher).record)
    return records


def summarize(records: Sequence[RunRecord], metric: str = "ap_50_95") -> dict[str, dict]:
    """Per-method mean and per-seed values of ``metric``."""
    out: dict[str, dict] = {}
    for r in records:
        e = out.setdefault(r.method, {"values": {}, "mean": None})
        e["values"][r.seed] = r.student[metric]
    for e in out.values():
        vals = [v for v in e["values"].values() if v is not None]
        e["mean"] = float(np.mean(vals)) if vals else None
    return out


TABLE_COLUMNS = ("ap_50_95", "ap_50", "ap_75", "ap_small", "ap_medium", "ap_large")
TABLE_HEADER = ("method", "AP@[.5,.95]", "AP@.5", "AP@.75", "AP_S", "AP_M", "AP_L")


def results_table(records: Sequence[RunRecord]) -> str:
    """Plain-text table of per-method means over seeds (undefined entries shown as '-')."""
    by_method: dict[str, list[RunRecord]] = {}
    for r in records:
        by_method.setdefault(f"{r.method}" + (f" (iter {r.iteration})" if r.iteration > 1 else ""), []).append(r)
    rows = [TABLE_HEADER]
    for name, rs in by_method.items():
        row = [name]
        for c in TABLE_COLUMNS:
            vals = [r.student[c] for r in rs]
            row.append("-" if any(v is None for v in vals) else f"{100 * np.mean(vals):.2f}")
        rows.append(tuple(row))
    widths = [max(len(r[i]) for r in rows) for i in range(len(TABLE_HEADER))]
    return "\n".join("  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip() for r in rows) + "\n"


def save_records(path, records: Sequence[RunRecord]) -> None:
    Path(path).write_text(json.dumps([r.to_json() for r in records], indent=1) + "\n", encoding="utf-8")


def load_records(path) -> list[RunRecord]:
    return [RunRecord.from_json(d) for d in json.loads(Path(path).read_text(encoding="utf-8"))]
