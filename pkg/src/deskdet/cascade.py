"""Anchor matching, selective two-step regression/classification and the
hybrid training loss, plus the inference pipeline."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, stable_sigmoid
from .boxgeom import AnchorSet, Box, Detection, decode, encode, iou_matrix, nms_indices
from .losses import (BALANCE, GAMMA, LossReport, binary_cross_entropy_mean, focal_loss_sum,
                     smooth_l1_sum)
from .netarch import (Detector, ForwardResult, flatten_cls, flatten_reg, gt_levels,
                      sample_proposals_arrays)

POSITIVE, NEGATIVE, IGNORED = 1, 0, -1
# regression outputs are deltas divided by these, which keeps smooth-L1 out of its flat region
DELTA_SCALE = np.array([0.1, 0.1, 0.2, 0.2])


@dataclass
class CascadeConfig:
    str_levels: tuple[int, ...] = (3, 4)
    stc_levels: tuple[int, ...] = (2, 3)
    stc_threshold: float = 0.99
    step1_thresholds: tuple[float, float] = (0.3, 0.7)
    step2_thresholds: tuple[float, float] = (0.4, 0.5)
    fsm_thresholds: tuple[float, float] = (0.4, 0.7)
    sml_alpha: float = 15.0
    sml_enabled: bool = True
    fsm_enabled: bool = True
    fsm_proposals: int = 512
    fsm_nms: float = 0.7
    gamma: float = GAMMA
    balance: float = BALANCE

    def __post_init__(self):
        self.str_levels = tuple(int(v) for v in self.str_levels)
        self.stc_levels = tuple(int(v) for v in self.stc_levels)
        if not 0.0 < self.stc_threshold < 1.0:
            raise ValueError(f"stc_threshold must lie in (0,1), got {self.stc_threshold}")
        for name in ("step1_thresholds", "step2_thresholds", "fsm_thresholds"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValueError(f"{name}: negative threshold {lo} exceeds positive threshold {hi}")
            setattr(self, name, (float(lo), float(hi)))


@dataclass
class MatchAssignment:
    labels: np.ndarray      # POSITIVE / NEGATIVE / IGNORED per anchor
    gt_index: np.ndarray    # matched gt for positives, -1 elsewhere
    max_iou: np.ndarray

    @property
    def num_positive(self) -> int:
        return int((self.labels == POSITIVE).sum())


def match(anchors, gts, neg_thresh: float, pos_thresh: float, force_best: bool = True) -> MatchAssignment:
    """Label anchors by their best gt IoU.

    ``anchors`` may be an [K,4] array or a list of AnchorSet (concatenated in
    order).  With ``force_best`` every gt also claims its highest-IoU anchor.
    """
    if isinstance(anchors, (list, tuple)) and anchors and isinstance(anchors[0], AnchorSet):
        boxes = np.concatenate([a.boxes for a in anchors])
    else:
        boxes = np.asarray(anchors, dtype=np.float64).reshape(-1, 4)
    gts = np.asarray(gts, dtype=np.float64).reshape(-1, 4)
    k = len(boxes)
    if len(gts) == 0:
        return MatchAssignment(np.full(k, NEGATIVE, np.int8), np.full(k, -1, np.int64), np.zeros(k))
    ov = iou_matrix(boxes, gts)  # [K,G]
    best_gt = ov.argmax(axis=1)
    best = ov[np.arange(k), best_gt]
    labels = np.full(k, IGNORED, np.int8)
    labels[best < neg_thresh] = NEGATIVE
    labels[best >= pos_thresh] = POSITIVE
    gt_index = np.where(labels == POSITIVE, best_gt, -1)
    if force_best:
        best_anchor = ov.argmax(axis=0)  # [G]
        claim = np.full(k, -1.0)
        for g, a in enumerate(best_anchor):
            if ov[a, g] <= 0:
                continue
            # an anchor wanted by several gts goes to the one it overlaps most
            if ov[a, g] > claim[a]:
                claim[a] = ov[a, g]
                labels[a] = POSITIVE
                gt_index[a] = g
    return MatchAssignment(labels, gt_index.astype(np.int64), best)


def stc_filter(neg_prob: np.ndarray, threshold: float = 0.99) -> np.ndarray:
    """Keep mask: an anchor survives when its step-1 background confidence <= threshold."""
    return np.asarray(neg_prob) <= threshold


def str_refine(anchors: Sequence[AnchorSet], step1_deltas: dict[int, np.ndarray],
               str_levels: Sequence[int]) -> list[np.ndarray]:
    """Decode step-1 deltas onto anchors on STR levels; other levels pass through."""
    out = []
    for a in anchors:
        if a.level in str_levels and a.level in step1_deltas:
            out.append(decode(np.asarray(step1_deltas[a.level]).reshape(-1, 4), a.boxes))
        else:
            out.append(a.boxes.copy())
    return out


# ---------------------------------------------------------------------------
# per-batch bookkeeping shared by training and inference
# ---------------------------------------------------------------------------

@dataclass
class StepState:
    """Numpy view of one image's two-step decisions across all levels."""
    anchors: np.ndarray          # [K,4] original anchors, all levels
    refined: np.ndarray          # [K,4] anchors after STR
    level: np.ndarray            # [K] level id per anchor
    keep: np.ndarray             # [K] STC survival mask
    scores: np.ndarray           # [K] step-2 face probability
    boxes: np.ndarray            # [K,4] decoded step-2 boxes


def _level_slices(anchors: Sequence[AnchorSet]) -> dict[int, slice]:
    out, start = {}, 0
    for a in anchors:
        out[a.level] = slice(start, start + len(a))
        start += len(a)
    return out


def flatten_outputs(result: ForwardResult):
    """Flattened tensors: cls2 [N,K], reg2 [N,K,4], and step-1 dicts keyed by level."""
    cls2 = ad.concat([flatten_cls(h.cls2) for h in result.heads], axis=1)
    reg2 = ad.concat([flatten_reg(h.reg2) for h in result.heads], axis=1)
    cls1 = {h.level: flatten_cls(h.cls1) for h in result.heads if h.cls1 is not None}
    reg1 = {h.level: flatten_reg(h.reg1) for h in result.heads if h.reg1 is not None}
    return cls2, reg2, cls1, reg1


def step_states(result: ForwardResult, cfg: CascadeConfig, flat=None,
                image_size: tuple[int, int] | None = None) -> list[StepState]:
    cls2, reg2, cls1, reg1 = flat or flatten_outputs(result)
    anchors = result.anchors
    all_anchors = np.concatenate([a.boxes for a in anchors])
    level = np.concatenate([np.full(len(a), a.level) for a in anchors])
    slices = _level_slices(anchors)
    out = []
    for b in range(cls2.shape[0]):
        keep = np.ones(len(all_anchors), dtype=bool)
        for lid, t in cls1.items():
            neg = 1.0 - stable_sigmoid(t.data[b].astype(np.float64))
            keep[slices[lid]] = stc_filter(neg, cfg.stc_threshold)
        refined = np.concatenate(str_refine(
            anchors, {l: t.data[b] * DELTA_SCALE for l, t in reg1.items()}, cfg.str_levels))
        boxes = decode(reg2.data[b] * DELTA_SCALE, refined)
        if image_size is not None:
            h, w = image_size
            boxes = np.clip(boxes, 0, [w, h, w, h])
        scores = stable_sigmoid(cls2.data[b].astype(np.float64))
        out.append(StepState(all_anchors, refined, level, keep, scores, boxes))
    return out


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

@dataclass
class BatchTargets:
    step1: list[MatchAssignment]
    step2: list[MatchAssignment]
    states: list[StepState]
    ratio_before: list[float] = field(default_factory=list)
    ratio_after: list[float] = field(default_factory=list)


def _box_wh(b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    return np.maximum(b[..., 2] - b[..., 0], 1e-6), np.maximum(b[..., 3] - b[..., 1], 1e-6)


def _margins(assign: MatchAssignment, gts: np.ndarray, refined: np.ndarray, alpha: float) -> np.ndarray:
    pos = assign.labels == POSITIVE
    w, h = _box_wh(refined)
    if pos.any():
        gw, gh = _box_wh(gts[assign.gt_index[pos]])
        w = w.copy()
        h = h.copy()
        w[pos], h[pos] = gw, gh
    return alpha / np.sqrt(w * h)


def str_loss(reg1: dict[int, Tensor], reg2: Tensor, anchors: Sequence[AnchorSet],
             targets: BatchTargets, gts: Sequence[np.ndarray]) -> tuple[Tensor, int, int]:
    """Two smooth-L1 terms: step 1 over STR-level positives against the
    original anchors, step 2 over surviving positives against refined anchors."""
    slices = _level_slices(anchors)
    n = reg2.shape[0]
    terms = []
    n1 = 0
    for lid, t in reg1.items():
        sl = slices[lid]
        tgt = np.zeros(t.shape, dtype=np.float64)
        wts = np.zeros(t.shape[:2])
        for b in range(n):
            a = targets.step1[b]
            pos = np.nonzero(a.labels[sl] == POSITIVE)[0]
            if len(pos):
                tgt[b, pos] = encode(gts[b][a.gt_index[sl][pos]], targets.states[b].anchors[sl][pos]) / DELTA_SCALE
                wts[b, pos] = 1.0
        n1 += int(wts.sum())
        terms.append(smooth_l1_sum(t, tgt, wts))
    tgt2 = np.zeros(reg2.shape, dtype=np.float64)
    w2 = np.zeros(reg2.shape[:2])
    for b in range(n):
        a = targets.step2[b]
        pos = np.nonzero((a.labels == POSITIVE) & targets.states[b].keep)[0]
        if len(pos):
            tgt2[b, pos] = encode(gts[b][a.gt_index[pos]], targets.states[b].refined[pos]) / DELTA_SCALE
            w2[b, pos] = 1.0
    n2 = int(w2.sum())
    loss = ad.mul(smooth_l1_sum(reg2, tgt2, w2), 1.0 / max(n2, 1))
    if terms:
        s1 = terms[0]
        for t in terms[1:]:
            s1 = ad.add(s1, t)
        loss = ad.add(ad.mul(s1, 1.0 / max(n1, 1)), loss)
    return loss, n1, n2


def stc_loss(cls1: dict[int, Tensor], cls2: Tensor, anchors: Sequence[AnchorSet],
             targets: BatchTargets, gts: Sequence[np.ndarray], cfg: CascadeConfig) -> tuple[Tensor, int, int]:
    """Focal term over STC-level anchors at step 1 plus a (margined) focal term
    over the anchors that survive filtering at step 2."""
    slices = _level_slices(anchors)
    n = cls2.shape[0]
    terms = []
    n3 = 0
    for lid, t in cls1.items():
        sl = slices[lid]
        labels = np.zeros(t.shape)
        wts = np.zeros(t.shape)
        for b in range(n):
            lab = targets.step1[b].labels[sl]
            labels[b] = lab == POSITIVE
            wts[b] = lab != IGNORED
            n3 += int((lab == POSITIVE).sum())
        terms.append(focal_loss_sum(t, labels, wts, gamma=cfg.gamma, balance=cfg.balance))
    labels2 = np.zeros(cls2.shape)
    w2 = np.zeros(cls2.shape)
    margins = np.zeros(cls2.shape) if cfg.sml_enabled and cfg.sml_alpha > 0 else None
    for b in range(n):
        a = targets.step2[b]
        keep = targets.states[b].keep
        labels2[b] = a.labels == POSITIVE
        w2[b] = (a.labels != IGNORED) & keep
        if margins is not None:
            margins[b] = _margins(a, gts[b], targets.states[b].refined, cfg.sml_alpha)
    n4 = int(((labels2 > 0) & (w2 > 0)).sum())
    loss = ad.mul(focal_loss_sum(cls2, labels2, w2, margins, cfg.gamma, cfg.balance), 1.0 / max(n4, 1))
    if terms:
        s1 = terms[0]
        for t in terms[1:]:
            s1 = ad.add(s1, t)
        loss = ad.add(ad.mul(s1, 1.0 / max(n3, 1)), loss)
    return loss, n3, n4


def pos_neg_ratio(assign: MatchAssignment, keep: np.ndarray | None = None) -> float:
    """Positives over negatives among kept anchors; inf when no negatives remain."""
    keep = np.ones(len(assign.labels), bool) if keep is None else np.asarray(keep, bool)
    pos = int(((assign.labels == POSITIVE) & keep).sum())
    neg = int(((assign.labels == NEGATIVE) & keep).sum())
    return float("inf") if neg == 0 else pos / neg


def batch_ratios(targets: BatchTargets) -> tuple[float, float]:
    """Step-2 positive/negative ratio pooled over the whole batch, before and after filtering."""
    pos = neg = pos_kept = neg_kept = 0
    for a, st in zip(targets.step2, targets.states):
        p, n = a.labels == POSITIVE, a.labels == NEGATIVE
        pos, neg = pos + int(p.sum()), neg + int(n.sum())
        pos_kept, neg_kept = pos_kept + int((p & st.keep).sum()), neg_kept + int((n & st.keep).sum())
    before = float("inf") if neg == 0 else pos / neg
    after = float("inf") if neg_kept == 0 else pos_kept / neg_kept
    return before, after


def build_targets(result: ForwardResult, flat, gts: Sequence[np.ndarray], cfg: CascadeConfig,
                  image_size: tuple[int, int] | None = None) -> BatchTargets:
    states = step_states(result, cfg, flat, image_size)
    step1, step2 = [], []
    r_before, r_after = [], []
    for b, st in enumerate(states):
        g = np.asarray(gts[b], dtype=np.float64).reshape(-1, 4)
        step1.append(match(st.anchors, g, *cfg.step1_thresholds))
        a2 = match(st.refined, g, *cfg.step2_thresholds)
        step2.append(a2)
        r_before.append(pos_neg_ratio(a2))
        r_after.append(pos_neg_ratio(a2, st.keep))
    return BatchTargets(step1, step2, states, r_before, r_after)


def fsm_loss(model: Detector, result: ForwardResult, targets: BatchTargets,
             gts: Sequence[np.ndarray], cfg: CascadeConfig, pre_nms: int = 300) -> tuple[Tensor, int]:
    proposals = []
    for b, st in enumerate(targets.states):
        g = np.asarray(gts[b], dtype=np.float64).reshape(-1, 4)
        cand = np.nonzero(st.keep)[0]
        cand = cand[np.lexsort((cand, -st.scores[cand]))][:pre_nms]
        proposals.extend(sample_proposals_arrays(
            st.boxes[cand], st.scores[cand], st.level[cand], g, gt_levels(g, result.anchors),
            cfg.fsm_proposals, cfg.fsm_nms, cfg.fsm_thresholds, image=b))
    if not proposals:
        return Tensor(0.0), 0
    logits = model.fsm_forward(result.features, proposals)
    labels = np.array([p.label for p in proposals], dtype=np.float64)
    return binary_cross_entropy_mean(logits, labels), len(proposals)


def _ordered(b):
    x1, y1, x2, y2 = (float(v) for v in b)
    return min(x1, x2), min(y1, y2), max(x1, x2), max(y1, y2)


def hybrid_loss(model: Detector, images, gts: Sequence[np.ndarray], cfg: CascadeConfig):
    """L = L_STR + L_STC + L_FSM for one batch; returns (loss tensor, LossReport, targets)."""
    result = model.forward(images, cfg.stc_levels, cfg.str_levels)
    flat = flatten_outputs(result)
    cls2, reg2, cls1, reg1 = flat
    targets = build_targets(result, flat, gts, cfg, tuple(np.shape(images)[-2:]))
    gts = [np.asarray(g, dtype=np.float64).reshape(-1, 4) for g in gts]
    l_str, n1, n2 = str_loss(reg1, reg2, result.anchors, targets, gts)
    l_stc, n3, n4 = stc_loss(cls1, cls2, result.anchors, targets, gts, cfg)
    total = ad.add(l_str, l_stc)
    report = LossReport(str_loss=l_str.item(), stc_loss=l_stc.item(),
                        positives={"s1": n1, "s2": n2, "s3": n3, "s4": n4})
    if cfg.fsm_enabled and model.fsm:
        l_fsm, _ = fsm_loss(model, result, targets, gts, cfg)
        report.fsm_loss = l_fsm.item()
        total = ad.add(total, l_fsm)
    return total, report, targets


def baseline_loss(model: Detector, images, gts: Sequence[np.ndarray], cfg: CascadeConfig):
    """Single-step reference: focal classification and smooth-L1 regression on
    every anchor with (0.4, 0.5) matching, no refinement or filtering."""
    result = model.forward(images)
    cls = ad.concat([flatten_cls(h.cls2) for h in result.heads], axis=1)
    reg = ad.concat([flatten_reg(h.reg2) for h in result.heads], axis=1)
    anchors = np.concatenate([a.boxes for a in result.anchors])
    n = cls.shape[0]
    labels = np.zeros(cls.shape)
    wts = np.zeros(cls.shape)
    margins = np.zeros(cls.shape) if cfg.sml_enabled and cfg.sml_alpha > 0 else None
    tgt = np.zeros(reg.shape, dtype=np.float64)
    rw = np.zeros(reg.shape[:2])
    for b in range(n):
        g = np.asarray(gts[b], dtype=np.float64).reshape(-1, 4)
        a = match(anchors, g, *cfg.step2_thresholds)
        labels[b] = a.labels == POSITIVE
        wts[b] = a.labels != IGNORED
        pos = np.nonzero(a.labels == POSITIVE)[0]
        if len(pos):
            tgt[b, pos] = encode(g[a.gt_index[pos]], anchors[pos]) / DELTA_SCALE
            rw[b, pos] = 1.0
        if margins is not None:
            margins[b] = _margins(a, g, anchors, cfg.sml_alpha)
    npos = int(rw.sum())
    l_reg = ad.mul(smooth_l1_sum(reg, tgt, rw), 1.0 / max(npos, 1))
    l_cls = ad.mul(focal_loss_sum(cls, labels, wts, margins, cfg.gamma, cfg.balance), 1.0 / max(npos, 1))
    return l_reg, l_cls


# ---------------------------------------------------------------------------
# inference
# ---------------------------------------------------------------------------

@dataclass
class InferenceConfig:
    score_threshold: float = 0.05
    pre_nms_top: int = 5000
    nms_overlap: float = 0.4
    max_detections: int = 750


def select_candidates(st: StepState, score_threshold: float, top_k: int) -> np.ndarray:
    """Indices of kept anchors scoring >= threshold, best ``top_k`` first (ties by index)."""
    cand = np.nonzero(st.keep & (st.scores >= score_threshold))[0]
    order = np.lexsort((cand, -st.scores[cand]))
    return cand[order][:top_k]


def detections_from_state(st: StepState, icfg: InferenceConfig) -> list[Detection]:
    cand = select_candidates(st, icfg.score_threshold, icfg.pre_nms_top)
    if len(cand) == 0:
        return []
    kept = nms_indices(st.boxes[cand], st.scores[cand], icfg.nms_overlap)[: icfg.max_detections]
    return [Detection(Box(*_ordered(st.boxes[cand[i]])), float(st.scores[cand[i]]), int(st.level[cand[i]]))
            for i in kept]


def inference_pipeline(model: Detector, images, cfg: CascadeConfig,
                       icfg: InferenceConfig | None = None) -> list[list[Detection]]:
    """Filter, refine, score, threshold, top-k, NMS and cap, per image."""
    icfg = icfg or InferenceConfig()
    x = np.asarray(images)
    if x.ndim == 3:
        x = x[None]
    result = model.forward(x, cfg.stc_levels, cfg.str_levels)
    states = step_states(result, cfg, image_size=x.shape[2:])
    return [detections_from_state(st, icfg) for st in states]


def detect_arrays(model: Detector, images, cfg: CascadeConfig, icfg: InferenceConfig | None = None,
                  batch_size: int = 16) -> list[np.ndarray]:
    """Run :func:`inference_pipeline` in batches; one [D,5] (box, score) array per image."""
    x = np.asarray(images)
    out = []
    for i in range(0, len(x), batch_size):
        for dets in inference_pipeline(model, x[i:i + batch_size], cfg, icfg):
            out.append(np.array([[*d.box.as_tuple(), d.score] for d in dets], dtype=np.float64).reshape(-1, 5))
    return out


def filter_ratios(model: Detector, images, gts: Sequence[np.ndarray], cfg: CascadeConfig,
                  batch_size: int = 16) -> tuple[list[float], list[float]]:
    """Step-2 positive/negative ratio per image before and after STC filtering."""
    x = np.asarray(images)
    before: list[float] = []
    after: list[float] = []
    for i in range(0, len(x), batch_size):
        result = model.forward(x[i:i + batch_size], cfg.stc_levels, cfg.str_levels)
        t = build_targets(result, flatten_outputs(result), gts[i:i + batch_size], cfg, x.shape[2:])
        before.extend(t.ratio_before)
        after.extend(t.ratio_after)
    return before, after
