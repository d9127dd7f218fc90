"""AP / PR evaluation, false positives at fixed recall, and LOC/CLS error split.

Detections per image are [D,5] arrays (x1, y1, x2, y2, score); ground truth
per image is [G,4].  AP is the exact area under the precision envelope
(all-point interpolation).
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .boxgeom import iou_matrix

IOU_THRESHOLDS = (0.5, 0.6, 0.7, 0.8)
RECALL_LEVELS = (0.10, 0.30, 0.50, 0.80, 0.90, 0.95)
LOC_BAND = (0.1, 0.5)


@dataclass
class MatchResult:
    scores: np.ndarray       # per counted detection, descending
    is_tp: np.ndarray
    image: np.ndarray        # source image of each counted detection
    det_index: np.ndarray    # index within that image's detections
    num_gt: int


@dataclass
class APResult:
    ap: float
    recall: np.ndarray
    precision: np.ndarray
    match: MatchResult


def _as_dets(d) -> np.ndarray:
    return np.asarray(d, dtype=np.float64).reshape(-1, 5)


def _as_gts(g) -> np.ndarray:
    return np.asarray(g, dtype=np.float64).reshape(-1, 4)


def greedy_match(dets: Sequence, gts: Sequence, iou_thresh: float,
                 gt_ignore: Sequence | None = None, det_ignore: Sequence | None = None) -> MatchResult:
    """Walk detections by descending score (ties: image, then index) and
    match each to its highest-IoU still-unmatched gt with IoU >= threshold.

    Ignored gts absorb detections without counting them; unmatched ignored
    detections are dropped rather than counted as false positives.
    """
    dets = [_as_dets(d) for d in dets]
    gts = [_as_gts(g) for g in gts]
    if len(dets) != len(gts):
        raise ValueError(f"{len(dets)} detection lists for {len(gts)} images")
    gi = [np.zeros(len(g), bool) if gt_ignore is None else np.asarray(gt_ignore[i], bool)
          for i, g in enumerate(gts)]
    di = [np.zeros(len(d), bool) if det_ignore is None else np.asarray(det_ignore[i], bool)
          for i, d in enumerate(dets)]
    overlaps = [iou_matrix(d[:, :4], g) for d, g in zip(dets, gts)]
    img = np.concatenate([np.full(len(d), i) for i, d in enumerate(dets)]) if dets else np.zeros(0, int)
    idx = np.concatenate([np.arange(len(d)) for d in dets]) if dets else np.zeros(0, int)
    sc = np.concatenate([d[:, 4] for d in dets]) if dets else np.zeros(0)
    order = np.lexsort((idx, img, -sc))
    taken = [np.zeros(len(g), bool) for g in gts]
    keep_s, keep_tp, keep_img, keep_idx = [], [], [], []
    for k in order:
        i, j = int(img[k]), int(idx[k])
        ov = overlaps[i][j] if len(gts[i]) else np.zeros(0)
        best = -1
        # real gts first, ignored gts only as a fallback
        for pass_ignored in (False, True):
            cand = np.nonzero((~taken[i]) & (gi[i] == pass_ignored) & (ov >= iou_thresh))[0]
            if len(cand):
                best = int(cand[np.argmax(ov[cand])])
                break
        if best >= 0:
            taken[i][best] = True
            if gi[i][best]:
                continue
            tp = True
        else:
            if di[i][j]:
                continue
            tp = False
        keep_s.append(sc[k])
        keep_tp.append(tp)
        keep_img.append(i)
        keep_idx.append(j)
    num_gt = int(sum((~g).sum() for g in gi))
    return MatchResult(np.array(keep_s), np.array(keep_tp, bool), np.array(keep_img, int),
                       np.array(keep_idx, int), num_gt)


def pr_curve(m: MatchResult) -> tuple[np.ndarray, np.ndarray]:
    tp = np.cumsum(m.is_tp)
    fp = np.cumsum(~m.is_tp)
    recall = tp / m.num_gt if m.num_gt else np.zeros(len(tp))
    precision = tp / np.maximum(tp + fp, 1)
    return recall.astype(np.float64), precision.astype(np.float64)


def envelope_ap(recall: np.ndarray, precision: np.ndarray) -> float:
    """Exact area under the monotone precision envelope."""
    if len(recall) == 0:
        return 0.0
    mrec = np.concatenate(([0.0], recall, [1.0]))
    mpre = np.concatenate(([0.0], precision, [0.0]))
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    i = np.nonzero(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[i + 1] - mrec[i]) * mpre[i + 1]))


def compute_ap(dets: Sequence, gts: Sequence, iou_thresh: float = 0.5,
               gt_ignore=None, det_ignore=None) -> APResult:
    m = greedy_match(dets, gts, iou_thresh, gt_ignore, det_ignore)
    rec, prec = pr_curve(m)
    ap = envelope_ap(rec, prec) if m.num_gt else 0.0
    return APResult(ap, rec, prec, m)


def fp_at_recall(dets: Sequence, gts: Sequence, recall_levels=RECALL_LEVELS,
                 iou_thresh: float = 0.5) -> dict[float, int | None]:
    """False positives in the shortest score-ordered prefix reaching each recall
    level; None when the level is never reached."""
    m = greedy_match(dets, gts, iou_thresh)
    tp = np.cumsum(m.is_tp)
    fp = np.cumsum(~m.is_tp)
    out: dict[float, int | None] = {}
    for level in recall_levels:
        need = math.ceil(level * m.num_gt - 1e-9)
        if m.num_gt == 0 or need > (tp[-1] if len(tp) else 0):
            out[level] = None
            continue
        pos = int(np.argmax(tp >= need)) if need > 0 else -1
        out[level] = int(fp[pos]) if pos >= 0 else 0
    return out


def false_positives(dets: Sequence, gts: Sequence, iou_thresh: float = 0.5) -> list[np.ndarray]:
    """Per-image [F,5] arrays of detections that failed to match at ``iou_thresh``."""
    m = greedy_match(dets, gts, iou_thresh)
    dets = [_as_dets(d) for d in dets]
    out = [np.zeros((0, 5)) for _ in dets]
    for i in range(len(dets)):
        sel = m.det_index[(m.image == i) & ~m.is_tp]
        out[i] = dets[i][np.sort(sel)]
    return out


def error_decompose(fps: Sequence, gts: Sequence, band=LOC_BAND) -> dict[str, int]:
    """LOC when a false positive's best gt IoU lies in [band), else CLS."""
    loc = cls = 0
    for f, g in zip(fps, gts):
        f = np.asarray(f, dtype=np.float64)
        if f.size == 0:
            continue
        f = f.reshape(-1, f.shape[-1])
        g = _as_gts(g)
        best = iou_matrix(f[:, :4], g).max(axis=1) if len(g) else np.zeros(len(f))
        in_band = (best >= band[0]) & (best < band[1])
        loc += int(in_band.sum())
        cls += int((~in_band).sum())
    return {"LOC": loc, "CLS": cls}


@dataclass
class EvalReport:
    ap_by_iou: dict[str, float]
    pr: list[tuple[float, float]]
    fp_at_recall: dict[str, int | None]
    error_split: dict[str, int]
    pos_neg_ratio: float | None = None
    small_ap: float | None = None
    num_images: int = 0
    num_gt: int = 0
    num_detections: int = 0
    interpolation: str = "all-point (exact area under precision envelope)"
    extra: dict = field(default_factory=dict)

    def summary_line(self) -> str:
        return " ".join(f"AP@{k}={v:.4f}" for k, v in self.ap_by_iou.items())

    def to_json(self) -> str:
        d = asdict(self)
        if d["pos_neg_ratio"] is not None and math.isinf(d["pos_neg_ratio"]):
            d["pos_neg_ratio"] = "inf"
        return json.dumps(d, indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        d = json.loads(text)
        if d.get("pos_neg_ratio") == "inf":
            d["pos_neg_ratio"] = float("inf")
        d["pr"] = [tuple(p) for p in d["pr"]]
        return cls(**d)


def small_object_ignores(dets: Sequence, gts: Sequence, max_side: float):
    """Ignore masks restricting evaluation to objects with sqrt(area) < max_side."""
    def small(b):
        b = np.asarray(b, dtype=np.float64)
        b = b.reshape(-1, b.shape[-1]) if b.size else np.zeros((0, 4))
        return np.sqrt(np.clip(b[:, 2] - b[:, 0], 0, None) * np.clip(b[:, 3] - b[:, 1], 0, None)) < max_side
    return [~small(g) for g in gts], [~small(d) for d in dets]


def evaluate(dets: Sequence, gts: Sequence, small_side: float | None = 20.0,
             pos_neg_ratio: float | None = None) -> EvalReport:
    ap = {}
    pr = []
    for t in IOU_THRESHOLDS:
        r = compute_ap(dets, gts, t)
        ap[f"{t:.1f}"] = r.ap
        if t == 0.5:
            pr = [(float(a), float(b)) for a, b in zip(r.recall, r.precision)]
    fpr = {f"{k:.2f}": v for k, v in fp_at_recall(dets, gts).items()}
    errors = error_decompose(false_positives(dets, gts), gts)
    small_ap = None
    if small_side is not None:
        gi, di = small_object_ignores(dets, gts, small_side)
        small_ap = compute_ap(dets, gts, 0.5, gi, di).ap
    return EvalReport(
        ap_by_iou=ap, pr=pr, fp_at_recall=fpr, error_split=errors, pos_neg_ratio=pos_neg_ratio,
        small_ap=small_ap, num_images=len(gts), num_gt=int(sum(len(_as_gts(g)) for g in gts)),
        num_detections=int(sum(len(_as_dets(d)) for d in dets)))


def pr_text(report: EvalReport) -> str:
    return "".join(f"{r:.6f} {p:.6f}\n" for r, p in report.pr)
