"""Boxes, IoU, anchor tiling, delta encoding and greedy NMS.

Boxes are corner-form (x1, y1, x2, y2) in image pixels.  Most functions
accept either a single box or an [N,4] array.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

# exp() guard for decoded widths/heights: log(1000/16)
MAX_LOG_SCALE = math.log(1000.0 / 16)


@dataclass(frozen=True)
class Box:
    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        if self.x2 < self.x1 or self.y2 < self.y1:
            raise ValueError(f"invalid box corners {self.as_tuple()}")

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x1, self.y1, self.x2, self.y2)

    def as_array(self) -> np.ndarray:
        return np.array(self.as_tuple(), dtype=np.float64)


@dataclass
class AnchorSet:
    boxes: np.ndarray  # [gridH*gridW*A, 4], row-major by cell then anchor index
    level: int
    stride: int
    per_location: int
    grid: tuple[int, int]

    def __len__(self) -> int:
        return int(self.boxes.shape[0])


@dataclass(frozen=True)
class Detection:
    box: Box
    score: float
    level: int = -1


def _as_boxes(b) -> np.ndarray:
    if isinstance(b, Box):
        return b.as_array()[None]
    arr = np.asarray(b, dtype=np.float64)
    return arr.reshape(-1, 4)


def _single(b) -> bool:
    return isinstance(b, Box) or np.ndim(b) == 1


def area(boxes) -> np.ndarray:
    b = _as_boxes(boxes)
    return np.clip(b[:, 2] - b[:, 0], 0, None) * np.clip(b[:, 3] - b[:, 1], 0, None)


def iou_matrix(a, b) -> np.ndarray:
    """Pairwise IoU, [len(a), len(b)]; zero wherever the union is empty."""
    a = _as_boxes(a)
    b = _as_boxes(b)
    if len(a) == 0 or len(b) == 0:
        return np.zeros((len(a), len(b)))
    lt = np.maximum(a[:, None, :2], b[None, :, :2])
    rb = np.minimum(a[:, None, 2:], b[None, :, 2:])
    wh = np.clip(rb - lt, 0, None)
    inter = wh[..., 0] * wh[..., 1]
    union = area(a)[:, None] + area(b)[None, :] - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(union > 0, inter / np.where(union > 0, union, 1), 0.0)
    return out


def iou(a, b) -> float:
    return float(iou_matrix(a, b)[0, 0])


def anchor_shapes(stride: int, scales: Sequence[float] | None = None,
                  aspect: float = 1.25) -> np.ndarray:
    """(width, height) per anchor at one location; aspect is height/width."""
    if scales is None:
        scales = (2 * stride, 2 * math.sqrt(2) * stride)
    r = math.sqrt(aspect)
    return np.array([(s / r, s * r) for s in scales], dtype=np.float64)


def tile_anchors(grid_h: int, grid_w: int, stride: int, scales: Sequence[float] | None = None,
                 aspect: float = 1.25, level: int = 0) -> AnchorSet:
    if stride <= 0:
        raise ValueError(f"stride must be positive, got {stride}")
    shapes = anchor_shapes(stride, scales, aspect)
    a = len(shapes)
    cy, cx = np.meshgrid((np.arange(grid_h) + 0.5) * stride,
                         (np.arange(grid_w) + 0.5) * stride, indexing="ij")
    cx = np.repeat(cx.reshape(-1), a)
    cy = np.repeat(cy.reshape(-1), a)
    w = np.tile(shapes[:, 0], grid_h * grid_w)
    h = np.tile(shapes[:, 1], grid_h * grid_w)
    boxes = np.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], axis=1)
    return AnchorSet(boxes=boxes, level=level, stride=stride, per_location=a, grid=(grid_h, grid_w))


def encode(gt, anchor) -> np.ndarray:
    """Regression targets (dx, dy, dw, dh) of gt boxes relative to anchors."""
    g = _as_boxes(gt)
    a = _as_boxes(anchor)
    aw = a[:, 2] - a[:, 0]
    ah = a[:, 3] - a[:, 1]
    gw = g[:, 2] - g[:, 0]
    gh = g[:, 3] - g[:, 1]
    if np.any(aw <= 0) or np.any(ah <= 0):
        raise ValueError("encode: anchors must have positive width and height")
    if np.any(gw <= 0) or np.any(gh <= 0):
        raise ValueError("encode: ground-truth boxes must have positive width and height")
    out = np.stack([
        ((g[:, 0] + g[:, 2]) - (a[:, 0] + a[:, 2])) / 2 / aw,
        ((g[:, 1] + g[:, 3]) - (a[:, 1] + a[:, 3])) / 2 / ah,
        np.log(gw / aw),
        np.log(gh / ah),
    ], axis=1)
    return out[0] if _single(gt) and _single(anchor) else out


def decode(delta, anchor) -> np.ndarray:
    d = np.asarray(delta, dtype=np.float64).reshape(-1, 4)
    a = _as_boxes(anchor)
    aw = a[:, 2] - a[:, 0]
    ah = a[:, 3] - a[:, 1]
    cx = (a[:, 0] + a[:, 2]) / 2 + d[:, 0] * aw
    cy = (a[:, 1] + a[:, 3]) / 2 + d[:, 1] * ah
    w = aw * np.exp(np.minimum(d[:, 2], MAX_LOG_SCALE))
    h = ah * np.exp(np.minimum(d[:, 3], MAX_LOG_SCALE))
    out = np.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], axis=1)
    return out[0] if _single(delta) and _single(anchor) else out


def nms_indices(boxes: np.ndarray, scores: np.ndarray, overlap: float = 0.4) -> np.ndarray:
    """Greedy suppression; returns kept indices ordered by descending score.

    Equal scores keep the lower index first.
    """
    boxes = _as_boxes(boxes)
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    order = np.lexsort((np.arange(len(scores)), -scores))
    keep: list[int] = []
    alive = np.ones(len(scores), dtype=bool)
    areas = area(boxes)
    for pos, i in enumerate(order):
        if not alive[i]:
            continue
        keep.append(int(i))
        rest = order[pos + 1:]
        rest = rest[alive[rest]]
        if len(rest) == 0:
            break
        lt = np.maximum(boxes[i, :2], boxes[rest, :2])
        rb = np.minimum(boxes[i, 2:], boxes[rest, 2:])
        wh = np.clip(rb - lt, 0, None)
        inter = wh[:, 0] * wh[:, 1]
        union = areas[i] + areas[rest] - inter
        ov = np.where(union > 0, inter / np.where(union > 0, union, 1), 0.0)
        alive[rest[ov > overlap]] = False
    return np.array(keep, dtype=np.int64)


def nms(dets: Sequence[Detection], overlap: float = 0.4) -> list[Detection]:
    if not dets:
        return []
    boxes = np.array([d.box.as_tuple() for d in dets])
    scores = np.array([d.score for d in dets])
    return [dets[i] for i in nms_indices(boxes, scores, overlap)]


# ---------------------------------------------------------------------------
# detection dumps: "image_id x1 y1 x2 y2 score" per line, 6 decimals
# ---------------------------------------------------------------------------

def format_dump(per_image: Sequence[np.ndarray]) -> str:
    """Text dump of per-image [D,5] detection arrays, ordered by image id."""
    lines = []
    for i, d in enumerate(per_image):
        for row in np.asarray(d, dtype=np.float64).reshape(-1, 5):
            lines.append(f"{i} " + " ".join(f"{v:.6f}" for v in row))
    return "".join(line + "\n" for line in lines)


def parse_dump(text: str, num_images: int | None = None, columns: int = 5) -> list[np.ndarray]:
    """Inverse of :func:`format_dump`; ``columns`` is 4 for ground-truth sidecars."""
    rows: dict[int, list[list[float]]] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != columns + 1:
            raise ValueError(f"line {lineno}: expected {columns + 1} fields, got {len(parts)}")
        try:
            img = int(parts[0])
            vals = [float(p) for p in parts[1:]]
        except ValueError as exc:
            raise ValueError(f"line {lineno}: {exc}") from None
        if img < 0:
            raise ValueError(f"line {lineno}: negative image id {img}")
        rows.setdefault(img, []).append(vals)
    n = num_images if num_images is not None else (max(rows) + 1 if rows else 0)
    if rows and max(rows) >= n:
        raise ValueError(f"image id {max(rows)} out of range for {n} images")
    return [np.array(rows.get(i, []), dtype=np.float64).reshape(-1, columns) for i in range(n)]
