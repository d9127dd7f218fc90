"""Procedural detection scenes and the training-time augmentation chain.

Objects are textured ellipses inscribed in their ground-truth rectangle
(a light oval with two dark spots and a bar).  Backgrounds carry smooth
gradients, noise and distractor shapes that share colours but not the
texture.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image
from scipy.ndimage import map_coordinates

from .boxgeom import iou_matrix

SCALE_MIXES = {
    # name: (probability of a small object, small side range, large side range)
    "mixed": (0.5, (8.0, 20.0), (20.0, 56.0)),
    "small": (1.0, (8.0, 20.0), (20.0, 56.0)),
    "large": (0.0, (8.0, 20.0), (20.0, 56.0)),
}
DEFAULT_ASPECTS = (0.8, 1.0, 1.25, 1.5, 2.5, 0.4)
SMALL_SIDE = 20.0


@dataclass
class Scene:
    image: np.ndarray                 # [3,H,W] float32 in [0,1]
    gts: np.ndarray                   # [G,4] x1,y1,x2,y2
    meta: dict = field(default_factory=dict)

    @property
    def size(self) -> tuple[int, int]:
        return self.image.shape[1], self.image.shape[2]


def _background(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float32)
    c0 = rng.uniform(0.1, 0.9, size=3).astype(np.float32)
    gx, gy = rng.uniform(-0.4, 0.4, size=2) / max(h, w)
    img = c0[:, None, None] + (gx * xx + gy * yy)[None]
    img += rng.normal(0, 0.03, size=(3, h, w)).astype(np.float32)
    return img


def _ellipse_mask(h: int, w: int, y0: float, x0: float, ry: float, rx: float):
    yy, xx = np.ogrid[0:h, 0:w]
    return ((yy + 0.5 - y0) / ry) ** 2 + ((xx + 0.5 - x0) / rx) ** 2 <= 1.0


def _draw_distractor(img: np.ndarray, rng: np.random.Generator) -> None:
    _, h, w = img.shape
    kind = rng.integers(3)
    col = rng.uniform(0, 1, size=3).astype(np.float32)
    s = rng.uniform(6, 40)
    cx, cy = rng.uniform(0, w), rng.uniform(0, h)
    if kind == 0:  # plain rectangle
        x1, y1 = int(max(cx - s / 2, 0)), int(max(cy - s / 3, 0))
        x2, y2 = int(min(cx + s / 2, w)), int(min(cy + s / 3, h))
        img[:, y1:y2, x1:x2] = col[:, None, None]
    elif kind == 1:  # untextured ellipse
        m = _ellipse_mask(h, w, cy, cx, s / 2 * rng.uniform(0.5, 1.5), s / 2)
        img[:, m] = col[:, None]
    else:  # thick line
        t = max(int(s / 8), 1)
        if rng.random() < 0.5:
            img[:, int(cy):int(cy) + t, :] = col[:, None, None]
        else:
            img[:, :, int(cx):int(cx) + t] = col[:, None, None]


def _draw_object(img: np.ndarray, rng: np.random.Generator, box: np.ndarray) -> None:
    _, h, w = img.shape
    x1, y1, x2, y2 = box
    cx, cy = (x1 + x2) / 2, (y1 + y2) / 2
    rx, ry = (x2 - x1) / 2, (y2 - y1) / 2
    skin = np.array([rng.uniform(0.75, 0.95), rng.uniform(0.55, 0.75), rng.uniform(0.4, 0.6)],
                    dtype=np.float32)
    img[:, _ellipse_mask(h, w, cy, cx, ry, rx)] = skin[:, None]
    dark = np.array([0.1, 0.05, 0.05], dtype=np.float32)
    er = max(rx * 0.18, 0.6), max(ry * 0.12, 0.6)
    for side in (-1, 1):
        m = _ellipse_mask(h, w, cy - ry * 0.25, cx + side * rx * 0.4, er[1], er[0])
        img[:, m] = dark[:, None]
    ys, ye = int(round(cy + ry * 0.35)), int(round(cy + ry * 0.35 + max(ry * 0.12, 1)))
    xs, xe = int(round(cx - rx * 0.35)), int(round(cx + rx * 0.35))
    img[:, max(ys, 0):min(ye, h), max(xs, 0):min(xe, w)] = dark[:, None, None] + 0.2


def _sample_box(rng, size: int, scale_mix: str, aspects: Sequence[float]) -> np.ndarray:
    p_small, small, large = SCALE_MIXES[scale_mix]
    lo, hi = small if rng.random() < p_small else large
    side = rng.uniform(lo, hi)
    aspect = float(aspects[rng.integers(len(aspects))])  # height / width
    w = side / np.sqrt(aspect)
    h = side * np.sqrt(aspect)
    w = float(np.clip(w, 2.0, size - 2))
    h = float(np.clip(h, 2.0, size - 2))
    x1 = rng.uniform(0, size - w)
    y1 = rng.uniform(0, size - h)
    return np.array([x1, y1, x1 + w, y1 + h])


def generate_scene(seed: int, size: int = 128, scale_mix: str = "mixed",
                   aspect_mix: Sequence[float] = DEFAULT_ASPECTS, max_objects: int = 5,
                   distractors: int = 6) -> Scene:
    if scale_mix not in SCALE_MIXES:
        raise ValueError(f"unknown scale mix {scale_mix!r}; choose from {sorted(SCALE_MIXES)}")
    rng = np.random.default_rng(seed)
    img = _background(rng, size, size)
    for _ in range(rng.integers(distractors + 1)):
        _draw_distractor(img, rng)
    n = int(rng.integers(1, max_objects + 1))
    boxes: list[np.ndarray] = []
    for _ in range(n * 10):
        if len(boxes) == n:
            break
        b = _sample_box(rng, size, scale_mix, aspect_mix)
        if boxes and iou_matrix(b, np.array(boxes)).max() > 0.0:
            continue
        boxes.append(b)
    for b in boxes:
        _draw_object(img, rng, b)
    img = np.clip(img, 0.0, 1.0).astype(np.float32)
    gts = np.array(boxes, dtype=np.float64).reshape(-1, 4)
    return Scene(img, gts, {"seed": seed, "scale_mix": scale_mix})


def generate(seed: int, count: int, size: int = 128, scale_mix: str = "mixed",
             aspect_mix: Sequence[float] = DEFAULT_ASPECTS, threads: int = 1) -> list[Scene]:
    """``count`` scenes; scene i is drawn from seed ``seed + i``."""
    if size % 16:
        raise ValueError(f"scene size {size} must be divisible by the largest stride (16)")
    seeds = [seed + i for i in range(count)]
    if threads > 1 and count > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(threads) as pool:
            return list(pool.map(lambda s: generate_scene(s, size, scale_mix, aspect_mix), seeds))
    return [generate_scene(s, size, scale_mix, aspect_mix) for s in seeds]


# ---------------------------------------------------------------------------
# augmentation
# ---------------------------------------------------------------------------

def resize(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize of [C,H,W] with pixel-centre alignment."""
    c, h, w = image.shape
    if (h, w) == (out_h, out_w):
        return image.copy()
    ys = (np.arange(out_h) + 0.5) * (h / out_h) - 0.5
    xs = (np.arange(out_w) + 0.5) * (w / out_w) - 0.5
    gy, gx = np.meshgrid(ys, xs, indexing="ij")
    return np.stack([map_coordinates(image[i], [gy, gx], order=1, mode="nearest") for i in range(c)])


def photometric(image: np.ndarray, rng: np.random.Generator, jitter: float = 0.2) -> np.ndarray:
    brightness = rng.uniform(-jitter, jitter)
    contrast = rng.uniform(1 - jitter, 1 + jitter)
    mean = image.mean()
    return np.clip((image - mean) * contrast + mean + brightness, 0, 1).astype(np.float32)


def apply_geometry(scene: Scene, expand: float = 1.0, offset: tuple[float, float] = (0, 0),
                   crop: tuple[float, float, float] | None = None, flip: bool = False,
                   out_size: int | None = None, min_side: float = 2.0) -> Scene:
    """Expand onto a mean-filled canvas, crop a square (x, y, side), flip, resize.

    Gts whose centre leaves the crop are dropped; survivors are clipped to
    the crop and must keep both sides >= ``min_side`` after resizing.
    """
    img = scene.image
    c, h, w = img.shape
    gts = np.asarray(scene.gts, dtype=np.float64).reshape(-1, 4).copy()
    if expand > 1.0:
        eh, ew = int(round(h * expand)), int(round(w * expand))
        ox, oy = int(round(offset[0])), int(round(offset[1]))
        canvas = np.empty((c, eh, ew), dtype=img.dtype)
        canvas[:] = img.mean(axis=(1, 2))[:, None, None]
        canvas[:, oy:oy + h, ox:ox + w] = img
        img = canvas
        gts += [ox, oy, ox, oy]
        h, w = eh, ew
    if crop is None:
        crop = (0.0, 0.0, float(min(h, w)))
    cx0, cy0, side = crop
    x0, y0, s = int(round(cx0)), int(round(cy0)), int(round(side))
    img = img[:, y0:y0 + s, x0:x0 + s]
    if len(gts):
        centres = (gts[:, :2] + gts[:, 2:]) / 2
        inside = (centres[:, 0] >= x0) & (centres[:, 0] < x0 + s) & (centres[:, 1] >= y0) & (centres[:, 1] < y0 + s)
        gts = gts[inside] - [x0, y0, x0, y0]
        gts = np.clip(gts, 0, s)
    if flip:
        img = img[:, :, ::-1]
        if len(gts):
            gts = np.stack([s - gts[:, 2], gts[:, 1], s - gts[:, 0], gts[:, 3]], axis=1)
    out = out_size or s
    img = resize(np.ascontiguousarray(img), out, out)
    if len(gts):
        gts = gts * (out / s)
        ok = ((gts[:, 2] - gts[:, 0]) >= min_side) & ((gts[:, 3] - gts[:, 1]) >= min_side)
        gts = gts[ok]
    return Scene(img.astype(np.float32), gts.reshape(-1, 4), dict(scene.meta))


def augment(scene: Scene, seed: int, out_size: int | None = None) -> Scene:
    """Photometric jitter, mean-padded expansion in [1,2], one of two square
    crops (shorter side, or a random 0.5-1.0 fraction of it), random flip."""
    rng = np.random.default_rng(seed)
    h, w = scene.size
    out_size = out_size or h
    img = photometric(scene.image, rng)
    expand = rng.uniform(1.0, 2.0)
    eh, ew = int(round(h * expand)), int(round(w * expand))
    offset = (rng.uniform(0, ew - w), rng.uniform(0, eh - h))
    short = min(eh, ew)
    side = short if rng.random() < 0.5 else rng.uniform(0.5, 1.0) * short
    side = max(int(round(side)), 1)
    crop = (rng.uniform(0, ew - side), rng.uniform(0, eh - side), side)
    flip = bool(rng.random() < 0.5)
    return apply_geometry(Scene(img, scene.gts, scene.meta), expand, offset, crop, flip, out_size)


def small_object_mask(gts: np.ndarray, max_side: float = SMALL_SIDE) -> np.ndarray:
    g = np.asarray(gts, dtype=np.float64).reshape(-1, 4)
    return np.sqrt((g[:, 2] - g[:, 0]) * (g[:, 3] - g[:, 1])) < max_side


# ---------------------------------------------------------------------------
# export
# ---------------------------------------------------------------------------

def export_scenes(scenes: Sequence[Scene], out_dir) -> Path:
    """Write scene_XXXX.png images and a gts.txt sidecar (image id, x1, y1, x2, y2)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for i, sc in enumerate(scenes):
        arr = (np.clip(sc.image.transpose(1, 2, 0), 0, 1) * 255).round().astype(np.uint8)
        Image.fromarray(arr).save(out / f"scene_{i:04d}.png")
    lines = [f"{i} " + " ".join(f"{v:.6f}" for v in b) for i, sc in enumerate(scenes) for b in sc.gts]
    (out / "gts.txt").write_text("".join(line + "\n" for line in lines))
    return out
