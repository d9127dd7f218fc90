"""Toy detector graph: conv backbone, top-down pyramid, shared two-step heads
with optional receptive-field-enhancement blocks, and the training-only
feature-supervision head."""
from __future__ import annotations

import math
import zlib
from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .boxgeom import AnchorSet, Detection, iou_matrix, nms_indices, tile_anchors

PRIOR_PROB = 0.01
INPUT_MEAN = 0.5  # images arrive in [0, 1]


@dataclass
class ModelConfig:
    levels: tuple[tuple[int, int], ...] = ((2, 4), (3, 8), (4, 16))
    in_channels: int = 3
    stage_channels: tuple[int, ...] = (16, 32, 32)
    fpn_channels: int = 16
    head_depth: int = 2
    rfe_enabled: bool = True
    fsm_enabled: bool = True
    fsm_channels: int = 64
    roi_size: int = 5
    anchors_per_location: int = 2
    anchor_aspect: float = 1.25
    # weight of the step-1 regression gradient flowing back into the shared features
    step1_grad_scale: float = 0.1

    def __post_init__(self):
        self.levels = tuple((int(i), int(s)) for i, s in self.levels)
        self.stage_channels = tuple(int(c) for c in self.stage_channels)
        strides = [s for _, s in self.levels]
        if any(b <= a for a, b in zip(strides, strides[1:])):
            raise ValueError(f"strides must be strictly increasing, got {strides}")
        if any(b != 2 * a for a, b in zip(strides, strides[1:])):
            raise ValueError(f"consecutive strides must double, got {strides}")
        if strides[0] < 2 or strides[0] & (strides[0] - 1):
            raise ValueError(f"first stride must be a power of two >= 2, got {strides[0]}")
        if len(self.stage_channels) != len(self.levels):
            raise ValueError("stage_channels needs one entry per level")
        if not 0.0 <= self.step1_grad_scale <= 1.0:
            raise ValueError(f"step1_grad_scale must lie in [0, 1], got {self.step1_grad_scale}")
        if self.rfe_enabled and self.fpn_channels % 4:
            raise ValueError("fpn_channels must be divisible by 4 when RFE is enabled")

    @property
    def level_ids(self) -> list[int]:
        return [i for i, _ in self.levels]

    @property
    def strides(self) -> list[int]:
        return [s for _, s in self.levels]

    @property
    def max_stride(self) -> int:
        return self.levels[-1][1]


@dataclass(frozen=True)
class Proposal:
    box: tuple[float, float, float, float]
    level: int
    label: int  # 1 face, 0 background
    image: int = 0


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------

def _layer_rng(seed: int, name: str) -> np.random.Generator:
    # per-layer streams keep initialisation independent of which modules exist
    return np.random.default_rng([seed & 0xFFFFFFFF, zlib.crc32(name.encode())])


class Conv:
    def __init__(self, name: str, cin: int, cout: int, kernel=3, stride: int = 1,
                 padding=None, seed: int = 0, bias_init: float = 0.0, weight_std: float | None = None):
        kh, kw = (kernel, kernel) if isinstance(kernel, int) else kernel
        if padding is None:
            padding = (kh // 2, kw // 2)
        self.name = name
        self.stride = stride
        self.padding = padding
        rng = _layer_rng(seed, name)
        if weight_std is None:
            # He-uniform: keeps activation variance roughly constant through relus
            limit = math.sqrt(6.0 / (cin * kh * kw))
            w = rng.uniform(-limit, limit, size=(cout, cin, kh, kw))
        else:
            w = rng.normal(0.0, weight_std, size=(cout, cin, kh, kw))
        self.weight = ad.parameter(w, f"{name}.weight")
        self.bias = ad.parameter(np.full(cout, bias_init), f"{name}.bias")

    def __call__(self, x: Tensor) -> Tensor:
        return ad.conv2d(x, self.weight, self.bias, self.stride, self.padding)

    def parameters(self) -> Iterator[tuple[str, Tensor]]:
        yield self.weight.name, self.weight
        yield self.bias.name, self.bias


class RFEBlock:
    """Four rectangular branches (1x3, 3x1, 1x5, 5x1) after a quarter-width
    1x1 reduction, fused by a 1x1 conv and added to an identity shortcut."""

    KERNELS = ((1, 3), (3, 1), (1, 5), (5, 1))

    def __init__(self, name: str, channels: int, seed: int = 0):
        if channels % 4:
            raise ValueError(f"RFE block needs channels divisible by 4, got {channels}")
        q = channels // 4
        self.channels = channels
        self.reduce = [Conv(f"{name}.b{i}.reduce", channels, q, 1, seed=seed) for i in range(4)]
        self.rect = [Conv(f"{name}.b{i}.rect", q, q, k, seed=seed) for i, k in enumerate(self.KERNELS)]
        self.fuse = Conv(f"{name}.fuse", channels, channels, 1, seed=seed)

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[1] != self.channels:
            raise ValueError(f"RFE block built for {self.channels} channels, got {x.shape[1]}")
        branches = [ad.relu(r(ad.relu(p(x)))) for p, r in zip(self.reduce, self.rect)]
        return ad.relu(ad.add(x, self.fuse(ad.concat(branches, axis=1))))

    def parameters(self):
        for layer in [*self.reduce, *self.rect, self.fuse]:
            yield from layer.parameters()


def rfe_block(feature: Tensor, block: RFEBlock) -> Tensor:
    """Apply ``block`` to a [C,H,W] or [N,C,H,W] feature, preserving shape."""
    if feature.ndim == 3:
        c, h, w = feature.shape
        return ad.reshape(block(ad.reshape(feature, (1, c, h, w))), (c, h, w))
    return block(feature)


class _ReluConv(Conv):
    def __call__(self, x):
        return ad.relu(super().__call__(x))


class Subnet:
    """Head tower (RFE blocks or plain 3x3 convs) followed by prediction convs."""

    def __init__(self, name: str, channels: int, depth: int, outputs: dict[str, int],
                 rfe: bool, seed: int, bias_init: float = 0.0):
        if rfe:
            self.tower = [RFEBlock(f"{name}.rfe{i}", channels, seed) for i in range(depth)]
        else:
            self.tower = [_ReluConv(f"{name}.conv{i}", channels, channels, 3, seed=seed) for i in range(depth)]
        self.pred = {k: Conv(f"{name}.{k}", channels, n, 3, seed=seed, bias_init=bias_init, weight_std=0.01)
                     for k, n in outputs.items()}

    def trunk(self, x: Tensor) -> Tensor:
        for layer in self.tower:
            x = layer(x)
        return x

    def parameters(self):
        for layer in self.tower:
            yield from layer.parameters()
        for k in sorted(self.pred):
            yield from self.pred[k].parameters()


# ---------------------------------------------------------------------------
# model
# ---------------------------------------------------------------------------

@dataclass
class PyramidFeatures:
    lateral: list[Tensor]   # step-1 features, one per level
    pyramid: list[Tensor]   # step-2 features after the top-down merge


@dataclass
class HeadOutput:
    """Per-level raw maps: cls [N,A,H,W], reg [N,4A,H,W]; step-1 maps may be None."""
    level: int
    cls1: Tensor | None
    reg1: Tensor | None
    cls2: Tensor
    reg2: Tensor


@dataclass
class ForwardResult:
    features: PyramidFeatures
    heads: list[HeadOutput]
    anchors: list[AnchorSet] = field(default_factory=list)


class Detector:
    def __init__(self, config: ModelConfig | None = None, seed: int = 0):
        self.config = cfg = config or ModelConfig()
        self.seed = seed
        f = cfg.fpn_channels
        a = cfg.anchors_per_location
        n_stem = int(math.log2(cfg.strides[0])) - 1
        self.stem = []
        cin = cfg.in_channels
        for i in range(n_stem):
            self.stem.append(_ReluConv(f"stem{i}", cin, cfg.stage_channels[0], 3, stride=2, seed=seed))
            cin = cfg.stage_channels[0]
        self.stages = []
        for (lid, _), c in zip(cfg.levels, cfg.stage_channels):
            self.stages.append([
                _ReluConv(f"C{lid}.down", cin, c, 3, stride=2, seed=seed),
                _ReluConv(f"C{lid}.conv", c, c, 3, seed=seed),
            ])
            cin = c
        self.lateral = [Conv(f"P{lid}.lateral", c, f, 1, seed=seed)
                        for (lid, _), c in zip(cfg.levels, cfg.stage_channels)]
        self.smooth = [Conv(f"P{lid}.smooth", f, f, 3, seed=seed) for lid, _ in cfg.levels]
        prior = -math.log((1 - PRIOR_PROB) / PRIOR_PROB)
        self.cls_subnet = Subnet("cls", f, cfg.head_depth, {"pred": a}, cfg.rfe_enabled, seed,
                                 bias_init=prior)
        self.box_subnet = Subnet("box", f, cfg.head_depth, {"pred": 4 * a}, cfg.rfe_enabled, seed)
        self.box1_subnet = Subnet("box1", f, cfg.head_depth, {"pred": 4 * a}, cfg.rfe_enabled, seed)
        self.fsm: list[Conv] = []
        if cfg.fsm_enabled:
            fc = cfg.fsm_channels
            self.fsm = [
                _ReluConv("fsm.conv0", f, fc, 3, seed=seed),
                _ReluConv("fsm.conv1", fc, fc, 3, seed=seed),
                _ReluConv("fsm.conv2", fc, fc, 3, seed=seed),
                Conv("fsm.pred", fc, 1, 3, seed=seed),
            ]
        self._anchor_cache: dict[tuple[int, int], list[AnchorSet]] = {}

    # -- parameters -------------------------------------------------------
    def named_parameters(self) -> list[tuple[str, Tensor]]:
        out: list[tuple[str, Tensor]] = []
        for layer in self.stem:
            out.extend(layer.parameters())
        for stage in self.stages:
            for layer in stage:
                out.extend(layer.parameters())
        for layer in [*self.lateral, *self.smooth]:
            out.extend(layer.parameters())
        out.extend(self.cls_subnet.parameters())
        out.extend(self.box_subnet.parameters())
        out.extend(self.box1_subnet.parameters())
        for layer in self.fsm:
            out.extend(layer.parameters())
        return out

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {n: t.data.copy() for n, t in self.named_parameters()}

    def load_state(self, state: dict[str, np.ndarray], strict: bool = True) -> None:
        """Copy arrays into parameters; FSM weights may be absent or extra when not strict."""
        own = dict(self.named_parameters())
        missing = [n for n in own if n not in state and (strict or not n.startswith("fsm."))]
        extra = [n for n in state if n not in own and (strict or not n.startswith("fsm."))]
        if missing or extra:
            raise ValueError(f"checkpoint/model topology mismatch: missing={missing[:5]} extra={extra[:5]}")
        for n, t in own.items():
            if n not in state:
                continue
            if tuple(state[n].shape) != t.shape:
                raise ValueError(f"checkpoint/model topology mismatch: {n} has shape "
                                 f"{tuple(state[n].shape)}, model expects {t.shape}")
            t.data = np.array(state[n], dtype=t.data.dtype)

    def save(self, path) -> None:
        ad.save_checkpoint(path, self.named_parameters())

    @classmethod
    def from_checkpoint(cls, path, config: ModelConfig, strict: bool = False) -> "Detector":
        model = cls(config)
        model.load_state(ad.load_checkpoint(path), strict=strict)
        return model

    # -- graph ------------------------------------------------------------
    def anchors(self, height: int, width: int) -> list[AnchorSet]:
        key = (height, width)
        if key not in self._anchor_cache:
            self._anchor_cache[key] = [
                tile_anchors(height // s, width // s, s, aspect=self.config.anchor_aspect, level=lid)
                for lid, s in self.config.levels
            ]
        return self._anchor_cache[key]

    def build_fpn(self, images) -> PyramidFeatures:
        x = ad.add(ad.as_tensor(images), -INPUT_MEAN)
        if x.ndim == 3:
            x = ad.reshape(x, (1, *x.shape))
        _, _, h, w = x.shape
        ms = self.config.max_stride
        if h % ms or w % ms:
            raise ValueError(f"image extent {h}x{w} not divisible by max stride {ms}")
        for layer in self.stem:
            x = layer(x)
        backbone = []
        for stage in self.stages:
            for layer in stage:
                x = layer(x)
            backbone.append(x)
        lateral = [lat(c) for lat, c in zip(self.lateral, backbone)]
        merged: list[Tensor] = [None] * len(lateral)  # type: ignore[list-item]
        merged[-1] = lateral[-1]
        for i in range(len(lateral) - 2, -1, -1):
            merged[i] = ad.add(lateral[i], ad.upsample_nearest(merged[i + 1], 2))
        pyramid = [sm(m) for sm, m in zip(self.smooth, merged)]
        return PyramidFeatures(lateral=lateral, pyramid=pyramid)

    def heads(self, features: PyramidFeatures, stc_levels: Sequence[int] = (),
              str_levels: Sequence[int] = ()) -> list[HeadOutput]:
        out = []
        cls_pred = self.cls_subnet.pred["pred"]
        for lid, lat, pyr in zip(self.config.level_ids, features.lateral, features.pyramid):
            cls2 = cls_pred(self.cls_subnet.trunk(pyr))
            reg2 = self.box_subnet.pred["pred"](self.box_subnet.trunk(pyr))
            cls1 = reg1 = None
            if lid in stc_levels:
                # same classification module as step 2
                cls1 = cls_pred(self.cls_subnet.trunk(lat))
            if lid in str_levels:
                lat1 = ad.scale_grad(lat, self.config.step1_grad_scale)
                reg1 = self.box1_subnet.pred["pred"](self.box1_subnet.trunk(lat1))
            out.append(HeadOutput(lid, cls1, reg1, cls2, reg2))
        return out

    def forward(self, images, stc_levels=(), str_levels=()) -> ForwardResult:
        feats = self.build_fpn(images)
        h, w = feats.pyramid[0].shape[2] * self.config.strides[0], feats.pyramid[0].shape[3] * self.config.strides[0]
        return ForwardResult(feats, self.heads(feats, stc_levels, str_levels), self.anchors(h, w))

    def fsm_forward(self, features: PyramidFeatures, proposals: Sequence[Proposal]) -> Tensor:
        """One face logit per proposal, in proposal order."""
        if not self.fsm:
            raise RuntimeError("feature supervision head is disabled in this model")
        if not proposals:
            return Tensor(np.zeros(0))
        boxes = np.array([p.box for p in proposals], dtype=np.float64)
        if np.any(boxes[:, 2] <= boxes[:, 0]) or np.any(boxes[:, 3] <= boxes[:, 1]):
            raise ValueError("fsm_forward: degenerate (zero-area) proposal box")
        levels = np.array([p.level for p in proposals])
        images = np.array([p.image for p in proposals])
        pieces, order = [], []
        for lid, stride, feat in zip(self.config.level_ids, self.config.strides, features.pyramid):
            sel = np.nonzero(levels == lid)[0]
            if len(sel) == 0:
                continue
            pieces.append(ad.roi_align(feat, image_to_feature(boxes[sel], stride), images[sel],
                                       self.config.roi_size))
            order.append(sel)
        if sum(len(s) for s in order) != len(proposals):
            raise ValueError("fsm_forward: proposal assigned to an unknown level")
        x = ad.concat(pieces, axis=0) if len(pieces) > 1 else pieces[0]
        for layer in self.fsm:
            x = layer(x)
        logits = ad.reshape(ad.global_avg_pool(x), (x.shape[0],))
        inverse = np.argsort(np.concatenate(order), kind="stable")
        return ad.take(logits, inverse)


def image_to_feature(boxes: np.ndarray, stride: int) -> np.ndarray:
    """Image-pixel boxes to continuous feature coordinates (cell centres at integers)."""
    return np.asarray(boxes, dtype=np.float64) / stride - 0.5


def flatten_cls(t: Tensor) -> Tensor:
    """[N,A,H,W] -> [N, H*W*A], row-major by cell then anchor."""
    n, a, h, w = t.shape
    return ad.reshape(ad.transpose(t, (0, 2, 3, 1)), (n, h * w * a))


def flatten_reg(t: Tensor) -> Tensor:
    """[N,4A,H,W] -> [N, H*W*A, 4]."""
    n, a4, h, w = t.shape
    return ad.reshape(ad.transpose(t, (0, 2, 3, 1)), (n, h * w * (a4 // 4), 4))


def gt_levels(gts: np.ndarray, anchors: Sequence[AnchorSet]) -> np.ndarray:
    """Pyramid level of each gt's highest-IoU anchor."""
    gts = np.asarray(gts, dtype=np.float64).reshape(-1, 4)
    if len(gts) == 0:
        return np.zeros(0, dtype=np.int64)
    all_boxes = np.concatenate([a.boxes for a in anchors])
    lvl = np.concatenate([np.full(len(a), a.level) for a in anchors])
    return lvl[np.argmax(iou_matrix(all_boxes, gts), axis=0)]


def sample_fsm_proposals(detections: Sequence[Detection], gts: np.ndarray, gt_level: np.ndarray,
                         max_proposals: int = 512, nms_overlap: float = 0.7,
                         thresholds: tuple[float, float] = (0.4, 0.7), image: int = 0) -> list[Proposal]:
    """NMS the detections, prepend the gts, cap the count and label by IoU.

    Proposals whose best IoU falls between the two thresholds are dropped.
    """
    if detections:
        boxes = np.array([d.box.as_tuple() for d in detections], dtype=np.float64)
        scores = np.array([d.score for d in detections], dtype=np.float64)
        levels = np.array([d.level for d in detections], dtype=np.int64)
    else:
        boxes, scores, levels = np.zeros((0, 4)), np.zeros(0), np.zeros(0, dtype=np.int64)
    return sample_proposals_arrays(boxes, scores, levels, gts, gt_level, max_proposals,
                                   nms_overlap, thresholds, image)


def sample_proposals_arrays(boxes: np.ndarray, scores: np.ndarray, levels: np.ndarray,
                            gts: np.ndarray, gt_level: np.ndarray, max_proposals: int = 512,
                            nms_overlap: float = 0.7, thresholds: tuple[float, float] = (0.4, 0.7),
                            image: int = 0) -> list[Proposal]:
    gts = np.asarray(gts, dtype=np.float64).reshape(-1, 4)
    neg_t, pos_t = thresholds
    if len(boxes):
        kept = nms_indices(boxes, scores, nms_overlap)
        kb = boxes[kept]
        valid = (kb[:, 2] > kb[:, 0]) & (kb[:, 3] > kb[:, 1])
        cand_boxes = np.concatenate([gts, kb[valid]])
        cand_levels = np.concatenate([np.asarray(gt_level, dtype=np.int64), levels[kept][valid]])
    else:
        cand_boxes, cand_levels = gts, np.asarray(gt_level, dtype=np.int64)
    out: list[Proposal] = []
    if len(cand_boxes) == 0:
        return out
    if len(gts):
        best = iou_matrix(cand_boxes, gts).max(axis=1)
    else:
        best = np.zeros(len(cand_boxes))
    for b, lvl, ov in zip(cand_boxes, cand_levels, best):
        if len(out) >= max_proposals:
            break
        if ov >= pos_t:
            label = 1
        elif ov < neg_t:
            label = 0
        else:
            continue
        out.append(Proposal(tuple(float(v) for v in b), int(lvl), label, image))
    return out
