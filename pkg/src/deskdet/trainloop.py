"""SGD training of the hybrid loss with linear warmup and step decay."""
from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .autodiff import Tensor
from .cascade import CascadeConfig, batch_ratios, hybrid_loss
from .netarch import Detector, ModelConfig
from .synthdata import Scene, augment

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    warmup_lr: float = 3.125e-4
    peak_lr: float = 1e-2
    warmup_epochs: int = 2
    milestones: tuple[int, int] = (20, 26)
    epochs: int = 30
    momentum: float = 0.9
    weight_decay: float = 1e-4
    # global gradient-norm ceiling; 0 disables clipping
    grad_clip: float = 10.0
    batch_size: int = 8
    seed: int = 0
    augment: bool = True
    use_str: bool = True
    use_stc: bool = True
    use_sml: bool = True
    use_fsm: bool = True
    use_rfe: bool = True

    def __post_init__(self):
        self.milestones = tuple(int(m) for m in self.milestones)
        m1, m2 = self.milestones
        if self.epochs > 0 and not (self.warmup_epochs < m1 < m2 < self.epochs):
            raise ValueError(
                f"schedule needs warmup ({self.warmup_epochs}) < milestone1 ({m1}) < "
                f"milestone2 ({m2}) < epochs ({self.epochs})")
        if self.grad_clip < 0:
            raise ValueError(f"grad_clip must be >= 0, got {self.grad_clip}")


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, value: float):
        super().__init__(f"non-finite loss {value} at step {step}")
        self.step = step


def learning_rate(step: int, steps_per_epoch: int, cfg: TrainConfig) -> float:
    """Linear ramp from warmup_lr to peak_lr over the warmup epochs, then /10 at each milestone."""
    warm = cfg.warmup_epochs * steps_per_epoch
    if step < warm:
        return cfg.warmup_lr + (cfg.peak_lr - cfg.warmup_lr) * step / warm
    epoch = step // steps_per_epoch
    drops = sum(epoch >= m for m in cfg.milestones)
    return cfg.peak_lr * (0.1 ** drops)


def clip_grad_norm(params: Sequence[Tensor], max_norm: float) -> float:
    """Rescale all gradients in place so their joint L2 norm is at most ``max_norm``.

    Returns the norm before clipping. ``max_norm <= 0`` leaves gradients alone.
    """
    grads = [p.grad for p in params if p.grad is not None]
    norm = math.sqrt(sum(float(np.square(g, dtype=np.float64).sum()) for g in grads))
    if max_norm > 0 and norm > max_norm:
        c = max_norm / norm
        for p in params:
            if p.grad is not None:
                p.grad = (p.grad * c).astype(p.grad.dtype)
    return norm


def sgd_step(params: Sequence[Tensor], velocity: list[np.ndarray | None], lr: float,
             momentum: float = 0.9, weight_decay: float = 1e-4) -> None:
    """v <- momentum*v + grad + wd*param ; param <- param - lr*v  (in place)."""
    for i, p in enumerate(params):
        if p.grad is None:
            continue
        g = p.grad + weight_decay * p.data
        v = g if velocity[i] is None else momentum * velocity[i] + g
        velocity[i] = v
        p.data = (p.data - lr * v).astype(p.data.dtype)


@dataclass
class EpochRecord:
    epoch: int
    step: int
    lr: float
    str_loss: float
    stc_loss: float
    fsm_loss: float

    @property
    def total(self) -> float:
        return self.str_loss + self.stc_loss + self.fsm_loss

    def line(self) -> str:
        return (f"{self.epoch}, {self.step}, {self.lr:.6e}, {self.str_loss:.6f}, "
                f"{self.stc_loss:.6f}, {self.fsm_loss:.6f}, {self.total:.6f}")


@dataclass
class TrainResult:
    model: Detector
    history: list[EpochRecord] = field(default_factory=list)
    step_losses: list[float] = field(default_factory=list)
    ratio_before: list[float] = field(default_factory=list)
    ratio_after: list[float] = field(default_factory=list)
    batch_ratios: list[tuple[float, float]] = field(default_factory=list)
    seconds: float = 0.0
    checkpoint: Path | None = None


def effective_configs(model_cfg: ModelConfig, cascade_cfg: CascadeConfig,
                      cfg: TrainConfig) -> tuple[ModelConfig, CascadeConfig]:
    """Apply the module toggles to copies of the model and cascade configs."""
    m = replace(model_cfg, rfe_enabled=cfg.use_rfe, fsm_enabled=cfg.use_fsm)
    c = replace(cascade_cfg,
                str_levels=cascade_cfg.str_levels if cfg.use_str else (),
                stc_levels=cascade_cfg.stc_levels if cfg.use_stc else (),
                sml_enabled=cfg.use_sml, fsm_enabled=cfg.use_fsm)
    return m, c


def _batch(scenes: Sequence[Scene]):
    return np.stack([s.image for s in scenes]), [s.gts for s in scenes]


def train(scenes: Sequence[Scene], model_cfg: ModelConfig, cascade_cfg: CascadeConfig,
          cfg: TrainConfig, out_dir=None, log_path=None) -> TrainResult:
    """Optimise the hybrid loss; writes ``model.ckpt`` and ``metrics.log`` under ``out_dir``."""
    model_cfg, cascade_cfg = effective_configs(model_cfg, cascade_cfg, cfg)
    model = Detector(model_cfg, seed=cfg.seed)
    params = model.parameters()
    velocity: list[np.ndarray | None] = [None] * len(params)
    res = TrainResult(model)
    n = len(scenes)
    spe = max(math.ceil(n / cfg.batch_size), 1) if n else 0
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        log_path = log_path or out / "metrics.log"
    if log_path is not None:
        Path(log_path).write_text("epoch, step, lr, str_loss, stc_loss, fsm_loss, total\n")
    t0 = time.perf_counter()
    step = 0
    for epoch in range(cfg.epochs if n else 0):
        order = np.random.default_rng([cfg.seed, epoch]).permutation(n)
        sums = np.zeros(3)
        lr = learning_rate(step, spe, cfg)
        for bi in range(spe):
            idx = order[bi * cfg.batch_size:(bi + 1) * cfg.batch_size]
            batch = [scenes[i] for i in idx]
            if cfg.augment:
                batch = [augment(s, seed=(cfg.seed * 1_000_003 + epoch * 10_007 + int(i)) & 0x7FFFFFFF)
                         for s, i in zip(batch, idx)]
            images, gts = _batch(batch)
            lr = learning_rate(step, spe, cfg)
            model.zero_grad()
            loss, report, targets = hybrid_loss(model, images, gts, cascade_cfg)
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingDiverged(step, value)
            loss.backward()
            clip_grad_norm(params, cfg.grad_clip)
            sgd_step(params, velocity, lr, cfg.momentum, cfg.weight_decay)
            sums += (report.str_loss, report.stc_loss, report.fsm_loss)
            res.step_losses.append(value)
            if cascade_cfg.stc_levels:
                res.ratio_before.extend(targets.ratio_before)
                res.ratio_after.extend(targets.ratio_after)
                res.batch_ratios.append(batch_ratios(targets))
            step += 1
        rec = EpochRecord(epoch, step, lr, *(sums / spe))
        res.history.append(rec)
        log.info("epoch %d lr %.2e loss %.4f (str %.4f stc %.4f fsm %.4f)",
                 epoch, lr, rec.total, rec.str_loss, rec.stc_loss, rec.fsm_loss)
        if log_path is not None:
            with open(log_path, "a") as fh:
                fh.write(rec.line() + "\n")
    res.seconds = time.perf_counter() - t0
    if out is not None:
        res.checkpoint = out / "model.ckpt"
        model.save(res.checkpoint)
    return res
