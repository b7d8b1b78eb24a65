"""Losses, linear-decay schedules and the two-stage optimisation loop."""
from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Iterator, Optional

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .dataset import AlignedSet, AugmentPolicy, crop_flip, sample_augmentation
from .exceptions import ConfigError, CoverageError, ShapeError, ValidationError
from .maskgen import MaskBank
from .networks import FMPN, rgb_to_gray

HISTORY_COLUMNS = ("epoch", "lG", "lC", "l_total", "lr_fmg", "lr_rest", "train_acc")


@dataclass
class TrainConfig:
    lambda1: float = 10.0
    lambda2: float = 1.0
    stage1_epochs: int = 300
    stage2_epochs: int = 200
    lr_fmg_stage1: float = 1e-4
    lr_fmg_stage2: float = 1e-5
    lr_rest: float = 1e-4
    decay_start_stage1: int = 150
    decay_start_stage2: int = 100
    batch_size: int = 16
    seed: int = 0
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    grad_clip: Optional[float] = None
    freeze_fmg: bool = False

    def __post_init__(self):
        self.betas = tuple(float(b) for b in self.betas)
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ConfigError("loss weights must be non-negative")
        for lr in (self.lr_fmg_stage1, self.lr_fmg_stage2, self.lr_rest):
            if not lr >= 0:
                raise ConfigError("learning rates must be non-negative")
        for epochs, start in ((self.stage1_epochs, self.decay_start_stage1),
                              (self.stage2_epochs, self.decay_start_stage2)):
            if epochs < 0:
                raise ConfigError("epoch counts must be non-negative")
            if epochs > 0 and not 0 <= start < epochs:
                raise ConfigError(f"decay start {start} must lie in [0, {epochs})")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be positive")

    @classmethod
    def desk(cls, **overrides) -> "TrainConfig":
        """Short schedule for the synthetic corpus; same shape as the full one."""
        base = dict(stage1_epochs=8, stage2_epochs=16, decay_start_stage1=4, decay_start_stage2=8,
                    lr_fmg_stage1=2e-3, lr_fmg_stage2=2e-4, lr_rest=2e-3)
        base.update(overrides)
        return cls(**base)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown training fields {sorted(unknown)}")
        return cls(**d)

    def stage1_schedule(self) -> "StageSchedule":
        return StageSchedule(self.lr_fmg_stage1, self.stage1_epochs, self.decay_start_stage1)

    def stage2_schedules(self) -> tuple["StageSchedule", "StageSchedule"]:
        return (StageSchedule(self.lr_fmg_stage2, self.stage2_epochs, self.decay_start_stage2),
                StageSchedule(self.lr_rest, self.stage2_epochs, self.decay_start_stage2))


@dataclass(frozen=True)
class StageSchedule:
    base_lr: float
    total_epochs: int
    decay_start: int


def lr_at(schedule: StageSchedule, epoch: int) -> float:
    """Constant until ``decay_start``, then linear down to 0 at ``total_epochs``."""
    if not 0 <= epoch <= schedule.total_epochs:
        raise ValidationError(f"epoch {epoch} outside [0, {schedule.total_epochs}]")
    if epoch < schedule.decay_start:
        return schedule.base_lr
    return schedule.base_lr * (schedule.total_epochs - epoch) / (schedule.total_epochs - schedule.decay_start)


def mask_loss(pred: Tensor, target: Tensor) -> Tensor:
    if pred.shape != target.shape:
        raise ShapeError(f"mask shapes differ: {tuple(pred.shape)} vs {tuple(target.shape)}")
    return ((pred - target) ** 2).mean()


def classification_loss(logits: Tensor, labels: Tensor) -> Tensor:
    labels = torch.as_tensor(labels, dtype=torch.long)
    if labels.numel() and (labels.min() < 0 or labels.max() >= logits.shape[-1]):
        raise ValidationError(f"labels must lie in [0, {logits.shape[-1]})")
    return F.cross_entropy(logits, labels)


def total_loss(l_g, l_c, cfg: TrainConfig):
    return cfg.lambda1 * l_g + cfg.lambda2 * l_c


def mask_targets(bank: MaskBank, labels: np.ndarray, size: int, class_names=None) -> np.ndarray:
    """Per-sample ground-truth masks at ``size``; fails if a label has no mask."""
    labels = np.asarray(labels)
    for k in np.unique(labels):
        if k >= len(bank):
            name = class_names[k] if class_names is not None and k < len(class_names) else str(k)
            raise CoverageError(name, f"mask bank has no mask for class {name!r}")
    return bank.stack(size).astype(np.float32)[labels]


def epoch_rng(seed: int, stage: int, epoch: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), stage, epoch])


def iter_batches(rgb: np.ndarray, labels: np.ndarray, masks: Optional[np.ndarray], cfg: TrainConfig,
                 policy: AugmentPolicy, rng: np.random.Generator) -> Iterator[tuple]:
    """Shuffle, augment and yield NCHW tensors ``(rgb, labels, masks)``.

    Crop and flip are drawn once per sample and applied to its mask too.
    """
    order = rng.permutation(len(labels))
    for start in range(0, len(order), cfg.batch_size):
        idx = order[start:start + cfg.batch_size]
        views = [sample_augmentation(rng, policy) for _ in idx]
        crop = policy.crop_size
        x = np.stack([crop_flip(rgb[i], crop, pos, flip) for i, (pos, flip) in zip(idx, views)])
        xt = torch.from_numpy(x).permute(0, 3, 1, 2).contiguous()
        mt = None
        if masks is not None:
            m = np.stack([crop_flip(masks[i], crop, pos, flip) for i, (pos, flip) in zip(idx, views)])
            mt = torch.from_numpy(m).unsqueeze(1)
        yield xt, torch.from_numpy(labels[idx]), mt


def _set_lr(group: dict, lr: float) -> None:
    group["lr"] = lr


def train_stage1(model: FMPN, data: AlignedSet, bank: MaskBank, cfg: TrainConfig,
                 policy: AugmentPolicy) -> list[dict]:
    """Fit the mask generator alone against the ground-truth masks."""
    masks = mask_targets(bank, data.labels, data.rgb.shape[1], data.class_names)
    history: list[dict] = []
    if cfg.stage1_epochs == 0:
        return history
    fmg = model.fmg
    sched = cfg.stage1_schedule()
    opt = torch.optim.Adam(fmg.parameters(), lr=sched.base_lr, betas=cfg.betas, eps=cfg.eps)
    fmg.train()
    for epoch in range(cfg.stage1_epochs):
        lr = lr_at(sched, epoch)
        _set_lr(opt.param_groups[0], lr)
        total, n = 0.0, 0
        for x, _, m in iter_batches(data.rgb, data.labels, masks, cfg, policy, epoch_rng(cfg.seed, 1, epoch)):
            loss = mask_loss(fmg(rgb_to_gray(x)), m)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            if cfg.grad_clip:
                nn.utils.clip_grad_norm_(fmg.parameters(), cfg.grad_clip)
            opt.step()
            total += loss.item() * len(x)
            n += len(x)
        history.append({"stage": 1, "epoch": epoch, "lG": total / n, "lC": math.nan,
                        "l_total": cfg.lambda1 * total / n, "lr_fmg": lr, "lr_rest": math.nan,
                        "train_acc": math.nan})
    return history


def joint_step(model: FMPN, x: Tensor, labels: Tensor, m: Optional[Tensor], cfg: TrainConfig):
    """Forward pass and losses for one batch; returns ``(l_total, l_G, l_C, logits)``."""
    mask, logits = model(x)
    l_c = classification_loss(logits, labels)
    if mask is None or m is None:
        l_g = torch.zeros((), dtype=logits.dtype)
    else:
        l_g = mask_loss(mask, m)
    return total_loss(l_g, l_c, cfg), l_g, l_c, logits


def train_joint(model: FMPN, data: AlignedSet, bank: Optional[MaskBank], cfg: TrainConfig,
                policy: AugmentPolicy, epoch_offset: int = 0) -> list[dict]:
    """Train all networks on ``lambda1 * l_G + lambda2 * l_C`` with two lr groups."""
    uses_fmg = model.variant != "baseline_cnn"
    if uses_fmg and bank is None and cfg.lambda1 > 0:
        raise ValidationError("a mask bank is required when lambda1 > 0")
    masks = mask_targets(bank, data.labels, data.rgb.shape[1], data.class_names) \
        if uses_fmg and bank is not None else None
    history: list[dict] = []
    if cfg.stage2_epochs == 0:
        return history
    sched_fmg, sched_rest = cfg.stage2_schedules()
    train_fmg = uses_fmg and not cfg.freeze_fmg
    rest = list(model.cn.parameters()) + (list(model.pfn.parameters()) if uses_fmg else [])
    groups = [{"params": rest, "lr": sched_rest.base_lr}]
    if train_fmg:
        groups.append({"params": list(model.fmg.parameters()), "lr": sched_fmg.base_lr})
    elif uses_fmg:
        for p in model.fmg.parameters():
            p.requires_grad_(False)
    opt = torch.optim.Adam(groups, betas=cfg.betas, eps=cfg.eps)

    model.train()
    if uses_fmg and not train_fmg:
        model.fmg.eval()
    for epoch in range(cfg.stage2_epochs):
        lr_rest, lr_fmg = lr_at(sched_rest, epoch), lr_at(sched_fmg, epoch)
        _set_lr(opt.param_groups[0], lr_rest)
        if train_fmg:
            _set_lr(opt.param_groups[1], lr_fmg)
        sums = np.zeros(3)
        correct = n = 0
        for x, y, m in iter_batches(data.rgb, data.labels, masks, cfg, policy, epoch_rng(cfg.seed, 2, epoch)):
            loss, l_g, l_c, logits = joint_step(model, x, y, m, cfg)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            if cfg.grad_clip:
                nn.utils.clip_grad_norm_([p for g in groups for p in g["params"]], cfg.grad_clip)
            opt.step()
            sums += np.array([l_g.item(), l_c.item(), loss.item()]) * len(x)
            correct += int((logits.argmax(1) == y).sum())
            n += len(x)
        lg, lc, lt = sums / n
        history.append({"stage": 2, "epoch": epoch_offset + epoch, "lG": lg if masks is not None else math.nan,
                        "lC": lc, "l_total": lt, "lr_fmg": lr_fmg if train_fmg else math.nan,
                        "lr_rest": lr_rest, "train_acc": correct / n})
    return history


def write_history(history: list[dict], path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(HISTORY_COLUMNS)
        for row in history:
            writer.writerow(["" if isinstance(row[c], float) and math.isnan(row[c]) else repr(row[c])
                             for c in HISTORY_COLUMNS])
    return path
