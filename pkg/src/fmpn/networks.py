"""Mask generator, prior fusion and classification networks.

Modules work in NCHW internally; the ``*_forward``/``pfn_fuse`` helpers take
channel-last batches (``B x H x W`` gray, ``B x H x W x 3`` colour), matching the
layout used by the data pipeline.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Optional

import numpy as np
import torch
from torch import Tensor, nn

from .dataset import LUMA_WEIGHTS
from .exceptions import ConfigError, LoadError, ShapeError

VARIANTS = ("full", "no_lG", "baseline_cnn")


@dataclass
class ArchConfig:
    n_classes: int = 7
    input_size: int = 224
    fmg_channels: tuple[int, int] = (64, 128)
    fmg_blocks: int = 4
    backbone: str = "tiny"
    backbone_widths: tuple[int, ...] = (16, 32, 64)
    zero_init_fmg_head: bool = False
    pretrained_path: Optional[str] = None

    def __post_init__(self):
        self.fmg_channels = tuple(int(c) for c in self.fmg_channels)
        self.backbone_widths = tuple(int(c) for c in self.backbone_widths)
        if self.n_classes < 2:
            raise ConfigError("n_classes must be at least 2")
        if len(self.fmg_channels) != 2:
            raise ConfigError("fmg_channels needs two widths")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["fmg_channels"] = list(self.fmg_channels)
        d["backbone_widths"] = list(self.backbone_widths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ArchConfig":
        known = cls.__dataclass_fields__
        unknown = set(d) - set(known)
        if unknown:
            raise ConfigError(f"unknown architecture fields {sorted(unknown)}")
        return cls(**d)


class ResidualBlock(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.body = nn.Sequential(
            nn.Conv2d(channels, channels, 3, padding=1),
            nn.BatchNorm2d(channels),
            nn.ReLU(),
            nn.Conv2d(channels, channels, 3, padding=1),
            nn.BatchNorm2d(channels),
        )

    def forward(self, x: Tensor) -> Tensor:
        return x + self.body(x)


class MaskGenerator(nn.Module):
    """Gray face -> motion mask in (0, 1) at the input resolution."""

    def __init__(self, channels=(64, 128), n_blocks: int = 4):
        super().__init__()
        c1, c2 = channels
        self.encoder = nn.Sequential(
            nn.Conv2d(1, c1, 3, stride=2, padding=1),
            nn.BatchNorm2d(c1),
            nn.ReLU(),
            nn.Conv2d(c1, c2, 3, stride=2, padding=1),
            nn.BatchNorm2d(c2),
            nn.ReLU(),
        )
        self.trunk = nn.Sequential(*[ResidualBlock(c2) for _ in range(n_blocks)])
        self.decoder = nn.Sequential(
            nn.ConvTranspose2d(c2, c1, 3, stride=2, padding=1, output_padding=1),
            nn.BatchNorm2d(c1),
            nn.ReLU(),
            nn.ConvTranspose2d(c1, 1, 3, stride=2, padding=1, output_padding=1),
        )

    @property
    def head(self) -> nn.ConvTranspose2d:
        return self.decoder[-1]

    def forward(self, gray: Tensor) -> Tensor:
        h, w = gray.shape[-2:]
        if h % 4 or w % 4:
            raise ShapeError(f"mask generator needs sides divisible by 4, got {h}x{w}")
        return torch.sigmoid(self.decoder(self.trunk(self.encoder(gray))))


class PriorFusion(nn.Module):
    """Learned sum of the holistic colour face and the mask-weighted gray face."""

    def __init__(self):
        super().__init__()
        self.holistic = nn.Conv2d(3, 3, 1, bias=True)
        self.masked = nn.Conv2d(1, 3, 1, bias=True)
        self.reset_to_passthrough()

    @torch.no_grad()
    def reset_to_passthrough(self):
        self.holistic.weight.copy_(torch.eye(3).view(3, 3, 1, 1))
        self.holistic.bias.zero_()
        self.masked.weight.fill_(1.0)
        self.masked.bias.zero_()

    def forward(self, rgb: Tensor, gray: Tensor, mask: Tensor) -> Tensor:
        if not (rgb.shape[-2:] == gray.shape[-2:] == mask.shape[-2:]):
            raise ShapeError("rgb, gray and mask must share spatial size")
        return self.holistic(rgb) + self.masked(gray * mask)


class TinyBackbone(nn.Module):
    """Three stride-2 conv blocks, global average pool, linear head."""

    def __init__(self, n_classes: int, widths=(16, 32, 64)):
        super().__init__()
        layers, c_in = [], 3
        for c in widths:
            layers += [nn.Conv2d(c_in, c, 3, stride=2, padding=1), nn.BatchNorm2d(c), nn.ReLU()]
            c_in = c
        self.features = nn.Sequential(*layers)
        self.pool = nn.AdaptiveAvgPool2d(1)
        self.head = nn.Linear(c_in, n_classes)

    def forward(self, x: Tensor) -> Tensor:
        return self.head(self.pool(self.features(x)).flatten(1))


BACKBONES: dict[str, Callable[..., nn.Module]] = {}


def register_backbone(name: str):
    def deco(factory):
        BACKBONES[name] = factory
        return factory
    return deco


@register_backbone("tiny")
def _tiny(arch: ArchConfig) -> nn.Module:
    return TinyBackbone(arch.n_classes, arch.backbone_widths)


@register_backbone("resnet18")
def _resnet18(arch: ArchConfig) -> nn.Module:
    from torchvision.models import resnet18
    return resnet18(num_classes=arch.n_classes)


@dataclass(frozen=True)
class BackboneDescriptor:
    name: str
    input_size: int
    n_classes: int


class ClassificationNet(nn.Module):
    def __init__(self, backbone: nn.Module, descriptor: BackboneDescriptor):
        super().__init__()
        self.backbone = backbone
        self.descriptor = descriptor

    def forward(self, x: Tensor) -> Tensor:
        size = self.descriptor.input_size
        if x.shape[1] != 3 or tuple(x.shape[-2:]) != (size, size):
            raise ShapeError(f"backbone expects 3x{size}x{size} input, got {tuple(x.shape[1:])}")
        return self.backbone(x)


def build_backbone(arch: ArchConfig) -> ClassificationNet:
    if arch.backbone not in BACKBONES:
        raise ConfigError(f"unknown backbone {arch.backbone!r}; known: {sorted(BACKBONES)}")
    net = BACKBONES[arch.backbone](arch)
    return ClassificationNet(net, BackboneDescriptor(arch.backbone, arch.input_size, arch.n_classes))


@torch.no_grad()
def fan_in_uniform_(module: nn.Module, generator: torch.Generator) -> None:
    """He-uniform weights (variance 2 / fan_in), zero biases, unit norm scales."""
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d, nn.Linear)):
            fan_in, _ = nn.init._calculate_fan_in_and_fan_out(m.weight)
            bound = float(np.sqrt(6.0 / fan_in))
            m.weight.uniform_(-bound, bound, generator=generator)
            if m.bias is not None:
                m.bias.zero_()
        elif isinstance(m, nn.BatchNorm2d):
            m.weight.fill_(1.0)
            m.bias.zero_()


def init_params(kind: str, arch: ArchConfig, seed: int) -> nn.Module:
    """Build and initialise one of ``"fmg"``, ``"pfn"`` or ``"cn"``."""
    gen = torch.Generator().manual_seed(int(seed))
    if kind == "fmg":
        net = MaskGenerator(arch.fmg_channels, arch.fmg_blocks)
        fan_in_uniform_(net, gen)
        if arch.zero_init_fmg_head:
            with torch.no_grad():
                net.head.weight.zero_()
                net.head.bias.zero_()
        return net
    if kind == "pfn":
        return PriorFusion()
    if kind == "cn":
        net = build_backbone(arch)
        fan_in_uniform_(net, gen)
        if arch.pretrained_path:
            load_backbone_weights(net, arch.pretrained_path)
        return net
    raise ConfigError(f"unknown network kind {kind!r}")


def load_backbone_weights(net: ClassificationNet, path) -> None:
    """Load an externally supplied ``state_dict`` (e.g. ImageNet weights)."""
    try:
        state = torch.load(path, map_location="cpu", weights_only=True)
    except (OSError, RuntimeError) as exc:
        raise LoadError(f"cannot read weights {path}: {exc}") from exc
    if isinstance(state, dict) and "state_dict" in state:
        state = state["state_dict"]
    try:
        net.backbone.load_state_dict(state)
    except (RuntimeError, TypeError) as exc:
        raise LoadError(f"weights {path} do not fit backbone {net.descriptor.name!r}: {exc}") from exc


def rgb_to_gray(rgb: Tensor) -> Tensor:
    """NCHW colour -> N1HW luminance."""
    w = torch.as_tensor(LUMA_WEIGHTS, dtype=rgb.dtype, device=rgb.device).view(1, 3, 1, 1)
    return (rgb * w).sum(dim=1, keepdim=True)


class FMPN(nn.Module):
    """Mask generator, fusion and classifier wired together.

    ``baseline_cnn`` skips the mask generator and fusion entirely and feeds the
    colour face straight to the classifier.
    """

    def __init__(self, fmg: MaskGenerator, pfn: PriorFusion, cn: ClassificationNet, variant: str = "full"):
        super().__init__()
        if variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}")
        self.fmg, self.pfn, self.cn = fmg, pfn, cn
        self.variant = variant

    @classmethod
    def build(cls, arch: ArchConfig, seed: int, variant: str = "full") -> "FMPN":
        # offset seeds so the three networks draw independent streams
        return cls(init_params("fmg", arch, seed), init_params("pfn", arch, seed + 1),
                   init_params("cn", arch, seed + 2), variant)

    def forward(self, rgb: Tensor) -> tuple[Optional[Tensor], Tensor]:
        if self.variant == "baseline_cnn":
            return None, self.cn(rgb)
        gray = rgb_to_gray(rgb)
        mask = self.fmg(gray)
        return mask, self.cn(self.pfn(rgb, gray, mask))


def _tensor(x, like: nn.Module) -> Tensor:
    dtype = next(like.parameters()).dtype
    return torch.as_tensor(np.asarray(x) if not isinstance(x, Tensor) else x, dtype=dtype)


def fmg_forward(fmg: MaskGenerator, gray) -> Tensor:
    g = _tensor(gray, fmg)
    if g.ndim != 3:
        raise ShapeError(f"expected B x H x W gray batch, got {tuple(g.shape)}")
    return fmg(g.unsqueeze(1)).squeeze(1)


def pfn_fuse(pfn: PriorFusion, rgb, gray, mask) -> Tensor:
    rgb, gray, mask = (_tensor(v, pfn) for v in (rgb, gray, mask))
    if rgb.ndim != 4 or rgb.shape[-1] != 3 or gray.shape != rgb.shape[:-1] or mask.shape != gray.shape:
        raise ShapeError("pfn_fuse needs rgb B x H x W x 3 with matching gray and mask")
    out = pfn(rgb.permute(0, 3, 1, 2), gray.unsqueeze(1), mask.unsqueeze(1))
    return out.permute(0, 2, 3, 1)


def cn_forward(cn: ClassificationNet, fused) -> Tensor:
    x = _tensor(fused, cn)
    if x.ndim != 4 or x.shape[-1] != 3:
        raise ShapeError(f"expected B x H x W x 3 input, got {tuple(x.shape)}")
    return cn(x.permute(0, 3, 1, 2))


def save_checkpoint(path, model: FMPN, header: dict) -> Path:
    """Write all tensors plus a JSON header into one ``.npz`` archive."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arrays = {}
    for prefix in ("fmg", "pfn", "cn"):
        for name, t in getattr(model, prefix).state_dict().items():
            arrays[f"{prefix}/{name}"] = t.detach().cpu().numpy()
    header = dict(header, variant=model.variant)
    arrays["__header__"] = np.array(json.dumps(header, sort_keys=True))
    with path.open("wb") as fh:
        np.savez(fh, **arrays)
    return path


def load_checkpoint(path) -> tuple[FMPN, dict]:
    try:
        archive = np.load(path, allow_pickle=False)
    except (OSError, ValueError) as exc:
        raise LoadError(f"cannot read checkpoint {path}: {exc}") from exc
    with archive:
        header = json.loads(str(archive["__header__"]))
        arch = ArchConfig.from_dict(dict(header["arch"], pretrained_path=None))
        model = FMPN.build(arch, 0, header.get("variant", "full"))
        for prefix in ("fmg", "pfn", "cn"):
            sub = getattr(model, prefix)
            state = {k.split("/", 1)[1]: torch.from_numpy(archive[k].copy())
                     for k in archive.files if k.startswith(prefix + "/")}
            try:
                sub.load_state_dict(state)
            except RuntimeError as exc:
                raise LoadError(f"checkpoint {path} does not match its header: {exc}") from exc
    return model, header
