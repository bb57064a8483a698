"""Segmentation networks (encoder -> aux head / context -> decoder) and the entropy-map discriminator."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import NamedTuple, Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

from .context import ContextModule

CHECKPOINT_FORMAT = "personaseg-checkpoint"
CHECKPOINT_VERSION = 1
BACKBONES = ("desk", "resnet50_psp")


@dataclass
class ModelConfig:
    backbone: str = "desk"
    num_classes: int = 4
    channels: int = 64  # CH of the context module input
    variant: str = "group"
    region_norm: str = "softmax+spatial"
    attn_dim: Optional[int] = None  # default CH // 2
    detach_bank: bool = False
    norm_mean: float = 0.5
    norm_std: float = 0.5
    seed: int = 0
    pretrained: Optional[str] = None  # path to ImageNet ResNet-50 weights (full scale)
    disc_width: int = 32
    disc_input: str = "entropy"  # or "self_information" (C-channel maps)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


class SegOutput(NamedTuple):
    logits: torch.Tensor  # B, C, H, W at input resolution
    aux_logits: torch.Tensor  # B, C, H', W'
    features: torch.Tensor  # B, CH, H', W' (before context)


def _conv(cin, cout, stride=1):
    return nn.Sequential(nn.Conv2d(cin, cout, 3, stride, 1), nn.GroupNorm(min(8, cout // 4) or 1, cout), nn.ReLU(inplace=True))


class SegModel(nn.Module):
    """Encoder, 1x1 aux classifier, context module, two-layer decoder with bilinear upsampling."""

    def __init__(self, encoder: nn.Module, channels: int, num_classes: int, variant: str = "group",
                 region_norm: str = "softmax+spatial", attn_dim: Optional[int] = None,
                 detach_bank: bool = False, norm_mean: float = 0.5, norm_std: float = 0.5):
        super().__init__()
        self.num_classes = num_classes
        self.channels = channels
        self.detach_bank = detach_bank
        self.norm_mean = norm_mean
        self.norm_std = norm_std
        self.encoder = encoder
        self.aux_head = nn.Conv2d(channels, num_classes, 1)
        self.context = ContextModule(channels, variant, attn_dim, region_norm)
        self.decoder = nn.Sequential(_conv(channels, channels), nn.Conv2d(channels, num_classes, 1))

    @property
    def variant(self) -> str:
        return self.context.variant

    def encode(self, images: torch.Tensor):
        x = self.encoder((images - self.norm_mean) / self.norm_std)
        return x, self.aux_head(x)

    def region_bank(self, features: torch.Tensor, aux_logits: torch.Tensor) -> torch.Tensor:
        bank = self.context.regions(features, aux_logits)
        return bank.detach() if self.detach_bank else bank

    def decode(self, features: torch.Tensor, bank: Optional[torch.Tensor], size) -> torch.Tensor:
        x = self.context(features, bank)
        logits = self.decoder(x)
        return F.interpolate(logits, size=size, mode="bilinear", align_corners=False)

    def forward(self, images: torch.Tensor, bank: Optional[torch.Tensor] = None,
                bank_scope: str = "batch") -> SegOutput:
        """Segment a batch. Without an explicit ``bank`` the batch's own regions form it
        (``bank_scope="image"``: each image only sees its own regions)."""
        x, aux = self.encode(images)
        size = images.shape[-2:]
        if bank is None and self.context.needs_bank:
            bank = self.region_bank(x, aux)
            if bank_scope == "image":
                logits = torch.cat([self.decode(x[b:b + 1], bank[b:b + 1], size) for b in range(x.shape[0])])
                return SegOutput(logits, aux, x)
            if bank_scope != "batch":
                raise ValueError(f"unknown bank scope {bank_scope!r}")
        return SegOutput(self.decode(x, bank, size), aux, x)


def forward_segment(model: SegModel, images: torch.Tensor, bank: Optional[torch.Tensor] = None) -> SegOutput:
    """Segment with an explicitly supplied region bank (required for global/group variants)."""
    if model.context.needs_bank and bank is None:
        raise ValueError(f"variant {model.variant!r} requires a region bank")
    single = images.ndim == 3
    if single:
        images = images[None]
    x, aux = model.encode(images)
    out = SegOutput(model.decode(x, bank, images.shape[-2:]), aux, x)
    if single:
        out = SegOutput(*(t[0] for t in out))
    return out


class DeskEncoder(nn.Sequential):
    """Four 3x3 conv layers, total stride 4."""

    def __init__(self, channels: int = 64):
        super().__init__(_conv(3, 16), _conv(16, 32, 2), _conv(32, 32), _conv(32, channels, 2))


class PSPModule(nn.Module):
    def __init__(self, cin: int, cout: int = 512, bins=(1, 2, 3, 6)):
        super().__init__()
        red = cin // len(bins)
        self.stages = nn.ModuleList(
            nn.Sequential(nn.AdaptiveAvgPool2d(b), nn.Conv2d(cin, red, 1, bias=False), nn.BatchNorm2d(red),
                          nn.ReLU(inplace=True)) for b in bins)
        self.bottleneck = nn.Sequential(nn.Conv2d(cin + red * len(bins), cout, 3, padding=1, bias=False),
                                        nn.BatchNorm2d(cout), nn.ReLU(inplace=True))

    def forward(self, x):
        h, w = x.shape[-2:]
        pooled = [F.interpolate(s(x), size=(h, w), mode="bilinear", align_corners=False) for s in self.stages]
        return self.bottleneck(torch.cat([x] + pooled, dim=1))


class ResNetPSPEncoder(nn.Module):
    """Dilated ResNet-50 (output stride 8) followed by a PSP module."""

    def __init__(self, channels: int = 512, pretrained: Optional[str] = None):
        super().__init__()
        from torchvision.models import resnet50

        net = resnet50(weights=None, replace_stride_with_dilation=[False, True, True])
        if pretrained is not None:
            state = torch.load(pretrained, map_location="cpu")
            net.load_state_dict({k: v for k, v in state.items() if not k.startswith("fc.")}, strict=False)
        self.backbone_name = "resnet50"
        self.stem = nn.Sequential(net.conv1, net.bn1, net.relu, net.maxpool)
        self.layers = nn.Sequential(net.layer1, net.layer2, net.layer3, net.layer4)
        self.psp = PSPModule(2048, channels)

    def forward(self, x):
        return self.psp(self.layers(self.stem(x)))


def _seeded(seed: int, fn):
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return fn()


def build_desk_model(config: ModelConfig) -> SegModel:
    return _seeded(config.seed, lambda: SegModel(
        DeskEncoder(config.channels), config.channels, config.num_classes, config.variant,
        config.region_norm, config.attn_dim, config.detach_bank, config.norm_mean, config.norm_std))


def build_full_model(config: ModelConfig) -> SegModel:
    """ResNet-50 + PSP at full scale. ImageNet statistics replace the desk normalisation."""
    channels = config.channels if config.channels >= 128 else 512
    model = _seeded(config.seed, lambda: SegModel(
        ResNetPSPEncoder(channels, config.pretrained), channels, config.num_classes, config.variant,
        config.region_norm, config.attn_dim, config.detach_bank, 0.0, 1.0))
    mean = torch.tensor([0.485, 0.456, 0.406]).view(1, 3, 1, 1)
    std = torch.tensor([0.229, 0.224, 0.225]).view(1, 3, 1, 1)
    model.norm_mean, model.norm_std = mean, std
    return model


def build_model(config: ModelConfig) -> SegModel:
    if config.backbone == "desk":
        return build_desk_model(config)
    if config.backbone == "resnet50_psp":
        return build_full_model(config)
    raise ValueError(f"unknown backbone {config.backbone!r}; expected one of {BACKBONES}")


class Discriminator(nn.Module):
    """Entropy map (B, 1, H, W) -> domain logits on a 16x coarser grid."""

    def __init__(self, width: int = 32, in_channels: int = 1):
        super().__init__()
        w = width
        self.net = nn.Sequential(
            nn.Conv2d(in_channels, w, 4, 2, 1), nn.LeakyReLU(0.2, inplace=True),
            nn.Conv2d(w, 2 * w, 4, 2, 1), nn.LeakyReLU(0.2, inplace=True),
            nn.Conv2d(2 * w, 4 * w, 4, 2, 1), nn.LeakyReLU(0.2, inplace=True),
            nn.Conv2d(4 * w, 1, 4, 2, 1),
        )

    def forward(self, entropy: torch.Tensor) -> torch.Tensor:
        if entropy.ndim == 3:
            entropy = entropy[:, None]
        return self.net(entropy)


def build_discriminator(config: ModelConfig) -> Discriminator:
    if config.disc_input not in ("entropy", "self_information"):
        raise ValueError(f"unknown discriminator input {config.disc_input!r}")
    in_channels = 1 if config.disc_input == "entropy" else config.num_classes
    return _seeded(config.seed + 1, lambda: Discriminator(config.disc_width, in_channels))


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


def save_checkpoint(path, model: SegModel, disc: Optional[nn.Module], model_config: ModelConfig,
                    step: int, train_config: Optional[dict] = None, tag: str = "") -> None:
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "tag": tag,
        "step": int(step),
        "model_config": model_config.to_dict(),
        "train_config": train_config or {},
        "model": model.state_dict(),
        "discriminator": disc.state_dict() if disc is not None else None,
    }
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    torch.save(payload, path)


def load_checkpoint(path):
    """Returns (model, discriminator, payload)."""
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path} is not a {CHECKPOINT_FORMAT} file")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {payload.get('version')}")
    config = ModelConfig.from_dict(payload["model_config"])
    model = build_model(config)
    model.load_state_dict(payload["model"])
    disc = None
    if payload.get("discriminator") is not None:
        disc = build_discriminator(config)
        disc.load_state_dict(payload["discriminator"])
    return model, disc, payload
