"""Group region context.

A batch of images from one group shares a *region bank*: for every image and
every class, the soft-region-weighted pooling of its encoder features. Each
pixel then attends over the whole bank and the attended context is fused back
into the pixel representation::

    f[j, c]   = sum_i r[c, i] X_j[i]             r = softmax over classes of the aux logits
    w[(j,c),p] = softmax_{(j,c)} query(X_p) . key(f[j, c])
    ctx_p     = out(sum_{(j,c)} w[(j,c),p] value(f[j, c]))
    X_hat_p   = fuse([X_p, ctx_p])

Shapes: features (B, CH, H, W), aux logits (B, C, H, W), bank (N, C, CH).
"""
from __future__ import annotations

from typing import Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

VARIANTS = ("none", "global", "group")
REGION_NORMS = ("softmax+spatial", "softmax-only")


def _batched(x: torch.Tensor, ndim: int) -> torch.Tensor:
    return x[None] if x.ndim == ndim - 1 else x


def extract_regions(features: torch.Tensor, aux_logits: torch.Tensor,
                    norm: str = "softmax+spatial") -> torch.Tensor:
    """Soft region representations, (B, C, CH) (or (C, CH) for unbatched input).

    ``softmax-only`` is the literal pooling sum_i r_ci X_i; ``softmax+spatial``
    also divides by sum_i r_ci so a region vector is a weighted mean.
    """
    if norm not in REGION_NORMS:
        raise ValueError(f"unknown region normalisation {norm!r}")
    single = features.ndim == 3
    x = _batched(features, 4)
    p = _batched(aux_logits, 4)
    if x.shape[0] != p.shape[0] or x.shape[-2:] != p.shape[-2:]:
        raise ValueError(f"features {tuple(x.shape)} and aux logits {tuple(p.shape)} differ in batch/spatial size")
    b, ch = x.shape[:2]
    r = F.softmax(p, dim=1).flatten(2)  # B, C, HW
    f = torch.bmm(r, x.flatten(2).transpose(1, 2))  # B, C, CH
    if norm == "softmax+spatial":
        f = f / r.sum(-1, keepdim=True).clamp_min(1e-12)
    return f[0] if single else f


class GroupContextParams(nn.Module):
    """The five affine maps of the module.

    query/key project pixels and regions into the relation space, value/out
    transform the aggregated regions, fuse maps [pixel, context] back to CH.
    ``fuse`` starts as [Identity | 0] so a fresh module is a no-op.
    """

    def __init__(self, channels: int, attn_dim: Optional[int] = None):
        super().__init__()
        attn_dim = attn_dim or max(1, channels // 2)
        self.channels = channels
        self.attn_dim = attn_dim
        self.query = nn.Linear(channels, attn_dim)
        self.key = nn.Linear(channels, attn_dim)
        self.value = nn.Linear(channels, channels)
        self.out = nn.Linear(channels, channels)
        self.fuse = nn.Linear(2 * channels, channels)
        self.reset_fuse()

    @torch.no_grad()
    def reset_fuse(self):
        self.fuse.weight.zero_()
        self.fuse.weight[:, :self.channels].copy_(torch.eye(self.channels))
        self.fuse.bias.zero_()

    def check(self, channels: int):
        if channels != self.channels:
            raise ValueError(f"context params built for {self.channels} channels, got {channels}")


def attention_weights(features: torch.Tensor, bank: torch.Tensor, params: GroupContextParams) -> torch.Tensor:
    """(B, HW, N*C) softmax weights of every pixel over every bank region."""
    x = _batched(features, 4)
    params.check(x.shape[1])
    if bank.numel() == 0:
        raise ValueError("empty region bank")
    regions = bank.reshape(-1, bank.shape[-1])
    params.check(regions.shape[-1])
    q = params.query(x.flatten(2).transpose(1, 2))  # B, HW, Da
    k = params.key(regions)  # M, Da
    return F.softmax(q @ k.t(), dim=-1)


def aggregate_group_context(features: torch.Tensor, bank: torch.Tensor,
                            params: GroupContextParams) -> torch.Tensor:
    """Per-pixel context, same shape as ``features``."""
    single = features.ndim == 3
    x = _batched(features, 4)
    b, ch, h, w = x.shape
    weights = attention_weights(x, bank, params)
    values = params.value(bank.reshape(-1, ch))  # M, CH
    ctx = params.out(weights @ values)  # B, HW, CH
    ctx = ctx.transpose(1, 2).reshape(b, ch, h, w)
    return ctx[0] if single else ctx


def global_context_variant(features: torch.Tensor, bank: torch.Tensor,
                           params: GroupContextParams) -> torch.Tensor:
    """Single group vector (mean of all regions), transformed and broadcast to every pixel."""
    if bank.numel() == 0:
        raise ValueError("empty region bank")
    single = features.ndim == 3
    x = _batched(features, 4)
    params.check(x.shape[1])
    g = bank.reshape(-1, bank.shape[-1]).mean(0)
    ctx = params.out(params.value(g))
    ctx = ctx.view(1, -1, 1, 1).expand_as(x)
    return ctx[0] if single else ctx


def none_variant(features: torch.Tensor) -> torch.Tensor:
    return features


def enhance(features: torch.Tensor, context: torch.Tensor, params: GroupContextParams) -> torch.Tensor:
    if features.shape != context.shape:
        raise ValueError(f"features {tuple(features.shape)} and context {tuple(context.shape)} differ")
    single = features.ndim == 3
    x = _batched(features, 4)
    c = _batched(context, 4)
    params.check(x.shape[1])
    cat = torch.cat([x, c], dim=1).permute(0, 2, 3, 1)
    out = params.fuse(cat).permute(0, 3, 1, 2)
    return out[0] if single else out


class ContextModule(nn.Module):
    """Variant switch between encoder and decoder."""

    def __init__(self, channels: int, variant: str = "group", attn_dim: Optional[int] = None,
                 region_norm: str = "softmax+spatial"):
        super().__init__()
        if variant not in VARIANTS:
            raise ValueError(f"unknown context variant {variant!r}; expected one of {VARIANTS}")
        if region_norm not in REGION_NORMS:
            raise ValueError(f"unknown region normalisation {region_norm!r}")
        self.variant = variant
        self.region_norm = region_norm
        self.params = GroupContextParams(channels, attn_dim)

    @property
    def needs_bank(self) -> bool:
        return self.variant != "none"

    def regions(self, features, aux_logits):
        return extract_regions(features, aux_logits, self.region_norm)

    def forward(self, features: torch.Tensor, bank: Optional[torch.Tensor] = None) -> torch.Tensor:
        if self.variant == "none":
            return none_variant(features)
        if bank is None:
            raise ValueError(f"context variant {self.variant!r} needs a region bank")
        if self.variant == "global":
            ctx = global_context_variant(features, bank, self.params)
        else:
            ctx = aggregate_group_context(features, bank, self.params)
        return enhance(features, ctx, self.params)
