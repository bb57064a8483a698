"""Training objectives: pixel cross-entropy with ignore, entropy maps, adversarial losses.

Domain labels follow the adversarial objective ``-log(1 - D(E_s)) - log D(E_p)``:
the discriminator outputs the probability that an entropy map comes from the
personal domain, so source maps are labelled 0 and personal maps 1.
"""
from __future__ import annotations

import logging
import math

import torch
import torch.nn.functional as F

from .data import IGNORE

log = logging.getLogger(__name__)

SOURCE_LABEL = 0.0
PERSONAL_LABEL = 1.0
PROB_FLOOR = 1e-12


def seg_loss_with_count(logits: torch.Tensor, target: torch.Tensor, ignore_index: int = IGNORE):
    """Mean pixel cross-entropy over non-ignored pixels and the number of such pixels.

    With every pixel ignored the loss is an exact zero that still
    back-propagates (all-zero gradients).
    """
    if logits.ndim == 3:
        logits, target = logits[None], target[None]
    if logits.shape[-2:] != target.shape[-2:] or logits.shape[0] != target.shape[0]:
        raise ValueError(f"logits {tuple(logits.shape)} and target {tuple(target.shape)} do not match")
    target = target.long()
    valid = target != ignore_index
    n = int(valid.sum())
    if n == 0:
        log.debug("seg_loss: every pixel ignored, returning 0")
        return logits.sum() * 0.0, 0
    total = F.cross_entropy(logits, target, ignore_index=ignore_index, reduction="sum")
    return total / n, n


def seg_loss(logits: torch.Tensor, target: torch.Tensor, ignore_index: int = IGNORE) -> torch.Tensor:
    return seg_loss_with_count(logits, target, ignore_index)[0]


def pseudo_loss(logits: torch.Tensor, pseudo_mask: torch.Tensor) -> torch.Tensor:
    return seg_loss(logits, pseudo_mask)


def entropy_map(prob: torch.Tensor, check: bool = True, atol: float = 1e-4) -> torch.Tensor:
    """Per-pixel Shannon entropy (natural log) of a (B, C, H, W) or (C, H, W) probability map."""
    if check:
        if (prob < 0).any():
            raise ValueError("probability map has negative entries")
        dev = (prob.sum(dim=-3) - 1).abs().max()
        if dev > atol:
            raise ValueError(f"probability map is not normalised (max deviation {float(dev):.3g})")
    return -(prob * torch.log(prob.clamp_min(PROB_FLOOR))).sum(dim=-3)


def entropy_from_logits(logits: torch.Tensor) -> torch.Tensor:
    return entropy_map(F.softmax(logits, dim=-3), check=False)


def self_information_map(logits: torch.Tensor) -> torch.Tensor:
    """Per-class weighted self-information -p log p, (B, C, H, W); normalised by log C."""
    p = F.softmax(logits, dim=1)
    return -(p * torch.log(p.clamp_min(PROB_FLOOR))) / math.log(logits.shape[1])


def _check_grid(d_out: torch.Tensor, entropy: torch.Tensor):
    if d_out.shape[0] != entropy.shape[0]:
        raise ValueError(f"discriminator output batch {d_out.shape[0]} != entropy batch {entropy.shape[0]}")


def _bce(d_logits: torch.Tensor, label: float) -> torch.Tensor:
    return F.binary_cross_entropy_with_logits(d_logits, torch.full_like(d_logits, label))


def discriminator_loss(disc, entropy_source: torch.Tensor, entropy_personal: torch.Tensor) -> torch.Tensor:
    """L_D on detached maps, averaged over locations and the two domains."""
    d_s = disc(entropy_source.detach())
    d_p = disc(entropy_personal.detach())
    _check_grid(d_s, entropy_source)
    _check_grid(d_p, entropy_personal)
    return 0.5 * (_bce(d_s, SOURCE_LABEL) + _bce(d_p, PERSONAL_LABEL))


def adversarial_loss(disc, entropy_personal: torch.Tensor) -> torch.Tensor:
    """Generator side: make personal maps look like source maps to D."""
    d_p = disc(entropy_personal)
    _check_grid(d_p, entropy_personal)
    return _bce(d_p, SOURCE_LABEL)


def adv_losses(entropy_source: torch.Tensor, entropy_personal: torch.Tensor, disc):
    """(L_D, L_adv). Gradients of L_adv reach the segmentation side through ``entropy_personal``."""
    return discriminator_loss(disc, entropy_source, entropy_personal), adversarial_loss(disc, entropy_personal)
