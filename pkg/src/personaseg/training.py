"""Adversarial adaptation (step 1), entropy-ranked pseudo labels, refinement (step 2)."""
from __future__ import annotations

import copy
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .data import IGNORE, LabeledSample, save_mask, _read_mask
from .grouping import GroupAssignment, GroupBatchStream, cluster_samples
from .losses import (adversarial_loss, discriminator_loss, entropy_from_logits, self_information_map,
                     seg_loss)
from .metrics import evaluate
from .networks import ModelConfig, SegModel, save_checkpoint

log = logging.getLogger(__name__)


SOURCE_BANKS = ("batch", "image", "grouped")


@dataclass
class TrainConfig:
    lr: float = 2.5e-4
    momentum: float = 0.9
    weight_decay: float = 1e-4
    batch_size: int = 8
    crop: int = 320
    resize: Optional[int] = None
    groups: int = 80
    lambda_adv: float = 0.001
    lambda_pse: float = 1.0
    lambda_aux: float = 0.4
    select_rate: float = 0.5
    pixel_quantile: float = 0.8
    steps: int = 2000
    steps_step2: int = 2000
    lr_power: float = 0.9
    disc_lr: float = 1e-4
    disc_optimizer: str = "sgd"
    seed: int = 0
    val_every: int = 500
    snapshot_every: int = 50
    source_bank: str = "batch"  # "batch" | "image" | "grouped"
    source_groups: int = 0  # clusters for source_bank="grouped"; 0 -> len(source) // batch_size
    context_lr_mult: float = 1.0  # lr multiplier for the (freshly initialised) context module

    def __post_init__(self):
        if not 0 < self.select_rate <= 1:
            raise ValueError(f"select_rate must be in (0, 1], got {self.select_rate}")
        if not 0 <= self.pixel_quantile <= 1:
            raise ValueError(f"pixel_quantile must be in [0, 1], got {self.pixel_quantile}")
        if self.lr <= 0 or self.disc_lr <= 0:
            raise ValueError("learning rates must be positive")
        if self.steps < 1 or self.steps_step2 < 0 or self.batch_size < 1:
            raise ValueError("steps and batch_size must be positive")
        if self.source_bank not in SOURCE_BANKS:
            raise ValueError(f"source_bank must be one of {SOURCE_BANKS}, got {self.source_bank!r}")
        if self.disc_optimizer not in ("sgd", "adam"):
            raise ValueError(f"unknown discriminator optimizer {self.disc_optimizer!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


def desk_train_config(**overrides) -> TrainConfig:
    """Defaults for 64x64 synthetic data trained from scratch on a CPU."""
    base = dict(lr=0.02, disc_lr=1e-3, disc_optimizer="adam", crop=64, groups=4, lambda_adv=0.01,
                steps=400, steps_step2=200, val_every=0, weight_decay=1e-4)
    base.update(overrides)
    return TrainConfig(**base)


class MetricsLog:
    """Line-delimited (step, name, value) records; optionally mirrored to a file."""

    def __init__(self, path=None):
        self.records: List[dict] = []
        self.path = Path(path) if path is not None else None
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)

    def add(self, step: int, name: str, value: float):
        rec = {"step": int(step), "name": name, "value": float(value)}
        self.records.append(rec)
        if self.path is not None:
            with open(self.path, "a") as fh:
                fh.write(json.dumps(rec) + "\n")

    def values(self, name: str) -> List[float]:
        return [r["value"] for r in self.records if r["name"] == name]


class NonFiniteLoss(RuntimeError):
    def __init__(self, step: int, checkpoint: Optional[Path]):
        super().__init__(f"non-finite loss at step {step}; last good state"
                         + (f" saved to {checkpoint}" if checkpoint else " restored in memory"))
        self.step = step
        self.checkpoint = checkpoint


@dataclass
class TrainResult:
    model: SegModel
    disc: torch.nn.Module
    step: int
    log: MetricsLog
    checkpoint: Optional[Path] = None


@dataclass
class PseudoLabelSet:
    masks: Dict[str, torch.Tensor]  # selected id -> HxW mask (255 = masked)
    scores: Dict[str, float]  # every ranked id -> mean entropy
    select_rate: float = 0.5
    pixel_quantile: float = 0.8

    def save(self, directory) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        for sid, mask in self.masks.items():
            save_mask(directory / f"{sid}.png", mask)
        meta = {"select_rate": self.select_rate, "pixel_quantile": self.pixel_quantile,
                "selected": sorted(self.masks), "scores": self.scores}
        (directory / "index.json").write_text(json.dumps(meta, indent=1, sort_keys=True) + "\n")

    @classmethod
    def load(cls, directory) -> "PseudoLabelSet":
        directory = Path(directory)
        index = directory / "index.json"
        if not index.exists():
            raise FileNotFoundError(f"no pseudo labels at {directory} (missing index.json)")
        meta = json.loads(index.read_text())
        masks = {sid: _read_mask(directory / f"{sid}.png") for sid in meta["selected"]}
        return cls(masks, meta["scores"], meta["select_rate"], meta["pixel_quantile"])


# --------------------------------------------------------------------------
# batching helpers

class _Images:
    """Samples stacked once into a tensor, addressed by id."""

    def __init__(self, samples: Sequence, resize: Optional[int] = None):
        self.ids = [s.id for s in samples]
        self.index = {sid: i for i, sid in enumerate(self.ids)}
        images = torch.stack([s.image for s in samples]) if samples else torch.empty(0, 3, 1, 1)
        masks = None
        if samples and isinstance(samples[0], LabeledSample):
            masks = torch.stack([s.mask for s in samples])
        if resize is not None and samples and tuple(images.shape[-2:]) != (resize, resize):
            images = F.interpolate(images, size=(resize, resize), mode="bilinear", align_corners=False)
            if masks is not None:
                masks = F.interpolate(masks[:, None].float(), size=(resize, resize), mode="nearest")[:, 0].long()
        self.images = images
        self.masks = masks

    def __len__(self):
        return len(self.ids)

    def rows(self, ids):
        return torch.tensor([self.index[i] for i in ids], dtype=torch.long)


def _crop(rng: np.random.Generator, size: int, images: torch.Tensor, *masks):
    h, w = images.shape[-2:]
    if size >= h and size >= w:
        return (images, *masks)
    ch, cw = min(size, h), min(size, w)
    out_i, out_m = [], [[] for _ in masks]
    for b in range(images.shape[0]):
        y = int(rng.integers(0, h - ch + 1))
        x = int(rng.integers(0, w - cw + 1))
        out_i.append(images[b, :, y:y + ch, x:x + cw])
        for k, m in enumerate(masks):
            out_m[k].append(m[b, y:y + ch, x:x + cw])
    return (torch.stack(out_i), *[torch.stack(m) for m in out_m])


class _SourceSampler:
    def __init__(self, n: int, batch_size: int, seed: int):
        self.n = n
        self.batch_size = min(batch_size, n)
        self.rng = np.random.default_rng([seed, 7])
        self.queue: List[int] = []

    def next(self) -> torch.Tensor:
        while len(self.queue) < self.batch_size:
            self.queue.extend(self.rng.permutation(self.n).tolist())
        rows, self.queue = self.queue[:self.batch_size], self.queue[self.batch_size:]
        return torch.tensor(rows, dtype=torch.long)


class _GroupedSourceSampler:
    """Source batches drawn from K-means groups of the source images, like the personal stream."""

    def __init__(self, images: _Images, samples: Sequence, batch_size: int, seed: int, k: int = 0):
        k = k or max(1, len(images) // batch_size)
        self.images = images
        self.stream = GroupBatchStream(cluster_samples(samples, min(k, len(images)), seed=seed),
                                       batch_size, seed + 1, ids=images.ids)

    def next(self) -> torch.Tensor:
        return self.images.rows(next(self.stream))


def poly_lr(base: float, step: int, total: int, power: float) -> float:
    return base * (1 - step / max(total, 1)) ** power


def _set_lr(opt, lr):
    for g in opt.param_groups:
        g["lr"] = lr * g.get("lr_mult", 1.0)


def eval_batches(ids: Sequence[str], groups: Optional[GroupAssignment], batch_size: int) -> List[List[str]]:
    """Deterministic evaluation batches: groups in index order, ids sorted, chunked."""
    ids = sorted(ids)
    if groups is None:
        return [ids[i:i + batch_size] for i in range(0, len(ids), batch_size)]
    by_group: Dict[int, List[str]] = {}
    for sid in ids:
        by_group.setdefault(groups.mapping[sid], []).append(sid)
    out = []
    for g in sorted(by_group):
        members = by_group[g]
        out.extend(members[i:i + batch_size] for i in range(0, len(members), batch_size))
    return out


@torch.no_grad()
def predict(model: SegModel, samples: Sequence, groups: Optional[GroupAssignment] = None,
            batch_size: int = 8, resize: Optional[int] = None) -> Dict[str, tuple]:
    """id -> (argmax mask, entropy map, mean entropy), each batch sharing one group's region bank."""
    was_training = model.training
    model.eval()
    data = _Images(samples, resize)
    out = {}
    for batch in eval_batches(data.ids, groups if model.context.needs_bank else None, batch_size):
        logits = model(data.images[data.rows(batch)]).logits
        ent = entropy_from_logits(logits)
        pred = logits.argmax(1)
        for k, sid in enumerate(batch):
            out[sid] = (pred[k], ent[k], float(ent[k].double().mean()))
    model.train(was_training)
    return out


def evaluate_model(model: SegModel, samples: Sequence, gts: Dict[str, torch.Tensor],
                   groups: Optional[GroupAssignment], num_classes: int, batch_size: int = 8,
                   user: str = "user0", tag: str = "", fiou_mode: str = "binary"):
    results = predict(model, [s for s in samples if s.id in gts], groups, batch_size)
    preds = {k: v[0] for k, v in results.items()}
    ents = {k: v[2] for k, v in results.items()}
    return evaluate(preds, {k: gts[k] for k in results}, num_classes, user, ents, fiou_mode, tag)


# --------------------------------------------------------------------------
# pseudo labels

def _keep_count(q: float, n: int) -> int:
    return min(n, math.floor(round(q * n, 9)))


def mask_uncertain_pixels(pred: torch.Tensor, entropy: torch.Tensor, q: float) -> torch.Tensor:
    """Keep the floor(q * HW) lowest-entropy pixels (ties by pixel index); the rest become 255."""
    flat = entropy.reshape(-1).double().numpy()
    order = np.argsort(flat, kind="stable")
    keep = np.zeros(flat.size, dtype=bool)
    keep[order[:_keep_count(q, flat.size)]] = True
    out = pred.reshape(-1).clone().long()
    out[torch.from_numpy(~keep)] = IGNORE
    return out.reshape(pred.shape)


def rank_and_select(scores: Dict[str, float], select_rate: float) -> List[str]:
    """The floor(r * n) ids with the lowest mean entropy; ties broken by id."""
    ranked = sorted(scores, key=lambda sid: (scores[sid], sid))
    return ranked[:_keep_count(select_rate, len(ranked))]


def select_pseudo_labels(model: SegModel, personal: Sequence, groups: Optional[GroupAssignment] = None,
                         select_rate: float = 0.5, pixel_quantile: float = 0.8,
                         batch_size: int = 8) -> PseudoLabelSet:
    if not personal:
        raise ValueError("cannot select pseudo labels from an empty personal set")
    if not 0 < select_rate <= 1:
        raise ValueError("select_rate must be in (0, 1]")
    results = predict(model, personal, groups, batch_size)
    scores = {sid: v[2] for sid, v in results.items()}
    chosen = rank_and_select(scores, select_rate)
    masks = {sid: mask_uncertain_pixels(results[sid][0], results[sid][1], pixel_quantile) for sid in chosen}
    return PseudoLabelSet(masks, scores, select_rate, pixel_quantile)


# --------------------------------------------------------------------------
# trainers

def _optimizers(model, disc, cfg: TrainConfig):
    ctx = list(model.context.parameters())
    ctx_ids = {id(p) for p in ctx}
    rest = [p for p in model.parameters() if id(p) not in ctx_ids]
    groups = [{"params": rest, "lr_mult": 1.0}]
    if ctx:
        groups.append({"params": ctx, "lr_mult": cfg.context_lr_mult})
    opt_s = torch.optim.SGD(groups, lr=cfg.lr, momentum=cfg.momentum, weight_decay=cfg.weight_decay)
    if cfg.disc_optimizer == "adam":
        opt_d = torch.optim.Adam(disc.parameters(), lr=cfg.disc_lr, betas=(0.9, 0.99))
    else:
        opt_d = torch.optim.SGD(disc.parameters(), lr=cfg.disc_lr, momentum=cfg.momentum,
                                weight_decay=cfg.weight_decay)
    return opt_s, opt_d


def _disc_input(logits: torch.Tensor, kind: str) -> torch.Tensor:
    if kind == "self_information":
        return self_information_map(logits)
    return entropy_from_logits(logits)[:, None]


def _adapt(model: SegModel, disc, source: Sequence, personal: Sequence, groups: GroupAssignment,
           cfg: TrainConfig, steps: int, stage: str, pseudo: Optional[PseudoLabelSet] = None,
           metrics: Optional[MetricsLog] = None, run_dir=None, model_config: Optional[ModelConfig] = None,
           val=None, start_step: int = 0) -> TrainResult:
    metrics = metrics if metrics is not None else MetricsLog()
    model_config = model_config or ModelConfig()
    disc_kind = model_config.disc_input
    src = _Images(source, cfg.resize)
    per = _Images(personal, cfg.resize)
    if len(src) == 0 or len(per) == 0:
        raise ValueError("source and personal sets must be non-empty")
    missing = [i for i in per.ids if i not in groups.mapping]
    if missing:
        raise ValueError(f"group assignment does not cover {missing[:3]}")
    pseudo_masks = None
    if pseudo is not None:
        pseudo_masks = torch.full((len(per),) + tuple(per.images.shape[-2:]), IGNORE, dtype=torch.long)
        for sid, m in pseudo.masks.items():
            if sid in per.index:
                pseudo_masks[per.index[sid]] = m
    use_pseudo = pseudo_masks is not None and cfg.lambda_pse != 0

    opt_s, opt_d = _optimizers(model, disc, cfg)
    if cfg.source_bank == "grouped":
        sampler = _GroupedSourceSampler(src, source, cfg.batch_size, cfg.seed, cfg.source_groups)
    else:
        sampler = _SourceSampler(len(src), cfg.batch_size, cfg.seed)
    stream = GroupBatchStream(groups, cfg.batch_size, cfg.seed, ids=per.ids)
    crop_rng = np.random.default_rng([cfg.seed, 13])
    model.train()
    disc.train()
    snapshot = (copy.deepcopy(model.state_dict()), copy.deepcopy(disc.state_dict()))
    run_dir = Path(run_dir) if run_dir is not None else None

    for it in range(steps):
        step = start_step + it
        lr = poly_lr(cfg.lr, it, steps, cfg.lr_power)
        _set_lr(opt_s, lr)
        _set_lr(opt_d, poly_lr(cfg.disc_lr, it, steps, cfg.lr_power))

        rows_s = sampler.next()
        img_s, mask_s = _crop(crop_rng, cfg.crop, src.images[rows_s], src.masks[rows_s])
        rows_p = per.rows(next(stream))
        if use_pseudo:
            img_p, pmask = _crop(crop_rng, cfg.crop, per.images[rows_p], pseudo_masks[rows_p])
        else:
            img_p, = _crop(crop_rng, cfg.crop, per.images[rows_p])

        opt_s.zero_grad(set_to_none=True)
        out_s = model(img_s, bank_scope="image" if cfg.source_bank == "image" else "batch")
        loss_seg = seg_loss(out_s.logits, mask_s)
        aux = F.interpolate(out_s.aux_logits, size=img_s.shape[-2:], mode="bilinear", align_corners=False)
        loss_aux = seg_loss(aux, mask_s)
        total = loss_seg + cfg.lambda_aux * loss_aux

        need_grad_p = cfg.lambda_adv != 0 or use_pseudo
        with torch.set_grad_enabled(need_grad_p):
            out_p = model(img_p)
        d_in_p = _disc_input(out_p.logits, disc_kind)
        loss_adv = loss_pse = None
        if cfg.lambda_adv != 0:
            for p in disc.parameters():
                p.requires_grad_(False)
            loss_adv = adversarial_loss(disc, d_in_p)
            total = total + cfg.lambda_adv * loss_adv
            for p in disc.parameters():
                p.requires_grad_(True)
        if use_pseudo:
            loss_pse = seg_loss(out_p.logits, pmask)
            total = total + cfg.lambda_pse * loss_pse

        if not torch.isfinite(total):
            model.load_state_dict(snapshot[0])
            disc.load_state_dict(snapshot[1])
            ckpt = None
            if run_dir is not None:
                ckpt = run_dir / f"ckpt_{stage}_lastgood.pt"
                save_checkpoint(ckpt, model, disc, model_config, step, cfg.to_dict(), tag=stage)
            raise NonFiniteLoss(step, ckpt)
        total.backward()
        opt_s.step()

        opt_d.zero_grad(set_to_none=True)
        d_in_s = _disc_input(out_s.logits.detach(), disc_kind)
        loss_d = discriminator_loss(disc, d_in_s, d_in_p.detach())
        loss_d.backward()
        opt_d.step()

        metrics.add(step, f"{stage}/seg", loss_seg.item())
        metrics.add(step, f"{stage}/aux", loss_aux.item())
        if loss_adv is not None:
            metrics.add(step, f"{stage}/adv", loss_adv.item())
        if loss_pse is not None:
            metrics.add(step, f"{stage}/pse", loss_pse.item())
        metrics.add(step, f"{stage}/disc", loss_d.item())
        metrics.add(step, f"{stage}/lr", lr)

        if cfg.snapshot_every and (it + 1) % cfg.snapshot_every == 0:
            snapshot = (copy.deepcopy(model.state_dict()), copy.deepcopy(disc.state_dict()))
        if val is not None and cfg.val_every and (it + 1) % cfg.val_every == 0:
            samples, gts = val
            rep = evaluate_model(model, samples, gts, groups, model_config.num_classes, cfg.batch_size)
            metrics.add(step, "val/fiou", rep.fiou if rep.fiou is not None else float("nan"))
            metrics.add(step, "val/miou", rep.miou if rep.miou is not None else float("nan"))
            model.train()

    ckpt = None
    if run_dir is not None:
        ckpt = run_dir / f"ckpt_{stage}.pt"
        save_checkpoint(ckpt, model, disc, model_config, start_step + steps, cfg.to_dict(), tag=stage)
    return TrainResult(model, disc, start_step + steps, metrics, ckpt)


def train_step1(model: SegModel, disc, source: Sequence, personal: Sequence, groups: GroupAssignment,
                config: TrainConfig, **kw) -> TrainResult:
    """Adversarial entropy-map adaptation with the model's context variant.

    Every iteration draws a source batch and a single-group personal batch;
    each batch forms its own region bank (see ``TrainConfig.source_bank``).
    """
    kw.setdefault("stage", "step1")
    return _adapt(model, disc, source, personal, groups, config, config.steps, **kw)


def train_step2(model: SegModel, disc, source: Sequence, pseudo: PseudoLabelSet, personal: Sequence,
                groups: GroupAssignment, config: TrainConfig, **kw) -> TrainResult:
    """Step 1 plus the pseudo-label loss on personal batches; source supervision stays on."""
    if not pseudo.masks:
        log.warning("empty pseudo-label set; step 2 degenerates to continued step 1")
    kw.setdefault("stage", "step2")
    return _adapt(model, disc, source, personal, groups, config, config.steps_step2, pseudo=pseudo, **kw)
