"""Datasets: in-memory samples, on-disk layout, merging/sampling and the
synthetic two-domain grouped generator used for desk-scale experiments.

On-disk layout of a dataset root::

    <root>/dataset.json        {"role", "class_count", "user", optional "split"}
    <root>/images/<id>.png     RGB, 8 bit
    <root>/masks/<id>.png      single channel, value = class index, 255 = ignore

Personal datasets may carry masks (the annotated evaluation subset, or the
hidden ground truth of the synthetic generator). They are never handed to the
trainer; use :func:`load_ground_truth` to read them for evaluation.
"""
from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np
import torch
from PIL import Image

IGNORE = 255
MANIFEST = "dataset.json"


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class LabeledSample:
    image: torch.Tensor  # 3xHxW float32 in [0, 1]
    mask: torch.Tensor  # HxW int64, {0..C-1} u {255}
    id: str

    def __post_init__(self):
        if self.image.ndim != 3 or self.image.shape[0] != 3:
            raise DatasetError(f"{self.id}: image must be 3xHxW, got {tuple(self.image.shape)}")
        if tuple(self.mask.shape) != tuple(self.image.shape[1:]):
            raise DatasetError(
                f"{self.id}: mask {tuple(self.mask.shape)} does not match image {tuple(self.image.shape[1:])}"
            )


@dataclass(frozen=True)
class UnlabeledSample:
    image: torch.Tensor
    id: str
    user: str = "user0"

    def __post_init__(self):
        if self.image.ndim != 3 or self.image.shape[0] != 3:
            raise DatasetError(f"{self.id}: image must be 3xHxW, got {tuple(self.image.shape)}")
        if not torch.isfinite(self.image).all():
            raise DatasetError(f"{self.id}: non-finite image values")


Sample = Union[LabeledSample, UnlabeledSample]


@dataclass
class DatasetSpec:
    root: Union[str, Path]
    role: str = "source"
    class_count: int = 2
    user: Optional[str] = None
    split: Optional[dict] = None

    def __post_init__(self):
        if self.role not in ("source", "personal"):
            raise DatasetError(f"unknown role {self.role!r}")
        if self.class_count < 2:
            raise DatasetError("class_count must be >= 2 (background + at least one object class)")

    @classmethod
    def from_root(cls, root) -> "DatasetSpec":
        path = Path(root) / MANIFEST
        if not path.exists():
            raise FileNotFoundError(f"no {MANIFEST} under {root}")
        meta = json.loads(path.read_text())
        return cls(root=root, role=meta["role"], class_count=int(meta["class_count"]),
                   user=meta.get("user"), split=meta.get("split"))


def check_mask(mask: torch.Tensor, class_count: int, sample_id: str) -> None:
    bad = (mask != IGNORE) & ((mask < 0) | (mask >= class_count))
    if bad.any():
        value = int(mask[bad][0])
        raise DatasetError(f"{sample_id}: mask value {value} outside 0..{class_count - 1} and {IGNORE}")


def _read_image(path: Path) -> torch.Tensor:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.uint8)
    return torch.from_numpy(arr.transpose(2, 0, 1).astype(np.float32) / 255.0)


def _read_mask(path: Path) -> torch.Tensor:
    with Image.open(path) as im:
        if im.mode not in ("L", "P"):
            raise DatasetError(f"{path.stem}: mask must be single channel, got mode {im.mode}")
        arr = np.asarray(im, dtype=np.uint8)
    return torch.from_numpy(arr.astype(np.int64))


def image_to_uint8(image: torch.Tensor) -> np.ndarray:
    arr = image.detach().cpu().numpy().transpose(1, 2, 0)
    return np.clip(np.rint(arr * 255.0), 0, 255).astype(np.uint8)


def save_image(path, image: torch.Tensor) -> None:
    Image.fromarray(image_to_uint8(image), mode="RGB").save(path)


def save_mask(path, mask: torch.Tensor) -> None:
    arr = mask.detach().cpu().numpy()
    if arr.min() < 0 or arr.max() > 255:
        raise DatasetError(f"mask values must fit in 8 bits: {path}")
    Image.fromarray(arr.astype(np.uint8), mode="L").save(path)


def _ids_in(directory: Path) -> list:
    return sorted(p.stem for p in directory.glob("*.png"))


def load_dataset(spec: DatasetSpec) -> list:
    """Load every sample under ``spec.root``, sorted by id.

    Source roots yield :class:`LabeledSample` (a mask per image is required);
    personal roots yield :class:`UnlabeledSample` whether or not masks exist.
    """
    root = Path(spec.root)
    if not root.is_dir():
        raise FileNotFoundError(f"dataset root {root} does not exist")
    image_dir = root / "images"
    if not image_dir.is_dir():
        raise FileNotFoundError(f"{root} has no images/ directory")
    ids = _ids_in(image_dir)
    samples = []
    if spec.role == "personal":
        user = spec.user or "user0"
        for sid in ids:
            samples.append(UnlabeledSample(_read_image(image_dir / f"{sid}.png"), sid, user))
        return samples
    mask_dir = root / "masks"
    for sid in ids:
        mask_path = mask_dir / f"{sid}.png"
        if not mask_path.exists():
            raise DatasetError(f"{sid}: missing mask {mask_path}")
        image = _read_image(image_dir / f"{sid}.png")
        mask = _read_mask(mask_path)
        if tuple(mask.shape) != tuple(image.shape[1:]):
            raise DatasetError(f"{sid}: image {tuple(image.shape[1:])} and mask {tuple(mask.shape)} sizes differ")
        check_mask(mask, spec.class_count, sid)
        samples.append(LabeledSample(image, mask, sid))
    return samples


def load_ground_truth(spec: DatasetSpec, ids: Optional[Sequence[str]] = None) -> dict:
    """Masks of a personal dataset (evaluation only), keyed by id."""
    mask_dir = Path(spec.root) / "masks"
    if not mask_dir.is_dir():
        raise FileNotFoundError(f"{spec.root} has no masks/ directory")
    if ids is None:
        ids = _ids_in(mask_dir)
    out = {}
    for sid in ids:
        path = mask_dir / f"{sid}.png"
        if not path.exists():
            raise DatasetError(f"{sid}: missing ground-truth mask")
        mask = _read_mask(path)
        check_mask(mask, spec.class_count, sid)
        out[sid] = mask
    return out


def write_dataset(root, samples: Sequence[Sample], role: str, class_count: int,
                  user: Optional[str] = None, masks: Optional[dict] = None,
                  split: Optional[dict] = None) -> DatasetSpec:
    """Write samples in the on-disk layout. ``masks`` adds masks for unlabeled samples."""
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    for s in samples:
        save_image(root / "images" / f"{s.id}.png", s.image)
        mask = s.mask if isinstance(s, LabeledSample) else (masks or {}).get(s.id)
        if mask is not None:
            (root / "masks").mkdir(exist_ok=True)
            save_mask(root / "masks" / f"{s.id}.png", mask)
    meta = {"role": role, "class_count": class_count, "user": user}
    if split is not None:
        meta["split"] = split
    (root / MANIFEST).write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return DatasetSpec(root=root, role=role, class_count=class_count, user=user, split=split)


def merge_datasets(users: Sequence[Sequence[UnlabeledSample]]) -> list:
    """Concatenate several users' collections; ids become ``<user>_<id>`` (unless already prefixed)."""
    if not users:
        raise DatasetError("merge_datasets needs at least one dataset")
    merged = []
    for samples in users:
        for s in samples:
            sid = s.id if s.id.startswith(f"{s.user}_") else f"{s.user}_{s.id}"
            merged.append(UnlabeledSample(s.image, sid, s.user))
    return merged


def sample_dataset(dataset: Sequence[UnlabeledSample], fraction: float, seed: int) -> list:
    """Uniformly pick floor(fraction * n) samples without replacement, kept in input order."""
    if not 0 < fraction <= 1:
        raise DatasetError(f"fraction must be in (0, 1], got {fraction}")
    if not dataset:
        raise DatasetError("cannot sample from an empty dataset")
    n = len(dataset)
    # guard against 1/15 * 10080 = 671.999...
    k = math.floor(round(fraction * n, 9))
    rng = np.random.default_rng(seed)
    picked = np.sort(rng.choice(n, size=k, replace=False))
    return [dataset[i] for i in picked]


# --------------------------------------------------------------------------
# synthetic grouped two-domain data

@dataclass
class SynthSpec:
    """Parameters of the synthetic generator. Identical specs give identical data."""
    seed: int = 0
    n_source: int = 400
    n_personal: int = 600
    image_size: int = 64
    n_groups: int = 4
    n_classes: int = 4  # including background
    n_users: int = 1
    val_fraction: float = 0.3
    source_family_size: int = 1  # consecutive source images sharing one family
    # appearance palette
    color_low: float = 0.2
    color_high: float = 0.8
    object_jitter: float = 0.04
    background_jitter: float = 0.04
    texture_amplitude: float = 0.12
    object_scale: tuple = (0.22, 0.36)
    # personal-domain shift
    brightness: float = 0.0
    contrast: float = 1.0
    noise: float = 0.0
    color_cast: tuple = (0.0, 0.0, 0.0)
    ignore_border: int = 0

    def to_dict(self) -> dict:
        d = dict(self.__dict__)
        d["object_scale"] = list(self.object_scale)
        d["color_cast"] = list(self.color_cast)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SynthSpec":
        d = dict(d)
        for key in ("object_scale", "color_cast"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


@dataclass
class SynthData:
    source: list  # LabeledSample
    personal: list  # UnlabeledSample
    ground_truth: dict  # id -> mask, hidden from training
    true_groups: dict  # id -> group index
    split: dict = field(default_factory=dict)  # {"train": ids, "val": ids}
    class_count: int = 2


SHAPES = ("disk", "square", "triangle", "cross", "ring", "diamond")


def _shape_mask(kind: str, size: int, cy: float, cx: float, r: float) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    dy, dx = yy + 0.5 - cy, xx + 0.5 - cx
    if kind == "disk":
        return dx ** 2 + dy ** 2 <= r ** 2
    if kind == "square":
        return (np.abs(dx) <= 0.8 * r) & (np.abs(dy) <= 0.8 * r)
    if kind == "triangle":
        # apex up; base at cy + r
        return (dy <= r) & (dy >= -r) & (np.abs(dx) <= (dy + r) * 0.6)
    if kind == "cross":
        arm = 0.35 * r
        return ((np.abs(dx) <= arm) & (np.abs(dy) <= r)) | ((np.abs(dy) <= arm) & (np.abs(dx) <= r))
    if kind == "ring":
        d2 = dx ** 2 + dy ** 2
        return (d2 <= r ** 2) & (d2 >= (0.55 * r) ** 2)
    if kind == "diamond":
        return np.abs(dx) + np.abs(dy) <= r
    raise ValueError(kind)


def _new_family(rng: np.random.Generator, spec: SynthSpec, object_class: int) -> dict:
    lo, hi = spec.color_low, spec.color_high
    return {
        "class": object_class,
        "object_color": rng.uniform(lo, hi, 3),
        "background_color": rng.uniform(lo, hi, 3),
        "texture_angle": rng.uniform(0, np.pi),
        "texture_freq": rng.uniform(3.0, 8.0),
        "texture_weights": rng.uniform(0.5, 1.0, 3),
    }


def _render(rng: np.random.Generator, spec: SynthSpec, family: dict):
    s = spec.image_size
    yy, xx = np.mgrid[0:s, 0:s].astype(np.float64) / s
    bg_color = family["background_color"] + rng.normal(0, spec.background_jitter, 3)
    obj_color = family["object_color"] + rng.normal(0, spec.object_jitter, 3)
    theta = family["texture_angle"] + rng.normal(0, 0.1)
    phase = rng.uniform(0, 2 * np.pi)
    wave = np.sin(2 * np.pi * family["texture_freq"] * (xx * np.cos(theta) + yy * np.sin(theta)) + phase)
    img = bg_color[:, None, None] + spec.texture_amplitude * family["texture_weights"][:, None, None] * wave[None]

    r = rng.uniform(*spec.object_scale) * s / 2
    cy = rng.uniform(r + 1, s - r - 1)
    cx = rng.uniform(r + 1, s - r - 1)
    kind = SHAPES[(family["class"] - 1) % len(SHAPES)]
    obj = _shape_mask(kind, s, cy, cx, r)
    img[:, obj] = obj_color[:, None]

    # gray-world: every image has channel means 0.5 before any domain shift
    img = img - img.mean(axis=(1, 2), keepdims=True) + 0.5
    mask = np.where(obj, family["class"], 0).astype(np.int64)
    if spec.ignore_border > 0:
        b = spec.ignore_border
        mask[:b, :] = IGNORE
        mask[-b:, :] = IGNORE
        mask[:, :b] = IGNORE
        mask[:, -b:] = IGNORE
    return img, mask


def _shift(rng: np.random.Generator, spec: SynthSpec, img: np.ndarray) -> np.ndarray:
    img = (img - 0.5) * spec.contrast + 0.5 + spec.brightness
    img = img + np.asarray(spec.color_cast, dtype=np.float64)[:, None, None]
    if spec.noise > 0:
        img = img + rng.normal(0, spec.noise, img.shape)
    return img


def _to_tensor(img: np.ndarray) -> torch.Tensor:
    # quantize to the 8-bit grid so the PNG round trip is exact
    q = np.clip(np.rint(np.clip(img, 0, 1) * 255.0), 0, 255) / 255.0
    return torch.from_numpy(q.astype(np.float32))


def generate_synthetic(spec: SynthSpec) -> SynthData:
    """Labeled source set plus grouped, domain-shifted personal images.

    Each personal group is a "family": one object class (shape), an object
    color, a background color and a stripe texture shared by all its images.
    Source images draw a fresh family every ``source_family_size`` images. The personal domain applies
    a brightness offset, contrast scale, color cast and Gaussian noise.
    """
    if spec.image_size < 16:
        raise DatasetError(f"image_size {spec.image_size} too small (< 16 px)")
    if spec.n_classes < 2:
        raise DatasetError("n_classes must be >= 2")
    if spec.n_groups < 1 or spec.n_groups > spec.n_personal:
        raise DatasetError(f"need 1 <= n_groups <= n_personal, got {spec.n_groups} > {spec.n_personal}")
    rng = np.random.default_rng(spec.seed)
    n_fg = spec.n_classes - 1

    if spec.source_family_size < 1:
        raise DatasetError("source_family_size must be >= 1")
    source = []
    for i in range(spec.n_source):
        if i % spec.source_family_size == 0:
            family = _new_family(rng, spec, int(rng.integers(1, n_fg + 1)))
        img, mask = _render(rng, spec, family)
        source.append(LabeledSample(_to_tensor(img), torch.from_numpy(mask), f"s{i:05d}"))

    personal, gt, groups = [], {}, {}
    for u in range(spec.n_users):
        user = f"user{u}"
        families = [_new_family(rng, spec, (g + u) % n_fg + 1) for g in range(spec.n_groups)]
        for i in range(spec.n_personal):
            g = i % spec.n_groups
            img, mask = _render(rng, spec, families[g])
            img = _shift(rng, spec, img)
            sid = f"p{i:05d}" if spec.n_users == 1 else f"{user}_p{i:05d}"
            personal.append(UnlabeledSample(_to_tensor(img), sid, user))
            gt[sid] = torch.from_numpy(mask)
            groups[sid] = g

    ids = [s.id for s in personal]
    order = np.random.default_rng(spec.seed + 1).permutation(len(ids))
    n_val = int(round(spec.val_fraction * len(ids)))
    val = sorted(ids[i] for i in order[:n_val])
    train = sorted(ids[i] for i in order[n_val:])
    return SynthData(source=source, personal=personal, ground_truth=gt, true_groups=groups,
                     split={"train": train, "val": val}, class_count=spec.n_classes)


def write_synthetic(data: SynthData, out_dir) -> tuple:
    """Write a generated fixture as ``<out>/source`` and ``<out>/personal[_<user>]`` roots."""
    out_dir = Path(out_dir)
    src = write_dataset(out_dir / "source", data.source, "source", data.class_count)
    users = sorted({s.user for s in data.personal})
    personal_specs = []
    for user in users:
        samples = [s for s in data.personal if s.user == user]
        ids = {s.id for s in samples}
        split = {k: [i for i in v if i in ids] for k, v in data.split.items()}
        name = "personal" if len(users) == 1 else f"personal_{user}"
        personal_specs.append(write_dataset(out_dir / name, samples, "personal", data.class_count,
                                            user=user, masks=data.ground_truth, split=split))
    (out_dir / "true_groups.json").write_text(json.dumps(data.true_groups, indent=1, sort_keys=True) + "\n")
    return src, personal_specs


def worker_count() -> int:
    value = os.environ.get("PERSONASEG_THREADS")
    if value:
        return max(1, int(value))
    return max(1, os.cpu_count() or 1)
