"""Image descriptors, K-means grouping of a user's images, group-constrained batching."""
from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .data import worker_count


@dataclass(frozen=True)
class Descriptor:
    id: str
    vector: np.ndarray


@dataclass
class GroupAssignment:
    mapping: dict  # id -> group index
    k: int
    centroids: Optional[np.ndarray] = None
    seed: int = 0
    history: list = field(default_factory=list)  # objective after init and each iteration

    def groups(self) -> dict:
        out = {g: [] for g in range(self.k)}
        for sid in sorted(self.mapping):
            out[self.mapping[sid]].append(sid)
        return out

    def to_json(self) -> dict:
        return {"K": self.k, "seed": self.seed,
                "mapping": {sid: int(g) for sid, g in sorted(self.mapping.items())}}

    @classmethod
    def from_json(cls, d: dict) -> "GroupAssignment":
        return cls(mapping={k: int(v) for k, v in d["mapping"].items()}, k=int(d["K"]), seed=int(d.get("seed", 0)))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=1, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "GroupAssignment":
        return cls.from_json(json.loads(Path(path).read_text()))


def pixel_histogram_descriptor(image: torch.Tensor, grid: int = 4, bins: int = 8,
                               hist_weight: float = 4.0) -> np.ndarray:
    """Downsampled pixels (3*grid*grid) followed by weighted per-channel color histograms (3*bins)."""
    small = F.adaptive_avg_pool2d(image[None].double(), grid)[0].reshape(-1).numpy()
    hist = []
    for ch in image.double().numpy():
        h, _ = np.histogram(ch, bins=bins, range=(0.0, 1.0))
        hist.append(hist_weight * h / ch.size)
    return np.concatenate([small, np.concatenate(hist)])


def resnet50_descriptor(weights_path=None) -> Callable[[torch.Tensor], np.ndarray]:
    """2048-d penultimate ResNet-50 features. ``weights_path`` points at an ImageNet state dict;
    without it the network is randomly initialised (useful only for shape checks)."""
    from torchvision.models import resnet50

    net = resnet50(weights=None)
    if weights_path is not None:
        net.load_state_dict(torch.load(weights_path, map_location="cpu"))
    net.fc = torch.nn.Identity()
    net.eval()
    mean = torch.tensor([0.485, 0.456, 0.406]).view(3, 1, 1)
    std = torch.tensor([0.229, 0.224, 0.225]).view(3, 1, 1)

    def describe(image: torch.Tensor) -> np.ndarray:
        with torch.no_grad():
            return net(((image - mean) / std)[None].float())[0].double().numpy()

    return describe


def embed_images(samples: Sequence, descriptor_fn: Optional[Callable] = None) -> list:
    descriptor_fn = descriptor_fn or pixel_histogram_descriptor
    with ThreadPoolExecutor(max_workers=worker_count()) as pool:
        vectors = list(pool.map(lambda s: np.asarray(descriptor_fn(s.image), dtype=np.float64), samples))
    out = []
    for s, v in zip(samples, vectors):
        if not np.all(np.isfinite(v)):
            raise ValueError(f"{s.id}: descriptor has non-finite entries")
        out.append(Descriptor(s.id, v))
    if len({d.vector.shape for d in out}) > 1:
        raise ValueError("descriptors have inconsistent dimensions")
    return out


def _sq_dists(x: np.ndarray, c: np.ndarray) -> np.ndarray:
    # column by column: exact differences, O(n*D) memory
    return np.stack([((x - cg) ** 2).sum(1) for cg in c], axis=1)


def _kmeans_pp(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = len(x)
    centers = [x[rng.integers(n)]]
    closest = ((x - centers[0]) ** 2).sum(1)
    for _ in range(1, k):
        total = closest.sum()
        if total <= 0:
            # all remaining points coincide with a chosen center
            idx = int(rng.integers(n))
        else:
            idx = int(rng.choice(n, p=closest / total))
        centers.append(x[idx])
        closest = np.minimum(closest, ((x - x[idx]) ** 2).sum(1))
    return np.array(centers)


def _repair_empty(x, labels, centroids, d2):
    """Move the point farthest from its centroid into each empty cluster."""
    k = len(centroids)
    for g in range(k):
        if np.any(labels == g):
            continue
        counts = np.bincount(labels, minlength=k)
        cost = d2[np.arange(len(x)), labels].copy()
        cost[counts[labels] <= 1] = -1.0  # never empty another cluster
        idx = int(np.argmax(cost))
        labels[idx] = g
        centroids[g] = x[idx]
        d2[:, g] = ((x - x[idx]) ** 2).sum(1)
    return labels, centroids


def _objective(x, labels, centroids) -> float:
    return float(((x - centroids[labels]) ** 2).sum())


def _lloyd(x, k, rng, max_iters, tol):
    centroids = _kmeans_pp(x, k, rng)
    d2 = _sq_dists(x, centroids)
    labels = np.argmin(d2, axis=1)
    labels, centroids = _repair_empty(x, labels, centroids, d2)
    history = [_objective(x, labels, centroids)]
    for _ in range(max_iters):
        new = np.stack([x[labels == g].mean(0) for g in range(k)])
        d2 = _sq_dists(x, new)
        labels = np.argmin(d2, axis=1)
        labels, new = _repair_empty(x, labels, new, d2)
        shift = float(np.sqrt(((new - centroids) ** 2).sum(1)).max())
        centroids = new
        history.append(_objective(x, labels, centroids))
        if shift < tol:
            break
    return labels, centroids, history


def kmeans(descriptors: Sequence[Descriptor], k: int, seed: int = 0,
           max_iters: int = 100, tol: float = 1e-6, n_init: int = 10) -> GroupAssignment:
    """Lloyd's algorithm with k-means++ seeding, best of ``n_init`` restarts.

    Ties between equidistant centroids go to the lowest index. The objective
    after initialisation and after every iteration of the kept run is in
    ``history``.
    """
    n = len(descriptors)
    if k < 1:
        raise ValueError("K must be >= 1")
    if k > n:
        raise ValueError(f"K={k} exceeds the number of descriptors ({n})")
    if n_init < 1:
        raise ValueError("n_init must be >= 1")
    x = np.stack([d.vector for d in descriptors]).astype(np.float64)
    rng = np.random.default_rng(seed)
    best = None
    for _ in range(n_init):
        run = _lloyd(x, k, rng, max_iters, tol)
        if best is None or run[2][-1] < best[2][-1]:
            best = run
    labels, centroids, history = best
    mapping = {d.id: int(g) for d, g in zip(descriptors, labels)}
    return GroupAssignment(mapping=mapping, k=k, centroids=centroids, seed=seed, history=history)


def cluster_samples(samples: Sequence, k: int, seed: int = 0, descriptor_fn=None, **kw) -> GroupAssignment:
    return kmeans(embed_images(samples, descriptor_fn), k, seed=seed, **kw)


def make_group_batches(assignment: GroupAssignment, batch_size: int, seed: int,
                       drop_last: bool = False, epoch: int = 0,
                       ids: Optional[Sequence[str]] = None) -> list:
    """One epoch of id batches, each drawn from a single group.

    ``ids`` restricts the epoch to a subset (e.g. the training split);
    group membership still comes from ``assignment``.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    rng = np.random.default_rng([seed, epoch])
    members = {}
    for sid in sorted(assignment.mapping if ids is None else ids):
        members.setdefault(assignment.mapping[sid], []).append(sid)
    batches = []
    for g in rng.permutation(sorted(members)):
        group = [members[g][i] for i in rng.permutation(len(members[g]))]
        for start in range(0, len(group), batch_size):
            chunk = group[start:start + batch_size]
            if drop_last and len(chunk) < batch_size:
                continue
            batches.append(chunk)
    return [batches[i] for i in rng.permutation(len(batches))]


class GroupBatchStream:
    """Endless group batches: reshuffles every epoch."""

    def __init__(self, assignment: GroupAssignment, batch_size: int, seed: int,
                 ids: Optional[Sequence[str]] = None, drop_last: bool = False):
        self.assignment = assignment
        self.batch_size = batch_size
        self.seed = seed
        self.ids = ids
        self.drop_last = drop_last
        self.epoch = 0
        self._queue = []

    def __iter__(self):
        return self

    def __next__(self) -> list:
        if not self._queue:
            self._queue = make_group_batches(self.assignment, self.batch_size, self.seed,
                                             self.drop_last, self.epoch, self.ids)
            self.epoch += 1
            if not self._queue:
                raise ValueError("an epoch produced no batches (every group smaller than batch_size "
                                 "with drop_last, or no ids)")
        return self._queue.pop(0)
