"""The mask perturbation operator and the incremental schedules that drive
the AUC metrics: patch / supervoxel unit partitions, unit ranking, and
cumulative insertion/deletion masks.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .errors import ContractError, ParameterError
from .tensor_ops import as_mask, as_video, gaussian_blur2d

BASELINE_MODES = ("blur", "dataset-mean", "black")


@dataclass(frozen=True)
class PerturbConfig:
    """How masked-out content is replaced."""

    blur_sigma: float = 10.0
    baseline_mode: str = "blur"
    mean_video: np.ndarray | None = None

    def __post_init__(self):
        if self.baseline_mode not in BASELINE_MODES:
            raise ParameterError(f"baseline_mode must be one of {BASELINE_MODES}")
        if self.baseline_mode == "blur" and self.blur_sigma <= 0:
            raise ParameterError(f"blur_sigma must be > 0, got {self.blur_sigma}")
        if self.baseline_mode == "dataset-mean" and self.mean_video is None:
            raise ParameterError("dataset-mean baseline requires mean_video")


def perturb_baseline(x, cfg: PerturbConfig) -> np.ndarray:
    """The baseline video substituted where the mask is 0."""
    x = as_video(x)
    if cfg.baseline_mode == "blur":
        return gaussian_blur2d(x, cfg.blur_sigma)
    if cfg.baseline_mode == "black":
        return np.zeros_like(x)
    mean = as_video(cfg.mean_video)
    if mean.shape != x.shape:
        raise ContractError(f"mean_video shape {mean.shape} != input {x.shape}")
    return mean


def perturb(x, m, cfg: PerturbConfig) -> np.ndarray:
    """Blend input and baseline frame-by-frame: M*X + (1-M)*baseline.

    The mask is broadcast across channels; the result is elementwise
    affine in the mask, so d(perturbed)/dM = X - baseline per channel.
    """
    x = as_video(x)
    m = as_mask(m)
    if m.shape != x.shape[:3]:
        raise ContractError(f"mask shape {m.shape} != video frames {x.shape[:3]}")
    baseline = perturb_baseline(x, cfg)
    mm = m[..., None]
    return mm * x + (1.0 - mm) * baseline


@dataclass
class UnitPartition:
    """Disjoint pixel-index sets covering all T*H*W indices."""

    kind: str
    shape: tuple  # (T, H, W)
    units: list = field(repr=False)  # flat int index arrays into (T,H,W)

    def __post_init__(self):
        total = int(np.prod(self.shape))
        joined = np.concatenate(self.units) if self.units else np.empty(0, dtype=np.int64)
        if joined.size != total or np.unique(joined).size != total:
            raise ContractError("units must be disjoint and cover every index")

    def __len__(self):
        return len(self.units)


def partition_patches(shape, size: int) -> UnitPartition:
    """Per-frame grid of size x size tiles; edge tiles stay smaller."""
    t, h, w = shape
    if size < 1:
        raise ParameterError(f"patch size must be >= 1, got {size}")
    if size > h or size > w:
        raise ParameterError(f"patch size {size} exceeds frame dims {h}x{w}")
    units = []
    for ti in range(t):
        for i0 in range(0, h, size):
            for j0 in range(0, w, size):
                ii = np.arange(i0, min(i0 + size, h))
                jj = np.arange(j0, min(j0 + size, w))
                grid = (ti * h + ii[:, None]) * w + jj[None, :]
                units.append(grid.ravel().astype(np.int64))
    return UnitPartition("patch", (t, h, w), units)


def _grid_centers(shape, k: int) -> np.ndarray:
    """Roughly cubic lattice of k cell centers over a (T, H, W) volume."""
    t, h, w = shape
    step = (t * h * w / k) ** (1.0 / 3.0)
    nt = max(1, min(t, round(t / step)))
    rem = max(1, round(k / nt))
    ratio = (rem * h / w) ** 0.5 if w else 1.0
    nh = max(1, min(h, round(ratio)))
    nw = max(1, min(w, round(rem / nh)))
    ts = (np.arange(nt) + 0.5) * t / nt
    hs = (np.arange(nh) + 0.5) * h / nh
    ws = (np.arange(nw) + 0.5) * w / nw
    grid = np.stack(np.meshgrid(ts, hs, ws, indexing="ij"), axis=-1)
    return grid.reshape(-1, 3)


def partition_supervoxels(x, target: int, iterations: int = 10) -> UnitPartition:
    """SLIC-style units: fixed-iteration k-means over intensity + position.

    Features are (mean-channel intensity, i/H, j/W, t/T); centers start on
    a regular lattice, so the result is deterministic. Clusters are split
    into 6-connected components and fragments below a quarter of the mean
    unit size are merged into their largest 6-connected neighbor, keeping
    the unit count near the target.
    """
    x = as_video(x)
    if target < 1:
        raise ParameterError(f"target unit count must be >= 1, got {target}")
    t, h, w, _ = x.shape
    intensity = x.mean(axis=3)
    tt, ii, jj = np.meshgrid(
        np.arange(t, dtype=np.float64),
        np.arange(h, dtype=np.float64),
        np.arange(w, dtype=np.float64),
        indexing="ij",
    )
    feats = np.stack(
        [intensity.ravel(), (ii / h).ravel(), (jj / w).ravel(), (tt / max(t, 1)).ravel()],
        axis=1,
    )
    centers_pos = _grid_centers((t, h, w), target)
    k = centers_pos.shape[0]
    centers = np.empty((k, 4))
    centers[:, 1] = centers_pos[:, 1] / h
    centers[:, 2] = centers_pos[:, 2] / w
    centers[:, 3] = centers_pos[:, 0] / max(t, 1)
    pos_idx = np.minimum(centers_pos.astype(int), [t - 1, h - 1, w - 1])
    centers[:, 0] = intensity[pos_idx[:, 0], pos_idx[:, 1], pos_idx[:, 2]]

    assign = None
    feat_sq = (feats ** 2).sum(axis=1)
    for _ in range(iterations):
        d2 = feat_sq[:, None] - 2.0 * (feats @ centers.T) + (centers ** 2).sum(axis=1)[None, :]
        assign = d2.argmin(axis=1)
        counts = np.bincount(assign, minlength=k).astype(np.float64)
        sums = np.zeros((k, 4))
        for dim in range(4):
            sums[:, dim] = np.bincount(assign, weights=feats[:, dim], minlength=k)
        nonempty = counts > 0
        centers[nonempty] = sums[nonempty] / counts[nonempty, None]

    labels3d = assign.reshape(t, h, w)
    structure = ndimage.generate_binary_structure(3, 1)  # 6-connectivity
    comp = np.zeros((t, h, w), dtype=np.int64)
    next_label = 0
    for ci in range(k):
        lab, n = ndimage.label(labels3d == ci, structure=structure)
        comp[lab > 0] = lab[lab > 0] + next_label
        next_label += n
    comp -= 1  # 0-based

    # merge small fragments into their dominant 6-connected neighbor
    min_size = max(1, (t * h * w) // (4 * target))
    sizes = np.bincount(comp.ravel())
    for small in np.argsort(sizes, kind="stable"):
        if sizes[small] == 0 or sizes[small] >= min_size:
            continue
        region = comp == small
        border = ndimage.binary_dilation(region, structure=structure) & ~region
        neighbors = comp[border]
        if neighbors.size == 0:
            continue
        counts = np.bincount(neighbors)
        host = int(counts.argmax())
        comp[region] = host
        sizes[host] += sizes[small]
        sizes[small] = 0

    remaining = np.unique(comp)
    flat = comp.ravel()
    units = [np.nonzero(flat == lab)[0].astype(np.int64) for lab in remaining]
    return UnitPartition("supervoxel", (t, h, w), units)


def partition(x, kind: str, *, patch_size: int = 7, target_units: int = 256) -> UnitPartition:
    """Split a video's pixel indices into perturbation units."""
    x = as_video(x)
    if kind == "patch":
        return partition_patches(x.shape[:3], patch_size)
    if kind == "supervoxel":
        return partition_supervoxels(x, target_units)
    raise ParameterError(f"unknown partition kind {kind!r}")


@dataclass
class PerturbationSchedule:
    """Ordered units with lazily generated cumulative masks H^(0..L)."""

    operation: str  # insertion | deletion
    order: str  # morf | lerf
    part: UnitPartition
    unit_order: np.ndarray  # ranked unit indices, step l perturbs unit_order[l-1]

    def __len__(self):
        return len(self.part)

    def step_units(self):
        """Flat pixel-index arrays in perturbation order."""
        return [self.part.units[u] for u in self.unit_order]

    def cumulative_mask(self, step: int) -> np.ndarray:
        """H^(step): 1 where the input is visible after `step` steps."""
        if not 0 <= step <= len(self):
            raise ParameterError(f"step {step} outside [0, {len(self)}]")
        start = 0.0 if self.operation == "insertion" else 1.0
        flat = np.full(int(np.prod(self.part.shape)), start)
        val = 1.0 - start
        for u in self.unit_order[:step]:
            flat[self.part.units[u]] = val
        return flat.reshape(self.part.shape)


def build_schedule(m, part: UnitPartition, operation: str, order: str) -> PerturbationSchedule:
    """Rank units by mean attribution and fix the perturbation order.

    MoRF ranks descending, LeRF ascending; ties break by unit index. The
    ranking depends only on the argsort of unit means, so any strictly
    monotone transform of the map yields the same schedule.
    """
    m = as_mask(m)
    if m.shape != part.shape:
        raise ContractError(f"mask shape {m.shape} != partition shape {part.shape}")
    if operation not in ("insertion", "deletion"):
        raise ParameterError(f"operation must be insertion|deletion, got {operation!r}")
    if order not in ("morf", "lerf"):
        raise ParameterError(f"order must be morf|lerf, got {order!r}")
    flat = m.ravel()
    means = np.array([flat[u].mean() for u in part.units])
    key = -means if order == "morf" else means
    unit_order = np.argsort(key, kind="stable")
    return PerturbationSchedule(operation, order, part, unit_order)
