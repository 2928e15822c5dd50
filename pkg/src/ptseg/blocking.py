"""Block samplers: room splitting, fixed-size resampling, 2x2 grid and multi-scale groups.

Blocks are square XY windows spanning the full room height. A window of
half-extent ``r`` around center ``c`` holds the points with
``max(|x - cx|, |y - cy|) <= r`` (the Chebyshev ball); room splits use
half-open windows so that non-overlapping test blocks partition the room.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ArgumentError, EmptyInputError, SamplingExhaustedError
from .pointcloud import LabeledPointCloud


@dataclass(frozen=True)
class SamplerConfig:
    block_size: float = 1.0
    train_stride: float = 0.5
    test_stride: float = 1.0
    points_per_block: int = 4096
    radii: tuple[float, ...] = (0.25, 0.5, 1.0)
    min_points: int = 32
    seed: int = 0
    max_attempts: int = 100

    def __post_init__(self):
        for s in (self.train_stride, self.test_stride):
            if not 0 < s <= self.block_size:
                raise ArgumentError(f"stride {s} must lie in (0, block_size={self.block_size}]")
        if self.points_per_block < 1:
            raise ArgumentError("points_per_block must be at least 1")
        if not self.radii or any(b <= a for a, b in zip(self.radii, self.radii[1:])) or self.radii[0] <= 0:
            raise ArgumentError(f"radii must be positive and strictly ascending, got {self.radii}")

    def stride(self, mode: str) -> float:
        if mode == "train":
            return self.train_stride
        if mode == "test":
            return self.test_stride
        raise ArgumentError(f"mode must be 'train' or 'test', got {mode!r}")

    @property
    def middle_scale(self) -> int:
        return len(self.radii) // 2


@dataclass
class Block:
    """Indices of the points inside one window of a cloud."""

    indices: np.ndarray
    cell: tuple
    origin: tuple[float, float]
    scale: float

    @property
    def center(self) -> tuple[float, float]:
        return (self.origin[0] + self.scale, self.origin[1] + self.scale)

    def __len__(self):
        return len(self.indices)


@dataclass
class BlockGroup:
    """Blocks processed together.

    ``grid2x2`` groups are ordered (0,0), (0,1), (1,0), (1,1) relative to the
    anchor cell; ``multiscale`` groups by ascending radius. ``duplicated``
    marks slots filled with a copy of another member to complete a group.
    """

    kind: str
    blocks: list
    duplicated: list = field(default_factory=list)
    sampled_points: list | None = None
    sampled_indices: list | None = None

    def __post_init__(self):
        if not self.duplicated:
            self.duplicated = [False] * len(self.blocks)


def _window_counts(extent: float, block: float, stride: float) -> int:
    return max(1, math.ceil((extent - block) / stride - 1e-9) + 1)


def split_into_blocks(cloud: LabeledPointCloud, cfg: SamplerConfig, mode: str = "train") -> list[Block]:
    """Cover the cloud's XY bounds with square windows at a regular stride.

    Window ``(i, j)`` spans ``[min + i*stride, min + i*stride + block_size)``
    in x (likewise y); the last window along each axis is closed so the room
    maximum is covered. Windows with fewer than ``min_points`` points are
    dropped.
    """
    if len(cloud) == 0:
        raise EmptyInputError("cannot split an empty cloud")
    stride = cfg.stride(mode)
    lo, hi = cloud.bounds
    xy = cloud.positions[:, :2].astype(np.float64)
    lo = lo[:2].astype(np.float64)
    extent = hi[:2].astype(np.float64) - lo
    counts = [_window_counts(extent[a], cfg.block_size, stride) for a in (0, 1)]
    span = cfg.block_size / stride
    # u is the position in stride units; window k holds k <= u < k + span
    u = (xy - lo) / stride
    per_axis = []
    for a in (0, 1):
        n = counts[a]
        masks = [(u[:, a] >= k) & (u[:, a] < k + span) for k in range(n - 1)]
        masks.append(u[:, a] >= n - 1)
        per_axis.append(masks)
    half = cfg.block_size / 2
    blocks = []
    for i in range(counts[0]):
        mx = per_axis[0][i]
        if not mx.any():
            continue
        for j in range(counts[1]):
            idx = np.flatnonzero(mx & per_axis[1][j])
            if len(idx) == 0 or len(idx) < cfg.min_points:
                continue
            origin = (float(lo[0] + i * stride), float(lo[1] + j * stride))
            blocks.append(Block(idx, (i, j), origin, half))
    return blocks


def chebyshev_window(cloud: LabeledPointCloud, center, radius: float) -> np.ndarray:
    """Indices of points within XY Chebyshev distance ``radius`` of ``center``."""
    d = np.abs(cloud.positions[:, :2].astype(np.float64) - np.asarray(center, dtype=np.float64))
    return np.flatnonzero(d.max(axis=1) <= radius)


def localized_features(cloud: LabeledPointCloud, indices, center, use_color: bool) -> np.ndarray:
    """Feature rows for ``indices`` with XY shifted so ``center`` is the origin."""
    feats = cloud.features(use_color)[indices].copy()
    feats[:, 0] -= center[0]
    feats[:, 1] -= center[1]
    return feats


def resample_indices(indices, n: int, rng) -> np.ndarray:
    """Exactly ``n`` indices: a subset without replacement, or all of them padded by draws with replacement."""
    indices = np.asarray(indices)
    if len(indices) == 0:
        raise EmptyInputError("cannot sample points from an empty block")
    if len(indices) >= n:
        return indices[rng.choice(len(indices), n, replace=False)]
    pad = indices[rng.integers(0, len(indices), n - len(indices))]
    return np.concatenate([indices[rng.permutation(len(indices))], pad])


def sample_block_points(block: Block, cloud: LabeledPointCloud, n: int, rng, use_color: bool = True):
    """Resample a block to ``n`` points and build its ``n x D`` feature matrix.

    Returns ``(features, indices)``; ``indices`` maps each row back to the cloud.
    """
    idx = resample_indices(block.indices, n, rng)
    return localized_features(cloud, idx, block.center, use_color), idx


def chunk_indices(indices, n: int, rng) -> list[np.ndarray]:
    """Split a block into ``ceil(len/n)`` chunks of ``n`` so every point is used at least once."""
    indices = np.asarray(indices)
    if len(indices) == 0:
        raise EmptyInputError("cannot chunk an empty block")
    perm = indices[rng.permutation(len(indices))]
    k = math.ceil(len(perm) / n)
    chunks = [perm[i * n:(i + 1) * n] for i in range(k)]
    last = chunks[-1]
    if len(last) < n:
        chunks[-1] = np.concatenate([last, indices[rng.integers(0, len(indices), n - len(last))]])
    return chunks


_GRID_ORDER = ((0, 0), (0, 1), (1, 0), (1, 1))


def _complete(members: dict, anchor, step: int):
    """Fill missing slots of a 2x2 group with the nearest present member."""
    slots = [(anchor[0] + di * step, anchor[1] + dj * step) for di, dj in _GRID_ORDER]
    present = [c for c in slots if c in members]
    blocks, dup = [], []
    for c in slots:
        if c in members:
            blocks.append(members[c])
            dup.append(False)
        else:
            near = min(present, key=lambda p: (abs(p[0] - c[0]) + abs(p[1] - c[1]), slots.index(p)))
            blocks.append(members[near])
            dup.append(True)
    return blocks, dup, len(present)


def grid_groups(blocks: list[Block], mode: str = "train", step: int = 1) -> list[BlockGroup]:
    """Group blocks into 2x2 neighborhoods of cells.

    ``step`` is the cell distance between neighbors within a group (use
    ``block_size / stride`` to group non-overlapping blocks from a
    finer-strided split). Training slides the anchor over every cell; groups
    need at least two real members. Testing tiles cells into disjoint
    super-cells anchored at even coordinates and always emits them, so each
    block lands in exactly one group.
    """
    members = {tuple(b.cell): b for b in blocks}
    if not members:
        return []
    groups = []
    if mode == "train":
        is_ = [c[0] for c in members]
        js = [c[1] for c in members]
        for ai in range(min(is_), max(min(is_), max(is_) - step) + 1):
            for aj in range(min(js), max(min(js), max(js) - step) + 1):
                slots = [(ai + di * step, aj + dj * step) for di, dj in _GRID_ORDER]
                if sum(c in members for c in slots) < 2:
                    continue
                bl, dup, _ = _complete(members, (ai, aj), step)
                groups.append(BlockGroup("grid2x2", bl, dup))
    elif mode == "test":
        tile = 2 * step
        anchors = sorted({tuple(v - v % tile + v % step for v in c) for c in members})
        for anchor in anchors:
            bl, dup, _ = _complete(members, anchor, step)
            groups.append(BlockGroup("grid2x2", bl, dup))
    else:
        raise ArgumentError(f"mode must be 'train' or 'test', got {mode!r}")
    return groups


def sample_group(group: BlockGroup, cloud: LabeledPointCloud, n: int, rng, use_color: bool = True) -> BlockGroup:
    """Resample every block of ``group`` to ``n`` points (in place) and return it."""
    pts, idx = [], []
    for b in group.blocks:
        f, i = sample_block_points(b, cloud, n, rng, use_color)
        pts.append(f)
        idx.append(i)
    group.sampled_points, group.sampled_indices = pts, idx
    return group


def multiscale_blocks(cloud: LabeledPointCloud, center, radii) -> list[Block]:
    c = (float(center[0]), float(center[1]))
    return [Block(chebyshev_window(cloud, c, r), c, (c[0] - r, c[1] - r), float(r)) for r in radii]


def multiscale_sample(cloud: LabeledPointCloud, cfg: SamplerConfig, rng, use_color: bool = True) -> BlockGroup:
    """Concentric windows around a randomly drawn cloud point, each resampled to N points.

    A draw is accepted when the largest window holds at least ``min_points``
    points; after ``max_attempts`` rejected draws the sampler gives up.
    """
    if len(cloud) == 0:
        raise EmptyInputError("cannot sample from an empty cloud")
    xy = cloud.positions[:, :2].astype(np.float64)
    for _ in range(cfg.max_attempts):
        center = xy[rng.integers(len(cloud))]
        blocks = multiscale_blocks(cloud, center, cfg.radii)
        if len(blocks[-1]) >= cfg.min_points:
            group = BlockGroup("multiscale", blocks)
            return sample_group(group, cloud, cfg.points_per_block, rng, use_color)
    raise SamplingExhaustedError(
        f"no center with {cfg.min_points} points within {cfg.radii[-1]} m after {cfg.max_attempts} attempts"
    )
