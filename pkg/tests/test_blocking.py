import itertools

import numpy as np
import pytest

from ptseg.blocking import (
    Block,
    SamplerConfig,
    chebyshev_window,
    chunk_indices,
    grid_groups,
    multiscale_blocks,
    multiscale_sample,
    sample_block_points,
    split_into_blocks,
)
from ptseg.errors import ArgumentError, EmptyInputError, SamplingExhaustedError
from ptseg.pointcloud import LabeledPointCloud


def uniform_cloud(rng, n, w=2.0, l=2.0, corners=True):
    pos = np.column_stack([rng.uniform(0, w, n), rng.uniform(0, l, n), rng.uniform(0, 3, n)])
    if corners:
        pos[:2, :2] = [[0, 0], [w, l]]
    return LabeledPointCloud(pos, np.zeros(n, int), ("a",), rng.integers(0, 256, (n, 3)))


def in_window(cloud, block):
    d = np.abs(cloud.positions[block.indices, :2].astype(np.float64) - np.array(block.center))
    return bool((d.max(axis=1) <= block.scale + 1e-6).all())


def test_config_validation():
    with pytest.raises(ArgumentError):
        SamplerConfig(train_stride=0.0)
    with pytest.raises(ArgumentError):
        SamplerConfig(test_stride=1.5)
    with pytest.raises(ArgumentError):
        SamplerConfig(radii=(0.5, 0.25))
    with pytest.raises(ArgumentError):
        SamplerConfig(points_per_block=0)
    assert SamplerConfig().middle_scale == 1


def test_test_mode_2x2_room(rng):
    c = uniform_cloud(rng, 2000)
    blocks = split_into_blocks(c, SamplerConfig(), "test")
    assert sorted(b.origin for b in blocks) == [(0.0, 0.0), (0.0, 1.0), (1.0, 0.0), (1.0, 1.0)]


def test_train_mode_origins(rng):
    c = uniform_cloud(rng, 4000)
    blocks = split_into_blocks(c, SamplerConfig(), "train")
    assert sorted(b.origin for b in blocks) == [(x, y) for x in (0.0, 0.5, 1.0) for y in (0.0, 0.5, 1.0)]
    counts = np.zeros(len(c), int)
    for b in blocks:
        counts[b.indices] += 1
        assert in_window(c, b)
    xy = c.positions[:, :2]
    interior = ((xy > 0.5) & (xy < 1.5)).all(axis=1)
    assert (counts[interior] == 4).all()


def test_min_points_filter_and_empty(rng):
    pos = np.array([[0.1, 0.1, 0], [0.2, 0.2, 0], [1.5, 1.5, 0]])
    c = LabeledPointCloud(pos, [0, 0, 0], ("a",))
    blocks = split_into_blocks(c, SamplerConfig(min_points=2), "test")
    assert [b.cell for b in blocks] == [(0, 0)]
    with pytest.raises(EmptyInputError):
        split_into_blocks(LabeledPointCloud(np.zeros((0, 3)), [], ("a",)), SamplerConfig())


@pytest.mark.parametrize("seed", range(20))
def test_test_mode_partitions_random_clouds(seed):
    rng = np.random.default_rng(seed)
    c = uniform_cloud(rng, 500, w=rng.uniform(0.3, 4.5), l=rng.uniform(0.3, 4.5), corners=False)
    blocks = split_into_blocks(c, SamplerConfig(min_points=1), "test")
    counts = np.zeros(len(c), int)
    for b in blocks:
        counts[b.indices] += 1
        assert in_window(c, b)
    assert (counts == 1).all()


def test_sample_exact_size_is_permutation(rng):
    c = uniform_cloud(rng, 64)
    b = Block(np.arange(64), (0, 0), (0.0, 0.0), 1.0)
    f, idx = sample_block_points(b, c, 64, rng)
    assert sorted(idx.tolist()) == list(range(64))
    assert f.shape == (64, 9)


def test_sample_single_point_padding(rng):
    c = uniform_cloud(rng, 5)
    b = Block(np.array([3]), (0, 0), (0.0, 0.0), 0.5)
    f, idx = sample_block_points(b, c, 4, rng)
    assert idx.tolist() == [3] * 4 and (f == f[0]).all()


def test_sample_large_block_subset_without_duplicates(rng):
    c = uniform_cloud(rng, 10000)
    b = Block(np.arange(10000), (0, 0), (0.0, 0.0), 1.0)
    _, idx = sample_block_points(b, c, 4096, rng)
    assert len(set(idx.tolist())) == 4096 and set(idx.tolist()) <= set(range(10000))


def test_sample_localizes_xy_only(rng):
    c = uniform_cloud(rng, 100)
    b = Block(np.arange(100), (0, 0), (0.25, 0.5), 0.5)
    f, idx = sample_block_points(b, c, 100, rng, use_color=False)
    pos = c.positions[idx].astype(np.float64)
    assert np.allclose(f[:, 0], pos[:, 0] - 0.75) and np.allclose(f[:, 1], pos[:, 1] - 1.0)
    assert np.array_equal(f[:, 2], pos[:, 2])
    assert np.array_equal(f[:, 3:], c.features(False)[idx, 3:])


def test_sample_empty_block(rng):
    with pytest.raises(EmptyInputError):
        sample_block_points(Block(np.array([], int), (0, 0), (0.0, 0.0), 0.5), uniform_cloud(rng, 3), 4, rng)


def test_chunks_cover_every_point(rng):
    idx = rng.permutation(1000)[:333]
    chunks = chunk_indices(idx, 100, rng)
    assert len(chunks) == 4 and all(len(ch) == 100 for ch in chunks)
    assert set(np.concatenate(chunks).tolist()) == set(idx.tolist())


def _blocks_for(cells):
    return [Block(np.array([k]), cell, (float(cell[0]), float(cell[1])), 0.5) for k, cell in enumerate(cells)]


def test_grid_groups_full_4x4():
    blocks = _blocks_for([(i, j) for i in range(4) for j in range(4)])
    test = grid_groups(blocks, "test")
    assert len(test) == 4 and not any(any(g.duplicated) for g in test)
    assert [b.cell for b in test[0].blocks] == [(0, 0), (0, 1), (1, 0), (1, 1)]
    assert len(grid_groups(blocks, "train")) == 9


def test_grid_groups_fill_from_nearest_member():
    blocks = _blocks_for([(0, 0), (1, 1)])
    (g,) = grid_groups(blocks, "test")
    assert g.duplicated == [False, True, True, False]
    assert [b.cell for b in g.blocks] == [(0, 0), (0, 0), (0, 0), (1, 1)]


def test_grid_groups_train_skips_singletons():
    assert grid_groups(_blocks_for([(0, 0)]), "train") == []
    assert grid_groups(_blocks_for([(0, 0), (3, 3)]), "train") == []


def test_grid_groups_with_step():
    blocks = _blocks_for([(i, j) for i in range(6) for j in range(6)])
    groups = grid_groups(blocks, "test", step=2)
    seen = [b.cell for g in groups for b, d in zip(g.blocks, g.duplicated) if not d]
    assert sorted(seen) == sorted(b.cell for b in blocks)
    full = [g for g in groups if not any(g.duplicated)]
    assert len(full) == 4
    for g in full:
        (a, b) = g.blocks[0].cell
        assert [bl.cell for bl in g.blocks] == [(a, b), (a, b + 2), (a + 2, b), (a + 2, b + 2)]


def test_every_3x3_occupancy_pattern_tiles_exactly():
    cells = [(i, j) for i in range(3) for j in range(3)]
    for mask in range(1, 2 ** 9):
        present = [c for k, c in enumerate(cells) if mask >> k & 1]
        groups = grid_groups(_blocks_for(present), "test")
        seen = [b.cell for g in groups for b, d in zip(g.blocks, g.duplicated) if not d]
        assert sorted(seen) == sorted(present)
        for g in groups:
            assert len(g.blocks) == 4


def test_multiscale_nested_and_ordered(rng):
    c = uniform_cloud(rng, 3000, 4.0, 4.0)
    g = multiscale_sample(c, SamplerConfig(points_per_block=64), rng)
    assert g.kind == "multiscale" and [b.scale for b in g.blocks] == [0.25, 0.5, 1.0]
    sets = [set(b.indices.tolist()) for b in g.blocks]
    assert sets[0] <= sets[1] <= sets[2]
    assert len({b.cell for b in g.blocks}) == 1
    assert all(p.shape == (64, 9) for p in g.sampled_points)
    for b in g.blocks:
        assert in_window(c, b)


def test_multiscale_corner_center(rng):
    c = uniform_cloud(rng, 3000, 4.0, 4.0)
    blocks = multiscale_blocks(c, (0.0, 0.0), (0.25, 0.5, 1.0))
    assert all(len(b) > 0 for b in blocks)
    assert c.positions[blocks[-1].indices, :2].max() <= 1.0


def test_multiscale_area_scaling():
    rng = np.random.default_rng(3)
    c = uniform_cloud(rng, 40000, 10.0, 10.0)
    counts = np.zeros(3)
    xy = c.positions[:, :2]
    for _ in range(1000):
        center = xy[rng.integers(len(c))]
        # keep every window inside the room so the area law applies
        if (center < 1.0).any() or (center > 9.0).any():
            continue
        counts += [len(chebyshev_window(c, center, r)) for r in (0.25, 0.5, 1.0)]
    ratio = counts / counts[1]
    assert ratio[0] == pytest.approx(0.25, rel=0.15) and ratio[2] == pytest.approx(4.0, rel=0.15)


def test_multiscale_exhausted(rng):
    c = uniform_cloud(rng, 10)
    with pytest.raises(SamplingExhaustedError):
        multiscale_sample(c, SamplerConfig(min_points=50, max_attempts=5), rng)


def test_fixed_seed_fixed_groups():
    c = uniform_cloud(np.random.default_rng(0), 2000, 3.0, 3.0)
    a = multiscale_sample(c, SamplerConfig(points_per_block=32), np.random.default_rng(9))
    b = multiscale_sample(c, SamplerConfig(points_per_block=32), np.random.default_rng(9))
    assert all(np.array_equal(x, y) for x, y in zip(a.sampled_indices, b.sampled_indices))
