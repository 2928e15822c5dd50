"""Procedural labeled indoor scenes for desk-scale experiments.

A scene is a rectangular room on a 1 m cell grid: floor, optional ceiling and
walls, box-shaped furniture and pole-shaped thin structures, all sampled as
surface points with Poisson counts proportional to area.

With ``context_coupling`` the room is tiled into 2 x 2 cell tiles anchored at
even cells. Every tile holds one box and, in a 4-adjacent cell of the same
tile, one pole. Boxes of class ``box_a`` and ``box_b`` are drawn from the same
geometry and color distribution; only the height of the neighboring pole
tells them apart (tall for ``box_a``, short for ``box_b``).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ArgumentError
from .pointcloud import LabeledPointCloud

CLASS_NAMES = ("floor", "ceiling", "wall", "box", "pole")
COUPLED_CLASS_NAMES = ("floor", "ceiling", "wall", "box_a", "box_b", "pole")

_BASE_COLORS = {
    "floor": (110, 110, 115),
    "ceiling": (235, 235, 230),
    "wall": (205, 185, 150),
    "box": (150, 90, 40),
    "box_a": (150, 90, 40),
    "box_b": (150, 90, 40),
    "pole": (190, 40, 40),
}


@dataclass(frozen=True)
class SceneRecipe:
    seed: int = 0
    extent: tuple[float, ...] = (4.0, 4.0, 2.5)
    floor: bool = True
    ceiling: bool = True
    walls: int = 4
    boxes: int = 3
    box_half_size: tuple[float, ...] = (0.15, 0.3)
    box_height: tuple[float, ...] = (0.4, 0.9)
    poles: int = 2
    pole_radius: float = 0.05
    pole_height: tuple[float, ...] = (1.0, 2.0)
    tall_pole: float = 1.8
    short_pole: float = 0.7
    density: float = 100.0
    noise: float = 0.002
    color_noise: int = 8
    context_coupling: bool = False

    def __post_init__(self):
        if len(self.extent) != 3 or min(self.extent) <= 0:
            raise ArgumentError(f"extent must be three positive lengths, got {self.extent}")
        if self.density <= 0:
            raise ArgumentError("density must be positive")
        if not 0 <= self.walls <= 4:
            raise ArgumentError("walls must be between 0 and 4")
        if self.context_coupling and (self.extent[0] < 2 or self.extent[1] < 2):
            raise ArgumentError("context coupling needs a room of at least 2 x 2 m")

    @property
    def class_names(self) -> tuple:
        return COUPLED_CLASS_NAMES if self.context_coupling else CLASS_NAMES


class _Builder:
    def __init__(self, recipe: SceneRecipe, rng):
        self.recipe = recipe
        self.rng = rng
        self.names = recipe.class_names
        self.parts = []

    def _count(self, area):
        return int(self.rng.poisson(self.recipe.density * area))

    def add(self, pts, name):
        if len(pts):
            self.parts.append((np.asarray(pts, dtype=np.float64), self.names.index(name), name))

    def rect(self, origin, u, v, name, keep=None):
        origin, u, v = (np.asarray(a, dtype=np.float64) for a in (origin, u, v))
        area = np.linalg.norm(np.cross(u, v))
        ab = self.rng.random((self._count(area), 2))
        pts = origin + ab[:, :1] * u + ab[:, 1:] * v
        if keep is not None:
            pts = pts[keep(pts)]
        self.add(pts, name)

    def box(self, cx, cy, hx, hy, h, name):
        self.rect((cx - hx, cy - hy, h), (2 * hx, 0, 0), (0, 2 * hy, 0), name)
        self.rect((cx - hx, cy - hy, 0), (2 * hx, 0, 0), (0, 0, h), name)
        self.rect((cx - hx, cy + hy, 0), (2 * hx, 0, 0), (0, 0, h), name)
        self.rect((cx - hx, cy - hy, 0), (0, 2 * hy, 0), (0, 0, h), name)
        self.rect((cx + hx, cy - hy, 0), (0, 2 * hy, 0), (0, 0, h), name)

    def pole(self, cx, cy, radius, h, name="pole"):
        n = self._count(2 * np.pi * radius * h)
        ang = self.rng.uniform(0, 2 * np.pi, n)
        z = self.rng.uniform(0, h, n)
        self.add(np.stack([cx + radius * np.cos(ang), cy + radius * np.sin(ang), z], 1), name)

    def build(self, tag: str) -> LabeledPointCloud:
        r = self.recipe
        pts = np.concatenate([p for p, _, _ in self.parts]) if self.parts else np.zeros((0, 3))
        labels = np.concatenate([np.full(len(p), c) for p, c, _ in self.parts]).astype(np.int64) if self.parts else np.zeros(0, np.int64)
        base = np.concatenate([np.tile(_BASE_COLORS[n], (len(p), 1)) for p, _, n in self.parts]) if self.parts else np.zeros((0, 3))
        if r.noise > 0:
            pts = pts + self.rng.normal(0, r.noise, pts.shape)
        jitter = self.rng.integers(-r.color_noise, r.color_noise + 1, base.shape) if r.color_noise else 0
        colors = np.clip(base + jitter, 0, 255).astype(np.uint8)
        return LabeledPointCloud(pts, labels, self.names, colors, tag)


def _layout(recipe: SceneRecipe, rng):
    """Object placements, independent of point density."""
    W, L, _ = recipe.extent
    nx, ny = max(int(W), 1), max(int(L), 1)
    boxes, poles = [], []
    lo_h, hi_h = recipe.box_half_size
    if recipe.context_coupling:
        tiles = [(a, b) for a in range(nx // 2) for b in range(ny // 2)]
        kinds = np.array(["box_a", "box_b"] * ((len(tiles) + 1) // 2))[: len(tiles)]
        rng.shuffle(kinds)
        for (a, b), kind in zip(tiles, kinds):
            bx, by = rng.integers(0, 2, 2)
            if rng.random() < 0.5:
                px, py = 1 - bx, by
            else:
                px, py = bx, 1 - by
            hx, hy = rng.uniform(lo_h, hi_h, 2)
            h = rng.uniform(*recipe.box_height)
            boxes.append((2 * a + bx + 0.5, 2 * b + by + 0.5, hx, hy, h, str(kind)))
            # the pole sits 0.25 m from both tile mid-lines, inside its own cell
            pole_x = 2 * a + (0.75 if px == 0 else 1.25)
            pole_y = 2 * b + (0.75 if py == 0 else 1.25)
            height = recipe.tall_pole if kind == "box_a" else recipe.short_pole
            poles.append((pole_x, pole_y, height))
        return boxes, poles
    cells = [(i, j) for i in range(nx) for j in range(ny)]
    order = rng.permutation(len(cells))
    n_box = min(recipe.boxes, len(cells))
    n_pole = min(recipe.poles, len(cells) - n_box)
    for k in order[:n_box]:
        i, j = cells[k]
        hx, hy = rng.uniform(lo_h, hi_h, 2)
        h = rng.uniform(*recipe.box_height)
        cx = i + 0.5 + rng.uniform(-1, 1) * max(0.45 - hx, 0)
        cy = j + 0.5 + rng.uniform(-1, 1) * max(0.45 - hy, 0)
        boxes.append((min(cx, W - hx), min(cy, L - hy), hx, hy, h, "box"))
    for k in order[n_box:n_box + n_pole]:
        i, j = cells[k]
        cx, cy = i + 0.5 + rng.uniform(-0.3, 0.3), j + 0.5 + rng.uniform(-0.3, 0.3)
        poles.append((min(cx, W), min(cy, L), rng.uniform(*recipe.pole_height)))
    return boxes, poles


def synth_scene(recipe: SceneRecipe, tag: str | None = None) -> LabeledPointCloud:
    """Generate one labeled room; fully determined by ``recipe`` (including its seed)."""
    layout_rng = np.random.default_rng([recipe.seed, 0])
    boxes, poles = _layout(recipe, layout_rng)
    b = _Builder(recipe, np.random.default_rng([recipe.seed, 1]))
    W, L, H = recipe.extent

    def outside_boxes(pts):
        keep = np.ones(len(pts), dtype=bool)
        for cx, cy, hx, hy, _, _ in boxes:
            keep &= ~((np.abs(pts[:, 0] - cx) < hx) & (np.abs(pts[:, 1] - cy) < hy))
        return keep

    if recipe.floor:
        b.rect((0, 0, 0), (W, 0, 0), (0, L, 0), "floor", keep=outside_boxes)
    if recipe.ceiling:
        b.rect((0, 0, H), (W, 0, 0), (0, L, 0), "ceiling")
    walls = [((0, 0, 0), (0, L, 0)), ((0, 0, 0), (W, 0, 0)), ((W, 0, 0), (0, L, 0)), ((0, L, 0), (W, 0, 0))]
    for origin, u in walls[: recipe.walls]:
        b.rect(origin, u, (0, 0, H), "wall")
    for cx, cy, hx, hy, h, name in boxes:
        b.box(cx, cy, hx, hy, h, name)
    for cx, cy, h in poles:
        b.pole(cx, cy, recipe.pole_radius, h)
    return b.build(tag if tag is not None else f"scene{recipe.seed}")
