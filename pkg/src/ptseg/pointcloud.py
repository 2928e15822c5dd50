"""Labeled point clouds: storage, file formats, input features, depth projection."""
from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ArgumentError, DataError, DimensionError, FormatError

BINARY_MAGIC = b"PCSG"
BINARY_VERSION = 1
ASCII_HEADER = "pcsg-ascii"


@dataclass(frozen=True, eq=False)
class LabeledPointCloud:
    """N points with class labels and optional 8-bit colors.

    Positions are stored as float32 and colors as uint8 so both file formats
    round-trip bit for bit. ``tag`` names the area or sequence the cloud came
    from and drives fold assignment in cross-validation.
    """

    positions: np.ndarray
    labels: np.ndarray
    class_names: tuple
    colors: np.ndarray | None = None
    tag: str = ""
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        pos = np.array(self.positions, dtype=np.float32)
        if pos.ndim != 2 or pos.shape[1] != 3:
            raise DimensionError(f"positions must be N x 3, got {pos.shape}")
        if not np.isfinite(pos).all():
            raise DataError("positions contain non-finite values")
        labels = np.array(self.labels, dtype=np.int64)
        if labels.shape != (len(pos),):
            raise DimensionError(f"labels shape {labels.shape} does not match {len(pos)} points")
        names = tuple(str(n) for n in self.class_names)
        if len(names) < 1:
            raise ArgumentError("a cloud needs at least one class name")
        bad = np.flatnonzero((labels < 0) | (labels >= len(names)))
        if bad.size:
            raise DataError(f"label {labels[bad[0]]} at point {bad[0]} is outside [0, {len(names)})")
        colors = self.colors
        if colors is not None:
            colors = np.asarray(colors)
            if colors.dtype.kind == "f":
                if colors.size and (colors.min() < 0 or colors.max() > 1):
                    raise DataError("float colors must lie in [0, 1]")
                colors = np.rint(colors * 255)
            colors = np.array(colors, dtype=np.uint8)
            if colors.shape != pos.shape:
                raise DimensionError(f"colors shape {colors.shape} does not match positions {pos.shape}")
        for k, v in (("positions", pos), ("labels", labels), ("class_names", names), ("colors", colors)):
            object.__setattr__(self, k, v)
        pos.setflags(write=False)
        labels.setflags(write=False)
        if colors is not None:
            colors.setflags(write=False)

    def __len__(self):
        return len(self.positions)

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    @property
    def has_color(self) -> bool:
        return self.colors is not None

    @property
    def rgb(self) -> np.ndarray | None:
        """Colors as floats in [0, 1]."""
        return None if self.colors is None else self.colors.astype(np.float64) / 255.0

    @property
    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        if "bounds" not in self._cache:
            if len(self):
                self._cache["bounds"] = (self.positions.min(axis=0), self.positions.max(axis=0))
            else:
                self._cache["bounds"] = (np.zeros(3, np.float32), np.zeros(3, np.float32))
        return self._cache["bounds"]

    def features(self, use_color: bool) -> np.ndarray:
        key = ("features", bool(use_color))
        if key not in self._cache:
            feats = assemble_features(self, use_color)
            feats.setflags(write=False)
            self._cache[key] = feats
        return self._cache[key]

    def digest(self) -> str:
        """Content hash over positions, labels and colors."""
        h = hashlib.sha256()
        h.update(self.positions.astype("<f4").tobytes())
        h.update(self.labels.astype("<i8").tobytes())
        if self.colors is not None:
            h.update(self.colors.tobytes())
        return h.hexdigest()[:16]

    def with_labels(self, labels) -> LabeledPointCloud:
        return LabeledPointCloud(self.positions, labels, self.class_names, self.colors, self.tag)

    def equals(self, other: LabeledPointCloud) -> bool:
        same_color = (self.colors is None and other.colors is None) or (
            self.colors is not None and other.colors is not None and np.array_equal(self.colors, other.colors)
        )
        return (
            np.array_equal(self.positions.view(np.uint32), other.positions.view(np.uint32))
            and np.array_equal(self.labels, other.labels)
            and self.class_names == other.class_names
            and same_color
        )


def assemble_features(cloud: LabeledPointCloud, use_color: bool) -> np.ndarray:
    """Per-point input features ``[X, Y, Z, (R, G, B,) X', Y', Z']``.

    ``X, Y, Z`` are the raw positions (blocks localize them later); the primed
    columns are positions scaled to [0, 1] by the cloud's extent, with a
    zero-extent axis mapped to 0.5.
    """
    if use_color and cloud.colors is None:
        raise ArgumentError("use_color requested but the cloud has no colors")
    pos = cloud.positions.astype(np.float64)
    lo, hi = (b.astype(np.float64) for b in cloud.bounds)
    extent = hi - lo
    safe = np.where(extent > 0, extent, 1.0)
    norm = np.where(extent > 0, (pos - lo) / safe, 0.5)
    norm = np.clip(norm, 0.0, 1.0)
    cols = [pos]
    if use_color:
        cols.append(cloud.rgb)
    cols.append(norm)
    return np.concatenate(cols, axis=1)


# ---------------------------------------------------------------------------
# file formats

def _point_dtype(has_color: bool) -> np.dtype:
    fields = [("pos", "<f4", (3,))]
    if has_color:
        fields.append(("rgb", "u1", (3,)))
    fields.append(("label", "<u2"))
    return np.dtype(fields)


def encode_binary(cloud: LabeledPointCloud) -> bytes:
    if cloud.num_classes > 0xFFFF:
        raise DataError("too many classes for the binary format")
    parts = [BINARY_MAGIC, struct.pack("<IIBH", BINARY_VERSION, len(cloud), int(cloud.has_color), cloud.num_classes)]
    for name in cloud.class_names:
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)) + raw)
    rec = np.zeros(len(cloud), dtype=_point_dtype(cloud.has_color))
    rec["pos"] = cloud.positions
    if cloud.has_color:
        rec["rgb"] = cloud.colors
    rec["label"] = cloud.labels
    parts.append(rec.tobytes())
    return b"".join(parts)


def decode_binary(buf: bytes, tag: str = "") -> LabeledPointCloud:
    pos = 0

    def read(n, what):
        nonlocal pos
        if pos + n > len(buf):
            raise FormatError(f"truncated cloud reading {what}: expected {n} bytes, got {len(buf) - pos}", pos)
        chunk = buf[pos:pos + n]
        pos += n
        return chunk

    if read(4, "magic") != BINARY_MAGIC:
        raise FormatError("bad cloud magic", 0)
    version, n, has_color, m = struct.unpack("<IIBH", read(11, "header"))
    if version != BINARY_VERSION:
        raise FormatError(f"unsupported cloud version {version}", 4)
    if has_color not in (0, 1):
        raise FormatError(f"has_color flag must be 0 or 1, got {has_color}", 12)
    names = []
    for _ in range(m):
        (k,) = struct.unpack("<H", read(2, "class name length"))
        names.append(read(k, "class name").decode("utf-8"))
    dt = _point_dtype(bool(has_color))
    start = pos
    expected = n * dt.itemsize
    if len(buf) - start != expected:
        raise FormatError(
            f"point payload size mismatch: expected {expected} bytes for {n} points, got {len(buf) - start}", start
        )
    rec = np.frombuffer(buf, dtype=dt, offset=start, count=n)
    labels = rec["label"].astype(np.int64)
    bad = np.flatnonzero(labels >= m)
    if bad.size:
        raise DataError(f"label {labels[bad[0]]} at point {bad[0]} exceeds class count {m}")
    colors = rec["rgb"].copy() if has_color else None
    return LabeledPointCloud(rec["pos"].copy(), labels, tuple(names), colors, tag)


def _fmt(v: float) -> str:
    return format(float(v), ".9g")


def encode_ascii(cloud: LabeledPointCloud) -> str:
    lines = [f"{ASCII_HEADER} M={cloud.num_classes} color={int(cloud.has_color)}"]
    lines.append("# names: " + ",".join(cloud.class_names))
    pos = cloud.positions
    for i in range(len(cloud)):
        row = [_fmt(pos[i, 0]), _fmt(pos[i, 1]), _fmt(pos[i, 2])]
        if cloud.has_color:
            row += [str(int(c)) for c in cloud.colors[i]]
        row.append(str(int(cloud.labels[i])))
        lines.append(" ".join(row))
    return "\n".join(lines) + "\n"


def decode_ascii(text: str, tag: str = "") -> LabeledPointCloud:
    lines = text.splitlines()
    if not lines:
        raise FormatError("empty ASCII cloud", 0)
    head = lines[0].split()
    if len(head) != 3 or head[0] != ASCII_HEADER or not head[1].startswith("M=") or not head[2].startswith("color="):
        raise FormatError(f"bad ASCII header {lines[0]!r}", 0)
    try:
        m = int(head[1][2:])
        has_color = int(head[2][6:])
    except ValueError:
        raise FormatError(f"bad ASCII header {lines[0]!r}", 0) from None
    if has_color not in (0, 1) or m < 1:
        raise FormatError(f"bad ASCII header {lines[0]!r}", 0)
    names = [f"class{i}" for i in range(m)]
    width = 7 if has_color else 4
    pos, col, lab = [], [], []
    for lineno, line in enumerate(lines[1:], start=2):
        s = line.strip()
        if not s:
            continue
        if s.startswith("#"):
            if s.startswith("# names:"):
                given = [n.strip() for n in s[len("# names:"):].split(",")]
                if len(given) != m:
                    raise FormatError(f"names line lists {len(given)} classes, header says {m}", lineno)
                names = given
            continue
        parts = s.split()
        if len(parts) != width:
            raise FormatError(f"line {lineno}: expected {width} fields, got {len(parts)}", lineno)
        try:
            pos.append([float(p) for p in parts[:3]])
            if has_color:
                rgb = [int(p) for p in parts[3:6]]
                if min(rgb) < 0 or max(rgb) > 255:
                    raise FormatError(f"line {lineno}: color outside 0-255", lineno)
                col.append(rgb)
            lab.append(int(parts[-1]))
        except ValueError:
            raise FormatError(f"line {lineno}: unparsable field", lineno) from None
        if lab[-1] < 0 or lab[-1] >= m:
            raise DataError(f"line {lineno}: label {lab[-1]} is outside [0, {m})")
    positions = np.array(pos, dtype=np.float32).reshape(-1, 3)
    colors = np.array(col, dtype=np.uint8).reshape(-1, 3) if has_color else None
    return LabeledPointCloud(positions, np.array(lab, dtype=np.int64), tuple(names), colors, tag)


def save_cloud(cloud: LabeledPointCloud, path, fmt: str | None = None) -> None:
    path = Path(path)
    fmt = fmt or _guess_format(path)
    if fmt == "binary":
        path.write_bytes(encode_binary(cloud))
    elif fmt == "ascii":
        path.write_text(encode_ascii(cloud), encoding="utf-8")
    else:
        raise ArgumentError(f"unknown cloud format {fmt!r}")


def load_cloud(path, fmt: str | None = None, tag: str | None = None) -> LabeledPointCloud:
    path = Path(path)
    fmt = fmt or _guess_format(path)
    tag = path.stem if tag is None else tag
    if fmt == "binary":
        return decode_binary(path.read_bytes(), tag)
    if fmt == "ascii":
        return decode_ascii(path.read_text(encoding="utf-8"), tag)
    raise ArgumentError(f"unknown cloud format {fmt!r}")


def _guess_format(path: Path) -> str:
    if path.suffix in (".txt", ".asc", ".ascii"):
        return "ascii"
    if path.exists():
        with open(path, "rb") as fh:
            if fh.read(len(ASCII_HEADER)) == ASCII_HEADER.encode():
                return "ascii"
    return "binary"


# ---------------------------------------------------------------------------
# depth projection

@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole intrinsics in pixels. Pixel (u, v) has its center at integer coordinates."""

    focal_x: float
    focal_y: float
    center_x: float
    center_y: float
    width: int
    height: int

    def __post_init__(self):
        if self.focal_x <= 0 or self.focal_y <= 0:
            raise ArgumentError("focal lengths must be positive")
        if not (0 <= self.center_x <= self.width and 0 <= self.center_y <= self.height):
            raise ArgumentError("principal point must lie inside the image")

    @classmethod
    def default(cls, width: int, height: int, focal: float = 725.0) -> CameraIntrinsics:
        return cls(focal, focal, width / 2, height / 2, width, height)

    def project(self, points: np.ndarray) -> np.ndarray:
        """Camera-frame points to ``(u, v, depth)``."""
        p = np.asarray(points, dtype=np.float64)
        z = p[:, 2]
        return np.stack([p[:, 0] * self.focal_x / z + self.center_x, p[:, 1] * self.focal_y / z + self.center_y, z], 1)


def depth_to_cloud(depth, semantic, k: CameraIntrinsics, colors=None, max_depth: float = 80.0,
                   class_names=None) -> LabeledPointCloud:
    """Back-project every pixel with ``0 < depth < max_depth`` through ``k``."""
    depth = np.asarray(depth, dtype=np.float64)
    semantic = np.asarray(semantic)
    if depth.ndim != 2 or semantic.shape != depth.shape:
        raise DimensionError(f"depth {depth.shape} and semantic {semantic.shape} must be equal H x W arrays")
    if depth.shape != (k.height, k.width):
        raise DimensionError(f"image is {depth.shape}, intrinsics expect {(k.height, k.width)}")
    if colors is not None:
        colors = np.asarray(colors)
        if colors.shape != depth.shape + (3,):
            raise DimensionError(f"colors {colors.shape} must be H x W x 3")
    if np.any(depth < 0):
        raise DataError("negative depth values")
    v, u = np.nonzero((depth > 0) & (depth < max_depth))
    z = depth[v, u]
    pts = np.stack([(u - k.center_x) * z / k.focal_x, (v - k.center_y) * z / k.focal_y, z], axis=1)
    labels = semantic[v, u].astype(np.int64)
    if class_names is None:
        m = int(semantic.max()) + 1 if semantic.size else 1
        class_names = tuple(f"class{i}" for i in range(m))
    rgb = colors[v, u] if colors is not None else None
    return LabeledPointCloud(pts, labels, tuple(class_names), rgb)
