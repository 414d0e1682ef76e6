"""Procedural RGB-D rooms with voxel ground truth, and the SSCV sample format.

Rooms are axis-aligned boxes in the camera frame (x right, y down, z
forward) furnished with boxes of the eleven non-empty classes.  Depth is
ray cast; every class gets its own flat colour so RGB carries the
semantics while depth carries the geometry.  Windows are coplanar with
their wall, so only colour separates them.
"""
from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .losses import UNKNOWN
from .projection import CameraIntrinsics, VoxelGridSpec

CEILING, FLOOR, WALL, WINDOW, CHAIR, BED, SOFA, TABLE, TVS, FURNITURE, OBJECTS = range(1, 12)

PALETTE = {
    CEILING: (230, 230, 210),
    FLOOR: (140, 90, 50),
    WALL: (200, 200, 200),
    WINDOW: (90, 160, 230),
    CHAIR: (200, 60, 40),
    BED: (240, 180, 200),
    SOFA: (60, 130, 70),
    TABLE: (120, 70, 140),
    TVS: (30, 30, 30),
    FURNITURE: (180, 150, 60),
    OBJECTS: (240, 120, 20),
}

# (width x, height y, depth z) ranges in metres
_OBJECT_SIZES = {
    CHAIR: ((0.35, 0.5), (0.45, 0.6), (0.35, 0.5)),
    BED: ((0.8, 1.1), (0.3, 0.45), (1.0, 1.4)),
    SOFA: ((0.9, 1.3), (0.4, 0.55), (0.45, 0.6)),
    TABLE: ((0.6, 0.9), (0.4, 0.55), (0.5, 0.8)),
    FURNITURE: ((0.5, 0.9), (0.7, 1.0), (0.35, 0.5)),
    OBJECTS: ((0.2, 0.35), (0.2, 0.35), (0.2, 0.35)),
    TVS: ((0.4, 0.6), (0.3, 0.4), (0.08, 0.12)),
}


@dataclass(frozen=True)
class SceneSpec:
    image_shape: tuple = (48, 64)
    focal: float = 50.0
    grid_extents: tuple = (32, 16, 32)
    voxel_size: float = 0.1
    grid_z0: float = 0.0
    room_half_width: tuple = (1.0, 1.5)
    floor_y: tuple = (0.45, 0.75)
    ceiling_y: tuple = (-0.75, -0.45)
    back_wall_z: tuple = (2.2, 3.1)
    wall_thickness: float = 0.4
    object_count: tuple = (2, 6)
    window_prob: float = 0.6
    depth_noise: float = 0.0
    color_noise: float = 6.0
    color_jitter: float = 18.0
    camera_policy: str = "axis_aligned"
    color_aliases: tuple = ()  # (class, class_whose_colour_it_borrows) pairs

    def __post_init__(self):
        for name in ("room_half_width", "floor_y", "back_wall_z"):
            lo, hi = getattr(self, name)
            if not 0 < lo <= hi:
                raise ValueError(f"degenerate room extent {name}={getattr(self, name)}")
        lo, hi = self.ceiling_y
        if not lo <= hi < 0:
            raise ValueError(f"degenerate room extent ceiling_y={self.ceiling_y}")
        if self.object_count[0] < 0 or self.object_count[1] < self.object_count[0]:
            raise ValueError("object count range must be non-negative and ordered")
        if self.camera_policy != "axis_aligned":
            raise ValueError(f"unsupported camera policy {self.camera_policy!r}")

    def intrinsics(self) -> CameraIntrinsics:
        h, w = self.image_shape
        return CameraIntrinsics(self.focal, self.focal, (w - 1) / 2.0, (h - 1) / 2.0)

    def grid(self) -> VoxelGridSpec:
        return VoxelGridSpec.centered(self.grid_extents, self.voxel_size, self.grid_z0)

    def palette(self) -> dict:
        pal = dict(PALETTE)
        for cls, donor in self.color_aliases:
            pal[cls] = PALETTE[donor]
        return pal


@dataclass
class SceneSample:
    rgb: np.ndarray  # (H, W, 3) uint8
    depth: np.ndarray  # (H, W) float32, 0 = invalid
    intrinsics: CameraIntrinsics
    labels: np.ndarray  # (D, H, W) uint8
    grid: VoxelGridSpec

    def __eq__(self, other) -> bool:
        if not isinstance(other, SceneSample):
            return NotImplemented
        return (
            np.array_equal(self.rgb, other.rgb)
            and np.array_equal(self.depth, other.depth)
            and np.array_equal(self.labels, other.labels)
            and _f32(self.intrinsics.__dict__.values()) == _f32(other.intrinsics.__dict__.values())
            and _f32([self.grid.resolution, *self.grid.origin]) == _f32([other.grid.resolution, *other.grid.origin])
            and tuple(self.grid.extents) == tuple(other.grid.extents)
        )


def _f32(vals) -> tuple:
    return tuple(np.float32(v) for v in vals)


@dataclass
class _Box:
    cls: int
    lo: np.ndarray  # (x, y, z)
    hi: np.ndarray
    color: np.ndarray


# ---------------------------------------------------------------- generation


def _place_objects(rng: np.random.Generator, spec: SceneSpec, room: dict, palette: dict) -> list[_Box]:
    boxes: list[_Box] = []
    n = int(rng.integers(spec.object_count[0], spec.object_count[1] + 1))
    floor_classes = (CHAIR, BED, SOFA, TABLE, FURNITURE, OBJECTS)
    xw = room["half_width"]
    for _ in range(n):
        cls = int(rng.choice(floor_classes))
        for _attempt in range(20):
            (sx0, sx1), (sy0, sy1), (sz0, sz1) = _OBJECT_SIZES[cls]
            size = np.array([rng.uniform(sx0, sx1), rng.uniform(sy0, sy1), rng.uniform(sz0, sz1)])
            if cls == FURNITURE and rng.random() < 0.7:
                z1 = room["back_z"]
                z0 = z1 - size[2]
            else:
                z0 = rng.uniform(0.9, max(room["back_z"] - size[2], 0.95))
                z1 = z0 + size[2]
            x0 = rng.uniform(-xw, xw - size[0])
            lo = np.array([x0, room["floor_y"] - size[1], z0])
            hi = np.array([x0 + size[0], room["floor_y"], z1])
            if hi[2] > room["back_z"] or any(_overlap(lo, hi, b.lo, b.hi) for b in boxes):
                continue
            boxes.append(_Box(cls, lo, hi, _jitter(rng, palette[cls], spec)))
            if cls in (TABLE, FURNITURE) and rng.random() < 0.5:
                top_cls = TVS if rng.random() < 0.5 else OBJECTS
                (tx0, tx1), (ty0, ty1), (tz0, tz1) = _OBJECT_SIZES[top_cls]
                tsize = np.array([rng.uniform(tx0, tx1), rng.uniform(ty0, ty1), rng.uniform(tz0, tz1)])
                tsize[0] = min(tsize[0], size[0])
                tsize[2] = min(tsize[2], size[2])
                tx = rng.uniform(lo[0], hi[0] - tsize[0])
                tz = rng.uniform(lo[2], hi[2] - tsize[2])
                tlo = np.array([tx, lo[1] - tsize[1], tz])
                thi = np.array([tx + tsize[0], lo[1], tz + tsize[2]])
                if tlo[1] > room["ceiling_y"] + 0.05:
                    boxes.append(_Box(top_cls, tlo, thi, _jitter(rng, palette[top_cls], spec)))
            break
    return boxes


def _overlap(alo, ahi, blo, bhi) -> bool:
    return bool(np.all(alo < bhi) and np.all(blo < ahi))


def _jitter(rng, base, spec: SceneSpec) -> np.ndarray:
    return np.clip(np.asarray(base, float) + rng.uniform(-spec.color_jitter, spec.color_jitter, 3), 0, 255)


def _room_box_hits(dirs: np.ndarray, room: dict) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Z-depth, class and hit point of the room's inner surfaces."""
    dx, dy = dirs[..., 0], dirs[..., 1]
    with np.errstate(divide="ignore", invalid="ignore"):
        cands = [
            (np.full(dx.shape, room["back_z"]), WALL),
            (np.where(dx > 0, room["half_width"] / dx, np.inf), WALL),
            (np.where(dx < 0, -room["half_width"] / dx, np.inf), WALL),
            (np.where(dy > 0, room["floor_y"] / dy, np.inf), FLOOR),
            (np.where(dy < 0, room["ceiling_y"] / dy, np.inf), CEILING),
        ]
    t = np.stack([c[0] for c in cands])
    which = np.argmin(t, axis=0)
    tmin = np.take_along_axis(t, which[None], 0)[0]
    cls = np.array([c[1] for c in cands])[which]
    return tmin, cls, which


def _box_hits(dirs: np.ndarray, box: _Box) -> np.ndarray:
    """Slab-method entry distance along ``dirs`` (z component 1); inf on miss."""
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        t0 = box.lo * inv
        t1 = box.hi * inv
    tn = np.nanmax(np.minimum(t0, t1), axis=-1)
    tf = np.nanmin(np.maximum(t0, t1), axis=-1)
    hit = (tn <= tf) & (tn > 0)
    return np.where(hit, tn, np.inf)


def _window_rect(rng: np.random.Generator, room: dict) -> Optional[dict]:
    w = rng.uniform(0.5, 0.9)
    h = rng.uniform(0.35, 0.5)
    wall = rng.choice(["back", "left", "right"])
    lo = room["ceiling_y"] + 0.1 + h / 2
    hi = max(lo, min(room["floor_y"] - 0.35, 0.1) - h / 2)
    yc = rng.uniform(lo, hi)
    if wall == "back":
        c = rng.uniform(-room["half_width"] + w / 2, room["half_width"] - w / 2)
    else:
        c = rng.uniform(1.0 + w / 2, max(room["back_z"] - w / 2, 1.0 + w / 2 + 1e-6))
    return {"wall": wall, "center": c, "half": w / 2, "y0": yc - h / 2, "y1": yc + h / 2}


def _in_window(win: Optional[dict], x, y, z, room: dict, side_tol: float):
    if win is None:
        return np.zeros(np.broadcast(x, y, z).shape, dtype=bool)
    iny = (y >= win["y0"]) & (y <= win["y1"])
    if win["wall"] == "back":
        on = (z >= room["back_z"] - side_tol) & (np.abs(x - win["center"]) <= win["half"])
    elif win["wall"] == "left":
        on = (x <= -room["half_width"] + side_tol) & (np.abs(z - win["center"]) <= win["half"])
    else:
        on = (x >= room["half_width"] - side_tol) & (np.abs(z - win["center"]) <= win["half"])
    return iny & on


def _label_grid(spec: SceneSpec, room: dict, boxes: list[_Box], win: Optional[dict]) -> np.ndarray:
    grid = spec.grid()
    c = grid.centers()
    x, y, z = c[..., 0], c[..., 1], c[..., 2]
    hw, fy, cy, bz, t = room["half_width"], room["floor_y"], room["ceiling_y"], room["back_z"], spec.wall_thickness
    labels = np.zeros(grid.extents, dtype=np.uint8)
    inside = (np.abs(x) < hw) & (y < fy) & (y > cy) & (z < bz)
    shell = (np.abs(x) < hw + t) & (y < fy + t) & (y > cy - t) & (z < bz + t) & ~inside
    labels[~inside & ~shell] = UNKNOWN
    # shell voxels: pick the nearest inner surface
    dists = np.stack([
        np.where(z >= bz, z - bz, np.inf),
        np.where(np.abs(x) >= hw, np.abs(x) - hw, np.inf),
        np.where(y >= fy, y - fy, np.inf),
        np.where(y <= cy, cy - y, np.inf),
    ])
    nearest = np.array([WALL, WALL, FLOOR, CEILING], dtype=np.uint8)[np.argmin(dists, axis=0)]
    labels[shell] = nearest[shell]
    is_wall = shell & (labels == WALL)
    labels[is_wall & _in_window(win, x, y, z, room, 0.0)] = WINDOW
    for box in boxes:
        ranges = [_axis_cells(box.lo[a], box.hi[a], grid.origin[a], grid.resolution, n) for a, n in zip((2, 1, 0), grid.extents)]
        sel = np.zeros(grid.extents, dtype=bool)
        sel[tuple(ranges)] = True
        labels[sel & inside] = box.cls
    return labels


def _axis_cells(lo: float, hi: float, origin: float, res: float, n: int) -> slice:
    """Cells whose centre lies in [lo, hi); a box thinner than a voxel keeps the cell holding its midpoint."""
    a = max(int(np.ceil((lo - origin) / res - 0.5)), 0)
    b = min(int(np.ceil((hi - origin) / res - 0.5)), n)
    if a >= b:
        a = int(np.floor(((lo + hi) / 2 - origin) / res))
        b = a + 1 if 0 <= a < n else a
    return slice(a, b)


def generate_scene(seed: int, spec: SceneSpec = SceneSpec()) -> SceneSample:
    """Deterministic scene for ``(seed, spec)``."""
    rng = np.random.default_rng(seed)
    palette = spec.palette()
    room = {
        "half_width": rng.uniform(*spec.room_half_width),
        "floor_y": rng.uniform(*spec.floor_y),
        "ceiling_y": rng.uniform(*spec.ceiling_y),
        "back_z": rng.uniform(*spec.back_wall_z),
    }
    room_colors = {k: _jitter(rng, palette[k], spec) for k in (CEILING, FLOOR, WALL, WINDOW)}
    win = _window_rect(rng, room) if rng.random() < spec.window_prob else None
    boxes = _place_objects(rng, spec, room, palette)

    cam = spec.intrinsics()
    h, w = spec.image_shape
    rows, cols = np.indices((h, w), dtype=float)
    dirs = np.stack([(cols - cam.cx) / cam.fx, (rows - cam.cy) / cam.fy, np.ones((h, w))], axis=-1)
    t_room, cls_room, face = _room_box_hits(dirs, room)
    depth = t_room.copy()
    cls_img = cls_room.astype(np.int64)
    hx, hy, hz = dirs[..., 0] * depth, dirs[..., 1] * depth, depth
    win_px = _in_window(win, hx, hy, hz, room, 1e-6) & (cls_img == WALL)
    cls_img[win_px] = WINDOW
    color = np.zeros((h, w, 3))
    for k in (CEILING, FLOOR, WALL, WINDOW):
        color[cls_img == k] = room_colors[k]
    shade = np.where(face >= 3, 1.0, np.where(face == 0, 0.9, 0.8))
    for box in boxes:
        tb = _box_hits(dirs, box)
        closer = tb < depth
        depth = np.where(closer, tb, depth)
        cls_img[closer] = box.cls
        color[closer] = box.color
        pt = dirs * tb[..., None]
        on_top = closer & (np.abs(pt[..., 1] - box.lo[1]) < 1e-6)
        shade = np.where(closer, np.where(on_top, 1.0, 0.85), shade)
    rgb = color * shade[..., None] + rng.normal(0.0, spec.color_noise, color.shape)
    rgb = np.clip(np.rint(rgb), 0, 255).astype(np.uint8)
    if spec.depth_noise > 0:
        depth = depth + rng.normal(0.0, spec.depth_noise, depth.shape)
    depth = np.where(np.isfinite(depth) & (depth > 0), depth, 0.0).astype(np.float32)
    labels = _label_grid(spec, room, boxes, win)
    return SceneSample(rgb, depth, cam, labels, spec.grid())


def downsample_labels(labels: np.ndarray, factor: int = 4, min_fraction: float = 0.25) -> np.ndarray:
    """Coarsen a label grid by ``factor`` per axis.

    A block takes its most frequent non-empty class when non-empty voxels
    make up at least ``min_fraction`` of its known voxels, else empty;
    all-unknown blocks stay unknown.  Ties pick the lower class id.
    """
    d, h, w = labels.shape
    f = factor
    blocks = labels.reshape(d // f, f, h // f, f, w // f, f).transpose(0, 2, 4, 1, 3, 5).reshape(d // f, h // f, w // f, -1)
    counts = np.stack([(blocks == c).sum(-1) for c in range(12)], axis=-1)
    known = counts.sum(-1)
    nonempty = known - counts[..., 0]
    best = counts[..., 1:].argmax(-1) + 1
    out = np.where(nonempty >= min_fraction * np.maximum(known, 1), best, 0).astype(np.uint8)
    out[known == 0] = UNKNOWN
    return out


# ---------------------------------------------------------------- SSCV file format

MAGIC = b"SSCV"
VERSION = 1
_HEADER = struct.Struct("<4s6I4ff3fI")  # trailing u32 reserved, keeps header at 64 bytes
HEADER_SIZE = _HEADER.size


class SampleFormatError(ValueError):
    code = "FORMAT"


class BadMagicError(SampleFormatError):
    code = "BAD_MAGIC"


class VersionMismatchError(SampleFormatError):
    code = "BAD_VERSION"


class TruncatedError(SampleFormatError):
    code = "TRUNCATED"


def encode_sample(sample: SceneSample) -> bytes:
    h, w = sample.depth.shape
    dv, hv, wv = sample.labels.shape
    cam, grid = sample.intrinsics, sample.grid
    header = _HEADER.pack(MAGIC, VERSION, h, w, dv, hv, wv, cam.fx, cam.fy, cam.cx, cam.cy, grid.resolution, *grid.origin, 0)
    return b"".join(
        [
            header,
            np.ascontiguousarray(sample.rgb, dtype=np.uint8).tobytes(),
            np.ascontiguousarray(sample.depth, dtype="<f4").tobytes(),
            np.ascontiguousarray(sample.labels, dtype=np.uint8).tobytes(),
        ]
    )


def decode_sample(buf: bytes) -> SceneSample:
    if len(buf) < 4:
        raise TruncatedError("file shorter than the magic")
    if buf[:4] != MAGIC:
        raise BadMagicError(f"bad magic {buf[:4]!r}")
    if len(buf) < 8:
        raise TruncatedError("header truncated")
    (version,) = struct.unpack_from("<I", buf, 4)
    if version != VERSION:
        raise VersionMismatchError(f"unsupported version {version}")
    if len(buf) < HEADER_SIZE:
        raise TruncatedError("header truncated")
    _, _, h, w, dv, hv, wv, fx, fy, cx, cy, res, ox, oy, oz, _ = _HEADER.unpack_from(buf)
    n_rgb, n_depth, n_lab = h * w * 3, h * w * 4, dv * hv * wv
    need = HEADER_SIZE + n_rgb + n_depth + n_lab
    if len(buf) < need:
        raise TruncatedError(f"payload truncated: {len(buf)} < {need} bytes")
    off = HEADER_SIZE
    rgb = np.frombuffer(buf, np.uint8, n_rgb, off).reshape(h, w, 3).copy()
    off += n_rgb
    depth = np.frombuffer(buf, "<f4", h * w, off).reshape(h, w).astype(np.float32)
    off += n_depth
    labels = np.frombuffer(buf, np.uint8, n_lab, off).reshape(dv, hv, wv).copy()
    cam = CameraIntrinsics(fx, fy, cx, cy)
    grid = VoxelGridSpec((ox, oy, oz), res, (dv, hv, wv))
    return SceneSample(rgb, depth, cam, labels, grid)


def save_sample(sample: SceneSample, path) -> None:
    Path(path).write_bytes(encode_sample(sample))


def load_sample(path) -> SceneSample:
    return decode_sample(Path(path).read_bytes())


# ---------------------------------------------------------------- manifests


def write_manifest(path, entries: list[tuple[str, int]]) -> None:
    Path(path).write_text("".join(f"{p} {s}\n" for p, s in entries))


def read_manifest(path) -> list[tuple[str, int]]:
    """``(sample path, seed)`` per line; relative paths resolve against the manifest's folder."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"manifest not found: {path}")
    out = []
    for line in path.read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        p, s = line.rsplit(maxsplit=1)
        full = p if os.path.isabs(p) else str(path.parent / p)
        out.append((full, int(s)))
    return out


def generate_dataset(out_dir, n: int, seed: int, spec: SceneSpec = SceneSpec(), test_fraction: float = 0.2) -> tuple[Path, Path]:
    """Write ``n`` samples plus train/test manifests split by seed range."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for i in range(n):
        s = seed + i
        name = f"scene_{s:06d}.sscv"
        save_sample(generate_scene(s, spec), out / name)
        entries.append((name, s))
    n_test = int(round(n * test_fraction))
    train, test = entries[: n - n_test], entries[n - n_test :]
    write_manifest(out / "train.txt", train)
    write_manifest(out / "test.txt", test)
    return out / "train.txt", out / "test.txt"
