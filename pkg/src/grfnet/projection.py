"""2D -> 3D feature projection and voxel visibility classification.

Camera frame: x right, y down, z forward (metres).  A pixel at column ``u``
and row ``v`` with z-depth ``z`` back-projects to
``((u - cx) * z / fx, (v - cy) * z / fy, z)``.  Voxel grids are indexed
``(D, H, W)`` with D along z, H along y and W along x.
"""
from __future__ import annotations

from dataclasses import dataclass
from enum import IntEnum
from typing import Optional

import numpy as np

from .tensor import ShapeError, Tensor, _make


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")


@dataclass(frozen=True)
class VoxelGridSpec:
    origin: tuple  # (x, y, z) of the grid corner, camera frame
    resolution: float
    extents: tuple  # (D, H, W)

    def __post_init__(self):
        if not self.resolution > 0:
            raise ValueError("voxel resolution must be positive")
        if len(self.extents) != 3 or min(self.extents) < 1:
            raise ValueError(f"bad grid extents {self.extents}")

    @classmethod
    def centered(cls, extents: tuple, resolution: float, z0: float = 0.0) -> "VoxelGridSpec":
        """Grid whose front face is centred on the optical axis at depth ``z0``."""
        d, h, w = extents
        return cls((-w * resolution / 2.0, -h * resolution / 2.0, float(z0)), float(resolution), tuple(extents))

    def scaled(self, factor: int) -> "VoxelGridSpec":
        """Coarser grid covering the same volume with ``factor``-times larger voxels."""
        if any(n % factor for n in self.extents):
            raise ValueError(f"extents {self.extents} not divisible by {factor}")
        return VoxelGridSpec(self.origin, self.resolution * factor, tuple(n // factor for n in self.extents))

    def centers(self) -> np.ndarray:
        """Voxel centres as a ``(D, H, W, 3)`` array of camera-frame (x, y, z)."""
        d, h, w = self.extents
        ox, oy, oz = self.origin
        r = self.resolution
        zz = oz + (np.arange(d) + 0.5) * r
        yy = oy + (np.arange(h) + 0.5) * r
        xx = ox + (np.arange(w) + 0.5) * r
        Z, Y, X = np.meshgrid(zz, yy, xx, indexing="ij")
        return np.stack([X, Y, Z], axis=-1)


class Visibility(IntEnum):
    OBSERVED_EMPTY = 0
    OBSERVED_SURFACE = 1
    OCCLUDED = 2
    OUTSIDE_FOV = 3


OUTSIDE = None


def backproject(u, v, depth, cam: CameraIntrinsics) -> np.ndarray:
    u, v, depth = np.asarray(u, float), np.asarray(v, float), np.asarray(depth, float)
    return np.stack([(u - cam.cx) * depth / cam.fx, (v - cam.cy) * depth / cam.fy, depth], axis=-1)


def points_to_voxels(points: np.ndarray, grid: VoxelGridSpec) -> tuple[np.ndarray, np.ndarray]:
    """Map ``(..., 3)`` points to integer ``(..., 3)`` (d, h, w) indices and an inside mask."""
    origin = np.asarray(grid.origin, dtype=float)
    rel = np.floor((points - origin) / grid.resolution)
    idx = rel[..., ::-1]  # (x, y, z) -> (d, h, w)
    ext = np.asarray(grid.extents)
    inside = np.all((idx >= 0) & (idx < ext), axis=-1)
    return np.where(inside[..., None], idx, 0).astype(np.int64), inside


def pixel_to_voxel(u: float, v: float, depth: float, cam: CameraIntrinsics, grid: VoxelGridSpec) -> Optional[tuple]:
    """Voxel ``(d, h, w)`` hit by pixel ``(u, v)`` at z-depth ``depth``, or ``None``."""
    if not np.isfinite(depth):
        raise ValueError("depth must be finite")
    if depth <= 0:
        return OUTSIDE
    idx, inside = points_to_voxels(backproject(u, v, depth, cam), grid)
    if not inside:
        return OUTSIDE
    return tuple(int(i) for i in idx)


def pixel_voxel_map(depth: np.ndarray, cam: CameraIntrinsics, grid: VoxelGridSpec) -> np.ndarray:
    """Flat voxel index for every pixel of an ``(H, W)`` depth image (-1 = none)."""
    depth = np.asarray(depth, dtype=float)
    rows, cols = np.indices(depth.shape)
    valid = np.isfinite(depth) & (depth > 0)
    pts = backproject(cols, rows, np.where(valid, depth, 1.0), cam)
    idx, inside = points_to_voxels(pts, grid)
    flat = np.ravel_multi_index(tuple(np.moveaxis(idx, -1, 0)), grid.extents)
    return np.where(valid & inside, flat, -1)


def project_features(fmap: Tensor, depth: np.ndarray, cam: CameraIntrinsics, grid: VoxelGridSpec) -> Tensor:
    """Scatter per-pixel features into a voxel volume.

    ``fmap`` is ``(B, H, W, C)`` (or unbatched ``(H, W, C)``) and ``depth``
    ``(B, H, W)`` / ``(H, W)``.  Voxels hit by several pixels take the
    channel-wise max; untouched voxels are zero.  The gradient flows to the
    winning pixel of each (voxel, channel); ties go to the first pixel in
    row-major order.
    """
    depth = np.asarray(depth)
    unbatched = fmap.ndim == 3
    fdata = fmap.data[None] if unbatched else fmap.data
    dep = depth[None] if depth.ndim == 2 else depth
    if fdata.shape[:3] != dep.shape:
        raise ShapeError(f"feature map {fmap.shape} does not match depth {depth.shape}")
    batch, h, w, c = fdata.shape
    nvox = int(np.prod(grid.extents))
    out = np.zeros((batch, nvox, c), dtype=fdata.dtype)
    routes = []
    for b in range(batch):
        vox = pixel_voxel_map(dep[b], cam, grid).reshape(-1)
        pix = np.nonzero(vox >= 0)[0]
        if pix.size == 0:
            routes.append(None)
            continue
        order = pix[np.argsort(vox[pix], kind="stable")]
        keys = vox[order]
        starts = np.concatenate([[0], np.nonzero(np.diff(keys))[0] + 1])
        feats = fdata[b].reshape(-1, c)[order]
        maxes = np.maximum.reduceat(feats, starts, axis=0)
        group = np.cumsum(np.isin(np.arange(len(keys)), starts)) - 1
        hit = feats == maxes[group]
        # first winner per (group, channel)
        csum = np.cumsum(hit, axis=0)
        before = np.concatenate([np.zeros((1, c), dtype=csum.dtype), csum[starts[1:] - 1]], axis=0)
        winner = hit & ((csum - before[group]) == 1)
        out[b, keys[starts]] = maxes
        routes.append((order, keys, winner))
    out = out.reshape((batch,) + tuple(grid.extents) + (c,))
    if unbatched:
        out = out[0]

    def backward(g):
        gb = g[None] if unbatched else g
        gb = gb.reshape(batch, nvox, c)
        gx = np.zeros_like(fdata, dtype=g.dtype).reshape(batch, h * w, c)
        for b, route in enumerate(routes):
            if route is None:
                continue
            order, keys, winner = route
            gx[b, order] = np.where(winner, gb[b, keys], 0.0)
        gx = gx.reshape(fdata.shape)
        return (gx[0] if unbatched else gx,)

    return _make(out, (fmap,), backward)


def visibility_mask(depth: np.ndarray, cam: CameraIntrinsics, grid: VoxelGridSpec, tau: Optional[float] = None) -> np.ndarray:
    """Label every voxel of ``grid`` as a :class:`Visibility` value (uint8).

    A voxel centre behind the camera, projecting outside the image, or onto
    an invalid (zero) depth pixel is outside the field of view.  Otherwise
    its z is compared with the surface depth at its pixel using tolerance
    ``tau`` (defaults to the voxel resolution).
    """
    depth = np.asarray(depth, dtype=float)
    tau = grid.resolution if tau is None else tau
    centers = grid.centers()
    x, y, z = centers[..., 0], centers[..., 1], centers[..., 2]
    labels = np.full(grid.extents, Visibility.OUTSIDE_FOV, dtype=np.uint8)
    front = z > 0
    zs = np.where(front, z, 1.0)
    u = np.floor(cam.fx * x / zs + cam.cx + 0.5)
    v = np.floor(cam.fy * y / zs + cam.cy + 0.5)
    hgt, wid = depth.shape
    in_img = front & (u >= 0) & (u < wid) & (v >= 0) & (v < hgt)
    ui = np.where(in_img, u, 0).astype(np.int64)
    vi = np.where(in_img, v, 0).astype(np.int64)
    surf = depth[vi, ui]
    ok = in_img & np.isfinite(surf) & (surf > 0)
    labels[ok & (z < surf - tau)] = Visibility.OBSERVED_EMPTY
    labels[ok & (np.abs(z - surf) <= tau)] = Visibility.OBSERVED_SURFACE
    labels[ok & (z > surf + tau)] = Visibility.OCCLUDED
    return labels
