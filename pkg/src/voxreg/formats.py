"""On-disk formats: voxel grids, feature images, depth/height maps, class
maps, loss logs, and metric reports.

All formats are versioned and little-endian.  Grid format (version 1):

    magic   4 bytes  b"VXG1"
    u32     version (1)
    u8      dtype code (0 = float64)
    u8      ndim (4)
    u32x4   dims as [channels, nz, ny, nx]
    f64x3   extent min (x, y, z)
    f64x3   extent max (x, y, z)
    raw     float64 values, channel-major then z, y, x row-major

The feature-image format (version 1) mirrors it with magic b"VXF1", ndim 3,
dims [channels + bins, height, width], and one extra u32 holding the number
of feature channels, which separates the feature planes from the depth
distribution planes.

Depth and height maps are single-channel little-endian PFM; an optional
16-bit PNG variant quantizes to millimeters.  Class maps are 8-bit PNG
indices, with a paletted twin for viewing.  Every writer is deterministic:
identical inputs produce byte-identical files.
"""

from __future__ import annotations

import colorsys
import json
import struct

import numpy as np
from PIL import Image

from .grid import Extent3, VoxelGrid
from .heads import OccupancyGrid

_GRID_MAGIC = b"VXG1"
_FEAT_MAGIC = b"VXF1"
_GRID_HEADER = struct.Struct("<4sIBB4I6d")
_FEAT_HEADER = struct.Struct("<4sIBB3II")


def write_grid(path, grid: VoxelGrid) -> None:
    nx, ny, nz = grid.dims
    header = _GRID_HEADER.pack(
        _GRID_MAGIC,
        1,
        0,
        4,
        grid.channels,
        nz,
        ny,
        nx,
        *grid.extent.min,
        *grid.extent.max,
    )
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(grid.data, dtype="<f8").tobytes())


def read_grid(path) -> VoxelGrid:
    with open(path, "rb") as fh:
        raw = fh.read(_GRID_HEADER.size)
        if len(raw) < _GRID_HEADER.size:
            raise ValueError(f"{path}: truncated grid header")
        magic, version, dtype, ndim, c, nz, ny, nx, *bounds = _GRID_HEADER.unpack(raw)
        if magic != _GRID_MAGIC:
            raise ValueError(f"{path}: bad magic {magic!r}")
        if version != 1:
            raise ValueError(f"{path}: unsupported grid version {version}")
        if dtype != 0 or ndim != 4:
            raise ValueError(f"{path}: unsupported dtype/ndim {dtype}/{ndim}")
        count = c * nz * ny * nx
        raw = fh.read(count * 8)
        if len(raw) != count * 8:
            raise ValueError(f"{path}: truncated grid data")
        data = np.frombuffer(raw, dtype="<f8")
    extent = Extent3(min=bounds[:3], max=bounds[3:])
    return VoxelGrid(
        dims=(nx, ny, nz),
        channels=c,
        extent=extent,
        data=data.reshape(c, nz, ny, nx).astype(np.float64),
    )


def write_feature_image(path, features: np.ndarray, distribution: np.ndarray) -> None:
    """Write stacked feature and distribution planes, (C, H, W) + (B, H, W)."""
    features = np.asarray(features, dtype=np.float64)
    distribution = np.asarray(distribution, dtype=np.float64)
    if features.shape[1:] != distribution.shape[1:]:
        raise ValueError("features and distribution must share H x W")
    c, (h, w) = features.shape[0], features.shape[1:]
    planes = np.concatenate([features, distribution], axis=0)
    header = _FEAT_HEADER.pack(_FEAT_MAGIC, 1, 0, 3, planes.shape[0], h, w, c)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(planes, dtype="<f8").tobytes())


def read_feature_image(path):
    """Read a feature image file; returns (features, distribution)."""
    with open(path, "rb") as fh:
        raw = fh.read(_FEAT_HEADER.size)
        if len(raw) < _FEAT_HEADER.size:
            raise ValueError(f"{path}: truncated feature-image header")
        magic, version, dtype, ndim, total, h, w, c = _FEAT_HEADER.unpack(raw)
        if magic != _FEAT_MAGIC:
            raise ValueError(f"{path}: bad magic {magic!r}")
        if version != 1 or dtype != 0 or ndim != 3:
            raise ValueError(f"{path}: unsupported feature-image header")
        if c > total:
            raise ValueError(f"{path}: feature channel count exceeds plane count")
        raw = fh.read(total * h * w * 8)
        if len(raw) != total * h * w * 8:
            raise ValueError(f"{path}: truncated feature-image data")
        data = np.frombuffer(raw, dtype="<f8")
    planes = data.reshape(total, h, w).astype(np.float64)
    return planes[:c], planes[c:]


def write_pfm(path, image: np.ndarray) -> None:
    """Single-channel little-endian PFM (rows stored bottom to top)."""
    image = np.asarray(image, dtype=np.float32)
    if image.ndim != 2:
        raise ValueError("PFM writer takes a single-channel image")
    with open(path, "wb") as fh:
        fh.write(b"Pf\n")
        fh.write(f"{image.shape[1]} {image.shape[0]}\n".encode())
        fh.write(b"-1.0\n")
        fh.write(np.flipud(image).astype("<f4").tobytes())


def read_pfm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        kind = fh.readline().strip()
        if kind != b"Pf":
            raise ValueError(f"{path}: not a single-channel PFM file")
        w, h = (int(x) for x in fh.readline().split())
        scale = float(fh.readline())
        dtype = "<f4" if scale < 0 else ">f4"
        data = np.frombuffer(fh.read(w * h * 4), dtype=dtype)
        if data.size != w * h:
            raise ValueError(f"{path}: truncated PFM data")
    return np.flipud(data.reshape(h, w)).astype(np.float64)


def write_depth_png16(path, depth_m: np.ndarray) -> None:
    """Quantize a metric map to 16-bit millimeters."""
    mm = np.round(np.asarray(depth_m, dtype=np.float64) * 1000.0)
    mm = np.clip(mm, 0, 65535).astype(np.uint16)
    Image.fromarray(mm).save(path)


def read_depth_png16(path) -> np.ndarray:
    return np.asarray(Image.open(path), dtype=np.float64) / 1000.0


def class_palette(num_classes: int) -> np.ndarray:
    """Deterministic (K, 3) uint8 palette; class 0 is black."""
    colors = [(0, 0, 0)]
    for i in range(1, num_classes):
        h = (i * 0.61803398875) % 1.0
        r, g, b = colorsys.hsv_to_rgb(h, 0.65, 0.95)
        colors.append((int(r * 255), int(g * 255), int(b * 255)))
    return np.array(colors, dtype=np.uint8)


def write_class_png(path, classes: np.ndarray) -> None:
    """Raw class indices as an 8-bit grayscale PNG."""
    arr = np.asarray(classes)
    if arr.min() < 0 or arr.max() > 255:
        raise ValueError("class indices must fit in a byte")
    Image.fromarray(arr.astype(np.uint8), mode="L").save(path)


def read_class_png(path) -> np.ndarray:
    return np.asarray(Image.open(path), dtype=np.int32)


def write_class_color_png(path, classes: np.ndarray, num_classes: int) -> None:
    """Paletted visualization twin of the class-index map."""
    arr = np.asarray(classes).astype(np.uint8)
    img = Image.fromarray(arr, mode="P")
    img.putpalette(class_palette(max(num_classes, int(arr.max()) + 1)).tobytes())
    img.save(path)


def write_mask_png(path, mask: np.ndarray) -> None:
    arr = np.where(np.asarray(mask, dtype=bool), 255, 0).astype(np.uint8)
    Image.fromarray(arr, mode="L").save(path)


def read_mask_png(path) -> np.ndarray:
    return np.asarray(Image.open(path)) > 127


def write_occupancy(path, occ: OccupancyGrid) -> None:
    """Store labels as a one-channel grid of float64 class codes."""
    nx, ny, nz = occ.dims
    grid = VoxelGrid(
        dims=occ.dims,
        channels=1,
        extent=occ.extent,
        data=occ.classes.astype(np.float64)[None],
    )
    write_grid(path, grid)


def read_occupancy(path) -> OccupancyGrid:
    grid = read_grid(path)
    if grid.channels != 1:
        raise ValueError(f"{path}: occupancy grids have one channel")
    classes = np.round(grid.data[0]).astype(np.int32)
    return OccupancyGrid(dims=grid.dims, extent=grid.extent, classes=classes)


_LOSS_FIELDS = ("step", "dep_cam", "dep_bev", "sem_cam", "sem_bev", "total")


def write_loss_csv(path, rows: list) -> None:
    """Per-step loss log; one row per optimizer step."""
    with open(path, "w") as fh:
        fh.write(",".join(_LOSS_FIELDS) + "\n")
        for row in rows:
            fh.write(
                "%d,%.17g,%.17g,%.17g,%.17g,%.17g\n"
                % tuple(row[k] for k in _LOSS_FIELDS)
            )


def read_loss_csv(path) -> list:
    rows = []
    with open(path) as fh:
        header = fh.readline().strip().split(",")
        if tuple(header) != _LOSS_FIELDS:
            raise ValueError(f"{path}: unexpected loss log header")
        for line in fh:
            parts = line.strip().split(",")
            row = {"step": int(parts[0])}
            row.update(zip(_LOSS_FIELDS[1:], (float(x) for x in parts[1:])))
            rows.append(row)
    return rows


def _sanitize(obj):
    if isinstance(obj, dict):
        return {k: _sanitize(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_sanitize(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        f = float(obj)
        return None if not np.isfinite(f) else f
    if isinstance(obj, (np.integer, int)):
        return int(obj)
    if isinstance(obj, np.ndarray):
        return _sanitize(obj.tolist())
    return obj


def write_metrics_json(path, metrics: dict) -> None:
    """Deterministic metric report; non-finite floats become null."""
    with open(path, "w") as fh:
        json.dump(_sanitize(metrics), fh, indent=2, sort_keys=True)
        fh.write("\n")


def miou_report(per_class, mean, counts) -> dict:
    """Assemble the standard metric report payload."""
    return {
        "per_class_iou": [None if np.isnan(v) else float(v) for v in per_class],
        "miou": None if np.isnan(mean) else float(mean),
        "counts": {str(k): v for k, v in counts.items()},
    }
