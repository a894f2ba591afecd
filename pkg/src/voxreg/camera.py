"""Pinhole cameras, pixel rays, depth bins, and top-down ray lattices.

Camera frame convention: x right, y down, z forward (optical axis).  A pose
is the rigid camera-to-world map ``p_world = R @ p_cam + t``, so ``t`` is the
camera center in world coordinates.  Pixel coordinates put integer values at
pixel centers, matching the intrinsics ``(u - cx) / fx``.

Rendered and supervised depth is camera-frame z, not distance along the ray:
samples for a pixel at depth bin ``z`` sit at ``back_project(cam, u, v, z)``,
whose camera-frame z coordinate is exactly ``z``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .grid import Extent3

_ROT_TOL = 1e-9


@dataclass
class CameraModel:
    """Pinhole intrinsics plus a camera-to-world rigid pose."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    rotation: np.ndarray  # (3, 3) camera-to-world
    translation: np.ndarray  # (3,) camera center in world
    name: str = "cam"

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64)
        self.translation = np.asarray(self.translation, dtype=np.float64)
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if self.width < 1 or self.height < 1:
            raise ValueError("image size must be positive")
        if self.rotation.shape != (3, 3) or self.translation.shape != (3,):
            raise ValueError("pose must be a 3x3 rotation and a 3-vector")
        err = np.abs(self.rotation @ self.rotation.T - np.eye(3)).max()
        if err > _ROT_TOL:
            raise ValueError(f"rotation is not orthonormal (max error {err:.3e})")
        if abs(np.linalg.det(self.rotation) - 1.0) > 1e-6:
            raise ValueError("rotation must be proper (determinant +1)")


@dataclass
class Ray:
    """Origin plus unit direction in world coordinates."""

    origin: np.ndarray
    direction: np.ndarray

    def __post_init__(self):
        self.origin = np.asarray(self.origin, dtype=np.float64)
        self.direction = np.asarray(self.direction, dtype=np.float64)
        norm = np.linalg.norm(self.direction)
        if abs(norm - 1.0) > 1e-12:
            raise ValueError("ray direction must be unit length")


@dataclass
class DepthBins:
    """Uniform-in-depth sample bins along the optical axis."""

    near: float
    far: float
    count: int

    def __post_init__(self):
        if not (0.0 <= self.near < self.far):
            raise ValueError("need 0 <= near < far")
        if self.count < 2:
            raise ValueError("need at least two depth bins")

    @property
    def spacing(self) -> float:
        return (self.far - self.near) / self.count


def sample_depths(bins: DepthBins) -> np.ndarray:
    """Bin-center depths ``near + (i + 0.5) * (far - near) / count``."""
    i = np.arange(bins.count, dtype=np.float64)
    return bins.near + (i + 0.5) * bins.spacing


def strided_pixel_centers(size: int, stride: int) -> np.ndarray:
    """Pixel coordinates visited by a 1/stride render: stride-cell centers.

    With stride 1 these are the integer pixel centers themselves.
    """
    if stride < 1:
        raise ValueError("stride must be a positive integer")
    n = size // stride
    if n < 1:
        raise ValueError("stride exceeds the image size")
    return (np.arange(n) + 0.5) * stride - 0.5


def _pixel_dirs_cam(cam: CameraModel, u, v) -> np.ndarray:
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    ones = np.ones(np.broadcast(u, v).shape, dtype=np.float64)
    return np.stack(
        [(u - cam.cx) / cam.fx, (v - cam.cy) / cam.fy, ones], axis=-1
    )


def pixel_rays(cam: CameraModel, u, v):
    """World-space rays through pixels; vectorized.

    Returns ``(origin, directions)`` where origin is the (3,) camera center
    and directions are unit vectors shaped like ``u`` plus a trailing 3.
    """
    d_cam = _pixel_dirs_cam(cam, u, v)
    d_world = d_cam @ cam.rotation.T
    d_world = d_world / np.linalg.norm(d_world, axis=-1, keepdims=True)
    return cam.translation.copy(), d_world


def pixel_ray(cam: CameraModel, u: float, v: float) -> Ray:
    """Single-pixel convenience wrapper around :func:`pixel_rays`."""
    origin, d = pixel_rays(cam, float(u), float(v))
    return Ray(origin=origin, direction=d)


def back_project(cam: CameraModel, u, v, z):
    """World point of pixel (u, v) at camera-frame depth z; vectorized.

    The returned point's camera-frame z equals ``z`` exactly, which is the
    depth parameter used for rendering and supervision.
    """
    z = np.asarray(z, dtype=np.float64)
    if np.any(z <= 0.0):
        raise ValueError("back-projection depth must be positive")
    p_cam = _pixel_dirs_cam(cam, u, v) * z[..., None]
    return p_cam @ cam.rotation.T + cam.translation


def project(cam: CameraModel, pts):
    """World points to pixel coordinates and camera-frame depth.

    Returns ``(u, v, z)`` arrays; points behind the camera get z <= 0 and
    their pixel coordinates are left as computed (callers mask on z).
    """
    pts = np.asarray(pts, dtype=np.float64)
    p_cam = (pts - cam.translation) @ cam.rotation
    x, y, z = p_cam[..., 0], p_cam[..., 1], p_cam[..., 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = cam.fx * x / z + cam.cx
        v = cam.fy * y / z + cam.cy
    return u, v, z


def look_at(eye, target, up=(0.0, 0.0, 1.0)) -> tuple[np.ndarray, np.ndarray]:
    """Camera-to-world pose with the optical axis aimed from eye to target.

    ``up`` fixes the roll so that image-down roughly opposes world ``up``.
    Returns ``(rotation, translation)`` suitable for :class:`CameraModel`.
    """
    eye = np.asarray(eye, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    up = np.asarray(up, dtype=np.float64)
    fwd = target - eye
    n = np.linalg.norm(fwd)
    if n == 0:
        raise ValueError("eye and target coincide")
    fwd = fwd / n
    right = np.cross(fwd, up)
    rn = np.linalg.norm(right)
    if rn < 1e-12:
        raise ValueError("view direction is parallel to the up vector")
    right = right / rn
    down = np.cross(fwd, right)
    rot = np.stack([right, down, fwd], axis=1)
    return rot, eye.copy()


@dataclass
class BevRayLattice:
    """One orthographic top-down ray per cell of an x-y lattice.

    Rays start at ``extent.max`` z and point along (0, 0, -1).  The sample
    parameter t spans the z extent at ``nz_samples`` uniform cell centers, so
    the world height of sample j is ``extent.max[2] - t[j]``.  Ray order is
    row-major over (iy, ix), matching (ny, nx) image layout.
    """

    extent: Extent3
    nx: int
    ny: int
    nz_samples: int
    origins: np.ndarray = field(init=False)  # (ny*nx, 3)
    t: np.ndarray = field(init=False)  # (nz_samples,)
    heights: np.ndarray = field(init=False)  # (nz_samples,)

    def __post_init__(self):
        if self.nx < 1 or self.ny < 1 or self.nz_samples < 1:
            raise ValueError("lattice dims must be positive")
        size = self.extent.size()
        csx = size[0] / self.nx
        csy = size[1] / self.ny
        xs = self.extent.min[0] + (np.arange(self.nx) + 0.5) * csx
        ys = self.extent.min[1] + (np.arange(self.ny) + 0.5) * csy
        yy, xx = np.meshgrid(ys, xs, indexing="ij")
        z0 = np.full(self.nx * self.ny, self.extent.max[2])
        self.origins = np.stack([xx.ravel(), yy.ravel(), z0], axis=-1)
        dz = size[2] / self.nz_samples
        self.t = (np.arange(self.nz_samples) + 0.5) * dz
        self.heights = self.extent.max[2] - self.t

    @property
    def direction(self) -> np.ndarray:
        return np.array([0.0, 0.0, -1.0])

    def sample_points(self) -> np.ndarray:
        """(n_rays, nz_samples, 3) world sample positions."""
        pts = np.repeat(self.origins[:, None, :], self.nz_samples, axis=1)
        pts = pts.copy()
        pts[:, :, 2] = self.heights[None, :]
        return pts


def bev_rays(extent: Extent3, nx: int, ny: int, nz_samples: int) -> BevRayLattice:
    """Build the top-down ray lattice over the extent's x-y footprint."""
    return BevRayLattice(extent=extent, nx=nx, ny=ny, nz_samples=nz_samples)


def save_rig(path, cameras: list, bins: DepthBins) -> None:
    """Write a camera rig JSON file (schema version 1)."""
    doc = {
        "version": 1,
        "cameras": [
            {
                "name": c.name,
                "fx": c.fx,
                "fy": c.fy,
                "cx": c.cx,
                "cy": c.cy,
                "width": c.width,
                "height": c.height,
                "rotation": [float(x) for x in c.rotation.ravel()],
                "translation": [float(x) for x in c.translation],
            }
            for c in cameras
        ],
        "depth_bins": {"near": bins.near, "far": bins.far, "count": bins.count},
    }
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_rig(path) -> tuple[list, DepthBins]:
    """Read a camera rig JSON file; raises ValueError on schema problems."""
    with open(path) as fh:
        doc = json.load(fh)
    try:
        cams = [
            CameraModel(
                fx=float(c["fx"]),
                fy=float(c["fy"]),
                cx=float(c["cx"]),
                cy=float(c["cy"]),
                width=int(c["width"]),
                height=int(c["height"]),
                rotation=np.array(c["rotation"], dtype=np.float64).reshape(3, 3),
                translation=np.array(c["translation"], dtype=np.float64),
                name=str(c.get("name", f"cam{i}")),
            )
            for i, c in enumerate(doc["cameras"])
        ]
        b = doc["depth_bins"]
        bins = DepthBins(near=float(b["near"]), far=float(b["far"]), count=int(b["count"]))
    except KeyError as exc:
        raise ValueError(f"camera rig file is missing field {exc}") from exc
    return cams, bins
