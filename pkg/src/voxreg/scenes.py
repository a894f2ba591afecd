"""Analytic test scenes: signed distance evaluation, exact ray tracing,
grid baking, and supervision bundles.

Scenes are unions of labeled primitives.  Signed distance is positive inside
objects (matching the density transform), so the union is a pointwise max
over primitive distances and the scene class at a point is the class of the
primitive attaining that max, or the free class where every primitive is
negative.

Primitive distances are exact, which makes the union distance a safe lower
bound for sphere tracing from outside.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .camera import (
    CameraModel,
    DepthBins,
    bev_rays,
    look_at,
    pixel_rays,
    strided_pixel_centers,
)
from .grid import Extent3, VoxelGrid
from .heads import OccupancyGrid


@dataclass
class Sphere:
    center: np.ndarray
    radius: float
    cls: int

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=np.float64)
        if self.radius <= 0:
            raise ValueError("sphere radius must be positive")

    def sdf(self, pts: np.ndarray) -> np.ndarray:
        return self.radius - np.linalg.norm(pts - self.center, axis=-1)

    def to_json(self):
        return {
            "type": "sphere",
            "center": [float(x) for x in self.center],
            "radius": float(self.radius),
            "cls": int(self.cls),
        }


@dataclass
class AxisBox:
    min: np.ndarray
    max: np.ndarray
    cls: int

    def __post_init__(self):
        self.min = np.asarray(self.min, dtype=np.float64)
        self.max = np.asarray(self.max, dtype=np.float64)
        if not (self.max > self.min).all():
            raise ValueError("box max must exceed box min")

    def sdf(self, pts: np.ndarray) -> np.ndarray:
        # exact inside-positive distance to an axis-aligned box
        q = np.maximum(self.min - pts, pts - self.max)
        outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
        inside = np.minimum(q.max(axis=-1), 0.0)
        return -(outside + inside)

    def to_json(self):
        return {
            "type": "box",
            "min": [float(x) for x in self.min],
            "max": [float(x) for x in self.max],
            "cls": int(self.cls),
        }


@dataclass
class GroundPlane:
    """Solid half space z <= z0."""

    z: float
    cls: int

    def sdf(self, pts: np.ndarray) -> np.ndarray:
        return self.z - pts[..., 2]

    def to_json(self):
        return {"type": "ground_plane", "z": float(self.z), "cls": int(self.cls)}


@dataclass
class SceneSpec:
    """A labeled union of primitives plus the class vocabulary."""

    primitives: list
    num_classes: int
    free_class: int = 0
    class_names: list = field(default_factory=list)

    def __post_init__(self):
        if self.num_classes < 1:
            raise ValueError("need at least one class")
        if not 0 <= self.free_class < self.num_classes:
            raise ValueError("free class out of range")
        for p in self.primitives:
            if not 0 <= p.cls < self.num_classes:
                raise ValueError("primitive class out of range")
            if p.cls == self.free_class:
                raise ValueError("primitive class may not be the free class")


_PRIM_TYPES = {"sphere", "box", "ground_plane"}


def scene_to_json(scene: SceneSpec) -> dict:
    return {
        "version": 1,
        "num_classes": scene.num_classes,
        "free_class": scene.free_class,
        "class_names": list(scene.class_names),
        "primitives": [p.to_json() for p in scene.primitives],
    }


def scene_from_json(doc: dict) -> SceneSpec:
    try:
        prims = []
        for p in doc["primitives"]:
            kind = p["type"]
            if kind == "sphere":
                prims.append(Sphere(center=p["center"], radius=p["radius"], cls=p["cls"]))
            elif kind == "box":
                prims.append(AxisBox(min=p["min"], max=p["max"], cls=p["cls"]))
            elif kind == "ground_plane":
                prims.append(GroundPlane(z=p["z"], cls=p["cls"]))
            else:
                raise ValueError(f"unknown primitive type {kind!r}")
        return SceneSpec(
            primitives=prims,
            num_classes=int(doc["num_classes"]),
            free_class=int(doc.get("free_class", 0)),
            class_names=list(doc.get("class_names", [])),
        )
    except KeyError as exc:
        raise ValueError(f"scene file is missing field {exc}") from exc


def save_scene(path, scene: SceneSpec) -> None:
    with open(path, "w") as fh:
        json.dump(scene_to_json(scene), fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_scene(path) -> SceneSpec:
    with open(path) as fh:
        return scene_from_json(json.load(fh))


def _raw_scene_sdf(scene: SceneSpec, pts: np.ndarray, far: float):
    """Union distance and argmax primitive class, before the free rule."""
    pts = np.atleast_2d(np.asarray(pts, dtype=np.float64))
    n = pts.shape[0]
    if not scene.primitives:
        return np.full(n, -far), np.full(n, scene.free_class, dtype=np.int32)
    vals = np.stack([p.sdf(pts) for p in scene.primitives])
    best = np.argmax(vals, axis=0)
    cls = np.array([p.cls for p in scene.primitives], dtype=np.int32)[best]
    return vals[best, np.arange(n)], cls


def scene_sdf(scene: SceneSpec, pts, far: float = 1000.0):
    """Signed distance and class at world points.

    Returns ``(sdf, cls)``; the class is the argmax primitive's class where
    the union distance is nonnegative and the free class elsewhere.  An
    empty scene is free everywhere at distance -far.
    """
    pts = np.asarray(pts, dtype=np.float64)
    single = pts.ndim == 1
    val, cls = _raw_scene_sdf(scene, pts, far)
    cls = np.where(val < 0, scene.free_class, cls).astype(np.int32)
    if single:
        return float(val[0]), int(cls[0])
    return val, cls


def trace_depth(
    scene: SceneSpec,
    origins,
    directions,
    near: float = 0.0,
    far=100.0,
    tol: float = 1e-6,
    max_steps: int = 256,
):
    """Sphere-trace rays against the scene surface.

    ``origins`` and ``directions`` are (N, 3) with unit directions; ``far``
    may be a scalar or per-ray array of arclength caps.  Returns
    ``(t, hit, cls, points)`` where t is arclength along the ray, hit marks
    convergence within the cap, cls is the surface class at the hit (free
    class for misses), and points are the end positions.
    """
    o = np.atleast_2d(np.asarray(origins, dtype=np.float64))
    d = np.atleast_2d(np.asarray(directions, dtype=np.float64))
    n = o.shape[0]
    far = np.broadcast_to(np.asarray(far, dtype=np.float64), (n,)).copy()
    t = np.full(n, float(near))
    hit = np.zeros(n, dtype=bool)
    cls = np.full(n, scene.free_class, dtype=np.int32)
    active = t <= far
    for _ in range(max_steps):
        if not active.any():
            break
        p = o[active] + t[active, None] * d[active]
        val, prim_cls = _raw_scene_sdf(scene, p, far=np.inf)
        dist = -val  # outside-positive marching distance
        converged = dist < tol
        idx = np.flatnonzero(active)
        hit_idx = idx[converged]
        hit[hit_idx] = True
        cls[hit_idx] = prim_cls[converged]
        active[hit_idx] = False
        move_idx = idx[~converged]
        t[move_idx] += dist[~converged]
        overshot = t[move_idx] > far[move_idx]
        active[move_idx[overshot]] = False
    points = o + t[:, None] * d
    return t, hit, cls, points


def bake_sdf(
    scene: SceneSpec,
    dims,
    extent: Extent3,
    margin: float = 10.0,
    far: float = 1000.0,
):
    """Evaluate the scene on a voxel lattice.

    Returns ``(sdf_grid, semantic_grid)``: a one-channel signed distance
    grid sampled at voxel centers and a num_classes-channel one-hot logit
    grid with +margin on the scene class and -margin elsewhere.
    """
    sdf_grid = VoxelGrid.zeros(dims, 1, extent)
    pts = sdf_grid.center_points()
    val, cls = scene_sdf(scene, pts, far=far)
    nx, ny, nz = sdf_grid.dims
    sdf_grid.data[0] = val.reshape(nz, ny, nx)
    sem = np.full((scene.num_classes, nz * ny * nx), -margin)
    sem[cls, np.arange(cls.size)] = margin
    sem_grid = VoxelGrid(
        dims=sdf_grid.dims,
        channels=scene.num_classes,
        extent=extent,
        data=sem.reshape(scene.num_classes, nz, ny, nx),
    )
    return sdf_grid, sem_grid


def occupancy_labels(scene: SceneSpec, dims, extent: Extent3) -> OccupancyGrid:
    """Ground-truth class labels by the sign of the scene distance at centers."""
    grid = VoxelGrid.zeros(dims, 1, extent)
    _, cls = scene_sdf(scene, grid.center_points())
    nx, ny, nz = grid.dims
    return OccupancyGrid(dims=grid.dims, extent=extent, classes=cls.reshape(nz, ny, nx))


@dataclass
class GroundTruthBundle:
    """Everything a fit needs as targets, all derived analytically."""

    cam_depth: list  # camera-frame z maps
    cam_class: list
    cam_mask: list
    bev_height: np.ndarray
    bev_class: np.ndarray
    bev_mask: np.ndarray
    occupancy: OccupancyGrid
    points: np.ndarray  # (M, 3) lidar-like hit points
    point_classes: np.ndarray  # (M,)

    def supervision(self):
        from .losses import SupervisionMaps

        return SupervisionMaps(
            cam_depth=self.cam_depth,
            cam_class=self.cam_class,
            cam_mask=self.cam_mask,
            bev_height=self.bev_height,
            bev_class=self.bev_class,
            bev_mask=self.bev_mask,
        )


def trace_camera(
    scene: SceneSpec, cam: CameraModel, bins: DepthBins, stride: int = 1,
    extent: Extent3 | None = None,
):
    """Exact depth/class/mask maps for a camera at the strided pixel lattice.

    Depth is camera-frame z; a pixel is valid when its ray converges on a
    surface whose camera z lies within [near, far].  When ``extent`` is
    given, hits outside it are invalid too: surfaces beyond the modeled
    volume cannot be represented by any grid over that extent, so they make
    no sense as rendering supervision or as a rendering comparison target.
    """
    us = strided_pixel_centers(cam.width, stride)
    vs = strided_pixel_centers(cam.height, stride)
    uu, vv = np.meshgrid(us, vs)
    origin, dirs = pixel_rays(cam, uu.ravel(), vv.ravel())
    o = np.broadcast_to(origin, dirs.shape)
    # unit direction's camera-frame z, for converting arclength caps
    dz = dirs @ cam.rotation[:, 2]
    far_arc = np.where(dz > 1e-9, bins.far / np.maximum(dz, 1e-9), 0.0)
    t, hit, cls, pts = trace_depth(scene, o, dirs, near=0.0, far=far_arc)
    z = t * dz
    valid = hit & (z >= bins.near) & (z <= bins.far)
    if extent is not None:
        valid &= extent.contains(pts)
    h, w = len(vs), len(us)
    return (
        np.where(valid, z, 0.0).reshape(h, w),
        np.where(valid, cls, scene.free_class).astype(np.int32).reshape(h, w),
        valid.reshape(h, w),
        pts,
    )


def trace_bev(scene: SceneSpec, extent: Extent3, nx: int, ny: int):
    """Top-down first-hit height and class maps over the extent footprint.

    The first hit of a descending ray is the highest surface in the column,
    so the reported height is the max surface height within the z extent.
    """
    lattice = bev_rays(extent, nx, ny, nz_samples=1)
    dirs = np.broadcast_to(lattice.direction, lattice.origins.shape)
    span = extent.size()[2]
    t, hit, cls, _ = trace_depth(scene, lattice.origins, dirs, near=0.0, far=span)
    height = extent.max[2] - t
    valid = hit & (height >= extent.min[2])
    return (
        np.where(valid, height, 0.0).reshape(ny, nx),
        np.where(valid, cls, scene.free_class).astype(np.int32).reshape(ny, nx),
        valid.reshape(ny, nx),
    )


def make_supervision(
    scene: SceneSpec,
    cams: list,
    bins: DepthBins,
    dims,
    extent: Extent3,
    stride: int = 1,
    bev_shape: tuple | None = None,
    lidar_rate: float = 1.0,
    seed: int = 0,
) -> GroundTruthBundle:
    """Build the full analytic supervision bundle for a rig and grid.

    Camera maps are traced at the strided pixel lattice used by rendering
    and sparsified by keeping each valid pixel with probability
    ``lidar_rate`` (seeded, deterministic).  The surviving hit points double
    as the lidar-like labeled point set.
    """
    if not 0.0 < lidar_rate <= 1.0:
        raise ValueError("lidar rate must be in (0, 1]")
    rng = np.random.default_rng(seed)
    cam_depth, cam_class, cam_mask = [], [], []
    pts_all, cls_all = [], []
    for cam in cams:
        depth, cls, mask, pts = trace_camera(scene, cam, bins, stride, extent=extent)
        keep = rng.random(mask.shape) < lidar_rate
        mask = mask & keep
        cam_depth.append(depth)
        cam_class.append(cls)
        cam_mask.append(mask)
        flat = mask.ravel()
        pts_all.append(pts[flat])
        cls_all.append(cls.ravel()[flat])

    nx_b, ny_b = bev_shape if bev_shape is not None else (dims[0], dims[1])
    bev_height, bev_class, bev_mask = trace_bev(scene, extent, nx_b, ny_b)
    occ = occupancy_labels(scene, dims, extent)
    points = (
        np.concatenate(pts_all) if pts_all else np.zeros((0, 3))
    )
    point_classes = (
        np.concatenate(cls_all).astype(np.int32) if cls_all else np.zeros(0, np.int32)
    )
    return GroundTruthBundle(
        cam_depth=cam_depth,
        cam_class=cam_class,
        cam_mask=cam_mask,
        bev_height=bev_height,
        bev_class=bev_class,
        bev_mask=bev_mask,
        occupancy=occ,
        points=points,
        point_classes=point_classes,
    )


def reference_scene() -> SceneSpec:
    """The desk-scale scene used by the examples, docs, and acceptance runs.

    The box is tall and flush with the grid's upper and far bounds so the
    columns above it carry no unreachable empty space: rendering supervision
    can only label voxels its rays actually traverse, so keeping the open
    sky small makes label quality measurable rather than drowned in
    never-observed volume.
    """
    return SceneSpec(
        primitives=[
            GroundPlane(z=0.0, cls=1),
            Sphere(center=(4.0, 0.0, 1.0), radius=2.0, cls=2),
            AxisBox(min=(6.8, -6.4, 0.0), max=(10.4, -0.8, 3.2), cls=3),
        ],
        num_classes=4,
        free_class=0,
        class_names=["free", "ground", "sphere", "box"],
    )


def reference_grid() -> tuple[tuple, Extent3]:
    """0.4 m voxel lattice hugging the reference scene.

    The z range ends just above the tallest surface and reaches 2 m below
    ground, the depth to which surface supervision can still move interior
    voxels in a short fit.
    """
    extent = Extent3(min=(-2.4, -6.4, -2.0), max=(10.4, 6.4, 3.2))
    return (32, 32, 13), extent


def reference_rig() -> tuple[list, DepthBins]:
    """Four inward-looking cameras around the reference scene."""
    poses = [
        ((-1.8, 0.0, 2.8), (5.0, 0.0, 0.6)),
        ((-1.6, 5.6, 2.8), (7.0, -2.0, 0.8)),
        ((4.0, 5.8, 2.8), (7.0, -3.0, 0.5)),
        ((0.5, -5.8, 2.8), (5.0, 2.0, 0.5)),
    ]
    cams = []
    for i, (eye, target) in enumerate(poses):
        rot, trans = look_at(eye, target)
        cams.append(
            CameraModel(
                fx=52.0,
                fy=52.0,
                cx=31.5,
                cy=23.5,
                width=64,
                height=48,
                rotation=rot,
                translation=trans,
                name=f"cam{i}",
            )
        )
    return cams, DepthBins(near=2.0, far=70.4, count=86)


def heldout_camera() -> CameraModel:
    """A fifth pose excluded from fitting, for generalization checks."""
    rot, trans = look_at((-2.2, -1.0, 3.0), (8.0, -2.0, 0.5))
    return CameraModel(
        fx=52.0,
        fy=52.0,
        cx=31.5,
        cy=23.5,
        width=64,
        height=48,
        rotation=rot,
        translation=trans,
        name="heldout",
    )
