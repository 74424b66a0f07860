"""Analytic multi-object test scenes with per-category ground truth.

Each scene is a set of signed-distance primitives. Voxelizing the union
produces the frozen density/color fields the pipeline dissects; the same
primitives give exact per-category densities and first-hit segmentation
masks for evaluation.
"""

from __future__ import annotations

import importlib.resources
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import expit

from .fields import CategoryField, ColorField, DensityField, VoxelGrid
from .renderer import Camera, generate_rays

PRIMITIVE_KINDS = ("sphere", "box", "torus")


def _rotation_matrix(rotation_deg):
    rx, ry, rz = (math.radians(a) for a in rotation_deg)
    cx, sx = math.cos(rx), math.sin(rx)
    cy, sy = math.cos(ry), math.sin(ry)
    cz, sz = math.cos(rz), math.sin(rz)
    mx = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]])
    my = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    mz = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]])
    return mz @ my @ mx


@dataclass
class Primitive:
    """One signed-distance solid: sphere, axis box, or y-axis torus."""

    kind: str
    center: np.ndarray
    size: tuple[float, ...]  # sphere: (r,); box: (hx, hy, hz); torus: (major, minor)
    color: np.ndarray
    category: int
    rotation_deg: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        if self.kind not in PRIMITIVE_KINDS:
            raise ValueError(f"unknown primitive kind {self.kind!r}")
        self.center = np.asarray(self.center, dtype=np.float64)
        self.color = np.asarray(self.color, dtype=np.float64)
        self.size = tuple(float(s) for s in self.size)
        self.category = int(self.category)
        if any(s <= 0.0 for s in self.size):
            raise ValueError("primitive sizes must be positive")
        expected = {"sphere": 1, "box": 3, "torus": 2}[self.kind]
        if len(self.size) != expected:
            raise ValueError(f"{self.kind} takes {expected} size parameters")
        if (self.color < 0.0).any() or (self.color > 1.0).any():
            raise ValueError("primitive color must lie in [0, 1]")
        self._rot = _rotation_matrix(self.rotation_deg)

    def sdf(self, points: np.ndarray) -> np.ndarray:
        """Exact signed distance, negative inside, (N,)."""
        q = (np.atleast_2d(points) - self.center) @ self._rot  # world->local
        if self.kind == "sphere":
            return np.linalg.norm(q, axis=1) - self.size[0]
        if self.kind == "box":
            half = np.array(self.size)
            d = np.abs(q) - half
            outside = np.linalg.norm(np.maximum(d, 0.0), axis=1)
            inside = np.minimum(d.max(axis=1), 0.0)
            return outside + inside
        major, minor = self.size
        ring = np.hypot(q[:, 0], q[:, 2]) - major
        return np.hypot(ring, q[:, 1]) - minor

    @classmethod
    def from_dict(cls, d: dict) -> "Primitive":
        kind = d["kind"]
        if kind == "sphere":
            size = (d["radius"],)
        elif kind == "box":
            size = tuple(d["half_extents"])
        else:
            size = (d["major_radius"], d["minor_radius"])
        return cls(
            kind=kind,
            center=d["center"],
            size=size,
            color=d["color"],
            category=d["category"],
            rotation_deg=tuple(d.get("rotation_deg", (0.0, 0.0, 0.0))),
        )

    def to_dict(self) -> dict:
        d = {
            "kind": self.kind,
            "center": [float(v) for v in self.center],
            "color": [float(v) for v in self.color],
            "category": self.category,
        }
        if any(self.rotation_deg):
            d["rotation_deg"] = list(self.rotation_deg)
        if self.kind == "sphere":
            d["radius"] = self.size[0]
        elif self.kind == "box":
            d["half_extents"] = list(self.size)
        else:
            d["major_radius"], d["minor_radius"] = self.size
        return d


@dataclass
class SceneSpec:
    """Primitives plus the voxelization parameters of the scene fields."""

    name: str
    category_names: tuple[str, ...]
    primitives: list[Primitive]
    density_scale: float = 25.0
    falloff: float = 0.008
    resolution: tuple[int, int, int] = (64, 64, 64)
    bounds_min: tuple[float, float, float] = (-0.5, -0.5, -0.5)
    bounds_max: tuple[float, float, float] = (0.5, 0.5, 0.5)

    def __post_init__(self):
        self.category_names = tuple(self.category_names)
        self.density_scale = float(self.density_scale)
        self.falloff = float(self.falloff)
        if not self.primitives:
            raise ValueError("scene needs at least one primitive")
        if self.density_scale <= 0.0 or self.falloff <= 0.0:
            raise ValueError("density_scale and falloff must be positive")
        k = len(self.category_names)
        used = {p.category for p in self.primitives}
        if any(not 0 <= c < k for c in used):
            raise ValueError("primitive category index out of range")
        if used != set(range(k)):
            raise ValueError("every category must own at least one primitive")

    @property
    def num_categories(self) -> int:
        return len(self.category_names)

    def all_sdfs(self, points: np.ndarray) -> np.ndarray:
        """Signed distances of every primitive at every point, (P, N)."""
        pts = np.atleast_2d(points)
        return np.stack([p.sdf(pts) for p in self.primitives])

    def min_sdf(self, points: np.ndarray) -> np.ndarray:
        return self.all_sdfs(points).min(axis=0)

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        return cls(
            name=d.get("name", "scene"),
            category_names=tuple(d["categories"]),
            primitives=[Primitive.from_dict(p) for p in d["primitives"]],
            density_scale=d.get("density_scale", 25.0),
            falloff=d.get("falloff", 0.008),
            resolution=tuple(d.get("resolution", (64, 64, 64))),
            bounds_min=tuple(d.get("bounds_min", (-0.5, -0.5, -0.5))),
            bounds_max=tuple(d.get("bounds_max", (0.5, 0.5, 0.5))),
        )

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "categories": list(self.category_names),
            "density_scale": self.density_scale,
            "falloff": self.falloff,
            "resolution": list(self.resolution),
            "bounds_min": list(self.bounds_min),
            "bounds_max": list(self.bounds_max),
            "primitives": [p.to_dict() for p in self.primitives],
        }

    @classmethod
    def from_json(cls, path) -> "SceneSpec":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")


CANONICAL_SCENES = ("sphere_on_box", "torus_through_sphere", "three_stack")


def canonical_scene(name: str) -> SceneSpec:
    """Load one of the packaged regression scenes by name."""
    if name not in CANONICAL_SCENES:
        raise ValueError(f"unknown scene {name!r}; available: {CANONICAL_SCENES}")
    ref = importlib.resources.files("field_dissector").joinpath(f"data/{name}.json")
    return SceneSpec.from_dict(json.loads(ref.read_text()))


def build_scene(spec: SceneSpec):
    """Voxelize the scene.

    Returns (density, color, gt_sub_densities). The density is the
    max-union of per-primitive soft densities so interpenetrating solids
    never exceed density_scale; each node's color comes from the nearest
    primitive by signed distance. Ground-truth sub-densities split the
    union winner-take-all: a node's full density belongs to the category
    of its nearest primitive (ties go to the lower primitive index), so
    the per-category fields sum exactly to the total everywhere.
    """
    grid_proto = VoxelGrid(
        resolution=spec.resolution,
        bounds_min=np.array(spec.bounds_min),
        bounds_max=np.array(spec.bounds_max),
        values=np.zeros(tuple(spec.resolution) + (1,)),
    )
    pts = grid_proto.node_positions()
    sdfs = spec.all_sdfs(pts)  # (P, N)
    dens_all = spec.density_scale * expit(-sdfs / spec.falloff)
    total = dens_all.max(axis=0)
    nearest = sdfs.argmin(axis=0)
    colors = np.stack([p.color for p in spec.primitives])
    node_color = colors[nearest]
    categories = np.array([p.category for p in spec.primitives])
    node_cat = categories[nearest]

    nx, ny, nz = spec.resolution
    density = DensityField(
        grid=VoxelGrid(
            resolution=spec.resolution,
            bounds_min=grid_proto.bounds_min,
            bounds_max=grid_proto.bounds_max,
            values=total.reshape(nx, ny, nz, 1),
        )
    )
    color = ColorField(
        grid=VoxelGrid(
            resolution=spec.resolution,
            bounds_min=grid_proto.bounds_min,
            bounds_max=grid_proto.bounds_max,
            values=node_color.reshape(nx, ny, nz, 3),
        )
    )
    gt_subs = []
    for k in range(spec.num_categories):
        vals = np.where(node_cat == k, total, 0.0)
        gt_subs.append(
            DensityField(
                grid=VoxelGrid(
                    resolution=spec.resolution,
                    bounds_min=grid_proto.bounds_min,
                    bounds_max=grid_proto.bounds_max,
                    values=vals.reshape(nx, ny, nz, 1),
                )
            )
        )
    return density, color, gt_subs


def one_hot_category_field(spec: SceneSpec, temperature=0.05, magnitude=60.0) -> CategoryField:
    """Category field whose logits hard-assign each node to its nearest
    primitive's category. With the default temperature the softmax
    saturates to an exact one-hot simplex."""
    grid_proto = VoxelGrid(
        resolution=spec.resolution,
        bounds_min=np.array(spec.bounds_min),
        bounds_max=np.array(spec.bounds_max),
        values=np.zeros(tuple(spec.resolution) + (1,)),
    )
    pts = grid_proto.node_positions()
    sdfs = spec.all_sdfs(pts)
    categories = np.array([p.category for p in spec.primitives])
    node_cat = categories[sdfs.argmin(axis=0)]
    k = spec.num_categories
    logits = np.where(node_cat[:, None] == np.arange(k), magnitude, 0.0)
    nx, ny, nz = spec.resolution
    grid = VoxelGrid(
        resolution=spec.resolution,
        bounds_min=grid_proto.bounds_min,
        bounds_max=grid_proto.bounds_max,
        values=logits.reshape(nx, ny, nz, k),
    )
    return CategoryField(grid=grid, temperature=temperature, category_names=spec.category_names)


def uniform_category_field(spec: SceneSpec, temperature=0.05) -> CategoryField:
    """All-zero logits over the scene grid: the training start state."""
    return CategoryField.uniform(
        spec.resolution, spec.bounds_min, spec.bounds_max, spec.category_names, temperature
    )


def first_hits(spec: SceneSpec, origins, directions, t_max, tol=1e-6, max_steps=384):
    """First ray-surface intersection against the exact union SDF.

    Sphere-traces the min-SDF; converges to the analytic surface within
    tol. Returns (hit mask, hit distance, nearest primitive index).
    """
    origins = np.atleast_2d(origins)
    directions = np.atleast_2d(directions)
    n = len(origins)
    t = np.zeros(n)
    active = np.ones(n, dtype=bool)
    hit = np.zeros(n, dtype=bool)
    for _ in range(max_steps):
        if not active.any():
            break
        pos = origins[active] + t[active, None] * directions[active]
        d = spec.min_sdf(pos)
        newly_hit = d < tol
        idx = np.flatnonzero(active)
        hit[idx[newly_hit]] = True
        t[idx] += np.maximum(d, 0.0)
        still = ~newly_hit & (t[idx] <= t_max)
        active[idx] = still
    prim = np.zeros(n, dtype=np.int64)
    if hit.any():
        pos = origins[hit] + t[hit, None] * directions[hit]
        prim[hit] = spec.all_sdfs(pos).argmin(axis=0)
    return hit, t, prim


def render_gt_masks(spec: SceneSpec, camera: Camera) -> np.ndarray:
    """Exact first-hit segmentation masks, one boolean (H, W) image per
    category. A pixel joins category k's mask iff the first surface its
    center ray meets belongs to a category-k primitive; masks are disjoint
    and pixels that hit nothing stay unmasked."""
    rays = generate_rays(camera)
    hit, _, prim = first_hits(spec, rays.origins, rays.directions, t_max=camera.far)
    categories = np.array([p.category for p in spec.primitives])
    masks = np.zeros((spec.num_categories, len(rays)), dtype=bool)
    for k in range(spec.num_categories):
        masks[k] = hit & (categories[prim] == k)
    return masks.reshape(spec.num_categories, camera.height, camera.width)
