"""Voxel-grid scene fields.

The scene is stored as dense node-centered voxel grids: a frozen density
grid, a frozen color grid, and a trainable per-category logits grid whose
tempered softmax gives a probability simplex at every point. The simplex
factors the density into per-category sub-densities that re-sum to the
original density exactly.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

VGRID_MAGIC = b"VGRD"


def _validate_points(points):
    """Coerce to (N, 3) float64; reject non-finite input."""
    pts = np.asarray(points, dtype=np.float64)
    single = pts.ndim == 1
    pts = np.atleast_2d(pts)
    if pts.ndim != 2 or pts.shape[-1] != 3:
        raise ValueError(f"expected points with 3 components, got shape {pts.shape}")
    if not np.isfinite(pts).all():
        raise ValueError("query points must be finite")
    return pts, single


def tempered_softmax(logits, temperature, axis=-1):
    """Softmax of logits / temperature, stabilized by max subtraction."""
    z = np.asarray(logits, dtype=np.float64) / float(temperature)
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


@dataclass
class VoxelGrid:
    """Dense grid of channel vectors over an axis-aligned box.

    Node (ix, iy, iz) sits at ``bounds_min + index * spacing`` with
    ``spacing = (bounds_max - bounds_min) / (resolution - 1)``. ``values``
    has shape (nx, ny, nz, channels). Queries outside the bounds read as
    empty space (the zero vector).
    """

    resolution: tuple[int, int, int]
    bounds_min: np.ndarray
    bounds_max: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        self.resolution = tuple(int(n) for n in self.resolution)
        self.bounds_min = np.asarray(self.bounds_min, dtype=np.float64)
        self.bounds_max = np.asarray(self.bounds_max, dtype=np.float64)
        self.values = np.asarray(self.values, dtype=np.float64)
        if len(self.resolution) != 3 or any(n < 2 for n in self.resolution):
            raise ValueError("resolution must have 3 axes with at least 2 nodes each")
        if self.bounds_min.shape != (3,) or self.bounds_max.shape != (3,):
            raise ValueError("bounds must be 3-vectors")
        if not (np.isfinite(self.bounds_min).all() and np.isfinite(self.bounds_max).all()):
            raise ValueError("bounds must be finite")
        if not (self.bounds_min < self.bounds_max).all():
            raise ValueError("bounds_min must be strictly below bounds_max per axis")
        nx, ny, nz = self.resolution
        if self.values.ndim != 4 or self.values.shape[:3] != (nx, ny, nz):
            raise ValueError(
                f"values shape {self.values.shape} does not match resolution {self.resolution}"
            )
        if not np.isfinite(self.values).all():
            raise ValueError("grid values must be finite")

    @property
    def channel_count(self) -> int:
        return self.values.shape[3]

    @property
    def n_nodes(self) -> int:
        nx, ny, nz = self.resolution
        return nx * ny * nz

    @property
    def spacing(self) -> np.ndarray:
        res = np.asarray(self.resolution, dtype=np.float64)
        return (self.bounds_max - self.bounds_min) / (res - 1.0)

    def node_positions(self) -> np.ndarray:
        """World positions of all nodes, flat C-order (x slowest, z fastest), (n_nodes, 3)."""
        nx, ny, nz = self.resolution
        axes = [
            np.linspace(self.bounds_min[a], self.bounds_max[a], self.resolution[a])
            for a in range(3)
        ]
        gx, gy, gz = np.meshgrid(*axes, indexing="ij")
        return np.stack([gx, gy, gz], axis=-1).reshape(-1, 3)

    def interpolation_support(self, points):
        """Trilinear support of each query point.

        Returns (corners, weights, inside): flat node indices (N, 8),
        interpolation weights (N, 8) that sum to 1 for inside points, and
        an inside mask. Outside points get zero weights so they sample as
        empty space.
        """
        pts, _ = _validate_points(points)
        nx, ny, nz = self.resolution
        lo, hi = self.bounds_min, self.bounds_max
        inside = np.logical_and(pts >= lo, pts <= hi).all(axis=1)
        res = np.array(self.resolution, dtype=np.float64)
        g = (pts - lo) / (hi - lo) * (res - 1.0)
        g = np.clip(g, 0.0, res - 1.0)
        i0 = np.minimum(g.astype(np.int64), np.array(self.resolution) - 2)
        f = g - i0
        n = len(pts)
        corners = np.empty((n, 8), dtype=np.int64)
        weights = np.empty((n, 8), dtype=np.float64)
        for c in range(8):
            ox, oy, oz = c & 1, (c >> 1) & 1, (c >> 2) & 1
            corners[:, c] = ((i0[:, 0] + ox) * ny + (i0[:, 1] + oy)) * nz + (i0[:, 2] + oz)
            wx = f[:, 0] if ox else 1.0 - f[:, 0]
            wy = f[:, 1] if oy else 1.0 - f[:, 1]
            wz = f[:, 2] if oz else 1.0 - f[:, 2]
            weights[:, c] = wx * wy * wz
        outside = ~inside
        corners[outside] = 0
        weights[outside] = 0.0
        return corners, weights, inside

    def sample(self, points) -> np.ndarray:
        """Trilinear interpolation at world points; zero vector outside bounds."""
        pts, single = _validate_points(points)
        corners, weights, _ = self.interpolation_support(pts)
        flat = self.values.reshape(-1, self.channel_count)
        out = np.einsum("ncd,nc->nd", flat[corners], weights)
        return out[0] if single else out


def sample_trilinear(grid: VoxelGrid, point) -> np.ndarray:
    """Channel vector at a world point (trilinear); zero outside the bounds."""
    return grid.sample(point)


@dataclass
class DensityField:
    """Frozen nonnegative scalar density on a single-channel grid."""

    grid: VoxelGrid

    def __post_init__(self):
        if self.grid.channel_count != 1:
            raise ValueError("density grid must have exactly 1 channel")
        if (self.grid.values < 0.0).any():
            raise ValueError("density values must be nonnegative")


def sample_density(field: DensityField, point):
    """Density at a world point, clamped at zero; zero outside the bounds."""
    out = field.grid.sample(point)
    return np.maximum(out[..., 0], 0.0)


@dataclass
class ColorField:
    """Frozen RGB color on a 3-channel grid, values in [0, 1]."""

    grid: VoxelGrid

    def __post_init__(self):
        if self.grid.channel_count != 3:
            raise ValueError("color grid must have exactly 3 channels")
        if (self.grid.values < 0.0).any() or (self.grid.values > 1.0).any():
            raise ValueError("color values must lie in [0, 1]")


def sample_color(field: ColorField, point):
    """RGB at a world point; zero (black) outside the bounds."""
    return field.grid.sample(point)


@dataclass(frozen=True)
class CategorySimplex:
    """Per-point category membership: probabilities in [0, 1] summing to 1."""

    probs: np.ndarray

    def __post_init__(self):
        probs = np.asarray(self.probs, dtype=np.float64)
        object.__setattr__(self, "probs", probs)
        if probs.ndim != 1:
            raise ValueError("simplex must be a 1-D probability vector")
        if (probs < 0.0).any() or (probs > 1.0).any():
            raise ValueError("simplex entries must lie in [0, 1]")
        if abs(probs.sum() - 1.0) > 1e-6:
            raise ValueError("simplex entries must sum to 1 within 1e-6")

    def __len__(self):
        return len(self.probs)


@dataclass
class CategoryField:
    """Trainable per-category logits grid with a softmax temperature.

    The K channels are raw logits; the tempered softmax of the trilinearly
    interpolated logits is the per-point category simplex. Lower
    temperature sharpens the distribution toward one-hot.
    """

    grid: VoxelGrid
    temperature: float = 0.05
    category_names: tuple[str, ...] = ()

    def __post_init__(self):
        if self.grid.channel_count < 2:
            raise ValueError("category field needs at least 2 categories")
        self.temperature = float(self.temperature)
        if not (np.isfinite(self.temperature) and self.temperature > 0.0):
            raise ValueError("temperature must be positive and finite")
        self.category_names = tuple(self.category_names)
        if len(self.category_names) != self.grid.channel_count:
            raise ValueError("need one category name per logit channel")

    @property
    def num_categories(self) -> int:
        return self.grid.channel_count

    @classmethod
    def uniform(cls, resolution, bounds_min, bounds_max, category_names, temperature=0.05):
        """All-zero logits: the unbiased uniform-simplex start."""
        names = tuple(category_names)
        nx, ny, nz = (int(n) for n in resolution)
        grid = VoxelGrid(
            resolution=(nx, ny, nz),
            bounds_min=bounds_min,
            bounds_max=bounds_max,
            values=np.zeros((nx, ny, nz, len(names)), dtype=np.float64),
        )
        return cls(grid=grid, temperature=temperature, category_names=names)

    def copy(self) -> "CategoryField":
        grid = VoxelGrid(
            resolution=self.grid.resolution,
            bounds_min=self.grid.bounds_min.copy(),
            bounds_max=self.grid.bounds_max.copy(),
            values=self.grid.values.copy(),
        )
        return CategoryField(
            grid=grid, temperature=self.temperature, category_names=self.category_names
        )


def category_probs_many(cat: CategoryField, points) -> np.ndarray:
    """Simplex rows for a batch of points, shape (N, K).

    Logits are interpolated first, then pushed through the tempered
    softmax; outside points interpolate to zero logits and therefore give
    the uniform simplex.
    """
    pts, single = _validate_points(points)
    logits = cat.grid.sample(pts)
    probs = tempered_softmax(logits, cat.temperature, axis=-1)
    return probs[0] if single else probs


def category_probs(cat: CategoryField, point) -> CategorySimplex:
    """Category simplex at a single world point."""
    return CategorySimplex(category_probs_many(cat, np.asarray(point, dtype=np.float64)))


def sub_density(cat: CategoryField, dens: DensityField, point, k: int):
    """Density assigned to category k at a point: prob_k * density."""
    k = int(k)
    if not 0 <= k < cat.num_categories:
        raise ValueError(f"category index {k} out of range [0, {cat.num_categories})")
    probs = category_probs_many(cat, point)
    sigma = sample_density(dens, point)
    return probs[..., k] * sigma


def recompose_density(cat: CategoryField, dens: DensityField, point):
    """Sum of all per-category sub-densities; equals the density up to fp error."""
    probs = category_probs_many(cat, point)
    sigma = sample_density(dens, point)
    return (probs * sigma[..., None]).sum(axis=-1)


# ---------------------------------------------------------------------------
# .vgrid container: 4-byte magic, u32 header length, JSON header, then
# row-major float32 little-endian node data with x varying fastest.
# ---------------------------------------------------------------------------


def save_vgrid(path, grid: VoxelGrid, *, extra_header: dict | None = None) -> None:
    header = {
        "resolution": list(grid.resolution),
        "bounds_min": [float(v) for v in grid.bounds_min],
        "bounds_max": [float(v) for v in grid.bounds_max],
        "channel_count": grid.channel_count,
        "dtype": "float32",
        "byte_order": "little",
        "layout": "x-fastest",
    }
    if extra_header:
        header.update(extra_header)
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    data = grid.values.transpose(2, 1, 0, 3).astype("<f4").tobytes()
    with open(path, "wb") as fh:
        fh.write(VGRID_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(data)


def load_vgrid(path):
    """Read a .vgrid container; returns (VoxelGrid, header dict)."""
    raw = Path(path).read_bytes()
    if raw[:4] != VGRID_MAGIC:
        raise ValueError(f"{path}: not a .vgrid container (bad magic)")
    (hlen,) = struct.unpack("<I", raw[4:8])
    header = json.loads(raw[8 : 8 + hlen].decode("utf-8"))
    nx, ny, nz = (int(v) for v in header["resolution"])
    channels = int(header["channel_count"])
    data = np.frombuffer(raw[8 + hlen :], dtype="<f4")
    expected = nx * ny * nz * channels
    if data.size != expected:
        raise ValueError(f"{path}: payload has {data.size} floats, expected {expected}")
    values = data.reshape(nz, ny, nx, channels).transpose(2, 1, 0, 3).astype(np.float64)
    grid = VoxelGrid(
        resolution=(nx, ny, nz),
        bounds_min=np.array(header["bounds_min"], dtype=np.float64),
        bounds_max=np.array(header["bounds_max"], dtype=np.float64),
        values=values,
    )
    return grid, header


def save_density(path, dens: DensityField) -> None:
    save_vgrid(path, dens.grid, extra_header={"kind": "density"})


def save_color(path, col: ColorField) -> None:
    save_vgrid(path, col.grid, extra_header={"kind": "color"})


def save_category(path, cat: CategoryField) -> None:
    save_vgrid(
        path,
        cat.grid,
        extra_header={
            "kind": "category",
            "category_names": list(cat.category_names),
            "temperature": cat.temperature,
        },
    )


def load_density(path) -> DensityField:
    grid, _ = load_vgrid(path)
    # float32 round-trip can nudge tiny values below zero
    grid.values = np.maximum(grid.values, 0.0)
    return DensityField(grid=grid)


def load_color(path) -> ColorField:
    grid, _ = load_vgrid(path)
    grid.values = np.clip(grid.values, 0.0, 1.0)
    return ColorField(grid=grid)


def load_category(path) -> CategoryField:
    grid, header = load_vgrid(path)
    return CategoryField(
        grid=grid,
        temperature=float(header["temperature"]),
        category_names=tuple(header["category_names"]),
    )
