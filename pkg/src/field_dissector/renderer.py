"""Pinhole ray-march renderer, differentiable in the category logits.

The composite pass integrates density and color; each category pass
integrates the same samples with density scaled by that category's
softmax probability. A recording render keeps the per-sample tape needed
to push image-space gradients back to the logit grid nodes exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .fields import (
    CategoryField,
    ColorField,
    DensityField,
    sample_trilinear,
    tempered_softmax,
)

CHUNK_RAYS = 4096


@dataclass
class Camera:
    """Pinhole camera defined by position, target and vertical field of view."""

    position: np.ndarray
    look_at: np.ndarray
    up: np.ndarray = (0.0, 1.0, 0.0)
    vertical_fov: float = 0.8
    resolution: tuple[int, int] = (64, 64)
    near: float = 0.4
    far: float = 2.8

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=np.float64)
        self.look_at = np.asarray(self.look_at, dtype=np.float64)
        self.up = np.asarray(self.up, dtype=np.float64)
        self.vertical_fov = float(self.vertical_fov)
        self.resolution = (int(self.resolution[0]), int(self.resolution[1]))
        self.near = float(self.near)
        self.far = float(self.far)
        if not (0.0 < self.near < self.far):
            raise ValueError("need 0 < near < far")
        if not 0.0 < self.vertical_fov < math.pi:
            raise ValueError("vertical_fov must lie in (0, pi)")
        if min(self.resolution) < 1:
            raise ValueError("resolution must be positive")
        self.basis()  # fail fast on a degenerate view/up pair

    @property
    def width(self) -> int:
        return self.resolution[0]

    @property
    def height(self) -> int:
        return self.resolution[1]

    def basis(self):
        """Orthonormal (right, up, forward) triple of the view frame."""
        forward = self.look_at - self.position
        norm = np.linalg.norm(forward)
        if norm < 1e-12:
            raise ValueError("camera position and look_at coincide")
        forward = forward / norm
        right = np.cross(forward, self.up)
        rnorm = np.linalg.norm(right)
        if rnorm < 1e-9:
            raise ValueError("up vector is parallel to the view direction")
        right = right / rnorm
        up = np.cross(right, forward)
        return right, up, forward


def orbit_cameras(
    count,
    radius=1.45,
    elevation_deg=20.0,
    azimuth0_deg=0.0,
    look_at=(0.0, 0.0, 0.0),
    vertical_fov=0.8,
    resolution=(64, 64),
    near=0.4,
    far=2.8,
):
    """Evenly spaced cameras on a circle at fixed elevation, all aimed at look_at."""
    look_at = np.asarray(look_at, dtype=np.float64)
    cams = []
    elev = math.radians(elevation_deg)
    for i in range(count):
        az = math.radians(azimuth0_deg) + 2.0 * math.pi * i / count
        pos = look_at + radius * np.array(
            [math.cos(elev) * math.cos(az), math.sin(elev), math.cos(elev) * math.sin(az)]
        )
        cams.append(
            Camera(
                position=pos,
                look_at=look_at,
                vertical_fov=vertical_fov,
                resolution=resolution,
                near=near,
                far=far,
            )
        )
    return cams


@dataclass
class Rays:
    """One ray per pixel, row-major pixel order (y * width + x)."""

    origins: np.ndarray  # (R, 3)
    directions: np.ndarray  # (R, 3), unit length
    width: int
    height: int

    def __len__(self):
        return self.origins.shape[0]


def generate_rays(camera: Camera) -> Rays:
    """Rays through all pixel centers. Directions are unit length."""
    right, up, forward = camera.basis()
    w, h = camera.width, camera.height
    tan_half = math.tan(camera.vertical_fov / 2.0)
    aspect = w / h
    xs = (2.0 * (np.arange(w) + 0.5) / w - 1.0) * tan_half * aspect
    ys = (1.0 - 2.0 * (np.arange(h) + 0.5) / h) * tan_half
    fx, fy = np.meshgrid(xs, ys)  # (h, w)
    dirs = fx[..., None] * right + fy[..., None] * up + forward
    dirs = dirs / np.linalg.norm(dirs, axis=-1, keepdims=True)
    dirs = dirs.reshape(-1, 3)
    origins = np.broadcast_to(camera.position, dirs.shape).copy()
    return Rays(origins=origins, directions=dirs, width=w, height=h)


@dataclass
class RaySamples:
    """Ordered sample depths per ray with forward segment lengths.

    delta[i] = t[i+1] - t[i] except the last entry, which runs to the far
    plane.
    """

    t: np.ndarray  # (R, N), strictly increasing per ray
    delta: np.ndarray  # (R, N), positive

    def __post_init__(self):
        if self.t.shape != self.delta.shape:
            raise ValueError("t and delta must have matching shapes")
        if (np.diff(self.t, axis=1) <= 0.0).any():
            raise ValueError("sample depths must be strictly increasing")
        if (self.delta <= 0.0).any():
            raise ValueError("segment lengths must be positive")

    @property
    def count(self) -> int:
        return self.t.shape[1]


def sample_along_rays(camera: Camera, n_samples: int, rng=None) -> RaySamples:
    """Stratified depths in [near, far]: one sample per equal bin.

    With an rng the bin offsets are jittered; without one they sit at bin
    midpoints, which renders deterministically.
    """
    n_rays = camera.width * camera.height
    h = (camera.far - camera.near) / n_samples
    if rng is None:
        u = np.full((n_rays, n_samples), 0.5)
    else:
        u = rng.random((n_rays, n_samples))
    t = camera.near + (np.arange(n_samples) + u) * h
    delta = np.empty_like(t)
    delta[:, :-1] = np.diff(t, axis=1)
    delta[:, -1] = camera.far - t[:, -1]
    return RaySamples(t=t, delta=delta)


@dataclass
class RenderConfig:
    n_samples: int = 128
    background: tuple[float, float, float] = (1.0, 1.0, 1.0)
    literal_transmittance: bool = False


@dataclass
class RenderedView:
    """Composite plus per-category images for one camera."""

    composite: np.ndarray  # (H, W, 3) in [0, 1]
    per_category_rgb: np.ndarray  # (K, H, W, 3) in [0, 1]
    per_category_opacity: np.ndarray  # (K, H, W) in [0, 1]
    background: np.ndarray  # (3,)
    camera_id: int | None = None

    def __post_init__(self):
        for arr in (self.composite, self.per_category_rgb, self.per_category_opacity):
            if not np.isfinite(arr).all():
                raise ValueError("rendered images must be finite")
            if arr.min() < -1e-9 or arr.max() > 1.0 + 1e-9:
                raise ValueError("rendered images must lie in [0, 1]")
        self.composite = np.clip(self.composite, 0.0, 1.0)
        self.per_category_rgb = np.clip(self.per_category_rgb, 0.0, 1.0)
        self.per_category_opacity = np.clip(self.per_category_opacity, 0.0, 1.0)

    @property
    def num_categories(self) -> int:
        return self.per_category_rgb.shape[0]


def _integrate(tau, color, background):
    """Emission-absorption compositing along the sample axis.

    tau is the per-segment optical depth (density * segment length).
    Returns (rgb, weights, residual transmittance); weights plus residual
    partition unity per ray.
    """
    cum = np.cumsum(tau, axis=1)
    trans = np.exp(-(cum - tau))  # transmittance reaching each sample
    alpha = 1.0 - np.exp(-tau)
    weights = trans * alpha
    residual = np.exp(-cum[:, -1])
    rgb = np.einsum("rn,rnc->rc", weights, color) + residual[:, None] * background
    return rgb, weights, residual


def _gather_chunk(origins, directions, t, dens, col, cat=None):
    """Field samples for one ray chunk: density, color and, optionally,
    category probabilities plus the logit-grid interpolation support."""
    r, n = t.shape
    pos = (origins[:, None, :] + t[..., None] * directions[:, None, :]).reshape(-1, 3)
    sigma = np.maximum(dens.grid.sample(pos)[:, 0], 0.0).reshape(r, n)
    color = col.grid.sample(pos).reshape(r, n, 3)
    if not (np.isfinite(sigma).all() and np.isfinite(color).all()):
        raise ValueError("non-finite density or color sample")
    if cat is None:
        return sigma, color, None, None, None
    corners, weights, _ = cat.grid.interpolation_support(pos)
    k = cat.grid.channel_count
    logits = np.einsum(
        "ncd,nc->nd", cat.grid.values.reshape(-1, k)[corners], weights
    )
    probs = tempered_softmax(logits, cat.temperature).reshape(r, n, k)
    return sigma, color, probs, corners.reshape(r, n, 8), weights.reshape(r, n, 8)


def render_composite(rays: Rays, samples: RaySamples, dens: DensityField, col: ColorField, background=(1.0, 1.0, 1.0)):
    """Volume-render the full density field; background fills the residual
    transmittance. Returns an (H, W, 3) image."""
    bg = np.asarray(background, dtype=np.float64)
    out = np.empty((len(rays), 3))
    for lo in range(0, len(rays), CHUNK_RAYS):
        sl = slice(lo, lo + CHUNK_RAYS)
        sigma, color, _, _, _ = _gather_chunk(
            rays.origins[sl], rays.directions[sl], samples.t[sl], dens, col
        )
        out[sl], _, _ = _integrate(sigma * samples.delta[sl], color, bg)
    return out.reshape(rays.height, rays.width, 3)


def render_category(
    rays: Rays,
    samples: RaySamples,
    dens: DensityField,
    col: ColorField,
    cat: CategoryField,
    k: int,
    background=(1.0, 1.0, 1.0),
    literal_transmittance: bool = False,
):
    """Volume-render one category's sub-field (probability-scaled density).

    Returns (rgb image, opacity image). The opacity is one minus the
    residual transmittance of the sub-density alone.
    """
    k = int(k)
    if not 0 <= k < cat.num_categories:
        raise ValueError(f"category index {k} out of range [0, {cat.num_categories})")
    bg = np.asarray(background, dtype=np.float64)
    rgb = np.empty((len(rays), 3))
    opacity = np.empty(len(rays))
    for lo in range(0, len(rays), CHUNK_RAYS):
        sl = slice(lo, lo + CHUNK_RAYS)
        sigma, color, probs, _, _ = _gather_chunk(
            rays.origins[sl], rays.directions[sl], samples.t[sl], dens, col, cat
        )
        delta = samples.delta[sl]
        pk = probs[..., k]
        if literal_transmittance:
            base = sigma * delta
            cum = np.cumsum(base, axis=1)
            trans = np.exp(-pk * (cum - base))
            alpha = 1.0 - np.exp(-pk * sigma * delta)
            weights = trans * alpha
            residual = np.exp(-pk[:, -1] * cum[:, -1])
            rgb[sl] = np.einsum("rn,rnc->rc", weights, color) + residual[:, None] * bg
            opacity[sl] = 1.0 - residual
        else:
            rgb[sl], _, residual = _integrate((pk * sigma) * delta, color, bg)
            opacity[sl] = 1.0 - residual
    return (
        rgb.reshape(rays.height, rays.width, 3),
        opacity.reshape(rays.height, rays.width),
    )


@dataclass
class RenderTape:
    """Per-sample record of a forward render, for exact reverse mode.

    Gradients are accumulated to grid nodes in ray-major (pixel-index)
    order, so repeated backward passes are bit-identical.
    """

    delta: np.ndarray  # (R, N)
    sigma: np.ndarray  # (R, N)
    probs: np.ndarray  # (R, N, K)
    color: np.ndarray  # (R, N, 3)
    corners: np.ndarray  # (R, N, 8) flat logit-grid node indices
    weights: np.ndarray  # (R, N, 8)
    background: np.ndarray  # (3,)
    temperature: float
    grid_shape: tuple[int, int, int, int]
    width: int
    height: int

    @property
    def num_categories(self) -> int:
        return self.probs.shape[-1]

    def category_logit_gradient(self, k: int, d_rgb=None, d_opacity=None) -> np.ndarray:
        """Gradient of an image-space loss w.r.t. all grid logits.

        d_rgb is dLoss/dRGB for category k's image, (H, W, 3); d_opacity
        is dLoss/dOpacity, (H, W). Either may be omitted. Returns an array
        shaped like the logit grid values, (nx, ny, nz, K).
        """
        k = int(k)
        if not 0 <= k < self.num_categories:
            raise ValueError(f"category index {k} out of range")
        r, n = self.sigma.shape
        big_k = self.num_categories
        if d_rgb is None and d_opacity is None:
            raise ValueError("need an upstream gradient for rgb and/or opacity")
        g_rgb = (
            np.zeros((r, 3))
            if d_rgb is None
            else np.asarray(d_rgb, dtype=np.float64).reshape(r, 3)
        )
        g_op = (
            np.zeros(r)
            if d_opacity is None
            else np.asarray(d_opacity, dtype=np.float64).reshape(r)
        )

        pk = self.probs[..., k]
        s = pk * self.sigma
        tau = s * self.delta
        cum = np.cumsum(tau, axis=1)
        trans = np.exp(-(cum - tau))
        e = np.exp(-tau)
        residual = np.exp(-cum[:, -1])

        # dLoss/dtau_m = q_m * trans_m * e_m - sum_{i>m} q_i w_i
        #               - (g_rgb . bg) * residual + g_op * residual
        q = np.einsum("rc,rnc->rn", g_rgb, self.color)
        qw = q * trans * (1.0 - e)
        suffix = np.flip(np.cumsum(np.flip(qw, axis=1), axis=1), axis=1) - qw
        b = g_rgb @ self.background
        d_tau = q * trans * e - suffix + (g_op - b)[:, None] * residual[:, None]
        d_s = d_tau * self.delta
        d_pk = d_s * self.sigma

        # tempered softmax jacobian: dp_k/dl_j = p_k (delta_kj - p_j) / T
        coeff = d_pk * pk / self.temperature  # (R, N)
        d_logits = -coeff[..., None] * self.probs
        d_logits[..., k] += coeff

        n_nodes = self.grid_shape[0] * self.grid_shape[1] * self.grid_shape[2]
        out = np.zeros((n_nodes, big_k))
        contrib = self.weights[..., None] * d_logits[:, :, None, :]  # (R, N, 8, K)
        flat = self.corners.reshape(-1)
        for j in range(big_k):
            out[:, j] = np.bincount(
                flat, weights=contrib[..., j].reshape(-1), minlength=n_nodes
            )
        return out.reshape(self.grid_shape)

    def logit_gradient(self, d_rgb=None, d_opacity=None) -> np.ndarray:
        """Sum of per-category gradients; d_rgb is (K, H, W, 3), d_opacity (K, H, W)."""
        total = np.zeros(self.grid_shape)
        for k in range(self.num_categories):
            dr = None if d_rgb is None else d_rgb[k]
            do = None if d_opacity is None else d_opacity[k]
            if dr is None and do is None:
                continue
            total += self.category_logit_gradient(k, d_rgb=dr, d_opacity=do)
        return total


def backward_category_render(tape: RenderTape | None, k: int, d_rgb=None, d_opacity=None):
    """Exact reverse-mode gradient of one category render w.r.t. the logit grid."""
    if tape is None:
        raise ValueError("forward pass was not recorded; render with record=True first")
    return tape.category_logit_gradient(k, d_rgb=d_rgb, d_opacity=d_opacity)


def render_view(
    camera: Camera,
    dens: DensityField,
    col: ColorField,
    cat: CategoryField,
    config: RenderConfig | None = None,
    rng=None,
    record: bool = False,
    camera_id: int | None = None,
):
    """Composite plus all K category renders from shared sample positions.

    With record=True also returns the RenderTape used for backward passes.
    Recording requires the default transmittance path.
    """
    config = config or RenderConfig()
    if record and config.literal_transmittance:
        raise ValueError("recording supports only the default transmittance path")
    bg = np.asarray(config.background, dtype=np.float64)
    rays = generate_rays(camera)
    samples = sample_along_rays(camera, config.n_samples, rng=rng)
    r_total = len(rays)
    n = config.n_samples
    big_k = cat.num_categories

    composite = np.empty((r_total, 3))
    cat_rgb = np.empty((big_k, r_total, 3))
    cat_op = np.empty((big_k, r_total))
    pieces = {"sigma": [], "probs": [], "color": [], "corners": [], "weights": []}

    for lo in range(0, r_total, CHUNK_RAYS):
        sl = slice(lo, lo + CHUNK_RAYS)
        sigma, color, probs, corners, weights = _gather_chunk(
            rays.origins[sl], rays.directions[sl], samples.t[sl], dens, col, cat
        )
        delta = samples.delta[sl]
        composite[sl], _, _ = _integrate(sigma * delta, color, bg)
        for k in range(big_k):
            pk = probs[..., k]
            if config.literal_transmittance:
                base = sigma * delta
                cum = np.cumsum(base, axis=1)
                trans = np.exp(-pk * (cum - base))
                alpha = 1.0 - np.exp(-pk * base)
                w = trans * alpha
                residual = np.exp(-pk[:, -1] * cum[:, -1])
                cat_rgb[k, sl] = np.einsum("rn,rnc->rc", w, color) + residual[:, None] * bg
            else:
                cat_rgb[k, sl], _, residual = _integrate((pk * sigma) * delta, color, bg)
            cat_op[k, sl] = 1.0 - residual
        if record:
            pieces["sigma"].append(sigma)
            pieces["probs"].append(probs)
            pieces["color"].append(color)
            pieces["corners"].append(corners)
            pieces["weights"].append(weights)

    h, w = rays.height, rays.width
    view = RenderedView(
        composite=composite.reshape(h, w, 3),
        per_category_rgb=cat_rgb.reshape(big_k, h, w, 3),
        per_category_opacity=cat_op.reshape(big_k, h, w),
        background=bg,
        camera_id=camera_id,
    )
    if not record:
        return view
    tape = RenderTape(
        delta=samples.delta,
        sigma=np.concatenate(pieces["sigma"]),
        probs=np.concatenate(pieces["probs"]),
        color=np.concatenate(pieces["color"]),
        corners=np.concatenate(pieces["corners"]),
        weights=np.concatenate(pieces["weights"]),
        background=bg,
        temperature=cat.temperature,
        grid_shape=cat.grid.values.shape,
        width=w,
        height=h,
    )
    return view, tape


def render_recomposed(
    camera: Camera,
    dens: DensityField,
    col: ColorField,
    cat: CategoryField,
    config: RenderConfig | None = None,
    rng=None,
):
    """Composite render using the summed per-category sub-densities.

    Agrees with render_composite up to floating-point accumulation; used
    to check that the decomposition preserves the original appearance.
    """
    config = config or RenderConfig()
    bg = np.asarray(config.background, dtype=np.float64)
    rays = generate_rays(camera)
    samples = sample_along_rays(camera, config.n_samples, rng=rng)
    out = np.empty((len(rays), 3))
    for lo in range(0, len(rays), CHUNK_RAYS):
        sl = slice(lo, lo + CHUNK_RAYS)
        sigma, color, probs, _, _ = _gather_chunk(
            rays.origins[sl], rays.directions[sl], samples.t[sl], dens, col, cat
        )
        sigma_sum = (probs * sigma[..., None]).sum(axis=-1)
        out[sl], _, _ = _integrate(sigma_sum * samples.delta[sl], color, bg)
    return out.reshape(rays.height, rays.width, 3)
