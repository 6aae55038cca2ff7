"""Ray casting and quadrature compositing of color, correspondence and depth.

Camera: fixed pinhole at the origin looking down +z, pixel centers at integer
(row, col) coordinates.  Ray depths ``t`` are measured along the optical axis,
so a sample at depth ``t`` sits at ``t * (dir / dir_z)`` and the rendered
depth is directly comparable to z-buffer ground truth.

Frame-space points handed to the mapping network are camera coordinates
shifted by ``-scene_center`` along z, which keeps the sampled frustum inside
the box ``[-1, 1]^3``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Node
from .fields import ModelConfig, SceneModel

OPACITY_EPS = 1e-8


@dataclass(frozen=True)
class Camera:
    height: int
    width: int
    fov_deg: float = 60.0
    near: float = 0.5
    far: float = 1.5

    @classmethod
    def from_config(cls, cfg: ModelConfig) -> "Camera":
        return cls(cfg.height, cfg.width, cfg.fov_deg, cfg.near, cfg.far)

    @property
    def focal(self) -> float:
        return 0.5 * self.height / np.tan(np.radians(self.fov_deg) / 2.0)

    @property
    def principal(self) -> tuple[float, float]:
        return 0.5 * (self.height - 1), 0.5 * (self.width - 1)

    @property
    def center(self) -> float:
        return 0.5 * (self.near + self.far)

    def pixel_grid(self) -> np.ndarray:
        rr, cc = np.meshgrid(np.arange(self.height), np.arange(self.width), indexing="ij")
        return np.stack([rr.ravel(), cc.ravel()], axis=-1).astype(np.float64)


@dataclass
class Ray:
    origin: np.ndarray
    direction: np.ndarray
    near: float
    far: float
    pixel: tuple[float, float]


@dataclass
class RayBatch:
    """``B`` rays with ``N`` depth samples each."""

    pixels: np.ndarray      # (B, 2) row, col
    slopes: np.ndarray      # (B, 3) direction scaled so z = 1
    t: np.ndarray           # (B, N) strictly increasing depths
    near: float
    far: float

    def __len__(self) -> int:
        return self.pixels.shape[0]

    @property
    def directions(self) -> np.ndarray:
        return self.slopes / np.linalg.norm(self.slopes, axis=-1, keepdims=True)

    def subset(self, idx) -> "RayBatch":
        return RayBatch(self.pixels[idx], self.slopes[idx], self.t[idx], self.near, self.far)


def stratified_depths(n_rays: int, n_samples: int, near: float, far: float,
                      rng: np.random.Generator | None = None) -> np.ndarray:
    """One depth per equal bin of ``[near, far]``: bin midpoints, or jittered with ``rng``."""
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    width = (far - near) / n_samples
    lower = near + width * np.arange(n_samples)
    if rng is None:
        return np.broadcast_to(lower + 0.5 * width, (n_rays, n_samples)).copy()
    return lower + width * rng.random((n_rays, n_samples))


def cast_rays(pixels, camera: Camera, n_samples: int,
              rng: np.random.Generator | None = None) -> RayBatch:
    """Rays through ``pixels`` (``(B, 2)`` row/col).  ``rng`` selects train-mode jitter."""
    pixels = np.atleast_2d(np.asarray(pixels, dtype=np.float64))
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    if (pixels[:, 0].min() < -0.5 or pixels[:, 0].max() > camera.height - 0.5
            or pixels[:, 1].min() < -0.5 or pixels[:, 1].max() > camera.width - 0.5):
        raise ValueError("pixel outside image bounds")
    cy, cx = camera.principal
    f = camera.focal
    slopes = np.stack([(pixels[:, 1] - cx) / f, (pixels[:, 0] - cy) / f,
                       np.ones(len(pixels))], axis=-1)
    t = stratified_depths(len(pixels), n_samples, camera.near, camera.far, rng)
    return RayBatch(pixels, slopes, t, camera.near, camera.far)


def cast_ray(pixel, camera: Camera, n_samples: int,
             rng: np.random.Generator | None = None) -> tuple[Ray, np.ndarray]:
    batch = cast_rays([pixel], camera, n_samples, rng)
    ray = Ray(np.zeros(3), batch.directions[0], camera.near, camera.far,
              (float(batch.pixels[0, 0]), float(batch.pixels[0, 1])))
    return ray, batch.t[0]


def composite_weights(sigma, t, far: float):
    """Quadrature weights ``w_k = alpha_k * prod_{j<k} (1 - alpha_j)``.

    ``alpha_k = 1 - exp(-sigma_k * delta_k)`` with ``delta_k = t_{k+1} - t_k``
    and ``far - t_N`` for the last sample.  ``sigma`` may be an ndarray or a
    graph node shaped like ``t``; the return type follows ``sigma``.
    """
    t = np.asarray(t, dtype=np.float64)
    if np.any(np.diff(t, axis=-1) <= 0):
        raise ValueError("sample depths must be strictly increasing")
    if np.any(t[..., -1] > far):
        raise ValueError("sample depth beyond far plane")
    delta = np.concatenate([np.diff(t, axis=-1), far - t[..., -1:]], axis=-1)
    n = t.shape[-1]
    before = np.triu(np.ones((n, n)), k=1)  # before[j, k] = 1 for j < k
    if isinstance(sigma, Node):
        tau = sigma * delta
        trans = ad.exp(-(tau @ before))
        return trans * (1.0 - ad.exp(-tau))
    tau = np.asarray(sigma, dtype=np.float64) * delta
    return np.exp(-(tau @ before)) * -np.expm1(-tau)


def project(camera: Camera, x):
    """Pinhole projection of scene-space points ``(..., 3)`` to (row, col).

    Camera depth is clamped to ``near / 2`` so points mapped to or behind the
    camera plane give a bounded (and gradient-free in z) projection.
    """
    cy, cx = camera.principal
    f = camera.focal
    z_min = 0.5 * camera.near
    if isinstance(x, Node):
        z = x[..., 2:3] + camera.center
        low = (z.value < z_min).astype(np.float64)
        if low.any():
            z = z * (1.0 - low) + z_min * low
        return ad.concat([x[..., 1:2] / z * f + cy, x[..., 0:1] / z * f + cx], axis=-1)
    x = np.asarray(x, dtype=np.float64)
    z = np.maximum(x[..., 2:3] + camera.center, z_min)
    return np.concatenate([x[..., 1:2] / z * f + cy, x[..., 0:1] / z * f + cx], axis=-1)


@dataclass
class RenderOutput:
    """Per-ray rendered quantities as graph nodes (``valid`` is a plain mask)."""

    color: Node          # (B, 3)
    weights: Node        # (B, N)
    opacity: Node        # (B,)
    depth: Node          # (B,)
    valid: np.ndarray    # (B,) opacity above OPACITY_EPS
    samples: Node        # (B, N, 3) frame-i scene points
    canonical: Node      # (B, N, 3)
    x_j: Node | None = None       # (B, 3)
    p_j: Node | None = None       # (B, 2)
    flow: Node | None = None      # (B, 2)


def sample_points(rays: RayBatch, camera: Camera) -> np.ndarray:
    pts = rays.slopes[:, None, :] * rays.t[..., None]
    pts[..., 2] -= camera.center
    return pts


def _expectation(weights: Node, opacity: Node, values: Node, fallback: np.ndarray,
                 valid: np.ndarray) -> Node:
    """``sum_k w_k v_k / sum_k w_k``; rays with no opacity return ``fallback``."""
    guard = (~valid).astype(np.float64)
    if values.ndim == 3:
        num = (weights.reshape(*weights.shape, 1) * values).sum(axis=1)
        return (num + guard[:, None] * fallback) / (opacity.reshape(-1, 1) + guard[:, None])
    num = (weights * values).sum(axis=1)
    return (num + guard * fallback) / (opacity + guard)


def render_rays(model: SceneModel, rays: RayBatch, frames_i, frames_j=None) -> RenderOutput:
    """Render color and depth in frame ``i`` and, if given, correspondence into ``j``."""
    camera = Camera.from_config(model.cfg)
    frames_i = np.broadcast_to(np.asarray(frames_i), (len(rays),))
    x = ad.constant(sample_points(rays, camera))
    u = model.mapping.forward(x, frames_i)
    sigma, color = model.field.query(u)
    w = composite_weights(sigma, rays.t, rays.far)
    opacity = w.sum(axis=1)
    valid = opacity.value > OPACITY_EPS
    rgb = (w.reshape(*w.shape, 1) * color).sum(axis=1)
    mid = rays.t.shape[1] // 2
    depth = _expectation(w, opacity, ad.constant(rays.t), rays.t[:, mid], valid)
    out = RenderOutput(rgb, w, opacity, depth, valid, x, u)
    if frames_j is not None:
        frames_j = np.broadcast_to(np.asarray(frames_j), (len(rays),))
        xj = model.mapping.inverse(u, frames_j)
        xmid = xj.value[:, mid, :]
        out.x_j = _expectation(w, opacity, xj, xmid, valid)
        out.p_j = project(camera, out.x_j)
        out.flow = out.p_j - rays.pixels
    return out


# --- convenience wrappers returning plain arrays ------------------------

def _eval_rays(model: SceneModel, pixels, n_samples: int) -> RayBatch:
    return cast_rays(pixels, Camera.from_config(model.cfg), n_samples)


def render_color(model: SceneModel, pixels, i: int, n_samples: int = 32) -> np.ndarray:
    out = render_rays(model, _eval_rays(model, pixels, n_samples), i)
    return out.color.value


def render_correspondence(model: SceneModel, pixels, i: int, j: int, n_samples: int = 32):
    """Return ``(x_j, p_j, flow, valid)`` arrays for eval-mode rays through ``pixels``."""
    out = render_rays(model, _eval_rays(model, pixels, n_samples), i, j)
    return out.x_j.value, out.p_j.value, out.flow.value, out.valid


def render_depth(model: SceneModel, pixels, i: int, n_samples: int = 32):
    """Return ``(depth, valid)``; invalid rays carry the midpoint depth."""
    out = render_rays(model, _eval_rays(model, pixels, n_samples), i)
    return out.depth.value, out.valid


def render_depth_map(model: SceneModel, i: int, n_samples: int = 32,
                     chunk: int = 1024) -> tuple[np.ndarray, np.ndarray]:
    cam = Camera.from_config(model.cfg)
    grid = cam.pixel_grid()
    depth = np.empty(len(grid))
    valid = np.empty(len(grid), dtype=bool)
    for s in range(0, len(grid), chunk):
        d, v = render_depth(model, grid[s:s + chunk], i, n_samples)
        depth[s:s + chunk] = d
        valid[s:s + chunk] = v
    return depth.reshape(cam.height, cam.width), valid.reshape(cam.height, cam.width)
