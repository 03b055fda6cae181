"""Pinhole cameras, differentiable bilinear image sampling, ray generation
against a body bounding box, and uniform depth sampling.

Conventions: world-to-camera extrinsics x_cam = R @ x_world + t, right-handed,
camera looks down +z; pixel centers sit at integer coordinates, so an HxW
image spans [0, W-1] x [0, H-1].
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad


@dataclass
class Camera:
    fx: float
    fy: float
    cx: float
    cy: float
    rotation: np.ndarray      # (3,3) world -> camera
    translation: np.ndarray   # (3,)
    height: int
    width: int

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError(f"focal lengths must be positive, got {self.fx}, {self.fy}")
        err = np.abs(self.rotation.T @ self.rotation - np.eye(3)).max()
        if err > 1e-9:
            raise ValueError(f"rotation not orthonormal (max |R^T R - I| = {err:.3e})")

    @property
    def center(self):
        """Camera position in world coordinates."""
        return -self.rotation.T @ self.translation

    @property
    def optical_axis(self):
        """World-frame direction the camera looks along."""
        return self.rotation.T @ np.array([0.0, 0.0, 1.0])

    def to_dict(self):
        k = [[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]]
        return {"K": k, "R": self.rotation.tolist(),
                "t": self.translation.tolist(), "H": self.height, "W": self.width}

    @classmethod
    def from_dict(cls, d):
        k = np.asarray(d["K"], dtype=np.float64)
        return cls(fx=k[0, 0], fy=k[1, 1], cx=k[0, 2], cy=k[1, 2],
                   rotation=np.asarray(d["R"]), translation=np.asarray(d["t"]),
                   height=int(d["H"]), width=int(d["W"]))


def project(cam, points):
    """Project world points (...,3) to pixel coordinates.

    Returns (uv, valid); points at or behind the camera plane are flagged
    invalid and their uv is meaningless.
    """
    pts = np.asarray(points, dtype=np.float64)
    cam_pts = pts @ cam.rotation.T + cam.translation
    z = cam_pts[..., 2]
    valid = z > 1e-6
    zsafe = np.where(valid, z, 1.0)
    u = cam_pts[..., 0] * cam.fx / zsafe + cam.cx
    v = cam_pts[..., 1] * cam.fy / zsafe + cam.cy
    return np.stack([u, v], axis=-1), valid


def unproject(cam, uv, depth):
    """World point at camera-space depth `depth` behind pixel `uv`."""
    uv = np.asarray(uv, dtype=np.float64)
    depth = np.asarray(depth, dtype=np.float64)
    x = (uv[..., 0] - cam.cx) / cam.fx * depth
    y = (uv[..., 1] - cam.cy) / cam.fy * depth
    cam_pts = np.stack([x, y, depth], axis=-1)
    return (cam_pts - cam.translation) @ cam.rotation


def projection_matrix(cam):
    """3x4 homogeneous projection matrix (oracle for `project`)."""
    k = np.array([[cam.fx, 0.0, cam.cx], [0.0, cam.fy, cam.cy], [0.0, 0.0, 1.0]])
    return k @ np.hstack([cam.rotation, cam.translation[:, None]])


def bilinear_index_weights(uv, h, w):
    """Corner indices (row-major into h*w), convex weights, and validity for
    bilinear interpolation with pixel centers at integer coordinates.

    Out-of-range queries are flagged invalid; their indices are clamped so
    they stay safe to gather (callers zero the weights)."""
    uv = np.asarray(uv, dtype=np.float64)
    u, v = uv[..., 0], uv[..., 1]
    valid = (u >= 0.0) & (u <= w - 1.0) & (v >= 0.0) & (v <= h - 1.0)
    uc = np.clip(u, 0.0, w - 1.0)
    vc = np.clip(v, 0.0, h - 1.0)
    u0 = np.minimum(np.floor(uc), w - 2).astype(np.int64) if w > 1 else np.zeros(uc.shape, dtype=np.int64)
    v0 = np.minimum(np.floor(vc), h - 2).astype(np.int64) if h > 1 else np.zeros(vc.shape, dtype=np.int64)
    fu = uc - u0
    fv = vc - v0
    base = v0 * w + u0
    idx = np.stack([base, base + 1, base + w, base + w + 1], axis=-1)
    wts = np.stack([(1 - fv) * (1 - fu), (1 - fv) * fu,
                    fv * (1 - fu), fv * fu], axis=-1)
    return idx, wts, valid


def bilinear_sample(image, uv):
    """Bilinearly sample (H,W,C) at pixel coordinates uv (...,2).

    Queries outside [0, W-1] x [0, H-1] return zeros with validity 0.
    Returns (values, valid); values is a Tensor when `image` is one (linear,
    hence differentiable, in the image).
    """
    img = image if isinstance(image, ad.Tensor) else ad.Tensor(np.asarray(image, dtype=np.float64))
    h, w, c = img.shape
    uv = np.asarray(uv, dtype=np.float64)
    idx, wts, valid = bilinear_index_weights(uv, h, w)
    wts = wts * valid[..., None]
    flat = img.reshape((h * w, c))
    vals = ad.weighted_rows(flat, idx.reshape(-1, 4), wts.reshape(-1, 4))
    vals = vals.reshape(uv.shape[:-1] + (c,))
    if not isinstance(image, ad.Tensor):
        return vals.data, valid
    return vals, valid


@dataclass
class RayBundle:
    """Per-pixel rays: unit world directions, shared origin, slab near/far."""

    origins: np.ndarray     # (K,3)
    directions: np.ndarray  # (K,3) unit
    near: np.ndarray        # (K,)
    far: np.ndarray         # (K,)
    hit: np.ndarray         # (K,) bool; False = background ray


def generate_rays(cam, pixels, aabb):
    """Rays through pixel centers, clipped to the (already dilated) box.

    `aabb` is (lo, hi); rays that miss it are flagged background with
    near/far zeroed.
    """
    pixels = np.asarray(pixels, dtype=np.float64).reshape(-1, 2)
    lo, hi = np.asarray(aabb[0], dtype=np.float64), np.asarray(aabb[1], dtype=np.float64)
    d_cam = np.stack([(pixels[:, 0] - cam.cx) / cam.fx,
                      (pixels[:, 1] - cam.cy) / cam.fy,
                      np.ones(len(pixels))], axis=-1)
    d_world = d_cam @ cam.rotation
    d_world /= np.linalg.norm(d_world, axis=1, keepdims=True)
    origin = cam.center

    d_safe = np.where(d_world == 0.0, 1e-300, d_world)
    inv = 1.0 / d_safe
    t1 = (lo[None, :] - origin[None, :]) * inv
    t2 = (hi[None, :] - origin[None, :]) * inv
    tmin = np.minimum(t1, t2).max(axis=1)
    tmax = np.maximum(t1, t2).min(axis=1)
    hit = (tmax > np.maximum(tmin, 0.0)) & (tmax > 0.0)
    near = np.where(hit, np.maximum(tmin, 0.0), 0.0)
    far = np.where(hit, tmax, 0.0)

    origins = np.broadcast_to(origin, d_world.shape).copy()
    return RayBundle(origins=origins, directions=d_world, near=near, far=far, hit=hit)


@dataclass
class RaySamples:
    positions: np.ndarray  # (K,N,3)
    deltas: np.ndarray     # (K,N)
    depths: np.ndarray     # (K,N)


def sample_uniform(rays, n, rng=None):
    """N depths per ray, evenly spaced in [near, far].

    Training (rng given): one uniform jitter per segment. Evaluation:
    deterministic segment midpoints. The trailing delta is padded with the
    segment width (far-near)/N.
    """
    if n < 2:
        raise ValueError(f"need at least 2 samples per ray, got {n}")
    near = rays.near[:, None]
    far = rays.far[:, None]
    seg = (far - near) / n
    base = np.arange(n, dtype=np.float64)[None, :]
    if rng is None:
        offs = 0.5
    else:
        offs = rng.uniform(size=(len(rays.near), n))
    depths = near + (base + offs) * seg
    positions = rays.origins[:, None, :] + depths[..., None] * rays.directions[:, None, :]
    deltas = np.empty_like(depths)
    deltas[:, :-1] = np.linalg.norm(positions[:, 1:] - positions[:, :-1], axis=-1)
    deltas[:, -1] = seg[:, 0]
    return RaySamples(positions=positions, deltas=deltas, depths=depths)
