"""Structured geometric body embedding: per-vertex codes fused from
multi-view features with normal-queried attention, diffused into a sparse
voxel feature volume by sparse 3-D convolutions, and read back by trilinear
interpolation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .body import dilated_aabb
from .cameras import bilinear_index_weights, bilinear_sample, project
from .nets import AttentionFusion, Linear, PerView, collect_params


def view_features(cam, feature_map, points, image=None, downsample=4):
    """Pixel-aligned features (and optionally colors) of world points in one
    view.

    Projection happens in image pixel coordinates; the feature map is sampled
    at coordinates scaled by its downsampling factor. A point is valid when it
    is in front of the camera and both lookups fall inside their grids.
    """
    uv, front = project(cam, points)
    feats, f_ok = bilinear_sample(feature_map, uv / downsample)
    valid = front & f_ok
    if image is None:
        return feats, valid
    rgb, c_ok = bilinear_sample(image, uv)
    return feats, rgb, valid & c_ok


class ViewSet:
    """The m input views of one forward pass: cameras, images, encoded
    feature maps, plus batched pixel-aligned sampling for query points.

    All views are sampled through one gather over the stacked feature maps,
    which keeps per-point results independent of how points are batched.
    """

    def __init__(self, cams, fmaps, images=None, downsample=4):
        if len(cams) == 0:
            raise ValueError("need at least one input view")
        self.cams = cams
        self.fmaps = fmaps
        self.images = images
        self.downsample = downsample
        self.m = len(cams)
        hf, wf, c = fmaps[0].shape
        self.feat_h, self.feat_w, self.channels = hf, wf, c
        self.fstack = ad.concat([f.reshape((hf * wf, c)) for f in fmaps], axis=0)
        self.axes = np.stack([cam.optical_axis for cam in cams])
        if images is not None:
            self.img_h, self.img_w = np.asarray(images[0]).shape[:2]
            self.imstack = np.concatenate(
                [np.asarray(im, dtype=np.float64).reshape(-1, 3) for im in images], axis=0)
        else:
            self.imstack = None

    def sample(self, points, want_colors=False):
        """Pixel-aligned features per view: (feats (P,m,C) Tensor,
        colors (P,m,3) array or None, valid (P,m)).

        A view is valid for a point when the point is in front of its camera
        and inside both sampling grids; invalid views sample to zero.
        """
        points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        p = len(points)
        m = self.m
        fhw = self.feat_h * self.feat_w
        fidx = np.empty((p, m, 4), dtype=np.int64)
        fwts = np.empty((p, m, 4))
        valid = np.empty((p, m), dtype=bool)
        if want_colors:
            if self.imstack is None:
                raise ValueError("this view set has no images to sample colors from")
            cidx = np.empty((p, m, 4), dtype=np.int64)
            cwts = np.empty((p, m, 4))
        for k, cam in enumerate(self.cams):
            uv, front = project(cam, points)
            fi, fw, fok = bilinear_index_weights(uv / self.downsample,
                                                 self.feat_h, self.feat_w)
            ok = front & fok
            if want_colors:
                ci, cw, cok = bilinear_index_weights(uv, self.img_h, self.img_w)
                ok = ok & cok
                cidx[:, k] = ci + k * self.img_h * self.img_w
                cwts[:, k] = cw
            valid[:, k] = ok
            fidx[:, k] = fi + k * fhw
            fwts[:, k] = fw * ok[:, None]
        feats = ad.weighted_rows(self.fstack, fidx.reshape(p * m, 4),
                                 fwts.reshape(p * m, 4)).reshape((p, m, self.channels))
        colors = None
        if want_colors:
            cwts *= valid[..., None]
            colors = ad.weighted_rows(ad.Tensor(self.imstack),
                                      cidx.reshape(p * m, 4),
                                      cwts.reshape(p * m, 4)).data.reshape(p, m, 3)
        return feats, colors, valid

    def view_axes(self, p):
        """Optical axes broadcast per point: (P,m,3) constant."""
        return np.broadcast_to(self.axes[None], (p, self.m, 3))


class VertexCodeFusion:
    """Per-vertex latent codes from multi-view features.

    The attention query is the vertex normal, keys are per-view features
    concatenated with the view's optical axis, values are the features alone;
    so views facing a vertex can earn higher weight.
    """

    def __init__(self, rng, feat_channels=32, dim=32, out_dim=32):
        self.feat_channels = feat_channels
        self.fusion = AttentionFusion("vertex_fusion", q_dim=3,
                                      k_dim=feat_channels + 3,
                                      v_dim=feat_channels, rng=rng,
                                      dim=dim, out_dim=out_dim)

    def __call__(self, mesh, feature_maps, cams, downsample=4, return_weights=False,
                 views=None):
        if views is None:
            views = ViewSet(cams, feature_maps, downsample=downsample)
        feats, _, valid = views.sample(mesh.vertices)
        keys = [feats, PerView(views.axes)]
        codes, weights = self.fusion(ad.Tensor(mesh.normals), keys, feats, valid)
        if return_weights:
            return codes, weights.data, valid
        return codes

    def params(self):
        return self.fusion.params()


_BALL_RADIUS = 3.0


def _neighborhood_offsets(radius):
    r = int(np.ceil(radius))
    grid = np.arange(-r, r + 1)
    offs = np.stack(np.meshgrid(grid, grid, grid, indexing="ij"), axis=-1).reshape(-1, 3)
    return offs[np.linalg.norm(offs, axis=1) <= radius]


@dataclass
class VolumeGeometry:
    """Active-voxel bookkeeping for one posed body: which voxels exist, how
    they map to rows, and the precomputed gather maps the diffusion and
    trilinear stages reuse every step."""

    resolution: int
    voxel_size: float
    origin: np.ndarray
    active_coords: np.ndarray      # (n,3) int voxel coords
    grid_rows: np.ndarray          # (V,V,V) int32: active row or n (sentinel)
    vertex_rows: np.ndarray        # (N,) row of each body vertex's voxel
    nbr_fine: ad.RowGather         # 27-tap gather for 3^3 convs
    coarse_coords: np.ndarray
    nbr_down: ad.RowGather         # 8-tap gather, fine -> coarse
    parent_rows: ad.RowGather      # per fine voxel, its coarse row

    @property
    def num_active(self):
        return len(self.active_coords)


def build_volume_geometry(mesh, resolution=64, margin=0.1):
    """Active set = voxels whose center lies within 3 voxel-widths of a body
    vertex and inside the dilated AABB (so the volume invariant holds at any
    resolution)."""
    lo, hi = dilated_aabb(mesh, margin)
    extent = float((hi - lo).max())
    voxel = extent / resolution
    center = (lo + hi) / 2.0
    origin = center - 0.5 * resolution * voxel

    verts = mesh.vertices
    vcoord = np.floor((verts - origin) / voxel).astype(np.int64)
    offs = _neighborhood_offsets(_BALL_RADIUS)
    cand = (vcoord[:, None, :] + offs[None, :, :]).reshape(-1, 3)
    src = np.repeat(np.arange(len(verts)), len(offs))
    inb = np.all((cand >= 0) & (cand < resolution), axis=1)
    cand, src = cand[inb], src[inb]
    centers = origin + (cand + 0.5) * voxel
    near = np.linalg.norm(centers - verts[src], axis=1) <= _BALL_RADIUS * voxel
    inside = np.all((centers >= lo) & (centers <= hi), axis=1)
    cand = cand[near & inside]
    lin = (cand[:, 0] * resolution + cand[:, 1]) * resolution + cand[:, 2]
    lin = np.unique(lin)
    active = np.stack([lin // (resolution * resolution),
                       (lin // resolution) % resolution,
                       lin % resolution], axis=1)
    n = len(active)

    grid_rows = np.full((resolution,) * 3, n, dtype=np.int64)
    grid_rows[active[:, 0], active[:, 1], active[:, 2]] = np.arange(n)

    vclip = np.clip(vcoord, 0, resolution - 1)
    vertex_rows = grid_rows[vclip[:, 0], vclip[:, 1], vclip[:, 2]]
    if vertex_rows.size and vertex_rows.max() >= n:
        raise RuntimeError("body vertex fell outside the active voxel set")

    # 27-tap neighbor map at fine scale (sentinel row n = zeros)
    k3 = np.stack(np.meshgrid([-1, 0, 1], [-1, 0, 1], [-1, 0, 1], indexing="ij"),
                  axis=-1).reshape(-1, 3)
    nbr = active[:, None, :] + k3[None, :, :]
    ok = np.all((nbr >= 0) & (nbr < resolution), axis=2)
    nbr_rows = np.full((n, 27), n, dtype=np.int64)
    nc = np.clip(nbr, 0, resolution - 1)
    rows = grid_rows[nc[..., 0], nc[..., 1], nc[..., 2]]
    nbr_rows[ok] = rows[ok]
    nbr_fine = ad.RowGather(nbr_rows, n + 1)

    # coarse scale: parents of active voxels; 2^3 downsampling taps
    coarse = np.unique(active // 2, axis=0)
    m = len(coarse)
    cres = (resolution + 1) // 2
    coarse_grid = np.full((cres,) * 3, m, dtype=np.int64)
    coarse_grid[coarse[:, 0], coarse[:, 1], coarse[:, 2]] = np.arange(m)
    k2 = np.stack(np.meshgrid([0, 1], [0, 1], [0, 1], indexing="ij"), axis=-1).reshape(-1, 3)
    fine_of_coarse = coarse[:, None, :] * 2 + k2[None, :, :]
    ok2 = np.all(fine_of_coarse < resolution, axis=2)
    down_rows = np.full((m, 8), n, dtype=np.int64)
    fc = np.clip(fine_of_coarse, 0, resolution - 1)
    rows2 = grid_rows[fc[..., 0], fc[..., 1], fc[..., 2]]
    down_rows[ok2] = rows2[ok2]
    nbr_down = ad.RowGather(down_rows, n + 1)

    parents = coarse_grid[active[:, 0] // 2, active[:, 1] // 2, active[:, 2] // 2]
    parent_rows = ad.RowGather(parents[:, None], m)

    return VolumeGeometry(resolution=resolution, voxel_size=voxel, origin=origin,
                          active_coords=active, grid_rows=grid_rows,
                          vertex_rows=vertex_rows, nbr_fine=nbr_fine,
                          coarse_coords=coarse, nbr_down=nbr_down,
                          parent_rows=parent_rows)


class CodeDiffusion:
    """Splat vertex codes into their voxels (averaging collisions), then two
    3^3 sparse convolutions with relu and a down-up two-scale pass with a
    skip connection."""

    def __init__(self, rng, code_dim=32, out_dim=32):
        self.code_dim = code_dim
        self.out_dim = out_dim
        self.conv1 = Linear("diffusion.conv1", 27 * code_dim, out_dim, rng)
        self.conv2 = Linear("diffusion.conv2", 27 * out_dim, out_dim, rng)
        self.down = Linear("diffusion.down", 8 * out_dim, out_dim, rng)

    def __call__(self, codes, geom):
        splat = ad.segment_mean_rows(codes, geom.vertex_rows, geom.num_active)
        x1 = ad.relu(ad.sparse_conv3d(splat, geom.nbr_fine, self.conv1.w, self.conv1.b))
        x2 = ad.relu(ad.sparse_conv3d(x1, geom.nbr_fine, self.conv2.w, self.conv2.b))
        coarse = ad.relu(ad.sparse_conv3d(x2, geom.nbr_down, self.down.w, self.down.b))
        up = geom.parent_rows(coarse).reshape((geom.num_active, self.out_dim))
        return x2 + up

    def params(self):
        return collect_params(self.conv1, self.conv2, self.down)


class FeatureVolume:
    """Sparse voxel grid of geometric codes with trilinear queries."""

    def __init__(self, geom, codes):
        self.geom = geom
        self.codes = codes  # (n_active, C) Tensor
        n, c = codes.shape
        self.padded = ad.concat([codes, ad.Tensor(np.zeros((1, c)))], axis=0)
        self.channels = c

    def _corner_data(self, points):
        g = self.geom
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        coords = (pts - g.origin) / g.voxel_size - 0.5
        base = np.floor(coords).astype(np.int64)
        frac = coords - base
        corner_offs = np.stack(np.meshgrid([0, 1], [0, 1], [0, 1], indexing="ij"),
                               axis=-1).reshape(-1, 3)
        corners = base[:, None, :] + corner_offs[None, :, :]
        ok = np.all((corners >= 0) & (corners < g.resolution), axis=2)
        cc = np.clip(corners, 0, g.resolution - 1)
        rows = g.grid_rows[cc[..., 0], cc[..., 1], cc[..., 2]]
        rows = np.where(ok, rows, g.num_active)
        return rows, frac, corner_offs

    def query(self, points):
        """Trilinear blend of the 8 surrounding voxel codes; inactive voxels
        contribute zeros. Differentiable w.r.t. the codes."""
        rows, frac, offs = self._corner_data(points)
        w = np.ones((len(frac), 8))
        for d in range(3):
            f = frac[:, d:d + 1]
            w = w * np.where(offs[None, :, d] == 1, f, 1.0 - f)
        return ad.weighted_rows(self.padded, rows, w)

    def query_with_spatial_grad(self, points):
        """(codes, d codes / d position) at query points.

        The spatial derivative of the trilinear weights is closed-form, so
        the returned (P,3,C) gradient is an ordinary taped value and training
        through it needs only first-order reverse mode.
        """
        rows, frac, offs = self._corner_data(points)
        p = len(frac)
        w = np.ones((p, 8))
        factors = []
        for d in range(3):
            f = frac[:, d:d + 1]
            fd = np.where(offs[None, :, d] == 1, f, 1.0 - f)
            factors.append(fd)
            w = w * fd
        sign = np.where(offs[None, :, :] == 1, 1.0, -1.0) / self.geom.voxel_size
        allw = [w]
        for d in range(3):
            dw = sign[:, :, d]
            for e in range(3):
                if e != d:
                    dw = dw * factors[e]
            allw.append(dw)
        stacked = np.stack(allw, axis=1).reshape(p * 4, 8)    # value + 3 derivs
        rows4 = np.repeat(rows, 4, axis=0)
        out = ad.weighted_rows(self.padded, rows4, stacked).reshape((p, 4, self.channels))
        return out[:, 0], out[:, 1:4]
