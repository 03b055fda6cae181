"""Two-stage MLP feature field, differentiable volume rendering, and the
patch/full-frame render paths.

Density depends only on the geometric code (stage 1); the rendered feature
depends on both the geometry hidden state and the appearance code (stage 2).
Patch rendering casts one ray per 2x2 target block through the block center
and can split rays into gradient-tracked and detached sets; detached rays
keep bit-identical values (the ops are the same, just not recorded).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import body as bodymod
from .appearance import AppearanceBlend
from .cameras import generate_rays
from .embedding import (CodeDiffusion, FeatureVolume, VertexCodeFusion,
                        ViewSet, build_volume_geometry)
from .nets import Encoder, Linear, MLP, NeuralRenderer, PerceptualNet, collect_params


class TwoStageField:
    def __init__(self, rng, geo_dim=32, app_dim=32, stage1_widths=(64, 64, 64, 64),
                 stage2_widths=(64, 64), feat_dim=16, density_bias=0.5):
        self.stage1 = []
        prev = geo_dim
        for i, w in enumerate(stage1_widths):
            self.stage1.append(Linear(f"field.s1fc{i}", prev, w, rng))
            prev = w
        self.hidden_dim = prev
        self.density_head = Linear("field.density", prev, 1, rng, bias_init=density_bias)
        self.stage2 = []
        prev2 = prev + app_dim
        for i, w in enumerate(stage2_widths):
            self.stage2.append(Linear(f"field.s2fc{i}", prev2, w, rng))
            prev2 = w
        self.feature_head = Linear("field.feature", prev2, feat_dim, rng)
        self.feat_dim = feat_dim

    def _hidden(self, g):
        h = g
        for layer in self.stage1:
            h = ad.relu(layer(h))
        return h

    def density(self, g):
        """Density alone (stage 1 only); (P,C_g) -> (P,)."""
        z = self.density_head(self._hidden(g))
        return ad.softplus(z).reshape((-1,))

    def __call__(self, g, a):
        """(density (P,), feature (P,M_F)); density ignores `a` by design."""
        h = self._hidden(g)
        sigma = ad.softplus(self.density_head(h)).reshape((-1,))
        x = ad.relu(self.stage2[0].apply_concat([h, a]))
        for layer in self.stage2[1:]:
            x = ad.relu(layer(x))
        return sigma, self.feature_head(x)

    def density_with_spatial_grad(self, g, dg_dx):
        """Density and its world-space gradient from the geometric code and
        the code's spatial derivative (P,3,C_g).

        The gradient is assembled as ordinary forward ops (Jacobian chain
        with detached relu masks), so losses built on it backpropagate with
        first-order reverse mode only.
        """
        p = g.shape[0]
        h = g
        jac = dg_dx
        for layer in self.stage1:
            z = layer(h)
            mask = (z.data > 0.0).astype(np.float64)
            h = ad.relu(z)
            jac = ad.matmul(jac.reshape((p * 3, layer.d_in)), layer.w)
            jac = jac.reshape((p, 3, layer.d_out)) * ad.Tensor(mask[:, None, :])
        z_sig = self.density_head(h)                       # (P,1)
        sigma = ad.softplus(z_sig).reshape((-1,))
        js = ad.matmul(jac.reshape((p * 3, self.hidden_dim)), self.density_head.w)
        grad = js.reshape((p, 3)) * ad.sigmoid(z_sig)
        return sigma, grad

    def params(self):
        return collect_params(*self.stage1, self.density_head,
                              *self.stage2, self.feature_head)


def composite(features, sigmas, deltas):
    """Alpha-composite per-ray samples.

    features (R,N,F) Tensor, sigmas (R,N) Tensor, deltas (R,N) constant.
    Uses transmittance T_i = exp(-sum_{j<i} sigma_j delta_j) and
    alpha_i = 1 - exp(-sigma_i delta_i); returns (feature (R,F), opacity (R,)).
    """
    deltas = np.asarray(deltas, dtype=np.float64)
    if deltas.min() <= 0.0:
        raise ValueError("deltas must be positive")
    s = sigmas * ad.Tensor(deltas)
    trans = ad.exp(-ad.exclusive_cumsum(s))
    alpha = -ad.exp(-s) + 1.0
    w = trans * alpha
    r, n = w.shape
    feat = ad.tsum(w.reshape((r, n, 1)) * features, axis=1)
    opacity = ad.tsum(w, axis=1)
    return feat, opacity


class Model:
    """All trainable components plus the frozen perceptual net."""

    def __init__(self, seed=0, feat_channels=32, encoder_stages=(16, 32),
                 geo_code_dim=32, geo_out_dim=32, app_dim=32, attention_dim=32,
                 stage1_widths=(64, 64, 64, 64), stage2_widths=(64, 64),
                 feat_dim=16, renderer_hidden=(32, 16), density_bias=0.5,
                 perceptual_seed=42):
        rng = np.random.default_rng(seed)
        self.feat_channels = feat_channels
        self.encoder = Encoder(rng, encoder_stages, feat_channels)
        self.vertex_fusion = VertexCodeFusion(rng, feat_channels,
                                              dim=attention_dim, out_dim=geo_code_dim)
        self.diffusion = CodeDiffusion(rng, geo_code_dim, geo_out_dim)
        self.appearance = AppearanceBlend(rng, feat_channels, geo_out_dim,
                                          dim=attention_dim, out_dim=app_dim)
        self.field = TwoStageField(rng, geo_out_dim, app_dim, stage1_widths,
                                   stage2_widths, feat_dim, density_bias)
        self.renderer = NeuralRenderer(rng, feat_dim, renderer_hidden)
        self.perceptual = PerceptualNet(perceptual_seed)
        self.feat_dim = feat_dim

    @classmethod
    def from_config(cls, cfg):
        return cls(seed=cfg.seed, feat_channels=cfg.feat_channels,
                   encoder_stages=tuple(cfg.encoder_stages),
                   geo_code_dim=cfg.geo_code_dim, geo_out_dim=cfg.geo_out_dim,
                   app_dim=cfg.app_code_dim, attention_dim=cfg.attention_dim,
                   stage1_widths=tuple(cfg.stage1_widths),
                   stage2_widths=tuple(cfg.stage2_widths),
                   feat_dim=cfg.feature_dim,
                   renderer_hidden=tuple(cfg.renderer_hidden),
                   density_bias=cfg.density_bias,
                   perceptual_seed=cfg.perceptual_seed)

    def params(self):
        return collect_params(self.encoder, self.vertex_fusion, self.diffusion,
                              self.appearance, self.field, self.renderer)

    def save(self, path, meta=None, extra_arrays=None):
        arrays = {name: p.data for name, p in self.params().items()}
        if extra_arrays:
            arrays.update(extra_arrays)
        ad.save_arrays(path, arrays, meta)

    def load(self, path):
        arrays, meta = ad.load_arrays(path)
        for name, p in self.params().items():
            if name not in arrays:
                raise KeyError(f"checkpoint missing parameter {name}")
            if arrays[name].shape != p.data.shape:
                raise ValueError(f"shape mismatch for {name}")
            p.data[...] = arrays[name]
        return arrays, meta


@dataclass
class SceneContext:
    """Per-scene geometry derived from the body prior: posed prior mesh, the
    sparse volume layout, and the dilated bounds used for ray near/far."""

    mesh: bodymod.BodyMesh
    geom: object
    aabb: tuple

    @classmethod
    def build(cls, prior_params, tessellation_level=2, volume_resolution=64,
              margin=0.1):
        template = bodymod.build_template(prior_params, level=tessellation_level)
        mesh = bodymod.pose_mesh(template, prior_params.theta)
        geom = build_volume_geometry(mesh, resolution=volume_resolution, margin=margin)
        aabb = bodymod.dilated_aabb(mesh, margin)
        return cls(mesh=mesh, geom=geom, aabb=aabb)


def encode_views(model, images):
    """Encoder features for each input view image."""
    return [model.encoder(img) for img in images]


def make_view_set(model, cams, images):
    """Encode the input views and bundle them for pixel-aligned sampling."""
    fmaps = encode_views(model, images)
    return ViewSet(cams, fmaps, images=images, downsample=model.encoder.downsample)


def build_feature_volume(model, ctx, views):
    codes = model.vertex_fusion(ctx.mesh, views.fmaps, views.cams,
                                downsample=views.downsample, views=views)
    vox = model.diffusion(codes, ctx.geom)
    return FeatureVolume(ctx.geom, vox)


class FieldDensity:
    """Density field context: sigma and its spatial gradient at world points,
    built from the feature volume and the stage-1 MLP."""

    def __init__(self, model, volume):
        self.model = model
        self.volume = volume

    def density(self, points):
        g = self.volume.query(points)
        return self.model.field.density(g)

    def density_and_spatial_grad(self, points):
        g, dg = self.volume.query_with_spatial_grad(points)
        return self.model.field.density_with_spatial_grad(g, dg)


def patch_ray_pixels(rect):
    """Pixel centers of patch rays: one per 2x2 block of the target rect.

    rect = (x0, y0, width, height) with even width/height; returns (K,2)
    pixel coordinates in row-major feature-image order.
    """
    x0, y0, pw, ph = rect
    if pw % 2 or ph % 2:
        raise ValueError("patch sides must be even")
    wf, hf = pw // 2, ph // 2
    jj, ii = np.meshgrid(np.arange(wf), np.arange(hf))
    u = x0 + 2.0 * jj + 0.5
    v = y0 + 2.0 * ii + 0.5
    return np.stack([u.ravel(), v.ravel()], axis=-1), hf, wf


def _eval_ray_rows(model, volume, views, rays, positions, deltas, rows,
                   fusion_mode):
    """Field + compositing for the selected ray rows; returns (feat, opacity)."""
    n = positions.shape[1]
    pts = positions[rows].reshape(-1, 3)
    dirs = np.repeat(rays.directions[rows], n, axis=0)
    g = volume.query(pts)
    if fusion_mode == "zero":
        a = ad.Tensor(np.zeros((len(pts), model.appearance.fusion.out_proj.d_out)))
    else:
        a = model.appearance(pts, dirs, g, views=views, mode=fusion_mode)
    sigma, feat = model.field(g, a)
    r = len(rows)
    return composite(feat.reshape((r, n, model.feat_dim)),
                     sigma.reshape((r, n)), deltas[rows])


def render_patch(model, ctx, volume, views, target_cam, rect,
                 n_samples, rng=None, tracked=None, fusion_mode="attention"):
    """Render the feature + silhouette images for a target patch.

    One ray per 2x2 block through the block center; rays missing the body
    box yield zeros. With `tracked` (sorted feature-pixel indices) only those
    rays join the tape; the rest are evaluated with recording paused, giving
    identical values held as constants.
    """
    x0, y0, pw, ph = rect
    if x0 < 0 or y0 < 0 or x0 + pw > target_cam.width or y0 + ph > target_cam.height:
        raise ValueError(f"patch rect {rect} outside {target_cam.width}x{target_cam.height}")
    pixels, hf, wf = patch_ray_pixels(rect)
    rays = generate_rays(target_cam, pixels, ctx.aabb)
    k = hf * wf
    n = n_samples
    seg = ((rays.far - rays.near) / n)[:, None]
    offs = rng.uniform(size=(k, n)) if rng is not None else 0.5
    depths = rays.near[:, None] + (np.arange(n)[None, :] + offs) * seg
    positions = rays.origins[:, None, :] + depths[..., None] * rays.directions[:, None, :]
    deltas = np.empty_like(depths)
    deltas[:, :-1] = np.linalg.norm(positions[:, 1:] - positions[:, :-1], axis=-1)
    deltas[:, -1] = seg[:, 0]
    deltas = np.maximum(deltas, 1e-12)  # background rays have degenerate spans

    hit_rows = np.flatnonzero(rays.hit)
    base_f = np.zeros((k, model.feat_dim))
    base_m = np.zeros((k, 1))

    def run(rows):
        return _eval_ray_rows(model, volume, views, rays, positions, deltas,
                              rows, fusion_mode)

    if tracked is None:
        if len(hit_rows):
            feat, opac = run(hit_rows)
            i_f = ad.scatter_rows(base_f, hit_rows, feat)
            i_m = ad.scatter_rows(base_m, hit_rows, opac.reshape((-1, 1)))
        else:
            i_f, i_m = ad.Tensor(base_f), ad.Tensor(base_m)
    else:
        tracked = np.asarray(tracked, dtype=np.int64)
        tr = hit_rows[np.isin(hit_rows, tracked)]
        un = hit_rows[~np.isin(hit_rows, tracked)]
        if len(un):
            with ad.paused():
                feat_u, opac_u = run(un)
            base_f[un] = feat_u.data
            base_m[un] = opac_u.data[:, None]
        if len(tr):
            feat_t, opac_t = run(tr)
            i_f = ad.scatter_rows(base_f, tr, feat_t)
            i_m = ad.scatter_rows(base_m, tr, opac_t.reshape((-1, 1)))
        else:
            i_f, i_m = ad.Tensor(base_f), ad.Tensor(base_m)

    return i_f.reshape((hf, wf, model.feat_dim)), i_m.reshape((hf, wf))


def render_view(model, ctx, volume, views, target_cam,
                n_samples, tile=64, fusion_mode="attention"):
    """Full-frame render: volume rendering tiled over even patches, then one
    neural-renderer pass on the assembled feature image.

    Tiles share ray definitions with a monolithic render, so the assembled
    feature image is bit-exact regardless of tiling.
    """
    h, w = target_cam.height, target_cam.width
    hf, wf = h // 2, w // 2
    feat = np.zeros((hf, wf, model.feat_dim))
    sil = np.zeros((hf, wf))
    for y0 in range(0, h, tile):
        for x0 in range(0, w, tile):
            ph = min(tile, h - y0)
            pw = min(tile, w - x0)
            i_f, i_m = render_patch(model, ctx, volume, views, target_cam,
                                    (x0, y0, pw, ph), n_samples,
                                    fusion_mode=fusion_mode)
            feat[y0 // 2:(y0 + ph) // 2, x0 // 2:(x0 + pw) // 2] = i_f.data
            sil[y0 // 2:(y0 + ph) // 2, x0 // 2:(x0 + pw) // 2] = i_m.data
    rgb = model.renderer(ad.Tensor(feat))
    return rgb.data, sil


def density_grid(density_ctx, aabb, resolution, chunk=65536):
    """Density sampled on a regular grid over `aabb` (untracked).

    Returns (values (nx,ny,nz), axis coordinate arrays). Spacing is uniform
    across axes: extent_max / resolution.
    """
    lo, hi = np.asarray(aabb[0], dtype=np.float64), np.asarray(aabb[1], dtype=np.float64)
    spacing = float((hi - lo).max()) / resolution
    axes = [np.arange(lo[d], hi[d] + spacing * 0.5, spacing) for d in range(3)]
    grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)
    pts = grid.reshape(-1, 3)
    out = np.empty(len(pts))
    with ad.paused():
        for start in range(0, len(pts), chunk):
            sl = slice(start, min(start + chunk, len(pts)))
            out[sl] = density_ctx.density(pts[sl]).data
    return out.reshape(grid.shape[:3]), axes
