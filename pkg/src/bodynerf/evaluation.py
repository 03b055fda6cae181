"""Image metrics (PSNR, SSIM), mesh extraction via marching cubes, geometric
metrics (Chamfer, point-to-surface), and the attention-confidence export.
"""

from __future__ import annotations

import numpy as np
from scipy.signal import convolve2d
from scipy.spatial import cKDTree
from skimage.measure import marching_cubes as _marching_cubes

from . import autodiff as ad
from . import meshio
from .field import (FieldDensity, build_feature_volume, density_grid,
                    make_view_set, render_view)

GRAY_WEIGHTS = np.array([0.299, 0.587, 0.114])
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2


def psnr(a, b):
    """10 log10(1/MSE) for images in [0,1]; +inf for identical images."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return float("inf")
    return 10.0 * np.log10(1.0 / mse)


def _gaussian_kernel():
    half = SSIM_WINDOW // 2
    x = np.arange(-half, half + 1, dtype=np.float64)
    g = np.exp(-(x * x) / (2.0 * SSIM_SIGMA ** 2))
    g /= g.sum()
    return np.outer(g, g)


def ssim(a, b):
    """Mean local SSIM with an 11x11 Gaussian window (sigma 1.5); RGB inputs
    are converted to luma first."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    if a.ndim == 3:
        a = a @ GRAY_WEIGHTS
        b = b @ GRAY_WEIGHTS
    if min(a.shape) < SSIM_WINDOW:
        raise ValueError(f"image {a.shape} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")
    k = _gaussian_kernel()

    def f(x):
        return convolve2d(x, k, mode="valid")

    mu_a, mu_b = f(a), f(b)
    var_a = f(a * a) - mu_a ** 2
    var_b = f(b * b) - mu_b ** 2
    cov = f(a * b) - mu_a * mu_b
    num = (2 * mu_a * mu_b + SSIM_C1) * (2 * cov + SSIM_C2)
    den = (mu_a ** 2 + mu_b ** 2 + SSIM_C1) * (var_a + var_b + SSIM_C2)
    return float(np.mean(num / den))


# ---------------------------------------------------------------------------
# geometry

def _weld(verts, faces, decimals=9):
    if len(verts) == 0:
        return verts, faces
    rounded = np.round(verts, decimals=decimals)
    uniq, inverse = np.unique(rounded, axis=0, return_inverse=True)
    faces = inverse[faces]
    keep = (faces[:, 0] != faces[:, 1]) & (faces[:, 1] != faces[:, 2]) & (faces[:, 0] != faces[:, 2])
    faces = faces[keep]
    if len(faces):
        v0, v1, v2 = uniq[faces[:, 0]], uniq[faces[:, 1]], uniq[faces[:, 2]]
        areas = 0.5 * np.linalg.norm(np.cross(v1 - v0, v2 - v0), axis=1)
        faces = faces[areas > 1e-12]
    return uniq, faces


def extract_mesh(density_ctx, aabb, resolution=96, threshold=5.0):
    """Marching-cubes triangulation of the density level set, in world
    meters, welded and with degenerate faces dropped.

    An empty level set yields an empty mesh, not an error.
    """
    values, axes = density_grid(density_ctx, aabb, resolution)
    lo = np.array([axes[0][0], axes[1][0], axes[2][0]])
    spacing = float(axes[0][1] - axes[0][0]) if len(axes[0]) > 1 else 1.0
    if values.max() <= threshold or values.min() >= threshold:
        return np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64)
    verts, faces, _, _ = _marching_cubes(values, level=threshold,
                                         spacing=(spacing, spacing, spacing))
    verts = verts + lo
    verts, faces = _weld(np.asarray(verts, dtype=np.float64),
                         np.asarray(faces, dtype=np.int64))
    return verts, faces


def sample_mesh_surface(verts, faces, n, rng):
    """n points uniform by face area."""
    v0, v1, v2 = verts[faces[:, 0]], verts[faces[:, 1]], verts[faces[:, 2]]
    areas = 0.5 * np.linalg.norm(np.cross(v1 - v0, v2 - v0), axis=1)
    probs = areas / areas.sum()
    fi = rng.choice(len(faces), size=n, p=probs)
    u = rng.uniform(size=(n, 1))
    w = rng.uniform(size=(n, 1))
    flip = (u + w) > 1.0
    u = np.where(flip, 1.0 - u, u)
    w = np.where(flip, 1.0 - w, w)
    return v0[fi] + u * (v1[fi] - v0[fi]) + w * (v2[fi] - v0[fi])


def point_triangle_distances(points, verts, faces, chunk=128):
    """Exact point-to-triangle distances (min over all faces), chunked."""
    v0 = verts[faces[:, 0]]
    e1 = verts[faces[:, 1]] - v0
    e2 = verts[faces[:, 2]] - v0
    nrm = np.cross(e1, e2)
    nn = np.einsum("ij,ij->i", nrm, nrm)
    nn = np.where(nn == 0.0, 1.0, nn)
    out = np.empty(len(points))
    segs = [(v0, verts[faces[:, 1]]), (v0, verts[faces[:, 2]]),
            (verts[faces[:, 1]], verts[faces[:, 2]])]
    d11 = np.einsum("ij,ij->i", e1, e1)
    d12 = np.einsum("ij,ij->i", e1, e2)
    d22 = np.einsum("ij,ij->i", e2, e2)
    for start in range(0, len(points), chunk):
        p = points[start:start + chunk]                     # (P,3)
        d = p[:, None, :] - v0[None, :, :]                  # (P,T,3)
        b1 = np.einsum("ptk,tk->pt", d, e1)
        b2 = np.einsum("ptk,tk->pt", d, e2)
        det = d11 * d22 - d12 * d12
        det = np.where(np.abs(det) < 1e-30, 1.0, det)
        s = (d22 * b1 - d12 * b2) / det
        t = (d11 * b2 - d12 * b1) / det
        inside = (s >= 0) & (t >= 0) & (s + t <= 1)
        plane = np.einsum("ptk,tk->pt", d, nrm) ** 2 / nn
        best = np.where(inside, plane, np.inf)
        for a, b in segs:
            ab = b - a                                       # (T,3)
            ap = p[:, None, :] - a[None, :, :]
            denom = np.einsum("ij,ij->i", ab, ab)
            denom = np.where(denom == 0.0, 1.0, denom)
            tt = np.clip(np.einsum("ptk,tk->pt", ap, ab) / denom, 0.0, 1.0)
            diff = ap - tt[..., None] * ab[None, :, :]
            best = np.minimum(best, np.einsum("ptk,ptk->pt", diff, diff))
        out[start:start + chunk] = np.sqrt(best.min(axis=1))
    return out


def chamfer_p2s(pred, gt, n_points=10000, seed=0):
    """(chamfer, p2s) between triangle meshes, in mesh units.

    chamfer: symmetric mean nearest-neighbor distance between area-uniform
    surface samples, halved. p2s: mean exact point-to-triangle distance from
    pred samples to the gt surface. Empty meshes report None.
    """
    pv, pf = pred
    gv, gf = gt
    if len(pf) == 0 or len(gf) == 0:
        return None, None
    rng = np.random.default_rng(seed)
    ps = sample_mesh_surface(pv, pf, n_points, rng)
    gs = sample_mesh_surface(gv, gf, n_points, rng)
    d_pg = cKDTree(gs).query(ps)[0]
    d_gp = cKDTree(ps).query(gs)[0]
    chamfer = 0.5 * (float(d_pg.mean()) + float(d_gp.mean()))
    p2s = float(point_triangle_distances(ps, gv, gf).mean())
    return chamfer, p2s


def mesh_normal_roughness(verts, faces):
    """Mean angle (radians) between face normals across shared edges."""
    v0, v1, v2 = verts[faces[:, 0]], verts[faces[:, 1]], verts[faces[:, 2]]
    n = np.cross(v1 - v0, v2 - v0)
    lens = np.linalg.norm(n, axis=1, keepdims=True)
    lens[lens == 0.0] = 1.0
    n = n / lens
    edges = np.vstack([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]])
    edges = np.sort(edges, axis=1)
    fid = np.tile(np.arange(len(faces)), 3)
    order = np.lexsort((edges[:, 1], edges[:, 0]))
    edges, fid = edges[order], fid[order]
    same = np.all(edges[1:] == edges[:-1], axis=1)
    fa, fb = fid[:-1][same], fid[1:][same]
    cosang = np.clip(np.einsum("ij,ij->i", n[fa], n[fb]), -1.0, 1.0)
    return float(np.mean(np.arccos(cosang))) if len(fa) else 0.0


# ---------------------------------------------------------------------------
# attention confidence

def _confidence_colors(weights):
    """Blue (low) to red (high) per weight in [0,1]."""
    w = np.clip(weights, 0.0, 1.0)
    return np.stack([w, 0.15 * np.ones_like(w), 1.0 - w], axis=-1)


def attention_confidence(model, mesh, feature_maps, cams):
    """Per-vertex per-view fusion weights (N,m) plus validity mask."""
    _, weights, valid = model.vertex_fusion(
        mesh, feature_maps, cams, downsample=model.encoder.downsample,
        return_weights=True)
    return weights, valid


def export_attention_ply(out_prefix, mesh, weights):
    paths = []
    for k in range(weights.shape[1]):
        path = f"{out_prefix}_view{k:02d}.ply"
        meshio.save_ply_points(path, mesh.vertices, _confidence_colors(weights[:, k]))
        paths.append(path)
    return paths


# ---------------------------------------------------------------------------
# scene-level evaluation

def evaluate_scene(model, sample, cfg, mesh_resolution=0, mesh_threshold=5.0):
    """Render every target view under the eval policy and report image
    metrics (plus geometry when mesh_resolution > 0)."""
    from .field import SceneContext

    scene = sample.scene
    ctx = SceneContext.build(scene.prior_params, scene.tessellation_level,
                             cfg.volume_resolution, cfg.aabb_margin)
    in_cams = [scene.cameras[i] for i in sample.input_views]
    in_imgs = [scene.images[i] for i in sample.input_views]
    with ad.paused():
        views = make_view_set(model, in_cams, in_imgs)
        volume = build_feature_volume(model, ctx, views)

    per_view = []
    for t in sample.target_views:
        rgb, _ = render_view(model, ctx, volume, views, scene.cameras[t],
                             cfg.samples_per_ray, fusion_mode=cfg.fusion)
        gt = scene.images[t]
        entry = {"view": int(t), "psnr": psnr(rgb, gt), "ssim": ssim(rgb, gt),
                 "feature_distance": feature_distance(model, rgb, gt)}
        per_view.append(entry)

    finite = [e["psnr"] for e in per_view if np.isfinite(e["psnr"])]
    report = {
        "psnr": float(np.mean(finite)) if finite else float("inf"),
        "ssim": float(np.mean([e["ssim"] for e in per_view])),
        "per_view": per_view,
    }
    if mesh_resolution:
        density_ctx = FieldDensity(model, volume)
        verts, faces = extract_mesh(density_ctx, ctx.aabb, mesh_resolution,
                                    mesh_threshold)
        gt_v, gt_f = meshio.load_obj(scene.gt_mesh_path())
        chamfer, p2s = chamfer_p2s((verts, faces), (gt_v, gt_f))
        report["chamfer"] = chamfer
        report["p2s"] = p2s
        report["mesh_vertices"] = int(len(verts))
    return report


def feature_distance(model, a, b):
    """Mean absolute frozen-feature difference (a diagnostic, not LPIPS)."""
    with ad.paused():
        fa = model.perceptual(ad.Tensor(np.asarray(a, dtype=np.float64)))
        fb = model.perceptual(ad.Tensor(np.asarray(b, dtype=np.float64)))
    return float(sum(np.mean(np.abs(x.data - y.data)) for x, y in zip(fa, fb)))
