"""Procedural multi-view datasets: a software rasterizer renders textured
posed bodies under a spherical camera rig, and scene directories persist the
result (images, masks, cameras, body parameters, ground-truth mesh).
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np

from . import body as bodymod
from . import meshio
from .cameras import Camera, project

LIGHT_DIR = np.array([0.45, -0.6, 0.66])
LIGHT_DIR = LIGHT_DIR / np.linalg.norm(LIGHT_DIR)
AMBIENT = 0.35


def part_colors(mesh, template, rng):
    """Per-vertex RGB: stripes or checkers in part-local coordinates, with
    per-part color pairs drawn from `rng`. High-frequency enough that view
    blending has signal to learn, but representable at vertex resolution."""
    n = len(mesh.vertices)
    colors = np.zeros((n, 3))
    for part in range(len(bodymod.PART_NAMES)):
        sel = mesh.part_ids == part
        if not np.any(sel):
            continue
        ca = rng.uniform(0.15, 0.95, 3)
        cb = rng.uniform(0.15, 0.95, 3)
        v = template.vertices[sel]
        lo, hi = v.min(axis=0), v.max(axis=0)
        span = np.where(hi - lo < 1e-9, 1.0, hi - lo)
        local = (v - lo) / span
        axial = local[np.arange(len(v)), np.argmax(hi - lo)]
        if part % 2 == 0:
            band = np.floor(axial * 5.0).astype(int) % 2
        else:
            band = (np.floor(axial * 4.0) + np.floor(local[:, (np.argmax(hi - lo) + 1) % 3] * 3.0)).astype(int) % 2
        colors[sel] = np.where(band[:, None] == 0, ca, cb)
    return colors


def rasterize(mesh, colors, cam):
    """Z-buffered triangle rasterization with Gouraud-shaded vertex colors.

    Returns (RGB float image in [0,1], coverage mask). One fixed directional
    light; background black.
    """
    h, w = cam.height, cam.width
    image = np.zeros((h, w, 3))
    zbuf = np.full((h, w), np.inf)
    mask = np.zeros((h, w), dtype=bool)
    if len(mesh.faces) == 0:
        return image, mask

    uv, valid = project(cam, mesh.vertices)
    cam_z = (mesh.vertices @ cam.rotation.T + cam.translation)[:, 2]
    shade = AMBIENT + (1.0 - AMBIENT) * np.maximum(0.0, mesh.normals @ LIGHT_DIR)
    lit = colors * shade[:, None]

    for tri in mesh.faces:
        if not (valid[tri[0]] and valid[tri[1]] and valid[tri[2]]):
            continue
        p0, p1, p2 = uv[tri[0]], uv[tri[1]], uv[tri[2]]
        area2 = (p1[0] - p0[0]) * (p2[1] - p0[1]) - (p1[1] - p0[1]) * (p2[0] - p0[0])
        if abs(area2) < 1e-12:
            continue
        x0 = max(int(np.ceil(min(p0[0], p1[0], p2[0]))), 0)
        x1 = min(int(np.floor(max(p0[0], p1[0], p2[0]))), w - 1)
        y0 = max(int(np.ceil(min(p0[1], p1[1], p2[1]))), 0)
        y1 = min(int(np.floor(max(p0[1], p1[1], p2[1]))), h - 1)
        if x0 > x1 or y0 > y1:
            continue
        xs, ys = np.meshgrid(np.arange(x0, x1 + 1), np.arange(y0, y1 + 1))
        w0 = ((p2[0] - p1[0]) * (ys - p1[1]) - (p2[1] - p1[1]) * (xs - p1[0])) / area2
        w1 = ((p0[0] - p2[0]) * (ys - p2[1]) - (p0[1] - p2[1]) * (xs - p2[0])) / area2
        w2 = 1.0 - w0 - w1
        inside = (w0 >= 0.0) & (w1 >= 0.0) & (w2 >= 0.0)
        if not np.any(inside):
            continue
        z0, z1_, z2 = cam_z[tri[0]], cam_z[tri[1]], cam_z[tri[2]]
        inv_z = w0 / z0 + w1 / z1_ + w2 / z2
        depth = 1.0 / inv_z
        win = inside & (depth < zbuf[y0:y1 + 1, x0:x1 + 1])
        if not np.any(win):
            continue
        c = (w0[..., None] * lit[tri[0]] / z0 +
             w1[..., None] * lit[tri[1]] / z1_ +
             w2[..., None] * lit[tri[2]] / z2) * depth[..., None]
        sub_img = image[y0:y1 + 1, x0:x1 + 1]
        sub_z = zbuf[y0:y1 + 1, x0:x1 + 1]
        sub_m = mask[y0:y1 + 1, x0:x1 + 1]
        sub_img[win] = np.clip(c[win], 0.0, 1.0)
        sub_z[win] = depth[win]
        sub_m[win] = True
    return image, mask


@dataclass
class CameraRig:
    radius: float = 5.4
    yaw_deg: tuple = (0.0, 30.0, 60.0)
    roll_deg: tuple = tuple(float(r) for r in range(0, 360, 30))

    def views(self):
        return [(y, r) for y in self.yaw_deg for r in self.roll_deg]


def rig_camera(yaw_deg, roll_deg, radius, resolution):
    """Camera on the rig sphere, optical axis through the world origin."""
    yaw = np.radians(yaw_deg)
    roll = np.radians(roll_deg)
    pos = radius * np.array([np.cos(yaw) * np.cos(roll),
                             np.cos(yaw) * np.sin(roll),
                             np.sin(yaw)])
    fwd = -pos / np.linalg.norm(pos)
    up = np.array([0.0, 0.0, 1.0])
    x_c = np.cross(fwd, up)
    x_c /= np.linalg.norm(x_c)
    y_c = np.cross(fwd, x_c)
    r = np.stack([x_c, y_c, fwd])
    t = -r @ pos
    focal = resolution * radius / 2.4
    c = (resolution - 1) / 2.0
    return Camera(fx=focal, fy=focal, cx=c, cy=c, rotation=r, translation=t,
                  height=resolution, width=resolution)


def random_body_params(rng):
    """Mildly articulated random body; magnitudes stay comfortably in range."""
    beta = rng.uniform(0.75, 1.3, bodymod.NUM_SHAPE)
    theta = np.zeros((bodymod.NUM_JOINTS, 3))
    amplitude = np.array([0.1, 0.15, 0.1, 0.15,
                          0.45, 0.45, 0.2, 0.45, 0.45, 0.2,
                          0.35, 0.35, 0.15, 0.35, 0.35, 0.15])
    for j in range(bodymod.NUM_JOINTS):
        theta[j] = rng.uniform(-amplitude[j], amplitude[j], 3)
    return bodymod.BodyParams(theta=theta, beta=beta)


def _clip_pose(theta):
    mags = np.linalg.norm(theta, axis=1, keepdims=True)
    scale = np.where(mags > np.pi, (np.pi - 1e-9) / mags, 1.0)
    return theta * scale


def _params_dict(params, level):
    return {"theta": params.theta.tolist(), "beta": params.beta.tolist(),
            "tessellation_level": level}


def _params_from_dict(d):
    return bodymod.BodyParams(theta=np.asarray(d["theta"]),
                              beta=np.asarray(d["beta"])), int(d["tessellation_level"])


def generate_scene(out_dir, seed, rig=None, resolution=128, pose_noise_std=0.0,
                   tessellation_level=2):
    """Write one scene directory: cameras.json, body.json, body_prior.json,
    images/, masks/, gt_mesh.obj. Deterministic for a fixed seed.

    When pose_noise_std > 0 the prior body differs from the true body that
    produced the images, modelling an inaccurately estimated prior.
    """
    rig = rig or CameraRig()
    rng = np.random.default_rng(seed)
    params = random_body_params(rng)
    template = bodymod.build_template(params, level=tessellation_level)
    mesh = bodymod.pose_mesh(template, params.theta)
    colors = part_colors(mesh, template, rng)

    noise = rng.normal(0.0, pose_noise_std, params.theta.shape) if pose_noise_std > 0 else 0.0
    prior_theta = _clip_pose(params.theta + noise)
    prior = bodymod.BodyParams(theta=prior_theta, beta=params.beta.copy())

    os.makedirs(out_dir, exist_ok=True)
    os.makedirs(os.path.join(out_dir, "images"), exist_ok=True)
    os.makedirs(os.path.join(out_dir, "masks"), exist_ok=True)

    cams = []
    cam_entries = []
    for (yaw, roll) in rig.views():
        cam = rig_camera(yaw, roll, rig.radius, resolution)
        cams.append(cam)
        entry = cam.to_dict()
        entry["yaw_deg"] = yaw
        entry["roll_deg"] = roll
        cam_entries.append(entry)

    for i, cam in enumerate(cams):
        image, mask = rasterize(mesh, colors, cam)
        meshio.save_image(os.path.join(out_dir, "images", f"view_{i:03d}.png"), image)
        meshio.save_mask(os.path.join(out_dir, "masks", f"view_{i:03d}.png"), mask)

    with open(os.path.join(out_dir, "cameras.json"), "w") as f:
        json.dump(cam_entries, f, sort_keys=True)
    with open(os.path.join(out_dir, "body.json"), "w") as f:
        json.dump(_params_dict(params, tessellation_level), f, sort_keys=True)
    with open(os.path.join(out_dir, "body_prior.json"), "w") as f:
        json.dump(_params_dict(prior, tessellation_level), f, sort_keys=True)
    meshio.save_obj(os.path.join(out_dir, "gt_mesh.obj"), mesh.vertices, mesh.faces)
    return out_dir


@dataclass
class Scene:
    """All views of one scene plus the body prior fed to the pipeline."""

    scene_dir: str
    images: np.ndarray        # (V,H,W,3) float in [0,1]
    masks: np.ndarray         # (V,H,W) bool
    cameras: list
    view_meta: list           # (yaw_deg, roll_deg) per view
    prior_params: bodymod.BodyParams
    true_params: bodymod.BodyParams
    tessellation_level: int

    @property
    def num_views(self):
        return len(self.cameras)

    def gt_mesh_path(self):
        return os.path.join(self.scene_dir, "gt_mesh.obj")


def load_scene_dir(scene_dir):
    """Read a full scene directory into memory."""
    with open(os.path.join(scene_dir, "cameras.json")) as f:
        cam_entries = json.load(f)
    cams = [Camera.from_dict(e) for e in cam_entries]
    meta = [(e.get("yaw_deg"), e.get("roll_deg")) for e in cam_entries]
    images, masks = [], []
    for i in range(len(cams)):
        images.append(meshio.load_image(os.path.join(scene_dir, "images", f"view_{i:03d}.png")))
        masks.append(meshio.load_mask(os.path.join(scene_dir, "masks", f"view_{i:03d}.png")))
    with open(os.path.join(scene_dir, "body.json")) as f:
        true_params, level = _params_from_dict(json.load(f))
    prior_path = os.path.join(scene_dir, "body_prior.json")
    if os.path.exists(prior_path):
        with open(prior_path) as f:
            prior_params, _ = _params_from_dict(json.load(f))
    else:
        prior_params = true_params
    return Scene(scene_dir=scene_dir, images=np.stack(images), masks=np.stack(masks),
                 cameras=cams, view_meta=meta, prior_params=prior_params,
                 true_params=true_params, tessellation_level=level)


@dataclass
class SceneSample:
    """One training/eval example: m input views plus target view(s)."""

    scene: Scene
    input_views: list
    target_views: list


EVAL_ROLLS = (0.0, 90.0, 180.0, 270.0)
EVAL_YAW = 30.0


def select_views(scene, m, policy, rng=None, exclude=()):
    """Input/target split per the stated policies.

    training: m random inputs without replacement, target random among the
    rest. eval: the four views surrounding the body at the middle yaw ring;
    targets are every remaining view.
    """
    if scene.num_views < m + 1:
        raise ValueError(f"scene has {scene.num_views} views; need at least {m + 1}")
    allowed = [i for i in range(scene.num_views) if i not in set(exclude)]
    if policy == "train":
        if rng is None:
            raise ValueError("training selection needs an rng")
        pick = rng.choice(len(allowed), size=m + 1, replace=False)
        views = [allowed[int(i)] for i in pick]
        return SceneSample(scene=scene, input_views=sorted(views[:m]),
                           target_views=[views[m]])
    if policy == "eval":
        inputs = []
        for roll in EVAL_ROLLS[:m]:
            found = [i for i, (y, r) in enumerate(scene.view_meta)
                     if y == EVAL_YAW and r == roll]
            if not found:
                raise ValueError(f"eval policy needs a view at yaw {EVAL_YAW}, roll {roll}")
            inputs.append(found[0])
        targets = [i for i in allowed if i not in inputs]
        return SceneSample(scene=scene, input_views=inputs, target_views=targets)
    raise ValueError(f"unknown policy {policy!r}")


def load_scene(scene_dir, m=4, policy="eval", rng=None, exclude=()):
    """Load a scene directory and select views per `policy`."""
    scene = load_scene_dir(scene_dir)
    return select_views(scene, m, policy, rng=rng, exclude=exclude)
