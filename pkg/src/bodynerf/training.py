"""Loss stack, Adam optimizer, configuration, and the training loop with
partial gradient backpropagation and bit-exact resume.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .field import (FieldDensity, Model, SceneContext, build_feature_volume,
                    make_view_set, render_patch)
from .synth import select_views


@dataclass
class TrainConfig:
    views: int = 4
    patch_size: int = 224
    tracked_rays: int = 4096
    samples_per_ray: int = 64
    learning_rate: float = 5e-4
    iterations: int = 2000
    seed: int = 0
    volume_resolution: int = 64
    fusion: str = "attention"
    lambda_rgb: float = 1.0
    lambda_silhouette: float = 0.1
    lambda_perceptual: float = 0.01
    lambda_normal: float = 0.01
    feat_channels: int = 32
    encoder_stages: tuple = (16, 32)
    geo_code_dim: int = 32
    geo_out_dim: int = 32
    app_code_dim: int = 32
    attention_dim: int = 32
    stage1_widths: tuple = (64, 64, 64, 64)
    stage2_widths: tuple = (64, 64)
    feature_dim: int = 16
    renderer_hidden: tuple = (32, 16)
    density_bias: float = 0.5
    normal_samples: int = 256
    normal_eps_std: float = 0.1
    aabb_margin: float = 0.1
    perceptual_seed: int = 42
    checkpoint_every: int = 1000
    holdout_views: tuple = ()

    @classmethod
    def desk_preset(cls, **overrides):
        """Desktop-scale preset: 64-pixel patches, 512 tracked rays,
        32 samples per ray, 48^3 volume."""
        base = dict(patch_size=64, tracked_rays=512, samples_per_ray=32,
                    volume_resolution=48, iterations=2000)
        base.update(overrides)
        return cls(**base)

    def to_dict(self):
        d = asdict(self)
        for key in ("encoder_stages", "stage1_widths", "stage2_widths",
                    "renderer_hidden", "holdout_views"):
            d[key] = list(d[key])
        return d

    @classmethod
    def from_dict(cls, d):
        kwargs = dict(d)
        for key in ("encoder_stages", "stage1_widths", "stage2_widths",
                    "renderer_hidden", "holdout_views"):
            if key in kwargs:
                kwargs[key] = tuple(kwargs[key])
        return cls(**kwargs)

    @classmethod
    def load(cls, path, **overrides):
        with open(path) as f:
            d = json.load(f)
        d.update(overrides)
        return cls.from_dict(d)


def pixel_losses(pred_rgb, gt_rgb, pred_sil, gt_sil, lambda_rgb, lambda_sil):
    """Weighted per-element mean squared errors of RGB and silhouette."""
    gt_rgb = np.asarray(gt_rgb, dtype=np.float64)
    gt_sil = np.asarray(gt_sil, dtype=np.float64)
    if pred_rgb.shape != gt_rgb.shape:
        raise ad.ShapeError(f"rgb shapes differ: {pred_rgb.shape} vs {gt_rgb.shape}")
    if pred_sil.shape != gt_sil.shape:
        raise ad.ShapeError(f"silhouette shapes differ: {pred_sil.shape} vs {gt_sil.shape}")
    l_rgb = ad.tmean(ad.square(pred_rgb - ad.Tensor(gt_rgb)))
    l_sil = ad.tmean(ad.square(pred_sil - ad.Tensor(gt_sil)))
    return l_rgb * lambda_rgb + l_sil * lambda_sil


def perceptual_loss(perceptual_net, pred, gt):
    """Mean absolute activation difference, summed over the frozen net's
    stages; gradients reach only `pred`."""
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ad.ShapeError(f"image shapes differ: {pred.shape} vs {gt.shape}")
    feats_p = perceptual_net(pred)
    with ad.paused():
        feats_g = perceptual_net(ad.Tensor(gt))
    total = None
    for fp, fg in zip(feats_p, feats_g):
        term = ad.tmean(ad.absolute(fp - fg.detach()))
        total = term if total is None else total + term
    return total


def downsample_mask(mask):
    """2x2 average pooling of a full-resolution mask to silhouette scale."""
    m = np.asarray(mask, dtype=np.float64)
    h, w = m.shape
    return m.reshape(h // 2, 2, w // 2, 2).mean(axis=(1, 3))


def sample_surface_points(mesh, k, rng):
    """k points uniform by face area on the mesh surface."""
    v = mesh.vertices
    f = mesh.faces
    cross = np.cross(v[f[:, 1]] - v[f[:, 0]], v[f[:, 2]] - v[f[:, 0]])
    areas = 0.5 * np.linalg.norm(cross, axis=1)
    probs = areas / areas.sum()
    fi = rng.choice(len(f), size=k, p=probs)
    u = rng.uniform(size=(k, 1))
    w = rng.uniform(size=(k, 1))
    flip = (u + w) > 1.0
    u = np.where(flip, 1.0 - u, u)
    w = np.where(flip, 1.0 - w, w)
    tri = f[fi]
    return v[tri[:, 0]] + u * (v[tri[:, 1]] - v[tri[:, 0]]) + w * (v[tri[:, 2]] - v[tri[:, 0]])


def normal_regularization(field_ctx, mesh, k, eps_std, rng):
    """Penalty on density-normal change between nearby points around the
    body surface: mean ||n(x_s) - n(x_s + eps)||, n = grad sigma normalized.

    Points whose density gradient is tiny (< 1e-8) are skipped.
    """
    if k <= 0:
        raise ValueError("normal regularization needs at least one sample")
    surf = sample_surface_points(mesh, k, rng)
    xs = surf + rng.normal(0.0, eps_std, size=(k, 3))
    eps = rng.normal(0.0, eps_std, size=(k, 3))
    pts = np.vstack([xs, xs + eps])
    _, grad = field_ctx.density_and_spatial_grad(pts)
    norms = np.linalg.norm(grad.data, axis=1)
    keep = np.flatnonzero((norms[:k] >= 1e-8) & (norms[k:] >= 1e-8))
    if len(keep) == 0:
        return ad.Tensor(0.0)
    g1 = ad.take_rows(grad, keep)
    g2 = ad.take_rows(grad, keep + k)
    n1 = g1 / ad.l2norm(g1, axis=-1, keepdims=True)
    n2 = g2 / ad.l2norm(g2, axis=-1, keepdims=True)
    return ad.tmean(ad.l2norm(n1 - n2, axis=-1))


class Adam:
    def __init__(self, param_names, beta1=0.9, beta2=0.999, eps=1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.step_count = 0
        self.m = {name: None for name in param_names}
        self.v = {name: None for name in param_names}

    def step(self, params, grads, lr):
        """Update params in place; missing gradients count as zero."""
        self.step_count += 1
        t = self.step_count
        b1, b2 = self.beta1, self.beta2
        for name, p in params.items():
            g = grads.get(p)
            if g is None:
                g = np.zeros_like(p.data)
            if self.m[name] is None:
                self.m[name] = np.zeros_like(p.data)
                self.v[name] = np.zeros_like(p.data)
            m = self.m[name]
            v = self.v[name]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            mhat = m / (1 - b1 ** t)
            vhat = v / (1 - b2 ** t)
            p.data -= lr * mhat / (np.sqrt(vhat) + self.eps)

    def state_arrays(self):
        out = {}
        for name in self.m:
            if self.m[name] is not None:
                out[f"opt.m/{name}"] = self.m[name]
                out[f"opt.v/{name}"] = self.v[name]
        return out

    def load_state(self, arrays, step_count):
        self.step_count = step_count
        for name in self.m:
            if f"opt.m/{name}" in arrays:
                self.m[name] = arrays[f"opt.m/{name}"].copy()
                self.v[name] = arrays[f"opt.v/{name}"].copy()


def learning_rate(cfg, iteration):
    """Exponential decay: one decade over the configured run length."""
    return cfg.learning_rate * 0.1 ** (iteration / max(1, cfg.iterations))


def psnr_value(a, b):
    mse = float(np.mean((np.asarray(a) - np.asarray(b)) ** 2))
    if mse == 0.0:
        return float("inf")
    return 10.0 * np.log10(1.0 / mse)


class NonFiniteLoss(RuntimeError):
    pass


class Trainer:
    """Owns the model, optimizer, RNG, scene contexts, and the log."""

    def __init__(self, cfg, scenes, model=None, log_path=None):
        self.cfg = cfg
        self.scenes = scenes
        self.model = model or Model.from_config(cfg)
        self.params = self.model.params()
        self.opt = Adam(list(self.params))
        self.rng = np.random.default_rng(cfg.seed)
        self.iteration = 0
        self.psnr_running = None
        self.log_path = log_path
        self._log_file = None
        self._contexts = {}
        self.consecutive_aborts = 0

    def context_for(self, scene):
        key = scene.scene_dir
        if key not in self._contexts:
            self._contexts[key] = SceneContext.build(
                scene.prior_params, scene.tessellation_level,
                self.cfg.volume_resolution, self.cfg.aabb_margin)
        return self._contexts[key]

    def _sample(self):
        idx = int(self.rng.integers(len(self.scenes)))
        scene = self.scenes[idx]
        return select_views(scene, self.cfg.views, "train", rng=self.rng,
                            exclude=self.cfg.holdout_views)

    def step(self, sample=None):
        """One optimizer step; returns the logged metrics dict.

        A non-finite loss aborts the step with parameters untouched.
        """
        cfg = self.cfg
        sample = sample or self._sample()
        scene = sample.scene
        ctx = self.context_for(scene)
        target = sample.target_views[0]
        cam_t = scene.cameras[target]

        patch = min(cfg.patch_size, cam_t.height, cam_t.width)
        max_x = cam_t.width - patch
        max_y = cam_t.height - patch
        x0 = int(self.rng.integers(0, max_x + 1)) if max_x > 0 else 0
        y0 = int(self.rng.integers(0, max_y + 1)) if max_y > 0 else 0
        rect = (x0, y0, patch, patch)

        k = (patch // 2) * (patch // 2)
        n_p = min(cfg.tracked_rays, k)
        tracked = np.sort(self.rng.choice(k, size=n_p, replace=False))

        in_cams = [scene.cameras[i] for i in sample.input_views]
        in_imgs = [scene.images[i] for i in sample.input_views]
        gt_rgb = scene.images[target, y0:y0 + patch, x0:x0 + patch]
        gt_sil = downsample_mask(
            scene.masks[target, y0:y0 + patch, x0:x0 + patch])

        tape = ad.Tape()
        with ad.recording(tape):
            views = make_view_set(self.model, in_cams, in_imgs)
            volume = build_feature_volume(self.model, ctx, views)
            i_f, i_m = render_patch(self.model, ctx, volume, views, cam_t,
                                    rect, cfg.samples_per_ray,
                                    rng=self.rng, tracked=tracked,
                                    fusion_mode=cfg.fusion)
            i_t = self.model.renderer(i_f)
            l_pix = pixel_losses(i_t, gt_rgb, i_m, gt_sil,
                                 cfg.lambda_rgb, cfg.lambda_silhouette)
            l_perc = perceptual_loss(self.model.perceptual, i_t, gt_rgb)
            density_ctx = FieldDensity(self.model, volume)
            l_norm = normal_regularization(density_ctx, ctx.mesh,
                                           cfg.normal_samples,
                                           cfg.normal_eps_std, self.rng)
            l_full = l_pix + l_perc * cfg.lambda_perceptual + l_norm * cfg.lambda_normal

        metrics = {"iter": self.iteration,
                   "L": float(l_pix.data), "L_p": float(l_perc.data),
                   "L_n": float(l_norm.data), "L_full": float(l_full.data)}
        if not np.isfinite(l_full.data):
            self.consecutive_aborts += 1
            metrics["aborted"] = True
            metrics["psnr_running"] = self.psnr_running
            self.iteration += 1
            self._log(metrics)
            return metrics
        self.consecutive_aborts = 0

        grads = tape.backward(l_full)
        self.opt.step(self.params, grads, learning_rate(cfg, self.iteration))

        cur = psnr_value(i_t.data, gt_rgb)
        if np.isfinite(cur):
            if self.psnr_running is None:
                self.psnr_running = cur
            else:
                self.psnr_running = 0.9 * self.psnr_running + 0.1 * cur
        metrics["psnr_running"] = self.psnr_running
        self.iteration += 1
        self._log(metrics)
        return metrics

    def _log(self, metrics):
        if self.log_path is None:
            return
        if self._log_file is None:
            self._log_file = open(self.log_path, "a")
        self._log_file.write(json.dumps(metrics, sort_keys=True) + "\n")
        self._log_file.flush()

    def close(self):
        if self._log_file is not None:
            self._log_file.close()
            self._log_file = None

    # -- checkpointing -----------------------------------------------------

    def save_checkpoint(self, path):
        meta = {"iteration": self.iteration,
                "adam_step": self.opt.step_count,
                "psnr_running": self.psnr_running,
                "rng_state": _encode_rng(self.rng),
                "config": self.cfg.to_dict()}
        self.model.save(path, meta=meta, extra_arrays=self.opt.state_arrays())

    @classmethod
    def resume(cls, path, scenes, log_path=None):
        arrays, meta = ad.load_arrays(path)
        cfg = TrainConfig.from_dict(meta["config"])
        trainer = cls(cfg, scenes, log_path=log_path)
        trainer.model.load(path)
        trainer.opt.load_state(arrays, meta["adam_step"])
        trainer.iteration = meta["iteration"]
        trainer.psnr_running = meta["psnr_running"]
        trainer.rng = _decode_rng(meta["rng_state"])
        return trainer

    def train(self, iterations=None, out_dir=None, max_aborts=3):
        """Run the loop; checkpoints every cfg.checkpoint_every and at the
        end when `out_dir` is given. Raises NonFiniteLoss after `max_aborts`
        consecutive aborted steps."""
        total = iterations if iterations is not None else self.cfg.iterations
        while self.iteration < total:
            self.step()
            if self.consecutive_aborts >= max_aborts:
                raise NonFiniteLoss(
                    f"{max_aborts} consecutive non-finite losses at iteration {self.iteration}")
            if out_dir and self.cfg.checkpoint_every and \
                    self.iteration % self.cfg.checkpoint_every == 0 and \
                    self.iteration < total:
                self.save_checkpoint(os.path.join(
                    out_dir, f"checkpoint_{self.iteration:06d}.ckpt"))
        if out_dir:
            self.save_checkpoint(os.path.join(out_dir, "checkpoint_final.ckpt"))
        self.close()


def _encode_rng(rng):
    state = rng.bit_generator.state
    return json.loads(json.dumps(state, default=int))


def _decode_rng(state):
    rng = np.random.default_rng(0)
    rng.bit_generator.state = state
    return rng


def load_model_checkpoint(path):
    """Rebuild a Model from a checkpoint written by save_checkpoint."""
    arrays, meta = ad.load_arrays(path)
    cfg = TrainConfig.from_dict(meta["config"])
    model = Model.from_config(cfg)
    model.load(path)
    return model, cfg, meta
