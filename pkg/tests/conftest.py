import numpy as np
import pytest

from bodynerf import synth, training


def micro_config(**overrides):
    """Tiny-net config for gradient checks and pipeline micro-tests."""
    base = dict(
        views=2, patch_size=4, tracked_rays=4, samples_per_ray=4,
        iterations=10, seed=11, volume_resolution=16,
        feat_channels=8, encoder_stages=(8, 8), geo_code_dim=8,
        geo_out_dim=8, app_code_dim=8, attention_dim=8,
        stage1_widths=(16, 16), stage2_widths=(16,), feature_dim=6,
        renderer_hidden=(8, 8), normal_samples=8, checkpoint_every=0,
    )
    base.update(overrides)
    return training.TrainConfig(**base)


@pytest.fixture(scope="session")
def micro_scene_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("micro") / "scene"
    rig = synth.CameraRig(yaw_deg=(0.0, 30.0), roll_deg=(0.0, 90.0, 180.0, 270.0))
    synth.generate_scene(str(out), seed=5, rig=rig, resolution=16)
    return str(out)


@pytest.fixture(scope="session")
def micro_scene(micro_scene_dir):
    return synth.load_scene_dir(micro_scene_dir)


@pytest.fixture(scope="session")
def scene128_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("full") / "scene"
    synth.generate_scene(str(out), seed=7, resolution=128)
    return str(out)


@pytest.fixture(scope="session")
def scene128(scene128_dir):
    return synth.load_scene_dir(scene128_dir)


def finite_diff(fn, tensor, h=1e-5, entries=None, rng=None):
    """Central finite differences of scalar fn() w.r.t. tensor.data entries.

    Returns (numeric, positions). With `entries`, only that many randomly
    chosen positions are probed.
    """
    flat = tensor.data.reshape(-1)
    if entries is None:
        positions = np.arange(flat.size)
    else:
        rng = rng or np.random.default_rng(0)
        positions = rng.choice(flat.size, size=min(entries, flat.size), replace=False)
    numeric = np.zeros(len(positions))
    for n, i in enumerate(positions):
        old = flat[i]
        flat[i] = old + h
        lp = fn()
        flat[i] = old - h
        lm = fn()
        flat[i] = old
        numeric[n] = (lp - lm) / (2 * h)
    return numeric, positions


def rel_err(a, b, floor=1e-8):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return np.max(np.abs(a - b) / np.maximum(floor, np.abs(a) + np.abs(b)))
