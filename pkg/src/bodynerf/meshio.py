"""File IO for meshes, point clouds, and images.

Float formatting uses repr() (shortest exact round-trip) so regenerated
datasets are byte-identical under fixed seeds.
"""

from __future__ import annotations

import numpy as np
from PIL import Image


def save_obj(path, vertices, faces):
    with open(path, "w") as f:
        for v in np.asarray(vertices, dtype=np.float64):
            f.write(f"v {float(v[0])!r} {float(v[1])!r} {float(v[2])!r}\n")
        for tri in np.asarray(faces, dtype=np.int64):
            f.write(f"f {tri[0] + 1} {tri[1] + 1} {tri[2] + 1}\n")


def load_obj(path):
    verts, faces = [], []
    with open(path) as f:
        for line in f:
            parts = line.split()
            if not parts:
                continue
            if parts[0] == "v":
                verts.append([float(x) for x in parts[1:4]])
            elif parts[0] == "f":
                idx = [int(p.split("/")[0]) - 1 for p in parts[1:]]
                for k in range(1, len(idx) - 1):
                    faces.append([idx[0], idx[k], idx[k + 1]])
    return (np.asarray(verts, dtype=np.float64),
            np.asarray(faces, dtype=np.int64).reshape(-1, 3))


def save_ply_points(path, points, colors=None):
    """ASCII PLY point cloud; colors are float RGB in [0,1]."""
    points = np.asarray(points, dtype=np.float64)
    n = len(points)
    with open(path, "w") as f:
        f.write("ply\nformat ascii 1.0\n")
        f.write(f"element vertex {n}\n")
        f.write("property float x\nproperty float y\nproperty float z\n")
        if colors is not None:
            f.write("property uchar red\nproperty uchar green\nproperty uchar blue\n")
        f.write("end_header\n")
        if colors is None:
            for p in points:
                f.write(f"{float(p[0])!r} {float(p[1])!r} {float(p[2])!r}\n")
        else:
            cols = np.clip(np.round(np.asarray(colors) * 255.0), 0, 255).astype(np.uint8)
            for p, c in zip(points, cols):
                f.write(f"{float(p[0])!r} {float(p[1])!r} {float(p[2])!r} {c[0]} {c[1]} {c[2]}\n")


def save_image(path, img):
    """Write a float [0,1] image as 8-bit PNG (RGB or grayscale)."""
    arr = np.asarray(img, dtype=np.float64)
    u8 = np.clip(np.round(arr * 255.0), 0, 255).astype(np.uint8)
    if u8.ndim == 2:
        Image.fromarray(u8, mode="L").save(path)
    else:
        Image.fromarray(u8, mode="RGB").save(path)


def load_image(path):
    """Read a PNG back to float in [0,1]."""
    arr = np.asarray(Image.open(path), dtype=np.float64)
    return arr / 255.0


def save_mask(path, mask):
    u8 = np.where(np.asarray(mask), 255, 0).astype(np.uint8)
    Image.fromarray(u8, mode="L").save(path)


def load_mask(path):
    arr = np.asarray(Image.open(path))
    return arr >= 128
