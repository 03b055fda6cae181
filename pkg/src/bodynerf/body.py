"""Procedural articulated body: a capsule skeleton controlled by pose and
shape parameters, used as the geometric prior for the whole pipeline.

The body is 16 closed capsules (torso, pelvis, neck, head, and left/right
upper arm, forearm, hand, thigh, shin, foot), one per joint of the kinematic
chain. Each capsule is welded and closed on its own; the union satisfies the
watertight edge contract (every edge shared by exactly two faces). Proximal
caps are centered on their joints, so rigid posing keeps joints covered.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

NUM_JOINTS = 16
NUM_SHAPE = 10

# joint name, parent index, rest offset from parent, length-scale group
_JOINTS = [
    ("pelvis",      -1, (0.0,    0.0, 0.0),    0),
    ("torso",        0, (0.0,    0.0, 0.08),   0),
    ("neck",         1, (0.0,    0.0, 0.46),   0),
    ("head",         2, (0.0,    0.0, 0.10),   6),
    ("l_upper_arm",  1, (0.19,   0.0, 0.39),   9),
    ("l_lower_arm",  4, (0.26,   0.0, 0.0),    2),
    ("l_hand",       5, (0.23,   0.0, 0.0),    2),
    ("r_upper_arm",  1, (-0.19,  0.0, 0.39),   9),
    ("r_lower_arm",  7, (-0.26,  0.0, 0.0),    2),
    ("r_hand",       8, (-0.23,  0.0, 0.0),    2),
    ("l_upper_leg",  0, (0.09,   0.0, -0.02),  9),
    ("l_lower_leg", 10, (0.0,    0.0, -0.42),  4),
    ("l_foot",      11, (0.0,    0.0, -0.40),  4),
    ("r_upper_leg",  0, (-0.09,  0.0, -0.02),  9),
    ("r_lower_leg", 13, (0.0,    0.0, -0.42),  4),
    ("r_foot",      14, (0.0,    0.0, -0.40),  4),
]

# per capsule: joint, local axis start, local axis end, radius,
# length-scale group, radius-scale group
_CAPSULES = [
    ("pelvis",      0, (0.0,  0.0,  -0.06), (0.0,  0.0,  0.06),  0.11,  0, 1),
    ("torso",       1, (0.0,  0.0,   0.0),  (0.0,  0.0,  0.42),  0.13,  0, 1),
    ("neck",        2, (0.0,  0.0,   0.0),  (0.0,  0.0,  0.08),  0.05,  6, 6),
    ("head",        3, (0.0,  0.0,   0.02), (0.0,  0.0,  0.14),  0.095, 6, 6),
    ("l_upper_arm", 4, (0.0,  0.0,   0.0),  (0.26, 0.0,  0.0),   0.045, 2, 3),
    ("l_lower_arm", 5, (0.0,  0.0,   0.0),  (0.23, 0.0,  0.0),   0.04,  2, 3),
    ("l_hand",      6, (0.0,  0.0,   0.0),  (0.10, 0.0,  0.0),   0.035, 7, 7),
    ("r_upper_arm", 7, (0.0,  0.0,   0.0),  (-0.26, 0.0, 0.0),   0.045, 2, 3),
    ("r_lower_arm", 8, (0.0,  0.0,   0.0),  (-0.23, 0.0, 0.0),   0.04,  2, 3),
    ("r_hand",      9, (0.0,  0.0,   0.0),  (-0.10, 0.0, 0.0),   0.035, 7, 7),
    ("l_upper_leg", 10, (0.0, 0.0,   0.0),  (0.0,  0.0, -0.42),  0.07,  4, 5),
    ("l_lower_leg", 11, (0.0, 0.0,   0.0),  (0.0,  0.0, -0.40),  0.055, 4, 5),
    ("l_foot",      12, (0.0, 0.04,  -0.04), (0.0, 0.14, -0.04), 0.04,  8, 8),
    ("r_upper_leg", 13, (0.0, 0.0,   0.0),  (0.0,  0.0, -0.42),  0.07,  4, 5),
    ("r_lower_leg", 14, (0.0, 0.0,   0.0),  (0.0,  0.0, -0.40),  0.055, 4, 5),
    ("r_foot",      15, (0.0, 0.04,  -0.04), (0.0, 0.14, -0.04), 0.04,  8, 8),
]

PART_NAMES = [c[0] for c in _CAPSULES]
JOINT_PARENTS = np.array([j[1] for j in _JOINTS], dtype=np.int64)


@dataclass
class BodyParams:
    """Pose (per-joint axis-angle, radians) and shape (10 scale factors)."""

    theta: np.ndarray = field(default_factory=lambda: np.zeros((NUM_JOINTS, 3)))
    beta: np.ndarray = field(default_factory=lambda: np.ones(NUM_SHAPE))

    def __post_init__(self):
        self.theta = np.asarray(self.theta, dtype=np.float64).reshape(NUM_JOINTS, 3)
        self.beta = np.asarray(self.beta, dtype=np.float64).reshape(NUM_SHAPE)

    def validate(self):
        mags = np.linalg.norm(self.theta, axis=1)
        if np.any(mags > np.pi + 1e-12):
            j = int(np.argmax(mags))
            raise ValueError(f"joint {j} rotation magnitude {mags[j]:.4f} exceeds pi")
        if np.any(self.beta <= 0.5) or np.any(self.beta >= 2.0):
            raise ValueError(f"shape factors must lie in (0.5, 2.0), got {self.beta}")
        return self


@dataclass
class BodyMesh:
    """Triangle mesh with per-vertex normals, skinning weights, part labels,
    and the rest-pose joint centers of its kinematic chain."""

    vertices: np.ndarray
    faces: np.ndarray
    normals: np.ndarray
    skin_weights: np.ndarray
    part_ids: np.ndarray
    joints: np.ndarray

    def bounds(self):
        return self.vertices.min(axis=0), self.vertices.max(axis=0)


def _orthonormal_frame(u):
    ref = np.array([0.0, 0.0, 1.0]) if abs(u[2]) < 0.9 else np.array([1.0, 0.0, 0.0])
    e1 = np.cross(ref, u)
    e1 /= np.linalg.norm(e1)
    e2 = np.cross(u, e1)
    return e1, e2


def capsule_mesh(a, b, radius, level=2):
    """Closed capsule from `a` to `b`.

    Tessellation schedule: segments = 6*level + 1 around the axis,
    2*level latitude rings, plus the two poles, giving
    (6*level+1) * 2*level + 2 vertices and twice as many faces as that
    product (minus poles) -- 54 vertices / 104 faces at level 2.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    seg = 6 * level + 1
    axis = b - a
    length = np.linalg.norm(axis)
    u = axis / length if length > 0 else np.array([0.0, 0.0, 1.0])
    e1, e2 = _orthonormal_frame(u)

    theta = 2.0 * np.pi * np.arange(seg) / seg
    radial = np.outer(np.cos(theta), e1) + np.outer(np.sin(theta), e2)  # (S,3)

    # sublinear latitude spacing keeps area-weighted vertex normals within
    # a few degrees of the analytic ones at coarse levels
    rings = []
    for i in range(1, level + 1):          # southern cap, pole side -> equator
        phi = 0.5 * np.pi * (i / level) ** 0.75
        rings.append(a + radius * (-np.cos(phi) * u + np.sin(phi) * radial))
    for i in range(1, level + 1):          # northern cap, equator -> pole side
        phi = 0.5 * np.pi * ((level - i + 1) / level) ** 0.75
        rings.append(b + radius * (np.cos(phi) * u + np.sin(phi) * radial))

    south = a - radius * u
    north = b + radius * u
    verts = np.vstack([south[None, :]] + rings + [north[None, :]])

    def rv(ring, j):
        return 1 + ring * seg + (j % seg)

    faces = []
    for j in range(seg):                   # south fan
        faces.append((0, rv(0, j + 1), rv(0, j)))
    for ring in range(2 * level - 1):      # latitude bands
        for j in range(seg):
            a0, b0 = rv(ring, j), rv(ring, j + 1)
            c0, d0 = rv(ring + 1, j + 1), rv(ring + 1, j)
            faces.append((a0, b0, c0))
            faces.append((a0, c0, d0))
    top = len(verts) - 1
    for j in range(seg):                   # north fan
        faces.append((top, rv(2 * level - 1, j), rv(2 * level - 1, j + 1)))
    return verts, np.array(faces, dtype=np.int64)


def capsule_vertex_count(level):
    return (6 * level + 1) * 2 * level + 2


def vertex_normals(vertices, faces):
    """Area-weighted vertex normals, renormalized to unit length."""
    v0, v1, v2 = vertices[faces[:, 0]], vertices[faces[:, 1]], vertices[faces[:, 2]]
    fn = np.cross(v1 - v0, v2 - v0)        # length = 2 * face area
    normals = np.zeros_like(vertices)
    for k in range(3):
        np.add.at(normals, faces[:, k], fn)
    lens = np.linalg.norm(normals, axis=1, keepdims=True)
    lens[lens == 0.0] = 1.0
    return normals / lens


def rest_joints(beta):
    """Rest-pose joint centers for shape `beta`."""
    joints = np.zeros((NUM_JOINTS, 3))
    for j, (_, parent, offset, group) in enumerate(_JOINTS):
        off = np.asarray(offset) * beta[group]
        joints[j] = off if parent < 0 else joints[parent] + off
    return joints


def build_template(params, level=2):
    """Rest-pose body mesh for the given shape parameters.

    Deterministic for fixed beta and tessellation level; rejects
    out-of-range shape factors.
    """
    params.validate()
    beta = params.beta
    joints = rest_joints(beta)

    all_v, all_f, all_part = [], [], []
    offset = 0
    for part_id, (_, jidx, la, lb, radius, lgroup, rgroup) in enumerate(_CAPSULES):
        a = joints[jidx] + np.asarray(la) * beta[lgroup]
        b = joints[jidx] + np.asarray(lb) * beta[lgroup]
        v, f = capsule_mesh(a, b, radius * beta[rgroup], level)
        all_v.append(v)
        all_f.append(f + offset)
        all_part.append(np.full(len(v), part_id, dtype=np.int64))
        offset += len(v)

    vertices = np.vstack(all_v)
    faces = np.vstack(all_f)
    part_ids = np.concatenate(all_part)

    weights = np.zeros((len(vertices), NUM_JOINTS))
    joint_of_part = np.array([c[1] for c in _CAPSULES], dtype=np.int64)
    weights[np.arange(len(vertices)), joint_of_part[part_ids]] = 1.0

    return BodyMesh(vertices=vertices, faces=faces,
                    normals=vertex_normals(vertices, faces),
                    skin_weights=weights, part_ids=part_ids, joints=joints)


def rotation_from_axis_angle(v):
    """Rodrigues rotation matrix for axis-angle vector `v`."""
    angle = np.linalg.norm(v)
    if angle < 1e-12:
        return np.eye(3)
    k = v / angle
    kx = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0.0]])
    return np.eye(3) + np.sin(angle) * kx + (1.0 - np.cos(angle)) * (kx @ kx)


def joint_transforms(joints, theta):
    """Global affine (M, t) per joint mapping rest space to posed space."""
    mats = np.zeros((NUM_JOINTS, 3, 3))
    trans = np.zeros((NUM_JOINTS, 3))
    for j in range(NUM_JOINTS):
        r = rotation_from_axis_angle(theta[j])
        c = joints[j]
        parent = JOINT_PARENTS[j]
        if parent < 0:
            mats[j] = r
            trans[j] = c - r @ c
        else:
            mats[j] = mats[parent] @ r
            trans[j] = mats[parent] @ (c - r @ c) + trans[parent]
    return mats, trans


def pose_mesh(template, theta):
    """Linear blend skinning over the kinematic chain; normals are
    recomputed from the posed faces."""
    theta = np.asarray(theta, dtype=np.float64).reshape(NUM_JOINTS, 3)
    mags = np.linalg.norm(theta, axis=1)
    if np.any(mags > np.pi + 1e-12):
        j = int(np.argmax(mags))
        raise ValueError(f"joint {j} rotation magnitude {mags[j]:.4f} exceeds pi")
    mats, trans = joint_transforms(template.joints, theta)
    # per-joint transformed copies blended by skinning weight
    v = template.vertices
    posed = np.zeros_like(v)
    w = template.skin_weights
    for j in range(NUM_JOINTS):
        col = w[:, j]
        used = col != 0.0
        if not np.any(used):
            continue
        posed[used] += col[used, None] * (v[used] @ mats[j].T + trans[j])
    posed_joints = np.einsum("jab,jb->ja", mats, template.joints) + trans
    return BodyMesh(vertices=posed, faces=template.faces,
                    normals=vertex_normals(posed, template.faces),
                    skin_weights=template.skin_weights,
                    part_ids=template.part_ids, joints=posed_joints)


def watertight_violations(faces):
    """Number of edges not shared by exactly two faces."""
    edges = np.vstack([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]])
    edges = np.sort(edges, axis=1)
    _, counts = np.unique(edges, axis=0, return_counts=True)
    return int(np.count_nonzero(counts != 2))


def dilated_aabb(mesh, margin=0.1):
    lo, hi = mesh.bounds()
    return lo - margin, hi + margin
