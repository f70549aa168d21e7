"""Forward models: a low-poly articulated body driven by linear blend skinning, rigid object
templates, and deterministic farthest-point downsampling."""
from __future__ import annotations

import json
import os
from dataclasses import dataclass
from functools import lru_cache
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .geom import Mesh, read_obj, write_obj


class BodyModelError(ValueError):
    pass


@dataclass(frozen=True)
class BodyTemplate:
    vertices: np.ndarray  # (V, 3) rest pose
    faces: np.ndarray  # (F, 3)
    parents: Tuple[int, ...]  # parents[0] == -1
    joints: np.ndarray  # (K, 3) rest joint positions
    weights: np.ndarray  # (V, K)
    regressor: np.ndarray  # (K, V)
    joint_names: Tuple[str, ...] = ()

    @property
    def num_joints(self) -> int:
        return len(self.parents)

    @property
    def num_vertices(self) -> int:
        return len(self.vertices)

    def validate(self) -> None:
        k, v = self.num_joints, self.num_vertices
        if self.parents[0] != -1:
            raise BodyModelError("joint 0 must be the root")
        if any(not (0 <= p < i) for i, p in enumerate(self.parents[1:], 1)):
            raise BodyModelError("parents must precede children")
        if self.weights.shape != (v, k) or self.regressor.shape != (k, v):
            raise BodyModelError("weight/regressor shape mismatch")
        if np.abs(self.weights.sum(1) - 1).max() > 1e-9 or self.weights.min() < 0:
            raise BodyModelError("skinning weight rows must be non-negative and sum to 1")
        if np.abs(self.regressor.sum(1) - 1).max() > 1e-9:
            raise BodyModelError("regressor rows must sum to 1")

    def rest_mesh(self) -> Mesh:
        return Mesh.from_faces(self.vertices, self.faces)


@dataclass
class BodyParams:
    rotations: np.ndarray  # (K, 3) axis-angle
    translation: np.ndarray  # (3,)

    def __post_init__(self):
        self.rotations = np.asarray(self.rotations, dtype=np.float64).reshape(-1, 3)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.rotations.ravel(), self.translation])

    @classmethod
    def from_vector(cls, vec, num_joints: int) -> "BodyParams":
        vec = np.asarray(vec, dtype=np.float64)
        if vec.shape != (3 * num_joints + 3,):
            raise BodyModelError(f"expected {3 * num_joints + 3} body parameters, got {vec.shape}")
        return cls(vec[:-3].reshape(num_joints, 3), vec[-3:])

    @classmethod
    def zeros(cls, num_joints: int) -> "BodyParams":
        return cls(np.zeros((num_joints, 3)), np.zeros(3))


@dataclass
class ObjectPose:
    rotation: np.ndarray  # axis-angle
    translation: np.ndarray

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)


@dataclass(frozen=True)
class ObjectTemplate:
    category: int
    name: str
    mesh: Mesh


def rodrigues(rotvec) -> np.ndarray:
    """Axis-angle (..., 3) to rotation matrices (..., 3, 3)."""
    r = np.asarray(rotvec, dtype=np.float64)
    theta = np.linalg.norm(r, axis=-1)[..., None, None]
    k = np.zeros(r.shape[:-1] + (3, 3))
    k[..., 0, 1], k[..., 0, 2] = -r[..., 2], r[..., 1]
    k[..., 1, 0], k[..., 1, 2] = r[..., 2], -r[..., 0]
    k[..., 2, 0], k[..., 2, 1] = -r[..., 1], r[..., 0]
    small = theta < 1e-8
    safe = np.where(small, 1.0, theta)
    a = np.where(small, 1.0, np.sin(safe) / safe)
    b = np.where(small, 0.5, (1.0 - np.cos(safe)) / safe ** 2)
    return np.eye(3) + a * k + b * (k @ k)


def posed_joints(template: BodyTemplate, params: BodyParams) -> Tuple[np.ndarray, np.ndarray]:
    """World rotations (K,3,3) and world joint positions (K,3), before root translation."""
    k = template.num_joints
    if params.rotations.shape != (k, 3):
        raise BodyModelError(f"pose has {params.rotations.shape[0]} joints, template has {k}")
    local = rodrigues(params.rotations)
    rot = np.zeros((k, 3, 3))
    pos = np.zeros((k, 3))
    rot[0] = local[0]
    pos[0] = template.joints[0]
    for j in range(1, k):
        p = template.parents[j]
        rot[j] = rot[p] @ local[j]
        pos[j] = pos[p] + rot[p] @ (template.joints[j] - template.joints[p])
    return rot, pos


def lbs_forward(template: BodyTemplate, params: BodyParams) -> Mesh:
    rot, pos = posed_joints(template, params)
    # per-bone rigid image of every vertex: (K, V, 3)
    local = template.vertices[None, :, :] - template.joints[:, None, :]
    per_bone = np.einsum("kab,kvb->kva", rot, local) + pos[:, None, :]
    verts = np.einsum("vk,kva->va", template.weights, per_bone) + params.translation
    return Mesh.from_faces(verts, template.faces)


def lbs_joints(template: BodyTemplate, params: BodyParams) -> np.ndarray:
    return posed_joints(template, params)[1] + params.translation


def object_forward(template: ObjectTemplate, pose: ObjectPose) -> Mesh:
    r = rodrigues(pose.rotation)
    return template.mesh.with_vertices(template.mesh.vertices @ r.T + pose.translation)


def downsample(mesh: Mesh, target: int) -> Tuple[Mesh, np.ndarray]:
    """Farthest-point subsampling seeded at vertex 0.

    Returned indices are sorted; the new mesh links selected vertices that were at most two
    hops apart in the original edge graph.
    """
    v = mesh.vertices
    n = len(v)
    if not 1 <= target <= n:
        raise BodyModelError(f"downsample target {target} outside [1, {n}]")
    chosen = [0]
    dist = np.linalg.norm(v - v[0], axis=1)
    dist[0] = -1.0
    for _ in range(target - 1):
        nxt = int(np.argmax(dist))
        chosen.append(nxt)
        dist = np.minimum(dist, np.linalg.norm(v - v[nxt], axis=1))
        dist[chosen] = -1.0
    idx = np.array(sorted(chosen), dtype=np.int64)
    adj = np.zeros((n, n), dtype=bool)
    if len(mesh.edges):
        adj[mesh.edges[:, 0], mesh.edges[:, 1]] = True
        adj[mesh.edges[:, 1], mesh.edges[:, 0]] = True
    a = adj.astype(np.int64)
    reach = adj | ((a @ a) > 0)
    sub = reach[np.ix_(idx, idx)]
    i, j = np.nonzero(np.triu(sub, k=1))
    return Mesh(v[idx], np.stack([i, j], axis=1)), idx


# Default assets.

_BODY_JOINTS = (
    ("pelvis", -1, (0.0, 0.0, 0.0)),
    ("chest", 0, (0.0, -0.30, 0.0)),
    ("l_shoulder", 1, (0.18, -0.45, 0.0)),
    ("l_elbow", 2, (0.45, -0.45, 0.0)),
    ("r_shoulder", 1, (-0.18, -0.45, 0.0)),
    ("r_elbow", 4, (-0.45, -0.45, 0.0)),
    ("l_hip", 0, (0.10, 0.02, 0.0)),
    ("r_hip", 0, (-0.10, 0.02, 0.0)),
)

# (joint, start, end, radius, rings, anchors_joint)
_BODY_PARTS = (
    (0, (0.0, 0.0, 0.0), (0.0, -0.30, 0.0), 0.14, 4, True),
    (1, (0.0, -0.30, 0.0), (0.0, -0.52, 0.0), 0.15, 4, True),
    (1, (0.0, -0.56, 0.0), (0.0, -0.78, 0.0), 0.09, 3, False),
    (2, (0.18, -0.45, 0.0), (0.45, -0.45, 0.0), 0.05, 4, True),
    (3, (0.45, -0.45, 0.0), (0.72, -0.45, 0.0), 0.04, 4, True),
    (4, (-0.18, -0.45, 0.0), (-0.45, -0.45, 0.0), 0.05, 4, True),
    (5, (-0.45, -0.45, 0.0), (-0.72, -0.45, 0.0), 0.04, 4, True),
    (6, (0.10, 0.02, 0.0), (0.10, 0.90, 0.0), 0.07, 5, True),
    (7, (-0.10, 0.02, 0.0), (-0.10, 0.90, 0.0), 0.07, 5, True),
)
_AROUND = 6


def _perp_basis(d: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    helper = np.array([0.0, 0.0, 1.0]) if abs(d[2]) < 0.9 else np.array([1.0, 0.0, 0.0])
    e1 = np.cross(d, helper)
    e1 /= np.linalg.norm(e1)
    return e1, np.cross(d, e1)


def _tube(start, end, radius, rings, around, end_cap=True):
    """Tube: ring vertices, start cap centre, optional end cap centre. Returns verts, faces, ring fractions."""
    start, end = np.asarray(start, float), np.asarray(end, float)
    d = end - start
    d /= np.linalg.norm(d)
    e1, e2 = _perp_basis(d)
    ang = 2 * np.pi * np.arange(around) / around
    verts, frac = [], []
    for r in range(rings):
        f = r / (rings - 1)
        c = start + f * (end - start)
        for a in ang:
            verts.append(c + radius * (np.cos(a) * e1 + np.sin(a) * e2))
            frac.append(f)
    verts.append(start)
    frac.append(0.0)
    if end_cap:
        verts.append(end)
        frac.append(1.0)
    faces = []
    for r in range(rings - 1):
        for i in range(around):
            a, b = r * around + i, r * around + (i + 1) % around
            c, e = a + around, b + around
            faces += [(a, b, e), (a, e, c)]
    s_cap, e_cap = rings * around, rings * around + 1
    last = (rings - 1) * around
    for i in range(around):
        faces.append((s_cap, (i + 1) % around, i))
        if end_cap:
            faces.append((e_cap, last + i, last + (i + 1) % around))
    return np.array(verts), np.array(faces), np.array(frac)


@lru_cache(maxsize=None)
def default_body_template() -> BodyTemplate:
    names = tuple(j[0] for j in _BODY_JOINTS)
    parents = tuple(j[1] for j in _BODY_JOINTS)
    joints = np.array([j[2] for j in _BODY_JOINTS], dtype=np.float64)
    k = len(parents)
    verts, faces, wrows, anchors = [], [], [], {}
    starts = {p[1] for p in _BODY_PARTS}
    for joint, start, end, radius, rings, anchor in _BODY_PARTS:
        v, f, frac = _tube(start, end, radius, rings, _AROUND, end_cap=end not in starts)
        base = sum(len(x) for x in verts)
        if anchor:
            anchors[joint] = base + np.arange(_AROUND)
        verts.append(v)
        faces.append(f + base)
        for fr in frac:
            w = np.zeros(k)
            parent = parents[joint]
            if anchor and parent >= 0 and fr < 0.25:
                own = 0.5 + 2.0 * fr
                w[joint] = own
                w[parent] = 1.0 - own
            else:
                w[joint] = 1.0
            wrows.append(w)
    vertices = np.concatenate(verts)
    reg = np.zeros((k, len(vertices)))
    for j, idx in anchors.items():
        reg[j, idx] = 1.0 / len(idx)
    t = BodyTemplate(vertices, np.concatenate(faces), parents, joints, np.array(wrows), reg, names)
    t.validate()
    return t


OBJECT_SPECS = (
    # name, half-extents, (latitude exponent, longitude exponent)
    ("ball", (0.15, 0.15, 0.15), (1.0, 1.0)),
    ("box", (0.25, 0.18, 0.12), (0.3, 0.3)),
    ("stick", (0.05, 0.05, 0.40), (0.3, 1.0)),
)


def _spow(x, e):
    return np.sign(x) * np.abs(x) ** e


def superquadric_mesh(extents, exponents, rings: int = 8, around: int = 8) -> Mesh:
    a, b, c = extents
    e1, e2 = exponents
    eta = np.linspace(-np.pi / 2, np.pi / 2, rings + 2)[1:-1]
    omega = 2 * np.pi * np.arange(around) / around
    verts = []
    for h in eta:
        for w in omega:
            ch, sh = _spow(np.cos(h), e1), _spow(np.sin(h), e1)
            verts.append((a * ch * _spow(np.cos(w), e2), b * ch * _spow(np.sin(w), e2), c * sh))
    faces = []
    for r in range(rings - 1):
        for i in range(around):
            p, q = r * around + i, r * around + (i + 1) % around
            faces += [(p, q, q + around), (p, q + around, p + around)]
    last = (rings - 1) * around
    for i in range(1, around - 1):
        faces.append((0, i + 1, i))
        faces.append((last, last + i, last + i + 1))
    return Mesh.from_faces(np.array(verts), np.array(faces))


@lru_cache(maxsize=None)
def default_object_templates() -> Tuple[ObjectTemplate, ...]:
    return tuple(ObjectTemplate(i, name, superquadric_mesh(ext, exp))
                 for i, (name, ext, exp) in enumerate(OBJECT_SPECS))


def object_template(category: int) -> ObjectTemplate:
    templates = default_object_templates()
    if not 0 <= category < len(templates):
        raise BodyModelError(f"unknown object category {category}")
    return templates[category]


@lru_cache(maxsize=None)
def human_downsample(target: int) -> Tuple[Mesh, np.ndarray]:
    """Fixed farthest-point selection on the rest template (cached per target count)."""
    sub, idx = downsample(default_body_template().rest_mesh(), target)
    idx.setflags(write=False)
    return sub, idx


def downsampled_human(full: Mesh, target: int) -> Mesh:
    sub, idx = human_downsample(target)
    return sub.with_vertices(full.vertices[idx])


# Serialisation: JSON for the skeleton/weights, OBJ for geometry.

def save_body_template(template: BodyTemplate, directory) -> None:
    os.makedirs(directory, exist_ok=True)
    write_obj(template.rest_mesh(), os.path.join(directory, "template.obj"))
    meta = {
        "joint_names": list(template.joint_names),
        "parents": list(template.parents),
        "joints": template.joints.tolist(),
        "weights": template.weights.tolist(),
        "regressor": template.regressor.tolist(),
    }
    with open(os.path.join(directory, "skeleton.json"), "w") as fh:
        json.dump(meta, fh)


def load_body_template(directory) -> BodyTemplate:
    mesh = read_obj(os.path.join(directory, "template.obj"))
    with open(os.path.join(directory, "skeleton.json")) as fh:
        meta = json.load(fh)
    t = BodyTemplate(mesh.vertices, mesh.faces, tuple(meta["parents"]), np.array(meta["joints"]),
                     np.array(meta["weights"]), np.array(meta["regressor"]),
                     tuple(meta.get("joint_names", ())))
    t.validate()
    return t
