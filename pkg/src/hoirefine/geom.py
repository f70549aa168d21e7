"""Core 3D geometry: meshes, pinhole projection, nearest neighbours, Chamfer and Procrustes."""
from __future__ import annotations

import os
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

CHAMFER_CONVENTION = "symmetric-halved-mean-l2-cm"


class GeometryError(ValueError):
    pass


@dataclass
class Mesh:
    vertices: np.ndarray
    edges: np.ndarray = field(default_factory=lambda: np.zeros((0, 2), dtype=np.int64))
    faces: Optional[np.ndarray] = None

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.edges = np.asarray(self.edges, dtype=np.int64).reshape(-1, 2)
        if self.faces is not None:
            self.faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        n = len(self.vertices)
        if n < 1:
            raise GeometryError("mesh needs at least one vertex")
        for name, idx in (("edges", self.edges), ("faces", self.faces)):
            if idx is not None and idx.size and (idx.min() < 0 or idx.max() >= n):
                raise GeometryError(f"{name} index out of range for {n} vertices")
        if len(self.edges):
            key = np.sort(self.edges, axis=1)
            if len(np.unique(key, axis=0)) != len(key):
                raise GeometryError("duplicate edges")

    @property
    def num_vertices(self) -> int:
        return len(self.vertices)

    def with_vertices(self, vertices: np.ndarray) -> "Mesh":
        """Same topology, new positions."""
        return Mesh(vertices, self.edges.copy(), None if self.faces is None else self.faces.copy())

    @classmethod
    def from_faces(cls, vertices, faces) -> "Mesh":
        faces = np.asarray(faces, dtype=np.int64).reshape(-1, 3)
        return cls(vertices, edges_from_faces(faces), faces)


def edges_from_faces(faces: np.ndarray) -> np.ndarray:
    faces = np.asarray(faces, dtype=np.int64).reshape(-1, 3)
    if len(faces) == 0:
        return np.zeros((0, 2), dtype=np.int64)
    e = np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]])
    e = np.sort(e, axis=1)
    e = e[e[:, 0] != e[:, 1]]
    return np.unique(e, axis=0)


@dataclass(frozen=True)
class Camera:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise GeometryError("focal lengths must be positive")
        if self.width < 1 or self.height < 1:
            raise GeometryError("image size must be at least 1x1")

    def to_dict(self) -> dict:
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
                "width": self.width, "height": self.height}

    @classmethod
    def from_dict(cls, d: dict) -> "Camera":
        return cls(float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]),
                   int(d["width"]), int(d["height"]))


@dataclass(frozen=True)
class SimilarityTransform:
    scale: float
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=np.float64)
        if self.scale <= 0:
            raise GeometryError("scale must be positive")
        if abs(np.linalg.det(r) - 1.0) >= 1e-9 or np.abs(r.T @ r - np.eye(3)).max() >= 1e-9:
            raise GeometryError("rotation is not a proper orthonormal matrix")

    @classmethod
    def identity(cls) -> "SimilarityTransform":
        return cls(1.0, np.eye(3), np.zeros(3))


def _points(x, name="points") -> np.ndarray:
    a = np.asarray(x, dtype=np.float64)
    if a.ndim != 2 or a.shape[1] != 3:
        raise GeometryError(f"{name} must be Nx3, got {a.shape}")
    if len(a) == 0:
        raise GeometryError(f"{name} is empty")
    return a


def edge_lengths(mesh: Mesh) -> np.ndarray:
    if len(mesh.edges) == 0:
        raise GeometryError("no edges")
    v = mesh.vertices
    return np.linalg.norm(v[mesh.edges[:, 0]] - v[mesh.edges[:, 1]], axis=1)


def project(points, camera: Camera) -> np.ndarray:
    p = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if np.any(p[:, 2] <= 0):
        raise GeometryError("point behind camera")
    u = camera.fx * p[:, 0] / p[:, 2] + camera.cx
    v = camera.fy * p[:, 1] / p[:, 2] + camera.cy
    return np.stack([u, v], axis=1)


def pairwise_dists(a, b) -> np.ndarray:
    a = _points(a, "A")
    b = _points(b, "B")
    return np.sqrt(((a[:, None, :] - b[None, :, :]) ** 2).sum(-1))


def nn_dists(a, b) -> np.ndarray:
    """Distance from every point of ``a`` to its nearest point in ``b`` (brute force)."""
    return pairwise_dists(a, b).min(axis=1)


def chamfer(a, b) -> float:
    """Symmetric Chamfer distance in centimetres (inputs in metres)."""
    d = pairwise_dists(a, b)
    return float(100.0 * 0.5 * (d.min(axis=1).mean() + d.min(axis=0).mean()))


def procrustes(source, target) -> SimilarityTransform:
    """Closed-form similarity alignment (Umeyama) of ``source`` onto ``target``."""
    src = _points(source, "source")
    tgt = _points(target, "target")
    if src.shape != tgt.shape:
        raise GeometryError(f"shape mismatch {src.shape} vs {tgt.shape}")
    if len(src) < 3:
        raise GeometryError("degenerate configuration")
    mu_s = src.mean(0)
    mu_t = tgt.mean(0)
    xs = src - mu_s
    xt = tgt - mu_t
    sv = np.linalg.svd(xs, compute_uv=False)
    if sv[1] <= 1e-10 * max(sv[0], 1e-300):
        raise GeometryError("degenerate configuration")
    cov = xt.T @ xs / len(src)
    u, s, vt = np.linalg.svd(cov)
    d = np.ones(3)
    if np.linalg.det(u) * np.linalg.det(vt) < 0:
        d[2] = -1.0
    rot = u @ np.diag(d) @ vt
    var_s = (xs ** 2).sum() / len(src)
    scale = float((s * d).sum() / var_s)
    trans = mu_t - scale * rot @ mu_s
    return SimilarityTransform(scale, rot, trans)


def apply_similarity(t: SimilarityTransform, points) -> np.ndarray:
    p = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    return t.scale * p @ np.asarray(t.rotation).T + np.asarray(t.translation)


def alignment_residual(t: SimilarityTransform, source, target) -> float:
    return float(((apply_similarity(t, source) - np.asarray(target)) ** 2).sum())


# OBJ subset: v / f / l lines only.

def write_obj(mesh: Mesh, path) -> None:
    lines = [f"v {x!r} {y!r} {z!r}" for x, y, z in mesh.vertices.tolist()]
    if mesh.faces is not None and len(mesh.faces):
        lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in mesh.faces.tolist()]
    else:
        lines += [f"l {a + 1} {b + 1}" for a, b in mesh.edges.tolist()]
    tmp = f"{path}.tmp"
    with open(tmp, "w") as fh:
        fh.write("\n".join(lines) + "\n")
    os.replace(tmp, path)


def read_obj(path) -> Mesh:
    verts, faces, lines = [], [], []
    try:
        with open(path) as fh:
            for lineno, raw in enumerate(fh, 1):
                parts = raw.split()
                if not parts or parts[0].startswith("#"):
                    continue
                tag = parts[0]
                try:
                    if tag == "v":
                        verts.append([float(x) for x in parts[1:4]])
                    elif tag == "f":
                        faces.append([int(x.split("/")[0]) - 1 for x in parts[1:4]])
                    elif tag == "l":
                        lines.append([int(x) - 1 for x in parts[1:3]])
                except ValueError as exc:
                    raise GeometryError(f"{path}:{lineno}: malformed '{tag}' line") from exc
    except FileNotFoundError as exc:
        raise GeometryError(f"missing mesh file {path}") from exc
    if not verts:
        raise GeometryError(f"{path}: no vertices")
    if faces:
        return Mesh.from_faces(np.array(verts), np.array(faces))
    return Mesh(np.array(verts), np.array(lines, dtype=np.int64).reshape(-1, 2))
