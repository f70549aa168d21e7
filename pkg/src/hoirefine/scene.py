"""Synthetic human-object scenes: sampling, rasterisation, contact labels, dataset I/O."""
from __future__ import annotations

import dataclasses
import json
import logging
import os
import shutil
import tempfile
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

from . import body
from .body import BodyParams, ObjectPose
from .geom import CHAMFER_CONVENTION, Camera, GeometryError, Mesh, nn_dists, project, read_obj, write_obj

log = logging.getLogger(__name__)

DATASET_FORMAT = 1
TEST_SEED_OFFSET = 1_000_000  # test split draws from a disjoint block of per-sample seeds


class SceneError(RuntimeError):
    pass


class DatasetError(ValueError):
    pass


@dataclass
class SceneConfig:
    width: int = 64
    height: int = 64
    focal: float = 70.0
    contact_fraction: float = 0.75
    contact_threshold: float = 0.05
    contact_mode: str = "vertex"  # or "surface"
    categories: Tuple[int, ...] = (0, 1, 2)
    human_vertices: int = 108
    root_depth: Tuple[float, float] = (3.0, 3.6)
    root_x: float = 0.25
    root_y: Tuple[float, float] = (-0.16, 0.04)
    root_yaw: float = 0.6
    root_tilt: float = 0.12
    # per-joint axis-angle bound, indexed like the default skeleton
    joint_limits: Tuple[float, ...] = (0.0, 0.3, 0.9, 1.2, 0.9, 1.2, 0.4, 0.4)
    object_rotation: float = np.pi / 2
    press: Tuple[float, float] = (0.05, 0.15)  # extra push into the body for contact scenes
    separation: float = 0.15  # minimum human-object gap for non-contact scenes
    depth_ref: float = 2.0  # inverse depth channel = depth_ref / z

    def camera(self) -> Camera:
        return Camera(self.focal, self.focal, (self.width - 1) / 2, (self.height - 1) / 2,
                      self.width, self.height)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}

    @classmethod
    def from_dict(cls, d: dict) -> "SceneConfig":
        names = {f.name: f for f in dataclasses.fields(cls)}
        unknown = set(d) - set(names)
        if unknown:
            raise ValueError(f"unknown scene config field(s): {sorted(unknown)}")
        kw = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}
        cfg = cls(**kw)
        if not 0.0 <= cfg.contact_fraction <= 1.0:
            raise ValueError("contact_fraction must lie in [0, 1]")
        if cfg.contact_mode not in ("vertex", "surface"):
            raise ValueError(f"contact_mode must be 'vertex' or 'surface', got {cfg.contact_mode!r}")
        return cfg


@dataclass
class Scene:
    body: BodyParams
    object_pose: ObjectPose
    category: int
    camera: Camera
    seed: int


@dataclass
class Sample:
    raster: np.ndarray  # (5, H, W) float32
    human: Mesh  # downsampled GT human
    obj: Mesh
    contact_h: np.ndarray  # (V_h,) float32 in {0, 1}
    contact_o: np.ndarray  # (V_o,) float32
    body: BodyParams
    object_pose: ObjectPose
    category: int
    camera: Camera
    seed: int

    @property
    def has_contact(self) -> bool:
        return bool(self.contact_h.any())


# ---------------------------------------------------------------------------
# contact labels

def _point_triangle_dists(p: np.ndarray, tri: np.ndarray) -> np.ndarray:
    """Distances from points (N,3) to triangles (T,3,3), shape (N,T). Closest-point by Voronoi region."""
    a, b, c = tri[:, 0], tri[:, 1], tri[:, 2]
    ab, ac = b - a, c - a
    ap = p[:, None] - a[None]
    bp = p[:, None] - b[None]
    cp = p[:, None] - c[None]
    d1, d2 = (ap * ab).sum(-1), (ap * ac).sum(-1)
    d3, d4 = (bp * ab).sum(-1), (bp * ac).sum(-1)
    d5, d6 = (cp * ab).sum(-1), (cp * ac).sum(-1)
    va = d3 * d6 - d5 * d4
    vb = d5 * d2 - d1 * d6
    vc = d1 * d4 - d3 * d2

    with np.errstate(divide="ignore", invalid="ignore"):
        # interior first, then overwrite with edge and vertex regions
        denom = va + vb + vc
        v = vb / denom
        w = vc / denom
        closest = a + v[..., None] * ab + w[..., None] * ac

        t_ab = d1 / (d1 - d3)
        m = (vc <= 0) & (d1 >= 0) & (d3 <= 0)
        closest = np.where(m[..., None], a + t_ab[..., None] * ab, closest)
        t_ac = d2 / (d2 - d6)
        m = (vb <= 0) & (d2 >= 0) & (d6 <= 0)
        closest = np.where(m[..., None], a + t_ac[..., None] * ac, closest)
        t_bc = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        m = (va <= 0) & ((d4 - d3) >= 0) & ((d5 - d6) >= 0)
        closest = np.where(m[..., None], b + t_bc[..., None] * (c - b), closest)

    m = (d1 <= 0) & (d2 <= 0)
    closest = np.where(m[..., None], a, closest)
    m = (d3 >= 0) & (d4 <= d3)
    closest = np.where(m[..., None], b, closest)
    m = (d6 >= 0) & (d5 <= d6)
    closest = np.where(m[..., None], c, closest)
    return np.linalg.norm(p[:, None] - closest, axis=-1)


def _surface_dists(points: np.ndarray, mesh: Mesh) -> np.ndarray:
    if mesh.faces is None or len(mesh.faces) == 0:
        return nn_dists(points, mesh.vertices)
    tri = mesh.vertices[mesh.faces]
    return np.minimum(_point_triangle_dists(points, tri).min(1), nn_dists(points, mesh.vertices))


def label_contact(human: Mesh, obj: Mesh, threshold: float = 0.05,
                  mode: str = "vertex") -> Tuple[np.ndarray, np.ndarray]:
    """Binary contact maps (float32) for both meshes.

    ``vertex`` mode thresholds the nearest counterpart vertex distance; ``surface`` mode
    thresholds the distance to the counterpart's triangles (meshes without faces fall back
    to vertices).
    """
    h, o = human.vertices, obj.vertices
    if mode == "vertex":
        dh, do = nn_dists(h, o), nn_dists(o, h)
    elif mode == "surface":
        dh, do = _surface_dists(h, obj), _surface_dists(o, human)
    else:
        raise ValueError(f"unknown contact mode {mode!r}")
    return (dh <= threshold).astype(np.float32), (do <= threshold).astype(np.float32)


# ---------------------------------------------------------------------------
# sampling

def _random_rotvec(rng: np.random.Generator, max_angle: float) -> np.ndarray:
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    return axis * rng.uniform(0.0, max_angle)


def _sample_body(rng: np.random.Generator, cfg: SceneConfig) -> BodyParams:
    k = len(cfg.joint_limits)
    rot = rng.uniform(-1.0, 1.0, size=(k, 3)) * np.asarray(cfg.joint_limits)[:, None]
    rot[0] = [rng.uniform(-cfg.root_tilt, cfg.root_tilt),
              rng.uniform(-cfg.root_yaw, cfg.root_yaw),
              rng.uniform(-cfg.root_tilt, cfg.root_tilt)]
    t = np.array([rng.uniform(-cfg.root_x, cfg.root_x), rng.uniform(*cfg.root_y),
                  rng.uniform(*cfg.root_depth)])
    return BodyParams(rot, t)


def _in_frame(points: np.ndarray, cam: Camera, margin: float = 1.0) -> bool:
    if points[:, 2].min() <= 0.1:
        return False
    uv = project(points, cam)
    return bool((uv[:, 0] >= margin).all() and (uv[:, 0] <= cam.width - 1 - margin).all()
                and (uv[:, 1] >= margin).all() and (uv[:, 1] <= cam.height - 1 - margin).all())


def _place_contact(rng, cfg, human_small: np.ndarray, tpl: body.ObjectTemplate,
                   rotvec: np.ndarray) -> np.ndarray:
    """Start outside a random body vertex, slide the object along the closest pair until
    that pair is half the contact threshold apart, then press it in by ``cfg.press``."""
    local = (body.rodrigues(rotvec) @ tpl.mesh.vertices.T).T
    anchor = human_small[rng.integers(len(human_small))]
    outward = anchor - human_small.mean(0)
    outward[2] = min(outward[2], 0.0) - 0.3  # bias towards the camera so contacts stay visible
    outward += rng.normal(scale=0.3, size=3)
    outward /= np.linalg.norm(outward)
    radius = np.linalg.norm(local, axis=1).max()
    t = anchor + outward * (radius + 0.1)
    for _ in range(3):
        d = np.linalg.norm(human_small[:, None] - (local + t)[None], axis=-1)
        i, j = np.unravel_index(np.argmin(d), d.shape)
        gap = human_small[i] - (local[j] + t)
        dist = np.linalg.norm(gap)
        target = 0.5 * cfg.contact_threshold
        if dist <= target:
            break
        t = t + gap * (1.0 - target / dist)
    return t - outward * rng.uniform(*cfg.press)


def _place_apart(rng, human_full: np.ndarray) -> np.ndarray:
    centre = human_full.mean(0)
    offset = rng.normal(size=3)
    offset[2] = -abs(offset[2])
    offset /= np.linalg.norm(offset)
    return centre + offset * rng.uniform(0.45, 0.8)


def sample_scene(rng: np.random.Generator, cfg: SceneConfig, seed: int = 0,
                 max_attempts: int = 100) -> Scene:
    """Draw one scene. Contact scenes are retried until the object touches the body and
    both meshes are inside the image; failure after ``max_attempts`` raises."""
    cam = cfg.camera()
    tpl_body = body.default_body_template()
    want_contact = rng.uniform() < cfg.contact_fraction
    category = int(cfg.categories[rng.integers(len(cfg.categories))])
    otpl = body.object_template(category)
    _, idx = body.human_downsample(cfg.human_vertices)
    for _ in range(max_attempts):
        params = _sample_body(rng, cfg)
        human = body.lbs_forward(tpl_body, params).vertices
        if not _in_frame(human, cam):
            continue
        rotvec = _random_rotvec(rng, cfg.object_rotation)
        if want_contact:
            t = _place_contact(rng, cfg, human[idx], otpl, rotvec)
        else:
            t = _place_apart(rng, human)
        pose = ObjectPose(rotvec, t)
        obj = body.object_forward(otpl, pose).vertices
        if not _in_frame(obj, cam):
            continue
        gap = nn_dists(obj, human).min()
        if want_contact:
            ch, _ = label_contact(Mesh(human[idx]), Mesh(obj), cfg.contact_threshold, "vertex")
            if not ch.any():
                continue
        elif gap < cfg.separation:
            continue
        return Scene(params, pose, category, cam, seed)
    kind = "contact" if want_contact else "non-contact"
    raise SceneError(f"{kind} placement failed after {max_attempts} attempts (seed {seed})")


# ---------------------------------------------------------------------------
# rasterisation

def _raster_mesh(mesh: Mesh, cam: Camera, depth: np.ndarray, owner: np.ndarray,
                 shade: np.ndarray, mask: np.ndarray, tag: int) -> None:
    """Scan-convert the faces of ``mesh`` into the shared z-buffer (in place).

    Pixel (i, j) is covered when its centre passes all three edge tests; faces are two-sided.
    Depth is interpolated as 1/z, exact for planar triangles under perspective.
    """
    v = mesh.vertices
    if v[:, 2].min() <= 0:
        raise GeometryError("rasterize: mesh vertex behind camera")
    uv = project(v, cam)
    inv_z = 1.0 / v[:, 2]
    light = np.array([0.3, -0.5, -0.8])
    light /= np.linalg.norm(light)
    for f in mesh.faces:
        p = uv[f]
        x0 = max(int(np.ceil(p[:, 0].min())), 0)
        x1 = min(int(np.floor(p[:, 0].max())), cam.width - 1)
        y0 = max(int(np.ceil(p[:, 1].min())), 0)
        y1 = min(int(np.floor(p[:, 1].max())), cam.height - 1)
        if x0 > x1 or y0 > y1:
            continue
        area = (p[1, 0] - p[0, 0]) * (p[2, 1] - p[0, 1]) - (p[1, 1] - p[0, 1]) * (p[2, 0] - p[0, 0])
        if area == 0:
            continue
        xs, ys = np.meshgrid(np.arange(x0, x1 + 1, dtype=float), np.arange(y0, y1 + 1, dtype=float))
        # barycentric weights via edge functions
        w0 = ((p[2, 0] - p[1, 0]) * (ys - p[1, 1]) - (p[2, 1] - p[1, 1]) * (xs - p[1, 0])) / area
        w1 = ((p[0, 0] - p[2, 0]) * (ys - p[2, 1]) - (p[0, 1] - p[2, 1]) * (xs - p[2, 0])) / area
        w2 = 1.0 - w0 - w1
        inside = (w0 >= 0) & (w1 >= 0) & (w2 >= 0)
        if not inside.any():
            continue
        iz = w0 * inv_z[f[0]] + w1 * inv_z[f[1]] + w2 * inv_z[f[2]]
        tri = v[f]
        n = np.cross(tri[1] - tri[0], tri[2] - tri[0])
        n /= np.linalg.norm(n)
        s = 0.2 + 0.8 * abs(float(n @ light))
        sub = (slice(y0, y1 + 1), slice(x0, x1 + 1))
        mask[sub] |= inside
        closer = inside & (iz > depth[sub])
        depth[sub] = np.where(closer, iz, depth[sub])
        owner[sub] = np.where(closer, tag, owner[sub])
        shade[sub] = np.where(closer, s, shade[sub])


CATEGORY_TINT = (1.0, 0.75, 0.5)


def rasterize_meshes(human: Mesh, obj: Mesh, cam: Camera, category: int = 0,
                     depth_ref: float = 2.0) -> np.ndarray:
    """5-channel raster: inverse depth, human shading, object shading, human mask, object mask.

    Masks are amodal silhouettes; depth and shading follow the nearest surface.
    """
    for name, m in (("human", human), ("object", obj)):
        if m.faces is None:
            raise GeometryError(f"rasterize: {name} mesh has no faces")
    h, w = cam.height, cam.width
    depth = np.zeros((h, w))
    owner = np.full((h, w), -1, dtype=np.int8)
    shade = np.zeros((h, w))
    mask_h = np.zeros((h, w), dtype=bool)
    mask_o = np.zeros((h, w), dtype=bool)
    _raster_mesh(human, cam, depth, owner, shade, mask_h, 0)
    _raster_mesh(obj, cam, depth, owner, shade, mask_o, 1)
    out = np.zeros((5, h, w), dtype=np.float32)
    out[0] = depth * depth_ref
    out[1] = np.where(owner == 0, shade, 0.0)
    out[2] = np.where(owner == 1, shade * CATEGORY_TINT[category % len(CATEGORY_TINT)], 0.0)
    out[3] = mask_h
    out[4] = mask_o
    return out


def scene_meshes(scene: Scene) -> Tuple[Mesh, Mesh]:
    """Full-resolution posed human and object meshes."""
    human = body.lbs_forward(body.default_body_template(), scene.body)
    obj = body.object_forward(body.object_template(scene.category), scene.object_pose)
    return human, obj


def rasterize(scene: Scene, depth_ref: float = 2.0) -> np.ndarray:
    human, obj = scene_meshes(scene)
    return rasterize_meshes(human, obj, scene.camera, scene.category, depth_ref)


# ---------------------------------------------------------------------------
# samples and datasets

def make_sample(scene: Scene, cfg: SceneConfig) -> Sample:
    human_full, obj = scene_meshes(scene)
    human = body.downsampled_human(human_full, cfg.human_vertices)
    ch, co = label_contact(human, obj, cfg.contact_threshold, cfg.contact_mode)
    raster = rasterize_meshes(human_full, obj, scene.camera, scene.category, cfg.depth_ref)
    return Sample(raster, human, obj, ch, co, scene.body, scene.object_pose, scene.category,
                  scene.camera, scene.seed)


def generate(num: int, cfg: SceneConfig, base_seed: int, split: str = "train") -> List[Sample]:
    """Per-sample streams: sample i uses seed base_seed + i (+ a fixed offset for the test split)."""
    offset = {"train": 0, "test": TEST_SEED_OFFSET}[split]
    out = []
    for i in range(num):
        seed = base_seed + offset + i
        scene = sample_scene(np.random.default_rng(seed), cfg, seed)
        out.append(make_sample(scene, cfg))
    return out


def _sample_params(s: Sample) -> dict:
    return {"body_rotations": s.body.rotations.tolist(), "body_translation": s.body.translation.tolist(),
            "object_rotation": s.object_pose.rotation.tolist(),
            "object_translation": s.object_pose.translation.tolist(),
            "category": s.category, "seed": s.seed, "camera": s.camera.to_dict()}


def write_dataset(samples: Sequence[Sample], directory, meta: Optional[dict] = None,
                  overwrite: bool = False) -> None:
    """Write atomically: everything goes to a sibling temp dir which is renamed into place."""
    if not samples:
        raise DatasetError("refusing to write an empty dataset")
    directory = os.path.abspath(directory)
    if os.path.exists(directory) and not overwrite:
        raise DatasetError(f"{directory} already exists")
    first = samples[0]
    full_meta = dict(meta or {})
    full_meta.update({
        "format": DATASET_FORMAT,
        "count": len(samples),
        "raster_shape": list(first.raster.shape),
        "human_vertices": first.human.num_vertices,
        "object_vertices": first.obj.num_vertices,
        "conventions": {"chamfer": CHAMFER_CONVENTION, "dtype": "<f4", "order": "C"},
    })
    parent = os.path.dirname(directory)
    os.makedirs(parent, exist_ok=True)
    tmp = tempfile.mkdtemp(prefix=".dataset-", dir=parent)
    try:
        for i, s in enumerate(samples):
            if s.raster.shape != first.raster.shape:
                raise DatasetError(f"sample {i}: raster shape {s.raster.shape} != {first.raster.shape}")
            d = os.path.join(tmp, f"{i:06d}")
            os.mkdir(d)
            s.raster.astype("<f4").tofile(os.path.join(d, "raster.f32"))
            s.contact_h.astype("<f4").tofile(os.path.join(d, "contact_h.f32"))
            s.contact_o.astype("<f4").tofile(os.path.join(d, "contact_o.f32"))
            write_obj(s.human, os.path.join(d, "human.obj"))
            write_obj(s.obj, os.path.join(d, "object.obj"))
            with open(os.path.join(d, "params.json"), "w") as fh:
                json.dump(_sample_params(s), fh, indent=1, sort_keys=True)
        with open(os.path.join(tmp, "meta.json"), "w") as fh:
            json.dump(full_meta, fh, indent=1, sort_keys=True)
        if os.path.exists(directory):
            shutil.rmtree(directory)
        os.replace(tmp, directory)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise


def _read_blob(path: str, shape: Tuple[int, ...]) -> np.ndarray:
    if not os.path.exists(path):
        raise DatasetError(f"missing blob {path}")
    arr = np.fromfile(path, dtype="<f4")
    expected = int(np.prod(shape))
    if arr.size != expected:
        raise DatasetError(f"{path}: shape mismatch, expected {tuple(shape)} ({expected} floats), "
                           f"found {arr.size}")
    return arr.reshape(shape).astype(np.float32)


def read_meta(directory) -> dict:
    path = os.path.join(directory, "meta.json")
    try:
        with open(path) as fh:
            meta = json.load(fh)
    except FileNotFoundError:
        raise DatasetError(f"missing {path}") from None
    except json.JSONDecodeError as exc:
        raise DatasetError(f"malformed {path}: {exc}") from None
    for key in ("count", "raster_shape", "human_vertices", "object_vertices"):
        if key not in meta:
            raise DatasetError(f"malformed {path}: missing field {key!r}")
    return meta


def read_dataset(directory) -> Tuple[dict, List[Sample]]:
    meta = read_meta(directory)
    shape = tuple(meta["raster_shape"])
    samples = []
    for i in range(int(meta["count"])):
        d = os.path.join(directory, f"{i:06d}")
        raster = _read_blob(os.path.join(d, "raster.f32"), shape)
        ch = _read_blob(os.path.join(d, "contact_h.f32"), (meta["human_vertices"],))
        co = _read_blob(os.path.join(d, "contact_o.f32"), (meta["object_vertices"],))
        human = read_obj(os.path.join(d, "human.obj"))
        obj = read_obj(os.path.join(d, "object.obj"))
        for name, m, n in (("human.obj", human, meta["human_vertices"]),
                           ("object.obj", obj, meta["object_vertices"])):
            if m.num_vertices != n:
                raise DatasetError(f"{os.path.join(d, name)}: {m.num_vertices} vertices, meta says {n}")
        ppath = os.path.join(d, "params.json")
        try:
            with open(ppath) as fh:
                p = json.load(fh)
            params = BodyParams(np.array(p["body_rotations"]), np.array(p["body_translation"]))
            pose = ObjectPose(np.array(p["object_rotation"]), np.array(p["object_translation"]))
            cam = Camera.from_dict(p["camera"])
            samples.append(Sample(raster, human, obj, ch, co, params, pose, int(p["category"]),
                                  cam, int(p["seed"])))
        except FileNotFoundError:
            raise DatasetError(f"missing {ppath}") from None
        except (KeyError, ValueError, TypeError) as exc:
            raise DatasetError(f"malformed {ppath}: {exc}") from None
    return meta, samples
