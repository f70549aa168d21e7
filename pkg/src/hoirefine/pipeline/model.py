"""The three-stage network: initial reconstruction, contact estimation, contact-masked refinement.

All activations are token-major: vertex features are (B, V, D+3) with the last three
columns holding the vertex coordinates they were sampled for.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .. import body
from .. import nn
from ..geom import Camera, GeometryError, project
from ..nn import ParamStore, ShapeError, Tensor
from ..scene import Sample

MASKING_MODES = ("predicted", "gt", "none")


@dataclass
class ModelConfig:
    channels: Tuple[int, ...] = (16, 32, 64, 128)  # backbone widths; 2x2 pooling between stages
    depth_bins: int = 8
    depth_range: Tuple[float, float] = (2.4, 4.2)  # metres covered by the soft-argmax depth axis
    feat_dim: int = 64  # D, reduced vertex-feature width
    width: int = 64
    heads: int = 4
    ff: int = 128
    layers: int = 2
    mask_threshold: float = 0.5
    masking: str = "predicted"  # "gt" = teacher forcing while training, "none" = ablation
    share_contact_attention: bool = False
    translation_prior: Tuple[float, float, float] = (0.0, -0.06, 3.3)
    coord_channels: bool = True  # append normalised pixel coordinates to the backbone input
    root_from_joints: bool = True  # root translation = back-projected pelvis estimate + FC residual
    object_center: str = "pooled"  # "pooled": FC translation around the prior; "heatmap": soft-argmax centre
    coord_scale: float = 5.0  # transformer inputs see (xyz - translation_prior) * coord_scale; 0 disables
    human_vertices: int = 108
    loss_weights: Dict[str, float] = field(default_factory=lambda: {
        "contact": 1.0, "vertex": 1.0, "edge": 1.0, "param": 1.0, "coord": 1.0})

    @property
    def stride(self) -> int:
        return 2 ** (len(self.channels) - 1)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown model config field(s): {sorted(unknown)}")
        kw = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}
        cfg = cls(**kw)
        if cfg.masking not in MASKING_MODES:
            raise ValueError(f"masking must be one of {MASKING_MODES}, got {cfg.masking!r}")
        if cfg.object_center not in ("pooled", "heatmap"):
            raise ValueError(f"object_center must be 'pooled' or 'heatmap', got {cfg.object_center!r}")
        if cfg.width % cfg.heads:
            raise ValueError(f"width {cfg.width} not divisible by heads {cfg.heads}")
        return cfg


@dataclass
class Batch:
    raster: np.ndarray  # (B, 5, H, W)
    object_template: np.ndarray  # (B, V_o, 3), template selected by GT category
    camera: Camera
    # ground truth; None when unavailable
    contact_h: Optional[np.ndarray] = None  # (B, V_h)
    contact_o: Optional[np.ndarray] = None
    human: Optional[np.ndarray] = None  # (B, V_h, 3)
    obj: Optional[np.ndarray] = None  # (B, V_o, 3)
    params: Optional[np.ndarray] = None  # (B, 3K+3+6): body pose, root, object rotation, translation
    joints_hm: Optional[np.ndarray] = None  # (B, K, 3) heatmap units
    joints_2d: Optional[np.ndarray] = None  # (B, K, 2) heatmap units
    center_hm: Optional[np.ndarray] = None  # (B, 3) object centre, heatmap units

    def __len__(self):
        return len(self.raster)


@dataclass
class PipelineOutput:
    theta: Tensor  # (B, K, 3)
    root: Tensor  # (B, 3)
    rot_o: Tensor  # (B, 3)
    t_o: Tensor  # (B, 3)
    joints_hm: Tensor  # (B, K, 3) soft-argmax joints
    joints3d: Tensor  # (B, K, 3) joints of the regressed body
    mesh_h: Tensor  # (B, V_h, 3)
    mesh_o: Tensor
    contact_h: Tensor  # (B, V_h)
    contact_o: Tensor
    refined_h: Tensor
    refined_o: Tensor
    center_hm: Optional[Tensor] = None  # (B, 3) soft-argmax object centre when object_center="heatmap"


# skew-symmetric generator: (..., 3) @ _GEN -> flattened cross-product matrix
_GEN = np.zeros((3, 9))
_GEN[2, 1], _GEN[1, 2] = -1, 1
_GEN[2, 3], _GEN[0, 5] = 1, -1
_GEN[1, 6], _GEN[0, 7] = -1, 1


def rodrigues_t(r: Tensor) -> Tensor:
    """Differentiable axis-angle -> rotation; exactly the identity at r = 0."""
    lead = r.shape[:-1]
    theta = nn.sqrt(nn.sum_(r * r, axis=-1, keepdims=True) + 1e-12)
    k = nn.reshape(nn.matmul(r / theta, Tensor(_GEN.astype(r.dtype))), (*lead, 3, 3))
    th = nn.reshape(theta, (*lead, 1, 1))
    eye = Tensor(np.eye(3, dtype=r.dtype))
    return eye + nn.sin(th) * k + (1.0 - nn.cos(th)) * nn.matmul(k, k)


def project_t(points: Tensor, cam: Camera) -> Tensor:
    """Pinhole projection of (..., 3) points to pixel coordinates (..., 2)."""
    if points.data[..., 2].min() <= 0:
        raise GeometryError("vertex behind camera")
    z = points[..., 2:3]
    scale = Tensor(np.array([cam.fx, cam.fy], dtype=points.dtype))
    centre = Tensor(np.array([cam.cx, cam.cy], dtype=points.dtype))
    return points[..., 0:2] / z * scale + centre


def heatmap_coords(uv, stride: int):
    """Pixel coordinates -> feature-map (texel) coordinates."""
    return (uv - (stride - 1) / 2.0) / stride


def depth_to_bins(z, depth_range, bins: int):
    z0, z1 = depth_range
    return (z - z0) / (z1 - z0) * (bins - 1)


def backproject_t(hm: Tensor, cam: Camera, stride: int, depth_range, bins: int) -> Tensor:
    """Inverse of (heatmap_coords . project, depth_to_bins): (..., 3) heatmap units -> metres."""
    z0, z1 = depth_range
    z = hm[..., 2:3] * ((z1 - z0) / (bins - 1)) + z0
    uv = hm[..., 0:2] * float(stride) + (stride - 1) / 2.0
    centre = Tensor(np.array([cam.cx, cam.cy], dtype=hm.dtype))
    focal = Tensor(np.array([1.0 / cam.fx, 1.0 / cam.fy], dtype=hm.dtype))
    return nn.concat([(uv - centre) * focal * z, z], axis=-1)


class Model:
    def __init__(self, cfg: ModelConfig, seed: int = 0, dtype=np.float32):
        self.cfg = cfg
        self.dtype = np.dtype(dtype)
        self.store = ParamStore(dtype, seed)
        self.template = body.default_body_template()
        sub, idx = body.human_downsample(cfg.human_vertices)
        self.human_edges = sub.edges
        k = self.template.num_joints
        self.num_joints = k
        tj = self.template.joints
        self._offsets = np.array([tj[j] - tj[p] if p >= 0 else tj[j]
                                  for j, p in enumerate(self.template.parents)])
        rel = self.template.vertices[idx][None] - tj[:, None]  # (K, V, 3)
        self._rel = Tensor(rel.transpose(0, 2, 1).astype(dtype))  # (K, 3, V)
        self._weights = Tensor(self.template.weights[idx].T[:, None, :].astype(dtype))  # (K, 1, V)
        self._prior = Tensor(np.asarray(cfg.translation_prior, dtype=dtype))
        self._build()

    # ------------------------------------------------------------ parameters
    def _build(self):
        s, c = self.store, self.cfg
        cin = 7 if c.coord_channels else 5
        for i, cout in enumerate(c.channels):
            s.uniform(f"bb.{i}.w", (cout, cin, 3, 3), cin * 9)
            s.zeros(f"bb.{i}.b", (cout,))
            cin = cout
        k = self.num_joints
        s.uniform("hh.heat.w", (k * c.depth_bins, cin, 1, 1), cin)
        s.zeros("hh.heat.b", (k * c.depth_bins,))
        nn.init_linear(s, "hh.fc.", cin * k + 3 * k, 3 * k + 3, zero=True)
        nn.init_linear(s, "oh.fc.", cin, 6, zero=True)
        if c.object_center == "heatmap":
            s.uniform("oh.heat.w", (c.depth_bins, cin, 1, 1), cin)
            s.zeros("oh.heat.b", (c.depth_bins,))
        nn.init_linear(s, "vf.", cin, c.feat_dim)
        d = c.feat_dim + 3
        for side in ("h", "o"):
            nn.init_linear(s, f"cf.in_{side}.", d, c.width)
            if side == "h" or not c.share_contact_attention:
                nn.init_transformer_stack(s, f"cf.ca_{side}.", c.width, c.ff, c.layers, cross=True)
            nn.init_linear(s, f"cf.out_{side}.", c.width, 1)
        for side in ("h", "o"):
            nn.init_linear(s, f"cr.in_{side}.", d, c.width)
            nn.init_transformer_stack(s, f"cr.ca_{side}.", c.width, c.ff, c.layers, cross=True)
            nn.init_transformer_stack(s, f"cr.sa_{side}.", c.width, c.ff, c.layers)
            nn.init_transformer_stack(s, f"cr.fin_{side}.", c.width, c.ff, c.layers)
            nn.init_linear(s, f"cr.out_{side}.", c.width, 3, zero=True)

    @property
    def p(self) -> Dict[str, Tensor]:
        return self.store.params

    def const(self, x) -> Tensor:
        return Tensor(np.asarray(x, dtype=self.dtype))

    # ------------------------------------------------------------ stages
    def backbone(self, raster) -> Tensor:
        x = raster if isinstance(raster, Tensor) else self.const(raster)
        h, w = x.shape[-2:]
        s = self.cfg.stride
        if h % s or w % s:
            raise ShapeError(f"backbone: input {h}x{w} not divisible by total stride {s}")
        if self.cfg.coord_channels:
            gy, gx = np.meshgrid(np.linspace(-1, 1, h), np.linspace(-1, 1, w), indexing="ij")
            grid = np.broadcast_to(np.stack([gx, gy]), (x.shape[0], 2, h, w))
            x = nn.concat([x, self.const(grid)], axis=1)
        n = len(self.cfg.channels)
        for i in range(n):
            x = nn.relu(nn.conv2d(x, self.p[f"bb.{i}.w"], self.p[f"bb.{i}.b"], pad="same"))
            if i < n - 1:
                x = nn.avg_pool2(x)
        return x

    def lbs(self, theta: Tensor, root: Tensor) -> Tuple[Tensor, Tensor]:
        """Posed downsampled vertices (B, V, 3) and joints (B, K, 3)."""
        local = rodrigues_t(theta)  # B,K,3,3
        parents = self.template.parents
        rots: List[Tensor] = [local[:, 0]]
        b = theta.shape[0]
        pos: List[Tensor] = [self.const(np.broadcast_to(self._offsets[0], (b, 3)))]
        for j in range(1, self.num_joints):
            p = parents[j]
            rots.append(nn.matmul(rots[p], local[:, j]))
            off = self.const(self._offsets[j][:, None])
            pos.append(pos[p] + nn.reshape(nn.matmul(rots[p], off), (b, 3)))
        rs = nn.stack(rots, axis=1)  # B,K,3,3
        ps = nn.stack(pos, axis=1)  # B,K,3
        per_bone = nn.matmul(rs, self._rel) + nn.reshape(ps, (b, self.num_joints, 3, 1))  # B,K,3,V
        verts = nn.sum_(per_bone * self._weights, axis=1)  # B,3,V
        root3 = nn.reshape(root, (b, 1, 3))
        return nn.transpose(verts, (0, 2, 1)) + root3, ps + root3

    def initial_human(self, feat: Tensor, cam: Camera):
        c, k = self.cfg, self.num_joints
        b, ch, h, w = feat.shape
        logits = nn.conv2d(feat, self.p["hh.heat.w"], self.p["hh.heat.b"])
        joints_hm = nn.soft_argmax_3d(nn.reshape(logits, (b, k, c.depth_bins, h, w)))  # B,K,3
        sampled = nn.grid_sample_bilinear(feat, joints_hm[..., 0:2])  # B,C,K
        scale = self.const([1.0 / w, 1.0 / h, 1.0 / c.depth_bins])
        x = nn.concat([nn.reshape(sampled, (b, ch * k)), nn.reshape(joints_hm * scale, (b, 3 * k))], axis=1)
        out = nn.linear(x, self.p["hh.fc.w"], self.p["hh.fc.b"])
        theta = nn.reshape(out[:, :3 * k], (b, k, 3))
        if c.root_from_joints:
            pelvis = backproject_t(joints_hm[:, 0], cam, c.stride, c.depth_range, c.depth_bins)
            root = out[:, 3 * k:] + pelvis - self.const(self._offsets[0])
        else:
            root = out[:, 3 * k:] + self._prior
        mesh, joints3d = self.lbs(theta, root)
        return theta, root, joints_hm, joints3d, mesh

    def initial_object(self, feat: Tensor, template: np.ndarray, cam: Camera):
        c = self.cfg
        pooled = nn.mean(feat, axis=(2, 3))
        out = nn.linear(pooled, self.p["oh.fc.w"], self.p["oh.fc.b"])
        rot = out[:, 0:3]
        centre_hm = None
        if c.object_center == "heatmap":
            centre_hm = nn.soft_argmax_3d(nn.conv2d(feat, self.p["oh.heat.w"], self.p["oh.heat.b"]))
            t = out[:, 3:6] + backproject_t(centre_hm, cam, c.stride, c.depth_range, c.depth_bins)
        else:
            t = out[:, 3:6] + self._prior
        r = rodrigues_t(rot)
        mesh = nn.matmul(self.const(template), nn.transpose(r, (0, 2, 1))) + nn.reshape(t, (len(template), 1, 3))
        return rot, t, mesh, centre_hm

    def vertex_features(self, feat: Tensor, mesh: Tensor, cam: Camera) -> Tensor:
        """(B, V, D+3): reduced image features at the projected vertices, then xyz."""
        uv = heatmap_coords(project_t(mesh, cam), self.cfg.stride)
        sampled = nn.transpose(nn.grid_sample_bilinear(feat, uv), (0, 2, 1))  # B,V,C
        reduced = nn.linear(sampled, self.p["vf.w"], self.p["vf.b"])
        return nn.concat([reduced, mesh], axis=-1)

    def _normalise_xyz(self, f: Tensor) -> Tensor:
        """Fixed affine on the trailing xyz columns so centimetre offsets are not swamped by
        the ~3 m depth. Per-column and data-independent, so column masking is unaffected."""
        s = self.cfg.coord_scale
        if not s:
            return f
        d = f.shape[-1]
        return nn.concat([f[..., :d - 3], (f[..., d - 3:] - self._prior) * s], axis=-1)

    def contactformer(self, fh: Tensor, fo: Tensor) -> Tuple[Tensor, Tensor]:
        c, p = self.cfg, self.p
        fh, fo = self._normalise_xyz(fh), self._normalise_xyz(fo)
        xh = nn.linear(fh, p["cf.in_h.w"], p["cf.in_h.b"])
        xo = nn.linear(fo, p["cf.in_o.w"], p["cf.in_o.b"])
        o_prefix = "cf.ca_h." if c.share_contact_attention else "cf.ca_o."
        yh = nn.cross_attention(xh, xo, p, "cf.ca_h.", c.heads, c.layers)
        yo = nn.cross_attention(xo, xh, p, o_prefix, c.heads, c.layers)
        ch = nn.sigmoid(nn.linear(yh, p["cf.out_h.w"], p["cf.out_h.b"]))
        co = nn.sigmoid(nn.linear(yo, p["cf.out_o.w"], p["cf.out_o.b"]))
        return nn.reshape(ch, ch.shape[:-1]), nn.reshape(co, co.shape[:-1])

    def contact_keep(self, contact) -> np.ndarray:
        """Boolean (B, V, 1) column mask; the threshold is a hard, gradient-free decision."""
        c = contact.data if isinstance(contact, Tensor) else np.asarray(contact)
        return (c >= self.cfg.mask_threshold)[..., None]

    def crformer(self, fh: Tensor, fo: Tensor, keep_h: np.ndarray, keep_o: np.ndarray
                 ) -> Tuple[Tensor, Tensor]:
        """Offsets-based refinement. ``keep_*`` select the feature columns visible to the
        cross-entity branch; the per-entity branch always sees everything."""
        c, p = self.cfg, self.p
        xh = nn.linear(self._normalise_xyz(fh), p["cr.in_h.w"], p["cr.in_h.b"])
        xo = nn.linear(self._normalise_xyz(fo), p["cr.in_o.w"], p["cr.in_o.b"])
        mh = nn.keep_where(xh, keep_h)
        mo = nn.keep_where(xo, keep_o)
        ca_h = nn.cross_attention(mh, mo, p, "cr.ca_h.", c.heads, c.layers)
        ca_o = nn.cross_attention(mo, mh, p, "cr.ca_o.", c.heads, c.layers)
        sa_h = nn.self_attention(xh, p, "cr.sa_h.", c.heads, c.layers)
        sa_o = nn.self_attention(xo, p, "cr.sa_o.", c.heads, c.layers)
        yh = nn.self_attention(ca_h + sa_h, p, "cr.fin_h.", c.heads, c.layers)
        yo = nn.self_attention(ca_o + sa_o, p, "cr.fin_o.", c.heads, c.layers)
        off_h = nn.linear(yh, p["cr.out_h.w"], p["cr.out_h.b"])
        off_o = nn.linear(yo, p["cr.out_o.w"], p["cr.out_o.b"])
        return fh[..., -3:] + off_h, fo[..., -3:] + off_o

    def forward(self, batch: Batch, training: bool = False) -> PipelineOutput:
        feat = self.backbone(batch.raster)
        theta, root, joints_hm, joints3d, mesh_h = self.initial_human(feat, batch.camera)
        rot_o, t_o, mesh_o, centre_hm = self.initial_object(feat, batch.object_template, batch.camera)
        fh = self.vertex_features(feat, mesh_h, batch.camera)
        fo = self.vertex_features(feat, mesh_o, batch.camera)
        ch, co = self.contactformer(fh, fo)
        mode = self.cfg.masking
        if mode == "none":
            keep_h = np.ones(ch.shape + (1,), dtype=bool)
            keep_o = np.ones(co.shape + (1,), dtype=bool)
        elif mode == "gt" and training:
            if batch.contact_h is None:
                raise ValueError("teacher forcing needs ground-truth contact")
            keep_h, keep_o = self.contact_keep(batch.contact_h), self.contact_keep(batch.contact_o)
        else:
            keep_h, keep_o = self.contact_keep(ch), self.contact_keep(co)
        ref_h, ref_o = self.crformer(fh, fo, keep_h, keep_o)
        return PipelineOutput(theta, root, rot_o, t_o, joints_hm, joints3d, mesh_h, mesh_o,
                              ch, co, ref_h, ref_o, centre_hm)


# ---------------------------------------------------------------- batching

def gt_joint_targets(sample: Sample, cfg: ModelConfig) -> Tuple[np.ndarray, np.ndarray]:
    """GT joints in heatmap units: (K, 3) with a depth-bin axis, and (K, 2) image-plane only."""
    j3 = body.lbs_joints(body.default_body_template(), sample.body)
    uv = heatmap_coords(project(j3, sample.camera), cfg.stride)
    zb = depth_to_bins(j3[:, 2], cfg.depth_range, cfg.depth_bins)
    return np.concatenate([uv, zb[:, None]], axis=1), uv


def gt_center_target(sample: Sample, cfg: ModelConfig) -> np.ndarray:
    """GT object translation in heatmap units (3,)."""
    t = sample.object_pose.translation[None]
    uv = heatmap_coords(project(t, sample.camera), cfg.stride)
    return np.concatenate([uv[0], depth_to_bins(t[:, 2], cfg.depth_range, cfg.depth_bins)])


def make_batch(samples: Sequence[Sample], cfg: ModelConfig, dtype=np.float32,
               with_gt: bool = True) -> Batch:
    if not samples:
        raise ValueError("empty batch")
    cam = samples[0].camera
    if any(s.camera != cam for s in samples):
        raise ValueError("all samples in a batch must share one camera")
    raster = np.stack([s.raster for s in samples]).astype(dtype)
    tpl = np.stack([body.object_template(s.category).mesh.vertices for s in samples]).astype(dtype)
    batch = Batch(raster, tpl, cam)
    if not with_gt:
        return batch
    batch.contact_h = np.stack([s.contact_h for s in samples]).astype(dtype)
    batch.contact_o = np.stack([s.contact_o for s in samples]).astype(dtype)
    batch.human = np.stack([s.human.vertices for s in samples]).astype(dtype)
    batch.obj = np.stack([s.obj.vertices for s in samples]).astype(dtype)
    batch.params = np.stack([np.concatenate([s.body.as_vector(), s.object_pose.rotation,
                                             s.object_pose.translation]) for s in samples]).astype(dtype)
    targets = [gt_joint_targets(s, cfg) for s in samples]
    batch.joints_hm = np.stack([t[0] for t in targets]).astype(dtype)
    batch.joints_2d = np.stack([t[1] for t in targets]).astype(dtype)
    batch.center_hm = np.stack([gt_center_target(s, cfg) for s in samples]).astype(dtype)
    return batch
