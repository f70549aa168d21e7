"""Training objective: contact + refinement + initial-stage terms, each mean-reduced."""
from __future__ import annotations

from typing import Dict, Tuple

import numpy as np

from .. import nn
from ..nn import Tensor
from .model import Batch, Model, PipelineOutput, heatmap_coords, project_t

TERMS = ("contact", "vertex", "edge", "param", "coord")
_REQUIRED = ("contact_h", "contact_o", "human", "obj", "params", "joints_hm", "joints_2d")


def edge_lengths_t(verts: Tensor, edges: np.ndarray) -> Tensor:
    d = nn.take(verts, edges[:, 0], axis=1) - nn.take(verts, edges[:, 1], axis=1)
    return nn.sqrt(nn.sum_(d * d, axis=-1) + 1e-12)


def loss_terms(model: Model, out: PipelineOutput, gt: Batch) -> Dict[str, Tensor]:
    for name in _REQUIRED:
        if getattr(gt, name) is None:
            raise ValueError(f"loss: missing ground-truth field {name!r}")
    b = len(gt)
    k = model.num_joints
    contact = nn.binary_cross_entropy(nn.concat([out.contact_h, out.contact_o], axis=1),
                                      np.concatenate([gt.contact_h, gt.contact_o], axis=1))
    vertex = nn.l1(nn.concat([out.refined_h, out.refined_o], axis=1),
                   np.concatenate([gt.human, gt.obj], axis=1))
    e = model.human_edges
    gt_len = np.linalg.norm(gt.human[:, e[:, 0]] - gt.human[:, e[:, 1]], axis=-1)
    edge = nn.l1(edge_lengths_t(out.refined_h, e), gt_len)
    pred_params = nn.concat([nn.reshape(out.theta, (b, 3 * k)), out.root, out.rot_o, out.t_o], axis=1)
    param = nn.l1(pred_params, gt.params)
    joints_2d = heatmap_coords(project_t(out.joints3d, gt.camera), model.cfg.stride)
    keypoints, targets = out.joints_hm, gt.joints_hm
    if out.center_hm is not None:
        # the object centre is a soft-argmax keypoint too; supervise it in the same units
        if gt.center_hm is None:
            raise ValueError("loss: missing ground-truth field 'center_hm'")
        keypoints = nn.concat([keypoints, nn.reshape(out.center_hm, (b, 1, 3))], axis=1)
        targets = np.concatenate([targets, gt.center_hm[:, None]], axis=1)
    coord = nn.l1(keypoints, targets) + nn.l1(joints_2d, gt.joints_2d)
    return {"contact": contact, "vertex": vertex, "edge": edge, "param": param, "coord": coord}


def loss_total(model: Model, out: PipelineOutput, gt: Batch) -> Tuple[Tensor, Dict[str, float]]:
    """Weighted sum (weights default to 1) and a float breakdown per term."""
    terms = loss_terms(model, out, gt)
    weights = model.cfg.loss_weights
    total = None
    for name in TERMS:
        t = terms[name] * float(weights.get(name, 1.0))
        total = t if total is None else total + t
    breakdown = {name: float(terms[name].data) for name in TERMS}
    breakdown["total"] = float(total.data)
    return total, breakdown
