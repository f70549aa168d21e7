"""Evaluation: contact precision/recall, joint-Procrustes Chamfer, occlusion sensitivity."""
from __future__ import annotations

import json
import os
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .geom import CHAMFER_CONVENTION, Mesh, apply_similarity, chamfer, procrustes
from .scene import Sample, label_contact

EST_THRESHOLD = 0.5
CONTACT_TAU = 0.05

CONVENTIONS = {
    "chamfer": CHAMFER_CONVENTION,
    "chamfer_units": "cm",
    "alignment": "similarity procrustes on stacked human+object vertices",
    "contact_est_threshold": EST_THRESHOLD,
    "contact_distance": "vertex-to-vertex",
    "contact_tau_m": CONTACT_TAU,
    "skip_rules": "recall skipped when GT has no positives; precision skipped when the "
                  "prediction has no positives; means use unskipped samples only",
    "object_symmetry": "not handled; vertex correspondence ignores object symmetries",
}

METRIC_KEYS = ("contact_est_p", "contact_est_r", "contact_est_obj_p", "contact_est_obj_r",
               "cd_human", "cd_object", "cd_human_init", "cd_object_init",
               "contact_rec_p", "contact_rec_r")


def _verts(m) -> np.ndarray:
    return m.vertices if isinstance(m, Mesh) else np.asarray(m, dtype=np.float64)


def precision_recall(pred: np.ndarray, gt: np.ndarray) -> Tuple[Optional[float], Optional[float]]:
    """Binary precision/recall; None marks a skipped value (no predicted / no GT positives)."""
    pred = np.asarray(pred, dtype=bool)
    gt = np.asarray(gt, dtype=bool)
    if pred.shape != gt.shape:
        raise ValueError(f"contact map length mismatch: {pred.shape} vs {gt.shape}")
    tp = int((pred & gt).sum())
    p = tp / int(pred.sum()) if pred.any() else None
    r = tp / int(gt.sum()) if gt.any() else None
    return p, r


def contact_est_pr(pred, gt, threshold: float = EST_THRESHOLD):
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"contact map length mismatch: {pred.shape} vs {gt.shape}")
    return precision_recall(pred >= threshold, gt > 0.5)


def joint_pa_chamfer(pred_h, pred_o, gt_h, gt_o) -> Tuple[float, float]:
    """One similarity transform aligns the stacked prediction to the stacked GT; the
    Chamfer distances (cm) are then taken per entity."""
    ph, po, gh, go = (_verts(m) for m in (pred_h, pred_o, gt_h, gt_o))
    if len(ph) != len(gh) or len(po) != len(go):
        raise ValueError("joint_pa_chamfer: prediction and GT vertex counts differ")
    t = procrustes(np.vstack([ph, po]), np.vstack([gh, go]))
    return chamfer(apply_similarity(t, ph), gh), chamfer(apply_similarity(t, po), go)


def contact_rec_pr(pred_h, pred_o, gt_contact_h, tau: float = CONTACT_TAU):
    ph = _verts(pred_h)
    if len(ph) != len(gt_contact_h):
        raise ValueError(f"contact_rec_pr: {len(ph)} human vertices vs {len(gt_contact_h)} GT labels")
    derived, _ = label_contact(Mesh(ph), Mesh(_verts(pred_o)), tau)
    return precision_recall(derived > 0.5, np.asarray(gt_contact_h) > 0.5)


def sample_metrics(pred, sample: Sample) -> Dict[str, Optional[float]]:
    """All per-sample numbers. ``pred`` is a pipeline Prediction."""
    ep, er = contact_est_pr(pred.contact_h, sample.contact_h)
    op, orr = contact_est_pr(pred.contact_o, sample.contact_o)
    cdh, cdo = joint_pa_chamfer(pred.refined_h, pred.refined_o, sample.human, sample.obj)
    cdh0, cdo0 = joint_pa_chamfer(pred.mesh_h, pred.mesh_o, sample.human, sample.obj)
    rp, rr = contact_rec_pr(pred.refined_h, pred.refined_o, sample.contact_h)
    return {"contact_est_p": ep, "contact_est_r": er, "contact_est_obj_p": op,
            "contact_est_obj_r": orr, "cd_human": cdh, "cd_object": cdo,
            "cd_human_init": cdh0, "cd_object_init": cdo0, "contact_rec_p": rp, "contact_rec_r": rr}


def gt_as_prediction(sample: Sample):
    """A Prediction-shaped record that reproduces the ground truth (debug fixture)."""
    from .pipeline.training import Prediction

    ch = sample.contact_h.astype(np.float64)
    co = sample.contact_o.astype(np.float64)
    return Prediction(sample.body.rotations, sample.body.translation, sample.object_pose.rotation,
                      sample.object_pose.translation, np.zeros((0, 3)), sample.human.vertices,
                      sample.obj.vertices, ch, co, sample.human.vertices, sample.obj.vertices)


def f1(p: Optional[float], r: Optional[float]) -> Optional[float]:
    if p is None or r is None:
        return None
    return 0.0 if p + r == 0 else 2 * p * r / (p + r)


def aggregate(per_sample: Sequence[Dict[str, Optional[float]]], meta: Optional[dict] = None) -> dict:
    """Mean of every metric over the samples where it is defined."""
    if not per_sample:
        raise ValueError("aggregate: no samples")
    agg, skipped = {}, {}
    for key in METRIC_KEYS:
        vals = [s[key] for s in per_sample if s.get(key) is not None]
        agg[key] = float(np.mean(vals)) if vals else None
        skipped[key] = len(per_sample) - len(vals)
    agg["contact_est_f1"] = f1(agg["contact_est_p"], agg["contact_est_r"])
    return {"num_samples": len(per_sample), "aggregate": agg, "skipped": skipped,
            "per_sample": [dict(s) for s in per_sample], "conventions": dict(CONVENTIONS),
            "meta": dict(meta or {})}


def report_write(report: dict, path) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "w") as fh:
        json.dump(report, fh, indent=1, sort_keys=True)
        fh.write("\n")
    os.replace(tmp, path)


def report_read(path) -> dict:
    try:
        with open(path) as fh:
            rep = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ValueError(f"malformed report {path}: {exc}") from None
    for key in ("aggregate", "conventions"):
        if key not in rep:
            raise ValueError(f"malformed report {path}: missing {key!r}")
    return rep


def format_report(report: dict) -> str:
    agg = report["aggregate"]
    names = [*METRIC_KEYS, "contact_est_f1"]
    width = max(len(n) for n in names)
    lines = [f"{'metric':<{width}}  {'value':>10}  skipped"]
    for n in names:
        v = agg.get(n)
        val = "n/a" if v is None else f"{v:.4f}"
        lines.append(f"{n:<{width}}  {val:>10}  {report['skipped'].get(n, '')}")
    lines.append(f"samples: {report['num_samples']}  chamfer: {report['conventions']['chamfer']}")
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# occlusion sensitivity

@dataclass
class SensitivityMap:
    grid: np.ndarray  # (n, n) delta CD_object in cm
    patch: int
    stride: int
    base_cd: float
    fill: float = 0.0

    def to_dict(self) -> dict:
        return {"grid": self.grid.tolist(), "patch": self.patch, "stride": self.stride,
                "base_cd_object": self.base_cd, "fill": self.fill}


def window_origins(size: int, patch: int, stride: int) -> np.ndarray:
    return np.arange((size - patch) // stride + 1) * stride


def sensitivity_map(model, sample: Sample, patch: int, stride: int, fill: float = 0.0,
                    batch: int = 32) -> SensitivityMap:
    """Slide a ``patch`` square over all five input channels and record the change in
    CD_object relative to the unoccluded input."""
    from .pipeline.training import predict

    _, h, w = sample.raster.shape
    if patch > h or patch > w or patch < 1 or stride < 1:
        raise ValueError(f"patch {patch} / stride {stride} invalid for a {h}x{w} raster")
    base = predict(model, [sample])[0]
    base_cd = joint_pa_chamfer(base.refined_h, base.refined_o, sample.human, sample.obj)[1]
    ys, xs = window_origins(h, patch, stride), window_origins(w, patch, stride)
    rasters = []
    for y in ys:
        for x in xs:
            r = sample.raster.copy()
            r[:, y:y + patch, x:x + patch] = fill
            rasters.append(r)
    rasters = np.stack(rasters)
    preds = predict(model, [sample] * len(rasters), batch, rasters=rasters)
    deltas = [joint_pa_chamfer(p.refined_h, p.refined_o, sample.human, sample.obj)[1] - base_cd
              for p in preds]
    return SensitivityMap(np.array(deltas).reshape(len(ys), len(xs)), patch, stride, base_cd, fill)


def write_sensitivity(smap: SensitivityMap, json_path, pgm_path) -> None:
    tmp = f"{json_path}.tmp"
    with open(tmp, "w") as fh:
        json.dump(smap.to_dict(), fh, indent=1, sort_keys=True)
    os.replace(tmp, json_path)
    g = smap.grid
    span = g.max() - g.min()
    img = np.zeros_like(g) if span == 0 else (g - g.min()) / span
    pix = np.round(img * 255).astype(np.uint8)
    header = f"P5\n{pix.shape[1]} {pix.shape[0]}\n255\n".encode()
    tmp = f"{pgm_path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(header + pix.tobytes())
    os.replace(tmp, pgm_path)
