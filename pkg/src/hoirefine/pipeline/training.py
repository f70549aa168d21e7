"""Training loop, checkpoint loading and batched inference."""
from __future__ import annotations

import csv
import dataclasses
import io
import logging
import os
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence

import numpy as np

from .. import nn
from ..scene import Sample
from .losses import TERMS, loss_total
from .model import Model, ModelConfig, make_batch

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 30
    lr: float = 1e-4
    lr_drop_epoch: int = 20  # epochs after this one use lr * lr_drop
    lr_drop: float = 0.1
    batch: int = 8
    seed: int = 0
    val_fraction: float = 0.125

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown train config field(s): {sorted(unknown)}")
        return cls(**d)

    def lr_at(self, epoch: int) -> float:
        return self.lr * (self.lr_drop if epoch > self.lr_drop_epoch else 1.0)


@dataclass
class Prediction:
    """Numpy view of one sample's pipeline output."""
    theta: np.ndarray
    root: np.ndarray
    rot_o: np.ndarray
    t_o: np.ndarray
    joints3d: np.ndarray
    mesh_h: np.ndarray
    mesh_o: np.ndarray
    contact_h: np.ndarray
    contact_o: np.ndarray
    refined_h: np.ndarray
    refined_o: np.ndarray


def split_train_val(samples: Sequence[Sample], fraction: float):
    """Deterministic split: the last ``fraction`` of samples validate."""
    n_val = int(round(len(samples) * fraction))
    if n_val >= len(samples):
        n_val = 0
    cut = len(samples) - n_val
    return list(samples[:cut]), list(samples[cut:])


def _batches(samples, size):
    for i in range(0, len(samples), size):
        yield samples[i:i + size]


def mean_loss(model: Model, samples: Sequence[Sample], batch: int = 16) -> Dict[str, float]:
    """Sample-weighted mean loss breakdown, inference mode (predicted-contact masking)."""
    sums = {k: 0.0 for k in (*TERMS, "total")}
    with nn.no_grad():
        for chunk in _batches(list(samples), batch):
            b = make_batch(chunk, model.cfg, model.dtype)
            _, br = loss_total(model, model.forward(b), b)
            for k in sums:
                sums[k] += br[k] * len(chunk)
    return {k: v / len(samples) for k, v in sums.items()}


def checkpoint_meta(model: Model, train_cfg: Optional[TrainConfig], extra: Optional[dict]) -> dict:
    meta = {"model": model.cfg.to_dict(), "init_seed": int(train_cfg.seed if train_cfg else 0)}
    if train_cfg is not None:
        meta["train"] = train_cfg.to_dict()
    meta.update(extra or {})
    return meta


def load_model(path) -> Model:
    meta, state = nn.read_checkpoint(path)
    if "model" not in meta:
        raise nn.CheckpointError(f"{os.path.join(path, 'meta.json')}: missing field 'model'")
    cfg = ModelConfig.from_dict(meta["model"])
    model = Model(cfg, seed=int(meta.get("init_seed", 0)))
    model.store.load_state(state)
    model.store.step = int(meta.get("step", 0))
    return model


def _write_text_atomic(path: str, text: str) -> None:
    tmp = path + ".tmp"
    with open(tmp, "w", newline="") as fh:
        fh.write(text)
    os.replace(tmp, path)


def _write_csv(path: str, header, rows) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows([[repr(x) if isinstance(x, float) else x for x in r] for r in rows])
    _write_text_atomic(path, buf.getvalue())


def train(samples: Sequence[Sample], out_dir, model_cfg: ModelConfig, train_cfg: TrainConfig,
          extra_meta: Optional[dict] = None) -> Dict[str, object]:
    """Adam on the summed loss. Writes ``epoch_NNN`` checkpoints (000 = initialisation),
    ``best`` (lowest validation loss) and ``loss.csv`` under ``out_dir``."""
    if not samples:
        raise ValueError("train: empty dataset")
    os.makedirs(out_dir, exist_ok=True)
    train_s, val_s = split_train_val(samples, train_cfg.val_fraction)
    model = Model(model_cfg, seed=train_cfg.seed)
    rng = np.random.default_rng(train_cfg.seed)
    params = list(model.store.params.values())
    meta = checkpoint_meta(model, train_cfg, extra_meta)

    def evaluate(epoch):
        try:
            return mean_loss(model, val_s or train_s, train_cfg.batch)
        except FloatingPointError as exc:
            raise TrainingDiverged(f"epoch {epoch} validation: {exc}; last good checkpoint is {last_good}") from exc

    last_good = os.path.join(out_dir, "epoch_000")
    nn.save_checkpoint(model.store, last_good, dict(meta, epoch=0))
    init_loss = evaluate(0)
    best = init_loss["total"]
    nn.save_checkpoint(model.store, os.path.join(out_dir, "best"), dict(meta, epoch=0))
    header = ["epoch", "lr", *[f"train_{t}" for t in (*TERMS, "total")], "val_total"]
    rows = [[0, 0.0, *[""] * (len(TERMS) + 1), init_loss["total"]]]
    history = [{"epoch": 0, "val_total": init_loss["total"]}]
    csv_path = os.path.join(out_dir, "loss.csv")
    _write_csv(csv_path, header, rows)

    for epoch in range(1, train_cfg.epochs + 1):
        lr = train_cfg.lr_at(epoch)
        order = rng.permutation(len(train_s))
        sums = {k: 0.0 for k in (*TERMS, "total")}
        for i in range(0, len(order), train_cfg.batch):
            chunk = [train_s[j] for j in order[i:i + train_cfg.batch]]
            batch = make_batch(chunk, model_cfg, model.dtype)
            try:
                out = model.forward(batch, training=True)
                total, br = loss_total(model, out, batch)
                nn.backward(total, params)
                for p in params:
                    if not np.isfinite(p.grad).all():
                        raise FloatingPointError(f"non-finite gradient for {p.name}")
            except FloatingPointError as exc:
                raise TrainingDiverged(f"epoch {epoch}: {exc}; last good checkpoint is {last_good}") from exc
            nn.adam_step(model.store, lr)
            for k in sums:
                sums[k] += br[k] * len(chunk)
        train_mean = {k: v / len(train_s) for k, v in sums.items()}
        val = evaluate(epoch)
        last_good = os.path.join(out_dir, f"epoch_{epoch:03d}")
        nn.save_checkpoint(model.store, last_good, dict(meta, epoch=epoch))
        if val["total"] < best:
            best = val["total"]
            nn.save_checkpoint(model.store, os.path.join(out_dir, "best"), dict(meta, epoch=epoch))
        rows.append([epoch, lr, *[train_mean[t] for t in (*TERMS, "total")], val["total"]])
        history.append({"epoch": epoch, "lr": lr, "val_total": val["total"], **train_mean})
        log.info("epoch %d lr %.2g train %.4f val %.4f", epoch, lr, train_mean["total"], val["total"])
        _write_csv(csv_path, header, rows)
    return {"model": model, "history": history, "best_val": best, "last": last_good}


def predict(model: Model, samples: Sequence[Sample], batch: int = 16,
            rasters: Optional[np.ndarray] = None) -> List[Prediction]:
    """Deterministic batched inference. ``rasters`` optionally replaces the samples' inputs."""
    out: List[Prediction] = []
    samples = list(samples)
    with nn.no_grad():
        for i in range(0, len(samples), batch):
            chunk = samples[i:i + batch]
            b = make_batch(chunk, model.cfg, model.dtype, with_gt=False)
            if rasters is not None:
                b.raster = np.asarray(rasters[i:i + batch], dtype=model.dtype)
            o = model.forward(b)
            fields = {f.name: getattr(o, f.name).data.astype(np.float64)
                      for f in dataclasses.fields(Prediction)}
            for j in range(len(chunk)):
                out.append(Prediction(**{k: v[j] for k, v in fields.items()}))
    return out


def infer(checkpoint, samples: Sequence[Sample], batch: int = 16) -> List[Prediction]:
    return predict(load_model(checkpoint), samples, batch)
