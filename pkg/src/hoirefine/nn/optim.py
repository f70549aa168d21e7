"""Named parameter storage, Adam, and the on-disk checkpoint format."""
from __future__ import annotations

import json
import os
import shutil
import tempfile
from typing import Dict, Iterator, Optional, Tuple

import numpy as np

from .tensor import Tensor


class CheckpointError(ValueError):
    pass


class ParamStore:
    """Ordered mapping of name -> parameter tensor plus Adam moments."""

    def __init__(self, dtype=np.float32, seed: int = 0):
        self.dtype = np.dtype(dtype)
        self.params: Dict[str, Tensor] = {}
        self.m: Dict[str, np.ndarray] = {}
        self.v: Dict[str, np.ndarray] = {}
        self.step = 0
        self.rng = np.random.default_rng(seed)

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def __iter__(self) -> Iterator[str]:
        return iter(self.params)

    def __len__(self) -> int:
        return len(self.params)

    def items(self):
        return self.params.items()

    def add(self, name: str, value) -> Tensor:
        if name in self.params:
            raise KeyError(f"duplicate parameter {name}")
        t = Tensor(np.asarray(value, dtype=self.dtype), requires_grad=True, name=name)
        self.params[name] = t
        self.m[name] = np.zeros_like(t.data)
        self.v[name] = np.zeros_like(t.data)
        return t

    def uniform(self, name: str, shape: Tuple[int, ...], fan_in: int) -> Tensor:
        bound = 1.0 / np.sqrt(fan_in)
        return self.add(name, self.rng.uniform(-bound, bound, size=shape))

    def zeros(self, name: str, shape: Tuple[int, ...]) -> Tensor:
        return self.add(name, np.zeros(shape))

    def ones(self, name: str, shape: Tuple[int, ...]) -> Tensor:
        return self.add(name, np.ones(shape))

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def state(self) -> Dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self.params.items()}

    def load_state(self, state: Dict[str, np.ndarray]) -> None:
        for k, p in self.params.items():
            if k not in state:
                raise CheckpointError(f"checkpoint is missing parameter {k}")
            if state[k].shape != p.shape:
                raise CheckpointError(f"parameter {k}: checkpoint shape {state[k].shape} != model {p.shape}")
            p.data = np.asarray(state[k], dtype=self.dtype).copy()
        extra = set(state) - set(self.params)
        if extra:
            raise CheckpointError(f"checkpoint has unknown parameters {sorted(extra)[:3]}")


def adam_step(store: ParamStore, lr: float, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> None:
    for name, p in store.params.items():
        if p.grad is None:
            raise ValueError(f"adam_step: parameter {name} has no gradient")
    store.step += 1
    t = store.step
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for name, p in store.params.items():
        g = p.grad.astype(p.data.dtype, copy=False)
        m = store.m[name]
        v = store.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        update = lr * (m / c1) / (np.sqrt(v / c2) + eps)
        p.data = (p.data - update).astype(store.dtype, copy=False)
        p.grad = None


# Checkpoint: directory with meta.json and one little-endian float32 blob per parameter.

def _blob_name(param: str) -> str:
    return param.replace("/", "_") + ".f32"


def save_checkpoint(store: ParamStore, path, meta: dict) -> None:
    parent = os.path.dirname(os.path.abspath(path))
    os.makedirs(parent, exist_ok=True)
    tmp = tempfile.mkdtemp(prefix=".ckpt-", dir=parent)
    try:
        index = {}
        for name, p in store.params.items():
            blob = _blob_name(name)
            p.data.astype("<f4").tofile(os.path.join(tmp, blob))
            index[name] = {"file": blob, "shape": list(p.shape)}
        full = dict(meta)
        full["step"] = store.step
        full["params"] = index
        with open(os.path.join(tmp, "meta.json"), "w") as fh:
            json.dump(full, fh, indent=1, sort_keys=True)
        if os.path.exists(path):
            shutil.rmtree(path)
        os.replace(tmp, path)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise


def read_checkpoint(path) -> Tuple[dict, Dict[str, np.ndarray]]:
    meta_path = os.path.join(path, "meta.json")
    try:
        with open(meta_path) as fh:
            meta = json.load(fh)
    except FileNotFoundError:
        raise CheckpointError(f"missing {meta_path}") from None
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"malformed {meta_path}: {exc}") from None
    state = {}
    for name, entry in meta.get("params", {}).items():
        blob = os.path.join(path, entry["file"])
        shape = tuple(entry["shape"])
        if not os.path.exists(blob):
            raise CheckpointError(f"missing parameter blob {blob}")
        arr = np.fromfile(blob, dtype="<f4")
        if arr.size != int(np.prod(shape)):
            raise CheckpointError(f"{blob}: expected {int(np.prod(shape))} floats, found {arr.size}")
        state[name] = arr.reshape(shape)
    return meta, state
