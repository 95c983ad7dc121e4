"""The super-resolution network, the weighting network, and checkpoint files."""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Tuple

import numpy as np

from . import tensor as T
from .core import fixedsum
from .stochastic import RngState

CHECKPOINT_MAGIC = b"TLWCKPT1"


class ConvStack:
    """Conv layers with ReLU between them (none after the last)."""

    def __init__(self, widths: List[int], kernel: int = 3):
        self.widths = list(widths)
        self.kernel = kernel
        self.weights: List[T.Tensor] = []
        self.biases: List[T.Tensor] = []
        for cin, cout in zip(widths[:-1], widths[1:]):
            self.weights.append(T.Tensor(np.zeros((cout, cin, kernel, kernel), np.float32), requires_grad=True))
            self.biases.append(T.Tensor(np.zeros(cout, np.float32), requires_grad=True))

    @property
    def depth(self) -> int:
        return len(self.weights)

    def named_parameters(self) -> Iterator[Tuple[str, T.Tensor]]:
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            yield f"conv{i}.weight", w
            yield f"conv{i}.bias", b

    def parameters(self) -> List[T.Tensor]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def init(self, gen: np.random.Generator, zero_last: bool = False) -> None:
        """Kaiming normal, fan-in scaled; biases zero."""
        for i, w in enumerate(self.weights):
            cout, cin, kh, kw = w.shape
            std = np.sqrt(2.0 / (cin * kh * kw))
            w.data = (gen.standard_normal(w.shape) * std).astype(np.float32)
            self.biases[i].data = np.zeros_like(self.biases[i].data)
        if zero_last:
            self.weights[-1].data = np.zeros_like(self.weights[-1].data)

    def run(self, h: T.Tensor) -> T.Tensor:
        pad = self.kernel // 2
        last = self.depth - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = T.conv2d(h, w, b, padding=pad)
            if i < last:
                h = T.relu(h)
        return h

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {name: p.data for name, p in self.named_parameters()}

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        for name, p in self.named_parameters():
            arr = np.asarray(state[name], dtype=np.float32)
            if arr.shape != p.shape:
                raise ValueError(f"{name}: checkpoint shape {arr.shape} != model shape {p.shape}")
            p.data = arr.copy()

    def copy_from(self, other: "ConvStack") -> None:
        self.load_state_dict(other.state_dict())


class SrModel(ConvStack):
    """VDSR-style residual network on a bicubically pre-upsampled input."""

    def __init__(self, depth: int = 8, width: int = 32, kernel: int = 3):
        if depth < 2:
            raise ValueError("SR model needs depth >= 2")
        super().__init__([3] + [width] * (depth - 1) + [3], kernel)
        self.width = width

    def forward(self, y_up: T.Tensor) -> T.Tensor:
        if y_up.ndim != 4 or y_up.shape[1] != 3:
            raise T.ShapeError(f"SR model expects (batch, 3, H, W) input, got {y_up.shape}")
        return y_up + self.run(y_up)

    __call__ = forward


class WeightModel(ConvStack):
    """Four convs (6 -> w -> w -> w -> 1), sigmoid, then per-image FixedSum."""

    def __init__(self, width: int = 32, kernel: int = 3):
        super().__init__([6, width, width, width, 1], kernel)
        self.width = width

    def forward(self, x: T.Tensor, x_hat: T.Tensor, k: float) -> T.Tensor:
        if x.shape != x_hat.shape:
            raise T.ShapeError(f"weighting inputs differ in shape: {x.shape} vs {x_hat.shape}")
        p = T.sigmoid(self.run(T.concat_channels(x, x_hat)))
        return fixedsum(p, k)

    __call__ = forward


def sr_forward(model: SrModel, y_up: T.Tensor) -> T.Tensor:
    return model.forward(y_up)


def weight_forward(model: WeightModel, x: T.Tensor, x_hat: T.Tensor, k: float) -> T.Tensor:
    return model.forward(x, x_hat, k)


def init_models(
    seed: int,
    sr_depth: int = 8,
    sr_width: int = 32,
    weight_width: int = 32,
    n_sr: int = 1,
) -> Tuple[List[SrModel], WeightModel]:
    """Seeded init. With ``n_sr > 1`` every SR model starts from the same parameters."""
    rng = RngState(seed)
    first = SrModel(sr_depth, sr_width)
    first.init(rng.generator("init", "sr"), zero_last=True)
    srs = [first]
    for _ in range(n_sr - 1):
        m = SrModel(sr_depth, sr_width)
        m.copy_from(first)
        srs.append(m)
    wm = WeightModel(weight_width)
    wm.init(rng.generator("init", "weight"))
    return srs, wm


# -- checkpoint files ---------------------------------------------------------
#
# layout: 8-byte magic, uint64 LE header length, UTF-8 JSON header, then the
# arrays back to back as little-endian float32 in header order.

def config_hash(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()


def save_checkpoint(path, arrays: Dict[str, np.ndarray], meta: dict) -> None:
    path = Path(path)
    entries = []
    offset = 0
    for name, arr in arrays.items():
        n = int(np.asarray(arr).size)
        entries.append({"name": name, "shape": list(np.shape(arr)), "offset": offset, "count": n})
        offset += n
    header = dict(meta)
    header["tensors"] = entries
    hbytes = json.dumps(header, sort_keys=True).encode()
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<Q", len(hbytes)))
        fh.write(hbytes)
        for arr in arrays.values():
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    tmp.replace(path)


def load_checkpoint(path) -> Tuple[Dict[str, np.ndarray], dict]:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise OSError(f"cannot read checkpoint {path}: {exc}") from exc
    if raw[:8] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path} is not a checkpoint file")
    (hlen,) = struct.unpack("<Q", raw[8:16])
    header = json.loads(raw[16 : 16 + hlen].decode())
    body = np.frombuffer(raw, dtype="<f4", offset=16 + hlen)
    arrays = {}
    for e in header.pop("tensors"):
        chunk = body[e["offset"] : e["offset"] + e["count"]]
        arrays[e["name"]] = chunk.astype(np.float32).reshape(e["shape"])
    return arrays, header


def file_hash(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
