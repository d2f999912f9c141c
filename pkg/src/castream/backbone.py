"""Small staged residual convolutional classifier.

The network is ``g(GAP(f_L(...f_0(x))))``.  Every stage ends at a tap point
whose feature tensor is exposed to the attention stream and to the
attribution methods.
"""

from __future__ import annotations

import copy
import hashlib
from collections import OrderedDict
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import tensor as T
from .errors import DomainError, ShapeError
from .tensor import Tensor


@dataclass(frozen=True)
class StageSpec:
    index: int
    channels_in: int
    channels_out: int
    spatial_downsample: int = 1
    blocks: int = 2

    def __post_init__(self):
        if self.spatial_downsample not in (1, 2):
            raise DomainError("spatial_downsample must be 1 or 2")
        if self.blocks < 1:
            raise DomainError("a stage needs at least one block")


def default_stage_specs(widths: Sequence[int] = (8, 16, 32, 64), in_channels: int = 3,
                        blocks: int = 2) -> list:
    specs, prev = [], in_channels
    for i, w in enumerate(widths):
        specs.append(StageSpec(i, prev, w, 1 if i == 0 else 2, blocks))
        prev = w
    return specs


def validate_specs(specs: Sequence[StageSpec]) -> None:
    for i, s in enumerate(specs):
        if s.index != i:
            raise ShapeError(f"stage {i} has index {s.index}")
        if i and s.channels_in != specs[i - 1].channels_out:
            raise ShapeError(f"stage {i} input width does not match stage {i - 1}")
        if i and s.channels_out < specs[i - 1].channels_out:
            raise ShapeError("stage widths must be non-decreasing")
        if i and s.spatial_downsample != 2:
            raise ShapeError("stages after the first must downsample by 2")


def param_digest(params) -> str:
    """SHA-256 over parameter names, shapes, dtypes and little-endian bytes."""
    h = hashlib.sha256()
    for name, p in params.items():
        arr = p.data if isinstance(p, Tensor) else np.asarray(p)
        arr = np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<"))
        h.update(name.encode())
        h.update(repr((arr.shape, arr.dtype.str)).encode())
        h.update(arr.tobytes())
    return h.hexdigest()


class StagedBackbone:
    """Residual conv stages plus a linear head over globally pooled features.

    Each block computes ``relu(conv3x3(x) + skip(x))`` where ``skip`` is the
    identity, or a strided 1x1 projection when width or resolution changes.
    """

    def __init__(self, specs: Optional[Sequence[StageSpec]] = None, num_classes: int = 4,
                 input_shape: Sequence[int] = (3, 32, 32), seed: int = 0,
                 dtype=np.float32):
        self.specs = list(specs) if specs is not None else default_stage_specs(
            in_channels=input_shape[0])
        validate_specs(self.specs)
        if self.specs[0].channels_in != input_shape[0]:
            raise ShapeError("first stage width does not match input channels")
        self.num_classes = int(num_classes)
        self.input_shape = tuple(int(v) for v in input_shape)
        self.seed = seed
        self.frozen = False
        self.params: "OrderedDict[str, Tensor]" = OrderedDict()
        rng = np.random.default_rng(seed)
        for s in self.specs:
            cin = s.channels_in
            for b in range(s.blocks):
                stride = s.spatial_downsample if b == 0 else 1
                std = np.sqrt(2.0 / (cin * 9))
                if b > 0:
                    # keep residual variance bounded without normalization layers
                    std *= 0.5
                self._add(f"stage{s.index}.block{b}.conv.weight",
                          rng.normal(0.0, std, (s.channels_out, cin, 3, 3)), dtype)
                self._add(f"stage{s.index}.block{b}.conv.bias", np.zeros(s.channels_out), dtype)
                if cin != s.channels_out or stride != 1:
                    self._add(f"stage{s.index}.block{b}.skip.weight",
                              rng.normal(0.0, np.sqrt(1.0 / cin), (s.channels_out, cin, 1, 1)),
                              dtype)
                cin = s.channels_out
        d = self.specs[-1].channels_out
        self._add("head.weight", rng.normal(0.0, np.sqrt(1.0 / d), (self.num_classes, d)), dtype)
        self._add("head.bias", np.zeros(self.num_classes), dtype)

    def _add(self, name, value, dtype):
        self.params[name] = Tensor(np.asarray(value, dtype=dtype), requires_grad=True, name=name)

    # -- structure ----------------------------------------------------------------------------

    @property
    def num_stages(self) -> int:
        return len(self.specs)

    @property
    def last_stage(self) -> int:
        return len(self.specs) - 1

    @property
    def dims(self) -> list:
        return [s.channels_out for s in self.specs]

    def feature_shapes(self) -> list:
        _, h, w = self.input_shape
        shapes = []
        for s in self.specs:
            for b in range(s.blocks):
                if b == 0 and s.spatial_downsample == 2:
                    h, w = (h - 1) // 2 + 1, (w - 1) // 2 + 1
            shapes.append((s.channels_out, h, w))
        return shapes

    @property
    def head_weight(self) -> Tensor:
        return self.params["head.weight"]

    @property
    def head_bias(self) -> Tensor:
        return self.params["head.bias"]

    @property
    def dtype(self):
        return self.head_weight.dtype

    # -- forward ------------------------------------------------------------------------------

    def _check_input(self, x: Tensor) -> Tensor:
        if x.ndim == 3:
            x = T.reshape(x, (1,) + x.shape)
        if x.ndim != 4 or x.shape[1:] != self.input_shape:
            raise ShapeError(f"expected input (N,) + {self.input_shape}, got {x.shape}")
        return x

    def run_stage(self, index: int, x: Tensor) -> Tensor:
        s = self.specs[index]
        p = self.params
        for b in range(s.blocks):
            stride = s.spatial_downsample if b == 0 else 1
            pre = f"stage{index}.block{b}"
            y = T.conv2d(x, p[pre + ".conv.weight"], p[pre + ".conv.bias"], stride=stride, padding=1)
            skip = p.get(pre + ".skip.weight")
            sk = x if skip is None else T.conv2d(x, skip, stride=stride)
            x = T.relu(T.add(y, sk))
        return x

    def forward_stages(self, x) -> tuple:
        """Return ``([F_0, ..., F_L], gap_logits)`` for a batch (or one image)."""
        if not isinstance(x, Tensor):
            x = Tensor(np.asarray(x, dtype=self.dtype))
        single = x.ndim == 3
        x = self._check_input(x)
        feats = []
        h = x
        for i in range(self.num_stages):
            h = self.run_stage(i, h)
            feats.append(h)
        logits = self.classify_gap(feats[-1])
        if single:
            feats = [T.reshape(f, f.shape[1:]) for f in feats]
            logits = T.reshape(logits, logits.shape[1:])
        return feats, logits

    def forward_from(self, stage: int, F: Tensor) -> list:
        """Features of stages ``stage+1 .. L`` recomputed from ``F_stage``."""
        out, h = [], F
        for i in range(stage + 1, self.num_stages):
            h = self.run_stage(i, h)
            out.append(h)
        return out

    def classify_gap(self, F_L) -> Tensor:
        F_L = T.as_tensor(F_L)
        if F_L.shape[-3] != self.specs[-1].channels_out:
            raise ShapeError(f"classify_gap: expected {self.specs[-1].channels_out} channels")
        pooled = T.gap(F_L)
        if pooled.ndim == 1:
            pooled = T.reshape(pooled, (1, -1))
            y = T.linear(pooled, self.head_weight, self.head_bias)
            return T.reshape(y, (self.num_classes,))
        return T.linear(pooled, self.head_weight, self.head_bias)

    def predict_logits(self, x: np.ndarray, batch_size: int = 256) -> np.ndarray:
        outs = []
        for i in range(0, len(x), batch_size):
            _, y = self.forward_stages(x[i:i + batch_size])
            outs.append(y.data)
        return np.concatenate(outs)

    # -- parameters ---------------------------------------------------------------------------

    def freeze(self) -> str:
        for p in self.params.values():
            p.requires_grad = False
            p.grad = None
        self.frozen = True
        return self.param_digest()

    def param_digest(self) -> str:
        return param_digest(self.params)

    def astype(self, dtype) -> "StagedBackbone":
        """Independent copy with every parameter cast to ``dtype``."""
        out = copy.deepcopy(self)
        for p in out.params.values():
            p.data = p.data.astype(dtype)
            p.grad = None
        return out

    def config(self) -> dict:
        return {
            "stages": [[s.index, s.channels_in, s.channels_out, s.spatial_downsample, s.blocks]
                       for s in self.specs],
            "num_classes": self.num_classes,
            "input_shape": list(self.input_shape),
            "seed": self.seed,
        }

    @classmethod
    def from_config(cls, cfg: dict, dtype=np.float32) -> "StagedBackbone":
        specs = [StageSpec(*row) for row in cfg["stages"]]
        return cls(specs, cfg["num_classes"], cfg["input_shape"], cfg.get("seed", 0), dtype)
