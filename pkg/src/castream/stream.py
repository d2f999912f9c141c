"""Cross-attention stream: a CLS query that pools backbone features stage by stage.

At every visited stage the query attends over the patch features,

    a = softmax(F q / sqrt(d)),   pooled = F^T a,

and the pooled vector is projected to the next stage's width,
``q_next = W @ pooled``.  The final query replaces global average pooling
in front of the frozen linear head.
"""

from __future__ import annotations

import copy
import math
from collections import OrderedDict
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import tensor as T
from .backbone import param_digest
from .errors import DomainError, ShapeError
from .saliency import SaliencyMap, minmax_normalize
from .tensor import Tensor

VARIANTS = ("vanilla", "projected", "mlp", "projected_mlp")
CLASS_MODES = ("agnostic", "specific")


def tokens(F) -> Tensor:
    """(C, H, W) -> (H*W, C), or (N, C, H, W) -> (N, H*W, C), row-major over space."""
    F = T.as_tensor(F)
    if F.ndim == 3:
        c, h, w = F.shape
        return T.reshape(T.transpose(F, (1, 2, 0)), (h * w, c))
    if F.ndim == 4:
        n, c, h, w = F.shape
        return T.reshape(T.transpose(F, (0, 2, 3, 1)), (n, h * w, c))
    raise ShapeError(f"expected a 3-D or 4-D feature tensor, got {F.shape}")


def _attend(q: Tensor, K: Tensor, temperature: float) -> Tensor:
    if K.ndim == 2:
        scores = T.reshape(T.matmul(K, T.reshape(q, (q.shape[0], 1))), (K.shape[0],))
    else:
        scores = T.reshape(T.matmul(K, T.reshape(q, q.shape + (1,))), K.shape[:2])
    return T.softmax(scores, temperature)


def _pool(V: Tensor, a: Tensor) -> Tensor:
    if V.ndim == 2:
        return T.reshape(T.matmul(T.transpose(V), T.reshape(a, (a.shape[0], 1))), (V.shape[1],))
    out = T.matmul(T.transpose(V, (0, 2, 1)), T.reshape(a, a.shape + (1,)))
    return T.reshape(out, (V.shape[0], V.shape[2]))


def _check_block(q: Tensor, F: Tensor) -> None:
    if F.ndim not in (2, 3) or q.ndim != F.ndim - 1:
        raise ShapeError(f"ca_block: query {q.shape} vs features {F.shape}")
    if F.shape[-2] == 0:
        raise ShapeError("ca_block: no patch tokens")
    if q.shape[-1] != F.shape[-1] or (F.ndim == 3 and q.shape[0] != F.shape[0]):
        raise ShapeError(f"ca_block: query {q.shape} vs features {F.shape}")
    if not np.all(np.isfinite(q.data)):
        raise DomainError("ca_block: query is not finite")


def ca_block(q, F, temperature: Optional[float] = None) -> tuple:
    """Pool patch tokens ``F`` (p, d) with query ``q`` (d,); batched as (N, d), (N, p, d).

    Returns ``(pooled, attention)``.
    """
    q, F = T.as_tensor(q), T.as_tensor(F)
    _check_block(q, F)
    temperature = math.sqrt(F.shape[-1]) if temperature is None else temperature
    a = _attend(q, F, temperature)
    return _pool(F, a), a


def _project_tokens(F: Tensor, W: Tensor) -> Tensor:
    if F.ndim == 2:
        return T.matmul(F, W)
    n, p, d = F.shape
    return T.reshape(T.matmul(T.reshape(F, (n * p, d)), W), (n, p, W.shape[1]))


def ca_block_projected(q, F, wk, wv, temperature: Optional[float] = None) -> tuple:
    """Attention over keys ``F @ wk``, pooling values ``F @ wv``.

    The temperature uses the input width d of ``F``.
    """
    q, F, wk, wv = (T.as_tensor(v) for v in (q, F, wk, wv))
    _check_block(q, F)
    d = F.shape[-1]
    if wk.shape != (d, d) or wv.shape != (d, d):
        raise ShapeError(f"projections must be {d}x{d}")
    temperature = math.sqrt(d) if temperature is None else temperature
    a = _attend(q, _project_tokens(F, wk), temperature)
    return _pool(_project_tokens(F, wv), a), a


def ca_block_mlp(q, w1, b1, w2, b2) -> Tensor:
    """``w2 @ gelu(w1 @ q + b1) + b2`` with a 2d-wide hidden layer."""
    q = T.as_tensor(q)
    single = q.ndim == 1
    if single:
        q = T.reshape(q, (1, q.shape[0]))
    w1, w2 = T.as_tensor(w1), T.as_tensor(w2)
    d = q.shape[1]
    if w1.shape != (2 * d, d) or w2.shape != (d, 2 * d):
        raise ShapeError(f"mlp weights must be ({2 * d},{d}) and ({d},{2 * d})")
    out = T.linear(T.gelu(T.linear(q, w1, b1)), w2, b2)
    return T.reshape(out, (d,)) if single else out


@dataclass
class AttentionRecord:
    stage: int
    attention: np.ndarray  # (p,) or (N, p)
    spatial: tuple  # (h, w)

    @property
    def map(self) -> np.ndarray:
        return self.attention.reshape(self.attention.shape[:-1] + tuple(self.spatial))


@dataclass(frozen=True)
class StreamConfig:
    start_stage: int = 0
    variant: str = "vanilla"
    class_mode: str = "agnostic"
    seed: int = 0

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise DomainError(f"unknown block variant {self.variant!r}")
        if self.class_mode not in CLASS_MODES:
            raise DomainError(f"unknown class mode {self.class_mode!r}")

    def to_dict(self) -> dict:
        return {"start_stage": self.start_stage, "variant": self.variant,
                "class_mode": self.class_mode, "seed": self.seed}


class CAStream:
    """Learnable query, inter-stage projections and optional block parameters.

    ``dims`` lists the backbone widths d_0..d_L.  Projection ``W_l`` maps
    d_l -> d_{l+1}; the last one is square so the frozen head can consume it.
    """

    def __init__(self, dims: Sequence[int], num_classes: int, config: StreamConfig = StreamConfig(),
                 dtype=np.float32):
        self.dims = [int(d) for d in dims]
        self.num_classes = int(num_classes)
        self.config = config
        s, L = config.start_stage, len(self.dims) - 1
        if not 0 <= s <= L:
            raise DomainError(f"start stage {s} outside 0..{L}")
        self.params: "OrderedDict[str, Tensor]" = OrderedDict()
        rng = np.random.default_rng(config.seed)
        ds = self.dims[s]
        if config.class_mode == "specific":
            self._add("stream.query_bank", rng.normal(1.0, 1.0, (self.num_classes, ds)), dtype)
        else:
            self._add("stream.query", rng.normal(1.0, 1.0, ds), dtype)
        for l in self.stages:
            d = self.dims[l]
            d_next = self.dims[l + 1] if l < L else d
            if "projected" in config.variant:
                self._add(f"stream.block{l}.wk", np.eye(d), dtype)
                self._add(f"stream.block{l}.wv", np.eye(d), dtype)
            if "mlp" in config.variant:
                self._add(f"stream.block{l}.mlp.w1", rng.normal(0, math.sqrt(1 / d), (2 * d, d)), dtype)
                self._add(f"stream.block{l}.mlp.b1", np.zeros(2 * d), dtype)
                self._add(f"stream.block{l}.mlp.w2", rng.normal(0, math.sqrt(1 / (2 * d)), (d, 2 * d)), dtype)
                self._add(f"stream.block{l}.mlp.b2", np.zeros(d), dtype)
            W = np.eye(d) if l == L else rng.normal(0.0, math.sqrt(1.0 / d), (d_next, d))
            self._add(f"stream.proj{l}.weight", W, dtype)

    def _add(self, name, value, dtype):
        self.params[name] = Tensor(np.asarray(value, dtype=dtype), requires_grad=True, name=name)

    @property
    def stages(self) -> range:
        return range(self.config.start_stage, len(self.dims))

    @property
    def class_specific(self) -> bool:
        return self.config.class_mode == "specific"

    def initial_query(self, batch: Optional[int], classes=None) -> Tensor:
        if self.class_specific:
            if classes is None:
                raise DomainError("class-specific stream needs a class per sample")
            classes = np.atleast_1d(np.asarray(classes, dtype=np.int64))
            if classes.size and (classes.min() < 0 or classes.max() >= self.num_classes):
                raise DomainError(f"class index out of range 0..{self.num_classes - 1}")
            q = T.take_rows(self.params["stream.query_bank"], classes)
            if batch is None:
                return T.reshape(q, (q.shape[1],))
            if classes.shape[0] != batch:
                raise ShapeError("need one class per sample")
            return q
        q = self.params["stream.query"]
        return q if batch is None else T.broadcast_rows(q, batch)

    def forward(self, features: Sequence, classes=None) -> tuple:
        """Run the stream over backbone features ``[F_0, ..., F_L]``.

        Returns the final query (d_L,) or (N, d_L) and one
        :class:`AttentionRecord` per visited stage.
        """
        if len(features) != len(self.dims):
            raise ShapeError(f"expected {len(self.dims)} feature tensors, got {len(features)}")
        first = T.as_tensor(features[self.config.start_stage])
        batch = None if first.ndim == 3 else first.shape[0]
        q = self.initial_query(batch, classes)
        records = []
        for l in self.stages:
            F = T.as_tensor(features[l])
            if F.shape[-3] != self.dims[l]:
                raise ShapeError(f"stage {l} has {F.shape[-3]} channels, expected {self.dims[l]}")
            toks = tokens(F)
            pre = f"stream.block{l}"
            if "projected" in self.config.variant:
                pooled, a = ca_block_projected(q, toks, self.params[pre + ".wk"], self.params[pre + ".wv"])
            else:
                pooled, a = ca_block(q, toks)
            if "mlp" in self.config.variant:
                pooled = ca_block_mlp(pooled, *(self.params[f"{pre}.mlp.{k}"] for k in ("w1", "b1", "w2", "b2")))
            q = _apply_projection(self.params[f"stream.proj{l}.weight"], pooled)
            records.append(AttentionRecord(l, a.data, tuple(F.shape[-2:])))
        return q, records

    def freeze(self) -> None:
        for p in self.params.values():
            p.requires_grad = False
            p.grad = None

    def trainable(self) -> list:
        return list(self.params.values())

    def param_digest(self) -> str:
        return param_digest(self.params)

    def astype(self, dtype) -> "CAStream":
        """Independent copy with every parameter cast to ``dtype``."""
        out = copy.deepcopy(self)
        for p in out.params.values():
            p.data = p.data.astype(dtype)
            p.grad = None
        return out

    def config_dict(self) -> dict:
        return {"dims": self.dims, "num_classes": self.num_classes, **self.config.to_dict()}

    @classmethod
    def from_config(cls, cfg: dict, dtype=np.float32) -> "CAStream":
        sc = StreamConfig(cfg["start_stage"], cfg["variant"], cfg["class_mode"], cfg.get("seed", 0))
        return cls(cfg["dims"], cfg["num_classes"], sc, dtype)


def _apply_projection(W: Tensor, v: Tensor) -> Tensor:
    if v.ndim == 1:
        return T.reshape(T.matmul(W, T.reshape(v, (v.shape[0], 1))), (W.shape[0],))
    return T.matmul(v, T.transpose(W))


def stream_forward(stream: CAStream, features: Sequence, classes=None) -> tuple:
    return stream.forward(features, classes)


def raw_attention(records: Sequence[AttentionRecord], stage: int, class_index=None,
                  sample: int = 0) -> SaliencyMap:
    """Min-max normalized attention map at ``stage``.

    Raw attention is class agnostic: ``class_index`` is accepted and ignored.
    """
    for r in records:
        if r.stage == stage:
            m = r.map
            if m.ndim == 3:
                m = m[sample]
            return SaliencyMap(stage, minmax_normalize(m), None, "rawattention", "minmax")
    raise DomainError(f"stage {stage} was not visited by the stream")
