"""A frozen backbone with its two pooling paths: GAP and the attention stream."""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np

from . import tensor as T
from .backbone import StagedBackbone
from .errors import DomainError, UsageError
from .stream import CAStream
from .tensor import Tensor

POOLINGS = ("gap", "ca")


def softmax_np(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


class CAClassifier:
    """Inference view over a backbone and an optional trained stream.

    Both are frozen on construction; the wrapper never updates parameters.
    """

    def __init__(self, backbone: StagedBackbone, stream: Optional[CAStream] = None):
        self.backbone = backbone
        self.stream = stream
        backbone.freeze()
        if stream is not None:
            stream.freeze()

    @property
    def num_classes(self) -> int:
        return self.backbone.num_classes

    @property
    def dtype(self):
        return self.backbone.dtype

    def check_pooling(self, pooling: str) -> None:
        if pooling not in POOLINGS:
            raise UsageError(f"unknown pooling {pooling!r}")
        if pooling == "ca" and self.stream is None:
            raise UsageError("pooling 'ca' requires a trained stream")

    def query_classes(self, features: Sequence) -> Optional[np.ndarray]:
        """Baseline GAP prediction, used to pick class-specific queries at inference."""
        if self.stream is None or not self.stream.class_specific:
            return None
        F_L = T.as_tensor(features[-1]).data
        logits = self.backbone.classify_gap(Tensor(F_L)).data
        return np.argmax(logits, axis=-1)

    def head_logits(self, features: Sequence, pooling: str = "gap", classes=None) -> Tensor:
        """Logits from stage features through the chosen pooling path."""
        self.check_pooling(pooling)
        if pooling == "gap":
            return self.backbone.classify_gap(features[-1])
        if classes is None:
            classes = self.query_classes(features)
        q, _ = self.stream.forward(features, classes)
        return self._head(q)

    def stream_outputs(self, features: Sequence, classes=None) -> tuple:
        if self.stream is None:
            raise UsageError("no stream attached")
        if classes is None:
            classes = self.query_classes(features)
        q, records = self.stream.forward(features, classes)
        return self._head(q), records

    def _head(self, q: Tensor) -> Tensor:
        b = self.backbone
        if q.ndim == 1:
            y = T.linear(T.reshape(q, (1, q.shape[0])), b.head_weight, b.head_bias)
            return T.reshape(y, (b.num_classes,))
        return T.linear(q, b.head_weight, b.head_bias)

    def features(self, x) -> list:
        feats, _ = self.backbone.forward_stages(x)
        return feats

    def logits(self, x: np.ndarray, pooling: str = "gap", batch_size: int = 256) -> np.ndarray:
        """No-grad logits for a batch of images (N, C, H, W)."""
        self.check_pooling(pooling)
        x = np.asarray(x, dtype=self.dtype)
        if x.ndim == 3:
            return self.logits(x[None], pooling, batch_size)[0]
        out = []
        for i in range(0, len(x), batch_size):
            feats = self.features(x[i:i + batch_size])
            out.append(self.head_logits(feats, pooling).data)
        return np.concatenate(out) if out else np.zeros((0, self.num_classes), self.dtype)

    def probabilities(self, x: np.ndarray, pooling: str = "gap", batch_size: int = 256) -> np.ndarray:
        return softmax_np(self.logits(x, pooling, batch_size).astype(np.float64))

    def accuracy(self, x: np.ndarray, labels: np.ndarray, pooling: str = "gap") -> float:
        if len(x) == 0:
            raise DomainError("empty evaluation set")
        pred = np.argmax(self.logits(x, pooling), axis=1)
        return float(np.mean(pred == np.asarray(labels)))
