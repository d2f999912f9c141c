"""CAM-family attribution over either pooling path.

All methods produce ``h(sum_k alpha_k F^k)`` at a chosen stage and differ in
how the channel weights ``alpha`` are obtained.  Features ``F`` come from
the frozen backbone and are therefore identical for the GAP and stream
paths; only the weights change.
"""

from __future__ import annotations

from typing import Optional

import numpy as np

from . import tensor as T
from .errors import DomainError, UsageError
from .model import CAClassifier, softmax_np
from .saliency import SaliencyMap, minmax_normalize, minmax_normalize_batch, upsample_bilinear
from .stream import raw_attention
from .tensor import Tensor

__all__ = [
    "METHODS", "cam", "grad_cam", "grad_cam_pp", "score_cam", "raw_attention_map",
    "stage_gradients", "saliency_batch", "explain", "upsample_bilinear", "gradcampp_weights",
]

METHODS = ("cam", "gradcam", "gradcampp", "scorecam", "rawattention")
GRADCAMPP_EPS = 1e-8


def _batch(x, dtype) -> tuple:
    x = np.asarray(x, dtype=dtype)
    return (x[None], True) if x.ndim == 3 else (x, False)


def _resolve_stage(model: CAClassifier, stage: Optional[int]) -> int:
    L = model.backbone.last_stage
    stage = L if stage is None else int(stage)
    if not 0 <= stage <= L:
        raise DomainError(f"stage {stage} has no recorded features (0..{L})")
    return stage


def _combine(alpha: np.ndarray, F: np.ndarray) -> np.ndarray:
    return np.einsum("nk,nkhw->nhw", alpha, F)


def predicted_classes(model: CAClassifier, x: np.ndarray, pooling: str) -> np.ndarray:
    return np.argmax(model.logits(x, pooling), axis=1)


# ----------------------------------------------------------------------------- CAM


def cam(model, F_L, class_index: int, stage: Optional[int] = None) -> SaliencyMap:
    """Classifier-weighted sum of last-stage maps, no activation."""
    backbone = model.backbone if isinstance(model, CAClassifier) else model
    if stage is not None and stage != backbone.last_stage:
        raise DomainError("CAM is defined for the last stage only")
    F = np.asarray(F_L.data if isinstance(F_L, Tensor) else F_L, dtype=np.float64)
    w = backbone.head_weight.data.astype(np.float64)
    if not 0 <= class_index < w.shape[0]:
        raise DomainError(f"class {class_index} out of range")
    S = np.tensordot(w[class_index], F, axes=(0, 0))
    return SaliencyMap(backbone.last_stage, S, int(class_index), "cam")


# ----------------------------------------------------------------------------- gradient methods


def stage_gradients(model: CAClassifier, x, classes, stage: Optional[int] = None,
                    pooling: str = "gap") -> tuple:
    """Features at ``stage`` and d(y^c)/dF for a batch, through the chosen pooling path.

    Returns float64 arrays ``(F, dF)`` shaped (N, d, h, w).
    """
    model.check_pooling(pooling)
    stage = _resolve_stage(model, stage)
    x, _ = _batch(x, model.dtype)
    classes = np.broadcast_to(np.asarray(classes, dtype=np.int64), (len(x),))
    feats = model.features(x)
    leaf = Tensor(feats[stage].data, requires_grad=True)
    downstream = model.backbone.forward_from(stage, leaf)
    path = list(feats[:stage]) + [leaf] + downstream
    logits = model.head_logits(path, pooling, classes=model.query_classes(feats))
    target = T.sum(T.select(logits, (np.arange(len(x)), classes)))
    target.backward()
    return leaf.data.astype(np.float64), leaf.grad.astype(np.float64)


def gradcam_weights(grads: np.ndarray) -> np.ndarray:
    return grads.mean(axis=(2, 3))


def gradcampp_weights(F: np.ndarray, grads: np.ndarray, eps: float = GRADCAMPP_EPS) -> np.ndarray:
    """Closed-form Grad-CAM++ channel weights from first-order gradients.

    With an exponential class score the higher derivatives reduce to powers
    of the first derivative.
    """
    g2 = grads ** 2
    g3 = g2 * grads
    total = F.sum(axis=(2, 3), keepdims=True)
    alpha = g2 / (2.0 * g2 + total * g3 + eps)
    alpha = np.where(grads != 0.0, alpha, 0.0)
    return (alpha * np.maximum(grads, 0.0)).sum(axis=(2, 3))


def grad_cam(model: CAClassifier, x, class_index: Optional[int] = None, stage: Optional[int] = None,
             pooling: str = "gap") -> SaliencyMap:
    xb, _ = _batch(x, model.dtype)
    stage = _resolve_stage(model, stage)
    c = predicted_classes(model, xb, pooling)[0] if class_index is None else class_index
    F, g = stage_gradients(model, xb, c, stage, pooling)
    alpha = gradcam_weights(g)
    S = np.maximum(_combine(alpha, F), 0.0)[0]
    return SaliencyMap(stage, S, int(c), "gradcam", meta={"alpha": alpha[0], "features": F[0]})


def grad_cam_pp(model: CAClassifier, x, class_index: Optional[int] = None,
                stage: Optional[int] = None, pooling: str = "gap") -> SaliencyMap:
    xb, _ = _batch(x, model.dtype)
    stage = _resolve_stage(model, stage)
    c = predicted_classes(model, xb, pooling)[0] if class_index is None else class_index
    F, g = stage_gradients(model, xb, c, stage, pooling)
    alpha = gradcampp_weights(F, g)
    S = np.maximum(_combine(alpha, F), 0.0)[0]
    return SaliencyMap(stage, S, int(c), "gradcampp", meta={"alpha": alpha[0], "features": F[0]})


# ----------------------------------------------------------------------------- Score-CAM


def channel_masks(F: np.ndarray, height: int, width: int) -> np.ndarray:
    """Upsample each channel map (d, h, w) to the input size and min-max normalize it."""
    return minmax_normalize_batch(upsample_bilinear(F, height, width))


def _scorecam_single(model, x, F, c, pooling, baseline, batch_limit) -> tuple:
    H, W = x.shape[-2:]
    masks = channel_masks(F, H, W)
    probes = (x[None].astype(np.float64) * masks[:, None]).astype(model.dtype)
    p = model.probabilities(probes, pooling, batch_size=batch_limit)[:, c]
    alpha = softmax_np(p - baseline[c])
    return alpha, masks


def _baseline_probs(model, x_shape, pooling) -> np.ndarray:
    return model.probabilities(np.zeros((1,) + tuple(x_shape), dtype=model.dtype), pooling)[0]


def score_cam(model: CAClassifier, x, class_index: Optional[int] = None, stage: Optional[int] = None,
              pooling: str = "gap", batch_limit: int = 64) -> SaliencyMap:
    """Channel weights from forward probes on feature-masked inputs; no gradients."""
    xb, _ = _batch(x, model.dtype)
    stage = _resolve_stage(model, stage)
    c = predicted_classes(model, xb, pooling)[0] if class_index is None else int(class_index)
    F = model.features(xb)[stage].data[0].astype(np.float64)
    base = _baseline_probs(model, xb.shape[1:], pooling)
    alpha, masks = _scorecam_single(model, xb[0], F, c, pooling, base, batch_limit)
    S = np.maximum(np.tensordot(alpha, F, axes=(0, 0)), 0.0)
    return SaliencyMap(stage, S, int(c), "scorecam",
                       meta={"alpha": alpha, "features": F, "masks": masks})


# ----------------------------------------------------------------------------- raw attention


def raw_attention_map(model: CAClassifier, x, stage: Optional[int] = None,
                      class_index: Optional[int] = None) -> SaliencyMap:
    if model.stream is None:
        raise UsageError("raw attention requires a trained stream")
    stage = _resolve_stage(model, stage)
    xb, _ = _batch(x, model.dtype)
    _, records = model.stream_outputs(model.features(xb))
    return raw_attention(records, stage, class_index)


# ----------------------------------------------------------------------------- dispatch


def validate(model: CAClassifier, method: str, pooling: str, stage: int) -> None:
    if method not in METHODS:
        raise UsageError(f"unknown method {method!r}")
    model.check_pooling(pooling)
    if method == "cam" and stage != model.backbone.last_stage:
        raise UsageError("cam is defined for the last stage only")
    if method == "rawattention":
        if pooling != "ca":
            raise UsageError("rawattention requires --pooling ca")
        if stage not in model.stream.stages:
            raise UsageError(f"stage {stage} is not visited by the stream")


def saliency_batch(model: CAClassifier, x: np.ndarray, method: str, classes: np.ndarray,
                   stage: Optional[int] = None, pooling: str = "gap",
                   batch_limit: int = 64) -> np.ndarray:
    """Non-negative (N, h, w) maps for a batch; raw attention comes back min-max normalized."""
    stage = _resolve_stage(model, stage)
    validate(model, method, pooling, stage)
    x = np.asarray(x, dtype=model.dtype)
    classes = np.asarray(classes, dtype=np.int64)
    if method == "cam":
        F = model.features(x)[-1].data.astype(np.float64)
        w = model.backbone.head_weight.data.astype(np.float64)[classes]
        return _combine(w, F)
    if method in ("gradcam", "gradcampp"):
        F, g = stage_gradients(model, x, classes, stage, pooling)
        alpha = gradcam_weights(g) if method == "gradcam" else gradcampp_weights(F, g)
        return np.maximum(_combine(alpha, F), 0.0)
    if method == "scorecam":
        F = model.features(x)[stage].data.astype(np.float64)
        base = _baseline_probs(model, x.shape[1:], pooling)
        out = []
        for n in range(len(x)):
            alpha, _ = _scorecam_single(model, x[n], F[n], classes[n], pooling, base, batch_limit)
            out.append(np.maximum(np.tensordot(alpha, F[n], axes=(0, 0)), 0.0))
        return np.stack(out)
    _, records = model.stream_outputs(model.features(x))
    rec = next(r for r in records if r.stage == stage)
    return minmax_normalize_batch(rec.map.astype(np.float64))


def explain(model: CAClassifier, x, method: str, class_index: Optional[int] = None,
            stage: Optional[int] = None, pooling: str = "gap", batch_limit: int = 64) -> SaliencyMap:
    """Single-image entry point used by the command line."""
    stage = _resolve_stage(model, stage)
    validate(model, method, pooling, stage)
    xb, _ = _batch(x, model.dtype)
    if method == "rawattention":
        return raw_attention_map(model, xb, stage)
    c = predicted_classes(model, xb, pooling)[0] if class_index is None else int(class_index)
    values = saliency_batch(model, xb, method, np.array([c]), stage, pooling, batch_limit)[0]
    return SaliencyMap(stage, values, c, method)


def normalized_upsampled(maps: np.ndarray, height: int, width: int) -> np.ndarray:
    """Min-max normalized, image-resolution version of an (N, h, w) stack."""
    return np.stack([minmax_normalize(upsample_bilinear(m, height, width)) for m in maps])
