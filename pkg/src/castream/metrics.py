"""Classification-based interpretability metrics.

Average drop / gain / increase compare the class probability on the full
image with the probability on the image soft-masked by the normalized,
upsampled saliency map (``x * M``).  Insertion starts from a blurred copy
and reveals original pixels in decreasing saliency order; deletion blacks
pixels out in the same order.  Both report the trapezoidal area under the
probability curve over the revealed / deleted fraction.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.ndimage import convolve1d

from .attribution import METHODS, normalized_upsampled, saliency_batch, validate
from .dataset import Dataset
from .errors import DomainError, ShapeError, UsageError
from .model import CAClassifier

logger = logging.getLogger(__name__)

GAIN_FLOOR = 1e-12


@dataclass(frozen=True)
class MaskProtocol:
    kind: str = "saliency_mask"
    blur_kernel: int = 11
    blur_sigma: float = 5.0
    step_fraction: float = 1.0 / 64

    def __post_init__(self):
        if self.kind not in ("saliency_mask", "deletion_black", "insertion_blur"):
            raise DomainError(f"unknown mask protocol {self.kind!r}")
        if not 0.0 < self.step_fraction <= 1.0:
            raise DomainError("step_fraction must lie in (0, 1]")
        if self.blur_kernel < 1 or self.blur_kernel % 2 == 0 or not self.blur_sigma > 0:
            raise DomainError("blur kernel must be odd and positive, sigma positive")

    @property
    def steps(self) -> int:
        return int(math.ceil(1.0 / self.step_fraction - 1e-9))


# ----------------------------------------------------------------------------- AD / AG / AI


def _probs(p_full, p_masked) -> tuple:
    p_full = np.atleast_1d(np.asarray(p_full, dtype=np.float64))
    p_masked = np.atleast_1d(np.asarray(p_masked, dtype=np.float64))
    if p_full.shape != p_masked.shape:
        raise ShapeError("p_full and p_masked must have the same length")
    if p_full.size == 0:
        raise DomainError("no samples")
    if np.any(p_full <= 0):
        raise DomainError("p_full must be positive")
    return p_full, p_masked


def drop_terms(p_full, p_masked) -> np.ndarray:
    p_full, p_masked = _probs(p_full, p_masked)
    return np.maximum(0.0, p_full - p_masked) / p_full


def gain_terms(p_full, p_masked) -> np.ndarray:
    p_full, p_masked = _probs(p_full, p_masked)
    return np.maximum(0.0, p_masked - p_full) / np.maximum(1.0 - p_full, GAIN_FLOOR)


def average_drop(p_full, p_masked) -> float:
    return float(100.0 * drop_terms(p_full, p_masked).mean())


def average_gain(p_full, p_masked) -> float:
    return float(100.0 * gain_terms(p_full, p_masked).mean())


def average_increase(p_full, p_masked) -> float:
    p_full, p_masked = _probs(p_full, p_masked)
    return float(100.0 * np.mean(p_masked > p_full))


# ----------------------------------------------------------------------------- insertion / deletion


def gaussian_kernel(size: int, sigma: float) -> np.ndarray:
    r = np.arange(size) - (size - 1) / 2
    k = np.exp(-0.5 * (r / sigma) ** 2)
    return k / k.sum()


def blur(image: np.ndarray, protocol: MaskProtocol = MaskProtocol()) -> np.ndarray:
    """Separable Gaussian blur over the two spatial axes, reflecting at borders."""
    k = gaussian_kernel(protocol.blur_kernel, protocol.blur_sigma)
    out = convolve1d(np.asarray(image, dtype=np.float64), k, axis=-1, mode="reflect")
    return convolve1d(out, k, axis=-2, mode="reflect")


def pixel_order(saliency: np.ndarray) -> np.ndarray:
    """Flat pixel indices by decreasing saliency; ties keep row-major order."""
    return np.argsort(-np.asarray(saliency, dtype=np.float64).ravel(), kind="stable")


def step_counts(num_pixels: int, protocol: MaskProtocol) -> np.ndarray:
    n = protocol.steps
    if num_pixels < n:
        raise DomainError("step_fraction is finer than one pixel")
    return (np.arange(n + 1) * num_pixels) // n


def _curve_images(x: np.ndarray, saliency: np.ndarray, start: np.ndarray, protocol: MaskProtocol) -> tuple:
    """Images where the first k pixels in saliency order come from ``x`` and the rest from ``start``."""
    if saliency.shape != x.shape[-2:]:
        raise ShapeError(f"saliency {saliency.shape} does not match input {x.shape[-2:]}")
    H, W = saliency.shape
    counts = step_counts(H * W, protocol)
    rank = np.empty(H * W, dtype=np.int64)
    rank[pixel_order(saliency)] = np.arange(H * W)
    reveal = (rank[None, :] < counts[:, None]).reshape(-1, 1, H, W)
    return np.where(reveal, x[None], start[None]), counts / (H * W)


def insertion_curve(prob_fn: Callable, x: np.ndarray, saliency: np.ndarray, class_index: int,
                    protocol: MaskProtocol = MaskProtocol()) -> tuple:
    x = np.asarray(x)
    images, frac = _curve_images(x, saliency, blur(x, protocol).astype(x.dtype), protocol)
    return frac, prob_fn(images)[:, class_index]


def deletion_curve(prob_fn: Callable, x: np.ndarray, saliency: np.ndarray, class_index: int,
                   protocol: MaskProtocol = MaskProtocol()) -> tuple:
    x = np.asarray(x)
    images, frac = _curve_images(np.zeros_like(x), saliency, x, protocol)
    return frac, prob_fn(images)[:, class_index]


def auc(fractions: np.ndarray, probs: np.ndarray) -> float:
    return float(np.trapezoid(probs, fractions))


def insertion(prob_fn: Callable, x, saliency, class_index: int,
              protocol: MaskProtocol = MaskProtocol()) -> float:
    return auc(*insertion_curve(prob_fn, x, saliency, class_index, protocol))


def deletion(prob_fn: Callable, x, saliency, class_index: int,
             protocol: MaskProtocol = MaskProtocol()) -> float:
    return auc(*deletion_curve(prob_fn, x, saliency, class_index, protocol))


def probability_path(model: CAClassifier, pooling: str, batch_size: int = 256) -> Callable:
    model.check_pooling(pooling)
    return lambda images: model.probabilities(images, pooling, batch_size)


# ----------------------------------------------------------------------------- suite


@dataclass
class MetricsReport:
    method: str
    pooling: str
    n: int
    ad: float
    ag: float
    ai: float
    insertion: float
    deletion: float
    records: list = field(default_factory=list, repr=False)

    def row(self) -> list:
        return [self.method, self.pooling, self.n] + [f"{v:.6f}" for v in
                                                       (self.ad, self.ag, self.ai, self.insertion, self.deletion)]

    def to_dict(self) -> dict:
        per = {k: [r[k] for r in self.records] for k in (self.records[0] if self.records else {})}
        return {"method": self.method, "pooling": self.pooling, "N": self.n,
                "AD": self.ad, "AG": self.ag, "AI": self.ai, "I": self.insertion,
                "D": self.deletion, "samples": per}


def _evaluate_chunk(model, x, labels, index, method, pooling, score_pooling, stage, protocol, batch_limit):
    prob_fn = probability_path(model, score_pooling)
    probs = prob_fn(x)
    classes = np.argmax(probs, axis=1)
    p_full = probs[np.arange(len(x)), classes]
    maps = saliency_batch(model, x, method, classes, stage, pooling, batch_limit)
    H, W = x.shape[-2:]
    masks = normalized_upsampled(maps, H, W)
    masked = (x.astype(np.float64) * masks[:, None]).astype(x.dtype)
    p_masked = prob_fn(masked)[np.arange(len(x)), classes]
    records = []
    for i in range(len(x)):
        ins = insertion(prob_fn, x[i], masks[i], classes[i], protocol)
        dele = deletion(prob_fn, x[i], masks[i], classes[i], protocol)
        records.append({
            "index": int(index[i]), "label": int(labels[i]), "class": int(classes[i]),
            "p_full": float(p_full[i]), "p_masked": float(p_masked[i]),
            "insertion": ins, "deletion": dele,
        })
    return records


def evaluate(model: CAClassifier, dataset: Dataset, method: str, pooling: str,
             protocol: MaskProtocol = MaskProtocol(), stage: Optional[int] = None,
             threads: int = 1, chunk: int = 16, prob_path: Optional[str] = None,
             batch_limit: int = 64) -> MetricsReport:
    """Metrics for one (method, pooling) pair over every sample of ``dataset``."""
    if len(dataset) == 0:
        raise DomainError("empty evaluation set")
    stage = model.backbone.last_stage if stage is None else stage
    validate(model, method, pooling, stage)
    score_pooling = pooling if prob_path is None else prob_path
    starts = list(range(0, len(dataset), chunk))

    def work(s):
        sl = slice(s, s + chunk)
        return _evaluate_chunk(model, dataset.images[sl], dataset.labels[sl], np.arange(len(dataset))[sl],
                               method, pooling, score_pooling, stage, protocol, batch_limit)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(work, starts))
    else:
        parts = [work(s) for s in starts]
    records = [r for part in parts for r in part]
    p_full = np.array([r["p_full"] for r in records])
    p_masked = np.array([r["p_masked"] for r in records])
    drops, gains = drop_terms(p_full, p_masked), gain_terms(p_full, p_masked)
    for r, d, g in zip(records, drops, gains):
        r["drop"] = float(d)
        r["gain"] = float(g)
    return MetricsReport(
        method, pooling, len(records),
        average_drop(p_full, p_masked), average_gain(p_full, p_masked),
        average_increase(p_full, p_masked),
        float(np.mean([r["insertion"] for r in records])),
        float(np.mean([r["deletion"] for r in records])),
        records,
    )


def evaluate_suite(model: CAClassifier, dataset: Dataset, methods: Sequence[str],
                   poolings: Sequence[str], protocol: MaskProtocol = MaskProtocol(),
                   stage: Optional[int] = None, threads: int = 1, prob_path: Optional[str] = None,
                   batch_limit: int = 64) -> list:
    """One report per valid (method, pooling) pair, in the order given.

    Pairs that are undefined (raw attention under GAP) are skipped with a warning.
    """
    if len(dataset) == 0:
        raise DomainError("empty evaluation set")
    for m in methods:
        if m not in METHODS:
            raise UsageError(f"unknown method {m!r}")
    reports = []
    for method in methods:
        for pooling in poolings:
            model.check_pooling(pooling)
            if method == "rawattention" and pooling != "ca":
                logger.warning("skipping rawattention under %s pooling", pooling)
                continue
            reports.append(evaluate(model, dataset, method, pooling, protocol, stage, threads,
                                    prob_path=prob_path, batch_limit=batch_limit))
    return reports


CSV_HEADER = ["method", "pooling", "N", "AD", "AG", "AI", "I", "D"]


def write_reports_csv(reports: Sequence[MetricsReport], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for r in reports:
            w.writerow(r.row())


def write_reports_json(reports: Sequence[MetricsReport], path) -> None:
    with open(path, "w") as fh:
        json.dump([r.to_dict() for r in reports], fh, sort_keys=True, indent=1)
        fh.write("\n")


METHOD_LABELS = {"cam": "CAM", "gradcam": "Grad-CAM", "gradcampp": "Grad-CAM++",
                 "scorecam": "Score-CAM", "rawattention": "Raw attention"}


def format_table(reports: Sequence[MetricsReport]) -> str:
    """Markdown table with AD/AG/AI in percent and I/D scaled by 100, two decimals."""
    lines = ["| Method | Pool | AD↓ | AG↑ | AI↑ | I↑ | D↓ |", "|---|---|---|---|---|---|---|"]
    for r in reports:
        lines.append(f"| {METHOD_LABELS.get(r.method, r.method)} | {r.pooling.upper()} | "
                     f"{r.ad:.2f} | {r.ag:.2f} | {r.ai:.2f} | {100 * r.insertion:.2f} | {100 * r.deletion:.2f} |")
    return "\n".join(lines)


def threads_from_env(default: int = 1) -> int:
    try:
        return max(1, int(os.environ.get("CASTREAM_THREADS", default)))
    except ValueError:
        return default
