"""Backbone pretraining, frozen-backbone stream training and the ablation grid."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import tensor as T
from .backbone import StageSpec, StagedBackbone
from .dataset import Dataset
from .errors import CastreamError, DivergenceError, DomainError, InvariantViolation, NumericError
from .model import CAClassifier
from .stream import CAStream, StreamConfig
from .tensor import Tensor

logger = logging.getLogger(__name__)

# Desk-scale starting rates. Without normalization layers the feature magnitudes
# grow per stage, and 0.1 collapses pretraining and stalls late-start streams.
BACKBONE_LR0 = 0.02
STREAM_LR0 = 0.002


@dataclass(frozen=True)
class OptimizerConfig:
    lr0: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 1e-4
    epochs: int = 30
    batch_size: int = 64
    seed: int = 0

    def __post_init__(self):
        if not self.lr0 > 0 or self.epochs < 0 or self.batch_size < 1:
            raise DomainError("invalid optimizer configuration")

    @property
    def boundaries(self) -> tuple:
        return (self.epochs // 3, 2 * self.epochs // 3)

    def lr_at(self, epoch: int) -> float:
        """Step schedule: divide by 10 at floor(E/3) and floor(2E/3)."""
        drops = sum(1 for b in self.boundaries if b > 0 and epoch >= b)
        return self.lr0 * 0.1 ** drops


class SGD:
    """Heavy-ball SGD with coupled L2 weight decay."""

    def __init__(self, params: Sequence[Tensor], lr: float, momentum: float = 0.9,
                 weight_decay: float = 0.0):
        self.params = [p for p in params if p.requires_grad]
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        for p, v in zip(self.params, self.velocity):
            if p.grad is None:
                continue
            dt = p.dtype
            g = p.grad + dt.type(self.weight_decay) * p.data
            v *= dt.type(self.momentum)
            v += g
            p.data -= dt.type(self.lr) * v


@dataclass
class History:
    rows: list = field(default_factory=list)
    summary: dict = field(default_factory=dict)

    def add(self, epoch: int, lr: float, loss: float, acc: float, **extra) -> None:
        self.rows.append({"epoch": epoch, "lr": lr, "loss": loss, "acc": acc, **extra})

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "lr", "loss", "acc"])
            for r in self.rows:
                w.writerow([r["epoch"], repr(float(r["lr"])), f"{r['loss']:.8f}", f"{r['acc']:.6f}"])


def _check_loss(loss: float, epoch: int, step: int) -> None:
    if not math.isfinite(loss):
        raise DivergenceError(f"loss became {loss} at epoch {epoch}, step {step}")


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    perm = rng.permutation(n)
    for i in range(0, n, batch_size):
        yield perm[i:i + batch_size]


def train_backbone(train: Dataset, config: OptimizerConfig = OptimizerConfig(),
                   val: Optional[Dataset] = None, specs: Optional[Sequence[StageSpec]] = None,
                   num_classes: int = 4, backbone: Optional[StagedBackbone] = None,
                   dtype=np.float32) -> tuple:
    """Softmax cross-entropy pretraining; returns the frozen model and its history."""
    if len(train) == 0:
        raise DomainError("empty training set")
    if train.labels.max() >= num_classes:
        raise DomainError("label exceeds class count")
    if backbone is None:
        backbone = StagedBackbone(specs, num_classes, train.images.shape[1:], seed=config.seed, dtype=dtype)
    opt = SGD(list(backbone.params.values()), config.lr0, config.momentum, config.weight_decay)
    rng = np.random.default_rng(config.seed)
    history = History()
    for epoch in range(config.epochs):
        opt.lr = config.lr_at(epoch)
        total, correct = 0.0, 0
        for step, idx in enumerate(_batches(len(train), config.batch_size, rng)):
            opt.zero_grad()
            try:
                _, logits = backbone.forward_stages(train.images[idx])
                loss = T.cross_entropy(logits, train.labels[idx])
            except NumericError as exc:
                raise DivergenceError(f"epoch {epoch}, step {step}: {exc}") from None
            _check_loss(loss.item(), epoch, step)
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
            correct += int(np.sum(np.argmax(logits.data, 1) == train.labels[idx]))
        extra = {}
        if val is not None:
            extra["val_acc"] = float(np.mean(np.argmax(backbone.predict_logits(val.images), 1) == val.labels))
        history.add(epoch, opt.lr, total / len(train), correct / len(train), **extra)
        logger.info("backbone epoch %d lr %g loss %.4f acc %.4f %s", epoch, opt.lr,
                    total / len(train), correct / len(train), extra)
    backbone.freeze()
    if val is not None:
        history.summary["val_acc"] = history.rows[-1]["val_acc"] if history.rows else float(
            np.mean(np.argmax(backbone.predict_logits(val.images), 1) == val.labels))
    return backbone, history


def extract_features(backbone: StagedBackbone, images: np.ndarray, batch_size: int = 256) -> list:
    """Per-stage feature arrays (N, d, h, w) for a frozen backbone."""
    parts = [[] for _ in range(backbone.num_stages)]
    for i in range(0, len(images), batch_size):
        feats, _ = backbone.forward_stages(images[i:i + batch_size])
        for j, f in enumerate(feats):
            parts[j].append(f.data)
    return [np.concatenate(p) for p in parts]


def _stream_accuracy(stream: CAStream, backbone: StagedBackbone, feats: list, labels: np.ndarray,
                     batch_size: int = 256) -> float:
    correct = 0
    W, b = backbone.head_weight, backbone.head_bias
    for i in range(0, len(labels), batch_size):
        fb = [Tensor(f[i:i + batch_size]) if f is not None else None for f in feats]
        classes = None
        if stream.class_specific:
            classes = np.argmax(backbone.classify_gap(fb[-1]).data, axis=1)
        q, _ = stream.forward(fb, classes)
        logits = T.linear(q, W, b).data
        correct += int(np.sum(np.argmax(logits, 1) == labels[i:i + batch_size]))
    return correct / len(labels)


def train_stream(backbone: StagedBackbone, train: Dataset, config: OptimizerConfig = OptimizerConfig(),
                 stream_config: StreamConfig = StreamConfig(), val: Optional[Dataset] = None,
                 train_features: Optional[list] = None, val_features: Optional[list] = None) -> tuple:
    """Fit the stream on top of a frozen backbone and head.

    Only the stream's own parameters are updated.  The backbone digest is
    compared before and after; any change raises :class:`InvariantViolation`.
    """
    if not backbone.frozen:
        raise InvariantViolation("train_stream requires a frozen backbone")
    if len(train) == 0:
        raise DomainError("empty training set")
    digest = backbone.param_digest()
    s = stream_config.start_stage
    feats = train_features if train_features is not None else extract_features(backbone, train.images)
    feats = [f if j >= s else None for j, f in enumerate(feats)]
    stream = CAStream(backbone.dims, backbone.num_classes, stream_config, dtype=backbone.dtype)
    opt = SGD(stream.trainable(), config.lr0, config.momentum, config.weight_decay)
    rng = np.random.default_rng(config.seed)
    W, b = backbone.head_weight, backbone.head_bias
    history = History()
    if val is not None and val_features is None:
        val_features = extract_features(backbone, val.images)
    for epoch in range(config.epochs):
        opt.lr = config.lr_at(epoch)
        total, correct = 0.0, 0
        for step, idx in enumerate(_batches(len(train), config.batch_size, rng)):
            opt.zero_grad()
            fb = [Tensor(f[idx]) if f is not None else None for f in feats]
            classes = train.labels[idx] if stream.class_specific else None
            try:
                q, _ = stream.forward(fb, classes)
                logits = T.linear(q, W, b)
                loss = T.cross_entropy(logits, train.labels[idx])
            except NumericError as exc:
                raise DivergenceError(f"epoch {epoch}, step {step}: {exc}") from None
            _check_loss(loss.item(), epoch, step)
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
            correct += int(np.sum(np.argmax(logits.data, 1) == train.labels[idx]))
        extra = {}
        if val is not None:
            extra["val_acc"] = _stream_accuracy(stream, backbone, val_features, val.labels)
        history.add(epoch, opt.lr, total / len(train), correct / len(train), **extra)
        logger.info("stream epoch %d lr %g loss %.4f acc %.4f %s", epoch, opt.lr,
                    total / len(train), correct / len(train), extra)
    stream.freeze()
    if backbone.param_digest() != digest:
        raise InvariantViolation("backbone parameters changed during stream training")
    history.summary["backbone_digest"] = digest
    if val is not None:
        history.summary["val_acc"] = _stream_accuracy(stream, backbone, val_features, val.labels)
    return stream, history


# ----------------------------------------------------------------------------- ablation


@dataclass(frozen=True)
class AblationGrid:
    variants: tuple = ("vanilla", "projected")
    start_stages: tuple = (0, 1, 2, 3)
    class_modes: tuple = ("agnostic", "specific")

    def cells(self) -> list:
        return [StreamConfig(s, v, m) for v in self.variants for s in self.start_stages
                for m in self.class_modes]

    @classmethod
    def from_dict(cls, d: dict) -> "AblationGrid":
        return cls(tuple(d.get("variants", cls.variants)), tuple(int(v) for v in d.get("start_stages", cls.start_stages)),
                   tuple(d.get("class_modes", cls.class_modes)))


ABLATION_FIELDS = ["variant", "start_stage", "class_mode", "outcome", "error", "val_acc", "gap_acc",
                   "AD", "AG", "AI", "I", "D"]


def ablate(backbone: StagedBackbone, train: Dataset, val: Dataset, grid: AblationGrid = AblationGrid(),
           config: OptimizerConfig = OptimizerConfig(), eval_set: Optional[Dataset] = None,
           method: str = "gradcam", seed: int = 0) -> list:
    """Train and evaluate one stream per grid cell.

    A failing cell is recorded with its exit code as ``outcome`` (4 for
    numeric divergence) and the grid continues.
    """
    from .metrics import evaluate

    train_feats = extract_features(backbone, train.images)
    val_feats = extract_features(backbone, val.images)
    gap_acc = float(np.mean(np.argmax(backbone.predict_logits(val.images), 1) == val.labels))
    rows = []
    for cell in grid.cells():
        cell = StreamConfig(cell.start_stage, cell.variant, cell.class_mode, seed)
        row = {"variant": cell.variant, "start_stage": cell.start_stage,
               "last_stage": backbone.last_stage, "class_mode": cell.class_mode,
               "outcome": 0, "error": "", "val_acc": None, "gap_acc": gap_acc,
               "AD": None, "AG": None, "AI": None, "I": None, "D": None}
        try:
            stream, hist = train_stream(backbone, train, config, cell, val, train_feats, val_feats)
            row["val_acc"] = hist.summary["val_acc"]
            if eval_set is not None:
                rep = evaluate(CAClassifier(backbone, stream), eval_set, method, "ca")
                row.update(AD=rep.ad, AG=rep.ag, AI=rep.ai, I=rep.insertion, D=rep.deletion)
        except CastreamError as exc:
            row["outcome"] = exc.exit_code
            row["error"] = f"{exc.category}: {exc}"
            logger.warning("ablation cell %s failed: %s", asdict(cell), exc)
        rows.append(row)
    return rows


def write_ablation_csv(rows: Sequence[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(ABLATION_FIELDS)
        for r in rows:
            w.writerow([_fmt(r[k]) for k in ABLATION_FIELDS])


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return f"{v:.6f}"
    return str(v)


def format_ablation(rows: Sequence[dict]) -> str:
    lines = ["| Block | Placement | CLS | Acc↑ | AD↓ | AG↑ | AI↑ | I↑ | D↓ | Outcome |",
             "|---|---|---|---|---|---|---|---|---|---|"]
    for r in rows:
        if r["val_acc"] is None:
            acc, cells = "-", ["-"] * 5
        else:
            acc = f"{100 * r['val_acc']:.2f}"
            cells = ["-" if r[k] is None else (f"{100 * r[k]:.2f}" if k in ("I", "D") else f"{r[k]:.2f}")
                     for k in ("AD", "AG", "AI", "I", "D")]
        lines.append(f"| {r['variant']} | S{r['start_stage']}-S{r['last_stage']} | {r['class_mode']} | {acc} | "
                     + " | ".join(cells) + f" | {r['outcome']} |")
    return "\n".join(lines)
