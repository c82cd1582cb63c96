#!/usr/bin/env python3
"""
🚀 DETECTOR - ASSEMBLY, TRAINING, INFERENCE, CHECKPOINTS
========================================================

backbone -> query generation (or learnable queries) -> cascade head.

Training sums the QGN loss (featurized mode only) and the set loss of every
cascade stage, then takes one AdamW step with linear lr warmup and global-norm
clipping. Model outputs are checked for NaN/Inf before any matching runs.
Inference reads the last stage only and never suppresses boxes.

Checkpoint layout (little-endian):
    b"FQRC" | u32 version | u32 tensor count
    per tensor: u32 name length | name bytes | u8 rank | u64 dims | f64 payload
Reserved names: "param/<name>", "adam/m/<name>", "adam/v/<name>",
"meta/step", "meta/config" (UTF-8 JSON of the ModelConfig, one byte per value).
"""

import csv
import logging
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

import ndgrad as ng
from assignment import MatchQualityParams, SceneAnnotation, StageLoss, qgn_assign, qgn_loss, rcnn_stage_losses
from backbone import Backbone, FeaturePyramid
from config import ConfigError, ModelConfig, OptimizerConfig, RunControls, model_config_from_json
from head import CascadeHead, LearnableQueries, StageOutput, stage_predictions
from ndgrad import Array, Module
from qgn import Box, DenseOutput, QueryGenerationNetwork, QuerySet

logger = logging.getLogger(__name__)

MAGIC = b"FQRC"
VERSION = 1


class CheckpointError(ValueError):
    """Unreadable checkpoint or one that does not fit the requested model."""


class NumericalError(FloatingPointError):
    """Non-finite training loss; `terms` holds the per-term values of the step."""

    def __init__(self, message: str, terms: Dict[str, float]):
        self.terms = dict(terms)
        listed = ", ".join(f"{k}={v}" for k, v in self.terms.items())
        super().__init__(f"{message} ({listed})" if listed else message)


@dataclass
class Detection:
    box: Box
    label: int
    score: float

    def to_dict(self) -> Dict:
        return {"box": [float(v) for v in self.box], "label": int(self.label), "score": float(self.score)}


@dataclass
class ForwardOutput:
    pyramid: FeaturePyramid
    dense: Optional[DenseOutput]
    queries: QuerySet
    stages: List[StageOutput]


# ---------------------------------------------------------------- model

class Detector(Module):
    """Full detector; parameter count depends on K only in learnable mode"""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        rng = np.random.default_rng(config.seed)
        self.backbone = self.add_module("backbone", Backbone(config, rng))
        self.qgn: Optional[QueryGenerationNetwork] = None
        self.learnable: Optional[LearnableQueries] = None
        if config.mode == "featurized":
            self.qgn = self.add_module("qgn", QueryGenerationNetwork(config, rng))
        else:
            self.learnable = self.add_module("queries", LearnableQueries(config, rng))
        self.head = self.add_module("head", CascadeHead(config, rng))

    def forward(self, image, n_stages: Optional[int] = None,
                timings: Optional[Dict[str, object]] = None) -> ForwardOutput:
        """Run the pipeline; `timings` (when given) receives per-component milliseconds"""
        image = image if isinstance(image, Array) else Array(image)
        started = time.perf_counter()
        pyramid = self.backbone.extract_pyramid(image)
        after_backbone = time.perf_counter()
        if self.qgn is not None:
            dense, queries = self.qgn.generate(pyramid, self.config.num_queries)
            boxes = queries.boxes.detach()
        else:
            dense, queries = None, self.learnable.query_set(pyramid.image_size)
            boxes = queries.boxes
        after_queries = time.perf_counter()
        stage_times: List[float] = []
        stages = self.head(pyramid, queries.features, boxes, n_stages, stage_times)
        if timings is not None:
            timings["backbone"] = (after_backbone - started) * 1000.0
            timings["query_generation"] = (after_queries - after_backbone) * 1000.0
            timings["stages"] = stage_times
            timings["decoder"] = float(np.sum(stage_times))
            timings["total"] = (time.perf_counter() - started) * 1000.0
        return ForwardOutput(pyramid, dense, queries, stages)


def parameter_count(config: ModelConfig) -> int:
    return Detector(config).num_parameters()


# ---------------------------------------------------------------- optimizer

class AdamW:
    """Adam with decoupled weight decay and optional global-norm gradient clipping"""

    def __init__(self, named_params: Sequence[Tuple[str, Array]], config: OptimizerConfig):
        self.config = config
        self.params = list(named_params)
        self.m: Dict[str, np.ndarray] = {name: np.zeros_like(p.data) for name, p in self.params}
        self.v: Dict[str, np.ndarray] = {name: np.zeros_like(p.data) for name, p in self.params}
        self.t = 0

    def grad_norm(self) -> float:
        total = 0.0
        for _, p in self.params:
            if p.grad is not None:
                total += float(np.sum(p.grad * p.grad))
        return float(np.sqrt(total))

    def learning_rate(self, t: int) -> float:
        """lr at update t (1-based): linear ramp from warmup_ratio * lr over warmup_iters steps"""
        cfg = self.config
        if cfg.warmup_iters <= 0 or t >= cfg.warmup_iters:
            return cfg.lr
        progress = (t - 1) / cfg.warmup_iters
        return cfg.lr * (cfg.warmup_ratio + (1.0 - cfg.warmup_ratio) * progress)

    def step(self) -> float:
        """Apply one update from the accumulated .grad buffers; returns the pre-clip norm"""
        cfg = self.config
        norm = self.grad_norm()
        scale = 1.0
        if cfg.clip_norm is not None and norm > cfg.clip_norm:
            scale = cfg.clip_norm / norm
        self.t += 1
        lr = self.learning_rate(self.t)
        bias1 = 1.0 - cfg.beta1 ** self.t
        bias2 = 1.0 - cfg.beta2 ** self.t
        for name, p in self.params:
            g = np.zeros_like(p.data) if p.grad is None else p.grad * scale
            m, v = self.m[name], self.v[name]
            m *= cfg.beta1
            m += (1.0 - cfg.beta1) * g
            v *= cfg.beta2
            v += (1.0 - cfg.beta2) * g * g
            p.data *= 1.0 - lr * cfg.weight_decay
            p.data -= lr * (m / bias1) / (np.sqrt(v / bias2) + cfg.eps)
        return norm


@dataclass
class TrainState:
    config: ModelConfig
    model: Detector
    optimizer: AdamW
    step: int = 0

    @classmethod
    def create(cls, config: ModelConfig) -> "TrainState":
        model = Detector(config)
        return cls(config, model, AdamW(list(model.named_parameters()), config.optimizer))


# ---------------------------------------------------------------- losses

@dataclass
class LossBreakdown:
    total: Array
    qgn: Optional[Array]
    stages: List[StageLoss]
    forward: ForwardOutput

    def terms(self) -> Dict[str, float]:
        values = {"total_loss": self.total.item(),
                  "qgn_loss": self.qgn.item() if self.qgn is not None else 0.0}
        for i, stage in enumerate(self.stages, start=1):
            values[f"stage{i}_loss"] = stage.total.item()
        return values


def output_summary(out: ForwardOutput) -> Dict[str, float]:
    """Sum of every prediction the losses read; NaN/Inf anywhere shows up in its entry"""
    summary: Dict[str, float] = {}
    if out.dense is not None:
        summary["qgn_logits"] = float(np.sum(out.dense.logits.data))
        summary["qgn_boxes"] = float(np.sum(out.dense.boxes.data))
    for i, stage in enumerate(out.stages, start=1):
        summary[f"stage{i}_class_probs"] = float(np.sum(stage.class_probs.data))
        summary[f"stage{i}_boxes"] = float(np.sum(stage.boxes.data))
    return summary


def compute_losses(model: Detector, image, gt: SceneAnnotation) -> LossBreakdown:
    """QGN loss (featurized mode) + per-stage set loss for one image"""
    cfg = model.config
    out = model.forward(image)
    summary = output_summary(out)
    if not all(np.isfinite(v) for v in summary.values()):
        # matching costs would be non-finite too
        raise NumericalError("non-finite model output", summary)
    weights = cfg.loss
    qgn_term: Optional[Array] = None
    if out.dense is not None:
        assignment = qgn_assign(out.dense, gt, MatchQualityParams(alpha=weights.alpha))
        qgn_term = qgn_loss(out.dense, gt, assignment, weights)
    stages = rcnn_stage_losses(stage_predictions(out.stages), gt, out.pyramid.image_size, weights)
    total = stages[0].total
    for stage in stages[1:]:
        total = ng.add(total, stage.total)
    if qgn_term is not None:
        total = ng.add(total, ng.mul(qgn_term, weights.qgn_weight))
    return LossBreakdown(total, qgn_term, stages, out)


def train_step(batch: Sequence[Tuple[np.ndarray, SceneAnnotation]], state: TrainState) -> Dict[str, float]:
    """One forward/backward over the batch and one AdamW update"""
    if not batch:
        raise ValueError("train_step: empty batch")
    sizes = {tuple(np.shape(image)) for image, _ in batch}
    if len(sizes) > 1:
        raise ng.ShapeError(f"train_step: images in a batch must share a size, got {sorted(sizes)}")
    model = state.model
    model.zero_grad()
    scale = 1.0 / len(batch)
    metrics: Dict[str, float] = {}
    for image, gt in batch:
        with ng.Graph() as graph:
            try:
                losses = compute_losses(model, image, gt)
            except NumericalError as e:
                model.zero_grad()
                logger.error(f"❌ step {state.step}: " + ", ".join(f"{k}={v}" for k, v in e.terms.items()))
                raise NumericalError(f"non-finite model output at step {state.step}", e.terms) from e
            terms = losses.terms()
            if not all(np.isfinite(v) for v in terms.values()):
                model.zero_grad()
                logger.error(f"❌ step {state.step}: " + ", ".join(f"{k}={v}" for k, v in terms.items()))
                raise NumericalError(f"non-finite loss at step {state.step}", terms)
            ng.backward(graph, ng.mul(losses.total, scale))
        for key, value in terms.items():
            metrics[key] = metrics.get(key, 0.0) + value * scale
    if not all(p.grad is None or np.all(np.isfinite(p.grad)) for p in model.parameters()):
        model.zero_grad()
        raise NumericalError(f"non-finite gradient at step {state.step}", metrics)
    metrics["grad_norm"] = state.optimizer.step()
    state.step += 1
    logger.debug(f"step {state.step}: total={metrics['total_loss']:.5f} qgn={metrics['qgn_loss']:.5f}")
    return metrics


def sample_batch(num_items: int, batch_size: int, seed: int, step: int) -> np.ndarray:
    """Batch indices for a step; depends only on (seed, step) so resumed runs line up"""
    rng = np.random.default_rng([seed, step])
    return rng.choice(num_items, size=min(batch_size, num_items), replace=False)


# ---------------------------------------------------------------- inference

def top_detections(last: StageOutput, report_top: Optional[int] = None) -> List[Detection]:
    """Top-N (query, class) pairs of a stage by score; N defaults to K"""
    probs = last.class_probs.data
    k, num_classes = probs.shape
    n = min(k * num_classes, report_top if report_top is not None else k)
    order = np.argsort(-probs.reshape(-1), kind="stable")[:n]
    boxes = last.boxes.data
    return [Detection(tuple(float(v) for v in boxes[i // num_classes]), int(i % num_classes),
                      float(probs.reshape(-1)[i])) for i in order]


def infer(image, model: Detector, report_top: Optional[int] = None) -> List[Detection]:
    """Last-stage detections for one image; no suppression step anywhere"""
    return top_detections(model.forward(image).stages[-1], report_top)


# ---------------------------------------------------------------- checkpoints

def _encode(tensors: Sequence[Tuple[str, np.ndarray]]) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, data in tensors:
        encoded = name.encode("utf-8")
        data = np.asarray(data, dtype=np.float64)
        parts.append(struct.pack("<I", len(encoded)))
        parts.append(encoded)
        parts.append(struct.pack("<B", data.ndim))
        parts.append(struct.pack(f"<{data.ndim}Q", *data.shape))
        parts.append(data.astype("<f8").tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, blob: bytes):
        self.blob, self.offset = blob, 0

    def take(self, count: int) -> bytes:
        if self.offset + count > len(self.blob):
            raise CheckpointError(f"truncated checkpoint: needed {count} bytes at offset {self.offset}, "
                                  f"file has {len(self.blob)}")
        chunk = self.blob[self.offset:self.offset + count]
        self.offset += count
        return chunk

    def unpack(self, fmt: str) -> Tuple:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def _decode(blob: bytes) -> Dict[str, np.ndarray]:
    reader = _Reader(blob)
    magic = reader.take(4)
    if magic != MAGIC:
        raise CheckpointError(f"bad magic: expected {MAGIC!r}, found {magic!r}")
    version, count = reader.unpack("<II")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version: expected {VERSION}, found {version}")
    tensors: Dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = reader.unpack("<I")
        raw = reader.take(name_len)
        try:
            name = raw.decode("utf-8")
        except UnicodeDecodeError as e:
            raise CheckpointError(f"tensor name at offset {reader.offset - name_len} is not UTF-8: {raw!r}") from e
        (rank,) = reader.unpack("<B")
        shape = reader.unpack(f"<{rank}Q") if rank else ()
        size = int(np.prod(shape, dtype=np.int64)) if rank else 1
        tensors[name] = np.frombuffer(reader.take(8 * size), dtype="<f8").astype(np.float64).reshape(shape)
    if reader.offset != len(blob):
        raise CheckpointError(f"{len(blob) - reader.offset} trailing bytes after {count} tensors")
    return tensors


def checkpoint_tensors(state: TrainState) -> List[Tuple[str, np.ndarray]]:
    tensors = [(f"param/{name}", p.data) for name, p in state.model.named_parameters()]
    tensors += [(f"adam/m/{name}", state.optimizer.m[name]) for name, _ in state.optimizer.params]
    tensors += [(f"adam/v/{name}", state.optimizer.v[name]) for name, _ in state.optimizer.params]
    snapshot = np.frombuffer(state.config.model_dump_json().encode("utf-8"), dtype=np.uint8)
    tensors.append(("meta/step", np.array(float(state.step))))
    tensors.append(("meta/config", snapshot.astype(np.float64)))
    return tensors


def save_checkpoint(state: TrainState, path) -> None:
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    target.write_bytes(_encode(checkpoint_tensors(state)))
    logger.info(f"💾 Checkpoint written: {target} (step {state.step})")


def _shape_report(expected: Dict[str, Tuple[int, ...]], found: Dict[str, np.ndarray]) -> List[str]:
    lines = []
    for name, shape in expected.items():
        if name not in found:
            lines.append(f"missing {name} {shape}")
        elif found[name].shape != shape:
            lines.append(f"{name}: expected {shape}, found {found[name].shape}")
    for name in found:
        if name.startswith("param/") and name not in expected:
            lines.append(f"unexpected {name} {found[name].shape}")
    return lines


def load_checkpoint(path, config: Optional[ModelConfig] = None) -> TrainState:
    """Restore a TrainState; with `config` the tensors must fit that model"""
    source = Path(path)
    if not source.is_file():
        raise CheckpointError(f"checkpoint not found: {source}")
    tensors = _decode(source.read_bytes())
    for required in ("meta/step", "meta/config"):
        if required not in tensors:
            raise CheckpointError(f"checkpoint lacks {required}")
    if config is None:
        try:
            snapshot = bytes(tensors["meta/config"].astype(np.uint8)).decode("utf-8")
            config = model_config_from_json(snapshot)
        except (ConfigError, UnicodeDecodeError) as e:
            raise CheckpointError(f"stored config is invalid: {e}") from e
    state = TrainState.create(config)
    expected = {f"param/{name}": p.shape for name, p in state.model.named_parameters()}
    expected.update({f"adam/{kind}/{name}": p.shape for name, p in state.model.named_parameters() for kind in ("m", "v")})
    diff = _shape_report(expected, tensors)
    if diff:
        raise CheckpointError("checkpoint does not fit the model:\n  " + "\n  ".join(diff))
    for name, p in state.model.named_parameters():
        p.data = tensors[f"param/{name}"].copy()
        p.zero_grad()
        state.optimizer.m[name] = tensors[f"adam/m/{name}"].copy()
        state.optimizer.v[name] = tensors[f"adam/v/{name}"].copy()
    state.step = int(tensors["meta/step"])
    state.optimizer.t = state.step
    logger.info(f"📂 Checkpoint loaded: {source} (step {state.step})")
    return state


# ---------------------------------------------------------------- metrics CSV

@dataclass
class MetricsWriter:
    """Appends one row per logged step: step, total, qgn, per-stage losses, wall ms"""
    path: Path
    n_stages: int
    log_wall_clock: bool = False
    _last: float = field(default_factory=time.perf_counter, repr=False)

    @property
    def header(self) -> List[str]:
        return ["step", "total_loss", "qgn_loss"] + [f"stage{i}_loss" for i in range(1, self.n_stages + 1)] + ["wall_ms"]

    def __post_init__(self):
        self.path = Path(self.path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        if not self.path.exists() or self.path.stat().st_size == 0:
            with self.path.open("w", newline="", encoding="utf-8") as f:
                csv.writer(f).writerow(self.header)

    def write(self, step: int, metrics: Dict[str, float]) -> None:
        now = time.perf_counter()
        wall = (now - self._last) * 1000.0 if self.log_wall_clock else 0.0
        self._last = now
        row = [step] + [f"{metrics.get(key, 0.0):.9g}" for key in self.header[1:-1]] + [f"{wall:.3f}"]
        with self.path.open("a", newline="", encoding="utf-8") as f:
            csv.writer(f).writerow(row)


def fit(state: TrainState, scenes: Sequence[Tuple[np.ndarray, SceneAnnotation]], controls: RunControls,
        metrics: Optional[MetricsWriter] = None, on_eval=None) -> Dict[str, float]:
    """Run train_step until `controls.steps`; resumes from `state.step`"""
    if not scenes:
        raise ValueError("fit: no training scenes")
    last: Dict[str, float] = {}
    logger.info(f"🚀 Training from step {state.step} to {controls.steps} on {len(scenes)} scenes")
    while state.step < controls.steps:
        picks = sample_batch(len(scenes), controls.batch_size, controls.seed, state.step)
        last = train_step([scenes[i] for i in picks], state)
        if metrics is not None and (state.step % controls.log_every == 0 or state.step == controls.steps):
            metrics.write(state.step, last)
        if state.step % controls.log_every == 0:
            logger.info(f"📈 step {state.step}: loss {last['total_loss']:.4f}")
        if on_eval is not None and controls.eval_every and state.step % controls.eval_every == 0:
            on_eval(state)
    logger.info(f"✅ Training finished at step {state.step}")
    return last
