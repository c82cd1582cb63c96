#!/usr/bin/env python3
"""
📊 DATA + EVALUATION
====================

- synthetic shape scenes (rectangle, ellipse, triangle, diamond, cross) and
  their JSONL + P6 PPM on-disk format
- AP with all-point interpolation, recall-vs-IoU, AR@K
- proposal -> GT delta histograms per cascade stage
- per-component latency benchmark
- P6 overlays with box outlines and score digits

Dataset line: {"id", "width", "height", "image_ppm", "boxes", "labels"}; the
PPM path is relative to the JSONL file. Pixels are stored as k/255 so the
round trip through disk is exact.
"""

import csv
import json
import logging
import os
import shutil
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
import psutil

from assignment import Assignment, SceneAnnotation, box_delta, pairwise_iou
from config import SceneSpec
from detector import Detection, Detector
from qgn import QuerySet

logger = logging.getLogger(__name__)

SHAPE_NAMES = ("rectangle", "ellipse", "triangle", "diamond", "cross")
IOU_THRESHOLDS = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))
DATASET_FILE = "scenes.jsonl"
BACKGROUND_MAX = 0.15
DELTA_BINS = 40

Proposals = Union[QuerySet, np.ndarray, Sequence[Sequence[float]]]


# ---------------------------------------------------------------- scenes

@dataclass
class Scene:
    image: np.ndarray               # [3, H, W] in [0, 1], multiples of 1/255
    annotation: SceneAnnotation
    id: str
    requested: int = 0
    masks: List[np.ndarray] = field(default_factory=list, repr=False)

    @property
    def size(self) -> Tuple[int, int]:
        return self.image.shape[1], self.image.shape[2]

    @property
    def placed(self) -> int:
        return len(self.annotation)

    def sample(self) -> Tuple[np.ndarray, SceneAnnotation]:
        return self.image, self.annotation


def shape_mask(label: int, height: int, width: int) -> np.ndarray:
    """Boolean [height, width] footprint of a shape class, tested at pixel centers"""
    y, x = np.meshgrid(np.arange(height) + 0.5, np.arange(width) + 0.5, indexing="ij")
    nx = (x - width / 2.0) / (width / 2.0)
    ny = (y - height / 2.0) / (height / 2.0)
    kind = SHAPE_NAMES[label % len(SHAPE_NAMES)]
    if kind == "rectangle":
        return np.ones((height, width), dtype=bool)
    if kind == "ellipse":
        return nx * nx + ny * ny <= 1.0
    if kind == "triangle":
        return np.abs(nx) <= y / height
    if kind == "diamond":
        return np.abs(nx) + np.abs(ny) <= 1.0
    return (np.abs(nx) <= 1.0 / 3.0) | (np.abs(ny) <= 1.0 / 3.0)


def _quantize(image: np.ndarray) -> np.ndarray:
    return np.round(np.clip(image, 0.0, 1.0) * 255.0) / 255.0


def _overlaps(box: Tuple[int, int, int, int], placed: Sequence[Tuple[int, int, int, int]]) -> bool:
    x1, y1, x2, y2 = box
    return any(x1 < px2 and px1 < x2 and y1 < py2 and py1 < y2 for px1, py1, px2, py2 in placed)


def generate_scene(seed: int, spec: SceneSpec = SceneSpec()) -> Scene:
    """Render non-overlapping filled shapes on a dark noisy background"""
    rng = np.random.default_rng(seed)
    height, width = spec.height, spec.width
    requested = int(rng.integers(spec.min_objects, spec.max_objects + 1))
    background = rng.uniform(0.0, BACKGROUND_MAX, size=3)
    image = np.broadcast_to(background[:, None, None], (3, height, width)).copy()

    slots: List[Tuple[int, int, int, int]] = []
    boxes, labels, masks = [], [], []
    for _ in range(requested):
        label = int(rng.integers(spec.num_classes))
        color = rng.uniform(0.3, 1.0, size=3)
        color[int(rng.integers(3))] = rng.uniform(0.7, 1.0)
        slot = None
        for _ in range(spec.max_retries):
            w = int(rng.integers(spec.min_size, spec.max_size + 1))
            h = int(rng.integers(spec.min_size, spec.max_size + 1))
            x = int(rng.integers(0, width - w + 1))
            y = int(rng.integers(0, height - h + 1))
            if not _overlaps((x, y, x + w, y + h), slots):
                slot = (x, y, x + w, y + h)
                break
        if slot is None:
            continue
        slots.append(slot)
        x, y, x2, y2 = slot
        local = shape_mask(label, y2 - y, x2 - x)
        mask = np.zeros((height, width), dtype=bool)
        mask[y:y2, x:x2] = local
        image[:, mask] = color[:, None]
        rows, cols = np.flatnonzero(mask.any(axis=1)), np.flatnonzero(mask.any(axis=0))
        boxes.append([cols[0], rows[0], cols[-1] + 1, rows[-1] + 1])
        labels.append(label)
        masks.append(mask)

    if len(boxes) < requested:
        logger.warning(f"⚠️ Scene seed {seed}: placed {len(boxes)} of {requested} objects")
    if spec.noise > 0:
        image = image + rng.uniform(-spec.noise, spec.noise, size=image.shape)
    annotation = SceneAnnotation(np.asarray(boxes, dtype=np.float64).reshape(-1, 4), np.asarray(labels, dtype=np.int64))
    return Scene(_quantize(image), annotation, f"scene_{seed:06d}", requested, masks)


def generate_dataset(spec: SceneSpec, count: int, seed: int) -> List[Scene]:
    """Scene i uses seed + i"""
    return [generate_scene(seed + i, spec) for i in range(count)]


# ---------------------------------------------------------------- disk format

def write_ppm(path, image: np.ndarray) -> None:
    pixels = np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)
    _, height, width = pixels.shape
    with open(path, "wb") as f:
        f.write(f"P6\n{width} {height}\n255\n".encode("ascii"))
        f.write(np.ascontiguousarray(pixels.transpose(1, 2, 0)).tobytes())


def _ppm_tokens(blob: bytes, count: int) -> Tuple[List[bytes], int]:
    tokens, pos = [], 0
    while len(tokens) < count:
        while pos < len(blob) and blob[pos:pos + 1].isspace():
            pos += 1
        if blob[pos:pos + 1] == b"#":
            while pos < len(blob) and blob[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(blob) and not blob[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ValueError("truncated PPM header")
        tokens.append(blob[start:pos])
    return tokens, pos + 1


def read_ppm(path) -> np.ndarray:
    """P6 file -> [3, H, W] floats k/255"""
    blob = Path(path).read_bytes()
    tokens, offset = _ppm_tokens(blob, 4)
    if tokens[0] != b"P6":
        raise ValueError(f"{path}: not a P6 image (magic {tokens[0]!r})")
    width, height, maxval = (int(t) for t in tokens[1:])
    if maxval != 255:
        raise ValueError(f"{path}: only maxval 255 is supported, got {maxval}")
    payload = blob[offset:offset + 3 * width * height]
    if len(payload) != 3 * width * height:
        raise ValueError(f"{path}: expected {3 * width * height} pixel bytes, found {len(payload)}")
    pixels = np.frombuffer(payload, dtype=np.uint8).reshape(height, width, 3)
    return pixels.transpose(2, 0, 1).astype(np.float64) / 255.0


def write_dataset(scenes: Sequence[Scene], out_dir, force: bool = False) -> Path:
    """Write scenes.jsonl plus images/<id>.ppm; refuses a non-empty dir unless forced.

    A forced write replaces the previous dataset: images/ and scenes.jsonl are removed first.
    """
    root = Path(out_dir)
    if root.exists() and any(root.iterdir()):
        if not force:
            raise FileExistsError(f"{root} exists and is not empty (use --force)")
        shutil.rmtree(root / "images", ignore_errors=True)
        (root / DATASET_FILE).unlink(missing_ok=True)
        logger.info(f"🧹 Cleared the previous dataset in {root}")
    (root / "images").mkdir(parents=True, exist_ok=True)
    lines = []
    for scene in scenes:
        relative = f"images/{scene.id}.ppm"
        write_ppm(root / relative, scene.image)
        height, width = scene.size
        lines.append(json.dumps({
            "id": scene.id,
            "width": width,
            "height": height,
            "image_ppm": relative,
            "boxes": [[float(v) for v in box] for box in scene.annotation.boxes],
            "labels": [int(v) for v in scene.annotation.labels],
        }))
    target = root / DATASET_FILE
    target.write_text("".join(line + "\n" for line in lines), encoding="utf-8")
    logger.info(f"📦 Wrote {len(scenes)} scenes to {target}")
    return target


def load_dataset(path) -> List[Scene]:
    """Read a JSONL dataset (file, or directory holding scenes.jsonl)"""
    source = Path(path)
    if source.is_dir():
        source = source / DATASET_FILE
    if not source.is_file():
        raise FileNotFoundError(f"dataset not found: {source}")
    scenes = []
    for number, line in enumerate(source.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        try:
            record = json.loads(line)
            image = read_ppm(source.parent / record["image_ppm"])
            annotation = SceneAnnotation(np.asarray(record["boxes"], dtype=np.float64).reshape(-1, 4),
                                         np.asarray(record["labels"], dtype=np.int64))
        except (KeyError, json.JSONDecodeError) as e:
            raise ValueError(f"{source}:{number}: malformed record ({e})") from e
        if image.shape[1:] != (record["height"], record["width"]):
            raise ValueError(f"{source}:{number}: image is {image.shape[1:]}, record says "
                             f"{(record['height'], record['width'])}")
        scenes.append(Scene(image, annotation, str(record["id"]), len(annotation)))
    return scenes


# ---------------------------------------------------------------- AP

def _match_detections(detections: Sequence[Sequence[Detection]], gts: Sequence[SceneAnnotation],
                      iou_threshold: float, label: Optional[int]) -> Tuple[np.ndarray, int]:
    """TP flags in global descending-score order and the number of GTs considered"""
    flat = []
    for image_index, dets in enumerate(detections):
        for det in dets:
            if label is None or det.label == label:
                flat.append((det.score, image_index, det))
    order = sorted(range(len(flat)), key=lambda i: -flat[i][0])
    used = [np.zeros(len(gt), dtype=bool) for gt in gts]
    num_gts = sum(int(np.sum(gt.labels == label)) if label is not None else len(gt) for gt in gts)
    tp = np.zeros(len(order))
    for rank, i in enumerate(order):
        _, image_index, det = flat[i]
        gt = gts[image_index]
        if len(gt) == 0:
            continue
        ious = pairwise_iou(np.asarray(det.box, dtype=np.float64)[None, :], gt.boxes)[0]
        ious[(gt.labels != det.label) | used[image_index]] = -1.0
        best = int(np.argmax(ious))
        if ious[best] >= iou_threshold:
            used[image_index][best] = True
            tp[rank] = 1.0
    return tp, num_gts


def interpolated_ap(tp: np.ndarray, num_gts: int) -> float:
    """Area under the all-point interpolated precision/recall curve"""
    if num_gts == 0 or tp.size == 0:
        return 0.0
    hits = np.cumsum(tp)
    recall = hits / num_gts
    precision = hits / np.arange(1, tp.size + 1)
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    previous = np.concatenate([[0.0], recall[:-1]])
    return float(np.sum((recall - previous) * envelope))


def average_precision(detections: Sequence[Sequence[Detection]], gts: Sequence[SceneAnnotation],
                      iou_threshold: float = 0.5, label: Optional[int] = None) -> float:
    """Greedy score-ordered matching, one detection per GT, labels must agree"""
    if len(detections) != len(gts):
        raise ValueError(f"{len(detections)} detection lists for {len(gts)} images")
    tp, num_gts = _match_detections(detections, gts, iou_threshold, label)
    return interpolated_ap(tp, num_gts)


# ---------------------------------------------------------------- recall

def proposal_boxes(proposals: Proposals) -> np.ndarray:
    if isinstance(proposals, QuerySet):
        return proposals.boxes.data.reshape(-1, 4)
    return np.asarray(proposals, dtype=np.float64).reshape(-1, 4)


def _best_ious(proposals: Sequence[Proposals], gts: Sequence[SceneAnnotation], limit: Optional[int] = None) -> np.ndarray:
    best = []
    for props, gt in zip(proposals, gts):
        if len(gt) == 0:
            continue
        boxes = proposal_boxes(props)
        if limit is not None:
            boxes = boxes[:limit]
        if boxes.shape[0] == 0:
            best.append(np.zeros(len(gt)))
        else:
            best.append(pairwise_iou(boxes, gt.boxes).max(axis=0))
    return np.concatenate(best) if best else np.zeros(0)


def recall_curve(proposals: Sequence[Proposals], gts: Sequence[SceneAnnotation],
                 iou_grid: Iterable[float] = IOU_THRESHOLDS) -> Dict[float, float]:
    """Fraction of GTs covered by at least one proposal at IoU >= t"""
    best = _best_ious(proposals, gts)
    return {float(t): float(np.mean(best >= t)) if best.size else 0.0 for t in iou_grid}


def ar_at_k(proposals: Sequence[Proposals], gts: Sequence[SceneAnnotation], ks: Iterable[int]) -> Dict[int, float]:
    """Recall averaged over IoU 0.50:0.05:0.95 with the top-k proposals per image"""
    result = {}
    for k in ks:
        best = _best_ious(proposals, gts, int(k))
        result[int(k)] = float(np.mean([np.mean(best >= t) for t in IOU_THRESHOLDS])) if best.size else 0.0
    return result


def default_recall_ks(num_queries: int) -> List[int]:
    return sorted({min(10, num_queries), max(1, num_queries // 2), num_queries})


# ---------------------------------------------------------------- reports

@dataclass
class EvalReport:
    ap_per_iou: Dict[float, float]
    per_class: Dict[int, float]
    ar_at_k: Dict[int, float]
    num_images: int
    num_gts: int
    num_detections: int

    @property
    def ap50(self) -> float:
        return self.ap_per_iou[0.5]

    @property
    def ap75(self) -> float:
        return self.ap_per_iou[0.75]

    @property
    def map(self) -> float:
        return float(np.mean(list(self.ap_per_iou.values())))

    def rows(self) -> List[Tuple[str, str]]:
        rows = [("AP50", f"{self.ap50:.6f}"), ("AP75", f"{self.ap75:.6f}"), ("mAP", f"{self.map:.6f}")]
        rows += [(f"AP@{t:.2f}", f"{v:.6f}") for t, v in self.ap_per_iou.items()]
        rows += [(f"AP_class{c}", f"{v:.6f}") for c, v in sorted(self.per_class.items())]
        rows += [(f"AR@{k}", f"{v:.6f}") for k, v in sorted(self.ar_at_k.items())]
        rows += [("images", str(self.num_images)), ("gts", str(self.num_gts)), ("detections", str(self.num_detections))]
        return rows

    def write_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as f:
            writer = csv.writer(f)
            writer.writerow(["metric", "value"])
            writer.writerows(self.rows())


def evaluate(detections: Sequence[Sequence[Detection]], gts: Sequence[SceneAnnotation], num_classes: int,
             proposals: Optional[Sequence[Proposals]] = None, ks: Sequence[int] = ()) -> EvalReport:
    """AP per IoU threshold averaged over classes that have ground truth"""
    if not gts:
        raise ValueError("evaluate: no scenes")
    present = [c for c in range(num_classes) if any(np.any(gt.labels == c) for gt in gts)]
    ap_per_iou, per_class_runs = {}, {c: [] for c in present}
    for t in IOU_THRESHOLDS:
        values = []
        for c in present:
            ap = average_precision(detections, gts, t, label=c)
            values.append(ap)
            per_class_runs[c].append(ap)
        ap_per_iou[t] = float(np.mean(values)) if values else 0.0
    return EvalReport(
        ap_per_iou=ap_per_iou,
        per_class={c: float(np.mean(runs)) for c, runs in per_class_runs.items()},
        ar_at_k=ar_at_k(proposals, gts, ks) if proposals is not None and ks else {},
        num_images=len(gts),
        num_gts=sum(len(gt) for gt in gts),
        num_detections=sum(len(d) for d in detections),
    )


def write_recall_csv(curve: Dict[float, float], ar: Dict[int, float], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["kind", "key", "value"])
        writer.writerows(("recall", f"{t:.2f}", f"{v:.6f}") for t, v in curve.items())
        writer.writerows(("AR", str(k), f"{v:.6f}") for k, v in sorted(ar.items()))


# ---------------------------------------------------------------- deltas

@dataclass
class DeltaHistogram:
    stage: int
    counts: np.ndarray          # [bins, bins], index [ix, iy]
    matched: int
    unmatched: int
    out_of_range: int
    mean_abs_dx: float
    mean_abs_dy: float

    @property
    def mean_abs(self) -> float:
        return (self.mean_abs_dx + self.mean_abs_dy) / 2.0


def delta_bin(delta: float, bins: int = DELTA_BINS) -> Optional[int]:
    """Bin of a delta in [-1, 1] with width 2/bins; None outside the range"""
    if delta < -1.0 or delta > 1.0:
        return None
    return min(int(np.floor((delta + 1.0) * bins / 2.0)), bins - 1)


def delta_distribution(stage_inputs: Sequence[Sequence[np.ndarray]],
                       assignments: Sequence[Sequence[Assignment]],
                       gts: Sequence[SceneAnnotation], bins: int = DELTA_BINS) -> List[DeltaHistogram]:
    """Per stage: histogram of (dx, dy) from each matched input box to its GT"""
    histograms = []
    for stage, (boxes_per_image, stage_assignments) in enumerate(zip(stage_inputs, assignments), start=1):
        counts = np.zeros((bins, bins), dtype=np.int64)
        dxs, dys, unmatched, dropped = [], [], 0, 0
        for boxes, assignment, gt in zip(boxes_per_image, stage_assignments, gts):
            boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
            for i, j in enumerate(assignment.sigma):
                if j is None:
                    unmatched += 1
                    continue
                try:
                    dx, dy = box_delta(gt.boxes[j], boxes[i])
                except ValueError:
                    unmatched += 1
                    continue
                dxs.append(dx)
                dys.append(dy)
                ix, iy = delta_bin(dx, bins), delta_bin(dy, bins)
                if ix is None or iy is None:
                    dropped += 1
                else:
                    counts[ix, iy] += 1
        histograms.append(DeltaHistogram(
            stage, counts, len(dxs), unmatched, dropped,
            float(np.mean(np.abs(dxs))) if dxs else 0.0,
            float(np.mean(np.abs(dys))) if dys else 0.0,
        ))
    return histograms


def write_delta_csv(histograms: Sequence[DeltaHistogram], histogram_path, summary_path) -> None:
    with open(histogram_path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["stage", "dx_lo", "dy_lo", "count"])
        for hist in histograms:
            bins = hist.counts.shape[0]
            for ix, iy in zip(*np.nonzero(hist.counts)):
                writer.writerow([hist.stage, f"{-1.0 + 2.0 * ix / bins:.2f}", f"{-1.0 + 2.0 * iy / bins:.2f}",
                                 int(hist.counts[ix, iy])])
    with open(summary_path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["stage", "matched", "unmatched", "out_of_range", "mean_abs_dx", "mean_abs_dy", "mean_abs"])
        for hist in histograms:
            writer.writerow([hist.stage, hist.matched, hist.unmatched, hist.out_of_range,
                             f"{hist.mean_abs_dx:.6f}", f"{hist.mean_abs_dy:.6f}", f"{hist.mean_abs:.6f}"])


# ---------------------------------------------------------------- latency

@dataclass
class LatencyBreakdown:
    components: Dict[str, Tuple[float, float]]     # name -> (mean ms, stddev ms)
    stages: List[Tuple[float, float]]
    n_runs: int
    noise_bound_ms: float
    rss_mb: float
    cpu_count: int
    config: str

    def rows(self) -> List[List[str]]:
        rows = [[name, f"{mean:.4f}", f"{std:.4f}"] for name, (mean, std) in self.components.items()]
        rows += [[f"stage{i}", f"{mean:.4f}", f"{std:.4f}"] for i, (mean, std) in enumerate(self.stages, start=1)]
        return rows

    def write_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as f:
            writer = csv.writer(f)
            writer.writerow(["component", "mean_ms", "std_ms"])
            writer.writerows(self.rows())
            writer.writerow(["# runs", self.n_runs, ""])
            writer.writerow(["# noise_bound_ms", f"{self.noise_bound_ms:.4f}", ""])
            writer.writerow(["# rss_mb", f"{self.rss_mb:.1f}", ""])
            writer.writerow(["# cpu_count", self.cpu_count, ""])


def bench_latency(model: Detector, images: Sequence[np.ndarray], n_warmup: int = 3, n_runs: int = 10) -> LatencyBreakdown:
    """Mean/stddev wall-clock per component per image, warmup excluded"""
    if n_runs < 10:
        raise ValueError(f"bench_latency: n_runs must be >= 10, got {n_runs}")
    if not images:
        raise ValueError("bench_latency: no images")
    for i in range(n_warmup):
        model.forward(images[i % len(images)])
    samples: Dict[str, List[float]] = {"backbone": [], "query_generation": [], "decoder": [], "total": []}
    stage_samples: List[List[float]] = []
    for run in range(n_runs):
        timings: Dict[str, object] = {}
        model.forward(images[run % len(images)], timings=timings)
        for name in samples:
            samples[name].append(float(timings[name]))
        for i, ms in enumerate(timings["stages"]):
            if i == len(stage_samples):
                stage_samples.append([])
            stage_samples[i].append(ms)
    components = {name: (float(np.mean(v)), float(np.std(v))) for name, v in samples.items()}
    parts = components["backbone"][0] + components["query_generation"][0] + components["decoder"][0]
    process = psutil.Process()
    report = LatencyBreakdown(
        components=components,
        stages=[(float(np.mean(v)), float(np.std(v))) for v in stage_samples],
        n_runs=n_runs,
        noise_bound_ms=abs(components["total"][0] - parts),
        rss_mb=process.memory_info().rss / 1024 ** 2,
        cpu_count=psutil.cpu_count(logical=False) or os.cpu_count() or 1,
        config=model.config.model_dump_json(),
    )
    logger.info(f"⏱️ total {components['total'][0]:.2f} ms, decoder {components['decoder'][0]:.2f} ms "
                f"over {n_runs} runs ({report.rss_mb:.0f} MB RSS)")
    return report


# ---------------------------------------------------------------- overlays

# 3x5 digit glyphs, rows top to bottom
DIGIT_GLYPHS = {
    "0": ("111", "101", "101", "101", "111"), "1": ("010", "110", "010", "010", "111"),
    "2": ("111", "001", "111", "100", "111"), "3": ("111", "001", "111", "001", "111"),
    "4": ("101", "101", "111", "001", "001"), "5": ("111", "100", "111", "001", "111"),
    "6": ("111", "100", "111", "101", "111"), "7": ("111", "001", "010", "010", "010"),
    "8": ("111", "101", "111", "101", "111"), "9": ("111", "101", "111", "001", "111"),
}
PALETTE = np.array([[1.0, 0.2, 0.2], [0.2, 1.0, 0.2], [0.3, 0.5, 1.0], [1.0, 1.0, 0.2], [1.0, 0.3, 1.0],
                    [1.0, 1.0, 1.0]])


def _overlay_items(items) -> List[Tuple[np.ndarray, int, Optional[float]]]:
    if isinstance(items, QuerySet):
        return [(box, -1, float(score)) for box, score in zip(proposal_boxes(items), items.scores)]
    result = []
    for item in items:
        if isinstance(item, Detection):
            result.append((np.asarray(item.box, dtype=np.float64), item.label, item.score))
        else:
            result.append((np.asarray(item, dtype=np.float64).reshape(4), -1, None))
    return result


def _draw_label(canvas: np.ndarray, text: str, x: int, y: int, color: np.ndarray) -> None:
    _, height, width = canvas.shape
    for n, char in enumerate(text):
        for r, row in enumerate(DIGIT_GLYPHS[char]):
            for c, bit in enumerate(row):
                px, py = x + 4 * n + c, y + r
                if bit == "1" and 0 <= px < width and 0 <= py < height:
                    canvas[:, py, px] = color


def render_overlay(image: np.ndarray, items, path) -> np.ndarray:
    """Write `image` with 1px box outlines (and two-digit score labels) as P6"""
    canvas = _quantize(np.asarray(image, dtype=np.float64)).copy()
    _, height, width = canvas.shape
    for box, label, score in _overlay_items(items):
        color = PALETTE[label % (len(PALETTE) - 1)] if label >= 0 else PALETTE[-1]
        x1 = int(np.clip(np.floor(box[0]), 0, width - 1))
        y1 = int(np.clip(np.floor(box[1]), 0, height - 1))
        x2 = int(np.clip(np.ceil(box[2]) - 1, x1, width - 1))
        y2 = int(np.clip(np.ceil(box[3]) - 1, y1, height - 1))
        canvas[:, y1, x1:x2 + 1] = color[:, None]
        canvas[:, y2, x1:x2 + 1] = color[:, None]
        canvas[:, y1:y2 + 1, x1] = color[:, None]
        canvas[:, y1:y2 + 1, x2] = color[:, None]
        if score is not None:
            digits = f"{min(99, int(round(score * 100))):02d}"
            _draw_label(canvas, digits, x1 + 2, y1 + 2, color)
    write_ppm(path, canvas)
    return canvas
