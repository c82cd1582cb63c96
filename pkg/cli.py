#!/usr/bin/env python3
"""
🛠️ COMMAND LINE - FEATURIZED QUERY R-CNN
=========================================

Subcommands:
    gen-data   synthetic scenes -> JSONL + PPM
    train      train_step loop, metrics CSV, checkpoint
    eval       EvalReport CSV
    infer      detections JSONL (+ overlays, + proposals)
    recall     recall-vs-IoU and AR@K CSV for the query boxes
    bench      per-component latency CSV
    gradcheck  finite-difference check of every differentiable primitive
    ablate     train + eval every cell of an override grid
    deltas     per-stage proposal -> GT delta histograms

Exit codes: 0 success, 2 usage error, 3 validation failure, 4 numeric failure.
"""

import argparse
import csv
import itertools
import json
import logging
import os
import sys
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

import ndgrad as ng
from assignment import SceneAnnotation, qgn_assign, qgn_loss, rcnn_set_loss
from backbone import FeatureLevel, FeaturePyramid
from config import (ConfigError, LossConfig, ModelConfig, RunConfig, SceneSpec, load_json, load_run_config,
                    load_scene_spec, runtime_settings, setup_logging)
from dataeval import (Scene, ar_at_k, bench_latency, default_recall_ks, delta_distribution, evaluate,
                      generate_dataset, load_dataset, recall_curve, render_overlay, write_dataset,
                      write_delta_csv, write_recall_csv)
from detector import (CheckpointError, Detector, MetricsWriter, NumericalError, TrainState, compute_losses, fit,
                      load_checkpoint, save_checkpoint, top_detections)
from head import roi_align
from qgn import DenseOutput

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_VALIDATION = 3
EXIT_NUMERIC = 4
CHECKPOINT_NAME = "model.fqrc"


# ---------------------------------------------------------------- helpers

def _run_config(args) -> RunConfig:
    return load_run_config(args.config, args.set)


def _output_dir(run: RunConfig, args) -> Path:
    out = Path(getattr(args, "out", None) or run.paths.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _scenes(path: Optional[str], key: str, model: ModelConfig) -> List[Scene]:
    if not path:
        raise ConfigError(key, "a dataset path is required")
    if not Path(path).exists():
        raise ConfigError(key, f"dataset not found: {path}")
    scenes = load_dataset(path)
    if not scenes:
        raise ConfigError(key, f"no scenes in {path}")
    size = (model.image_height, model.image_width)
    for scene in scenes:
        if scene.size != size:
            raise ConfigError(key, f"scene {scene.id} is {scene.size}, model expects {size}")
        scene.annotation.validate(scene.size, model.num_classes)
    return scenes


def _eval_scenes(run: RunConfig, args, model: ModelConfig) -> List[Scene]:
    """Scenes to evaluate, checked against the config the model was built with"""
    path = getattr(args, "dataset", None) or run.paths.eval_dataset or run.paths.dataset
    return _scenes(path, "paths.eval_dataset", model)


def _model(run: RunConfig, args) -> Detector:
    path = getattr(args, "checkpoint", None) or run.paths.checkpoint
    if not path:
        raise ConfigError("paths.checkpoint", "a checkpoint is required")
    return load_checkpoint(path).model


def _predict(model: Detector, scenes: Sequence[Scene], report_top: Optional[int]):
    detections, proposals = [], []
    for scene in scenes:
        out = model.forward(scene.image)
        detections.append(top_detections(out.stages[-1], report_top))
        proposals.append(out.queries)
    return detections, proposals


def _checkpoint_target(run: RunConfig, out_dir: Path) -> Path:
    """Where train will write its checkpoint; refused up front when it cannot be written"""
    target = Path(run.paths.checkpoint or out_dir / CHECKPOINT_NAME)
    if target.is_dir():
        raise ConfigError("paths.checkpoint", f"{target} is a directory")
    try:
        target.parent.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise ConfigError("paths.checkpoint", f"cannot create {target.parent}: {e}") from e
    if not os.access(target.parent, os.W_OK) or (target.exists() and not os.access(target, os.W_OK)):
        raise ConfigError("paths.checkpoint", f"{target} is not writable")
    return target


def _train(run: RunConfig, out_dir: Path, resume: Optional[str] = None) -> TrainState:
    scenes = _scenes(run.paths.dataset, "paths.dataset", run.model)
    target = _checkpoint_target(run, out_dir)
    resume = resume or run.paths.resume
    state = load_checkpoint(resume, run.model) if resume else TrainState.create(run.model)
    metrics = MetricsWriter(out_dir / "metrics.csv", run.model.n_stages, run.run.log_wall_clock)

    def periodic_eval(current: TrainState) -> None:
        eval_scenes = _scenes(run.paths.eval_dataset or run.paths.dataset, "paths.eval_dataset", run.model)
        detections, _ = _predict(current.model, eval_scenes, run.run.report_top)
        report = evaluate(detections, [s.annotation for s in eval_scenes], run.model.num_classes)
        report.write_csv(out_dir / f"eval_step{current.step}.csv")
        logger.info(f"📊 step {current.step}: AP50 {report.ap50:.4f} mAP {report.map:.4f}")

    fit(state, [scene.sample() for scene in scenes], run.run, metrics, periodic_eval)
    save_checkpoint(state, target)
    return state


# ---------------------------------------------------------------- commands

def cmd_gen_data(args) -> int:
    spec = load_scene_spec(args.spec, args.set)
    if args.count < 0:
        raise ConfigError("count", "must be >= 0")
    if args.seed < 0:
        raise ConfigError("seed", "must be >= 0")
    scenes = generate_dataset(spec, args.count, args.seed)
    write_dataset(scenes, args.out, force=args.force)
    short = sum(1 for s in scenes if s.placed < s.requested)
    if short:
        logger.info(f"ℹ️ {short} scene(s) hold fewer objects than requested")
    return EXIT_OK


def cmd_train(args) -> int:
    run = _run_config(args)
    _train(run, _output_dir(run, args), args.resume)
    return EXIT_OK


def cmd_eval(args) -> int:
    run = _run_config(args)
    model = _model(run, args)
    scenes = _eval_scenes(run, args, model.config)
    detections, proposals = _predict(model, scenes, run.run.report_top)
    ks = default_recall_ks(model.config.num_queries)
    report = evaluate(detections, [s.annotation for s in scenes], model.config.num_classes, proposals, ks)
    target = _output_dir(run, args) / "eval.csv"
    report.write_csv(target)
    logger.info(f"📊 AP50 {report.ap50:.4f} | AP75 {report.ap75:.4f} | mAP {report.map:.4f} -> {target}")
    return EXIT_OK


def cmd_infer(args) -> int:
    run = _run_config(args)
    model = _model(run, args)
    scenes = _eval_scenes(run, args, model.config)
    out = _output_dir(run, args)
    detections, proposals = _predict(model, scenes, args.report_top or run.run.report_top)
    with (out / "detections.jsonl").open("w", encoding="utf-8") as f:
        for scene, dets in zip(scenes, detections):
            f.write(json.dumps({"id": scene.id, "detections": [d.to_dict() for d in dets]}) + "\n")
    if args.proposals:
        with (out / "proposals.jsonl").open("w", encoding="utf-8") as f:
            for scene, queries in zip(scenes, proposals):
                f.write(json.dumps({
                    "id": scene.id,
                    "scores": [float(s) for s in queries.scores],
                    "boxes": [[float(v) for v in box] for box in queries.boxes.data],
                    "provenance": [list(p) for p in queries.provenance],
                }) + "\n")
    if args.overlay:
        (out / "overlays").mkdir(exist_ok=True)
        for scene, dets in zip(scenes, detections):
            render_overlay(scene.image, dets, out / "overlays" / f"{scene.id}.ppm")
    logger.info(f"🔎 Wrote detections for {len(scenes)} scenes to {out}")
    return EXIT_OK


def cmd_recall(args) -> int:
    run = _run_config(args)
    model = _model(run, args)
    scenes = _eval_scenes(run, args, model.config)
    _, proposals = _predict(model, scenes, run.run.report_top)
    gts = [s.annotation for s in scenes]
    ks = args.ks or default_recall_ks(model.config.num_queries)
    curve = recall_curve(proposals, gts)
    ar = ar_at_k(proposals, gts, ks)
    target = _output_dir(run, args) / "recall.csv"
    write_recall_csv(curve, ar, target)
    logger.info(f"📈 recall@0.5 {curve[0.5]:.4f}, " + ", ".join(f"AR@{k} {v:.4f}" for k, v in ar.items()))
    return EXIT_OK


def cmd_bench(args) -> int:
    run = _run_config(args)
    path = args.checkpoint or run.paths.checkpoint
    model = load_checkpoint(path).model if path else Detector(run.model)
    if run.paths.eval_dataset or run.paths.dataset or args.dataset:
        images = [s.image for s in _eval_scenes(run, args, model.config)]
    else:
        spec = SceneSpec(height=model.config.image_height, width=model.config.image_width)
        images = [s.image for s in generate_dataset(spec, 4, run.run.seed)]
    report = bench_latency(model, images, args.warmup, args.runs)
    report.write_csv(_output_dir(run, args) / "bench.csv")
    return EXIT_OK


def gradcheck_cases(rng: np.random.Generator) -> Dict[str, Tuple[Callable[[ng.Array], ng.Array], np.ndarray]]:
    """name -> (scalar function of one input, input) covering every differentiable primitive"""
    def away(shape):
        return np.sign(rng.normal(size=shape)) * rng.uniform(0.2, 1.0, size=shape)

    def w(op: Callable[[ng.Array], ng.Array]) -> Callable[[ng.Array], ng.Array]:
        weights: Dict[Tuple[int, ...], np.ndarray] = {}

        def f(x: ng.Array) -> ng.Array:
            y = op(x)
            if y.shape not in weights:
                weights[y.shape] = rng.normal(size=y.shape)
            return ng.sum(ng.mul(y, ng.Array(weights[y.shape])))
        return f

    other = rng.normal(size=(3, 4))
    kernel = rng.normal(size=(2, 2, 3, 3))
    distinct = rng.permutation(32).reshape(2, 4, 4) / 10.0
    feature = rng.normal(size=(2, 16, 16))

    def roi(x: ng.Array) -> ng.Array:
        pyramid = FeaturePyramid([FeatureLevel(3, 8, x)], (128, 128))
        boxes = np.array([[10.0, 12.0, 60.0, 50.0], [70.0, 5.0, 120.0, 90.0]])
        return roi_align(pyramid, boxes, size=3, canonical_level=3).grid

    qgn_base = np.array([[4.0, 3.0, 13.0, 12.0], [18.0, 2.0, 29.0, 14.0], [3.0, 17.0, 15.0, 28.0],
                         [17.0, 18.0, 30.0, 30.0]])
    qgn_gt = SceneAnnotation(np.array([[3.0, 2.0, 14.0, 13.0], [16.0, 16.0, 30.0, 29.0]]), np.array([0, 1]))

    def dense(x: ng.Array) -> DenseOutput:
        return DenseOutput(
            logits=ng.reshape(ng.gather(x, [0], axis=1), (4,)),
            boxes=ng.add(ng.Array(qgn_base), ng.gather(x, [1, 2, 3, 4], axis=1)),
            features=ng.Array(np.zeros((4, 1))),
            locations=np.array([[3, 0, 0], [3, 0, 1], [3, 1, 0], [3, 1, 1]]),
            centers=np.array([[8.0, 8.0], [24.0, 8.0], [8.0, 24.0], [24.0, 24.0]]),
            strides=np.full(4, 8),
            image_size=(32, 32),
        )

    qgn_x = rng.normal(size=(4, 5))
    qgn_matching = qgn_assign(dense(ng.Array(qgn_x)), qgn_gt)

    set_base = np.array([[2.0, 3.0, 12.0, 14.0], [15.0, 4.0, 28.0, 16.0], [6.0, 17.0, 20.0, 30.0]])

    def set_loss(x: ng.Array) -> ng.Array:
        logits = ng.gather(x, [0, 1], axis=1)
        offsets = ng.gather(x, [2, 3, 4, 5], axis=1)
        first = (ng.sigmoid(logits), ng.add(ng.Array(set_base), offsets))
        second = (ng.sigmoid(ng.mul(logits, 0.5)), ng.add(ng.Array(set_base), ng.mul(offsets, 0.8)))
        return rcnn_set_loss([first, second], qgn_gt, (32, 32))

    return {
        "add": (w(lambda x: ng.add(x, ng.Array(other))), rng.normal(size=(3, 4))),
        "sub": (w(lambda x: ng.sub(ng.Array(other), x)), rng.normal(size=(3, 4))),
        "mul": (w(lambda x: ng.mul(x, x)), rng.normal(size=(3, 4))),
        "div": (w(lambda x: ng.div(ng.Array(other), x)), away((3, 4))),
        "exp": (w(ng.exp), rng.normal(size=(3, 4))),
        "log": (w(ng.log), rng.uniform(0.5, 2.0, size=(3, 4))),
        "power": (w(lambda x: ng.power(x, 3.0)), rng.normal(size=(3, 4))),
        "relu": (w(ng.relu), away((3, 4))),
        "sigmoid": (w(ng.sigmoid), rng.normal(size=(3, 4))),
        "absolute": (w(ng.absolute), away((3, 4))),
        "maximum": (w(lambda x: ng.maximum(x, ng.Array(other))), other + away((3, 4))),
        "minimum": (w(lambda x: ng.minimum(x, ng.Array(other))), other + away((3, 4))),
        "matmul": (w(lambda x: ng.matmul(x, ng.Array(other.T))), rng.normal(size=(2, 4))),
        "sum": (w(lambda x: ng.sum(x, axis=1)), rng.normal(size=(3, 4))),
        "mean": (w(lambda x: ng.mean(x, axis=0)), rng.normal(size=(3, 4))),
        "softmax": (w(lambda x: ng.softmax(x, axis=1)), rng.normal(size=(3, 4))),
        "reshape": (w(lambda x: ng.reshape(x, (4, 3))), rng.normal(size=(3, 4))),
        "transpose": (w(lambda x: ng.transpose(x, (1, 0))), rng.normal(size=(3, 4))),
        "expand": (w(lambda x: ng.expand(x, (3, 4))), rng.normal(size=(1, 4))),
        "concat": (w(lambda x: ng.concat([x, ng.mul(x, 2.0)], axis=0)), rng.normal(size=(3, 4))),
        "gather": (w(lambda x: ng.gather(x, [2, 0, 2], axis=0)), rng.normal(size=(3, 4))),
        "conv2d": (w(lambda x: ng.conv2d(x, ng.Array(kernel), stride=2, padding=1)), rng.normal(size=(2, 5, 5))),
        "max_pool2d": (w(ng.max_pool2d), distinct),
        "bilinear_sample": (w(lambda x: ng.bilinear_sample(x, np.array([0.3, 2.7, 1.5]), np.array([1.2, 0.4, 2.9]))),
                            rng.normal(size=(2, 4, 4))),
        "layer_norm": (w(lambda x: ng.layer_norm(x, ng.Array(np.ones(4)), ng.Array(np.zeros(4)))),
                       rng.normal(size=(3, 4))),
        "roi_align": (w(roi), feature),
        "qgn_loss": (lambda x: qgn_loss(dense(x), qgn_gt, qgn_matching, LossConfig()), qgn_x),
        "rcnn_set_loss": (set_loss, rng.normal(size=(3, 6))),
    }


def cmd_gradcheck(args) -> int:
    if args.seed < 0:
        raise ConfigError("seed", "must be >= 0")
    if args.seeds < 1:
        raise ConfigError("seeds", "must be >= 1")
    errors: Dict[str, float] = {}
    for seed in range(args.seed, args.seed + args.seeds):
        for name, (f, x) in gradcheck_cases(np.random.default_rng(seed)).items():
            errors[name] = max(errors.get(name, 0.0), ng.grad_check(f, ng.Array(x), step=args.step))
    failed = [name for name, error in errors.items() if error > args.tolerance]
    for name, error in errors.items():
        logger.info(f"{'✅' if error <= args.tolerance else '❌'} {name:16s} {error:.3e}")
    worst_name = max(errors, key=errors.get)
    worst = errors[worst_name]
    print(f"worst op: {worst_name} {worst:.3e} over {args.seeds} seed(s) (tolerance {args.tolerance:.1e})")
    if failed:
        logger.error(f"❌ gradcheck failed for: {', '.join(failed)}")
        return EXIT_NUMERIC
    return EXIT_OK


def _grid_cells(grid: Dict[str, List]) -> List[List[str]]:
    if not isinstance(grid, dict) or not all(isinstance(v, list) and v for v in grid.values()):
        raise ConfigError("grid", "must map override keys to non-empty lists")
    keys = list(grid)
    return [[f"{k}={json.dumps(v)}" for k, v in zip(keys, values)]
            for values in itertools.product(*(grid[k] for k in keys))]


def cmd_ablate(args) -> int:
    cells = _grid_cells(load_json(args.grid))
    base = _run_config(args)
    out = _output_dir(base, args)
    rows = []
    for index, cell in enumerate(cells):
        run = load_run_config(args.config, list(args.set) + cell + [f"paths.output_dir={json.dumps(str(out / f'cell{index}'))}",
                                                                     "paths.checkpoint=null", "paths.resume=null"])
        cell_dir = _output_dir(run, args=argparse.Namespace())
        logger.info(f"🧪 cell {index + 1}/{len(cells)}: {' '.join(cell)}")
        state = _train(run, cell_dir)
        scenes = _eval_scenes(run, argparse.Namespace(), state.model.config)
        detections, proposals = _predict(state.model, scenes, run.run.report_top)
        k = run.model.num_queries
        report = evaluate(detections, [s.annotation for s in scenes], run.model.num_classes, proposals, [k])
        latency = bench_latency(state.model, [s.image for s in scenes], n_warmup=1, n_runs=args.bench_runs)
        rows.append([" ".join(cell), f"{report.ap50:.6f}", f"{report.ap75:.6f}", f"{report.map:.6f}",
                     f"{report.ar_at_k[k]:.6f}", f"{latency.components['decoder'][0]:.4f}"])
    with (out / "ablation.csv").open("w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["cell", "AP50", "AP75", "mAP", "AR@K", "decoder_ms"])
        writer.writerows(rows)
    logger.info(f"✅ Ablation grid of {len(cells)} cells written to {out / 'ablation.csv'}")
    return EXIT_OK


def cmd_deltas(args) -> int:
    run = _run_config(args)
    model = _model(run, args)
    scenes = _eval_scenes(run, args, model.config)
    n_stages = model.config.n_stages
    inputs: List[List[np.ndarray]] = [[] for _ in range(n_stages)]
    assignments: List[list] = [[] for _ in range(n_stages)]
    for scene in scenes:
        losses = compute_losses(model, scene.image, scene.annotation)
        for i, (stage_out, stage_loss) in enumerate(zip(losses.forward.stages, losses.stages)):
            inputs[i].append(stage_out.input_boxes)
            assignments[i].append(stage_loss.assignment)
    histograms = delta_distribution(inputs, assignments, [s.annotation for s in scenes])
    out = _output_dir(run, args)
    write_delta_csv(histograms, out / "deltas_hist.csv", out / "deltas_summary.csv")
    for hist in histograms:
        logger.info(f"📐 stage {hist.stage}: mean |delta| {hist.mean_abs:.4f} over {hist.matched} matches")
    return EXIT_OK


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fqrcnn", description="Featurized Query R-CNN at desk scale")
    parser.add_argument("--verbose", action="store_true", help="DEBUG logging")
    sub = parser.add_subparsers(dest="command", required=True)

    def command(name: str, handler, help_text: str, config: bool = True) -> argparse.ArgumentParser:
        p = sub.add_parser(name, help=help_text, description=help_text)
        if config:
            p.add_argument("--config", help="RunConfig JSON file (defaults when omitted)")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config key, e.g. model.n_stages=3 (repeatable)")
        p.add_argument("--verbose", action="store_true", default=argparse.SUPPRESS, help="DEBUG logging")
        p.set_defaults(handler=handler)
        return p

    p = command("gen-data", cmd_gen_data, "write synthetic scenes as JSONL + PPM", config=False)
    p.add_argument("--spec", help="SceneSpec JSON file (defaults when omitted)")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--count", type=int, required=True, help="number of scenes")
    p.add_argument("--seed", type=int, default=0, help="seed of the first scene; scene i uses seed + i")
    p.add_argument("--force", action="store_true", help="write into a non-empty directory")

    p = command("train", cmd_train, "train and write metrics CSV + checkpoint")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--out", help="output directory (overrides paths.output_dir)")

    for name, handler, text in (("eval", cmd_eval, "evaluate a checkpoint (EvalReport CSV)"),
                                ("infer", cmd_infer, "write detections JSONL"),
                                ("recall", cmd_recall, "recall-vs-IoU and AR@K of the query boxes"),
                                ("deltas", cmd_deltas, "per-stage proposal -> GT delta histograms")):
        p = command(name, handler, text)
        p.add_argument("--checkpoint", help="checkpoint file (overrides paths.checkpoint)")
        p.add_argument("--dataset", help="dataset JSONL (overrides paths.eval_dataset)")
        p.add_argument("--out", help="output directory (overrides paths.output_dir)")
        if name == "infer":
            p.add_argument("--overlay", action="store_true", help="write one overlay PPM per scene")
            p.add_argument("--proposals", action="store_true", help="also write the query boxes as JSONL")
            p.add_argument("--report-top", type=int, help="detections per image (default K)")
        if name == "recall":
            p.add_argument("--ks", type=int, nargs="+", help="proposal counts for AR@K")

    p = command("bench", cmd_bench, "per-component latency CSV")
    p.add_argument("--checkpoint", help="checkpoint file (freshly initialized model when omitted)")
    p.add_argument("--dataset", help="images to time (synthetic scenes when omitted)")
    p.add_argument("--out", help="output directory (overrides paths.output_dir)")
    p.add_argument("--runs", type=int, default=10, help="timed runs (>= 10)")
    p.add_argument("--warmup", type=int, default=3, help="untimed warmup runs")

    p = command("gradcheck", cmd_gradcheck, "finite-difference check of every primitive", config=False)
    p.add_argument("--tolerance", type=float, default=1e-5)
    p.add_argument("--step", type=float, default=1e-6)
    p.add_argument("--seed", type=int, default=0, help="first seed")
    p.add_argument("--seeds", type=int, default=20, help="random inputs per primitive")

    p = command("ablate", cmd_ablate, "train + evaluate every cell of an override grid")
    p.add_argument("--grid", required=True, help='JSON object, e.g. {"model.n_stages": [1, 2]}')
    p.add_argument("--out", help="output directory (overrides paths.output_dir)")
    p.add_argument("--bench-runs", type=int, default=10)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code in (0, None) else EXIT_USAGE
    settings = runtime_settings()
    setup_logging("DEBUG" if args.verbose else settings.log_level, settings.log_file)
    ng.set_strict(settings.strict)
    try:
        return args.handler(args)
    except (ConfigError, CheckpointError, FileNotFoundError, FileExistsError, ValueError) as e:
        logger.error(f"❌ {e}")
        return EXIT_VALIDATION
    except (NumericalError, ng.NonFiniteError) as e:
        logger.error(f"❌ numeric failure: {e}")
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
