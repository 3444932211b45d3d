"""Command-line surface: train, distill, quantize, calibrate, infer,
evaluate, report, synth.

Every command seeds all randomness from --seed (default 42), writes its
artifacts, and prints a machine-readable JSON summary as the last line of
stdout.  Exit codes: 0 success, 1 failed precondition (with a diagnostic on
stderr), 2 usage errors.
"""

from __future__ import annotations

import argparse
import json
import sys

import numpy as np

from . import builders, data as datalib, graphopt, quantize, runtime, tmf, train
from .metrics import (MetricsReport, confusion_matrix, confusion_to_csv,
                      metrics as compute_metrics, render_comparison, render_report)


def _build_model(cfg: dict, num_classes: int, image_size: int, seed: int, class_names):
    arch = cfg.get("arch", "small_cnn")
    if arch == "mobilenetv2":
        return builders.build_mobilenetv2_classifier(
            num_classes, cfg.get("width", 1.0), seed=seed, class_names=class_names)
    if arch == "densenet":
        if "preset" in cfg:
            return builders.build_densenet_preset(cfg["preset"], num_classes,
                                                  input_size=image_size, seed=seed,
                                                  class_names=class_names)
        return builders.build_densenet(cfg.get("blocks", [2, 2]), cfg.get("growth", 8),
                                       num_classes, input_size=image_size,
                                       stem=cfg.get("stem", 16), seed=seed,
                                       class_names=class_names)
    if arch == "small_cnn":
        return builders.build_small_cnn(num_classes, input_size=image_size,
                                        widths=tuple(cfg.get("widths", (12, 24, 48))),
                                        hidden=cfg.get("hidden", 48), seed=seed,
                                        class_names=class_names)
    raise ValueError(f"unknown model arch {cfg.get('arch')!r}")


def _stages_from_config(cfg: dict) -> list[train.StageConfig]:
    stages = []
    for s in cfg["stages"]:
        plateau = s.get("plateau")
        early = s.get("early_stop")
        stages.append(train.StageConfig(
            freeze_backbone=s.get("freeze_backbone", False),
            learning_rate=s["learning_rate"],
            max_epochs=s["max_epochs"],
            plateau=train.PlateauPolicy(plateau["factor"], plateau["patience"]) if plateau else None,
            early_stop=train.EarlyStopPolicy(
                early.get("monitor", "val_accuracy"), early.get("patience", 8),
                early.get("restore_best", True)) if early else None,
        ))
    return stages


def _load_config(path) -> dict:
    with open(path) as fh:
        return json.load(fh)


def _pipeline(args, cfg: dict) -> datalib.DataPipeline:
    image_size = cfg.get("image_size", 32)
    aug = cfg.get("augment", True)
    aug_cfg = None if aug is True else (datalib.AugmentConfig.identity() if aug is False
                                        else datalib.AugmentConfig(**aug))
    return datalib.DataPipeline.from_directory(
        args.data, image_size, batch_size=cfg.get("batch_size", 32),
        val_fraction=cfg.get("val_fraction", 0.2), seed=args.seed,
        augment_cfg=aug_cfg)


def _emit(summary: dict) -> None:
    print(json.dumps(summary, sort_keys=True))


def cmd_train(args) -> int:
    cfg = _load_config(args.config)
    pipe = _pipeline(args, cfg)
    model = _build_model(cfg.get("model", {}), pipe.num_classes,
                         cfg.get("image_size", 32), args.seed, pipe.class_names)
    stages = _stages_from_config(cfg) if "stages" in cfg else train.default_stages()
    ckpt, history = train.three_stage_train(model, pipe, stages, seed=args.seed,
                                            out_path=args.out)
    best = history.epochs[-1] if history.epochs else None
    best_acc = max((e.val_accuracy for e in history.epochs), default=0.0)
    _emit({"command": "train", "out": str(args.out), "epochs": len(history.epochs),
           "best_epoch": history.best_epoch, "best_val_accuracy": best_acc,
           "final_val_accuracy": best.val_accuracy if best else None})
    return 0


def cmd_distill(args) -> int:
    cfg = _load_config(args.config)
    teacher_obj = tmf.read_tmf(args.teacher)
    teacher_graph = teacher_obj.graph if hasattr(teacher_obj, "graph") else teacher_obj
    teacher = runtime.Executor(teacher_graph)
    pipe = _pipeline(args, cfg)
    student = _build_model(cfg.get("model", {"arch": "densenet", "preset": "student"}),
                           pipe.num_classes, cfg.get("image_size", 32), args.seed,
                           pipe.class_names)
    kd_cfg = train.KDConfig(**cfg.get("kd", {}))
    stage_cfgs = _stages_from_config(cfg) if "stages" in cfg else [
        train.StageConfig(False, 1e-3, 10, None, train.EarlyStopPolicy(patience=5))]
    ckpt, history = train.distill_train(student, teacher, pipe, kd_cfg, stage_cfgs[0],
                                        seed=args.seed, out_path=args.out)
    _emit({"command": "distill", "out": str(args.out), "epochs": len(history.epochs),
           "best_val_accuracy": max((e.val_accuracy for e in history.epochs), default=0.0)})
    return 0


def _calibration_samples(data_dir, image_size: int, n: int, seed: int):
    index = datalib.scan_dataset(data_dir)
    order = np.random.default_rng(seed).permutation(len(index))[:n]
    for i in order:
        yield datalib.preprocess(index.items[i][0], size=image_size)


def cmd_quantize(args) -> int:
    obj = tmf.read_tmf(getattr(args, "in"))
    if args.mode == "f16":
        graph = quantize.quantize_f16(obj)
    else:
        optimized = graphopt.optimize(obj)
        if not args.calib:
            raise ValueError("INT8 quantization needs --calib DIR for activation calibration")
        samples = _calibration_samples(args.calib, optimized.input_shape[0],
                                       args.calib_samples, args.seed)
        stats = quantize.calibrate(optimized, samples, n=args.calib_samples)
        graph = quantize.quantize_int8(optimized, stats)
    tmf.write_tmf(args.out, graph)
    import os
    _emit({"command": "quantize", "mode": args.mode, "out": str(args.out),
           "original_bytes": os.path.getsize(getattr(args, "in")),
           "compressed_bytes": os.path.getsize(args.out)})
    return 0


def cmd_calibrate(args) -> int:
    obj = tmf.read_tmf(args.model)
    graph = obj.graph if hasattr(obj, "graph") else obj
    samples = _calibration_samples(args.data, graph.input_shape[0], args.n, args.seed)
    stats = quantize.calibrate(graph, samples, n=args.n)
    with open(args.out, "w") as fh:
        json.dump(stats.to_json(), fh, sort_keys=True, indent=1)
    _emit({"command": "calibrate", "out": str(args.out), "samples": stats.count,
           "edges": len(stats.ranges)})
    return 0


def cmd_infer(args) -> int:
    obj = tmf.read_tmf(args.model)
    graph = obj.graph if hasattr(obj, "graph") else obj
    x = datalib.preprocess(args.image, size=graph.input_shape[0])
    probs = runtime.execute(graph, x[None])[0]
    names = graph.class_names or [f"class_{i}" for i in range(len(probs))]
    top = int(np.argmax(probs))
    _emit({"command": "infer", "image": str(args.image),
           "probabilities": [float(p) for p in probs],
           "class_index": top, "class_name": names[top]})
    return 0


def _evaluate_graph(graph, index, image_size: int, batch_size: int = 32):
    ex = runtime.Executor(graph)
    y_true = []
    y_pred = []
    for xb, yb in datalib.batches(index, batch_size, image_size=image_size):
        probs = ex.run(xb)
        y_true.extend(int(v) for v in yb)
        y_pred.extend(int(v) for v in probs.argmax(axis=1))
    cm = confusion_matrix(y_true, y_pred, index.num_classes, index.class_names)
    return cm, compute_metrics(cm)


def cmd_evaluate(args) -> int:
    obj = tmf.read_tmf(args.model)
    is_ckpt = hasattr(obj, "graph")
    graph = obj.graph if is_ckpt else obj
    if args.mode == "f16" and runtime.infer_mode(graph) != runtime.ExecutionMode.FP16_WEIGHTS:
        graph = quantize.quantize_f16(obj)
    elif args.mode == "int8" and runtime.infer_mode(graph) != runtime.ExecutionMode.INT8:
        raise ValueError("INT8 evaluation needs an INT8 model (run quantize --mode int8)")
    index = datalib.scan_dataset(args.data)
    if args.split != "all":
        train_idx, val_idx = datalib.stratified_split(index, args.val_fraction, args.seed)
        index = val_idx if args.split == "val" else train_idx
    cm, report = _evaluate_graph(graph, index, graph.input_shape[0])
    if args.report:
        with open(args.report, "w") as fh:
            json.dump(report.to_json(), fh, sort_keys=True, indent=1)
    if args.confusion:
        with open(args.confusion, "w") as fh:
            fh.write(confusion_to_csv(cm))
    print(render_report(report), end="")
    _emit({"command": "evaluate", "mode": args.mode, "accuracy": report.accuracy,
           "macro_f1": report.macro_f1, "images": report.total,
           "report": str(args.report) if args.report else None,
           "confusion": str(args.confusion) if args.confusion else None})
    return 0


def cmd_report(args) -> int:
    with open(args.baseline_report) as fh:
        base = MetricsReport.from_json(json.load(fh))
    with open(args.quantized_report) as fh:
        quant = MetricsReport.from_json(json.load(fh))
    rep = quantize.compression_report(args.original, args.quantized,
                                      base.accuracy, quant.accuracy)
    print(render_comparison(base, rep.original_bytes, quant,
                            rep.compressed_bytes), end="")
    summary = rep.to_json()
    summary.update({"command": "report", "baseline_macro_f1": base.macro_f1,
                    "quantized_macro_f1": quant.macro_f1})
    _emit(summary)
    return 0


def cmd_synth(args) -> int:
    root = datalib.synth_dataset(args.out, args.classes, args.per_class,
                                 image_size=args.size, seed=args.seed)
    _emit({"command": "synth", "out": str(root), "classes": args.classes,
           "per_class": args.per_class, "size": args.size})
    return 0


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="quantnet",
                                description="CNN compression and quantized-inference toolkit")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, **kwargs):
        sp = sub.add_parser(name, **kwargs)
        sp.set_defaults(fn=fn)
        sp.add_argument("--seed", type=int, default=42)
        return sp

    sp = add("train", cmd_train, help="three-stage training run")
    sp.add_argument("--config", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True)

    sp = add("distill", cmd_distill, help="knowledge-distillation training")
    sp.add_argument("--teacher", required=True)
    sp.add_argument("--config", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True)

    sp = add("quantize", cmd_quantize, help="post-training quantization")
    sp.add_argument("--in", required=True)
    sp.add_argument("--mode", choices=["f16", "int8"], required=True)
    sp.add_argument("--calib")
    sp.add_argument("--calib-samples", type=int, default=100)
    sp.add_argument("--out", required=True)

    sp = add("calibrate", cmd_calibrate, help="record activation ranges")
    sp.add_argument("--model", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("-n", type=int, default=100)
    sp.add_argument("--out", required=True)

    sp = add("infer", cmd_infer, help="single-image inference")
    sp.add_argument("--model", required=True)
    sp.add_argument("--image", required=True)

    sp = add("evaluate", cmd_evaluate, help="dataset evaluation with metrics report")
    sp.add_argument("--model", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--mode", choices=["f32", "f16", "int8"], default="f32")
    sp.add_argument("--report")
    sp.add_argument("--confusion")
    sp.add_argument("--split", choices=["val", "train", "all"], default="val")
    sp.add_argument("--val-fraction", type=float, default=0.2)

    sp = add("report", cmd_report, help="baseline-vs-quantized comparison table")
    sp.add_argument("--original", required=True)
    sp.add_argument("--quantized", required=True)
    sp.add_argument("--baseline-report", required=True)
    sp.add_argument("--quantized-report", required=True)

    sp = add("synth", cmd_synth, help="generate a synthetic dataset")
    sp.add_argument("--out", required=True)
    sp.add_argument("--classes", type=int, required=True)
    sp.add_argument("--per-class", type=int, required=True)
    sp.add_argument("--size", type=int, default=64)

    return p


def dispatch(argv) -> int:
    args = _parser().parse_args(argv)
    try:
        return args.fn(args)
    except (ValueError, FileNotFoundError, tmf.TMFError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
