"""Command-line entry point: anchors, train-toy, detect, eval, bench, stats.

Every subcommand is non-interactive and writes files or stdout.  Exit codes:
0 success (including empty results), 2 usage/validation error, 3 internal
assertion failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from importlib import resources
from pathlib import Path

import numpy as np

from . import data as data_mod
from .anchors import (AnchorSet, anchor_set_from_config, kmeans_anchors,
                      mean_best_iou)
from .config import ModelConfig, emit_config, parse_config
from .decode import candidate_count
from .evaluate import evaluate, fps_bench, report_table, synthetic_raw_maps
from .geometry import Box, CornerBox, clamp_to_image
from .network import Network, build, load_weights
from .nms import Detection, postprocess
from .tensor import Tensor
from .train import TrainConfig, train


class CliError(Exception):
    """Validation failure; maps to exit code 2."""


def _load_config(path: str | None, profile: str | None = None) -> ModelConfig:
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise CliError(f"config file not found: {p}")
        return parse_config(p.read_text())
    name = profile or "paper"
    ref = resources.files("msdet") / "configs" / f"{name}.cfg"
    return parse_config(ref.read_text())


def _load_net(cfg: ModelConfig, weights_path: str) -> Network:
    p = Path(weights_path)
    if not p.is_file():
        raise CliError(f"weights file not found: {p}")
    net = build(cfg)
    load_weights(net, p.read_bytes())
    return net


def _detect_image(net: Network, cfg: ModelConfig, anchor_set: AnchorSet,
                  image_path: Path, conf: float, nms_iou: float,
                  ) -> tuple[list[Detection], np.ndarray]:
    pixels = data_mod.read_ppm(image_path)
    if pixels.ndim == 2:
        pixels = np.stack([pixels] * 3, axis=-1)
    orig_h, orig_w = pixels.shape[:2]
    img = data_mod.load_image(image_path)
    tensor_in = Tensor(data_mod.preprocess(img, cfg)[None])
    raw = net.forward(tensor_in)
    dets = postprocess(raw, cfg, conf_threshold=conf, iou_threshold=nms_iou,
                       anchor_set=anchor_set)
    # map from network pixel space back to the original image, then clamp
    sx, sy = orig_w / cfg.input_size, orig_h / cfg.input_size
    mapped = [Detection(d.class_id, d.score, clamp_to_image(
        CornerBox(d.box.x1 * sx, d.box.y1 * sy, d.box.x2 * sx, d.box.y2 * sy),
        orig_w, orig_h)) for d in dets]
    return mapped, pixels


def cmd_detect(args) -> int:
    cfg = _load_config(args.config)
    net = _load_net(cfg, args.weights)
    anchor_set = anchor_set_from_config(cfg)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    lines = []
    for image_arg in args.images:
        image_path = Path(image_arg)
        if not image_path.is_file():
            raise CliError(f"image not found: {image_path}")
        dets, pixels = _detect_image(net, cfg, anchor_set, image_path,
                                     args.conf, args.nms_iou)
        for d in dets:
            lines.append(json.dumps({
                "image": str(image_path), "class": d.class_id,
                "score": round(d.score, 6),
                "box": [round(v, 2) for v in
                        (d.box.x1, d.box.y1, d.box.x2, d.box.y2)]}))
        annotated = data_mod.draw_detections(pixels, dets)
        data_mod.write_ppm(out_dir / f"{image_path.stem}_det.ppm", annotated)
    out_file = out_dir / "detections.jsonl"
    out_file.write_text("\n".join(lines) + ("\n" if lines else ""))
    print(f"wrote {out_file} ({len(lines)} detections)")
    return 0


def _gts_from_manifest(records) -> dict[str, list[tuple[int, CornerBox]]]:
    gts: dict[str, list[tuple[int, CornerBox]]] = {}
    for rec in records:
        entries = []
        for b in rec.boxes:
            half_w, half_h = b.w / 2.0, b.h / 2.0
            entries.append((b.class_id, CornerBox(
                (b.cx - half_w) * rec.width, (b.cy - half_h) * rec.height,
                (b.cx + half_w) * rec.width, (b.cy + half_h) * rec.height)))
        gts[rec.image] = entries
    return gts


def _dets_from_file(path: Path) -> dict[str, list[Detection]]:
    dets: dict[str, list[Detection]] = {}
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
                det = Detection(class_id=int(obj["class"]),
                                score=float(obj["score"]),
                                box=CornerBox(*map(float, obj["box"])))
                image = str(obj["image"])
            except (KeyError, TypeError, ValueError, json.JSONDecodeError) as e:
                raise CliError(f"{path}:{line_no}: bad detection record: {e}")
            dets.setdefault(image, []).append(det)
    return dets


def cmd_eval(args) -> int:
    manifest = Path(args.manifest)
    if not manifest.is_file():
        raise CliError(f"manifest not found: {manifest}")
    records = data_mod.load_manifest(manifest)
    gts = _gts_from_manifest(records)

    if args.detections:
        dets_path = Path(args.detections)
        if not dets_path.is_file():
            raise CliError(f"detections file not found: {dets_path}")
        dets = _dets_from_file(dets_path)
        run_name = dets_path.stem
    else:
        if not (args.config and args.weights):
            raise CliError("provide either --detections or --config + --weights")
        cfg = _load_config(args.config)
        net = _load_net(cfg, args.weights)
        anchor_set = anchor_set_from_config(cfg)
        dets = {}
        for rec in records:
            image_path = Path(rec.image)
            if not image_path.is_file():
                raise CliError(f"image not found: {image_path}")
            dets[rec.image], _ = _detect_image(net, cfg, anchor_set,
                                               image_path, args.conf,
                                               args.nms_iou)
        run_name = "model"

    report = evaluate(dets, gts, match_iou=args.match_iou)
    print(report_table({run_name: report}))
    if args.out:
        Path(args.out).write_text(report.to_json() + "\n")
        print(f"wrote {args.out}")
    return 0


def cmd_anchors(args) -> int:
    manifest = Path(args.manifest)
    if not manifest.is_file():
        raise CliError(f"manifest not found: {manifest}")
    records = data_mod.load_manifest(manifest)
    boxes = [(b.w * args.input_size, b.h * args.input_size)
             for rec in records for b in rec.boxes]
    if len(boxes) < args.k:
        raise CliError(f"manifest provides {len(boxes)} boxes, need >= k={args.k}")
    anchor_set = kmeans_anchors(boxes, args.k, seed=args.seed,
                                anchors_per_scale=args.per_scale)
    payload = {
        "anchors": [[a.p_w, a.p_h] for a in anchor_set.anchors],
        "masks": anchor_set.masks,
        "mean_best_iou": mean_best_iou(boxes, anchor_set),
    }
    text = json.dumps(payload, indent=2)
    if args.out:
        Path(args.out).write_text(text + "\n")
        print(f"wrote {args.out} (mean_best_iou="
              f"{payload['mean_best_iou']:.4f})")
    else:
        print(text)
    return 0


def cmd_stats(args) -> int:
    manifest = Path(args.manifest)
    if not manifest.is_file():
        raise CliError(f"manifest not found: {manifest}")
    records = data_mod.load_manifest(manifest)
    print(data_mod.dataset_stats(records).to_json())
    return 0


def cmd_bench(args) -> int:
    cfg = _load_config(args.config, profile=args.profile)
    maps = synthetic_raw_maps(cfg, seed=args.seed)
    anchor_set = anchor_set_from_config(cfg)

    def pipeline():
        return postprocess(maps, cfg, conf_threshold=args.conf,
                           iou_threshold=args.nms_iou, anchor_set=anchor_set)

    survivors = len(pipeline())
    stats = fps_bench(pipeline, repetitions=args.reps)
    stats.extras.update({
        "profile": args.profile, "candidates": candidate_count(cfg),
        "detections": survivors, "conf_threshold": args.conf,
        "nms_iou": args.nms_iou,
    })
    print(f"profile={args.profile} candidates={candidate_count(cfg)} "
          f"detections={survivors}")
    print(f"p50 {stats.p50_ms:.2f} ms | p99 {stats.p99_ms:.2f} ms | "
          f"mean {stats.mean_ms:.2f} ms | implied FPS {stats.implied_fps:.1f} "
          f"({stats.repetitions} reps)")
    print(stats.to_json())
    if args.out:
        Path(args.out).write_text(stats.to_json() + "\n")
    return 0


def cmd_train_toy(args) -> int:
    cfg = _load_config(args.config, profile="tiny")
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    data_dir = out_dir / "data"
    manifest = data_mod.write_synthetic_dataset(
        data_dir, n_images=args.images, image_size=cfg.input_size,
        seed=args.seed)
    records = data_mod.load_manifest(manifest)
    print(f"synthetic dataset: {len(records)} images at {data_dir}")

    boxes = [(b.w * cfg.input_size, b.h * cfg.input_size)
             for rec in records for b in rec.boxes]
    anchor_set = kmeans_anchors(boxes, cfg.num_anchors, seed=args.seed,
                                anchors_per_scale=cfg.anchors_per_scale)
    cfg.anchors = [(a.p_w, a.p_h) for a in anchor_set.anchors]
    print(f"anchors (mean best IoU "
          f"{mean_best_iou(boxes, anchor_set):.3f}): {cfg.anchors}")

    dataset = []
    for rec in records:
        img = data_mod.load_image(rec.image)
        gt = [(Box(b.cx, b.cy, b.w, b.h), b.class_id) for b in rec.boxes]
        dataset.append((data_mod.preprocess(img, cfg), gt))

    net = build(cfg)
    tcfg = TrainConfig(batch_size=args.batch_size, iterations=args.iterations,
                       learning_rate=args.lr, momentum=args.momentum,
                       seed=args.seed, checkpoint_every=args.checkpoint_every)
    result = train(net, dataset, tcfg, anchor_set, out_dir=out_dir,
                   log_every=args.log_every)
    initial, final = result.history[0].total, result.history[-1].total
    (out_dir / "model.cfg").write_text(emit_config(cfg))

    summary = {"initial_loss": initial, "final_loss": final,
               "loss_ratio": final / initial if initial else float("nan"),
               "iterations": tcfg.iterations, "images": len(records)}
    if not args.skip_eval:
        dets = {}
        gts = _gts_from_manifest(records)
        for rec, (img, _) in zip(records, dataset):
            raw = net.forward(Tensor(img[None]))
            dets[rec.image] = postprocess(raw, cfg, conf_threshold=args.conf,
                                          iou_threshold=args.nms_iou,
                                          anchor_set=anchor_set)
        report = evaluate(dets, gts, match_iou=0.5)
        summary["train_mAP@0.5"] = report.mean_ap
        (out_dir / "eval.json").write_text(report.to_json() + "\n")
    (out_dir / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    print(json.dumps(summary, indent=2))
    return 0


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="msdet", description="multi-scale small-object detector toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("anchors", help="k-means anchor priors from a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--k", type=int, default=25)
    p.add_argument("--per-scale", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--input-size", type=int, default=416)
    p.add_argument("--out")
    p.set_defaults(func=cmd_anchors)

    p = sub.add_parser("train-toy", help="train the tiny profile on synthetic data")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--config", help="model config (default: tiny profile)")
    p.add_argument("--images", type=int, default=32)
    p.add_argument("--iterations", type=int, default=300)
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--lr", type=float, default=1e-2)
    p.add_argument("--momentum", type=float, default=0.9)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--checkpoint-every", type=int, default=100)
    p.add_argument("--log-every", type=int, default=25)
    p.add_argument("--conf", type=float, default=0.25)
    p.add_argument("--nms-iou", type=float, default=0.45)
    p.add_argument("--skip-eval", action="store_true")
    p.set_defaults(func=cmd_train_toy)

    p = sub.add_parser("detect", help="run detection on PPM images")
    p.add_argument("--config", required=True)
    p.add_argument("--weights", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--conf", type=float, default=0.25)
    p.add_argument("--nms-iou", type=float, default=0.45)
    p.add_argument("images", nargs="+")
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("eval", help="mAP report from detections or a model")
    p.add_argument("--manifest", required=True)
    p.add_argument("--detections", help="JSON-lines detections to score")
    p.add_argument("--config")
    p.add_argument("--weights")
    p.add_argument("--match-iou", type=float, default=0.5)
    p.add_argument("--conf", type=float, default=0.005)
    p.add_argument("--nms-iou", type=float, default=0.45)
    p.add_argument("--out", help="write the JSON report here")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", help="post-processing latency benchmark")
    p.add_argument("--profile", choices=("paper", "tiny"), default="paper")
    p.add_argument("--config", help="explicit config (overrides --profile)")
    p.add_argument("--reps", type=int, default=50)
    p.add_argument("--conf", type=float, default=0.25)
    p.add_argument("--nms-iou", type=float, default=0.45)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="write the JSON report here")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("stats", help="dataset statistics from a manifest")
    p.add_argument("--manifest", required=True)
    p.set_defaults(func=cmd_stats)

    return parser


def main(argv=None) -> int:
    parser = make_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except CliError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except AssertionError as e:
        print(f"internal assertion failed: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
