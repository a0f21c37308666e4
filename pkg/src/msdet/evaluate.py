"""Precision/recall, per-class average precision, mAP, and the latency bench.

AP uses all-point interpolation (area under the precision envelope) at a
single match IoU.  Matching is greedy in score order: each detection takes
the unmatched same-class ground truth with the highest IoU at or above the
threshold, and every ground truth is matched at most once.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from .geometry import CornerBox, iou_matrix
from .nms import Detection


@dataclass
class ClassCurve:
    recalls: np.ndarray
    precisions: np.ndarray
    num_gt: int
    num_det: int


@dataclass
class EvalReport:
    per_class_ap: dict[int, float]
    mean_ap: float
    curves: dict[int, ClassCurve]
    match_iou: float

    def to_json(self) -> str:
        return json.dumps({
            "mAP": self.mean_ap,
            "match_iou": self.match_iou,
            "per_class_ap": {str(k): v for k, v in
                             sorted(self.per_class_ap.items())},
            "num_gt": {str(k): c.num_gt for k, c in sorted(self.curves.items())},
            "num_det": {str(k): c.num_det for k, c in sorted(self.curves.items())},
        }, indent=2)


def average_precision(recalls: np.ndarray, precisions: np.ndarray) -> float:
    """All-point interpolated AP: area under the precision envelope."""
    mrec = np.concatenate(([0.0], recalls, [1.0]))
    mpre = np.concatenate(([0.0], precisions, [0.0]))
    for i in range(len(mpre) - 2, -1, -1):
        mpre[i] = max(mpre[i], mpre[i + 1])
    changed = np.where(mrec[1:] != mrec[:-1])[0]
    return float(((mrec[changed + 1] - mrec[changed]) * mpre[changed + 1]).sum())


GtBoxes = Mapping[str, Sequence[tuple[int, CornerBox]]]
DetsByImage = Mapping[str, Sequence[Detection]]


def evaluate(dets_by_image: DetsByImage, gts_by_image: GtBoxes,
             match_iou: float = 0.5) -> EvalReport:
    """Score detections against ground truth, per class, across images.

    ``gts_by_image`` maps image id to (class_id, CornerBox) pairs.  Classes
    with no ground truth are excluded from the mean; a class with ground
    truth but no detections scores 0.
    """
    classes_with_gt: set[int] = set()
    gt_store: dict[tuple[str, int], list[CornerBox]] = {}
    for img, gts in gts_by_image.items():
        for cls_id, box in gts:
            if cls_id < 0:
                raise ValueError(f"class id {cls_id} out of range")
            classes_with_gt.add(cls_id)
            gt_store.setdefault((img, cls_id), []).append(box)

    flat: list[tuple[float, str, int, CornerBox]] = []
    for img, dets in dets_by_image.items():
        for d in dets:
            flat.append((d.score, img, d.class_id, d.box))

    per_class_ap: dict[int, float] = {}
    curves: dict[int, ClassCurve] = {}
    for cls_id in sorted(classes_with_gt):
        cls_dets = [(score, img, box) for score, img, c, box in flat
                    if c == cls_id]
        # stable sort keeps input order among equal scores
        cls_dets.sort(key=lambda t: -t[0])
        num_gt = sum(len(v) for (img, c), v in gt_store.items() if c == cls_id)
        matched: dict[str, np.ndarray] = {}
        tp = np.zeros(len(cls_dets))
        fp = np.zeros(len(cls_dets))
        for rank, (score, img, box) in enumerate(cls_dets):
            gts = gt_store.get((img, cls_id), [])
            if not gts:
                fp[rank] = 1
                continue
            if img not in matched:
                matched[img] = np.zeros(len(gts), dtype=bool)
            ious = iou_matrix(
                np.array([[box.x1, box.y1, box.x2, box.y2]]),
                np.array([[g.x1, g.y1, g.x2, g.y2] for g in gts]))[0]
            ious[matched[img]] = -1.0
            best = int(np.argmax(ious))
            if ious[best] >= match_iou:
                matched[img][best] = True
                tp[rank] = 1
            else:
                fp[rank] = 1
        cum_tp = np.cumsum(tp)
        cum_fp = np.cumsum(fp)
        recalls = cum_tp / max(num_gt, 1)
        precisions = cum_tp / np.maximum(cum_tp + cum_fp, 1e-12)
        ap = average_precision(recalls, precisions) if len(cls_dets) else 0.0
        per_class_ap[cls_id] = ap
        curves[cls_id] = ClassCurve(recalls=recalls, precisions=precisions,
                                    num_gt=num_gt, num_det=len(cls_dets))

    mean_ap = float(np.mean(list(per_class_ap.values()))) if per_class_ap else 0.0
    return EvalReport(per_class_ap=per_class_ap, mean_ap=mean_ap,
                      curves=curves, match_iou=match_iou)


def report_table(reports: dict[str, EvalReport],
                 class_names: Mapping[int, str] | None = None) -> str:
    """Aligned text table: one class per row, one AP column per run."""
    runs = list(reports)
    classes = sorted({c for r in reports.values() for c in r.per_class_ap})
    names = {c: (class_names or {}).get(c, f"class_{c}") for c in classes}
    width = max([len("mAP")] + [len(n) for n in names.values()]) + 2
    cols = [max(len(run), 6) + 2 for run in runs]
    lines = ["".ljust(width) + "".join(run.rjust(c) for run, c in zip(runs, cols))]
    lines.append("mAP".ljust(width) + "".join(
        f"{reports[r].mean_ap:.3f}".rjust(c) for r, c in zip(runs, cols)))
    for cls_id in classes:
        row = names[cls_id].ljust(width)
        for run, c in zip(runs, cols):
            ap = reports[run].per_class_ap.get(cls_id)
            row += ("-" if ap is None else f"{ap:.3f}").rjust(c)
        lines.append(row)
    return "\n".join(lines)


@dataclass
class LatencyStats:
    """Wall-clock stats for a benched callable, in milliseconds."""

    mean_ms: float
    p50_ms: float
    p99_ms: float
    repetitions: int
    implied_fps: float
    extras: dict = field(default_factory=dict)

    def to_json(self) -> str:
        payload = {"mean_ms": self.mean_ms, "p50_ms": self.p50_ms,
                   "p99_ms": self.p99_ms, "repetitions": self.repetitions,
                   "implied_fps": self.implied_fps}
        payload.update(self.extras)
        return json.dumps(payload, indent=2)


def fps_bench(pipeline: Callable[[], object], repetitions: int,
              warmup: int = 3) -> LatencyStats:
    """Time ``pipeline`` over ``repetitions`` runs (>= 30) and report stats.

    Report only; no pass/fail judgement lives here.
    """
    if repetitions < 30:
        raise ValueError("repetitions must be >= 30 for stable percentiles")
    for _ in range(warmup):
        pipeline()
    times = np.empty(repetitions)
    for i in range(repetitions):
        t0 = time.perf_counter()
        pipeline()
        times[i] = (time.perf_counter() - t0) * 1000.0
    p50 = float(np.percentile(times, 50))
    return LatencyStats(mean_ms=float(times.mean()), p50_ms=p50,
                        p99_ms=float(np.percentile(times, 99)),
                        repetitions=repetitions,
                        implied_fps=1000.0 / p50 if p50 > 0 else float("inf"))


def synthetic_raw_maps(cfg, seed: int = 0, positives_per_scale: int = 40,
                       background_logit: float = -8.0) -> list[np.ndarray]:
    """Raw head maps mimicking a trained detector's output statistics.

    Background objectness logits sit deep in the sigmoid tail (as a trained
    net produces) with a sprinkling of confident positives, so thresholding
    prunes the candidate stream as it would in production.
    """
    rng = np.random.default_rng(seed)
    k = cfg.num_classes
    a_per = cfg.anchors_per_scale
    maps = []
    for size in cfg.grid_sizes():
        m = rng.normal(0.0, 1.0, (a_per, 5 + k, size, size)).astype(np.float32)
        m[:, 4] = rng.normal(background_logit, 1.0, (a_per, size, size))
        m[:, 5:] = rng.normal(-4.0, 1.0, (a_per, k, size, size))
        n_pos = min(positives_per_scale, a_per * size * size)
        flat = rng.choice(a_per * size * size, size=n_pos, replace=False)
        ia, ij, ii = np.unravel_index(flat, (a_per, size, size))
        m[ia, 4, ij, ii] = rng.normal(4.0, 1.0, n_pos)
        m[ia, 5 + rng.integers(0, k, n_pos), ij, ii] = rng.normal(4.0, 1.0, n_pos)
        maps.append(m.reshape(a_per * (5 + k), size, size))
    return maps
