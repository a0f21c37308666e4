"""Toy-scale training: SGD with momentum over an in-memory dataset.

Batches wrap the dataset cyclically in manifest order, so runs are fully
deterministic given the seed; an epoch is ceil(n/batch) iterations and one
iteration is one forward+backward pass over one batch.
"""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .anchors import AnchorSet
from .assign import TargetTensor, assign_targets
from .config import ConfigWarning
from .geometry import Box
from .loss import LossBreakdown, detection_loss
from .network import Network, save_weights
from .tensor import Tape, Tensor


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    batch_size: int = 8
    iterations: int = 300
    learning_rate: float = 1e-2
    momentum: float = 0.9
    seed: int = 0
    checkpoint_every: int = 100
    warmup_iterations: int = 100

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")


@dataclass
class TrainResult:
    history: list[LossBreakdown] = field(default_factory=list)
    checkpoints: list[Path] = field(default_factory=list)


def iterations_for(num_examples: int, batch_size: int, epochs: int = 1) -> int:
    """Iteration accounting: one pass per batch, cycling the dataset."""
    return math.ceil(num_examples / batch_size) * epochs


def lr_schedule(iteration: int, tcfg: TrainConfig) -> float:
    """Constant learning rate after a linear warmup from 0."""
    if iteration < 0:
        raise ValueError("iteration must be >= 0")
    if tcfg.warmup_iterations <= 0:
        return tcfg.learning_rate
    return tcfg.learning_rate * min(1.0, iteration / tcfg.warmup_iterations)


Sample = tuple[np.ndarray, list[tuple[Box, int]]]  # image [3,S,S], gt list


def train(net: Network, dataset: list[Sample], tcfg: TrainConfig,
          anchor_set: AnchorSet, out_dir=None,
          log_every: int = 0) -> TrainResult:
    """Run the SGD loop; returns per-iteration loss history.

    Writes a checkpoint every ``checkpoint_every`` iterations (plus a final
    one) and a ``loss_history.csv`` when ``out_dir`` is given.  Aborts with
    :class:`TrainingDiverged` if the loss goes non-finite.
    """
    if not dataset:
        raise ValueError("dataset must be non-empty")
    cfg = net.cfg
    if cfg.random:
        warnings.warn("'random=1' (multi-scale input resizing) is parsed but "
                      "not used by the toy loop; input size stays fixed",
                      ConfigWarning, stacklevel=2)

    weights = cfg.loss_weights()
    # targets depend only on ground truth; build them once per sample
    targets_cache: list[TargetTensor] = [
        assign_targets(gt, anchor_set, cfg) for _, gt in dataset]
    images = [np.asarray(img, dtype=np.float32) for img, _ in dataset]

    params = net.parameters()
    velocity = [np.zeros_like(p.data) for p in params]
    result = TrainResult()
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)

    n = len(dataset)
    for it in range(tcfg.iterations):
        idx = [(it * tcfg.batch_size + j) % n for j in range(tcfg.batch_size)]
        batch = Tensor(np.stack([images[i] for i in idx]))
        batch_targets = [targets_cache[i] for i in idx]

        with Tape() as tape:
            raw = net.forward(batch)
            breakdown, total = detection_loss(raw, batch_targets, anchor_set,
                                              weights, cfg.cls_loss)
        if not math.isfinite(breakdown.total):
            raise TrainingDiverged(
                f"non-finite loss {breakdown.total} at iteration {it}")
        tape.backward(total)

        lr = lr_schedule(it, tcfg)
        for p, v in zip(params, velocity):
            g = p.grad if p.grad is not None else 0.0
            v *= tcfg.momentum
            v += g
            p.data -= (lr * v).astype(p.data.dtype)
            p.zero_grad()

        result.history.append(breakdown)
        if log_every and (it % log_every == 0 or it == tcfg.iterations - 1):
            print(f"iter {it:5d}  lr {lr:.4g}  loss {breakdown.total:.4f}  "
                  f"(loc {breakdown.loc:.4f} obj {breakdown.conf_obj:.4f} "
                  f"noobj {breakdown.conf_noobj:.4f} cls {breakdown.cls:.4f})")
        if out_dir is not None and tcfg.checkpoint_every > 0 \
                and (it + 1) % tcfg.checkpoint_every == 0:
            ckpt = out_dir / f"weights_{it + 1:06d}.tsw"
            ckpt.write_bytes(save_weights(net))
            result.checkpoints.append(ckpt)

    if out_dir is not None:
        final = out_dir / "weights_final.tsw"
        final.write_bytes(save_weights(net))
        result.checkpoints.append(final)
        with open(out_dir / "loss_history.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["iteration", "loc", "conf_obj", "conf_noobj",
                             "cls", "total"])
            for i, b in enumerate(result.history):
                writer.writerow([i, b.loc, b.conf_obj, b.conf_noobj, b.cls,
                                 b.total])
    return result
