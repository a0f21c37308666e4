"""Three-part detection loss: localization, confidence, classification.

All parts are sums of squared errors over sigmoid-activated predictions, with
width/height compared in pixel units through a square root so that a fixed
absolute error costs less on large boxes than on small ones.  The loss is
assembled from differentiable tensor ops, so its gradients come from the same
reverse sweep that trains the network.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as T
from .anchors import AnchorSet
from .assign import TargetTensor
from .config import LossWeights
from .network import RawPredictions
from .tensor import Tensor


@dataclass(frozen=True)
class LossBreakdown:
    """Loss components; ``total`` is their exact float sum."""

    loc: float
    conf_obj: float
    conf_noobj: float
    cls: float
    total: float


def _stack_scale(targets: Sequence[TargetTensor], s: int, attr: str) -> np.ndarray:
    return np.stack([getattr(t.scales[s], attr) for t in targets])


def _const(arr: np.ndarray, dtype) -> Tensor:
    return Tensor(np.asarray(arr, dtype=dtype))


def detection_loss(raw: RawPredictions, targets: Sequence[TargetTensor],
                   anchor_set: AnchorSet, weights: LossWeights | None = None,
                   cls_loss: str = "sse") -> tuple[LossBreakdown, Tensor]:
    """Compute the loss over a batch.

    ``targets`` holds one TargetTensor per batch image.  Returns the
    breakdown (floats) and the differentiable scalar total.  Ignore-band
    slots (both masks zero) contribute nothing to any term.
    """
    w = weights or LossWeights()
    n = raw.maps[0].shape[0]
    if len(targets) != n:
        raise ValueError(f"batch mismatch: {n} raw maps vs {len(targets)} targets")
    a_per = raw.anchors_per_scale
    k_cls = raw.num_classes
    dtype = raw.maps[0].dtype

    loc_xy = loc_wh = conf_obj = conf_noobj = cls_term = None

    def acc(total, part):
        return part if total is None else T.add(total, part)

    for s, m in enumerate(raw.maps):
        size = m.shape[2]
        if m.shape != (n, a_per * (5 + k_cls), size, size):
            raise ValueError(f"scale {s}: unexpected raw shape {m.shape}")
        view = m.reshape((n, a_per, 5 + k_cls, size, size))
        x_hat = T.sigmoid(view[:, :, 0])
        y_hat = T.sigmoid(view[:, :, 1])
        t_w = view[:, :, 2]
        t_h = view[:, :, 3]
        c_hat = T.sigmoid(view[:, :, 4])
        p_hat = T.sigmoid(view[:, :, 5:])  # [N,A,K,S,S]

        anchors = np.array([[a.p_w, a.p_h] for a in anchor_set.for_scale(s)])
        p_w = _const(anchors[None, :, 0, None, None], dtype)
        p_h = _const(anchors[None, :, 1, None, None], dtype)
        w_hat_px = T.mul(T.exp(t_w), p_w)
        h_hat_px = T.mul(T.exp(t_h), p_h)

        obj = _stack_scale(targets, s, "obj_mask").astype(dtype)
        noobj = _const(_stack_scale(targets, s, "noobj_mask"), dtype)
        tx_star = _const(_stack_scale(targets, s, "tx"), dtype)
        ty_star = _const(_stack_scale(targets, s, "ty"), dtype)
        w_star_px = _const(
            anchors[None, :, 0, None, None]
            * np.exp(_stack_scale(targets, s, "tw")).astype(dtype), dtype)
        h_star_px = _const(
            anchors[None, :, 1, None, None]
            * np.exp(_stack_scale(targets, s, "th")).astype(dtype), dtype)
        # class targets come as [N,A,S,S,K]; raw layout wants [N,A,K,S,S]
        cls_star = _const(np.moveaxis(
            _stack_scale(targets, s, "cls"), -1, 2), dtype)
        obj_t = _const(obj, dtype)
        obj_cls = _const(obj[:, :, None], dtype)  # broadcast over K

        dx = T.sub(x_hat, tx_star)
        dy = T.sub(y_hat, ty_star)
        loc_xy = acc(loc_xy, T.tsum(T.mul(obj_t, T.add(T.mul(dx, dx),
                                                       T.mul(dy, dy)))))
        dw = T.sub(T.sqrt(w_hat_px), T.sqrt(w_star_px))
        dh = T.sub(T.sqrt(h_hat_px), T.sqrt(h_star_px))
        loc_wh = acc(loc_wh, T.tsum(T.mul(obj_t, T.add(T.mul(dw, dw),
                                                       T.mul(dh, dh)))))
        dc = T.sub(c_hat, obj_t)  # target confidence is the 0/1 obj indicator
        conf_obj = acc(conf_obj, T.tsum(T.mul(obj_t, T.mul(dc, dc))))
        conf_noobj = acc(conf_noobj, T.tsum(T.mul(noobj, T.mul(c_hat, c_hat))))

        if cls_loss == "sse":
            dp = T.sub(p_hat, cls_star)
            cls_term = acc(cls_term, T.tsum(T.mul(obj_cls, T.mul(dp, dp))))
        elif cls_loss == "bce":
            eps = 1e-7
            p_safe = T.add(T.mul(p_hat, _const(np.array(1.0 - 2 * eps), dtype)),
                           _const(np.array(eps), dtype))
            one = _const(np.ones(1, dtype=dtype), dtype)
            nll = T.add(T.mul(cls_star, T.log(p_safe)),
                        T.mul(T.sub(one, cls_star), T.log(T.sub(one, p_safe))))
            cls_term = acc(cls_term, T.neg(T.tsum(T.mul(obj_cls, nll))))
        else:
            raise ValueError(f"unknown cls_loss {cls_loss!r}")

    lam_c = _const(np.array(w.lambda_coord), dtype)
    lam_n = _const(np.array(w.lambda_noobj), dtype)
    loc = T.mul(lam_c, T.add(loc_xy, loc_wh))
    conf_noobj_w = T.mul(lam_n, conf_noobj)
    total = T.add(T.add(T.add(loc, conf_obj), conf_noobj_w), cls_term)

    parts = (float(loc.data), float(conf_obj.data),
             float(conf_noobj_w.data), float(cls_term.data))
    breakdown = LossBreakdown(*parts, total=sum(parts))
    return breakdown, total


def loss_gradients(raw: RawPredictions, targets: Sequence[TargetTensor],
                   anchor_set: AnchorSet, weights: LossWeights | None = None,
                   cls_loss: str = "sse") -> list[np.ndarray]:
    """Analytic d(total)/d(raw map) for every scale, via the reverse sweep."""
    leaves = [Tensor(m.data.copy(), requires_grad=True) for m in raw.maps]
    leafed = RawPredictions(maps=leaves, strides=raw.strides, masks=raw.masks,
                            input_size=raw.input_size,
                            num_classes=raw.num_classes,
                            anchors_per_scale=raw.anchors_per_scale)
    with T.Tape() as tape:
        _, total = detection_loss(leafed, targets, anchor_set, weights, cls_loss)
        tape.backward(total)
    return [leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data)
            for leaf in leaves]
