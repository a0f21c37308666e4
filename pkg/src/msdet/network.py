"""Network construction from a ModelConfig, forward pass, and weights I/O.

The layer schedule comes entirely from the config file; this module only
interprets it.  When the config declares an expected layer census the build
asserts it, which makes the architecture contract live in the config file
rather than in code.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .config import ModelConfig, layer_census
from .tensor import (Tensor, conv2d, leaky_relu, route_concat, shortcut_add,
                     upsample2x)

WEIGHTS_MAGIC = b"TSW1"


class BuildError(ValueError):
    """Raised when a config cannot be realized as a network."""


@dataclass
class RawPredictions:
    """Per-scale raw head outputs, shape [N, A*(5+K), S, S] each."""

    maps: list[Tensor]
    strides: list[int]
    masks: list[list[int]]
    input_size: int
    num_classes: int
    anchors_per_scale: int

    def __len__(self) -> int:
        return len(self.maps)


class Network:
    """Built detector: ordered layers plus their parameter tensors."""

    def __init__(self, cfg: ModelConfig):
        self.cfg = cfg
        self.weights: list[Tensor | None] = []
        self.biases: list[Tensor | None] = []
        self.head_layers: list[int] = []  # indices of detection layers
        self._plan_and_init()

    def _plan_and_init(self) -> None:
        cfg = self.cfg
        rng = np.random.default_rng(cfg.seed)
        head_channels = cfg.anchors_per_scale * (5 + cfg.num_classes)
        channels: list[int] = []
        sizes: list[int] = []
        prev_c, prev_s = 3, cfg.input_size
        n_heads = 0

        for i, spec in enumerate(cfg.layers):
            w = b = None
            if spec.kind == "convolutional":
                span = prev_s + 2 * spec.pad - spec.size
                if span < 0:
                    raise BuildError(f"layer {i}: kernel exceeds padded input")
                out_s = span // spec.stride + 1
                fan_in = prev_c * spec.size * spec.size
                bound = float(np.sqrt(6.0 / fan_in))
                w = Tensor(rng.uniform(-bound, bound,
                                       (spec.filters, prev_c, spec.size, spec.size))
                           .astype(np.float32), requires_grad=True)
                b = Tensor(np.zeros(spec.filters, dtype=np.float32),
                           requires_grad=True)
                prev_c, prev_s = spec.filters, out_s
            elif spec.kind == "shortcut":
                j = i + spec.from_layer if spec.from_layer < 0 else spec.from_layer
                if not 0 <= j < i:
                    raise BuildError(f"layer {i} (shortcut): 'from={spec.from_layer}' "
                                     f"resolves to {j}, not an earlier layer")
                if channels[j] != prev_c or sizes[j] != prev_s:
                    raise BuildError(
                        f"layer {i} (shortcut): shape mismatch with layer {j} "
                        f"({channels[j]}x{sizes[j]} vs {prev_c}x{prev_s})")
            elif spec.kind == "upsample":
                prev_s = prev_s * 2
            elif spec.kind == "route":
                srcs = [i + r if r < 0 else r for r in spec.layers]
                for j in srcs:
                    if not 0 <= j < i:
                        raise BuildError(f"layer {i} (route): reference resolves "
                                         f"to {j}, not an earlier layer")
                    if sizes[j] != sizes[srcs[0]]:
                        raise BuildError(f"layer {i} (route): spatial mismatch "
                                         f"({sizes[j]} vs {sizes[srcs[0]]})")
                prev_c = sum(channels[j] for j in srcs)
                prev_s = sizes[srcs[0]]
            elif spec.kind == "detection":
                if prev_c != head_channels:
                    raise BuildError(
                        f"layer {i} (detection): input has {prev_c} channels, "
                        f"expected anchors_per_scale*(5+classes) = {head_channels}")
                expected_s = cfg.input_size // cfg.strides[n_heads]
                if prev_s != expected_s:
                    raise BuildError(
                        f"layer {i} (detection): grid {prev_s} but stride "
                        f"{cfg.strides[n_heads]} implies {expected_s}")
                self.head_layers.append(i)
                n_heads += 1
            self.weights.append(w)
            self.biases.append(b)
            channels.append(prev_c)
            sizes.append(prev_s)

        if n_heads != cfg.num_scales:
            raise BuildError(f"{n_heads} detection layers but "
                             f"{cfg.num_scales} strides configured")
        if cfg.census is not None:
            actual = layer_census(cfg)
            if actual != cfg.census:
                raise BuildError(f"layer census mismatch: config declares "
                                 f"{cfg.census}, built {actual}")

    def parameters(self) -> list[Tensor]:
        params = []
        for w, b in zip(self.weights, self.biases):
            if w is not None:
                params.extend([w, b])
        return params

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def forward(self, images: Tensor) -> RawPredictions:
        """Run the schedule on a batch, returning the raw per-scale heads."""
        cfg = self.cfg
        if images.data.ndim != 4 or images.shape[1] != 3 \
                or images.shape[2] != cfg.input_size or images.shape[3] != cfg.input_size:
            raise ValueError(f"expected input [N,3,{cfg.input_size},"
                             f"{cfg.input_size}], got {images.shape}")
        outputs: list[Tensor] = []
        heads: list[Tensor] = []
        x = images
        for i, spec in enumerate(cfg.layers):
            if spec.kind == "convolutional":
                x = conv2d(outputs[i - 1] if i > 0 else images,
                           self.weights[i], self.biases[i],
                           stride=spec.stride, pad=spec.pad)
                if spec.activation == "leaky":
                    x = leaky_relu(x, 0.1)
            elif spec.kind == "shortcut":
                j = i + spec.from_layer if spec.from_layer < 0 else spec.from_layer
                x = shortcut_add(outputs[i - 1], outputs[j])
            elif spec.kind == "upsample":
                x = upsample2x(outputs[i - 1])
            elif spec.kind == "route":
                srcs = [i + r if r < 0 else r for r in spec.layers]
                x = route_concat([outputs[j] for j in srcs])
            elif spec.kind == "detection":
                x = outputs[i - 1]
                heads.append(x)
            outputs.append(x)
        return RawPredictions(maps=heads, strides=list(cfg.strides),
                              masks=cfg.masks, input_size=cfg.input_size,
                              num_classes=cfg.num_classes,
                              anchors_per_scale=cfg.anchors_per_scale)


def build(cfg: ModelConfig) -> Network:
    """Construct the network, asserting the declared layer census if any."""
    return Network(cfg)


def save_weights(net: Network) -> bytes:
    """Serialize parameters: magic, u32 layer count, then per layer a u32
    parameter count followed by raw little-endian f32 values."""
    chunks = [WEIGHTS_MAGIC, struct.pack("<I", len(net.cfg.layers))]
    for w, b in zip(net.weights, net.biases):
        if w is None:
            chunks.append(struct.pack("<I", 0))
            continue
        flat = np.concatenate([w.data.ravel(), b.data.ravel()]).astype("<f4")
        chunks.append(struct.pack("<I", flat.size))
        chunks.append(flat.tobytes())
    return b"".join(chunks)


class WeightsFormatError(ValueError):
    pass


def load_weights(net: Network, blob: bytes) -> None:
    """Load parameters saved by :func:`save_weights` into ``net`` in place."""
    if blob[:4] != WEIGHTS_MAGIC:
        raise WeightsFormatError(f"bad magic {blob[:4]!r}, expected {WEIGHTS_MAGIC!r}")
    if len(blob) < 8:
        raise WeightsFormatError("truncated header")
    (n_layers,) = struct.unpack_from("<I", blob, 4)
    if n_layers != len(net.cfg.layers):
        raise WeightsFormatError(f"layer count mismatch: file has {n_layers}, "
                                 f"network has {len(net.cfg.layers)}")
    offset = 8
    for i, (w, b) in enumerate(zip(net.weights, net.biases)):
        if offset + 4 > len(blob):
            raise WeightsFormatError(f"truncated at layer {i}")
        (count,) = struct.unpack_from("<I", blob, offset)
        offset += 4
        expected = 0 if w is None else w.size + b.size
        if count != expected:
            raise WeightsFormatError(f"parameter count mismatch at layer {i}: "
                                     f"file has {count}, network expects {expected}")
        if count == 0:
            continue
        nbytes = count * 4
        if offset + nbytes > len(blob):
            raise WeightsFormatError(f"truncated at layer {i}")
        flat = np.frombuffer(blob, dtype="<f4", count=count, offset=offset)
        offset += nbytes
        w.data = np.ascontiguousarray(
            flat[:w.size].reshape(w.shape).astype(np.float32))
        b.data = np.ascontiguousarray(
            flat[w.size:].reshape(b.shape).astype(np.float32))
    if offset != len(blob):
        raise WeightsFormatError(f"{len(blob) - offset} trailing bytes after "
                                 f"last layer")
