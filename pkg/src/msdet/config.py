"""Sectioned model-configuration format: parse, validate, emit.

The format is darknet-flavoured text: ``[section]`` headers, ``key=value``
lines, ``#`` comments, commas for lists.  A ``[net]`` section carries the
global hyperparameters; the remaining sections, in order, form the layer
schedule.  Parsing is strict: unknown sections or keys are errors so that
typos cannot silently change a model.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

LAYER_KINDS = ("convolutional", "shortcut", "upsample", "route", "detection")

# keys accepted per section; parse rejects anything else
_NET_KEYS = {
    "input_size", "classes", "stride", "anchors_per_scale", "ignore_threshold",
    "truth_threshold", "jitter", "random", "filters", "pad", "lambda_coord",
    "lambda_noobj", "anchors", "census", "seed", "cls_loss", "mean", "std", "num",
}
_LAYER_KEYS = {
    "convolutional": {"filters", "size", "stride", "activation", "pad"},
    "shortcut": {"from"},
    "upsample": {"stride"},
    "route": {"layers"},
    "detection": {"mask"},
}


class ConfigError(ValueError):
    """Raised for syntax or semantic violations in a model config."""


class ConfigWarning(UserWarning):
    """Non-fatal config oddities (e.g. redundant keys that get overridden)."""


@dataclass(frozen=True)
class LossWeights:
    """Weights for the localization and no-object confidence loss terms."""

    lambda_coord: float = 5.0
    lambda_noobj: float = 0.5

    def __post_init__(self):
        if self.lambda_coord <= 0 or self.lambda_noobj <= 0:
            raise ConfigError("loss weights must be > 0")


@dataclass
class LayerSpec:
    """One layer section of the schedule; only kind-relevant fields are set."""

    kind: str
    filters: int | None = None
    size: int | None = None
    stride: int | None = None
    activation: str | None = None
    from_layer: int | None = None  # shortcut: negative offset or absolute index
    layers: list[int] | None = None  # route: offsets/indices to concatenate
    mask: list[int] | None = None  # detection: anchor indices for this scale
    pad: int | None = None  # convolutional override; default follows net pad rule


@dataclass
class ModelConfig:
    """Validated model configuration; immutable by convention after parse."""

    num_classes: int
    input_size: int = 416
    strides: list[int] = field(default_factory=lambda: [32, 16, 8, 4, 2])
    anchors_per_scale: int = 5
    ignore_threshold: float = 0.7
    truth_threshold: float = 1.0
    jitter: float = 0.3
    random: int = 1
    filters: list[int] = field(default_factory=lambda: [32, 64, 128, 256])
    pad: int = 1
    lambda_coord: float = 5.0
    lambda_noobj: float = 0.5
    seed: int = 0
    cls_loss: str = "sse"  # 'sse' per the printed loss; 'bce' optional
    anchors: list[tuple[float, float]] | None = None
    census: tuple[int, int, int, int] | None = None  # conv, shortcut, upsample, detection
    mean: list[float] | None = None
    std: list[float] | None = None
    layers: list[LayerSpec] = field(default_factory=list)

    @property
    def num_scales(self) -> int:
        return len(self.strides)

    @property
    def num_anchors(self) -> int:
        return self.num_scales * self.anchors_per_scale

    @property
    def masks(self) -> list[list[int]]:
        """Per-scale anchor index lists, in detection-layer (stride) order."""
        return [list(l.mask) for l in self.layers if l.kind == "detection"]

    def loss_weights(self) -> LossWeights:
        return LossWeights(self.lambda_coord, self.lambda_noobj)

    def grid_sizes(self) -> list[int]:
        return [self.input_size // s for s in self.strides]


def _parse_scalar(text: str, line_no: int, key: str):
    text = text.strip()
    try:
        if "." in text or "e" in text or "E" in text:
            return float(text)
        return int(text)
    except ValueError:
        raise ConfigError(f"line {line_no}: key '{key}' has non-numeric value {text!r}") from None


def _parse_list(text: str, line_no: int, key: str) -> list:
    return [_parse_scalar(tok, line_no, key) for tok in text.split(",") if tok.strip()]


def _require_int(value, line_no: int, key: str) -> int:
    if isinstance(value, float) and not value.is_integer():
        raise ConfigError(f"line {line_no}: key '{key}' must be an integer, got {value}")
    return int(value)


def parse_config(text: str) -> ModelConfig:
    """Parse and validate the sectioned config format.

    Raises :class:`ConfigError` with a line number for syntax problems and
    with the violated invariant named for semantic problems.
    """
    sections: list[tuple[str, int, dict]] = []  # (name, line_no, {key: (value_text, line_no)})
    current: dict | None = None
    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("["):
            if not line.endswith("]"):
                raise ConfigError(f"line {line_no}: malformed section header {line!r}")
            name = line[1:-1].strip().lower()
            if name != "net" and name not in LAYER_KINDS:
                raise ConfigError(f"line {line_no}: unknown section [{name}]")
            current = {}
            sections.append((name, line_no, current))
        else:
            if current is None:
                raise ConfigError(f"line {line_no}: key-value pair before any section")
            if "=" not in line:
                raise ConfigError(f"line {line_no}: expected key=value, got {line!r}")
            key, value = line.split("=", 1)
            key = key.strip().lower()
            if key in current:
                raise ConfigError(f"line {line_no}: duplicate key '{key}'")
            current[key] = (value.strip(), line_no)

    if not sections or sections[0][0] != "net":
        raise ConfigError("no [net] section")
    net_name, net_line, net = sections[0]
    for key, (_, ln) in net.items():
        if key not in _NET_KEYS:
            raise ConfigError(f"line {ln}: unknown key '{key}' in [net]")

    def net_get(key, default=None):
        if key not in net:
            return default
        value, ln = net[key]
        return _parse_scalar(value, ln, key)

    def net_get_list(key, default=None):
        if key not in net:
            return default
        value, ln = net[key]
        return _parse_list(value, ln, key)

    if "classes" not in net:
        raise ConfigError("[net] requires an explicit 'classes' key (no default)")

    strides = [int(s) for s in net_get_list("stride", [32, 16, 8, 4, 2])]
    cfg = ModelConfig(
        num_classes=int(net_get("classes")),
        input_size=int(net_get("input_size", 416)),
        strides=strides,
        anchors_per_scale=int(net_get("anchors_per_scale", 5)),
        ignore_threshold=float(net_get("ignore_threshold", 0.7)),
        truth_threshold=float(net_get("truth_threshold", 1.0)),
        jitter=float(net_get("jitter", 0.3)),
        random=int(net_get("random", 1)),
        filters=[int(f) for f in net_get_list("filters", [32, 64, 128, 256])],
        pad=int(net_get("pad", 1)),
        lambda_coord=float(net_get("lambda_coord", 5.0)),
        lambda_noobj=float(net_get("lambda_noobj", 0.5)),
        seed=int(net_get("seed", 0)),
        cls_loss=str(net["cls_loss"][0]) if "cls_loss" in net else "sse",
        mean=[float(v) for v in net_get_list("mean")] if "mean" in net else None,
        std=[float(v) for v in net_get_list("std")] if "std" in net else None,
    )

    if "anchors" in net:
        flat = [float(v) for v in net_get_list("anchors")]
        if len(flat) % 2 != 0:
            raise ConfigError("anchors list must contain an even number of values")
        cfg.anchors = [(flat[i], flat[i + 1]) for i in range(0, len(flat), 2)]
    if "census" in net:
        census = [int(v) for v in net_get_list("census")]
        if len(census) != 4:
            raise ConfigError("census must list 4 counts: conv,shortcut,upsample,detection")
        cfg.census = tuple(census)
    if "num" in net:
        declared = int(net_get("num"))
        if declared != cfg.num_anchors:
            warnings.warn(
                f"'num={declared}' is overridden by mask arithmetic "
                f"({cfg.num_scales} scales x {cfg.anchors_per_scale} anchors = {cfg.num_anchors})",
                ConfigWarning, stacklevel=2)

    for name, ln, body in sections[1:]:
        spec = LayerSpec(kind=name)
        allowed = _LAYER_KEYS[name]
        for key, (value, key_ln) in body.items():
            if key not in allowed:
                raise ConfigError(f"line {key_ln}: unknown key '{key}' in [{name}]")
            if key == "from":
                spec.from_layer = _require_int(_parse_scalar(value, key_ln, key), key_ln, key)
            elif key in ("layers", "mask"):
                setattr(spec, key, [_require_int(v, key_ln, key)
                                    for v in _parse_list(value, key_ln, key)])
            elif key == "activation":
                if value not in ("leaky", "linear"):
                    raise ConfigError(f"line {key_ln}: unknown activation {value!r}")
                spec.activation = value
            else:
                setattr(spec, key, _require_int(_parse_scalar(value, key_ln, key), key_ln, key))
        _apply_layer_defaults(spec, cfg, ln)
        cfg.layers.append(spec)

    _validate(cfg)
    return cfg


def _apply_layer_defaults(spec: LayerSpec, cfg: ModelConfig, line_no: int) -> None:
    if spec.kind == "convolutional":
        if spec.filters is None:
            raise ConfigError(f"line {line_no}: [convolutional] requires 'filters'")
        spec.size = spec.size if spec.size is not None else 3
        spec.stride = spec.stride if spec.stride is not None else 1
        spec.activation = spec.activation if spec.activation is not None else "leaky"
        if spec.pad is None:
            # net-level pad flag: same-padding (size // 2) when on, zero when off
            spec.pad = (spec.size // 2) if cfg.pad else 0
        if spec.size not in (1, 3):
            raise ConfigError(f"line {line_no}: conv size must be 1 or 3, got {spec.size}")
        if spec.stride not in (1, 2):
            raise ConfigError(f"line {line_no}: conv stride must be 1 or 2, got {spec.stride}")
    elif spec.kind == "shortcut":
        if spec.from_layer is None:
            raise ConfigError(f"line {line_no}: [shortcut] requires 'from'")
    elif spec.kind == "upsample":
        spec.stride = spec.stride if spec.stride is not None else 2
        if spec.stride != 2:
            raise ConfigError(f"line {line_no}: upsample stride must be 2")
    elif spec.kind == "route":
        if not spec.layers:
            raise ConfigError(f"line {line_no}: [route] requires 'layers'")
    elif spec.kind == "detection":
        if not spec.mask:
            raise ConfigError(f"line {line_no}: [detection] requires 'mask'")


def _resolve_ref(ref: int, index: int) -> int:
    return index + ref if ref < 0 else ref


def _validate(cfg: ModelConfig) -> None:
    if cfg.input_size <= 0:
        raise ConfigError("input_size must be positive")
    if cfg.num_classes < 1:
        raise ConfigError("classes must be >= 1")
    if cfg.anchors_per_scale < 1:
        raise ConfigError("anchors_per_scale must be >= 1")
    if not 0.0 <= cfg.ignore_threshold <= 1.0:
        raise ConfigError("ignore_threshold must lie in [0, 1]")
    if any(b >= a for a, b in zip(cfg.strides, cfg.strides[1:])) or not cfg.strides:
        raise ConfigError("strides must be strictly decreasing")
    for s in cfg.strides:
        if s <= 0 or cfg.input_size % s != 0:
            raise ConfigError(f"stride {s} does not divide input_size {cfg.input_size}")

    det_layers = [l for l in cfg.layers if l.kind == "detection"]
    if cfg.layers and len(det_layers) != cfg.num_scales:
        raise ConfigError(
            f"{len(det_layers)} detection sections but {cfg.num_scales} strides")
    seen: set[int] = set()
    for l in det_layers:
        if len(l.mask) != cfg.anchors_per_scale:
            raise ConfigError(f"detection mask {l.mask} must list "
                              f"{cfg.anchors_per_scale} anchor indices")
        for idx in l.mask:
            if not 0 <= idx < cfg.num_anchors:
                raise ConfigError(f"mask index {idx} out of range "
                                  f"(total anchors {cfg.num_anchors})")
            if idx in seen:
                raise ConfigError(f"mask index {idx} appears in more than one scale")
            seen.add(idx)
    if det_layers and len(seen) != cfg.num_anchors:
        raise ConfigError("detection masks must partition the anchor index range")

    if cfg.anchors is not None:
        if len(cfg.anchors) != cfg.num_anchors:
            raise ConfigError(f"{len(cfg.anchors)} anchors given, "
                              f"expected {cfg.num_anchors}")
        for w, h in cfg.anchors:
            if w <= 0 or h <= 0:
                raise ConfigError("anchor dimensions must be > 0")
        areas = [w * h for w, h in cfg.anchors]
        if any(b < a for a, b in zip(areas, areas[1:])):
            raise ConfigError("anchors must be listed in ascending area order")

    for i, l in enumerate(cfg.layers):
        refs = []
        if l.kind == "shortcut":
            refs = [l.from_layer]
        elif l.kind == "route":
            refs = l.layers
        for r in refs:
            j = _resolve_ref(r, i)
            if not 0 <= j < i:
                raise ConfigError(
                    f"layer {i} ({l.kind}): reference {r} resolves to {j}, "
                    f"which is not an earlier layer")
    if cfg.cls_loss not in ("sse", "bce"):
        raise ConfigError(f"cls_loss must be 'sse' or 'bce', got {cfg.cls_loss!r}")
    if cfg.mean is not None and len(cfg.mean) != 3:
        raise ConfigError("mean must list 3 per-channel values")
    if cfg.std is not None and len(cfg.std) != 3:
        raise ConfigError("std must list 3 per-channel values")
    LossWeights(cfg.lambda_coord, cfg.lambda_noobj)


def _fmt(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _fmt_list(values) -> str:
    return ",".join(_fmt(v) for v in values)


def emit_config(cfg: ModelConfig) -> str:
    """Emit canonical text such that ``parse_config(emit_config(c)) == c``."""
    out = ["[net]"]
    out.append(f"input_size={cfg.input_size}")
    out.append(f"classes={cfg.num_classes}")
    out.append(f"stride={_fmt_list(cfg.strides)}")
    out.append(f"anchors_per_scale={cfg.anchors_per_scale}")
    out.append(f"ignore_threshold={_fmt(float(cfg.ignore_threshold))}")
    out.append(f"truth_threshold={_fmt(float(cfg.truth_threshold))}")
    out.append(f"jitter={_fmt(float(cfg.jitter))}")
    out.append(f"random={cfg.random}")
    out.append(f"filters={_fmt_list(cfg.filters)}")
    out.append(f"pad={cfg.pad}")
    out.append(f"lambda_coord={_fmt(float(cfg.lambda_coord))}")
    out.append(f"lambda_noobj={_fmt(float(cfg.lambda_noobj))}")
    out.append(f"seed={cfg.seed}")
    out.append(f"cls_loss={cfg.cls_loss}")
    if cfg.mean is not None:
        out.append(f"mean={_fmt_list(float(v) for v in cfg.mean)}")
    if cfg.std is not None:
        out.append(f"std={_fmt_list(float(v) for v in cfg.std)}")
    if cfg.anchors is not None:
        flat = [float(v) for wh in cfg.anchors for v in wh]
        out.append(f"anchors={_fmt_list(flat)}")
    if cfg.census is not None:
        out.append(f"census={_fmt_list(cfg.census)}")
    for l in cfg.layers:
        out.append("")
        out.append(f"[{l.kind}]")
        if l.kind == "convolutional":
            out.append(f"filters={l.filters}")
            out.append(f"size={l.size}")
            out.append(f"stride={l.stride}")
            out.append(f"pad={l.pad}")
            out.append(f"activation={l.activation}")
        elif l.kind == "shortcut":
            out.append(f"from={l.from_layer}")
        elif l.kind == "upsample":
            out.append(f"stride={l.stride}")
        elif l.kind == "route":
            out.append(f"layers={_fmt_list(l.layers)}")
        elif l.kind == "detection":
            out.append(f"mask={_fmt_list(l.mask)}")
    return "\n".join(out) + "\n"


def layer_census(cfg: ModelConfig) -> tuple[int, int, int, int]:
    """Counts of (convolutional, shortcut, upsample, detection) layers."""
    counts = {kind: 0 for kind in LAYER_KINDS}
    for l in cfg.layers:
        counts[l.kind] += 1
    return (counts["convolutional"], counts["shortcut"],
            counts["upsample"], counts["detection"])
