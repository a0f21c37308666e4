#!/usr/bin/env python3
"""Generate the golden 5-scale model config (60 conv / 20 shortcut /
6 upsample / 5 detection heads) and write it to src/msdet/configs/paper.cfg.

The schedule: a residual downsampling backbone to stride 32 (20 skip
connections, stride-2 convs at each resolution drop), then a neck that
upsamples back out to strides 16/8/4/2.  The stride-32->16 stage zigzags
through two extra upsample/downsample rounds, bringing the upsample total
to 6.  Detection heads are linear 1x1 convs.
"""

import sys
from pathlib import Path

ROOT = Path(__file__).resolve().parents[1]
sys.path.insert(0, str(ROOT / "src"))

from msdet.config import layer_census, parse_config  # noqa: E402
from msdet.network import build  # noqa: E402

NUM_CLASSES = 80
HEAD_FILTERS = 5 * (5 + NUM_CLASSES)  # anchors_per_scale * (5 + classes)


def anchor_ladder(n: int = 25, s_min: float = 8.0, s_max: float = 340.0):
    """Geometric size ladder with cycling aspect ratios, ascending area."""
    ratios = [1.0, 1.6, 0.625, 2.8, 0.357]
    anchors = []
    for i in range(n):
        s = s_min * (s_max / s_min) ** (i / (n - 1))
        r = ratios[i % len(ratios)]
        anchors.append((round(s * r ** 0.5, 1), round(s / r ** 0.5, 1)))
    return anchors


class Builder:
    def __init__(self):
        self.lines: list[str] = []
        self.index = -1  # index of the last emitted layer

    def section(self, name: str, **keys) -> int:
        self.lines.append(f"[{name}]")
        for key, value in keys.items():
            if isinstance(value, (list, tuple)):
                value = ",".join(str(v) for v in value)
            self.lines.append(f"{key}={value}")
        self.lines.append("")
        self.index += 1
        return self.index

    def conv(self, filters, size=3, stride=1, activation="leaky") -> int:
        return self.section("convolutional", filters=filters, size=size,
                            stride=stride, activation=activation)

    def residual_block(self, filters: int, two_conv: bool = True) -> int:
        if two_conv:
            self.conv(filters // 2, size=1)
            self.conv(filters, size=3)
            return self.section("shortcut", **{"from": -3})
        self.conv(filters, size=3)
        return self.section("shortcut", **{"from": -2})


def generate() -> str:
    b = Builder()
    anchors = anchor_ladder()
    flat_anchors = [v for wh in anchors for v in wh]

    b.lines += [
        "[net]",
        "input_size=416",
        f"classes={NUM_CLASSES}",
        "stride=32,16,8,4,2",
        "anchors_per_scale=5",
        "ignore_threshold=0.7",
        "truth_threshold=1.0",
        "jitter=0.3",
        "random=1",
        "filters=32,64,128,256",
        "pad=1",
        "lambda_coord=5.0",
        "lambda_noobj=0.5",
        "seed=0",
        "anchors=" + ",".join(str(v) for v in flat_anchors),
        "census=60,20,6,5",
        "",
    ]

    # backbone: stem + five stride-2 drops with residual blocks between
    b.conv(32, size=3)                      # stem @416
    b.conv(64, size=3, stride=2)            # @208
    taps = {}
    b.residual_block(64)
    taps[2] = b.index                       # 64ch @208 (stride 2 tap)
    b.conv(128, size=3, stride=2)           # @104
    for _ in range(2):
        b.residual_block(128)
    taps[4] = b.index                       # 128ch @104
    b.conv(256, size=3, stride=2)           # @52
    for _ in range(4):
        b.residual_block(256)
    taps[8] = b.index                       # 256ch @52
    b.conv(256, size=3, stride=2)           # @26
    for _ in range(8):
        b.residual_block(256)
    taps[16] = b.index                      # 256ch @26
    b.conv(256, size=3, stride=2)           # @13
    for _ in range(5):
        b.residual_block(256, two_conv=False)

    # stride-32 head
    b.conv(128, size=1)
    pre_head = b.conv(256, size=3)          # 256 @13
    b.conv(HEAD_FILTERS, size=1, activation="linear")
    b.section("detection", mask="20,21,22,23,24")

    # stride-32 -> 16 neck with two extra upsample/downsample rounds; after
    # round 0 the stride-2 conv already leaves 128 channels, so no reduce
    b.section("route", layers=pre_head)
    mix = None
    for round_i in range(3):
        if round_i == 0:
            b.conv(128, size=1)
        up = b.section("upsample", stride=2)                  # @26
        partner = taps[16] if round_i == 0 else mix
        b.section("route", layers=[up, partner])
        mix = b.conv(256, size=3)                             # 256 @26
        if round_i < 2:
            b.conv(128, size=3, stride=2)                     # back to @13
    b.conv(HEAD_FILTERS, size=1, activation="linear")
    b.section("detection", mask="15,16,17,18,19")

    # remaining stages: one upsample + route + mix conv + head each
    stage = [(8, 256, "10,11,12,13,14"),
             (4, 192, "5,6,7,8,9"),
             (2, 128, "0,1,2,3,4")]
    for tap_stride, mix_filters, mask in stage:
        b.section("route", layers=mix)
        b.conv(128, size=1)
        up = b.section("upsample", stride=2)
        b.section("route", layers=[up, taps[tap_stride]])
        mix = b.conv(mix_filters, size=3)
        b.conv(HEAD_FILTERS, size=1, activation="linear")
        b.section("detection", mask=mask)

    return "\n".join(b.lines).rstrip() + "\n"


def main():
    text = generate()
    cfg = parse_config(text)
    census = layer_census(cfg)
    net = build(cfg)
    grid = cfg.grid_sizes()
    print(f"census: conv={census[0]} shortcut={census[1]} "
          f"upsample={census[2]} detection={census[3]}")
    print(f"grids: {grid}, parameters: {net.num_parameters():,}")
    out = ROOT / "src" / "msdet" / "configs" / "paper.cfg"
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(text)
    print(f"wrote {out}")


if __name__ == "__main__":
    main()
