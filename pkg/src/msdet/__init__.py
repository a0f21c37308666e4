"""Multi-scale anchor-based object detector, CPU-only, numpy-backed.

Subpackages cover the full pipeline: box geometry, sectioned model configs,
a minimal reverse-mode tensor engine, network construction, anchor clustering,
target assignment, the three-part detection loss, decode/threshold/NMS
post-processing, mAP evaluation, dataset tooling, and a toy training loop.
"""

__version__ = "0.1.0"
