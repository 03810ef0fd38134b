"""Vertex-heatmap mesh decoding, losses, soft silhouettes and pose metrics."""

__version__ = "0.1.0"
