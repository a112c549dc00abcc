"""Tool bottleneck pipelines: rasterized tool outputs fused by a knockout-trained CNN."""

__version__ = "0.1.0"
