"""Crop-type and farming-system classification from multispectral image time series.

Pipeline pieces: Gaussian-kernel ensemble interpolation of irregular
observations onto an equidistant grid, quantile normalization, a
temporo-spatial transformer with per-class tokens and per-pixel heads,
training with AdamW and a warmup/cosine schedule, a pixel-based random
forest baseline, confusion-matrix accuracy measures, and a synthetic
scene generator for end-to-end verification at desk scale.
"""

__version__ = "0.1.0"
