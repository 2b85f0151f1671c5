"""Streaming delayed-feedback CVR training engine.

Three stages: a delivery pipeline that trades nothing between freshness and
label accuracy (instant unlabeled deliveries, window-end labels, positive
calibration), a continuous-time user-item graph built from those deliveries,
and a graph-convolutional CVR model whose per-edge high/low-pass filter mix
is driven by learned preferences, trained online with an importance-sampling
debiased loss.
"""

__version__ = "0.1.0"
