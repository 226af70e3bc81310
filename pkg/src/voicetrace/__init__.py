"""Fake-voice detection from layer-wise neuron activation monitoring.

The library instruments a small speaker-embedding CNN, calibrates
per-layer activation thresholds, turns activation traces into ACN
(activated-neuron count) or TKAN (top-k activation) feature vectors,
and trains a shallow binary classifier to separate real from
synthesized voices. A manipulation harness (resampling, speed, pitch,
SNR-controlled noise) measures robustness.
"""

__version__ = "0.1.0"
