"""Self-supervised pretraining with multi-stage augmentation and a reweighted BYOL-style loss.

Pure numpy: a tape-based autodiff engine, a small conv encoder with
projector and predictor heads, staged augmentation, the training loop and
frozen-encoder probes.
"""

__version__ = "0.1.0"
