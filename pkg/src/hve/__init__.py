"""Multimodal few-shot relation classification with a hyperbolic prototype head.

Everything runs on numpy: a small reverse-mode autodiff engine, projection
encoders over precomputed features, image/object-guided attention fusion,
Poincaré-ball prototypes, AdamW training and a synthetic data generator.
"""

__version__ = "0.1.0"
