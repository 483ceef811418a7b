"""Self-supervised pre-training on class-imbalanced image data, with
cluster-wise experts distilled back into a single model."""

__version__ = "0.1.0"
