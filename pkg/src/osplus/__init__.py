"""Channel-wise shifting and scaling of activation outliers for post-training quantization."""

__version__ = "0.1.0"
