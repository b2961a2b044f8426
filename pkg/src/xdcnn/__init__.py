"""Cross-domain CNN for hyperspectral image classification (numpy)."""

__version__ = "0.1.0"
