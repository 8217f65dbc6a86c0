"""Attention-gated, reverse-attention U-Net speech enhancement on a numpy autodiff core."""

__version__ = "0.1.0"
