"""Learned variable-length feedback channel codes.

Interactive transmission protocol with per-group threshold stopping,
attention-based encoder/decoder pair, training pipeline, and Monte-Carlo
evaluation harness over AWGN and block-fading forward channels.
"""

__version__ = "0.1.0"
