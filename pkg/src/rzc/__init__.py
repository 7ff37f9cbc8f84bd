"""Learned image codec with a trainable resize-factor sandwich.

A small autodiff engine, differentiable resize layers driven by a scalar
scale factor, a toy analysis/synthesis compression backbone with a range
coder, end-to-end rate-distortion training, and codec evaluation metrics
(PSNR, MS-SSIM, BD-rate, 2AFC).
"""

__version__ = "0.1.0"
