"""Differentiable Gaussian splatting avatars with cross-attention conditioning."""
