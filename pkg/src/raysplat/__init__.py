"""RGBD SLAM with per-pixel ray-constrained Gaussians and distribution-aware ICP tracking."""

__version__ = "0.1.0"
