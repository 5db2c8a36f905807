"""Differentiable Gaussian-splat rendering with self-supervised scene recovery."""

from .geometry import (
    CameraIntrinsics,
    RigidTransform,
    Twist,
    epipolar_line,
    plucker_embedding,
    ray_embedding,
    se3_compose,
    se3_exp,
    se3_inverse,
    se3_log,
)

__all__ = [
    "CameraIntrinsics",
    "RigidTransform",
    "Twist",
    "epipolar_line",
    "plucker_embedding",
    "ray_embedding",
    "se3_compose",
    "se3_exp",
    "se3_inverse",
    "se3_log",
]
