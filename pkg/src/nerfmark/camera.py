"""Pinhole cameras, orbit poses and per-pixel rays.

Camera frame convention follows the NeRF-synthetic data: the camera looks
down its local -z axis with +y up and +x right.  World up is +z.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from .autodiff import Tensor


class PoseError(ValueError):
    pass


@dataclass
class CameraPose:
    camera_to_world: np.ndarray  # (4, 4) float64
    camera_angle_x: float  # horizontal field of view, radians

    def __post_init__(self):
        self.camera_to_world = np.asarray(self.camera_to_world, dtype=np.float64)
        validate_pose(self.camera_to_world)

    @property
    def origin(self) -> np.ndarray:
        return self.camera_to_world[:3, 3]


def validate_pose(c2w: np.ndarray, tol: float = 1e-4) -> None:
    if c2w.shape != (4, 4):
        raise PoseError(f"camera_to_world must be 4x4, got {c2w.shape}")
    if not np.allclose(c2w[3], [0, 0, 0, 1], atol=tol):
        raise PoseError(f"bottom row must be (0, 0, 0, 1), got {c2w[3].tolist()}")
    rot = c2w[:3, :3]
    if abs(np.linalg.det(rot)) < 1e-8:
        raise PoseError("rotation block is singular")
    err = np.abs(rot.T @ rot - np.eye(3)).max()
    if err > tol:
        raise PoseError(f"rotation block is not orthonormal (max deviation {err:.2e})")


def focal_length(width: int, camera_angle_x: float) -> float:
    return 0.5 * width / math.tan(0.5 * camera_angle_x)


def pose_from_angles(theta_deg: float, phi_deg: float, radius: float) -> np.ndarray:
    """Camera-to-world matrix on an orbit looking at the origin.

    ``theta_deg`` is the azimuth about world +z, ``phi_deg`` the elevation
    above the xy-plane.
    """
    th, ph = math.radians(theta_deg), math.radians(phi_deg)
    eye = radius * np.array([math.cos(ph) * math.cos(th), math.cos(ph) * math.sin(th), math.sin(ph)])
    back = eye / np.linalg.norm(eye)
    world_up = np.array([0.0, 0.0, 1.0])
    right = np.cross(world_up, back)
    if np.linalg.norm(right) < 1e-9:  # looking straight down the z axis
        right = np.array([1.0, 0.0, 0.0])
    right /= np.linalg.norm(right)
    up = np.cross(back, right)
    c2w = np.eye(4)
    c2w[:3, 0], c2w[:3, 1], c2w[:3, 2], c2w[:3, 3] = right, up, back, eye
    return c2w


def generate_rays(pose: CameraPose, width: int, height: int) -> tuple[Tensor, Tensor]:
    """Unit-direction rays through every pixel center, row-major.

    Returns ``(origins, directions)`` each of shape ``(height * width, 3)``.
    """
    validate_pose(pose.camera_to_world)
    focal = focal_length(width, pose.camera_angle_x)
    j, i = np.meshgrid(np.arange(height) + 0.5, np.arange(width) + 0.5, indexing="ij")
    dirs = np.stack(
        [(i - 0.5 * width) / focal, -(j - 0.5 * height) / focal, -np.ones_like(i)], axis=-1
    ).reshape(-1, 3)
    rot = pose.camera_to_world[:3, :3]
    dirs = dirs @ rot.T
    dirs /= np.linalg.norm(dirs, axis=-1, keepdims=True)
    origins = np.broadcast_to(pose.origin, dirs.shape)
    return (
        torch.from_numpy(np.ascontiguousarray(origins, dtype=np.float32)),
        torch.from_numpy(dirs.astype(np.float32)),
    )
