"""Cameras, quaternions, and pinhole projection.

Conventions used everywhere in the package:
  * world-to-camera maps are x_cam = R @ x_world + t;
  * quaternions are (w, x, y, z), unit length;
  * pixel centers sit at integer coordinates, u along width, v along height;
  * a pixel (u, v) at depth z backprojects through K^-1 (u, v, 1)^T * z.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidInput


def quat_normalize(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    n = np.linalg.norm(q, axis=-1, keepdims=True)
    if np.any(n < 1e-12):
        raise InvalidInput("zero-length quaternion")
    return q / n


def quat_to_rotmat(q: np.ndarray) -> np.ndarray:
    """Unit quaternion (w,x,y,z) to a 3x3 rotation matrix. Batched over leading dims."""
    q = quat_normalize(q)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    m = np.empty(q.shape[:-1] + (3, 3), dtype=np.float64)
    m[..., 0, 0] = 1 - 2 * (y * y + z * z)
    m[..., 0, 1] = 2 * (x * y - w * z)
    m[..., 0, 2] = 2 * (x * z + w * y)
    m[..., 1, 0] = 2 * (x * y + w * z)
    m[..., 1, 1] = 1 - 2 * (x * x + z * z)
    m[..., 1, 2] = 2 * (y * z - w * x)
    m[..., 2, 0] = 2 * (x * z - w * y)
    m[..., 2, 1] = 2 * (y * z + w * x)
    m[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return m


def rotmat_to_quat(m: np.ndarray) -> np.ndarray:
    """3x3 rotation matrix to unit quaternion (w,x,y,z), w >= 0."""
    m = np.asarray(m, dtype=np.float64)
    t = np.trace(m)
    if t > 0:
        s = np.sqrt(t + 1.0) * 2
        q = np.array([0.25 * s,
                      (m[2, 1] - m[1, 2]) / s,
                      (m[0, 2] - m[2, 0]) / s,
                      (m[1, 0] - m[0, 1]) / s])
    else:
        i = int(np.argmax(np.diag(m)))
        j, k = (i + 1) % 3, (i + 2) % 3
        s = np.sqrt(m[i, i] - m[j, j] - m[k, k] + 1.0) * 2
        q = np.empty(4)
        q[0] = (m[k, j] - m[j, k]) / s
        q[1 + i] = 0.25 * s
        q[1 + j] = (m[j, i] + m[i, j]) / s
        q[1 + k] = (m[k, i] + m[i, k]) / s
    if q[0] < 0:
        q = -q
    return quat_normalize(q)


@dataclass
class CameraView:
    """One calibrated pinhole view."""

    view_id: int
    width: int
    height: int
    fx: float
    fy: float
    cx: float
    cy: float
    r: np.ndarray = field(repr=False)   # (3,3) world-to-camera rotation
    t: np.ndarray = field(repr=False)   # (3,) world-to-camera translation

    def __post_init__(self) -> None:
        self.r = np.asarray(self.r, dtype=np.float64).reshape(3, 3)
        self.t = np.asarray(self.t, dtype=np.float64).reshape(3)
        if self.width <= 0 or self.height <= 0:
            raise InvalidInput(f"view {self.view_id}: non-positive image size")
        if self.fx <= 0 or self.fy <= 0:
            raise InvalidInput(f"view {self.view_id}: non-positive focal length")
        if not (0.0 < self.cx < self.width) or not (0.0 < self.cy < self.height):
            raise InvalidInput(f"view {self.view_id}: principal point outside image")
        if not np.all(np.isfinite(self.r)) or not np.all(np.isfinite(self.t)):
            raise InvalidInput(f"view {self.view_id}: non-finite pose")
        rtr = self.r @ self.r.T
        if not np.allclose(rtr, np.eye(3), atol=1e-6):
            raise InvalidInput(f"view {self.view_id}: rotation not orthonormal")

    @property
    def center(self) -> np.ndarray:
        """Camera center in world coordinates."""
        return -self.r.T @ self.t

    @property
    def kmat(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx],
                         [0.0, self.fy, self.cy],
                         [0.0, 0.0, 1.0]])

    @property
    def kinv(self) -> np.ndarray:
        return np.array([[1.0 / self.fx, 0.0, -self.cx / self.fx],
                         [0.0, 1.0 / self.fy, -self.cy / self.fy],
                         [0.0, 0.0, 1.0]])


def world_to_camera(p: np.ndarray, view: CameraView) -> np.ndarray:
    """Map world points (..., 3) into the camera frame."""
    p = np.asarray(p, dtype=np.float64)
    return p @ view.r.T + view.t


def project(p_cam: np.ndarray, view: CameraView) -> np.ndarray:
    """Project camera-frame points (..., 3) to pixel coordinates (..., 2).

    Points must be strictly in front of the camera (z > 0).
    """
    p_cam = np.asarray(p_cam, dtype=np.float64)
    z = p_cam[..., 2]
    if np.any(z <= 0):
        raise InvalidInput("projection of a point with z <= 0")
    u = view.fx * p_cam[..., 0] / z + view.cx
    v = view.fy * p_cam[..., 1] / z + view.cy
    return np.stack([u, v], axis=-1)


def backproject(uv: np.ndarray, z: np.ndarray, view: CameraView) -> np.ndarray:
    """Lift pixels (..., 2) at camera-frame depth z (...,) to camera-frame points."""
    uv = np.asarray(uv, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    x = (uv[..., 0] - view.cx) / view.fx * z
    y = (uv[..., 1] - view.cy) / view.fy * z
    return np.stack([x, y, z], axis=-1)


def camera_to_world(p_cam: np.ndarray, view: CameraView) -> np.ndarray:
    p_cam = np.asarray(p_cam, dtype=np.float64)
    return (p_cam - view.t) @ view.r


def look_at(center: np.ndarray, target: np.ndarray, up=(0.0, 0.0, 1.0)) -> tuple[np.ndarray, np.ndarray]:
    """World-to-camera (R, t) for a camera at `center` looking at `target`.

    Camera frame: +z forward, +x right, +y down (image v grows with y).
    """
    center = np.asarray(center, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - center
    n = np.linalg.norm(fwd)
    if n < 1e-12:
        raise InvalidInput("look_at target coincides with camera center")
    fwd = fwd / n
    upv = np.asarray(up, dtype=np.float64)
    right = np.cross(fwd, upv)
    rn = np.linalg.norm(right)
    if rn < 1e-9:
        upv = np.array([0.0, 1.0, 0.0])
        right = np.cross(fwd, upv)
        rn = np.linalg.norm(right)
    right = right / rn
    down = np.cross(fwd, right)
    r = np.stack([right, down, fwd], axis=0)
    t = -r @ center
    return r, t
