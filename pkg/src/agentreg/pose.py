"""Pinhole projection, PnP solving, and robust pose estimation.

The solver is a 12-parameter direct linear transform on normalized image
coordinates followed by projection onto SO(3) and a short Gauss-Newton
polish of the 6-DoF reprojection error. RANSAC wraps it with standard
hypothesize-and-verify sampling, an adaptive iteration bound from the
confidence level, and a final refit on the consensus set.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import (
    ConfigurationError, DataError, DegenerateConfigurationError,
    EstimationFailureError, InsufficientDataError,
)
from .rng import Rng

_Z_MIN = 1e-6
_ROTATION_TOL = 1e-9


def skew(v: np.ndarray) -> np.ndarray:
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def rodrigues(w: np.ndarray) -> np.ndarray:
    """Exponential map from an axis-angle vector to a rotation matrix."""
    w = np.asarray(w, dtype=np.float64)
    theta = float(np.linalg.norm(w))
    if theta < 1e-14:
        return np.eye(3)
    k = skew(w / theta)
    return np.eye(3) + np.sin(theta) * k + (1.0 - np.cos(theta)) * (k @ k)


def nearest_rotation(m: np.ndarray) -> np.ndarray:
    """Closest proper rotation to a 3x3 matrix (polar decomposition)."""
    u, _, vt = np.linalg.svd(m)
    r = u @ vt
    if np.linalg.det(r) < 0:
        r = u @ np.diag([1.0, 1.0, -1.0]) @ vt
    return r


@dataclass
class RigidTransform:
    rotation: np.ndarray     # (3, 3), member of SO(3)
    translation: np.ndarray  # (3,), meters

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        err = np.max(np.abs(self.rotation.T @ self.rotation - np.eye(3)))
        if err > _ROTATION_TOL or abs(np.linalg.det(self.rotation) - 1.0) > _ROTATION_TOL:
            raise ConfigurationError("rotation must be a proper orthonormal matrix")

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(rotation=np.eye(3), translation=np.zeros(3))

    def apply(self, points: np.ndarray) -> np.ndarray:
        points = np.atleast_2d(np.asarray(points, dtype=np.float64))
        return points @ self.rotation.T + self.translation

    def inverse(self) -> "RigidTransform":
        return RigidTransform(rotation=self.rotation.T,
                              translation=-self.rotation.T @ self.translation)

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """self after other: (self . other)(x) = self(other(x))."""
        return RigidTransform(rotation=self.rotation @ other.rotation,
                              translation=self.rotation @ other.translation
                              + self.translation)

    def as_line(self) -> str:
        vals = list(self.rotation.reshape(-1)) + list(self.translation)
        return " ".join(f"{v:.17g}" for v in vals)

    @classmethod
    def from_line(cls, line: str) -> "RigidTransform":
        vals = [float(tok) for tok in line.split()]
        if len(vals) != 12:
            raise DataError(f"expected 12 values per transform line, got {len(vals)}")
        return cls(rotation=np.array(vals[:9]).reshape(3, 3),
                   translation=np.array(vals[9:]))


def transform_points(points: np.ndarray, t: RigidTransform) -> np.ndarray:
    return t.apply(points)


@dataclass
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ConfigurationError("focal lengths must be positive")


def project(points: np.ndarray, t: RigidTransform,
            k: CameraIntrinsics) -> tuple[np.ndarray, np.ndarray]:
    """Pixel coordinates and validity flags for camera-frame projection.

    A point is valid when its camera-frame depth exceeds z_min; pixel
    values for invalid points are set to zero and must not be used.
    """
    cam = t.apply(points)
    z = cam[:, 2]
    valid = z > _Z_MIN
    safe_z = np.where(valid, z, 1.0)
    u = k.fx * cam[:, 0] / safe_z + k.cx
    v = k.fy * cam[:, 1] / safe_z + k.cy
    uv = np.stack([np.where(valid, u, 0.0), np.where(valid, v, 0.0)], axis=1)
    return uv, valid


def pose_errors(t_est: RigidTransform, t_gt: RigidTransform) -> tuple[float, float]:
    """(rotation error in degrees, translation error in meters)."""
    cos_angle = (np.trace(t_gt.rotation.T @ t_est.rotation) - 1.0) / 2.0
    angle = float(np.degrees(np.arccos(np.clip(cos_angle, -1.0, 1.0))))
    return angle, float(np.linalg.norm(t_est.translation - t_gt.translation))


def _dlt(pixels: np.ndarray, points: np.ndarray, k: CameraIntrinsics):
    n = points.shape[0]
    a = (pixels[:, 0] - k.cx) / k.fx
    b = (pixels[:, 1] - k.cy) / k.fy
    xh = np.hstack([points, np.ones((n, 1))])
    rows = np.zeros((2 * n, 12))
    rows[0::2, 0:4] = xh
    rows[0::2, 8:12] = -a[:, None] * xh
    rows[1::2, 4:8] = xh
    rows[1::2, 8:12] = -b[:, None] * xh
    _, sv, vt = np.linalg.svd(rows, full_matrices=False)
    # One null direction is the solution; a second one means the geometry
    # does not constrain the pose (collinear or coplanar points).
    if sv[10] < 1e-9 * sv[0]:
        raise DegenerateConfigurationError(
            "point configuration is rank deficient for DLT")
    m = vt[-1].reshape(3, 4)
    # Fix the projective sign before touching SO(3): the third row of m
    # carries the (scaled) depths, which must be positive for visible points.
    if float(np.sum(np.sign(xh @ m[2]))) < 0:
        m = -m
    a3 = m[:, :3]
    u, s, vt3 = np.linalg.svd(a3)
    rot = u @ np.diag([1.0, 1.0, np.linalg.det(u @ vt3)]) @ vt3
    scale = float(np.mean(s))
    return rot, m[:, 3] / scale


def _refine(rot, trans, pixels, points, k, max_iters=20, step_tol=1e-10):
    for _ in range(max_iters):
        cam = points @ rot.T + trans
        z = cam[:, 2]
        usable = z > _Z_MIN
        if usable.sum() < 3:
            break
        cam_u = cam[usable]
        zu = cam_u[:, 2]
        proj_u = np.stack([k.fx * cam_u[:, 0] / zu + k.cx,
                           k.fy * cam_u[:, 1] / zu + k.cy], axis=1)
        residual = (proj_u - pixels[usable]).reshape(-1)
        n_u = cam_u.shape[0]
        jac = np.zeros((2 * n_u, 6))
        for i in range(n_u):
            x, y, zz = cam_u[i]
            j_px = np.array([[k.fx / zz, 0.0, -k.fx * x / zz ** 2],
                             [0.0, k.fy / zz, -k.fy * y / zz ** 2]])
            j_cam = np.hstack([-skew(cam_u[i] - trans), np.eye(3)])
            jac[2 * i:2 * i + 2] = j_px @ j_cam
        delta, *_ = np.linalg.lstsq(jac, -residual, rcond=None)
        rot = rodrigues(delta[:3]) @ rot
        trans = trans + delta[3:]
        if np.linalg.norm(delta) < step_tol:
            break
    return nearest_rotation(rot), trans


def solve_pnp(pixels: np.ndarray, points: np.ndarray,
              k: CameraIntrinsics) -> RigidTransform:
    """Pose from >= 6 pixel/3D correspondences: DLT then Gauss-Newton."""
    pixels = np.asarray(pixels, dtype=np.float64).reshape(-1, 2)
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if pixels.shape[0] != points.shape[0]:
        raise InsufficientDataError("pixel and point counts differ")
    if points.shape[0] < 6:
        raise InsufficientDataError(
            f"PnP needs at least 6 correspondences, got {points.shape[0]}")
    rot, trans = _dlt(pixels, points, k)
    rot, trans = _refine(rot, trans, pixels, points, k)
    return RigidTransform(rotation=rot, translation=trans)


@dataclass
class RansacConfig:
    threshold_px: float = 8.0
    max_iters: int = 5000
    confidence: float = 0.999
    min_sample: int = 6


def _count_inliers(t: RigidTransform, pixels, points, k, threshold):
    uv, valid = project(points, t, k)
    err = np.linalg.norm(uv - pixels, axis=1)
    return valid & (err < threshold)


def ransac_pnp(pixels: np.ndarray, points: np.ndarray, k: CameraIntrinsics,
               cfg: RansacConfig, rng: Rng) -> tuple[RigidTransform, np.ndarray]:
    """Robust PnP; returns the pose and its inlier mask.

    Raises EstimationFailureError when no hypothesis reaches min_sample
    inliers. Deterministic for a fixed rng.
    """
    pixels = np.asarray(pixels, dtype=np.float64).reshape(-1, 2)
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    n = points.shape[0]
    if n < cfg.min_sample:
        raise InsufficientDataError(
            f"RANSAC needs at least {cfg.min_sample} correspondences, got {n}")

    best_mask = None
    best_count = 0
    best_pose = None
    needed = cfg.max_iters
    it = 0
    while it < min(cfg.max_iters, needed):
        it += 1
        sample = rng.choice(n, size=cfg.min_sample, replace=False)
        try:
            hypothesis = solve_pnp(pixels[sample], points[sample], k)
        except (DegenerateConfigurationError, InsufficientDataError):
            continue
        mask = _count_inliers(hypothesis, pixels, points, k, cfg.threshold_px)
        count = int(mask.sum())
        if count > best_count:
            best_count = count
            best_mask = mask
            best_pose = hypothesis
            w = count / n
            denom = np.log(max(1.0 - w ** cfg.min_sample, 1e-12))
            if denom < 0:
                needed = int(np.ceil(np.log(1.0 - cfg.confidence) / denom))

    if best_pose is None or best_count < cfg.min_sample:
        raise EstimationFailureError(
            f"no hypothesis reached {cfg.min_sample} inliers "
            f"(best {best_count} of {n})")

    refit = solve_pnp(pixels[best_mask], points[best_mask], k)
    refit_mask = _count_inliers(refit, pixels, points, k, cfg.threshold_px)
    # Keep the hypothesis if the refit loses consensus (best-so-far rule).
    if int(refit_mask.sum()) >= best_count:
        return refit, refit_mask
    return best_pose, best_mask


def save_trajectory(path, transforms) -> None:
    path = Path(path)
    try:
        path.write_text("".join(t.as_line() + "\n" for t in transforms))
    except OSError as exc:
        raise DataError(f"cannot write trajectory {path}: {exc}") from exc


def load_trajectory(path) -> list[RigidTransform]:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise DataError(f"cannot read trajectory {path}: {exc}") from exc
    return [RigidTransform.from_line(line)
            for line in text.splitlines() if line.strip()]


def random_rotation(max_angle_rad: float, rng: Rng) -> np.ndarray:
    """Uniform random axis, uniform angle in [0, max_angle_rad]."""
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    return rodrigues(axis * rng.uniform(0.0, max_angle_rad))
