"""Rigid transforms, pinhole projection and two-view epipolar primitives.

All stored camera poses are camera-to-world. World-to-camera is obtained by
inversion where needed.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateBaseline, NonPositiveDepth

_ORTHO_TOL = 1e-9
_REORTHO_DRIFT = 1e-12
MIN_DEPTH = 1e-9
MIN_BASELINE = 1e-9


def _orthonormalize(r: np.ndarray) -> np.ndarray:
    u, _, vt = np.linalg.svd(r)
    out = u @ vt
    if np.linalg.det(out) < 0:
        u[:, -1] *= -1
        out = u @ vt
    return out


@dataclass(frozen=True, eq=False)
class RigidTransform:
    """An SE(3) element acting as ``x -> rotation @ x + translation``."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        r = np.array(self.rotation, dtype=float).reshape(3, 3)
        t = np.array(self.translation, dtype=float).reshape(3)
        if not (np.all(np.isfinite(r)) and np.all(np.isfinite(t))):
            raise ValueError("non-finite rigid transform")
        drift = np.abs(r.T @ r - np.eye(3)).max()
        if drift > 1e-3:
            raise ValueError(f"rotation is not orthonormal (drift {drift:.3g})")
        if np.linalg.det(r) < 0:
            raise ValueError("rotation is a reflection (det < 0)")
        if drift > _REORTHO_DRIFT:
            r = _orthonormalize(r)
        r.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls()

    @classmethod
    def from_matrix(cls, m) -> "RigidTransform":
        m = np.asarray(m, dtype=float)
        return cls(m[:3, :3], m[:3, 3])

    @classmethod
    def from_flat(cls, values) -> "RigidTransform":
        """Inverse of :meth:`flat` (9 row-major rotation values + 3 translation)."""
        v = np.asarray(values, dtype=float)
        if v.shape != (12,):
            raise ValueError(f"expected 12 pose values, got {v.shape}")
        return cls(v[:9].reshape(3, 3), v[9:])

    def flat(self) -> np.ndarray:
        return np.concatenate([self.rotation.reshape(9), self.translation])

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def __matmul__(self, other: "RigidTransform") -> "RigidTransform":
        return compose(self, other)

    def apply(self, points) -> np.ndarray:
        """Transform a single point (3,) or an array of points (..., 3)."""
        p = np.asarray(points, dtype=float)
        return p @ self.rotation.T + self.translation

    def inverse(self) -> "RigidTransform":
        return invert(self)

    def allclose(self, other: "RigidTransform", atol: float = 1e-9) -> bool:
        return bool(
            np.allclose(self.rotation, other.rotation, atol=atol, rtol=0)
            and np.allclose(self.translation, other.translation, atol=atol, rtol=0)
        )

    def __repr__(self):
        return f"RigidTransform(rotation={self.rotation.tolist()}, translation={self.translation.tolist()})"


def compose(a: RigidTransform, b: RigidTransform) -> RigidTransform:
    """Return ``a ∘ b`` so that ``(a∘b)(x) = a(b(x))``."""
    return RigidTransform(a.rotation @ b.rotation, a.rotation @ b.translation + a.translation)


def invert(t: RigidTransform) -> RigidTransform:
    rt = t.rotation.T
    return RigidTransform(rt, -rt @ t.translation)


def transform_point(t: RigidTransform, p) -> np.ndarray:
    p = np.asarray(p, dtype=float)
    if not np.all(np.isfinite(p)):
        raise ValueError("non-finite point")
    return t.rotation @ p + t.translation


def rot_x(angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def rot_y(angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def rot_z(angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def rotvec_to_matrix(v) -> np.ndarray:
    """Rodrigues formula for an axis-angle vector."""
    v = np.asarray(v, dtype=float)
    angle = float(np.linalg.norm(v))
    if angle < 1e-15:
        return np.eye(3)
    k = skew(v / angle)
    return np.eye(3) + np.sin(angle) * k + (1.0 - np.cos(angle)) * (k @ k)


def skew(v) -> np.ndarray:
    x, y, z = np.asarray(v, dtype=float)
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def look_at(eye, target, up=(0.0, 0.0, 1.0)) -> RigidTransform:
    """Camera-to-world pose for a camera at ``eye`` looking at ``target``.

    Camera axes follow the usual vision convention: +z forward, +x right, +y down.
    """
    eye = np.asarray(eye, dtype=float)
    fwd = np.asarray(target, dtype=float) - eye
    fwd /= np.linalg.norm(fwd)
    right = np.cross(fwd, np.asarray(up, dtype=float))
    n = np.linalg.norm(right)
    if n < 1e-9:
        raise ValueError("look_at: up vector parallel to viewing direction")
    right /= n
    down = np.cross(fwd, right)
    return RigidTransform(np.column_stack([right, down, fwd]), eye)


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point outside the image")

    @classmethod
    def default(cls) -> "CameraIntrinsics":
        """1408x1408 image, 700 px focal length, centred principal point."""
        return cls(700.0, 700.0, 704.0, 704.0, 1408, 1408)

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    @property
    def K_inv(self) -> np.ndarray:
        return np.array(
            [
                [1.0 / self.fx, 0.0, -self.cx / self.fx],
                [0.0, 1.0 / self.fy, -self.cy / self.fy],
                [0.0, 0.0, 1.0],
            ]
        )

    def contains(self, px) -> bool:
        px = np.asarray(px, dtype=float)
        return bool(0 <= px[0] < self.width and 0 <= px[1] < self.height)

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.fx, self.fy, self.cx, self.cy)


def project(k: CameraIntrinsics, p_cam) -> np.ndarray:
    """Pinhole projection of a camera-frame point to pixel ``(u, v)``."""
    x, y, z = np.asarray(p_cam, dtype=float)
    if not z > MIN_DEPTH:
        raise NonPositiveDepth(f"point depth {z!r} is not in front of the camera")
    return np.array([k.fx * x / z + k.cx, k.fy * y / z + k.cy])


def project_many(k: CameraIntrinsics, p_cam) -> np.ndarray:
    """Vectorised projection; points with non-positive depth map to NaN."""
    p = np.asarray(p_cam, dtype=float)
    z = p[..., 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = k.fx * p[..., 0] / z + k.cx
        v = k.fy * p[..., 1] / z + k.cy
    out = np.stack([u, v], axis=-1)
    out[z <= MIN_DEPTH] = np.nan
    return out


def unproject(k: CameraIntrinsics, px, depth: float) -> np.ndarray:
    if not depth > 0:
        raise NonPositiveDepth(f"depth {depth!r} must be positive")
    u, v = np.asarray(px, dtype=float)
    return np.array([(u - k.cx) / k.fx * depth, (v - k.cy) / k.fy * depth, float(depth)])


def relative_pose(t_i: RigidTransform, t_j: RigidTransform) -> tuple[np.ndarray, np.ndarray]:
    """``(R_ij, t_ij)`` mapping camera-i coordinates into camera j.

    Built from the world-to-camera extrinsics ``[R_i | t_i] = T_i^{-1}`` as
    ``R_ij = R_j R_i^T`` and ``t_ij = t_j - R_ij t_i``.
    """
    wi, wj = invert(t_i), invert(t_j)
    r_ij = wj.rotation @ wi.rotation.T
    return r_ij, wj.translation - r_ij @ wi.translation


def fundamental_matrix(k: CameraIntrinsics, t_i: RigidTransform, t_j: RigidTransform) -> np.ndarray:
    """F with ``u_j^T F u_i = 0`` for correspondences between frames i and j."""
    r_ij, t_ij = relative_pose(t_i, t_j)
    if np.linalg.norm(t_ij) < MIN_BASELINE:
        raise DegenerateBaseline("camera centres coincide; epipolar geometry undefined")
    k_inv = k.K_inv
    return k_inv.T @ skew(t_ij) @ r_ij @ k_inv


def epipolar_residual(f, u_i, u_j, mode: str = "sampson") -> float:
    """Distance of the pair ``(u_i, u_j)`` to the epipolar constraint.

    ``mode="sampson"`` gives the first-order geometric error in pixels (the
    smallest joint displacement of both points that satisfies the constraint);
    ``mode="symmetric"`` gives the RMS of the two point-to-epipolar-line
    distances; ``mode="algebraic"`` gives ``|u_j^T F u_i|``.
    """
    f = np.asarray(f, dtype=float)
    xi = np.array([u_i[0], u_i[1], 1.0])
    xj = np.array([u_j[0], u_j[1], 1.0])
    alg = float(xj @ f @ xi)
    if mode == "algebraic":
        return abs(alg)
    fx = f @ xi
    ftx = f.T @ xj
    gj = fx[0] ** 2 + fx[1] ** 2
    gi = ftx[0] ** 2 + ftx[1] ** 2
    if mode == "sampson":
        denom = gi + gj
        if denom <= 0:
            return 0.0 if alg == 0 else float("inf")
        return abs(alg) / np.sqrt(denom)
    if mode == "symmetric":
        if gi <= 0 or gj <= 0:
            return 0.0 if alg == 0 else float("inf")
        return abs(alg) * np.sqrt(0.5 * (1.0 / gi + 1.0 / gj))
    raise ValueError(f"unknown residual mode {mode!r}")
