"""Hand keypoints -> unified fingertip actions in the first egocentric frame."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateHand
from .geometry import RigidTransform, invert

WRIST = 0
THUMB_CMC = 1
THUMB_TIP = 4
INDEX_MCP = 5
INDEX_TIP = 8
MIDDLE_MCP = 9
NUM_KEYPOINTS = 21

OPEN = -1.0
CLOSED = 1.0
DEFAULT_GRASP_THRESHOLD = 0.05

FRAME_REPLACEMENT = "frame_replacement"
LITERAL = "literal"


def check_keypoints(h) -> np.ndarray:
    """Validate a (21, 3) keypoint array in meters."""
    h = np.asarray(h, dtype=float)
    if h.shape != (NUM_KEYPOINTS, 3):
        raise ValueError(f"expected (21, 3) keypoints, got {h.shape}")
    if not np.all(np.isfinite(h)):
        raise ValueError("non-finite hand keypoint")
    spread = np.linalg.norm(h[:, None, :] - h[None, :, :], axis=-1).max()
    if spread >= 0.4:
        raise ValueError(f"keypoint spread {spread:.3f} m is not a physical hand")
    return h


@dataclass(frozen=True, eq=False)
class FrameRecord:
    """Per-frame inputs: camera-to-world pose, palm pose in camera, keypoints in camera."""

    frame_index: int
    camera_pose: RigidTransform
    hand_pose: RigidTransform
    keypoints: np.ndarray

    def __post_init__(self):
        kp = check_keypoints(self.keypoints).copy()
        kp.setflags(write=False)
        object.__setattr__(self, "keypoints", kp)


@dataclass(frozen=True, eq=False)
class UnifiedAction:
    thumb_tip: np.ndarray
    index_tip: np.ndarray
    gripper: float

    def __post_init__(self):
        object.__setattr__(self, "thumb_tip", np.asarray(self.thumb_tip, dtype=float).reshape(3))
        object.__setattr__(self, "index_tip", np.asarray(self.index_tip, dtype=float).reshape(3))
        object.__setattr__(self, "gripper", float(self.gripper))
        if not (np.all(np.isfinite(self.vector())) and -1.0 <= self.gripper <= 1.0):
            raise ValueError("action must be finite with gripper in [-1, 1]")

    def vector(self) -> np.ndarray:
        return np.concatenate([self.thumb_tip, self.index_tip, [self.gripper]])

    @classmethod
    def from_vector(cls, v) -> "UnifiedAction":
        v = np.asarray(v, dtype=float)
        return cls(v[0:3], v[3:6], v[6])

    @property
    def midpoint(self) -> np.ndarray:
        return 0.5 * (self.thumb_tip + self.index_tip)


def palm_frame(h) -> RigidTransform:
    """Palm pose from the ThumbCMC/IndexMCP/MiddleMCP centroid and the
    Wrist->MiddleMCP and IndexMCP->MiddleMCP directions (Gram-Schmidt)."""
    h = np.asarray(h, dtype=float)
    wrist, index_mcp, middle_mcp = h[WRIST], h[INDEX_MCP], h[MIDDLE_MCP]
    area = 0.5 * np.linalg.norm(np.cross(index_mcp - wrist, middle_mcp - wrist))
    if area <= 1e-8:
        raise DegenerateHand(f"wrist, index MCP and middle MCP are collinear (area {area:.2e} m^2)")
    e1 = middle_mcp - wrist
    e1 /= np.linalg.norm(e1)
    e3 = np.cross(e1, middle_mcp - index_mcp)
    e3 /= np.linalg.norm(e3)
    e2 = np.cross(e3, e1)
    centroid = (h[THUMB_CMC] + h[INDEX_MCP] + h[MIDDLE_MCP]) / 3.0
    return RigidTransform(np.column_stack([e1, e2, e3]), centroid)


def correction_transform(rec: FrameRecord, t0: RigidTransform, mode: str = FRAME_REPLACEMENT) -> RigidTransform:
    """The single rigid map taking frame keypoints into the first egocentric frame."""
    est_palm = palm_frame(rec.keypoints)
    if mode == FRAME_REPLACEMENT:
        # re-seat the estimated hand on the tracked palm: H_t Ĥ_t^{-1}
        local = rec.hand_pose @ invert(est_palm)
    elif mode == LITERAL:
        local = invert(rec.hand_pose) @ est_palm
    else:
        raise ValueError(f"unknown correction mode {mode!r}")
    return invert(t0) @ rec.camera_pose @ local


def correct_hand(rec: FrameRecord, t0: RigidTransform, mode: str = FRAME_REPLACEMENT) -> np.ndarray:
    """All 21 keypoints of ``rec`` expressed in the first egocentric frame."""
    return correction_transform(rec, t0, mode).apply(rec.keypoints)


def detect_grasp(thumb_tip, index_tip, threshold: float = DEFAULT_GRASP_THRESHOLD) -> float:
    if not threshold > 0:
        raise ValueError("grasp threshold must be positive")
    gap = np.linalg.norm(np.asarray(thumb_tip, dtype=float) - np.asarray(index_tip, dtype=float))
    return CLOSED if gap < threshold else OPEN


def grasp_labels(gaps, threshold: float = DEFAULT_GRASP_THRESHOLD, hysteresis: float = 0.0) -> np.ndarray:
    """Gripper labels for a sequence of tip gaps.

    With ``hysteresis > 0`` the state only closes below ``threshold - h/2``
    and only reopens above ``threshold + h/2``.
    """
    gaps = np.asarray(gaps, dtype=float)
    if hysteresis <= 0:
        return np.where(gaps < threshold, CLOSED, OPEN)
    lo, hi = threshold - 0.5 * hysteresis, threshold + 0.5 * hysteresis
    out = np.empty(len(gaps))
    state = CLOSED if len(gaps) and gaps[0] < threshold else OPEN
    for i, g in enumerate(gaps):
        if state == OPEN and g < lo:
            state = CLOSED
        elif state == CLOSED and g > hi:
            state = OPEN
        out[i] = state
    return out


def extract_action(h_corrected, threshold: float = DEFAULT_GRASP_THRESHOLD) -> UnifiedAction:
    h = np.asarray(h_corrected, dtype=float)
    thumb, index = h[THUMB_TIP], h[INDEX_TIP]
    return UnifiedAction(thumb, index, detect_grasp(thumb, index, threshold))
