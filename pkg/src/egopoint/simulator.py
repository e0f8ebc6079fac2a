"""Synthetic egocentric demonstrations with ground truth, and a point-world env.

World frame: z up, table plane z = 0, workspace centred at the origin.
Cameras follow the vision convention (+z forward, +y down).  Every scene's
tracked points are its object template points followed by the goal marker,
so a policy can see where to place the object.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import UnreachableScene
from .geometry import CameraIntrinsics, RigidTransform, invert, look_at, project_many, rot_z, rotvec_to_matrix, unproject
from .hand_action import (
    CLOSED,
    DEFAULT_GRASP_THRESHOLD,
    INDEX_MCP,
    INDEX_TIP,
    MIDDLE_MCP,
    NUM_KEYPOINTS,
    OPEN,
    THUMB_CMC,
    THUMB_TIP,
    WRIST,
    FrameRecord,
    palm_frame,
)
from .triangulation import PointTrack, calibrate_depth_affine

WORKSPACE = ((-0.3, 0.3), (-0.25, 0.25), (0.0, 0.45))
START_HEIGHT = 0.3
GRASP_HEIGHT = 0.03
OPEN_GAP = 0.09
PINCH_GAP = 0.01

# object templates, relative to the grasp point (first entry)
TEMPLATES = {
    "pick_place": np.array([[0.0, 0.0, 0.0], [0.05, 0.0, -0.02], [0.0, 0.045, 0.03]]),
    "bread_plate": np.array([[0.0, 0.0, 0.0], [0.06, 0.02, -0.015], [-0.03, 0.05, -0.015], [0.02, -0.04, 0.01]]),
}


def _rng(seed, *keys) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, *keys]))


@dataclass(frozen=True, eq=False)
class SceneSpec:
    object_points: np.ndarray
    goal_point: np.ndarray
    workspace: tuple = WORKSPACE
    seed: int = 0
    task_family: str = "pick_place"
    grasp_index: int = 0

    def __post_init__(self):
        object.__setattr__(self, "object_points", np.asarray(self.object_points, dtype=float).reshape(-1, 3))
        object.__setattr__(self, "goal_point", np.asarray(self.goal_point, dtype=float).reshape(3))
        if not (in_box(self.object_points, self.workspace).all() and in_box(self.goal_point, self.workspace)):
            raise ValueError("object and goal points must lie inside the workspace")

    @property
    def grasp_point(self) -> np.ndarray:
        return self.object_points[self.grasp_index]

    @property
    def tracked_points(self) -> np.ndarray:
        """Object template points followed by the goal marker."""
        return np.vstack([self.object_points, self.goal_point])

    @property
    def start_point(self) -> np.ndarray:
        lo, hi = np.asarray(self.workspace).T
        c = 0.5 * (lo + hi)
        return np.array([c[0], c[1], START_HEIGHT])


@dataclass(frozen=True)
class TrackerNoiseModel:
    pixel_sigma: float = 1.0
    lag_alpha: float = 0.2
    outlier_rate: float = 0.0
    outlier_px_range: tuple = (0.0, 1408.0)

    def __post_init__(self):
        if self.pixel_sigma < 0 or not (0 <= self.lag_alpha < 1) or not (0 <= self.outlier_rate < 1):
            raise ValueError("invalid tracker noise model")


PALM_KEYPOINTS = (WRIST, THUMB_CMC, INDEX_MCP, MIDDLE_MCP)


@dataclass(frozen=True)
class HandNoiseModel:
    """Hand-estimator error.  ``planted=True`` draws palm errors of exactly the
    given magnitudes in random directions instead of Gaussian ones.
    ``keypoint_sigma`` jitters the finger joints only; the palm anchor
    keypoints move rigidly with the planted palm error."""

    palm_rot_sigma: float = 0.0
    palm_trans_sigma: float = 0.0
    keypoint_sigma: float = 0.0
    planted: bool = False

    def __post_init__(self):
        if min(self.palm_rot_sigma, self.palm_trans_sigma, self.keypoint_sigma) < 0:
            raise ValueError("hand noise parameters must be non-negative")


def in_box(points, box) -> np.ndarray:
    p = np.asarray(points, dtype=float)
    lo, hi = np.asarray(box, dtype=float).T
    return np.all((p >= lo - 1e-12) & (p <= hi + 1e-12), axis=-1)


def generate_scene(task_family: str = "pick_place", seed: int = 0) -> SceneSpec:
    """Rigid object template at a random yaw/position on the table plus a goal."""
    if task_family not in TEMPLATES:
        raise ValueError(f"unknown task family {task_family!r}; choose from {sorted(TEMPLATES)}")
    rng = _rng(seed, 1)
    template = TEMPLATES[task_family]
    while True:
        yaw = rng.uniform(-math.pi, math.pi)
        pos = np.array([rng.uniform(-0.15, 0.15), rng.uniform(-0.12, 0.12), GRASP_HEIGHT])
        pts = template @ rot_z(yaw).T + pos
        if in_box(pts, WORKSPACE).all():
            break
    while True:
        goal = np.array([rng.uniform(-0.2, 0.2), rng.uniform(-0.15, 0.15), GRASP_HEIGHT])
        if np.linalg.norm(pts - goal, axis=1).min() >= 0.1:
            break
    return SceneSpec(pts, goal, WORKSPACE, int(seed), task_family)


# -- hand model -------------------------------------------------------------


def _canonical_palm():
    """Wrist, ThumbCMC, IndexMCP, MiddleMCP in a frame where palm_frame == identity."""
    wrist = np.array([-0.08, 0.0, 0.0])
    middle = np.array([0.0, 0.0, 0.0])
    index = np.array([-0.004, -0.022, 0.0])
    thumb_cmc = np.array([-0.06, -0.03, -0.012])
    off = (thumb_cmc + index + middle) / 3.0
    return wrist - off, thumb_cmc - off, index - off, middle - off


_WRIST, _THUMB_CMC, _INDEX_MCP, _MIDDLE_MCP = _canonical_palm()
# fingertip midpoint, in palm-local coordinates
TIP_MID_LOCAL = np.array([0.07, -0.035, -0.03])
_PINCH_DIR = np.array([0.0, 1.0, 0.0])


def hand_keypoints_local(gap: float) -> np.ndarray:
    """21 keypoints in the palm frame for a thumb-index gap (meters)."""
    h = np.zeros((NUM_KEYPOINTS, 3))
    h[WRIST], h[THUMB_CMC], h[INDEX_MCP], h[MIDDLE_MCP] = _WRIST, _THUMB_CMC, _INDEX_MCP, _MIDDLE_MCP
    thumb_tip = TIP_MID_LOCAL - 0.5 * gap * _PINCH_DIR
    index_tip = TIP_MID_LOCAL + 0.5 * gap * _PINCH_DIR
    h[THUMB_TIP] = thumb_tip
    h[INDEX_TIP] = index_tip
    for j, w in zip((2, 3), (1 / 3, 2 / 3)):
        h[j] = (1 - w) * _THUMB_CMC + w * thumb_tip
    for j, w in zip((6, 7), (1 / 3, 2 / 3)):
        h[j] = (1 - w) * _INDEX_MCP + w * index_tip
    # middle, ring, little fingers: curled, fixed
    for base, mcp in ((9, _MIDDLE_MCP), (13, _MIDDLE_MCP + [-0.004, 0.02, 0.0]), (17, _MIDDLE_MCP + [-0.012, 0.038, 0.0])):
        if base != 9:
            h[base] = mcp
        for s in range(1, 4):
            h[base + s] = mcp + s * np.array([0.018, 0.0, -0.012])
    return h


# palm orientation in world: fingers forward (+y), palm facing down
PALM_ROTATION = np.column_stack([[0.0, 1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, -1.0]])


@dataclass(frozen=True, eq=False)
class ExpertTrajectory:
    """Ground truth per step, world frame."""

    midpoints: np.ndarray  # (L, 3)
    gaps: np.ndarray  # (L,)
    palm_poses: tuple  # world-frame palm RigidTransforms
    keypoints: np.ndarray  # (L, 21, 3)
    grasp_step: int  # first step with the gripper closed
    release_step: int  # first open step after transport

    def __len__(self):
        return len(self.gaps)

    @property
    def thumb_tips(self) -> np.ndarray:
        return self.keypoints[:, THUMB_TIP]

    @property
    def index_tips(self) -> np.ndarray:
        return self.keypoints[:, INDEX_TIP]

    def actions(self, frame: RigidTransform | None = None, threshold: float = DEFAULT_GRASP_THRESHOLD) -> np.ndarray:
        """(L, 7) unified actions, optionally re-expressed via ``frame`` (world->target)."""
        th, ix = self.thumb_tips, self.index_tips
        if frame is not None:
            th, ix = frame.apply(th), frame.apply(ix)
        g = np.where(self.gaps < threshold, CLOSED, OPEN)
        return np.column_stack([th, ix, g])


def _segment(a, b, speed):
    n = max(1, int(math.ceil(np.linalg.norm(b - a) / speed)))
    s = np.arange(1, n + 1) / n
    return a + s[:, None] * (b - a)


def start_action(start_point, rotation=PALM_ROTATION, frame: RigidTransform | None = None) -> np.ndarray:
    """Open-hand action with the fingertip midpoint at ``start_point``."""
    local = hand_keypoints_local(OPEN_GAP)[[THUMB_TIP, INDEX_TIP]] - TIP_MID_LOCAL
    tips = local @ np.asarray(rotation).T + start_point
    if frame is not None:
        tips = frame.apply(tips)
    return np.concatenate([tips[0], tips[1], [OPEN]])


def scripted_expert(
    scene: SceneSpec,
    speed: float = 0.015,
    approach_height: float = 0.08,
    lift_height: float = 0.1,
    pinch_steps: int = 5,
    threshold: float = DEFAULT_GRASP_THRESHOLD,
    min_pregrasp_steps: int = 30,
) -> ExpertTrajectory:
    """Reach, pinch at the grasp point, carry to the goal, release.

    The hand idles at the start pose long enough that the first closed step
    comes no earlier than ``min_pregrasp_steps`` (the head keeps moving
    meanwhile, which is what triangulation needs).
    """
    if not in_box(scene.goal_point, scene.workspace):
        raise UnreachableScene("goal lies outside the workspace")
    g = scene.grasp_point
    up = np.array([0.0, 0.0, 1.0])
    start = scene.start_point
    reach = [_segment(start, g + approach_height * up, speed), _segment(g + approach_height * up, g, speed)]
    n_move = sum(len(m) for m in reach)
    closing = np.linspace(OPEN_GAP, PINCH_GAP, pinch_steps + 1)[1:]
    first_closed = int(np.argmax(closing < threshold))
    n_idle = max(1, min_pregrasp_steps - n_move - first_closed)
    mids = [np.repeat(start[None], n_idle, axis=0), *reach]
    n_reach = n_idle + n_move
    mids.append(np.repeat(g[None], pinch_steps, axis=0))
    carry = [g, g + lift_height * up, scene.goal_point + lift_height * up, scene.goal_point]
    for a, b in zip(carry, carry[1:]):
        mids.append(_segment(a, b, speed))
    n_carry_end = sum(len(m) for m in mids)
    mids.append(np.repeat(scene.goal_point[None], pinch_steps, axis=0))
    mids = np.vstack(mids)

    gaps = np.full(len(mids), OPEN_GAP)
    gaps[n_reach : n_reach + pinch_steps] = closing
    gaps[n_reach + pinch_steps : n_carry_end] = PINCH_GAP
    gaps[n_carry_end:] = closing[::-1]
    gaps[-1] = OPEN_GAP

    local = [hand_keypoints_local(gp) for gp in gaps]
    poses, kps = [], []
    for m, h in zip(mids, local):
        pose = RigidTransform(PALM_ROTATION, m - PALM_ROTATION @ TIP_MID_LOCAL)
        poses.append(pose)
        kps.append(pose.apply(h))
    closed = gaps < threshold
    grasp_step = int(np.argmax(closed))
    release_step = int(grasp_step + np.argmax(~closed[grasp_step:]))
    return ExpertTrajectory(mids, gaps, tuple(poses), np.array(kps), grasp_step, release_step)


# -- cameras ----------------------------------------------------------------

HEAD_RADIUS = 0.55
HEAD_ELEVATION = math.radians(40.0)


@dataclass(frozen=True)
class ArcConfig:
    n_frames: int = 30
    min_baseline: float = 0.3
    degenerate: bool = False
    azimuth_jitter: float = math.radians(15.0)
    radius_jitter: float = 0.03
    target_jitter: float = 0.03


def sample_head_pose(seed, center=(0.0, 0.0, 0.0), cfg: ArcConfig = ArcConfig(), stream: int = 3):
    """Random first-frame head pose; returns ``(pose, azimuth, radius, target)``."""
    rng = _rng(seed, stream)
    az = rng.uniform(-cfg.azimuth_jitter, cfg.azimuth_jitter)
    radius = HEAD_RADIUS + rng.uniform(-cfg.radius_jitter, cfg.radius_jitter)
    target = np.asarray(center, dtype=float) + rng.uniform(-cfg.target_jitter, cfg.target_jitter, 3) * [1, 1, 0]
    return _head_pose(az, radius, target), az, radius, target


def _head_pose(az, radius, target, lateral=0.0):
    horiz = radius * math.cos(HEAD_ELEVATION)
    eye = target + np.array([horiz * math.sin(az) + lateral, -horiz * math.cos(az), radius * math.sin(HEAD_ELEVATION)])
    return look_at(eye, target)


def camera_arc(scene: SceneSpec, seed: int = 0, cfg: ArcConfig = ArcConfig(), k: CameraIntrinsics | None = None):
    """Camera-to-world poses sweeping around the workspace while looking at it.

    The default sweep has a chord of at least ``cfg.min_baseline`` between its
    first and last pose; ``degenerate=True`` moves the head by at most 1 mm.
    """
    if cfg.n_frames < 2:
        raise ValueError("an arc needs at least two frames")
    _, az0, radius, target = sample_head_pose(seed, cfg=cfg)
    horiz = radius * math.cos(HEAD_ELEVATION)
    s = np.linspace(0.0, 1.0, cfg.n_frames)
    direction = 1.0 if _rng(seed, 4).random() < 0.5 else -1.0
    if cfg.degenerate:
        poses = [_head_pose(az0, radius, target, lateral=direction * 0.0009 * si) for si in s]
    else:
        sweep = 2.0 * math.asin(min(1.0, 1.02 * cfg.min_baseline / (2.0 * horiz)))
        poses = [_head_pose(az0 + direction * sweep * si, radius, target) for si in s]
    if k is not None:
        pts = scene.tracked_points
        for p in poses:
            px = project_many(k, invert(p).apply(pts))
            if not np.all(np.isfinite(px)) or np.any(px < 0) or np.any(px[:, 0] >= k.width) or np.any(px[:, 1] >= k.height):
                raise ValueError("arc loses sight of the tracked points")
    return poses


def baseline(poses) -> float:
    """Largest distance between any two camera centres."""
    c = np.array([p.translation for p in poses])
    return float(np.linalg.norm(c[:, None] - c[None], axis=-1).max())


def synth_tracks(
    scene: SceneSpec,
    arc,
    k: CameraIntrinsics,
    noise: TrackerNoiseModel = TrackerNoiseModel(),
    seed: int = 0,
    frames=None,
    return_truth: bool = False,
):
    """Noisy, lagging 2D tracks of every tracked point over the arc."""
    rng = _rng(seed, 5)
    pts = scene.tracked_points
    frames = list(range(len(arc))) if frames is None else list(frames)
    truth = np.stack([project_many(k, invert(p).apply(pts)) for p in arc], axis=1)  # (P, N, 2)
    tracks, obs_all = [], []
    lo, hi = noise.outlier_px_range
    for pid in range(len(pts)):
        obs = np.empty((len(arc), 2))
        prev = truth[pid, 0]
        for t in range(len(arc)):
            u = noise.lag_alpha * prev + (1.0 - noise.lag_alpha) * truth[pid, t]
            if noise.pixel_sigma > 0:
                u = u + rng.normal(0.0, noise.pixel_sigma, 2)
            prev = u
            obs[t] = u
        if noise.outlier_rate > 0:
            mask = rng.random(len(arc)) < noise.outlier_rate
            obs[mask] = rng.uniform(lo, hi, (int(mask.sum()), 2))
        obs_all.append(obs)
        tracks.append(PointTrack(pid, frames, obs, arc))
    if return_truth:
        return tracks, truth
    return tracks


def corrupt_hand(
    expert: ExpertTrajectory,
    camera_poses,
    noise: HandNoiseModel = HandNoiseModel(),
    seed: int = 0,
):
    """Per frame ``(H_t, Ĥ_t, h_t)`` in camera coordinates.

    ``H_t`` is the exact palm pose; the estimated keypoints ``h_t`` carry a
    rigid palm-frame error shared with ``Ĥ_t`` plus optional i.i.d. keypoint
    noise.
    """
    if len(camera_poses) != len(expert):
        raise ValueError("need one camera pose per expert step")
    rng = _rng(seed, 6)
    out = []
    for t, cam in enumerate(camera_poses):
        h_cam = invert(cam).apply(expert.keypoints[t])
        palm = palm_frame(h_cam)
        if noise.planted:
            axis = rng.normal(size=3)
            rv = noise.palm_rot_sigma * axis / np.linalg.norm(axis)
            d = rng.normal(size=3)
            dt = noise.palm_trans_sigma * d / np.linalg.norm(d)
        else:
            rv = rng.normal(0.0, noise.palm_rot_sigma, 3)
            dt = rng.normal(0.0, noise.palm_trans_sigma, 3)
        delta = RigidTransform(rotvec_to_matrix(rv), dt)
        err = palm @ delta @ invert(palm)  # error applied in the palm frame
        h_est = err.apply(h_cam)
        if noise.keypoint_sigma > 0:
            # articulation noise: the palm anchor keypoints stay rigid with Ĥ_t
            jitter = rng.normal(0.0, noise.keypoint_sigma, h_est.shape)
            jitter[list(PALM_KEYPOINTS)] = 0.0
            h_est = h_est + jitter
        out.append((palm, palm_frame(h_est), h_est))
    return out


# -- episodes ---------------------------------------------------------------


@dataclass(frozen=True)
class EpisodeConfig:
    task_family: str = "pick_place"
    tracker: TrackerNoiseModel = TrackerNoiseModel()
    hand: HandNoiseModel = HandNoiseModel(palm_rot_sigma=0.1, palm_trans_sigma=0.03, keypoint_sigma=0.002)
    min_baseline: float = 0.3
    degenerate_arc: bool = False
    min_track_frames: int = 30


@dataclass(frozen=True, eq=False)
class Episode:
    """Raw simulated demonstration with its ground truth."""

    scene: SceneSpec
    expert: ExpertTrajectory
    camera_poses: tuple
    frames: tuple  # FrameRecord per step
    tracks: tuple  # PointTrack over the pre-grasp frames
    seed: int

    @property
    def t0(self) -> RigidTransform:
        return self.camera_poses[0]

    def true_object_state(self) -> np.ndarray:
        return invert(self.t0).apply(self.scene.tracked_points)

    def true_actions(self, threshold: float = DEFAULT_GRASP_THRESHOLD) -> np.ndarray:
        return self.expert.actions(invert(self.t0), threshold)


def simulate_episode(seed: int, k: CameraIntrinsics | None = None, cfg: EpisodeConfig = EpisodeConfig()) -> Episode:
    k = k or CameraIntrinsics.default()
    scene = generate_scene(cfg.task_family, seed)
    expert = scripted_expert(scene, min_pregrasp_steps=cfg.min_track_frames)
    # object points are static (and tracked) strictly before the grasp
    n_pre = expert.grasp_step
    arc_cfg = ArcConfig(n_frames=n_pre, min_baseline=cfg.min_baseline, degenerate=cfg.degenerate_arc)
    arc = camera_arc(scene, seed, arc_cfg, k)
    # the head keeps still once the arc is done
    cams = list(arc) + [arc[-1]] * (len(expert) - n_pre)
    hand = corrupt_hand(expert, cams, cfg.hand, seed)
    records = tuple(FrameRecord(t, cams[t], hand[t][0], hand[t][2]) for t in range(len(expert)))
    tracks = synth_tracks(scene, arc, k, cfg.tracker, seed)
    return Episode(scene, expert, tuple(cams), records, tuple(tracks), int(seed))


# -- point-world environment ------------------------------------------------


@dataclass(frozen=True, eq=False)
class EnvState:
    """Kinematic point world, expressed in the observing (egocentric) frame."""

    object_points: np.ndarray
    goal_point: np.ndarray
    grasp_index: int
    ee: np.ndarray  # last executed 7-vector action
    attached: bool = False
    offset: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    grasped: bool = False
    t: int = 0

    @property
    def grasp_point(self) -> np.ndarray:
        return self.object_points[self.grasp_index]

    @property
    def tracked_points(self) -> np.ndarray:
        return np.vstack([self.object_points, self.goal_point])


@dataclass(frozen=True)
class EnvConfig:
    attach_radius: float = 0.02
    success_radius: float = 0.02
    horizon: int = 200


def make_env(scene: SceneSpec, camera_pose: RigidTransform, shift=None) -> EnvState:
    """Initial env state seen from ``camera_pose``; ``shift`` translates the
    whole task (object, goal and robot start) in the egocentric frame."""
    to_cam = invert(camera_pose)
    d = np.zeros(3) if shift is None else np.asarray(shift, dtype=float)
    start = start_action(scene.start_point, frame=to_cam)
    start[:6] += np.tile(d, 2)
    return EnvState(
        object_points=to_cam.apply(scene.object_points) + d,
        goal_point=to_cam.apply(scene.goal_point) + d,
        grasp_index=scene.grasp_index,
        ee=start,
    )


def env_step(state: EnvState, action, cfg: EnvConfig = EnvConfig()) -> EnvState:
    a = np.asarray(action, dtype=float).reshape(7)
    if not np.all(np.isfinite(a)):
        raise ValueError("non-finite action")
    closed = a[6] > 0
    was_closed = state.ee[6] > 0
    mid = 0.5 * (a[0:3] + a[3:6])
    obj, attached, offset, grasped = state.object_points, state.attached, state.offset, state.grasped
    if closed and not was_closed and not attached:
        if np.linalg.norm(mid - state.grasp_point) <= cfg.attach_radius:
            attached, offset, grasped = True, obj - mid, True
    elif not closed and attached:
        attached = False
    if attached:
        obj = mid + offset
    return replace(state, object_points=obj, ee=a.copy(), attached=attached, offset=offset, grasped=grasped, t=state.t + 1)


def env_success(trace, scene_or_state=None, cfg: EnvConfig = EnvConfig()) -> bool:
    """Grasp point within ``success_radius`` of the goal, gripper open, after a grasp."""
    final = trace[-1] if isinstance(trace, (list, tuple)) else trace
    return bool(
        final.grasped
        and final.ee[6] <= 0
        and np.linalg.norm(final.grasp_point - final.goal_point) <= cfg.success_radius
    )


def replay(env: EnvState, actions, cfg: EnvConfig = EnvConfig()):
    trace = [env]
    for a in actions:
        trace.append(env_step(trace[-1], a, cfg))
    return trace


# -- monocular depth stand-in -------------------------------------------------


@dataclass(frozen=True)
class DepthWarpModel:
    """Planted depth-estimator error: an affine distortion plus a Gaussian
    bump of ``bump_amplitude`` metres centred on the principal point."""

    scale: float = 1.1
    shift: float = 0.03
    bump_amplitude: float = 0.05
    bump_sigma_px: float = 300.0

    def __call__(self, k: CameraIntrinsics, px, z) -> np.ndarray:
        px = np.atleast_2d(np.asarray(px, dtype=float))
        r2 = (px[:, 0] - k.cx) ** 2 + (px[:, 1] - k.cy) ** 2
        bump = self.bump_amplitude * np.exp(-0.5 * r2 / self.bump_sigma_px**2)
        return self.scale * np.asarray(z, dtype=float) + self.shift + bump


def calibration_tags(k: CameraIntrinsics, n: int = 8, depths=(0.4, 0.8)) -> np.ndarray:
    """Camera-frame positions of ``n`` reference tags near the image border."""
    ang = 2.0 * math.pi * (np.arange(n) + 0.5) / n
    rad = 0.6 * min(k.width, k.height)
    px = np.column_stack([k.cx + rad * np.cos(ang), k.cy + rad * np.sin(ang)])
    z = np.linspace(depths[0], depths[1], n)
    return np.array([unproject(k, p, d) for p, d in zip(px, z)])


def warped_depth_points(points_cam, k: CameraIntrinsics, model: DepthWarpModel = DepthWarpModel(), tags=None):
    """Re-estimate camera-frame points from a warped depth map after affine
    calibration on ``tags``; returns ``(points, fit)``."""
    pts = np.atleast_2d(np.asarray(points_cam, dtype=float))
    tags = calibration_tags(k) if tags is None else np.asarray(tags, dtype=float)
    tag_px = project_many(k, tags)
    fit = calibrate_depth_affine(model(k, tag_px, tags[:, 2]), tags[:, 2])
    px = project_many(k, pts)
    z = fit.scale * model(k, px, pts[:, 2]) + fit.shift
    return np.array([unproject(k, p, d) for p, d in zip(px, z)]), fit
