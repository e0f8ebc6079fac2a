"""Demonstrations in the unified point space: assembly, filtering,
augmentation and the ``.egd`` corpus format."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import DegenerateHand, EmptyDemo, MalformedFile, VersionMismatch
from .geometry import CameraIntrinsics, RigidTransform, rot_x, rot_y, rot_z
from .hand_action import (
    DEFAULT_GRASP_THRESHOLD,
    FRAME_REPLACEMENT,
    INDEX_TIP,
    THUMB_TIP,
    FrameRecord,
    correct_hand,
    grasp_labels,
)
from .triangulation import PointTrack, TriangulationConfig, triangulate_object

FORMAT_NAME = "egd"
FORMAT_VERSION = 1
ACTION_DIM = 7
MAD_ATOL = 1e-9


@dataclass(frozen=True, eq=False)
class UnifiedState:
    object_points: np.ndarray  # (P, 3)
    proprio: np.ndarray  # (7,) previous action

    def vector(self) -> np.ndarray:
        return np.concatenate([np.asarray(self.object_points).reshape(-1), self.proprio])


@dataclass(frozen=True, eq=False)
class Demonstration:
    """A processed episode.

    Only actions are stored; the state of step ``t`` is the static object
    points plus the action of step ``t - 1`` (step 0 uses its own action).
    """

    task_name: str
    object_points: np.ndarray
    actions: np.ndarray
    frame_indices: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        pts = np.array(self.object_points, dtype=float).reshape(-1, 3)
        act = np.array(self.actions, dtype=float).reshape(-1, ACTION_DIM)
        idx = np.arange(len(act)) if self.frame_indices is None else np.array(self.frame_indices, dtype=np.int64)
        if len(idx) != len(act):
            raise ValueError("frame_indices and actions differ in length")
        if not (np.all(np.isfinite(pts)) and np.all(np.isfinite(act))):
            raise ValueError("non-finite demonstration data")
        for a in (pts, act, idx):
            a.setflags(write=False)
        object.__setattr__(self, "object_points", pts)
        object.__setattr__(self, "actions", act)
        object.__setattr__(self, "frame_indices", idx)
        object.__setattr__(self, "meta", dict(self.meta))

    def __len__(self):
        return len(self.actions)

    @property
    def num_points(self) -> int:
        return len(self.object_points)

    @property
    def proprio(self) -> np.ndarray:
        if not len(self):
            return self.actions.copy()
        return np.vstack([self.actions[:1], self.actions[:-1]])

    @property
    def steps(self) -> list:
        """``(UnifiedState, action)`` pairs."""
        return [(UnifiedState(self.object_points, p), a) for p, a in zip(self.proprio, self.actions)]

    @property
    def midpoints(self) -> np.ndarray:
        return 0.5 * (self.actions[:, 0:3] + self.actions[:, 3:6])

    def take(self, keep) -> "Demonstration":
        keep = np.asarray(keep, dtype=int)
        if len(keep) == 0:
            raise EmptyDemo(f"demonstration {self.meta.get('seed', '?')} has no steps left")
        return replace(self, actions=self.actions[keep], frame_indices=self.frame_indices[keep])

    def equals(self, other: "Demonstration") -> bool:
        return (
            self.task_name == other.task_name
            and np.array_equal(self.object_points, other.object_points)
            and np.array_equal(self.actions, other.actions)
            and np.array_equal(self.frame_indices, other.frame_indices)
            and self.meta == other.meta
        )


@dataclass(frozen=True)
class AugmentConfig:
    rot_range: float = math.pi / 6
    trans_range: float = 0.5
    point_noise_sigma: float = 0.005
    seed: int = 0

    def __post_init__(self):
        if not (0 <= self.rot_range <= math.pi and self.trans_range >= 0 and self.point_noise_sigma >= 0):
            raise ValueError("invalid augmentation config")


def _transitions(gripper) -> np.ndarray:
    g = np.asarray(gripper)
    out = np.zeros(len(g), dtype=bool)
    out[1:] = g[1:] != g[:-1]
    return out


def remove_stationary(demo: Demonstration, min_dist: float = 0.01) -> Demonstration:
    """Drop steps whose fingertip midpoint moved less than ``min_dist`` since
    the last kept step.  Gripper transitions are always kept."""
    if min_dist < 0:
        raise ValueError("min_dist must be non-negative")
    if not len(demo):
        raise EmptyDemo("empty demonstration")
    mids = demo.midpoints
    trans = _transitions(demo.actions[:, 6])
    keep = [0]
    for t in range(1, len(demo)):
        if trans[t] or np.linalg.norm(mids[t] - mids[keep[-1]]) >= min_dist:
            keep.append(t)
    return demo.take(keep)


def subsample(demo: Demonstration, factor: int = 2) -> Demonstration:
    """Keep every ``factor``-th step plus every gripper transition."""
    if factor < 1:
        raise ValueError("factor must be >= 1")
    idx = np.arange(len(demo))
    keep = (idx % factor == 0) | _transitions(demo.actions[:, 6])
    return demo.take(idx[keep])


def fingertip_distance(demo: Demonstration) -> float:
    """Smallest distance between any object point and either fingertip."""
    tips = np.concatenate([demo.actions[:, 0:3], demo.actions[:, 3:6]])
    d = np.linalg.norm(demo.object_points[:, None, :] - tips[None, :, :], axis=-1)
    return float(d.min())


def mad_filter(demos: Sequence[Demonstration]):
    """Split ``demos`` into (kept, discarded) by the fingertip-distance MAD rule.

    A demo is discarded when its object-to-fingertip distance exceeds the
    corpus median by more than one median absolute deviation.
    """
    if len(demos) < 3:
        raise ValueError("mad_filter needs at least 3 demonstrations")
    d = np.array([fingertip_distance(x) for x in demos])
    med = np.median(d)
    mad = np.median(np.abs(d - med))
    # the small absolute slack keeps float-level jitter between otherwise
    # identical demos from counting as deviation
    drop = d > med + mad + MAD_ATOL
    kept = [x for x, bad in zip(demos, drop) if not bad]
    discarded = [x for x, bad in zip(demos, drop) if bad]
    return kept, discarded


def sample_rigid(cfg: AugmentConfig, rng: np.random.Generator) -> RigidTransform:
    a, b, c = rng.uniform(-cfg.rot_range, cfg.rot_range, 3)
    t = rng.uniform(-cfg.trans_range, cfg.trans_range, 3)
    return RigidTransform(rot_x(a) @ rot_y(b) @ rot_z(c), t)


def augment_arrays(points, actions, cfg: AugmentConfig, rng: np.random.Generator):
    """Apply one random rigid map to points and action tips, then point noise."""
    g = sample_rigid(cfg, rng)
    pts = g.apply(points)
    if cfg.point_noise_sigma > 0:
        pts = pts + rng.normal(0.0, cfg.point_noise_sigma, pts.shape)
    act = np.array(actions, dtype=float, copy=True)
    act[..., 0:3] = g.apply(act[..., 0:3])
    act[..., 3:6] = g.apply(act[..., 3:6])
    return pts, act


def augment_episode(demo: Demonstration, cfg: AugmentConfig, rng: np.random.Generator | None = None) -> Demonstration:
    """Rigidly transform the whole episode (points, actions and hence proprio)."""
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    pts, act = augment_arrays(demo.object_points, demo.actions, cfg, rng)
    return replace(demo, object_points=pts, actions=act)


def build_demonstration(
    frames: Sequence[FrameRecord],
    tracks: Sequence[PointTrack],
    k: CameraIntrinsics,
    tri_cfg: TriangulationConfig = TriangulationConfig(),
    grasp_threshold: float = DEFAULT_GRASP_THRESHOLD,
    *,
    seed: int = 0,
    task_name: str = "task",
    correction: str = FRAME_REPLACEMENT,
    grasp_hysteresis: float = 0.0,
    meta: dict | None = None,
) -> Demonstration:
    """Triangulate the object and convert every frame's hand into an action."""
    if not frames:
        raise ValueError("no frames to build a demonstration from")
    t0 = frames[0].camera_pose
    observed = {f.frame_index for f in frames}
    missing = [f for f in tracks[0].frames if f not in observed] if tracks else []
    if missing:
        raise ValueError(f"tracks reference frames without records: {missing[:5]}")
    obj = triangulate_object(tracks, k, tri_cfg, seed, reference=t0)
    tips = np.empty((len(frames), 2, 3))
    for n, rec in enumerate(frames):
        try:
            h = correct_hand(rec, t0, correction)
        except DegenerateHand as e:
            raise DegenerateHand(f"frame {rec.frame_index}: {e}") from e
        tips[n] = h[[THUMB_TIP, INDEX_TIP]]
    gaps = np.linalg.norm(tips[:, 0] - tips[:, 1], axis=1)
    grip = grasp_labels(gaps, grasp_threshold, grasp_hysteresis)
    actions = np.column_stack([tips[:, 0], tips[:, 1], grip])
    info = {"seed": int(seed), "source": "synthetic", "frame_rate": 30.0, "reproj_error": obj.mean_reproj_error}
    info.update(meta or {})
    return Demonstration(task_name, obj.points, actions, [f.frame_index for f in frames], info)


# -- corpus pipeline --------------------------------------------------------


@dataclass
class PipelineReport:
    counts: dict = field(default_factory=dict)
    discarded_seeds: list = field(default_factory=list)
    steps_before: int = 0
    steps_after: int = 0


def process_corpus(demos: Sequence[Demonstration], min_dist: float = 0.01, factor: int = 2):
    """remove_stationary -> subsample -> mad_filter; returns ``(kept, report)``."""
    report = PipelineReport()
    report.counts["built"] = len(demos)
    report.steps_before = int(sum(len(d) for d in demos))
    staged = [subsample(remove_stationary(d, min_dist), factor) for d in demos]
    report.counts["after_stationary_subsample"] = len(staged)
    if len(staged) >= 3:
        kept, dropped = mad_filter(staged)
    else:
        kept, dropped = list(staged), []
    report.counts["mad_discarded"] = len(dropped)
    report.counts["kept"] = len(kept)
    report.discarded_seeds = [d.meta.get("seed") for d in dropped]
    report.steps_after = int(sum(len(d) for d in kept))
    return kept, report


# -- .egd files -------------------------------------------------------------


def _record(demo: Demonstration) -> dict:
    return {
        "task_name": demo.task_name,
        "num_points": demo.num_points,
        "object_points": demo.object_points.reshape(-1).tolist(),
        "actions": demo.actions.reshape(-1).tolist(),
        "frame_indices": demo.frame_indices.tolist(),
        "meta": demo.meta,
    }


def save_demos(path, demos: Iterable[Demonstration], task: str | None = None) -> Path:
    """Write a versioned newline-delimited JSON corpus.

    Floats are written with ``repr`` precision, so reading back is exact.
    """
    demos = list(demos)
    path = Path(path)
    p = demos[0].num_points if demos else 0
    header = {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "task": task or (demos[0].task_name if demos else ""),
        "num_points": p,
        "count": len(demos),
        "units": "m",
        "action_layout": ["thumb_x", "thumb_y", "thumb_z", "index_x", "index_y", "index_z", "gripper"],
    }
    with open(path, "w") as fh:
        fh.write(json.dumps(header) + "\n")
        for d in demos:
            fh.write(json.dumps(_record(d), allow_nan=False) + "\n")
    return path


def load_demos(path) -> list:
    path = Path(path)
    with open(path) as fh:
        lines = fh.read().split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines:
        raise MalformedFile(f"{path}: empty file")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as e:
        raise MalformedFile(f"{path}:1: bad header: {e}") from None
    if not isinstance(header, dict) or header.get("format") != FORMAT_NAME:
        raise MalformedFile(f"{path}:1: not an {FORMAT_NAME} file")
    if header.get("version") != FORMAT_VERSION:
        raise VersionMismatch(f"{path}: file version {header.get('version')!r}, reader version {FORMAT_VERSION}")
    demos = []
    for lineno, line in enumerate(lines[1:], start=2):
        try:
            rec = json.loads(line)
            demos.append(
                Demonstration(
                    rec["task_name"],
                    np.array(rec["object_points"], dtype=float).reshape(rec["num_points"], 3),
                    np.array(rec["actions"], dtype=float).reshape(-1, ACTION_DIM),
                    rec["frame_indices"],
                    rec["meta"],
                )
            )
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
            raise MalformedFile(f"{path}:{lineno}: record {lineno - 1}: {type(e).__name__}: {e}") from None
    if len(demos) != header.get("count"):
        raise MalformedFile(f"{path}: header announces {header.get('count')} records, found {len(demos)}")
    return demos

