"""Static object-point triangulation from a tracked 2D point and known poses.

Pipeline per point: pairwise epipolar filtering of frames, RANSAC over
minimal DLT subsets, then a robust (Huber) refinement with a soft penalty on
depth inside a bounding box.  Points are expressed in the reference camera
frame, which is the first pose of the track unless given explicitly.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

from . import kernels
from .errors import (
    DegenerateBaseline,
    DegenerateFit,
    DivergedOutsideBounds,
    EgoPointError,
    InsufficientInliers,
    NoValidCandidate,
    TooFewFrames,
    TriangulationFailed,
)
from .geometry import (
    MIN_BASELINE,
    CameraIntrinsics,
    RigidTransform,
    epipolar_residual,
    fundamental_matrix,
    invert,
)

log = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class PointTrack:
    """One tracked 2D point with the camera-to-world pose of every observation."""

    point_id: int
    frames: tuple
    pixels: np.ndarray
    poses: tuple

    def __post_init__(self):
        frames = tuple(int(f) for f in self.frames)
        pixels = np.array(self.pixels, dtype=float).reshape(-1, 2)
        poses = tuple(self.poses)
        if not (len(frames) == len(pixels) == len(poses)):
            raise ValueError("frames, pixels and poses must have equal length")
        if any(b <= a for a, b in zip(frames, frames[1:])):
            raise ValueError("frame indices must be strictly increasing")
        if not np.all(np.isfinite(pixels)):
            raise ValueError("non-finite pixel observation")
        pixels.setflags(write=False)
        object.__setattr__(self, "frames", frames)
        object.__setattr__(self, "pixels", pixels)
        object.__setattr__(self, "poses", poses)

    def __len__(self):
        return len(self.frames)

    def subset(self, positions) -> "PointTrack":
        pos = list(positions)
        return PointTrack(
            self.point_id,
            [self.frames[i] for i in pos],
            self.pixels[pos],
            [self.poses[i] for i in pos],
        )


@dataclass(frozen=True)
class TriangulationConfig:
    epsilon: float = 2.0
    min_consistent_views: int = 3
    ransac_iters: int = 256
    ransac_subset_k: int = 2
    inlier_tau: float = 4.0
    huber_delta: float = 2.0
    depth_lambda: float = 0.1
    bounds: tuple = ((-2.0, 2.0), (-2.0, 2.0), (0.05, 2.0))
    max_refine_iters: int = 100
    residual_mode: str = "sampson"

    def __post_init__(self):
        b = np.asarray(self.bounds, dtype=float)
        if b.shape != (3, 2) or np.any(b[:, 0] >= b[:, 1]):
            raise ValueError("bounds must be three (low, high) pairs with low < high")
        if not (self.epsilon > 0 and self.inlier_tau > 0 and self.huber_delta > 0):
            raise ValueError("epsilon, inlier_tau and huber_delta must be positive")
        if self.depth_lambda < 0:
            raise ValueError("depth_lambda must be non-negative")
        if self.ransac_subset_k < 2 or self.min_consistent_views < 1:
            raise ValueError("ransac_subset_k >= 2 and min_consistent_views >= 1 required")
        if not b[2, 0] > 0:
            raise ValueError("lower depth bound must be positive")
        if self.residual_mode not in ("sampson", "algebraic", "symmetric"):
            raise ValueError(f"unknown residual mode {self.residual_mode!r}")
        object.__setattr__(self, "bounds", tuple(tuple(float(x) for x in row) for row in b))

    @property
    def lower(self) -> np.ndarray:
        return np.array([r[0] for r in self.bounds])

    @property
    def upper(self) -> np.ndarray:
        return np.array([r[1] for r in self.bounds])

    def replace(self, **changes) -> "TriangulationConfig":
        from dataclasses import replace

        return replace(self, **changes)


@dataclass(frozen=True, eq=False)
class TriangulationResult:
    point: np.ndarray
    inlier_frames: tuple
    mean_inlier_reproj_error: float
    converged: bool
    iterations: int = 0
    objective: float = float("nan")


@dataclass(frozen=True, eq=False)
class ObjectState:
    """Ordered object points (P, 3) in the reference egocentric frame."""

    points: np.ndarray
    point_ids: tuple = ()
    results: tuple = field(default=(), repr=False)

    def __post_init__(self):
        pts = np.array(self.points, dtype=float).reshape(-1, 3)
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)
        if not self.point_ids:
            object.__setattr__(self, "point_ids", tuple(range(len(pts))))

    def __len__(self):
        return len(self.points)

    @property
    def mean_reproj_error(self) -> float:
        if not self.results:
            return float("nan")
        return float(np.mean([r.mean_inlier_reproj_error for r in self.results]))


class AffineDepthFit(NamedTuple):
    scale: float
    shift: float
    rms: float


def huber(r, delta: float):
    """Huber loss of a residual magnitude: quadratic inside ``delta``, linear outside."""
    a = np.abs(np.asarray(r, dtype=float))
    out = np.where(a <= delta, 0.5 * a * a, delta * (a - 0.5 * delta))
    return out if out.ndim else float(out)


def _extrinsics(track: PointTrack, reference: RigidTransform | None):
    """World-to-camera stacks with the reference pose as world origin."""
    ref_inv = invert(reference if reference is not None else track.poses[0])
    rot = np.empty((len(track), 3, 3))
    trans = np.empty((len(track), 3))
    for n, pose in enumerate(track.poses):
        # (ref^-1 T_n)^-1 = T_n^-1 ref
        rel = ref_inv @ pose
        rot[n] = rel.rotation.T
        trans[n] = -rel.rotation.T @ rel.translation
    return rot, trans


def _intr(k: CameraIntrinsics) -> np.ndarray:
    return np.array(k.as_tuple(), dtype=float)


def _positions(track: PointTrack, frames) -> np.ndarray:
    lookup = {f: i for i, f in enumerate(track.frames)}
    try:
        return np.array(sorted(lookup[f] for f in frames), dtype=int)
    except KeyError as e:
        raise ValueError(f"frame {e.args[0]} is not observed in track {track.point_id}") from None


def filter_epipolar(
    track: PointTrack, k: CameraIntrinsics, cfg: TriangulationConfig, reference: RigidTransform | None = None
) -> tuple:
    """Frames whose observation is epipolar-consistent with at least ``m`` other frames."""
    if len(track) < 2:
        raise TooFewFrames(f"track {track.point_id} has {len(track)} observation(s); need >= 2")
    if cfg.residual_mode == "sampson":
        rot, trans = _extrinsics(track, reference)
        res = kernels.pairwise_sampson(rot, trans, track.pixels, _intr(k), MIN_BASELINE)
    else:
        n = len(track)
        res = np.full((n, n), np.nan)
        for i in range(n):
            for j in range(i + 1, n):
                try:
                    f = fundamental_matrix(k, track.poses[i], track.poses[j])
                except DegenerateBaseline:
                    continue
                res[i, j] = res[j, i] = epipolar_residual(f, track.pixels[i], track.pixels[j], cfg.residual_mode)
    with np.errstate(invalid="ignore"):
        consistent = (res < cfg.epsilon).sum(axis=1)
    return tuple(f for f, c in zip(track.frames, consistent) if c >= cfg.min_consistent_views)


def dlt_triangulate(rot, trans, uv, intr) -> np.ndarray:
    """Homogeneous linear triangulation, batched over a leading axis.

    ``rot (..., n, 3, 3)``, ``trans (..., n, 3)``, ``uv (..., n, 2)`` ->
    points ``(..., 3)`` (NaN where the solution is at infinity).
    """
    fx, fy, cx, cy = intr
    xn = (uv[..., 0] - cx) / fx
    yn = (uv[..., 1] - cy) / fy
    proj = np.concatenate([rot, trans[..., None]], axis=-1)  # (..., n, 3, 4)
    rows_u = xn[..., None] * proj[..., 2, :] - proj[..., 0, :]
    rows_v = yn[..., None] * proj[..., 2, :] - proj[..., 1, :]
    a = np.concatenate([rows_u, rows_v], axis=-2)
    _, _, vt = np.linalg.svd(a)
    h = vt[..., -1, :]
    with np.errstate(invalid="ignore", divide="ignore"):
        pts = h[..., :3] / h[..., 3:4]
    pts[np.abs(h[..., 3]) < 1e-12] = np.nan
    return pts


def ransac_triangulate(
    track: PointTrack,
    inliers,
    k: CameraIntrinsics,
    cfg: TriangulationConfig,
    seed: int = 0,
    reference: RigidTransform | None = None,
) -> np.ndarray:
    """Best DLT candidate over random ``k``-subsets of the inlier frames."""
    pos = _positions(track, inliers)
    if len(pos) < cfg.ransac_subset_k or len(pos) < 2:
        raise InsufficientInliers(
            f"track {track.point_id}: {len(pos)} inlier frame(s), need >= {max(2, cfg.ransac_subset_k)}"
        )
    rot, trans = _extrinsics(track, reference)
    rot, trans, uv = rot[pos], trans[pos], track.pixels[pos]
    intr = _intr(k)
    rng = np.random.default_rng(seed)
    kk = cfg.ransac_subset_k
    subsets = np.argsort(rng.random((cfg.ransac_iters, len(pos))), axis=1)[:, :kk]
    cands = dlt_triangulate(rot[subsets], trans[subsets], uv[subsets], intr)
    # reject candidates behind any camera of their own subset
    depth = np.einsum("mnj,mj->mn", rot[subsets][..., 2, :], cands) + trans[subsets][..., 2]
    valid = np.all(np.isfinite(cands), axis=1) & np.all(depth > 0, axis=1)
    if not np.any(valid):
        raise NoValidCandidate(f"track {track.point_id}: every RANSAC candidate is degenerate")
    cands = np.clip(cands[valid], cfg.lower, cfg.upper)
    counts, mean_err = kernels.score_candidates(cands, rot, trans, uv, intr, cfg.inlier_tau)
    # most inliers first, then lowest mean inlier error, then first drawn
    best = np.lexsort((np.arange(len(counts)), mean_err, -counts))[0]
    if counts[best] < 2:
        raise NoValidCandidate(f"track {track.point_id}: best candidate has {counts[best]} supporting frame(s)")
    return cands[best].copy()


def _objective(q, rot, trans, uv, intr, cfg):
    cost, jtj, jtr, err = kernels.huber_system(q, rot, trans, uv, intr, cfg.huber_delta)
    return cost + cfg.depth_lambda * q[2], jtj, jtr, err


def refine_huber_depth(
    q0,
    track: PointTrack,
    inliers,
    k: CameraIntrinsics,
    cfg: TriangulationConfig,
    reference: RigidTransform | None = None,
) -> TriangulationResult:
    """Minimise summed Huber reprojection error plus ``lambda * z`` inside the box.

    Damped Gauss-Newton on IRLS weights.  Coordinates sitting on a bound with
    the gradient pointing outwards are held fixed (active set); the remaining
    step is projected back into the box when it leaves it.
    """
    pos = _positions(track, inliers)
    if len(pos) < 2:
        raise InsufficientInliers(f"track {track.point_id}: need >= 2 inlier frames to refine")
    rot, trans = _extrinsics(track, reference)
    rot, trans, uv = rot[pos], trans[pos], track.pixels[pos]
    intr = _intr(k)
    lo, hi = cfg.lower, cfg.upper
    q = np.asarray(q0, dtype=float).copy()
    if np.any(q < lo) or np.any(q > hi):
        raise ValueError("initial point lies outside the bounding box")
    lam_vec = np.array([0.0, 0.0, cfg.depth_lambda])

    f, jtj, jtr, err = _objective(q, rot, trans, uv, intr, cfg)
    if not np.isfinite(f):
        raise NoValidCandidate(f"track {track.point_id}: initial point is behind a camera")
    mu = 1e-4 * max(np.trace(jtj) / 3.0, 1e-12)
    converged = False
    projected = 0
    iters = 0
    for iters in range(1, cfg.max_refine_iters + 1):
        g = jtr + lam_vec
        free = ~(((q <= lo) & (g > 0)) | ((q >= hi) & (g < 0)))
        if np.linalg.norm(g[free]) < 1e-8:
            converged = True
            break
        accepted = False
        for _ in range(30):
            step = np.zeros(3)
            h = jtj[np.ix_(free, free)] + mu * np.eye(int(free.sum()))
            step[free] = -np.linalg.solve(h, g[free])
            cand = np.clip(q + step, lo, hi)
            f_new, jtj_n, jtr_n, err_n = _objective(cand, rot, trans, uv, intr, cfg)
            if f_new <= f:
                clipped = bool(np.any(cand != q + step))
                accepted = True
                break
            mu *= 4.0
        if not accepted:
            # no descent possible at machine precision
            converged = True
            break
        projected += clipped
        moved = float(np.linalg.norm(cand - q))
        q, f, jtj, jtr, err = cand, f_new, jtj_n, jtr_n, err_n
        mu = max(mu / 3.0, 1e-12)
        if moved < 1e-8:
            converged = True
            break
    if iters >= 4 and projected > 0.5 * iters:
        raise DivergedOutsideBounds(
            f"track {track.point_id}: iterate projected onto bounds in {projected}/{iters} iterations"
        )
    return TriangulationResult(
        point=q,
        inlier_frames=tuple(track.frames[i] for i in pos),
        mean_inlier_reproj_error=float(np.mean(err)),
        converged=converged,
        iterations=iters,
        objective=float(f),
    )


def triangulate_point(
    track: PointTrack,
    k: CameraIntrinsics,
    cfg: TriangulationConfig,
    seed: int = 0,
    reference: RigidTransform | None = None,
) -> TriangulationResult:
    inl = filter_epipolar(track, k, cfg, reference)
    q0 = ransac_triangulate(track, inl, k, cfg, seed, reference)
    return refine_huber_depth(q0, track, inl, k, cfg, reference)


def triangulate_object(
    tracks: Sequence[PointTrack],
    k: CameraIntrinsics,
    cfg: TriangulationConfig,
    seed: int = 0,
    reference: RigidTransform | None = None,
) -> ObjectState:
    """Triangulate every track and stack the points ordered by ``point_id``."""
    if not tracks:
        raise ValueError("no tracks to triangulate")
    ids = [t.point_id for t in tracks]
    if len(set(ids)) != len(ids):
        raise ValueError("point_ids must be unique")
    frames0 = tracks[0].frames
    for t in tracks[1:]:
        if t.frames != frames0:
            raise ValueError(f"track {t.point_id} does not share the frame set of track {tracks[0].point_id}")
    ref = reference if reference is not None else tracks[0].poses[0]
    results, failures = {}, {}
    for t in sorted(tracks, key=lambda t: t.point_id):
        point_seed = int(np.random.SeedSequence([int(seed), int(t.point_id) & 0xFFFFFFFF]).generate_state(1)[0])
        try:
            results[t.point_id] = triangulate_point(t, k, cfg, point_seed, ref)
        except EgoPointError as e:
            failures[t.point_id] = e
    if failures:
        raise TriangulationFailed(failures)
    order = sorted(results)
    res = tuple(results[i] for i in order)
    obj = ObjectState(np.array([r.point for r in res]), tuple(order), res)
    log.debug("triangulated %d points, mean reprojection error %.3f px", len(obj), obj.mean_reproj_error)
    return obj


def calibrate_depth_affine(estimated, reference) -> AffineDepthFit:
    """Least-squares ``(a, b)`` minimising ``sum (a*d + b - z)^2``."""
    d = np.asarray(estimated, dtype=float)
    z = np.asarray(reference, dtype=float)
    if d.shape != z.shape or d.ndim != 1 or len(d) < 2:
        raise ValueError("need two equal-length 1-D depth lists with >= 2 entries")
    var = d.var()
    if var < 1e-12:
        raise DegenerateFit("estimated depths have (near) zero variance")
    a = float(((d - d.mean()) * (z - z.mean())).mean() / var)
    b = float(z.mean() - a * d.mean())
    rms = float(np.sqrt(np.mean((a * d + b - z) ** 2)))
    return AffineDepthFit(a, b, rms)
