import numpy as np
import pytest

from egopoint.geometry import CameraIntrinsics, RigidTransform, invert, look_at, project_many
from egopoint.triangulation import PointTrack


@pytest.fixture
def k():
    return CameraIntrinsics.default()


def arc_poses(n=30, radius=0.5, sweep=0.6, target=(0.0, 0.0, 0.0), height=0.3, lateral=None):
    """Camera-to-world poses on a horizontal arc, all looking at ``target``."""
    target = np.asarray(target, dtype=float)
    poses = []
    for s in np.linspace(-0.5, 0.5, n):
        if lateral is None:
            a = sweep * s
            eye = target + np.array([radius * np.sin(a), -radius * np.cos(a), height])
        else:
            eye = target + np.array([lateral * s, -radius, height])
        poses.append(look_at(eye, target))
    return poses


def make_track(point, poses, k, pid=0, sigma=0.0, seed=0, outliers=()):
    """Track of a world point; ``outliers`` maps positions to pixel offsets."""
    rng = np.random.default_rng(seed)
    uv = np.array([project_many(k, invert(p).apply(point)) for p in poses])
    uv = uv + rng.normal(0.0, sigma, uv.shape) if sigma else uv
    for i, off in dict(outliers).items():
        uv[i] = uv[i] + np.asarray(off, dtype=float)
    return PointTrack(pid, tuple(range(len(poses))), uv, tuple(poses))


def random_transform(rng) -> RigidTransform:
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    r = np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
        [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
        [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
    ])
    return RigidTransform(r, rng.uniform(-1, 1, 3))


ACCEPTANCE = pytest.StashKey[dict]()


def record_criterion(config, n, ok, detail):
    """Remember one acceptance line; printed again in the terminal summary."""
    line = f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
    config.stash.setdefault(ACCEPTANCE, {})[n] = line
    tr = config.pluginmanager.get_plugin("terminalreporter")
    if tr is not None:
        tr.write_line("")
        tr.write_line(line)
    return ok


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(ACCEPTANCE, {})
    if lines:
        terminalreporter.section("acceptance criteria")
        for n in sorted(lines):
            terminalreporter.write_line(lines[n])
