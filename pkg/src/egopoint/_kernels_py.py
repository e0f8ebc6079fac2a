"""Pure-numpy reference versions of the hot triangulation kernels.

Camera extrinsics are passed as world-to-camera stacks ``rot (N,3,3)`` and
``trans (N,3)``; intrinsics as ``intr = (fx, fy, cx, cy)``.
"""

import numpy as np

BACKEND = "python"
_MIN_Z = 1e-9


def _to_cam(points, rot, trans):
    # (M,3) x (N,3,3) -> (M,N,3)
    return np.einsum("nij,mj->mni", rot, points) + trans[None, :, :]


def reprojection_errors(points, rot, trans, uv, intr):
    """(M, N) pixel errors; ``inf`` where the point is behind camera n."""
    points = np.atleast_2d(np.asarray(points, dtype=float))
    fx, fy, cx, cy = intr
    pc = _to_cam(points, rot, trans)
    z = pc[..., 2]
    ok = z > _MIN_Z
    zs = np.where(ok, z, 1.0)
    du = fx * pc[..., 0] / zs + cx - uv[None, :, 0]
    dv = fy * pc[..., 1] / zs + cy - uv[None, :, 1]
    err = np.sqrt(du * du + dv * dv)
    err[~ok] = np.inf
    return err


def score_candidates(points, rot, trans, uv, intr, tau):
    """Inlier count (error < tau) and mean inlier error per candidate."""
    err = reprojection_errors(points, rot, trans, uv, intr)
    inl = err < tau
    counts = inl.sum(axis=1)
    sums = np.where(inl, err, 0.0).sum(axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        mean = np.where(counts > 0, sums / np.maximum(counts, 1), np.inf)
    return counts.astype(np.int64), mean


def pairwise_sampson(rot, trans, uv, intr, min_baseline):
    """Symmetric (N, N) Sampson distances; NaN on the diagonal and for
    pairs whose baseline is below ``min_baseline``."""
    fx, fy, cx, cy = intr
    n = rot.shape[0]
    # relative poses for all pairs (i -> j)
    r_ij = np.einsum("jab,icb->ijac", rot, rot)  # R_j R_i^T
    t_ij = trans[None, :, :] - np.einsum("ijab,ib->ija", r_ij, trans)
    tx = np.zeros((n, n, 3, 3))
    tx[..., 0, 1] = -t_ij[..., 2]
    tx[..., 0, 2] = t_ij[..., 1]
    tx[..., 1, 0] = t_ij[..., 2]
    tx[..., 1, 2] = -t_ij[..., 0]
    tx[..., 2, 0] = -t_ij[..., 1]
    tx[..., 2, 1] = t_ij[..., 0]
    e = tx @ r_ij
    kinv = np.array([[1 / fx, 0, -cx / fx], [0, 1 / fy, -cy / fy], [0, 0, 1.0]])
    f = kinv.T[None, None] @ e @ kinv[None, None]
    hi = np.stack([uv[:, 0], uv[:, 1], np.ones(n)], axis=1)
    fxi = np.einsum("ijab,ib->ija", f, hi)  # F u_i, line in image j
    ftxj = np.einsum("ijba,jb->ija", f, hi)  # F^T u_j, line in image i
    alg = np.einsum("ija,ja->ij", fxi, hi)
    denom = fxi[..., 0] ** 2 + fxi[..., 1] ** 2 + ftxj[..., 0] ** 2 + ftxj[..., 1] ** 2
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.abs(alg) / np.sqrt(denom)
    out[np.linalg.norm(t_ij, axis=2) < min_baseline] = np.nan
    np.fill_diagonal(out, np.nan)
    return out


def huber_system(q, rot, trans, uv, intr, delta):
    """Robust cost and IRLS normal equations at ``q``.

    Returns ``(cost, JtWJ, JtWr, errors)`` where ``cost`` is the summed Huber
    loss of the per-frame reprojection error norms.  ``cost`` is ``inf`` when
    ``q`` is behind any camera.
    """
    fx, fy, cx, cy = intr
    q = np.asarray(q, dtype=float)
    pc = rot @ q + trans
    z = pc[:, 2]
    if np.any(z <= _MIN_Z):
        return np.inf, np.zeros((3, 3)), np.zeros(3), np.full(len(z), np.inf)
    x, y = pc[:, 0], pc[:, 1]
    ru = fx * x / z + cx - uv[:, 0]
    rv = fy * y / z + cy - uv[:, 1]
    err = np.sqrt(ru * ru + rv * rv)
    quad = err <= delta
    cost = float(np.where(quad, 0.5 * err * err, delta * (err - 0.5 * delta)).sum())
    w = np.where(quad, 1.0, delta / np.where(quad, 1.0, err))
    # d(pixel)/d(camera point), then chain through rotation
    ju = np.stack([fx / z, np.zeros_like(z), -fx * x / (z * z)], axis=1)
    jv = np.stack([np.zeros_like(z), fy / z, -fy * y / (z * z)], axis=1)
    ju = np.einsum("na,nab->nb", ju, rot)
    jv = np.einsum("na,nab->nb", jv, rot)
    jtj = np.einsum("n,na,nb->ab", w, ju, ju) + np.einsum("n,na,nb->ab", w, jv, jv)
    jtr = np.einsum("n,na->a", w * ru, ju) + np.einsum("n,na->a", w * rv, jv)
    return cost, jtj, jtr, err
