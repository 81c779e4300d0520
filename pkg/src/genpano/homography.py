"""Robust homography fitting: Hartley-normalized DLT inside adaptive RANSAC."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import least_squares

from .errors import DegenerateConfiguration, TooFewInliers
from .features import MatchSet


@dataclass(frozen=True)
class RansacConfig:
    threshold: float = 3.0
    confidence: float = 0.999
    max_iters: int = 5000
    min_inliers: int = 8
    seed: int = 0
    refine: bool = True


def normalize_h(H: np.ndarray) -> np.ndarray:
    H = np.asarray(H, dtype=np.float64)
    if abs(H[2, 2]) > 1e-12:
        H = H / H[2, 2]
    return H


def transfer(H: np.ndarray, pts: np.ndarray) -> np.ndarray:
    pts = np.asarray(pts, dtype=np.float64)
    ph = pts @ H[:, :2].T + H[:, 2]
    return ph[:, :2] / ph[:, 2:3]


def _hartley(pts):
    c = pts.mean(axis=0)
    d = np.sqrt(((pts - c) ** 2).sum(axis=1)).mean()
    s = np.sqrt(2) / d if d > 0 else 1.0
    return np.array([[s, 0, -s * c[0]], [0, s, -s * c[1]], [0, 0, 1.0]])


def _collinear(pts, tol=1e-9) -> bool:
    c = pts - pts.mean(axis=0)
    sv = np.linalg.svd(c, compute_uv=False)
    return sv[-1] <= tol * max(sv[0], 1.0)


def dlt(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """Homography mapping ``src`` to ``dst`` (least squares for more than 4 points)."""
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    if len(src) < 4:
        raise DegenerateConfiguration("need at least 4 correspondences")
    if _collinear(src) or _collinear(dst):
        raise DegenerateConfiguration("correspondences are collinear")
    Ts, Td = _hartley(src), _hartley(dst)
    s = src @ Ts[:2, :2].T + Ts[:2, 2]
    d = dst @ Td[:2, :2].T + Td[:2, 2]
    n = len(s)
    A = np.zeros((2 * n, 9))
    A[0::2, 0:2] = s
    A[0::2, 2] = 1
    A[0::2, 6:8] = -d[:, :1] * s
    A[0::2, 8] = -d[:, 0]
    A[1::2, 3:5] = s
    A[1::2, 5] = 1
    A[1::2, 6:8] = -d[:, 1:2] * s
    A[1::2, 8] = -d[:, 1]
    _, sv, vt = np.linalg.svd(A)
    Hn = vt[-1].reshape(3, 3)
    H = normalize_h(np.linalg.inv(Td) @ Hn @ Ts)
    if not np.all(np.isfinite(H)) or abs(np.linalg.det(H)) < 1e-12:
        raise DegenerateConfiguration("singular homography")
    return H


def reprojection_errors(H, src, dst) -> np.ndarray:
    with np.errstate(divide="ignore", invalid="ignore"):
        e = np.linalg.norm(transfer(H, src) - dst, axis=1)
    return np.where(np.isfinite(e), e, np.inf)


def refine_lm(H, src, dst, robust_scale: float | None = None) -> np.ndarray:
    """Minimize forward transfer error (pixels) over the 8 free entries.

    Optimizes in Hartley-normalized coordinates for conditioning. With
    ``robust_scale`` the residuals go through a soft-L1 loss of that scale.
    """
    if len(src) <= 4:
        return normalize_h(H)
    Ts, Td = _hartley(src), _hartley(dst)
    sn = src @ Ts[:2, :2].T + Ts[:2, 2]
    dn = dst @ Td[:2, :2].T + Td[:2, 2]
    Hn = Td @ normalize_h(H) @ np.linalg.inv(Ts)
    Hn = Hn / Hn[2, 2]
    pix = 1.0 / Td[0, 0]

    def resid(h):
        Hc = np.append(h, 1.0).reshape(3, 3)
        return (transfer(Hc, sn) - dn).ravel() * pix

    h0 = Hn.ravel()[:8]
    if robust_scale is None:
        sol = least_squares(resid, h0, method="lm", xtol=1e-14, ftol=1e-14)
    else:
        sol = least_squares(resid, h0, method="trf", loss="soft_l1", f_scale=robust_scale,
                            xtol=1e-14, ftol=1e-14)
    Hn = np.append(sol.x, 1.0).reshape(3, 3)
    return normalize_h(np.linalg.inv(Td) @ Hn @ Ts)


def _iterations_needed(inlier_ratio, confidence, cap):
    if inlier_ratio <= 0:
        return cap
    p = inlier_ratio ** 4
    if p >= 1:
        return 1
    return min(cap, int(np.ceil(np.log(1 - confidence) / np.log(1 - p))))


def estimate_homography(matches, config: RansacConfig = RansacConfig()):
    """Fit ``H`` (a -> b) robustly; returns ``(H, inlier_mask)``.

    ``matches`` is a :class:`MatchSet` or a list of ``FeatureMatch``. The best
    RANSAC hypothesis is refit on its inliers, alternating refit and re-scoring
    while the inlier count grows, then polished with Levenberg-Marquardt.
    """
    ms = matches if isinstance(matches, MatchSet) else MatchSet.from_list(matches)
    src, dst = ms.pts_a, ms.pts_b
    n = len(src)
    if n < 4:
        raise TooFewInliers(f"need at least 4 matches, got {n}")
    if n == 4:
        H = dlt(src, dst)
        return H, reprojection_errors(H, src, dst) <= config.threshold

    rng = np.random.default_rng(config.seed)
    best_H, best_count, best_err = None, -1, np.inf
    needed, it = config.max_iters, 0
    while it < needed:
        it += 1
        idx = rng.choice(n, 4, replace=False)
        try:
            H = dlt(src[idx], dst[idx])
        except DegenerateConfiguration:
            continue
        err = reprojection_errors(H, src, dst)
        count = int((err <= config.threshold).sum())
        # MSAC: truncated quadratic cost
        cost = float((np.minimum(err, config.threshold) ** 2).sum())
        if cost < best_err:
            best_H, best_count, best_err = H, count, cost
            needed = _iterations_needed(count / n, config.confidence, config.max_iters)
    if best_H is None:
        raise DegenerateConfiguration("every minimal sample was degenerate")

    H = best_H
    inliers = reprojection_errors(H, src, dst) <= config.threshold
    while True:
        if inliers.sum() < 4:
            break
        try:
            H_new = dlt(src[inliers], dst[inliers])
        except DegenerateConfiguration:
            break
        inl_new = reprojection_errors(H_new, src, dst) <= config.threshold
        if inl_new.sum() < inliers.sum() or np.array_equal(inl_new, inliers):
            if inl_new.sum() >= inliers.sum():
                H, inliers = H_new, inl_new
            break
        H, inliers = H_new, inl_new
    if config.refine and inliers.sum() > 4:
        H_ref = refine_lm(H, src[inliers], dst[inliers], robust_scale=config.threshold / 3)
        inl_ref = reprojection_errors(H_ref, src, dst) <= config.threshold
        if inl_ref.sum() >= inliers.sum():
            H, inliers = H_ref, inl_ref
    if inliers.sum() < min(config.min_inliers, n):
        raise TooFewInliers(f"only {int(inliers.sum())} inliers")
    return normalize_h(H), inliers


def corner_transfer_error(H_est, H_true, w, h) -> float:
    """Max distance between the image corners mapped by two homographies."""
    corners = np.array([[0, 0], [w, 0], [w, h], [0, h]], dtype=np.float64)
    return float(np.linalg.norm(transfer(H_est, corners) - transfer(H_true, corners), axis=1).max())


def focals_from_homography(H: np.ndarray):
    """Brown-Lowe focal heuristic for principal-point-centered homographies.

    Returns ``(f0, f1)``, each ``None`` when its estimate is not real.
    """
    h = normalize_h(H).ravel()
    f0 = f1 = None
    d1 = h[6] * h[7]
    d2 = (h[7] - h[6]) * (h[7] + h[6])
    v1 = -(h[0] * h[1] + h[3] * h[4]) / d1 if d1 != 0 else -1
    v2 = (h[0] * h[0] + h[3] * h[3] - h[1] * h[1] - h[4] * h[4]) / d2 if d2 != 0 else -1
    if v1 < v2:
        v1, v2 = v2, v1
    if v1 > 0 and v2 > 0:
        f1 = np.sqrt(v1 if abs(d1) > abs(d2) else v2)
    elif v1 > 0:
        f1 = np.sqrt(v1)
    d1 = h[0] * h[3] + h[1] * h[4]
    d2 = h[0] * h[0] + h[1] * h[1] - h[3] * h[3] - h[4] * h[4]
    v1 = -h[2] * h[5] / d1 if d1 != 0 else -1
    v2 = (h[5] * h[5] - h[2] * h[2]) / d2 if d2 != 0 else -1
    if v1 < v2:
        v1, v2 = v2, v1
    if v1 > 0 and v2 > 0:
        f0 = np.sqrt(v1 if abs(d1) > abs(d2) else v2)
    elif v1 > 0:
        f0 = np.sqrt(v1)
    return f0, f1


def rotation_homography(rotvec, K_a, K_b) -> np.ndarray:
    from scipy.spatial.transform import Rotation

    R = Rotation.from_rotvec(rotvec).as_matrix()
    return normalize_h(K_b @ R @ np.linalg.inv(K_a))


def fit_rotation(H, src, dst, K_a, K_b, robust_scale: float = 1.0) -> np.ndarray:
    """Project ``H`` onto the rotating-camera family ``K_b R K_a^-1`` and refine ``R``.

    Three degrees of freedom instead of eight; appropriate when the views share
    a camera center and the intrinsics are known.
    """
    from scipy.spatial.transform import Rotation

    M = np.linalg.inv(K_b) @ normalize_h(H) @ K_a
    M = M / np.cbrt(np.linalg.det(M))
    U, _, Vt = np.linalg.svd(M)
    R0 = U @ Vt
    if np.linalg.det(R0) < 0:
        R0 = U @ np.diag([1, 1, -1]) @ Vt
    r0 = Rotation.from_matrix(R0).as_rotvec()

    def resid(r):
        return (transfer(rotation_homography(r, K_a, K_b), src) - dst).ravel()

    sol = least_squares(resid, r0, loss="soft_l1", f_scale=robust_scale, xtol=1e-14, ftol=1e-14)
    return rotation_homography(sol.x, K_a, K_b)
