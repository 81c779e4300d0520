"""Built-in classical matcher: Harris corners, bias/gain-normalized patches, ratio test."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from .errors import TooFewFeatures

MIN_MATCHES = 8


@dataclass(frozen=True)
class FeatureMatch:
    pt_a: tuple[float, float]
    pt_b: tuple[float, float]
    score: float


@dataclass
class MatchSet:
    """Vectorized matches between two images plus keypoint totals."""

    pts_a: np.ndarray  # (N, 2) x, y
    pts_b: np.ndarray
    scores: np.ndarray
    n_keypoints_a: int
    n_keypoints_b: int

    def __len__(self):
        return len(self.pts_a)

    def subset(self, keep: np.ndarray) -> "MatchSet":
        return MatchSet(self.pts_a[keep], self.pts_b[keep], self.scores[keep],
                        self.n_keypoints_a, self.n_keypoints_b)

    def as_list(self) -> list[FeatureMatch]:
        return [FeatureMatch(tuple(map(float, a)), tuple(map(float, b)), float(s))
                for a, b, s in zip(self.pts_a, self.pts_b, self.scores)]

    @classmethod
    def from_list(cls, matches) -> "MatchSet":
        pa = np.array([m.pt_a for m in matches], dtype=np.float64).reshape(-1, 2)
        pb = np.array([m.pt_b for m in matches], dtype=np.float64).reshape(-1, 2)
        sc = np.array([m.score for m in matches], dtype=np.float64)
        return cls(pa, pb, sc, len(pa), len(pb))


def to_gray(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img, dtype=np.float32)
    if img.ndim == 2:
        return img
    return img[..., :3] @ np.array([0.299, 0.587, 0.114], dtype=np.float32)


@dataclass
class ClassicalMatcher:
    """Corner detector + patch descriptor matcher.

    Descriptors are ``desc_size x desc_size`` samples taken every ``desc_step``
    pixels from a blurred copy of the image, then normalized to zero mean and unit
    norm. Matches are mutual nearest neighbours that pass Lowe's ratio test in
    both directions, which makes ``match(a, b)`` the mirror of ``match(b, a)``.
    """

    max_keypoints: int = 1500
    harris_sigma: float = 1.5
    harris_k: float = 0.05
    nms_radius: int = 4
    rel_threshold: float = 1e-5
    desc_size: int = 8
    desc_step: int = 2
    desc_blur: float = 1.2
    ratio: float = 0.8

    @property
    def border(self) -> int:
        return (self.desc_size // 2) * self.desc_step + 1

    def detect(self, gray: np.ndarray, subpixel: bool = False) -> np.ndarray:
        g = ndimage.gaussian_filter(gray.astype(np.float64), 0.7)
        gy = ndimage.sobel(g, axis=0)
        gx = ndimage.sobel(g, axis=1)
        s = self.harris_sigma
        sxx = ndimage.gaussian_filter(gx * gx, s)
        syy = ndimage.gaussian_filter(gy * gy, s)
        sxy = ndimage.gaussian_filter(gx * gy, s)
        R = sxx * syy - sxy * sxy - self.harris_k * (sxx + syy) ** 2
        b = self.border
        R[:b] = R[-b:] = 0
        R[:, :b] = R[:, -b:] = 0
        peak = R == ndimage.maximum_filter(R, size=2 * self.nms_radius + 1)
        rmax = R.max()
        if rmax <= 0:
            return np.zeros((0, 2), dtype=np.int64)
        peak &= R > self.rel_threshold * rmax
        ys, xs = np.nonzero(peak)
        order = np.lexsort((xs, ys, -R[ys, xs]))[: self.max_keypoints]
        kps = np.stack([xs[order], ys[order]], axis=1)
        return self.subpixel(R, kps) if subpixel else kps

    @staticmethod
    def subpixel(R: np.ndarray, kps: np.ndarray) -> np.ndarray:
        """Quadratic peak interpolation of the corner response around integer maxima."""
        x, y = kps[:, 0], kps[:, 1]
        c = R[y, x]
        dx = (R[y, x + 1] - R[y, x - 1]) / 2
        dy = (R[y + 1, x] - R[y - 1, x]) / 2
        dxx = R[y, x + 1] - 2 * c + R[y, x - 1]
        dyy = R[y + 1, x] - 2 * c + R[y - 1, x]
        dxy = (R[y + 1, x + 1] - R[y + 1, x - 1] - R[y - 1, x + 1] + R[y - 1, x - 1]) / 4
        det = dxx * dyy - dxy * dxy
        ok = det > 0
        with np.errstate(divide="ignore", invalid="ignore"):
            ox = np.where(ok, -(dyy * dx - dxy * dy) / det, 0.0)
            oy = np.where(ok, -(dxx * dy - dxy * dx) / det, 0.0)
        ox = np.clip(np.nan_to_num(ox), -0.5, 0.5)
        oy = np.clip(np.nan_to_num(oy), -0.5, 0.5)
        return np.stack([x + ox, y + oy], axis=1)

    def describe(self, gray: np.ndarray, kps: np.ndarray) -> np.ndarray:
        g = ndimage.gaussian_filter(gray.astype(np.float64), self.desc_blur)
        half = self.desc_size // 2
        offs = (np.arange(self.desc_size) - half + 0.5) * self.desc_step
        offs = np.round(offs).astype(np.int64)
        oy, ox = np.meshgrid(offs, offs, indexing="ij")
        ys = kps[:, 1, None] + oy.ravel()[None, :]
        xs = kps[:, 0, None] + ox.ravel()[None, :]
        d = g[ys, xs]
        d -= d.mean(axis=1, keepdims=True)
        n = np.linalg.norm(d, axis=1, keepdims=True)
        return d / np.maximum(n, 1e-8)

    def features(self, img):
        """Subpixel keypoints ``(N, 2)`` and their descriptors."""
        gray = to_gray(img)
        kps = self.detect(gray, subpixel=True)
        if not len(kps):
            return kps.astype(np.float64), np.zeros((0, self.desc_size ** 2))
        return kps, self.describe(gray, np.round(kps).astype(np.int64))

    def _one_way(self, da, db):
        tree = cKDTree(db)
        dist, idx = tree.query(da, k=2)
        ok = dist[:, 0] < self.ratio * dist[:, 1]
        return idx[:, 0], dist[:, 0], ok

    def match_features(self, kps_a, da, kps_b, db) -> MatchSet:
        empty = MatchSet(np.zeros((0, 2)), np.zeros((0, 2)), np.zeros(0), len(kps_a), len(kps_b))
        if len(kps_a) < 2 or len(kps_b) < 2:
            return empty
        ab, dab, okab = self._one_way(da, db)
        ba, _, okba = self._one_way(db, da)
        ia = np.arange(len(kps_a))
        mutual = okab & okba[ab] & (ba[ab] == ia)
        ia = ia[mutual]
        ib = ab[mutual]
        score = 1.0 / (1.0 + dab[mutual])
        return MatchSet(kps_a[ia].astype(np.float64), kps_b[ib].astype(np.float64), score,
                        len(kps_a), len(kps_b))

    def __call__(self, img_a, img_b) -> MatchSet:
        ka, da = self.features(img_a)
        kb, db = self.features(img_b)
        return self.match_features(ka, da, kb, db)


def detect_and_match(a, b, matcher: ClassicalMatcher | None = None,
                     min_matches: int = MIN_MATCHES) -> list[FeatureMatch]:
    """Match two images (``RefImage`` or arrays); raises when fewer than ``min_matches`` survive."""
    matcher = matcher or ClassicalMatcher()
    pa = getattr(a, "pixels", a)
    pb = getattr(b, "pixels", b)
    ms = matcher(pa, pb)
    if len(ms) < min_matches:
        raise TooFewFeatures(f"only {len(ms)} matches survived the ratio test (need {min_matches})")
    return ms.as_list()
