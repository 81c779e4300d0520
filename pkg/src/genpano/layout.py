"""Coarse panorama layout: pairwise homographies, spanning-tree composition,
cylindrical warping into sparse panoramas, and similarity perturbations."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import cv2
import numpy as np

from .errors import ArtifactIOError, DegenerateConfiguration, DisconnectedGraph, TooFewFeatures, TooFewInliers
from .features import ClassicalMatcher
from .homography import (RansacConfig, estimate_homography, fit_rotation, focals_from_homography,
                         normalize_h)
from .scene_io import load_panorama, save_panorama

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class PanoramaFrame:
    """Cylindrical panorama coordinate frame anchored on the center reference."""

    dims: tuple[int, int]              # (H_pano, W_pano)
    focal: float
    principal_point: tuple[float, float]  # center image (cx, cy)
    offset: tuple[float, float]        # panorama coords of the principal point

    def plane_to_pano(self, u, v):
        cx, cy = self.principal_point
        du, dv = np.asarray(u, float) - cx, np.asarray(v, float) - cy
        theta = np.arctan2(du, self.focal)
        h = dv / np.hypot(du, self.focal)
        return self.offset[0] + self.focal * theta, self.offset[1] + self.focal * h

    def pano_to_plane(self, X, Y):
        cx, cy = self.principal_point
        theta = (np.asarray(X, float) - self.offset[0]) / self.focal
        h = (np.asarray(Y, float) - self.offset[1]) / self.focal
        with np.errstate(invalid="ignore", divide="ignore"):
            u = cx + self.focal * np.tan(theta)
            v = cy + self.focal * h / np.cos(theta)
        front = np.abs(theta) < np.pi / 2
        return np.where(front, u, np.nan), np.where(front, v, np.nan)


@dataclass
class SparsePanorama:
    canvas: np.ndarray      # (H, W, 3) float32, zero where invalid
    valid: np.ndarray       # (H, W) bool
    source_id: str
    placement: np.ndarray   # 3x3, reference pixels -> center image plane
    frame: PanoramaFrame | None = None

    @property
    def dims(self) -> tuple[int, int]:
        return self.valid.shape


@dataclass(frozen=True)
class SimilarityPerturbation:
    rotation: float = 0.0   # radians
    scale: float = 1.0
    translation: tuple[float, float] = (0.0, 0.0)
    seed: int = 0

    def is_identity(self) -> bool:
        return self.rotation == 0 and self.scale == 1 and tuple(self.translation) == (0, 0)


@dataclass(frozen=True)
class PerturbationBounds:
    max_rotation: float = np.deg2rad(2.0)
    scale_range: tuple[float, float] = (0.97, 1.03)
    max_translation: float = 0.02  # fraction of each panorama dimension

    def __post_init__(self):
        lo, hi = self.scale_range
        if not 0 < lo <= hi:
            raise ValueError(f"invalid scale range {self.scale_range}")

    def sample(self, rng: np.random.Generator, dims) -> SimilarityPerturbation:
        H, W = dims
        return SimilarityPerturbation(
            rotation=float(rng.uniform(-self.max_rotation, self.max_rotation)),
            scale=float(rng.uniform(*self.scale_range)),
            translation=(float(rng.uniform(-1, 1) * self.max_translation * W),
                         float(rng.uniform(-1, 1) * self.max_translation * H)),
            seed=int(rng.integers(2**31)),
        )

    def contains(self, p: SimilarityPerturbation, dims) -> bool:
        H, W = dims
        eps = 1e-12
        return (abs(p.rotation) <= self.max_rotation + eps
                and self.scale_range[0] - eps <= p.scale <= self.scale_range[1] + eps
                and abs(p.translation[0]) <= self.max_translation * W + eps
                and abs(p.translation[1]) <= self.max_translation * H + eps)


@dataclass
class LayoutConfig:
    ransac: RansacConfig = field(default_factory=RansacConfig)
    focal: float | None = None
    margin: float = 0.05
    min_inliers: int = 12
    # "rotation" re-fits each pairwise edge as K R K^-1 once a focal is known
    motion_model: str = "rotation"


@dataclass
class PairwiseEdge:
    i: int
    j: int
    H: np.ndarray   # i -> j
    inliers: int
    matches: int
    src: np.ndarray | None = None   # inlier points in image i
    dst: np.ndarray | None = None


def valid_centroid(valid: np.ndarray) -> tuple[float, float]:
    ys, xs = np.nonzero(valid)
    if len(xs) == 0:
        H, W = valid.shape
        return (W - 1) / 2.0, (H - 1) / 2.0
    return float(xs.mean()), float(ys.mean())


def similarity_matrix(p: SimilarityPerturbation, center) -> np.ndarray:
    c, s = np.cos(p.rotation) * p.scale, np.sin(p.rotation) * p.scale
    cx, cy = center
    tx, ty = p.translation
    return np.array([[c, -s, cx + tx - c * cx + s * cy],
                     [s, c, cy + ty - s * cx - c * cy]])


def apply_perturbation(sp: SparsePanorama, p: SimilarityPerturbation) -> SparsePanorama:
    """Move the warped reference by a similarity about its footprint centroid."""
    if p.is_identity():
        return replace(sp, canvas=sp.canvas.copy(), valid=sp.valid.copy())
    H, W = sp.valid.shape
    A = similarity_matrix(p, valid_centroid(sp.valid))
    canvas = cv2.warpAffine(sp.canvas, A, (W, H), flags=cv2.INTER_LINEAR,
                            borderMode=cv2.BORDER_CONSTANT, borderValue=0)
    valid = cv2.warpAffine(sp.valid.astype(np.uint8), A, (W, H), flags=cv2.INTER_NEAREST,
                           borderMode=cv2.BORDER_CONSTANT, borderValue=0).astype(bool)
    canvas = np.where(valid[..., None], canvas, 0).astype(np.float32)
    return replace(sp, canvas=canvas, valid=valid)


def pairwise_edges(refs, matcher=None, config: LayoutConfig = LayoutConfig()) -> list[PairwiseEdge]:
    matcher = matcher or ClassicalMatcher()
    feats = [matcher.features(r.pixels) for r in refs]
    edges = []
    for i in range(len(refs)):
        for j in range(i + 1, len(refs)):
            ms = matcher.match_features(*feats[i], *feats[j])
            try:
                if len(ms) < 8:
                    raise TooFewFeatures(f"{len(ms)} matches")
                H, inl = estimate_homography(ms, config.ransac)
            except (TooFewFeatures, TooFewInliers, DegenerateConfiguration) as exc:
                log.debug("no edge %s-%s: %s", refs[i].id, refs[j].id, exc)
                continue
            n_in = int(inl.sum())
            # Brown-Lowe probabilistic verification
            if n_in < max(config.min_inliers, 8 + 0.3 * len(ms)):
                continue
            edges.append(PairwiseEdge(i, j, H, n_in, len(ms), ms.pts_a[inl], ms.pts_b[inl]))
    return edges


def camera_matrix(focal: float, shape) -> np.ndarray:
    h, w = shape
    return np.array([[focal, 0, (w - 1) / 2.0], [0, focal, (h - 1) / 2.0], [0, 0, 1.0]])


def rotation_refit(refs, edges, focal: float, threshold: float) -> list[PairwiseEdge]:
    out = []
    for e in edges:
        Ka, Kb = camera_matrix(focal, refs[e.i].shape), camera_matrix(focal, refs[e.j].shape)
        H = fit_rotation(e.H, e.src, e.dst, Ka, Kb, robust_scale=threshold / 3)
        out.append(replace(e, H=H))
    return out


def spanning_tree_to_center(n: int, edges: list[PairwiseEdge], center: int) -> dict[int, np.ndarray]:
    """Prim's maximum-inlier spanning tree; returns each node's homography to the center."""
    to_center = {center: np.eye(3)}
    adj: dict[int, list[tuple[int, int, np.ndarray]]] = {k: [] for k in range(n)}
    for e in edges:
        adj[e.i].append((e.inliers, e.j, e.H))
        adj[e.j].append((e.inliers, e.i, np.linalg.inv(e.H)))
    while True:
        best = None
        for u in to_center:
            for w, v, Huv in adj[u]:
                if v in to_center:
                    continue
                key = (w, -v)
                if best is None or key > best[0]:
                    best = (key, u, v, Huv)
        if best is None:
            break
        _, u, v, Huv = best
        # Huv maps u -> v; we need v -> center
        to_center[v] = normalize_h(to_center[u] @ np.linalg.inv(Huv))
    return to_center


def estimate_focal(refs, edges) -> float | None:
    est = []
    for e in edges:
        hi, wi = refs[e.i].shape
        hj, wj = refs[e.j].shape
        Ti = np.array([[1, 0, (wi - 1) / 2], [0, 1, (hi - 1) / 2], [0, 0, 1.0]])
        Tj = np.array([[1, 0, (wj - 1) / 2], [0, 1, (hj - 1) / 2], [0, 0, 1.0]])
        Hc = np.linalg.inv(Tj) @ e.H @ Ti
        f0, f1 = focals_from_homography(Hc)
        if f0 is not None and f1 is not None:
            est.append(np.sqrt(f0 * f1))
    return float(np.median(est)) if est else None


def _boundary_points(h, w, n=64):
    t = np.linspace(0, 1, n)
    xs = np.concatenate([t * (w - 1), np.full(n, w - 1.0), (1 - t) * (w - 1), np.zeros(n)])
    ys = np.concatenate([np.zeros(n), t * (h - 1), np.full(n, h - 1.0), (1 - t) * (h - 1)])
    return xs, ys


def warp_to_panorama(img: np.ndarray, placement: np.ndarray, frame: PanoramaFrame):
    """Inverse-map ``img`` into the cylindrical panorama; returns ``(canvas, valid)``."""
    H, W = frame.dims
    Y, X = np.mgrid[0:H, 0:W].astype(np.float64)
    u, v = frame.pano_to_plane(X, Y)
    Hinv = np.linalg.inv(placement)
    den = Hinv[2, 0] * u + Hinv[2, 1] * v + Hinv[2, 2]
    with np.errstate(invalid="ignore", divide="ignore"):
        mx = (Hinv[0, 0] * u + Hinv[0, 1] * v + Hinv[0, 2]) / den
        my = (Hinv[1, 0] * u + Hinv[1, 1] * v + Hinv[1, 2]) / den
    bad = ~np.isfinite(mx) | ~np.isfinite(my) | ~(den > 0)
    mx = np.where(bad, -1e6, mx).astype(np.float32)
    my = np.where(bad, -1e6, my).astype(np.float32)
    h, w = img.shape[:2]
    canvas = cv2.remap(img.astype(np.float32), mx, my, interpolation=cv2.INTER_LINEAR,
                       borderMode=cv2.BORDER_CONSTANT, borderValue=0)
    inside = (mx >= 0) & (mx <= w - 1) & (my >= 0) & (my <= h - 1)
    valid = cv2.erode(inside.astype(np.uint8), np.ones((3, 3), np.uint8)).astype(bool)
    canvas = np.where(valid[..., None], canvas, 0).astype(np.float32)
    return canvas, valid


def build_sparse_panoramas(refs, center_id: str, pano_dims=None, config: LayoutConfig | None = None,
                           matcher=None) -> list[SparsePanorama]:
    """One sparse panorama per reference, all in the center reference's cylindrical frame."""
    config = config or LayoutConfig()
    ids = [r.id for r in refs]
    if center_id not in ids:
        raise ValueError(f"unknown center id {center_id!r}")
    c = ids.index(center_id)
    edges = pairwise_edges(refs, matcher, config) if len(refs) > 1 else []
    focal = config.focal or estimate_focal(refs, edges)
    if focal is None:
        focal = float(max(refs[c].shape))
        log.warning("focal heuristic failed; falling back to %.1f px", focal)
    if config.motion_model == "rotation":
        edges = rotation_refit(refs, edges, focal, config.ransac.threshold)
    elif config.motion_model != "homography":
        raise ValueError(f"unknown motion model {config.motion_model!r}")
    to_center = spanning_tree_to_center(len(refs), edges, c)
    missing = [ids[k] for k in range(len(refs)) if k not in to_center]
    if missing:
        raise DisconnectedGraph(missing)
    hc, wc = refs[c].shape
    pp = ((wc - 1) / 2.0, (hc - 1) / 2.0)

    if pano_dims is None:
        probe = PanoramaFrame((1, 1), focal, pp, (0.0, 0.0))
        ext_x = ext_y = 0.0
        for k, r in enumerate(refs):
            bx, by = _boundary_points(*r.shape)
            Hk = to_center[k]
            den = Hk[2, 0] * bx + Hk[2, 1] * by + Hk[2, 2]
            u = (Hk[0, 0] * bx + Hk[0, 1] * by + Hk[0, 2]) / den
            v = (Hk[1, 0] * bx + Hk[1, 1] * by + Hk[1, 2]) / den
            X, Y = probe.plane_to_pano(u, v)
            ext_x = max(ext_x, float(np.abs(X).max()))
            ext_y = max(ext_y, float(np.abs(Y).max()))
        pano_dims = (int(np.ceil(2 * ext_y * (1 + config.margin))) + 1,
                     int(np.ceil(2 * ext_x * (1 + config.margin))) + 1)
    Hp, Wp = int(pano_dims[0]), int(pano_dims[1])
    frame = PanoramaFrame((Hp, Wp), float(focal), pp, ((Wp - 1) / 2.0, (Hp - 1) / 2.0))

    out = []
    for k, r in enumerate(refs):
        canvas, valid = warp_to_panorama(r.pixels, to_center[k], frame)
        out.append(SparsePanorama(canvas, valid, r.id, to_center[k], frame))
    return out


def layout_manifest(sps: list[SparsePanorama], center_id: str, dims_mode: str) -> dict:
    frame = sps[0].frame
    return {
        "images": [sp.source_id for sp in sps],
        "center_id": center_id,
        "pano_dims": list(frame.dims),
        "pano_dims_mode": dims_mode,
        "focal": frame.focal,
        "principal_point": list(frame.principal_point),
        "offset": list(frame.offset),
        "placements": {sp.source_id: [float(x) for x in sp.placement.ravel()] for sp in sps},
    }


def frame_from_manifest(manifest: dict) -> PanoramaFrame:
    return PanoramaFrame(tuple(manifest["pano_dims"]), float(manifest["focal"]),
                         tuple(manifest["principal_point"]), tuple(manifest["offset"]))


def sparse_path(ws, source_id: str):
    return ws.path("sparse", Path(source_id).stem + ".png")


def save_layout(ws, sps: list[SparsePanorama], center_id: str, dims_mode: str, posenc_params: dict) -> dict:
    """Write every sparse panorama plus the manifest into workspace ``ws``."""
    for sp in sps:
        save_panorama(sparse_path(ws, sp.source_id), sp.canvas, sp.valid)
    ws.manifest = {**layout_manifest(sps, center_id, dims_mode), "posenc": dict(posenc_params)}
    ws.save_manifest()
    return ws.manifest


def load_layout(ws) -> list[SparsePanorama]:
    m = ws.manifest
    if not m.get("images"):
        raise ArtifactIOError(f"{ws.manifest_path}: no layout in manifest (run layout first)")
    frame = frame_from_manifest(m)
    out = []
    for sid in m["images"]:
        canvas, valid = load_panorama(sparse_path(ws, sid))
        if valid is None:
            raise ArtifactIOError(f"{sparse_path(ws, sid)}: missing validity channel")
        if canvas.shape[:2] != tuple(frame.dims):
            raise ArtifactIOError(f"{sparse_path(ws, sid)}: dims {canvas.shape[:2]} != manifest {frame.dims}")
        canvas = np.where(valid[..., None], canvas, 0).astype(np.float32)
        out.append(SparsePanorama(canvas, valid, sid, np.array(m["placements"][sid]).reshape(3, 3), frame))
    return out
