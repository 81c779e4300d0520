"""Image ingestion, synthetic scenes and workspace persistence."""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import cv2
import numpy as np

from .errors import ArtifactIOError, EmptyDirectory, InvalidDims, UndecodableImage

MANIFEST_SCHEMA_VERSION = 1
IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff")


@dataclass
class RefImage:
    pixels: np.ndarray  # (H, W, 3) float32 in [0, 1]
    id: str

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.float32)
        if px.ndim != 3 or px.shape[2] != 3:
            raise InvalidDims(f"{self.id}: expected HxWx3 pixels, got {px.shape}")
        if px.shape[0] < 64 or px.shape[1] < 64:
            raise InvalidDims(f"{self.id}: images must be at least 64x64, got {px.shape[:2]}")
        if not np.all(np.isfinite(px)) or px.min() < 0 or px.max() > 1:
            raise ValueError(f"{self.id}: pixel values must be finite and in [0, 1]")
        self.pixels = px

    @property
    def orientation(self) -> str:
        return "portrait" if self.pixels.shape[0] > self.pixels.shape[1] else "landscape"

    @property
    def shape(self) -> tuple[int, int]:
        return self.pixels.shape[:2]


# ---------------------------------------------------------------------------
# 8/16-bit PNG I/O

def read_image(path) -> np.ndarray:
    """Read an 8- or 16-bit image as RGB float32 in [0, 1]."""
    path = Path(path)
    if not path.exists():
        raise ArtifactIOError(f"no such file: {path}")
    raw = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if raw is None:
        raise UndecodableImage(path.name)
    scale = 65535.0 if raw.dtype == np.uint16 else 255.0
    if raw.ndim == 2:
        raw = np.repeat(raw[:, :, None], 3, axis=2)
    img = raw.astype(np.float32) / scale
    if img.shape[2] == 4:
        img = img[:, :, [2, 1, 0, 3]]
    else:
        img = img[:, :, 2::-1]
    return np.ascontiguousarray(img)


def write_image8(path, img: np.ndarray) -> None:
    img = np.asarray(img)
    if not np.all(np.isfinite(img)):
        raise ValueError("refusing to write non-finite image")
    q = np.round(np.clip(img, 0, 1) * 255).astype(np.uint8)
    _imwrite(path, q)


def _imwrite(path, rgb_or_rgba: np.ndarray) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arr = rgb_or_rgba
    if arr.ndim == 3 and arr.shape[2] == 3:
        arr = arr[:, :, ::-1]
    elif arr.ndim == 3 and arr.shape[2] == 4:
        arr = arr[:, :, [2, 1, 0, 3]]
    try:
        ok = cv2.imwrite(str(path), np.ascontiguousarray(arr))
    except cv2.error as exc:
        raise ArtifactIOError(f"cannot write {path}: {exc}") from exc
    if not ok:
        raise ArtifactIOError(f"cannot write {path}")


def save_panorama(path, canvas: np.ndarray, valid: np.ndarray | None = None) -> None:
    """Write a float canvas as a 16-bit PNG; ``valid`` becomes the alpha channel."""
    canvas = np.asarray(canvas, dtype=np.float64)
    if not np.all(np.isfinite(canvas)):
        raise ValueError("canvas contains non-finite values")
    q = np.round(np.clip(canvas, 0, 1) * 65535).astype(np.uint16)
    if valid is not None:
        alpha = np.where(np.asarray(valid, dtype=bool), 65535, 0).astype(np.uint16)
        q = np.concatenate([q, alpha[:, :, None]], axis=2)
    _imwrite(path, q)


def load_panorama(path) -> tuple[np.ndarray, np.ndarray | None]:
    """Inverse of :func:`save_panorama`; returns ``(canvas, valid)``."""
    img = read_image(path)
    if img.shape[2] == 4:
        return np.ascontiguousarray(img[:, :, :3]), img[:, :, 3] > 0.5
    return img, None


def load_references(directory) -> list[RefImage]:
    directory = Path(directory)
    if not directory.is_dir():
        raise ArtifactIOError(f"not a directory: {directory}")
    files = sorted(p for p in directory.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
    if len(files) < 2:
        raise EmptyDirectory(f"{directory}: need >=2 reference images, found {len(files)}")
    refs = []
    for p in files:
        raw = cv2.imread(str(p), cv2.IMREAD_COLOR)
        if raw is None:
            raise UndecodableImage(p.name)
        refs.append(RefImage(pixels=raw[:, :, ::-1].astype(np.float32) / 255.0, id=p.name))
    return refs


# ---------------------------------------------------------------------------
# synthetic scenes

@dataclass
class ViewSpec:
    image: np.ndarray          # rendered view, after photometric jitter
    box: tuple[int, int, int, int]  # footprint bounding box on the texture (x, y, w, h)
    homography: np.ndarray     # view pixels -> center view pixels
    yaw: float
    gain: float
    white_balance: tuple[float, float, float]


@dataclass
class SyntheticScene:
    texture: np.ndarray        # (H, W, 3), cylindrical ground truth
    views: list[ViewSpec]
    focal: float
    seed: int
    center_index: int
    view_dims: tuple[int, int]

    @property
    def refs(self) -> list[RefImage]:
        return [RefImage(pixels=v.image, id=view_id(i)) for i, v in enumerate(self.views)]

    @property
    def center_id(self) -> str:
        return view_id(self.center_index)


def view_id(i: int) -> str:
    return f"view_{i:02d}.png"


def value_noise(rng: np.random.Generator, shape, cells, channels=3) -> np.ndarray:
    """Band-limited noise: a coarse random lattice upsampled with bicubic interpolation."""
    H, W = shape
    gh, gw = max(2, int(cells[0])), max(2, int(cells[1]))
    grid = rng.random((gh + 3, gw + 3, channels)).astype(np.float32)
    big = cv2.resize(grid, ((gw + 3) * W // gw, (gh + 3) * H // gh), interpolation=cv2.INTER_CUBIC)
    oy, ox = H // gh, W // gw
    out = big[oy: oy + H, ox: ox + W]
    return out.reshape(H, W, channels)


def make_texture(rng: np.random.Generator, H: int, W: int) -> np.ndarray:
    """Procedural scene: layered value noise plus filled geometric primitives."""
    scale = W / 768.0
    tex = 0.55 * value_noise(rng, (H, W), (H / 96, W / 96))
    tex += 0.25 * value_noise(rng, (H, W), (H / 24, W / 24))
    tex += 0.12 * value_noise(rng, (H, W), (H / 6, W / 6), channels=1)
    tex = tex.astype(np.float32)
    n_shapes = int(28 * (H * W) / (256 * 768))
    for _ in range(n_shapes):
        color = tuple(float(c) for c in rng.uniform(0.05, 0.95, 3))
        kind = rng.integers(3)
        cx, cy = int(rng.integers(0, W)), int(rng.integers(0, H))
        size = int(rng.integers(8, 40) * scale) + 4
        if kind == 0:
            cv2.rectangle(tex, (cx, cy), (cx + size, cy + int(size * rng.uniform(0.5, 1.5))), color, -1)
        elif kind == 1:
            cv2.circle(tex, (cx, cy), size // 2, color, -1)
        else:
            ang = rng.uniform(0, np.pi)
            end = (int(cx + 2 * size * np.cos(ang)), int(cy + 2 * size * np.sin(ang)))
            cv2.line(tex, (cx, cy), end, color, int(rng.integers(2, 6)))
    return np.clip(tex, 0.0, 1.0)


def yaw_matrix(yaw: float) -> np.ndarray:
    c, s = np.cos(yaw), np.sin(yaw)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def intrinsics(focal: float, h: int, w: int) -> np.ndarray:
    return np.array([[focal, 0.0, (w - 1) / 2.0], [0.0, focal, (h - 1) / 2.0], [0.0, 0.0, 1.0]])


def view_to_texture_maps(focal, view_hw, yaw, tex_hw):
    """Texture coordinates sampled by every pixel of a view at ``yaw``."""
    h, w = view_hw
    H, W = tex_hw
    v, u = np.mgrid[0:h, 0:w].astype(np.float64)
    d = np.stack([u - (w - 1) / 2.0, v - (h - 1) / 2.0, np.full_like(u, focal)], axis=-1)
    d = d @ yaw_matrix(yaw).T
    theta = np.arctan2(d[..., 0], d[..., 2])
    hh = d[..., 1] / np.hypot(d[..., 0], d[..., 2])
    X = (W - 1) / 2.0 + focal * theta
    Y = (H - 1) / 2.0 + focal * hh
    return X.astype(np.float32), Y.astype(np.float32)


def texture_to_view_maps(focal, view_hw, yaw, tex_hw):
    """View-pixel coordinates of every texture pixel (NaN where behind the camera)."""
    h, w = view_hw
    H, W = tex_hw
    Y, X = np.mgrid[0:H, 0:W].astype(np.float64)
    theta = (X - (W - 1) / 2.0) / focal
    hh = (Y - (H - 1) / 2.0) / focal
    d = np.stack([np.sin(theta), hh, np.cos(theta)], axis=-1)
    d = d @ yaw_matrix(yaw)  # world -> camera
    with np.errstate(divide="ignore", invalid="ignore"):
        u = focal * d[..., 0] / d[..., 2] + (w - 1) / 2.0
        v = focal * d[..., 1] / d[..., 2] + (h - 1) / 2.0
    behind = d[..., 2] <= 1e-6
    u[behind] = np.nan
    v[behind] = np.nan
    return u, v


def view_footprint(scene: SyntheticScene, i: int) -> np.ndarray:
    """Boolean mask of texture pixels seen by view ``i``."""
    h, w = scene.view_dims
    u, v = texture_to_view_maps(scene.focal, (h, w), scene.views[i].yaw, scene.texture.shape[:2])
    with np.errstate(invalid="ignore"):
        return (u >= 0) & (u <= w - 1) & (v >= 0) & (v <= h - 1)


def apply_jitter(img: np.ndarray, gain: float, white_balance) -> np.ndarray:
    wb = np.asarray(white_balance, dtype=np.float32)
    return np.clip(img * np.float32(gain) * wb[None, None, :], 0.0, 1.0).astype(np.float32)


def make_synthetic_scene(seed: int, n_views: int = 3, pano_dims=(256, 768), jitter=None,
                         coverage: float = 0.94, overlap: float = 0.4) -> SyntheticScene:
    """Deterministic multi-view scene rendered from a cylindrical ground-truth texture.

    Views are pinhole cameras rotating about a common center, so every pair of
    views is related by an exact homography. ``jitter`` is ``None`` (random
    gain / white balance on every non-center view), ``False`` (no jitter) or a
    per-view list of ``(gain, (r, g, b))``.
    """
    H, W = int(pano_dims[0]), int(pano_dims[1])
    if n_views < 2:
        raise InvalidDims(f"need at least 2 views, got {n_views}")
    if H < 256 or W < 512:
        raise InvalidDims(f"panorama dims must be >= (256, 512), got {(H, W)}")
    rng = np.random.default_rng(seed)
    texture = make_texture(rng, H, W)

    ratio = 1.5  # focal / view width
    center = (n_views - 1) // 2
    reach = max(center, n_views - 1 - center)
    fp_width = coverage * W / (1 + 2 * reach * (1 - overlap))
    w = int(round(fp_width / (2 * ratio * np.arctan(1 / (2 * ratio)))))
    h = int(round(0.8 * H))
    focal = ratio * w
    step = (1 - overlap) * fp_width / focal
    yaws = [(i - center) * step for i in range(n_views)]
    if jitter is None:
        jitter = [(1.0, (1.0, 1.0, 1.0)) if i == center else
                  (float(rng.uniform(0.85, 1.15)), tuple(float(c) for c in rng.uniform(0.93, 1.07, 3)))
                  for i in range(n_views)]
    elif jitter is False:
        jitter = [(1.0, (1.0, 1.0, 1.0))] * n_views
    if len(jitter) != n_views:
        raise ValueError("jitter list must have one entry per view")

    K = intrinsics(focal, h, w)
    Kinv = np.linalg.inv(K)
    views = []
    tex32 = texture.astype(np.float32)
    for i, yaw in enumerate(yaws):
        mx, my = view_to_texture_maps(focal, (h, w), yaw, (H, W))
        if mx.min() < 0 or mx.max() > W - 1 or my.min() < 0 or my.max() > H - 1:
            raise InvalidDims("view footprint leaves the texture; use a wider panorama")
        img = cv2.remap(tex32, mx, my, interpolation=cv2.INTER_LINEAR, borderMode=cv2.BORDER_REFLECT)
        gain, wb = jitter[i]
        img = apply_jitter(img, gain, wb)
        box = (int(np.floor(mx.min())), int(np.floor(my.min())),
               int(np.ceil(mx.max()) - np.floor(mx.min())), int(np.ceil(my.max()) - np.floor(my.min())))
        Hm = K @ yaw_matrix(yaw) @ Kinv
        views.append(ViewSpec(image=img, box=box, homography=Hm / Hm[2, 2], yaw=float(yaw),
                              gain=float(gain), white_balance=tuple(wb)))
    return SyntheticScene(texture=texture, views=views, focal=float(focal), seed=int(seed),
                          center_index=center, view_dims=(h, w))


def render_view(scene: SyntheticScene, i: int, jittered: bool = True) -> np.ndarray:
    h, w = scene.view_dims
    mx, my = view_to_texture_maps(scene.focal, (h, w), scene.views[i].yaw, scene.texture.shape[:2])
    img = cv2.remap(scene.texture.astype(np.float32), mx, my, interpolation=cv2.INTER_LINEAR,
                    borderMode=cv2.BORDER_REFLECT)
    if jittered:
        v = scene.views[i]
        img = apply_jitter(img, v.gain, v.white_balance)
    return img


def save_scene(scene: SyntheticScene, directory) -> Path:
    """Write the views as 8-bit PNGs plus the ground truth and a scene description."""
    directory = Path(directory)
    refs_dir = directory / "refs"
    for i, v in enumerate(scene.views):
        write_image8(refs_dir / view_id(i), v.image)
    save_panorama(directory / "groundtruth.png", scene.texture)
    meta = {
        "schema_version": MANIFEST_SCHEMA_VERSION,
        "seed": scene.seed,
        "focal": scene.focal,
        "center_id": scene.center_id,
        "view_dims": list(scene.view_dims),
        "pano_dims": list(scene.texture.shape[:2]),
        "views": [{"id": view_id(i), "box": list(v.box), "yaw": v.yaw, "gain": v.gain,
                   "white_balance": list(v.white_balance),
                   "homography": [float(x) for x in v.homography.ravel()]}
                  for i, v in enumerate(scene.views)],
    }
    write_json(directory / "scene.json", meta)
    return refs_dir


# ---------------------------------------------------------------------------
# workspace

def write_json(path, obj) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    try:
        tmp.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
        os.replace(tmp, path)
    except OSError as exc:
        raise ArtifactIOError(f"cannot write {path}: {exc}") from exc


def read_json(path):
    path = Path(path)
    try:
        return json.loads(path.read_text())
    except FileNotFoundError as exc:
        raise ArtifactIOError(f"missing artifact: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ArtifactIOError(f"malformed JSON in {path}: {exc}") from exc


@dataclass
class Workspace:
    """Directory holding every artifact of one scene.

    Layout::

        manifest.json            layout + posenc parameters (schema-versioned)
        sparse/<id>.png          16-bit RGBA sparse panoramas (alpha = validity)
        checkpoints/*.safetensors
        <stage>/run_config.json  resolved configuration of each run
    """

    root: Path
    manifest: dict = field(default_factory=dict)

    def __post_init__(self):
        self.root = Path(self.root)

    @property
    def manifest_path(self) -> Path:
        return self.root / "manifest.json"

    @property
    def checkpoint_dir(self) -> Path:
        return self.root / "checkpoints"

    def path(self, *parts) -> Path:
        return self.root.joinpath(*parts)

    @classmethod
    def open(cls, root) -> "Workspace":
        ws = cls(Path(root))
        if ws.manifest_path.exists():
            ws.manifest = read_json(ws.manifest_path)
            version = ws.manifest.get("schema_version")
            if version != MANIFEST_SCHEMA_VERSION:
                raise ArtifactIOError(f"unsupported manifest schema version {version}")
        return ws

    def save_manifest(self) -> None:
        self.manifest["schema_version"] = MANIFEST_SCHEMA_VERSION
        ids = self.manifest.get("images", [])
        if len(set(ids)) != len(ids):
            raise ValueError("manifest lists a sparse panorama more than once")
        write_json(self.manifest_path, self.manifest)

    def checkpoints(self) -> list[Path]:
        if not self.checkpoint_dir.exists():
            return []
        return sorted(self.checkpoint_dir.glob("*.safetensors"))

    def latest_checkpoint(self) -> Path | None:
        final = self.checkpoint_dir / "final.safetensors"
        return final if final.exists() else None
