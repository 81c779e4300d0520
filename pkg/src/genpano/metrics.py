"""Masked evaluation: PSNR, SSIM and feature-match metrics, plus a plug-in registry."""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import cv2
import numpy as np

from .errors import EmptyEvaluationRegion, ImageTooSmallForWindow, NoReferenceKeypoints, ShapeMismatch
from .features import ClassicalMatcher, to_gray
from .scene_io import Workspace, load_panorama, write_json

PSNR_CAP = 99.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = (0.01 * 255) ** 2
SSIM_C2 = (0.03 * 255) ** 2
MATCH_RESOLUTION = 512

_PLUGINS: dict[str, Callable] = {}


def register_metric(name: str, fn: Callable) -> None:
    """Add a metric ``fn(ref, gen, m_input) -> float`` to every future report."""
    if name in ("psnr_db", "ssim", "loftr_l2", "loftr_match_proportion"):
        raise ValueError(f"{name!r} is a built-in metric")
    _PLUGINS[name] = fn


def unregister_metric(name: str) -> None:
    _PLUGINS.pop(name, None)


def registered_metrics() -> list[str]:
    return sorted(_PLUGINS)


def _check(ref, gen, mask):
    if ref.shape != gen.shape:
        raise ShapeMismatch(f"reference {ref.shape} vs generated {gen.shape}")
    if mask is not None and mask.shape != ref.shape[:2]:
        raise ShapeMismatch(f"mask {mask.shape} vs images {ref.shape[:2]}")


def quantize8(img: np.ndarray) -> np.ndarray:
    return np.round(np.clip(np.asarray(img, np.float64), 0.0, 1.0) * 255.0)


def psnr(ref: np.ndarray, gen: np.ndarray, m_input: np.ndarray) -> float:
    """PSNR in dB over pixels outside ``m_input`` after 8-bit quantization (MAX = 255)."""
    _check(ref, gen, m_input)
    keep = ~np.asarray(m_input, bool)
    if not keep.any():
        raise EmptyEvaluationRegion("the input mask covers every pixel")
    diff = quantize8(ref)[keep] - quantize8(gen)[keep]
    mse = float(np.mean(diff ** 2))
    if mse == 0:
        return PSNR_CAP
    return float(min(PSNR_CAP, 10.0 * np.log10(255.0 ** 2 / mse)))


def _gauss_filter(x):
    # "valid" part of an 11x11 Gaussian filter
    r = SSIM_WINDOW // 2
    out = cv2.GaussianBlur(x, (SSIM_WINDOW, SSIM_WINDOW), SSIM_SIGMA, borderType=cv2.BORDER_REFLECT)
    return out[r:-r, r:-r]


def ssim(ref: np.ndarray, gen: np.ndarray, m_input: np.ndarray | None = None) -> float:
    """Mean Gaussian-window SSIM of the 8-bit grayscale images with ``m_input`` zeroed in both."""
    _check(ref, gen, m_input)
    a = np.round(to_gray(quantize8(ref)).astype(np.float64))
    b = np.round(to_gray(quantize8(gen)).astype(np.float64))
    if min(a.shape) < SSIM_WINDOW:
        raise ImageTooSmallForWindow(f"image {a.shape} smaller than the {SSIM_WINDOW}px window")
    if m_input is not None:
        a[m_input] = 0.0
        b[m_input] = 0.0
    mu_a, mu_b = _gauss_filter(a), _gauss_filter(b)
    var_a = _gauss_filter(a * a) - mu_a ** 2
    var_b = _gauss_filter(b * b) - mu_b ** 2
    cov = _gauss_filter(a * b) - mu_a * mu_b
    s = ((2 * mu_a * mu_b + SSIM_C1) * (2 * cov + SSIM_C2)) / (
        (mu_a ** 2 + mu_b ** 2 + SSIM_C1) * (var_a + var_b + SSIM_C2))
    return float(s.mean())


def resize_for_matching(img: np.ndarray, mask: np.ndarray | None = None, size: int = MATCH_RESOLUTION):
    """Scale the long side to ``size`` and zero-pad to a square; the mask pads with True."""
    H, W = img.shape[:2]
    s = size / max(H, W)
    h, w = max(1, int(round(H * s))), max(1, int(round(W * s)))
    out = np.zeros((size, size) + img.shape[2:], np.float32)
    out[:h, :w] = cv2.resize(np.asarray(img, np.float32), (w, h), interpolation=cv2.INTER_AREA)
    m = np.ones((size, size), bool)
    if mask is not None:
        m[:h, :w] = cv2.resize(mask.astype(np.uint8), (w, h), interpolation=cv2.INTER_NEAREST) > 0
    else:
        m[:h, :w] = False
    return out, m


def feature_match_metrics(ref, gen, m_input, matcher=None, size: int = MATCH_RESOLUTION):
    """``(l2_distance, match_proportion)`` on 512-px grayscale copies.

    Only reference keypoints outside ``m_input`` take part. L2 is the mean distance
    between matched keypoints (resized pixels, NaN without matches); the proportion
    is the match count over the number of participating reference keypoints.
    """
    _check(ref, gen, m_input)
    matcher = matcher or ClassicalMatcher()
    ra, excl = resize_for_matching(to_gray(quantize8(ref) / 255.0), m_input, size)
    ga, _ = resize_for_matching(to_gray(quantize8(gen) / 255.0), None, size)
    ka, da = matcher.features(ra)
    if len(ka):
        ix = np.clip(np.round(ka).astype(int), 0, size - 1)
        keep = ~excl[ix[:, 1], ix[:, 0]]
        ka, da = ka[keep], da[keep]
    if len(ka) == 0:
        raise NoReferenceKeypoints("no reference keypoints outside the input region")
    kb, db = matcher.features(ga)
    ms = matcher.match_features(ka, da, kb, db)
    n = len(ms)
    l2 = float(np.linalg.norm(ms.pts_a - ms.pts_b, axis=1).mean()) if n else float("nan")
    return l2, n / len(ka)


@dataclass
class MetricReport:
    psnr_db: float
    ssim: float
    loftr_l2: float
    loftr_match_proportion: float
    plugins: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    def csv_row(self) -> dict:
        row = {k: v for k, v in self.to_dict().items() if k not in ("plugins", "config")}
        row.update(self.plugins)
        return row


def evaluate_arrays(ref, gen, m_input, matcher=None) -> MetricReport:
    l2, prop = feature_match_metrics(ref, gen, m_input, matcher)
    plugins = {name: float(fn(ref, gen, m_input)) for name, fn in sorted(_PLUGINS.items())}
    cfg = {"psnr": {"max": 255, "quantization": "8-bit", "cap_db": PSNR_CAP},
           "ssim": {"window": SSIM_WINDOW, "sigma": SSIM_SIGMA, "c1": SSIM_C1, "c2": SSIM_C2,
                    "grayscale": "bt601", "masked_pixels": "zeroed"},
           "features": {"resolution": MATCH_RESOLUTION, "aspect": "long side resized, zero padded",
                        "matcher": type(matcher or ClassicalMatcher()).__name__}}
    return MetricReport(psnr(ref, gen, m_input), ssim(ref, gen, m_input), l2, prop, plugins, cfg)


def _load(path):
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such image: {path}")
    return load_panorama(path)[0]


def evaluate(workspace, gen_path, ref_path, mask, out_name: str = "report", matcher=None) -> MetricReport:
    """Score ``gen_path`` against ``ref_path``; writes ``<out_name>.json`` and ``.csv``
    into ``workspace``'s ``eval`` directory. ``mask`` is a boolean array or a path
    to an image whose alpha (or gray level) marks the input region."""
    gen = _load(gen_path)
    ref = _load(ref_path)
    if isinstance(mask, (str, Path)):
        canvas, alpha = load_panorama(mask)
        mask = alpha if alpha is not None else to_gray(canvas) > 0.5
    report = evaluate_arrays(ref, gen, np.asarray(mask, bool), matcher)
    report.config["inputs"] = {"generated": str(gen_path), "reference": str(ref_path)}
    if workspace is not None:
        out = (workspace.root if isinstance(workspace, Workspace) else Path(workspace)) / "eval"
        write_report(report, out / f"{out_name}.json", out / f"{out_name}.csv")
    return report


def write_report(report: MetricReport, json_path, csv_path=None) -> None:
    write_json(json_path, _finite(report.to_dict()))
    if csv_path is not None:
        row = report.csv_row()
        Path(csv_path).parent.mkdir(parents=True, exist_ok=True)
        with open(csv_path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(row))
            w.writeheader()
            w.writerow(row)


def _finite(obj):
    """NaN is not valid JSON; store it as null."""
    if isinstance(obj, float) and not np.isfinite(obj):
        return None
    if isinstance(obj, dict):
        return {k: _finite(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_finite(v) for v in obj]
    return obj


def report_json(report: MetricReport) -> str:
    return json.dumps(_finite(report.to_dict()), sort_keys=True)
