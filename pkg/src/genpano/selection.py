"""Correspondence-based seed selection."""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DegenerateConfiguration, ShapeMismatch, TooFewInliers
from .features import ClassicalMatcher
from .generation import GenerationConfig, generate_panorama
from .homography import RansacConfig, estimate_homography
from .scene_io import save_panorama

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class SeedScore:
    seed: int
    match_count: int
    path: str = ""


def count_matches(candidate, reference, exclusion_mask, matcher=None,
                  ransac: RansacConfig = RansacConfig(min_inliers=4)) -> int:
    """Geometrically verified matches whose reference keypoint lies outside ``exclusion_mask``."""
    if candidate.shape != reference.shape:
        raise ShapeMismatch(f"candidate {candidate.shape} vs reference {reference.shape}")
    excl = np.asarray(exclusion_mask, bool)
    if excl.shape != reference.shape[:2]:
        raise ShapeMismatch(f"mask {excl.shape} vs images {reference.shape[:2]}")
    matcher = matcher or ClassicalMatcher()
    ms = matcher(reference, candidate)
    if len(ms):
        H, W = excl.shape
        ix = np.clip(np.round(ms.pts_a).astype(int), 0, [W - 1, H - 1])
        ms = ms.subset(~excl[ix[:, 1], ix[:, 0]])
    if len(ms) < 4:
        return 0
    try:
        _, inliers = estimate_homography(ms, ransac)
    except (TooFewInliers, DegenerateConfiguration):
        return 0
    return int(np.count_nonzero(inliers))


def score_panorama(candidate, reference, matcher=None, exclusion_mask=None, seed: int = 0,
                   path: str = "") -> SeedScore:
    if exclusion_mask is None:
        exclusion_mask = np.zeros(reference.shape[:2], bool)
    return SeedScore(seed, count_matches(candidate, reference, exclusion_mask, matcher), str(path))


def pick(scores: list[SeedScore]) -> SeedScore:
    """Highest match count; ties go to the lowest seed."""
    if not scores:
        raise ValueError("no candidates to select from")
    return min(scores, key=lambda s: (-s.match_count, s.seed))


def write_scores(path, scores: list[SeedScore]) -> None:
    """Write ``seed,match_count,path``; paths under the CSV's folder are stored relative to it."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["seed", "match_count", "path"])
        for s in sorted(scores, key=lambda s: s.seed):
            w.writerow([s.seed, s.match_count, _relative(s.path, path.parent)])


def _relative(p, base: Path) -> str:
    if not p:
        return ""
    p = Path(p)
    try:
        return p.resolve().relative_to(base.resolve()).as_posix()
    except ValueError:
        return str(p)


def select_best(workspace, checkpoint, n_seeds: int, reference, exclusion_mask=None,
                config: GenerationConfig = GenerationConfig(), out_dir=None, matcher=None,
                start_id: str | None = None, model=None):
    """Generate seeds ``0..n_seeds-1``, score each against ``reference`` and keep the best.

    Returns ``(canvas_state, scores)``; candidates and ``scores.csv`` go to ``out_dir``.
    """
    if n_seeds < 1:
        raise ValueError("n_seeds must be >= 1")
    if model is None:
        from .backbone.model import load_checkpoint
        model = load_checkpoint(checkpoint)[0]
    out_dir = Path(out_dir) if out_dir is not None else None
    scores, best, best_state = [], None, None
    for seed in range(n_seeds):
        try:
            state = generate_panorama(workspace, checkpoint, start_id, seed, config, model=model)
        except Exception as exc:
            exc.seed = seed
            if exc.args and isinstance(exc.args[0], str):
                exc.args = (f"seed {seed}: {exc.args[0]}",) + exc.args[1:]
            raise
        path = ""
        if out_dir is not None:
            path = out_dir / f"seed_{seed:03d}.png"
            save_panorama(path, state.pixels)
        s = score_panorama(state.pixels, reference, matcher, exclusion_mask, seed, str(path))
        log.info("seed %d: %d matches", seed, s.match_count)
        scores.append(s)
        if pick([best, s] if best else [s]) is s:
            best, best_state = s, state
    if out_dir is not None:
        write_scores(out_dir / "scores.csv", scores)
    return best_state, scores
