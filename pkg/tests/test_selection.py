import csv

import numpy as np
import pytest

from genpano import selection
from genpano.generation import CanvasState
from genpano.scene_io import make_texture
from genpano.selection import SeedScore, count_matches, pick, score_panorama, select_best, write_scores


@pytest.fixture(scope="module")
def tex():
    return make_texture(np.random.default_rng(5), 192, 384)


def test_identical_image_matches(tex):
    none = np.zeros(tex.shape[:2], bool)
    n = count_matches(tex, tex, none)
    assert n > 50
    half = none.copy()
    half[:, :192] = True
    assert 0 < count_matches(tex, tex, half) < n
    assert count_matches(tex, tex, np.ones_like(none)) == 0


def test_unrelated_image_scores_low(tex):
    other = make_texture(np.random.default_rng(6), 192, 384)
    none = np.zeros(tex.shape[:2], bool)
    assert count_matches(other, tex, none) < 0.1 * count_matches(tex, tex, none)
    assert count_matches(np.full_like(tex, 0.5), tex, none) == 0


def test_pick_prefers_count_then_low_seed():
    scores = [SeedScore(2, 10), SeedScore(0, 7), SeedScore(1, 10)]
    assert pick(scores).seed == 1
    with pytest.raises(ValueError):
        pick([])


def test_score_and_write(tmp_path, tex):
    s = score_panorama(tex, tex, seed=4, path="x.png")
    assert s.seed == 4 and s.match_count > 0
    write_scores(tmp_path / "scores.csv", [SeedScore(1, 3, "b"), SeedScore(0, 5, "a")])
    rows = list(csv.reader(open(tmp_path / "scores.csv")))
    assert rows == [["seed", "match_count", "path"], ["0", "5", "a"], ["1", "3", "b"]]


def test_select_best_keeps_winner(tmp_path, tex, monkeypatch):
    # seed 2 returns the reference itself, others an unrelated texture
    other = make_texture(np.random.default_rng(7), 192, 384)

    def fake(ws, ckpt, start_id, seed, config, model=None):
        img = tex if seed == 2 else other
        return CanvasState(img.copy(), np.ones(img.shape[:2], bool))
    monkeypatch.setattr(selection, "generate_panorama", fake)
    state, scores = select_best(None, None, 4, tex, out_dir=tmp_path, model=object())
    assert [s.seed for s in scores] == [0, 1, 2, 3]
    assert pick(scores).seed == 2 and np.array_equal(state.pixels, tex)
    assert (tmp_path / "seed_003.png").exists() and (tmp_path / "scores.csv").exists()
    # candidate paths are stored relative to the CSV so the file does not depend on the workspace
    rows = list(csv.reader(open(tmp_path / "scores.csv")))
    assert [r[2] for r in rows[1:]] == [f"seed_{i:03d}.png" for i in range(4)]


def test_select_best_reports_failing_seed(monkeypatch, tex):
    def boom(ws, ckpt, start_id, seed, config, model=None):
        if seed == 1:
            raise RuntimeError("out of memory")
        return CanvasState(tex.copy(), np.ones(tex.shape[:2], bool))
    monkeypatch.setattr(selection, "generate_panorama", boom)
    with pytest.raises(RuntimeError, match="seed 1"):
        select_best(None, None, 3, tex, model=object())
    with pytest.raises(ValueError):
        select_best(None, None, 0, tex, model=object())
