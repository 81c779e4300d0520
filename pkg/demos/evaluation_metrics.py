"""
Masked evaluation metrics
=========================

PSNR and SSIM ignore the input region; the feature metrics use only reference
keypoints outside it. A plug-in metric rides along in every report.
"""
import numpy as np

from genpano.metrics import evaluate_arrays, feature_match_metrics, psnr, register_metric
from genpano.scene_io import make_texture

ref = make_texture(np.random.default_rng(0), 256, 512)
m_input = np.zeros(ref.shape[:2], bool)
m_input[:, :128] = True

# a constant 10-level offset gives 20 log10(255 / 10) = 28.13 dB
print("offset PSNR:", round(psnr(ref * 0 + 0.4, ref * 0 + 0.4 + 10 / 255, m_input), 3))

###############################################################################
# An 8-pixel shift shows up directly as the mean match distance.
shifted = np.zeros_like(ref)
shifted[:, 8:] = ref[:, :-8]
l2, prop = feature_match_metrics(ref, shifted, m_input)
print(f"shift: L2 {l2:.2f} px, match proportion {prop:.3f}")

###############################################################################
register_metric("mean_abs_error", lambda r, g, m: float(np.abs(r - g)[~m].mean()))
noisy = np.clip(ref + np.random.default_rng(1).normal(0, 0.05, ref.shape), 0, 1)
print(evaluate_arrays(ref, noisy, m_input).csv_row())
