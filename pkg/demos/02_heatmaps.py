"""
Three heatmaps for one utterance
================================

Attention relevancy (GATR), Grad-CAM on the last conv layer, and
GradientSHAP with a zero baseline, all computed on a toy detector. For a
spoof utterance the relevance should sit on the voiced segments, where the
artefact lives.
"""

import numpy as np

from _common import SPEC, model, strip
from rlens import forward, gatr, grad_cam, gradient_shap, synth_utterance

params = model()
u = synth_utterance(SPEC, "spoof", 1234)
_, p_spoof = forward(params, u.waveform)
print(f"spoof probability {p_spoof:.3f}\n")
print(f"{'voiced':>9}:", strip(u.voiced.astype(float)))

maps = {
    "GATR": gatr(params, u.waveform, 1),
    "Grad-CAM": grad_cam(params, u.waveform, 1),
    "GradSHAP": gradient_shap(params, u.waveform, 1, seed=0),
}
for name, h in maps.items():
    inside = h.scores[u.voiced].mean() / max(h.scores.mean(), 1e-12)
    print(f"{name:>9}:", strip(h.scores), f" voiced/mean = {inside:.2f}")

# the GATR state exposes the relevancy matrix and the gradient row weights
h, state = gatr(params, u.waveform, 1, return_state=True)
R = state.history[-1] - np.eye(state.history[-1].shape[0])
print(f"\nrelevancy matrix {R.shape}, min {R.min():.2e} (never negative)")
print("row weights   :", strip(np.repeat(state.weights, 40)))
print("token scores  :", strip(np.repeat(state.token_scores, 40)))
