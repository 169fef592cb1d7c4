"""
Where is the spoofed part?
==========================

On partially spoofed utterances the ground truth tells us which samples
came from the spoof rendering. Relevance mass (RMA) and rank accuracy (RRA)
measure how much of the heatmap lands there; RCQ compares the mean relevance
per category with the overall mean.
"""

import numpy as np

from _common import SPEC, model, strip
from rlens import eer, gatr, localization, predict_proba, rcq, region_categories, synth_split

params = model()
utts = synth_split(SPEC, 7, 40, 0, 60, prefix="demo_part_")
scores = predict_proba(params, np.stack([u.samples for u in utts]))[:, 1]
thr = eer(scores, [u.target for u in utts]).threshold
picked = [u for u, s in zip(utts, scores) if u.label == "partial" and s >= thr]
print(f"{len(picked)} of 60 partial utterances are predicted spoof")

hs = [gatr(params, u.waveform, 1) for u in picked]
print("\nexample:")
print("  spoof regions:", strip(picked[0].regions.astype(float), 64))
print("  GATR         :", strip(hs[0].scores, 64))

loc = localization(hs, picked)
print(f"\nRMA {loc.rma:.3f}  RRA {loc.rra:.3f}  (uniform heatmap: {loc.baseline_rma:.3f})")

rep = rcq(hs, [region_categories(u) for u in picked])
for name in rep.names:
    print(f"RCQ {name}: {rep.rcq[name]:+7.1f}%  normalized {rep.normalized[name]:+.2f}")
