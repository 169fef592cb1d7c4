"""
Does masking the relevant samples hurt the detector?
====================================================

Replace the top (positive) or bottom (negative) fraction of each heatmap
with noise and watch the EER. A faithful heatmap makes the positive curve
climb while the negative one stays flat; a random heatmap does neither.
"""

import numpy as np

from _common import SPEC, model
from rlens import faithfulness, gatr, perturbation_test, synth_split

params = model()
utts = synth_split(SPEC, 99, 50, 50, prefix="demo_eval_")
grid = (0.1, 0.3, 0.5, 0.7, 0.9)

heatmaps = {
    "GATR": [gatr(params, u.waveform, u.target) for u in utts],
    "random": [np.random.default_rng(i).random(SPEC.n_samples) for i in range(len(utts))],
}
print("EER (%) as the masked fraction grows")
print(f"{'':>16}" + "".join(f"{n:>7.1f}" for n in grid) + "    AUC")
for name, hs in heatmaps.items():
    for pol in ("positive", "negative"):
        c = perturbation_test(params, utts, hs, pol, seed=0, n_grid=grid)
        print(f"{name + ' ' + pol:>16}" + "".join(f"{e:7.1f}" for e in c.eers) + f"  {c.auc:5.1f}")

fr = faithfulness(params, utts, heatmaps["GATR"])
print(f"\nGATR multiplied into the input: AI {fr.ai:.1f}%  AD {fr.ad:.1f}%  "
      f"AG {fr.ag:.1f}%  Fid-In {fr.fid_in:.2f}")
