"""
The synthetic detection task
============================

Bona fide and spoof utterances share the same voiced/silent structure; the
spoof rendering adds a faint tone inside voiced segments only. Partial
utterances splice the two renderings segment by segment.
"""

import numpy as np

from _common import SPEC, strip
from rlens import energy_vad, synth_partial, synth_utterance

bona = synth_utterance(SPEC, "bonafide", 7)
spoof = synth_utterance(SPEC, "spoof", 7)
print("envelope (bona fide):", strip(np.abs(bona.samples)))
print("envelope (spoof)    :", strip(np.abs(spoof.samples)))
print("voiced mask         :", strip(bona.voiced.astype(float)))

# the planted artefact shows up as a spectral line
k = int(round(SPEC.tone_hz * SPEC.n_samples / SPEC.sample_rate))
B, S = np.abs(np.fft.rfft(bona.samples)), np.abs(np.fft.rfft(spoof.samples))
print(f"\n|DFT| at {SPEC.tone_hz:.0f} Hz: bona fide {B[k]:.2f}, spoof {S[k]:.2f}")

# energy VAD recovers the voiced structure without looking at metadata
vad = energy_vad(bona.waveform)
print(f"VAD speech fraction {vad.mask('S').mean():.3f} vs generator voiced fraction {bona.voiced.mean():.3f}")
print("VAD speech          :", strip(vad.mask("S").astype(float)))

part = synth_partial(SPEC, 3)
print(f"\npartial utterance, spoof regions ({(part.regions == 1).mean():.0%} of samples):")
print("regions             :", strip(part.regions.astype(float)))
print("envelope            :", strip(np.abs(part.samples)))
