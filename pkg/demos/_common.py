"""Shared setup for the demo scripts: a small trained detector, cached on disk."""

from pathlib import Path

import numpy as np

from rlens import GeneratorSpec, ModelConfig, TrainHyper, load_checkpoint, save_checkpoint, synth_split, train

OUT = Path(__file__).resolve().parent / "_out"
SPEC = GeneratorSpec()


def model(seed=0):
    ckpt = OUT / f"demo_{seed}.ckpt"
    if ckpt.exists():
        return load_checkpoint(ckpt)
    utts = synth_split(SPEC, seed, 150, 150, prefix="demo_")
    print(f"training on {len(utts)} utterances (cached afterwards in {ckpt}) ...")
    params, log = train(utts, ModelConfig(), TrainHyper(epochs=10), seed=seed)
    print(f"  held-out EER {log.heldout_eer:.2f}%")
    OUT.mkdir(exist_ok=True)
    save_checkpoint(params, ckpt)
    return params


def strip(values, width=80, marks=" .:-=+*#%@"):
    """One-line text rendering of a non-negative curve."""
    v = np.asarray(values, dtype=float)
    v = v[: v.size - v.size % width].reshape(width, -1).mean(1)
    if v.max() > 0:
        v = v / v.max()
    return "".join(marks[min(int(x * (len(marks) - 1) + 0.5), len(marks) - 1)] for x in v)
