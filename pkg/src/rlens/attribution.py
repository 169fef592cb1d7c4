"""Heatmap methods for the toy detector: GATR, Grad-CAM and GradientSHAP.

GATR (gradient average transformer relevancy) propagates a token-to-token
relevancy matrix through the attention layers,

    R <- R + mean_h[(dA * A)^+] @ R,       R initialised to I,

removes the identity, and collapses the rows of R with weights given by the
L2 norms of the rows of the head-averaged final-layer attention gradient.
The resulting token scores are linearly interpolated back to sample
resolution. Models without a classification token need the weighted row
average; a plain relevancy row lookup has nothing to pick.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from ._util import ConfigError, DataError, rng_for, substream_seed
from .model import ModelParams, backward_from_class, forward, input_gradients
from .signal import as_samples, read_f32, write_f32

METHODS = ("gatr", "gradcam", "gradshap")
LAYER_ORDERS = ("forward", "reverse")

FALLBACK = "fallback"      # GATR row weights summed to zero; unweighted mean used
DEGENERATE = "degenerate"  # all-zero heatmap


@dataclass(frozen=True, eq=False)
class Heatmap:
    scores: np.ndarray
    method: str
    target_class: int
    flags: frozenset = field(default_factory=frozenset)

    def __post_init__(self):
        s = np.array(self.scores, dtype=np.float64)
        if s.ndim != 1:
            raise DataError("heatmap scores must be 1-D")
        if not np.all(np.isfinite(s)) or np.any(s < 0):
            raise DataError("heatmap scores must be finite and non-negative")
        s.setflags(write=False)
        object.__setattr__(self, "scores", s)
        flags = set(self.flags)
        if not np.any(s):
            flags.add(DEGENERATE)
        object.__setattr__(self, "flags", frozenset(flags))

    def __len__(self):
        return self.scores.size

    @property
    def degenerate(self) -> bool:
        return DEGENERATE in self.flags


def peak_normalize_heatmap(h) -> Heatmap:
    """Divide by the maximum score; an all-zero heatmap is returned flagged."""
    if not isinstance(h, Heatmap):
        h = Heatmap(np.asarray(h, dtype=np.float64), "raw", -1)
    peak = h.scores.max(initial=0.0)
    if peak == 0:
        return h
    return Heatmap(h.scores / peak, h.method, h.target_class, h.flags)


# -- GATR building blocks -------------------------------------------------------

def _check_maps(*maps):
    for m in maps:
        if m.ndim != 3 or m.shape[1] != m.shape[2]:
            raise DataError(f"attention maps must be (heads, s, s), got {m.shape}")
    if len({m.shape for m in maps}) > 1:
        raise DataError("attention map and gradient shapes differ")


def head_average_positive(A: np.ndarray, dA: np.ndarray) -> np.ndarray:
    """mean over heads of the positive part of (dA * A)."""
    A, dA = np.asarray(A, dtype=np.float64), np.asarray(dA, dtype=np.float64)
    _check_maps(A, dA)
    return np.maximum(dA * A, 0.0).mean(axis=0)


def relevancy_update(R: np.ndarray, A: np.ndarray, dA: np.ndarray) -> np.ndarray:
    """One layer of relevancy propagation: R + Abar @ R."""
    R = np.asarray(R, dtype=np.float64)
    Abar = head_average_positive(A, dA)
    if R.shape != Abar.shape:
        raise DataError(f"relevancy matrix {R.shape} does not match attention {Abar.shape}")
    return R + Abar @ R


def gradient_row_weights(dA_last: np.ndarray) -> np.ndarray:
    """Row weights: L2 norm of each row of the head-averaged final-layer gradient."""
    dA_last = np.asarray(dA_last, dtype=np.float64)
    _check_maps(dA_last)
    return np.linalg.norm(dA_last.mean(axis=0), axis=1)


def weighted_row_average(R: np.ndarray, W: np.ndarray) -> tuple[np.ndarray, bool]:
    """sum_t W_t R_t / sum_t W_t over the rows R_t.

    Returns ``(r, fallback)``; when the weights sum to zero the plain row mean
    is used and ``fallback`` is True.
    """
    R = np.asarray(R, dtype=np.float64)
    W = np.asarray(W, dtype=np.float64)
    if R.ndim != 2 or W.shape != (R.shape[0],):
        raise DataError(f"weights of shape {W.shape} do not match {R.shape[0]} rows")
    if np.any(W < 0):
        raise DataError("row weights must be non-negative")
    total = W.sum()
    if total == 0:
        return R.mean(axis=0), True
    return (W @ R) / total, False


def interpolate_to_waveform(r: np.ndarray, T: int, stride: float | None = None) -> np.ndarray:
    """Linear interpolation of token scores to T samples.

    Token t sits at sample position (t + 0.5) * stride and sample i at
    i + 0.5; values beyond the first/last token centre are held constant.
    """
    r = np.asarray(r, dtype=np.float64)
    if r.ndim != 1 or r.size < 1:
        raise DataError("need at least one token score")
    if stride is None:
        stride = T / r.size
    centres = (np.arange(r.size) + 0.5) * stride
    return np.interp(np.arange(T) + 0.5, centres, r)


@dataclass
class GatrState:
    history: list[np.ndarray]   # R after initialisation and after every layer update
    weights: np.ndarray
    token_scores: np.ndarray
    fallback: bool


def gatr_from_maps(attentions, attention_grads, T: int, stride: float | None = None,
                   layer_order: str = "forward") -> tuple[np.ndarray, GatrState]:
    """GATR on recorded attention maps and their gradients (network order)."""
    if layer_order not in LAYER_ORDERS:
        raise ConfigError(f"layer_order must be one of {LAYER_ORDERS}")
    if len(attentions) != len(attention_grads) or not attentions:
        raise DataError("need one gradient per attention map")
    s = attentions[0].shape[-1]
    R = np.eye(s)
    history = [R]
    layers = range(len(attentions))
    if layer_order == "reverse":
        layers = reversed(layers)
    for i in layers:
        R = relevancy_update(R, attentions[i], attention_grads[i])
        history.append(R)
    W = gradient_row_weights(attention_grads[-1])
    r, fallback = weighted_row_average(R - np.eye(s), W)
    scores = interpolate_to_waveform(r, T, stride)
    return scores, GatrState(history, W, r, fallback)


def gatr(params: ModelParams, w, cls: int, score: str = "logit",
         layer_order: str = "forward", return_state: bool = False):
    """GATR heatmap of waveform ``w`` for class ``cls`` (0 bona fide, 1 spoof)."""
    x = as_samples(w)
    trace, _ = forward(params, x)
    grads = backward_from_class(params, trace, cls, score)
    scores, state = gatr_from_maps(trace.attentions, grads.attention_grads, x.size,
                                   params.config.stride, layer_order)
    if np.any(scores < 0):
        raise ArithmeticError("GATR produced negative relevance")
    h = Heatmap(scores, "gatr", cls, frozenset({FALLBACK}) if state.fallback else frozenset())
    return (h, state) if return_state else h


# -- Grad-CAM ------------------------------------------------------------------------

def grad_cam_from_maps(features: np.ndarray, feature_grad: np.ndarray, T: int,
                       stride: float | None = None) -> np.ndarray:
    """Rectified, gradient-weighted channel sum of a (channels, frames) feature map."""
    features = np.asarray(features, dtype=np.float64)
    feature_grad = np.asarray(feature_grad, dtype=np.float64)
    if features.shape != feature_grad.shape:
        raise DataError("feature map and gradient shapes differ")
    weights = feature_grad.mean(axis=1)
    cam = np.maximum(weights @ features, 0.0)
    return interpolate_to_waveform(cam, T, stride)


def grad_cam(params: ModelParams, w, cls: int, score: str = "logit") -> Heatmap:
    """Grad-CAM on the last conv layer of the frontend."""
    x = as_samples(w)
    trace, _ = forward(params, x)
    grads = backward_from_class(params, trace, cls, score)
    scores = grad_cam_from_maps(trace.features, grads.feature_grad, x.size, params.config.stride)
    return Heatmap(scores, "gradcam", cls)


# -- GradientSHAP ----------------------------------------------------------------------

def expected_gradients(grad_fn: Callable[[np.ndarray], np.ndarray], w, m: int,
                       rng: np.random.Generator) -> np.ndarray:
    """Zero-baseline expected gradients, negatives clipped.

    ``grad_fn`` maps an (m, T) batch of inputs to their score gradients.
    """
    if m < 1:
        raise ConfigError("need at least one sample")
    x = as_samples(w)
    alpha = rng.uniform(0.0, 1.0, size=m)
    g = np.asarray(grad_fn(alpha[:, None] * x[None, :]), dtype=np.float64)
    return np.maximum(x * g.mean(axis=0), 0.0)


def gradient_shap(params: ModelParams, w, cls: int, m: int = 20, seed: int = 0,
                  score: str = "logit") -> Heatmap:
    """GradientSHAP with zero baselines and ``m`` interpolation draws."""
    scores = expected_gradients(lambda X: input_gradients(params, X, cls, score), w, m,
                                np.random.default_rng(seed))
    return Heatmap(scores, "gradshap", cls)


# -- dispatch / persistence ------------------------------------------------------------

def explain(params: ModelParams, utterance, method: str, seed: int = 0, cls: int | None = None,
            score: str = "logit", layer_order: str = "forward", shap_samples: int = 20) -> Heatmap:
    """Heatmap for one utterance; the class of interest defaults to its ground truth."""
    cls = utterance.target if cls is None else cls
    if method == "gatr":
        return gatr(params, utterance.waveform, cls, score, layer_order)
    if method == "gradcam":
        return grad_cam(params, utterance.waveform, cls, score)
    if method == "gradshap":
        return gradient_shap(params, utterance.waveform, cls, shap_samples,
                             substream_seed(seed, "gradshap", utterance.id), score)
    raise ConfigError(f"unknown method {method!r}; choose from {METHODS}")


def save_heatmap(h: Heatmap, path, utterance_id: str, extra: dict | None = None) -> None:
    """Write ``<path>.f32`` (little-endian float32 scores) and ``<path>.json``."""
    path = Path(path)
    write_f32(path.with_suffix(".f32"), h.scores)
    meta = {"utterance_id": utterance_id, "method": h.method, "class": h.target_class,
            "flags": sorted(h.flags)}
    if extra:
        meta.update(extra)
    path.with_suffix(".json").write_text(json.dumps(meta, indent=1, sort_keys=True) + "\n")


def load_heatmap(path) -> tuple[str, Heatmap]:
    path = Path(path)
    try:
        meta = json.loads(path.with_suffix(".json").read_text())
    except FileNotFoundError as e:
        raise DataError(f"missing heatmap sidecar for {path}") from e
    scores = read_f32(path.with_suffix(".f32"))
    return meta["utterance_id"], Heatmap(scores, meta["method"], int(meta["class"]),
                                         frozenset(meta.get("flags", ())))
