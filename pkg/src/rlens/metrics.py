"""Detection and faithfulness metrics: EER, AI/AD/AG/Fid-In, perturbation curves."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

from ._util import ConfigError, DataError, substream_seed
from .attribution import peak_normalize_heatmap
from .model import ModelParams, predict_proba
from .signal import Utterance, Waveform, noise_mask

DEFAULT_N_GRID = tuple(round(0.1 * i, 1) for i in range(1, 10))
POLARITIES = ("positive", "negative")


class EERResult(NamedTuple):
    eer: float        # percent
    threshold: float  # predict spoof when score >= threshold
    inverted: bool    # eer > 50: scores rank the classes the wrong way round


def eer(scores, labels) -> EERResult:
    """Equal error rate of spoof scores against binary labels (1 = spoof).

    Operating points are taken at every distinct score (predict spoof when
    ``score >= threshold``) plus one above the maximum; the EER and its
    threshold are linearly interpolated where the miss and false-alarm rates
    cross.
    """
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).astype(int)
    if s.shape != y.shape or s.ndim != 1:
        raise DataError("scores and labels must be 1-D and of equal length")
    n1 = int(np.sum(y == 1))
    n0 = int(np.sum(y == 0))
    if n0 == 0 or n1 == 0:
        raise DataError("EER needs both bona fide and spoof scores")

    thr = np.unique(s)
    # counts of scores strictly below each threshold
    below0 = np.searchsorted(np.sort(s[y == 0]), thr, side="left")
    below1 = np.searchsorted(np.sort(s[y == 1]), thr, side="left")
    fpr = np.append(1.0 - below0 / n0, 0.0)
    fnr = np.append(below1 / n1, 1.0)
    thr = np.append(thr, np.nextafter(thr[-1], np.inf))

    d = fnr - fpr
    j = int(np.argmax(d >= 0))  # d[0] = -1 < 0 and d[-1] = 1, so 1 <= j
    t = d[j - 1] / (d[j - 1] - d[j])
    rate = fpr[j - 1] + t * (fpr[j] - fpr[j - 1])
    threshold = thr[j - 1] + t * (thr[j] - thr[j - 1])
    return EERResult(100.0 * float(rate), float(threshold), bool(rate > 0.5))


# -- faithfulness ------------------------------------------------------------------

@dataclass
class FaithfulnessReport:
    ai: float
    ad: float
    ag: float
    fid_in: float
    threshold: float
    per_utterance: list[dict] = field(default_factory=list, repr=False)
    ad_skipped: int = 0
    ag_skipped: int = 0


def faithfulness_from_confidences(f, f_mod, pred, pred_mod, threshold: float = float("nan"),
                                  ids: Sequence[str] | None = None) -> FaithfulnessReport:
    """AI/AD/AG (percent) and Fid-In (fraction) from per-utterance confidences.

    ``f`` and ``f_mod`` are the model's confidence in the class of interest on
    the original and heatmap-modulated inputs; ``pred``/``pred_mod`` the
    thresholded decisions. AD terms with f = 0 and AG terms with f = 1 are
    undefined; they are skipped and counted.
    """
    f = np.asarray(f, dtype=np.float64)
    f_mod = np.asarray(f_mod, dtype=np.float64)
    pred = np.asarray(pred, dtype=bool)
    pred_mod = np.asarray(pred_mod, dtype=bool)
    n = f.size
    if n == 0:
        raise DataError("no utterances to evaluate")
    ids = list(ids) if ids is not None else [str(i) for i in range(n)]

    ad_ok = f > 0
    ag_ok = f < 1
    with np.errstate(divide="ignore", invalid="ignore"):
        ad_terms = np.where(ad_ok, np.maximum(0.0, f - f_mod) / f, np.nan)
        ag_terms = np.where(ag_ok, np.maximum(0.0, f_mod - f) / (1.0 - f), np.nan)
    increase = f_mod > f
    same = pred == pred_mod

    def mean(v):
        v = v[~np.isnan(v)]
        return float(np.mean(v)) if v.size else float("nan")

    rows = [
        dict(id=ids[i], f=float(f[i]), f_mod=float(f_mod[i]), ad=float(ad_terms[i]),
             ag=float(ag_terms[i]), increase=bool(increase[i]), same_pred=bool(same[i]))
        for i in range(n)
    ]
    return FaithfulnessReport(
        ai=100.0 * float(np.mean(increase)),
        ad=100.0 * mean(ad_terms),
        ag=100.0 * mean(ag_terms),
        fid_in=float(np.mean(same)),
        threshold=threshold,
        per_utterance=rows,
        ad_skipped=int(np.sum(~ad_ok)),
        ag_skipped=int(np.sum(~ag_ok)),
    )


def _stack(utterances: Sequence[Utterance]) -> np.ndarray:
    lengths = {len(u.waveform) for u in utterances}
    if len(lengths) != 1:
        raise DataError("all utterances must have the same length")
    return np.stack([u.samples for u in utterances])


def _heatmap_matrix(heatmaps, T: int) -> np.ndarray:
    H = np.stack([np.asarray(getattr(h, "scores", h), dtype=np.float64) for h in heatmaps])
    if H.shape[1] != T:
        raise DataError(f"heatmap length {H.shape[1]} != waveform length {T}")
    return H


def faithfulness(params: ModelParams, utterances: Sequence[Utterance], heatmaps,
                 threads: int = 1) -> FaithfulnessReport:
    """Faithfulness of one heatmap per utterance, class of interest = ground truth.

    Each heatmap is peak-normalized and multiplied into its waveform. The
    decision threshold is the EER operating point of the unmodified dataset.
    """
    if not utterances or len(heatmaps) != len(utterances):
        raise DataError("need exactly one heatmap per utterance")
    X = _stack(utterances)
    H = _heatmap_matrix([peak_normalize_heatmap(h) for h in heatmaps], X.shape[1])
    y = np.array([u.target for u in utterances])
    p = predict_proba(params, X, threads=threads)
    p_mod = predict_proba(params, X * H, threads=threads)
    idx = np.arange(len(y))
    threshold = eer(p[:, 1], y).threshold if len(set(y.tolist())) == 2 else 0.5
    return faithfulness_from_confidences(
        p[idx, y], p_mod[idx, y], p[:, 1] >= threshold, p_mod[:, 1] >= threshold,
        threshold, [u.id for u in utterances],
    )


# -- perturbation tests ---------------------------------------------------------------

def select_fraction(h, n: float, polarity: str) -> np.ndarray:
    """Indices of the ``floor(n*T)`` highest (positive) or lowest (negative) scores.

    Ties are broken by ascending sample index. Returned sorted.
    """
    if not 0 < n < 1:
        raise ConfigError("fraction must lie in (0, 1)")
    if polarity not in POLARITIES:
        raise ConfigError(f"polarity must be one of {POLARITIES}")
    scores = np.asarray(getattr(h, "scores", h), dtype=np.float64)
    T = scores.size
    k = math.floor(n * T + 1e-9)
    key = -scores if polarity == "positive" else scores
    order = np.lexsort((np.arange(T), key))
    return np.sort(order[:k])


@dataclass
class PerturbationCurve:
    polarity: str
    n_grid: tuple[float, ...]
    eers: list[float]   # percent, one per grid point
    auc: float          # trapezoidal area divided by the grid span (percent)
    baseline_eer: float  # unperturbed


def curve_auc(n_grid: Sequence[float], eers: Sequence[float]) -> float:
    n_grid = np.asarray(n_grid, dtype=np.float64)
    if n_grid.size == 1:
        return float(eers[0])
    return float(np.trapezoid(eers, n_grid) / (n_grid[-1] - n_grid[0]))


def perturbation_test(params: ModelParams, utterances: Sequence[Utterance], heatmaps,
                      polarity: str, seed: int = 0, n_grid: Sequence[float] = DEFAULT_N_GRID,
                      threads: int = 1) -> PerturbationCurve:
    """Noise-mask the top (positive) or bottom (negative) fraction of each heatmap
    and track the dataset EER over the fraction grid.

    The noise for an utterance depends on (seed, utterance id, fraction) only,
    so both polarities see the same draws.
    """
    if polarity not in POLARITIES:
        raise ConfigError(f"polarity must be one of {POLARITIES}")
    if not utterances or len(heatmaps) != len(utterances):
        raise DataError("need exactly one heatmap per utterance")
    n_grid = tuple(float(n) for n in n_grid)
    if not n_grid or any(not 0 < n < 1 for n in n_grid) or list(n_grid) != sorted(n_grid):
        raise ConfigError("n grid must be increasing fractions in (0, 1)")
    X = _stack(utterances)
    H = _heatmap_matrix(heatmaps, X.shape[1])
    y = np.array([u.target for u in utterances])
    sr = utterances[0].waveform.sample_rate

    baseline = eer(predict_proba(params, X, threads=threads)[:, 1], y).eer
    eers = []
    for n in n_grid:
        Xm = np.empty_like(X)
        for i, u in enumerate(utterances):
            idx = select_fraction(H[i], n, polarity)
            s = substream_seed(seed, u.id, f"{n:.6f}")
            Xm[i] = noise_mask(Waveform(X[i], sr), idx, s).samples
        eers.append(eer(predict_proba(params, Xm, threads=threads)[:, 1], y).eer)
    return PerturbationCurve(polarity, n_grid, eers, curve_auc(n_grid, eers), baseline)
