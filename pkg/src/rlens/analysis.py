"""Per-sample categories and dataset-level hypothesis metrics (RCQ, RMA, RRA).

RCQ compares the mean relevance inside one category with the mean over every
sample of the chosen subset of utterances:

    S_c   = sum of scores on samples of category c / number of such samples
    RCQ_c = 100 * (S_c - S_all) / S_all

Heatmaps are peak-normalized to [0, 1] first so that every utterance weighs
the same.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from ._util import ConfigError, DataError
from .signal import REGION_NAMES, Utterance, as_samples

SUBSETS = ("all", "bonafide", "spoof")
VAD_NAMES = ("S", "NS")
TERTILE_NAMES = ("NS", "LS", "MS", "HS")


@dataclass(frozen=True, eq=False)
class CategoryMap:
    ids: np.ndarray            # per-sample index into names
    names: tuple[str, ...]

    def __post_init__(self):
        ids = np.array(self.ids, dtype=np.int64)
        names = tuple(self.names)
        if ids.ndim != 1:
            raise DataError("category ids must be 1-D")
        if ids.size and (ids.min() < 0 or ids.max() >= len(names)):
            raise DataError("category id outside the vocabulary")
        ids.setflags(write=False)
        object.__setattr__(self, "ids", ids)
        object.__setattr__(self, "names", names)

    def __len__(self):
        return self.ids.size

    @classmethod
    def from_labels(cls, labels: Sequence[str], names: Sequence[str] | None = None) -> "CategoryMap":
        if names is None:
            names = list(dict.fromkeys(labels))
        index = {n: i for i, n in enumerate(names)}
        try:
            return cls(np.array([index[l] for l in labels], dtype=np.int64), tuple(names))
        except KeyError as e:
            raise DataError(f"label {e} not in vocabulary {tuple(names)}") from None

    def mask(self, name: str) -> np.ndarray:
        return self.ids == self.names.index(name)


# -- category construction ------------------------------------------------------------

def frame_rms(x: np.ndarray, frame: int) -> np.ndarray:
    """RMS of consecutive frames; a trailing partial frame is its own frame."""
    n = math.ceil(x.size / frame)
    padded = np.zeros(n * frame)
    padded[:x.size] = x * x
    counts = np.full(n, frame, dtype=np.float64)
    counts[-1] = x.size - (n - 1) * frame
    return np.sqrt(padded.reshape(n, frame).sum(1) / counts)


def _sample_rate(w, given: int | None) -> int:
    sr = given or getattr(w, "sample_rate", None) or getattr(getattr(w, "waveform", None), "sample_rate", None)
    if not sr:
        raise ConfigError("sample rate required")
    return sr


def energy_vad(w, sample_rate: int | None = None, frame_ms: float = 10.0, theta: float = 2.0,
               hangover: int = 2, abs_gate: float = 0.04) -> CategoryMap:
    """Energy VAD over 10 ms frames.

    A frame is speech when its RMS exceeds ``theta`` times the utterance's
    median frame RMS, or exceeds ``abs_gate`` outright (needed when speech
    fills most of the utterance and the median is itself speech). Speech is
    extended by ``hangover`` frames after every speech frame.
    """
    x = as_samples(w)
    sr = _sample_rate(w, sample_rate)
    frame = max(1, int(round(frame_ms * sr / 1000)))
    rms = frame_rms(x, frame)
    speech = rms > min(theta * np.median(rms), abs_gate)
    if hangover > 0:
        held = speech.copy()
        for k in range(1, hangover + 1):
            held[k:] |= speech[:-k]
        speech = held
    ids = np.where(np.repeat(speech, frame)[:x.size], 0, 1)
    return CategoryMap(ids, VAD_NAMES)


def tertile_boundaries(a_min: float = 1e-3) -> tuple[float, float]:
    """Split [a_min, 1] into three equal intervals in log amplitude."""
    lo = math.log(a_min)
    return math.exp(lo * 2 / 3), math.exp(lo / 3)


def energy_tertiles(w, vad: CategoryMap, sample_rate: int | None = None, frame_ms: float = 10.0,
                    a_min: float = 1e-3) -> CategoryMap:
    """Split VAD speech into low / middle / high energy by frame RMS; NS stays NS."""
    x = as_samples(w)
    sr = _sample_rate(w, sample_rate)
    if len(vad) != x.size:
        raise DataError("VAD map length differs from waveform length")
    frame = max(1, int(round(frame_ms * sr / 1000)))
    rms = np.repeat(frame_rms(x, frame), frame)[:x.size]
    b1, b2 = tertile_boundaries(a_min)
    level = 1 + (rms >= b1).astype(int) + (rms >= b2).astype(int)  # 1 LS, 2 MS, 3 HS
    speech = vad.mask("S")
    return CategoryMap(np.where(speech, level, 0), TERTILE_NAMES)


def region_categories(u: Utterance) -> CategoryMap:
    if u.regions is None:
        raise DataError(f"{u.id} has no region labels")
    return CategoryMap(u.regions.astype(np.int64), REGION_NAMES)


def load_category_file(path, T: int) -> CategoryMap:
    """Read ``start_sample,end_sample,category`` rows (end exclusive) tiling [0, T).

    A header row is allowed. Category names are numbered by first appearance.
    """
    rows = []
    with open(path, newline="") as f:
        for lineno, row in enumerate(csv.reader(f), 1):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != 3:
                raise DataError(f"{path}:{lineno}: expected 3 columns")
            try:
                rows.append((int(row[0]), int(row[1]), row[2].strip()))
            except ValueError:
                if rows or lineno > 1:
                    raise DataError(f"{path}:{lineno}: non-integer sample index") from None
    rows.sort(key=lambda r: r[0])
    pos = 0
    labels: list[str] = []
    for start, end, name in rows:
        if start < 0 or end > T or end <= start:
            raise DataError(f"{path}: segment [{start}, {end}) out of range for T={T}")
        if start > pos:
            raise DataError(f"{path}: gap at [{pos}, {start})")
        if start < pos:
            raise DataError(f"{path}: overlap at sample {start}")
        labels.extend([name] * (end - start))
        pos = end
    if pos != T:
        raise DataError(f"{path}: categories cover [0, {pos}) but T={T}")
    return CategoryMap.from_labels(labels)


# -- RCQ -------------------------------------------------------------------------------

@dataclass
class RcqReport:
    subset: str
    names: tuple[str, ...]
    counts: dict[str, int]
    s_c: dict[str, float]        # absent categories are omitted
    s_all: float
    rcq: dict[str, float]        # percent; absent categories omitted
    normalized: dict[str, float] = field(default_factory=dict)
    degenerate: bool = False

    @property
    def absent(self) -> list[str]:
        return [n for n in self.names if self.counts[n] == 0]


def _select(subset: str, labels) -> np.ndarray | None:
    if subset not in SUBSETS:
        raise ConfigError(f"subset must be one of {SUBSETS}")
    if subset == "all":
        return None
    if labels is None:
        raise ConfigError("labels are required to select a subset")
    targets = np.array([0 if l in (0, "bonafide") else 1 for l in labels])
    return targets == (0 if subset == "bonafide" else 1)


def category_sums(heatmaps, category_maps, normalize: bool = True):
    """Per-category score sums and sample counts over a list of utterances."""
    if len(heatmaps) != len(category_maps):
        raise DataError("need one category map per heatmap")
    if not category_maps:
        raise DataError("no utterances selected")
    names = category_maps[0].names
    V = len(names)
    sums = np.zeros(V)
    counts = np.zeros(V, dtype=np.int64)
    for h, cm in zip(heatmaps, category_maps):
        if cm.names != names:
            raise DataError("category vocabularies differ between utterances")
        s = np.asarray(getattr(h, "scores", h), dtype=np.float64)
        if s.size != len(cm):
            raise DataError("heatmap and category map lengths differ")
        if normalize and s.max(initial=0) > 0:
            s = s / s.max()
        sums += np.bincount(cm.ids, weights=s, minlength=V)
        counts += np.bincount(cm.ids, minlength=V)
    return names, sums, counts


def rcq_from_sums(names, sums, counts, subset: str = "all") -> RcqReport:
    total = counts.sum()
    s_all = float(sums.sum() / total) if total else 0.0
    cnt = {n: int(c) for n, c in zip(names, counts)}
    s_c = {n: float(sums[i] / counts[i]) for i, n in enumerate(names) if counts[i]}
    if s_all == 0:
        return RcqReport(subset, tuple(names), cnt, s_c, s_all, {}, {}, degenerate=True)
    rcq_c = {n: 100.0 * (v - s_all) / s_all for n, v in s_c.items()}
    return normalize_rcq(RcqReport(subset, tuple(names), cnt, s_c, s_all, rcq_c))


def rcq(heatmaps, category_maps, labels=None, subset: str = "all",
        normalize_heatmaps: bool = True) -> RcqReport:
    """RCQ per category over the utterances in ``subset`` (bonafide / spoof / all).

    ``labels`` are per-utterance classes (0/1 or label strings; partial counts
    as spoof) and are needed for the bona fide and spoof subsets.
    """
    sel = _select(subset, labels)
    if sel is not None:
        heatmaps = [h for h, k in zip(heatmaps, sel) if k]
        category_maps = [c for c, k in zip(category_maps, sel) if k]
    names, sums, counts = category_sums(heatmaps, category_maps, normalize_heatmaps)
    return rcq_from_sums(names, sums, counts, subset)


def normalize_rcq(report: RcqReport) -> RcqReport:
    """Divide every RCQ by the largest magnitude in the report (all-zero stays zero)."""
    peak = max((abs(v) for v in report.rcq.values()), default=0.0)
    report.normalized = {n: (v / peak if peak else 0.0) for n, v in report.rcq.items()}
    return report


def rcq_rows(report: RcqReport) -> list[dict]:
    rows = []
    for n in report.names:
        present = n in report.rcq
        rows.append({
            "subset": report.subset,
            "category": n,
            "count": report.counts[n],
            "S_c": report.s_c.get(n, float("nan")),
            "RCQ": report.rcq[n] if present else float("nan"),
            "normalized_RCQ": report.normalized[n] if present else float("nan"),
        })
    return rows


# -- localisation -------------------------------------------------------------------------

def _gt_mask(gt, T: int) -> np.ndarray:
    gt = np.asarray(gt)
    if gt.dtype == bool and gt.size == T:
        return gt
    m = np.zeros(T, dtype=bool)
    m[gt.astype(np.int64)] = True
    return m


def rma(h, gt) -> float | None:
    """Share of the total relevance mass inside the ground-truth samples.

    ``gt`` is a boolean mask or an index set. None for an all-zero heatmap.
    """
    s = np.asarray(getattr(h, "scores", h), dtype=np.float64)
    total = s.sum()
    if total == 0:
        return None
    return float(s[_gt_mask(gt, s.size)].sum() / total)


def rra(h, gt) -> float:
    """Fraction of the |GT| top-ranked samples that fall inside GT (ties by index)."""
    s = np.asarray(getattr(h, "scores", h), dtype=np.float64)
    mask = _gt_mask(gt, s.size)
    K = int(mask.sum())
    if K == 0:
        raise DataError("empty ground-truth region")
    top = np.lexsort((np.arange(s.size), -s))[:K]
    return float(mask[top].mean())


@dataclass
class LocalizationReport:
    n: int
    rma: float
    rra: float
    baseline_rma: float   # mean ground-truth fraction: RMA of a uniform heatmap
    skipped: int = 0      # degenerate heatmaps


def localization(heatmaps, utterances: Sequence[Utterance], selected=None) -> LocalizationReport:
    """Mean RMA / RRA over partial utterances, spoof regions as ground truth.

    ``selected`` optionally restricts to a subset (e.g. utterances the
    classifier predicts as spoof).
    """
    rmas, rras, base = [], [], []
    skipped = 0
    for i, (h, u) in enumerate(zip(heatmaps, utterances)):
        if u.regions is None or (selected is not None and not selected[i]):
            continue
        gt = u.regions == 1
        m = rma(h, gt)
        if m is None:
            skipped += 1
            continue
        rmas.append(m)
        rras.append(rra(h, gt))
        base.append(gt.mean())
    if not rmas:
        raise DataError("no partial utterances with usable heatmaps")
    return LocalizationReport(len(rmas), float(np.mean(rmas)), float(np.mean(rras)),
                              float(np.mean(base)), skipped)
