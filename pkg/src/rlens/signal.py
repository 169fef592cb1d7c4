"""Waveforms, synthetic bona fide / spoof / partial-spoof generation, and dataset I/O.

The generator plants a known artifact in spoofed speech so that attributions
can be checked against ground truth:

* bona fide: harmonic bursts with a randomised f0 contour, per-period f0 jitter
  and random harmonic phases, separated by a low-level noise floor;
* spoof: the same bursts rendered with zero jitter and zero harmonic phases,
  plus a fixed-frequency low-amplitude tone inside every voiced segment.

Partial-spoof utterances splice the two renderings of one structure together,
so the region labels are the only difference between the halves.
"""

from __future__ import annotations

import dataclasses
import json
import wave
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy.signal.windows import tukey

from ._util import ConfigError, DataError, rng_for, substream_seed

LABELS = ("bonafide", "spoof", "partial")
BR, SR = 0, 1
REGION_NAMES = ("BR", "SR")
MANIFEST_VERSION = 1


@dataclass(frozen=True, eq=False)
class Waveform:
    samples: np.ndarray
    sample_rate: int
    degenerate: bool = False

    def __post_init__(self):
        x = np.array(self.samples, dtype=np.float64)
        if x.ndim != 1 or x.size < 1:
            raise DataError("waveform must be a non-empty 1-D sequence")
        if not np.all(np.isfinite(x)):
            raise DataError("waveform contains non-finite samples")
        if int(self.sample_rate) <= 0:
            raise DataError("sample_rate must be positive")
        x.setflags(write=False)
        object.__setattr__(self, "samples", x)
        object.__setattr__(self, "sample_rate", int(self.sample_rate))

    def __len__(self):
        return self.samples.size

    @property
    def duration(self) -> float:
        return self.samples.size / self.sample_rate


@dataclass(frozen=True, eq=False)
class Utterance:
    id: str
    waveform: Waveform
    label: str
    regions: np.ndarray | None = None
    # generator metadata, not persisted
    voiced: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.label not in LABELS:
            raise DataError(f"unknown label {self.label!r}")
        T = len(self.waveform)
        if (self.regions is not None) != (self.label == "partial"):
            raise DataError("region labels must be present exactly for partial utterances")
        if self.regions is not None:
            r = np.array(self.regions, dtype=np.uint8)
            if r.shape != (T,):
                raise DataError(f"{self.id}: region length {r.size} != waveform length {T}")
            if r.max(initial=0) > SR:
                raise DataError(f"{self.id}: region labels must be 0 (BR) or 1 (SR)")
            r.setflags(write=False)
            object.__setattr__(self, "regions", r)

    @property
    def target(self) -> int:
        """Binary class: 0 bona fide, 1 spoof (partial utterances count as spoof)."""
        return 0 if self.label == "bonafide" else 1

    @property
    def samples(self) -> np.ndarray:
        return self.waveform.samples


@dataclass(frozen=True)
class GeneratorSpec:
    sample_rate: int = 4000
    n_samples: int = 4000
    voiced_ms: tuple[float, float] = (100.0, 400.0)
    gap_ms: tuple[float, float] = (60.0, 250.0)
    silence_rms: float = 0.01
    f0_hz: tuple[float, float] = (90.0, 220.0)
    jitter: float = 0.03
    tilt: float = 1.0
    burst_amp: tuple[float, float] = (0.4, 1.0)
    tone_hz: float = 1700.0
    tone_amp: float = 0.1
    n_segments: int = 4
    spoof_fraction: float = 0.5
    crossfade_ms: float = 5.0

    def validate(self) -> "GeneratorSpec":
        if self.n_samples <= 0 or self.sample_rate <= 0:
            raise ConfigError("generator needs n_samples > 0 and sample_rate > 0")
        if not 0 < self.voiced_ms[0] <= self.voiced_ms[1]:
            raise ConfigError("voiced_ms must be an increasing positive range")
        if not 0 <= self.gap_ms[0] <= self.gap_ms[1]:
            raise ConfigError("gap_ms must be an increasing non-negative range")
        if not 0 < self.f0_hz[0] <= self.f0_hz[1] < self.sample_rate / 2:
            raise ConfigError("f0 range must lie below Nyquist")
        if not 0 < self.tone_hz < self.sample_rate / 2:
            raise ConfigError("tone_hz must lie below Nyquist")
        if self.n_segments < 2:
            raise ConfigError("partial utterances need at least 2 segments")
        if not 0 < self.spoof_fraction < 1:
            raise ConfigError("spoof_fraction must lie in (0, 1)")
        return self

    @property
    def crossfade(self) -> int:
        return int(round(self.crossfade_ms * self.sample_rate / 1000))

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "GeneratorSpec":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown generator fields: {sorted(unknown)}")
        d = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}
        return cls(**d)


@dataclass(frozen=True)
class DatasetEntry:
    id: str
    audio: str
    label: str
    regions: str | None = None


@dataclass(frozen=True)
class DatasetManifest:
    sample_rate: int
    seed: int
    entries: tuple[DatasetEntry, ...]
    generator: dict | None = None
    root: Path | None = None

    def __post_init__(self):
        ids = [e.id for e in self.entries]
        if len(set(ids)) != len(ids):
            raise DataError("manifest ids are not unique")


def as_samples(w) -> np.ndarray:
    if isinstance(w, Waveform):
        return w.samples
    if isinstance(w, Utterance):
        return w.waveform.samples
    return np.asarray(w, dtype=np.float64)


def peak_normalize(w: Waveform) -> Waveform:
    """Scale so that the largest absolute sample is 1.

    An all-zero waveform comes back unchanged with ``degenerate=True``.
    """
    x = w.samples
    peak = np.max(np.abs(x))
    if peak == 0:
        return Waveform(x, w.sample_rate, degenerate=True)
    return Waveform(x / peak, w.sample_rate)


def _f32(w: Waveform) -> Waveform:
    # float32-representable so that save/load round-trips exactly
    return Waveform(w.samples.astype(np.float32).astype(np.float64), w.sample_rate, w.degenerate)


# -- generation ---------------------------------------------------------------

def _structure(spec: GeneratorSpec, rng: np.random.Generator):
    """Random voiced-segment layout shared by the bona fide and spoof renderings."""
    T, fs = spec.n_samples, spec.sample_rate
    ms = fs / 1000.0
    segments = []
    pos = int(rng.uniform(*spec.gap_ms) * ms)
    while pos < T:
        n = int(rng.uniform(*spec.voiced_ms) * ms)
        n = min(n, T - pos)
        if n >= 8:
            f0a, f0b = rng.uniform(*spec.f0_hz, size=2)
            segments.append(dict(
                start=pos, n=n, f0=(f0a, f0b),
                amp=rng.uniform(*spec.burst_amp),
                taper=rng.uniform(0.3, 0.8),
            ))
        pos += n + int(rng.uniform(*spec.gap_ms) * ms)
    noise = rng.standard_normal(T) * spec.silence_rms
    return segments, noise


def _burst(seg: dict, spec: GeneratorSpec, spoof: bool, rng: np.random.Generator) -> np.ndarray:
    n, fs = seg["n"], spec.sample_rate
    f0 = np.linspace(seg["f0"][0], seg["f0"][1], n)
    if not spoof and spec.jitter > 0:
        nominal = np.cumsum(f0 / fs)
        period = np.floor(nominal).astype(int)
        jit = 1.0 + spec.jitter * rng.standard_normal(period[-1] + 1)
        f0 = f0 * jit[period]
    phase = 2 * np.pi * np.cumsum(f0 / fs)
    n_harm = max(1, int(0.45 * fs / max(seg["f0"])))
    k = np.arange(1, n_harm + 1)
    offsets = np.zeros(n_harm) if spoof else rng.uniform(0, 2 * np.pi, n_harm)
    h = (k ** -spec.tilt)[:, None] * np.sin(k[:, None] * phase[None, :] + offsets[:, None])
    h = h.sum(axis=0)
    return h / np.max(np.abs(h))


def _render(spec: GeneratorSpec, structure, spoof: bool, rng: np.random.Generator):
    segments, noise = structure
    T, fs = spec.n_samples, spec.sample_rate
    x = noise.copy()
    voiced = np.zeros(T, dtype=bool)
    t = np.arange(T)
    tone = np.sin(2 * np.pi * spec.tone_hz * t / fs)
    for seg in segments:
        s, n = seg["start"], seg["n"]
        env = seg["amp"] * tukey(n, seg["taper"])
        burst = _burst(seg, spec, spoof, rng)
        if spoof:
            burst = burst + spec.tone_amp * tone[s:s + n]
        x[s:s + n] += env * burst
        voiced[s:s + n] = True
    return x, voiced


def synth_utterance(spec: GeneratorSpec, cls: str, seed: int, id: str | None = None) -> Utterance:
    """Synthesize one bona fide or spoof utterance, peak-normalized.

    Bona fide and spoof renderings with the same seed share their segment
    layout, f0 contours, envelopes and noise floor.
    """
    spec.validate()
    if cls not in ("bonafide", "spoof"):
        raise ConfigError(f"class must be 'bonafide' or 'spoof', got {cls!r}")
    structure = _structure(spec, rng_for(seed, "structure"))
    x, voiced = _render(spec, structure, cls == "spoof", rng_for(seed, "fine"))
    w = _f32(peak_normalize(Waveform(x, spec.sample_rate)))
    return Utterance(id or f"{cls}-{seed}", w, cls, voiced=voiced)


def segment_kinds(spec: GeneratorSpec, rng: np.random.Generator) -> list[int]:
    n = spec.n_segments
    k_sr = int(np.clip(round(spec.spoof_fraction * n), 1, n - 1))
    kinds = np.zeros(n, dtype=int)
    kinds[rng.permutation(n)[:k_sr]] = SR
    return kinds.tolist()


def synth_partial(spec: GeneratorSpec, seed: int, id: str | None = None,
                  kinds: Sequence[int] | None = None) -> Utterance:
    """Splice bona fide and spoof renderings of one structure into a partial spoof.

    The utterance is cut into ``len(kinds)`` equal segments (the remainder goes
    to the last one). Adjacent segments of different kind are joined with a
    linear crossfade centred on the boundary; every sample keeps the label of
    the segment it belongs to.
    """
    spec.validate()
    T = spec.n_samples
    if kinds is None:
        kinds = segment_kinds(spec, rng_for(seed, "kinds"))
    kinds = [int(k) for k in kinds]
    if len(kinds) < 2 or set(kinds) != {BR, SR}:
        raise ConfigError("partial utterances need >= 2 segments with both BR and SR")
    n_seg = len(kinds)
    L = T // n_seg
    if L < 1:
        raise ConfigError("too many segments for n_samples")
    bounds = [i * L for i in range(n_seg)] + [T]
    regions = np.empty(T, dtype=np.uint8)
    for i, kind in enumerate(kinds):
        regions[bounds[i]:bounds[i + 1]] = kind

    # mixing weight: 1 selects the spoof rendering
    mix = regions.astype(np.float64)
    cf = spec.crossfade
    if cf > 0:
        for i in range(1, n_seg):
            if kinds[i] == kinds[i - 1]:
                continue
            b = bounds[i]
            lo, hi = max(0, b - cf // 2), min(T, b + cf - cf // 2)
            ramp = (np.arange(lo, hi) - (b - cf / 2) + 0.5) / cf
            mix[lo:hi] = ramp if kinds[i] == SR else 1.0 - ramp

    structure = _structure(spec, rng_for(seed, "structure"))
    bona, voiced = _render(spec, structure, False, rng_for(seed, "fine"))
    spoof, _ = _render(spec, structure, True, rng_for(seed, "fine"))
    x = (1.0 - mix) * bona + mix * spoof
    w = _f32(peak_normalize(Waveform(x, spec.sample_rate)))
    return Utterance(id or f"partial-{seed}", w, "partial", regions=regions, voiced=voiced)


def synth_split(spec: GeneratorSpec, seed: int, n_bonafide: int = 0, n_spoof: int = 0,
                n_partial: int = 0, prefix: str = "") -> list[Utterance]:
    """Generate a list of utterances; each draws from its own id-keyed seed."""
    out = []
    for cls, count in (("bonafide", n_bonafide), ("spoof", n_spoof), ("partial", n_partial)):
        for i in range(count):
            uid = f"{prefix}{cls}_{i:05d}"
            s = substream_seed(seed, uid)
            if cls == "partial":
                out.append(synth_partial(spec, s, id=uid))
            else:
                out.append(synth_utterance(spec, cls, s, id=uid))
    return out


# -- masking / modulation -------------------------------------------------------

def noise_mask(w: Waveform, indices: Iterable[int], seed: int) -> Waveform:
    """Replace ``indices`` with Gaussian noise of zero mean and the waveform's variance."""
    x = w.samples
    idx = np.unique(np.asarray(list(indices) if not isinstance(indices, np.ndarray) else indices,
                               dtype=np.int64))
    if idx.size == 0:
        return w
    if idx[0] < 0 or idx[-1] >= x.size:
        raise DataError("mask indices out of range")
    rng = np.random.default_rng(seed)
    y = x.copy()
    y[idx] = rng.normal(0.0, np.sqrt(np.var(x)), size=idx.size)
    return Waveform(y, w.sample_rate)


def apply_heatmap(w: Waveform, h) -> Waveform:
    """Elementwise product of the waveform with a (peak-normalized) heatmap."""
    scores = np.asarray(getattr(h, "scores", h), dtype=np.float64)
    if scores.shape != w.samples.shape:
        raise DataError(f"heatmap length {scores.size} != waveform length {w.samples.size}")
    y = w.samples * scores
    return Waveform(y, w.sample_rate, degenerate=not np.any(y))


# -- persistence ----------------------------------------------------------------

def write_f32(path: Path, x: np.ndarray) -> None:
    Path(path).write_bytes(np.asarray(x, dtype="<f4").tobytes())


def read_f32(path: Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) % 4:
        raise DataError(f"{path}: size {len(raw)} is not a multiple of 4 bytes")
    return np.frombuffer(raw, dtype="<f4").astype(np.float64)


def save_dataset(utterances: Sequence[Utterance], directory, seed: int,
                 generator: GeneratorSpec | dict | None = None) -> Path:
    """Write audio/region files and ``manifest.json``; returns the manifest path.

    Samples are stored as float32, so only float32-representable waveforms
    round-trip bit-exactly (generated data is rounded on save).
    """
    root = Path(directory)
    (root / "audio").mkdir(parents=True, exist_ok=True)
    rates = {u.waveform.sample_rate for u in utterances}
    if len(rates) > 1:
        raise DataError("all utterances in a dataset must share a sample rate")
    entries = []
    for u in sorted(utterances, key=lambda u: u.id):
        audio = f"audio/{u.id}.f32"
        write_f32(root / audio, u.samples)
        entry = {"id": u.id, "audio": audio, "label": u.label}
        if u.regions is not None:
            (root / "regions").mkdir(exist_ok=True)
            entry["regions"] = f"regions/{u.id}.u8"
            (root / entry["regions"]).write_bytes(u.regions.astype(np.uint8).tobytes())
        entries.append(entry)
    if isinstance(generator, GeneratorSpec):
        generator = generator.to_dict()
    manifest = {
        "version": MANIFEST_VERSION,
        "sample_rate": rates.pop() if rates else 0,
        "seed": int(seed),
        "entries": entries,
    }
    if generator is not None:
        manifest["generator"] = generator
    path = root / "manifest.json"
    path.write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return path


def read_manifest(path) -> DatasetManifest:
    path = Path(path)
    try:
        d = json.loads(path.read_text())
    except FileNotFoundError as e:
        raise DataError(f"manifest not found: {path}") from e
    except json.JSONDecodeError as e:
        raise DataError(f"malformed manifest {path}: {e}") from e
    try:
        if d["version"] != MANIFEST_VERSION:
            raise DataError(f"unsupported manifest version {d['version']}")
        entries = tuple(
            DatasetEntry(e["id"], e["audio"], e["label"], e.get("regions")) for e in d["entries"]
        )
        return DatasetManifest(int(d["sample_rate"]), int(d["seed"]), entries,
                               d.get("generator"), path.parent)
    except (KeyError, TypeError) as e:
        raise DataError(f"malformed manifest {path}: missing {e}") from e


def load_dataset(path) -> tuple[DatasetManifest, list[Utterance]]:
    manifest = read_manifest(path)
    root = manifest.root
    utts = []
    for e in manifest.entries:
        apath = root / e.audio
        if not apath.exists():
            raise DataError(f"missing audio file {apath}")
        x = read_f32(apath)
        regions = None
        if e.regions is not None:
            rpath = root / e.regions
            if not rpath.exists():
                raise DataError(f"missing region file {rpath}")
            regions = np.frombuffer(rpath.read_bytes(), dtype=np.uint8)
            if regions.size != x.size:
                raise DataError(f"{e.id}: region file length {regions.size} != audio length {x.size}")
        utts.append(Utterance(e.id, Waveform(x, manifest.sample_rate), e.label, regions))
    return manifest, utts


def export_wav(w: Waveform, path) -> None:
    """16-bit PCM mono WAV, for listening only."""
    pcm = np.clip(np.round(w.samples * 32767), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as f:
        f.setnchannels(1)
        f.setsampwidth(2)
        f.setframerate(w.sample_rate)
        f.writeframes(pcm.tobytes())
