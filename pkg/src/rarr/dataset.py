"""Corpus construction: manifests, windowing, balancing, leakage-safe splits,
and a seeded two-modality synthetic generator."""

from __future__ import annotations

import dataclasses
import enum
import hashlib
import json
import logging
import weakref
from collections import Counter, defaultdict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from . import rng
from .signal_core import (
    NEAR_SURFACE_FRONT_END,
    ON_SURFACE_FRONT_END,
    FrontEndConfig,
    Waveform,
    featurize,
    read_wav,
    window,
)

log = logging.getLogger(__name__)


class DatasetError(ValueError):
    pass


class ActivityLabel(str, enum.Enum):
    WALKING = "walking"
    SHOWERING = "showering"
    MEDICATION_INTAKE = "medication_intake"
    MEDICATION_REFILLING = "medication_refilling"

    @property
    def index(self) -> int:
        return LABELS.index(self)


LABELS: tuple[ActivityLabel, ...] = tuple(ActivityLabel)


class Modality(str, enum.Enum):
    NEAR_SURFACE_AUDIO = "near_surface_audio"
    ON_SURFACE_VIBRATION = "on_surface_vibration"


def front_end_for(modality: Modality) -> FrontEndConfig:
    if Modality(modality) is Modality.NEAR_SURFACE_AUDIO:
        return NEAR_SURFACE_FRONT_END
    return ON_SURFACE_FRONT_END


@dataclass(frozen=True, eq=False)
class LabeledClip:
    waveform: Waveform
    label: ActivityLabel
    modality: Modality
    source_id: str
    participant_id: Optional[str] = None
    clip_start_s: float = 0.0

    def __post_init__(self):
        if not self.source_id:
            raise DatasetError("source_id must be non-empty")
        object.__setattr__(self, "label", ActivityLabel(self.label))
        object.__setattr__(self, "modality", Modality(self.modality))


# --------------------------------------------------------------------------
# manifest
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class ManifestEntry:
    path: str
    label: ActivityLabel
    modality: Modality
    source_id: str
    participant_id: Optional[str] = None
    search_terms: tuple[str, ...] = ()

    def to_record(self) -> dict:
        return {
            "path": self.path,
            "label": self.label.value,
            "modality": self.modality.value,
            "source_id": self.source_id,
            "participant_id": self.participant_id,
            "search_terms": list(self.search_terms),
        }


@dataclass(frozen=True)
class Manifest:
    entries: tuple[ManifestEntry, ...]
    root: Path = Path(".")

    def __post_init__(self):
        paths = [e.path for e in self.entries]
        dupes = sorted(p for p, n in Counter(paths).items() if n > 1)
        if dupes:
            raise DatasetError(f"duplicate manifest paths: {dupes}")

    @property
    def digest(self) -> str:
        h = hashlib.sha256()
        for e in self.entries:
            h.update(json.dumps(e.to_record(), sort_keys=True).encode())
            h.update(b"\n")
        return h.hexdigest()

    def resolve(self, entry: ManifestEntry) -> Path:
        p = Path(entry.path)
        return p if p.is_absolute() else self.root / p

    def check_pretraining(self, min_sources: int = 3) -> None:
        """Require ``min_sources`` distinct recordings for every label."""
        per_label = defaultdict(set)
        for e in self.entries:
            per_label[e.label].add(e.source_id)
        short = [
            f"{lab.value} ({len(per_label[lab])})"
            for lab in LABELS
            if len(per_label[lab]) < min_sources
        ]
        if short:
            raise DatasetError(
                f"pretraining manifest needs >= {min_sources} sources per label; short: {short}"
            )


def load_manifest(path: str | Path) -> Manifest:
    """Read a JSON-lines manifest (one record per line, blank lines ignored)."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise DatasetError(f"cannot read manifest {path}: {exc}") from exc
    entries = []
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            entry = ManifestEntry(
                path=str(rec["path"]),
                label=ActivityLabel(rec["label"]),
                modality=Modality(rec["modality"]),
                source_id=str(rec["source_id"]),
                participant_id=rec.get("participant_id"),
                search_terms=tuple(rec.get("search_terms") or ()),
            )
        except (KeyError, ValueError, TypeError) as exc:
            raise DatasetError(f"{path}:{lineno}: bad manifest record ({exc})") from exc
        if not entry.source_id:
            raise DatasetError(f"{path}:{lineno}: empty source_id")
        entries.append(entry)
    return Manifest(tuple(entries), root=path.parent)


def write_manifest(manifest: Manifest, path: str | Path) -> None:
    with open(path, "w") as fh:
        for e in manifest.entries:
            fh.write(json.dumps(e.to_record()) + "\n")


# --------------------------------------------------------------------------
# corpus
# --------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class Corpus:
    clips: tuple[LabeledClip, ...]
    modality: Modality
    provenance: str = ""
    skipped: int = 0

    def __post_init__(self):
        object.__setattr__(self, "clips", tuple(self.clips))
        object.__setattr__(self, "modality", Modality(self.modality))
        bad = [c.source_id for c in self.clips if c.modality is not self.modality]
        if bad:
            raise DatasetError(f"clips from {sorted(set(bad))} do not match corpus modality")

    def __len__(self) -> int:
        return len(self.clips)

    @property
    def class_counts(self) -> dict[ActivityLabel, int]:
        counts = Counter(c.label for c in self.clips)
        return {lab: counts[lab] for lab in LABELS if counts[lab]}

    @property
    def labels(self) -> np.ndarray:
        return np.array([c.label.index for c in self.clips], dtype=np.int64)

    @property
    def participants(self) -> list[str]:
        return sorted({c.participant_id for c in self.clips if c.participant_id is not None})

    @cached_property
    def digest(self) -> str:
        h = hashlib.sha256(self.modality.value.encode())
        for c in self.clips:
            meta = [c.label.value, c.source_id, c.participant_id, repr(c.clip_start_s),
                    repr(float(c.waveform.sample_rate)), str(c.waveform.samples.dtype)]
            h.update(json.dumps(meta).encode())
            h.update(np.ascontiguousarray(c.waveform.samples).tobytes())
        return h.hexdigest()

    def subset(self, keep: Iterable[int]) -> "Corpus":
        return Corpus(tuple(self.clips[i] for i in keep), self.modality, self.provenance)

    def where(self, pred) -> "Corpus":
        return self.subset(i for i, c in enumerate(self.clips) if pred(c))

    def for_participants(self, ids: Sequence[str]) -> "Corpus":
        ids = set(ids)
        return self.where(lambda c: c.participant_id in ids)


def _ingest_entry(manifest: Manifest, entry: ManifestEntry, fe: FrontEndConfig):
    path = manifest.resolve(entry)
    if not path.is_file():
        raise DatasetError(f"cannot read {path}: no such file")
    try:
        wav = read_wav(path)
    except Exception as exc:  # scipy raises several unrelated types
        raise DatasetError(f"cannot decode {path}: {exc}") from exc
    return [
        LabeledClip(w, entry.label, entry.modality, entry.source_id, entry.participant_id, w.start_s)
        for w in window(wav, fe.win_s, fe.hop_s)
    ]


def ingest(manifest: Manifest, front_end: Optional[FrontEndConfig] = None, workers: int = 1) -> Corpus:
    """Window every manifest recording into labeled clips.

    Recordings shorter than one window contribute nothing and are counted in
    ``Corpus.skipped``. Results are merged in manifest order regardless of
    ``workers``.
    """
    modalities = {e.modality for e in manifest.entries}
    if len(modalities) != 1:
        raise DatasetError(f"manifest must hold exactly one modality, found {sorted(m.value for m in modalities)}")
    modality = modalities.pop()
    fe = front_end or front_end_for(modality)
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            parts = list(pool.map(lambda e: _ingest_entry(manifest, e, fe), manifest.entries))
    else:
        parts = [_ingest_entry(manifest, e, fe) for e in manifest.entries]
    skipped = sum(1 for p in parts if not p)
    if skipped:
        log.warning("%d source(s) shorter than one %.1f s window were skipped", skipped, fe.win_s)
    clips = tuple(c for p in parts for c in p)
    return Corpus(clips, modality, provenance=manifest.digest, skipped=skipped)


def balance(c: Corpus, seed: int, labels: Sequence[ActivityLabel] = LABELS) -> Corpus:
    """Downsample every label to the smallest class count (order preserved)."""
    by_label = defaultdict(list)
    for i, clip in enumerate(c.clips):
        by_label[clip.label].append(i)
    missing = [lab.value for lab in labels if not by_label[lab]]
    if missing:
        raise DatasetError(f"labels with zero clips: {missing}")
    n_min = min(len(by_label[lab]) for lab in labels)
    keep = []
    for lab in labels:
        idx = by_label[lab]
        g = rng.stream(seed, "balance", lab.value)
        keep.extend(np.asarray(idx)[np.sort(g.choice(len(idx), n_min, replace=False))])
    return Corpus(tuple(c.clips[i] for i in sorted(keep)), c.modality, c.provenance, c.skipped)


def _round_half_up(x: float) -> int:
    return int(np.floor(x + 0.5))


def split(c: Corpus, train_fraction: float, seed: int) -> tuple[Corpus, Corpus]:
    """Source-level split: every window of a recording lands on one side."""
    if not 0 < train_fraction < 1:
        raise DatasetError(f"train_fraction must be in (0, 1), got {train_fraction}")
    source_label = {}
    for clip in c.clips:
        prev = source_label.setdefault(clip.source_id, clip.label)
        if prev is not clip.label:
            raise DatasetError(f"source {clip.source_id!r} carries two labels")
    sources = defaultdict(list)
    for sid, lab in sorted(source_label.items()):
        sources[lab].append(sid)
    single = [lab.value for lab, s in sources.items() if len(s) < 2]
    if single:
        raise DatasetError(f"labels with a single source cannot be split without leakage: {single}")
    train_ids = set()
    for lab in LABELS:
        if lab not in sources:
            continue
        ids = sources[lab]
        n_train = min(max(_round_half_up(len(ids) * train_fraction), 1), len(ids) - 1)
        order = rng.stream(seed, "split", lab.value).permutation(len(ids))
        train_ids.update(ids[i] for i in order[:n_train])
    train = c.where(lambda clip: clip.source_id in train_ids)
    val = c.where(lambda clip: clip.source_id not in train_ids)
    return train, val


# clip -> {front end: canonical grid}; clips are immutable so entries never go stale
_FEATURE_CACHE: "weakref.WeakKeyDictionary[LabeledClip, dict]" = weakref.WeakKeyDictionary()


def corpus_features(c: Corpus, front_end: Optional[FrontEndConfig] = None, workers: int = 1) -> np.ndarray:
    """Canonical spectrograms for every clip, shape (N, F, T) float32."""
    fe = front_end or front_end_for(c.modality)
    if not c.clips:
        return np.zeros((0, *fe.shape), dtype=np.float32)

    def fn(clip):
        per_clip = _FEATURE_CACHE.setdefault(clip, {})
        if fe not in per_clip:
            per_clip[fe] = featurize(clip.waveform, fe)
        return per_clip[fe]

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            feats = list(pool.map(fn, c.clips))
    else:
        feats = [fn(clip) for clip in c.clips]
    return np.stack(feats)


# --------------------------------------------------------------------------
# archive
# --------------------------------------------------------------------------


def save_corpus(c: Corpus, path: str | Path) -> str:
    """Write ``c`` to an ``.npz`` archive and return its digest.

    Overlapping windows of one recording are stored once as a contiguous span
    and sliced back apart on load.
    """
    groups = defaultdict(list)
    for i, clip in enumerate(c.clips):
        groups[(clip.source_id, clip.participant_id, clip.label, clip.waveform.sample_rate)].append(i)
    arrays, clip_meta, spans = {}, [None] * len(c.clips), []
    for g, (key, idx) in enumerate(groups.items()):
        sr = key[3]
        t0 = min(c.clips[i].clip_start_s for i in idx)
        offsets = [int(round((c.clips[i].clip_start_s - t0) * sr)) for i in idx]
        end = max(o + len(c.clips[i].waveform.samples) for o, i in zip(offsets, idx))
        span = np.zeros(end, dtype=c.clips[idx[0]].waveform.samples.dtype)
        for o, i in zip(offsets, idx):
            span[o : o + len(c.clips[i].waveform.samples)] = c.clips[i].waveform.samples
        arrays[f"span_{g}"] = span
        spans.append({"sample_rate": sr, "t0": t0})
        for o, i in zip(offsets, idx):
            clip = c.clips[i]
            clip_meta[i] = {
                "span": g,
                "offset": o,
                "length": len(clip.waveform.samples),
                "label": clip.label.value,
                "source_id": clip.source_id,
                "participant_id": clip.participant_id,
                "clip_start_s": clip.clip_start_s,
            }
    meta = {
        "format": "rarr-corpus/1",
        "modality": c.modality.value,
        "provenance": c.provenance,
        "skipped": c.skipped,
        "digest": c.digest,
        "spans": spans,
        "clips": clip_meta,
    }
    with open(path, "wb") as fh:
        np.savez(fh, __meta__=np.array(json.dumps(meta)), **arrays)
    return c.digest


def load_corpus(path: str | Path) -> Corpus:
    path = Path(path)
    if not path.is_file():
        raise DatasetError(f"corpus archive not found: {path}")
    with np.load(path, allow_pickle=False) as z:
        meta = json.loads(str(z["__meta__"]))
        spans = [z[f"span_{g}"] for g in range(len(meta["spans"]))]
    clips = []
    for m in meta["clips"]:
        sr = meta["spans"][m["span"]]["sample_rate"]
        samples = spans[m["span"]][m["offset"] : m["offset"] + m["length"]]
        samples.setflags(write=False)
        clips.append(
            LabeledClip(
                Waveform(samples, sr, start_s=m["clip_start_s"]),
                ActivityLabel(m["label"]),
                Modality(meta["modality"]),
                m["source_id"],
                m["participant_id"],
                m["clip_start_s"],
            )
        )
    corpus = Corpus(tuple(clips), Modality(meta["modality"]), meta["provenance"], meta["skipped"])
    if corpus.digest != meta["digest"]:
        raise DatasetError(f"{path}: digest mismatch, archive is corrupt")
    return corpus


# --------------------------------------------------------------------------
# synthetic two-modality generator
# --------------------------------------------------------------------------

# Each label has several "modes" (ways of performing the activity, e.g.
# different footwear or shower fittings), each a pair of near-surface tone
# frequencies in Hz. The 16 tones are evenly spaced (about 7 spectrogram
# rows apart) between 300 Hz and 7 kHz, and no tone is shared between modes.
DEFAULT_LABEL_FREQS = {
    ActivityLabel.WALKING.value: ((300.0, 3870.0), (2090.0, 5660.0)),
    ActivityLabel.SHOWERING.value: ((750.0, 4320.0), (2530.0, 6110.0)),
    ActivityLabel.MEDICATION_INTAKE.value: ((1190.0, 4770.0), (2980.0, 6550.0)),
    ActivityLabel.MEDICATION_REFILLING.value: ((1640.0, 5210.0), (3430.0, 7000.0)),
}


def _modes(freqs) -> tuple[tuple[float, ...], ...]:
    """Accept either one signature (flat sequence) or a sequence of them."""
    freqs = tuple(freqs)
    if freqs and not isinstance(freqs[0], (tuple, list)):
        freqs = (freqs,)
    return tuple(tuple(float(f) for f in mode) for mode in freqs)


@dataclass(frozen=True)
class SynthConfig:
    """Controls for the synthetic near-surface / on-surface corpora.

    Every label is a sum of sines gated by a burst envelope. ``label_freqs``
    maps a label to one or more modes, each a tuple of near-surface
    frequencies. Near-surface creators cycle through all modes of a label;
    each on-surface participant performs every activity in one seeded mode.

    ``variance_scale`` multiplies all per-source and per-participant jitter
    (frequency scaling, component gains, spectral tilt, phase and burst
    timing). At 0 every source uses the label's first mode, so same-label
    sources differ only in noise.
    On-surface frequencies are ``f * freq_scale + freq_shift_hz`` and gains
    are tilted by ``(f_on / tilt_ref_hz) ** gain_tilt``.
    """

    n_sources_near: int = 12
    n_participants: int = 4
    n_sources_on: int = 2
    source_duration_s: float = 60.0
    near_rate: float = 16000.0
    on_rate: float = 512.0
    label_freqs: dict = field(default_factory=lambda: dict(DEFAULT_LABEL_FREQS))
    variance_scale: float = 0.01  # larger jitter moves one-row tones and blurs the 1-NN oracle
    within_participant_scale: float = 0.25
    freq_scale: float = 0.032
    freq_shift_hz: float = 0.0
    gain_tilt: float = -1.0
    tilt_ref_hz: float = 100.0
    noise_floor: float = 0.005
    burst_period_s: float = 2.5  # divides the 15 s window hop, so every window starts in phase
    burst_duty: float = 0.5
    seed: int = 0

    def modes(self, label: str) -> tuple[tuple[float, ...], ...]:
        return _modes(self.label_freqs[label])

    def validate(self) -> None:
        for name in ("n_sources_near", "n_participants", "n_sources_on"):
            if getattr(self, name) < 1:
                raise DatasetError(f"{name} must be >= 1")
        if self.source_duration_s <= 0 or self.near_rate <= 0 or self.on_rate <= 0:
            raise DatasetError("durations and sample rates must be positive")
        if self.variance_scale < 0 or self.noise_floor < 0:
            raise DatasetError("variance_scale and noise_floor must be >= 0")
        missing = [lab.value for lab in LABELS if lab.value not in self.label_freqs]
        if missing:
            raise DatasetError(f"label_freqs lacks labels {missing}")
        sigs = defaultdict(set)
        for lab in self.label_freqs:
            modes = self.modes(lab)
            if not modes or not all(modes):
                raise DatasetError(f"label {lab} has no frequencies")
            for mode in modes:
                sigs[tuple(sorted(mode))].add(lab)
        clash = [sorted(labs) for labs in sigs.values() if len(labs) > 1]
        if clash:
            raise DatasetError(f"labels share identical frequency signatures: {clash}")
        top = max(max(mode) for lab in self.label_freqs for mode in self.modes(lab))
        if top >= self.near_rate / 2:
            raise DatasetError("label frequency above the near-surface Nyquist limit")
        if top * self.freq_scale + self.freq_shift_hz >= self.on_rate / 2:
            raise DatasetError("transformed frequency above the on-surface Nyquist limit")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["label_freqs"] = {k: [list(m) for m in self.modes(k)] for k in sorted(self.label_freqs)}
        return d

    @property
    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()


@dataclass(frozen=True)
class _Jitter:
    freq_mult: float
    gains: np.ndarray
    tilt: float
    phases: np.ndarray
    burst_offset: float

    @classmethod
    def draw(cls, g: np.random.Generator, n: int, scale: float) -> "_Jitter":
        return cls(
            freq_mult=float(np.exp(scale * g.standard_normal())),
            gains=np.exp(scale * g.standard_normal(n)),
            tilt=float(scale * g.standard_normal()),
            phases=scale * g.uniform(0, 2 * np.pi, n),
            burst_offset=float(scale * g.uniform(0, 1)),
        )

    def compose(self, other: "_Jitter") -> "_Jitter":
        return _Jitter(
            self.freq_mult * other.freq_mult,
            self.gains * other.gains,
            self.tilt + other.tilt,
            self.phases + other.phases,
            self.burst_offset + other.burst_offset,
        )


def _burst_envelope(t: np.ndarray, period: float, duty: float, offset: float) -> np.ndarray:
    phase = np.mod(t / period + offset, 1.0)
    on = phase < duty
    # raised-cosine gate over the "on" part of each period
    return np.where(on, np.sin(np.pi * phase / max(duty, 1e-9)) ** 2, 0.0)


def _render(cfg: SynthConfig, base_freqs, jit: _Jitter, modality: Modality,
            noise_g: np.random.Generator) -> Waveform:
    near = modality is Modality.NEAR_SURFACE_AUDIO
    rate = cfg.near_rate if near else cfg.on_rate
    n = int(round(cfg.source_duration_s * rate))
    t = np.arange(n) / rate
    freqs_near = np.asarray(base_freqs, dtype=np.float64) * jit.freq_mult
    gains = jit.gains * (freqs_near / np.mean(freqs_near)) ** jit.tilt
    if near:
        freqs = freqs_near
    else:
        freqs = freqs_near * cfg.freq_scale + cfg.freq_shift_hz
        gains = gains * (freqs / cfg.tilt_ref_hz) ** cfg.gain_tilt
    gains = gains / gains.max()
    tone = np.zeros(n)
    for f, a, ph in zip(freqs, gains, jit.phases):
        tone += a * np.sin(2 * np.pi * f * t + ph)
    env = _burst_envelope(t, cfg.burst_period_s, cfg.burst_duty, jit.burst_offset)
    x = 0.5 * tone / len(freqs) * env + cfg.noise_floor * noise_g.standard_normal(n)
    return Waveform(x.astype(np.float32), rate)


def _clips_from(w: Waveform, label: ActivityLabel, modality: Modality, source_id: str,
                participant_id: Optional[str], fe: FrontEndConfig) -> list[LabeledClip]:
    return [
        LabeledClip(win, label, modality, source_id, participant_id, win.start_s)
        for win in window(w, fe.win_s, fe.hop_s)
    ]


def participant_modes(cfg: SynthConfig) -> dict[str, dict[str, int]]:
    """Mode index each on-surface participant uses for each activity."""
    out = {}
    for p in range(cfg.n_participants):
        pid = f"p{p + 1}"
        g = rng.stream(cfg.seed, "synth", "mode", pid)
        out[pid] = {lab.value: int(g.integers(len(cfg.modes(lab.value)))) if cfg.variance_scale > 0 else 0
                    for lab in LABELS}
    return out


def _creator_mode(cfg: SynthConfig, label: str, s: int) -> int:
    return s % len(cfg.modes(label)) if cfg.variance_scale > 0 else 0


def synth_generate(cfg: SynthConfig) -> tuple[Corpus, Corpus]:
    """Generate aligned near-surface and on-surface corpora.

    Near-surface sources each come from a distinct synthetic creator with its
    own jitter draw; creator ``s`` uses mode ``s mod n_modes``. On-surface
    participants pick one mode per activity (``participant_modes``) and get
    one participant-level jitter draw, composed with a smaller per-recording
    draw, before the modality transform. Creator and participant ids are
    disjoint.
    """
    cfg.validate()
    near_clips, on_clips = [], []
    chosen = participant_modes(cfg)
    for lab in LABELS:
        modes = cfg.modes(lab.value)
        for s in range(cfg.n_sources_near):
            base = modes[_creator_mode(cfg, lab.value, s)]
            jit = _Jitter.draw(rng.stream(cfg.seed, "synth", "near", lab.value, s), len(base), cfg.variance_scale)
            w = _render(cfg, base, jit, Modality.NEAR_SURFACE_AUDIO,
                        rng.stream(cfg.seed, "synth", "near-noise", lab.value, s))
            creator = f"creator-{lab.value}-{s:02d}"
            near_clips += _clips_from(w, lab, Modality.NEAR_SURFACE_AUDIO, f"near-{lab.value}-{s:02d}",
                                      creator, NEAR_SURFACE_FRONT_END)
        for p in range(cfg.n_participants):
            pid = f"p{p + 1}"
            base = modes[chosen[pid][lab.value]]
            # drawn from a per-participant stream, so identical across labels
            pjit = _Jitter.draw(rng.stream(cfg.seed, "synth", "participant", pid), len(base), cfg.variance_scale)
            for s in range(cfg.n_sources_on):
                sjit = _Jitter.draw(rng.stream(cfg.seed, "synth", "on", pid, lab.value, s), len(base),
                                    cfg.variance_scale * cfg.within_participant_scale)
                w = _render(cfg, base, pjit.compose(sjit), Modality.ON_SURFACE_VIBRATION,
                            rng.stream(cfg.seed, "synth", "on-noise", pid, lab.value, s))
                on_clips += _clips_from(w, lab, Modality.ON_SURFACE_VIBRATION, f"{pid}-{lab.value}-{s:02d}",
                                        pid, ON_SURFACE_FRONT_END)
    prov = f"synth:{cfg.digest}"
    return (Corpus(tuple(near_clips), Modality.NEAR_SURFACE_AUDIO, prov),
            Corpus(tuple(on_clips), Modality.ON_SURFACE_VIBRATION, prov))


def nearest_neighbor_accuracy(train_x: np.ndarray, train_y: np.ndarray,
                              test_x: np.ndarray, test_y: np.ndarray) -> float:
    """1-NN (Euclidean) accuracy; a model-free separability check."""
    a = train_x.reshape(len(train_x), -1).astype(np.float64)
    b = test_x.reshape(len(test_x), -1).astype(np.float64)
    d = (b**2).sum(1)[:, None] - 2 * b @ a.T + (a**2).sum(1)[None, :]
    pred = np.asarray(train_y)[np.argmin(d, axis=1)]
    return float(np.mean(pred == np.asarray(test_y)))
