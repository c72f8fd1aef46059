"""Synthetic corpus, feature-file I/O, windowing, chunking and trial lists."""

from __future__ import annotations

import logging
import os
import struct
from collections import Counter
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.signal import lfilter

from .numcore import RngStream

log = logging.getLogger(__name__)

FEATURE_MAGIC = b"LSVF"
FEATURE_VERSION = 1
_HEADER = struct.Struct("<4sHII")

AR_COEF = 0.7
DVECTOR_LEFT = 25
DVECTOR_RIGHT = 25


class DataConfigError(ValueError):
    pass


class FeatureFormatError(ValueError):
    pass


class CapacityError(ValueError):
    pass


@dataclass
class FeatureSequence:
    speaker: str
    utterance: str
    frames: np.ndarray

    def __post_init__(self):
        if not self.speaker or not self.utterance:
            raise DataConfigError("speaker and utterance ids must be non-empty")
        self.frames = np.asarray(self.frames, dtype=np.float64)
        if self.frames.ndim != 2 or self.frames.shape[0] < 1 or self.frames.shape[1] < 1:
            raise DataConfigError(f"{self.utterance}: frames must be T x d with T >= 1, got {self.frames.shape}")
        if not np.all(np.isfinite(self.frames)):
            raise DataConfigError(f"{self.utterance}: non-finite feature values")

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]


@dataclass(frozen=True)
class ManifestEntry:
    speaker: str
    utterance: str
    path: str
    split: str


class CorpusManifest:
    """Ordered list of utterances; paths are resolved against ``root``."""

    def __init__(self, entries, root: str | os.PathLike = "."):
        self.entries: list[ManifestEntry] = list(entries)
        self.root = Path(root)
        seen = set()
        for e in self.entries:
            if e.split not in ("train", "test"):
                raise DataConfigError(f"unknown split {e.split!r} for {e.utterance}")
            key = (e.speaker, e.utterance)
            if key in seen:
                raise DataConfigError(f"duplicate entry {key}")
            seen.add(key)
        train = {e.speaker for e in self.entries if e.split == "train"}
        test = {e.speaker for e in self.entries if e.split == "test"}
        if train & test:
            raise DataConfigError(f"speakers in both splits: {sorted(train & test)[:5]}")

    def __len__(self):
        return len(self.entries)

    def split(self, name: str) -> "CorpusManifest":
        return CorpusManifest([e for e in self.entries if e.split == name], self.root)

    def speakers(self) -> list[str]:
        return sorted({e.speaker for e in self.entries})

    def resolve(self, entry: ManifestEntry) -> Path:
        p = Path(entry.path)
        return p if p.is_absolute() else self.root / p

    def load(self, entry: ManifestEntry) -> FeatureSequence:
        return read_features(self.resolve(entry), entry.speaker, entry.utterance)

    def load_all(self) -> list[FeatureSequence]:
        return [self.load(e) for e in self.entries]

    def write(self, path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            for e in self.entries:
                f.write(f"{e.speaker}\t{e.utterance}\t{e.path}\t{e.split}\n")

    @classmethod
    def read(cls, path) -> "CorpusManifest":
        entries = []
        with open(path, encoding="utf-8") as f:
            for lineno, line in enumerate(f, 1):
                line = line.rstrip("\n")
                if not line.strip():
                    continue
                parts = line.split("\t")
                if len(parts) != 4:
                    raise DataConfigError(f"{path}:{lineno}: expected 4 tab-separated fields")
                entries.append(ManifestEntry(*parts))
        return cls(entries, Path(path).parent)


# ---------------------------------------------------------------- feature files

def write_features(path, seq: FeatureSequence) -> None:
    frames = np.ascontiguousarray(seq.frames, dtype="<f4")
    T, d = frames.shape
    with open(path, "wb") as f:
        f.write(_HEADER.pack(FEATURE_MAGIC, FEATURE_VERSION, T, d))
        f.write(frames.tobytes(order="C"))


def read_features(path, speaker: str = "unknown", utterance: str | None = None) -> FeatureSequence:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise FeatureFormatError(f"{path}: truncated header at offset {len(raw)}")
    magic, version, T, d = _HEADER.unpack_from(raw, 0)
    if magic != FEATURE_MAGIC:
        raise FeatureFormatError(f"{path}: bad magic {magic!r} at offset 0")
    if version != FEATURE_VERSION:
        raise FeatureFormatError(f"{path}: unsupported version {version} at offset 4")
    expected = _HEADER.size + 4 * T * d
    if len(raw) != expected:
        raise FeatureFormatError(
            f"{path}: header says {T}x{d} ({expected} bytes) but file has {len(raw)} bytes; "
            f"payload mismatch at offset {min(len(raw), expected)}"
        )
    frames = np.frombuffer(raw, dtype="<f4", offset=_HEADER.size).reshape(T, d).astype(np.float64)
    return FeatureSequence(speaker, utterance or Path(path).stem, frames)


# ---------------------------------------------------------------- synthetic corpus

def synth_utterance(mean: np.ndarray, n_frames: int, rng: RngStream,
                    ar_coef: float = AR_COEF, noise_std: float = 1.0) -> np.ndarray:
    """Speaker mean + stationary AR(1) noise (unit variance) + white noise."""
    d = mean.shape[0]
    innov = rng.normal((n_frames, d), np.sqrt(1.0 - ar_coef**2))
    innov[0] = rng.normal(d)  # stationary start
    ar = lfilter([1.0], [1.0, -ar_coef], innov, axis=0)
    return mean + ar + rng.normal((n_frames, d), noise_std)


def generate_corpus(out_dir, n_speakers: int, utts_per_speaker: int, frames_range=(200, 400),
                    feat_dim: int = 24, separation: float = 1.0, seed: int = 0,
                    n_test_speakers: int = 0) -> CorpusManifest:
    """Write a seeded synthetic corpus and its manifest (``manifest.tsv``).

    The last ``n_test_speakers`` speakers form the held-out test split.
    """
    lo, hi = frames_range
    if n_speakers < 2:
        raise DataConfigError(f"need at least 2 speakers, got {n_speakers}")
    if utts_per_speaker < 1:
        raise DataConfigError("utts_per_speaker must be >= 1")
    if not (1 <= lo <= hi):
        raise DataConfigError(f"invalid frames range {frames_range}")
    if feat_dim < 1 or separation < 0:
        raise DataConfigError("feat_dim must be >= 1 and separation >= 0")
    if n_test_speakers < 0 or n_speakers - n_test_speakers < 2 or n_test_speakers == 1:
        raise DataConfigError(
            f"{n_test_speakers} test speakers out of {n_speakers}: need >= 2 train speakers and 0 or >= 2 test speakers"
        )

    out = Path(out_dir)
    (out / "feats").mkdir(parents=True, exist_ok=True)
    rng_spk = RngStream(seed, "corpus.speakers")
    rng_len = RngStream(seed, "corpus.lengths")
    rng_frm = RngStream(seed, "corpus.frames")
    width = len(str(n_speakers - 1))
    entries = []
    for s in range(n_speakers):
        spk = f"spk{s:0{width}d}"
        mean = rng_spk.normal(feat_dim, separation)
        split = "test" if s >= n_speakers - n_test_speakers else "train"
        for u in range(utts_per_speaker):
            utt = f"{spk}-utt{u:03d}"
            T = int(rng_len.integers(lo, hi + 1))
            seq = FeatureSequence(spk, utt, synth_utterance(mean, T, rng_frm))
            rel = f"feats/{utt}.lsvf"
            write_features(out / rel, seq)
            entries.append(ManifestEntry(spk, utt, rel, split))
    manifest = CorpusManifest(entries, out)
    manifest.write(out / "manifest.tsv")
    return manifest


# ---------------------------------------------------------------- windowing / chunking

def window_context(seq: FeatureSequence | np.ndarray, left: int = DVECTOR_LEFT, right: int = DVECTOR_RIGHT) -> np.ndarray:
    """Non-overlapping ``left + 1 + right`` frame windows, flattened frame-major.

    Returns an array of shape ``(floor(T / width), width * d)``; the tail is dropped.
    """
    frames = seq.frames if isinstance(seq, FeatureSequence) else np.asarray(seq, dtype=np.float64)
    width = left + right + 1
    T, d = frames.shape
    n = T // width
    return frames[: n * width].reshape(n, width * d)


def chunk_segments(seq: FeatureSequence, min_frames: int = 200, max_frames: int = 400,
                   rng: RngStream | None = None, skipped: Counter | None = None) -> list[FeatureSequence]:
    """Greedy left-to-right chunks with lengths drawn uniformly in [min, max].

    A final remainder of at least ``min_frames`` becomes its own chunk.
    Utterances shorter than ``min_frames`` yield nothing and bump ``skipped["short"]``.
    """
    if min_frames < 1 or min_frames > max_frames:
        raise DataConfigError(f"invalid chunk range [{min_frames}, {max_frames}]")
    if rng is None:
        rng = RngStream(0, "chunk")
    T = seq.n_frames
    if T < min_frames:
        if skipped is not None:
            skipped["short"] += 1
        return []
    chunks = []
    pos = 0
    while T - pos >= min_frames:
        length = int(rng.integers(min_frames, max_frames + 1))
        length = min(length, T - pos)
        chunks.append(FeatureSequence(seq.speaker, f"{seq.utterance}-c{len(chunks):03d}",
                                      seq.frames[pos:pos + length]))
        pos += length
    return chunks


def chunk_corpus(seqs, min_frames=200, max_frames=400, rng: RngStream | None = None):
    """Chunk every sequence; returns ``(chunks, n_skipped)``."""
    skipped = Counter()
    chunks = []
    for s in seqs:
        chunks.extend(chunk_segments(s, min_frames, max_frames, rng, skipped))
    if skipped["short"]:
        log.warning("skipped %d utterances shorter than %d frames", skipped["short"], min_frames)
    return chunks, skipped["short"]


# ---------------------------------------------------------------- trials

@dataclass(frozen=True)
class Trial:
    enroll: str
    test: str
    target: bool


class TrialList:
    def __init__(self, trials, enrollment: dict[str, list[str]] | None = None):
        self.trials: list[Trial] = list(trials)
        self.enrollment = enrollment or {}
        keys = [(t.enroll, t.test) for t in self.trials]
        if len(set(keys)) != len(keys):
            raise DataConfigError("duplicate trial rows")

    def __len__(self):
        return len(self.trials)

    def __iter__(self):
        return iter(self.trials)

    @property
    def labels(self) -> np.ndarray:
        return np.array([t.target for t in self.trials], dtype=bool)

    def write(self, path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            for t in self.trials:
                f.write(f"{t.enroll}\t{t.test}\t{'target' if t.target else 'nontarget'}\n")
        if self.enrollment:
            with open(enrollment_path(path), "w", encoding="utf-8") as f:
                for spk, utts in self.enrollment.items():
                    for u in utts:
                        f.write(f"{spk}\t{u}\n")

    @classmethod
    def read(cls, path) -> "TrialList":
        trials = []
        with open(path, encoding="utf-8") as f:
            for lineno, line in enumerate(f, 1):
                if not line.strip():
                    continue
                parts = line.rstrip("\n").split("\t")
                if len(parts) != 3 or parts[2] not in ("target", "nontarget"):
                    raise DataConfigError(f"{path}:{lineno}: expected enroll<TAB>test<TAB>target|nontarget")
                trials.append(Trial(parts[0], parts[1], parts[2] == "target"))
        enrollment: dict[str, list[str]] = {}
        ep = enrollment_path(path)
        if ep.exists():
            with open(ep, encoding="utf-8") as f:
                for line in f:
                    if line.strip():
                        spk, utt = line.rstrip("\n").split("\t")
                        enrollment.setdefault(spk, []).append(utt)
        return cls(trials, enrollment)


def enrollment_path(trials_path) -> Path:
    p = Path(trials_path)
    return p.with_name(p.name + ".enroll")


def trial_capacity(test_manifest: CorpusManifest, enroll_utts_per_spk: int = 1) -> tuple[int, int]:
    """Largest (target, nontarget) trial counts ``make_trials`` can sample."""
    counts: dict[str, int] = {}
    for e in test_manifest.entries:
        counts[e.speaker] = counts.get(e.speaker, 0) + 1
    tests = [max(0, c - enroll_utts_per_spk) for c in counts.values()]
    total = sum(tests)
    return total, total * (len(tests) - 1)


def make_trials(test_manifest: CorpusManifest, enroll_utts_per_spk: int = 1, n_target: int = 100,
                n_nontarget: int = 100, seed: int = 0) -> TrialList:
    """Sample target/nontarget trials with enrollment utterances held out per speaker."""
    rng = RngStream(seed, "trials")
    by_spk: dict[str, list[str]] = {}
    for e in test_manifest.entries:
        by_spk.setdefault(e.speaker, []).append(e.utterance)
    speakers = sorted(by_spk)
    if len(speakers) < 2:
        raise CapacityError("need at least 2 test speakers for nontarget trials")
    enrollment, tests = {}, {}
    for spk in speakers:
        utts = sorted(by_spk[spk])
        if len(utts) <= enroll_utts_per_spk:
            raise CapacityError(f"speaker {spk} has {len(utts)} utterances; need more than {enroll_utts_per_spk}")
        pick = set(rng.choice(len(utts), enroll_utts_per_spk).tolist())
        enrollment[spk] = [u for i, u in enumerate(utts) if i in pick]
        tests[spk] = [u for i, u in enumerate(utts) if i not in pick]

    target_pool = [(s, u) for s in speakers for u in tests[s]]
    nontarget_pool = [(s, u) for s in speakers for o in speakers if o != s for u in tests[o]]
    if n_target > len(target_pool) or n_nontarget > len(nontarget_pool):
        raise CapacityError(
            f"requested {n_target} target / {n_nontarget} nontarget trials; "
            f"max feasible is {len(target_pool)} / {len(nontarget_pool)}"
        )
    ti = np.sort(rng.choice(len(target_pool), n_target))
    ni = np.sort(rng.choice(len(nontarget_pool), n_nontarget))
    trials = [Trial(*target_pool[i], True) for i in ti] + [Trial(*nontarget_pool[i], False) for i in ni]
    return TrialList(trials, enrollment)
