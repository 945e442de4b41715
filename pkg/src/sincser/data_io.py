"""WAV and manifest I/O, tokenization, and the synthetic dialog dataset."""
from __future__ import annotations

import csv
import os
import re
import struct
import wave
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .models import CLASSES

LABELS = {name: i for i, name in enumerate(CLASSES)}
MANIFEST_COLUMNS = ["utterance_id", "dialog_id", "speaker_id", "wav_path", "transcript", "label"]
VOCAB_SIZE = 4096
SAMPLE_RATE = 16000

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_WAVE_FORMATS = {1: "PCM", 3: "IEEE float", 6: "A-law", 7: "mu-law", 0xFFFE: "extensible"}


@dataclass
class Utterance:
    utterance_id: str
    dialog_id: str
    speaker_id: str
    samples: np.ndarray
    tokens: list
    label: int
    sample_rate: int = SAMPLE_RATE
    transcript: str = ""

    def __post_init__(self):
        if not 0 <= self.label < 4:
            raise ValueError(f"label must be in 0..3, got {self.label}")
        if len(self.samples) == 0:
            raise ValueError(f"utterance {self.utterance_id} has no samples")


@dataclass
class ManifestRow:
    utterance_id: str
    dialog_id: str
    speaker_id: str
    wav_path: str
    transcript: str
    label: int


# -- WAV -------------------------------------------------------------------------------

def write_wav(path, samples, sample_rate=SAMPLE_RATE):
    """Mono PCM16.  Float input is scaled by 32768 and clipped; int16 input is written as is."""
    samples = np.asarray(samples)
    if samples.dtype != np.int16:
        samples = np.clip(np.round(samples * 32768.0), -32768, 32767).astype(np.int16)
    with wave.open(str(path), "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(2)
        w.setframerate(int(sample_rate))
        w.writeframes(samples.astype("<i2").tobytes())


def _sniff_format(path):
    # wave.open gives an opaque message for non-PCM files; read the fmt chunk ourselves
    with open(path, "rb") as fh:
        head = fh.read(12)
        if len(head) < 12 or head[:4] != b"RIFF" or head[8:12] != b"WAVE":
            return None
        while True:
            hdr = fh.read(8)
            if len(hdr) < 8:
                return None
            cid, size = hdr[:4], struct.unpack("<I", hdr[4:])[0]
            if cid == b"fmt ":
                body = fh.read(min(size, 16))
                if len(body) < 16:
                    return None
                tag, ch, rate, _, _, bits = struct.unpack("<HHIIHH", body)
                return tag, ch, rate, bits
            fh.seek(size + (size & 1), os.SEEK_CUR)


def read_wav(path):
    """Read a mono PCM16 file as floats in [-1, 1).  Returns (samples, sample_rate)."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such WAV file: {path}")
    fmt = _sniff_format(path)
    if fmt is None:
        raise ValueError(f"{path}: truncated or malformed RIFF/WAVE header")
    tag, channels, rate, bits = fmt
    if tag != 1 or bits != 16:
        name = _WAVE_FORMATS.get(tag, f"format tag {tag}")
        raise ValueError(f"{path}: expected PCM 16-bit, found {name} {bits}-bit")
    if channels != 1:
        raise ValueError(f"{path}: expected mono, found {channels} channels")
    try:
        with wave.open(str(path), "rb") as w:
            n = w.getnframes()
            raw = w.readframes(n)
    except (wave.Error, EOFError) as exc:
        raise ValueError(f"{path}: unreadable WAV ({exc})") from exc
    if len(raw) < 2 * n:
        raise ValueError(f"{path}: truncated data chunk ({len(raw)} of {2 * n} bytes)")
    ints = np.frombuffer(raw, dtype="<i2")
    return ints.astype(np.float64) / 32768.0, rate


# -- tokenization ------------------------------------------------------------------------

def fnv1a_64(data: bytes) -> int:
    h = _FNV_OFFSET
    for byte in data:
        h ^= byte
        h = (h * _FNV_PRIME) & 0xFFFFFFFFFFFFFFFF
    return h


def tokenize(transcript: str, vocab_size: int = VOCAB_SIZE) -> list[int]:
    """Lowercase, split on non-alphanumerics, FNV-1a 64 over UTF-8, ids 1..vocab_size-1.

    Id 0 is reserved; an empty transcript becomes ``[0]``.
    """
    words = [w for w in re.split(r"[^0-9a-z]+", transcript.lower()) if w]
    if not words:
        return [0]
    return [1 + fnv1a_64(w.encode("utf-8")) % (vocab_size - 1) for w in words]


# -- manifests ------------------------------------------------------------------------------

def read_manifest(path) -> list[ManifestRow]:
    path = Path(path)
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = [c for c in MANIFEST_COLUMNS if c not in (reader.fieldnames or [])]
        if missing:
            raise ValueError(f"{path}: manifest missing column(s): {', '.join(missing)}")
        rows, seen = [], set()
        for lineno, rec in enumerate(reader, start=2):
            uid = rec["utterance_id"]
            if uid in seen:
                raise ValueError(f"{path}:{lineno}: duplicate utterance_id {uid!r}")
            seen.add(uid)
            label = rec["label"].strip().lower()
            if label not in LABELS:
                raise ValueError(f"{path}:{lineno}: unknown label {rec['label']!r}; "
                                 f"valid labels are {', '.join(CLASSES)}")
            rows.append(ManifestRow(uid, rec["dialog_id"], rec["speaker_id"], rec["wav_path"],
                                    rec["transcript"], LABELS[label]))
    return rows


def write_manifest(path, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(MANIFEST_COLUMNS)
        for r in rows:
            w.writerow([r.utterance_id, r.dialog_id, r.speaker_id, r.wav_path,
                        r.transcript, CLASSES[r.label]])


def write_dataset(dataset, out_dir) -> Path:
    """Emit ``manifest.csv`` plus one WAV per utterance under ``out_dir/wav``."""
    out_dir = Path(out_dir)
    (out_dir / "wav").mkdir(parents=True, exist_ok=True)
    rows = []
    for u in dataset:
        rel = f"wav/{u.utterance_id}.wav"
        write_wav(out_dir / rel, u.samples, u.sample_rate)
        rows.append(ManifestRow(u.utterance_id, u.dialog_id, u.speaker_id, rel, u.transcript, u.label))
    manifest = out_dir / "manifest.csv"
    write_manifest(manifest, rows)
    return manifest


def load_dataset(manifest_path) -> list[Utterance]:
    """Read a manifest and every WAV it names (paths relative to the manifest)."""
    manifest_path = Path(manifest_path)
    out = []
    for r in read_manifest(manifest_path):
        wav = Path(r.wav_path)
        if not wav.is_absolute():
            wav = manifest_path.parent / wav
        samples, rate = read_wav(wav)
        if rate != SAMPLE_RATE:
            raise ValueError(f"{wav}: expected {SAMPLE_RATE} Hz, found {rate} Hz")
        out.append(Utterance(r.utterance_id, r.dialog_id, r.speaker_id, samples,
                             tokenize(r.transcript), r.label, rate, r.transcript))
    return out


# -- synthetic data ----------------------------------------------------------------------------

DEFAULT_BANDS = ((400.0, 900.0), (1200.0, 1900.0), (2500.0, 3400.0), (4200.0, 5500.0))
# published class shares; they total 0.997, so the default priors are renormalised
CLASS_SHARES = (0.295, 0.308, 0.199, 0.195)
DEFAULT_PRIORS = tuple(s / sum(CLASS_SHARES) for s in CLASS_SHARES)
_CLASS_WORDS = (
    ("glad", "fun", "great", "love", "smile", "laugh", "yay", "sunny", "joy", "party"),
    ("okay", "fine", "table", "monday", "letter", "walk", "report", "chair", "noted", "plain"),
    ("hate", "furious", "stop", "unfair", "shout", "never", "damn", "enough", "rage", "blame"),
    ("miss", "cry", "lonely", "lost", "tired", "grief", "alone", "sorry", "tears", "gone"),
)
_SHARED_WORDS = ("i", "you", "the", "it", "we", "that", "is", "was", "so", "just",
                 "really", "now", "there", "what", "then", "and")


@dataclass
class SynthSpec:
    class_bands: tuple = DEFAULT_BANDS
    class_priors: tuple = DEFAULT_PRIORS
    utterance_ms: float = 500.0
    signal_rms: float = 0.03
    noise_rms: float = 0.01
    dialog_length_range: tuple = (6, 14)
    label_autocorrelation: float = 0.5
    vocab_per_class: tuple = _CLASS_WORDS
    shared_vocab: tuple = _SHARED_WORDS
    token_purity: float = 0.5
    words_range: tuple = (3, 8)
    band_confusion: float = 0.0
    sample_rate: int = SAMPLE_RATE
    seed: int = 0

    def validate(self):
        pri = np.asarray(self.class_priors, dtype=float)
        if pri.shape != (4,) or np.any(pri < 0) or abs(pri.sum() - 1.0) > 1e-9:
            raise ValueError(f"class_priors must be 4 non-negative values summing to 1, got {self.class_priors}")
        if len(self.class_bands) != 4:
            raise ValueError("class_bands needs exactly 4 (low, high) pairs")
        nyq = self.sample_rate / 2
        bands = sorted(self.class_bands)
        for lo, hi in bands:
            if not 0 < lo < hi < nyq:
                raise ValueError(f"band ({lo}, {hi}) must satisfy 0 < low < high < {nyq}")
        for (_, hi), (lo, _) in zip(bands, bands[1:]):
            if lo < hi:
                raise ValueError("class_bands must be pairwise disjoint")
        if not 0 <= self.label_autocorrelation < 1:
            raise ValueError("label_autocorrelation must be in [0, 1)")
        for name in ("token_purity", "band_confusion"):
            if not 0 <= getattr(self, name) <= 1:
                raise ValueError(f"{name} must be in [0, 1]")
        lo, hi = self.dialog_length_range
        if not 1 <= lo <= hi:
            raise ValueError(f"bad dialog_length_range {self.dialog_length_range}")
        if self.utterance_ms <= 0 or self.noise_rms < 0 or self.signal_rms <= 0:
            raise ValueError("utterance_ms and signal_rms must be positive, noise_rms non-negative")


def band_noise(rng, n, low, high, sample_rate, rms):
    """White noise with every DFT bin outside [low, high] Hz zeroed, scaled to ``rms``."""
    spec = np.fft.rfft(rng.standard_normal(n))
    f = np.fft.rfftfreq(n, 1.0 / sample_rate)
    spec[(f < low) | (f > high)] = 0.0
    x = np.fft.irfft(spec, n)
    return x * (rms / np.sqrt(np.mean(x ** 2)))


def markov_labels(rng, n, priors, autocorrelation):
    """First-order chain: keep the previous label w.p. ``autocorrelation``, else draw from ``priors``.

    The stationary distribution is ``priors`` for any autocorrelation in [0, 1).
    """
    priors = np.asarray(priors, dtype=float)
    out = np.empty(n, dtype=int)
    out[0] = rng.choice(4, p=priors)
    for t in range(1, n):
        out[t] = out[t - 1] if rng.random() < autocorrelation else rng.choice(4, p=priors)
    return out


def _synth_utterance(rng, spec: SynthSpec, label):
    n = int(round(spec.sample_rate * spec.utterance_ms / 1000.0))
    band_class = label
    if spec.band_confusion > 0 and rng.random() < spec.band_confusion:
        band_class = int(rng.integers(4))
    lo, hi = spec.class_bands[band_class]
    x = band_noise(rng, n, lo, hi, spec.sample_rate, spec.signal_rms)
    if spec.noise_rms > 0:
        x = x + rng.normal(0.0, spec.noise_rms, n)
    x = np.clip(x, -1.0, 32767 / 32768)
    k = int(rng.integers(spec.words_range[0], spec.words_range[1] + 1))
    words = []
    for _ in range(k):
        if rng.random() < spec.token_purity:
            pool = spec.vocab_per_class[label]
        else:
            pool = spec.shared_vocab
        words.append(pool[int(rng.integers(len(pool)))])
    return x, " ".join(words)


def generate_synthetic(spec: SynthSpec, num_dialogs=None, num_utterances=None) -> list[Utterance]:
    """Seeded dialogs of band-limited noise utterances with class-leaning transcripts.

    Give ``num_dialogs``, ``num_utterances`` or both; with ``num_utterances``
    the last dialog is cut so the total is exact.
    """
    spec.validate()
    if num_dialogs is None and num_utterances is None:
        raise ValueError("give num_dialogs or num_utterances")
    rng = np.random.default_rng(spec.seed)
    out: list[Utterance] = []
    d = 0
    while True:
        if num_dialogs is not None and d >= num_dialogs:
            break
        if num_utterances is not None and len(out) >= num_utterances:
            break
        T = int(rng.integers(spec.dialog_length_range[0], spec.dialog_length_range[1] + 1))
        if num_utterances is not None:
            T = min(T, num_utterances - len(out))
        labels = markov_labels(rng, T, spec.class_priors, spec.label_autocorrelation)
        dialog_id = f"d{d:04d}"
        for t, lab in enumerate(labels):
            x, text = _synth_utterance(rng, spec, int(lab))
            out.append(Utterance(f"{dialog_id}_u{t:03d}", dialog_id, f"{dialog_id}_{'AB'[t % 2]}",
                                 x, tokenize(text), int(lab), spec.sample_rate, text))
        d += 1
    return out


def quantize(dataset):
    """Round every utterance's audio to PCM16 resolution, as a WAV round trip would."""
    for u in dataset:
        u.samples = np.clip(np.round(u.samples * 32768.0), -32768, 32767) / 32768.0
    return dataset


def dialogs(dataset) -> dict:
    """dialog_id -> list of utterances, each in dataset order."""
    out: dict = {}
    for u in dataset:
        out.setdefault(u.dialog_id, []).append(u)
    return out
