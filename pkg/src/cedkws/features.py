"""Filterbank frontend, binary feature files, manifests and the synthetic
phoneme-audio corpus used for desk-scale training."""

from __future__ import annotations

import hashlib
import json
import struct
import wave
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import InvalidInputError, UnsupportedFormatError
from .phonemes import Lexicon, PhonemeVocabulary, grapheme_to_phoneme

SAMPLE_RATE = 16000
WIN_LENGTH = 400  # 25 ms
HOP_LENGTH = 160  # 10 ms
N_FFT = 512
N_MELS = 80
PREEMPHASIS = 0.97
FMIN = 20.0

FEATURE_MAGIC = b"CEDF"
FEATURE_VERSION = 1
_HEADER = struct.Struct("<4sIII")


def filterbank_config() -> dict:
    return {
        "kind": "filterbank",
        "sample_rate": SAMPLE_RATE,
        "win_length": WIN_LENGTH,
        "hop_length": HOP_LENGTH,
        "n_fft": N_FFT,
        "n_mels": N_MELS,
        "preemphasis": PREEMPHASIS,
        "window": "hann",
        "fmin": FMIN,
        "fmax": SAMPLE_RATE / 2,
        "log": True,
    }


def _hz_to_mel(hz):
    return 2595.0 * np.log10(1.0 + np.asarray(hz) / 700.0)


def _mel_to_hz(mel):
    return 700.0 * (10.0 ** (np.asarray(mel) / 2595.0) - 1.0)


def mel_filters(n_mels=N_MELS, n_fft=N_FFT, sample_rate=SAMPLE_RATE, fmin=FMIN, fmax=None):
    """Triangular HTK-style mel filters, shape (n_mels, n_fft // 2 + 1)."""
    fmax = fmax or sample_rate / 2
    mel_points = np.linspace(_hz_to_mel(fmin), _hz_to_mel(fmax), n_mels + 2)
    hz_points = _mel_to_hz(mel_points)
    bins = np.linspace(0, sample_rate / 2, n_fft // 2 + 1)
    lower, center, upper = hz_points[:-2, None], hz_points[1:-1, None], hz_points[2:, None]
    up = (bins[None, :] - lower) / (center - lower)
    down = (upper - bins[None, :]) / (upper - center)
    return np.maximum(0.0, np.minimum(up, down))


def num_frames(n_samples: int) -> int:
    return 1 + (n_samples - WIN_LENGTH) // HOP_LENGTH


def extract_filterbank(waveform, sample_rate=SAMPLE_RATE, normalize=True):
    """80-channel log mel filterbank energies from 16 kHz mono audio.

    Parameters
    ----------
    waveform : array_like
        1-D PCM samples (int16 or float).
    sample_rate : int
        Must be 16000.
    normalize : bool
        Apply per-utterance mean/variance normalization to every channel.

    Returns
    -------
    numpy.ndarray
        float32 array of shape ``(1 + (len - 400) // 160, 80)``.
    """
    if sample_rate != SAMPLE_RATE:
        raise UnsupportedFormatError(f"expected {SAMPLE_RATE} Hz audio, got {sample_rate} Hz")
    x = np.asarray(waveform)
    if x.ndim != 1:
        raise UnsupportedFormatError("expected mono audio (1-D array)")
    if len(x) < WIN_LENGTH:
        raise InvalidInputError(
            f"waveform has {len(x)} samples, need at least {WIN_LENGTH}"
        )
    if x.dtype == np.int16:
        x = x.astype(np.float64) / 32768.0
    else:
        x = x.astype(np.float64)
    x = np.append(x[0], x[1:] - PREEMPHASIS * x[:-1])

    n = num_frames(len(x))
    idx = np.arange(WIN_LENGTH)[None, :] + HOP_LENGTH * np.arange(n)[:, None]
    frames = x[idx] * np.hanning(WIN_LENGTH + 1)[:-1]
    power = np.abs(np.fft.rfft(frames, n=N_FFT)) ** 2
    feats = np.log(np.maximum(power @ mel_filters().T, 1e-10))
    if normalize:
        feats = feats - feats.mean(axis=0)
        if n > 1:
            feats = feats / np.maximum(feats.std(axis=0), 1e-10)
    return feats.astype(np.float32)


def read_wav(path):
    """Read a PCM16 WAV file; returns (samples as int16 array, sample rate)."""
    with wave.open(str(path), "rb") as w:
        if w.getsampwidth() != 2:
            raise UnsupportedFormatError(f"{path}: only 16-bit PCM is supported")
        if w.getnchannels() != 1:
            raise UnsupportedFormatError(f"{path}: only mono audio is supported")
        rate = w.getframerate()
        data = np.frombuffer(w.readframes(w.getnframes()), dtype="<i2")
    return data, rate


def write_wav(path, samples, sample_rate=SAMPLE_RATE):
    samples = np.asarray(samples)
    if samples.dtype != np.int16:
        samples = np.clip(np.round(samples * 32767), -32768, 32767).astype(np.int16)
    with wave.open(str(path), "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(2)
        w.setframerate(sample_rate)
        w.writeframes(samples.astype("<i2").tobytes())


def write_features(path, features):
    features = np.ascontiguousarray(features, dtype="<f4")
    if features.ndim != 2:
        raise InvalidInputError("feature matrix must be 2-D")
    with open(path, "wb") as f:
        f.write(_HEADER.pack(FEATURE_MAGIC, FEATURE_VERSION, *features.shape))
        f.write(features.tobytes())


def read_features(path) -> np.ndarray:
    with open(path, "rb") as f:
        header = f.read(_HEADER.size)
        if len(header) != _HEADER.size:
            raise UnsupportedFormatError(f"{path}: truncated feature header")
        magic, version, n_frames, n_channels = _HEADER.unpack(header)
        if magic != FEATURE_MAGIC or version != FEATURE_VERSION:
            raise UnsupportedFormatError(f"{path}: not a feature file (magic={magic!r})")
        data = np.frombuffer(f.read(), dtype="<f4")
    if data.size != n_frames * n_channels:
        raise UnsupportedFormatError(f"{path}: payload size does not match header")
    return data.reshape(n_frames, n_channels).astype(np.float32)


def load_audio_features(path, normalize=True):
    """Features for a ``.wav`` file (filterbank) or a binary feature file.

    Returns ``(features, kind)`` where kind names the frontend that produced them.
    """
    path = Path(path)
    if path.suffix.lower() == ".wav":
        samples, rate = read_wav(path)
        return extract_filterbank(samples, rate, normalize=normalize), "filterbank"
    feats = read_features(path)
    return feats, None


# ---------------------------------------------------------------------------
# manifests


@dataclass
class ManifestEntry:
    id: str
    transcript: str
    phonemes: list[str]
    duration_frames: int
    features_path: str | None = None
    audio_path: str | None = None

    def to_json(self) -> str:
        record = {"id": self.id}
        if self.features_path is not None:
            record["features_path"] = self.features_path
        if self.audio_path is not None:
            record["audio_path"] = self.audio_path
        record.update(
            transcript=self.transcript,
            phonemes=list(self.phonemes),
            duration_frames=self.duration_frames,
        )
        return json.dumps(record)


class Manifest(list):
    """List of :class:`ManifestEntry` that remembers where it was loaded from,
    so relative feature paths resolve against the manifest directory."""

    def __init__(self, entries=(), root=None, digest=None):
        super().__init__(entries)
        self.root = Path(root) if root is not None else Path(".")
        self.digest = digest

    @classmethod
    def load(cls, path) -> "Manifest":
        path = Path(path)
        raw = path.read_bytes()
        entries = []
        for lineno, line in enumerate(raw.decode("utf-8").splitlines(), 1):
            if not line.strip():
                continue
            rec = json.loads(line)
            missing = {"id", "transcript", "phonemes", "duration_frames"} - rec.keys()
            if missing or not ({"features_path", "audio_path"} & rec.keys()):
                raise InvalidInputError(f"{path}:{lineno}: malformed manifest record")
            entries.append(
                ManifestEntry(
                    id=rec["id"],
                    transcript=rec["transcript"],
                    phonemes=list(rec["phonemes"]),
                    duration_frames=int(rec["duration_frames"]),
                    features_path=rec.get("features_path"),
                    audio_path=rec.get("audio_path"),
                )
            )
        return cls(entries, root=path.parent, digest=hashlib.sha256(raw).hexdigest())

    def save(self, path):
        text = "".join(e.to_json() + "\n" for e in self)
        Path(path).write_text(text, encoding="utf-8")
        self.root = Path(path).parent
        self.digest = hashlib.sha256(text.encode()).hexdigest()

    def resolve(self, entry: ManifestEntry) -> Path:
        p = Path(entry.features_path or entry.audio_path)
        return p if p.is_absolute() else self.root / p

    def features(self, entry: ManifestEntry, normalize=True) -> np.ndarray:
        if entry.features_path is not None:
            return read_features(self.resolve(entry))
        return load_audio_features(self.resolve(entry), normalize=normalize)[0]

    def by_transcript(self) -> dict[str, list[ManifestEntry]]:
        groups: dict[str, list[ManifestEntry]] = {}
        for e in self:
            groups.setdefault(e.transcript, []).append(e)
        return groups


# ---------------------------------------------------------------------------
# synthetic corpus


@dataclass
class SyntheticCorpusSpec:
    """Recipe for a synthetic corpus.

    Every phoneme is rendered as a fixed random 80-dim prototype row repeated
    for a random number of frames, plus Gaussian noise.  ``words_per_utterance``
    above 1 yields multi-word transcripts drawn from ``keywords``.
    """

    keywords: list[str]
    prototype_seed: int = 0
    frames_per_phoneme: tuple[int, int] = (8, 16)
    noise_stddev: float = 0.5
    utterances_per_keyword: int = 50
    words_per_utterance: tuple[int, int] = (1, 1)
    seed: int = 0
    n_channels: int = N_MELS

    def __post_init__(self):
        lo, hi = self.frames_per_phoneme
        self.frames_per_phoneme = (int(lo), int(hi))
        self.words_per_utterance = tuple(int(v) for v in self.words_per_utterance)
        if lo < 1 or hi < lo:
            raise InvalidInputError(f"invalid frames_per_phoneme range {self.frames_per_phoneme}")
        if self.noise_stddev < 0:
            raise InvalidInputError("noise_stddev must be non-negative")
        if self.utterances_per_keyword < 0:
            raise InvalidInputError("utterances_per_keyword must be non-negative")
        wlo, whi = self.words_per_utterance
        if wlo < 1 or whi < wlo:
            raise InvalidInputError(f"invalid words_per_utterance {self.words_per_utterance}")

    @classmethod
    def from_dict(cls, d) -> "SyntheticCorpusSpec":
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)

    def feature_config(self) -> dict:
        return {
            "kind": "synthetic",
            "n_mels": self.n_channels,
            "prototype_seed": self.prototype_seed,
        }


def phoneme_prototypes(vocabulary: PhonemeVocabulary, prototype_seed: int, n_channels=N_MELS):
    """One standard-normal row per vocabulary symbol, a pure function of the seed."""
    rng = np.random.default_rng(prototype_seed)
    return rng.standard_normal((len(vocabulary), n_channels)).astype(np.float32)


def synthesize_utterance(phonemes, spec: SyntheticCorpusSpec, rng, vocabulary=None):
    """Render a phoneme sequence as a feature matrix.

    Each phoneme lasts ``uniform[lo, hi]`` frames (inclusive) of its prototype
    row; i.i.d. Gaussian noise with ``spec.noise_stddev`` is added to every
    entry.  ``rng`` is a :class:`numpy.random.Generator` or an int seed.
    """
    if len(phonemes) == 0:
        raise InvalidInputError("cannot synthesize an empty phoneme sequence")
    vocabulary = vocabulary or PhonemeVocabulary.default()
    rng = np.random.default_rng(rng)
    protos = phoneme_prototypes(vocabulary, spec.prototype_seed, spec.n_channels)
    ids = vocabulary.encode(phonemes)
    lo, hi = spec.frames_per_phoneme
    durations = rng.integers(lo, hi + 1, size=len(ids))
    feats = np.repeat(protos[ids], durations, axis=0)
    if spec.noise_stddev > 0:
        feats = feats + rng.normal(0.0, spec.noise_stddev, size=feats.shape).astype(np.float32)
    return feats.astype(np.float32)


def build_synthetic_corpus(spec: SyntheticCorpusSpec, output_dir, lexicon=None, name="manifest"):
    """Write one feature file per utterance and a JSONL manifest.

    Utterances are ordered keyword-major; with multi-word transcripts the
    keyword is the first word and the rest are drawn at random.  Returns the
    manifest path.
    """
    lexicon = lexicon or Lexicon.default()
    vocabulary = lexicon.vocabulary
    output_dir = Path(output_dir)
    feat_dir = output_dir / f"{name}_feats"
    feat_dir.mkdir(parents=True, exist_ok=True)

    rng = np.random.default_rng(spec.seed)
    manifest = Manifest(root=output_dir)
    for k, keyword in enumerate(spec.keywords):
        for u in range(spec.utterances_per_keyword):
            n_words = int(rng.integers(spec.words_per_utterance[0], spec.words_per_utterance[1] + 1))
            words = [keyword] + [
                spec.keywords[int(i)] for i in rng.integers(0, len(spec.keywords), n_words - 1)
            ]
            transcript = " ".join(words)
            phonemes = grapheme_to_phoneme(transcript, lexicon)
            feats = synthesize_utterance(phonemes, spec, rng, vocabulary)
            utt_id = f"{name}-{k:03d}-{u:04d}"
            rel = Path(feat_dir.name) / f"{utt_id}.feat"
            write_features(output_dir / rel, feats)
            manifest.append(
                ManifestEntry(
                    id=utt_id,
                    transcript=transcript,
                    phonemes=list(phonemes),
                    duration_frames=len(feats),
                    features_path=rel.as_posix(),
                )
            )
    path = output_dir / f"{name}.jsonl"
    manifest.save(path)
    return path


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def manifest_transcripts(manifest: Sequence[ManifestEntry]) -> list[str]:
    seen: dict[str, None] = {}
    for e in manifest:
        seen.setdefault(e.transcript, None)
    return list(seen)
