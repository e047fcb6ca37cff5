"""Waveform loading and crop augmentation (repeat-extension, time reversal)."""

from __future__ import annotations

import os
import wave
from dataclasses import dataclass

import numpy as np

PCM_SCALE = 32768.0


class AudioError(Exception):
    """Base class for waveform loading failures."""

    code = "audio_error"


class MissingFileError(AudioError):
    code = "missing_file"


class UnsupportedEncodingError(AudioError):
    code = "unsupported_encoding"


class EmptyAudioError(AudioError):
    code = "empty_audio"


class SampleRateMismatchError(AudioError):
    code = "sample_rate_mismatch"


@dataclass(frozen=True, eq=False)
class Waveform:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 1:
            raise ValueError("waveform samples must be one-dimensional")
        if samples.size == 0:
            raise EmptyAudioError("empty audio")
        if self.sample_rate <= 0:
            raise ValueError(f"sample_rate must be positive, got {self.sample_rate}")
        if not np.all(np.isfinite(samples)):
            raise ValueError("waveform contains non-finite samples")
        object.__setattr__(self, "samples", samples)

    def __len__(self) -> int:
        return self.samples.shape[0]

    @property
    def duration(self) -> float:
        return len(self) / self.sample_rate


@dataclass(frozen=True)
class AugmentPolicy:
    """How training/testing crops are drawn from an utterance.

    ``enabled`` switches between the augmented path (uniform offset over the
    whole utterance, repeat-extension, random reversal) and a plain crop.
    """

    crop_len: int = 48240
    reverse_prob: float = 0.5
    enabled: bool = True

    def __post_init__(self):
        if self.crop_len < 1:
            raise ValueError("crop_len must be >= 1")
        if not 0.0 <= self.reverse_prob <= 1.0:
            raise ValueError("reverse_prob must lie in [0, 1]")


def load_wav(path, expected_rate: int | None = None) -> Waveform:
    """Read a 16-bit PCM RIFF/WAVE file; multi-channel input is averaged to mono."""
    path = os.fspath(path)
    if not os.path.isfile(path):
        raise MissingFileError(f"no such file: {path}")
    try:
        with wave.open(path, "rb") as fh:
            n_channels = fh.getnchannels()
            width = fh.getsampwidth()
            rate = fh.getframerate()
            raw = fh.readframes(fh.getnframes())
    except wave.Error as exc:
        raise UnsupportedEncodingError(f"{path}: {exc}") from exc
    except EOFError as exc:
        raise UnsupportedEncodingError(f"{path}: truncated header") from exc
    if width != 2:
        raise UnsupportedEncodingError(f"{path}: expected 16-bit PCM, got {8 * width}-bit")
    pcm = np.frombuffer(raw, dtype="<i2")
    if pcm.size == 0:
        raise EmptyAudioError("empty audio")
    if expected_rate is not None and rate != expected_rate:
        raise SampleRateMismatchError(f"{path}: sample rate {rate} != configured {expected_rate}")
    samples = pcm.astype(np.float64) / PCM_SCALE
    if n_channels > 1:
        samples = samples[: samples.size - samples.size % n_channels]
        samples = samples.reshape(-1, n_channels).mean(axis=1)
    return Waveform(samples, rate)


def write_wav(path, w: Waveform) -> None:
    """Write mono 16-bit PCM; samples are clipped to the representable range."""
    pcm = np.clip(np.round(w.samples * PCM_SCALE), -32768, 32767).astype("<i2")
    with wave.open(os.fspath(path), "wb") as fh:
        fh.setnchannels(1)
        fh.setsampwidth(2)
        fh.setframerate(w.sample_rate)
        fh.writeframes(pcm.tobytes())


def repeat_extend_crop(w: Waveform, offset: int, length: int) -> Waveform:
    n = len(w)
    if not 0 <= offset < n:
        raise ValueError(f"offset {offset} out of range [0, {n})")
    if length < 1:
        raise ValueError("crop length must be >= 1")
    idx = (offset + np.arange(length)) % n
    return Waveform(w.samples[idx], w.sample_rate)


def time_reverse(w: Waveform) -> Waveform:
    return Waveform(w.samples[::-1].copy(), w.sample_rate)


def sample_training_crop(w: Waveform, policy: AugmentPolicy, rng: np.random.Generator) -> Waveform:
    """Draw one fixed-length crop according to ``policy``.

    Augmented: offset uniform over the full utterance, wrap-around extension,
    then reversal with probability ``reverse_prob``. Plain: offset uniform over
    every start that keeps the crop inside the utterance, or 0 with zero
    padding at the end if the utterance is shorter than the crop.
    """
    n = len(w)
    if policy.enabled:
        offset = int(rng.integers(0, n))
        crop = repeat_extend_crop(w, offset, policy.crop_len)
        # always consume the coin so the stream layout does not depend on reverse_prob
        if rng.random() < policy.reverse_prob:
            crop = time_reverse(crop)
        return crop
    offset = int(rng.integers(0, max(0, n - policy.crop_len) + 1))
    piece = w.samples[offset : offset + policy.crop_len]
    if piece.size < policy.crop_len:
        piece = np.concatenate([piece, np.zeros(policy.crop_len - piece.size)])
    return Waveform(piece, w.sample_rate)


def utterance_rng(seed: int, index: int, *streams: int) -> np.random.Generator:
    """Independent stream keyed on (seed, utterance index, ...), order-independent."""
    return np.random.default_rng([seed, index, *streams])
