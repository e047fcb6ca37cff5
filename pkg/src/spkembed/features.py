"""Amplitude spectrograms with per-bin standardization, plus the float32 matrix file format."""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass

import numpy as np

from .audio import Waveform

VAR_EPS = 1e-8


@dataclass(frozen=True)
class FrameSpec:
    win_len: int = 400
    hop: int = 160
    fft_size: int = 512
    sample_rate: int = 16000

    def __post_init__(self):
        if self.win_len < 1 or self.hop < 1:
            raise ValueError("win_len and hop must be >= 1")
        if self.win_len > self.fft_size:
            raise ValueError(f"win_len {self.win_len} exceeds fft_size {self.fft_size}")
        if self.sample_rate <= 0:
            raise ValueError("sample_rate must be positive")

    @classmethod
    def from_ms(cls, win_ms=25.0, hop_ms=10.0, fft_size=512, sample_rate=16000):
        return cls(
            win_len=int(round(sample_rate * win_ms / 1000)),
            hop=int(round(sample_rate * hop_ms / 1000)),
            fft_size=fft_size,
            sample_rate=sample_rate,
        )

    @property
    def n_bins(self) -> int:
        return self.fft_size // 2 + 1

    def crop_samples(self, n_frames: int) -> int:
        """Number of samples that yields exactly ``n_frames`` frames."""
        return (n_frames - 1) * self.hop + self.win_len


def hamming_window(n: int) -> np.ndarray:
    if n < 2:
        raise ValueError("hamming window needs n >= 2")
    k = np.arange(n)
    return 0.54 - 0.46 * np.cos(2.0 * np.pi * k / (n - 1))


def frame_count(signal_len: int, spec: FrameSpec) -> int:
    if signal_len < spec.win_len:
        raise ValueError(f"signal of {signal_len} samples is shorter than one window ({spec.win_len})")
    return (signal_len - spec.win_len) // spec.hop + 1


def frame_signal(samples: np.ndarray, spec: FrameSpec) -> np.ndarray:
    """T x win_len view of overlapping frames."""
    n_frames = frame_count(samples.shape[0], spec)
    frames = np.lib.stride_tricks.sliding_window_view(samples, spec.win_len)
    return frames[: (n_frames - 1) * spec.hop + 1 : spec.hop]


def stft_amplitude(w: Waveform, spec: FrameSpec) -> np.ndarray:
    """T x (fft_size/2 + 1) matrix of |DFT| of Hamming-windowed, zero-padded frames."""
    if w.sample_rate != spec.sample_rate:
        raise ValueError(f"waveform rate {w.sample_rate} != frame spec rate {spec.sample_rate}")
    frames = frame_signal(w.samples, spec) * hamming_window(spec.win_len)
    return np.abs(np.fft.rfft(frames, n=spec.fft_size, axis=1))


def normalize_per_bin(S: np.ndarray) -> np.ndarray:
    """Standardize every frequency column over the crop's own frames."""
    S = np.asarray(S, dtype=np.float64)
    if S.ndim != 2 or S.shape[0] < 2:
        raise ValueError("normalize_per_bin needs a T x F matrix with T >= 2")
    mean = S.mean(axis=0)
    var = S.var(axis=0)
    return (S - mean) / np.sqrt(var + VAR_EPS)


def featurize(w: Waveform, spec: FrameSpec) -> np.ndarray:
    return normalize_per_bin(stft_amplitude(w, spec))


# Matrix files: uint32 rows, uint32 cols, then row-major float32, all little-endian.
_DIMS = struct.Struct("<II")


def write_matrix(path, values: np.ndarray) -> None:
    values = np.asarray(values)
    if values.ndim != 2:
        raise ValueError("matrix files hold 2-D arrays")
    with open(os.fspath(path), "wb") as fh:
        fh.write(_DIMS.pack(*values.shape))
        fh.write(np.ascontiguousarray(values, dtype="<f4").tobytes())


def read_matrix(path) -> np.ndarray:
    with open(os.fspath(path), "rb") as fh:
        head = fh.read(_DIMS.size)
        if len(head) != _DIMS.size:
            raise ValueError(f"{path}: truncated matrix header")
        rows, cols = _DIMS.unpack(head)
        body = fh.read()
    if len(body) != 4 * rows * cols:
        raise ValueError(f"{path}: expected {rows}x{cols} floats, found {len(body) // 4}")
    return np.frombuffer(body, dtype="<f4").reshape(rows, cols).copy()
