"""Utterance manifests and the synthetic multi-speaker corpus."""

from __future__ import annotations

import csv
import itertools
import os
from dataclasses import dataclass

import numpy as np

from .audio import Waveform, load_wav, write_wav
from .eval import TrialPair, write_trials

SPLITS = ("train", "val", "test")


@dataclass(frozen=True)
class Record:
    path: str
    speaker: str
    split: str


class Manifest:
    """Rows of ``path,speaker,split``; relative paths resolve against ``root``."""

    def __init__(self, records, root="."):
        self.records = list(records)
        self.root = os.fspath(root)
        seen = set()
        for r in self.records:
            if r.split not in SPLITS:
                raise ValueError(f"{r.path}: unknown split {r.split!r}")
            if r.path in seen:
                raise ValueError(f"duplicate manifest path {r.path}")
            seen.add(r.path)
        self.speakers = sorted({r.speaker for r in self.records})
        self.speaker_index = {s: i for i, s in enumerate(self.speakers)}

    def __len__(self):
        return len(self.records)

    def subset(self, split: str) -> list:
        return [r for r in self.records if r.split == split]

    def label(self, record: Record) -> int:
        return self.speaker_index[record.speaker]

    def resolve(self, record: Record) -> str:
        return record.path if os.path.isabs(record.path) else os.path.join(self.root, record.path)

    def load(self, record: Record, expected_rate: int | None = None) -> Waveform:
        return load_wav(self.resolve(record), expected_rate)


def read_manifest(path) -> Manifest:
    path = os.fspath(path)
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if rows and set(rows[0]) != {"path", "speaker", "split"}:
        raise ValueError(f"{path}: expected header path,speaker,split")
    return Manifest([Record(r["path"], r["speaker"], r["split"]) for r in rows], os.path.dirname(os.path.abspath(path)))


def write_manifest(path, manifest: Manifest) -> None:
    with open(os.fspath(path), "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["path", "speaker", "split"])
        for r in manifest.records:
            writer.writerow([r.path, r.speaker, r.split])


def all_pairs_trials(records) -> list:
    """Every unordered pair of the given records, labelled 1 when the speakers match."""
    return [
        TrialPair(int(a.speaker == b.speaker), a.path, b.path)
        for a, b in itertools.combinations(records, 2)
    ]


# --------------------------------------------------------------------------- synthetic corpus


@dataclass(frozen=True)
class SyntheticSpec:
    n_speakers: int = 20
    utts_per_speaker: int = 20
    min_duration: float = 1.0
    max_duration: float = 2.0
    freq_range: tuple = (250.0, 7500.0)
    n_formants: int = 3
    noise: float = 0.01
    # relative per-utterance detuning of every formant
    jitter: float = 0.01
    sample_rate: int = 16000
    split_fractions: tuple = (0.6, 0.2, 0.2)

    def __post_init__(self):
        if self.n_speakers < 2:
            raise ValueError("need at least two speakers")
        if self.utts_per_speaker < 3:
            raise ValueError("need at least three utterances per speaker (one per split)")
        if not 0 < self.min_duration <= self.max_duration:
            raise ValueError("bad duration range")
        if self.freq_range[1] * (1 + self.jitter) >= self.sample_rate / 2:
            raise ValueError("formant frequencies must stay below Nyquist")
        if self.noise < 0:
            raise ValueError("noise level must be >= 0")


def _envelope(n: int, sr: int, rng: np.random.Generator) -> np.ndarray:
    """Syllable-like bursts: sharp onset, exponential decay, random gaps."""
    env = np.zeros(n)
    pos = 0
    while pos < n:
        seg = int(rng.uniform(0.08, 0.25) * sr)
        if rng.random() < 0.75:
            t = np.arange(min(seg, n - pos)) / sr
            attack = np.minimum(1.0, t / 0.01)
            env[pos : pos + t.size] = rng.uniform(0.3, 1.0) * attack * np.exp(-t / rng.uniform(0.04, 0.12))
        pos += seg
    return env


def synth_utterance(formants, spec: SyntheticSpec, rng: np.random.Generator) -> Waveform:
    sr = spec.sample_rate
    n = int(round(rng.uniform(spec.min_duration, spec.max_duration) * sr))
    t = np.arange(n) / sr
    env = _envelope(n, sr, rng)
    signal = np.zeros(n)
    for f in formants:
        f_utt = f * (1.0 + rng.uniform(-spec.jitter, spec.jitter))
        signal += rng.uniform(0.5, 1.0) * np.sin(2 * np.pi * f_utt * t + rng.uniform(0, 2 * np.pi))
    signal *= 0.8 / len(formants) * env
    signal += spec.noise * rng.standard_normal(n)
    return Waveform(np.clip(signal, -1.0, 32767 / 32768), sr)


def speaker_formants(spec: SyntheticSpec, rng: np.random.Generator) -> np.ndarray:
    lo, hi = spec.freq_range
    return np.array([np.sort(rng.uniform(lo, hi, size=spec.n_formants)) for _ in range(spec.n_speakers)])


def synth_data(spec: SyntheticSpec, out_dir, seed: int = 0) -> Manifest:
    """Write a WAV corpus plus ``manifest.csv`` and a test-split ``trials.txt``."""
    out_dir = os.fspath(out_dir)
    os.makedirs(out_dir, exist_ok=True)
    rng = np.random.default_rng([seed, 0])
    formants = speaker_formants(spec, rng)
    n_train = int(round(spec.split_fractions[0] * spec.utts_per_speaker))
    n_val = int(round(spec.split_fractions[1] * spec.utts_per_speaker))
    n_train = min(n_train, spec.utts_per_speaker - 2)
    n_val = max(1, min(n_val, spec.utts_per_speaker - n_train - 1))
    records = []
    for s in range(spec.n_speakers):
        spk = f"spk{s:03d}"
        os.makedirs(os.path.join(out_dir, spk), exist_ok=True)
        order = np.random.default_rng([seed, 1, s]).permutation(spec.utts_per_speaker)
        split_of = {}
        for rank, u in enumerate(order):
            split_of[int(u)] = "train" if rank < n_train else "val" if rank < n_train + n_val else "test"
        for u in range(spec.utts_per_speaker):
            w = synth_utterance(formants[s], spec, np.random.default_rng([seed, 2, s, u]))
            rel = f"{spk}/utt{u:03d}.wav"
            write_wav(os.path.join(out_dir, rel), w)
            records.append(Record(rel, spk, split_of[u]))
    manifest = Manifest(records, out_dir)
    write_manifest(os.path.join(out_dir, "manifest.csv"), manifest)
    write_trials(os.path.join(out_dir, "trials.txt"), all_pairs_trials(manifest.subset("test")))
    return manifest
