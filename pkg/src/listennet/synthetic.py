"""Desk-scale synthetic auditory-attention datasets.

Each trial mixes correlated pink-like background noise with a class-specific
oscillation: "left" trials carry a tone at ``f_left`` on the first half of
the channels, "right" trials carry ``f_right`` on the second half. Every
subject gets its own noise mixing matrix and channel gains.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .fileio import Manifest, TrialEntry, write_recording
from .preprocess import LABELS, Recording


@dataclass
class SyntheticSpec:
    subjects: int = 4
    trials_per_subject: int = 8
    channels: int = 16
    fs: float = 64.0
    duration: float = 30.0          # seconds per trial
    snr: float = 2.0                # signal RMS / noise RMS, per carrying channel
    seed: int = 0
    f_left: float = 0.125           # fraction of fs
    f_right: float = 0.1875

    def __post_init__(self):
        if self.channels < 2:
            raise ConfigError("synthetic data needs at least 2 channels")
        if self.subjects < 1 or self.trials_per_subject < 1 or self.duration <= 0 or self.fs <= 0:
            raise ConfigError("subjects, trials, duration and fs must be positive")
        if not (0 < self.f_left < 0.5 and 0 < self.f_right < 0.5):
            raise ConfigError("tone frequencies must lie below Nyquist")
        if self.snr < 0:
            raise ConfigError("snr must be non-negative")


def pink_noise(rng, channels: int, n: int) -> np.ndarray:
    """Unit-variance noise with a 1/f power spectrum, per channel."""
    white = rng.standard_normal((channels, n))
    spec = np.fft.rfft(white, axis=1)
    f = np.arange(spec.shape[1], dtype=np.float64)
    f[0] = 1.0
    spec /= np.sqrt(f)
    spec[:, 0] = 0.0
    x = np.fft.irfft(spec, n=n, axis=1)
    return x / x.std(axis=1, keepdims=True)


def synth_trial(rng, spec: SyntheticSpec, label: str, mixing: np.ndarray, gains: np.ndarray) -> np.ndarray:
    c = spec.channels
    n = int(round(spec.duration * spec.fs))
    t = np.arange(n) / spec.fs
    noise = mixing @ pink_noise(rng, c, n)
    noise /= noise.std(axis=1, keepdims=True)
    half = c // 2
    rows = slice(0, half) if label == "left" else slice(half, c)
    freq = (spec.f_left if label == "left" else spec.f_right) * spec.fs
    phases = rng.uniform(0, 2 * math.pi, size=(c, 1))
    tone = np.zeros((c, n))
    tone[rows] = np.sqrt(2.0) * np.sin(2 * math.pi * freq * t[None, :] + phases[rows])
    if math.isinf(spec.snr):
        x = tone
    else:
        x = noise + spec.snr * tone
    return (gains[:, None] * x).astype(np.float32)


def gen_synthetic(spec: SyntheticSpec, out_dir, name: str = "synthetic") -> Path:
    """Write recordings plus a manifest into ``out_dir``; returns the manifest path."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    root = np.random.SeedSequence(spec.seed)
    man = Manifest(name, float(spec.fs), spec.channels, [], out)
    for si, child in enumerate(root.spawn(spec.subjects)):
        rng = np.random.default_rng(child)
        subject = f"S{si + 1:02d}"
        mixing = np.eye(spec.channels) + 0.4 * rng.standard_normal((spec.channels, spec.channels))
        gains = rng.uniform(0.5, 2.0, spec.channels)
        for ti in range(spec.trials_per_subject):
            label = LABELS[ti % 2]
            trial = f"T{ti + 1:02d}"
            data = synth_trial(rng, spec, label, mixing, gains)
            fname = f"{subject}_{trial}.eegw"
            write_recording(Recording(subject, trial, spec.fs, data, label), out / fname)
            man.trials.append(TrialEntry(subject, trial, fname, label))
    path = out / "manifest.json"
    man.save(path)
    return path
