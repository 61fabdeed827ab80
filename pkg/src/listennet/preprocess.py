"""Recording normalization, Euclidean alignment and decision windowing."""
from __future__ import annotations

import logging
from dataclasses import dataclass, replace

import numpy as np

from .errors import DataError, ShapeError

log = logging.getLogger(__name__)

LABELS = ("left", "right")
STD_FLOOR = 1e-8
EIG_FLOOR = 1e-10


@dataclass
class Recording:
    subject_id: str
    trial_id: str
    fs: float
    samples: np.ndarray   # (C, S)
    label: str

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float32)
        if self.samples.ndim != 2 or self.samples.shape[1] == 0:
            raise ShapeError(f"recording samples must be (C, S>0), got {self.samples.shape}")
        if not self.fs > 0:
            raise DataError(f"sample rate must be positive, got {self.fs}")
        if self.label not in LABELS:
            raise DataError(f"label must be one of {LABELS}, got {self.label!r}")

    @property
    def channels(self) -> int:
        return self.samples.shape[0]


@dataclass
class DecisionWindow:
    data: np.ndarray      # (C, T)
    label: str
    subject_id: str
    trial_id: str
    start_sample: int

    @property
    def target(self) -> int:
        return LABELS.index(self.label)


@dataclass
class AlignmentMatrix:
    scope_id: str
    matrix: np.ndarray    # (C, C), symmetric positive definite
    floored: bool = False


def zscore_normalize(rec: Recording) -> Recording:
    """Per-channel zero mean, unit population std over the whole recording."""
    x = rec.samples.astype(np.float64)
    if x.shape[1] < 2:
        raise ShapeError("zscore_normalize needs at least two samples")
    std = x.std(axis=1, keepdims=True)
    flat = std[:, 0] < STD_FLOOR
    if flat.any():
        log.warning("%s/%s: %d constant channel(s) normalized to zero",
                    rec.subject_id, rec.trial_id, int(flat.sum()))
    z = (x - x.mean(axis=1, keepdims=True)) / np.maximum(std, STD_FLOOR)
    return replace(rec, samples=z.astype(np.float32))


def window_covariance(data: np.ndarray) -> np.ndarray:
    x = np.asarray(data, dtype=np.float64)
    return x @ x.T / x.shape[1]


def compute_alignment(windows, scope_id: str = "") -> AlignmentMatrix:
    windows = list(windows)
    if not windows:
        raise DataError("compute_alignment needs at least one window")
    r = np.mean([window_covariance(w.data) for w in windows], axis=0)
    if not np.all(np.isfinite(r)):
        raise DataError(f"scope {scope_id!r}: non-finite data in covariance")
    r = 0.5 * (r + r.T)
    vals, vecs = np.linalg.eigh(r)
    floored = bool(vals.min() < EIG_FLOOR)
    if floored:
        log.warning("scope %r: rank-deficient mean covariance, eigenvalue floor engaged", scope_id)
    vals = np.maximum(vals, EIG_FLOOR)
    m = (vecs / np.sqrt(vals)) @ vecs.T
    return AlignmentMatrix(scope_id, 0.5 * (m + m.T), floored)


def apply_alignment(window: DecisionWindow, align: AlignmentMatrix) -> DecisionWindow:
    m = align.matrix
    if m.shape != (window.data.shape[0],) * 2:
        raise ShapeError(f"alignment {m.shape} does not match window with {window.data.shape[0]} channels")
    data = (m @ window.data.astype(np.float64)).astype(np.float32)
    return replace(window, data=data)


def make_windows(rec: Recording, win_len: int, stride: int) -> list[DecisionWindow]:
    if win_len < 1 or stride < 1:
        raise ShapeError(f"win_len and stride must be >= 1, got {win_len}, {stride}")
    n = rec.samples.shape[1]
    if win_len > n:
        log.warning("%s/%s: window of %d samples longer than recording (%d)",
                    rec.subject_id, rec.trial_id, win_len, n)
        return []
    return [DecisionWindow(rec.samples[:, s:s + win_len].copy(), rec.label,
                           rec.subject_id, rec.trial_id, s)
            for s in range(0, n - win_len + 1, stride)]


def align_by_subject(windows, fit_windows=None) -> tuple[list[DecisionWindow], dict[str, AlignmentMatrix]]:
    """Align each subject's windows with the matrix fitted on that subject's
    ``fit_windows`` (defaults to all of its windows)."""
    windows = list(windows)
    fit = list(windows if fit_windows is None else fit_windows)
    by_subject: dict[str, list] = {}
    for w in fit:
        by_subject.setdefault(w.subject_id, []).append(w)
    mats = {s: compute_alignment(ws, s) for s, ws in sorted(by_subject.items())}
    missing = {w.subject_id for w in windows} - mats.keys()
    if missing:
        raise DataError(f"no alignment windows for subject(s) {sorted(missing)}")
    return [apply_alignment(w, mats[w.subject_id]) for w in windows], mats


def stack_windows(windows) -> tuple[np.ndarray, np.ndarray]:
    """(N, 1, C, T) float32 batch and (N,) int labels."""
    windows = list(windows)
    if not windows:
        return np.zeros((0, 1, 0, 0), np.float32), np.zeros(0, np.int64)
    x = np.stack([w.data for w in windows])[:, None].astype(np.float32)
    return x, np.array([w.target for w in windows], dtype=np.int64)
