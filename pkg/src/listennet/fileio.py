"""On-disk formats: binary recordings, JSON manifests, run configs, params.

Recording file layout (little-endian)::

    offset  size  field
    0       4     magic b"EEGW"
    4       2     format version (u16) = 1
    6       4     channel count C (u32)
    10      8     sample count S (u64)
    18      4     sample rate fs (f32)
    22      4*C*S samples, channel-major f32 (channel 0's S samples first)
"""
from __future__ import annotations

import dataclasses
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import ConfigError, FormatError
from .model import ListenNetParams, ModelConfig
from .preprocess import LABELS, Recording
from .train import TrainConfig

MAGIC = b"EEGW"
VERSION = 1
HEADER = struct.Struct("<4sHIQf")
HEADER_SIZE = HEADER.size  # 22


def write_recording(rec: Recording, path) -> None:
    samples = np.ascontiguousarray(rec.samples, dtype="<f4")
    c, s = samples.shape
    with open(path, "wb") as fh:
        fh.write(HEADER.pack(MAGIC, VERSION, c, s, float(rec.fs)))
        fh.write(samples.tobytes(order="C"))


def read_header(path) -> tuple[int, int, float]:
    """Returns (channels, samples, fs) after validating magic, version and size."""
    path = Path(path)
    with open(path, "rb") as fh:
        head = fh.read(HEADER_SIZE)
    if len(head) < HEADER_SIZE:
        raise FormatError(f"{path}: header truncated at byte {len(head)} (need {HEADER_SIZE})")
    magic, version, c, s, fs = HEADER.unpack(head)
    if magic != MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r} at byte 0")
    if version != VERSION:
        raise FormatError(f"{path}: unsupported version {version} at byte 4")
    expected = HEADER_SIZE + 4 * c * s
    actual = path.stat().st_size
    if actual != expected:
        raise FormatError(
            f"{path}: payload length mismatch, expected {expected} bytes, found {actual} "
            f"(data ends at byte {actual})")
    return c, s, float(fs)


def read_recording(path, subject_id: str = "", trial_id: str = "", label: str = "left") -> Recording:
    c, s, fs = read_header(path)
    data = np.fromfile(path, dtype="<f4", offset=HEADER_SIZE, count=c * s)
    return Recording(subject_id, trial_id, fs, data.reshape(c, s).astype(np.float32), label)


# --------------------------------------------------------------------------
# manifest


@dataclass
class TrialEntry:
    subject_id: str
    trial_id: str
    path: str
    label: str


@dataclass
class Manifest:
    dataset: str
    fs: float
    channels: int
    trials: list[TrialEntry] = field(default_factory=list)
    root: Path = Path(".")

    def resolve(self, entry: TrialEntry) -> Path:
        p = Path(entry.path)
        return p if p.is_absolute() else self.root / p

    @property
    def subjects(self) -> list[str]:
        return sorted({t.subject_id for t in self.trials})

    def to_json(self) -> str:
        doc = {"dataset": self.dataset, "fs": self.fs, "channels": self.channels,
               "trials": [dataclasses.asdict(t) for t in self.trials]}
        return json.dumps(doc, indent=2, sort_keys=True) + "\n"

    def save(self, path) -> None:
        Path(path).write_text(self.to_json())


def load_manifest(path, validate: bool = True) -> Manifest:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
        trials = [TrialEntry(str(t["subject_id"]), str(t["trial_id"]), str(t["path"]),
                             str(t["label"]).lower()) for t in doc["trials"]]
        man = Manifest(str(doc["dataset"]), float(doc["fs"]), int(doc["channels"]),
                       trials, path.parent)
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"{path}: malformed manifest ({exc})") from exc
    if validate:
        validate_manifest(man)
    return man


def validate_manifest(man: Manifest) -> None:
    """Check every referenced file's header against the manifest."""
    if not man.trials:
        raise ConfigError("manifest lists no trials")
    seen = set()
    for t in man.trials:
        if t.label not in LABELS:
            raise ConfigError(f"trial {t.subject_id}/{t.trial_id}: label {t.label!r} not in {LABELS}")
        key = (t.subject_id, t.trial_id)
        if key in seen:
            raise ConfigError(f"duplicate trial {key}")
        seen.add(key)
        p = man.resolve(t)
        if not p.exists():
            raise ConfigError(f"trial {t.subject_id}/{t.trial_id}: missing file {p}")
        c, _, fs = read_header(p)
        if c != man.channels:
            raise ConfigError(f"{p}: {c} channels, manifest says {man.channels}")
        if not np.isclose(fs, man.fs, rtol=0, atol=1e-3):
            raise ConfigError(f"{p}: fs {fs}, manifest says {man.fs}")


def load_recordings(man: Manifest) -> list[Recording]:
    return [read_recording(man.resolve(t), t.subject_id, t.trial_id, t.label) for t in man.trials]


# --------------------------------------------------------------------------
# run config


@dataclass
class RunConfig:
    model: dict = field(default_factory=dict)      # ModelConfig fields except channels/window_len
    train: dict = field(default_factory=dict)      # TrainConfig fields
    window_seconds: float = 1.0
    stride_seconds: Optional[float] = None         # defaults to window_seconds
    align: bool = True
    output_dir: str = "runs"
    seed: int = 0

    @classmethod
    def from_dict(cls, doc: dict) -> "RunConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ConfigError(f"unknown run config keys: {sorted(unknown)}")
        return cls(**doc)

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @staticmethod
    def _samples(seconds: float, fs: float, what: str) -> int:
        n = seconds * fs
        if n <= 0 or abs(n - round(n)) > 1e-6:
            raise ConfigError(f"{what} of {seconds}s at {fs} Hz is not a whole number of samples")
        return int(round(n))

    def window_samples(self, fs: float) -> int:
        return self._samples(self.window_seconds, fs, "window length")

    def stride_samples(self, fs: float) -> int:
        sec = self.window_seconds if self.stride_seconds is None else self.stride_seconds
        return self._samples(sec, fs, "stride")

    def model_config(self, channels: int, fs: float) -> ModelConfig:
        extra = {k: v for k, v in self.model.items() if k not in ("channels", "window_len")}
        try:
            return ModelConfig(channels=channels, window_len=self.window_samples(fs), **extra)
        except TypeError as exc:
            raise ConfigError(f"bad model config: {exc}") from exc

    def train_config(self) -> TrainConfig:
        doc = dict(self.train)
        mode = doc.pop("mode", "subject_dependent")
        doc.setdefault("seed", self.seed)
        try:
            return TrainConfig.for_mode(mode, **doc)
        except TypeError as exc:
            raise ConfigError(f"bad train config: {exc}") from exc


# --------------------------------------------------------------------------
# parameters


def save_params(params: ListenNetParams, cfg: ModelConfig, path) -> None:
    arrays = {f"w/{k}": v for k, v in params.weights.items()}
    arrays.update({f"buf/{k}": v for k, v in params.buffers.items()})
    arrays["config"] = np.array(json.dumps(cfg.to_dict(), sort_keys=True))
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_params(path) -> tuple[ListenNetParams, ModelConfig]:
    with np.load(path) as z:
        cfg = ModelConfig(**json.loads(str(z["config"])))
        weights = {k[2:]: z[k] for k in z.files if k.startswith("w/")}
        buffers = {k[4:]: z[k] for k in z.files if k.startswith("buf/")}
    return ListenNetParams(weights, buffers), cfg


def write_jsonl(rows, path) -> None:
    with open(path, "w") as fh:
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True) + "\n")


def read_jsonl(path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]
