"""Loss, optimizer, split plans, training loop with early stopping, metrics."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import ConfigError, MetricError
from .model import ListenNetParams, ModelConfig, init_params, model_backward, model_forward, predict

log = logging.getLogger(__name__)

PROB_CLAMP = 1e-7

SUBJECT_DEPENDENT = "subject_dependent"
LOSO = "loso"
MODES = (SUBJECT_DEPENDENT, LOSO)


@dataclass
class TrainConfig:
    mode: str = SUBJECT_DEPENDENT
    learning_rate: float = 5e-4
    weight_decay: float = 3e-4
    batch_size: int = 32
    max_epochs: int = 100
    patience: int = 10
    seed: int = 0
    val_fraction_loso: float = 0.1

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if min(self.learning_rate, self.batch_size, self.max_epochs, self.patience) <= 0:
            raise ConfigError("learning_rate, batch_size, max_epochs and patience must be positive")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be non-negative")
        if self.patience > self.max_epochs:
            raise ConfigError(f"patience {self.patience} exceeds max_epochs {self.max_epochs}")
        if not 0.0 <= self.val_fraction_loso < 1.0:
            raise ConfigError("val_fraction_loso must lie in [0, 1)")

    @classmethod
    def for_mode(cls, mode: str, **overrides) -> "TrainConfig":
        """Per-protocol defaults, with keyword overrides."""
        if mode == LOSO:
            base = dict(mode=LOSO, learning_rate=1e-3, batch_size=128)
        else:
            base = dict(mode=SUBJECT_DEPENDENT, learning_rate=5e-4, batch_size=32)
        base.update(overrides)
        return cls(**base)


# --------------------------------------------------------------------------
# loss


def bce_loss(probs: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Binary cross-entropy on the class-1 probability. Returns (loss, dL/dprobs)."""
    labels = np.asarray(labels, dtype=np.float64)
    n = probs.shape[0]
    q_raw = probs[:, 1].astype(np.float64)
    q = np.clip(q_raw, PROB_CLAMP, 1.0 - PROB_CLAMP)
    loss = -np.mean(labels * np.log(q) + (1.0 - labels) * np.log(1.0 - q))
    dq = -(labels / q - (1.0 - labels) / (1.0 - q)) / n
    dq[(q_raw < PROB_CLAMP) | (q_raw > 1.0 - PROB_CLAMP)] = 0.0
    grad = np.zeros_like(probs)
    grad[:, 1] = dq
    return float(loss), grad


# --------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    skipped: int = 0

    @classmethod
    def zeros_like(cls, weights: dict[str, np.ndarray], **kw) -> "AdamState":
        return cls({k: np.zeros_like(v) for k, v in weights.items()},
                   {k: np.zeros_like(v) for k, v in weights.items()}, **kw)


def adam_step(weights: dict[str, np.ndarray], grads: dict[str, np.ndarray],
              state: AdamState, lr: float, weight_decay: float = 0.0) -> bool:
    """In-place Adam update with coupled L2 decay. Returns False if the step
    was skipped because a gradient was non-finite."""
    if grads.keys() != weights.keys():
        raise ConfigError("gradient keys do not match parameter keys")
    if not all(np.all(np.isfinite(g)) for g in grads.values()):
        state.skipped += 1
        log.warning("non-finite gradient, Adam step skipped (%d so far)", state.skipped)
        return False
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for k, p in weights.items():
        g = grads[k] + weight_decay * p
        m = state.m[k]
        v = state.v[k]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= (lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.dtype)
    return True


# --------------------------------------------------------------------------
# splits


@dataclass
class SplitPlan:
    mode: str
    fold_id: str
    train: list[int]
    val: list[int]
    test: list[int]

    def validate(self, population: int, subjects: Optional[Sequence[str]] = None) -> None:
        """Assert disjointness, coverage and (for LOSO) a single held-out subject."""
        sets = [set(self.train), set(self.val), set(self.test)]
        sizes = [len(self.train), len(self.val), len(self.test)]
        assert [len(s) for s in sets] == sizes, "duplicate indices inside a split"
        assert not (sets[0] & sets[1] or sets[0] & sets[2] or sets[1] & sets[2]), "splits overlap"
        assert sets[0] | sets[1] | sets[2] == set(range(population)), "splits do not cover the population"
        if self.mode == LOSO and subjects is not None:
            held = {subjects[i] for i in self.test}
            assert held == {self.fold_id}, f"test split holds subjects {held}"
            assert all(subjects[i] != self.fold_id for i in self.train + self.val), "test subject leaked"


def split_subject_dependent(windows: Sequence, seed: int, fold_id: str = "") -> SplitPlan:
    """Shuffled 8:1:1 split; validation and test take floor(n/10) each."""
    n = len(windows)
    if n < 10:
        raise ConfigError(f"need at least 10 windows for an 8:1:1 split, got {n}")
    subjects = {getattr(w, "subject_id", None) for w in windows}
    if len(subjects) > 1:
        raise ConfigError(f"subject-dependent split over several subjects: {sorted(map(str, subjects))}")
    order = np.random.default_rng(seed).permutation(n).tolist()
    k = n // 10
    return SplitPlan(SUBJECT_DEPENDENT, fold_id or str(next(iter(subjects))),
                     order[:n - 2 * k], order[n - 2 * k:n - k], order[n - k:])


def split_loso(subjects: Sequence[str], test_subject: str, seed: int,
               val_fraction: float = 0.1) -> SplitPlan:
    """``subjects`` gives the subject id of every window in the dataset."""
    distinct = set(subjects)
    if len(distinct) < 2:
        raise ConfigError("LOSO needs at least two subjects")
    if test_subject not in distinct:
        raise ConfigError(f"unknown test subject {test_subject!r}")
    test = [i for i, s in enumerate(subjects) if s == test_subject]
    rest = [i for i, s in enumerate(subjects) if s != test_subject]
    rest = [rest[j] for j in np.random.default_rng(seed).permutation(len(rest))]
    n_val = int(math.floor(val_fraction * len(rest)))
    return SplitPlan(LOSO, test_subject, rest[n_val:], rest[:n_val], test)


# --------------------------------------------------------------------------
# training


class EarlyStopping:
    """Tracks the best score (higher is better) and signals when `patience`
    epochs have passed without strict improvement."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best_score = -math.inf
        self.best_epoch = 0
        self.counter = 0

    def step(self, score: float, epoch: int) -> bool:
        """Record an epoch; returns True when the score is a new best."""
        if score > self.best_score:
            self.best_score, self.best_epoch, self.counter = score, epoch, 0
            return True
        self.counter += 1
        return False

    @property
    def should_stop(self) -> bool:
        return self.counter >= self.patience


def evaluate(params: ListenNetParams, x: np.ndarray, y: np.ndarray, cfg: ModelConfig) -> float:
    if len(x) == 0:
        raise MetricError("accuracy is undefined on an empty window list")
    pred = np.argmax(predict(x, params, cfg), axis=1)
    return float(np.mean(pred == np.asarray(y)))


def train_loop(train_x: np.ndarray, train_y: np.ndarray, val_x: np.ndarray, val_y: np.ndarray,
               model_cfg: ModelConfig, train_cfg: TrainConfig,
               params: Optional[ListenNetParams] = None,
               on_epoch: Optional[Callable[[dict], None]] = None,
               ) -> tuple[ListenNetParams, list[dict]]:
    """Mini-batch Adam with early stopping on validation accuracy.

    Without validation windows, early stopping monitors (negated) training loss.
    Returns the best snapshot and per-epoch history records.
    """
    if len(train_x) == 0:
        raise ConfigError("empty training set")
    params = init_params(model_cfg, train_cfg.seed) if params is None else params
    state = AdamState.zeros_like(params.weights)
    rng = np.random.default_rng(train_cfg.seed + 1)
    stopper = EarlyStopping(train_cfg.patience)
    best = params.copy()
    history = []
    n = len(train_x)
    for epoch in range(1, train_cfg.max_epochs + 1):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, train_cfg.batch_size):
            idx = order[start:start + train_cfg.batch_size]
            probs, cache = model_forward(train_x[idx], params, model_cfg, training=True)
            loss, g = bce_loss(probs, train_y[idx])
            grads = model_backward(cache, g)
            adam_step(params.weights, grads, state, train_cfg.learning_rate, train_cfg.weight_decay)
            total += loss * len(idx)
        train_loss = total / n
        val_acc = evaluate(params, val_x, val_y, model_cfg) if len(val_x) else None
        record = {"epoch": epoch, "train_loss": train_loss, "val_acc": val_acc}
        history.append(record)
        if on_epoch is not None:
            on_epoch(record)
        if stopper.step(val_acc if val_acc is not None else -train_loss, epoch):
            best = params.copy()
        if stopper.should_stop:
            log.info("early stop at epoch %d (best epoch %d)", epoch, stopper.best_epoch)
            break
    return best, history
