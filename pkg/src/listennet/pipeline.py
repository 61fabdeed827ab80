"""Preprocessing -> splits -> training -> evaluation, per protocol fold."""
from __future__ import annotations

import logging
from pathlib import Path
from typing import Optional

import numpy as np

from .fileio import Manifest, RunConfig, load_recordings, save_params, write_jsonl
from .model import ListenNetParams, ModelConfig
from .preprocess import (DecisionWindow, align_by_subject, make_windows, stack_windows,
                         zscore_normalize)
from .train import LOSO, evaluate, split_loso, split_subject_dependent, train_loop

log = logging.getLogger(__name__)


class StageError(RuntimeError):
    """Wraps a failure with the pipeline stage it happened in."""

    def __init__(self, stage: str, exc: Exception):
        super().__init__(f"[{stage}] {exc}")
        self.stage = stage
        self.original = exc


def _stage(name):
    def wrap(fn):
        def inner(*args, **kwargs):
            try:
                return fn(*args, **kwargs)
            except StageError:
                raise
            except Exception as exc:  # noqa: BLE001 - re-raised with the stage name
                raise StageError(name, exc) from exc
        return inner
    return wrap


@_stage("preprocess")
def prepare_windows(man: Manifest, run: RunConfig) -> list[DecisionWindow]:
    win = run.window_samples(man.fs)
    stride = run.stride_samples(man.fs)
    windows: list[DecisionWindow] = []
    for rec in load_recordings(man):
        windows += make_windows(zscore_normalize(rec), win, stride)
    if not windows:
        raise ValueError("no decision windows produced; recordings shorter than the window")
    return windows


@_stage("split")
def plan_folds(windows: list[DecisionWindow], run: RunConfig):
    """Yields (fold index, subject, plan, index list the plan refers to)."""
    tcfg = run.train_config()
    subjects = sorted({w.subject_id for w in windows})
    folds = []
    for i, s in enumerate(subjects):
        if tcfg.mode == LOSO:
            ids = [w.subject_id for w in windows]
            plan = split_loso(ids, s, tcfg.seed, tcfg.val_fraction_loso)
            plan.validate(len(windows), ids)
            folds.append((i, s, plan, list(range(len(windows)))))
        else:
            idx = [j for j, w in enumerate(windows) if w.subject_id == s]
            plan = split_subject_dependent([windows[j] for j in idx], tcfg.seed, s)
            plan.validate(len(idx))
            folds.append((i, s, plan, idx))
    return folds


@_stage("align")
def align_fold(windows: list[DecisionWindow], plan, run: RunConfig) -> list[DecisionWindow]:
    if not run.align:
        return windows
    if plan.mode == LOSO:
        # every subject, including the held-out one, is whitened by its own windows
        return align_by_subject(windows)[0]
    return align_by_subject(windows, [windows[i] for i in plan.train])[0]


@_stage("train")
def fit_fold(windows, plan, model_cfg: ModelConfig, run: RunConfig, history_path: Optional[Path] = None):
    x, y = stack_windows(windows)
    tr, va = np.array(plan.train), np.array(plan.val, dtype=int)
    params, history = train_loop(x[tr], y[tr], x[va], y[va], model_cfg, run.train_config())
    if history_path is not None:
        write_jsonl(history, history_path)
    return params, history


@_stage("evaluate")
def score_fold(params: ListenNetParams, windows, plan, model_cfg: ModelConfig) -> float:
    x, y = stack_windows([windows[i] for i in plan.test])
    return evaluate(params, x, y, model_cfg)


def run_training(man: Manifest, run: RunConfig, out_dir=None) -> list[dict]:
    """Run every fold of the configured protocol; returns the summary rows.

    With ``out_dir`` set, writes ``summary.jsonl`` plus one directory per fold
    holding ``params.npz`` and ``history.jsonl``.
    """
    model_cfg = _stage("config")(run.model_config)(man.channels, man.fs)
    windows = prepare_windows(man, run)
    out = Path(out_dir) if out_dir is not None else None
    rows = []
    for fold, subject, plan, idx in plan_folds(windows, run):
        fold_windows = align_fold([windows[j] for j in idx], plan, run)
        fold_dir = None
        if out is not None:
            fold_dir = out / f"fold{fold:02d}_{subject}"
            fold_dir.mkdir(parents=True, exist_ok=True)
        params, _ = fit_fold(fold_windows, plan, model_cfg, run,
                             fold_dir / "history.jsonl" if fold_dir else None)
        acc = score_fold(params, fold_windows, plan, model_cfg)
        if fold_dir is not None:
            save_params(params, model_cfg, fold_dir / "params.npz")
        log.info("fold %d (%s): test accuracy %.4f", fold, subject, acc)
        rows.append({"fold": fold, "subject": subject,
                     "window_seconds": run.window_seconds, "test_accuracy": acc})
    if out is not None:
        write_jsonl(rows, out / "summary.jsonl")
    return rows
