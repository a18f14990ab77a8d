"""Error metrics for predicted trajectories: MSE, relative L2 error, Pearson
correlation, and the per-step evaluation report."""

from __future__ import annotations

import csv
import json
import math
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np


class ZeroVariance(ValueError):
    pass


def _pair(pred, truth) -> tuple[np.ndarray, np.ndarray]:
    p, t = np.asarray(pred, dtype=float), np.asarray(truth, dtype=float)
    if p.shape != t.shape:
        raise ValueError(f"shape mismatch {p.shape} vs {t.shape}")
    return p, t


def mse(pred, truth) -> float:
    p, t = _pair(pred, truth)
    return float(np.mean((p - t) ** 2))


def rne(pred, truth) -> float:
    """||pred - truth|| / ||truth|| over all entries."""
    p, t = _pair(pred, truth)
    return float(np.linalg.norm(p - t) / np.linalg.norm(t))


def rne_per_step(pred, truth) -> np.ndarray:
    p, t = _pair(pred, truth)
    p, t = p.reshape(len(p), -1), t.reshape(len(t), -1)
    return np.linalg.norm(p - t, axis=1) / np.linalg.norm(t, axis=1)


def pearson(pred, truth) -> float:
    """Correlation of two fields flattened over nodes and channels."""
    p, t = _pair(pred, truth)
    p, t = p.ravel() - p.mean(), t.ravel() - t.mean()
    sp, st = np.sqrt(p @ p), np.sqrt(t @ t)
    if st == 0 or sp == 0:
        raise ZeroVariance("constant field has no correlation")
    return float(np.clip((p @ t) / (sp * st), -1.0, 1.0))


def pearson_per_step(pred, truth) -> tuple[np.ndarray, int]:
    """Per-step correlation; undefined steps are NaN and counted."""
    p, t = _pair(pred, truth)
    out = np.empty(len(p))
    undefined = 0
    for k in range(len(p)):
        try:
            out[k] = pearson(p[k], t[k])
        except ZeroVariance:
            out[k] = np.nan
            undefined += 1
    return out, undefined


@dataclass
class EvalReport:
    mse: np.ndarray  # per step
    rne: np.ndarray
    corr: np.ndarray
    n_nodes: int
    global_mse: float
    global_rne: float
    undefined_corr: int = 0

    @property
    def steps(self) -> int:
        return len(self.mse)

    def summary(self) -> dict:
        corr = self.corr[np.isfinite(self.corr)]
        return {
            "steps": self.steps,
            "nodes": self.n_nodes,
            "mse": self.global_mse,
            "rne": self.global_rne,
            "mean_step_rne": float(np.mean(self.rne)) if self.steps else math.nan,
            "mean_corr": float(np.mean(corr)) if len(corr) else math.nan,
            "min_corr": float(np.min(corr)) if len(corr) else math.nan,
            "undefined_corr_steps": self.undefined_corr,
        }


def evaluate(pred, truth, skip_initial: bool = False) -> EvalReport:
    """Per-step metrics of (T, N, m) trajectories; optionally drop frame 0."""
    p, t = _pair(pred, truth)
    if p.ndim == 2:
        p, t = p[..., None], t[..., None]
    if skip_initial:
        p, t = p[1:], t[1:]
    per_mse = ((p - t) ** 2).reshape(len(p), -1).mean(axis=1)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        per_rne = rne_per_step(p, t)
    corr, undefined = pearson_per_step(p, t)
    return EvalReport(per_mse, per_rne, corr, p.shape[1], mse(p, t), rne(p, t), undefined)


def write_report(report: EvalReport, csv_path, json_path) -> None:
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "mse", "rne", "corr"])
        for k in range(report.steps):
            w.writerow([k, repr(float(report.mse[k])), repr(float(report.rne[k])), repr(float(report.corr[k]))])
    Path(json_path).write_text(json.dumps(report.summary(), indent=2, sort_keys=True) + "\n")
