"""Scoring against synthetic truth, working from files only.

The scorer never sees the in-memory state of a study: it reads a truth file
and a prediction file and compares them.  Two file shapes are understood:
grid files (see ``transport.write_grid``) and vertex tables with header
``process,epoch,index,value`` (truth) or ``process,epoch,index,mean,sd,prior_sd``
(prediction).  Holdout tables carry ``value,mean,sd`` per held-out datum.
"""
from __future__ import annotations

import csv
from collections import defaultdict
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import stats

from .transport import read_grid

__all__ = ["grid_rmse", "holdout_coverage", "vertex_scores", "read_table"]


def read_table(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def grid_rmse(truth_path, prediction_path, mask_path=None) -> float:
    """RMSE between two grid files, optionally over cells where a mask grid is nonzero."""
    g1, truth = read_grid(truth_path)
    g2, pred = read_grid(prediction_path)
    if g1 != g2:
        raise ValueError("truth and prediction grids differ")
    sel = np.ones(truth.shape, dtype=bool)
    if mask_path is not None:
        sel = read_grid(mask_path)[1] != 0
    sel &= np.isfinite(truth) & np.isfinite(pred)
    return float(np.sqrt(np.mean((truth[sel] - pred[sel]) ** 2)))


def holdout_coverage(paths: Sequence, level: float = 0.95) -> tuple[float, int]:
    """Fraction of held-out data inside mean +/- z sd, pooled over the given tables."""
    z = stats.norm.ppf(0.5 + level / 2.0)
    hit = n = 0
    for p in paths:
        for r in read_table(p):
            v, m, s = float(r["value"]), float(r["mean"]), float(r["sd"])
            hit += abs(v - m) <= z * s
            n += 1
    return (hit / n if n else float("nan")), n


def vertex_scores(pairs: Sequence[tuple]) -> dict:
    """Per-process RMSE against prior SD, pooled over (truth, prediction) file pairs.

    For every (process, vertex) the squared errors and prior variances are
    pooled over all files and epochs; a vertex passes when its RMSE is below
    its RMS prior SD.  Returns, per process, the pass fraction, the vertex
    count and the median RMSE/prior-SD ratio.
    """
    se = defaultdict(float)
    pv = defaultdict(float)
    cnt = defaultdict(int)
    for truth_path, pred_path in pairs:
        truth = {(r["process"], int(r["epoch"]), int(r["index"])): float(r["value"]) for r in read_table(truth_path)}
        for r in read_table(pred_path):
            key = (r["process"], int(r["epoch"]), int(r["index"]))
            if key not in truth:
                raise KeyError(f"{Path(pred_path).name}: no truth for {key}")
            vk = (key[0], key[2])
            se[vk] += (float(r["mean"]) - truth[key]) ** 2
            pv[vk] += float(r["prior_sd"]) ** 2
            cnt[vk] += 1
    out: dict = {}
    by_proc = defaultdict(list)
    for vk, n in cnt.items():
        rmse = np.sqrt(se[vk] / n)
        psd = np.sqrt(pv[vk] / n)
        by_proc[vk[0]].append(rmse / psd)
    for proc, ratios in sorted(by_proc.items()):
        ratios = np.array(ratios)
        out[proc] = {
            "pass_fraction": float(np.mean(ratios < 1.0)),
            "n_vertices": int(len(ratios)),
            "median_ratio": float(np.median(ratios)),
        }
    return out
