"""Grid sweeps over rank, latent bit-width and extra sparsity."""
from __future__ import annotations

import csv
import itertools
import logging
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, replace

import numpy as np

from .factorizer import CalibrationSet, SolverConfig
from .pipeline import compress_layer
from .tensor_core import WeightTensor

__all__ = ["SweepRow", "SWEEP_COLUMNS", "pareto_flags", "run_sweep", "write_csv", "worker_count"]

log = logging.getLogger(__name__)

SWEEP_COLUMNS = ["k", "d", "b_z", "e", "compression_ratio", "mse", "wall_time", "pareto", "error"]


@dataclass
class SweepRow:
    k: int
    d: int
    b_z: int
    e: float
    compression_ratio: float
    mse: float
    wall_time: float
    pareto: bool = False
    error: str = ""


def pareto_flags(ratios, errors) -> np.ndarray:
    """Non-dominated points when maximizing ``ratios`` and minimizing ``errors``.

    NaN errors (failed cells) are never on the front.
    """
    ratios = np.asarray(ratios, dtype=np.float64)
    errors = np.asarray(errors, dtype=np.float64)
    flags = np.zeros(len(ratios), dtype=bool)
    valid = np.nonzero(~np.isnan(errors))[0]
    # best ratio first; among equal ratios lowest error first
    order = valid[np.lexsort((errors[valid], -ratios[valid]))]
    best_err = np.inf
    prev = None
    for i in order:
        if errors[i] < best_err:
            flags[i] = True
            best_err = errors[i]
        elif prev is not None and ratios[i] == ratios[prev] and errors[i] == errors[prev] and flags[prev]:
            flags[i] = True  # exact duplicate of a front point
        prev = i
    return flags


def worker_count() -> int:
    env = os.environ.get("QSPCA_THREADS")
    if env:
        return max(1, int(env))
    return min(4, os.cpu_count() or 1)


def _cell(W, cal, d, b_c, solver, k, b_z, e):
    start = time.perf_counter()
    try:
        cfg = replace(solver, sparsity=None, extra_sparsity=e if e > 0 else None)
        result = compress_layer(W, cal, d, k, b_c, b_z, cfg)
        mse = result.heldout_mse(cal)
        ratio = float(result.size.C_r)
        error = ""
    except Exception as exc:  # a failed cell must not stop the sweep
        log.warning("sweep cell k=%s b_z=%s e=%s failed: %s", k, b_z, e, exc)
        ratio, mse, error = float("nan"), float("nan"), f"{type(exc).__name__}: {exc}"
    return SweepRow(k, d, b_z, e, ratio, mse, time.perf_counter() - start, False, error)


def run_sweep(W: WeightTensor, cal: CalibrationSet, d, ks, b_zs, es, b_c=4, solver: SolverConfig = None,
              workers=None) -> list:
    """Compress every ``(k, b_z, e)`` combination and flag the Pareto front.

    The metric is held-out calibration MSE.  Rows come back in grid order.
    """
    solver = solver or SolverConfig()
    grid = list(itertools.product(ks, b_zs, es))
    if not grid:
        raise ValueError("sweep grid is empty")
    workers = workers or worker_count()
    args = [(W, cal, d, b_c, solver, k, b_z, e) for k, b_z, e in grid]
    if workers == 1:
        rows = [_cell(*a) for a in args]
    else:
        with ThreadPoolExecutor(workers) as pool:
            rows = list(pool.map(lambda a: _cell(*a), args))
    flags = pareto_flags([r.compression_ratio for r in rows], [r.mse for r in rows])
    for row, flag in zip(rows, flags):
        row.pareto = bool(flag)
    return rows


def write_csv(rows, fh) -> None:
    writer = csv.DictWriter(fh, fieldnames=SWEEP_COLUMNS, lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow(asdict(row))
