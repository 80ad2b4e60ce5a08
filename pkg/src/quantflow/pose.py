"""Orientation decoding and pose scoring.

The classifier head scores a fixed grid of unit quaternions; decoding
sign-aligns the grid to the best-scoring cell (q and -q are the same
rotation) and takes the normalized weighted sum. The error metrics follow
the satellite-pose challenge convention: geodesic orientation error plus
translation error relative to the true distance.
"""

from __future__ import annotations

import csv
import math
from pathlib import Path

import numpy as np

__all__ = [
    "quaternion_grid",
    "decode_orientation",
    "orientation_error",
    "position_error",
    "relative_position_error",
    "esa_score",
    "mean_esa",
    "save_poses",
    "load_poses",
]

_PHI = math.sqrt(2.0)
_PSI = 1.533751168755204288118041  # real root of x**4 = x + 4


def quaternion_grid(n: int) -> np.ndarray:
    """n unit quaternions spread uniformly over rotations (super-Fibonacci).

    Deterministic and low-discrepancy; doubling n roughly halves the nearest
    neighbor distance. Returns float64 [n, 4].
    """
    if n < 1:
        raise ValueError(f"grid size must be >= 1, got {n}")
    s = np.arange(n, dtype=np.float64) + 0.5
    t = s / n
    d = 2.0 * np.pi * s
    r = np.sqrt(t)
    big_r = np.sqrt(1.0 - t)
    alpha = d / _PHI
    beta = d / _PSI
    q = np.stack([r * np.sin(alpha), r * np.cos(alpha), big_r * np.sin(beta), big_r * np.cos(beta)], axis=1)
    return q


def decode_orientation(weights: np.ndarray, grid: np.ndarray) -> tuple[np.ndarray, bool]:
    """Weighted quaternion average over the grid, sign-aligned to the argmax.

    Returns (unit quaternion, fallback). The weighted sum cannot vanish when
    the argmax weight is positive (every aligned cell has non-negative dot
    with the argmax cell), so the fallback to the argmax cell only fires for
    all-but-zero weights; it is flagged rather than hidden.
    """
    weights = np.asarray(weights, dtype=np.float64)
    grid = np.asarray(grid, dtype=np.float64)
    if grid.ndim != 2 or grid.shape[1] != 4 or weights.shape != (grid.shape[0],):
        raise ValueError(f"need weights [n] and grid [n, 4], got {weights.shape} and {grid.shape}")
    if np.any(weights < 0) or not np.all(np.isfinite(weights)):
        raise ValueError("weights must be finite and non-negative")
    k = int(np.argmax(weights))
    signs = np.where(grid @ grid[k] < 0, -1.0, 1.0)
    q = (weights * signs) @ grid
    norm = float(np.linalg.norm(q))
    if norm < 1e-9:
        return grid[k].copy(), True
    return q / norm, False


def orientation_error(q_a: np.ndarray, q_b: np.ndarray) -> float:
    """Geodesic angle between two rotations, in degrees. Sign-insensitive."""
    q_a = np.asarray(q_a, dtype=np.float64)
    q_b = np.asarray(q_b, dtype=np.float64)
    dot = abs(float(q_a @ q_b)) / (float(np.linalg.norm(q_a)) * float(np.linalg.norm(q_b)))
    return math.degrees(2.0 * math.acos(min(1.0, dot)))


def position_error(t_est: np.ndarray, t_true: np.ndarray) -> float:
    return float(np.linalg.norm(np.asarray(t_est, dtype=np.float64) - np.asarray(t_true, dtype=np.float64)))


def relative_position_error(t_est: np.ndarray, t_true: np.ndarray) -> float:
    denom = float(np.linalg.norm(np.asarray(t_true, dtype=np.float64)))
    if denom == 0.0:
        raise ValueError("true translation has zero norm; relative error undefined")
    return position_error(t_est, t_true) / denom


def esa_score(q_est: np.ndarray, t_est: np.ndarray, q_true: np.ndarray, t_true: np.ndarray) -> float:
    """Challenge score for one sample: orientation error in radians plus
    translation error divided by the true distance. Lower is better."""
    return math.radians(orientation_error(q_est, q_true)) + relative_position_error(t_est, t_true)


def mean_esa(q_est: np.ndarray, t_est: np.ndarray, q_true: np.ndarray, t_true: np.ndarray) -> float:
    q_est, t_est = np.atleast_2d(q_est), np.atleast_2d(t_est)
    q_true, t_true = np.atleast_2d(q_true), np.atleast_2d(t_true)
    if not (len(q_est) == len(t_est) == len(q_true) == len(t_true)):
        raise ValueError("pose arrays disagree on sample count")
    return float(np.mean([esa_score(qe, te, qt, tt) for qe, te, qt, tt in zip(q_est, t_est, q_true, t_true)]))


_POSE_FIELDS = ["qw", "qx", "qy", "qz", "tx", "ty", "tz"]


def save_poses(path: str | Path, quats: np.ndarray, translations: np.ndarray) -> None:
    quats = np.atleast_2d(np.asarray(quats, dtype=np.float64))
    translations = np.atleast_2d(np.asarray(translations, dtype=np.float64))
    if quats.shape[1] != 4 or translations.shape[1] != 3 or len(quats) != len(translations):
        raise ValueError(f"need [n, 4] quaternions and [n, 3] translations, got {quats.shape} and {translations.shape}")
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(_POSE_FIELDS)
        for q, t in zip(quats, translations):
            writer.writerow([repr(float(v)) for v in (*q, *t)])


def load_poses(path: str | Path) -> tuple[np.ndarray, np.ndarray]:
    rows = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            rows.append([float(row[f]) for f in _POSE_FIELDS])
    arr = np.asarray(rows, dtype=np.float64).reshape(-1, 7)
    return arr[:, :4], arr[:, 4:]
