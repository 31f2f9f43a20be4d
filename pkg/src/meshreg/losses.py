"""Training losses: squared vertex distance, Laplacian smoothness,
masked displacement-map MAE, and their normalized weighted sum.

Each loss returns (value, gradient with respect to the prediction).
Values are raw (mm^2 / mm); the total objective normalizes each term by
fixed per-dataset calibration maxima before weighting.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .mesh import Mesh, laplacian_matrix
from .projection import DisplacementMap


class LossError(ValueError):
    pass


def loss_pos(pred: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    """(1/n) sum of squared vertex offsets; gradient 2(pred - target)/n."""
    p = np.asarray(pred, dtype=np.float64)
    t = np.asarray(target, dtype=np.float64)
    if p.shape != t.shape:
        raise LossError(f"shape mismatch {p.shape} vs {t.shape}")
    n = len(p)
    diff = p - t
    value = float(np.sum(diff * diff) / n)
    grad = 2.0 * diff / n
    return value, grad


def loss_smooth(mesh: Mesh, pred: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    """(1/n) sum of squared Laplacian differences between prediction and
    target; invariant to rigid translation of either argument."""
    p = np.asarray(pred, dtype=np.float64)
    t = np.asarray(target, dtype=np.float64)
    if p.shape != t.shape or p.shape != (mesh.n_vertices, 3):
        raise LossError(f"shape mismatch {p.shape} vs {t.shape} on {mesh.n_vertices} vertices")
    lap = laplacian_matrix(mesh)
    n = len(p)
    diff = lap @ (p - t)
    value = float(np.sum(diff * diff) / n)
    grad = (2.0 / n) * (lap.T @ diff)
    return value, grad


def loss_map(pred: DisplacementMap, target: DisplacementMap) -> tuple[float, np.ndarray]:
    """Mean absolute error over the target's covered pixels, all channels;
    the subgradient is sign(pred - target)/count there, zero elsewhere."""
    if pred.data.shape != target.data.shape:
        raise LossError(f"map shape mismatch {pred.data.shape} vs {target.data.shape}")
    mask = target.mask.astype(bool)
    count = int(mask.sum()) * 3
    grad = np.zeros(pred.data.shape, dtype=np.float64)
    if count == 0:
        return 0.0, grad
    diff = pred.data.astype(np.float64) - target.data.astype(np.float64)
    value = float(np.sum(np.abs(diff[mask])) / count)
    grad[mask] = np.sign(diff[mask]) / count
    return value, grad


@dataclass(frozen=True)
class LossCalibration:
    """Fixed per-dataset maxima of the raw loss components, used to map
    each term into [0, 1] before weighting."""

    pos_max: float
    map_max: float
    smooth_max: float

    def __post_init__(self):
        for name, v in (("pos", self.pos_max), ("map", self.map_max), ("smooth", self.smooth_max)):
            if not np.isfinite(v) or v <= 0:
                raise LossError(f"calibration maximum for {name} must be finite and positive, got {v}")

    def to_dict(self) -> dict:
        return {"pos_max": self.pos_max, "map_max": self.map_max, "smooth_max": self.smooth_max}

    @classmethod
    def from_dict(cls, d: dict | None) -> "LossCalibration":
        if d is None:
            raise LossError("missing loss calibration constants")
        return cls(d["pos_max"], d["map_max"], d["smooth_max"])


@dataclass(frozen=True)
class LossReport:
    l_pos: float
    l_map: float
    l_smooth: float
    total: float
    raw_pos: float
    raw_map: float
    raw_smooth: float


def total_loss(raw_pos: float, raw_map: float, raw_smooth: float,
               calibration: LossCalibration, mu: float = 1.0, lam: float = 0.1) -> LossReport:
    """Normalize each component by its calibration maximum, then weight:
    total = pos + mu * map + lam * smooth."""
    if calibration is None:
        raise LossError("missing loss calibration constants")
    l_pos = raw_pos / calibration.pos_max
    l_map = raw_map / calibration.map_max
    l_smooth = raw_smooth / calibration.smooth_max
    total = l_pos + mu * l_map + lam * l_smooth
    return LossReport(l_pos, l_map, l_smooth, total, raw_pos, raw_map, raw_smooth)
