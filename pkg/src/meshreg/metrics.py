"""Registration quality metrics: mean/Hausdorff nearest-vertex distance,
per-vertex mean absolute error, and volumetric Dice overlap."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import kernels
from .mesh import Mesh, is_watertight


class MetricError(ValueError):
    pass


@dataclass(frozen=True)
class MetricReport:
    md_mm: float
    hd_mm: float
    mae_mm: float
    dsc_percent: float

    def as_row(self) -> list[float]:
        return [self.md_mm, self.hd_mm, self.mae_mm, self.dsc_percent]


def metric_md_hd(pred_vertices: np.ndarray, target_vertices: np.ndarray) -> tuple[float, float]:
    """Bidirectional nearest-vertex distances; MD is their mean, HD their max."""
    a = np.asarray(pred_vertices, dtype=np.float64).reshape(-1, 3)
    b = np.asarray(target_vertices, dtype=np.float64).reshape(-1, 3)
    if len(a) == 0 or len(b) == 0:
        raise MetricError("empty vertex set")
    d2 = np.sum((a[:, None, :] - b[None, :, :]) ** 2, axis=2)
    fwd = np.sqrt(d2.min(axis=1))
    rev = np.sqrt(d2.min(axis=0))
    both = np.concatenate([fwd, rev])
    return float(both.mean()), float(both.max())


def metric_mae(pred_vertices: np.ndarray, target_vertices: np.ndarray) -> float:
    """Mean Euclidean distance between corresponding vertices (not squared)."""
    a = np.asarray(pred_vertices, dtype=np.float64).reshape(-1, 3)
    b = np.asarray(target_vertices, dtype=np.float64).reshape(-1, 3)
    if a.shape != b.shape:
        raise MetricError(f"vertex count mismatch {a.shape} vs {b.shape}")
    return float(np.linalg.norm(a - b, axis=1).mean())


def voxelize(mesh: Mesh, positions: np.ndarray | None = None, voxel_mm: float = 1.0,
             bounds: tuple[np.ndarray, np.ndarray] | None = None) -> np.ndarray:
    """Parity-test occupancy of a closed mesh on voxel centers."""
    if voxel_mm <= 0:
        raise MetricError("voxel size must be positive")
    if not is_watertight(mesh):
        raise MetricError("mesh is not watertight")
    pos = mesh.vertices if positions is None else np.asarray(positions, dtype=np.float64)
    if bounds is None:
        lo = pos.min(axis=0) - voxel_mm
        hi = pos.max(axis=0) + voxel_mm
    else:
        lo, hi = bounds
    shape = tuple(int(math.ceil((hi[i] - lo[i]) / voxel_mm)) for i in range(3))
    spacing = np.full(3, voxel_mm)
    return kernels.voxelize_parity(pos, mesh.triangles, lo, spacing, shape)


def metric_dsc(pred_mesh: Mesh, target_mesh: Mesh, voxel_mm: float = 1.0,
               pred_positions: np.ndarray | None = None,
               target_positions: np.ndarray | None = None) -> float:
    """Dice overlap of the two enclosed volumes, in percent, on a shared grid."""
    p = pred_mesh.vertices if pred_positions is None else np.asarray(pred_positions)
    t = target_mesh.vertices if target_positions is None else np.asarray(target_positions)
    lo = np.minimum(p.min(axis=0), t.min(axis=0)) - voxel_mm
    hi = np.maximum(p.max(axis=0), t.max(axis=0)) + voxel_mm
    occ_p = voxelize(pred_mesh, p, voxel_mm, (lo, hi))
    occ_t = voxelize(target_mesh, t, voxel_mm, (lo, hi))
    inter = np.logical_and(occ_p, occ_t).sum()
    total = occ_p.sum() + occ_t.sum()
    if total == 0:
        return 0.0
    return float(200.0 * inter / total)


def evaluate_pair(pred_mesh: Mesh, target_mesh: Mesh, voxel_mm: float = 1.0) -> MetricReport:
    md, hd = metric_md_hd(pred_mesh.vertices, target_mesh.vertices)
    mae = metric_mae(pred_mesh.vertices, target_mesh.vertices)
    dsc = metric_dsc(pred_mesh, target_mesh, voxel_mm)
    return MetricReport(md, hd, mae, dsc)


METRIC_COLUMNS = ["md_mm", "hd_mm", "mae_mm", "dsc_percent"]


def write_metric_csv(path: str | Path, rows: dict[str, MetricReport]) -> None:
    """One row per sample id plus nothing else; summary goes to JSON."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id"] + METRIC_COLUMNS)
        for sample_id, report in rows.items():
            writer.writerow([sample_id] + [f"{v:.6f}" for v in report.as_row()])


def summarize(reports: list[MetricReport]) -> dict:
    """Mean and standard deviation per metric."""
    arr = np.array([r.as_row() for r in reports], dtype=np.float64)
    return {
        name: {"mean": float(arr[:, i].mean()), "std": float(arr[:, i].std())}
        for i, name in enumerate(METRIC_COLUMNS)
    }


def write_metric_summary(path: str | Path, reports: list[MetricReport]) -> None:
    Path(path).write_text(json.dumps(summarize(reports), indent=2, sort_keys=True) + "\n")
