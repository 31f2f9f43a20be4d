"""PCA statistical model of per-vertex displacement fields and weighted
synthesis for online training augmentation.

Components are stored unit-norm with their singular values kept
separately, so a weight of 1 on component k means "one standard mode":
d = w0 * mean + sum_k wk * sigma_k * component_k. Component signs follow
a first-nonzero-positive convention to keep fits deterministic.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .mesh import Mesh
from . import tns


class StatModelError(ValueError):
    pass


@dataclass(frozen=True)
class StatModel:
    mean: np.ndarray            # (n, 3)
    components: np.ndarray      # (m, n, 3) unit-norm, orthogonal
    singular_values: np.ndarray  # (m,) descending

    def __post_init__(self):
        object.__setattr__(self, "mean", np.asarray(self.mean, dtype=np.float64))
        object.__setattr__(self, "components", np.asarray(self.components, dtype=np.float64))
        object.__setattr__(self, "singular_values", np.asarray(self.singular_values, dtype=np.float64))

    @property
    def n_vertices(self) -> int:
        return self.mean.shape[0]

    @property
    def n_components(self) -> int:
        return self.components.shape[0]

    def save(self, path: str | Path) -> None:
        tns.save_bundle(path, {
            "mean": self.mean,
            "components": self.components.reshape(self.n_components, -1) if self.n_components
            else np.zeros((0, self.n_vertices * 3)),
            "singular_values": self.singular_values,
        }, meta={"n_vertices": self.n_vertices})

    @classmethod
    def load(cls, path: str | Path) -> "StatModel":
        tensors, meta = tns.load_bundle(path)
        n = int(meta["n_vertices"])
        comps = tensors["components"].reshape(-1, n, 3)
        return cls(tensors["mean"].astype(np.float64), comps.astype(np.float64),
                   tensors["singular_values"].astype(np.float64))


@dataclass(frozen=True)
class AugmentConfig:
    """Per-call weight randomization ranges: weight k is drawn uniformly
    in [-max_k, +max_k]. Index 0 scales the mean field."""

    weight_max: tuple[float, ...] = (2.0, 1.0, 0.0)

    def __post_init__(self):
        if len(self.weight_max) < 1:
            raise StatModelError("at least the mean weight must be configured")
        if not all(np.isfinite(self.weight_max)):
            raise StatModelError("weight ranges must be finite")


def fit_pca(fields: list[np.ndarray] | np.ndarray) -> StatModel:
    """Mean plus principal directions of the centered, flattened fields,
    ordered by decreasing singular value. Zero-variance directions are
    dropped."""
    arr = np.asarray(fields, dtype=np.float64)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise StatModelError(f"expected (k, n, 3) displacement fields, got {arr.shape}")
    k, n, _ = arr.shape
    if k < 2:
        raise StatModelError("need at least 2 fields")
    mean = arr.mean(axis=0)
    centered = (arr - mean).reshape(k, n * 3)
    _, svals, vt = np.linalg.svd(centered, full_matrices=False)
    scale = np.sqrt(max(k - 1, 1))
    keep = svals > 1e-12 * max(svals[0], 1.0) if len(svals) else np.zeros(0, dtype=bool)
    svals = svals[keep] / scale
    vt = vt[keep]
    for row in vt:
        nz = np.flatnonzero(np.abs(row) > 1e-12)
        if len(nz) and row[nz[0]] < 0:
            row *= -1.0
    return StatModel(mean, vt.reshape(-1, n, 3), svals)


def synthesize_displacement(model: StatModel, weights: np.ndarray) -> np.ndarray:
    """d = w0 * mean + sum_{k>=1} wk * sigma_k * component_k; linear in
    the weights."""
    w = np.asarray(weights, dtype=np.float64).reshape(-1)
    if len(w) > model.n_components + 1:
        raise StatModelError(
            f"{len(w)} weights for a model with {model.n_components} components")
    d = np.zeros_like(model.mean)
    if len(w) >= 1:
        d = d + w[0] * model.mean
    for k in range(1, len(w)):
        d = d + w[k] * model.singular_values[k - 1] * model.components[k - 1]
    return d


def project_field(model: StatModel, field: np.ndarray) -> np.ndarray:
    """Weights (w0=1 plus per-component w) reconstructing the field."""
    centered = (np.asarray(field, dtype=np.float64) - model.mean).reshape(-1)
    comps = model.components.reshape(model.n_components, -1)
    coords = comps @ centered
    safe = np.where(model.singular_values > 0, model.singular_values, 1.0)
    return np.concatenate([[1.0], coords / safe])


def augment_pair(mesh: Mesh, model: StatModel, config: AugmentConfig,
                 seed: int) -> tuple[Mesh, np.ndarray]:
    """Deform a ground-truth mesh backwards into a fresh training template.

    Draws weights uniformly in the configured ranges, moves every vertex
    by -d, and returns (deformed template, original vertices as target).
    """
    if model.n_vertices != mesh.n_vertices:
        raise StatModelError(
            f"model has {model.n_vertices} vertices, mesh has {mesh.n_vertices}")
    rng = np.random.default_rng(seed)
    wmax = np.asarray(config.weight_max, dtype=np.float64)
    usable = min(len(wmax), model.n_components + 1)
    weights = rng.uniform(-wmax[:usable], wmax[:usable])
    d = synthesize_displacement(model, weights)
    deformed = mesh.with_vertices(mesh.vertices - d)
    return deformed, mesh.vertices.copy()
