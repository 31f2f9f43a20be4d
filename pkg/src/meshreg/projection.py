"""Camera model, z-buffered rasterization of displacement maps and
semantic labels, ray-integrated projection images, and bilinear sampling.

Continuous pixel coordinates put pixel (ix, iy) at exactly (ix, iy); a
pixel is covered iff its center is inside the triangle (top-left
tie-break). Depth increases away from the camera.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .mesh import Mesh


class ProjectionError(ValueError):
    pass


@dataclass(frozen=True)
class Camera:
    """Orthographic (default) or pinhole-perspective camera.

    World positions map to camera frame via R @ (p - center); the camera
    looks along +z of that frame. ``scale`` is pixels per millimeter on
    the image plane; for perspective it applies at distance ``focal_mm``.
    """

    width: int
    height: int
    mode: str = "orthographic"
    center: np.ndarray = field(default_factory=lambda: np.zeros(3))
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    scale: float = 1.0
    focal_mm: float = 100.0

    def __post_init__(self):
        if self.width < 16 or self.height < 16:
            raise ProjectionError(f"image size {self.width}x{self.height} below 16x16")
        if self.mode not in ("orthographic", "perspective"):
            raise ProjectionError(f"unknown camera mode {self.mode!r}")
        object.__setattr__(self, "center", np.asarray(self.center, dtype=np.float64).reshape(3))
        r = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        if abs(np.linalg.det(r)) < 1e-9:
            raise ProjectionError("camera rotation is singular")
        object.__setattr__(self, "rotation", r)
        if self.scale <= 0:
            raise ProjectionError("scale must be positive")

    @property
    def view_direction(self) -> np.ndarray:
        return self.rotation.T @ np.array([0.0, 0.0, 1.0])

    def to_dict(self) -> dict:
        return {
            "width": self.width, "height": self.height, "mode": self.mode,
            "center": self.center.tolist(), "rotation": self.rotation.tolist(),
            "scale": self.scale, "focal_mm": self.focal_mm,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Camera":
        return cls(width=d["width"], height=d["height"], mode=d["mode"],
                   center=np.array(d["center"]), rotation=np.array(d["rotation"]),
                   scale=d["scale"], focal_mm=d["focal_mm"])


@dataclass
class DisplacementMap:
    """Per-pixel 3D world-frame displacement (mm) with coverage mask."""

    data: np.ndarray   # (H, W, 3) float32
    mask: np.ndarray   # (H, W) uint8, 1 = covered

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float32)
        self.mask = np.asarray(self.mask, dtype=np.uint8)
        if self.data.ndim != 3 or self.data.shape[2] != 3:
            raise ProjectionError(f"displacement map shape {self.data.shape} not (H, W, 3)")
        if self.mask.shape != self.data.shape[:2]:
            raise ProjectionError("mask shape mismatch")
        if not np.all(np.isfinite(self.data)):
            raise ProjectionError("non-finite displacement values")

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def height(self) -> int:
        return self.data.shape[0]


@dataclass
class SemanticLabel:
    """Per-pixel organ label, 0 = background, k = organ k-1."""

    labels: np.ndarray  # (H, W) int32

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int32)
        if self.labels.ndim != 2:
            raise ProjectionError("label image must be 2D")
        if self.labels.min() < 0:
            raise ProjectionError("negative label")

    @property
    def width(self) -> int:
        return self.labels.shape[1]

    @property
    def height(self) -> int:
        return self.labels.shape[0]


def project_vertices(camera: Camera, positions: np.ndarray):
    """Continuous pixel coordinates (n, 2), depth (n,), valid mask (n,).

    Perspective points at or behind the camera plane are flagged invalid,
    not raised.
    """
    p = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
    cam = (p - camera.center) @ camera.rotation.T
    depth = cam[:, 2].copy()
    if camera.mode == "orthographic":
        xy = cam[:, :2] * camera.scale
        valid = np.ones(len(p), dtype=bool)
    else:
        valid = depth > 1e-9
        z = np.where(valid, depth, 1.0)
        xy = cam[:, :2] * (camera.scale * camera.focal_mm) / z[:, None]
    pixels = xy + np.array([camera.width / 2.0, camera.height / 2.0])
    return pixels, depth, valid


def rasterize_mesh(camera: Camera, mesh: Mesh, positions: np.ndarray | None = None):
    """Shared raster pass: per-pixel index into mesh.triangles (-1 for
    background), barycentric weights, and depth buffer for the front
    surface."""
    pos = mesh.vertices if positions is None else positions
    pixels, depth, valid = project_vertices(camera, pos)
    tris = mesh.triangles
    keep = None
    if camera.mode == "perspective" and not valid.all():
        keep = np.flatnonzero(np.all(valid[tris], axis=1))
        tris = tris[keep]
    tri_idx, bary, zbuf = kernels.rasterize(pixels, depth, tris, camera.width, camera.height)
    if keep is not None:
        covered = tri_idx >= 0
        tri_idx[covered] = keep[tri_idx[covered]].astype(np.int32)
    return tri_idx, bary, zbuf


def _interp_displacements(mesh: Mesh, disp: np.ndarray, tri_idx, bary, covered) -> DisplacementMap:
    data = np.zeros((tri_idx.shape[0], tri_idx.shape[1], 3), dtype=np.float64)
    if covered.any():
        corner = disp[mesh.triangles[tri_idx[covered]]]        # (k, 3 verts, 3)
        data[covered] = np.einsum("kv,kvc->kc", bary[covered], corner)
    return DisplacementMap(data.astype(np.float32), covered.astype(np.uint8))


def _organ_labels(mesh: Mesh, tri_idx, covered) -> SemanticLabel:
    labels = np.zeros(tri_idx.shape, dtype=np.int32)
    if covered.any():
        tri_organ = mesh.organ_id[mesh.triangles[:, 0]]
        labels[covered] = tri_organ[tri_idx[covered]] + 1
    return SemanticLabel(labels)


def render_displacement_map(camera: Camera, mesh: Mesh, displacements: np.ndarray) -> DisplacementMap:
    """Rasterize per-vertex displacement vectors with barycentric
    interpolation; the z-buffer keeps the front-most surface. No culling:
    back-facing triangles render too."""
    disp = np.asarray(displacements, dtype=np.float64)
    if disp.shape != (mesh.n_vertices, 3):
        raise ProjectionError(f"displacements shape {disp.shape} != ({mesh.n_vertices}, 3)")
    tri_idx, bary, _ = rasterize_mesh(camera, mesh)
    return _interp_displacements(mesh, disp, tri_idx, bary, tri_idx >= 0)


def render_semantic_label(camera: Camera, mesh: Mesh) -> SemanticLabel:
    """Front-most organ_id + 1 per covered pixel, 0 for background."""
    tri_idx, _, _ = rasterize_mesh(camera, mesh)
    return _organ_labels(mesh, tri_idx, tri_idx >= 0)


def render_map_and_label(camera: Camera, mesh: Mesh,
                         displacements: np.ndarray) -> tuple[DisplacementMap, SemanticLabel]:
    """Both raster products from a single z-buffer pass; bitwise identical
    to calling the two single-product renderers."""
    disp = np.asarray(displacements, dtype=np.float64)
    if disp.shape != (mesh.n_vertices, 3):
        raise ProjectionError(f"displacements shape {disp.shape} != ({mesh.n_vertices}, 3)")
    tri_idx, bary, _ = rasterize_mesh(camera, mesh)
    covered = tri_idx >= 0
    return (_interp_displacements(mesh, disp, tri_idx, bary, covered),
            _organ_labels(mesh, tri_idx, covered))


@dataclass(frozen=True)
class DensityVolume:
    """Uniform grid of non-negative densities; cell centers at
    origin + (i + 0.5) * spacing, indexed (ix, iy, iz)."""

    data: np.ndarray
    origin: np.ndarray
    spacing: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "data", np.asarray(self.data, dtype=np.float64))
        object.__setattr__(self, "origin", np.asarray(self.origin, dtype=np.float64).reshape(3))
        object.__setattr__(self, "spacing", np.asarray(self.spacing, dtype=np.float64).reshape(3))
        if self.data.ndim != 3 or min(self.data.shape) < 1:
            raise ProjectionError("volume must be 3D and non-empty")
        if not np.all(np.isfinite(self.data)) or self.data.min() < 0:
            raise ProjectionError("densities must be finite and non-negative")
        if np.any(self.spacing <= 0):
            raise ProjectionError("zero volume extent")


def render_drr(camera: Camera, volume: DensityVolume, step_mm: float | None = None) -> np.ndarray:
    """Raw line integrals of density along each pixel ray (H, W) float64.

    Additive integration (midpoint rule, trilinear samples); callers
    normalize by a dataset-wide maximum when building image files.
    """
    if step_mm is None:
        step_mm = float(np.min(volume.spacing))
    h, w = camera.height, camera.width
    ix, iy = np.meshgrid(np.arange(w, dtype=np.float64), np.arange(h, dtype=np.float64))
    xy_cam = (np.stack([ix, iy], axis=-1).reshape(-1, 2)
              - np.array([w / 2.0, h / 2.0])) / camera.scale
    if camera.mode != "orthographic":
        raise ProjectionError("ray-integral rendering supports the orthographic mode")
    rot_t = camera.rotation.T
    origins = np.concatenate([xy_cam, np.zeros((len(xy_cam), 1))], axis=1) @ rot_t.T + camera.center
    direction = camera.view_direction
    lo = volume.origin
    hi = volume.origin + volume.spacing * np.array(volume.data.shape)
    corners = np.array([[x, y, z] for x in (lo[0], hi[0]) for y in (lo[1], hi[1]) for z in (lo[2], hi[2])])
    t_vals = (corners - camera.center) @ direction
    t0 = float(t_vals.min()) - step_mm
    t1 = float(t_vals.max()) + step_mm
    n_steps = max(1, int(np.ceil((t1 - t0) / step_mm)))
    acc = kernels.drr_accumulate(volume.data, volume.origin, volume.spacing,
                                 origins, direction, t0, n_steps, step_mm)
    return acc.reshape(h, w)


def sample_bilinear(disp_map: DisplacementMap, point: np.ndarray) -> np.ndarray:
    """Bilinear interpolation of the 4 surrounding pixel centers,
    channel-wise; out-of-bounds points clamp to the border."""
    return sample_bilinear_many(disp_map.data, np.asarray(point, dtype=np.float64).reshape(1, 2))[0]


def sample_bilinear_many(data: np.ndarray, points: np.ndarray) -> np.ndarray:
    """Vectorized bilinear sampling of (H, W, C) at (n, 2) pixel coords."""
    h, w = data.shape[:2]
    x = np.clip(points[:, 0], 0.0, w - 1.0)
    y = np.clip(points[:, 1], 0.0, h - 1.0)
    x0 = np.clip(np.floor(x).astype(np.int64), 0, w - 2) if w > 1 else np.zeros(len(x), dtype=np.int64)
    y0 = np.clip(np.floor(y).astype(np.int64), 0, h - 2) if h > 1 else np.zeros(len(y), dtype=np.int64)
    fx = (x - x0)[:, None]
    fy = (y - y0)[:, None]
    v00 = data[y0, x0]
    v01 = data[y0, x0 + 1] if w > 1 else v00
    v10 = data[y0 + 1, x0] if h > 1 else v00
    v11 = data[y0 + 1, x0 + 1] if w > 1 and h > 1 else v00
    return (v00 * (1 - fx) * (1 - fy) + v01 * fx * (1 - fy)
            + v10 * (1 - fx) * fy + v11 * fx * fy)


def bilinear_weights(shape_hw: tuple[int, int], points: np.ndarray):
    """Indices and weights of the 4 pixels each point touches; the exact
    adjoint of :func:`sample_bilinear_many` for gradient scattering.

    Returns (y_idx (n,4), x_idx (n,4), w (n,4)).
    """
    h, w = shape_hw
    x = np.clip(points[:, 0], 0.0, w - 1.0)
    y = np.clip(points[:, 1], 0.0, h - 1.0)
    x0 = np.clip(np.floor(x).astype(np.int64), 0, max(w - 2, 0))
    y0 = np.clip(np.floor(y).astype(np.int64), 0, max(h - 2, 0))
    fx = x - x0
    fy = y - y0
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    ys = np.stack([y0, y0, y1, y1], axis=1)
    xs = np.stack([x0, x1, x0, x1], axis=1)
    ws = np.stack([(1 - fx) * (1 - fy), fx * (1 - fy), (1 - fx) * fy, fx * fy], axis=1)
    return ys, xs, ws


def save_png_gray(array: np.ndarray, path) -> None:
    """8-bit grayscale preview of a float image scaled by its max."""
    from PIL import Image

    a = np.asarray(array, dtype=np.float64)
    peak = a.max()
    if peak > 0:
        a = a / peak
    img = (np.clip(a, 0.0, 1.0) * 255).astype(np.uint8)
    Image.fromarray(img, mode="L").save(path)
