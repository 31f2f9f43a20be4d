"""Synthetic organ phantoms: parametric closed meshes, smooth seeded
deformation fields with exact point-to-point correspondence, density
volumes, projection images, and dataset serialization.

A dataset directory holds ``manifest.json`` plus per-sample
``img_%04d.tns`` (normalized projection image), ``lbl_%04d.tns``
(semantic label), ``map_%04d.tns`` (ground-truth displacement map, whose
coverage mask is exactly ``label > 0``), ``mesh_%04d.obj`` (template,
with organ labels sidecar), and ``target_%04d.tns`` (ground-truth vertex
positions).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import DataConfig
from .losses import loss_map, loss_pos, loss_smooth, LossCalibration
from .mesh import Mesh, NormalizationBox, compose_multi_organ_graph, load_obj, save_obj
from .projection import (Camera, DensityVolume, DisplacementMap, SemanticLabel,
                         render_drr, render_map_and_label)
from . import tns


class PhantomError(ValueError):
    pass


def sphere_topology(rings: int, segments: int):
    """UV-sphere connectivity: poles plus rings x segments grid; returns
    (phi, theta) per vertex and the triangle list."""
    n = rings * segments + 2
    phi = np.empty(n)
    theta = np.empty(n)
    phi[0], theta[0] = 0.0, 0.0
    for i in range(rings):
        for j in range(segments):
            k = 1 + i * segments + j
            phi[k] = np.pi * (i + 1) / (rings + 1)
            theta[k] = 2 * np.pi * j / segments
    phi[-1], theta[-1] = np.pi, 0.0
    tris = []
    for j in range(segments):
        tris.append([0, 1 + (j + 1) % segments, 1 + j])
    for i in range(rings - 1):
        for j in range(segments):
            a = 1 + i * segments + j
            b = 1 + i * segments + (j + 1) % segments
            c = a + segments
            d = b + segments
            tris.append([a, b, c])
            tris.append([b, d, c])
    base = 1 + (rings - 1) * segments
    for j in range(segments):
        tris.append([n - 1, base + j, base + (j + 1) % segments])
    return phi, theta, np.array(tris, dtype=np.int64)


def _superellipse(value: np.ndarray, exponent: float) -> np.ndarray:
    return np.sign(value) * np.abs(value) ** exponent


def generate_phantom_mesh(kind: str, resolution: int, seed: int) -> Mesh:
    """Closed 2-manifold organ-like mesh; deterministic given the seed.

    ``resolution`` r gives r * (r + 4) + 2 vertices (r = 20 lands in the
    400-500 band typical of planning meshes).
    """
    rings = int(resolution)
    segments = rings + 4
    n = rings * segments + 2
    if not 100 <= n <= 2000:
        raise PhantomError(f"resolution {resolution} gives {n} vertices, outside [100, 2000]")
    if kind not in ("sphere", "ellipsoid", "superellipsoid"):
        raise PhantomError(f"unknown phantom kind {kind!r}")
    rng = np.random.default_rng(seed)
    phi, theta, tris = sphere_topology(rings, segments)
    if kind == "sphere":
        radii = np.full(3, rng.uniform(0.9, 1.1))
        e1 = e2 = 1.0
    elif kind == "ellipsoid":
        radii = rng.uniform(0.75, 1.25, size=3)
        e1 = e2 = 1.0
    else:
        radii = rng.uniform(0.75, 1.25, size=3)
        e1 = rng.uniform(0.7, 1.5)
        e2 = rng.uniform(0.7, 1.5)
    sp = _superellipse(np.sin(phi), e1)
    x = radii[0] * sp * _superellipse(np.cos(theta), e2)
    y = radii[1] * sp * _superellipse(np.sin(theta), e2)
    z = radii[2] * _superellipse(np.cos(phi), e1)
    vertices = np.stack([x, y, z], axis=1)
    return Mesh(vertices, tris, np.zeros(n, dtype=np.int64))


@dataclass(frozen=True)
class DeformParams:
    translation: np.ndarray          # mm
    scale: np.ndarray                # per-axis multipliers about the center
    bend_mm: float                   # sinusoidal bend amplitude
    max_mm: float = 20.0

    def __post_init__(self):
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=np.float64).reshape(3))
        object.__setattr__(self, "scale", np.asarray(self.scale, dtype=np.float64).reshape(3))

    @classmethod
    def zero(cls) -> "DeformParams":
        return cls(np.zeros(3), np.ones(3), 0.0)


def apply_synthetic_deformation(mesh: Mesh, params: DeformParams, seed: int,
                                center: np.ndarray | None = None) -> np.ndarray:
    """Smooth per-vertex field: global translation + anisotropic scaling
    about the center + one low-frequency sinusoidal bend. Raises if any
    vertex displacement exceeds params.max_mm."""
    v = mesh.vertices
    c = v.mean(axis=0) if center is None else np.asarray(center, dtype=np.float64)
    rng = np.random.default_rng(seed)
    axes = np.eye(3)
    drive = axes[rng.integers(0, 3)]
    push = axes[rng.integers(0, 3)]
    phase = rng.uniform(0.0, 2 * np.pi)
    rel = v - c
    extent = np.abs(rel @ drive).max()
    extent = extent if extent > 0 else 1.0
    wave = np.sin(np.pi * (rel @ drive) / extent + phase)
    disp = (params.translation[None, :]
            + rel * (params.scale - 1.0)[None, :]
            + params.bend_mm * wave[:, None] * push[None, :])
    worst = np.linalg.norm(disp, axis=1).max()
    if worst > params.max_mm:
        raise PhantomError(f"deformation reaches {worst:.2f} mm, above the {params.max_mm} mm bound")
    return disp


@dataclass
class Sample:
    """One training/evaluation tuple. ``image`` is raw line integrals when
    produced by :func:`generate_sample` and normalized to [0, 1] once
    written to / loaded from a dataset."""

    image: np.ndarray                 # (H, W) float32
    label: SemanticLabel
    mesh: Mesh                        # template (jitter already applied)
    target: np.ndarray                # (n, 3) ground-truth positions
    disp_map: DisplacementMap
    jitter: np.ndarray = field(default_factory=lambda: np.zeros(3))


def default_camera(cfg: DataConfig) -> Camera:
    return Camera(width=cfg.image_size, height=cfg.image_size,
                  mode="orthographic", center=np.zeros(3), rotation=np.eye(3),
                  scale=cfg.image_size / cfg.scene_extent_mm)


def _organ_centers(cfg: DataConfig) -> np.ndarray:
    centers = np.zeros((cfg.organs, 3))
    span = (cfg.organs - 1) * cfg.organ_spacing_mm
    for k in range(cfg.organs):
        centers[k, 0] = -span / 2 + k * cfg.organ_spacing_mm
    return centers


def _build_geometry(cfg: DataConfig, sample_seed: np.random.SeedSequence):
    """Organ templates and their ground-truth displacement fields."""
    seeds = sample_seed.spawn(2 * cfg.organs + 1)
    centers = _organ_centers(cfg)
    organs = []
    fields = []
    rng = np.random.default_rng(seeds[-1])
    shared = None
    for k in range(cfg.organs):
        kind = cfg.organ_kinds[k % len(cfg.organ_kinds)]
        unit = generate_phantom_mesh(kind, cfg.mesh_resolution, _seed_int(seeds[k]))
        verts = unit.vertices * cfg.organ_radius_mm + centers[k]
        organ = unit.with_vertices(verts)
        if cfg.coupled and shared is not None:
            params, pseed, pcenter = shared
        else:
            params = DeformParams(
                translation=rng.uniform(-cfg.translation_mm, cfg.translation_mm, size=3),
                scale=1.0 + rng.uniform(-cfg.scale_amp, cfg.scale_amp, size=3),
                bend_mm=rng.uniform(0.0, cfg.bend_mm),
                max_mm=cfg.max_deform_mm,
            )
            pseed = _seed_int(seeds[cfg.organs + k])
            pcenter = np.zeros(3) if cfg.coupled else None
            if cfg.coupled:
                shared = (params, pseed, pcenter)
        disp = apply_synthetic_deformation(organ, params, pseed, center=pcenter)
        organs.append(organ)
        fields.append(disp)
    return organs, fields


def _seed_int(seq: np.random.SeedSequence) -> int:
    return int(seq.generate_state(1)[0])


def build_density_volume(cfg: DataConfig, organs: list[Mesh],
                         positions: list[np.ndarray]) -> DensityVolume:
    """Organs voxelized at their deformed positions with per-organ added
    density on a smooth background gradient."""
    from .metrics import voxelize

    res = cfg.volume_res
    half = cfg.scene_extent_mm / 2.0
    origin = np.full(3, -half)
    spacing = np.full(3, cfg.scene_extent_mm / res)
    axis = (np.arange(res) + 0.5) / res
    data = 0.12 + 0.08 * axis[None, :, None] + 0.05 * axis[None, None, :]
    data = np.broadcast_to(data, (res, res, res)).copy()
    for organ, pos, density in zip(organs, positions, cfg.densities):
        if density == 0.0:
            continue
        occ = voxelize(organ, pos, float(spacing[0]), (origin, origin + spacing * res))
        data[occ] += density
    return DensityVolume(data, origin, spacing)


def generate_sample(cfg: DataConfig, sample_seed: np.random.SeedSequence,
                    jitter_mm: float = 0.0) -> Sample:
    """Build one sample: template organs, smooth deformation, density
    volume consistent with the deformed anatomy, projection image,
    semantic label, and ground-truth displacement map."""
    organs, fields = _build_geometry(cfg, sample_seed)
    jitter = np.zeros(3)
    if jitter_mm > 0:
        rng = np.random.default_rng(_seed_int(sample_seed.spawn(1)[0]) ^ 0x5EED)
        direction = rng.standard_normal(3)
        direction /= np.linalg.norm(direction)
        jitter = direction * rng.uniform(0.0, jitter_mm)

    # quantize targets to their on-disk float32 so a reloaded dataset
    # re-renders the stored map bit-exactly
    targets = [(o.vertices + f).astype(np.float32).astype(np.float64)
               for o, f in zip(organs, fields)]
    templates = [o.with_vertices(o.vertices + jitter) for o in organs]

    if cfg.organs == 1:
        mesh = templates[0]
        target = targets[0]
    else:
        mesh = compose_multi_organ_graph(templates)
        target = np.concatenate(targets, axis=0)

    camera = default_camera(cfg)
    displacements = target - mesh.vertices
    disp_map, label = render_map_and_label(camera, mesh, displacements)
    volume = build_density_volume(cfg, organs, targets)
    image = render_drr(camera, volume).astype(np.float32)
    return Sample(image=image, label=label, mesh=mesh, target=target,
                  disp_map=disp_map, jitter=jitter)


@dataclass
class DatasetBundle:
    root: Path
    manifest: dict
    samples: list[Sample]

    @property
    def camera(self) -> Camera:
        return Camera.from_dict(self.manifest["camera"])

    @property
    def norm_box(self) -> NormalizationBox:
        return NormalizationBox.from_dict(self.manifest["norm_box"])

    @property
    def calibration(self) -> LossCalibration:
        return LossCalibration.from_dict(self.manifest.get("calibration"))

    def train_samples(self) -> list[Sample]:
        return self.samples[: self.manifest["n_train"]]

    def test_samples(self) -> list[Sample]:
        return self.samples[self.manifest["n_train"]:]


def generate_dataset(cfg: DataConfig, out_dir: str | Path) -> DatasetBundle:
    """Generate and serialize a full dataset; reload is bit-exact."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    n_total = cfg.n_train + cfg.n_test
    root_seq = np.random.SeedSequence(cfg.seed)
    sample_seqs = root_seq.spawn(n_total)

    # first pass: geometry only, to size the jitter from the actual motion
    pass1_seqs = np.random.SeedSequence(cfg.seed).spawn(n_total)
    mean_disps = []
    for i in range(cfg.n_train):
        _, fields = _build_geometry(cfg, pass1_seqs[i])
        mean_disps.append(np.mean([np.linalg.norm(f, axis=1).mean() for f in fields]))
    mean_disp = float(np.mean(mean_disps))
    jitter_mm = 2.0 * mean_disp

    samples = []
    for i, seq in enumerate(sample_seqs):
        use_jitter = cfg.jitter_train and i < cfg.n_train
        samples.append(generate_sample(cfg, seq, jitter_mm if use_jitter else 0.0))

    all_pts = [s.mesh.vertices for s in samples] + [s.target for s in samples]
    margin = 0.05 * cfg.scene_extent_mm
    box = NormalizationBox.bounding(*all_pts, margin=margin)

    drr_max = float(max(s.image.max() for s in samples))
    drr_max = drr_max if drr_max > 0 else 1.0

    pos_max = map_max = smooth_max = 0.0
    for s in samples[: cfg.n_train]:
        raw_pos, _ = loss_pos(s.mesh.vertices, s.target)
        zero = DisplacementMap(np.zeros_like(s.disp_map.data), s.disp_map.mask)
        raw_map, _ = loss_map(zero, s.disp_map)
        raw_smooth, _ = loss_smooth(s.mesh, s.mesh.vertices, s.target)
        pos_max = max(pos_max, raw_pos)
        map_max = max(map_max, raw_map)
        smooth_max = max(smooth_max, raw_smooth)

    manifest = {
        "camera": default_camera(cfg).to_dict(),
        "norm_box": box.to_dict(),
        "n_train": cfg.n_train,
        "n_test": cfg.n_test,
        "seed": cfg.seed,
        "organs": cfg.organs,
        "densities": list(cfg.densities),
        "coupled": cfg.coupled,
        "mean_disp_mm": mean_disp,
        "jitter_mm": jitter_mm,
        "drr_max": drr_max,
        "calibration": LossCalibration(pos_max, map_max, smooth_max).to_dict(),
        "jitters": [s.jitter.tolist() for s in samples],
        "image_size": cfg.image_size,
        "scene_extent_mm": cfg.scene_extent_mm,
        "files": {"image": "img_%04d.tns", "label": "lbl_%04d.tns",
                  "map": "map_%04d.tns", "mesh": "mesh_%04d.obj",
                  "target": "target_%04d.tns"},
    }

    for i, s in enumerate(samples):
        s.image = (s.image / drr_max).astype(np.float32)
        tns.save_tensor(out / f"img_{i:04d}.tns", s.image)
        tns.save_tensor(out / f"lbl_{i:04d}.tns", s.label.labels.astype(np.float32))
        tns.save_tensor(out / f"map_{i:04d}.tns", s.disp_map.data)
        tns.save_tensor(out / f"target_{i:04d}.tns", s.target.astype(np.float32))
        save_obj(s.mesh, out / f"mesh_{i:04d}.obj")
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return DatasetBundle(out, manifest, samples)


def load_dataset(root: str | Path) -> DatasetBundle:
    root = Path(root)
    manifest = json.loads((root / "manifest.json").read_text())
    n_total = manifest["n_train"] + manifest["n_test"]
    samples = []
    for i in range(n_total):
        image = tns.load_tensor(root / f"img_{i:04d}.tns")
        labels = tns.load_tensor(root / f"lbl_{i:04d}.tns").astype(np.int32)
        data = tns.load_tensor(root / f"map_{i:04d}.tns")
        target = tns.load_tensor(root / f"target_{i:04d}.tns").astype(np.float64)
        mesh = load_obj(root / f"mesh_{i:04d}.obj")
        label = SemanticLabel(labels)
        disp_map = DisplacementMap(data, (labels > 0).astype(np.uint8))
        jitter = np.array(manifest["jitters"][i])
        samples.append(Sample(image=image, label=label, mesh=mesh, target=target,
                              disp_map=disp_map, jitter=jitter))
    return DatasetBundle(root, manifest, samples)
