"""Training loop, evaluation protocols, SR/MR comparison experiments,
overlay rendering, and the finite-difference gradient check."""

from __future__ import annotations

import csv
import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import kernels
from .config import TrainConfig, config_hash, snapshot_text
from .losses import LossCalibration, LossReport, loss_map, loss_pos, loss_smooth, total_loss
from .mesh import Mesh, NormalizationBox
from .metrics import MetricReport, metric_dsc, metric_mae, metric_md_hd, summarize
from .network import (AdamState, GraphHandles, NanGradientError, SampleContext,
                      adam_step, build_graph_handles, build_sample_context,
                      init_model_params, load_checkpoint, model_forward,
                      params_as_tensors, predict, save_checkpoint)
from .phantom import DatasetBundle, Sample, load_dataset
from .projection import (Camera, DisplacementMap, project_vertices,
                         render_displacement_map, render_map_and_label,
                         render_semantic_label)
from .statmodel import AugmentConfig, StatModel, augment_pair, fit_pca


class NanAbortError(RuntimeError):
    """Raised when a loss or gradient goes non-finite; the last completed
    epoch's checkpoint stays on disk."""

    def __init__(self, message, checkpoint_path=None):
        super().__init__(message)
        self.checkpoint_path = checkpoint_path


class TrainError(ValueError):
    pass


@dataclass
class SampleView:
    """One dataset sample resolved for a particular model (whole composed
    mesh for MR, one organ's submesh for SR over a multi-organ dataset)."""

    mesh: Mesh
    target: np.ndarray
    image: np.ndarray
    label: object
    disp_map: DisplacementMap
    organ_count: int
    jitter: np.ndarray


@dataclass
class RunRecord:
    epochs: list[LossReport] = field(default_factory=list)
    wall_time_s: float = 0.0
    config_hash: str = ""
    checkpoint_path: str = ""
    backend: str = ""
    final_metrics: dict | None = None

    def to_dict(self) -> dict:
        return {
            "epochs": len(self.epochs),
            "final_total_loss": self.epochs[-1].total if self.epochs else None,
            "wall_time_s": self.wall_time_s,
            "config_hash": self.config_hash,
            "checkpoint_path": self.checkpoint_path,
            "backend": self.backend,
        }


def _connectivity_key(mesh: Mesh) -> bytes:
    return mesh.triangles.tobytes() + b"|" + mesh.extra_edges.tobytes()


class HandleCache:
    """Graph operators keyed by connectivity, shared across samples."""

    def __init__(self, dtype=np.float32):
        self.dtype = dtype
        self._cache: dict[bytes, GraphHandles] = {}

    def get(self, mesh: Mesh) -> GraphHandles:
        key = _connectivity_key(mesh)
        if key not in self._cache:
            self._cache[key] = build_graph_handles(mesh, self.dtype)
        return self._cache[key]


def make_view(sample: Sample, camera: Camera, mode: str, organ: int,
              dataset_organs: int) -> SampleView:
    if mode == "MR":
        if dataset_organs < 2:
            raise TrainError("MR mode needs a dataset with >= 2 organs")
        return SampleView(sample.mesh, np.asarray(sample.target, dtype=np.float64),
                          sample.image, sample.label, sample.disp_map,
                          dataset_organs, sample.jitter)
    if dataset_organs == 1:
        return SampleView(sample.mesh, np.asarray(sample.target, dtype=np.float64),
                          sample.image, sample.label, sample.disp_map, 1, sample.jitter)
    sub, idx = sample.mesh.submesh(organ)
    target = np.asarray(sample.target, dtype=np.float64)[idx]
    dmap, label = render_map_and_label(camera, sub, target - sub.vertices)
    return SampleView(sub, target, sample.image, label, dmap, 1, sample.jitter)


def build_views(bundle: DatasetBundle, samples: list[Sample], mode: str, organ: int) -> list[SampleView]:
    camera = bundle.camera
    organs = bundle.manifest["organs"]
    return [make_view(s, camera, mode, organ, organs) for s in samples]


def view_calibration(views: list[SampleView]) -> LossCalibration:
    """Identity-model loss maxima over the given training views (equals
    the manifest values for the dataset's native view)."""
    pos_max = map_max = smooth_max = 0.0
    for v in views:
        raw_pos, _ = loss_pos(v.mesh.vertices, v.target)
        zero = DisplacementMap(np.zeros_like(v.disp_map.data), v.disp_map.mask)
        raw_map, _ = loss_map(zero, v.disp_map)
        raw_smooth, _ = loss_smooth(v.mesh, v.mesh.vertices, v.target)
        pos_max = max(pos_max, raw_pos)
        map_max = max(map_max, raw_map)
        smooth_max = max(smooth_max, raw_smooth)
    return LossCalibration(pos_max, map_max, smooth_max)


def forward_losses(ptensors, ctx: SampleContext, cal: LossCalibration,
                   mu: float, lam: float):
    u_hat, v_world = model_forward(ptensors, ctx)
    l_pos_t = ad.mse_rows(v_world, ctx.target)
    l_map_t = ad.masked_mae(u_hat, ctx.target_map, ctx.map_mask)
    l_smooth_t = ad.laplacian_mse(ctx.lap_apply, ctx.lap_t_apply, v_world, ctx.target)
    total_t = ad.weighted_sum(
        [l_pos_t, l_map_t, l_smooth_t],
        [1.0 / cal.pos_max, mu / cal.map_max, lam / cal.smooth_max])
    return total_t, l_pos_t, l_map_t, l_smooth_t


def _augment_view(view: SampleView, model: StatModel, aug: AugmentConfig,
                  seed: int, camera: Camera) -> SampleView:
    truth = view.mesh.with_vertices(view.target)
    deformed, target = augment_pair(truth, model, aug, seed)
    dmap, label = render_map_and_label(camera, deformed, target - deformed.vertices)
    return SampleView(deformed, target, view.image, label, dmap,
                      view.organ_count, np.zeros(3))


def _view_context(view: SampleView, camera: Camera, box: NormalizationBox,
                  cache: HandleCache) -> SampleContext:
    return build_sample_context(view.mesh, view.image, view.label, view.target,
                                view.disp_map, camera, box, view.organ_count,
                                handles=cache.get(view.mesh))


def train(cfg: TrainConfig, bundle: DatasetBundle, out_dir: str | Path,
          statmodel: StatModel | None = None) -> RunRecord:
    """Optimize the composite model on the bundle's training split.

    Deterministic given config and seed. Emits ``config.snapshot``,
    ``curve.csv``, ``checkpoint.tns``, and ``run_record.json`` under
    out_dir. Augmentation, when enabled, re-draws statistical weights for
    every sample of every epoch.
    """
    cfg.validate()
    t_start = time.perf_counter()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.snapshot").write_text(snapshot_text(cfg))

    camera = bundle.camera
    box = bundle.norm_box
    mode, organ = cfg.train.mode, cfg.train.organ
    dataset_organs = bundle.manifest["organs"]
    native = (mode == "MR") or (dataset_organs == 1)
    _ = bundle.calibration  # datasets without calibration constants are rejected
    train_views = build_views(bundle, bundle.train_samples(), mode, organ)
    cal = bundle.calibration if native else view_calibration(train_views)

    cache = HandleCache(np.float32)
    base_contexts = [_view_context(v, camera, box, cache) for v in train_views]

    aug_model = None
    if cfg.augment.enabled:
        if statmodel is not None:
            aug_model = statmodel
        else:
            fields = np.stack([v.target - (v.mesh.vertices - v.jitter) for v in train_views])
            aug_model = fit_pca(fields)
        if aug_model.n_vertices != train_views[0].mesh.n_vertices:
            raise TrainError("statistical model vertex count does not match the training mesh")
    aug_cfg = AugmentConfig(tuple(cfg.augment.weight_max))

    params = init_model_params(cfg.arch, cfg.train.seed)
    state = AdamState()
    record = RunRecord(config_hash=config_hash(cfg), backend=kernels.BACKEND)
    ckpt_path = out / "checkpoint.tns"
    meta = {
        "arch": {"gen_widths": list(cfg.arch.gen_widths), "gcn_hidden": cfg.arch.gcn_hidden},
        "mode": mode, "organ": organ, "epoch": 0, "seed": cfg.train.seed,
        "norm_box": box.to_dict(), "calibration": cal.to_dict(),
        "organ_count": train_views[0].organ_count,
        "image_size": bundle.manifest["image_size"],
        "mu": cfg.train.mu, "lam": cfg.train.lam,
    }

    curve_rows = []
    batch = max(1, cfg.train.batch_size)
    try:
        for epoch in range(1, cfg.train.epochs + 1):
            if aug_model is not None:
                epoch_views = [
                    _augment_view(v, aug_model, aug_cfg,
                                  _epoch_seed(cfg.train.seed, epoch, i), camera)
                    for i, v in enumerate(train_views)
                ]
                contexts = [_view_context(v, camera, box, cache) for v in epoch_views]
            else:
                contexts = base_contexts
            sums = np.zeros(7)
            pending: dict[str, np.ndarray] = {}
            pending_count = 0
            for i, ctx in enumerate(contexts):
                ptensors = params_as_tensors(params)
                total_t, lp, lm, ls = forward_losses(ptensors, ctx, cal,
                                                     cfg.train.mu, cfg.train.lam)
                if not np.isfinite(total_t.data):
                    raise NanAbortError(
                        f"non-finite loss at epoch {epoch}, sample {i}", str(ckpt_path))
                total_t.backward()
                for name, t in ptensors.items():
                    if t.grad is not None:
                        if name in pending:
                            pending[name] += t.grad
                        else:
                            pending[name] = t.grad.copy()
                pending_count += 1
                if pending_count == batch or i == len(contexts) - 1:
                    if batch > 1:
                        for g in pending.values():
                            g /= pending_count
                    adam_step(params, pending, state, cfg.train.lr,
                              cfg.train.beta1, cfg.train.beta2, cfg.train.eps)
                    pending = {}
                    pending_count = 0
                report = total_loss(float(lp.data), float(lm.data), float(ls.data),
                                    cal, cfg.train.mu, cfg.train.lam)
                sums += [report.l_pos, report.l_map, report.l_smooth, report.total,
                         report.raw_pos, report.raw_map, report.raw_smooth]
            means = sums / len(contexts)
            epoch_report = LossReport(*means)
            record.epochs.append(epoch_report)
            curve_rows.append([epoch, means[0], means[1], means[2], means[3]])
            meta["epoch"] = epoch
            save_checkpoint(ckpt_path, params, meta)
    except NanGradientError as err:
        raise NanAbortError(str(err), str(ckpt_path)) from err
    finally:
        _write_curve(out / "curve.csv", curve_rows)

    record.wall_time_s = time.perf_counter() - t_start
    record.checkpoint_path = str(ckpt_path)
    (out / "run_record.json").write_text(json.dumps(record.to_dict(), indent=2, sort_keys=True) + "\n")
    return record


def _epoch_seed(base: int, epoch: int, index: int) -> int:
    return int(np.random.SeedSequence([base, epoch, index]).generate_state(1)[0])


def _write_curve(path: Path, rows: list) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "l_pos", "l_map", "l_smooth", "total"])
        for row in rows:
            writer.writerow([row[0]] + [f"{v:.9g}" for v in row[1:]])


def _fresh_jitter(seed_parts: list[int], jitter_mm: float) -> np.ndarray:
    rng = np.random.default_rng(np.random.SeedSequence(seed_parts))
    direction = rng.standard_normal(3)
    direction /= np.linalg.norm(direction)
    return direction * rng.uniform(0.0, jitter_mm)


@dataclass
class EvalRow:
    sample_id: int
    initial: MetricReport
    predicted: MetricReport


def evaluate(params: dict[str, np.ndarray], meta: dict, bundle: DatasetBundle,
             jitter: bool = False, eval_seed: int = 1000,
             voxel_mm: float = 1.0) -> tuple[list[EvalRow], dict]:
    """Metrics for the initial alignment and the prediction on the test
    split; optionally re-draws the template jitter per sample. Read-only:
    neither the checkpoint nor the dataset is modified."""
    box = bundle.norm_box
    if meta["norm_box"] != box.to_dict():
        raise TrainError("checkpoint normalization box does not match the dataset")
    if meta["image_size"] != bundle.manifest["image_size"]:
        raise TrainError("checkpoint image size does not match the dataset")
    camera = bundle.camera
    mode, organ = meta["mode"], meta.get("organ", 0)
    views = build_views(bundle, bundle.test_samples(), mode, organ)
    cache = HandleCache(np.float32)
    jitter_mm = 2.0 * bundle.manifest["mean_disp_mm"]
    rows = []
    for i, view in enumerate(views):
        mesh = view.mesh
        label = view.label
        if jitter:
            j = _fresh_jitter([eval_seed, i], jitter_mm)
            mesh = mesh.with_vertices(mesh.vertices + j)
            label = render_semantic_label(camera, mesh)
        ctx = build_sample_context(mesh, view.image, label, view.target,
                                   view.disp_map, camera, box, view.organ_count,
                                   handles=cache.get(mesh))
        _, pred = predict(params, ctx)
        pred = pred.astype(np.float64)
        init_md, init_hd = metric_md_hd(mesh.vertices, view.target)
        pred_md, pred_hd = metric_md_hd(pred, view.target)
        initial = MetricReport(init_md, init_hd, metric_mae(mesh.vertices, view.target),
                               metric_dsc(mesh, mesh, voxel_mm, mesh.vertices, view.target))
        predicted = MetricReport(pred_md, pred_hd, metric_mae(pred, view.target),
                                 metric_dsc(mesh, mesh, voxel_mm, pred, view.target))
        rows.append(EvalRow(i, initial, predicted))
    summary = {
        "initial": summarize([r.initial for r in rows]),
        "predicted": summarize([r.predicted for r in rows]),
    }
    return rows, summary


def write_eval_csv(path: str | Path, rows: list[EvalRow]) -> None:
    """Per-sample rows plus one summary row (means)."""
    cols = ["md_mm", "hd_mm", "mae_mm", "dsc_percent"]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id"] + [f"init_{c}" for c in cols] + [f"pred_{c}" for c in cols])
        acc = np.zeros(8)
        for row in rows:
            vals = row.initial.as_row() + row.predicted.as_row()
            acc += vals
            writer.writerow([row.sample_id] + [f"{v:.6f}" for v in vals])
        means = acc / max(len(rows), 1)
        writer.writerow(["mean"] + [f"{v:.6f}" for v in means])


def evaluate_checkpoint(checkpoint_path, dataset_dir, out_csv=None, jitter=False,
                        eval_seed=1000, voxel_mm=1.0):
    params, meta = load_checkpoint(checkpoint_path)
    bundle = load_dataset(dataset_dir)
    rows, summary = evaluate(params, meta, bundle, jitter, eval_seed, voxel_mm)
    if out_csv is not None:
        write_eval_csv(out_csv, rows)
        Path(str(out_csv) + ".summary.json").write_text(
            json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return rows, summary


# --- SR vs MR experiment ---

def per_organ_metrics(view: SampleView, pred: np.ndarray, voxel_mm: float) -> dict[int, MetricReport]:
    out = {}
    for k in range(view.mesh.organ_count()):
        sub, idx = view.mesh.submesh(k)
        target_k = view.target[idx]
        pred_k = pred[idx]
        md, hd = metric_md_hd(pred_k, target_k)
        out[k] = MetricReport(md, hd, metric_mae(pred_k, target_k),
                              metric_dsc(sub, sub, voxel_mm, pred_k, target_k))
    return out


def run_experiment(cfg: TrainConfig, bundle: DatasetBundle, out_dir: str | Path,
                   mode: str = "both") -> dict:
    """Train/evaluate the single-organ (one model per organ) and joint
    multi-organ arms on the same multi-organ dataset; report per-organ
    metrics side by side."""
    if bundle.manifest["organs"] < 2:
        raise TrainError("the SR/MR experiment needs a dataset with >= 2 organs")
    if mode not in ("SR", "MR", "both"):
        raise TrainError(f"experiment mode must be SR, MR, or both, got {mode!r}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    organs = bundle.manifest["organs"]
    voxel = cfg.eval.voxel_mm
    report: dict = {"organs": organs, "seed": cfg.train.seed, "SR": {}, "MR": {}}

    if mode in ("SR", "both"):
        for k in range(organs):
            sub_cfg = _clone_config(cfg)
            sub_cfg.train.mode = "SR"
            sub_cfg.train.organ = k
            train(sub_cfg, bundle, out / f"sr_organ{k}")
            params, meta = load_checkpoint(out / f"sr_organ{k}" / "checkpoint.tns")
            rows, summary = evaluate(params, meta, bundle, jitter=cfg.eval.jitter,
                                     eval_seed=cfg.eval.seed, voxel_mm=voxel)
            report["SR"][str(k)] = summary
            write_eval_csv(out / f"sr_organ{k}" / "metrics.csv", rows)

    if mode in ("MR", "both"):
        mr_cfg = _clone_config(cfg)
        mr_cfg.train.mode = "MR"
        train(mr_cfg, bundle, out / "mr")
        params, meta = load_checkpoint(out / "mr" / "checkpoint.tns")
        mr_rows, mr_summary = evaluate(params, meta, bundle, jitter=cfg.eval.jitter,
                                       eval_seed=cfg.eval.seed, voxel_mm=voxel)
        write_eval_csv(out / "mr" / "metrics.csv", mr_rows)
        report["MR"]["joint"] = mr_summary
        organ_rows: dict[int, list[MetricReport]] = {k: [] for k in range(organs)}
        views = build_views(bundle, bundle.test_samples(), "MR", 0)
        cache = HandleCache(np.float32)
        box = bundle.norm_box
        for view in views:
            ctx = build_sample_context(view.mesh, view.image, view.label, view.target,
                                       view.disp_map, bundle.camera, box,
                                       view.organ_count, handles=cache.get(view.mesh))
            _, pred = predict(params, ctx)
            for k, rep in per_organ_metrics(view, pred.astype(np.float64), voxel).items():
                organ_rows[k].append(rep)
        for k in range(organs):
            report["MR"][str(k)] = summarize(organ_rows[k])

    (out / "experiment.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    return report


def _clone_config(cfg: TrainConfig) -> TrainConfig:
    from .config import config_from_flat, flatten_config

    return config_from_flat(flatten_config(cfg))


# --- overlays ---

def render_overlay(params: dict[str, np.ndarray], meta: dict, bundle: DatasetBundle,
                   sample_index: int, out_png) -> None:
    """Input image with the true shape's projected vertices in magenta and
    the predicted shape's in cyan."""
    from PIL import Image

    samples = bundle.samples
    view = make_view(samples[sample_index], bundle.camera, meta["mode"],
                     meta.get("organ", 0), bundle.manifest["organs"])
    ctx = build_sample_context(view.mesh, view.image, view.label, view.target,
                               view.disp_map, bundle.camera, bundle.norm_box,
                               view.organ_count)
    _, pred = predict(params, ctx)
    img = np.clip(view.image.astype(np.float64), 0, 1)
    rgb = np.stack([img, img, img], axis=-1)
    h, w = img.shape

    def paint(points, color):
        px, _, _ = project_vertices(bundle.camera, points)
        ij = np.round(px).astype(int)
        ok = (ij[:, 0] >= 0) & (ij[:, 0] < w) & (ij[:, 1] >= 0) & (ij[:, 1] < h)
        rgb[ij[ok, 1], ij[ok, 0]] = color

    paint(view.target, (1.0, 0.0, 1.0))          # magenta: ground truth
    paint(pred.astype(np.float64), (0.0, 1.0, 1.0))  # cyan: prediction
    Image.fromarray((rgb * 255).astype(np.uint8), mode="RGB").save(out_png)


# --- gradient check ---

@dataclass
class GradCheckEntry:
    loss: str
    param: str
    max_rel_err: float
    checked: int
    kink_skipped: int = 0


@dataclass
class GradCheckReport:
    entries: list[GradCheckEntry]
    max_rel_err: float
    runtime_s: float
    tolerance: float = 1e-3

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.tolerance


def icosahedron(scale: float = 1.0) -> Mesh:
    """The 12-vertex regular icosahedron (smoke-test mesh)."""
    phi = (1 + np.sqrt(5.0)) / 2
    raw = []
    for a in (-1.0, 1.0):
        for b in (-phi, phi):
            raw += [[0, a, b], [a, b, 0], [b, 0, a]]
    verts = np.array(raw)
    d2 = np.sum((verts[:, None, :] - verts[None, :, :]) ** 2, axis=2)
    edge2 = np.min(d2[d2 > 0])
    adj = np.abs(d2 - edge2) < 1e-9
    tris = [
        [i, j, k]
        for i in range(12) for j in range(i + 1, 12) for k in range(j + 1, 12)
        if adj[i, j] and adj[j, k] and adj[i, k]
    ]
    return Mesh(verts * scale, np.array(tris, dtype=np.int64), np.zeros(12, dtype=np.int64))


def _smoke_setup(seed: int = 7, dtype=np.float64):
    """16x16 image, 12-vertex icosahedron, small widths."""
    from .config import ArchConfig

    mesh = icosahedron(4.0)
    camera = Camera(width=16, height=16, scale=16 / 24.0)
    box = NormalizationBox(np.full(3, -12.0), np.full(3, 12.0))
    rng = np.random.default_rng(seed)
    target = mesh.vertices + rng.uniform(-2.0, 2.0, size=(12, 3))
    dmap = render_displacement_map(camera, mesh, target - mesh.vertices)
    label = render_semantic_label(camera, mesh)
    image = rng.uniform(0.0, 1.0, size=(16, 16)).astype(np.float64)
    arch = ArchConfig(gen_widths=(4, 6, 8), gcn_hidden=8)
    ctx = build_sample_context(mesh, image, label, target, dmap, camera, box, 1,
                               dtype=dtype)
    cal = view_calibration([SampleView(mesh, target, image, label, dmap, 1, np.zeros(3))])
    return arch, ctx, cal


_GRADCHECK_LOSSES = ("pos", "map", "smooth", "total")


def _loss_value(ptensors, ctx, cal, which: str, mu: float = 1.0, lam: float = 0.1):
    total_t, lp, lm, ls = forward_losses(ptensors, ctx, cal, mu, lam)
    return {"pos": lp, "map": lm, "smooth": ls, "total": total_t}[which]


def _probe_numeric(params, ctx, cal, which, flat, idx, step):
    """Central difference at the given step; returns (slope, crossed_kink).

    The two forward passes record every relu/absolute-value sign pattern;
    differing patterns mean f is not linear across [x-h, x+h] in its
    piecewise structure and the central estimate is unreliable there.
    """
    old = flat[idx]
    with ad.capture_kinks() as sig_plus:
        flat[idx] = old + step
        f_plus = float(_loss_value(params_as_tensors(params), ctx, cal, which).data)
    with ad.capture_kinks() as sig_minus:
        flat[idx] = old - step
        f_minus = float(_loss_value(params_as_tensors(params), ctx, cal, which).data)
    flat[idx] = old
    return (f_plus - f_minus) / (2 * step), sig_plus != sig_minus


def gradcheck(seed: int = 7, step: float = 1e-3, max_entries_per_tensor: int = 4,
              tolerance: float = 1e-3) -> GradCheckReport:
    """Central-difference check of every parameter tensor against the
    backward pass, per loss term and for the total objective, on the
    float64 smoke model.

    Probes that straddle a relu/absolute-value kink (where the central
    difference itself is invalid) retry with a smaller step and are
    counted as skipped if no kink-free step is found. Failures are report
    entries, not exceptions.
    """
    t0 = time.perf_counter()
    arch, ctx, cal = _smoke_setup(seed)
    params32 = init_model_params(arch, seed, head="random")
    params = {k: v.astype(np.float64) for k, v in params32.items()}
    rng = np.random.default_rng(seed + 1)
    entries = []
    for which in _GRADCHECK_LOSSES:
        ptensors = params_as_tensors(params)
        loss_t = _loss_value(ptensors, ctx, cal, which)
        loss_t.backward()
        for name in sorted(params):
            analytic = ptensors[name].grad
            if analytic is None:
                analytic = np.zeros_like(params[name])
            flat = params[name].reshape(-1)
            count = min(max_entries_per_tensor, flat.size)
            picks = rng.choice(flat.size, size=count, replace=False)
            worst = 0.0
            skipped = 0
            for idx in picks:
                numeric = None
                for trial_step in (step, step / 8, step / 64):
                    slope, crossed = _probe_numeric(params, ctx, cal, which,
                                                    flat, idx, trial_step)
                    if not crossed:
                        numeric = slope
                        break
                if numeric is None:
                    skipped += 1
                    continue
                a = analytic.reshape(-1)[idx]
                denom = max(abs(a), abs(numeric), 1e-6)
                worst = max(worst, abs(a - numeric) / denom)
            entries.append(GradCheckEntry(which, name, worst, count - skipped, skipped))
    max_err = max(e.max_rel_err for e in entries)
    return GradCheckReport(entries, max_err, time.perf_counter() - t0, tolerance)


def gradcheck_zero_head(seed: int = 7) -> float:
    """With zero-initialized output heads the vertex loss has no path into
    the generator; returns the largest analytic generator gradient (should
    be exactly zero)."""
    arch, ctx, cal = _smoke_setup(seed)
    params32 = init_model_params(arch, seed, head="zero")
    params = {k: v.astype(np.float64) for k, v in params32.items()}
    ptensors = params_as_tensors(params)
    loss_t = _loss_value(ptensors, ctx, cal, "pos")
    loss_t.backward()
    worst = 0.0
    for name, t in ptensors.items():
        if name.startswith("gen.") and t.grad is not None:
            worst = max(worst, float(np.abs(t.grad).max()))
    return worst
