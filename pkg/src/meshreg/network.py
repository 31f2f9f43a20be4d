"""The registration model: an encoder-decoder image translator that emits
a dense displacement map, bilinear per-vertex sampling of that map, and
an 8-layer graph-convolutional deformer with a residual output.

Parameters live in flat name -> ndarray dicts (float32 for training);
forward passes build an autodiff graph so one backward() call yields all
gradients. The deformer's final layer and the generator head start at
zero, making the untrained model the identity on vertex positions.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import tns
from .config import ArchConfig
from .mesh import GraphOperator, Mesh, NormalizationBox, build_graph_operator
from .projection import Camera, DisplacementMap, SemanticLabel, bilinear_weights, project_vertices
from . import kernels

GCN_LAYERS = 8
GCN_INPUT_WIDTH = 6   # 3 normalized coords + 3 sampled displacement components


class NetworkError(ValueError):
    pass


class NanGradientError(RuntimeError):
    pass


def _glorot(rng: np.random.Generator, shape, fan_in, fan_out, dtype=np.float32):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


def init_generator_params(arch: ArchConfig, seed: int, head: str = "zero") -> dict[str, np.ndarray]:
    """Encoder widths w1/w2/w3 with 2x2 pooling between stages, mirrored
    decoder with skip concatenation, 3-channel output head."""
    w1, w2, w3 = arch.gen_widths
    rng = np.random.default_rng(seed)
    layers = {
        "gen.enc1": (2, w1), "gen.enc2": (w1, w2), "gen.enc3": (w2, w3),
        "gen.dec3": (2 * w3, w2), "gen.dec2": (2 * w2, w1), "gen.dec1": (2 * w1, w1),
        "gen.head": (w1, 3),
    }
    params = {}
    for name, (cin, cout) in layers.items():
        if name == "gen.head" and head == "zero":
            params[f"{name}.w"] = np.zeros((cout, cin, 3, 3), dtype=np.float32)
        else:
            params[f"{name}.w"] = _glorot(rng, (cout, cin, 3, 3), cin * 9, cout * 9)
        params[f"{name}.b"] = np.zeros(cout, dtype=np.float32)
    return params


def init_deformer_params(arch: ArchConfig, seed: int, head: str = "zero") -> dict[str, np.ndarray]:
    h = arch.gcn_hidden
    widths = [GCN_INPUT_WIDTH] + [h] * (GCN_LAYERS - 1) + [3]
    rng = np.random.default_rng(seed)
    params = {}
    for layer in range(GCN_LAYERS):
        din, dout = widths[layer], widths[layer + 1]
        name = f"gcn.l{layer + 1}"
        if layer == GCN_LAYERS - 1 and head == "zero":
            params[f"{name}.w"] = np.zeros((din, dout), dtype=np.float32)
        else:
            params[f"{name}.w"] = _glorot(rng, (din, dout), din, dout)
        params[f"{name}.b"] = np.zeros(dout, dtype=np.float32)
    return params


def init_model_params(arch: ArchConfig, seed: int, head: str = "zero") -> dict[str, np.ndarray]:
    params = init_generator_params(arch, seed, head)
    params.update(init_deformer_params(arch, seed + 1, head))
    return params


def params_as_tensors(params: dict[str, np.ndarray]) -> dict[str, ad.Tensor]:
    return {name: ad.parameter(arr) for name, arr in params.items()}


def generator_apply(p: dict[str, ad.Tensor], img2: np.ndarray) -> ad.Tensor:
    """Build the encoder-decoder graph on a (2, H, W) input; returns the
    (3, H, W) displacement-map tensor."""
    if img2.ndim != 3 or img2.shape[0] != 2:
        raise NetworkError(f"generator input must be (2, H, W), got {img2.shape}")
    h, w = img2.shape[1:]
    if h % 8 or w % 8:
        raise NetworkError(f"image size {h}x{w} not divisible by 8 (3 pooling stages)")
    x = ad.constant(img2)
    e1 = ad.relu(ad.conv3x3(x, p["gen.enc1.w"], p["gen.enc1.b"]))
    e2 = ad.relu(ad.conv3x3(ad.avgpool2(e1), p["gen.enc2.w"], p["gen.enc2.b"]))
    e3 = ad.relu(ad.conv3x3(ad.avgpool2(e2), p["gen.enc3.w"], p["gen.enc3.b"]))
    bottom = ad.avgpool2(e3)
    d3 = ad.relu(ad.conv3x3(ad.concat([ad.upsample2(bottom), e3], axis=0),
                            p["gen.dec3.w"], p["gen.dec3.b"]))
    d2 = ad.relu(ad.conv3x3(ad.concat([ad.upsample2(d3), e2], axis=0),
                            p["gen.dec2.w"], p["gen.dec2.b"]))
    d1 = ad.relu(ad.conv3x3(ad.concat([ad.upsample2(d2), e1], axis=0),
                            p["gen.dec1.w"], p["gen.dec1.b"]))
    return ad.conv3x3(d1, p["gen.head.w"], p["gen.head.b"])


def pack_input_image(image: np.ndarray, label: SemanticLabel, organ_count: int,
                     dtype=np.float32) -> np.ndarray:
    """Stack the projection image with the label scaled to [0, 1]."""
    if image.shape != label.labels.shape:
        raise NetworkError(f"image {image.shape} and label {label.labels.shape} differ")
    scaled = label.labels.astype(dtype) / max(organ_count, 1)
    return np.stack([image.astype(dtype), scaled], axis=0)


def generator_forward(params: dict[str, np.ndarray], image: np.ndarray,
                      label: SemanticLabel, organ_count: int = 1) -> DisplacementMap:
    """Inference-only wrapper; the network predicts everywhere, so the
    returned mask is all ones."""
    img2 = pack_input_image(image, label, organ_count)
    out = generator_apply(params_as_tensors(params), img2)
    data = np.transpose(out.data, (1, 2, 0)).astype(np.float32)
    return DisplacementMap(data, np.ones(data.shape[:2], dtype=np.uint8))


def gcn_layer_forward(operator: GraphOperator, x: np.ndarray, w: np.ndarray,
                      activation: str = "relu") -> np.ndarray:
    """One graph convolution: propagation @ x @ w, then the activation
    ('relu' or 'identity')."""
    out = operator.propagation @ np.asarray(x, dtype=np.float64) @ np.asarray(w, dtype=np.float64)
    if activation == "relu":
        return np.maximum(out, 0.0)
    if activation == "identity":
        return out
    raise NetworkError(f"unknown activation {activation!r}")


def vertex_feature_sampling(disp_map: DisplacementMap, camera: Camera,
                            positions: np.ndarray) -> np.ndarray:
    """Project template vertices and bilinearly sample the map at each
    projection point (vertices sharing a pixel share a sample)."""
    pixels, _, _ = project_vertices(camera, positions)
    ys, xs, ws = bilinear_weights((disp_map.height, disp_map.width), pixels)
    taps = disp_map.data.transpose(2, 0, 1)[:, ys, xs]
    return np.einsum("cnk,nk->nc", taps.astype(np.float64), ws)


@dataclass
class SampleContext:
    """Everything fixed about one sample during forward/backward passes."""

    img2: np.ndarray                   # (2, H, W)
    coords_norm: np.ndarray            # (n, 3) normalized template coords
    ys: np.ndarray
    xs: np.ndarray
    ws: np.ndarray                     # bilinear taps of the template projections
    propagator: object                 # apply(X) for the template graph
    half_extent: np.ndarray            # (3,) denormalization scale
    center: np.ndarray                 # (3,) denormalization offset
    target: np.ndarray                 # (n, 3) ground-truth positions
    target_map: np.ndarray             # (3, H, W)
    map_mask: np.ndarray               # (H, W) bool
    lap_apply: object                  # umbrella Laplacian operator
    lap_t_apply: object                # its transpose


@dataclass
class GraphHandles:
    """Connectivity-derived operators, shareable across samples with the
    same topology."""

    propagator: object
    lap_apply: object
    lap_t_apply: object


def build_graph_handles(mesh: Mesh, dtype=np.float32) -> GraphHandles:
    from .mesh import laplacian_matrix

    op = build_graph_operator(mesh)
    lap = laplacian_matrix(mesh)
    return GraphHandles(
        propagator=kernels.make_linear_operator(op.propagation, dtype=dtype),
        lap_apply=kernels.make_linear_operator(lap, dtype=dtype),
        lap_t_apply=kernels.make_linear_operator(lap.T, dtype=dtype),
    )


def build_sample_context(mesh: Mesh, image: np.ndarray, label: SemanticLabel,
                         target: np.ndarray, disp_map: DisplacementMap,
                         camera: Camera, box: NormalizationBox,
                         organ_count: int, handles: GraphHandles | None = None,
                         dtype=np.float32) -> SampleContext:
    img2 = pack_input_image(image, label, organ_count, dtype)
    coords = box.normalize(mesh.vertices).astype(dtype)
    pixels, _, _ = project_vertices(camera, mesh.vertices)
    ys, xs, ws = bilinear_weights((camera.height, camera.width), pixels)
    if handles is None:
        handles = build_graph_handles(mesh, dtype)
    return SampleContext(
        img2=img2,
        coords_norm=coords,
        ys=ys, xs=xs, ws=ws,
        propagator=handles.propagator,
        half_extent=box.half_extent.astype(dtype),
        center=box.center.astype(dtype),
        target=np.asarray(target, dtype=dtype),
        target_map=np.ascontiguousarray(disp_map.data.transpose(2, 0, 1), dtype=dtype),
        map_mask=disp_map.mask.astype(bool),
        lap_apply=handles.lap_apply,
        lap_t_apply=handles.lap_t_apply,
    )


def model_forward(p: dict[str, ad.Tensor], ctx: SampleContext) -> tuple[ad.Tensor, ad.Tensor]:
    """Full composite pass: returns (map tensor (3, H, W), predicted
    world-frame vertex tensor (n, 3))."""
    u_hat = generator_apply(p, ctx.img2)
    sampled = ad.bilinear_sample(u_hat, ctx.ys, ctx.xs, ctx.ws)
    sampled_norm = ad.affine(sampled, 1.0 / ctx.half_extent)
    feats = ad.concat([ad.constant(ctx.coords_norm), sampled_norm], axis=1)
    x = feats
    for layer in range(GCN_LAYERS):
        name = f"gcn.l{layer + 1}"
        x = ad.add(ad.matmul(ad.propagate(ctx.propagator, x), p[f"{name}.w"]), p[f"{name}.b"])
        if layer < GCN_LAYERS - 1:
            x = ad.relu(x)
    v_norm = ad.add(ad.constant(ctx.coords_norm), x)
    v_world = ad.affine(v_norm, ctx.half_extent, ctx.center)
    return u_hat, v_world


def predict(params: dict[str, np.ndarray], ctx: SampleContext):
    """Inference: numpy (map (3,H,W), vertices (n,3))."""
    u_hat, v_world = model_forward(params_as_tensors(params), ctx)
    return u_hat.data, v_world.data


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
              state: AdamState, lr: float = 1e-4, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8) -> None:
    """Standard bias-corrected update, in place. NaN gradients abort."""
    state.t += 1
    t = state.t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if not np.all(np.isfinite(g)):
            raise NanGradientError(f"non-finite gradient for {name}")
        if g.shape != p.shape:
            raise NetworkError(f"gradient shape {g.shape} != param shape {p.shape} for {name}")
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        m = state.m[name]
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        m_hat = m / (1.0 - beta1 ** t)
        v_hat = v / (1.0 - beta2 ** t)
        p -= (lr * m_hat / (np.sqrt(v_hat) + eps)).astype(p.dtype)


def save_checkpoint(path, params: dict[str, np.ndarray], meta: dict) -> None:
    tns.save_bundle(path, params, meta)


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    return tns.load_bundle(path)
