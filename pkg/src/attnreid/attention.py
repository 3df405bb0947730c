"""Gradient-weighted activation maps over the inference path.

For a probed feature layer A and a scalar embedding component x_n, the
component map is the channel mean of |(dx_n/dA^k) * A^k|. The holistic
map averages component maps over the whole embedding vector; the partial
map for channel group i averages maps of the pooled final-feature
components belonging to that group. Gradients are taken on the inference
graph only (branches never run here).
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from . import ops
from .errors import ConfigError
from .model import ModelBundle, backbone_forward, embed
from .netpbm import write_pgm, write_ppm
from .tensor import Tape, Tensor

PROBE_LAYERS = ("block1", "block4")


@dataclass
class AttentionMap:
    values: np.ndarray      # (Hf, Wf), all entries >= 0
    layer: str
    probe: str              # "embed:<n>" | "pooled:<c>" | "holistic" | "group:<i>"
    source: str | None = None


def _component_map(bundle: ModelBundle, image: np.ndarray, layer: str, scalar_of) -> np.ndarray:
    """Channel mean of |grad * activation| for one scalar probe.

    ``scalar_of(features, embedding)`` picks the scalar whose gradient is
    taken; one forward/backward pair per call.
    """
    dtype = bundle.config.np_dtype
    x = Tensor(np.asarray(image, dtype=dtype)[None])
    tape = Tape()
    tape.watch(x)
    try:
        lowlevel, features = backbone_forward(x, bundle)
        embedding = embed(features, bundle)
        probe = lowlevel if layer == "block1" else features
        out = scalar_of(features, embedding)
        tape.backward(out)
        grad = np.zeros_like(probe.data) if probe.grad is None else probe.grad
        act = probe.data
    finally:
        tape.release()
    return np.abs(grad[0] * act[0]).mean(axis=0)


def _check_layer(layer: str) -> None:
    if layer not in PROBE_LAYERS:
        raise ConfigError(f"probe layer must be one of {PROBE_LAYERS}, got {layer!r}")


def grad_cam_component(bundle: ModelBundle, image, layer: str = "block1",
                       component: int = 0, source: str | None = None) -> AttentionMap:
    """Activation map of one embedding component."""
    _check_layer(layer)
    if not 0 <= component < bundle.config.embed_dim:
        raise ConfigError(
            f"embedding component {component} outside [0, {bundle.config.embed_dim})"
        )
    values = _component_map(
        bundle, image, layer, lambda feats, emb: ops.pick(emb, (0, component))
    )
    return AttentionMap(values, layer, f"embed:{component}", source)


def holistic_attention_map(bundle: ModelBundle, image, layer: str = "block1",
                           source: str | None = None) -> AttentionMap:
    """Mean of the per-component maps over the full embedding vector."""
    _check_layer(layer)
    total = None
    dim = bundle.config.embed_dim
    for n in range(dim):
        m = _component_map(bundle, image, layer, lambda feats, emb, n=n: ops.pick(emb, (0, n)))
        total = m if total is None else total + m
    return AttentionMap(total / dim, layer, "holistic", source)


def partial_attention_map(bundle: ModelBundle, image, group: int,
                          layer: str = "block1", source: str | None = None) -> AttentionMap:
    """Mean of maps of the pooled final-feature components of one group."""
    _check_layer(layer)
    scheme = bundle.scheme
    if not 0 <= group < scheme.num_groups:
        raise ConfigError(f"group {group} outside [0, {scheme.num_groups})")
    start, stop = scheme.channel_range(group, bundle.config.feature_channels)
    total = None
    for c in range(start, stop):
        m = _component_map(
            bundle, image, layer,
            lambda feats, emb, c=c: ops.pick(ops.global_avg_pool(feats), (0, c)),
        )
        total = m if total is None else total + m
    return AttentionMap(total / (stop - start), layer, f"group:{group}", source)


def _bilinear_upsample(values: np.ndarray, height: int, width: int) -> np.ndarray:
    src_h, src_w = values.shape
    ys = (np.arange(height) + 0.5) * src_h / height - 0.5
    xs = (np.arange(width) + 0.5) * src_w / width - 0.5
    y0 = np.clip(np.floor(ys).astype(int), 0, src_h - 1)
    x0 = np.clip(np.floor(xs).astype(int), 0, src_w - 1)
    y1 = np.clip(y0 + 1, 0, src_h - 1)
    x1 = np.clip(x0 + 1, 0, src_w - 1)
    wy = np.clip(ys - y0, 0.0, 1.0)[:, None]
    wx = np.clip(xs - x0, 0.0, 1.0)[None, :]
    v00 = values[np.ix_(y0, x0)]
    v01 = values[np.ix_(y0, x1)]
    v10 = values[np.ix_(y1, x0)]
    v11 = values[np.ix_(y1, x1)]
    return (v00 * (1 - wy) * (1 - wx) + v01 * (1 - wy) * wx
            + v10 * wy * (1 - wx) + v11 * wy * wx)


def normalized(values: np.ndarray) -> np.ndarray:
    """Min-max to [0,1]; a constant map normalizes to zeros with a warning."""
    lo, hi = float(values.min()), float(values.max())
    if hi - lo < 1e-12:
        warnings.warn("constant attention map normalized to zeros")
        return np.zeros_like(values)
    return (values - lo) / (hi - lo)


def export_heatmap(amap: AttentionMap, path, overlay_image=None, overlay_path=None) -> None:
    """Write the normalized map as PGM; optional color overlay as PPM."""
    norm = normalized(amap.values)
    write_pgm(path, norm)
    if overlay_image is not None:
        if overlay_path is None:
            raise ConfigError("overlay_path required when overlay_image is given")
        img = np.asarray(overlay_image, dtype=np.float64)
        if img.ndim == 3 and img.shape[0] == 3:
            img = img.transpose(1, 2, 0)
        height, width = img.shape[:2]
        heat = _bilinear_upsample(norm, height, width)
        overlay = img.copy()
        overlay[:, :, 0] = np.clip(0.45 * img[:, :, 0] + 0.55 * heat, 0, 1)
        overlay[:, :, 1] = np.clip(0.45 * img[:, :, 1] + 0.25 * heat, 0, 1)
        overlay[:, :, 2] = np.clip(0.45 * img[:, :, 2], 0, 1)
        write_ppm(overlay_path, overlay)


def mask_mass_fraction(amap: AttentionMap, mask: np.ndarray) -> float:
    """Fraction of map mass falling inside the (1,H,W) ground-truth mask."""
    m = mask[0] if mask.ndim == 3 else mask
    heat = _bilinear_upsample(amap.values, m.shape[0], m.shape[1])
    total = float(heat.sum())
    if total <= 0:
        return 0.0
    return float(heat[m > 0].sum()) / total
