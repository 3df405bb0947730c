"""Training objectives: batch-hard triplet, mask and keypoint losses.

The mask and keypoint terms use per-sample (per-channel) L2 norms, not
squared norms; a squared variant is available for ablation. The combined
objective is reid + lambda_h * mask + lambda_p * keypoint.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ops
from .errors import ConfigError, DimensionError, NumericalError, SamplingError
from .tensor import Tensor

NORM_EPS = 1e-12


@dataclass(frozen=True)
class LossWeights:
    lambda_h: float = 0.003
    lambda_p: float = 0.003
    triplet_mode: str = "soft"  # "soft" | "hard"
    triplet_margin: float = 0.3
    squared_norms: bool = False


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _sample_norms(diff, axes, squared: bool):
    """Per-sample (or per-channel) L2 norm over the given axes."""
    s = ops.reduce_sum(ops.square(diff), axis=axes)
    if squared:
        return s
    return ops.sqrt(ops.add_scalar(s, NORM_EPS))


def mask_loss(pred, target, squared: bool = False) -> Tensor:
    """Mean over the batch of the L2 norm between predicted and true mask."""
    pred, target = _as_tensor(pred), _as_tensor(target)
    if pred.shape != target.shape:
        raise DimensionError(f"mask_loss: shape mismatch {pred.shape} vs {target.shape}")
    if pred.ndim != 4:
        raise DimensionError(f"mask_loss: expected (N,1,H,W), got {pred.shape}")
    norms = _sample_norms(ops.sub(pred, target), (1, 2, 3), squared)
    return ops.reduce_mean(norms)


def gaussian_heatmap(center, visible, sigma: float, height: int, width: int) -> np.ndarray:
    """Unit-peak Gaussian centred on the keypoint; all zeros if invisible."""
    if sigma <= 0:
        raise ConfigError(f"gaussian sigma must be positive, got {sigma}")
    if not visible:
        return np.zeros((height, width))
    cx = min(max(float(center[0]), 0.0), width - 1.0)
    cy = min(max(float(center[1]), 0.0), height - 1.0)
    ys = np.arange(height)[:, None]
    xs = np.arange(width)[None, :]
    return np.exp(-((xs - cx) ** 2 + (ys - cy) ** 2) / (2.0 * sigma ** 2))


def heatmap_targets(keypoints: np.ndarray, sigma: float, height: int, width: int) -> np.ndarray:
    """(K,H,W) stack of per-keypoint target maps from a (K,3) x,y,v array."""
    k = keypoints.shape[0]
    out = np.empty((k, height, width))
    for i in range(k):
        out[i] = gaussian_heatmap(keypoints[i, :2], keypoints[i, 2] > 0, sigma, height, width)
    return out


def keypoint_loss(preds, targets, num_keypoints: int, squared: bool = False) -> Tensor:
    """Mean per-keypoint-channel L2 norm across a batch, summed over groups.

    ``preds`` and ``targets`` are parallel lists of (N, K_g, H, W) tensors,
    one per channel group; the channel counts must total ``num_keypoints``.
    """
    if len(preds) != len(targets):
        raise ConfigError(f"{len(preds)} prediction groups vs {len(targets)} target groups")
    total_channels = sum(p.shape[1] for p in preds)
    if total_channels != num_keypoints:
        raise ConfigError(
            f"group channels total {total_channels}, expected {num_keypoints} keypoints"
        )
    n = preds[0].shape[0]
    parts = []
    for p, t in zip(preds, targets):
        p, t = _as_tensor(p), _as_tensor(t)
        if p.shape != t.shape:
            raise DimensionError(f"keypoint_loss: shape mismatch {p.shape} vs {t.shape}")
        if p.shape[0] != n:
            raise DimensionError("keypoint_loss: inconsistent batch size across groups")
        norms = _sample_norms(ops.sub(p, t), (2, 3), squared)  # (N, K_g)
        parts.append(ops.reduce_sum(norms))
    total = parts[0]
    for p in parts[1:]:
        total = ops.add(total, p)
    return ops.scale(total, 1.0 / (n * num_keypoints))


def triplet_batch_hard(embeddings, labels, mode: str = "soft", margin: float = 0.3) -> Tensor:
    """Batch-hard triplet loss over a P*K batch of embeddings.

    Per anchor the hardest positive (max same-id distance) and hardest
    negative (min other-id distance) are selected; ``soft`` applies
    softplus to their gap, ``hard`` applies a hinge at ``margin``.
    """
    embeddings = _as_tensor(embeddings)
    labels = np.asarray(labels)
    b = embeddings.shape[0]
    if labels.shape != (b,):
        raise DimensionError(f"labels shape {labels.shape} does not match batch {b}")
    uniq, counts = np.unique(labels, return_counts=True)
    if len(uniq) < 2:
        raise SamplingError("triplet batch needs at least 2 distinct identities")
    lonely = uniq[counts < 2]
    if lonely.size:
        raise SamplingError(f"identity {lonely[0]} has fewer than 2 images in the batch")
    if mode not in ("soft", "hard"):
        raise ConfigError(f"unknown triplet mode {mode!r}")

    dists = ops.l2_distance(embeddings, embeddings)
    same = labels[:, None] == labels[None, :]
    d = dists.data
    pos_idx = np.where(same, d, -np.inf).argmax(axis=1)
    neg_idx = np.where(same, np.inf, d).argmin(axis=1)
    anchors = np.arange(b)
    hardest_pos = ops.gather_pairs(dists, anchors, pos_idx)
    hardest_neg = ops.gather_pairs(dists, anchors, neg_idx)
    gap = ops.sub(hardest_pos, hardest_neg)
    if mode == "soft":
        per_anchor = ops.softplus(gap)
    else:
        per_anchor = ops.relu(ops.add_scalar(gap, margin))
    return ops.reduce_mean(per_anchor)


def total_loss(reid, mask, keypoint, weights: LossWeights) -> Tensor:
    """Combined objective: reid + lambda_h * mask + lambda_p * keypoint."""
    for name, t in (("reid", reid), ("mask", mask), ("keypoint", keypoint)):
        if t is not None and not np.isfinite(_as_tensor(t).data).all():
            raise NumericalError(f"{name} loss is not finite")
    total = _as_tensor(reid)
    if mask is not None and weights.lambda_h != 0.0:
        total = ops.add(total, ops.scale(mask, weights.lambda_h))
    if keypoint is not None and weights.lambda_p != 0.0:
        total = ops.add(total, ops.scale(keypoint, weights.lambda_p))
    return total
