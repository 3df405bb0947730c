"""Experiment harness: ablation suites, branch inspection, shuffle probe.

The shuffle probe feeds channel group i through the shared decoder and
group j's 1x1 head for every (i, j), then scores each output channel's
peak against the keypoints of the feature group and of the head group.
A decoupled model's outputs follow the feature group, so off-diagonal
cells score much higher against group i than against group j.
"""

from __future__ import annotations

import dataclasses
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .evaluation import evaluate
from .losses import heatmap_targets
from .model import (ModelBundle, backbone_forward, hab_forward, pab_decoder_forward,
                    pab_forward, pab_head_forward, split_channels)
from .netpbm import write_pgm
from .tensor import Tensor
from .training import TrainConfig, train

SUITES = ("hab-pab", "grouping", "sharing", "supervision")


@dataclass
class ExperimentRecord:
    name: str
    config_text: str
    seeds: list
    per_seed: dict = field(default_factory=dict)   # metric -> list of values
    aggregate: dict = field(default_factory=dict)  # metric -> (mean, stdev)
    wall_time: float = 0.0
    failures: list = field(default_factory=list)

    def finalize(self):
        self.aggregate = {}
        for metric, values in self.per_seed.items():
            if values:
                arr = np.asarray(values, dtype=np.float64)
                std = float(arr.std(ddof=1)) if len(arr) > 1 else 0.0
                self.aggregate[metric] = (float(arr.mean()), std)
        return self


def _suite_variants(suite: str, base: TrainConfig):
    if suite == "hab-pab":
        return [
            ("baseline", {"hab": False, "pab": False}),
            ("hab", {"hab": True, "pab": False}),
            ("pab", {"hab": False, "pab": True}),
            ("both", {"hab": True, "pab": True}),
        ]
    if suite == "grouping":
        rows = [("baseline", {"hab": False, "pab": False})]
        rows += [(f"groups{m}", {"hab": True, "pab": True, "num_groups": m})
                 for m in (1, 4, 6, 7, 17)]
        return rows
    if suite == "sharing":
        return [
            ("baseline", {"hab": False, "pab": False}),
            ("shared", {"hab": False, "pab": True, "pab_shared_decoder": True}),
            ("independent", {"hab": False, "pab": True, "pab_shared_decoder": False}),
        ]
    if suite == "supervision":
        return [
            ("baseline", {"hab": False, "pab": False}),
            ("keypoint", {"hab": False, "pab": True, "pab_mode": "keypoint"}),
            ("part_image", {"hab": False, "pab": True, "pab_mode": "part_image"}),
        ]
    raise ConfigError(f"unknown suite {suite!r}; choose from {SUITES}")


def run_training_eval(cfg: TrainConfig, train_samples, query_samples, gallery_samples,
                      out_dir) -> dict:
    """Train one configuration and evaluate retrieval on the test split."""
    bundle = train(cfg, train_samples, out_dir)
    report = evaluate(bundle, query_samples, gallery_samples)
    return {"mAP": report.mean_ap, "rank1": report.rank(1)}


def ablate(suite: str, train_samples, query_samples, gallery_samples,
           seeds, base_cfg: TrainConfig, out_dir) -> list:
    """Run one ablation suite; returns records and writes two CSV tables.

    Per-cell failures are recorded and the suite continues; deltas are
    computed per seed against the suite's own baseline, then averaged.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    variants = _suite_variants(suite, base_cfg)
    records = []
    for name, overrides in variants:
        cfg0 = dataclasses.replace(base_cfg, **overrides)
        rec = ExperimentRecord(name=name, config_text=cfg0.to_text(), seeds=list(seeds),
                               per_seed={"mAP": [], "rank1": []})
        start = time.time()
        for seed in seeds:
            cfg = dataclasses.replace(cfg0, seed=seed)
            cell_dir = out / f"{suite}_{name}_s{seed}"
            try:
                metrics = run_training_eval(cfg, train_samples, query_samples,
                                            gallery_samples, cell_dir)
            except Exception as exc:  # cell failure must not kill the suite
                rec.failures.append(f"seed {seed}: {exc}")
                continue
            for metric, value in metrics.items():
                rec.per_seed[metric].append(value)
        rec.wall_time = time.time() - start
        records.append(rec.finalize())

    _write_suite_csv(suite, records, out)
    return records


def _write_suite_csv(suite, records, out: Path):
    baseline = next((r for r in records if r.name == "baseline"), None)
    with open(out / f"{suite}_runs.csv", "w") as f:
        f.write("suite,name,seed,mAP,rank1\n")
        for rec in records:
            for i, seed in enumerate(rec.seeds):
                if i < len(rec.per_seed["mAP"]):
                    f.write(f"{suite},{rec.name},{seed},"
                            f"{rec.per_seed['mAP'][i]:.6f},{rec.per_seed['rank1'][i]:.6f}\n")
    with open(out / f"{suite}_summary.csv", "w") as f:
        f.write("suite,name,mean_mAP,std_mAP,mean_rank1,std_rank1,"
                "delta_mAP,delta_rank1,failures\n")
        for rec in records:
            m_map, s_map = rec.aggregate.get("mAP", (float("nan"), 0.0))
            m_r1, s_r1 = rec.aggregate.get("rank1", (float("nan"), 0.0))
            d_map = d_r1 = float("nan")
            if baseline is not None and rec.per_seed["mAP"] and baseline.per_seed["mAP"]:
                paired = min(len(rec.per_seed["mAP"]), len(baseline.per_seed["mAP"]))
                d_map = float(np.mean([rec.per_seed["mAP"][i] - baseline.per_seed["mAP"][i]
                                       for i in range(paired)]))
                d_r1 = float(np.mean([rec.per_seed["rank1"][i] - baseline.per_seed["rank1"][i]
                                      for i in range(paired)]))
            f.write(f"{suite},{rec.name},{m_map:.6f},{s_map:.6f},{m_r1:.6f},{s_r1:.6f},"
                    f"{d_map:.6f},{d_r1:.6f},{len(rec.failures)}\n")


# ---------------------------------------------------------------------------
# branch output inspection
# ---------------------------------------------------------------------------

def _forward_features(bundle: ModelBundle, samples):
    images = Tensor(np.stack([s.image for s in samples]).astype(bundle.config.np_dtype))
    return backbone_forward(images, bundle)


def mask_iou(pred: np.ndarray, target: np.ndarray, threshold: float = 0.5) -> float:
    p = pred > threshold
    t = target > 0.5
    union = np.logical_or(p, t).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(p, t).sum() / union)


def _peak_coords(channel: np.ndarray):
    idx = np.argmax(channel)
    return np.unravel_index(idx, channel.shape)  # (row, col)


def keypoint_peak_accuracy(heatmaps: np.ndarray, keypoints: np.ndarray,
                           radius: float = 4.0) -> tuple:
    """(hits, visible-count) for per-channel peaks vs their own keypoints."""
    hits = 0
    visible = 0
    for k in range(heatmaps.shape[0]):
        if keypoints[k, 2] <= 0:
            continue
        visible += 1
        row, col = _peak_coords(heatmaps[k])
        dist = np.hypot(col + 0.5 - keypoints[k, 0], row + 0.5 - keypoints[k, 1])
        if dist <= radius:
            hits += 1
    return hits, visible


def branch_out(bundle: ModelBundle, samples, out_dir, sigma: float = 2.0) -> dict:
    """Write per-sample branch predictions next to ground truth.

    Prediction files are ``pred_*``; ground truth ``gt_*``. Returns mean
    mask IoU at threshold 0.5 and the fraction of visible keypoints whose
    heatmap peak lands within 4 px.
    """
    if not (bundle.has_hab and bundle.has_pab):
        raise ConfigError("branch_out needs a checkpoint with both branches")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg = bundle.config
    lowlevel, features = _forward_features(bundle, samples)
    masks = hab_forward(lowlevel, bundle).data
    groups = pab_forward(features, bundle)

    ious = []
    hits = 0
    visible = 0
    order = [k for g in bundle.scheme.groups for k in g]
    for i, sample in enumerate(samples):
        stem = f"{i:03d}"
        write_pgm(out / f"pred_{stem}_mask.pgm", masks[i, 0])
        write_pgm(out / f"gt_{stem}_mask.pgm", sample.mask[0])
        ious.append(mask_iou(masks[i, 0], sample.mask[0]))
        per_channel = np.concatenate([g.data[i] for g in groups], axis=0)
        kps = sample.keypoints[order]
        h, v = keypoint_peak_accuracy(per_channel, kps)
        hits += h
        visible += v
        gt = heatmap_targets(kps, sigma, cfg.height, cfg.width)
        for c in range(per_channel.shape[0]):
            lo, hi = per_channel[c].min(), per_channel[c].max()
            norm = (per_channel[c] - lo) / (hi - lo) if hi > lo else per_channel[c] * 0
            write_pgm(out / f"pred_{stem}_kp{c:02d}.pgm", norm)
            write_pgm(out / f"gt_{stem}_kp{c:02d}.pgm", gt[c])
    return {
        "mask_iou": float(np.mean(ious)),
        "keypoint_pck": hits / visible if visible else 0.0,
        "prediction_files": len(samples) * (1 + len(order)),
    }


# ---------------------------------------------------------------------------
# 1x1-head shuffle probe
# ---------------------------------------------------------------------------

def shuffle_probe(bundle: ModelBundle, samples, radius: float = 4.0):
    """M x M peak-match scores for every (feature group, head) pairing.

    Returns (score_vs_feature_group, score_vs_head_group, skipped) where
    entry (i, j) scores decoder(group_i) through head_j against group i's
    and group j's keypoints respectively.
    """
    if not bundle.has_pab:
        raise ConfigError("shuffle probe needs a checkpoint with the partial branch")
    scheme = bundle.scheme
    m = scheme.num_groups
    _, features = _forward_features(bundle, samples)
    slices = split_channels(features, scheme)
    decoded = [pab_decoder_forward(s, bundle, group=g) for g, s in enumerate(slices)]

    score_feat = np.zeros((m, m))
    score_head = np.zeros((m, m))
    skipped = []
    for i in range(m):
        for j in range(m):
            head_w = bundle.params[f"pab.head{j}.w"]
            if head_w.shape[1] != decoded[i].shape[1]:
                skipped.append((i, j, "head input channels do not match decoder output"))
                score_feat[i, j] = np.nan
                score_head[i, j] = np.nan
                continue
            maps = pab_head_forward(decoded[i], bundle, j).data
            hits_i = trials_i = hits_j = trials_j = 0
            for n, sample in enumerate(samples):
                kp_i = sample.keypoints[list(scheme.groups[i])]
                kp_j = sample.keypoints[list(scheme.groups[j])]
                for c in range(maps.shape[1]):
                    row, col = _peak_coords(maps[n, c])
                    px, py = col + 0.5, row + 0.5
                    for kps, which in ((kp_i, "i"), (kp_j, "j")):
                        vis = kps[kps[:, 2] > 0]
                        if vis.size == 0:
                            continue
                        d = np.hypot(vis[:, 0] - px, vis[:, 1] - py).min()
                        if which == "i":
                            trials_i += 1
                            hits_i += int(d <= radius)
                        else:
                            trials_j += 1
                            hits_j += int(d <= radius)
            score_feat[i, j] = hits_i / trials_i if trials_i else 0.0
            score_head[i, j] = hits_j / trials_j if trials_j else 0.0
    return score_feat, score_head, skipped


def shuffle_ratio(score_feat: np.ndarray, score_head: np.ndarray) -> float:
    """Mean off-diagonal feature-group score over mean head-group score."""
    m = score_feat.shape[0]
    off = ~np.eye(m, dtype=bool)
    feat = np.nanmean(score_feat[off])
    head = np.nanmean(score_head[off])
    if head <= 0:
        return float("inf") if feat > 0 else 1.0
    return float(feat / head)


def decoupling_score(bundle: ModelBundle, samples) -> float:
    """Scalar in [0,1]: positive off-diagonal (feature - head) score gaps
    normalized by the diagonal score."""
    score_feat, score_head, _ = shuffle_probe(bundle, samples)
    m = score_feat.shape[0]
    diag = np.nanmean(np.diag(score_feat))
    if not np.isfinite(diag) or diag <= 0:
        return 0.0
    off = ~np.eye(m, dtype=bool)
    gaps = np.clip(score_feat[off] - score_head[off], 0.0, None)
    return float(np.clip(np.nanmean(gaps) / diag, 0.0, 1.0))


def write_shuffle_csv(score_feat, score_head, path) -> None:
    with open(path, "w") as f:
        f.write("feature_group,head_group,score_vs_feature_kps,score_vs_head_kps\n")
        m = score_feat.shape[0]
        for i in range(m):
            for j in range(m):
                f.write(f"{i},{j},{score_feat[i, j]:.6f},{score_head[i, j]:.6f}\n")
