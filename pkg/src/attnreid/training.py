"""Training loop: P x K batch sampling, Adam, branch toggles, logging.

Each step forwards the batch through the backbone and embedding head for
the triplet term, and (when enabled) through the mask branch and the
grouped keypoint branch, then applies one Adam update to the enabled
parameters. Checkpoints carry parameters plus optimizer and sampler
state, so an interrupted run resumes on the exact trajectory.
"""

from __future__ import annotations

import dataclasses
import json
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import ops
from .errors import ConfigError, NumericalError, SamplingError
from .losses import (LossWeights, heatmap_targets, keypoint_loss, mask_loss,
                     total_loss, triplet_batch_hard)
from .model import (GroupingScheme, ModelBundle, ModelConfig, backbone_forward,
                    coco_grouping, embed, hab_forward, init_model, load_model,
                    pab_forward, save_model)
from .tensor import Tape, Tensor


@dataclass
class TrainConfig:
    ids_per_batch: int = 8          # P
    images_per_id: int = 4          # K images per identity
    learning_rate: float = 0.001
    steps: int = 600
    seed: int = 0
    hab: bool = True
    pab: bool = True
    num_groups: int = 6
    pab_shared_decoder: bool = True
    pab_mode: str = "keypoint"      # "keypoint" | "part_image"
    share_hab_encoder: bool = False
    decoder_channels: int = 64
    lambda_h: float = 0.003
    lambda_p: float = 0.003
    triplet_mode: str = "soft"
    triplet_margin: float = 0.3
    squared_norms: bool = False
    heatmap_sigma: float = 2.0
    log_interval: int = 10
    checkpoint_interval: int = 0    # 0: final checkpoint only

    def validate(self):
        if self.ids_per_batch < 2 or self.images_per_id < 2:
            raise ConfigError("P x K batches need P >= 2 and K >= 2")
        if self.steps < 1:
            raise ConfigError("steps must be positive")

    def weights(self) -> LossWeights:
        return LossWeights(
            lambda_h=self.lambda_h, lambda_p=self.lambda_p,
            triplet_mode=self.triplet_mode, triplet_margin=self.triplet_margin,
            squared_norms=self.squared_norms,
        )

    def model_config(self, base: ModelConfig | None = None) -> ModelConfig:
        base = ModelConfig() if base is None else base
        return dataclasses.replace(
            base,
            num_groups=self.num_groups,
            pab_shared_decoder=self.pab_shared_decoder,
            pab_mode=self.pab_mode,
            share_hab_encoder=self.share_hab_encoder,
            decoder_channels=self.decoder_channels,
        )

    def to_text(self) -> str:
        lines = []
        for f in dataclasses.fields(self):
            lines.append(f"{f.name} = {getattr(self, f.name)}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "TrainConfig":
        fields = {f.name: f.type for f in dataclasses.fields(cls)}
        kwargs = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
            key, value = (part.strip() for part in line.split("=", 1))
            if key not in fields:
                raise ConfigError(f"line {lineno}: unknown config key {key!r}")
            kind = fields[key]
            if kind in ("bool", bool):
                if value.lower() not in ("true", "false", "0", "1"):
                    raise ConfigError(f"line {lineno}: bad boolean {value!r}")
                kwargs[key] = value.lower() in ("true", "1")
            elif kind in ("int", int):
                kwargs[key] = int(value)
            elif kind in ("float", float):
                kwargs[key] = float(value)
            else:
                kwargs[key] = value
        return cls(**kwargs)


class Adam:
    """Standard Adam over an ordered parameter list."""

    def __init__(self, params, lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bias1 = 1.0 - b1 ** self.t
        bias2 = 1.0 - b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            p.data -= self.lr * (m / bias1) / (np.sqrt(v / bias2) + self.eps)
            p.grad = None

    def state_blobs(self, names) -> dict:
        blobs = {"state.adam.t": np.array([self.t], dtype=np.float32)}
        for name, m, v in zip(names, self.m, self.v):
            blobs[f"state.adam.m.{name}"] = m
            blobs[f"state.adam.v.{name}"] = v
        return blobs

    def load_state_blobs(self, names, blobs) -> None:
        self.t = int(blobs["state.adam.t"][0])
        for i, name in enumerate(names):
            self.m[i] = np.asarray(blobs[f"state.adam.m.{name}"], dtype=self.m[i].dtype).reshape(self.m[i].shape).copy()
            self.v[i] = np.asarray(blobs[f"state.adam.v.{name}"], dtype=self.v[i].dtype).reshape(self.v[i].shape).copy()


class PKSampler:
    """Epoch-planned P x K batch sampler.

    Each epoch draws a fresh plan from rng stream (seed, 17, epoch): image
    lists are shuffled per identity and identities are dealt round-robin,
    so every image appears once per epoch when sizes divide evenly.
    Identities short of K images top up from their own images.
    """

    def __init__(self, labels, p: int, k: int, seed: int):
        self.labels = np.asarray(labels)
        self.p = p
        self.k = k
        self.seed = seed
        self.by_id = {}
        for idx, lab in enumerate(self.labels):
            self.by_id.setdefault(int(lab), []).append(idx)
        if len(self.by_id) < p:
            raise SamplingError(
                f"need at least {p} identities, manifest has {len(self.by_id)}"
            )
        rich = sum(1 for v in self.by_id.values() if len(v) >= k)
        if rich < p:
            raise SamplingError(
                f"need at least {p} identities with >= {k} images, found {rich}"
            )
        self.epoch = 0
        self.pos = 0
        self._plan = self._build_plan(self.epoch)

    def _build_plan(self, epoch: int):
        rng = np.random.default_rng([self.seed, 17, epoch])
        queues = {}
        ids = sorted(self.by_id)
        for i in ids:
            q = list(self.by_id[i])
            rng.shuffle(q)
            queues[i] = q
        plan = []
        remaining = {i: len(q) for i, q in queues.items()}
        while True:
            avail = [i for i in ids if remaining[i] > 0]
            if len(avail) < self.p:
                break
            # largest remaining first, random tie-break
            order = sorted(avail, key=lambda i: (-remaining[i], rng.uniform()))
            chosen = order[: self.p]
            batch = []
            for i in chosen:
                q = queues[i]
                take = q[len(q) - remaining[i]:len(q) - remaining[i] + self.k]
                if len(take) < self.k:
                    extra = rng.choice(self.by_id[i], size=self.k - len(take), replace=True)
                    take = take + [int(e) for e in extra]
                remaining[i] = max(remaining[i] - self.k, 0)
                batch.extend(take)
            plan.append(batch)
        if not plan:
            raise SamplingError("dataset too small for even one P x K batch")
        return plan

    def next_batch(self):
        if self.pos >= len(self._plan):
            self.epoch += 1
            self.pos = 0
            self._plan = self._build_plan(self.epoch)
        batch = self._plan[self.pos]
        self.pos += 1
        return list(batch)

    def state_blobs(self) -> dict:
        return {"state.sampler": np.array([self.epoch, self.pos], dtype=np.float32)}

    def load_state_blobs(self, blobs) -> None:
        epoch, pos = (int(x) for x in blobs["state.sampler"])
        self.epoch = epoch
        self.pos = pos
        self._plan = self._build_plan(epoch)


def pk_sample(labels, p: int, k: int, rng: np.random.Generator):
    """One-shot P x K batch: P distinct identities, K images each."""
    labels = np.asarray(labels)
    by_id = {}
    for idx, lab in enumerate(labels):
        by_id.setdefault(int(lab), []).append(idx)
    rich = [i for i, v in by_id.items() if len(v) >= k]
    if len(rich) < p:
        raise SamplingError(f"need {p} identities with >= {k} images, found {len(rich)}")
    chosen = rng.choice(sorted(rich), size=p, replace=False)
    batch = []
    for i in chosen:
        batch.extend(int(x) for x in rng.choice(by_id[int(i)], size=k, replace=False))
    return batch


def part_image_targets(sample, num_parts: int = 6):
    """Horizontal-stripe prediction targets: part p keeps stripe p's rows."""
    if num_parts < 1:
        raise ConfigError("num_parts must be positive")
    image = sample.image
    height = image.shape[1]
    bounds = np.linspace(0, height, num_parts + 1).round().astype(int)
    targets = []
    for p in range(num_parts):
        t = np.zeros_like(image)
        t[:, bounds[p]:bounds[p + 1]] = image[:, bounds[p]:bounds[p + 1]]
        targets.append(t)
    return targets


class TargetBuilder:
    """Caches per-sample branch targets across steps (samples are immutable)."""

    def __init__(self, cfg: TrainConfig, model_cfg: ModelConfig):
        self.cfg = cfg
        self.model_cfg = model_cfg
        self._heatmaps = {}
        self._parts = {}

    def _full_heatmaps(self, index, sample):
        cached = self._heatmaps.get(index)
        if cached is None:
            cached = heatmap_targets(
                sample.keypoints, self.cfg.heatmap_sigma,
                self.model_cfg.height, self.model_cfg.width,
            ).astype(self.model_cfg.np_dtype)
            self._heatmaps[index] = cached
        return cached

    def group_targets(self, indices, samples, scheme: GroupingScheme):
        """Per-group (N, K_g, H, W) target stacks for the partial branch."""
        n = len(samples)
        if self.cfg.pab_mode == "part_image":
            per = []
            for idx, s in zip(indices, samples):
                cached = self._parts.get(idx)
                if cached is None:
                    cached = [
                        t.astype(self.model_cfg.np_dtype, copy=False)
                        for t in part_image_targets(s, scheme.num_groups)
                    ]
                    self._parts[idx] = cached
                per.append(cached)
            return [
                np.stack([per[i][g] for i in range(n)])
                for g in range(scheme.num_groups)
            ]
        maps = [self._full_heatmaps(idx, s) for idx, s in zip(indices, samples)]
        return [
            np.stack([m[list(group)] for m in maps]) for group in scheme.groups
        ]


def _enabled_parts(cfg: TrainConfig):
    parts = ["backbone", "embed"]
    if cfg.hab:
        parts.append("hab")
    if cfg.pab:
        parts.append("pab")
    return parts


def build_bundle(cfg: TrainConfig, base: ModelConfig | None = None) -> ModelBundle:
    model_cfg = cfg.model_config(base)
    scheme = coco_grouping(cfg.num_groups)
    return init_model(model_cfg, scheme, cfg.seed, with_hab=cfg.hab, with_pab=cfg.pab)


def train_step(bundle: ModelBundle, samples, labels, cfg: TrainConfig, optimizer: Adam,
               targets: TargetBuilder | None = None, indices=None):
    """One forward/backward/update; returns the loss breakdown."""
    model_cfg = bundle.config
    dtype = model_cfg.np_dtype
    if targets is None:
        targets = TargetBuilder(cfg, model_cfg)
    if indices is None:
        indices = [id(s) for s in samples]
    images = Tensor(np.stack([s.image for s in samples]).astype(dtype, copy=False))
    weights = cfg.weights()

    tape = Tape()
    tape.watch(*optimizer.params)
    try:
        lowlevel, features = backbone_forward(images, bundle)
        embeddings = embed(features, bundle)
        reid = triplet_batch_hard(embeddings, labels, cfg.triplet_mode, cfg.triplet_margin)
        mask_term = None
        kp_term = None
        if cfg.hab:
            masks = Tensor(np.stack([s.mask for s in samples]).astype(dtype, copy=False))
            mask_term = mask_loss(hab_forward(lowlevel, bundle), masks, cfg.squared_norms)
        if cfg.pab:
            preds = pab_forward(features, bundle)
            group_targets = [
                Tensor(t) for t in targets.group_targets(indices, samples, bundle.scheme)
            ]
            k_total = sum(t.shape[1] for t in group_targets)
            kp_term = keypoint_loss(preds, group_targets, k_total, cfg.squared_norms)
        loss = total_loss(reid, mask_term, kp_term, weights)
        breakdown = {
            "total": loss.item(),
            "reid": reid.item(),
            "mask": mask_term.item() if mask_term is not None else 0.0,
            "keypoint": kp_term.item() if kp_term is not None else 0.0,
        }
        if not np.isfinite(breakdown["total"]):
            raise NumericalError(f"non-finite loss at step {optimizer.t + 1}: {breakdown}")
        tape.backward(loss)
        optimizer.step()
    finally:
        tape.release()
    return breakdown


def _log_line(step, breakdown, t0):
    return (
        f"{step},{breakdown['total']:.6f},{breakdown['reid']:.6f},"
        f"{breakdown['mask']:.6f},{breakdown['keypoint']:.6f},{time.time() - t0:.3f}"
    )


def train(cfg: TrainConfig, samples, out_dir, base_config: ModelConfig | None = None,
          resume_from=None):
    """Run the loop over in-memory samples; returns the final bundle.

    Writes ``metrics.csv`` (step,total,reid,mask,keypoint,seconds) and
    ``final.daaf`` under ``out_dir``; optional periodic checkpoints carry
    optimizer and sampler state for exact resume.
    """
    cfg.validate()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    labels = [s.identity for s in samples]

    bundle = build_bundle(cfg, base_config)
    names = bundle.param_names(_enabled_parts(cfg))
    optimizer = Adam([bundle.params[n] for n in names], lr=cfg.learning_rate)
    sampler = PKSampler(labels, cfg.ids_per_batch, cfg.images_per_id, cfg.seed)
    start_step = 0
    if resume_from is not None:
        bundle, extra = load_model(resume_from, expected_config=cfg.model_config(base_config))
        optimizer = Adam([bundle.params[n] for n in names], lr=cfg.learning_rate)
        optimizer.load_state_blobs(names, extra)
        sampler.load_state_blobs(extra)
        start_step = int(extra["state.step"][0])

    t0 = time.time()
    targets = TargetBuilder(cfg, bundle.config)
    log_path = out / "metrics.csv"
    mode = "a" if resume_from is not None and log_path.exists() else "w"
    with open(log_path, mode) as log:
        if mode == "w":
            log.write("step,total,reid,mask,keypoint,seconds\n")
        for step in range(start_step + 1, cfg.steps + 1):
            batch_idx = sampler.next_batch()
            batch = [samples[i] for i in batch_idx]
            try:
                breakdown = train_step(bundle, batch, [labels[i] for i in batch_idx],
                                       cfg, optimizer, targets=targets, indices=batch_idx)
            except NumericalError:
                snapshot = out / f"diverged_step{step}.json"
                snapshot.write_text(json.dumps({"step": step, "config": cfg.to_text()}))
                raise
            if step % cfg.log_interval == 0 or step == cfg.steps:
                log.write(_log_line(step, breakdown, t0) + "\n")
            if cfg.checkpoint_interval and step % cfg.checkpoint_interval == 0 and step < cfg.steps:
                _checkpoint(bundle, optimizer, sampler, names, step, out / f"step{step}.daaf")
    save_model(bundle, out / "final.daaf")
    return bundle


def _checkpoint(bundle, optimizer, sampler, names, step, path):
    extra = {"state.step": np.array([step], dtype=np.float32)}
    extra.update(optimizer.state_blobs(names))
    extra.update(sampler.state_blobs())
    save_model(bundle, path, extra_blobs=extra)
