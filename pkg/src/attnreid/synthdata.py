"""Procedural generator of identity-labelled person images.

Each sample is a 2-D articulated figure (capsule limbs, ellipse head and
torso) rendered over a textured, camera-conditioned background, together
with the exact body mask, 17 COCO-ordered keypoints and identity/camera
labels. Appearance (part colours, proportions) is a deterministic
function of (dataset seed, identity); pose and background noise are
deterministic functions of the per-sample seed, so generation is pure and
parallel-safe.

Backgrounds deliberately carry camera-correlated texture and body-like
distractor blobs: cross-camera retrieval punishes embeddings that rely on
them, which is what the mask and keypoint supervision is meant to fix.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, GenerationError
from .netpbm import read_pgm, read_ppm, write_pgm, write_ppm

NUM_KEYPOINTS = 17


@dataclass(frozen=True)
class IdentitySpec:
    identity: int
    head_color: tuple
    torso_color: tuple
    arm_color: tuple
    leg_color: tuple
    build: float        # limb thickness multiplier
    torso_aspect: float
    arm_len: float
    leg_len: float


@dataclass(frozen=True)
class Pose:
    lean: float = 0.0
    shoulder: tuple = (0.0, 0.0)   # (left, right), radians outward from down
    elbow: tuple = (0.0, 0.0)
    hip: tuple = (0.0, 0.0)
    knee: tuple = (0.0, 0.0)
    dx: float = 0.0
    dy: float = 0.0
    scale: float = 1.0

    def packed(self) -> np.ndarray:
        return np.array(
            [self.lean, *self.shoulder, *self.elbow, *self.hip, *self.knee,
             self.dx, self.dy, self.scale],
            dtype=np.float32,
        )


@dataclass(frozen=True)
class CameraStyle:
    index: int
    tint: tuple
    brightness: float
    palette: tuple      # two background colours
    grad_angle: float


@dataclass
class Sample:
    image: np.ndarray      # (3,H,W) float32 in [0,1]
    mask: np.ndarray       # (1,H,W) float32 in {0,1}
    keypoints: np.ndarray  # (17,3) float32 columns x, y, visible
    identity: int
    camera: int
    pose: np.ndarray | None = None


POSE_RANGES = {
    "lean": 0.10,
    "shoulder": (-0.10, 0.40),
    "elbow": (0.0, 0.55),
    "hip": (-0.06, 0.32),
    "knee": (0.0, 0.40),
    "dx": 2.5,
    "dy": 2.0,
    "scale": (0.92, 1.08),
}


def _hsv_to_rgb(h, s, v):
    i = int(h * 6.0) % 6
    f = h * 6.0 - int(h * 6.0)
    p, q, t = v * (1 - s), v * (1 - s * f), v * (1 - s * (1 - f))
    return [(v, t, p), (q, v, p), (p, v, t), (p, q, v), (t, p, v), (v, p, q)][i]


def identity_spec(dataset_seed: int, identity: int) -> IdentitySpec:
    rng = np.random.default_rng([dataset_seed, 7, identity])

    def color():
        return tuple(float(c) for c in _hsv_to_rgb(rng.uniform(), rng.uniform(0.45, 1.0),
                                                   rng.uniform(0.35, 0.95)))

    return IdentitySpec(
        identity=identity,
        head_color=color(),
        torso_color=color(),
        arm_color=color(),
        leg_color=color(),
        build=float(rng.uniform(0.85, 1.2)),
        torso_aspect=float(rng.uniform(0.85, 1.15)),
        arm_len=float(rng.uniform(0.85, 1.12)),
        leg_len=float(rng.uniform(0.88, 1.12)),
    )


def sample_pose(rng: np.random.Generator, ranges=POSE_RANGES) -> Pose:
    pair = lambda lo, hi: (float(rng.uniform(lo, hi)), float(rng.uniform(lo, hi)))
    return Pose(
        lean=float(rng.uniform(-ranges["lean"], ranges["lean"])),
        shoulder=pair(*ranges["shoulder"]),
        elbow=pair(*ranges["elbow"]),
        hip=pair(*ranges["hip"]),
        knee=pair(*ranges["knee"]),
        dx=float(rng.uniform(-ranges["dx"], ranges["dx"])),
        dy=float(rng.uniform(-ranges["dy"], ranges["dy"])),
        scale=float(rng.uniform(*ranges["scale"])),
    )


def camera_style(dataset_seed: int, camera: int) -> CameraStyle:
    rng = np.random.default_rng([dataset_seed, 5, camera])
    palette = (
        tuple(float(c) for c in rng.uniform(0.1, 0.9, size=3)),
        tuple(float(c) for c in rng.uniform(0.1, 0.9, size=3)),
    )
    return CameraStyle(
        index=camera,
        tint=tuple(float(t) for t in rng.uniform(0.88, 1.12, size=3)),
        brightness=float(rng.uniform(-0.04, 0.04)),
        palette=palette,
        grad_angle=float(rng.uniform(0.0, np.pi)),
    )


# ---------------------------------------------------------------------------
# rasterization
# ---------------------------------------------------------------------------

def _grids(height, width):
    ys, xs = np.mgrid[0:height, 0:width].astype(np.float64)
    return xs + 0.5, ys + 0.5


def _capsule(xs, ys, p0, p1, radius):
    """Pixels within ``radius`` of the segment p0-p1."""
    dx, dy = p1[0] - p0[0], p1[1] - p0[1]
    den = dx * dx + dy * dy
    if den < 1e-12:
        t = np.zeros_like(xs)
    else:
        t = np.clip(((xs - p0[0]) * dx + (ys - p0[1]) * dy) / den, 0.0, 1.0)
    cx, cy = p0[0] + t * dx, p0[1] + t * dy
    return (xs - cx) ** 2 + (ys - cy) ** 2 <= radius * radius


def _ellipse(xs, ys, center, rx, ry, rot=0.0):
    c, s = np.cos(rot), np.sin(rot)
    u = (xs - center[0]) * c + (ys - center[1]) * s
    v = -(xs - center[0]) * s + (ys - center[1]) * c
    return (u / rx) ** 2 + (v / ry) ** 2 <= 1.0


def _skeleton(spec: IdentitySpec, pose: Pose, height: int, width: int):
    """Joint positions and limb radii in image coordinates.

    Returns (keypoints (17,2), limbs, torso geometry, head geometry). The
    whole figure is shifted when needed so every keypoint stays at least
    2 px inside the frame; an oversized figure raises GenerationError.
    """
    s = pose.scale * height / 64.0
    lean = pose.lean
    up = np.array([np.sin(lean), -np.cos(lean)])
    right = np.array([np.cos(lean), np.sin(lean)])

    hip_c = np.array([width / 2.0 + pose.dx, 0.60 * height + pose.dy])
    torso_len = 14.0 * s
    shoulder_c = hip_c + torso_len * up
    shoulder_half = 4.2 * s * spec.torso_aspect
    hip_half = 2.8 * s * spec.torso_aspect
    head_c = shoulder_c + 5.5 * s * up

    def limb_dir(angle, side):
        # angle from straight down, positive swings away from the body
        return np.array([np.sin(side * angle), np.cos(side * angle)])

    joints = {}
    for side_name, side in (("left", -1.0), ("right", 1.0)):
        i = 0 if side_name == "left" else 1
        sh = shoulder_c + side * shoulder_half * right
        el = sh + 6.5 * s * spec.arm_len * limb_dir(pose.shoulder[i], side)
        wr = el + 6.0 * s * spec.arm_len * limb_dir(pose.shoulder[i] + pose.elbow[i], side)
        hp = hip_c + side * hip_half * right
        kn = hp + 8.5 * s * spec.leg_len * limb_dir(pose.hip[i], side)
        an = kn + 8.0 * s * spec.leg_len * limb_dir(max(pose.hip[i] - pose.knee[i], -0.5), side)
        joints[side_name] = dict(shoulder=sh, elbow=el, wrist=wr, hip=hp, knee=kn, ankle=an)

    head_rx, head_ry = 3.1 * s, 3.7 * s
    kps = np.zeros((NUM_KEYPOINTS, 2))
    kps[0] = head_c + np.array([0.0, 0.6]) * s
    kps[1] = head_c + np.array([-1.1, -1.2]) * s
    kps[2] = head_c + np.array([1.1, -1.2]) * s
    kps[3] = head_c + np.array([-2.0, 0.2]) * s
    kps[4] = head_c + np.array([2.0, 0.2]) * s
    order = [("shoulder", 5, 6), ("elbow", 7, 8), ("wrist", 9, 10),
             ("hip", 11, 12), ("knee", 13, 14), ("ankle", 15, 16)]
    for name, li, ri in order:
        kps[li] = joints["left"][name]
        kps[ri] = joints["right"][name]

    # shift the figure so all keypoints are >= 2 px inside the frame
    margin = 2.0
    shift = np.zeros(2)
    for axis, extent in ((0, width), (1, height)):
        lo, hi = kps[:, axis].min(), kps[:, axis].max()
        if hi - lo > extent - 2 * margin:
            raise GenerationError("figure too large for the frame")
        if lo + shift[axis] < margin:
            shift[axis] = margin - lo
        if hi + shift[axis] > extent - margin:
            shift[axis] = extent - margin - hi
    if shift.any():
        kps += shift
        head_c = head_c + shift
        hip_c = hip_c + shift
        shoulder_c = shoulder_c + shift
        for side in joints.values():
            for name in side:
                side[name] = side[name] + shift

    arm_r = 1.35 * s * spec.build
    leg_r = 1.55 * s * spec.build
    limbs = []
    for side in ("left", "right"):
        j = joints[side]
        limbs.append(("arm", j["shoulder"], j["elbow"], arm_r))
        limbs.append(("arm", j["elbow"], j["wrist"], arm_r))
        limbs.append(("leg", j["hip"], j["knee"], leg_r))
        limbs.append(("leg", j["knee"], j["ankle"], leg_r))
    torso = (hip_c, shoulder_c, hip_half, shoulder_half, lean, s)
    head = (head_c, head_rx, head_ry, lean)
    return kps, limbs, torso, head


def _background(rng, style: CameraStyle, height, width, textured=True):
    xs, ys = _grids(height, width)
    img = np.empty((3, height, width))
    if not textured:
        img[:] = 0.5
        return img
    angle = style.grad_angle + rng.uniform(-0.3, 0.3)
    proj = xs * np.cos(angle) + ys * np.sin(angle)
    t = (proj - proj.min()) / max(proj.max() - proj.min(), 1e-9)
    c0 = np.asarray(style.palette[0]) + rng.uniform(-0.08, 0.08, size=3)
    c1 = np.asarray(style.palette[1]) + rng.uniform(-0.08, 0.08, size=3)
    for c in range(3):
        img[c] = c0[c] + t * (c1[c] - c0[c])
    # body-like distractor blobs
    for _ in range(rng.integers(2, 5)):
        center = (rng.uniform(0, width), rng.uniform(0, height))
        region = _ellipse(xs, ys, center, rng.uniform(2.0, 6.5), rng.uniform(2.5, 8.0),
                          rng.uniform(0, np.pi))
        color = rng.uniform(0.05, 0.95, size=3)
        img[:, region] = 0.25 * img[:, region] + 0.75 * color[:, None]
    img += rng.normal(0.0, 0.035, size=img.shape)
    return img


def render_person(spec: IdentitySpec, pose: Pose, camera: CameraStyle,
                  background_style: str = "textured", seed: int = 0) -> Sample:
    """Rasterize one sample; deterministic in (spec, pose, camera, seed)."""
    height, width = 64, 32
    rng = np.random.default_rng([seed, 3])
    xs, ys = _grids(height, width)
    kps, limbs, torso, head = _skeleton(spec, pose, height, width)

    img = _background(rng, camera, height, width, textured=background_style != "plain")
    mask = np.zeros((height, width), dtype=bool)
    shade = 1.0 + 0.14 * np.sin(ys / 3.1 + rng.uniform(0, 6.28)) * np.sin(xs / 2.3 + rng.uniform(0, 6.28))

    def paint(region, color):
        mask[region] = True
        for c in range(3):
            img[c][region] = color[c] * shade[region]

    part_color = {"arm": spec.arm_color, "leg": spec.leg_color}
    for kind, p0, p1, r in limbs:
        paint(_capsule(xs, ys, p0, p1, r), part_color[kind])
    hip_c, shoulder_c, hip_half, shoulder_half, lean, s = torso
    mid = 0.5 * (hip_c + shoulder_c)
    torso_ry = 0.5 * np.linalg.norm(shoulder_c - hip_c) + 1.8 * s
    torso_rx = max(shoulder_half, hip_half) + 0.9 * s
    paint(_ellipse(xs, ys, mid, torso_rx, torso_ry, lean + np.pi / 2.0), spec.torso_color)
    head_c, head_rx, head_ry, lean = head
    paint(_ellipse(xs, ys, head_c, head_rx, head_ry, lean), spec.head_color)

    if not mask.any():
        raise GenerationError("pose placed the figure fully outside the frame")

    tint = np.asarray(camera.tint)[:, None, None]
    img = np.clip(img * tint + camera.brightness, 0.0, 1.0)

    keypoints = np.zeros((NUM_KEYPOINTS, 3), dtype=np.float32)
    keypoints[:, :2] = kps
    keypoints[:, 2] = 1.0
    return Sample(
        image=img.astype(np.float32),
        mask=mask[None].astype(np.float32),
        keypoints=keypoints,
        identity=spec.identity,
        camera=camera.index,
        pose=pose.packed(),
    )


def keypoint_pixel(kp, height, width):
    """Integer pixel (row, col) containing a keypoint coordinate."""
    col = min(max(int(np.floor(kp[0])), 0), width - 1)
    row = min(max(int(np.floor(kp[1])), 0), height - 1)
    return row, col


def occlude(sample: Sample, fraction: float, side: str, fill: str = "noise",
            seed: int = 0) -> Sample:
    """Overwrite a border strip; hidden keypoints become invisible.

    Identity and camera labels are preserved; the mask is zeroed inside
    the occluded region.
    """
    if not 0.0 < fraction < 1.0:
        raise ConfigError(f"occlusion fraction must lie in (0,1), got {fraction}")
    if side not in ("top", "bottom", "left", "right"):
        raise ConfigError(f"unknown occlusion side {side!r}")
    _, height, width = sample.image.shape
    rows = slice(None)
    cols = slice(None)
    if side == "top":
        rows = slice(0, max(int(round(height * fraction)), 1))
    elif side == "bottom":
        rows = slice(height - max(int(round(height * fraction)), 1), height)
    elif side == "left":
        cols = slice(0, max(int(round(width * fraction)), 1))
    else:
        cols = slice(width - max(int(round(width * fraction)), 1), width)

    image = sample.image.copy()
    region_shape = image[:, rows, cols].shape
    if fill == "noise":
        image[:, rows, cols] = np.random.default_rng([seed, 9]).uniform(size=region_shape)
    elif fill == "gray":
        image[:, rows, cols] = 0.5
    elif fill == "black":
        image[:, rows, cols] = 0.0
    else:
        raise ConfigError(f"unknown fill style {fill!r}")
    mask = sample.mask.copy()
    mask[:, rows, cols] = 0.0

    keypoints = sample.keypoints.copy()
    row_hit = np.zeros(height, dtype=bool)
    col_hit = np.zeros(width, dtype=bool)
    row_hit[rows] = True
    col_hit[cols] = True
    for k in range(keypoints.shape[0]):
        if keypoints[k, 2] > 0:
            r, c = keypoint_pixel(keypoints[k], height, width)
            if row_hit[r] and col_hit[c]:
                keypoints[k, 2] = 0.0
    return Sample(image=image, mask=mask, keypoints=keypoints,
                  identity=sample.identity, camera=sample.camera, pose=sample.pose)


# ---------------------------------------------------------------------------
# dataset generation and manifests
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ManifestEntry:
    path: str
    identity: int
    camera: int
    keypoints: np.ndarray  # (17,3)

    def mask_path(self) -> str:
        return self.path.replace("images/", "masks/").rsplit(".", 1)[0] + ".pgm"


def _manifest_line(entry: ManifestEntry) -> str:
    kps = " ".join(
        f"{x:.2f} {y:.2f} {int(v)}" for x, y, v in entry.keypoints
    )
    return f"{entry.path} {entry.identity} {entry.camera} {kps}"


def write_manifest(path, entries) -> None:
    with open(path, "w") as f:
        for e in entries:
            f.write(_manifest_line(e) + "\n")


def read_manifest(path):
    entries = []
    with open(path) as f:
        for line in f:
            tok = line.split()
            if not tok:
                continue
            kps = np.array(tok[3:], dtype=np.float32).reshape(NUM_KEYPOINTS, 3)
            entries.append(ManifestEntry(tok[0], int(tok[1]), int(tok[2]), kps))
    return entries


def load_sample(root, entry: ManifestEntry) -> Sample:
    root = Path(root)
    img = read_ppm(root / entry.path).astype(np.float32) / 255.0
    mask = (read_pgm(root / entry.mask_path()) > 127).astype(np.float32)
    return Sample(
        image=np.ascontiguousarray(img.transpose(2, 0, 1)),
        mask=mask[None],
        keypoints=entry.keypoints.copy(),
        identity=entry.identity,
        camera=entry.camera,
    )


def make_dataset(num_ids: int, images_per_id: int, cameras: int, seed: int, out_dir,
                 train_ids: int | None = None, queries_per_id: int | None = None) -> dict:
    """Render a dataset to disk and write train/query/gallery manifests.

    Train and test identity sets are disjoint. Every test identity appears
    in the query set once per camera and in the gallery under its other
    images, so each query has cross-camera matches.
    """
    if num_ids < 2:
        raise ConfigError("need at least 2 identities")
    if images_per_id < 4:
        raise ConfigError("need at least 4 images per identity for P x K batching")
    if cameras < 2:
        raise ConfigError("need at least 2 cameras for the cross-camera protocol")
    train_ids = num_ids // 2 if train_ids is None else train_ids
    if not 0 < train_ids < num_ids:
        raise ConfigError(f"train_ids={train_ids} must split {num_ids} identities")
    queries_per_id = cameras if queries_per_id is None else queries_per_id

    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    styles = [camera_style(seed, c) for c in range(cameras)]

    manifests = {"train": [], "query": [], "gallery": []}
    for identity in range(num_ids):
        spec = identity_spec(seed, identity)
        split = "train" if identity < train_ids else "test"
        for idx in range(images_per_id):
            camera = idx % cameras
            rng = np.random.default_rng([seed, 13, identity, idx])
            pose = sample_pose(rng)
            sample = render_person(spec, pose, styles[camera],
                                   seed=int(rng.integers(0, 2 ** 31)))
            stem = f"{split}_{identity:04d}_{idx:03d}"
            rel_img = f"images/{stem}.ppm"
            write_ppm(out / rel_img, sample.image.transpose(1, 2, 0))
            write_pgm(out / f"masks/{stem}.pgm", sample.mask[0])
            entry = ManifestEntry(rel_img, identity, camera, sample.keypoints)
            if split == "train":
                manifests["train"].append(entry)
            elif idx < queries_per_id:
                manifests["query"].append(entry)
            else:
                manifests["gallery"].append(entry)

    for name, entries in manifests.items():
        write_manifest(out / f"{name}.txt", entries)
    return {name: len(v) for name, v in manifests.items()}


def manifest_hash(path) -> str:
    with open(path, "rb") as f:
        return hashlib.sha256(f.read()).hexdigest()
