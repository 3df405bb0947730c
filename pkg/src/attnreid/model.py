"""Backbone embedding network plus the two training-only branches.

The backbone is a small strided CNN (stem + 3 blocks, each halving the
spatial extent twice over, total stride 16). Training attaches:

* a holistic branch: an encoder mirroring blocks 2-4 (independent weights
  by default) over the stem output, then a 4-deconvolution decoder and a
  1x1 head with sigmoid, predicting the body mask at input resolution;
* a partial branch: the final feature channels split into M contiguous
  groups (remainder channels unused), each group decoded by one shared
  deconvolution stack and its own 1x1 head into per-keypoint heatmaps.

Both branches are absent from the inference path.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace

import numpy as np

from . import ops
from .errors import ConfigError, DimensionError, FormatError
from .tensor import Tensor

CHECKPOINT_MAGIC = b"DAAF1"


@dataclass(frozen=True)
class ModelConfig:
    height: int = 64
    width: int = 32
    in_channels: int = 3
    block_channels: tuple = (16, 24, 36, 50)
    convs_per_block: int = 2
    embed_hidden: int = 64
    embed_dim: int = 32
    num_groups: int = 6
    num_keypoints: int = 17
    decoder_channels: int = 64
    decoder_layers: int = 4
    share_hab_encoder: bool = False
    pab_shared_decoder: bool = True
    pab_mode: str = "keypoint"  # "keypoint" | "part_image"
    dtype: str = "float32"

    @property
    def feature_channels(self) -> int:
        return self.block_channels[-1]

    @property
    def total_stride(self) -> int:
        return 2 ** len(self.block_channels)

    @property
    def feature_extent(self) -> tuple:
        return self.height // self.total_stride, self.width // self.total_stride

    @property
    def np_dtype(self):
        return np.float32 if self.dtype == "float32" else np.float64

    def validate(self) -> None:
        if self.height % self.total_stride or self.width % self.total_stride:
            raise ConfigError(
                f"input extent {self.height}x{self.width} not divisible by total stride {self.total_stride}"
            )
        if 2 ** self.decoder_layers != self.total_stride:
            raise ConfigError(
                f"{self.decoder_layers} stride-2 decoder layers cannot undo a stride of {self.total_stride}"
            )
        if self.feature_channels < self.num_groups:
            raise ConfigError(
                f"feature channels ({self.feature_channels}) must be >= group count ({self.num_groups})"
            )
        if self.pab_mode not in ("keypoint", "part_image"):
            raise ConfigError(f"unknown pab_mode {self.pab_mode!r}")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"unsupported dtype {self.dtype!r}")


# COCO-17 keypoint order used by the synthetic renderer.
KEYPOINT_NAMES = (
    "nose", "left_eye", "right_eye", "left_ear", "right_ear",
    "left_shoulder", "right_shoulder", "left_elbow", "right_elbow",
    "left_wrist", "right_wrist", "left_hip", "right_hip",
    "left_knee", "right_knee", "left_ankle", "right_ankle",
)

_GROUPINGS = {
    1: ((tuple(range(17)),)),
    4: ((0, 1, 2, 3, 4), (7, 9, 8, 10), (5, 6, 11, 12), (13, 15, 14, 16)),
    6: ((0, 1, 2, 3, 4), (7, 9), (8, 10), (5, 6, 11, 12), (13, 15), (14, 16)),
    7: ((0, 1, 2, 3, 4), (7, 9), (8, 10), (5, 6), (11, 12), (13, 15), (14, 16)),
    17: tuple((k,) for k in range(17)),
}


@dataclass(frozen=True)
class GroupingScheme:
    """Partition of keypoints into groups, inducing a channel partition.

    Group p owns the contiguous channel range [p*(C//M), (p+1)*(C//M));
    the trailing C mod M channels belong to no group.
    """

    groups: tuple

    @property
    def num_groups(self) -> int:
        return len(self.groups)

    @property
    def group_sizes(self) -> tuple:
        return tuple(len(g) for g in self.groups)

    def validate(self, num_keypoints: int) -> None:
        seen = [k for g in self.groups for k in g]
        if len(self.groups) == 0 or any(len(g) == 0 for g in self.groups):
            raise ConfigError("grouping scheme must have nonempty groups")
        if sorted(seen) != list(range(num_keypoints)):
            raise ConfigError(
                f"groups must partition keypoints 0..{num_keypoints - 1}, got {sorted(seen)}"
            )

    def channels_per_group(self, feature_channels: int) -> int:
        if feature_channels < self.num_groups:
            raise ConfigError(
                f"cannot split {feature_channels} channels into {self.num_groups} groups"
            )
        return feature_channels // self.num_groups

    def omitted_channels(self, feature_channels: int) -> int:
        return feature_channels % self.num_groups

    def channel_range(self, group: int, feature_channels: int) -> tuple:
        per = self.channels_per_group(feature_channels)
        return group * per, (group + 1) * per


def coco_grouping(num_groups: int) -> GroupingScheme:
    """Fixed keypoint partitions for group counts 1, 4, 6, 7 and 17."""
    if num_groups not in _GROUPINGS:
        raise ConfigError(f"no predefined grouping with {num_groups} groups")
    groups = _GROUPINGS[num_groups]
    scheme = GroupingScheme(tuple(tuple(g) for g in groups))
    scheme.validate(17)
    return scheme


class ModelBundle:
    """Named parameters plus the structural config and grouping scheme."""

    def __init__(self, config: ModelConfig, scheme: GroupingScheme, params: dict):
        config.validate()
        scheme.validate(config.num_keypoints)
        if scheme.num_groups != config.num_groups:
            raise ConfigError(
                f"scheme has {scheme.num_groups} groups but config expects {config.num_groups}"
            )
        self.config = config
        self.scheme = scheme
        self.params = params

    @property
    def has_hab(self) -> bool:
        return any(name.startswith("hab.") for name in self.params)

    @property
    def has_pab(self) -> bool:
        return any(name.startswith("pab.") for name in self.params)

    def parameters(self, prefixes=None) -> list:
        names = self.param_names(prefixes)
        return [self.params[n] for n in names]

    def param_names(self, prefixes=None) -> list:
        if prefixes is None:
            return sorted(self.params)
        return sorted(n for n in self.params if n.split(".", 1)[0] in prefixes)

    def parameter_count(self, prefixes=None) -> int:
        return sum(p.size for p in self.parameters(prefixes))

    def strip_branches(self) -> "ModelBundle":
        """Inference-only copy: backbone and embedding head parameters."""
        keep = {n: p for n, p in self.params.items() if n.split(".", 1)[0] in ("backbone", "embed")}
        return ModelBundle(self.config, self.scheme, keep)


def _conv_init(rng, cout, cin, kh, kw, dtype):
    std = np.sqrt(2.0 / (cin * kh * kw))
    return Tensor(rng.normal(0.0, std, size=(cout, cin, kh, kw)).astype(dtype))


def _deconv_init(rng, cin, cout, kh, kw, dtype):
    std = np.sqrt(2.0 / (cin * kh * kw))
    return Tensor(rng.normal(0.0, std, size=(cin, cout, kh, kw)).astype(dtype))


def _dense_init(rng, din, dout, dtype):
    std = np.sqrt(1.0 / din)
    return Tensor(rng.normal(0.0, std, size=(din, dout)).astype(dtype))


def _zeros(shape, dtype):
    return Tensor(np.zeros(shape, dtype=dtype))


def _init_block_params(rng, params, prefix, cin, cout, convs, dtype):
    for j in range(convs):
        c_in = cin if j == 0 else cout
        params[f"{prefix}.conv{j}.w"] = _conv_init(rng, cout, c_in, 3, 3, dtype)
        params[f"{prefix}.conv{j}.b"] = _zeros((cout,), dtype)


def _init_decoder_params(rng, params, prefix, cin, channels, layers, dtype):
    for i in range(layers):
        c_in = cin if i == 0 else channels
        params[f"{prefix}.deconv{i}.w"] = _deconv_init(rng, c_in, channels, 3, 3, dtype)
        params[f"{prefix}.deconv{i}.b"] = _zeros((channels,), dtype)


def init_model(config: ModelConfig, scheme: GroupingScheme, seed: int,
               with_hab: bool = True, with_pab: bool = True) -> ModelBundle:
    """Fresh parameters; each component draws from its own RNG stream.

    Separate streams keep backbone/embedding initialization identical
    whether or not the branches exist.
    """
    config.validate()
    dtype = config.np_dtype
    chans = config.block_channels
    params = {}

    rng = np.random.default_rng([seed, 0])
    cin = config.in_channels
    for b, cout in enumerate(chans):
        _init_block_params(rng, params, f"backbone.b{b}", cin, cout, config.convs_per_block, dtype)
        cin = cout

    rng = np.random.default_rng([seed, 1])
    params["embed.fc0.w"] = _dense_init(rng, config.feature_channels, config.embed_hidden, dtype)
    params["embed.fc0.b"] = _zeros((config.embed_hidden,), dtype)
    params["embed.fc1.w"] = _dense_init(rng, config.embed_hidden, config.embed_dim, dtype)
    params["embed.fc1.b"] = _zeros((config.embed_dim,), dtype)

    if with_hab:
        rng = np.random.default_rng([seed, 2])
        if not config.share_hab_encoder:
            cin = chans[0]
            for b, cout in enumerate(chans[1:], start=1):
                _init_block_params(rng, params, f"hab.enc.b{b}", cin, cout, config.convs_per_block, dtype)
                cin = cout
        _init_decoder_params(rng, params, "hab.dec", config.feature_channels,
                             config.decoder_channels, config.decoder_layers, dtype)
        params["hab.head.w"] = _conv_init(rng, 1, config.decoder_channels, 1, 1, dtype)
        params["hab.head.b"] = _zeros((1,), dtype)

    if with_pab:
        rng = np.random.default_rng([seed, 3])
        per = scheme.channels_per_group(config.feature_channels)
        if config.pab_shared_decoder:
            _init_decoder_params(rng, params, "pab.dec", per,
                                 config.decoder_channels, config.decoder_layers, dtype)
        else:
            for g in range(scheme.num_groups):
                _init_decoder_params(rng, params, f"pab.dec{g}", per,
                                     config.decoder_channels, config.decoder_layers, dtype)
        for g in range(scheme.num_groups):
            out_ch = 3 if config.pab_mode == "part_image" else scheme.group_sizes[g]
            params[f"pab.head{g}.w"] = _conv_init(rng, out_ch, config.decoder_channels, 1, 1, dtype)
            params[f"pab.head{g}.b"] = _zeros((out_ch,), dtype)

    return ModelBundle(config, scheme, params)


# ---------------------------------------------------------------------------
# forward passes
# ---------------------------------------------------------------------------

def _block_forward(x, bundle, prefix):
    cfg = bundle.config
    for j in range(cfg.convs_per_block):
        stride = 2 if j == 0 else 1
        x = ops.conv2d(x, bundle.params[f"{prefix}.conv{j}.w"], stride=stride, padding=1,
                       bias=bundle.params[f"{prefix}.conv{j}.b"], activation="relu")
    return x


def backbone_forward(image, bundle: ModelBundle):
    """(low-level stem output, final feature maps) for an NCHW image batch."""
    cfg = bundle.config
    if image.shape[1:] != (cfg.in_channels, cfg.height, cfg.width):
        raise ConfigError(
            f"image extent {image.shape[1:]} does not match config "
            f"({cfg.in_channels},{cfg.height},{cfg.width})"
        )
    x = _block_forward(image, bundle, "backbone.b0")
    lowlevel = x
    for b in range(1, len(cfg.block_channels)):
        x = _block_forward(x, bundle, f"backbone.b{b}")
    return lowlevel, x


def embed(features, bundle: ModelBundle):
    """Global average pool -> hidden dense + relu -> embedding dense."""
    x = ops.global_avg_pool(features)
    x = ops.relu(ops.dense(x, bundle.params["embed.fc0.w"], bundle.params["embed.fc0.b"]))
    return ops.dense(x, bundle.params["embed.fc1.w"], bundle.params["embed.fc1.b"])


def _decoder_forward(x, bundle, prefix):
    cfg = bundle.config
    for i in range(cfg.decoder_layers):
        x = ops.deconv2d(x, bundle.params[f"{prefix}.deconv{i}.w"],
                         stride=2, padding=1, output_padding=1,
                         bias=bundle.params[f"{prefix}.deconv{i}.b"], activation="relu")
    return x


def hab_forward(lowlevel, bundle: ModelBundle):
    """Mask prediction in (0,1) at full input extent from the stem output."""
    cfg = bundle.config
    if not bundle.has_hab:
        raise ConfigError("bundle has no holistic-branch parameters")
    x = lowlevel
    prefix = "backbone" if cfg.share_hab_encoder else "hab.enc"
    for b in range(1, len(cfg.block_channels)):
        x = _block_forward(x, bundle, f"{prefix}.b{b}")
    x = _decoder_forward(x, bundle, "hab.dec")
    return ops.conv2d(x, bundle.params["hab.head.w"], stride=1, padding=0,
                      bias=bundle.params["hab.head.b"], activation="sigmoid")


def split_channels(features, scheme: GroupingScheme):
    """Contiguous per-group channel slices; remainder channels dropped."""
    c = features.shape[1]
    per = scheme.channels_per_group(c)
    return [
        ops.slice_axis(features, 1, g * per, (g + 1) * per)
        for g in range(scheme.num_groups)
    ]


def pab_forward(features, bundle: ModelBundle, scheme: GroupingScheme | None = None):
    """Per-group heatmaps at input extent, one channel per assigned keypoint.

    With the shared decoder the group slices are stacked along the batch
    axis so the stack runs once; independent-decoder mode runs per group.
    """
    cfg = bundle.config
    if not bundle.has_pab:
        raise ConfigError("bundle has no partial-branch parameters")
    scheme = bundle.scheme if scheme is None else scheme
    if scheme.num_groups != cfg.num_groups:
        raise ConfigError(
            f"scheme group count {scheme.num_groups} does not match config {cfg.num_groups}"
        )
    n = features.shape[0]
    slices = split_channels(features, scheme)
    if cfg.pab_shared_decoder:
        stacked = ops.concat(slices, axis=0) if len(slices) > 1 else slices[0]
        decoded = _decoder_forward(stacked, bundle, "pab.dec")
        decoded_groups = [
            ops.slice_axis(decoded, 0, g * n, (g + 1) * n) for g in range(scheme.num_groups)
        ]
    else:
        decoded_groups = [
            _decoder_forward(s, bundle, f"pab.dec{g}") for g, s in enumerate(slices)
        ]
    return [
        ops.conv2d(d, bundle.params[f"pab.head{g}.w"], stride=1, padding=0,
                   bias=bundle.params[f"pab.head{g}.b"])
        for g, d in enumerate(decoded_groups)
    ]


def pab_decoder_forward(group_slice, bundle: ModelBundle, group: int | None = None):
    """Shared (or group-specific) decoder stack on a single group slice."""
    cfg = bundle.config
    prefix = "pab.dec" if cfg.pab_shared_decoder else f"pab.dec{group}"
    return _decoder_forward(group_slice, bundle, prefix)


def pab_head_forward(decoded, bundle: ModelBundle, group: int):
    return ops.conv2d(decoded, bundle.params[f"pab.head{group}.w"], stride=1, padding=0,
                      bias=bundle.params[f"pab.head{group}.b"])


# ---------------------------------------------------------------------------
# checkpoint I/O
# ---------------------------------------------------------------------------

_PAB_MODES = ("keypoint", "part_image")
_DTYPES = ("float32", "float64")


def _config_ints(config: ModelConfig) -> list:
    return [
        config.height, config.width, config.in_channels,
        len(config.block_channels), *config.block_channels,
        config.convs_per_block, config.embed_hidden, config.embed_dim,
        config.num_groups, config.num_keypoints,
        config.decoder_channels, config.decoder_layers,
        int(config.share_hab_encoder), int(config.pab_shared_decoder),
        _PAB_MODES.index(config.pab_mode), _DTYPES.index(config.dtype),
    ]


def _config_from_ints(vals: list) -> ModelConfig:
    it = iter(vals)
    height, width, in_channels, nblocks = (next(it) for _ in range(4))
    blocks = tuple(next(it) for _ in range(nblocks))
    (convs_per_block, embed_hidden, embed_dim, num_groups, num_keypoints,
     decoder_channels, decoder_layers, share_enc, shared_dec, mode, dt) = (next(it) for _ in range(11))
    return ModelConfig(
        height=height, width=width, in_channels=in_channels, block_channels=blocks,
        convs_per_block=convs_per_block, embed_hidden=embed_hidden, embed_dim=embed_dim,
        num_groups=num_groups, num_keypoints=num_keypoints,
        decoder_channels=decoder_channels, decoder_layers=decoder_layers,
        share_hab_encoder=bool(share_enc), pab_shared_decoder=bool(shared_dec),
        pab_mode=_PAB_MODES[mode], dtype=_DTYPES[dt],
    )


def save_model(bundle: ModelBundle, path, extra_blobs: dict | None = None) -> None:
    """Self-describing binary checkpoint; parameters stored as 32-bit floats."""
    blobs = {name: p.data for name, p in bundle.params.items()}
    if extra_blobs:
        overlap = set(blobs) & set(extra_blobs)
        if overlap:
            raise FormatError(f"extra blobs shadow parameters: {sorted(overlap)}")
        blobs.update(extra_blobs)
    cfg_ints = _config_ints(bundle.config)
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", len(cfg_ints)))
        f.write(struct.pack(f"<{len(cfg_ints)}i", *cfg_ints))
        f.write(struct.pack("<I", bundle.scheme.num_groups))
        for g in bundle.scheme.groups:
            f.write(struct.pack("<I", len(g)))
            f.write(struct.pack(f"<{len(g)}I", *g))
        f.write(struct.pack("<I", len(blobs)))
        for name in sorted(blobs):
            arr = np.ascontiguousarray(blobs[name], dtype="<f4")
            nb = name.encode("utf-8")
            f.write(struct.pack("<H", len(nb)))
            f.write(nb)
            f.write(struct.pack("<B", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(arr.tobytes())


def _read_exact(f, n: int) -> bytes:
    buf = f.read(n)
    if len(buf) != n:
        raise FormatError("checkpoint truncated")
    return buf


def load_model(path, expected_config: ModelConfig | None = None):
    """(bundle, extra blob dict); rejects bad magic, truncation, config clash."""
    with open(path, "rb") as f:
        if _read_exact(f, len(CHECKPOINT_MAGIC)) != CHECKPOINT_MAGIC:
            raise FormatError(f"{path}: not a model checkpoint (bad magic)")
        (ncfg,) = struct.unpack("<I", _read_exact(f, 4))
        vals = struct.unpack(f"<{ncfg}i", _read_exact(f, 4 * ncfg))
        config = _config_from_ints(list(vals))
        (ngroups,) = struct.unpack("<I", _read_exact(f, 4))
        groups = []
        for _ in range(ngroups):
            (sz,) = struct.unpack("<I", _read_exact(f, 4))
            groups.append(struct.unpack(f"<{sz}I", _read_exact(f, 4 * sz)))
        scheme = GroupingScheme(tuple(tuple(g) for g in groups))
        (nblobs,) = struct.unpack("<I", _read_exact(f, 4))
        blobs = {}
        for _ in range(nblobs):
            (nlen,) = struct.unpack("<H", _read_exact(f, 2))
            name = _read_exact(f, nlen).decode("utf-8")
            (ndim,) = struct.unpack("<B", _read_exact(f, 1))
            shape = struct.unpack(f"<{ndim}I", _read_exact(f, 4 * ndim))
            count = int(np.prod(shape)) if ndim else 1
            arr = np.frombuffer(_read_exact(f, 4 * count), dtype="<f4").reshape(shape)
            blobs[name] = arr.astype(config.np_dtype)
    if expected_config is not None and expected_config != config:
        raise FormatError(
            f"{path}: checkpoint config does not match the expected configuration"
        )
    param_prefixes = ("backbone", "embed", "hab", "pab")
    params = {
        n: Tensor(a) for n, a in blobs.items() if n.split(".", 1)[0] in param_prefixes
    }
    extra = {n: a for n, a in blobs.items() if n.split(".", 1)[0] not in param_prefixes}
    return ModelBundle(config, scheme, params), extra
