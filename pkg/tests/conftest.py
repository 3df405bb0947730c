import numpy as np
import pytest

from attnreid.model import GroupingScheme, ModelConfig, coco_grouping, init_model
from attnreid import synthdata as sd


def tiny_config(**overrides) -> ModelConfig:
    """Small geometry for gradient checks: 32x16 input, few channels."""
    defaults = dict(
        height=32, width=16, block_channels=(4, 5, 6, 7), convs_per_block=1,
        embed_hidden=8, embed_dim=4, num_groups=2, num_keypoints=4,
        decoder_channels=4, dtype="float64",
    )
    defaults.update(overrides)
    return ModelConfig(**defaults)


def tiny_scheme() -> GroupingScheme:
    return GroupingScheme(((0, 1, 2), (3,)))


def tiny_bundle(seed=0, **overrides):
    cfg = tiny_config(**overrides)
    return init_model(cfg, tiny_scheme(), seed)


def random_sample(rng, identity=0, camera=0, height=64, width=32):
    """Synthetic-looking sample with arbitrary pixels and valid keypoints."""
    kps = np.zeros((17, 3), dtype=np.float32)
    kps[:, 0] = rng.uniform(2, width - 2, size=17)
    kps[:, 1] = rng.uniform(2, height - 2, size=17)
    kps[:, 2] = 1.0
    return sd.Sample(
        image=rng.uniform(size=(3, height, width)).astype(np.float32),
        mask=(rng.uniform(size=(1, height, width)) > 0.5).astype(np.float32),
        keypoints=kps,
        identity=identity,
        camera=camera,
    )


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory):
    """8 train ids + 8 test ids, 8 images each, 2 cameras."""
    root = tmp_path_factory.mktemp("smalldata")
    counts = sd.make_dataset(16, 8, 2, seed=11, out_dir=root)
    return root, counts


@pytest.fixture(scope="session")
def small_splits(small_dataset):
    root, _ = small_dataset
    out = {}
    for name in ("train", "query", "gallery"):
        out[name] = [sd.load_sample(root, e) for e in sd.read_manifest(root / f"{name}.txt")]
    return out
