import os

# Pin BLAS threading before numpy loads: bit-exact reproducibility is
# only guaranteed at a fixed thread count, and single-threaded GEMM is
# faster at these matrix sizes anyway.
for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(var, "1")

import numpy as np  # noqa: E402
import pytest  # noqa: E402

from mgvlm.config import TrainConfig  # noqa: E402
from mgvlm.data import Dataset, generate_shapes_video, generate_shapes_world  # noqa: E402
from mgvlm.model import build_model  # noqa: E402


def small_config(**overrides) -> TrainConfig:
    base = dict(dim=32, proj_dim=16, vision_layers=1, text_layers=1, fusion_layers=1,
                attn_heads=4, patch_size=8, image_size=32, max_text_len=12,
                batch_size=4, total_steps=20, warmup_steps=2, seed=3,
                max_annotations_per_sample=2, frames_per_step=2, max_frames=4)
    base.update(overrides)
    return TrainConfig(**base)


@pytest.fixture(scope="session")
def shapes_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("data") / "shapes"
    generate_shapes_world(7, 24, out, image_size=32, grid=2, patch_size=8)
    return out


@pytest.fixture(scope="session")
def shapes(shapes_dir):
    return Dataset.load(shapes_dir)


@pytest.fixture(scope="session")
def videos_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("data") / "videos"
    generate_shapes_video(9, 6, out, image_size=32, grid=4, patch_size=8, frames=3)
    return out


@pytest.fixture(scope="session")
def videos(videos_dir):
    return Dataset.load(videos_dir)


@pytest.fixture()
def small_model(shapes):
    cfg = small_config()
    return build_model(cfg, len(shapes.vocab)), cfg


def rand_param(rng: np.random.Generator, shape, scale=1.0):
    from mgvlm.autodiff import Tensor
    return Tensor(rng.normal(0, scale, size=shape), requires_grad=True, dtype=np.float64)
