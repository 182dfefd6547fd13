import numpy as np
import pytest
import torch
from PIL import Image

from feds.distillation import STAGE_TEACHER, FEDSWeights, stage_plan
from feds.networks import build_network_config
from feds.training import (DatasetSpec, OptimizerSpec, build_model, derive_seed,
                           prepare_dataset, run_stage)

# tiny tensors on this box run fastest single-threaded
torch.set_num_threads(1)


def synth_image(rng: np.random.Generator, height: int, width: int) -> np.ndarray:
    """Structured random image: smooth waves + rectangles + mild noise.

    Wave frequencies are fixed per pixel (96 px reference) so images of any
    size share the same local statistics.
    """
    yy, xx = np.mgrid[0:height, 0:width]
    yy = yy / 96.0
    xx = xx / 96.0
    img = np.full((height, width, 3), rng.uniform(0.2, 0.8))
    for _ in range(int(rng.integers(1, 4))):
        f1, f2 = rng.uniform(0.5, 9, 2)
        phase = rng.uniform(0, 2 * np.pi)
        img += rng.uniform(0.05, 0.25, 3) * np.sin(
            2 * np.pi * (f1 * yy + f2 * xx) + phase)[..., None]
    for _ in range(int(rng.integers(0, 4))):
        if height > 8 and width > 8:
            y0 = int(rng.integers(0, height - 4))
            x0 = int(rng.integers(0, width - 4))
            h = int(rng.integers(2, max(3, height // 2)))
            w = int(rng.integers(2, max(3, width // 2)))
            img[y0:y0 + h, x0:x0 + w] += rng.uniform(-0.3, 0.3, 3)
    img += rng.normal(0, 0.02, img.shape)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def smooth_image(rng: np.random.Generator, height: int, width: int) -> np.ndarray:
    """Stationary content: waves plus iid noise, no hard edges.

    Rate checks calibrate on this distribution; edge-heavy content makes a
    desk-scale model's scale predictions miss in ways unrelated to the
    coding machinery under test.
    """
    yy, xx = np.mgrid[0:height, 0:width] / 96.0
    img = np.full((height, width, 3), rng.uniform(0.3, 0.7))
    for _ in range(3):
        f1, f2 = rng.uniform(0.5, 5, 2)
        phase = rng.uniform(0, 2 * np.pi)
        img += rng.uniform(0.05, 0.2, 3) * np.sin(
            2 * np.pi * (f1 * yy + f2 * xx) + phase)[..., None]
    img += rng.normal(0, 0.04, img.shape)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def write_corpus(directory, count: int, seed: int, size: int = 96,
                 generator=synth_image) -> list:
    directory.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    paths = []
    for i in range(count):
        arr = np.round(generator(rng, size, size) * 255).astype(np.uint8)
        p = directory / f"img{i:03d}.png"
        Image.fromarray(arr).save(p)
        paths.append(p)
    return paths


def toy_student_config(**over):
    base = dict(N=16, M=20, z_channels=24)
    base.update(over)
    return build_network_config("student").override(**base)


def toy_teacher_config(**over):
    base = dict(N=16, M=16, z_channels=24, res_blocks_per_group=1)
    base.update(over)
    return build_network_config("teacher").override(**base)


@pytest.fixture(scope="session")
def corpus_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("corpus")
    write_corpus(root, 24, seed=20240811)
    return root


@pytest.fixture(scope="session")
def trained_student(tmp_path_factory):
    """A toy student calibrated for rate checks.

    Two training phases: the bulk at 64 px crops, then a short pass at
    256 px crops. The second phase matters because 64 px inputs collapse
    the hyper-latent to a single spatial position, so a model trained only
    there has never seen the geometry it is evaluated at.
    """
    import dataclasses

    root = tmp_path_factory.mktemp("trained_student")
    small = write_corpus(root / "small", 24, seed=20240811, generator=smooth_image)
    large = write_corpus(root / "large", 12, seed=777, size=288,
                         generator=smooth_image)
    cfg = toy_student_config()
    w = FEDSWeights(lam=0.0032)
    model = build_model(cfg, lam=w.lam, lambda_index=1, seed=77)
    spec_a = DatasetSpec(paths=small, crop_size=64, rescale_target=None)
    run_stage(stage_plan(STAGE_TEACHER).scaled(1500 / 180_000), model,
              prepare_dataset(spec_a, derive_seed(77, "data")),
              OptimizerSpec(batch_size=4), w, seed=77)
    spec_b = DatasetSpec(paths=large, crop_size=256, rescale_target=None)
    plan_b = dataclasses.replace(stage_plan(STAGE_TEACHER).scaled(1500 / 180_000),
                                 total_iterations=600)
    run_stage(plan_b, model, prepare_dataset(spec_b, derive_seed(78, "data")),
              OptimizerSpec(batch_size=2), w, seed=78)
    model.eval()
    return model
