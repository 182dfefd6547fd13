"""Pilot run of the distillation-vs-direct ablation at toy scale.

Writes one JSON line per seed with both arms' validation losses so the
acceptance threshold can be sanity-checked before freezing the test.
"""

import json
import sys
import tempfile
import time
from pathlib import Path

import numpy as np
import torch
from PIL import Image

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))

from feds.distillation import (STAGE_DISTILL, STAGE_FINETUNE, STAGE_TEACHER,
                               FEDSWeights, stage_plan)
from feds.networks import build_network_config
from feds.training import (DatasetSpec, OptimizerSpec, build_model, derive_seed,
                           prepare_dataset, run_stage, validation_loss)

torch.set_num_threads(1)

SCALE = 0.01
LAM = 0.015
BATCH = 4


def make_corpus(root: Path, count: int, seed: int, size: int = 96) -> list[Path]:
    root.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    paths = []
    for i in range(count):
        yy, xx = np.mgrid[0:size, 0:size] / size
        img = np.full((size, size, 3), rng.uniform(0.2, 0.8), dtype=np.float64)
        for _ in range(rng.integers(1, 4)):
            f1, f2 = rng.uniform(0.5, 9, 2)
            phase = rng.uniform(0, 2 * np.pi)
            amp = rng.uniform(0.05, 0.25, 3)
            img += amp * np.sin(2 * np.pi * (f1 * yy + f2 * xx) + phase)[..., None]
        for _ in range(rng.integers(0, 4)):
            y0, x0 = rng.integers(0, size - 8, 2)
            h, w = rng.integers(4, size // 2, 2)
            img[y0:y0 + h, x0:x0 + w] += rng.uniform(-0.3, 0.3, 3)
        img += rng.normal(0, 0.02, img.shape)
        arr = np.clip(img * 255, 0, 255).astype(np.uint8)
        p = root / f"img{i:03d}.png"
        Image.fromarray(arr).save(p)
        paths.append(p)
    return paths


def val_batches(paths: list[Path], crop: int = 64) -> list[torch.Tensor]:
    from feds.networks import load_rgb

    batches = []
    chunk = []
    for p in paths:
        arr = load_rgb(p)
        h, w = arr.shape[:2]
        y0, x0 = (h - crop) // 2, (w - crop) // 2
        chunk.append(arr[y0:y0 + crop, x0:x0 + crop].transpose(2, 0, 1))
        if len(chunk) == 4:
            batches.append(torch.from_numpy(np.stack(chunk)))
            chunk = []
    if chunk:
        batches.append(torch.from_numpy(np.stack(chunk)))
    return batches


def run_seed(seed: int, train_paths, val, out):
    w = FEDSWeights(lam=LAM)
    w_direct = FEDSWeights(lam=LAM, alpha=0.0, beta=0.0, gamma=0.0)
    opt = OptimizerSpec(batch_size=BATCH)
    t_cfg = build_network_config("teacher").override(
        N=32, M=32, z_channels=48, res_blocks_per_group=2)
    s_cfg = build_network_config("student").override(N=32, M=20, z_channels=48)
    spec = DatasetSpec(paths=train_paths, crop_size=64, rescale_target=None)

    t0 = time.perf_counter()
    teacher = build_model(t_cfg, lam=LAM, seed=seed)
    data = prepare_dataset(spec, derive_seed(seed, "data"))
    run_stage(stage_plan(STAGE_TEACHER), teacher, data, opt, w, scale=SCALE, seed=seed)
    t_teacher = time.perf_counter() - t0

    # FEDS arm: distill with the teacher, then fine-tune
    student_kd = build_model(s_cfg, lam=LAM, seed=seed)
    data_kd = prepare_dataset(spec, derive_seed(seed, "data-student"))
    ck2 = run_stage(stage_plan(STAGE_DISTILL), student_kd, data_kd, opt, w,
                    teacher=teacher, scale=SCALE, seed=seed)
    data_kd2 = prepare_dataset(spec, derive_seed(seed, "data-student-ft"))
    run_stage(stage_plan(STAGE_FINETUNE), student_kd, data_kd2, opt, w,
              scale=SCALE, seed=seed, init_from=ck2)
    t_kd = time.perf_counter() - t0 - t_teacher

    # direct arm: identical seeds/schedules, KD weights zero, no teacher
    student_direct = build_model(s_cfg, lam=LAM, seed=seed)
    data_d = prepare_dataset(spec, derive_seed(seed, "data-student"))
    ck2d = run_stage(stage_plan(STAGE_DISTILL), student_direct, data_d, opt, w_direct,
                     scale=SCALE, seed=seed)
    data_d2 = prepare_dataset(spec, derive_seed(seed, "data-student-ft"))
    run_stage(stage_plan(STAGE_FINETUNE), student_direct, data_d2, opt, w_direct,
              scale=SCALE, seed=seed, init_from=ck2d)
    t_direct = time.perf_counter() - t0 - t_teacher - t_kd

    loss_kd = validation_loss(student_kd, val, w)
    loss_direct = validation_loss(student_direct, val, w)
    rec = {"seed": seed, "val_feds": loss_kd, "val_direct": loss_direct,
           "feds_wins": loss_kd <= loss_direct,
           "t_teacher": t_teacher, "t_kd": t_kd, "t_direct": t_direct}
    print(json.dumps(rec), flush=True)
    with open(out, "a") as fh:
        fh.write(json.dumps(rec) + "\n")


def main():
    seeds = [int(s) for s in sys.argv[1:]] or [0, 1]
    root = Path(tempfile.mkdtemp(prefix="feds_pilot_"))
    train_paths = make_corpus(root / "train", 100, seed=1234)
    val = val_batches(make_corpus(root / "val", 16, seed=9999))
    out = Path(__file__).with_name("ablation_pilot_results.jsonl")
    for seed in seeds:
        run_seed(seed, train_paths, val, out)


if __name__ == "__main__":
    main()
