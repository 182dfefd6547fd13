"""Sweep toy teacher architectures, then trial the full KD-vs-direct pair."""

import json
import sys
import tempfile
import time
from pathlib import Path

import numpy as np
import torch

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))
sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "tests"))

from conftest import write_corpus

from feds.distillation import (STAGE_DISTILL, STAGE_FINETUNE, STAGE_TEACHER,
                               FEDSWeights, stage_plan)
from feds.networks import build_network_config, load_rgb
from feds.training import (DatasetSpec, OptimizerSpec, build_model, derive_seed,
                           prepare_dataset, run_stage, validation_loss)

torch.set_num_threads(1)
SCALE = 0.01
LAM = 0.015
OPT = OptimizerSpec(batch_size=4)
W = FEDSWeights(lam=LAM)
W0 = FEDSWeights(lam=LAM, alpha=0, beta=0, gamma=0)

root = Path(tempfile.mkdtemp(prefix="feds_sweep_"))
train_paths = write_corpus(root / "train", 100, seed=1234)
val_paths = write_corpus(root / "val", 16, seed=9999)
SPEC = DatasetSpec(paths=train_paths, crop_size=64, rescale_target=None)


def val_batches(paths, crop=64):
    batches, chunk = [], []
    for p in paths:
        arr = load_rgb(p)
        y0 = (arr.shape[0] - crop) // 2
        x0 = (arr.shape[1] - crop) // 2
        chunk.append(arr[y0:y0 + crop, x0:x0 + crop].transpose(2, 0, 1))
        if len(chunk) == 4:
            batches.append(torch.from_numpy(np.stack(chunk)))
            chunk = []
    return batches


VAL = val_batches(val_paths)


def train_teacher(cfg, seed):
    model = build_model(cfg, lam=LAM, seed=seed)
    data = prepare_dataset(SPEC, derive_seed(seed, "data"))
    run_stage(stage_plan(STAGE_TEACHER), model, data, OPT, W, scale=SCALE, seed=seed)
    return model


def train_student(cfg, seed, teacher, weights):
    model = build_model(cfg, lam=LAM, seed=seed)
    data = prepare_dataset(SPEC, derive_seed(seed, "data-student"))
    ck2 = run_stage(stage_plan(STAGE_DISTILL), model, data, OPT, weights,
                    teacher=teacher, scale=SCALE, seed=seed)
    data2 = prepare_dataset(SPEC, derive_seed(seed, "data-student-ft"))
    run_stage(stage_plan(STAGE_FINETUNE), model, data2, OPT, weights,
              scale=SCALE, seed=seed, init_from=ck2)
    return model


S_CFG = build_network_config("student").override(N=32, M=20, z_channels=48)

candidates = {
    "M24_res1": build_network_config("teacher").override(
        N=32, M=24, z_channels=48, res_blocks_per_group=1, attention_enabled=False),
    "M32_res1": build_network_config("teacher").override(
        N=32, M=32, z_channels=48, res_blocks_per_group=1, attention_enabled=False),
    "M32_res2": build_network_config("teacher").override(
        N=32, M=32, z_channels=48, res_blocks_per_group=2, attention_enabled=False),
    "M40_res1": build_network_config("teacher").override(
        N=32, M=40, z_channels=48, res_blocks_per_group=1, attention_enabled=False),
}

t0 = time.perf_counter()
direct = train_student(S_CFG, 0, None, W0)
val_direct = validation_loss(direct, VAL, W)
print(json.dumps({"arm": "direct", "seed": 0, "val": val_direct,
                  "secs": round(time.perf_counter() - t0)}), flush=True)

teachers = {}
for name, cfg in candidates.items():
    t0 = time.perf_counter()
    teachers[name] = train_teacher(cfg, 0)
    v = validation_loss(teachers[name], VAL, W)
    print(json.dumps({"arm": f"teacher-{name}", "seed": 0, "val": v,
                      "beats_direct": v < val_direct,
                      "secs": round(time.perf_counter() - t0)}), flush=True)

best = min(teachers, key=lambda k: validation_loss(teachers[k], VAL, W))
print(json.dumps({"best_teacher": best}), flush=True)

for seed in (0, 1):
    t0 = time.perf_counter()
    teacher = teachers[best] if seed == 0 else train_teacher(candidates[best], seed)
    kd = train_student(S_CFG, seed, teacher, W)
    val_kd = validation_loss(kd, VAL, W)
    if seed == 0:
        vd = val_direct
    else:
        d2 = train_student(S_CFG, seed, None, W0)
        vd = validation_loss(d2, VAL, W)
    print(json.dumps({"arm": "kd-pair", "seed": seed, "teacher": best,
                      "val_feds": val_kd, "val_direct": vd,
                      "feds_wins": val_kd <= vd,
                      "secs": round(time.perf_counter() - t0)}), flush=True)
