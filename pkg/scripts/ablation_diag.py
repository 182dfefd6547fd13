"""Diagnose the toy-scale ablation: is the teacher actually better than the
direct student, and which KD terms dominate the stage-2 objective?"""

import json
import sys
import tempfile
import time
from pathlib import Path

import numpy as np
import torch

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))

from feds.distillation import (STAGE_DISTILL, STAGE_TEACHER, FEDSWeights, stage_plan)
from feds.networks import build_network_config
from feds.training import (DatasetSpec, OptimizerSpec, build_model, derive_seed,
                           prepare_dataset, run_stage, validation_loss)
from ablation_pilot import make_corpus, val_batches

torch.set_num_threads(1)
SCALE = 0.01
LAM = 0.015
BATCH = 4

root = Path(tempfile.mkdtemp(prefix="feds_diag_"))
train_paths = make_corpus(root / "train", 100, seed=1234)
val = val_batches(make_corpus(root / "val", 16, seed=9999))
spec = DatasetSpec(paths=train_paths, crop_size=64, rescale_target=None)
w = FEDSWeights(lam=LAM)
opt = OptimizerSpec(batch_size=BATCH)
seed = 0

results = {}

# teacher variants at the same 1800-iteration budget
variants = {
    "teacher_attn": build_network_config("teacher").override(
        N=32, M=32, z_channels=48, res_blocks_per_group=2),
    "teacher_plain": build_network_config("teacher").override(
        N=32, M=32, z_channels=48, res_blocks_per_group=2, attention_enabled=False),
    "teacher_wide_plain": build_network_config("teacher").override(
        N=48, M=40, z_channels=48, res_blocks_per_group=3, attention_enabled=False),
}
teachers = {}
for name, cfg in variants.items():
    t0 = time.perf_counter()
    m = build_model(cfg, lam=LAM, seed=seed)
    data = prepare_dataset(spec, derive_seed(seed, "data"))
    run_stage(stage_plan(STAGE_TEACHER), m, data, opt, w, scale=SCALE, seed=seed)
    results[name] = {"val": validation_loss(m, val, w),
                     "secs": time.perf_counter() - t0}
    teachers[name] = m
    print(name, json.dumps(results[name]), flush=True)

# direct student at the stage-2 budget alone (1800 iters)
s_cfg = build_network_config("student").override(N=32, M=20, z_channels=48)
sd = build_model(s_cfg, lam=LAM, seed=seed)
data = prepare_dataset(spec, derive_seed(seed, "data-student"))
run_stage(stage_plan(STAGE_DISTILL), sd, data, opt,
          FEDSWeights(lam=LAM, alpha=0, beta=0, gamma=0), scale=SCALE, seed=seed)
results["student_direct_1800"] = {"val": validation_loss(sd, val, w)}
print("student_direct_1800", json.dumps(results["student_direct_1800"]), flush=True)

# KD term magnitudes against the best teacher, early in stage 2
best = max(teachers, key=lambda k: -results[k]["val"])
print("best teacher:", best, flush=True)
sk = build_model(s_cfg, lam=LAM, seed=seed)
data = prepare_dataset(spec, derive_seed(seed, "data-student"))
log = root / "kd_terms.jsonl"
run_stage(stage_plan(STAGE_DISTILL).scaled(1 / 18), sk, data, opt, w,
          teacher=teachers[best], seed=seed, log_path=log)
recs = [json.loads(l) for l in open(log)]
for i in (0, 10, 50, len(recs) - 1):
    print("iter", recs[i]["iter"], {k: round(recs[i][k], 5) for k in
          ("D", "R_y", "R_z", "L_out", "L_feat", "L_lat", "total")}, flush=True)
out = Path(__file__).with_name("ablation_diag_results.json")
out.write_text(json.dumps(results, indent=2))
