"""Full seed pair with a teacher that is actually stronger than the student."""

import json
import sys
import tempfile
import time
from pathlib import Path

import numpy as np
import torch

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))

from feds.distillation import (STAGE_DISTILL, STAGE_FINETUNE, STAGE_TEACHER,
                               FEDSWeights, stage_plan)
from feds.networks import build_network_config
from feds.training import (DatasetSpec, OptimizerSpec, build_model, derive_seed,
                           prepare_dataset, run_stage, validation_loss)
from ablation_pilot import make_corpus, val_batches

torch.set_num_threads(1)
SCALE = 0.01
LAM = 0.015
BATCH = 4

T_CFG = build_network_config("teacher").override(
    N=32, M=40, z_channels=48, res_blocks_per_group=3, attention_enabled=False)
S_CFG = build_network_config("student").override(N=32, M=20, z_channels=48)


def run_seed(seed, train_paths, val):
    w = FEDSWeights(lam=LAM)
    w0 = FEDSWeights(lam=LAM, alpha=0, beta=0, gamma=0)
    opt = OptimizerSpec(batch_size=BATCH)
    spec = DatasetSpec(paths=train_paths, crop_size=64, rescale_target=None)

    t0 = time.perf_counter()
    teacher = build_model(T_CFG, lam=LAM, seed=seed)
    data = prepare_dataset(spec, derive_seed(seed, "data"))
    run_stage(stage_plan(STAGE_TEACHER), teacher, data, opt, w, scale=SCALE, seed=seed)
    t_val = validation_loss(teacher, val, w)

    log = Path(tempfile.mkdtemp()) / "kd.jsonl"
    s_kd = build_model(S_CFG, lam=LAM, seed=seed)
    d1 = prepare_dataset(spec, derive_seed(seed, "data-student"))
    ck2 = run_stage(stage_plan(STAGE_DISTILL), s_kd, d1, opt, w,
                    teacher=teacher, scale=SCALE, seed=seed, log_path=log)
    d2 = prepare_dataset(spec, derive_seed(seed, "data-student-ft"))
    run_stage(stage_plan(STAGE_FINETUNE), s_kd, d2, opt, w, scale=SCALE,
              seed=seed, init_from=ck2)

    s_d = build_model(S_CFG, lam=LAM, seed=seed)
    d3 = prepare_dataset(spec, derive_seed(seed, "data-student"))
    ck2d = run_stage(stage_plan(STAGE_DISTILL), s_d, d3, opt, w0, scale=SCALE, seed=seed)
    d4 = prepare_dataset(spec, derive_seed(seed, "data-student-ft"))
    run_stage(stage_plan(STAGE_FINETUNE), s_d, d4, opt, w0, scale=SCALE,
              seed=seed, init_from=ck2d)

    recs = [json.loads(l) for l in open(log)]
    terms = {i: {k: round(recs[i][k], 5) for k in
                 ("D", "R_y", "R_z", "L_out", "L_feat", "L_lat")}
             for i in (0, 100, 900, len(recs) - 1)}
    rec = {"seed": seed, "teacher_val": t_val,
           "val_feds": validation_loss(s_kd, val, w),
           "val_direct": validation_loss(s_d, val, w),
           "secs": time.perf_counter() - t0, "kd_terms": terms}
    rec["feds_wins"] = rec["val_feds"] <= rec["val_direct"]
    print(json.dumps(rec), flush=True)
    return rec


def main():
    seeds = [int(s) for s in sys.argv[1:]] or [0]
    root = Path(tempfile.mkdtemp(prefix="feds_diag2_"))
    train_paths = make_corpus(root / "train", 100, seed=1234)
    val = val_batches(make_corpus(root / "val", 16, seed=9999))
    out = Path(__file__).with_name("ablation_diag2_results.jsonl")
    for seed in seeds:
        rec = run_seed(seed, train_paths, val)
        with open(out, "a") as fh:
            fh.write(json.dumps(rec) + "\n")


if __name__ == "__main__":
    main()
