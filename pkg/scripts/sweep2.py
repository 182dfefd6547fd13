"""Teacher trained at scale=0.01 but with a larger batch; then KD pairs."""
import json, sys, tempfile, time
from pathlib import Path
import numpy as np, torch
sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))
sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "tests"))
from conftest import write_corpus
from feds.distillation import (STAGE_DISTILL, STAGE_FINETUNE, STAGE_TEACHER,
                               FEDSWeights, stage_plan)
from feds.networks import build_network_config, load_rgb
from feds.training import (DatasetSpec, OptimizerSpec, build_model, derive_seed,
                           prepare_dataset, run_stage, validation_loss)

torch.set_num_threads(1)
SCALE, LAM = 0.01, 0.015
W = FEDSWeights(lam=LAM)
W0 = FEDSWeights(lam=LAM, alpha=0, beta=0, gamma=0)

root = Path(tempfile.mkdtemp(prefix="feds_sweep2_"))
train_paths = write_corpus(root/"train", 100, seed=1234)
val_paths = write_corpus(root/"val", 16, seed=9999)
SPEC = DatasetSpec(paths=train_paths, crop_size=64, rescale_target=None)

def val_batches(paths, crop=64):
    batches, chunk = [], []
    for p in paths:
        arr = load_rgb(p)
        y0 = (arr.shape[0]-crop)//2; x0 = (arr.shape[1]-crop)//2
        chunk.append(arr[y0:y0+crop, x0:x0+crop].transpose(2,0,1))
        if len(chunk) == 4:
            batches.append(torch.from_numpy(np.stack(chunk))); chunk = []
    return batches
VAL = val_batches(val_paths)

S_CFG = build_network_config("student").override(N=32, M=20, z_channels=48)
T_CFG = build_network_config("teacher").override(N=32, M=24, z_channels=48,
                                                 res_blocks_per_group=1,
                                                 attention_enabled=False)

def train_student(seed, teacher, weights):
    opt = OptimizerSpec(batch_size=4)
    model = build_model(S_CFG, lam=LAM, seed=seed)
    data = prepare_dataset(SPEC, derive_seed(seed, "data-student"))
    ck2 = run_stage(stage_plan(STAGE_DISTILL), model, data, opt, weights,
                    teacher=teacher, scale=SCALE, seed=seed)
    data2 = prepare_dataset(SPEC, derive_seed(seed, "data-student-ft"))
    run_stage(stage_plan(STAGE_FINETUNE), model, data2, opt, weights,
              scale=SCALE, seed=seed, init_from=ck2)
    return model

t0 = time.perf_counter()
teacher = build_model(T_CFG, lam=LAM, seed=1000)
data = prepare_dataset(SPEC, derive_seed(1000, "data"))
run_stage(stage_plan(STAGE_TEACHER), teacher, data, OptimizerSpec(batch_size=16),
          W, scale=SCALE, seed=1000)
print(json.dumps({"arm": "teacher-b16", "val": validation_loss(teacher, VAL, W),
                  "secs": round(time.perf_counter()-t0)}), flush=True)

for seed in (0, 1):
    t0 = time.perf_counter()
    kd = train_student(seed, teacher, W)
    d = train_student(seed, None, W0)
    vk, vd = validation_loss(kd, VAL, W), validation_loss(d, VAL, W)
    print(json.dumps({"seed": seed, "val_feds": vk, "val_direct": vd,
                      "feds_wins": vk <= vd,
                      "secs": round(time.perf_counter()-t0)}), flush=True)
