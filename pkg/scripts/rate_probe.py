"""Probe rate-estimator fidelity vs lambda and training length."""

import json
import sys
import tempfile
import time
from pathlib import Path

import numpy as np
import torch

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))
sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "tests"))

from conftest import synth_image, toy_student_config, write_corpus

from feds.bitstream import compress_image, estimated_bpp
from feds.distillation import STAGE_TEACHER, FEDSWeights, stage_plan
from feds.networks import image_to_tensor, pad_image
from feds.training import (DatasetSpec, OptimizerSpec, build_model, derive_seed,
                           prepare_dataset, run_stage)

torch.set_num_threads(1)

root = Path(tempfile.mkdtemp())
paths = write_corpus(root / "c", 24, seed=20240811)
spec = DatasetSpec(paths=paths, crop_size=64, rescale_target=None)
rng = np.random.default_rng(555)
test_bufs = [pad_image(synth_image(rng, 256, 256)) for _ in range(10)]

for lam_index, lam, iters in ((3, 0.015, 4000), (4, 0.03, 4000), (4, 0.03, 8000),
                              (5, 0.045, 4000), (6, 0.06, 4000)):
    w = FEDSWeights(lam=lam)
    model = build_model(toy_student_config(), lam=lam, lambda_index=lam_index, seed=77)
    data = prepare_dataset(spec, derive_seed(77, "data"))
    t0 = time.perf_counter()
    run_stage(stage_plan(STAGE_TEACHER).scaled(iters / 180_000), model, data,
              OptimizerSpec(batch_size=4), w, seed=77)
    model.eval()
    ratios = []
    with torch.no_grad():
        out = model(image_to_tensor(test_bufs[0]), mode="eval")
    clamped = int((out["p_y"] <= 1e-9).sum())
    for buf in test_bufs:
        c = compress_image(buf, model)
        est = estimated_bpp(model, buf)
        file_bpp = 8 * len(c.to_bytes()) / (256 * 256)
        tol = 0.02 * est + 0.01
        ratios.append(round(max(abs(c.bpp - est), abs(file_bpp - est)) / tol, 2))
    print(json.dumps({"lam": lam, "iters": iters, "clamped": clamped,
                      "secs": round(time.perf_counter() - t0),
                      "est0": round(estimated_bpp(model, test_bufs[0]), 3),
                      "fails": sum(r > 1 for r in ratios), "ratios": ratios}),
          flush=True)
