"""Dataset ingestion, staged training execution, and checkpointing.

Determinism contract: every random choice flows from the stage seed through
named sub-streams (data sampling, student quantization noise, teacher
quantization noise, weight init), and all of those streams are captured in
checkpoints, so an interrupted run resumed from disk retraces the
uninterrupted run exactly.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .distillation import (
    STAGE_DISTILL,
    STAGE_FINETUNE,
    STAGE_TEACHER,
    DistillationBatchOutputs,
    FEDSWeights,
    StagePlan,
    distortion_term,
    ranking_from_likelihoods,
    student_total_loss,
)
from .model import CodecModel
from .networks import NetworkConfig, load_rgb

logger = logging.getLogger("feds.training")

SEED_ENV_VAR = "FEDS_SEED"


def derive_seed(seed: int, tag: str) -> int:
    digest = hashlib.sha256(f"{seed}:{tag}".encode()).digest()
    return int.from_bytes(digest[:8], "little") & ((1 << 63) - 1)


def resolve_seed(config_seed: int | None = None, default: int = 0) -> int:
    env = os.environ.get(SEED_ENV_VAR)
    if env is not None:
        return int(env)
    if config_seed is not None:
        return int(config_seed)
    return default


# ---------------------------------------------------------------------------
# Dataset

AUGMENTATIONS = ("rotation", "scaling", "horizontal_flip")


@dataclass
class DatasetSpec:
    paths: list
    crop_size: int = 384
    augmentations: frozenset = frozenset(AUGMENTATIONS)
    rescale_target: int | None = 2000

    def __post_init__(self):
        if self.crop_size % 64:
            raise ValueError("crop_size must be a multiple of 64")
        unknown = set(self.augmentations) - set(AUGMENTATIONS)
        if unknown:
            raise ValueError(f"unknown augmentations: {sorted(unknown)}")


def dataset_spec_from_dir(directory, **kwargs) -> DatasetSpec:
    from .metrics import IMAGE_SUFFIXES

    paths = sorted(p for p in Path(directory).iterdir()
                   if p.suffix.lower() in IMAGE_SUFFIXES)
    return DatasetSpec(paths=paths, **kwargs)


class PatchStream:
    """Deterministic augmented-crop sampler over a fixed image list."""

    _MAX_DOWNSCALE = 4

    def __init__(self, spec: DatasetSpec, seed: int):
        self.spec = spec
        self.images: list[np.ndarray] = []
        for path in spec.paths:
            try:
                arr = load_rgb(path)
            except Exception as exc:  # unreadable or undecodable file
                logger.warning("skipping unreadable image %s: %s", path, exc)
                continue
            if spec.rescale_target is not None:
                arr = self._rescale(arr, spec.rescale_target)
            self.images.append(np.round(arr * 255.0).astype(np.uint8))
        if not self.images:
            raise ValueError("no usable training images")
        self.rng = np.random.default_rng(seed)

    @staticmethod
    def _rescale(arr: np.ndarray, target: int) -> np.ndarray:
        from PIL import Image

        img = Image.fromarray(np.round(arr * 255.0).astype(np.uint8))
        img = img.resize((target, target), Image.BICUBIC)
        return np.asarray(img, dtype=np.float32) / 255.0

    def state(self) -> dict:
        return {"rng": self.rng.bit_generator.state}

    def set_state(self, state: dict) -> None:
        self.rng.bit_generator.state = state["rng"]

    def _sample_patch(self) -> np.ndarray:
        spec = self.spec
        crop = spec.crop_size
        img = self.images[int(self.rng.integers(len(self.images)))]
        if "scaling" in spec.augmentations:
            factors = [f for f in range(1, self._MAX_DOWNSCALE + 1)
                       if min(img.shape[0], img.shape[1]) // f >= crop]
            if not factors:
                factors = [1]
            f = factors[int(self.rng.integers(len(factors)))]
            if f > 1:
                img = img[::f, ::f]
        if "rotation" in spec.augmentations:
            k = int(self.rng.integers(4))
            if k:
                img = np.rot90(img, k)
        if "horizontal_flip" in spec.augmentations and self.rng.integers(2):
            img = img[:, ::-1]
        h, w = img.shape[:2]
        if h < crop or w < crop:
            img = np.pad(img, ((0, max(0, crop - h)), (0, max(0, crop - w)), (0, 0)),
                         mode="edge")
            h, w = img.shape[:2]
        y0 = int(self.rng.integers(h - crop + 1))
        x0 = int(self.rng.integers(w - crop + 1))
        return img[y0:y0 + crop, x0:x0 + crop]

    def next_batch(self, batch_size: int) -> torch.Tensor:
        patches = [self._sample_patch() for _ in range(batch_size)]
        arr = np.stack(patches).astype(np.float32) / 255.0
        return torch.from_numpy(arr.transpose(0, 3, 1, 2))


def prepare_dataset(spec: DatasetSpec, seed: int) -> PatchStream:
    return PatchStream(spec, seed)


# ---------------------------------------------------------------------------
# Checkpoint container

CKPT_MAGIC = b"FEDSCKPT"
CKPT_VERSION = 1

_DTYPE_CODES = {np.dtype("float32"): 0, np.dtype("float64"): 1,
                np.dtype("int64"): 2, np.dtype("uint8"): 3}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}


@dataclass
class OptimizerSpec:
    kind: str = "adam"
    batch_size: int = 8
    base_lr: float = 1e-4
    clip_norm: float | None = None

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.kind != "adam":
            raise ValueError("only the adaptive-moment optimizer is supported")


@dataclass
class Checkpoint:
    config: NetworkConfig
    stage: str
    iteration: int
    lam: float
    lambda_index: int
    model_state: dict
    feds: dict = field(default_factory=dict)
    optimizer_state: dict | None = None
    noise_rng: bytes | None = None
    teacher_noise_rng: bytes | None = None
    data_rng: dict | None = None

    def build_model(self) -> CodecModel:
        model = CodecModel(self.config, lam=self.lam, lambda_index=self.lambda_index)
        load_weights(model, self.model_state)
        return model


def load_weights(model: CodecModel, state: dict) -> None:
    try:
        model.load_state_dict({k: torch.as_tensor(v) for k, v in state.items()})
    except RuntimeError as exc:
        raise ValueError(f"checkpoint does not fit this model configuration: {exc}")


def snapshot_model_state(model: CodecModel) -> dict:
    return {k: v.detach().clone() for k, v in model.state_dict().items()}


def _write_array(parts: list, name: str, arr: np.ndarray) -> None:
    data = np.ascontiguousarray(arr)
    if data.dtype not in _DTYPE_CODES:
        raise ValueError(f"unsupported array dtype {data.dtype} for {name!r}")
    encoded = name.encode("utf-8")
    parts.append(struct.pack("<H", len(encoded)))
    parts.append(encoded)
    parts.append(struct.pack("<BB", _DTYPE_CODES[data.dtype], data.ndim))
    parts.append(struct.pack(f"<{data.ndim}I", *data.shape))
    if data.dtype.byteorder == ">":
        data = data.byteswap().newbyteorder()
    parts.append(data.tobytes())


def _collect_arrays(ckpt: Checkpoint) -> dict[str, np.ndarray]:
    arrays: dict[str, np.ndarray] = {}
    for name, tensor in ckpt.model_state.items():
        arrays[f"model.{name}"] = tensor.detach().cpu().numpy()
    if ckpt.optimizer_state is not None:
        for pid, entry in ckpt.optimizer_state.get("state", {}).items():
            for key, tensor in entry.items():
                arrays[f"optim.state.{pid}.{key}"] = tensor.detach().cpu().numpy()
    if ckpt.noise_rng is not None:
        arrays["rng.noise"] = np.frombuffer(ckpt.noise_rng, dtype=np.uint8).copy()
    if ckpt.teacher_noise_rng is not None:
        arrays["rng.teacher_noise"] = np.frombuffer(ckpt.teacher_noise_rng,
                                                    dtype=np.uint8).copy()
    return arrays


def checkpoint_save(ckpt: Checkpoint, path) -> None:
    """Write a checkpoint; the same checkpoint always produces identical bytes."""
    cfg = ckpt.config
    lines = {
        "network.role": cfg.role,
        "network.N": cfg.N,
        "network.M": cfg.M,
        "network.res_blocks_per_group": cfg.res_blocks_per_group,
        "network.num_res_groups": cfg.num_res_groups,
        "network.attention_enabled": int(cfg.attention_enabled),
        "network.window_size": cfg.window_size,
        "network.num_heads": cfg.num_heads,
        "network.num_slices": cfg.num_slices,
        "network.z_channels": cfg.z_channels,
        "train.stage": ckpt.stage,
        "train.iteration": ckpt.iteration,
        "train.lambda": repr(ckpt.lam),
        "train.lambda_index": ckpt.lambda_index,
    }
    for key, value in sorted(ckpt.feds.items()):
        lines[f"feds.{key}"] = value
    if ckpt.optimizer_state is not None:
        groups = json.dumps(ckpt.optimizer_state.get("param_groups", []),
                            sort_keys=True)
        lines["optim.param_groups"] = groups
    if ckpt.data_rng is not None:
        lines["rng.data"] = json.dumps(ckpt.data_rng, sort_keys=True)
    config_text = "".join(f"{k}={lines[k]}\n" for k in sorted(lines))
    config_bytes = config_text.encode("utf-8")

    arrays = _collect_arrays(ckpt)
    parts: list[bytes] = [CKPT_MAGIC, struct.pack("<B", CKPT_VERSION),
                          struct.pack("<I", len(config_bytes)), config_bytes,
                          struct.pack("<I", len(arrays))]
    for name in sorted(arrays):
        _write_array(parts, name, arrays[name])
    Path(path).write_bytes(b"".join(parts))


def checkpoint_load(path) -> Checkpoint:
    data = Path(path).read_bytes()
    if data[:8] != CKPT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    version = data[8]
    if version != CKPT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    (config_len,) = struct.unpack_from("<I", data, 9)
    pos = 13
    config_text = data[pos:pos + config_len].decode("utf-8")
    pos += config_len
    kv = {}
    for line in config_text.splitlines():
        if line:
            key, _, value = line.partition("=")
            kv[key] = value
    (num_arrays,) = struct.unpack_from("<I", data, pos)
    pos += 4
    arrays: dict[str, np.ndarray] = {}
    for _ in range(num_arrays):
        (name_len,) = struct.unpack_from("<H", data, pos)
        pos += 2
        name = data[pos:pos + name_len].decode("utf-8")
        pos += name_len
        code, ndim = struct.unpack_from("<BB", data, pos)
        pos += 2
        shape = struct.unpack_from(f"<{ndim}I", data, pos)
        pos += 4 * ndim
        dtype = _CODE_DTYPES[code]
        count = int(np.prod(shape)) if ndim else 1
        nbytes = count * dtype.itemsize
        arrays[name] = np.frombuffer(data, dtype=dtype, count=count,
                                     offset=pos).reshape(shape).copy()
        pos += nbytes
    if pos != len(data):
        raise ValueError(f"{path}: trailing bytes in checkpoint")

    config = NetworkConfig(
        role=kv["network.role"],
        N=int(kv["network.N"]),
        M=int(kv["network.M"]),
        res_blocks_per_group=int(kv["network.res_blocks_per_group"]),
        num_res_groups=int(kv["network.num_res_groups"]),
        attention_enabled=bool(int(kv["network.attention_enabled"])),
        window_size=int(kv["network.window_size"]),
        num_heads=int(kv["network.num_heads"]),
        num_slices=int(kv["network.num_slices"]),
        z_channels=int(kv["network.z_channels"]),
    )
    model_state = {}
    optim_state: dict = {"state": {}, "param_groups": []}
    noise_rng = None
    teacher_noise_rng = None
    for name, arr in arrays.items():
        if name.startswith("model."):
            model_state[name[len("model."):]] = torch.from_numpy(arr)
        elif name.startswith("optim.state."):
            _, _, pid, key = name.split(".", 3)
            optim_state["state"].setdefault(int(pid), {})[key] = torch.from_numpy(arr)
        elif name == "rng.noise":
            noise_rng = arr.tobytes()
        elif name == "rng.teacher_noise":
            teacher_noise_rng = arr.tobytes()
    optimizer_state = None
    if "optim.param_groups" in kv:
        optim_state["param_groups"] = json.loads(kv["optim.param_groups"])
        optimizer_state = optim_state
    data_rng = json.loads(kv["rng.data"]) if "rng.data" in kv else None
    feds = {k[len("feds."):]: v for k, v in kv.items() if k.startswith("feds.")}
    return Checkpoint(
        config=config,
        stage=kv["train.stage"],
        iteration=int(kv["train.iteration"]),
        lam=float(kv["train.lambda"]),
        lambda_index=int(kv["train.lambda_index"]),
        model_state=model_state,
        feds=feds,
        optimizer_state=optimizer_state,
        noise_rng=noise_rng,
        teacher_noise_rng=teacher_noise_rng,
        data_rng=data_rng,
    )


# ---------------------------------------------------------------------------
# Stage execution

class TrainingDiverged(RuntimeError):
    def __init__(self, iteration: int, breakdown: dict):
        super().__init__(f"non-finite loss at iteration {iteration}: {breakdown}")
        self.iteration = iteration
        self.breakdown = breakdown


def build_model(cfg: NetworkConfig, lam: float, lambda_index: int = -1,
                seed: int = 0) -> CodecModel:
    """Construct a codec with deterministically seeded weight init."""
    torch.manual_seed(derive_seed(seed, f"init:{cfg.role}"))
    return CodecModel(cfg, lam=lam, lambda_index=lambda_index)


def _generator_from_state(state: bytes | None, seed: int) -> torch.Generator:
    gen = torch.Generator()
    if state is None:
        gen.manual_seed(seed)
    else:
        gen.set_state(torch.frombuffer(bytearray(state), dtype=torch.uint8).clone())
    return gen


def _set_lr(optimizer, lr: float) -> None:
    for group in optimizer.param_groups:
        group["lr"] = lr


def run_stage(plan: StagePlan, model: CodecModel, data: PatchStream,
              opt: OptimizerSpec, w: FEDSWeights, *, teacher: CodecModel | None = None,
              scale: float = 1.0, seed: int = 0, init_from: Checkpoint | None = None,
              resume: Checkpoint | None = None, log_path=None,
              checkpoint_every: int | None = None, checkpoint_path=None) -> Checkpoint:
    """Run one training stage and return the final checkpoint.

    ``init_from`` seeds the model weights at iteration 0 (stage hand-off);
    ``resume`` continues an interrupted run of the same stage mid-way. The
    distillation stage needs a frozen teacher unless all three KD weights
    are zero, in which case it degenerates to direct student training.
    """
    plan = plan.scaled(scale)
    kd_enabled = "kd" in plan.loss_terms
    if plan.stage == STAGE_DISTILL and teacher is None and (
            w.alpha or w.beta or w.gamma):
        raise ValueError("the distillation stage requires a frozen teacher model")
    if plan.stage == STAGE_FINETUNE:
        if init_from is None and resume is None:
            raise ValueError("fine-tuning requires a distillation-stage checkpoint")
        if init_from is not None and init_from.stage != STAGE_DISTILL:
            raise ValueError(f"fine-tuning must start from a distillation checkpoint, "
                             f"got stage {init_from.stage!r}")
    if resume is not None and resume.stage != plan.stage:
        raise ValueError(f"cannot resume stage {plan.stage!r} from a "
                         f"{resume.stage!r} checkpoint")

    if init_from is not None and resume is None:
        load_weights(model, init_from.model_state)

    if teacher is not None:
        teacher.eval()
        for p in teacher.parameters():
            p.requires_grad_(False)

    optimizer = torch.optim.Adam(model.parameters(), lr=plan.lr_at(0))
    start = 0
    if resume is not None:
        load_weights(model, resume.model_state)
        if resume.optimizer_state is not None:
            optimizer.load_state_dict(resume.optimizer_state)
        if resume.data_rng is not None:
            data.set_state(resume.data_rng)
        start = resume.iteration
    noise_gen = _generator_from_state(resume.noise_rng if resume else None,
                                      derive_seed(seed, "noise"))
    teacher_gen = _generator_from_state(resume.teacher_noise_rng if resume else None,
                                        derive_seed(seed, "teacher-noise"))

    log_fh = open(log_path, "a") if log_path else None

    def make_checkpoint(iteration: int) -> Checkpoint:
        return Checkpoint(
            config=model.cfg, stage=plan.stage, iteration=iteration,
            lam=model.lam, lambda_index=model.lambda_index,
            model_state=snapshot_model_state(model),
            feds={"alpha": w.alpha, "beta": w.beta, "gamma": w.gamma,
                  "distortion": w.distortion},
            optimizer_state=optimizer.state_dict(),
            noise_rng=noise_gen.get_state().numpy().tobytes(),
            teacher_noise_rng=teacher_gen.get_state().numpy().tobytes(),
            data_rng=data.state(),
        )

    try:
        model.train()
        for it in range(start, plan.total_iterations):
            _set_lr(optimizer, plan.lr_at(it))
            batch = data.next_batch(opt.batch_size)
            num_pixels = batch.shape[-2] * batch.shape[-1]
            out = model(batch, mode="train", generator=noise_gen)
            r_y, r_z = CodecModel.bpp_terms(out, num_pixels)
            if kd_enabled and teacher is not None:
                with torch.no_grad():
                    t_out = teacher(batch, mode="train", generator=teacher_gen)
                ranking = ranking_from_likelihoods(t_out["p_y"])
                outputs = DistillationBatchOutputs(
                    teacher_x_hat=t_out["x_hat"], teacher_y_hat=t_out["y_hat"],
                    teacher_taps=t_out["taps"], teacher_ranking=ranking,
                    student_x_hat=out["x_hat"], student_y_hat=out["y_hat"],
                    student_taps=out["taps"], student_r_y=r_y, student_r_z=r_z)
                loss, breakdown = student_total_loss(outputs, batch, w)
            else:
                d = distortion_term(batch, out["x_hat"], w.distortion)
                loss = d + w.lam * (r_y + r_z)
                breakdown = {"D": float(d.detach()), "R_y": float(r_y.detach()),
                             "R_z": float(r_z.detach()), "L_out": 0.0,
                             "L_feat": 0.0, "L_lat": 0.0,
                             "total": float(loss.detach())}
            if not math.isfinite(breakdown["total"]):
                raise TrainingDiverged(it, breakdown)
            optimizer.zero_grad()
            loss.backward()
            if opt.clip_norm is not None:
                torch.nn.utils.clip_grad_norm_(model.parameters(), opt.clip_norm)
            optimizer.step()
            if log_fh is not None:
                record = {"iter": it, "stage": plan.stage, **breakdown,
                          "lr": plan.lr_at(it)}
                log_fh.write(json.dumps(record) + "\n")
            if (checkpoint_every and checkpoint_path
                    and (it + 1) % checkpoint_every == 0):
                checkpoint_save(make_checkpoint(it + 1), checkpoint_path)
    finally:
        if log_fh is not None:
            log_fh.close()
    model.eval()
    final = make_checkpoint(plan.total_iterations)
    if checkpoint_path:
        checkpoint_save(final, checkpoint_path)
    return final


def validation_loss(model: CodecModel, batches: list[torch.Tensor],
                    w: FEDSWeights) -> float:
    """Mean eval-mode rate-distortion objective over fixed batches."""
    model.eval()
    total = 0.0
    with torch.no_grad():
        for batch in batches:
            out = model(batch, mode="eval")
            r_y, r_z = CodecModel.bpp_terms(out, batch.shape[-2] * batch.shape[-1])
            d = distortion_term(batch, out["x_hat"].clamp(0.0, 1.0), w.distortion)
            total += float(d + w.lam * (r_y + r_z))
    return total / len(batches)


# ---------------------------------------------------------------------------
# Flat key=value configuration files

def parse_config_file(path) -> dict[str, str]:
    values: dict[str, str] = {}
    for raw in Path(path).read_text(encoding="utf-8").splitlines():
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValueError(f"malformed config line: {raw!r}")
        key, _, value = line.partition("=")
        values[key.strip()] = value.strip()
    return values


def network_config_from_dict(values: dict[str, str], role: str) -> NetworkConfig:
    from .networks import build_network_config

    cfg = build_network_config(role)
    overrides = {}
    casts = {"N": int, "M": int, "res_blocks_per_group": int, "num_res_groups": int,
             "attention_enabled": lambda v: v.lower() in ("1", "true", "yes"),
             "window_size": int, "num_heads": int, "num_slices": int,
             "z_channels": int}
    for name, cast in casts.items():
        key = f"network.{name}"
        if key in values:
            overrides[name] = cast(values[key])
    return cfg.override(**overrides) if overrides else cfg
