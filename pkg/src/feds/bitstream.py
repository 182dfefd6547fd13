"""On-disk codec format: entropy-coded latents wrapped in a small header.

Layout (all integers little-endian):

    magic "FEDS" | version u8 | role u8 (0 teacher / 1 student) |
    lambda_index u8 (255 = custom) | original_width u32 | original_height u32 |
    z_payload_length u32 | z_payload |
    slice payload lengths (u32 each) | slice payloads

The hyper-latent goes first so the decoder can derive every slice's
Gaussian parameters from side information plus already-decoded slices.
Scales are discretized through the 64-entry table before any coding
decision, and means enter the stream only via integer residuals, so
encoder and decoder stay in lockstep despite floating-point parameters.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
import torch

from .model import CodecModel
from .networks import ImageBuffer, image_to_tensor, tensor_to_image
from .rangecoder import (
    CdfTable,
    StreamCorrupt,
    build_cdf,
    quantize_pmf,
    rc_decode,
    rc_encode,
    scale_to_index,
)

MAGIC = b"FEDS"
VERSION = 1
_ROLE_CODES = {"teacher": 0, "student": 1}
_HEADER = struct.Struct("<4sBBBII")
FILE_EXTENSION = ".feds"


@dataclass
class BitstreamContainer:
    role: int
    lambda_index: int
    original_width: int
    original_height: int
    z_payload: bytes
    slice_payloads: list[bytes]

    @property
    def payload_bytes(self) -> int:
        return len(self.z_payload) + sum(len(p) for p in self.slice_payloads)

    @property
    def bpp(self) -> float:
        return 8.0 * self.payload_bytes / (self.original_width * self.original_height)

    def to_bytes(self) -> bytes:
        head = _HEADER.pack(MAGIC, VERSION, self.role, self.lambda_index,
                            self.original_width, self.original_height)
        parts = [head, struct.pack("<I", len(self.z_payload)), self.z_payload]
        for payload in self.slice_payloads:
            parts.append(struct.pack("<I", len(payload)))
        parts.extend(self.slice_payloads)
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, data: bytes, num_slices: int) -> "BitstreamContainer":
        if len(data) < _HEADER.size + 4:
            raise StreamCorrupt("container shorter than its header")
        magic, version, role, lambda_index, width, height = _HEADER.unpack_from(data)
        if magic != MAGIC:
            raise StreamCorrupt(f"bad magic {magic!r}")
        if version != VERSION:
            raise StreamCorrupt(f"unsupported container version {version}")
        pos = _HEADER.size
        (z_len,) = struct.unpack_from("<I", data, pos)
        pos += 4
        if pos + z_len + 4 * num_slices > len(data):
            raise StreamCorrupt("payload lengths exceed file size")
        z_payload = data[pos:pos + z_len]
        pos += z_len
        lengths = struct.unpack_from(f"<{num_slices}I", data, pos)
        pos += 4 * num_slices
        if pos + sum(lengths) != len(data):
            raise StreamCorrupt("payload lengths inconsistent with file size")
        payloads = []
        for length in lengths:
            payloads.append(data[pos:pos + length])
            pos += length
        return cls(role=role, lambda_index=lambda_index, original_width=width,
                   original_height=height, z_payload=z_payload,
                   slice_payloads=payloads)


class EncodeState(NamedTuple):
    y_hat: torch.Tensor
    z_hat: torch.Tensor
    reconstruction: ImageBuffer


def build_prior_tables(prior, max_half_range: int = 1024) -> list[CdfTable]:
    """Per-channel quantized CDF tables for the factorized hyper-latent model."""
    half = 16
    with torch.no_grad():
        while True:
            grid = torch.arange(-half, half + 1, dtype=torch.float32)
            grid = grid.repeat(prior.channels, 1)
            upper = prior.cdf(grid + 0.5)
            lower = prior.cdf(grid - 0.5)
            pmf = (upper - lower).clamp(min=0.0).double().numpy()
            mass = pmf.sum(axis=1)
            if mass.min() >= 1.0 - 1e-5 or half >= max_half_range:
                break
            half *= 2
    tables = []
    for c in range(prior.channels):
        escape = max(0.0, 1.0 - float(mass[c]))
        tables.append(CdfTable(cdf=quantize_pmf(pmf[c], escape), offset=-half))
    return tables


def _flatten_symbols(values: np.ndarray) -> list[int]:
    return [int(v) for v in values.reshape(-1)]


def _encode_z(z_hat: np.ndarray, tables: list[CdfTable]) -> bytes:
    c = z_hat.shape[0]
    per_element = []
    for ch in range(c):
        per_element.extend([tables[ch]] * z_hat[ch].size)
    return rc_encode(_flatten_symbols(z_hat), per_element)


def _decode_z(payload: bytes, tables: list[CdfTable], shape: tuple) -> np.ndarray:
    c, h, w = shape
    per_element = []
    for ch in range(c):
        per_element.extend([tables[ch]] * (h * w))
    symbols = rc_decode(payload, per_element)
    return np.asarray(symbols, dtype=np.int64).reshape(shape)


def _gaussian_tables(sigma: torch.Tensor) -> list[CdfTable]:
    indices = scale_to_index(sigma.detach().numpy().reshape(-1))
    return [build_cdf(int(i)) for i in indices]


def compress_image(x: ImageBuffer, model: CodecModel, weights=None,
                   return_state: bool = False):
    """Encode an image to a container through the real entropy-coding path."""
    if x.padded_height % 64 or x.padded_width % 64:
        raise ValueError("image must be padded to multiples of 64 (use pad_image)")
    if weights is not None and abs(weights.lam - model.lam) > 1e-12:
        raise ValueError("weights.lam does not match the loaded model")
    model.eval()
    dtype = next(model.parameters()).dtype
    with torch.no_grad():
        xt = image_to_tensor(x, dtype)
        y, _ = model.analysis(xt)
        z = model.h_a(y)
        z_hat_np = torch.round(z)[0].numpy().astype(np.int64)
        z_tables = build_prior_tables(model.prior)
        z_payload = _encode_z(z_hat_np, z_tables)
        z_hat = torch.from_numpy(z_hat_np[None]).to(dtype)
        s_mean, s_scale = model.h_s(z_hat)

        bounds = model.charm.layout.boundaries()
        decoded_slices: list[torch.Tensor] = []
        slice_payloads: list[bytes] = []
        for i in range(model.charm.num_slices):
            y_i = y[:, bounds[i]:bounds[i + 1]]
            mu_i, sigma_i = model.charm.predict_slice(s_mean, s_scale, decoded_slices, i)
            residual = torch.round(y_i - mu_i)[0].numpy().astype(np.int64)
            tables = _gaussian_tables(sigma_i[0])
            slice_payloads.append(rc_encode(_flatten_symbols(residual), tables))
            y_hat_i = torch.from_numpy(residual[None]).to(dtype) + mu_i
            decoded_slices.append(y_hat_i)

        y_hat = torch.cat(decoded_slices, dim=1)
        x_hat = model.synthesis(y_hat)
    container = BitstreamContainer(
        role=_ROLE_CODES[model.cfg.role],
        lambda_index=model.lambda_index if 0 <= model.lambda_index <= 254 else 255,
        original_width=x.original_width,
        original_height=x.original_height,
        z_payload=z_payload,
        slice_payloads=slice_payloads,
    )
    if not return_state:
        return container
    recon = tensor_to_image(x_hat, x.original_height, x.original_width)
    return container, EncodeState(y_hat=y_hat, z_hat=z_hat, reconstruction=recon)


def decompress_image(container: BitstreamContainer, model: CodecModel,
                     return_state: bool = False):
    """Decode a container back to an image; the inverse of compress_image."""
    expected_role = _ROLE_CODES[model.cfg.role]
    if container.role != expected_role:
        raise ValueError(f"container role {container.role} does not match "
                         f"model role {model.cfg.role!r}")
    model_index = model.lambda_index if 0 <= model.lambda_index <= 254 else 255
    if container.lambda_index != model_index:
        raise ValueError(f"container lambda index {container.lambda_index} does not "
                         f"match model lambda index {model_index}")
    model.eval()
    dtype = next(model.parameters()).dtype
    pad_h = -container.original_height % 64 + container.original_height
    pad_w = -container.original_width % 64 + container.original_width
    z_shape = (model.cfg.z_channels, pad_h // 64, pad_w // 64)
    with torch.no_grad():
        z_tables = build_prior_tables(model.prior)
        z_hat_np = _decode_z(container.z_payload, z_tables, z_shape)
        z_hat = torch.from_numpy(z_hat_np[None]).to(dtype)
        s_mean, s_scale = model.h_s(z_hat)

        layout = model.charm.layout
        if len(container.slice_payloads) != layout.num_slices:
            raise StreamCorrupt("slice count does not match the model layout")
        h, w = pad_h // 16, pad_w // 16
        decoded_slices: list[torch.Tensor] = []
        for i, payload in enumerate(container.slice_payloads):
            mu_i, sigma_i = model.charm.predict_slice(s_mean, s_scale, decoded_slices, i)
            tables = _gaussian_tables(sigma_i[0])
            symbols = rc_decode(payload, tables)
            residual = np.asarray(symbols, dtype=np.int64).reshape(
                (layout.channels_per_slice[i], h, w))
            decoded_slices.append(torch.from_numpy(residual[None]).to(dtype) + mu_i)

        y_hat = torch.cat(decoded_slices, dim=1)
        x_hat = model.synthesis(y_hat)
    recon = tensor_to_image(x_hat, container.original_height, container.original_width)
    if not return_state:
        return recon
    return recon, EncodeState(y_hat=y_hat, z_hat=z_hat, reconstruction=recon)


def estimated_bpp(model: CodecModel, x: ImageBuffer) -> float:
    """Analytic eval-mode rate estimate in bits per original pixel."""
    model.eval()
    with torch.no_grad():
        out = model(image_to_tensor(x, next(model.parameters()).dtype), mode="eval")
        bits_y = -torch.log2(out["p_y"]).sum()
        bits_z = -torch.log2(out["p_z"]).sum()
    return float(bits_y + bits_z) / (x.original_width * x.original_height)
