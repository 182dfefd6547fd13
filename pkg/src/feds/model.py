"""Full codec assembly: transforms, hyper path, context model, and prior."""

from __future__ import annotations

import torch
import torch.nn as nn

from .entropy import (
    ChannelContextModel,
    FactorizedPrior,
    GaussianParams,
    gaussian_likelihood,
    quantize,
    rate_bits,
)
from .networks import (
    AnalysisTransform,
    HyperDecoder,
    HyperEncoder,
    ImageBuffer,
    NetworkConfig,
    SynthesisTransform,
    image_to_tensor,
    tensor_to_image,
)


class CodecModel(nn.Module):
    """One trainable codec (teacher or student) with its entropy machinery."""

    def __init__(self, cfg: NetworkConfig, lam: float = 0.015, lambda_index: int = -1):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        self.lam = float(lam)
        self.lambda_index = int(lambda_index)
        self.g_a = AnalysisTransform(cfg)
        self.g_s = SynthesisTransform(cfg)
        self.h_a = HyperEncoder(cfg)
        self.h_s = HyperDecoder(cfg)
        self.charm = ChannelContextModel(cfg.M, cfg.num_slices)
        self.prior = FactorizedPrior(cfg.z_channels)

    def analysis(self, x: torch.Tensor):
        """x (B,3,H,W) -> latent y (B,M,H/16,W/16) plus stage taps."""
        h, w = x.shape[-2:]
        if h % 64 or w % 64:
            raise ValueError("input must be padded to multiples of 64")
        return self.g_a(x)

    def synthesis(self, y_hat: torch.Tensor) -> torch.Tensor:
        if y_hat.shape[1] != self.cfg.M:
            raise ValueError(f"latent has {y_hat.shape[1]} channels, "
                             f"model expects {self.cfg.M}")
        return self.g_s(y_hat)

    def hyper_side(self, y: torch.Tensor, mode: str,
                   generator: torch.Generator | None = None):
        z = self.h_a(y)
        z_hat = quantize(z, None, mode=mode, generator=generator)
        s_mean, s_scale = self.h_s(z_hat)
        return z, z_hat, s_mean, s_scale

    def forward(self, x: torch.Tensor, mode: str = "train",
                generator: torch.Generator | None = None) -> dict:
        """Run the full rate-distortion pipeline.

        mode selects the quantizer: "train" adds uniform noise, "eval" rounds
        around the predicted means, "none" disables quantization entirely
        (for gradient checks).
        """
        y, taps = self.analysis(x)
        z, z_hat, s_mean, s_scale = self.hyper_side(y, mode, generator)
        y_hat, params = self.charm(y, s_mean, s_scale, mode=mode, generator=generator)
        p_y = gaussian_likelihood(y_hat, params=params)
        p_z = self.prior.likelihood(z_hat)
        x_hat = self.synthesis(y_hat)
        return {
            "x_hat": x_hat,
            "y": y,
            "y_hat": y_hat,
            "z": z,
            "z_hat": z_hat,
            "params": params,
            "p_y": p_y,
            "p_z": p_z,
            "taps": taps,
            "s_mean": s_mean,
            "s_scale": s_scale,
        }

    @staticmethod
    def bpp_terms(out: dict, num_pixels: int) -> tuple[torch.Tensor, torch.Tensor]:
        """Estimated rates of the latent and hyper-latent in bits per pixel."""
        batch = out["p_y"].shape[0]
        r_y = rate_bits(out["p_y"]).sum() / (batch * num_pixels)
        r_z = rate_bits(out["p_z"]).sum() / (batch * num_pixels)
        return r_y, r_z


def analysis_transform(x: ImageBuffer, model: CodecModel):
    """Public transform on an ImageBuffer; returns (y, taps) without batch dims."""
    with torch.no_grad():
        y, taps = model.analysis(image_to_tensor(x, next(model.parameters()).dtype))
    return y[0], [t[0] for t in taps]


def synthesis_transform(y_hat: torch.Tensor, model: CodecModel,
                        original_height: int | None = None,
                        original_width: int | None = None) -> ImageBuffer:
    """Decode a latent into a clamped image, cropped to the original dims."""
    if y_hat.dim() == 3:
        y_hat = y_hat[None]
    with torch.no_grad():
        x_hat = model.synthesis(y_hat)
    h = 16 * y_hat.shape[-2] if original_height is None else original_height
    w = 16 * y_hat.shape[-1] if original_width is None else original_width
    return tensor_to_image(x_hat, h, w)


def hyper_transforms(y: torch.Tensor, model: CodecModel):
    """y -> (z, (S_mean, S_scale)) through round-quantized z."""
    if y.dim() == 3:
        y = y[None]
    with torch.no_grad():
        z, z_hat, s_mean, s_scale = model.hyper_side(y, mode="eval")
    return z[0], (s_mean[0], s_scale[0])
