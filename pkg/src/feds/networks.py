"""Analysis/synthesis transforms for the teacher and student codecs.

The teacher is a four-stage strided CNN with residual groups and window
attention after the first two down-sampling stages; the student keeps the
same skeleton with the attention removed, a single residual block per
group, and a narrower latent. Both expose taps at the first three stage
outputs (N channels each) so their intermediate features can be compared
directly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

TEACHER_LATENT_CHANNELS = 400
STUDENT_LATENT_CHANNELS = 160
TRANSFORM_CHANNELS = 128
HYPER_CHANNELS = 192


@dataclass
class NetworkConfig:
    """Structural hyperparameters of one codec (teacher or student)."""

    role: str
    N: int = TRANSFORM_CHANNELS
    M: int = TEACHER_LATENT_CHANNELS
    res_blocks_per_group: int = 6
    num_res_groups: int = 3
    attention_enabled: bool = True
    window_size: int = 8
    num_heads: int = 4
    num_slices: int = 8
    z_channels: int = HYPER_CHANNELS

    def validate(self) -> None:
        if self.role not in ("teacher", "student"):
            raise ValueError(f"unknown role {self.role!r}")
        for name in ("N", "M", "res_blocks_per_group", "num_res_groups",
                     "window_size", "num_heads", "num_slices", "z_channels"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be a positive integer")
        if self.N % self.num_heads != 0:
            raise ValueError("N must be divisible by num_heads")
        if self.num_slices > self.M:
            raise ValueError("num_slices exceeds latent channel count")

    def override(self, **kwargs) -> "NetworkConfig":
        cfg = replace(self, **kwargs)
        cfg.validate()
        return cfg


def build_network_config(role: str) -> NetworkConfig:
    """Return the preset configuration for ``role``.

    Every field can be overridden afterwards (via :meth:`NetworkConfig.override`)
    for toy-scale runs; the presets match the full-size codecs.
    """
    if role == "teacher":
        return NetworkConfig(role="teacher", N=128, M=400, res_blocks_per_group=6,
                             num_res_groups=3, attention_enabled=True, num_slices=8)
    if role == "student":
        return NetworkConfig(role="student", N=128, M=160, res_blocks_per_group=1,
                             num_res_groups=3, attention_enabled=False, num_slices=5)
    raise ValueError(f"unknown role {role!r}")


# ---------------------------------------------------------------------------
# Image plumbing

PAD_MULTIPLE = 64  # six stride-2 stages in total (4 main + 2 hyper)


@dataclass
class ImageBuffer:
    """An RGB image in [0, 1] together with its pre-padding dimensions."""

    pixels: np.ndarray  # H x W x 3 float
    original_height: int
    original_width: int

    @property
    def padded_height(self) -> int:
        return self.pixels.shape[0]

    @property
    def padded_width(self) -> int:
        return self.pixels.shape[1]


def pad_image(raw: np.ndarray) -> ImageBuffer:
    """Replicate-pad an H x W x 3 array on the bottom/right to multiples of 64."""
    raw = np.asarray(raw, dtype=np.float32)
    if raw.ndim != 3 or raw.shape[2] != 3:
        raise ValueError(f"expected H x W x 3 image, got shape {raw.shape}")
    h, w = raw.shape[:2]
    if h < 1 or w < 1:
        raise ValueError("empty image")
    if raw.min() < 0.0 or raw.max() > 1.0:
        raise ValueError("pixel values must lie in [0, 1]")
    ph = -h % PAD_MULTIPLE
    pw = -w % PAD_MULTIPLE
    if ph or pw:
        raw = np.pad(raw, ((0, ph), (0, pw), (0, 0)), mode="edge")
    return ImageBuffer(pixels=raw, original_height=h, original_width=w)


def load_rgb(path) -> np.ndarray:
    """Read an image file as an H x W x 3 float array in [0, 1]."""
    from PIL import Image

    with Image.open(path) as img:
        arr = np.asarray(img.convert("RGB"), dtype=np.float32)
    return arr / 255.0


def save_rgb(path, buf: ImageBuffer) -> None:
    from PIL import Image

    arr = np.round(np.clip(buf.pixels, 0.0, 1.0) * 255.0).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path)


def image_to_tensor(buf: ImageBuffer, dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """ImageBuffer -> 1 x 3 x H x W tensor."""
    return torch.from_numpy(np.ascontiguousarray(buf.pixels.transpose(2, 0, 1)))[None].to(dtype)


def tensor_to_image(x: torch.Tensor, original_height: int, original_width: int) -> ImageBuffer:
    """1 x 3 x H x W tensor -> clamped ImageBuffer cropped to the original dims."""
    arr = x.detach().clamp(0.0, 1.0)[0].cpu().numpy().transpose(1, 2, 0)
    return ImageBuffer(pixels=arr[:original_height, :original_width].copy(),
                       original_height=original_height, original_width=original_width)


# ---------------------------------------------------------------------------
# Building blocks

def conv_down(in_ch: int, out_ch: int) -> nn.Conv2d:
    return nn.Conv2d(in_ch, out_ch, kernel_size=3, stride=2, padding=1)


def deconv_up(in_ch: int, out_ch: int) -> nn.ConvTranspose2d:
    return nn.ConvTranspose2d(in_ch, out_ch, kernel_size=3, stride=2,
                              padding=1, output_padding=1)


class ResidualBlock(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.conv1 = nn.Conv2d(channels, channels, 3, padding=1)
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1)
        self.act = nn.GELU()

    def forward(self, x):
        return x + self.conv2(self.act(self.conv1(x)))


class ResidualGroup(nn.Module):
    """``depth`` residual blocks in sequence; shape preserving."""

    def __init__(self, channels: int, depth: int):
        super().__init__()
        if depth < 1:
            raise ValueError("depth must be >= 1")
        self.blocks = nn.Sequential(*[ResidualBlock(channels) for _ in range(depth)])

    def forward(self, x):
        return self.blocks(x)


def residual_group(feature: torch.Tensor, group: ResidualGroup) -> torch.Tensor:
    return group(feature)


# ---------------------------------------------------------------------------
# Window attention (scaled cosine similarity, learnable temperature)

TAU_MIN = 0.01
_NORM_EPS = 1e-12


def window_partition(x: torch.Tensor, window: int) -> torch.Tensor:
    """(B, H, W, C) -> (B * nWindows, window*window, C). H, W divisible by window."""
    b, h, w, c = x.shape
    x = x.view(b, h // window, window, w // window, window, c)
    return x.permute(0, 1, 3, 2, 4, 5).reshape(-1, window * window, c)


def window_reverse(windows: torch.Tensor, window: int, h: int, w: int) -> torch.Tensor:
    """Inverse of :func:`window_partition`."""
    b = windows.shape[0] // ((h // window) * (w // window))
    x = windows.view(b, h // window, w // window, window, window, -1)
    return x.permute(0, 1, 3, 2, 4, 5).reshape(b, h, w, -1)


def cosine_attention(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor,
                     tau: torch.Tensor, bias: torch.Tensor) -> torch.Tensor:
    """Softmax(cos(q, k) / tau + bias) @ v over the last two dims.

    q, k, v: (..., n, d). tau is clamped to >= 0.01 so logits stay bounded;
    row norms are epsilon-guarded, which makes the cosine well defined for
    zero rows too.
    """
    qn = q / (q.norm(dim=-1, keepdim=True) + _NORM_EPS)
    kn = k / (k.norm(dim=-1, keepdim=True) + _NORM_EPS)
    logits = qn @ kn.transpose(-2, -1) / tau.clamp(min=TAU_MIN) + bias
    return torch.softmax(logits, dim=-1) @ v


def window_attention(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor,
                     tau: float | torch.Tensor, bias: torch.Tensor | None = None) -> torch.Tensor:
    """Single-head scaled-cosine attention on (n, d) matrices."""
    if bias is None:
        bias = torch.zeros(q.shape[-2], k.shape[-2], dtype=q.dtype)
    tau_t = torch.as_tensor(tau, dtype=q.dtype)
    return cosine_attention(q, k, v, tau_t, bias)


def relative_position_index(window: int) -> torch.Tensor:
    """(window^2, window^2) index map into a (2*window-1)^2 bias table."""
    coords = torch.stack(torch.meshgrid(torch.arange(window), torch.arange(window),
                                        indexing="ij"))  # 2, w, w
    flat = coords.flatten(1)  # 2, w*w
    rel = flat[:, :, None] - flat[:, None, :]  # 2, n, n
    rel = rel.permute(1, 2, 0) + (window - 1)
    return rel[..., 0] * (2 * window - 1) + rel[..., 1]


class WindowAttention(nn.Module):
    """Multi-head scaled-cosine attention within one window."""

    def __init__(self, dim: int, window: int, num_heads: int):
        super().__init__()
        if dim % num_heads:
            raise ValueError("dim must be divisible by num_heads")
        self.dim = dim
        self.window = window
        self.num_heads = num_heads
        self.qkv = nn.Linear(dim, dim * 3)
        self.proj = nn.Linear(dim, dim)
        self.tau = nn.Parameter(torch.ones(num_heads, 1, 1))
        self.bias_table = nn.Parameter(torch.zeros((2 * window - 1) ** 2, num_heads))
        self.register_buffer("bias_index", relative_position_index(window),
                             persistent=False)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        # x: (num_windows, n, dim) with n = window^2
        nw, n, c = x.shape
        qkv = self.qkv(x).reshape(nw, n, 3, self.num_heads, c // self.num_heads)
        q, k, v = qkv.permute(2, 0, 3, 1, 4).unbind(0)  # each (nw, heads, n, d)
        bias = self.bias_table[self.bias_index.reshape(-1)]
        bias = bias.reshape(n, n, self.num_heads).permute(2, 0, 1)
        out = cosine_attention(q, k, v, self.tau, bias)
        out = out.transpose(1, 2).reshape(nw, n, c)
        return self.proj(out)


class SwinV2Block(nn.Module):
    """One post-norm window-attention block with optional cyclic shift."""

    def __init__(self, dim: int, window: int, num_heads: int, shifted: bool):
        super().__init__()
        self.window = window
        self.shifted = shifted
        self.attn = WindowAttention(dim, window, num_heads)
        self.norm1 = nn.LayerNorm(dim)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(nn.Linear(dim, 2 * dim), nn.GELU(),
                                 nn.Linear(2 * dim, dim))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        # x: (B, C, H, W)
        b, c, h, w = x.shape
        win = self.window
        tokens = x.permute(0, 2, 3, 1)  # B, H, W, C
        pad_h = -h % win
        pad_w = -w % win
        if pad_h or pad_w:
            tokens = F.pad(tokens.permute(0, 3, 1, 2), (0, pad_w, 0, pad_h),
                           mode="replicate").permute(0, 2, 3, 1)
        hp, wp = tokens.shape[1:3]
        shift = win // 2 if self.shifted else 0
        if shift:
            tokens = torch.roll(tokens, shifts=(-shift, -shift), dims=(1, 2))
        windows = window_partition(tokens, win)
        attended = self.attn(windows)
        attended = window_reverse(attended, win, hp, wp)
        if shift:
            attended = torch.roll(attended, shifts=(shift, shift), dims=(1, 2))
        tokens2 = tokens if not shift else torch.roll(tokens, shifts=(shift, shift), dims=(1, 2))
        tokens2 = tokens2 + self.norm1(attended)
        tokens2 = tokens2 + self.norm2(self.mlp(tokens2))
        out = tokens2[:, :h, :w, :].permute(0, 3, 1, 2)
        return out.contiguous()


class AttentionModule(nn.Module):
    """A pair of window-attention blocks: plain partition then shifted."""

    def __init__(self, dim: int, window: int, num_heads: int):
        super().__init__()
        self.block1 = SwinV2Block(dim, window, num_heads, shifted=False)
        self.block2 = SwinV2Block(dim, window, num_heads, shifted=True)

    def forward(self, x):
        return self.block2(self.block1(x))


def swin_v2_block(feature: torch.Tensor, block: SwinV2Block) -> torch.Tensor:
    if feature.dim() == 3:
        return block(feature[None])[0]
    return block(feature)


# ---------------------------------------------------------------------------
# Transforms

class AnalysisTransform(nn.Module):
    """Four stride-2 stages mapping 3 x H x W images to M x H/16 x W/16 latents.

    Returns the latent plus taps at the outputs of stages 1-3 (N channels
    each), which is where teacher and student features are shape-compatible.
    """

    def __init__(self, cfg: NetworkConfig):
        super().__init__()
        n, m = cfg.N, cfg.M
        self.down1 = conv_down(3, n)
        self.down2 = conv_down(n, n)
        self.down3 = conv_down(n, n)
        self.down4 = conv_down(n, m)
        self.act = nn.GELU()
        self.group1 = ResidualGroup(n, cfg.res_blocks_per_group)
        self.group2 = ResidualGroup(n, cfg.res_blocks_per_group)
        self.group3 = ResidualGroup(n, cfg.res_blocks_per_group)
        if cfg.attention_enabled:
            self.attn1 = AttentionModule(n, cfg.window_size, cfg.num_heads)
            self.attn2 = AttentionModule(n, cfg.window_size, cfg.num_heads)
        else:
            self.attn1 = self.attn2 = None

    def forward(self, x: torch.Tensor):
        t1 = self.group1(self.act(self.down1(x)))
        if self.attn1 is not None:
            t1 = self.attn1(t1)
        t2 = self.group2(self.act(self.down2(t1)))
        if self.attn2 is not None:
            t2 = self.attn2(t2)
        t3 = self.group3(self.act(self.down3(t2)))
        y = self.down4(t3)
        return y, [t1, t2, t3]


class SynthesisTransform(nn.Module):
    """Mirror of the analysis transform; maps latents back to 3 x 16h x 16w."""

    def __init__(self, cfg: NetworkConfig):
        super().__init__()
        n, m = cfg.N, cfg.M
        self.up1 = deconv_up(m, n)
        self.up2 = deconv_up(n, n)
        self.up3 = deconv_up(n, n)
        self.up4 = deconv_up(n, 3)
        self.act = nn.GELU()
        self.group1 = ResidualGroup(n, cfg.res_blocks_per_group)
        self.group2 = ResidualGroup(n, cfg.res_blocks_per_group)
        self.group3 = ResidualGroup(n, cfg.res_blocks_per_group)
        if cfg.attention_enabled:
            self.attn1 = AttentionModule(n, cfg.window_size, cfg.num_heads)
            self.attn2 = AttentionModule(n, cfg.window_size, cfg.num_heads)
        else:
            self.attn1 = self.attn2 = None

    def forward(self, y_hat: torch.Tensor) -> torch.Tensor:
        x = self.group1(self.act(self.up1(y_hat)))
        if self.attn1 is not None:
            x = self.attn1(x)
        x = self.group2(self.act(self.up2(x)))
        if self.attn2 is not None:
            x = self.attn2(x)
        x = self.group3(self.act(self.up3(x)))
        return self.up4(x)


class HyperEncoder(nn.Module):
    """Two stride-2 convolutions: M x h x w latents -> z_channels x h/4 x w/4."""

    def __init__(self, cfg: NetworkConfig):
        super().__init__()
        self.down1 = conv_down(cfg.M, cfg.z_channels)
        self.down2 = conv_down(cfg.z_channels, cfg.z_channels)
        self.act = nn.GELU()

    def forward(self, y):
        return self.down2(self.act(self.down1(y)))


class HyperDecoder(nn.Module):
    """Expands the hyper-latent into mean/scale side information (M channels each)."""

    def __init__(self, cfg: NetworkConfig):
        super().__init__()
        self.up1 = deconv_up(cfg.z_channels, cfg.z_channels)
        self.up2 = deconv_up(cfg.z_channels, 2 * cfg.M)
        self.act = nn.GELU()
        self.m = cfg.M

    def forward(self, z_hat):
        h = self.up2(self.act(self.up1(z_hat)))
        s_mean, s_scale_raw = h[:, :self.m], h[:, self.m:]
        # softplus keeps the scale side-info strictly positive
        return s_mean, F.softplus(s_scale_raw) + 1e-6
