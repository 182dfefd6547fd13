"""Quality metrics, rate-distortion curves, and report emission."""

from __future__ import annotations

import csv
import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .networks import ImageBuffer

MS_SSIM_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)
MS_SSIM_WIN = 11
MS_SSIM_MIN_SIZE = 160  # (win-1) * 2**(scales-1) with 5 dyadic scales


def psnr(a: ImageBuffer, b: ImageBuffer) -> float:
    """PSNR in dB on the 8-bit scale; identical inputs give +inf."""
    if a.pixels.shape != b.pixels.shape:
        raise ValueError(f"image dims differ: {a.pixels.shape} vs {b.pixels.shape}")
    qa = np.round(a.pixels.astype(np.float64) * 255.0)
    qb = np.round(b.pixels.astype(np.float64) * 255.0)
    mse = np.mean((qa - qb) ** 2)
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(255.0 ** 2 / mse)


def msssim_to_db(value: float) -> float:
    if value >= 1.0:
        return math.inf
    return -10.0 * math.log10(1.0 - value)


def _gaussian_kernel(size: int, sigma: float, dtype, device) -> torch.Tensor:
    coords = torch.arange(size, dtype=dtype, device=device) - size // 2
    g = torch.exp(-(coords ** 2) / (2 * sigma ** 2))
    return g / g.sum()


def _blur(x: torch.Tensor, kernel: torch.Tensor) -> torch.Tensor:
    # separable gaussian with reflect padding so all scales stay full-size
    c = x.shape[1]
    pad = kernel.shape[0] // 2
    kx = kernel.view(1, 1, 1, -1).repeat(c, 1, 1, 1)
    ky = kernel.view(1, 1, -1, 1).repeat(c, 1, 1, 1)
    x = F.pad(x, (pad, pad, 0, 0), mode="reflect")
    x = F.conv2d(x, kx, groups=c)
    x = F.pad(x, (0, 0, pad, pad), mode="reflect")
    return F.conv2d(x, ky, groups=c)


def _ssim_pair(a: torch.Tensor, b: torch.Tensor, kernel: torch.Tensor,
               data_range: float) -> tuple[torch.Tensor, torch.Tensor]:
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    mu_a = _blur(a, kernel)
    mu_b = _blur(b, kernel)
    saa = _blur(a * a, kernel) - mu_a ** 2
    sbb = _blur(b * b, kernel) - mu_b ** 2
    sab = _blur(a * b, kernel) - mu_a * mu_b
    cs = (2 * sab + c2) / (saa + sbb + c2)
    ssim = ((2 * mu_a * mu_b + c1) / (mu_a ** 2 + mu_b ** 2 + c1)) * cs
    return ssim.mean(), cs.mean()


def ms_ssim_torch(a: torch.Tensor, b: torch.Tensor, data_range: float = 1.0) -> torch.Tensor:
    """Differentiable 5-scale MS-SSIM on (B, C, H, W) tensors."""
    if a.shape != b.shape:
        raise ValueError("inputs must have identical shapes")
    if min(a.shape[-2:]) < MS_SSIM_MIN_SIZE:
        raise ValueError(f"MS-SSIM needs min(H, W) >= {MS_SSIM_MIN_SIZE}, "
                         f"got {tuple(a.shape[-2:])}")
    kernel = _gaussian_kernel(MS_SSIM_WIN, 1.5, a.dtype, a.device)
    weights = torch.tensor(MS_SSIM_WEIGHTS, dtype=a.dtype, device=a.device)
    values = []
    x, y = a, b
    for scale in range(len(MS_SSIM_WEIGHTS)):
        ssim, cs = _ssim_pair(x, y, kernel, data_range)
        values.append(ssim if scale == len(MS_SSIM_WEIGHTS) - 1 else cs)
        if scale < len(MS_SSIM_WEIGHTS) - 1:
            x = F.avg_pool2d(x, kernel_size=2)
            y = F.avg_pool2d(y, kernel_size=2)
    stacked = torch.stack(values).clamp(min=0.0)
    return torch.prod(stacked ** weights)


def ms_ssim(a: ImageBuffer, b: ImageBuffer) -> tuple[float, float]:
    """MS-SSIM of two images on the 8-bit scale; returns (raw, dB)."""
    if a.pixels.shape != b.pixels.shape:
        raise ValueError(f"image dims differ: {a.pixels.shape} vs {b.pixels.shape}")
    ta = torch.from_numpy(np.round(a.pixels.astype(np.float64) * 255.0)
                          .transpose(2, 0, 1))[None]
    tb = torch.from_numpy(np.round(b.pixels.astype(np.float64) * 255.0)
                          .transpose(2, 0, 1))[None]
    raw = float(ms_ssim_torch(ta, tb, data_range=255.0))
    raw = min(raw, 1.0)
    return raw, msssim_to_db(raw)


# ---------------------------------------------------------------------------
# Rate-distortion curves

@dataclass
class RDPoint:
    bpp: float
    psnr_db: float
    msssim: float
    msssim_db: float
    enc_seconds: float = 0.0
    dec_seconds: float = 0.0


@dataclass
class RDCurve:
    label: str
    points: list[RDPoint]

    def __post_init__(self):
        if len(self.points) < 4:
            raise ValueError("an RD curve needs at least 4 points")
        bpps = [p.bpp for p in self.points]
        if any(b <= 0 for b in bpps):
            raise ValueError("bpp values must be positive")
        if any(b2 <= b1 for b1, b2 in zip(bpps, bpps[1:])):
            raise ValueError("bpp must be strictly increasing")

    def axis(self, quality: str) -> tuple[np.ndarray, np.ndarray]:
        if quality == "psnr":
            q = np.array([p.psnr_db for p in self.points], dtype=np.float64)
        elif quality == "msssim_db":
            q = np.array([p.msssim_db for p in self.points], dtype=np.float64)
        else:
            raise ValueError(f"unknown quality axis {quality!r}")
        r = np.log10(np.array([p.bpp for p in self.points], dtype=np.float64))
        return q, r


@dataclass
class BDRateResult:
    percent: float
    overlap: tuple[float, float]


def bd_rate(anchor: RDCurve, test: RDCurve, quality: str = "psnr") -> BDRateResult:
    """Average rate difference (%) of ``test`` over ``anchor`` at equal quality.

    Classic formulation: cubic fit of log10(rate) against the quality axis,
    integrated over the shared quality interval. Negative means the test
    curve needs fewer bits.
    """
    q_a, r_a = anchor.axis(quality)
    q_t, r_t = test.axis(quality)
    for q in (q_a, q_t):
        if np.any(np.diff(q) <= 0):
            raise ValueError("quality must increase strictly with bpp "
                             "(non-monotone curve)")
    lo = max(q_a.min(), q_t.min())
    hi = min(q_a.max(), q_t.max())
    if hi <= lo:
        raise ValueError("quality ranges do not overlap")
    fit_a = np.polyfit(q_a, r_a, 3)
    fit_t = np.polyfit(q_t, r_t, 3)
    int_a = np.polyint(fit_a)
    int_t = np.polyint(fit_t)
    avg_a = (np.polyval(int_a, hi) - np.polyval(int_a, lo)) / (hi - lo)
    avg_t = (np.polyval(int_t, hi) - np.polyval(int_t, lo)) / (hi - lo)
    percent = (10.0 ** (avg_t - avg_a) - 1.0) * 100.0
    return BDRateResult(percent=float(percent), overlap=(float(lo), float(hi)))


def curve_from_csv(path: str | Path, label: str | None = None) -> RDCurve:
    """Read an RD curve from a CSV with at least bpp and psnr_db columns."""
    path = Path(path)
    points = []
    with path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or "bpp" not in reader.fieldnames:
            raise ValueError(f"{path}: expected a header with a bpp column")
        for row in reader:
            msssim = float(row.get("msssim", "nan") or "nan")
            msssim_db = float(row.get("msssim_db", "nan") or "nan")
            points.append(RDPoint(bpp=float(row["bpp"]),
                                  psnr_db=float(row.get("psnr_db", "nan") or "nan"),
                                  msssim=msssim, msssim_db=msssim_db))
    points.sort(key=lambda p: p.bpp)
    return RDCurve(label=label or path.stem, points=points)


# ---------------------------------------------------------------------------
# Dataset evaluation through the real bitstream

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp", ".ppm")


@dataclass
class ImageEval:
    image: str
    point: RDPoint


def evaluate_model(model, dataset_dir: str | Path, weights=None,
                   compute_msssim: bool = True) -> tuple[list[ImageEval], dict]:
    """Compress/decompress every image in a directory and collect RD points.

    bpp comes from the actual payload bytes; the decoder's latents are
    checked against the encoder's and any mismatch aborts with the filename.
    """
    from .bitstream import compress_image, decompress_image
    from .networks import load_rgb, pad_image

    dataset_dir = Path(dataset_dir)
    files = sorted(p for p in dataset_dir.iterdir()
                   if p.suffix.lower() in IMAGE_SUFFIXES)
    if not files:
        raise ValueError(f"no images found in {dataset_dir}")
    evals = []
    for path in files:
        buf = pad_image(load_rgb(path))
        t0 = time.perf_counter()
        container, enc_state = compress_image(buf, model, weights, return_state=True)
        enc_s = time.perf_counter() - t0
        t0 = time.perf_counter()
        recon, dec_state = decompress_image(container, model, return_state=True)
        dec_s = time.perf_counter() - t0
        if not torch.equal(enc_state.y_hat, dec_state.y_hat):
            raise RuntimeError(f"round-trip latent mismatch on {path.name}")
        original = ImageBuffer(pixels=buf.pixels[:buf.original_height, :buf.original_width],
                               original_height=buf.original_height,
                               original_width=buf.original_width)
        p = psnr(original, recon)
        if compute_msssim:
            ms_raw, ms_db = ms_ssim(original, recon)
        else:
            ms_raw, ms_db = float("nan"), float("nan")
        evals.append(ImageEval(image=path.name,
                               point=RDPoint(bpp=container.bpp, psnr_db=p,
                                             msssim=ms_raw, msssim_db=ms_db,
                                             enc_seconds=enc_s, dec_seconds=dec_s)))
    aggregate = aggregate_points([e.point for e in evals])
    return evals, aggregate


def aggregate_points(points: list[RDPoint]) -> dict:
    for p in points:
        if math.isinf(p.psnr_db) or math.isinf(p.msssim_db):
            raise ValueError("infinite quality sentinel cannot be aggregated; "
                             "a lossless reconstruction indicates a bug")
    n = len(points)
    return {
        "images": n,
        "bpp": sum(p.bpp for p in points) / n,
        "psnr_db": sum(p.psnr_db for p in points) / n,
        "msssim": sum(p.msssim for p in points) / n,
        "msssim_db": sum(p.msssim_db for p in points) / n,
        "enc_s": sum(p.enc_seconds for p in points) / n,
        "dec_s": sum(p.dec_seconds for p in points) / n,
    }


# ---------------------------------------------------------------------------
# Reports and entropy heatmaps

CSV_COLUMNS = ("image", "bpp", "psnr_db", "msssim", "msssim_db", "enc_s", "dec_s")


@dataclass
class HeatmapEntry:
    image: str
    rank: int  # 1-based entropy rank of the channel
    channel: int
    entropy_map: np.ndarray  # h x w bits


def entropy_heatmaps(model, buf: ImageBuffer, ranks=(1, 40, 80, 120, 160),
                     image_name: str = "image"):
    """Entropy maps of the rank-selected latent channels for one image.

    Returns (entries, ranking) so callers can also export the full channel
    ordering.
    """
    from .entropy import channel_entropy_profile
    from .networks import image_to_tensor

    model.eval()
    with torch.no_grad():
        x = image_to_tensor(buf, next(model.parameters()).dtype)
        y, _ = model.analysis(x)
        _, z_hat, s_mean, s_scale = model.hyper_side(y, mode="eval")
        y_hat, params = model.charm(y, s_mean, s_scale, mode="eval")
    entropy_map, ranking = channel_entropy_profile(y_hat, params)
    entries = []
    for rank in ranks:
        if not 1 <= rank <= entropy_map.shape[0]:
            raise ValueError(f"rank {rank} out of range for {entropy_map.shape[0]} channels")
        channel = int(ranking.order[rank - 1])
        entries.append(HeatmapEntry(image=image_name, rank=rank, channel=channel,
                                    entropy_map=entropy_map[channel]))
    return entries, ranking


def write_pgm(path: str | Path, gray: np.ndarray) -> None:
    gray = np.asarray(gray, dtype=np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{gray.shape[1]} {gray.shape[0]}\n255\n".encode("ascii"))
        fh.write(gray.tobytes())


def normalize_heatmap(entropy_map: np.ndarray) -> tuple[np.ndarray, float, float]:
    lo = float(entropy_map.min())
    hi = float(entropy_map.max())
    if hi == lo:
        return np.full(entropy_map.shape, 128, dtype=np.uint8), lo, hi
    gray = np.round((entropy_map - lo) / (hi - lo) * 255.0).astype(np.uint8)
    return gray, lo, hi


def emit_reports(out_dir: str | Path, evals: list[ImageEval], aggregate: dict | None = None,
                 heatmaps: list[HeatmapEntry] | None = None) -> dict:
    """Write metrics.csv, aggregate.json, and per-channel PGM heatmaps."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path = out_dir / "metrics.csv"
    with csv_path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_COLUMNS)
        for e in evals:
            p = e.point
            writer.writerow([e.image, f"{p.bpp:.6f}", f"{p.psnr_db:.4f}",
                             f"{p.msssim:.6f}", f"{p.msssim_db:.4f}",
                             f"{p.enc_seconds:.4f}", f"{p.dec_seconds:.4f}"])
    written = {"csv": str(csv_path)}
    if aggregate is None:
        aggregate = aggregate_points([e.point for e in evals])
    json_path = out_dir / "aggregate.json"
    json_path.write_text(json.dumps(aggregate, indent=2, sort_keys=True) + "\n")
    written["json"] = str(json_path)
    if heatmaps:
        heat_dir = out_dir / "heatmaps"
        emit_heatmaps(heat_dir, heatmaps)
        written["heatmaps"] = str(heat_dir)
    return written


def emit_heatmaps(heat_dir: str | Path, entries: list[HeatmapEntry]) -> None:
    """Write entries as 8-bit PGM files plus a normalization sidecar CSV."""
    heat_dir = Path(heat_dir)
    heat_dir.mkdir(parents=True, exist_ok=True)
    with (heat_dir / "normalization.csv").open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["image", "rank", "channel", "min_bits", "max_bits"])
        for entry in entries:
            gray, lo, hi = normalize_heatmap(entry.entropy_map)
            stem = Path(entry.image).stem
            name = f"{stem}_rank{entry.rank:03d}_ch{entry.channel:03d}.pgm"
            write_pgm(heat_dir / name, gray)
            writer.writerow([entry.image, entry.rank, entry.channel,
                             f"{lo:.9f}", f"{hi:.9f}"])


def rankings_to_csv(path: str | Path, ranking) -> None:
    """Entropy profile export: (channel, mean_entropy_bits, rank) rows."""
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["channel", "mean_entropy_bits", "rank"])
        for rank, channel in enumerate(ranking.order, start=1):
            writer.writerow([int(channel), f"{ranking.mean_entropy[channel]:.9f}", rank])
