"""SSIM, Pearson correlation and PSNR per mIHC channel, aggregated over a test set.

All metrics operate on 8-bit values (data range 255) after de-normalization.
Two "Average" PSNR conventions are reported because the order of averaging
changes the number: the mean of per-channel PSNRs, and the PSNR of the
channel-averaged MSE (computed per image, then averaged over images).
"""
from __future__ import annotations

import csv
import io
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy.ndimage import correlate1d

from stainbridge import MIHC_CHANNELS
from stainbridge.errors import InputValidationError, UndefinedCorrelation
from stainbridge.imageio import atomic_write_text

DATA_RANGE = 255.0
PSNR_CAP_DB = 100.0


def _check_pair(a, b) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise InputValidationError(f"shape mismatch: {a.shape} vs {b.shape}")
    if a.size == 0:
        raise InputValidationError("empty raster")
    return a, b


def gaussian_kernel(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    k = np.exp(-(x**2) / (2.0 * sigma**2))
    return k / k.sum()


def _blur(x: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    for axis in range(x.ndim):
        x = correlate1d(x, kernel, axis=axis, mode="reflect")
    return x


def ssim_map(a, b, data_range: float = DATA_RANGE, win_size: int = 11, sigma: float = 1.5) -> np.ndarray:
    """Local SSIM (Gaussian window, population covariances), border-cropped."""
    a, b = _check_pair(a, b)
    if a.ndim != 2:
        raise InputValidationError(f"ssim expects a single-channel raster, got shape {a.shape}")
    if min(a.shape) < win_size:
        raise InputValidationError(f"raster {a.shape} smaller than the {win_size}px SSIM window")
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    k = gaussian_kernel(win_size, sigma)
    mu_a, mu_b = _blur(a, k), _blur(b, k)
    s_aa = _blur(a * a, k) - mu_a * mu_a
    s_bb = _blur(b * b, k) - mu_b * mu_b
    s_ab = _blur(a * b, k) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * s_ab + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (s_aa + s_bb + c2)
    pad = (win_size - 1) // 2
    return (num / den)[pad:-pad, pad:-pad]


def ssim(a, b, data_range: float = DATA_RANGE, win_size: int = 11, sigma: float = 1.5) -> float:
    return float(ssim_map(a, b, data_range, win_size, sigma).mean())


def pearson_r(a, b) -> float:
    a, b = _check_pair(a, b)
    x = a.ravel() - a.mean()
    y = b.ravel() - b.mean()
    sxx, syy = float(x @ x), float(y @ y)
    if sxx == 0.0 or syy == 0.0:
        raise UndefinedCorrelation("zero-variance input")
    return float(np.clip((x @ y) / math.sqrt(sxx * syy), -1.0, 1.0))


def mse(a, b) -> float:
    a, b = _check_pair(a, b)
    return float(np.mean((a - b) ** 2))


def psnr_from_mse(value: float, data_range: float = DATA_RANGE, cap: float = PSNR_CAP_DB) -> float:
    if value == 0.0:
        return cap
    return float(10.0 * math.log10(data_range**2 / value))


def psnr(a, b, data_range: float = DATA_RANGE, cap: float = PSNR_CAP_DB) -> float:
    return psnr_from_mse(mse(a, b), data_range, cap)


@dataclass
class ChannelMetrics:
    ssim: float
    pearson_r: float | None  # None when either image is constant
    psnr_db: float
    mse: float


def channel_metrics(generated, reference, data_range: float = DATA_RANGE) -> ChannelMetrics:
    try:
        r = pearson_r(generated, reference)
    except UndefinedCorrelation:
        r = None
    m = mse(generated, reference)
    return ChannelMetrics(
        ssim=ssim(generated, reference, data_range), pearson_r=r,
        psnr_db=psnr_from_mse(m, data_range), mse=m,
    )


@dataclass
class MetricsReport:
    rows: list[tuple[str, str, ChannelMetrics]]
    channels: Sequence[str] = MIHC_CHANNELS
    per_channel: dict[str, dict] = field(init=False)
    averages: dict[str, float | None] = field(init=False)

    def __post_init__(self):
        if not self.rows:
            raise InputValidationError("empty evaluation set")
        self.per_channel = {}
        for ch in self.channels:
            ms = [m for _, c, m in self.rows if c == ch]
            rs = [m.pearson_r for m in ms if m.pearson_r is not None]
            self.per_channel[ch] = {
                "ssim": float(np.mean([m.ssim for m in ms])),
                "pearson_r": float(np.mean(rs)) if rs else None,
                "psnr_db": float(np.mean([m.psnr_db for m in ms])),
                "pearson_excluded": len(ms) - len(rs),
                "n": len(ms),
            }
        pooled = []
        for sid in self.sample_ids:
            mses = [m.mse for s, _, m in self.rows if s == sid]
            pooled.append(psnr_from_mse(float(np.mean(mses))))
        rs = [v["pearson_r"] for v in self.per_channel.values() if v["pearson_r"] is not None]
        self.averages = {
            "ssim": float(np.mean([v["ssim"] for v in self.per_channel.values()])),
            "pearson_r": float(np.mean(rs)) if rs else None,
            "psnr_channel_mean": float(np.mean([v["psnr_db"] for v in self.per_channel.values()])),
            "psnr_mse_pooled": float(np.mean(pooled)),
        }

    @property
    def sample_ids(self) -> list[str]:
        return list(dict.fromkeys(s for s, _, _ in self.rows))

    def summary(self) -> dict:
        """Table-shaped summary: metric -> {channel..., Average...}."""
        ssim_row = {ch: v["ssim"] for ch, v in self.per_channel.items()}
        ssim_row["Average"] = self.averages["ssim"]
        r_row = {ch: v["pearson_r"] for ch, v in self.per_channel.items()}
        r_row["Average"] = self.averages["pearson_r"]
        psnr_row = {ch: v["psnr_db"] for ch, v in self.per_channel.items()}
        psnr_row["Average (channel mean)"] = self.averages["psnr_channel_mean"]
        psnr_row["Average (MSE pooled)"] = self.averages["psnr_mse_pooled"]
        return {
            "SSIM": ssim_row,
            "R": r_row,
            "PSNR (dB)": psnr_row,
            "pearson_excluded": {ch: v["pearson_excluded"] for ch, v in self.per_channel.items()},
            "num_images": len(self.sample_ids),
        }

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf)
        writer.writerow(["sample_id", "channel", "ssim", "pearson_r", "psnr_db", "mse"])
        for sid, ch, m in self.rows:
            writer.writerow([sid, ch, repr(m.ssim), "" if m.pearson_r is None else repr(m.pearson_r),
                             repr(m.psnr_db), repr(m.mse)])
        return buf.getvalue()

    def write(self, out_dir, plot: bool = False) -> Path:
        out_dir = Path(out_dir)
        atomic_write_text(out_dir / "metrics.csv", self.to_csv())
        atomic_write_text(out_dir / "metrics_summary.json", json.dumps(self.summary(), indent=2))
        if plot:
            plot_summary(self, out_dir / "metrics_summary.png")
        return out_dir


def _image_rows(sample_id: str, generated: np.ndarray, reference: np.ndarray,
                channels: Sequence[str]) -> list[tuple[str, str, ChannelMetrics]]:
    generated, reference = np.asarray(generated), np.asarray(reference)
    if generated.shape != reference.shape:
        raise InputValidationError(
            f"{sample_id}: generated {generated.shape} vs reference {reference.shape}"
        )
    if generated.ndim != 3 or generated.shape[2] != len(channels):
        raise InputValidationError(
            f"{sample_id}: expected (H, W, {len(channels)}) images, got {generated.shape}"
        )
    return [
        (sample_id, ch, channel_metrics(generated[..., i], reference[..., i]))
        for i, ch in enumerate(channels)
    ]


def evaluate_dataset(pairs: Iterable, channels: Sequence[str] = MIHC_CHANNELS,
                     workers: int = 1) -> MetricsReport:
    """Evaluate ``(sample_id, generated, reference)`` triples.

    ``generated``/``reference`` are (H, W, C) arrays or zero-argument callables
    returning them (so loading can happen inside worker threads). Row order
    follows input order regardless of ``workers``.
    """
    def run(item):
        sid, gen, ref = item
        if callable(gen):
            gen = gen()
        if callable(ref):
            ref = ref()
        return _image_rows(sid, gen, ref, channels)

    items = list(pairs)
    if not items:
        raise InputValidationError("empty evaluation set")
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            chunks = list(pool.map(run, items))
    else:
        chunks = [run(it) for it in items]
    return MetricsReport([row for chunk in chunks for row in chunk], channels)


def plot_summary(report: MetricsReport, path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    chans = list(report.channels)
    fig, axes = plt.subplots(1, 3, figsize=(10, 3))
    for ax, key, title in zip(axes, ("ssim", "pearson_r", "psnr_db"), ("SSIM", "R", "PSNR (dB)")):
        vals = [report.per_channel[c][key] or 0.0 for c in chans]
        ax.bar(chans, vals, color=["tab:blue", "tab:green", "tab:red"][: len(chans)])
        ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
