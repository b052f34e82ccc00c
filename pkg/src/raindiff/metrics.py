"""PSNR and SSIM on [0, 1] RGB arrays.

Both metrics run on de-normalized RGB (all channels, all pixels), not
luma only; reports produced here are internally consistent under that
convention. PSNR of identical images is capped at 100 dB instead of
infinity. SSIM follows the standard protocol: 11x11 Gaussian window
(sigma 1.5), K1=0.01, K2=0.03, per-channel maps averaged over valid
window positions only.
"""

import math
from dataclasses import dataclass

import numpy as np

PSNR_CAP_DB = 100.0
_SSIM_WINDOW = 11
_SSIM_SIGMA = 1.5
_K1, _K2 = 0.01, 0.03


def psnr(a: np.ndarray, b: np.ndarray, data_range: float = 1.0) -> float:
    """10*log10(range^2 / MSE) in dB; identical inputs return the cap."""
    if a.shape != b.shape:
        raise ValueError(f"psnr: shapes {a.shape} and {b.shape} differ")
    if data_range <= 0:
        raise ValueError(f"psnr: data_range must be positive, got {data_range}")
    mse = float(np.mean((np.asarray(a, np.float64) - np.asarray(b, np.float64)) ** 2))
    if mse == 0.0:
        return PSNR_CAP_DB
    return min(10.0 * math.log10(data_range * data_range / mse), PSNR_CAP_DB)


def _gaussian_window(size, sigma):
    half = (size - 1) / 2.0
    x = np.arange(size, dtype=np.float64) - half
    w = np.exp(-(x * x) / (2.0 * sigma * sigma))
    return w / w.sum()


def _filter_valid(img, w):
    """Separable 'valid' correlation with a 1-D window along both axes."""
    n = len(w)
    win = np.lib.stride_tricks.sliding_window_view(img, n, axis=1)
    rows = win @ w
    win = np.lib.stride_tricks.sliding_window_view(rows, n, axis=0)
    return (win.transpose(0, 2, 1) * w[None, :, None]).sum(axis=1)


def _ssim_channel(a, b, data_range):
    w = _gaussian_window(_SSIM_WINDOW, _SSIM_SIGMA)
    c1 = (_K1 * data_range) ** 2
    c2 = (_K2 * data_range) ** 2
    mu_a = _filter_valid(a, w)
    mu_b = _filter_valid(b, w)
    saa = _filter_valid(a * a, w) - mu_a * mu_a
    sbb = _filter_valid(b * b, w) - mu_b * mu_b
    sab = _filter_valid(a * b, w) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * sab + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (saa + sbb + c2)
    return float(np.mean(num / den))


def ssim(a: np.ndarray, b: np.ndarray, data_range: float = 1.0) -> float:
    """Mean local SSIM; (3, H, W) inputs are averaged per channel, (H, W)
    inputs scored directly. Images must be at least the window size."""
    if a.shape != b.shape:
        raise ValueError(f"ssim: shapes {a.shape} and {b.shape} differ")
    if a.ndim == 2:
        chans = [(a, b)]
    elif a.ndim == 3:
        chans = [(a[c], b[c]) for c in range(a.shape[0])]
    else:
        raise ValueError(f"ssim: expected (H, W) or (C, H, W), got {a.shape}")
    H, W = chans[0][0].shape
    if H < _SSIM_WINDOW or W < _SSIM_WINDOW:
        raise ValueError(
            f"ssim: image {H}x{W} smaller than the {_SSIM_WINDOW}x{_SSIM_WINDOW} window"
        )
    scores = [
        _ssim_channel(np.asarray(ca, np.float64), np.asarray(cb, np.float64), data_range)
        for ca, cb in chans
    ]
    return float(np.mean(scores))


@dataclass
class MetricReport:
    """Per-image scores plus dataset means."""

    entries: list  # (label, psnr_db, ssim)

    @property
    def mean_psnr(self) -> float:
        return float(np.mean([p for _, p, _ in self.entries]))

    @property
    def mean_ssim(self) -> float:
        return float(np.mean([s for _, _, s in self.entries]))

    def write(self, path) -> None:
        """Tab-separated rows: path, psnr_db, ssim; trailing means line."""
        with open(path, "w", encoding="utf-8") as fh:
            for label, p, s in self.entries:
                fh.write(f"{label}\t{p:.4f}\t{s:.6f}\n")
            fh.write(f"mean\t{self.mean_psnr:.4f}\t{self.mean_ssim:.6f}\n")


def to_unit_range(img_signed: np.ndarray) -> np.ndarray:
    """[-1, 1] model domain -> [0, 1] metric domain, clamped."""
    return np.clip((np.asarray(img_signed, np.float64) + 1.0) / 2.0, 0.0, 1.0)
