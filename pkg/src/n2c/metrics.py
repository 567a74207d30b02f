"""Evaluation metrics: per-slice RMSE (HU) and SSIM, with MEAN+-SD rollups.

SSIM follows the standard formulation: 11x11 Gaussian window (sigma 1.5),
K1 = 0.01, K2 = 0.03, statistics Gaussian-weighted, map averaged over the
fully-valid interior. The data range defaults to the 3000 HU normalization
window so scores are comparable across methods.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import correlate

DEFAULT_DATA_RANGE = 3000.0
_WIN_SIZE = 11
_WIN_SIGMA = 1.5
_K1, _K2 = 0.01, 0.03


def _gaussian_window():
    half = _WIN_SIZE // 2
    coords = np.arange(-half, half + 1, dtype=np.float64)
    g = np.exp(-(coords ** 2) / (2.0 * _WIN_SIGMA ** 2))
    win = np.outer(g, g)
    return win / win.sum()

_WINDOW = _gaussian_window()


def rmse(a, b) -> float:
    """Root-mean-square difference in the input units (HU throughout)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"rmse: shape mismatch {a.shape} vs {b.shape}")
    return float(np.sqrt(np.mean((a - b) ** 2)))


def ssim(a, b, data_range=DEFAULT_DATA_RANGE) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"ssim: shape mismatch {a.shape} vs {b.shape}")
    if data_range <= 0:
        raise ValueError("data_range must be positive")
    if min(a.shape) < _WIN_SIZE:
        raise ValueError(f"ssim needs images at least {_WIN_SIZE} pixels per side")

    half = _WIN_SIZE // 2
    crop = (slice(half, -half), slice(half, -half))

    def filt(img):
        return correlate(img, _WINDOW, mode="nearest")[crop]

    mu_a, mu_b = filt(a), filt(b)
    var_a = filt(a * a) - mu_a ** 2
    var_b = filt(b * b) - mu_b ** 2
    cov = filt(a * b) - mu_a * mu_b
    c1 = (_K1 * data_range) ** 2
    c2 = (_K2 * data_range) ** 2
    ssim_map = ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / (
        (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
    )
    return float(ssim_map.mean())


@dataclass
class MetricRecord:
    """Per-slice metric lists plus the volume-level MEAN+-SD summary.

    SD uses the population convention (divide by S); a single-slice volume
    has SD 0 by definition.
    """

    method: str
    rmse_per_slice: list = field(default_factory=list)
    ssim_per_slice: list = field(default_factory=list)

    @property
    def rmse_mean(self):
        return float(np.mean(self.rmse_per_slice))

    @property
    def rmse_sd(self):
        return float(np.std(self.rmse_per_slice))

    @property
    def ssim_mean(self):
        return float(np.mean(self.ssim_per_slice))

    @property
    def ssim_sd(self):
        return float(np.std(self.ssim_per_slice))

    def to_json_dict(self):
        return {
            "method": self.method,
            "rmse_hu": {"mean": self.rmse_mean, "sd": self.rmse_sd,
                        "per_slice": list(self.rmse_per_slice)},
            "ssim": {"mean": self.ssim_mean, "sd": self.ssim_sd,
                     "per_slice": list(self.ssim_per_slice)},
        }

    def csv_rows(self):
        """Rows of method,slice,rmse_hu,ssim."""
        return [
            (self.method, s, r, q)
            for s, (r, q) in enumerate(zip(self.rmse_per_slice, self.ssim_per_slice))
        ]


def evaluate_volume(denoised, clean, method_name, data_range=DEFAULT_DATA_RANGE):
    """Slice-wise RMSE/SSIM of a denoised volume against its clean reference."""
    if denoised.dims != clean.dims:
        raise ValueError(f"volume dims mismatch: {denoised.dims} vs {clean.dims}")
    record = MetricRecord(method=method_name)
    for s in range(denoised.dims[0]):
        record.rmse_per_slice.append(rmse(denoised.data[s], clean.data[s]))
        record.ssim_per_slice.append(ssim(denoised.data[s], clean.data[s], data_range))
    return record
