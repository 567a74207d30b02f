"""Classical per-slice denoisers used as contrast methods.

Non-local means: patch-similarity weighted averaging with the noise-variance
offset in the exponent (the hot loop lives in the kernels backend).
Total variation: the quadratic-fidelity TV model solved by the dual
projection iteration with fixed step tau <= 1/4.
"""

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import convolve

from n2c import kernels


@dataclass(frozen=True)
class NlmParams:
    h: float  # filtering strength, HU
    patch_size: int = 5
    search_window: int = 11

    def __post_init__(self):
        if self.h <= 0:
            raise ValueError("h must be positive")
        if self.patch_size % 2 == 0 or self.search_window % 2 == 0:
            raise ValueError("patch_size and search_window must be odd")
        if self.patch_size > self.search_window:
            raise ValueError("patch_size must not exceed search_window")


@dataclass(frozen=True)
class TvParams:
    weight: float  # lambda, HU
    max_iter: int = 200
    tol: float = 1e-4  # max |dual change| per element (dual is bounded by 1)
    tau: float = 0.25

    def __post_init__(self):
        if self.weight <= 0:
            raise ValueError("weight must be positive")
        if not 0 < self.tau <= 0.25:
            raise ValueError("tau must be in (0, 0.25] for dual convergence")
        if self.max_iter < 1:
            raise ValueError("max_iter must be >= 1")


_LAPLACIAN = np.array([[1.0, -2.0, 1.0], [-2.0, 4.0, -2.0], [1.0, -2.0, 1.0]])


def estimate_noise_sigma(img) -> float:
    """Fast noise estimate from the mean absolute Laplacian residual.

    The 3x3 operator annihilates locally planar structure, so its response on
    the interior is dominated by noise; the sqrt(pi/2)/6 factor converts the
    mean absolute response of the 36*sigma^2-variance residual back to sigma.
    """
    img = np.asarray(img, dtype=np.float64)
    h, w = img.shape
    if h < 3 or w < 3:
        raise ValueError("image too small for noise estimation")
    resp = convolve(img, _LAPLACIAN)[1:-1, 1:-1]  # interior = 'valid' region
    return float(np.sqrt(np.pi / 2.0) * np.abs(resp).sum() / (6.0 * (h - 2) * (w - 2)))


def nlm_denoise(img, params: NlmParams) -> np.ndarray:
    """Non-local means with edge-replicated boundaries.

    Weights are exp(-max(d2 - 2*sigma^2, 0) / h^2), d2 the mean squared patch
    difference and sigma estimated from the input.
    """
    img = np.ascontiguousarray(img, dtype=np.float64)
    sigma = estimate_noise_sigma(img)
    return kernels.nlm_filter(
        img, params.h, params.patch_size, params.search_window, sigma * sigma
    )


# -- total variation -------------------------------------------------------


def _grad(u):
    gx = np.zeros_like(u)
    gy = np.zeros_like(u)
    gx[:, :-1] = u[:, 1:] - u[:, :-1]
    gy[:-1, :] = u[1:, :] - u[:-1, :]
    return gx, gy


def _div(px, py):
    out = np.zeros_like(px)
    out[:, 0] += px[:, 0]
    out[:, 1:] += px[:, 1:] - px[:, :-1]
    out[0, :] += py[0, :]
    out[1:, :] += py[1:, :] - py[:-1, :]
    # the last column/row of p never receives a gradient contribution, and
    # _grad keeps it zero, so no boundary correction is needed here
    return out


def tv_norm(img) -> float:
    """Isotropic total variation with forward differences."""
    gx, gy = _grad(np.asarray(img, dtype=np.float64))
    return float(np.sqrt(gx * gx + gy * gy).sum())


def tv_objective(u, y, weight) -> float:
    u = np.asarray(u, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    return float(0.5 * np.sum((u - y) ** 2) + weight * tv_norm(u))


def tv_denoise(img, params: TvParams, full_output=False):
    """Quadratic-fidelity TV denoising by dual projection.

    Iterates p <- (p + tau * grad(div p - y/lambda)) / (1 + tau |...|) and
    returns u = y - lambda * div p; stops when the dual update falls below
    tol (the dual variable is bounded by 1, so this is a relative measure).
    With full_output, also returns {"iterations", "objective",
    "objective_history"}.
    """
    y = np.asarray(img, dtype=np.float64)
    lam = params.weight
    px = np.zeros_like(y)
    py = np.zeros_like(y)
    history = []
    iterations = 0
    for it in range(1, params.max_iter + 1):
        iterations = it
        gx, gy = _grad(_div(px, py) - y / lam)
        norm = np.sqrt(gx * gx + gy * gy)
        px_new = (px + params.tau * gx) / (1.0 + params.tau * norm)
        py_new = (py + params.tau * gy) / (1.0 + params.tau * norm)
        change = max(np.abs(px_new - px).max(), np.abs(py_new - py).max())
        px, py = px_new, py_new
        if full_output:
            history.append(tv_objective(y - lam * _div(px, py), y, lam))
        if change <= params.tol:
            break
    u = y - lam * _div(px, py)
    if full_output:
        return u, {
            "iterations": iterations,
            "objective": tv_objective(u, y, lam),
            "objective_history": history,
        }
    return u


def tune_baseline_params(noisy_slices, clean_slices, data_range=3000.0):
    """Small grid search maximizing SSIM against clean on held-out slices.

    Returns (NlmParams, TvParams, log) where log records the grids and the
    chosen values.
    """
    from n2c import metrics

    noisy_slices = np.asarray(noisy_slices, dtype=np.float64)
    clean_slices = np.asarray(clean_slices, dtype=np.float64)
    sigma = float(np.mean([estimate_noise_sigma(s) for s in noisy_slices]))

    def mean_ssim(denoise_fn):
        return float(
            np.mean(
                [
                    metrics.ssim(denoise_fn(n), c, data_range=data_range)
                    for n, c in zip(noisy_slices, clean_slices)
                ]
            )
        )

    h_grid = [round(f * sigma, 3) for f in (0.6, 1.0, 1.5, 2.2)]
    nlm_scores = {
        h: mean_ssim(lambda s, h=h: nlm_denoise(s, NlmParams(h=h))) for h in h_grid
    }
    best_h = max(nlm_scores, key=nlm_scores.get)

    weight_grid = [round(f * sigma, 3) for f in (0.25, 0.5, 1.0, 2.0)]
    tv_scores = {
        w: mean_ssim(lambda s, w=w: tv_denoise(s, TvParams(weight=w)))
        for w in weight_grid
    }
    best_w = max(tv_scores, key=tv_scores.get)

    log = {
        "sigma_estimate": sigma,
        "nlm_h_grid": h_grid,
        "nlm_scores": nlm_scores,
        "nlm_h": best_h,
        "tv_weight_grid": weight_grid,
        "tv_scores": tv_scores,
        "tv_weight": best_w,
    }
    return NlmParams(h=best_h), TvParams(weight=best_w), log
