"""Training losses plus the machinery that relates them.

Two losses drive training: plain MSE against a clean target, and the
neighbor-slice loss that replaces the target by the two adjacent noisy
slices. For analysis, each neighbor-loss evaluation decomposes exactly into
a supervised term plus terms that are constant in the network, and the
network-dependent remainder splits into a slice-curvature term and two
noise-coupling inner products; both identities hold to floating-point
precision. Monte Carlo estimators quantify how close the coupling terms are
to zero (they vanish in expectation for zero-mean noise independent across
slices).
"""

import itertools
from dataclasses import dataclass

import numpy as np

from n2c import autodiff as ad
from n2c import unet


def supervised_loss(f_out, target):
    """Mean squared error against the clean slice; differentiable."""
    return ad.mse_mean(f_out, target)


def n2c_loss(f_out, y_prev, y_next):
    """Neighbor-slice loss: MSE against each adjacent slice, equally weighted.

    For an unconstrained output the minimizer is (y_prev + y_next) / 2.
    """
    return ad.add(ad.mse_mean(f_out, y_prev), ad.mse_mean(f_out, y_next))


# -- exact decomposition ---------------------------------------------------


@dataclass
class TermBreakdown:
    """Sum-reduction decomposition of one neighbor-loss evaluation.

    lhs        = ||F - y_prev||^2 + ||F - y_next||^2
    t_sup      = 2 ||F - x||^2
    t_cross_f  = 2 (2x - y_prev - y_next)^T F
    t_cross_x  = -2 (2x - y_prev - y_next)^T x
    t_const    = ||x - y_prev||^2 + ||x - y_next||^2
    residual   = lhs - (t_sup + t_cross_f + t_cross_x + t_const)  [~0]
    curvature  = 2 (2x - x_prev - x_next)^T F
    noise_prev = -2 n_prev^T F
    noise_next = -2 n_next^T F
    residual4  = t_cross_f - (curvature + noise_prev + noise_next)  [~0]
    """

    lhs: float
    t_sup: float
    t_cross_f: float
    t_cross_x: float
    t_const: float
    residual: float
    curvature: float
    noise_prev: float
    noise_next: float
    residual4: float


def decompose(triplet, f_out) -> TermBreakdown:
    """Exact term breakdown for one triplet carrying clean and noise fields."""
    if not triplet.has_truth:
        raise ValueError("decompose needs a triplet with clean and noise fields")
    f = np.asarray(f_out, dtype=np.float64)
    if f.shape != triplet.y_center.shape:
        raise ValueError(f"f_out shape {f.shape} != slice shape {triplet.y_center.shape}")
    x = triplet.x_center.astype(np.float64)
    xp = triplet.x_prev.astype(np.float64)
    xn = triplet.x_next.astype(np.float64)
    yp = triplet.y_prev.astype(np.float64)
    yn = triplet.y_next.astype(np.float64)
    n_p = triplet.n_prev.astype(np.float64)
    n_n = triplet.n_next.astype(np.float64)

    lhs = float(np.sum((f - yp) ** 2) + np.sum((f - yn) ** 2))
    gap = 2.0 * x - yp - yn
    t_sup = 2.0 * float(np.sum((f - x) ** 2))
    t_cross_f = 2.0 * float(np.sum(gap * f))
    t_cross_x = -2.0 * float(np.sum(gap * x))
    t_const = float(np.sum((x - yp) ** 2) + np.sum((x - yn) ** 2))
    residual = lhs - (t_sup + t_cross_f + t_cross_x + t_const)
    curvature = 2.0 * float(np.sum((2.0 * x - xp - xn) * f))
    noise_prev = -2.0 * float(np.sum(n_p * f))
    noise_next = -2.0 * float(np.sum(n_n * f))
    residual4 = t_cross_f - (curvature + noise_prev + noise_next)
    return TermBreakdown(
        lhs=lhs,
        t_sup=t_sup,
        t_cross_f=t_cross_f,
        t_cross_x=t_cross_x,
        t_const=t_const,
        residual=residual,
        curvature=curvature,
        noise_prev=noise_prev,
        noise_next=noise_next,
        residual4=residual4,
    )


# -- Monte Carlo coupling estimate -----------------------------------------


@dataclass
class CouplingEstimate:
    """Statistics of the noise-output inner product n^T F over samples.

    normalized_mean divides by sigma * E||F||_2 so magnitudes are comparable
    across noise levels and output scales; prefix standard errors support the
    1/sqrt(K) convergence check over nested sample prefixes.
    """

    sample_count: int
    mean: float
    std_error: float
    normalized_mean: float
    normalized_std_error: float
    prefix_sizes: list
    prefix_std_errors: list

    @property
    def z_score(self):
        return self.mean / self.std_error if self.std_error > 0 else np.inf

    def to_json_dict(self):
        return {
            "sample_count": self.sample_count,
            "mean": self.mean,
            "std_error": self.std_error,
            "normalized_mean": self.normalized_mean,
            "normalized_std_error": self.normalized_std_error,
            "z_score": self.z_score,
            "prefix_sizes": list(self.prefix_sizes),
            "prefix_std_errors": list(self.prefix_std_errors),
        }


def _prefix_sizes(count):
    sizes = [s for s in (100, 1000, 10000, 100000) if s <= count]
    if not sizes or sizes[-1] != count:
        sizes.append(count)
    return sizes


def _make_estimate(samples, sigma, mean_f_norm):
    samples = np.asarray(samples, dtype=np.float64)
    k = samples.size
    mean = float(samples.mean())
    se = float(samples.std(ddof=1) / np.sqrt(k))
    scale = sigma * mean_f_norm
    prefix_sizes = _prefix_sizes(k)
    prefix_ses = [
        float(samples[:n].std(ddof=1) / np.sqrt(n)) for n in prefix_sizes
    ]

    def _norm(value):
        if scale > 0:
            return value / scale
        return 0.0 if value == 0 else float("inf")  # zero-noise degenerate case

    return CouplingEstimate(
        sample_count=k,
        mean=mean,
        std_error=se,
        normalized_mean=_norm(mean),
        normalized_std_error=_norm(se),
        prefix_sizes=prefix_sizes,
        prefix_std_errors=prefix_ses,
    )


def _forward_chunks(model, triplets, batch):
    """Yield (chunk_of_triplets, f_outputs[B,H,W]) consuming triplets lazily."""
    it = iter(triplets)
    while True:
        chunk = list(itertools.islice(it, batch))
        if not chunk:
            return
        stack = np.stack([t.y_center for t in chunk])
        yield chunk, unet.forward_slices(model, stack, chunk=batch)


def estimate_noise_coupling(model, triplets, batch=32):
    """Monte Carlo estimate of the two noise-coupling inner products.

    Returns (prev, next) CouplingEstimates over all supplied triplets, which
    must carry noise fields; at least 30 samples are required.
    """
    prev_samples, next_samples, f_norms = [], [], []
    noise_sq_sum, noise_count = 0.0, 0
    for chunk, f_batch in _forward_chunks(model, triplets, batch):
        for t, f in zip(chunk, f_batch):
            if t.n_prev is None or t.n_next is None:
                raise ValueError("coupling estimate needs triplets with noise fields")
            f64 = f.astype(np.float64)
            prev_samples.append(float(np.sum(t.n_prev.astype(np.float64) * f64)))
            next_samples.append(float(np.sum(t.n_next.astype(np.float64) * f64)))
            f_norms.append(float(np.linalg.norm(f64)))
            noise_sq_sum += float(np.sum(t.n_prev.astype(np.float64) ** 2))
            noise_sq_sum += float(np.sum(t.n_next.astype(np.float64) ** 2))
            noise_count += 2 * t.n_prev.size
    k = len(prev_samples)
    if k < 30:
        raise ValueError(f"coupling estimate needs at least 30 triplets, got {k}")
    sigma = np.sqrt(noise_sq_sum / noise_count)
    mean_norm = float(np.mean(f_norms))
    return (
        _make_estimate(prev_samples, sigma, mean_norm),
        _make_estimate(next_samples, sigma, mean_norm),
    )


# -- aggregate equivalence report ------------------------------------------


@dataclass
class EquivalenceReport:
    """Dataset-level sums of the decomposition and the equivalence defect.

    defect = |sum_lhs - sum_sup - sum_const - sum_cross_x| / sum_lhs, i.e.
    the network-dependent remainder (curvature + noise couplings) relative to
    the total neighbor loss; small defect means minimizing the neighbor loss
    is numerically close to minimizing the supervised loss.
    """

    triplet_count: int
    sum_lhs: float
    sum_sup: float
    sum_cross_f: float
    sum_cross_x: float
    sum_const: float
    sum_curvature: float
    sum_noise_prev: float
    sum_noise_next: float
    max_rel_residual: float
    max_rel_residual4: float
    defect: float
    coupling_prev: CouplingEstimate
    coupling_next: CouplingEstimate

    def to_json_dict(self):
        return {
            "triplet_count": self.triplet_count,
            "sum_lhs": self.sum_lhs,
            "sum_sup": self.sum_sup,
            "sum_cross_f": self.sum_cross_f,
            "sum_cross_x": self.sum_cross_x,
            "sum_const": self.sum_const,
            "sum_curvature": self.sum_curvature,
            "sum_noise_prev": self.sum_noise_prev,
            "sum_noise_next": self.sum_noise_next,
            "max_rel_residual": self.max_rel_residual,
            "max_rel_residual4": self.max_rel_residual4,
            "defect": self.defect,
            "coupling": {
                "prev": self.coupling_prev.to_json_dict(),
                "next": self.coupling_next.to_json_dict(),
            },
        }


def equivalence_report(model, triplets, batch=32) -> EquivalenceReport:
    """Decompose every triplet through the model and aggregate.

    Triplets must carry clean and noise fields; they are consumed lazily so
    callers can stream freshly generated noise realizations.
    """
    sums = dict.fromkeys(
        ("lhs", "sup", "cross_f", "cross_x", "const", "curv", "n_prev", "n_next"), 0.0
    )
    prev_samples, next_samples, f_norms = [], [], []
    noise_sq_sum, noise_count = 0.0, 0
    max_res, max_res4 = 0.0, 0.0
    count = 0
    for chunk, f_batch in _forward_chunks(model, triplets, batch):
        for t, f in zip(chunk, f_batch):
            bd = decompose(t, f)
            count += 1
            sums["lhs"] += bd.lhs
            sums["sup"] += bd.t_sup
            sums["cross_f"] += bd.t_cross_f
            sums["cross_x"] += bd.t_cross_x
            sums["const"] += bd.t_const
            sums["curv"] += bd.curvature
            sums["n_prev"] += bd.noise_prev
            sums["n_next"] += bd.noise_next
            scale = abs(bd.lhs) if bd.lhs != 0 else 1.0
            max_res = max(max_res, abs(bd.residual) / scale)
            max_res4 = max(max_res4, abs(bd.residual4) / scale)
            prev_samples.append(-0.5 * bd.noise_prev)  # n_prev^T F
            next_samples.append(-0.5 * bd.noise_next)
            f_norms.append(float(np.linalg.norm(f.astype(np.float64))))
            noise_sq_sum += float(np.sum(t.n_prev.astype(np.float64) ** 2))
            noise_sq_sum += float(np.sum(t.n_next.astype(np.float64) ** 2))
            noise_count += 2 * t.n_prev.size
    if count == 0:
        raise ValueError("equivalence report needs at least one triplet")
    sigma = np.sqrt(noise_sq_sum / noise_count)
    mean_norm = float(np.mean(f_norms))
    defect_num = abs(sums["lhs"] - sums["sup"] - sums["const"] - sums["cross_x"])
    if sums["lhs"] > 0:
        defect = defect_num / sums["lhs"]
    else:
        defect = 0.0 if defect_num == 0 else float("inf")
    return EquivalenceReport(
        triplet_count=count,
        sum_lhs=sums["lhs"],
        sum_sup=sums["sup"],
        sum_cross_f=sums["cross_f"],
        sum_cross_x=sums["cross_x"],
        sum_const=sums["const"],
        sum_curvature=sums["curv"],
        sum_noise_prev=sums["n_prev"],
        sum_noise_next=sums["n_next"],
        max_rel_residual=max_res,
        max_rel_residual4=max_res4,
        defect=defect,
        coupling_prev=_make_estimate(prev_samples, sigma, mean_norm),
        coupling_next=_make_estimate(next_samples, sigma, mean_norm),
    )
