"""The verification battery behind the `verify` command.

Four checks, each against a threshold recorded in the packaged thresholds
file (values fixed by oracle runs at the default desk configuration):

  a. decomposition identities on random 64-bit triplets,
  b. noise-coupling statistics (vanishing mean, 1/sqrt(K) error decay, and a
     fully-correlated negative control that must flag),
  c. finite-difference gradient suite,
  d. aggregate equivalence defect, independent noise vs the correlated
     control.
"""

import importlib.resources
import json

import numpy as np

from n2c import gradcheck, losses, unet
from n2c import volume as V
from n2c.volume import SliceTriplet


class VerificationFailure(RuntimeError):
    """One or more verification checks missed its recorded threshold."""


def load_thresholds() -> dict:
    resource = importlib.resources.files("n2c").joinpath("data/verify_thresholds.json")
    if not resource.is_file():
        raise FileNotFoundError(
            "verification thresholds file missing from package data"
        )
    return json.loads(resource.read_text())


def _random_triplet(rng, shape=(16, 16)):
    x = [rng.standard_normal(shape) * 100.0 for _ in range(3)]
    n = [rng.standard_normal(shape) * 30.0 for _ in range(3)]
    y = [xi + ni for xi, ni in zip(x, n)]
    return SliceTriplet(
        y_prev=y[0], y_center=y[1], y_next=y[2], s=1,
        x_prev=x[0], x_center=x[1], x_next=x[2],
        n_prev=n[0], n_center=n[1], n_next=n[2],
    )


def check_identities(trials=100, seed=0):
    """Max relative residuals of both decomposition identities (64-bit)."""
    rng = np.random.default_rng(seed)
    worst = worst4 = 0.0
    for _ in range(trials):
        t = _random_triplet(rng)
        f = rng.standard_normal(t.y_center.shape) * 100.0
        bd = losses.decompose(t, f)
        scale = abs(bd.lhs)
        worst = max(worst, abs(bd.residual) / scale)
        worst4 = max(worst4, abs(bd.residual4) / scale)
    return {"trials": trials, "max_rel_residual": worst, "max_rel_residual4": worst4}


def _noise_stream(phantom, noise_template, realizations, seed0):
    for r in range(realizations):
        spec = V.NoiseSpec(
            model=noise_template.model,
            sigma=noise_template.sigma,
            coupling=noise_template.coupling,
            seed=seed0 + r,
        )
        noisy, noise = V.add_noise(phantom, spec)
        yield from V.extract_triplets(noisy, phantom, noise)


def _decade_ratios(estimate):
    sizes = estimate.prefix_sizes
    ses = estimate.prefix_std_errors
    ratios = []
    for a, b in zip(sizes, sizes[1:]):
        if b == 10 * a:
            ratios.append(ses[sizes.index(b)] / ses[sizes.index(a)])
    return ratios


def run_verification(cfg, thresholds=None) -> tuple[dict, bool]:
    """Execute all four checks; returns (report_dict, all_passed)."""
    thresholds = thresholds if thresholds is not None else load_thresholds()
    report = {"thresholds": thresholds, "checks": {}}

    # a. exact identities
    ident = check_identities(trials=cfg.verify.identity_trials)
    ident["pass"] = (
        ident["max_rel_residual"] <= thresholds["identity_max_rel_residual"]
        and ident["max_rel_residual4"] <= thresholds["identity_max_rel_residual"]
    )
    report["checks"]["identity"] = ident

    # c. gradient oracle (cheap; run before the Monte Carlo checks)
    prim = gradcheck.check_all_primitives()
    net = gradcheck.check_network_gradients()
    worst_prim = max(prim.values())
    worst_net = max(net.values())
    grad_pass = max(worst_prim, worst_net) <= thresholds["gradient_max_rel_error"]
    report["checks"]["gradients"] = {
        "max_rel_error_primitives": worst_prim,
        "max_rel_error_network": worst_net,
        "pass": grad_pass,
    }

    # b + d share their Monte Carlo streams
    phantom = V.generate_phantom(cfg.phantom)
    sim = V.slice_similarity(phantom)
    base_noise = cfg.noise[0]
    model = unet.build(cfg.model, seed=cfg.init_seed)
    realizations = cfg.verify.coupling_realizations

    rep_ind = losses.equivalence_report(
        model,
        _noise_stream(phantom, base_noise, realizations, cfg.verify.coupling_noise_seed),
        batch=64,
    )
    control_noise = V.NoiseSpec(
        model="correlated_control", sigma=base_noise.sigma, coupling=1.0,
        seed=cfg.verify.control_noise_seed,
    )
    identity_model = unet.build(cfg.model, seed=cfg.init_seed, zero_init=True)
    ctl_prev, ctl_next = losses.estimate_noise_coupling(
        identity_model,
        _noise_stream(phantom, control_noise, realizations, cfg.verify.control_noise_seed),
        batch=64,
    )
    rep_ctl = losses.equivalence_report(
        model,
        _noise_stream(phantom, control_noise, realizations, cfg.verify.control_noise_seed),
        batch=64,
    )

    z_lo, z_hi = thresholds["coupling_se_decay_range"]
    decay_ratios = _decade_ratios(rep_ind.coupling_prev) + _decade_ratios(
        rep_ind.coupling_next
    )
    coupling_pass = (
        abs(rep_ind.coupling_prev.z_score) <= thresholds["coupling_max_abs_z"]
        and abs(rep_ind.coupling_next.z_score) <= thresholds["coupling_max_abs_z"]
        and all(z_lo <= r <= z_hi for r in decay_ratios)
        and ctl_prev.z_score > thresholds["control_min_z"]
        and ctl_next.z_score > thresholds["control_min_z"]
    )
    report["checks"]["coupling"] = {
        "samples": rep_ind.triplet_count,
        "independent": {
            "prev": rep_ind.coupling_prev.to_json_dict(),
            "next": rep_ind.coupling_next.to_json_dict(),
        },
        "se_decay_ratios": decay_ratios,
        "control": {
            "prev": ctl_prev.to_json_dict(),
            "next": ctl_next.to_json_dict(),
        },
        "pass": coupling_pass,
    }

    defect_pass = (
        rep_ind.defect < thresholds["defect_max"]
        and rep_ctl.defect >= thresholds["control_defect_min_ratio"] * rep_ind.defect
    )
    report["checks"]["equivalence_defect"] = {
        "mean_slice_similarity_defect": float(sim.mean()),
        "independent": rep_ind.to_json_dict(),
        "control_defect": rep_ctl.defect,
        "defect_ratio": rep_ctl.defect / rep_ind.defect if rep_ind.defect > 0 else float("inf"),
        "pass": defect_pass,
    }

    passed = all(c["pass"] for c in report["checks"].values())
    report["passed"] = passed
    return report, passed
