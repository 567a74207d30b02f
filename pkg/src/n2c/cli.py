"""Command-line pipeline: phantom -> corrupt -> train -> denoise -> eval -> report,
plus the verification battery.

Every command reads one JSON experiment config and works inside the output
directory with conventional file names, writing a provenance stanza next to
each artifact. Exit codes: 0 success, 1 validation, 2 runtime,
3 verification failure.
"""

import argparse
import dataclasses
import json
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from n2c import __version__, baselines, losses, metrics, training, unet, verify
from n2c import volume as vol
from n2c.config import ConfigError, ExperimentConfig, load_config

logger = logging.getLogger("n2c")

EXIT_OK, EXIT_VALIDATION, EXIT_RUNTIME, EXIT_VERIFY = 0, 1, 2, 3

MODEL_METHODS = ("n2c_s", "n2c_m", "supervised")


def _provenance(cfg: ExperimentConfig, command, inputs, outputs):
    return {
        "tool": "n2c",
        "version": __version__,
        "command": command,
        "config_sha256": cfg.config_sha256,
        "global_seed": cfg.global_seed,
        "inputs": sorted(str(p) for p in inputs),
        "outputs": sorted(str(p) for p in outputs),
    }


def _write_provenance(artifact_path, stanza):
    side = Path(str(artifact_path) + ".provenance.json")
    side.write_text(json.dumps(stanza, indent=2) + "\n")


def _load_required(path):
    if not Path(path).with_suffix(".vol").exists():
        raise ConfigError(f"missing required input volume {path}.vol "
                          f"(run the earlier pipeline stages first)")
    return vol.load_volume(path)


def _corpus_volumes(cfg: ExperimentConfig, noise_spec):
    """Deterministic offline training corpus for the frozen-model method."""
    out = []
    for j, seed in enumerate(cfg.corpus_seeds):
        phantom = dataclasses.replace(cfg.phantom, seed=seed)
        spec = dataclasses.replace(noise_spec, seed=noise_spec.seed + 1000 * (j + 1))
        noisy, _ = vol.add_noise(vol.generate_phantom(phantom), spec)
        out.append(noisy)
    return out


# -- commands ---------------------------------------------------------------


def cmd_phantom(cfg, out_dir, threads):
    phantom = vol.generate_phantom(cfg.phantom)
    sim = vol.slice_similarity(phantom)
    paths = vol.save_volume(phantom, out_dir / "clean")
    _write_provenance(paths[0], _provenance(cfg, "phantom", [], paths))
    logger.info("phantom %s written (mean similarity defect %.4f)",
                paths[0], sim.mean())
    return EXIT_OK


def cmd_corrupt(cfg, out_dir, threads):
    clean = _load_required(out_dir / "clean")
    for spec, label in zip(cfg.noise, cfg.noise_labels()):
        noisy, noise = vol.add_noise(clean, spec)
        p_noisy = vol.save_volume(noisy, out_dir / f"noisy_{label}")
        p_noise = vol.save_volume(noise, out_dir / f"noise_{label}")
        stanza = _provenance(cfg, "corrupt", [out_dir / "clean.vol"],
                             list(p_noisy) + list(p_noise))
        _write_provenance(p_noisy[0], stanza)
        _write_provenance(p_noise[0], stanza)
        logger.info("noise level %s written", label)
    return EXIT_OK


def _train_one(cfg, out_dir, method, label, noise_spec):
    inputs = [out_dir / f"noisy_{label}.vol"]
    if method == "n2c_s":
        noisy = _load_required(out_dir / f"noisy_{label}")
        train_cfg = dataclasses.replace(cfg.train, mode="n2c")
        model = unet.build(cfg.model, seed=cfg.init_seed)
        model, log = training.train_n2c([noisy], model, train_cfg)
    elif method == "supervised":
        noisy = _load_required(out_dir / f"noisy_{label}")
        clean = _load_required(out_dir / "clean")
        inputs.append(out_dir / "clean.vol")
        train_cfg = dataclasses.replace(cfg.train, mode="supervised")
        model = unet.build(cfg.model, seed=cfg.init_seed)
        model, log = training.train_supervised([(noisy, clean)], model, train_cfg)
    else:  # n2c_m
        corpus = _corpus_volumes(cfg, noise_spec)
        # default: match the single-volume optimization budget in total steps
        epochs = cfg.corpus_epochs or max(1, round(cfg.train.epochs / len(corpus)))
        train_cfg = dataclasses.replace(cfg.train, mode="n2c", epochs=epochs)
        inputs = []
        model = unet.build(cfg.model, seed=cfg.init_seed)
        model, log = training.train_n2c(corpus, model, train_cfg)

    ckpt = out_dir / f"model_{method}_{label}.ckpt"
    unet.save_checkpoint(
        model, ckpt,
        metadata={
            "method": method,
            "noise_label": label,
            "epochs": log.summary["epochs_run"],
            "final_epoch_loss": log.summary["final_epoch_loss"],
        },
    )
    log_path = out_dir / f"train_log_{method}_{label}.csv"
    log.to_csv(log_path)
    _write_provenance(ckpt, _provenance(cfg, "train", inputs, [ckpt, log_path]))
    logger.info("%s/%s: %d steps, final epoch loss %.4g", method, label,
                log.summary["steps"], log.summary["final_epoch_loss"])


def cmd_train(cfg, out_dir, threads):
    methods = [m for m in cfg.methods if m in MODEL_METHODS]
    if not methods:
        logger.info("no trainable methods configured; nothing to do")
    for spec, label in zip(cfg.noise, cfg.noise_labels()):
        for method in methods:
            _train_one(cfg, out_dir, method, label, spec)
    return EXIT_OK


def _denoise_with_baseline(noisy, denoise_fn, threads):
    slices = list(noisy.data)
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            out = list(pool.map(denoise_fn, slices))
    else:
        out = [denoise_fn(s) for s in slices]
    data = np.clip(np.stack(out), vol.HU_MIN, vol.HU_MAX).astype(np.float32)
    return noisy.with_data(data, kind="denoised")


def _tuned_baseline_params(cfg, out_dir, label, noise_spec):
    """Grid-search NLM/TV parameters on a held-out phantom; cache per label."""
    cache = out_dir / f"baselines_{label}.json"
    if cache.exists():
        payload = json.loads(cache.read_text())
        return (baselines.NlmParams(h=payload["nlm_h"]),
                baselines.TvParams(weight=payload["tv_weight"]))
    held_out = vol.generate_phantom(
        dataclasses.replace(cfg.phantom, seed=cfg.baseline_tuning_seed)
    )
    tune_noise = dataclasses.replace(noise_spec, seed=noise_spec.seed + 555)
    noisy_tune, _ = vol.add_noise(held_out, tune_noise)
    mid = held_out.dims[0] // 2
    sl = slice(mid - 2, mid + 2)
    nlm_p, tv_p, log = baselines.tune_baseline_params(
        noisy_tune.data[sl], held_out.data[sl]
    )
    cache.write_text(json.dumps(
        {**log, "provenance": _provenance(cfg, "denoise", [], [cache])}, indent=2
    ) + "\n")
    logger.info("baseline tuning %s: nlm h=%.3g tv weight=%.3g", label,
                nlm_p.h, tv_p.weight)
    return nlm_p, tv_p


def cmd_denoise(cfg, out_dir, threads):
    for spec, label in zip(cfg.noise, cfg.noise_labels()):
        noisy = _load_required(out_dir / f"noisy_{label}")
        for method in cfg.methods:
            if method == "noisy":
                continue
            if method in ("nlm", "tv"):
                nlm_p, tv_p = _tuned_baseline_params(cfg, out_dir, label, spec)
                if method == "nlm":
                    denoised = _denoise_with_baseline(
                        noisy, lambda s: baselines.nlm_denoise(s, nlm_p), threads
                    )
                else:
                    denoised = _denoise_with_baseline(
                        noisy, lambda s: baselines.tv_denoise(s, tv_p), threads
                    )
                inputs = [out_dir / f"noisy_{label}.vol"]
            else:
                ckpt = out_dir / f"model_{method}_{label}.ckpt"
                if not ckpt.exists():
                    raise ConfigError(f"missing checkpoint {ckpt}; run `n2c train` first")
                model = unet.load_checkpoint(ckpt, expected_config=cfg.model)
                denoised = training.denoise_volume(model, noisy)
                inputs = [out_dir / f"noisy_{label}.vol", ckpt]
            paths = vol.save_volume(denoised, out_dir / f"denoised_{method}_{label}")
            _write_provenance(paths[0], _provenance(cfg, "denoise", inputs, paths))
            logger.info("denoised %s/%s", method, label)
    return EXIT_OK


def cmd_eval(cfg, out_dir, threads):
    clean = _load_required(out_dir / "clean")
    for spec, label in zip(cfg.noise, cfg.noise_labels()):
        for method in cfg.methods:
            if method == "noisy":
                target = _load_required(out_dir / f"noisy_{label}")
                inputs = [out_dir / f"noisy_{label}.vol"]
            else:
                target = _load_required(out_dir / f"denoised_{method}_{label}")
                inputs = [out_dir / f"denoised_{method}_{label}.vol"]
            target = target.with_data(target.data, kind="denoised")
            record = metrics.evaluate_volume(target, clean, method)
            json_path = out_dir / f"eval_{method}_{label}.json"
            csv_path = out_dir / f"eval_{method}_{label}.csv"
            payload = record.to_json_dict()
            payload["noise_label"] = label
            payload["noise_sigma"] = spec.sigma
            payload["provenance"] = _provenance(
                cfg, "eval", inputs + [out_dir / "clean.vol"], [json_path, csv_path]
            )
            json_path.write_text(json.dumps(payload, indent=2) + "\n")
            with open(csv_path, "w") as fh:
                fh.write("method,slice,rmse_hu,ssim\n")
                for row in record.csv_rows():
                    fh.write(f"{row[0]},{row[1]},{row[2]:.6f},{row[3]:.8f}\n")
            logger.info("eval %s/%s: rmse %.2f+-%.2f ssim %.4f+-%.4f",
                        method, label, record.rmse_mean, record.rmse_sd,
                        record.ssim_mean, record.ssim_sd)
    return EXIT_OK


def _format_cell(mean, sd, rank):
    marker = {0: " (best)", 1: " (2nd)"}.get(rank, "")
    return f"{mean:.2f}±{sd:.2f}{marker}"


def cmd_report(cfg, out_dir, threads):
    evals = {}
    for path in sorted(out_dir.glob("eval_*.json")):
        payload = json.loads(path.read_text())
        if "provenance" not in payload:
            raise ConfigError(f"{path} lacks a provenance stanza; refusing to report")
        evals.setdefault(payload["noise_label"], {})[payload["method"]] = payload
    if not evals:
        raise ConfigError(f"no eval_*.json files under {out_dir}; run `n2c eval` first")
    labels = sorted(evals)
    method_sets = {label: set(evals[label]) for label in labels}
    if len({frozenset(s) for s in method_sets.values()}) != 1:
        raise ConfigError(f"inconsistent method sets across noise levels: {method_sets}")
    methods = sorted(method_sets[labels[0]])

    table = {}
    for label in labels:
        rmse_rank = sorted(methods, key=lambda m: evals[label][m]["rmse_hu"]["mean"])
        ssim_rank = sorted(methods, key=lambda m: -evals[label][m]["ssim"]["mean"])
        table[label] = {
            m: {
                "rmse": evals[label][m]["rmse_hu"],
                "ssim": evals[label][m]["ssim"],
                "rmse_rank": rmse_rank.index(m),
                "ssim_rank": ssim_rank.index(m),
            }
            for m in methods
        }

    lines = [
        "# Denoising results",
        "",
        "Noise levels are gaussian-sigma sweeps standing in for tube-current",
        "variation; labels give the injector model and sigma in HU.",
        "Cells are MEAN±SD over slices; (best)/(2nd) mark the column winners.",
        "",
    ]
    header = ["Method"]
    for label in labels:
        header += [f"{label} RMSE(HU)", f"{label} SSIM"]
    lines.append("| " + " | ".join(header) + " |")
    lines.append("|" + "---|" * len(header))
    for m in methods:
        row = [m]
        for label in labels:
            cell = table[label][m]
            row.append(_format_cell(cell["rmse"]["mean"], cell["rmse"]["sd"],
                                    cell["rmse_rank"]))
            row.append(_format_cell(cell["ssim"]["mean"], cell["ssim"]["sd"],
                                    cell["ssim_rank"]))
        lines.append("| " + " | ".join(row) + " |")

    md_path = out_dir / "report.md"
    json_path = out_dir / "report.json"
    md_path.write_text("\n".join(lines) + "\n")
    json_path.write_text(json.dumps(
        {
            "noise_levels": {
                label: {
                    m: {"rmse_hu": {k: v for k, v in table[label][m]["rmse"].items()
                                    if k != "per_slice"},
                        "ssim": {k: v for k, v in table[label][m]["ssim"].items()
                                 if k != "per_slice"},
                        "rmse_rank": table[label][m]["rmse_rank"],
                        "ssim_rank": table[label][m]["ssim_rank"]}
                    for m in methods
                }
                for label in labels
            },
            "provenance": _provenance(
                cfg, "report",
                [out_dir / f"eval_{m}_{lab}.json" for lab in labels for m in methods],
                [md_path, json_path],
            ),
        },
        indent=2,
    ) + "\n")
    logger.info("report written to %s", md_path)
    return EXIT_OK


def cmd_verify(cfg, out_dir, threads):
    report, passed = verify.run_verification(cfg)
    report["provenance"] = _provenance(cfg, "verify", [], [out_dir / "verify.json"])
    (out_dir / "verify.json").write_text(json.dumps(report, indent=2) + "\n")
    for name, check in report["checks"].items():
        logger.info("verify %s: %s", name, "pass" if check["pass"] else "FAIL")
    if not passed:
        logger.error("verification failed; see %s", out_dir / "verify.json")
        return EXIT_VERIFY
    logger.info("all verification checks passed")
    return EXIT_OK


COMMANDS = {
    "phantom": cmd_phantom,
    "corrupt": cmd_corrupt,
    "train": cmd_train,
    "denoise": cmd_denoise,
    "eval": cmd_eval,
    "verify": cmd_verify,
    "report": cmd_report,
}


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="n2c",
        description="Self-supervised thin-slice denoising pipeline",
    )
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("--config", required=True, help="experiment config JSON")
    parser.add_argument("--out", default=None, help="output directory override")
    parser.add_argument("--seed", type=int, default=None,
                        help="override the global seed offset")
    parser.add_argument("--threads", type=int, default=1,
                        help="worker threads for slice-parallel stages")
    args = parser.parse_args(argv)

    logging.basicConfig(level=logging.INFO, format="%(name)s: %(message)s")
    try:
        cfg = load_config(args.config, seed_override=args.seed)
        out_dir = Path(args.out if args.out is not None else cfg.output_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        return COMMANDS[args.command](cfg, out_dir, max(1, args.threads))
    except (ConfigError, FileNotFoundError) as err:
        logger.error("%s", err)
        return EXIT_VALIDATION
    except ValueError as err:
        logger.error("validation error: %s", err)
        return EXIT_VALIDATION
    except Exception as err:  # runtime failures
        logger.error("runtime error: %s", err)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
