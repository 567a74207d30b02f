"""Experiment configuration: one JSON document drives every CLI command.

All randomness is seeded explicitly in the document; a global seed offset
shifts every sub-seed at once so an experiment can be replicated across
independent seed sets from the command line.
"""

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

from n2c.baselines import NlmParams, TvParams
from n2c.training import EarlyStop, TrainConfig
from n2c.unet import UNetConfig
from n2c.volume import NoiseSpec, PhantomSpec

METHODS = ("noisy", "nlm", "tv", "n2c_s", "n2c_m", "supervised")


class ConfigError(ValueError):
    """Configuration failed validation; message names the offending field."""


@dataclass
class VerifySettings:
    identity_trials: int = 100
    coupling_realizations: int = 162  # x (S-2) interior slices ~= 1e4 samples
    coupling_noise_seed: int = 7000
    control_noise_seed: int = 8000

    def __post_init__(self):
        if self.identity_trials < 1:
            raise ConfigError("verify.identity_trials must be >= 1")
        if self.coupling_realizations < 1:
            raise ConfigError("verify.coupling_realizations must be >= 1")


@dataclass
class ExperimentConfig:
    phantom: PhantomSpec
    noise: list
    model: UNetConfig
    train: TrainConfig
    methods: list
    output_dir: str = "out"
    global_seed: int = 0
    init_seed: int = 42
    corpus_seeds: list = field(default_factory=list)
    corpus_epochs: int | None = None
    baseline_tuning_seed: int = 900
    verify: VerifySettings = field(default_factory=VerifySettings)
    config_sha256: str = ""

    def noise_labels(self):
        labels = [f"{spec.model}{spec.sigma:g}" for spec in self.noise]
        if len(set(labels)) != len(labels):
            labels = [f"{lab}_{i}" for i, lab in enumerate(labels)]
        return labels


def _build(section, cls, payload, **extra):
    try:
        return cls(**{**payload, **extra})
    except TypeError as err:
        raise ConfigError(f"{section}: {err}") from None
    except (ValueError, ConfigError) as err:
        raise ConfigError(f"{section}: {err}") from None


def load_config(path, seed_override=None) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    raw_text = path.read_text()
    try:
        raw = json.loads(raw_text)
    except json.JSONDecodeError as err:
        raise ConfigError(f"config is not valid JSON: {err}") from None

    known = {
        "phantom", "noise", "model", "train", "methods", "output_dir",
        "global_seed", "init_seed", "corpus_seeds", "corpus_epochs",
        "baseline_tuning_seed", "verify",
    }
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"unknown config fields: {sorted(unknown)}")
    for required in ("phantom", "noise", "methods"):
        if required not in raw:
            raise ConfigError(f"missing required config field {required!r}")

    offset = int(raw.get("global_seed", 0))
    if seed_override is not None:
        offset = int(seed_override)

    ph = dict(raw["phantom"])
    ph["dims"] = tuple(ph.get("dims", ()))
    ph["hu_range"] = tuple(ph.get("hu_range", (-80.0, 120.0)))
    ph["seed"] = int(ph.get("seed", 0)) + offset
    phantom = _build("phantom", PhantomSpec, ph)

    if not isinstance(raw["noise"], list) or not raw["noise"]:
        raise ConfigError("noise: must be a non-empty list of noise specs")
    noise = []
    for i, item in enumerate(raw["noise"]):
        item = dict(item)
        item["seed"] = int(item.get("seed", 0)) + offset
        noise.append(_build(f"noise[{i}]", NoiseSpec, item))

    model_raw = dict(raw.get("model", {}))
    init_seed = int(model_raw.pop("init_seed", 42)) + offset
    model = _build("model", UNetConfig, model_raw)

    train_raw = dict(raw.get("train", {}))
    train_raw["shuffle_seed"] = int(train_raw.get("shuffle_seed", 0)) + offset
    if "early_stop" in train_raw and train_raw["early_stop"] is not None:
        train_raw["early_stop"] = _build("train.early_stop", EarlyStop,
                                         train_raw["early_stop"])
    train = _build("train", TrainConfig, train_raw)

    methods = list(raw["methods"])
    if not methods:
        raise ConfigError("methods: must be non-empty")
    for m in methods:
        if m not in METHODS:
            raise ConfigError(f"methods: unknown method {m!r} (choose from {METHODS})")

    corpus_seeds = [int(s) + offset for s in raw.get("corpus_seeds", [])]
    if "n2c_m" in methods and not corpus_seeds:
        raise ConfigError("methods includes n2c_m but corpus_seeds is empty")
    corpus_epochs = raw.get("corpus_epochs")
    if corpus_epochs is not None:
        corpus_epochs = int(corpus_epochs)
        if corpus_epochs < 1:
            raise ConfigError("corpus_epochs must be >= 1")

    verify = _build("verify", VerifySettings, dict(raw.get("verify", {})))
    verify.coupling_noise_seed += offset
    verify.control_noise_seed += offset

    sha = hashlib.sha256(raw_text.encode()).hexdigest()
    return ExperimentConfig(
        phantom=phantom,
        noise=noise,
        model=model,
        train=train,
        methods=methods,
        output_dir=str(raw.get("output_dir", "out")),
        global_seed=offset,
        init_seed=init_seed,
        corpus_seeds=corpus_seeds,
        corpus_epochs=corpus_epochs,
        baseline_tuning_seed=int(raw.get("baseline_tuning_seed", 900)) + offset,
        verify=verify,
        config_sha256=sha,
    )


def default_nlm_params() -> NlmParams:
    return NlmParams(h=30.0)


def default_tv_params() -> TvParams:
    return TvParams(weight=15.0)
