"""The slice denoiser: a configurable-depth U-Net over single-channel slices.

Inputs are HU images; they are windowed to [0, 1] over [-1000, 2000] HU
before entering the network and mapped back afterwards. By default the
network predicts a residual added to its input, so the all-zero parameter
set is exactly the identity map.
"""

import json
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from n2c import autodiff as ad

HU_WINDOW = (-1000.0, 2000.0)
HU_SCALE = HU_WINDOW[1] - HU_WINDOW[0]

CHECKPOINT_MAGIC = b"N2CK"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class UNetConfig:
    levels: int = 3
    base_features: int = 8
    convs_per_level: int = 2
    in_channels: int = 1
    out_channels: int = 1
    residual: bool = True

    def __post_init__(self):
        if self.levels < 1:
            raise ValueError("levels must be >= 1")
        if self.base_features < 1:
            raise ValueError("base_features must be >= 1")
        if self.convs_per_level < 1:
            raise ValueError("convs_per_level must be >= 1")


@dataclass
class ModelState:
    """Network configuration plus named parameter tensors."""

    config: UNetConfig
    params: dict[str, ad.Tensor]
    init_seed: int
    dtype: np.dtype = field(default=np.dtype(np.float32))

    def parameters(self):
        return list(self.params.values())


def param_shapes(config: UNetConfig) -> dict[str, tuple]:
    """Parameter name -> shape, in build order, fully determined by config."""
    shapes: dict[str, tuple] = {}
    ch = config.in_channels
    for lvl in range(config.levels):
        ch_out = config.base_features * 2 ** lvl
        for i in range(config.convs_per_level):
            shapes[f"enc{lvl}_conv{i}_weight"] = (ch_out, ch, 3, 3)
            shapes[f"enc{lvl}_conv{i}_bias"] = (ch_out,)
            ch = ch_out
    for lvl in reversed(range(config.levels - 1)):
        skip = config.base_features * 2 ** lvl
        ch_in = ch + skip
        for i in range(config.convs_per_level):
            shapes[f"dec{lvl}_conv{i}_weight"] = (skip, ch_in, 3, 3)
            shapes[f"dec{lvl}_conv{i}_bias"] = (skip,)
            ch_in = skip
        ch = skip
    shapes["out_conv_weight"] = (config.out_channels, ch, 3, 3)
    shapes["out_conv_bias"] = (config.out_channels,)
    return shapes


def parameter_count(config: UNetConfig) -> int:
    return sum(int(np.prod(s)) for s in param_shapes(config).values())


def build(config: UNetConfig, seed: int, dtype=np.float32, zero_init=False) -> ModelState:
    """He-initialized hidden kernels (variance 2/fan_in), zero biases,
    per-seed deterministic.

    The output conv starts at zero so the residual network begins as the
    exact identity while every hidden unit stays trainable; starting from a
    random output stage instead makes suppressing it (through dying relus)
    the nearest local minimum, which freezes the network at the identity.
    zero_init is a test/diagnostic override zeroing every parameter.
    """
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in param_shapes(config).items():
        if name.endswith("bias") or name == "out_conv_weight" or zero_init:
            data = np.zeros(shape, dtype=dtype)
        else:
            fan_in = int(np.prod(shape[1:]))
            data = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape).astype(dtype)
        params[name] = ad.Tensor(data, requires_grad=True)
    return ModelState(config=config, params=params, init_seed=seed, dtype=np.dtype(dtype))


def _check_spatial(config: UNetConfig, h, w):
    div = 2 ** (config.levels - 1)
    if h % div or w % div:
        raise ValueError(
            f"spatial dims {h}x{w} not divisible by {div} (levels={config.levels})"
        )


def forward(state: ModelState, x: ad.Tensor) -> ad.Tensor:
    """Map an HU batch [B,1,H,W] through the network; same shape out."""
    cfg = state.config
    if x.data.ndim != 4 or x.shape[1] != cfg.in_channels:
        raise ValueError(f"expected input [B,{cfg.in_channels},H,W], got {x.shape}")
    _check_spatial(cfg, x.shape[2], x.shape[3])
    p = state.params

    u = ad.mul(ad.add(x, -HU_WINDOW[0]), 1.0 / HU_SCALE)
    feats = u
    skips = []
    for lvl in range(cfg.levels):
        for i in range(cfg.convs_per_level):
            feats = ad.relu(
                ad.conv2d(feats, p[f"enc{lvl}_conv{i}_weight"],
                          p[f"enc{lvl}_conv{i}_bias"], padding=1)
            )
        if lvl < cfg.levels - 1:
            skips.append(feats)
            feats = ad.downsample2x(feats)
    for lvl in reversed(range(cfg.levels - 1)):
        feats = ad.concat_channels(ad.upsample2x(feats), skips[lvl])
        for i in range(cfg.convs_per_level):
            feats = ad.relu(
                ad.conv2d(feats, p[f"dec{lvl}_conv{i}_weight"],
                          p[f"dec{lvl}_conv{i}_bias"], padding=1)
            )
    r = ad.conv2d(feats, p["out_conv_weight"], p["out_conv_bias"], padding=1)
    if cfg.residual:
        return ad.add(x, ad.mul(r, HU_SCALE))
    return ad.add(ad.mul(r, HU_SCALE), HU_WINDOW[0])


def forward_slices(state: ModelState, slices: np.ndarray, chunk=32) -> np.ndarray:
    """Graph-free inference over an [S,H,W] HU stack, chunked over slices."""
    slices = np.asarray(slices)
    if slices.ndim != 3:
        raise ValueError(f"expected [S,H,W] slices, got shape {slices.shape}")
    out = np.empty_like(slices, dtype=state.dtype)
    with ad.no_grad():
        for start in range(0, slices.shape[0], chunk):
            batch = slices[start : start + chunk][:, None].astype(state.dtype)
            out[start : start + chunk] = forward(state, ad.Tensor(batch)).data[:, 0]
    return out


# -- checkpoints ----------------------------------------------------------


def save_checkpoint(state: ModelState, path, metadata: dict | None = None):
    header = {
        "config": asdict(state.config),
        "init_seed": state.init_seed,
        "dtype": np.dtype(state.dtype).name,
        "metadata": metadata or {},
        "params": [
            {"name": name, "shape": list(t.shape)} for name, t in state.params.items()
        ],
    }
    blob = json.dumps(header).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(blob)))
        fh.write(blob)
        for t in state.params.values():
            fh.write(np.ascontiguousarray(t.data).astype(f"<{t.data.dtype.kind}{t.data.dtype.itemsize}").tobytes())


def _read_header(fh, path):
    magic = fh.read(4)
    if magic != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: bad checkpoint magic {magic!r}")
    version, hlen = struct.unpack("<II", fh.read(8))
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    return json.loads(fh.read(hlen).decode())


def checkpoint_metadata(path) -> dict:
    with open(path, "rb") as fh:
        return _read_header(fh, path)["metadata"]


def load_checkpoint(path, expected_config: UNetConfig | None = None) -> ModelState:
    with open(path, "rb") as fh:
        header = _read_header(fh, path)
        config = UNetConfig(**header["config"])
        if expected_config is not None and config != expected_config:
            raise ValueError(
                f"checkpoint config mismatch: file has {config}, expected {expected_config}"
            )
        expected = param_shapes(config)
        listed = {p["name"]: tuple(p["shape"]) for p in header["params"]}
        if listed != expected:
            raise ValueError(
                f"{path}: checkpoint shape table inconsistent with config "
                f"{config} (got {listed})"
            )
        dtype = np.dtype(header["dtype"])
        params = {}
        for entry in header["params"]:
            shape = tuple(entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            raw = fh.read(count * dtype.itemsize)
            if len(raw) != count * dtype.itemsize:
                raise ValueError(f"{path}: truncated parameter payload")
            data = np.frombuffer(raw, dtype=dtype.newbyteorder("<")).reshape(shape)
            if not np.isfinite(data).all():
                raise ValueError(f"{path}: non-finite values in {entry['name']}")
            params[entry["name"]] = ad.Tensor(data.astype(dtype), requires_grad=True)
    return ModelState(config=config, params=params, init_seed=header["init_seed"],
                      dtype=dtype)
