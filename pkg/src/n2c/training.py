"""Training loops and full-volume inference.

Losses are evaluated in normalized units (the HU window mapped to [0, 1]) so
the default learning rate behaves the same across noise levels and slice
sizes. The neighbor-slice mode trains on interior triplets only; supervised
mode uses every slice, boundaries included. Runs are bit-reproducible for
fixed seeds in single-threaded mode.
"""

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from n2c import autodiff as ad
from n2c import losses, unet
from n2c.volume import Volume, extract_triplets

logger = logging.getLogger(__name__)

TRAIN_MODES = ("n2c", "supervised")
_NORM = 1.0 / unet.HU_SCALE ** 2  # HU-unit MSE -> normalized-unit MSE


class TrainingDiverged(RuntimeError):
    """Raised when the training loss stops being finite."""


@dataclass(frozen=True)
class EarlyStop:
    patience: int = 5
    min_delta: float = 0.0


@dataclass(frozen=True)
class TrainConfig:
    mode: str = "n2c"
    lr: float = 1e-4
    batch_size: int = 1
    epochs: int = 30
    shuffle_seed: int = 0
    log_every: int = 200
    early_stop: EarlyStop | None = None

    def __post_init__(self):
        if self.mode not in TRAIN_MODES:
            raise ValueError(f"unknown train mode {self.mode!r}")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.lr <= 0:
            raise ValueError("lr must be positive")


@dataclass
class StepRecord:
    step: int
    epoch: int
    loss: float
    wall_time: float


@dataclass
class TrainLog:
    steps: list = field(default_factory=list)
    epoch_means: list = field(default_factory=list)
    summary: dict = field(default_factory=dict)

    def to_csv(self, path):
        with open(path, "w") as fh:
            fh.write("step,epoch,loss,wall_time_s\n")
            for rec in self.steps:
                fh.write(f"{rec.step},{rec.epoch},{rec.loss:.10g},{rec.wall_time:.6f}\n")


def _norm_batch(slices, dtype):
    """Stack 2D HU slices into a [B,1,H,W] tensor batch."""
    return ad.Tensor(np.ascontiguousarray(np.stack(slices)[:, None], dtype=dtype))


def _run_loop(model, items, loss_fn, cfg):
    """Shared epoch/step loop; items are shuffled per epoch, loss_fn maps a
    list of items to a scalar loss tensor."""
    rng = np.random.default_rng(cfg.shuffle_seed)
    optimizer = ad.Adam(model.parameters(), lr=cfg.lr)
    log = TrainLog()
    step = 0
    best = np.inf
    stall = 0
    t0 = time.perf_counter()
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(items))
        epoch_losses = []
        for start in range(0, len(order), cfg.batch_size):
            batch = [items[i] for i in order[start : start + cfg.batch_size]]
            optimizer.zero_grad()
            loss = loss_fn(batch)
            value = loss.item()
            if not np.isfinite(value):
                tail = [r.loss for r in log.steps[-5:]]
                raise TrainingDiverged(
                    f"non-finite loss {value} at step {step} (lr={cfg.lr}, "
                    f"recent losses {tail})"
                )
            loss.backward()
            optimizer.step()
            step += 1
            epoch_losses.append(value)
            log.steps.append(
                StepRecord(step=step, epoch=epoch, loss=value,
                           wall_time=time.perf_counter() - t0)
            )
            if cfg.log_every and step % cfg.log_every == 0:
                logger.info("step %d epoch %d loss %.6g", step, epoch, value)
        mean_loss = float(np.mean(epoch_losses))
        log.epoch_means.append(mean_loss)
        logger.info("epoch %d mean loss %.6g", epoch, mean_loss)
        if cfg.early_stop is not None:
            if best - mean_loss > cfg.early_stop.min_delta:
                best = mean_loss
                stall = 0
            else:
                stall += 1
                if stall >= cfg.early_stop.patience:
                    logger.info("early stop at epoch %d", epoch)
                    break
    log.summary = {
        "steps": step,
        "epochs_run": len(log.epoch_means),
        "final_epoch_loss": log.epoch_means[-1],
        "wall_time_s": time.perf_counter() - t0,
    }
    return log


def train_n2c(volumes, model, cfg: TrainConfig):
    """Train against neighbor slices over all interior triplets of all volumes."""
    if cfg.mode != "n2c":
        raise ValueError(f"train_n2c requires mode='n2c', got {cfg.mode!r}")
    triplets = []
    for k, vol in enumerate(volumes):
        triplets.extend(extract_triplets(vol, volume_index=k))
    dtype = model.dtype

    def loss_fn(batch):
        x = _norm_batch([t.y_center for t in batch], dtype)
        y_prev = _norm_batch([t.y_prev for t in batch], dtype)
        y_next = _norm_batch([t.y_next for t in batch], dtype)
        out = unet.forward(model, x)
        return ad.mul(losses.n2c_loss(out, y_prev, y_next), _NORM)

    log = _run_loop(model, triplets, loss_fn, cfg)
    return model, log


def train_supervised(pairs, model, cfg: TrainConfig):
    """Train against clean targets over every slice (boundaries included)."""
    if cfg.mode != "supervised":
        raise ValueError(f"train_supervised requires mode='supervised', got {cfg.mode!r}")
    items = []
    for noisy, clean in pairs:
        if noisy.dims != clean.dims:
            raise ValueError(f"pair dims mismatch: {noisy.dims} vs {clean.dims}")
        for s in range(noisy.dims[0]):
            items.append((noisy.data[s], clean.data[s]))
    dtype = model.dtype

    def loss_fn(batch):
        x = _norm_batch([item[0] for item in batch], dtype)
        target = _norm_batch([item[1] for item in batch], dtype)
        out = unet.forward(model, x)
        return ad.mul(losses.supervised_loss(out, target), _NORM)

    log = _run_loop(model, items, loss_fn, cfg)
    return model, log


def denoise_volume(model, volume: Volume) -> Volume:
    """Map every slice (boundaries included) through the network."""
    from n2c.volume import HU_MAX, HU_MIN

    out = unet.forward_slices(model, volume.data, chunk=16)
    return volume.with_data(np.clip(out, HU_MIN, HU_MAX), kind="denoised")


def n2c_loss_floor(volumes) -> float:
    """Mean over triplets of the per-triplet minimum of the neighbor loss
    (normalized units): the loss cannot converge below this data floor."""
    floors = []
    for vol in volumes:
        for t in extract_triplets(vol):
            d = (t.y_prev.astype(np.float64) - t.y_next.astype(np.float64))
            floors.append(np.mean(d * d) / 2.0 * _NORM)
    return float(np.mean(floors))
