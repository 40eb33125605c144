"""Masked-image-modeling pre-training."""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import AdamState, Tensor
from .codec import LoadImage
from .errors import ConfigError, ContractError, ShapeError, TrainingDiverged
from .model import ModelConfig, ModelState, init_model, mae_forward, save_checkpoint
from .patcher import MaskPattern, grid_mask, patchify, random_mask, unpatchify
from .synthgen import derive_seed

log = logging.getLogger(__name__)

LOSS_SCOPES = ("masked_only", "all_pixels")


@dataclass
class PretrainConfig:
    batch_size: int = 64
    epochs: int = 50
    steps: int = 0  # > 0 caps training at this many optimizer steps
    dropout: float = 0.1
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    mask_mode: str = "grid"
    grid_parity: str = "alternate"  # or "0" / "1"
    mask_ratio: float = 0.5
    loss_scope: str = "masked_only"
    seed: int = 0
    checkpoint_every: int = 10
    val_fraction: float = 0.05
    val_every: int = 1  # epochs between validation passes; 0 = only at the end

    def __post_init__(self):
        if self.batch_size < 1 or self.epochs < 1:
            raise ConfigError("batch_size and epochs must be >= 1")
        if self.loss_scope not in LOSS_SCOPES:
            raise ConfigError(f"loss_scope must be one of {LOSS_SCOPES}, got {self.loss_scope!r}")
        if self.mask_mode not in ("grid", "random"):
            raise ConfigError(f"mask_mode must be grid or random, got {self.mask_mode!r}")
        if self.grid_parity not in ("alternate", "0", "1"):
            raise ConfigError(f"grid_parity must be alternate, 0 or 1, got {self.grid_parity!r}")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ConfigError("val_fraction must be in [0, 1)")

    def to_items(self) -> dict[str, str]:
        return {f"pretrain.{k}": str(v) for k, v in asdict(self).items()}


@dataclass
class LogRow:
    epoch: int
    step: int
    loss: float
    val_loss: float
    val_nmae: float
    wall_time: float
    mask_parity: int
    mask: str


@dataclass
class TrainLog:
    rows: list[LogRow] = field(default_factory=list)

    def losses(self) -> list[float]:
        return [r.loss for r in self.rows]

    def write_csv(self, path: Path) -> None:
        names = list(LogRow.__dataclass_fields__)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(names)
            for r in self.rows:
                w.writerow(
                    [("" if isinstance(v, float) and math.isnan(v) else (repr(v) if isinstance(v, float) else v))
                     for v in (getattr(r, n) for n in names)]
                )

    @classmethod
    def read_csv(cls, path: Path) -> "TrainLog":
        rows = []
        with open(path, newline="") as fh:
            for rec in csv.DictReader(fh):
                rows.append(LogRow(
                    epoch=int(rec["epoch"]), step=int(rec["step"]), loss=float(rec["loss"]),
                    val_loss=float(rec["val_loss"] or "nan"), val_nmae=float(rec["val_nmae"] or "nan"),
                    wall_time=float(rec["wall_time"]), mask_parity=int(rec["mask_parity"]),
                    mask=rec["mask"],
                ))
        return cls(rows)


def _mask_weights(pattern: MaskPattern, shape: tuple[int, ...], scope: str) -> np.ndarray | None:
    if scope == "all_pixels":
        return None
    w = np.zeros(shape)
    w[..., pattern.masked_indices(), :] = 1.0
    return w


def patch_loss(pred: Tensor, target: np.ndarray, pattern: MaskPattern, scope: str = "masked_only") -> Tensor:
    """Mean squared error over patch values, restricted to masked patches
    unless ``scope == "all_pixels"``."""
    if pred.shape != target.shape:
        raise ShapeError(f"prediction {pred.shape} vs target {target.shape}")
    if scope not in LOSS_SCOPES:
        raise ContractError(f"unknown loss scope {scope!r}")
    sq = ad.square(ad.sub(pred, Tensor(target)))
    w = _mask_weights(pattern, target.shape, scope)
    if w is None:
        return ad.mean(sq)
    count = w.sum()
    if count == 0:
        raise ContractError("masked_only loss with an empty mask")
    return ad.scale(ad.sum(ad.mul(sq, Tensor(w))), 1.0 / count)


def mae_loss(
    reconstructed: np.ndarray,
    original: np.ndarray,
    pattern: MaskPattern,
    scope: str = "masked_only",
    patch_size: int = 4,
) -> float:
    """Image-space wrapper around ``patch_loss`` for (..., 24, 24, 3) arrays."""
    rec = np.asarray(reconstructed, dtype=np.float64)
    orig = np.asarray(original, dtype=np.float64)
    if rec.shape != orig.shape:
        raise ShapeError(f"reconstructed {rec.shape} vs original {orig.shape}")
    from .patcher import PatchGrid

    grid = PatchGrid(patch_size, rec.shape[-3], rec.shape[-2], rec.shape[-1])
    return patch_loss(Tensor(patchify(rec, grid)), patchify(orig, grid), pattern, scope).item()


def reconstruction_nmae(
    reconstructed: np.ndarray,
    original: np.ndarray,
    pattern: MaskPattern,
    patch_size: int = 4,
) -> float:
    """Mean absolute error (percent) over masked pixels of the load channel."""
    if pattern.masked_count == 0:
        raise ContractError("reconstruction_nmae: mask hides no patches")
    rec = np.asarray(reconstructed, dtype=np.float64)
    orig = np.asarray(original, dtype=np.float64)
    if rec.shape != orig.shape:
        raise ShapeError(f"reconstructed {rec.shape} vs original {orig.shape}")
    pixel_mask = np.repeat(np.repeat(pattern.masked, patch_size, axis=0), patch_size, axis=1)
    err = np.abs(rec[..., 0] - orig[..., 0])[..., pixel_mask]
    return 100.0 * float(err.mean())


def _as_array(images) -> np.ndarray:
    if isinstance(images, np.ndarray):
        arr = images
    else:
        arr = np.stack([im.pixels if isinstance(im, LoadImage) else im for im in images])
    if arr.ndim != 4 or len(arr) == 0:
        raise ContractError("dataset must be a nonempty stack of (days, hours, 3) images")
    return np.asarray(arr, dtype=np.float64)


def reconstruct(state: ModelState, images: np.ndarray, pattern: MaskPattern) -> np.ndarray:
    """Evaluation-mode reconstruction as images."""
    pred = mae_forward(state, images, pattern)
    return unpatchify(pred.data, state.config.grid)


def evaluate_reconstruction(
    state: ModelState,
    images: np.ndarray,
    scope: str = "masked_only",
    batch_size: int = 64,
) -> tuple[float, float]:
    """(loss, nMAE %) averaged over both checkerboard parities."""
    images = _as_array(images)
    losses, nmaes, weights = [], [], []
    for parity in (0, 1):
        pattern = grid_mask(state.config.grid.rows, state.config.grid.cols, parity)
        for s in range(0, len(images), batch_size):
            chunk = images[s:s + batch_size]
            pred = mae_forward(state, chunk, pattern)
            target = patchify(chunk, state.config.grid)
            losses.append(patch_loss(pred, target, pattern, scope).item())
            nmaes.append(reconstruction_nmae(unpatchify(pred.data, state.config.grid), chunk, pattern,
                                             state.config.patch_size))
            weights.append(len(chunk))
    w = np.asarray(weights, dtype=np.float64)
    return float(np.dot(losses, w) / w.sum()), float(np.dot(nmaes, w) / w.sum())


def split_validation(n: int, fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """(train indices, validation indices) via a seeded shuffle."""
    order = np.random.default_rng(derive_seed(seed, "validation")).permutation(n)
    n_val = int(round(fraction * n))
    if fraction > 0 and n > 1:
        n_val = max(n_val, 1)
    n_val = min(n_val, n - 1)
    return np.sort(order[n_val:]), np.sort(order[:n_val])


@dataclass
class PretrainResult:
    state: ModelState
    log: TrainLog
    optimizer: AdamState
    val_indices: np.ndarray
    checkpoints: list[Path]


def pretrain(
    images: np.ndarray | Sequence[LoadImage],
    config: PretrainConfig = PretrainConfig(),
    model_config: ModelConfig = ModelConfig(),
    out_dir: Path | None = None,
    metadata: dict[str, str] | None = None,
    state: ModelState | None = None,
) -> PretrainResult:
    """Train encoder and decoder to reconstruct hidden patches.

    Every batch: draw a mask, encode visible patches, bridge to decoder width,
    insert mask embeddings, decode, score, backpropagate, Adam step.
    """
    data = _as_array(images)
    model_config = replace(model_config, dropout=config.dropout)
    grid = model_config.grid
    if data.shape[1:] != (grid.days, grid.slots_per_day, grid.channels):
        raise ShapeError(f"images have shape {data.shape[1:]}, model expects "
                         f"{(grid.days, grid.slots_per_day, grid.channels)}")
    seed = config.seed
    if state is None:
        state = init_model(model_config, derive_seed(seed, "init"))
    else:
        state = ModelState(model_config, state.params)
    names = state.names()
    params = state.subset(names)
    opt = AdamState(config.learning_rate, config.beta1, config.beta2, config.epsilon)
    train_idx, val_idx = split_validation(len(data), config.val_fraction, seed)
    val_images = data[val_idx] if len(val_idx) else data[train_idx]
    shuffle_rng = np.random.default_rng(derive_seed(seed, "shuffle"))
    dropout_rng = np.random.default_rng(derive_seed(seed, "dropout"))
    meta = {"seed": str(seed), **config.to_items(), **(metadata or {})}
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    checkpoints: list[Path] = []
    train_log = TrainLog()
    t0 = time.perf_counter()
    step = 0
    max_steps = config.steps if config.steps > 0 else None
    epoch = 0
    rows, cols = grid.rows, grid.cols
    done = False
    last_good = None
    while not done:
        epoch += 1
        order = train_idx[shuffle_rng.permutation(len(train_idx))]
        n_batches = math.ceil(len(order) / config.batch_size)
        for b in range(n_batches):
            batch = data[order[b * config.batch_size:(b + 1) * config.batch_size]]
            if config.mask_mode == "grid":
                parity = step % 2 if config.grid_parity == "alternate" else int(config.grid_parity)
                pattern = grid_mask(rows, cols, parity)
            else:
                parity = -1
                pattern = random_mask(rows, cols, config.mask_ratio, derive_seed(seed, f"mask:{step}"))
            with ad.Tape() as tape:
                pred = mae_forward(state, batch, pattern, dropout_rng)
                loss = patch_loss(pred, patchify(batch, grid), pattern, config.loss_scope)
            value = loss.item()
            if not math.isfinite(value):
                if last_good is not None:
                    state.restore(last_good)
                path = None
                if out is not None:
                    path = out / "last_good.v4lp"
                    save_checkpoint(path, state, {**meta, "epoch": epoch, "step": step}, {"model": opt})
                raise TrainingDiverged(
                    f"non-finite loss at epoch {epoch} step {step + 1}; last good parameters"
                    + (f" saved to {path}" if path else " retained in memory"),
                    path,
                )
            ad.backward(tape, loss, list(params.values()))
            # parameters that produced the latest finite loss
            last_good = state.snapshot()
            ad.adam_step(params, {k: p.grad for k, p in params.items()}, opt)
            step += 1
            last_in_epoch = b == n_batches - 1
            stop = max_steps is not None and step >= max_steps
            val_loss = val_nmae = float("nan")
            due = config.val_every > 0 and epoch % config.val_every == 0
            at_end = stop or (max_steps is None and epoch >= config.epochs)
            if last_in_epoch and (due or at_end) or stop:
                val_loss, val_nmae = evaluate_reconstruction(state, val_images, config.loss_scope,
                                                             config.batch_size)
            train_log.rows.append(LogRow(epoch, step, value, val_loss, val_nmae,
                                         time.perf_counter() - t0, parity, pattern.to_string()))
            if stop:
                done = True
                break
        if last_in_epoch and not done:
            log.info("epoch %d step %d loss %.6f val_nmae %.3f%%", epoch, step, value, val_nmae)
            if out is not None and config.checkpoint_every > 0 and epoch % config.checkpoint_every == 0:
                path = out / f"checkpoint_epoch{epoch:03d}.v4lp"
                save_checkpoint(path, state, {**meta, "epoch": epoch, "step": step}, {"model": opt})
                checkpoints.append(path)
        if max_steps is None and epoch >= config.epochs:
            done = True
    if out is not None:
        path = out / "pretrained.v4lp"
        save_checkpoint(path, state, {**meta, "epoch": epoch, "step": step}, {"model": opt})
        checkpoints.append(path)
        train_log.write_csv(out / "train_log.csv")
    return PretrainResult(state, train_log, opt, val_idx, checkpoints)


def mae_gradient_check(
    state: ModelState,
    images: np.ndarray,
    pattern: MaskPattern,
    scope: str = "masked_only",
    eps: float = 1e-5,
    max_coords: int | None = 4,
    seed: int = 0,
) -> dict[str, float]:
    """Finite-difference check of the full masked-autoencoder loss, one
    entry per parameter tensor. Dropout is off so the loss is deterministic.

    ``max_coords`` coordinates per tensor are probed (seeded draw); None
    probes every coordinate.
    """
    images = _as_array(images)
    state = ModelState(replace(state.config, dropout=0.0), state.params)
    names = state.names()
    target = patchify(images, state.config.grid)

    def fn(*_tensors):
        return patch_loss(mae_forward(state, images, pattern), target, pattern, scope)

    errors = ad.grad_check_detail(fn, [state[n] for n in names], eps, max_coords, seed)
    return dict(zip(names, errors))
