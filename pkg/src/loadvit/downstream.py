"""Fine-tuning and evaluation for PV/EV identification and HVAC disaggregation.

Identification mean-pools the 36 encoder tokens and applies one linear unit
per target with a sigmoid readout. Disaggregation maps every token to the 16
HVAC pixels of its patch; predictions are denormalized with the load-channel
bounds and clamped at 0 kW when scored.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import AdamState, Tensor
from .codec import LoadProfileRecord, NormalizationBounds, denormalize, profile_to_image, window_starts
from .errors import ConfigError, ContractError, ShapeError, TrainingDiverged
from .model import ModelConfig, ModelState, encode_images, init_model, is_encoder_param, load_checkpoint
from .patcher import PatchGrid, patchify, unpatchify
from .synthgen import derive_seed

log = logging.getLogger(__name__)

TASKS = ("identification", "disaggregation")
TARGETS = ("pv", "ev")


# ---------------------------------------------------------------------------
# labeled windows


@dataclass
class TaskDataset:
    """Aligned per-window arrays for one customer split."""

    images: np.ndarray  # (N, days, 24, 3) normalized
    households: np.ndarray  # (N,) str
    day_offsets: np.ndarray  # (N,)
    labels: dict[str, np.ndarray]  # target -> (N,) 0/1
    hvac: np.ndarray  # (N, days, 24) kW
    net_load: np.ndarray  # (N, days, 24) kW
    bounds: NormalizationBounds

    def __len__(self) -> int:
        return len(self.images)

    def subset(self, index: np.ndarray) -> "TaskDataset":
        return TaskDataset(
            self.images[index], self.households[index], self.day_offsets[index],
            {k: v[index] for k, v in self.labels.items()}, self.hvac[index], self.net_load[index],
            self.bounds,
        )


def build_task_dataset(
    records: Sequence[LoadProfileRecord],
    bounds: NormalizationBounds,
    stride_days: int = 6,
    window_days: int = 24,
) -> TaskDataset:
    """Window every record and attach household labels and sub-metered HVAC."""
    images, hh, offs, pv, ev, hvac, net = [], [], [], [], [], [], []
    for rec in sorted(records, key=lambda r: r.household_id):
        for d in window_starts(rec.days, window_days, stride_days):
            img, _ = profile_to_image(rec, bounds, d, window_days)
            sl = slice(d * 24, (d + window_days) * 24)
            images.append(img.pixels)
            hh.append(rec.household_id)
            offs.append(d)
            pv.append(float(rec.has_pv))
            ev.append(float(rec.has_ev))
            hvac.append(rec.hvac[sl].reshape(window_days, 24))
            net.append(rec.net_load[sl].reshape(window_days, 24))
    if not images:
        raise ContractError(f"no complete {window_days}-day windows in the given records")
    return TaskDataset(
        np.stack(images), np.asarray(hh), np.asarray(offs),
        {"pv": np.asarray(pv), "ev": np.asarray(ev)}, np.stack(hvac), np.stack(net), bounds,
    )


# ---------------------------------------------------------------------------
# heads


def pool_embeddings(embeddings) -> Tensor:
    """Mean over the token axis: (..., tokens, D) -> (..., D)."""
    x = ad.as_tensor(embeddings)
    if x.data.ndim < 2 or x.shape[-2] == 0:
        raise ContractError("pool_embeddings: empty token sequence")
    return ad.mean(x, axis=x.data.ndim - 2)


def head_shapes(task: str, dim: int, patch_size: int = 4) -> list[tuple[str, tuple[int, ...]]]:
    if task == "identification":
        return [s for t in TARGETS for s in ((f"head.{t}.weight", (dim, 1)), (f"head.{t}.bias", (1,)))]
    if task == "disaggregation":
        k = patch_size * patch_size
        return [("head.hvac.weight", (dim, k)), ("head.hvac.bias", (k,))]
    raise ConfigError(f"task must be one of {TASKS}, got {task!r}")


def add_task_head(state: ModelState, task: str) -> ModelState:
    """Attach a zero-initialized head; the same architecture for any encoder init."""
    for name, shape in head_shapes(task, state.config.encoder_dim, state.config.patch_size):
        state.add_param(name, np.zeros(shape))
    return state


def _identification_logits(state: ModelState, pooled: Tensor) -> dict[str, Tensor]:
    out = {}
    for t in TARGETS:
        z = ad.linear(pooled, state[f"head.{t}.weight"], state[f"head.{t}.bias"])
        out[t] = ad.reshape(z, (pooled.shape[0],))
    return out


def _hvac_patches(state: ModelState, tokens: Tensor) -> Tensor:
    return ad.linear(tokens, state["head.hvac.weight"], state["head.hvac.bias"])


def _batched(n: int, batch_size: int):
    for s in range(0, n, batch_size):
        yield slice(s, min(n, s + batch_size))


def predict_probabilities(state: ModelState, images: np.ndarray, batch_size: int = 64) -> dict[str, np.ndarray]:
    """Evaluation-mode sigmoid outputs per target, (N,) each."""
    images = np.asarray(images, dtype=np.float64)
    out = {t: [] for t in TARGETS}
    for sl in _batched(len(images), batch_size):
        emb, _ = encode_images(state, images[sl])
        logits = _identification_logits(state, pool_embeddings(emb))
        for t in TARGETS:
            out[t].append(ad._sigmoid(logits[t].data))
    return {t: np.concatenate(v) for t, v in out.items()}


def classify(image, state: ModelState, target: str) -> float:
    """Probability that ``target`` (pv or ev) is present behind the meter."""
    if target not in TARGETS:
        raise ContractError(f"target must be one of {TARGETS}, got {target!r}")
    pixels = image.pixels if hasattr(image, "pixels") else np.asarray(image)
    return float(predict_probabilities(state, pixels[None])[target][0])


def predict_hvac(state: ModelState, images: np.ndarray, bounds: NormalizationBounds,
                 batch_size: int = 64) -> np.ndarray:
    """HVAC estimate in kW, (N, days, 24), clamped at 0."""
    images = np.asarray(images, dtype=np.float64)
    cfg = state.config
    grid = PatchGrid(cfg.patch_size, cfg.days, cfg.slots_per_day, 1)
    lo, hi = bounds.pair(0)
    chunks = []
    for sl in _batched(len(images), batch_size):
        emb, _ = encode_images(state, images[sl])
        norm = unpatchify(_hvac_patches(state, emb).data, grid)[..., 0]
        chunks.append(np.maximum(denormalize(norm, lo, hi), 0.0))
    return np.concatenate(chunks)


def disaggregate(image, state: ModelState, bounds: NormalizationBounds | None = None) -> np.ndarray:
    """24x24 hourly HVAC estimate in kW for one load image."""
    pixels = image.pixels if hasattr(image, "pixels") else np.asarray(image)
    bounds = bounds or image.bounds
    return predict_hvac(state, pixels[None], bounds)[0]


# ---------------------------------------------------------------------------
# metrics


@dataclass
class CustomerRow:
    customer: str
    windows: int
    excluded: int
    nmae: float
    ee: float


@dataclass
class MetricsReport:
    task: str
    accuracy: dict[str, float] = field(default_factory=dict)
    nmae: float = float("nan")
    ee: float = float("nan")
    nmae_std: float = float("nan")
    excluded_windows: int = 0
    customers: list[CustomerRow] = field(default_factory=list)
    customer_accuracy: dict[str, dict[str, float]] = field(default_factory=dict)
    histogram: list[tuple[float, int]] = field(default_factory=list)
    baselines: dict[str, float] = field(default_factory=dict)
    extra: dict[str, str] = field(default_factory=dict)

    def summary_items(self) -> dict[str, str]:
        items = {"task": self.task}
        for t, a in sorted(self.accuracy.items()):
            items[f"accuracy.{t}"] = repr(a)
        if self.task == "disaggregation":
            items.update({"nmae_percent": repr(self.nmae), "ee_kwh": repr(self.ee),
                          "nmae_std": repr(self.nmae_std), "excluded_windows": str(self.excluded_windows)})
        for k, v in sorted(self.baselines.items()):
            items[f"baseline.{k}"] = repr(v)
        items.update(self.extra)
        return items

    def write(self, out_dir: Path, prefix: str = "metrics") -> list[Path]:
        """Per-customer CSV, summary key-value text and (disaggregation) histogram CSV."""
        out_dir = Path(out_dir)
        paths = [out_dir / f"{prefix}_customers.csv", out_dir / f"{prefix}_summary.txt"]
        try:
            with open(paths[0], "w", newline="") as fh:
                w = csv.writer(fh)
                if self.task == "disaggregation":
                    w.writerow(["customer", "windows", "excluded", "nmae_percent", "ee_kwh"])
                    for r in self.customers:
                        w.writerow([r.customer, r.windows, r.excluded, repr(r.nmae), repr(r.ee)])
                else:
                    w.writerow(["customer", *[f"accuracy_{t}" for t in TARGETS]])
                    for c in sorted(self.customer_accuracy):
                        w.writerow([c, *[repr(self.customer_accuracy[c][t]) for t in TARGETS]])
            paths[1].write_text("".join(f"{k} = {v}\n" for k, v in self.summary_items().items()))
            if self.histogram:
                paths.append(out_dir / f"{prefix}_hist.csv")
                write_histogram_csv(self.histogram, paths[-1])
        except OSError as exc:
            raise OSError(f"cannot write metrics under {out_dir}: {exc.strerror}") from exc
        return paths


def write_histogram_csv(bins: list[tuple[float, int]], path: Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["bin_left", "count"])
        for left, count in bins:
            w.writerow([repr(float(left)), int(count)])


def compute_metrics(
    predictions: np.ndarray,
    ground_truth: np.ndarray,
    customers: Sequence[str],
    hours_per_step: float = 1.0,
    bin_width: float | None = 5.0,
) -> MetricsReport:
    """Disaggregation nMAE, EE and std(nMAE) with per-customer grouping.

    Per window w: nMAE_w = 100 * sum|yhat - y| / sum y and
    EE_w = |sum yhat - sum y| * hours_per_step. Each is averaged over a
    customer's windows, then across customers. Windows with sum y == 0 are
    left out of nMAE (but not EE) and counted. std(nMAE) is the population
    standard deviation of the per-customer means.
    """
    yhat = np.asarray(predictions, dtype=np.float64)
    y = np.asarray(ground_truth, dtype=np.float64)
    if yhat.shape != y.shape:
        raise ShapeError(f"predictions {yhat.shape} vs ground truth {y.shape}")
    cust = np.asarray(customers)
    if yhat.ndim < 1 or len(cust) != len(y):
        raise ShapeError(f"{len(cust)} customer labels for {len(y)} windows")
    if len(y) == 0:
        raise ContractError("compute_metrics: no windows")
    yhat = yhat.reshape(len(y), -1)
    y = y.reshape(len(y), -1)
    total = y.sum(axis=1)
    abs_err = np.abs(yhat - y).sum(axis=1)
    ee = np.abs(yhat.sum(axis=1) - total) * hours_per_step
    rows = []
    for c in sorted(set(cust.tolist())):
        sel = cust == c
        ok = sel & (total != 0)
        n_ok = int(ok.sum())
        nm = float(np.mean(100.0 * abs_err[ok] / total[ok])) if n_ok else float("nan")
        rows.append(CustomerRow(c, int(sel.sum()), int(sel.sum()) - n_ok, nm, float(np.mean(ee[sel]))))
    per = np.array([r.nmae for r in rows])
    per = per[~np.isnan(per)]
    excluded = sum(r.excluded for r in rows)
    if excluded:
        log.warning("%d window(s) with zero HVAC energy excluded from nMAE", excluded)
    report = MetricsReport(
        task="disaggregation",
        nmae=float(per.mean()) if per.size else float("nan"),
        ee=float(np.mean([r.ee for r in rows])),
        nmae_std=float(per.std()) if per.size else float("nan"),
        excluded_windows=excluded,
        customers=rows,
    )
    if bin_width is not None and per.size:
        from .analysis import error_histogram

        report.histogram = error_histogram(per, bin_width).bins
    return report


def accuracy_report(
    probabilities: dict[str, np.ndarray],
    labels: dict[str, np.ndarray],
    customers: Sequence[str],
    threshold: float = 0.5,
) -> MetricsReport:
    """Window-level accuracy per target; a probability >= threshold means present."""
    cust = np.asarray(customers)
    report = MetricsReport(task="identification")
    for t in TARGETS:
        p = np.asarray(probabilities[t])
        y = np.asarray(labels[t])
        if p.shape != y.shape or len(cust) != len(y):
            raise ShapeError(f"{t}: {p.shape} probabilities, {y.shape} labels, {len(cust)} customers")
        hit = (p >= threshold) == (y >= 0.5)
        report.accuracy[t] = float(hit.mean())
        for c in sorted(set(cust.tolist())):
            report.customer_accuracy.setdefault(c, {})[t] = float(hit[cust == c].mean())
    return report


def baseline_predictions(data: TaskDataset, kind: str) -> np.ndarray:
    """Reference HVAC estimators: ``zero`` or ``net_load`` (copy of net load, clamped at 0)."""
    if kind == "zero":
        return np.zeros_like(data.hvac)
    if kind == "net_load":
        return np.maximum(data.net_load, 0.0)
    raise ContractError(f"unknown baseline {kind!r}")


# ---------------------------------------------------------------------------
# fine-tuning


@dataclass
class FineTuneConfig:
    task: str = "identification"
    init: str = "pretrained"  # or "random"
    checkpoint: str = ""
    encoder_mode: str = "trainable"  # or "frozen"
    encoder_lr_ratio: float = 0.1
    learning_rate: float = 1e-2  # head rate; the encoder gets ratio * this
    labeled_example_count: int = 0  # 0 = every training window
    epochs: int = 10
    batch_size: int = 32
    dropout: float = 0.1
    seed: int = 0
    train_stride_days: int = 6
    eval_stride_days: int = 24

    def __post_init__(self):
        if self.task not in TASKS:
            raise ConfigError(f"task must be one of {TASKS}, got {self.task!r}")
        if self.init not in ("pretrained", "random"):
            raise ConfigError(f"init must be pretrained or random, got {self.init!r}")
        if self.encoder_mode not in ("trainable", "frozen"):
            raise ConfigError(f"encoder_mode must be trainable or frozen, got {self.encoder_mode!r}")
        if self.epochs < 1 or self.batch_size < 1 or self.labeled_example_count < 0:
            raise ConfigError("epochs and batch_size must be >= 1, labeled_example_count >= 0")
        if self.learning_rate < 0 or self.encoder_lr_ratio < 0:
            raise ConfigError("learning rates must be nonnegative")

    def to_items(self) -> dict[str, str]:
        return {f"finetune.{k}": str(v) for k, v in asdict(self).items()}


@dataclass
class FineTuneResult:
    state: ModelState
    report: MetricsReport
    losses: list[float]
    train_households: list[str]
    optimizers: dict[str, AdamState]


def check_disjoint(train: TaskDataset, test: TaskDataset) -> None:
    overlap = set(train.households.tolist()) & set(test.households.tolist())
    if overlap:
        raise ContractError(f"customers in both train and test splits: {sorted(overlap)[:5]}")


def select_examples(n: int, count: int, seed: int) -> np.ndarray:
    """Seeded subset of ``count`` window indices (all of them when count is 0 or >= n)."""
    if count == 0 or count >= n:
        return np.arange(n)
    order = np.random.default_rng(derive_seed(seed, "labels")).permutation(n)
    return np.sort(order[:count])


def _backbone(config: FineTuneConfig, state: ModelState | None, model_config: ModelConfig) -> ModelState:
    if config.init == "pretrained":
        if state is None:
            if not config.checkpoint:
                raise ConfigError("init=pretrained needs a checkpoint path or a model state")
            state, _, _ = load_checkpoint(Path(config.checkpoint))
        state = state.copy()
    else:
        base = state.config if state is not None else model_config
        state = init_model(base, derive_seed(config.seed, "init"))
    state = ModelState(replace(state.config, dropout=config.dropout), state.params)
    for name in [n for n in state.names() if n.startswith("head.")]:
        del state.params[name]
    return add_task_head(state, config.task)


def _targets(data: TaskDataset, task: str, grid: PatchGrid) -> np.ndarray:
    if task == "identification":
        return np.stack([data.labels[t] for t in TARGETS], axis=1)
    lo, hi = data.bounds.pair(0)
    norm = (data.hvac - lo) / (hi - lo)
    g1 = PatchGrid(grid.patch_size, grid.days, grid.slots_per_day, 1)
    return patchify(norm[..., None], g1)


def _task_loss(state: ModelState, features: Tensor, target: np.ndarray, task: str) -> Tensor:
    if task == "identification":
        logits = _identification_logits(state, features)
        terms = [ad.mean(ad.bce_with_logits(logits[t], target[:, i])) for i, t in enumerate(TARGETS)]
        return ad.add(terms[0], terms[1])
    pred = _hvac_patches(state, features)
    return ad.mean(ad.square(ad.sub(pred, Tensor(target))))


def evaluate(state: ModelState, data: TaskDataset, task: str, batch_size: int = 64) -> MetricsReport:
    if task == "identification":
        probs = predict_probabilities(state, data.images, batch_size)
        return accuracy_report(probs, data.labels, data.households)
    pred = predict_hvac(state, data.images, data.bounds, batch_size)
    report = compute_metrics(pred, data.hvac, data.households)
    for kind in ("zero", "net_load"):
        report.baselines[f"{kind}_nmae"] = compute_metrics(
            baseline_predictions(data, kind), data.hvac, data.households, bin_width=None
        ).nmae
    return report


def finetune(
    train: TaskDataset,
    test: TaskDataset,
    config: FineTuneConfig = FineTuneConfig(),
    state: ModelState | None = None,
    model_config: ModelConfig = ModelConfig(),
) -> FineTuneResult:
    """Train a task head (and the encoder when trainable) with Adam, then
    score the held-out customers.

    ``state`` is the pretrained backbone when ``config.init == "pretrained"``
    (otherwise only its architecture is used). A trainable encoder learns at
    ``encoder_lr_ratio`` times the head rate. A frozen encoder runs in
    evaluation mode, so its token embeddings are computed once.
    """
    check_disjoint(train, test)
    state = _backbone(config, state, model_config)
    grid = state.config.grid
    idx = select_examples(len(train), config.labeled_example_count, config.seed)
    data = train.subset(idx)
    target = _targets(data, config.task, grid)
    head_names = state.names(lambda n: n.startswith("head."))
    groups = {"head": head_names}
    frozen = config.encoder_mode == "frozen"
    if not frozen:
        groups["encoder"] = state.names(is_encoder_param)
    optimizers = {
        "head": AdamState(config.learning_rate),
        "encoder": AdamState(config.learning_rate * config.encoder_lr_ratio),
    }
    if frozen:
        del optimizers["encoder"]
        cached = _frozen_features(state, data.images, config.task)
    shuffle_rng = np.random.default_rng(derive_seed(config.seed, "finetune.shuffle"))
    dropout_rng = np.random.default_rng(derive_seed(config.seed, "finetune.dropout"))
    losses = []
    for epoch in range(1, config.epochs + 1):
        order = shuffle_rng.permutation(len(data))
        for s in range(0, len(order), config.batch_size):
            b = order[s:s + config.batch_size]
            with ad.Tape() as tape:
                if frozen:
                    feats = Tensor(cached[b])
                else:
                    emb, _ = encode_images(state, data.images[b], dropout_rng)
                    feats = pool_embeddings(emb) if config.task == "identification" else emb
                loss = _task_loss(state, feats, target[b], config.task)
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingDiverged(f"non-finite fine-tuning loss in epoch {epoch}")
            ad.backward(tape, loss, [state[n] for names in groups.values() for n in names])
            for group, names in groups.items():
                params = state.subset(names)
                ad.adam_step(params, {k: p.grad for k, p in params.items()}, optimizers[group])
            losses.append(value)
        log.info("finetune %s epoch %d loss %.6f", config.task, epoch, value)
    report = evaluate(state, test, config.task)
    report.extra.update({"labeled_examples": str(len(data)), "init": config.init,
                         "encoder_mode": config.encoder_mode, "seed": str(config.seed)})
    return FineTuneResult(state, report, losses, sorted(set(data.households.tolist())), optimizers)


def _frozen_features(state: ModelState, images: np.ndarray, task: str, batch_size: int = 64) -> np.ndarray:
    chunks = []
    for sl in _batched(len(images), batch_size):
        emb, _ = encode_images(state, images[sl])
        chunks.append(pool_embeddings(emb).data if task == "identification" else emb.data)
    return np.concatenate(chunks)
