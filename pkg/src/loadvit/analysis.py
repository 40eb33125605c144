"""Model introspection: position-embedding similarity, mean attention maps,
error histograms, and file exports (CSV, PGM, PNG figures)."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ContractError
from .model import ModelState, encode_images
from .patcher import grid_mask
from .pretrain import reconstruct, reconstruction_nmae

log = logging.getLogger(__name__)


@dataclass
class SimilarityAtlas:
    """``matrices[k][i, j]`` = cosine(P_k, P_{cols*i + j})."""

    matrices: np.ndarray  # (N, rows, cols)

    def __getitem__(self, k: int) -> np.ndarray:
        return self.matrices[k]

    def __len__(self) -> int:
        return len(self.matrices)

    @property
    def full(self) -> np.ndarray:
        """The (N, N) cosine matrix."""
        return self.matrices.reshape(len(self.matrices), -1)


def position_similarity(state_or_embeddings, rows: int = 6, cols: int = 6) -> SimilarityAtlas:
    """Cosine similarity between every pair of encoder position embeddings."""
    if isinstance(state_or_embeddings, ModelState):
        pos = state_or_embeddings["encoder.pos"].data
        rows, cols = state_or_embeddings.config.grid.rows, state_or_embeddings.config.grid.cols
    else:
        pos = np.asarray(state_or_embeddings, dtype=np.float64)
    if pos.ndim != 2 or pos.shape[0] != rows * cols:
        raise ContractError(f"expected {rows * cols} position embeddings, got shape {pos.shape}")
    norms = np.linalg.norm(pos, axis=1)
    zero = np.flatnonzero(norms == 0)
    if zero.size:
        raise ContractError(f"position embedding {int(zero[0])} has zero norm")
    unit = pos / norms[:, None]
    cos = unit @ unit.T
    # exact unit self-similarity and symmetry regardless of rounding
    cos = 0.5 * (cos + cos.T)
    np.fill_diagonal(cos, 1.0)
    return SimilarityAtlas(cos.reshape(rows * cols, rows, cols))


@dataclass
class AttentionMap:
    matrix: np.ndarray  # (rows, cols), sums to 1
    layer: int
    images: int
    sample_seed: int
    entropy: float  # mean per-query entropy in nats


def sample_images(images: np.ndarray, sample_size: int, seed: int) -> np.ndarray:
    images = np.asarray(images, dtype=np.float64)
    if len(images) <= sample_size:
        return images
    idx = np.sort(np.random.default_rng(seed).choice(len(images), sample_size, replace=False))
    return images[idx]


def attention_maps(
    state: ModelState,
    images: np.ndarray,
    sample_size: int = 64,
    seed: int = 0,
    batch_size: int = 64,
) -> list[AttentionMap]:
    """Mean attention received by each key patch for every encoder layer,
    averaged over heads, queries and the sampled images."""
    images = sample_images(images, sample_size, seed)
    if len(images) == 0:
        raise ContractError("mean_attention: no images")
    cfg = state.config
    n_layers = cfg.encoder_layers
    # deviations from a reference row are accumulated, so identical rows
    # average to exactly that row
    refs: list[np.ndarray] = []
    sums = [np.zeros(cfg.num_positions) for _ in range(n_layers)]
    ent = [0.0] * n_layers
    for s in range(0, len(images), batch_size):
        _, rec = encode_images(state, images[s:s + batch_size], capture_attention=True)
        for layer, w in enumerate(rec.layers):
            if len(refs) <= layer:
                refs.append(w[0, 0, 0].copy())
            sums[layer] += (w - refs[layer]).sum(axis=(0, 1, 2))
            ent[layer] += float(-(w * np.log(np.clip(w, 1e-300, None))).sum(axis=-1).sum())
    out = []
    for layer in range(n_layers):
        rows_total = len(images) * cfg.encoder_heads * cfg.num_positions
        mat = (refs[layer] + sums[layer] / rows_total).reshape(cfg.grid.rows, cfg.grid.cols)
        out.append(AttentionMap(mat, layer, len(images), seed, ent[layer] / rows_total))
    return out


def mean_attention(state: ModelState, images: np.ndarray, layer: int, sample_size: int = 64,
                   seed: int = 0) -> np.ndarray:
    """6x6 heatmap for encoder ``layer`` (0-based)."""
    if not 0 <= layer < state.config.encoder_layers:
        raise ContractError(f"layer {layer} out of range [0, {state.config.encoder_layers})")
    return attention_maps(state, images, sample_size, seed)[layer].matrix


@dataclass
class Histogram:
    bins: list[tuple[float, int]]  # (left edge, count), contiguous
    bin_width: float
    mean: float
    std: float
    median: float
    count: int


def _bin_index(v: float, w: float) -> int:
    k = math.floor(v / w)
    if (k + 1) * w <= v:
        k += 1
    elif k * w > v:
        k -= 1
    return k


def error_histogram(values: Sequence[float], bin_width: float) -> Histogram:
    """Left-closed bins anchored at 0, from the first to the last occupied bin."""
    v = np.asarray(values, dtype=np.float64).ravel()
    if v.size == 0:
        raise ContractError("error_histogram: no values")
    if not bin_width > 0:
        raise ContractError(f"bin_width must be positive, got {bin_width}")
    if np.any(v < 0) or not np.all(np.isfinite(v)):
        raise ContractError("error_histogram: values must be finite and nonnegative")
    idx = np.array([_bin_index(float(x), bin_width) for x in v])
    lo, hi = int(idx.min()), int(idx.max())
    counts = np.bincount(idx - lo, minlength=hi - lo + 1)
    bins = [((lo + i) * bin_width, int(c)) for i, c in enumerate(counts)]
    return Histogram(bins, bin_width, float(v.mean()), float(v.std()), float(np.median(v)), int(v.size))


# ---------------------------------------------------------------------------
# exports


def export_heatmap(matrix: np.ndarray, path: Path, fmt: str = "csv", comment: str = "") -> Path:
    """CSV: plain numeric grid at full precision. PGM: binary 8-bit grayscale,
    min-max scaled, with the scale recorded on a comment line."""
    m = np.asarray(matrix, dtype=np.float64)
    if m.ndim != 2 or not np.all(np.isfinite(m)):
        raise ContractError("export_heatmap: need a finite 2-D matrix")
    path = Path(path)
    try:
        if fmt == "csv":
            with open(path, "w", newline="") as fh:
                csv.writer(fh).writerows([[repr(float(x)) for x in row] for row in m])
        elif fmt == "pgm":
            lo, hi = float(m.min()), float(m.max())
            if hi > lo:
                px = np.rint((m - lo) / (hi - lo) * 255.0).astype(np.uint8)
                note = f"# scale min={lo!r} max={hi!r}"
            else:
                px = np.zeros(m.shape, dtype=np.uint8)
                note = f"# scale degenerate constant={lo!r}"
            if comment:
                note += f" {comment}"
            header = f"P5\n{note}\n{m.shape[1]} {m.shape[0]}\n255\n".encode("ascii")
            path.write_bytes(header + px.tobytes())
        else:
            raise ContractError(f"unknown heatmap format {fmt!r}")
    except OSError as exc:
        raise OSError(f"cannot write heatmap {path}: {exc.strerror}") from exc
    return path


def read_heatmap_csv(path: Path) -> np.ndarray:
    with open(path, newline="") as fh:
        return np.array([[float(x) for x in row] for row in csv.reader(fh)])


def read_pgm(path: Path) -> tuple[np.ndarray, str]:
    """(pixels, comment line) of a binary PGM written by ``export_heatmap``."""
    raw = Path(path).read_bytes()
    lines = raw.split(b"\n", 4)
    if lines[0] != b"P5":
        raise ContractError(f"{path}: not a binary PGM")
    w, h = map(int, lines[2].split())
    return np.frombuffer(lines[4], dtype=np.uint8).reshape(h, w), lines[1].decode("ascii")


# ---------------------------------------------------------------------------
# soft diagnostics


def column_dominance(atlas: SimilarityAtlas) -> tuple[float, float]:
    """(mean same-column similarity, mean same-row similarity), self pairs excluded."""
    n, rows, cols = atlas.matrices.shape
    same_col, same_row = [], []
    for k in range(n):
        i, j = divmod(k, cols)
        m = atlas[k]
        same_col += [m[r, j] for r in range(rows) if r != i]
        same_row += [m[i, c] for c in range(cols) if c != j]
    return float(np.mean(same_col)), float(np.mean(same_row))


def per_customer_reconstruction_nmae(
    state: ModelState,
    images: np.ndarray,
    households: Sequence[str],
    batch_size: int = 64,
) -> dict[str, float]:
    """Masked-region nMAE per image averaged over both checkerboard parities,
    then per household."""
    images = np.asarray(images, dtype=np.float64)
    grid = state.config.grid
    per_image = np.zeros(len(images))
    for parity in (0, 1):
        pattern = grid_mask(grid.rows, grid.cols, parity)
        for s in range(0, len(images), batch_size):
            chunk = images[s:s + batch_size]
            rec = reconstruct(state, chunk, pattern)
            for k in range(len(chunk)):
                per_image[s + k] += 0.5 * reconstruction_nmae(rec[k], chunk[k], pattern, grid.patch_size)
    hh = np.asarray(households)
    return {h: float(per_image[hh == h].mean()) for h in sorted(set(hh.tolist()))}


# ---------------------------------------------------------------------------
# figures


def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def plot_atlas(atlas: SimilarityAtlas, path: Path) -> Path:
    plt = _pyplot()
    n, rows, cols = atlas.matrices.shape
    fig, axes = plt.subplots(rows, cols, figsize=(9, 9))
    for k, ax in enumerate(axes.ravel()):
        ax.imshow(atlas[k], vmin=-1, vmax=1, cmap="viridis")
        ax.set_xticks([])
        ax.set_yticks([])
    fig.suptitle("Position embedding cosine similarity")
    fig.savefig(path, dpi=80)
    plt.close(fig)
    return path


def plot_attention(maps: list[AttentionMap], path: Path) -> Path:
    plt = _pyplot()
    fig, axes = plt.subplots(1, len(maps), figsize=(3.2 * len(maps), 3.2), squeeze=False)
    for ax, am in zip(axes[0], maps):
        im = ax.imshow(am.matrix, cmap="magma")
        ax.set_title(f"layer {am.layer + 1}")
        fig.colorbar(im, ax=ax, fraction=0.046)
    fig.tight_layout()
    fig.savefig(path, dpi=80)
    plt.close(fig)
    return path


def plot_histogram(hist: Histogram, path: Path, xlabel: str = "nMAE (%)") -> Path:
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(5, 3.5))
    lefts = [b[0] for b in hist.bins]
    ax.bar(lefts, [b[1] for b in hist.bins], width=hist.bin_width, align="edge", edgecolor="black")
    ax.set_xlabel(xlabel)
    ax.set_ylabel("customers")
    ax.set_title(f"mean {hist.mean:.2f}, std {hist.std:.2f}")
    fig.tight_layout()
    fig.savefig(path, dpi=80)
    plt.close(fig)
    return path


# ---------------------------------------------------------------------------
# report


@dataclass
class AnalysisReport:
    atlas: SimilarityAtlas
    attention: list[AttentionMap]
    histogram: Histogram | None
    diagnostics: dict[str, str] = field(default_factory=dict)
    files: list[Path] = field(default_factory=list)


def analyze(
    state: ModelState,
    images: np.ndarray,
    households: Sequence[str],
    out_dir: Path,
    sample_seed: int = 0,
    sample_size: int = 64,
    bin_width: float = 0.25,
    figures: bool = True,
) -> AnalysisReport:
    """Write pos_sim_<k>.csv, attn_layer_<l>.csv/.pgm (l from 1),
    recon_hist.csv, diagnostics.txt and PNG figures into ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files: list[Path] = []
    atlas = position_similarity(state)
    for k in range(len(atlas)):
        files.append(export_heatmap(atlas[k], out / f"pos_sim_{k}.csv"))
    maps = attention_maps(state, images, sample_size, sample_seed)
    for am in maps:
        tag = f"attn_layer_{am.layer + 1}"
        files.append(export_heatmap(am.matrix, out / f"{tag}.csv"))
        files.append(export_heatmap(am.matrix, out / f"{tag}.pgm", "pgm",
                                    comment=f"sample_seed={sample_seed} images={am.images}"))
    per_customer = per_customer_reconstruction_nmae(state, images, households)
    hist = error_histogram(list(per_customer.values()), bin_width)
    from .downstream import write_histogram_csv

    write_histogram_csv(hist.bins, out / "recon_hist.csv")
    files.append(out / "recon_hist.csv")
    col, row = column_dominance(atlas)
    diag = {
        "similarity.same_column_mean": repr(col),
        "similarity.same_row_mean": repr(row),
        "similarity.column_dominance": "pass" if col > row else "fail",
        "attention.sample_seed": str(sample_seed),
        "attention.images": str(maps[0].images),
    }
    for am in maps:
        diag[f"attention.layer_{am.layer + 1}.entropy"] = repr(am.entropy)
    diag["attention.entropy_ordering"] = "pass" if maps[-1].entropy >= maps[0].entropy else "fail"
    diag.update({"recon.nmae_mean": repr(hist.mean), "recon.nmae_std": repr(hist.std),
                 "recon.nmae_median": repr(hist.median), "recon.customers": str(hist.count)})
    (out / "diagnostics.txt").write_text("".join(f"{k} = {v}\n" for k, v in diag.items()))
    files.append(out / "diagnostics.txt")
    for key in ("similarity.column_dominance", "attention.entropy_ordering"):
        log.info("soft diagnostic %s: %s", key, diag[key])
    if figures:
        files += [plot_atlas(atlas, out / "pos_sim.png"), plot_attention(maps, out / "attention.png"),
                  plot_histogram(hist, out / "recon_hist.png")]
    return AnalysisReport(atlas, maps, hist, diag, files)
