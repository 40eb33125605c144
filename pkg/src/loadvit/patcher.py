"""Patch lattice bookkeeping: patchify/unpatchify, masks, token reassembly.

Patch (i, j) covers pixel rows [i*P, (i+1)*P) and columns [j*P, (j+1)*P).
Inside a patch values are flattened row-major over pixels with channels last.
Patches are numbered row-major over the lattice.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ContractError


@dataclass(frozen=True)
class PatchGrid:
    patch_size: int = 4
    days: int = 24
    slots_per_day: int = 24
    channels: int = 3

    def __post_init__(self):
        if self.patch_size < 1 or self.days % self.patch_size or self.slots_per_day % self.patch_size:
            raise ConfigError(
                f"patch size {self.patch_size} must divide both {self.days} and {self.slots_per_day}"
            )

    @property
    def rows(self) -> int:
        return self.days // self.patch_size

    @property
    def cols(self) -> int:
        return self.slots_per_day // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.rows * self.cols

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * self.channels

    def position(self, i: int, j: int) -> int:
        return i * self.cols + j

    def cell(self, k: int) -> tuple[int, int]:
        return divmod(k, self.cols)


def patchify(pixels: np.ndarray, grid: PatchGrid = PatchGrid()) -> np.ndarray:
    """(..., days, slots, C) -> (..., num_patches, patch_dim)."""
    p = grid.patch_size
    *lead, h, w, c = pixels.shape
    if h % p or w % p:
        raise ConfigError(f"image {h}x{w} is not divisible into {p}x{p} patches")
    x = pixels.reshape(*lead, h // p, p, w // p, p, c)
    n = len(lead)
    x = x.transpose(*range(n), n, n + 2, n + 1, n + 3, n + 4)
    return x.reshape(*lead, (h // p) * (w // p), p * p * c)


def unpatchify(seq: np.ndarray, grid: PatchGrid = PatchGrid()) -> np.ndarray:
    """Exact inverse of ``patchify``; also accepts channel counts other than
    ``grid.channels`` as long as the patch width is a multiple of P*P."""
    p = grid.patch_size
    *lead, n_patches, dim = seq.shape
    if n_patches != grid.num_patches:
        raise ContractError(f"expected {grid.num_patches} patches, got {n_patches}")
    if dim % (p * p):
        raise ContractError(f"patch width {dim} is not a multiple of {p * p}")
    c = dim // (p * p)
    n = len(lead)
    x = seq.reshape(*lead, grid.rows, grid.cols, p, p, c)
    x = x.transpose(*range(n), n, n + 2, n + 1, n + 3, n + 4)
    return x.reshape(*lead, grid.rows * p, grid.cols * p, c)


@dataclass(frozen=True)
class MaskPattern:
    masked: np.ndarray  # bool, (rows, cols)
    mode: str = "grid"
    seed: int | None = None

    @property
    def flat(self) -> np.ndarray:
        return self.masked.reshape(-1)

    @property
    def masked_count(self) -> int:
        return int(self.masked.sum())

    @property
    def visible_count(self) -> int:
        return self.masked.size - self.masked_count

    def visible_indices(self) -> np.ndarray:
        return np.flatnonzero(~self.flat)

    def masked_indices(self) -> np.ndarray:
        return np.flatnonzero(self.flat)

    def to_string(self) -> str:
        """0/1 string, row-major, 1 = masked."""
        return "".join("1" if m else "0" for m in self.flat)

    @classmethod
    def from_string(cls, s: str, rows: int = 6, cols: int = 6) -> "MaskPattern":
        if len(s) != rows * cols or set(s) - {"0", "1"}:
            raise ContractError(f"mask string must be {rows * cols} characters of 0/1")
        return cls(np.array([ch == "1" for ch in s]).reshape(rows, cols), mode="explicit")


def grid_mask(rows: int = 6, cols: int = 6, parity: int = 0) -> MaskPattern:
    """Checkerboard: patch (i, j) is masked iff (i + j) % 2 == parity."""
    if parity not in (0, 1):
        raise ContractError(f"parity must be 0 or 1, got {parity}")
    i, j = np.indices((rows, cols))
    return MaskPattern(((i + j) % 2) == parity, mode="grid")


def random_mask(rows: int, cols: int, mask_ratio: float, seed: int) -> MaskPattern:
    if not 0.0 < mask_ratio < 1.0:
        raise ContractError(f"mask_ratio must be in (0, 1), got {mask_ratio}")
    total = rows * cols
    count = int(round(mask_ratio * total))
    order = np.random.default_rng(seed).permutation(total)
    flat = np.zeros(total, dtype=bool)
    flat[order[:count]] = True
    return MaskPattern(flat.reshape(rows, cols), mode="random", seed=seed)


def apply_mask(seq: np.ndarray, pattern: MaskPattern) -> tuple[np.ndarray, np.ndarray]:
    """Keep the visible patches of ``seq`` (..., N, dim) in their original order."""
    if seq.shape[-2] != pattern.masked.size:
        raise ContractError(
            f"pattern covers {pattern.masked.size} patches, sequence has {seq.shape[-2]}"
        )
    idx = pattern.visible_indices()
    return seq[..., idx, :], idx


def reassemble(
    visible: np.ndarray,
    indices: np.ndarray,
    mask_embedding: np.ndarray,
    total: int,
) -> np.ndarray:
    """Full-length sequence: visible vectors at their positions, the shared mask
    embedding everywhere else. ``visible`` is (n, d) or (batch, n, d)."""
    idx = np.asarray(indices, dtype=np.int64)
    vis = np.asarray(visible, dtype=np.float64)
    squeeze = vis.ndim == 2
    if squeeze:
        vis = vis[None]
    if vis.shape[1] != idx.size:
        raise ContractError(f"{vis.shape[1]} embeddings but {idx.size} indices")
    if idx.size and (idx.min() < 0 or idx.max() >= total):
        raise ContractError(f"index out of range [0, {total})")
    if len(np.unique(idx)) != idx.size:
        raise ContractError("duplicate visible indices")
    d = mask_embedding.shape[-1]
    out = np.empty((vis.shape[0], total, d))
    out[:] = mask_embedding
    out[:, idx, :] = vis
    return out[0] if squeeze else out
