"""Small vision transformer for load images, plus the masked-autoencoder decoder.

Encoder blocks are pre-norm (LayerNorm -> attention -> residual, LayerNorm ->
MLP -> residual) followed by a final LayerNorm. There is no class token.
Every forward function takes a batch: patches are (batch, tokens, patch_dim).
Passing ``rng=None`` means evaluation mode (dropout disabled).
"""

from __future__ import annotations

import logging
import math
import struct
from collections import OrderedDict
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import AdamState, Tensor
from .errors import CheckpointError, ConfigError, ContractError, ShapeError
from .patcher import MaskPattern, PatchGrid, apply_mask, patchify

log = logging.getLogger(__name__)

INIT_STD = 0.02
CHECKPOINT_MAGIC = b"V4LP"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    encoder_layers: int = 3
    encoder_heads: int = 4
    encoder_dim: int = 128
    decoder_layers: int = 2
    decoder_heads: int = 2
    decoder_dim: int = 32
    mlp_ratio: int = 4
    dropout: float = 0.1
    patch_size: int = 4
    days: int = 24
    slots_per_day: int = 24
    channels: int = 3

    def __post_init__(self):
        if self.encoder_dim % self.encoder_heads:
            raise ConfigError(f"encoder_dim {self.encoder_dim} not divisible by {self.encoder_heads} heads")
        if self.decoder_dim % self.decoder_heads:
            raise ConfigError(f"decoder_dim {self.decoder_dim} not divisible by {self.decoder_heads} heads")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")
        self.grid  # divisibility check

    @property
    def grid(self) -> PatchGrid:
        return PatchGrid(self.patch_size, self.days, self.slots_per_day, self.channels)

    @property
    def patch_dim(self) -> int:
        return self.grid.patch_dim

    @property
    def num_positions(self) -> int:
        return self.grid.num_patches

    def to_items(self) -> dict[str, str]:
        return {f"model.{k}": repr(v) for k, v in asdict(self).items()}

    @classmethod
    def from_items(cls, items: dict[str, str]) -> "ModelConfig":
        kw = {}
        for f in fields(cls):
            key = f"model.{f.name}"
            if key in items:
                kw[f.name] = float(items[key]) if f.type in ("float", float) else int(items[key])
        return cls(**kw)


def _block_shapes(prefix: str, dim: int, mlp_ratio: int) -> list[tuple[str, tuple[int, ...]]]:
    hidden = dim * mlp_ratio
    shapes = [(f"{prefix}.norm1.gain", (dim,)), (f"{prefix}.norm1.bias", (dim,))]
    for proj in ("q", "k", "v", "out"):
        shapes += [(f"{prefix}.attn.{proj}.weight", (dim, dim)), (f"{prefix}.attn.{proj}.bias", (dim,))]
    shapes += [
        (f"{prefix}.norm2.gain", (dim,)),
        (f"{prefix}.norm2.bias", (dim,)),
        (f"{prefix}.mlp.fc1.weight", (dim, hidden)),
        (f"{prefix}.mlp.fc1.bias", (hidden,)),
        (f"{prefix}.mlp.fc2.weight", (hidden, dim)),
        (f"{prefix}.mlp.fc2.bias", (dim,)),
    ]
    return shapes


def parameter_shapes(config: ModelConfig) -> list[tuple[str, tuple[int, ...]]]:
    """Declared (name, shape) list for the backbone, in checkpoint order."""
    d, dd, n = config.encoder_dim, config.decoder_dim, config.num_positions
    shapes = [
        ("patch_embed.weight", (config.patch_dim, d)),
        ("patch_embed.bias", (d,)),
        ("encoder.pos", (n, d)),
    ]
    for layer in range(config.encoder_layers):
        shapes += _block_shapes(f"encoder.blocks.{layer}", d, config.mlp_ratio)
    shapes += [("encoder.norm.gain", (d,)), ("encoder.norm.bias", (d,))]
    shapes += [
        ("mask_embedding", (dd,)),
        ("bridge.weight", (d, dd)),
        ("bridge.bias", (dd,)),
        ("decoder.pos", (n, dd)),
    ]
    for layer in range(config.decoder_layers):
        shapes += _block_shapes(f"decoder.blocks.{layer}", dd, config.mlp_ratio)
    shapes += [
        ("decoder.norm.gain", (dd,)),
        ("decoder.norm.bias", (dd,)),
        ("recon_head.weight", (dd, config.patch_dim)),
        ("recon_head.bias", (config.patch_dim,)),
    ]
    return shapes


def _component(name: str) -> str:
    parts = name.split(".")
    if parts[1:2] == ["blocks"]:
        return f"{parts[0]}.blocks"
    if name in ("encoder.pos", "decoder.pos", "encoder.norm.gain", "encoder.norm.bias",
                "decoder.norm.gain", "decoder.norm.bias"):
        return ".".join(parts[:2])
    return parts[0]


ENCODER_COMPONENTS = ("patch_embed", "encoder.pos", "encoder.blocks", "encoder.norm")


def count_parameters(config: ModelConfig) -> dict[str, int]:
    """Exact parameter counts per named component, with encoder/decoder/total sums."""
    counts: dict[str, int] = OrderedDict()
    for name, shape in parameter_shapes(config):
        comp = _component(name)
        counts[comp] = counts.get(comp, 0) + int(np.prod(shape))
    enc = sum(v for k, v in counts.items() if k in ENCODER_COMPONENTS)
    dec = sum(v for k, v in counts.items() if k not in ENCODER_COMPONENTS)
    counts["encoder_total"] = enc
    counts["decoder_total"] = dec
    counts["total"] = enc + dec
    return counts


# published sizes for the default configuration; the decoder figure cannot
# be reached by a 2-layer width-32 decoder and is kept only for comparison
REFERENCE_COUNTS = {"encoder_total": 1_000_000, "decoder_total": 2_000_000}


def reference_discrepancies(counts: dict[str, int], band: float = 0.5) -> list[str]:
    """Messages for every total outside ``[1 - band, 1 + band]`` times its published size."""
    notes = []
    for key, ref in REFERENCE_COUNTS.items():
        ratio = counts[key] / ref
        if not 1.0 - band <= ratio <= 1.0 + band:
            notes.append(
                f"{key} {counts[key]:,} vs published {ref:,} (ratio {ratio:.3f}); "
                "known inconsistency in the published table, layer/head/width values are trusted"
            )
    return notes


def is_encoder_param(name: str) -> bool:
    return name.startswith(("patch_embed.", "encoder."))


class ModelState:
    """All learnable tensors, keyed by dotted name."""

    def __init__(self, config: ModelConfig, params: "OrderedDict[str, Tensor]"):
        self.config = config
        self.params = params

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def names(self, predicate=None) -> list[str]:
        return [n for n in self.params if predicate is None or predicate(n)]

    def subset(self, names) -> dict[str, Tensor]:
        return {n: self.params[n] for n in names}

    def copy(self) -> "ModelState":
        return ModelState(
            self.config,
            OrderedDict((k, Tensor(v.data.copy(), requires_grad=True, name=k)) for k, v in self.params.items()),
        )

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def restore(self, snap: dict[str, np.ndarray]) -> None:
        for k, arr in snap.items():
            self.params[k].data[...] = arr

    def add_param(self, name: str, data: np.ndarray) -> Tensor:
        t = Tensor(data, requires_grad=True, name=name)
        self.params[name] = t
        return t

    def num_parameters(self) -> int:
        return sum(t.size for t in self.params.values())


def init_model(config: ModelConfig, seed: int = 0) -> ModelState:
    """Xavier-uniform projection weights; Gaussian(0, 0.02) position
    embeddings, mask embedding and reconstruction head; zero biases; unit
    layer-norm gains."""
    rng = np.random.default_rng(seed)
    params: OrderedDict[str, Tensor] = OrderedDict()
    for name, shape in parameter_shapes(config):
        if name.endswith(".gain"):
            data = np.ones(shape)
        elif name.endswith(".bias"):
            data = np.zeros(shape)
        elif name.endswith(".weight") and name != "recon_head.weight":
            # N(0, 0.02) here leaves pre-training stuck on the mean-patch plateau
            bound = math.sqrt(6.0 / (shape[0] + shape[1]))
            data = rng.uniform(-bound, bound, size=shape)
        else:
            data = rng.normal(0.0, INIT_STD, size=shape)
        params[name] = Tensor(data, requires_grad=True, name=name)
    counts = count_parameters(config)
    log.info(
        "model built: encoder %d, decoder %d, total %d parameters",
        counts["encoder_total"], counts["decoder_total"], counts["total"],
    )
    for note in reference_discrepancies(counts):
        log.info("parameter count: %s", note)
    return ModelState(config, params)


# ---------------------------------------------------------------------------
# forward passes


def _attention(x: Tensor, state: ModelState, prefix: str, heads: int, capture: list | None) -> Tensor:
    b, s, d = x.shape
    dh = d // heads
    p = state.params

    def split(proj):
        y = ad.linear(x, p[f"{prefix}.{proj}.weight"], p[f"{prefix}.{proj}.bias"])
        return ad.transpose(ad.reshape(y, (b, s, heads, dh)), (0, 2, 1, 3))

    q, k, v = split("q"), split("k"), split("v")
    scores = ad.scale(ad.matmul(q, ad.swap_last(k)), 1.0 / math.sqrt(dh))
    weights = ad.softmax(scores)
    if capture is not None:
        capture.append(weights.data.copy())
    o = ad.matmul(weights, v)
    o = ad.reshape(ad.transpose(o, (0, 2, 1, 3)), (b, s, d))
    return ad.linear(o, p[f"{prefix}.out.weight"], p[f"{prefix}.out.bias"])


def _block(x: Tensor, state: ModelState, prefix: str, heads: int, rng, capture) -> Tensor:
    p = state.params
    drop = state.config.dropout
    h = ad.layer_norm(x, p[f"{prefix}.norm1.gain"], p[f"{prefix}.norm1.bias"])
    x = ad.add(x, ad.dropout(_attention(h, state, f"{prefix}.attn", heads, capture), drop, rng))
    h = ad.layer_norm(x, p[f"{prefix}.norm2.gain"], p[f"{prefix}.norm2.bias"])
    h = ad.gelu(ad.linear(h, p[f"{prefix}.mlp.fc1.weight"], p[f"{prefix}.mlp.fc1.bias"]))
    h = ad.linear(h, p[f"{prefix}.mlp.fc2.weight"], p[f"{prefix}.mlp.fc2.bias"])
    return ad.add(x, ad.dropout(h, drop, rng))


def embed_patches(
    patches: np.ndarray | Tensor,
    indices: np.ndarray,
    state: ModelState,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """tokens[b, k] = patches[b, k] @ W + bias + pos[indices[k]]."""
    x = ad.as_tensor(patches)
    if x.data.ndim != 3 or x.shape[-1] != state.config.patch_dim:
        raise ShapeError(f"patches must be (batch, n, {state.config.patch_dim}), got {x.shape}")
    idx = np.asarray(indices, dtype=np.int64)
    if idx.shape != (x.shape[1],):
        raise ContractError(f"{x.shape[1]} patches but {idx.size} position indices")
    n_pos = state.config.num_positions
    if idx.size and (idx.min() < 0 or idx.max() >= n_pos):
        raise ContractError(f"position index out of range [0, {n_pos})")
    p = state.params
    tok = ad.linear(x, p["patch_embed.weight"], p["patch_embed.bias"])
    pos = ad.take_rows(p["encoder.pos"], idx)
    tok = ad.add(tok, ad.broadcast_to(pos, tok.shape))
    return ad.dropout(tok, state.config.dropout, rng)


@dataclass
class AttentionRecord:
    """Softmax weights per layer, each (batch, heads, S, S)."""

    layers: list[np.ndarray]


def encoder_forward(
    tokens: Tensor,
    state: ModelState,
    rng: np.random.Generator | None = None,
    capture_attention: bool = False,
) -> tuple[Tensor, AttentionRecord | None]:
    if tokens.shape[1] < 1:
        raise ContractError("encoder_forward: need at least one token")
    cfg = state.config
    capture = [] if capture_attention else None
    x = tokens
    for layer in range(cfg.encoder_layers):
        x = _block(x, state, f"encoder.blocks.{layer}", cfg.encoder_heads, rng, capture)
    x = ad.layer_norm(x, state["encoder.norm.gain"], state["encoder.norm.bias"])
    return x, (AttentionRecord(capture) if capture is not None else None)


def decoder_forward(seq: Tensor, state: ModelState, rng: np.random.Generator | None = None) -> Tensor:
    """(batch, 36, decoder_dim) -> reconstructed patches (batch, 36, patch_dim)."""
    cfg = state.config
    if seq.data.ndim != 3 or seq.shape[1] != cfg.num_positions or seq.shape[2] != cfg.decoder_dim:
        raise ShapeError(
            f"decoder input must be (batch, {cfg.num_positions}, {cfg.decoder_dim}), got {seq.shape}"
        )
    x = ad.add(seq, ad.broadcast_to(state["decoder.pos"], seq.shape))
    for layer in range(cfg.decoder_layers):
        x = _block(x, state, f"decoder.blocks.{layer}", cfg.decoder_heads, rng, None)
    x = ad.layer_norm(x, state["decoder.norm.gain"], state["decoder.norm.bias"])
    return ad.linear(x, state["recon_head.weight"], state["recon_head.bias"])


def mae_forward(
    state: ModelState,
    images: np.ndarray,
    pattern: MaskPattern,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """Masked-autoencoder pass: encode visible patches, insert the mask
    embedding at hidden positions, decode all positions."""
    cfg = state.config
    seq = patchify(np.asarray(images, dtype=np.float64), cfg.grid)
    visible, idx = apply_mask(seq, pattern)
    tokens = embed_patches(visible, idx, state, rng)
    encoded, _ = encoder_forward(tokens, state, rng)
    bridged = ad.linear(encoded, state["bridge.weight"], state["bridge.bias"])
    full = ad.insert_tokens(bridged, idx, state["mask_embedding"], cfg.num_positions)
    return decoder_forward(full, state, rng)


def encode_images(
    state: ModelState,
    images: np.ndarray,
    rng: np.random.Generator | None = None,
    capture_attention: bool = False,
) -> tuple[Tensor, AttentionRecord | None]:
    """Encode complete (unmasked) images: (batch, 24, 24, 3) -> (batch, 36, D)."""
    cfg = state.config
    seq = patchify(np.asarray(images, dtype=np.float64), cfg.grid)
    tokens = embed_patches(seq, np.arange(cfg.num_positions), state, rng)
    return encoder_forward(tokens, state, rng, capture_attention)


# ---------------------------------------------------------------------------
# checkpoint file


def _pack_record(name: str, arr: np.ndarray) -> bytes:
    nb = name.encode("utf-8")
    arr = np.asarray(arr, dtype="<f8")
    head = struct.pack("<I", len(nb)) + nb + struct.pack("<I", arr.ndim)
    head += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + np.ascontiguousarray(arr).tobytes()


def save_checkpoint(
    path: Path,
    state: ModelState,
    metadata: dict[str, str] | None = None,
    optimizers: dict[str, AdamState] | None = None,
) -> None:
    """Write magic, version, key-value metadata, then named float64 arrays.

    Optimizer moments are stored as ``optim.<group>.m.<param>`` /
    ``optim.<group>.v.<param>`` arrays with their scalars in the metadata.
    """
    meta = dict(state.config.to_items())
    meta.update({k: str(v) for k, v in (metadata or {}).items()})
    records = [(k, t.data) for k, t in state.params.items()]
    for group, opt in (optimizers or {}).items():
        meta[f"optim.{group}.step_count"] = str(opt.step_count)
        meta[f"optim.{group}.learning_rate"] = repr(opt.learning_rate)
        meta[f"optim.{group}.beta1"] = repr(opt.beta1)
        meta[f"optim.{group}.beta2"] = repr(opt.beta2)
        meta[f"optim.{group}.epsilon"] = repr(opt.epsilon)
        for k in opt.first_moment:
            records.append((f"optim.{group}.m.{k}", opt.first_moment[k]))
            records.append((f"optim.{group}.v.{k}", opt.second_moment[k]))
    text = "".join(f"{k} = {meta[k]}\n" for k in sorted(meta)).encode("utf-8")
    blob = bytearray(CHECKPOINT_MAGIC)
    blob += struct.pack("<H", CHECKPOINT_VERSION)
    blob += struct.pack("<I", len(text)) + text
    blob += struct.pack("<I", len(records))
    for name, arr in records:
        blob += _pack_record(name, arr)
    path = Path(path)
    try:
        path.write_bytes(bytes(blob))
    except OSError as exc:
        raise OSError(f"cannot write checkpoint {path}: {exc.strerror}") from exc


def load_checkpoint(path: Path) -> tuple[ModelState, dict[str, str], dict[str, AdamState]]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    raw = path.read_bytes()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    (version,) = struct.unpack_from("<H", raw, 4)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    pos = 6
    (mlen,) = struct.unpack_from("<I", raw, pos)
    pos += 4
    from .codec import parse_key_values

    meta = parse_key_values(raw[pos:pos + mlen].decode("utf-8"))
    pos += mlen
    (count,) = struct.unpack_from("<I", raw, pos)
    pos += 4
    arrays: OrderedDict[str, np.ndarray] = OrderedDict()
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<I", raw, pos)
            pos += 4
            name = raw[pos:pos + nlen].decode("utf-8")
            pos += nlen
            (rank,) = struct.unpack_from("<I", raw, pos)
            pos += 4
            dims = struct.unpack_from(f"<{rank}I", raw, pos)
            pos += 4 * rank
            n = int(np.prod(dims)) if rank else 1
            arr = np.frombuffer(raw, dtype="<f8", count=n, offset=pos).astype(np.float64).reshape(dims)
            pos += 8 * n
            arrays[name] = arr
    except (struct.error, ValueError) as exc:
        raise CheckpointError(f"{path}: truncated or corrupt parameter records") from exc
    config = ModelConfig.from_items(meta)
    expected = dict(parameter_shapes(config))
    params: OrderedDict[str, Tensor] = OrderedDict()
    for name, arr in arrays.items():
        if name.startswith("optim."):
            continue
        if name in expected and expected[name] != arr.shape:
            raise CheckpointError(f"{path}: {name} has shape {arr.shape}, config expects {expected[name]}")
        params[name] = Tensor(arr, requires_grad=True, name=name)
    missing = [n for n in expected if n not in params]
    if missing:
        raise CheckpointError(f"{path}: missing parameters {missing[:3]}")
    optimizers: dict[str, AdamState] = {}
    groups = {k.split(".")[1] for k in meta if k.startswith("optim.")}
    for g in sorted(groups):
        opt = AdamState(
            learning_rate=float(meta[f"optim.{g}.learning_rate"]),
            beta1=float(meta[f"optim.{g}.beta1"]),
            beta2=float(meta[f"optim.{g}.beta2"]),
            epsilon=float(meta[f"optim.{g}.epsilon"]),
            step_count=int(meta[f"optim.{g}.step_count"]),
        )
        mp, vp = f"optim.{g}.m.", f"optim.{g}.v."
        for name, arr in arrays.items():
            if name.startswith(mp):
                opt.first_moment[name[len(mp):]] = arr.copy()
            elif name.startswith(vp):
                opt.second_moment[name[len(vp):]] = arr.copy()
        optimizers[g] = opt
    return ModelState(config, params), meta, optimizers
