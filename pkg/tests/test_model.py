import math
import struct

import numpy as np
import pytest

from loadvit import autodiff as ad
from loadvit.errors import CheckpointError, ConfigError, ContractError, ShapeError
from loadvit.model import (
    ModelConfig,
    count_parameters,
    decoder_forward,
    embed_patches,
    encode_images,
    encoder_forward,
    init_model,
    load_checkpoint,
    mae_forward,
    parameter_shapes,
    save_checkpoint,
)
from loadvit.patcher import apply_mask, grid_mask, patchify


@pytest.fixture(scope="module")
def state():
    return init_model(ModelConfig(), seed=0)


@pytest.fixture(scope="module")
def images():
    return np.random.default_rng(0).random((2, 24, 24, 3))


def test_config_validation():
    with pytest.raises(ConfigError):
        ModelConfig(encoder_dim=130)
    with pytest.raises(ConfigError):
        ModelConfig(dropout=1.0)


def test_parameter_counts():
    c = count_parameters(ModelConfig())
    assert c["patch_embed"] == 48 * 128 + 128 == 6272
    assert c["encoder.pos"] == 36 * 128 == 4608
    assert c["total"] == sum(int(np.prod(s)) for _, s in parameter_shapes(ModelConfig()))
    assert c["encoder_total"] + c["decoder_total"] == c["total"]
    assert init_model(ModelConfig(), 0).num_parameters() == c["total"]


def test_init_is_seeded(state):
    again = init_model(ModelConfig(), seed=0)
    other = init_model(ModelConfig(), seed=1)
    assert all(np.array_equal(state[k].data, again[k].data) for k in state.names())
    assert not np.array_equal(state["encoder.pos"].data, other["encoder.pos"].data)
    assert np.all(state["encoder.blocks.0.norm1.gain"].data == 1.0)
    assert np.all(state["patch_embed.bias"].data == 0.0)


def _zeroed(state):
    s = state.copy()
    s["encoder.pos"].data[:] = 0.0
    return s


def test_embed_zero_patches_gives_bias(state):
    s = _zeroed(state)
    s["patch_embed.bias"].data[:] = np.arange(128.0)
    tok = embed_patches(np.zeros((1, 5, 48)), np.arange(5), s).data
    assert np.all(tok == np.arange(128.0))


def test_embed_one_hot_patch(state):
    x = np.zeros((1, 1, 48))
    x[0, 0, 7] = 1.0
    tok = embed_patches(x, np.array([11]), state).data[0, 0]
    expect = state["patch_embed.weight"].data[7] + state["patch_embed.bias"].data + state["encoder.pos"].data[11]
    assert np.allclose(tok, expect, rtol=0, atol=1e-15)


def test_embed_permutation(state):
    rng = np.random.default_rng(1)
    x, idx, perm = rng.random((1, 6, 48)), np.array([3, 0, 35, 7, 8, 20]), rng.permutation(6)
    a = embed_patches(x, idx, state).data
    b = embed_patches(x[:, perm], idx[perm], state).data
    assert np.array_equal(a[:, perm], b)


def test_embed_rejects_bad_index(state):
    with pytest.raises(ContractError):
        embed_patches(np.zeros((1, 1, 48)), np.array([36]), state)
    with pytest.raises(ShapeError):
        embed_patches(np.zeros((1, 1, 47)), np.array([0]), state)


def test_single_token_attention_is_one(state):
    tok = embed_patches(np.random.default_rng(2).random((1, 1, 48)), np.array([4]), state)
    _, rec = encoder_forward(tok, state, capture_attention=True)
    assert len(rec.layers) == 3
    for w in rec.layers:
        assert w.shape == (1, 4, 1, 1) and np.all(w == 1.0)


def test_duplicate_tokens_give_identical_rows(state):
    s = _zeroed(state)
    x = np.repeat(np.random.default_rng(3).random((1, 1, 48)), 4, axis=1)
    out, _ = encoder_forward(embed_patches(x, np.arange(4), s), s)
    assert np.allclose(out.data[0], out.data[0, :1], rtol=0, atol=1e-13)


def test_capture_does_not_change_output(state, images):
    a, _ = encode_images(state, images)
    b, rec = encode_images(state, images, capture_attention=True)
    assert np.array_equal(a.data, b.data)
    for w in rec.layers:
        assert np.all(w >= 0) and np.all(w <= 1)
        assert np.all(np.abs(w.sum(axis=-1) - 1.0) < 1e-9)


def test_encoder_permutation_equivariant(state, images):
    seq = patchify(images[:1])
    perm = np.random.default_rng(4).permutation(36)
    a, _ = encoder_forward(embed_patches(seq, np.arange(36), state), state)
    b, _ = encoder_forward(embed_patches(seq[:, perm], perm, state), state)
    assert np.allclose(a.data[:, perm], b.data, rtol=0, atol=1e-12)


def test_zero_head_reconstructs_bias(state, images):
    s = state.copy()
    s["recon_head.weight"].data[:] = 0.0
    s["recon_head.bias"].data[:] = np.linspace(0, 1, 48)
    out = mae_forward(s, images, grid_mask()).data
    assert out.shape == (2, 36, 48)
    assert np.all(out == np.linspace(0, 1, 48))


@pytest.mark.parametrize("pattern", [grid_mask(6, 6, 0), grid_mask(6, 6, 1)])
def test_output_shape_any_mask(state, images, pattern):
    assert mae_forward(state, images, pattern).shape == (2, 36, 48)


def test_decoder_rejects_wrong_length(state):
    with pytest.raises(ShapeError):
        decoder_forward(ad.Tensor(np.zeros((1, 35, 32))), state)


def test_eval_forward_deterministic(state, images):
    a = mae_forward(state, images, grid_mask()).data
    b = mae_forward(state, images, grid_mask()).data
    assert np.array_equal(a, b)


def test_dropout_zero_train_matches_eval(images):
    s = init_model(ModelConfig(dropout=0.0), seed=3)
    a = mae_forward(s, images, grid_mask()).data
    b = mae_forward(s, images, grid_mask(), rng=np.random.default_rng(0)).data
    assert np.array_equal(a, b)


# straight-line reference forward pass in plain numpy

def _ln(x, g, b, eps=1e-5):
    mu = x.mean(-1, keepdims=True)
    var = ((x - mu) ** 2).mean(-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * g + b


def _gelu(x):
    return 0.5 * x * (1 + np.tanh(math.sqrt(2 / math.pi) * (x + 0.044715 * x**3)))


def _ref_block(x, p, pre, heads):
    s, d = x.shape
    dh = d // heads
    h = _ln(x, p[f"{pre}.norm1.gain"], p[f"{pre}.norm1.bias"])
    q, k, v = (h @ p[f"{pre}.attn.{n}.weight"] + p[f"{pre}.attn.{n}.bias"] for n in "qkv")
    heads_out = []
    for i in range(heads):
        sl = slice(i * dh, (i + 1) * dh)
        sc = q[:, sl] @ k[:, sl].T / math.sqrt(dh)
        e = np.exp(sc - sc.max(-1, keepdims=True))
        heads_out.append((e / e.sum(-1, keepdims=True)) @ v[:, sl])
    x = x + np.concatenate(heads_out, -1) @ p[f"{pre}.attn.out.weight"] + p[f"{pre}.attn.out.bias"]
    h = _ln(x, p[f"{pre}.norm2.gain"], p[f"{pre}.norm2.bias"])
    h = _gelu(h @ p[f"{pre}.mlp.fc1.weight"] + p[f"{pre}.mlp.fc1.bias"])
    return x + h @ p[f"{pre}.mlp.fc2.weight"] + p[f"{pre}.mlp.fc2.bias"]


def test_mae_forward_matches_reference(state, images):
    p = {k: v.data for k, v in state.params.items()}
    pattern = grid_mask(6, 6, 1)
    got = mae_forward(state, images, pattern).data
    for b in range(2):
        vis, idx = apply_mask(patchify(images[b]), pattern)
        x = vis @ p["patch_embed.weight"] + p["patch_embed.bias"] + p["encoder.pos"][idx]
        for layer in range(3):
            x = _ref_block(x, p, f"encoder.blocks.{layer}", 4)
        x = _ln(x, p["encoder.norm.gain"], p["encoder.norm.bias"])
        x = x @ p["bridge.weight"] + p["bridge.bias"]
        full = np.tile(p["mask_embedding"], (36, 1))
        full[idx] = x
        y = full + p["decoder.pos"]
        for layer in range(2):
            y = _ref_block(y, p, f"decoder.blocks.{layer}", 2)
        y = _ln(y, p["decoder.norm.gain"], p["decoder.norm.bias"])
        ref = y @ p["recon_head.weight"] + p["recon_head.bias"]
        assert np.max(np.abs(ref - got[b])) < 1e-10


def test_attention_block_gradient(state):
    cfg = ModelConfig(encoder_layers=1, decoder_layers=1, dropout=0.0)
    s = init_model(cfg, seed=5)
    x0 = np.random.default_rng(5).random((1, 6, 48))
    names = [n for n in s.names() if n.startswith("encoder.blocks.0.attn")]

    def f(*ts):
        for n, t in zip(names, ts):
            s.params[n] = t
        out, _ = encoder_forward(embed_patches(x0, np.arange(6), s), s)
        return ad.sum(ad.square(out))

    pts = [s[n].data.copy() for n in names]
    assert ad.grad_check(f, pts, max_coords=8) < 1e-4


# checkpoints

def test_checkpoint_roundtrip(tmp_path, state):
    path = tmp_path / "m.v4lp"
    opt = ad.AdamState(learning_rate=5e-4, step_count=3)
    opt.first_moment["x"] = np.arange(3.0)
    opt.second_moment["x"] = np.ones(3)
    save_checkpoint(path, state, {"seed": "0"}, {"main": opt})
    raw = path.read_bytes()
    assert raw[:4] == b"V4LP" and struct.unpack_from("<H", raw, 4)[0] == 1
    loaded, meta, opts = load_checkpoint(path)
    assert meta["seed"] == "0"
    assert loaded.config == state.config
    assert list(loaded.params) == list(state.params)
    for k in state.names():
        assert np.array_equal(loaded[k].data, state[k].data)
    o = opts["main"]
    assert o.step_count == 3 and o.learning_rate == 5e-4
    assert np.array_equal(o.first_moment["x"], np.arange(3.0))
    save_checkpoint(tmp_path / "again.v4lp", loaded, meta, opts)
    assert (tmp_path / "again.v4lp").read_bytes() == raw


def test_checkpoint_rejects_bad_files(tmp_path, state):
    path = tmp_path / "m.v4lp"
    save_checkpoint(path, state)
    raw = path.read_bytes()
    (tmp_path / "magic").write_bytes(b"XXXX" + raw[4:])
    (tmp_path / "version").write_bytes(raw[:4] + struct.pack("<H", 9) + raw[6:])
    (tmp_path / "trunc").write_bytes(raw[: len(raw) // 2])
    for name, pattern in (("magic", "magic"), ("version", "version"), ("trunc", "corrupt")):
        with pytest.raises(CheckpointError, match=pattern):
            load_checkpoint(tmp_path / name)
    with pytest.raises(FileNotFoundError):
        load_checkpoint(tmp_path / "missing")
