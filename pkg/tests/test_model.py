import struct

import numpy as np
import pytest

from gliomaseg import metrics
from gliomaseg.gradcheck import finite_diff_check
from gliomaseg.model import (
    PENULTIMATE_LAYER,
    ConfigMismatchError,
    MagicMismatchError,
    MissingParameterError,
    ModelConfig,
    ParameterShapeError,
    TruncatedFileError,
    UnknownParameterError,
    VersionMismatchError,
    attention_gate,
    build_model,
    decoder_block,
    encoder_block,
    forward,
    load_weights,
    predict_mask,
    save_weights,
)
from gliomaseg.tensor import ShapeError, Tensor, _topological, no_grad, precision

TINY = ModelConfig(in_channels=2, num_classes=4, depth=4, base_filters=4, seed=3)


def test_bottleneck_widths():
    assert build_model(ModelConfig(base_filters=8)).params["bottleneck.conv2.weight"].shape[0] == 128
    assert ModelConfig(base_filters=64).bottleneck_filters == 1024
    full = ModelConfig()
    assert [full.filters(i) for i in range(4)] == [64, 128, 256, 512]
    assert full.bottleneck_filters == 1024


def test_build_is_deterministic_and_he_scaled():
    a = build_model(ModelConfig(base_filters=8, seed=5))
    b = build_model(ModelConfig(base_filters=8, seed=5))
    for name in a.params:
        assert a.params[name].data.tobytes() == b.params[name].data.tobytes()
    w = a.params["bottleneck.conv2.weight"].data
    assert w.std() == pytest.approx(np.sqrt(2 / (128 * 9)), rel=0.05)
    assert np.all(a.params["enc0.conv1.bias"].data == 0)


def test_parameter_names_unique_and_documented():
    m = build_model(ModelConfig(base_filters=4))
    names = m.parameter_names()
    assert len(names) == len(set(names))
    assert "dec0.att.psi" in names and f"{PENULTIMATE_LAYER}.weight" in names
    plain = build_model(ModelConfig(base_filters=4, attention_enabled=False))
    assert not any(".att." in n for n in plain.parameter_names())


def test_encoder_block_shapes_and_zero_case():
    m = build_model(ModelConfig(base_filters=8))
    x = Tensor(np.random.default_rng(0).uniform(size=(1, 2, 32, 32)))
    feats, pooled = encoder_block(m, 0, x)
    assert feats.shape == (1, 8, 32, 32) and pooled.shape == (1, 8, 16, 16)
    for name in ("enc0.conv1.weight", "enc0.conv1.bias", "enc0.conv2.weight", "enc0.conv2.bias"):
        m.params[name].data[...] = 0
    feats, _ = encoder_block(m, 0, x)
    assert np.all(feats.data == 0)


def test_attention_gate_half_when_psi_zero(rng):
    m = build_model(ModelConfig(base_filters=8))
    m.params["dec1.att.psi"].data[...] = 0
    m.params["dec1.att.b2"].data[...] = 0
    skip = Tensor(rng.normal(size=(1, 16, 8, 8)))
    out, alpha = attention_gate(m, 1, skip, Tensor(rng.normal(size=(1, 16, 8, 8))), return_alpha=True)
    assert np.all(alpha.data == 0.5)
    np.testing.assert_array_equal(out.data, skip.data / 2)


def test_attention_gate_bounds_and_mismatch(rng):
    m = build_model(ModelConfig(base_filters=8))
    skip = Tensor(rng.normal(size=(2, 16, 8, 8)) * 10)
    out, alpha = attention_gate(m, 1, skip, Tensor(rng.normal(size=(2, 16, 8, 8)) * 10), return_alpha=True)
    assert alpha.shape == (2, 1, 8, 8)
    assert np.all((alpha.data > 0) & (alpha.data < 1))
    assert np.all(np.abs(out.data) <= np.abs(skip.data))
    with pytest.raises(ShapeError):
        attention_gate(m, 1, skip, Tensor(np.zeros((2, 16, 4, 4))))


def _param_check(model, names, loss_fn, rng, coords_per_param=12):
    worst = 0.0
    for name in names:
        original = model.params[name]
        point = original.data.copy()
        idx = [tuple(rng.integers(0, s) for s in point.shape) for _ in range(coords_per_param)]

        def fn(t, name=name):
            model.params[name] = t
            try:
                return loss_fn()
            finally:
                model.params[name] = original

        worst = max(worst, finite_diff_check(fn, point, coords=idx))
    return worst


def test_attention_gate_parameter_gradients(double, rng):
    m = build_model(ModelConfig(base_filters=8, seed=1))
    skip = Tensor(rng.uniform(-1, 1, size=(1, 16, 4, 4)))
    gate = Tensor(rng.uniform(-1, 1, size=(1, 16, 4, 4)))
    proj = Tensor(rng.uniform(-1, 1, size=(1, 16, 4, 4)))
    names = ["dec1.att.wg", "dec1.att.wx", "dec1.att.psi", "dec1.att.b1", "dec1.att.b2"]
    assert _param_check(m, names, lambda: (attention_gate(m, 1, skip, gate) * proj).sum(), rng) <= 1e-5


def test_encoder_block_gradient(double, rng):
    m = build_model(ModelConfig(base_filters=4, seed=2))
    proj = Tensor(rng.uniform(-1, 1, size=(1, 4, 4, 4)))
    assert finite_diff_check(lambda x: (encoder_block(m, 0, x)[1] * proj).sum(),
                             rng.uniform(-1, 1, size=(1, 2, 8, 8))) <= 1e-5
    x = Tensor(rng.uniform(-1, 1, size=(1, 2, 8, 8)))
    assert _param_check(m, ["enc0.conv1.weight", "enc0.conv2.weight", "enc0.conv2.bias"],
                        lambda: (encoder_block(m, 0, x)[1] * proj).sum(), rng) <= 1e-5


@pytest.mark.parametrize("attention", [True, False])
def test_decoder_block_shape_and_gradient(double, rng, attention):
    m = build_model(ModelConfig(base_filters=8, seed=4, attention_enabled=attention))
    x = rng.uniform(-1, 1, size=(1, 16, 4, 4))
    skip = Tensor(rng.uniform(-1, 1, size=(1, 8, 8, 8)))
    assert decoder_block(m, 0, Tensor(x), skip).shape == (1, 8, 8, 8)
    proj = Tensor(rng.uniform(-1, 1, size=(1, 8, 8, 8)))
    assert finite_diff_check(lambda t: (decoder_block(m, 0, t, skip) * proj).sum(), x,
                             coords=[tuple(rng.integers(0, s) for s in x.shape) for _ in range(30)]) <= 1e-5
    names = ["dec0.up.weight", "dec0.conv1.weight"] + (["dec0.att.wg", "dec0.att.psi"] if attention else [])
    assert _param_check(m, names, lambda: (decoder_block(m, 0, Tensor(x), skip) * proj).sum(), rng) <= 1e-5


def test_decoder_block_docs_shape_example():
    m = build_model(ModelConfig(base_filters=8))
    out = decoder_block(m, 0, Tensor(np.zeros((1, 16, 8, 8))), Tensor(np.zeros((1, 8, 16, 16))))
    assert out.shape == (1, 8, 16, 16)


def test_forward_full_scale_shapes():
    m = build_model(ModelConfig(base_filters=2))
    with no_grad():
        probs = forward(m, np.random.default_rng(0).uniform(size=(2, 2, 128, 128)).astype(np.float32))
    assert probs.shape == (2, 4, 128, 128)
    np.testing.assert_allclose(probs.data.sum(axis=1), 1.0, atol=1e-6)


def test_forward_is_pure(rng):
    m = build_model(ModelConfig(base_filters=4))
    x = rng.uniform(size=(1, 2, 32, 32)).astype(np.float32)
    assert forward(m, x).data.tobytes() == forward(m, x).data.tobytes()


def test_forward_rejects_bad_dims():
    m = build_model(ModelConfig(base_filters=4))
    with pytest.raises(ShapeError):
        forward(m, np.zeros((1, 2, 40, 40), dtype=np.float32))
    with pytest.raises(ShapeError):
        forward(m, np.zeros((1, 3, 32, 32), dtype=np.float32))


@pytest.mark.parametrize("size", [32, 64, 128])
def test_shape_mirror(size):
    m = build_model(ModelConfig(base_filters=1))
    h = Tensor(np.zeros((1, 2, size, size)))
    skips = []
    with no_grad():
        for i in range(4):
            s, h = encoder_block(m, i, h)
            skips.append(s.shape)
        for i in reversed(range(4)):
            assert skips[i][2:] == (size >> i, size >> i)
    assert skips[0][2:] == (size, size)


def test_attention_off_graph_has_no_sigmoid():
    x = np.zeros((1, 2, 32, 32), dtype=np.float32)
    for enabled, expect in ((False, 0), (True, 4)):
        m = build_model(ModelConfig(base_filters=2, attention_enabled=enabled))
        ops = [n.op for n in _topological(forward(m, x))]
        assert ops.count("sigmoid") == expect


def test_predict_mask_rules(rng):
    p = np.zeros((1, 4, 1, 2))
    p[0, 0, 0, 0] = 1
    p[0, :, 0, 1] = 0.25
    assert predict_mask(p).tolist() == [[[0, 0]]]
    probs = rng.uniform(size=(2, 4, 5, 5))
    labels = predict_mask(probs)
    for n in range(2):
        for i in range(5):
            for j in range(5):
                best, arg = -1.0, -1
                for c in range(4):
                    if probs[n, c, i, j] > best:
                        best, arg = probs[n, c, i, j], c
                assert labels[n, i, j] == arg


def tiny_loss_fn(model, x, y):
    return lambda: metrics.combined_loss(y, forward(model, x))


def end_to_end_gradient_error(seed=0, coords_per_param=6):
    """Max relative error of the full-model loss gradient (base_filters 4, 32x32)."""
    rng = np.random.default_rng(seed)
    with precision("double"):
        m = build_model(ModelConfig(base_filters=4, seed=seed))
        x = rng.uniform(0, 1, size=(1, 2, 32, 32))
        labels = rng.integers(0, 4, size=(1, 32, 32))
        y = (np.arange(4)[None, :, None, None] == labels[:, None]).astype(float)
        names = ["enc0.conv1.weight", "enc2.conv2.bias", "bottleneck.conv1.weight", "dec3.up.weight",
                 "dec2.att.wg", "dec1.att.psi", "dec0.att.b2", "dec0.conv2.weight", "head.weight", "head.bias"]
        worst = _param_check(m, names, tiny_loss_fn(m, Tensor(x), y), rng, coords_per_param)
        coords = [tuple(rng.integers(0, s) for s in x.shape) for _ in range(coords_per_param)]
        worst = max(worst, finite_diff_check(lambda t: metrics.combined_loss(y, forward(m, t)), x, coords=coords))
    return worst


def test_end_to_end_gradient():
    assert end_to_end_gradient_error(0) <= 1e-3


# -- persistence ----------------------------------------------------------------------
@pytest.fixture
def saved(tmp_path):
    m = build_model(TINY)
    path = tmp_path / "m.weights"
    save_weights(m, path)
    return m, path


def test_weights_roundtrip_bitwise(saved, rng):
    m, path = saved
    loaded = load_weights(path, expected=TINY)
    for name in m.params:
        assert loaded.params[name].data.tobytes() == m.params[name].data.tobytes()
    x = rng.uniform(size=(1, 2, 32, 32)).astype(np.float32)
    assert forward(loaded, x).data.tobytes() == forward(m, x).data.tobytes()


def test_weights_header_layout(saved):
    _, path = saved
    blob = path.read_bytes()
    assert blob[:8] == b"AUNETWT1"
    assert struct.unpack("<I", blob[8:12]) == (1,)
    assert struct.unpack("<5I", blob[12:32]) == (2, 4, 4, 4, 1)


def test_weights_bad_magic(saved):
    _, path = saved
    blob = bytearray(path.read_bytes())
    blob[0:2] = b"XX"
    path.write_bytes(bytes(blob))
    with pytest.raises(MagicMismatchError):
        load_weights(path)


def test_weights_bad_version(saved):
    _, path = saved
    blob = bytearray(path.read_bytes())
    blob[8:12] = struct.pack("<I", 9)
    path.write_bytes(bytes(blob))
    with pytest.raises(VersionMismatchError):
        load_weights(path)


def _records(blob):
    """Split a weights file into (prefix, list of (name, record bytes))."""
    pos = 36
    out = []
    while pos < len(blob):
        start = pos
        (n,) = struct.unpack("<H", blob[pos:pos + 2])
        name = blob[pos + 2:pos + 2 + n].decode()
        pos += 2 + n
        rank = blob[pos]
        extents = struct.unpack(f"<{rank}I", blob[pos + 1:pos + 1 + 4 * rank])
        pos += 1 + 4 * rank + 4 * int(np.prod(extents))
        out.append((name, blob[start:pos]))
    return blob[:32], out


def test_weights_missing_parameter_named(saved):
    _, path = saved
    prefix, records = _records(path.read_bytes())
    dropped = records[5][0]
    kept = [r for i, (_, r) in enumerate(records) if i != 5]
    path.write_bytes(prefix + struct.pack("<I", len(kept)) + b"".join(kept))
    with pytest.raises(MissingParameterError, match=dropped.replace(".", r"\.")):
        load_weights(path)


def test_weights_truncated(saved):
    _, path = saved
    blob = path.read_bytes()
    path.write_bytes(blob[:-7])
    with pytest.raises(TruncatedFileError):
        load_weights(path)


def test_weights_unknown_and_misshapen(saved, tmp_path):
    m, path = saved
    prefix, records = _records(path.read_bytes())
    name0, rec0 = records[0]
    renamed = struct.pack("<H", 5) + b"bogus" + rec0[2 + len(name0):]
    p1 = tmp_path / "unknown.weights"
    p1.write_bytes(prefix + struct.pack("<I", len(records)) + renamed + b"".join(r for _, r in records[1:]))
    with pytest.raises(UnknownParameterError):
        load_weights(p1)
    other = build_model(ModelConfig(in_channels=1, base_filters=4))
    p2 = tmp_path / "other.weights"
    save_weights(other, p2)
    blob = bytearray(p2.read_bytes())
    blob[12:16] = struct.pack("<I", 2)  # claim 2 input channels
    p2.write_bytes(bytes(blob))
    with pytest.raises(ParameterShapeError):
        load_weights(p2)


def test_weights_config_mismatch(saved):
    _, path = saved
    with pytest.raises(ConfigMismatchError):
        load_weights(path, expected=ModelConfig(base_filters=8))
