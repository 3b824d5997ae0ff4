import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ccat import container
from ccat import nncore as nn
from ccat.errors import ConfigError, CorruptCheckpoint, EmptyInput, FormatError, ShapeError
from ccat.frontend import ContextTensor
from ccat.model import (
    HEAD_BIAS_INIT,
    TABLE1_MODELS,
    ModelConfig,
    build,
    checkpoint_bytes,
    count_params,
    forward,
    forward_batch,
    load_checkpoint,
    save_checkpoint,
)

TINY = ModelConfig("MEL", 5, 4, 5, 1, 16, 2, 8, 8, 1, 0.0)


def _ct(T, F=16, C=5, seed=0):
    return ContextTensor(np.random.default_rng(seed).normal(size=(T, F, C)))


# ---------------------------------------------------------------- config / build

@pytest.mark.parametrize("name, F_in, pooled_F, flatten", [
    ("model1", 257, 32, 512), ("model2", 48, 6, 48), ("model3", 48, 6, 96)])
def test_table1_dimension_chain(name, F_in, pooled_F, flatten):
    net = build(TABLE1_MODELS[name], F_in)
    assert net.pooled_F == pooled_F and net.pooled_C == 1
    assert net.flatten_dim == flatten


def test_table1_values():
    m1, m2 = TABLE1_MODELS["model1"], TABLE1_MODELS["model2"]
    assert (m1.feature_kind, m1.context_size, m1.conv_filters, m1.num_encoders, m1.ff_units,
            m1.att_heads, m1.fc_units, m1.fc_layers, m1.dropout) == ("STFT", 11, 16, 4, 256, 4, 512, 2, 0.15)
    assert (m2.feature_kind, m2.conv_filters, m2.num_encoders, m2.att_heads, m2.fc_units, m2.dropout) == (
        "MEL", 8, 2, 2, 256, 0.19)


def test_model1_parameter_count():
    net = build(TABLE1_MODELS["model1"], 257)
    p = net.params
    assert p["conv1.kernel"].shape == (5, 5, 1, 16)  # 400 weights, no bias
    assert not any(k.startswith("conv") and k.endswith(".b") for k in p)
    assert p["head.w"].value.size + p["head.b"].value.size == 512 + 1
    # hand count: convs 13200, projection 32832, 4 encoders x 49984, FC 33280 + 262656, head 513
    assert count_params(net) == 542417
    assert count_params(net) == sum(v.value.size for v in net.parameters())


@pytest.mark.parametrize("kwargs", [
    {"context_size": 4}, {"conv_kernel": 2}, {"att_heads": 3}, {"dropout": 1.0},
    {"fc_layers": 0}, {"feature_kind": "MFCC"}, {"positional_encoding": "learned"}])
def test_config_validation(kwargs):
    base = TINY.to_dict()
    base.update(kwargs)
    with pytest.raises(ConfigError):
        ModelConfig.from_dict(base)


def test_config_rejects_unknown_keys():
    with pytest.raises(ConfigError):
        ModelConfig.from_dict({**TINY.to_dict(), "width": 3})


def test_build_rejects_unpoolable_plane():
    with pytest.raises(ConfigError):
        build(ModelConfig("MEL", 1, 4, 1, 1, 8, 2, 8, 8, 1, 0.0), 1)


def test_build_is_deterministic_and_seeded():
    a, b, c = build(TINY, 16, seed=3), build(TINY, 16, seed=3), build(TINY, 16, seed=4)
    for k in a.params:
        np.testing.assert_array_equal(a.params[k].value, b.params[k].value)
    assert not np.array_equal(a.params["conv1.kernel"].value, c.params["conv1.kernel"].value)


def test_initial_values():
    net = build(TINY, 16)
    assert np.all(net.params["head.b"].value == HEAD_BIAS_INIT)
    assert np.all(net.params["enc0.ln1_g"].value == 1) and np.all(net.params["enc0.ln2_b"].value == 0)
    assert not net.params["enc0.ln1_g"].decay and net.params["conv1.kernel"].decay
    w = net.params["proj.w"].value
    assert np.abs(w).max() <= np.sqrt(6.0 / sum(w.shape))


# ---------------------------------------------------------------- forward

def test_utterance_is_masked_frame_mean():
    net = build(TINY, 16, dtype=np.float64)
    # zero weights before the head make every frame score equal the head bias
    net.params["head.w"].value[:] = 0.0
    pred = forward(net, _ct(3))
    np.testing.assert_array_equal(pred.frame_scores, HEAD_BIAS_INIT)
    frames = nn.Tensor(np.array([[2.0, 3.0, 4.0]]))
    mask = np.ones((1, 3))
    assert float(nn.reduce_sum(frames * (mask / 3), axis=1).value[0]) == pytest.approx(3.0)


@settings(max_examples=15, deadline=None)
@given(T=st.integers(1, 9), seed=st.integers(0, 10_000), scale=st.floats(0.1, 50))
def test_scores_are_bounded(T, seed, scale):
    net = build(TINY, 16, seed=seed % 7)
    pred = forward(net, ContextTensor(scale * _ct(T, seed=seed).data))
    assert np.all((pred.frame_scores >= 0) & (pred.frame_scores <= 5))
    assert 0 <= pred.utterance_score <= 5
    assert pred.valid_frames == T


def test_masked_padding_is_invisible():
    net = build(TINY, 16, seed=1)
    ct = _ct(6, seed=2)
    a = forward(net, ct)
    b = forward(net, ct.padded(7))
    assert abs(a.utterance_score - b.utterance_score) < 1e-6
    np.testing.assert_allclose(a.frame_scores, b.frame_scores[:6], atol=1e-6)


def test_batched_forward_matches_single():
    net = build(TINY, 16, seed=2, dtype=np.float64)
    cts = [_ct(4, seed=5), _ct(7, seed=6)]
    data = np.zeros((2, 7, 16, 5))
    mask = np.zeros((2, 7), dtype=bool)
    for i, ct in enumerate(cts):
        data[i, :ct.T], mask[i, :ct.T] = ct.data, True
    _, utt = forward_batch(net, data, mask)
    for i, ct in enumerate(cts):
        assert utt.value[i] == pytest.approx(forward(net, ct).utterance_score, abs=1e-12)


def test_conv_stack_is_time_distributed():
    net = build(TINY, 16, seed=3, dtype=np.float64)
    ct = _ct(5, seed=7)
    perm = np.array([3, 0, 4, 1, 2])

    def conv_out(data):
        x = nn.Tensor(data.reshape(-1, 16, 5, 1))
        for i in (1, 2, 3):
            x = nn.avgpool2d(nn.relu(nn.conv2d_nobias(x, net.params[f"conv{i}.kernel"])))
        return x.value

    np.testing.assert_array_equal(conv_out(ct.data[perm]), conv_out(ct.data)[perm])


def test_inference_is_rng_free():
    net = build(TABLE1_MODELS["model2"], 48, seed=0)
    ct = _ct(5, F=48, C=11)
    assert forward(net, ct).utterance_score == forward(net, ct).utterance_score


def test_sinusoidal_option_changes_output():
    cfg = ModelConfig.from_dict({**TINY.to_dict(), "positional_encoding": "sinusoidal"})
    a, b = build(TINY, 16, seed=4), build(cfg, 16, seed=4)
    ct = _ct(5, seed=8)
    assert forward(a, ct).utterance_score != forward(b, ct).utterance_score


def test_forward_errors():
    net = build(TINY, 16)
    with pytest.raises(ShapeError):
        forward(net, _ct(3, F=15))
    with pytest.raises(ShapeError):
        forward(net, _ct(3, C=7))
    with pytest.raises(EmptyInput):
        forward(net, ContextTensor(np.zeros((2, 16, 5)), np.zeros(2, dtype=bool)))


# ---------------------------------------------------------------- checkpoints

def test_checkpoint_roundtrip_is_bit_exact(tmp_path):
    net = build(TABLE1_MODELS["model2"], 48, seed=9, feature={"kind": "MEL"})
    save_checkpoint(net, tmp_path / "m.ccat")
    back = load_checkpoint(tmp_path / "m.ccat")
    assert back.config == net.config and back.F_in == 48 and back.feature == {"kind": "MEL"}
    assert back.config.num_encoders == 2 and back.config.att_heads == 2
    for k, p in net.params.items():
        assert back.params[k].value.tobytes() == p.value.tobytes()
        assert back.params[k].decay == p.decay
    assert checkpoint_bytes(back) == (tmp_path / "m.ccat").read_bytes()


def test_checkpoint_header_layout():
    buf = checkpoint_bytes(build(TINY, 16))
    assert buf[:4] == b"CCAT"
    assert int.from_bytes(buf[4:8], "little") == 1


def test_truncated_checkpoint(tmp_path):
    buf = checkpoint_bytes(build(TINY, 16))
    for cut in (len(buf) - 1, len(buf) // 2, 20):
        (tmp_path / "t.ccat").write_bytes(buf[:cut])
        with pytest.raises(CorruptCheckpoint):
            load_checkpoint(tmp_path / "t.ccat")


def test_bad_magic_and_version(tmp_path):
    buf = checkpoint_bytes(build(TINY, 16))
    (tmp_path / "a").write_bytes(b"XCAT" + buf[4:])
    (tmp_path / "b").write_bytes(buf[:4] + (2).to_bytes(4, "little") + buf[8:])
    for name in ("a", "b"):
        with pytest.raises(FormatError):
            load_checkpoint(tmp_path / name)


def test_shape_inconsistent_with_config(tmp_path):
    net = build(TINY, 16)
    meta = {"format": "ccat-model", "model": TINY.to_dict(), "F_in": 16, "feature": None}
    tensors = [(k, p.value) for k, p in net.params.items()]
    tensors[0] = (tensors[0][0], np.zeros((3, 3, 1, 4), dtype=np.float32))
    container.write(tmp_path / "x", meta, tensors)
    with pytest.raises(CorruptCheckpoint):
        load_checkpoint(tmp_path / "x")
    container.write(tmp_path / "y", meta, [(k, p.value) for k, p in net.params.items()][:-1])
    with pytest.raises(CorruptCheckpoint):
        load_checkpoint(tmp_path / "y")


def test_container_roundtrip_u8_and_errors():
    blob = container.encode({"a": 1}, [("m", np.array([1, 0, 1], dtype=np.uint8)),
                                       ("x", np.arange(6, dtype=np.float32).reshape(2, 3))])
    meta, tensors = container.decode(blob)
    assert meta == {"a": 1}
    assert tensors["m"].dtype == np.uint8 and tensors["x"].shape == (2, 3)
    with pytest.raises(CorruptCheckpoint):
        container.decode(blob + b"\x00")
