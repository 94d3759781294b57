import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from robustlens.models import (CheckpointError, ConfigError, Model, ModelConfig, checkpoint_bytes, cross_entropy,
                               flatten, forward_features, forward_logits, init_model, layout, load_checkpoint,
                               param_count, param_l2_norm, parse_checkpoint, predict, save_checkpoint, unflatten)

SMALL = ModelConfig(input_shape=(1, 4, 4), widths=(6, 5), num_classes=3, seed=3)
CONV = ModelConfig(arch="smallconv", input_shape=(1, 14, 14), widths=(2, 3, 4), num_classes=3, norm=True, seed=1)


def _with_blocks(cfg, **blocks):
    full = {b.name: np.zeros(b.shape) for b in layout(cfg)}
    full.update(blocks)
    return Model(cfg, flatten(cfg, full))


def test_init_is_deterministic():
    a, b = init_model(SMALL), init_model(SMALL)
    assert a.params.tobytes() == b.params.tobytes()
    assert init_model(ModelConfig(**{**SMALL.__dict__, "seed": 4})).params.tobytes() != a.params.tobytes()


def test_invalid_configs():
    with pytest.raises(ConfigError):
        ModelConfig(widths=(256, 0))
    with pytest.raises(ConfigError):
        ModelConfig(num_classes=1)
    with pytest.raises(ConfigError):
        ModelConfig(arch="resnet")


def test_mlp_layout_rule():
    cfg = ModelConfig(widths=(256, 128), num_classes=10)
    names = [b.name for b in layout(cfg)]
    assert names == ["fc0.weight", "fc0.bias", "fc1.weight", "fc1.bias", "head.weight", "head.bias"]
    assert cfg.k == 128
    assert param_count(cfg) == 784 * 256 + 256 + 256 * 128 + 128 + 10 * 128 + 10


def test_layout_partitions_the_flat_vector():
    for cfg in (SMALL, CONV):
        off = 0
        for b in layout(cfg):
            assert b.offset == off
            off += b.size
        assert off == param_count(cfg)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_flatten_unflatten_roundtrip(seed):
    v = np.random.default_rng(seed).normal(size=param_count(CONV))
    np.testing.assert_array_equal(flatten(CONV, unflatten(CONV, v)), v)


def test_identity_linear_extractor():
    cfg = ModelConfig(input_shape=(1, 2, 3), widths=(6,), num_classes=2, activation="linear")
    m = _with_blocks(cfg, **{"fc0.weight": np.eye(6)})
    x = np.random.default_rng(0).random((3, 1, 2, 3))
    np.testing.assert_array_equal(forward_features(m, x), x.reshape(3, 6))


def test_zero_weights_give_relu_of_bias():
    bias = np.array([0.5, -1.0, 2.0, 0.0, 1.5])
    m = _with_blocks(SMALL, **{"fc1.bias": bias})
    z = forward_features(m, np.random.default_rng(1).random((2, 1, 4, 4)))
    np.testing.assert_array_equal(z, np.tile(np.maximum(bias, 0), (2, 1)))


def test_features_are_bit_stable():
    m = init_model(CONV)
    x = np.random.default_rng(2).random((3, 1, 14, 14))
    assert forward_features(m, x).tobytes() == forward_features(m, x).tobytes()


def test_shape_mismatch():
    from robustlens.autodiff import ShapeError
    with pytest.raises(ShapeError):
        forward_features(init_model(SMALL), np.zeros((2, 1, 5, 5)))


def test_large_bias_on_class_3():
    cfg = ModelConfig(input_shape=(1, 4, 4), widths=(5,), num_classes=5)
    m = _with_blocks(cfg, **{"head.bias": np.array([0, 0, 0, 10.0, 0])})
    x = np.random.default_rng(3).random((7, 1, 4, 4))
    np.testing.assert_array_equal(predict(m, x), [3] * 7)


def test_cross_entropy_shift_invariance():
    rng = np.random.default_rng(4)
    logits, y = rng.normal(size=(5, 4)), rng.integers(0, 4, 5)
    np.testing.assert_allclose(cross_entropy(logits + 7.5, y), cross_entropy(logits, y), rtol=1e-12)


def test_hand_computed_head():
    cfg = ModelConfig(input_shape=(1, 1, 2), widths=(2,), num_classes=2, activation="linear")
    A, b = np.array([[1.0, 2.0], [3.0, -1.0]]), np.array([0.5, -0.5])
    m = _with_blocks(cfg, **{"fc0.weight": np.eye(2), "head.weight": A, "head.bias": b})
    # z = (2, 3): logits = (1*2 + 2*3 + 0.5, 3*2 - 1*3 - 0.5)
    np.testing.assert_array_equal(forward_logits(m, np.array([[[[2.0, 3.0]]]])), [[8.5, 2.5]])


def test_logits_equal_head_of_features():
    m = init_model(CONV)
    x = np.random.default_rng(5).random((4, 1, 14, 14))
    blk = m.blocks()
    z = forward_features(m, x)
    np.testing.assert_array_equal(forward_logits(m, x), z @ blk["head.weight"].T + blk["head.bias"])


def test_predict_is_batch_order_invariant():
    m = init_model(SMALL)
    x = np.random.default_rng(6).random((9, 1, 4, 4))
    perm = np.random.default_rng(7).permutation(9)
    np.testing.assert_array_equal(predict(m, x)[perm], predict(m, x[perm]))


def test_tie_break_lowest_index():
    cfg = ModelConfig(input_shape=(1, 2, 2), widths=(2,), num_classes=3)
    m = _with_blocks(cfg, **{"head.bias": np.array([0.0, 1.0, 1.0])})
    assert predict(m, np.zeros((1, 1, 2, 2)))[0] == 1


def test_param_l2_norm():
    assert param_l2_norm(_with_blocks(SMALL)) == 0.0
    one = np.zeros(param_count(SMALL))
    one[5] = 3.0
    assert param_l2_norm(Model(SMALL, one)) == 3.0
    m = init_model(CONV)
    brute = np.sqrt(sum(float(np.sum(v ** 2)) for v in m.blocks().values()))
    assert abs(param_l2_norm(m) - brute) < 1e-12


def test_checkpoint_roundtrip(tmp_path):
    m = init_model(CONV).with_params(init_model(CONV).params, eps_train=0.5)
    save_checkpoint(m, tmp_path / "m.rlns")
    back = load_checkpoint(tmp_path / "m.rlns")
    assert back.params.tobytes() == m.params.tobytes()
    assert back.config == m.config and back.eps_train == 0.5
    assert checkpoint_bytes(back) == checkpoint_bytes(m)


def test_checkpoint_errors():
    data = checkpoint_bytes(init_model(SMALL))
    cases = [
        (b"XLNS" + data[4:], "bad magic"),
        (data + b"\0\0\0\0", "trailing data"),
        (data[:-3], "truncated"),
        (data[:4] + struct.pack("<I", 2) + data[8:], "version mismatch"),
        (data.replace(b"params:", b"params:1"), "layout mismatch"),
    ]
    for blob, code in cases:
        with pytest.raises(CheckpointError) as exc:
            parse_checkpoint(blob)
        assert exc.value.code == code
        assert str(exc.value).startswith(code)
