import csv

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from robustlens.adversarial import (AttackSpec, TrainConfig, TrainingDiverged, clean_accuracy, kl_robust_loss,
                                    pgd_attack, robust_accuracy, train)
from robustlens.data import LabeledDataset
from robustlens.models import Model, ModelConfig, cross_entropy, flatten, forward_logits, init_model, layout


def _logistic(w):
    """Two-class linear model with p(y=1|x) = sigmoid(w^T x)."""
    n = len(w)
    cfg = ModelConfig(input_shape=(1, 1, n), widths=(n,), num_classes=2, activation="linear")
    blocks = {b.name: np.zeros(b.shape) for b in layout(cfg)}
    blocks["fc0.weight"] = np.eye(n)
    blocks["head.weight"] = np.vstack([np.zeros(n), w])
    return Model(cfg, flatten(cfg, blocks))


def test_zero_epsilon_is_identity(toy_model, toy_data):
    x = toy_data[1].images[:5]
    np.testing.assert_array_equal(pgd_attack(toy_model, x, toy_data[1].labels[:5], AttackSpec(0.0)), x)


@pytest.mark.parametrize("label,sign", [(0, 1.0), (1, -1.0)])
def test_logistic_one_step_is_steepest_ascent(label, sign):
    w = np.array([0.6, -0.8])
    x = np.array([[[[0.5, 0.5]]]])
    eps = 0.1
    xs = pgd_attack(_logistic(w), x, [label], AttackSpec(eps, steps=1, step_size=eps))
    np.testing.assert_allclose(xs.ravel(), x.ravel() + eps * sign * w / np.linalg.norm(w), rtol=0, atol=1e-15)


def test_default_step_size():
    assert AttackSpec(1.0).steps == 8
    assert AttackSpec(1.0).alpha == 2.5 / 8


def test_attack_spec_validation():
    with pytest.raises(ValueError):
        AttackSpec(-0.1)
    with pytest.raises(ValueError):
        AttackSpec(1.0, steps=0)


@settings(max_examples=15, deadline=None)
@given(st.floats(0.01, 3.0), st.integers(1, 6))
def test_attack_feasible_and_never_worse(eps, steps):
    cfg = ModelConfig(input_shape=(1, 4, 4), widths=(8,), num_classes=3, seed=11)
    m = init_model(cfg)
    rng = np.random.default_rng(steps)
    x, y = rng.random((6, 1, 4, 4)), rng.integers(0, 3, 6)
    xs = pgd_attack(m, x, y, AttackSpec(eps, steps))
    d = np.sqrt(((xs - x) ** 2).reshape(6, -1).sum(1))
    assert np.all(d <= eps + 1e-9)
    assert xs.min() >= 0.0 and xs.max() <= 1.0
    assert np.all(cross_entropy(forward_logits(m, xs), y) >= cross_entropy(forward_logits(m, x), y))


def _tiny_train(mode, eps=0.0, beta=6.0, epochs=2):
    rng = np.random.default_rng(0)
    ds = LabeledDataset(rng.random((40, 1, 4, 4)), np.arange(40) % 3, num_classes=3)
    m = init_model(ModelConfig(input_shape=(1, 4, 4), widths=(8, 6), num_classes=3, seed=2))
    return train(m, ds, AttackSpec(eps, 3), TrainConfig(epochs=epochs, batch_size=8, mode=mode, beta=beta, seed=5))


def test_at_with_zero_epsilon_equals_standard():
    a, _ = _tiny_train("at", 0.0)
    b, _ = _tiny_train("standard")
    assert a.params.tobytes() == b.params.tobytes()


def test_trades_with_zero_beta_equals_standard():
    a, _ = _tiny_train("trades", 0.5, beta=0.0)
    b, _ = _tiny_train("standard")
    assert a.params.tobytes() == b.params.tobytes()


def test_training_is_bit_reproducible():
    a, ma = _tiny_train("trades", 0.5)
    b, mb = _tiny_train("trades", 0.5)
    assert a.params.tobytes() == b.params.tobytes()
    assert ma.rows() == mb.rows()
    assert a.eps_train == 0.5


def test_metrics_csv(tmp_path):
    _, metrics = _tiny_train("at", 0.3, epochs=3)
    metrics.write_csv(tmp_path / "m.csv")
    lines = (tmp_path / "m.csv").read_text().splitlines()
    assert lines[0].startswith("# schema:")
    rows = list(csv.reader(lines[1:]))
    assert rows[0] == ["epoch", "clean_acc", "robust_acc", "loss", "w_l2norm"]
    assert len(rows) == 4 and all(float(r[4]) > 0 for r in rows[1:])


@pytest.mark.filterwarnings("ignore:overflow")
def test_divergence_aborts_with_dump(tmp_path):
    rng = np.random.default_rng(0)
    ds = LabeledDataset(rng.random((16, 1, 4, 4)), np.arange(16) % 2, num_classes=2)
    m = init_model(ModelConfig(input_shape=(1, 4, 4), widths=(8,), num_classes=2))
    cfg = TrainConfig(epochs=5, batch_size=4, lr=1e30, momentum=0.0, dump_path=str(tmp_path / "d.rlns"))
    with pytest.raises(TrainingDiverged):
        train(m, ds, AttackSpec(0.0), cfg)
    assert (tmp_path / "d.rlns").is_file()


def test_kl_robust_loss_degenerate_cases(toy_model, toy_data):
    x, y = toy_data[1].images[:8], toy_data[1].labels[:8]
    ce = float(np.mean(cross_entropy(forward_logits(toy_model, x), y)))
    spec = AttackSpec(0.5, loss_target="kl-vs-clean")
    assert abs(kl_robust_loss(toy_model, x, y, AttackSpec(0.0, loss_target="kl-vs-clean"), 6.0) - ce) < 1e-12
    assert abs(kl_robust_loss(toy_model, x, y, spec, 0.0) - ce) < 1e-12
    assert kl_robust_loss(toy_model, x, y, spec, 6.0) >= ce
    with pytest.raises(ValueError):
        kl_robust_loss(toy_model, x, y, AttackSpec(0.5), 1.0)


def test_robust_accuracy_zero_eps_equals_clean(toy_model, toy_data):
    te = toy_data[1]
    assert robust_accuracy(toy_model, te, AttackSpec(0.0)) == clean_accuracy(toy_model, te)


def test_random_model_is_at_chance():
    rng = np.random.default_rng(1)
    ds = LabeledDataset(rng.random((1000, 1, 6, 6)), np.arange(1000) % 10, num_classes=10)
    m = init_model(ModelConfig(input_shape=(1, 6, 6), widths=(16,), num_classes=10, seed=4))
    assert abs(clean_accuracy(m, ds) - 0.1) <= 0.05
    assert abs(robust_accuracy(m, ds, AttackSpec(0.05, 2)) - 0.1) <= 0.05


@settings(max_examples=8, deadline=None)
@given(st.floats(0.0, 4.0))
def test_robust_never_exceeds_clean(eps):
    rng = np.random.default_rng(2)
    ds = LabeledDataset(rng.random((30, 1, 4, 4)), np.arange(30) % 3, num_classes=3)
    m = init_model(ModelConfig(input_shape=(1, 4, 4), widths=(8,), num_classes=3, seed=9))
    assert robust_accuracy(m, ds, AttackSpec(eps, 3)) <= clean_accuracy(m, ds)


def test_masked_training_leaves_other_blocks():
    rng = np.random.default_rng(3)
    ds = LabeledDataset(rng.random((20, 1, 4, 4)), np.arange(20) % 2, num_classes=2)
    m = init_model(ModelConfig(input_shape=(1, 4, 4), widths=(8,), num_classes=2))
    out, _ = train(m, ds, AttackSpec(0.0), TrainConfig(epochs=2, batch_size=5), trainable=["head.weight"])
    for b in layout(m.config):
        same = m.blocks()[b.name].tobytes() == out.blocks()[b.name].tobytes()
        assert same == (b.name != "head.weight")
