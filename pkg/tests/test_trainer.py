import csv

import numpy as np
import pytest

from intertwiners import losses
from intertwiners.errors import ConfigError, DivergenceError
from intertwiners.intertwiner import Activation
from intertwiners.network import NetworkSpec, forward, init_weights
from intertwiners.numerics import make_rng
from intertwiners.trainer import (Dataset, TrainConfig, apply_preactivation_transform, backprop_grads, evaluate,
                                  rotation_penalty_experiment, synth_dataset, synth_split, teacher_network, train,
                                  transform_matrix, write_history_csv)

from conftest import ALL_KINDS, finite_difference, random_net, rel_error


def test_dataset_validation():
    with pytest.raises(ConfigError):
        Dataset(np.zeros((3, 2)), np.zeros(2))
    with pytest.raises(ConfigError):
        Dataset(np.zeros((2, 2)), np.array([0, -1]))


@pytest.mark.parametrize("kind", ["blobs", "rings", "teacher"])
def test_synth_is_deterministic(kind):
    a, va = synth_split(kind, 3, 4, 50, 20, seed=5)
    b, vb = synth_split(kind, 3, 4, 50, 20, seed=5)
    assert np.array_equal(a.inputs, b.inputs) and np.array_equal(va.labels, vb.labels)
    assert len(a) == 50 and len(va) == 20
    assert a.labels.max() < 4


def test_synth_rejects():
    with pytest.raises(ConfigError):
        synth_dataset("spiral", 2, 3, 10, make_rng(0))
    with pytest.raises(ConfigError):
        synth_dataset("blobs", 2, 1, 10, make_rng(0))


def test_teacher_labels_are_balanced():
    spec, w = teacher_network(4, 10, make_rng(0), (8,))
    x = make_rng(1).standard_normal((5000, 4))
    counts = np.bincount(np.argmax(forward(spec, w, x), axis=1), minlength=10)
    assert counts.min() > 0.3 * 500


def test_losses():
    out = np.array([[2.0, 0.0], [0.0, 0.0]])
    y = np.array([0, 1])
    ce = (np.log(1 + np.exp(-2.0)) + np.log(2.0)) / 2
    assert losses.loss(out, y, "cross_entropy") == pytest.approx(ce)
    assert losses.accuracy(out, y) == 0.5


@pytest.mark.parametrize("loss_kind", losses.LOSS_KINDS)
def test_loss_gradient(loss_kind, rng):
    out = rng.standard_normal((5, 3))
    y = rng.integers(0, 3, 5)
    _, g = losses.loss_and_grad(out, y, loss_kind)
    fd = finite_difference(lambda: losses.loss(out, y, loss_kind), out)
    assert rel_error(g, fd) < 1e-6


@pytest.mark.parametrize("kind", ALL_KINDS, ids=str)
def test_backprop_grads_cross_entropy(kind, rng):
    spec, w = random_net(rng, kind, 3, max_width=5, n_out=3, batchnorm=True)
    x = rng.standard_normal((8, spec.dims[0]))
    y = rng.integers(0, 3, 8)
    _, grads = backprop_grads(spec, w, (x, y), train_mode=True)

    def f():
        from intertwiners.network import run_layers
        out, _ = run_layers(spec, w, x, 0, spec.depth, train=True)
        return losses.loss(out, y, "cross_entropy")

    for l in range(1, spec.depth + 1):
        assert rel_error(grads[l]["W"], finite_difference(f, w[l].W)) < 1e-5


def test_backprop_frozen(rng):
    spec, w = random_net(rng, Activation.relu(), 3)
    x = rng.standard_normal((4, spec.dims[0]))
    _, grads = backprop_grads(spec, w, (x, np.zeros(4, dtype=int)), frozen=[1, 2])
    assert set(grads) == {3}


def test_lr_schedule():
    cfg = TrainConfig(epochs=10, learning_rate=1.0, lr_drops=1, lr_drop_factor=0.5)
    assert [cfg.lr_at(e) for e in (0, 4, 5, 9)] == [1.0, 1.0, 0.5, 0.5]


def test_train_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(epochs=0)
    with pytest.raises(ConfigError):
        TrainConfig(momentum=1.0)
    with pytest.raises(ConfigError):
        TrainConfig.from_dict({"lr": 0.1})


@pytest.fixture(scope="module")
def blobs():
    return synth_split("blobs", 2, 3, 300, 100, seed=0)


@pytest.mark.parametrize("optimizer", ["adam", "sgd"])
def test_training_learns_and_is_deterministic(blobs, optimizer):
    tr, va = blobs
    spec = NetworkSpec([2, 16, 3], "relu", True)
    cfg = TrainConfig(epochs=8, learning_rate=0.01, optimizer=optimizer, seed=3)
    w0 = init_weights(spec, make_rng(1))
    w1, hist = train(spec, w0, tr, cfg, va)
    w2, _ = train(spec, w0, tr, cfg, va)
    assert w1.equals(w2)
    assert evaluate(spec, w1, va)[1] > 0.9
    assert hist[-1]["train_loss"] < hist[0]["train_loss"]
    # the starting weights are not modified
    assert init_weights(spec, make_rng(1)).equals(w0)


def test_frozen_layers_unchanged(blobs):
    tr, va = blobs
    spec = NetworkSpec([2, 8, 8, 3], "relu", True)
    w0 = init_weights(spec, make_rng(1))
    w, _ = train(spec, w0, tr, TrainConfig(epochs=2), va, frozen=[1])
    assert np.array_equal(w[1].W, w0[1].W) and np.array_equal(w[1].bn.mean, w0[1].bn.mean)
    assert not np.array_equal(w[2].W, w0[2].W)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_is_reported(blobs):
    tr, va = blobs
    spec = NetworkSpec([2, 8, 3], "relu")
    w0 = init_weights(spec, make_rng(1))
    with pytest.raises(DivergenceError) as info:
        train(spec, w0, tr, TrainConfig(epochs=3, learning_rate=1e300, optimizer="sgd"), va)
    assert info.value.history is not None


def test_history_csv(tmp_path):
    path = tmp_path / "h.csv"
    write_history_csv(path, [{"epoch": 1, "train_loss": 0.5, "val_acc": 0.75}])
    rows = list(csv.DictReader(open(path)))
    assert rows == [{"epoch": "1", "train_loss": "0.5", "val_acc": "0.75"}]


def test_transform_matrices(rng):
    assert np.array_equal(transform_matrix("identity", 3, rng), np.eye(3))
    q = transform_matrix("orthogonal", 5, rng)
    assert np.allclose(q @ q.T, np.eye(5), atol=1e-12)
    g = transform_matrix("g_relu", 5, rng)
    assert np.all((g > 0).sum(axis=0) == 1) and np.all(g >= 0)
    with pytest.raises(ConfigError):
        transform_matrix("shear", 3, rng)


def test_preactivation_transform(rng):
    spec = NetworkSpec([3, 4, 2], "relu")
    w = init_weights(spec, rng, bias_scale=0.5)
    a = rng.standard_normal((4, 4))
    w2 = apply_preactivation_transform(spec, w, 1, a)
    assert np.allclose(w2[1].W, a @ w[1].W) and np.allclose(w2[1].b, a @ w[1].b)
    assert np.array_equal(w[1].W, w.copy()[1].W)


def test_rotation_experiment_identity(blobs):
    tr, va = blobs
    spec = NetworkSpec([2, 8, 8, 3], "relu")
    cfg = TrainConfig(epochs=3, learning_rate=0.01)
    res = rotation_penalty_experiment(spec, tr, 1, "identity", cfg, make_rng(0), va)
    assert res.transformed_acc == res.baseline_acc
    assert res.penalty == pytest.approx(100.0 * (res.baseline_acc - res.finetuned_acc))
    with pytest.raises(ConfigError):
        rotation_penalty_experiment(NetworkSpec([2, 8, 3], "sigmoid"), tr, 1, "identity", cfg, make_rng(0), va)
