import itertools

import numpy as np
import pytest
import scipy.optimize
from hypothesis import given, settings
from hypothesis import strategies as st

from intertwiners import metrics
from intertwiners.errors import DimensionError, FormatError, NumericalError
from intertwiners.intertwiner import Activation, random_element
from intertwiners.numerics import make_rng, random_orthogonal


def hsic_u_statistic(k, l):
    """Unbiased HSIC as an explicit average over ordered 4-tuples of distinct indices."""
    n = k.shape[0]
    total, count = 0.0, 0
    for i, j, q, r in itertools.permutations(range(n), 4):
        total += k[i, j] * l[i, j] + k[i, j] * l[q, r] - 2.0 * k[i, j] * l[i, q]
        count += 1
    return total / count


def brute_force_assignment(cost):
    d = cost.shape[0]
    return max(sum(cost[i, p[i]] for i in range(d)) for p in itertools.permutations(range(d)))


def relu_feats(rng, n=60, d=6):
    return np.maximum(rng.standard_normal((n, d)) + 0.3, 0.0) + 0.01 * rng.random((n, d))


def grelu_matrix(rng, d):
    return random_element(Activation.relu(), d, rng).to_matrix()


def test_column_normalize():
    x = np.array([[3.0, 0.0], [4.0, 2.0]])
    assert np.allclose(metrics.column_normalize(x), [[0.6, 0.0], [0.8, 1.0]])
    scaled = x * np.array([7.0, 1.0])
    assert np.allclose(metrics.column_normalize(scaled), metrics.column_normalize(x))
    with pytest.raises(NumericalError, match="column 1"):
        metrics.column_normalize(np.array([[1.0, 0.0], [2.0, 0.0]]))


def test_center_columns_4d(rng):
    x = rng.standard_normal((5, 3, 2, 2))
    c = metrics.center_columns(x)
    assert np.allclose(c.mean(axis=(0, 2, 3)), 0.0)


def test_lsa_matches_scipy(rng):
    for d in (1, 2, 5, 17, 40):
        cost = rng.standard_normal((d, d))
        perm, obj = metrics.linear_sum_assignment(cost)
        rows, cols = scipy.optimize.linear_sum_assignment(cost, maximize=True)
        assert obj == pytest.approx(cost[rows, cols].sum(), abs=1e-10)
        assert sorted(perm.tolist()) == list(range(d))


def test_lsa_brute_force_small(rng):
    for d in range(1, 7):
        cost = rng.integers(-5, 6, (d, d)).astype(float)
        assert metrics.linear_sum_assignment(cost)[1] == brute_force_assignment(cost)


def test_lsa_ties_give_identity():
    perm, _ = metrics.linear_sum_assignment(np.ones((5, 5)))
    assert perm.tolist() == list(range(5))


def test_lsa_errors():
    with pytest.raises(DimensionError):
        metrics.linear_sum_assignment(np.ones((2, 3)))
    with pytest.raises(NumericalError):
        metrics.linear_sum_assignment(np.array([[np.nan]]))


def test_channel_gram_matches_reshape(rng):
    x, y = rng.standard_normal((4, 3, 2, 5)), rng.standard_normal((4, 6, 2, 5))
    flat_x = x.transpose(1, 0, 2, 3).reshape(3, -1)
    flat_y = y.transpose(1, 0, 2, 3).reshape(6, -1)
    assert np.allclose(metrics.channel_gram(x, y), flat_x @ flat_y.T)


def test_hsic_matches_u_statistic(rng):
    for n in (4, 6, 7):
        a, b = rng.standard_normal((n, 3)), rng.standard_normal((n, 2))
        k, l = a @ a.T, np.exp(-np.sum((b[:, None] - b[None]) ** 2, axis=-1))
        assert metrics.hsic1(k, l) == pytest.approx(hsic_u_statistic(k, l), rel=1e-10, abs=1e-12)


def test_hsic_permutation_null(rng):
    # unbiased: averaging over relabellings of one side gives ~0
    a, b = rng.standard_normal((30, 3)), rng.standard_normal((30, 3))
    k, l = a @ a.T, b @ b.T
    vals = []
    for _ in range(400):
        p = rng.permutation(30)
        vals.append(metrics.hsic1(k, l[np.ix_(p, p)]))
    vals = np.array(vals)
    assert abs(vals.mean()) < 4 * vals.std() / np.sqrt(len(vals))


def test_hsic_small_n():
    with pytest.raises(DimensionError):
        metrics.hsic1(np.eye(3), np.eye(3))


def test_hsic_self_nonnegative(rng):
    for _ in range(20):
        a = rng.standard_normal((12, 4))
        assert metrics.hsic1(a @ a.T, a @ a.T) >= 0


def test_max_kernel_examples(rng):
    x = rng.standard_normal((5, 3))
    k = metrics.max_kernel(x)
    assert k[1, 2] == pytest.approx(max(x[1] * x[2]))
    t = x[:, :, None, None]
    assert np.allclose(metrics.channel_max_kernel(t), k)
    assert np.allclose(metrics.channel_max_kernel(x[:, ::-1, None, None]), k)
    one = rng.standard_normal((4, 1, 2, 3))
    flat = one.reshape(4, -1)
    assert np.allclose(metrics.channel_max_kernel(one), flat @ flat.T)


def test_max_symmetries(rng):
    x1, x2 = rng.standard_normal((200, 5)), rng.standard_normal((200, 5))
    base = np.max(x1 * x2, axis=1)
    sp = np.eye(5)[rng.permutation(5)] * rng.choice([-1.0, 1.0], 5)
    assert np.array_equal(np.max((x1 @ sp.T) * (x2 @ sp.T), axis=1), base)
    dense = rng.standard_normal((5, 5))
    assert np.max(np.abs(np.max((x1 @ dense.T) * (x2 @ dense.T), axis=1) - base)) > 1e-6


def test_procrustes_identity_and_alignment(rng):
    x = relu_feats(rng)
    assert metrics.g_relu_procrustes(x, x) == pytest.approx(1.0, abs=1e-12)
    a = grelu_matrix(rng, 6)
    assert metrics.g_relu_procrustes(x, x @ a) == pytest.approx(1.0, abs=1e-9)
    # no centering: a translation generally changes the value
    assert metrics.g_relu_procrustes(x, x + 5.0) < 1.0 - 1e-6


def test_orth_procrustes(rng):
    x = rng.standard_normal((50, 6))
    sp = np.eye(6)[rng.permutation(6)] * rng.choice([-1.0, 1.0], 6)
    assert metrics.orthogonal_procrustes(x, x @ sp) == pytest.approx(1.0, abs=1e-7)
    y = rng.standard_normal((50, 6))
    assert metrics.orthogonal_procrustes(x, y) >= metrics.g_relu_procrustes(x, y) - 1e-12


def test_linear_cka(rng):
    x = rng.standard_normal((40, 5))
    q = random_orthogonal(rng, 5)
    assert metrics.linear_cka(x, x @ q) == pytest.approx(1.0, abs=1e-9)
    assert metrics.linear_cka(x, 3.0 * x + 2.0) == pytest.approx(1.0, abs=1e-9)
    assert metrics.linear_cka(x, rng.standard_normal((40, 8))) < 0.5


def test_grelu_cka_alignment_with_translation(rng):
    x = relu_feats(rng)
    y = x @ grelu_matrix(rng, 6) + rng.standard_normal(6)
    assert metrics.g_relu_cka(x, y) == pytest.approx(1.0, abs=1e-9)
    assert metrics.g_relu_cka(x, relu_feats(rng)) < 0.9


def test_metric_shape_errors(rng):
    with pytest.raises(DimensionError):
        metrics.g_relu_procrustes(np.ones((4, 3)), np.ones((4, 2)))
    with pytest.raises(DimensionError):
        metrics.g_relu_cka(np.ones((4, 3)), np.ones((5, 3)))
    with pytest.raises(DimensionError):
        metrics.compute("cosine", np.ones((4, 3)), np.ones((4, 3)))
    with pytest.raises(NumericalError):
        metrics.compute("linear-cka", np.full((4, 3), np.inf), np.ones((4, 3)))


def test_4d_metrics(rng):
    x = np.abs(rng.standard_normal((12, 4, 3, 3))) + 0.01
    perm = rng.permutation(4)
    scale = np.exp(rng.standard_normal(4))
    y = x[:, perm] * scale[None, :, None, None]
    assert metrics.g_relu_procrustes(x, y) == pytest.approx(1.0, abs=1e-9)
    assert metrics.g_relu_cka(x, y) == pytest.approx(1.0, abs=1e-9)


def test_ordering_sanity(rng):
    x = relu_feats(rng, d=8)
    y = relu_feats(rng, d=8)
    q = random_orthogonal(rng, 8)
    for name in ("grelu-procrustes", "grelu-cka"):
        assert metrics.compute(name, x, x @ grelu_matrix(rng, 8)) == pytest.approx(1.0, abs=1e-9)
        assert metrics.compute(name, x, y) < 1.0 - 1e-3
    # column normalization does not commute with a dense rotation, so only the ordering is checked
    related = metrics.compute("orth-procrustes", x, x @ q)
    assert metrics.compute("orth-procrustes", x, y) < related


def test_feature_file_roundtrip(tmp_path, rng):
    x = rng.standard_normal((3, 2, 4, 1))
    path = tmp_path / "f.itwf"
    metrics.write_features(path, x, {"layer": 2})
    back, meta = metrics.read_features(path)
    assert np.array_equal(back, x) and meta["layer"] == 2
    raw = path.read_bytes()
    assert raw[:5] == metrics.FEATURE_MAGIC


@pytest.mark.parametrize("mutate", [lambda r: b"XXXXX" + r[5:], lambda r: r[:-8], lambda r: r[:7]])
def test_feature_file_errors(tmp_path, rng, mutate):
    path = tmp_path / "f.itwf"
    metrics.write_features(path, rng.standard_normal((3, 2)))
    path.write_bytes(mutate(path.read_bytes()))
    with pytest.raises(FormatError):
        metrics.read_features(path)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32), st.integers(2, 7))
def test_invariance_property(seed, d):
    r = make_rng(seed)
    x, y = relu_feats(r, 40, d), relu_feats(r, 40, d)
    a, b = grelu_matrix(r, d), grelu_matrix(r, d)
    v, w = r.standard_normal(d), r.standard_normal(d)
    assert metrics.g_relu_procrustes(x @ a, y @ b) == pytest.approx(metrics.g_relu_procrustes(x, y), abs=1e-9)
    assert metrics.g_relu_cka(x @ a + v, y @ b + w) == pytest.approx(metrics.g_relu_cka(x, y), abs=1e-9)
