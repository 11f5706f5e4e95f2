import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from streamgnn import autodiff as ad
from streamgnn.model import (
    PARAM_NAMES,
    ConfigMismatchError,
    CorruptFileError,
    ModelConfig,
    ModelParams,
    extract_features,
    forward,
    gcn_layer,
    init_params,
    load_params,
    loss,
    loss_and_grad,
    save_params,
)
from streamgnn.selfcheck import model_instance

SMALL = ModelConfig(c1=4, c2=5, c3=3)


def random_graph(rng, n):
    a = np.triu(rng.uniform(0, 1, (n, n)) * (rng.random((n, n)) < 0.5), 1)
    return a + a.T


def test_gcn_identity_branch():
    rng = np.random.default_rng(0)
    h = rng.uniform(0, 2, size=(4, 3))
    out = gcn_layer(h, np.zeros((4, 4)), rng.normal(size=(3, 3)), np.eye(3))
    assert_array_equal(out, h)
    assert not gcn_layer(h, random_graph(rng, 4), np.zeros((3, 2)), np.zeros((3, 2))).any()


def test_gcn_direct_formula():
    rng = np.random.default_rng(1)
    h, a = rng.normal(size=(3, 2)), random_graph(rng, 3)
    w1, w2 = rng.normal(size=(2, 4)), rng.normal(size=(2, 4))
    expect = np.zeros((3, 4))
    for m in range(3):
        for c in range(4):
            s = sum(a[m, n] * h[n, i] * w1[i, c] for n in range(3) for i in range(2))
            s += sum(h[m, i] * w2[i, c] for i in range(2))
            expect[m, c] = max(s, 0.0)
    assert_allclose(gcn_layer(h, a, w1, w2), expect, atol=1e-12, rtol=0)


@pytest.mark.parametrize("n", [3, 17, 64])
def test_forward_shape(n):
    rng = np.random.default_rng(n)
    p = init_params(SMALL, 0)
    assert forward(p, random_graph(rng, n), rng.normal(size=(n, 12, 1))).shape == (n, 12)
    assert forward(p, random_graph(rng, n), rng.normal(size=(2, n, 12, 1))).shape == (2, n, 12)


def test_sparse_adjacency_matches_dense():
    from scipy import sparse

    rng = np.random.default_rng(6)
    a = random_graph(rng, 30) * (rng.random((30, 30)) < 0.1)
    a = np.triu(a, 1) + np.triu(a, 1).T
    h = rng.normal(size=(30, 4, 5, 3))
    w1, w2 = rng.normal(size=(3, 2)), rng.normal(size=(3, 2))
    assert_allclose(gcn_layer(h, sparse.csr_matrix(a), w1, w2), gcn_layer(h, a, w1, w2), atol=1e-12)
    cfg, adj, x, y, params, _, _ = model_instance(1, nodes=40, config=SMALL)
    sparse_adj = adj * (rng.random(adj.shape) < 0.05)
    sparse_adj = np.triu(sparse_adj, 1) + np.triu(sparse_adj, 1).T
    # forward switches to the sparse product on sparse graphs; gradients must not change
    f = lambda *arrs: loss(ModelParams(cfg, dict(zip(PARAM_NAMES, arrs))), sparse_adj, x, y)
    _, g = loss_and_grad(params, sparse_adj, x, y)
    num = np.concatenate([n.ravel() for n in ad.numeric_grad(f, [params[k] for k in PARAM_NAMES], 1e-5)])
    assert ad.relative_error(g, num) < 1e-4


def test_zero_params_give_bias():
    z = ModelParams.zeros(SMALL)
    z.arrays["fc_b"] = np.arange(12.0)
    out = forward(z, np.zeros((3, 3)), np.ones((3, 12, 1)))
    assert_array_equal(out, np.tile(np.arange(12.0), (3, 1)))


def test_permutation_equivariance():
    rng = np.random.default_rng(2)
    n = 7
    p = init_params(SMALL, 3)
    a, x = random_graph(rng, n), rng.normal(size=(n, 12, 1))
    perm = rng.permutation(n)
    out = forward(p, a, x)
    out_p = forward(p, a[np.ix_(perm, perm)], x[perm])
    assert_allclose(out_p, out[perm], atol=1e-12)


def test_feature_decomposition_and_symmetry():
    rng = np.random.default_rng(4)
    p = init_params(SMALL, 1)
    # nodes 0 and 1 are twins: same series, both linked only to node 2
    a = np.zeros((3, 3))
    a[0, 2] = a[2, 0] = a[1, 2] = a[2, 1] = 0.7
    x = rng.normal(size=(3, 12, 1))
    x[1] = x[0]
    u = extract_features(p, a, x)
    assert u.shape == (3, SMALL.readout_width)
    assert_array_equal(u[0], u[1])
    assert_array_equal(forward(p, a, x), ad.linear(u, p["fc_w"], p["fc_b"]))


def test_loss_basics():
    rng = np.random.default_rng(5)
    p = init_params(SMALL, 0)
    a, x = random_graph(rng, 4), rng.normal(size=(2, 4, 12, 1))
    y = forward(p, a, x)
    assert loss(p, a, x, y) == 0.0
    assert loss(p, a, x, rng.normal(size=y.shape)) > 0


def test_full_model_gradient():
    cfg, adj, x, y, params, _, _ = model_instance(0, config=SMALL)
    f = lambda *arrs: loss(ModelParams(cfg, dict(zip(PARAM_NAMES, arrs))), adj, x, y)
    _, g = loss_and_grad(params, adj, x, y)
    num = np.concatenate([n.ravel() for n in ad.numeric_grad(f, [params[k] for k in PARAM_NAMES], 1e-5)])
    assert ad.relative_error(g, num) < 1e-4


def test_flat_round_trip():
    p = init_params(SMALL, 7)
    idx = p.flat_index()
    assert len(idx) == p.size == len(set(idx))
    flat = p.flatten()
    for k, (name, pos) in enumerate(idx[:: max(1, len(idx) // 50)]):
        assert flat[k * max(1, len(idx) // 50)] == p[name][pos]
    assert ModelParams.from_flat(SMALL, flat).equals(p)


def test_init_bounds_and_seed():
    p = init_params(SMALL, 3)
    for name in PARAM_NAMES:
        assert np.abs(p[name]).max() <= 1 / np.sqrt(SMALL.fan_in(name))
    assert init_params(SMALL, 3).equals(p) and not init_params(SMALL, 4).equals(p)


def test_save_load(tmp_path):
    p = init_params(SMALL, 9)
    path = save_params(tmp_path / "p.bin", p)
    q = load_params(path, SMALL)
    assert q.equals(p) and q.flat_index() == p.flat_index()
    assert path.read_bytes() == save_params(tmp_path / "q.bin", q).read_bytes()
    with pytest.raises(ConfigMismatchError):
        load_params(path, ModelConfig(c1=8, c2=5, c3=3))


@pytest.mark.parametrize("cut", [3, 20, -9])
def test_corrupt_file(tmp_path, cut):
    path = save_params(tmp_path / "p.bin", init_params(SMALL, 0))
    data = path.read_bytes()
    path.write_bytes(data[:cut])
    with pytest.raises(CorruptFileError):
        load_params(path)


def test_bad_magic(tmp_path):
    path = tmp_path / "x.bin"
    path.write_bytes(b"NOTMODEL" + bytes(40))
    with pytest.raises(CorruptFileError):
        load_params(path)
