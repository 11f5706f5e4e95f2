import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from streamgnn import autodiff as ad
from streamgnn.data import WindowBatch
from streamgnn.ewc import FisherDiagonal, estimate_fisher, ewc_penalty, load_fisher, save_fisher
from streamgnn.model import ModelConfig, ModelParams, init_params, loss
from streamgnn.selfcheck import model_instance

SMALL = ModelConfig(c1=3, c2=3, c3=2)


def test_penalty_hand_example():
    val, grad = ewc_penalty(np.array([1.1]), np.array([1.0]), FisherDiagonal(np.array([16.0]), 1), 0.5)
    assert val == pytest.approx(0.08, abs=1e-12)
    assert grad[0] == pytest.approx(1.6, abs=1e-12)


def test_penalty_trivial_cases():
    p = init_params(SMALL, 0)
    f = FisherDiagonal(np.ones(p.size), 1)
    val, grad = ewc_penalty(p, p, f, 3.0)
    assert val == 0.0 and not grad.any()
    other = init_params(SMALL, 1)
    assert ewc_penalty(other, p, f, 0.0)[0] == 0.0
    with pytest.raises(ValueError):
        ewc_penalty(np.ones(3), np.ones(4), FisherDiagonal(np.ones(3), 1), 1.0)


def test_penalty_gradient_fd():
    rng = np.random.default_rng(0)
    cur, ref = rng.normal(size=9), rng.normal(size=9)
    f = FisherDiagonal(rng.uniform(0, 2, 9), 1)
    (num,) = ad.numeric_grad(lambda c: ewc_penalty(c, ref, f, 1.3)[0], [cur])
    assert_allclose(ewc_penalty(cur, ref, f, 1.3)[1], num, rtol=1e-7)


def test_fisher_validation():
    with pytest.raises(ValueError):
        FisherDiagonal(np.array([-1.0]), 1)
    with pytest.raises(ValueError):
        FisherDiagonal(np.ones((2, 2)), 1)


def test_one_parameter_fisher_oracle():
    # y = w*x with loss (y - t)^2 at w=2, x=1, t=0: g = 4, F = 16
    w, x, t = 2.0, 1.0, 0.0
    (g,) = ad.numeric_grad(lambda w_: float((w_[0] * x - t) ** 2), [np.array([w])])
    assert g[0] == pytest.approx(4.0, abs=1e-8)
    assert g[0] ** 2 == pytest.approx(16.0, abs=1e-7)


def test_fisher_matches_fd_squares():
    cfg, adj, x, y, params, _, _ = model_instance(2, nodes=4, batch=3, config=SMALL)
    fish = estimate_fisher(params, adj, [WindowBatch(x, y)])
    flat = params.flatten()
    sq = np.zeros_like(flat)
    for i in range(3):
        (g,) = ad.numeric_grad(lambda th: loss(ModelParams.from_flat(cfg, th), adj, x[i : i + 1], y[i : i + 1]), [flat], 1e-5)
        sq += g * g
    sq /= 3
    assert fish.sample_count == 3
    big = sq > 1e-10
    assert_allclose(fish.values[big], sq[big], rtol=1e-3)
    assert np.all(fish.values >= 0)


def test_fisher_sample_cap_even_spacing():
    cfg, adj, x, y, params, _, _ = model_instance(3, nodes=3, batch=9, config=SMALL)
    capped = estimate_fisher(params, adj, [WindowBatch(x[:4], y[:4]), WindowBatch(x[4:], y[4:])], max_samples=3)
    manual = estimate_fisher(params, adj, [WindowBatch(x[[0, 4, 8]], y[[0, 4, 8]])])
    assert capped.sample_count == 3
    assert_allclose(capped.values, manual.values, rtol=1e-12)
    with pytest.raises(ValueError):
        estimate_fisher(params, adj, [])


def test_dead_parameter_has_zero_fisher():
    cfg, adj, x, y, params, _, _ = model_instance(4, nodes=3, batch=2, config=SMALL)
    # with the second graph layer zeroed its relu outputs are 0, so the readout
    # rows reading them get no gradient
    arrays = dict(params.arrays)
    arrays["gcn2_w1"] = np.zeros_like(arrays["gcn2_w1"])
    arrays["gcn2_w2"] = np.zeros_like(arrays["gcn2_w2"])
    p = ModelParams(cfg, arrays)
    fish = estimate_fisher(p, adj, [WindowBatch(x, y)])
    width = cfg.conv_steps * cfg.c3
    names = [n for n, _ in p.flat_index()]
    rows = np.array([idx[0] for n, idx in p.flat_index() if n == "fc_w"])
    fc = fish.values[np.array(names) == "fc_w"]
    assert not fc[rows < width].any()


def test_fisher_file_round_trip(tmp_path):
    p = init_params(SMALL, 5)
    f = FisherDiagonal(np.random.default_rng(0).uniform(0, 1, p.size), 17)
    path = save_fisher(tmp_path / "fisher.bin", p, f)
    q, g = load_fisher(path)
    assert q.equals(p) and g.sample_count == 17
    assert_array_equal(g.values, f.values)
