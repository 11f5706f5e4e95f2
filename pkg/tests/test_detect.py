import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from numpy.testing import assert_allclose, assert_array_equal

from streamgnn.data import ValidationError
from streamgnn.detect import (
    BinningMismatch,
    JsdReport,
    feature_distribution,
    js_divergence,
    kl_divergence,
    score_nodes,
    select_evolved,
    select_replay,
)
from streamgnn.graph import GraphSnapshot, build_adjacency, pairwise_distances
from streamgnn.model import ModelConfig, init_params
from streamgnn.selfcheck import divergence_suite, random_histograms


def test_kl_example():
    assert kl_divergence([0.75, 0.25], [0.5, 0.5]) == pytest.approx(0.13081, abs=1e-5)
    assert kl_divergence([1.0, 0.0], [0.5, 0.5]) == pytest.approx(math.log(2))


def test_js_extremes():
    assert js_divergence([1.0, 0.0], [0.0, 1.0]) == pytest.approx(math.log(2), abs=1e-12)
    assert js_divergence([0.3, 0.7], [0.3, 0.7]) == 0.0


def test_js_direct_formula():
    p, q = np.array([0.1, 0.6, 0.3]), np.array([0.5, 0.25, 0.25])
    m = (p + q) / 2
    expect = 0.5 * sum(p * np.log(p / m)) + 0.5 * sum(q * np.log(q / m))
    assert js_divergence(p, q) == pytest.approx(expect, abs=1e-14)


def test_binning_mismatch():
    with pytest.raises(BinningMismatch):
        js_divergence(np.ones(3) / 3, np.ones(4) / 4)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(2, 60))
def test_js_properties(seed, bins):
    rng = np.random.default_rng(seed)
    p, q = random_histograms(rng, 4, bins), random_histograms(rng, 4, bins)
    d = js_divergence(p, q)
    assert np.all((d >= 0) & (d <= math.log(2)))
    assert_allclose(d, js_divergence(q, p), atol=1e-12, rtol=0)
    assert not np.any(js_divergence(p, p))


def test_suite_passes():
    assert all(r.ok for r in divergence_suite(0))


def hist_oracle(u, bins=50, radius=5.0, floor=1e-6):
    w, n, d = u.shape
    out = np.zeros((n, bins))
    for i in range(n):
        col = u[:, i, :]
        std = np.maximum(col.std(axis=0), 1e-6)
        z = np.clip((col - col.mean(axis=0)) / std, -radius, radius).ravel()
        c, _ = np.histogram(z, bins=bins, range=(-radius, radius))
        p = c / c.sum() + floor
        out[i] = p / p.sum()
    return out


def test_feature_distribution_matches_histogram():
    rng = np.random.default_rng(0)
    u = rng.normal(size=(300, 4, 3)) * rng.uniform(0.5, 3, size=(1, 4, 3))
    u[:5, 0, 0] = 1e3  # outliers land in the edge bin
    h = feature_distribution(u)
    assert h.shape == (4, 50)
    assert_allclose(h.sum(axis=1), 1.0)
    assert_allclose(h, hist_oracle(u), atol=1e-12)


def test_feature_distribution_constant_and_short():
    h = feature_distribution(np.ones((10, 2, 1)))
    assert np.argmax(h[0]) == 25 and np.all(h > 0)
    with pytest.raises(ValidationError):
        feature_distribution(np.ones((1, 2, 1)))


def report(scores, ids=None):
    scores = np.asarray(scores, dtype=float)
    ids = np.arange(scores.size) if ids is None else np.asarray(ids)
    return JsdReport(ids, scores)


def test_select_evolved_examples():
    r = report(np.linspace(0, 1, 20))
    assert select_evolved(r, 0.05) == {19}
    assert select_evolved(report(np.linspace(0, 1, 21)), 0.05) == {20, 19}  # ceil(1.05) = 2
    assert select_evolved(report([0.5, 0.5, 0.1]), 0.3) == {0}  # tie goes to smaller id


def test_select_replay_excludes_evolved():
    r = report([0.0, 0.0, 0.2, 0.3, 0.9, 0.01, 0.5, 0.6, 0.7, 0.8])
    assert select_replay(r, 0.2) == {0, 1}
    assert select_replay(r, 0.2, exclude={0}) == {1, 5}
    with pytest.raises(ValueError):
        select_replay(r, 0.0)


def test_ranks_and_csv(tmp_path):
    r = report([0.2, 0.9, 0.2], ids=[7, 3, 5])
    assert r.ranks() == {3: 1, 5: 2, 7: 3}
    back = JsdReport.from_csv(r.to_csv(tmp_path / "jsd.csv"))
    assert_array_equal(back.node_ids, r.node_ids)
    assert_array_equal(back.scores, r.scores)


def two_years(n=6, steps=400, seed=0):
    rng = np.random.default_rng(seed)
    pos = rng.uniform(0, 3, size=(n + 2, 2))
    a = GraphSnapshot(1, np.arange(n), build_adjacency(pairwise_distances(pos[:n])), pos[:n])
    b = GraphSnapshot(2, np.arange(n + 2), build_adjacency(pairwise_distances(pos)), pos)
    return a, b, rng.normal(size=(n, steps, 1)), rng.normal(size=(n + 2, steps, 1))


def test_score_nodes_identical_weeks_is_zero():
    a, b, va, _ = two_years()
    va[:, 200:] = va[:, :200]  # last week of one year equals first week of the next
    p = init_params(ModelConfig(c1=4, c2=4, c3=3), 0)
    r = score_nodes(p, a, a, va, va, week_steps=200)
    assert_allclose(r.scores, 0.0, atol=1e-12)
    assert r.prev_window == (200, 400) and r.curr_window == (0, 200)


def test_score_nodes_flags_changed_node():
    a, b, va, vb = two_years(seed=1)
    t = np.arange(vb.shape[1])
    vb[2, :, 0] = 6 * np.sin(2 * np.pi * t / 7) + 0.2 * vb[2, :, 0]
    p = init_params(ModelConfig(c1=4, c2=4, c3=3), 1)
    r = score_nodes(p, a, b, va, vb, week_steps=200)
    assert_array_equal(r.node_ids, np.arange(6))  # only common nodes
    assert r.ranks()[2] == 1


def test_score_nodes_errors():
    a, b, va, vb = two_years()
    p = init_params(ModelConfig(c1=4, c2=4, c3=3), 0)
    with pytest.raises(ValidationError):
        score_nodes(p, a, b, va, vb, week_steps=500)
    other = GraphSnapshot(2, np.arange(100, 103), np.zeros((3, 3)))
    with pytest.raises(ValidationError):
        score_nodes(p, a, other, va, vb[:3], week_steps=200)
