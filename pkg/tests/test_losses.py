import math

import numpy as np
import pytest

from mrbcnn.errors import ContractError, DimensionError
from mrbcnn.losses import (
    DevianceParams,
    HistogramSpec,
    binomial_deviance,
    deviance_terms,
    histogram_loss,
    make_loss,
    pair_labels,
    pairs_from_embeddings,
    pairset,
)
from mrbcnn.tensor import Tensor, finite_difference_grad, grad_of, relative_error
from oracles import histogram_loss_loops

TOY_S = [0.9, 0.15, 0.1, -0.3, 0.62, -0.8, 0.05, 0.4]
TOY_M = [1, 1, 0, 0, 1, 0, 0, 0]


def _pairs_of(labels):
    return {(int(r), int(c)) for r, c, m in zip(labels.rows, labels.cols, labels.matching) if m}, {
        (int(r), int(c)) for r, c, m in zip(labels.rows, labels.cols, labels.matching) if not m
    }


def test_pair_labels_small():
    pos, neg = _pairs_of(pair_labels([1, 1, 2]))
    assert pos == {(0, 1)} and neg == {(0, 2), (1, 2)}
    lab = pair_labels([1, 1, 2, 2])
    assert lab.n_matching == 2 and lab.n_nonmatching == 4


def test_pair_labels_count(gen):
    ids = gen.integers(0, 5, size=17)
    lab = pair_labels(ids)
    assert lab.rows.size == 17 * 16 // 2
    np.testing.assert_array_equal(lab.matching, ids[lab.rows] == ids[lab.cols])


def test_all_distinct_ids_flagged():
    assert pair_labels([1, 2, 3]).n_matching == 0
    with pytest.raises(ContractError):
        histogram_loss(pairset([0.1, 0.2, 0.3], [0, 0, 0]))
    with pytest.raises(ContractError):
        binomial_deviance(pairset([0.1, 0.2], [1, 1]))


def test_pairset_range_and_shape():
    with pytest.raises(ContractError):
        histogram_loss(pairset([1.5, 0.2], [1, 0]))
    with pytest.raises(DimensionError):
        pairset([0.1, 0.2, 0.3], [1, 0])


def test_histogram_spec():
    spec = HistogramSpec(5)
    assert spec.nodes.tolist() == [-1.0, -0.5, 0.0, 0.5, 1.0]
    assert spec.step == 0.5
    with pytest.raises(ContractError):
        HistogramSpec(1)


@pytest.mark.parametrize("bins", [2, 7, 100])
def test_histogram_perfect_separation(bins):
    loss = histogram_loss(pairset([1.0, 1.0, -1.0, -1.0, -1.0], [1, 1, 0, 0, 0]), HistogramSpec(bins))
    assert abs(loss.item()) <= 1e-12


def test_histogram_toy_matches_loops_and_frozen():
    # frozen from the loop oracle; at 100 bins it is exactly the 1/15 overlap fraction
    for bins, frozen in ((100, 0.06666666666666654), (10, 0.17299166666666674)):
        got = histogram_loss(pairset(TOY_S, TOY_M), HistogramSpec(bins)).item()
        assert got == pytest.approx(histogram_loss_loops(TOY_S, TOY_M, bins), abs=1e-12)
        assert got == pytest.approx(frozen, abs=1e-12)


def test_histogram_identical_sets_near_half(gen):
    vals = gen.uniform(-0.9, 0.9, 300)
    s = np.concatenate([vals, vals])
    m = np.r_[np.ones(300, bool), np.zeros(300, bool)]
    assert abs(histogram_loss(pairset(s, m), HistogramSpec(100)).item() - 0.5) < 0.02


def test_histogram_range_and_permutation(gen):
    for _ in range(30):
        s = gen.uniform(-1, 1, 40)
        m = gen.random(40) < 0.3
        m[:2] = [True, False]
        a = histogram_loss(pairset(s, m)).item()
        assert 0.0 <= a <= 1.0
        perm = gen.permutation(40)
        assert histogram_loss(pairset(s[perm], m[perm])).item() == pytest.approx(a, abs=1e-12)


def test_histogram_monotone_under_separating_shift(gen):
    for _ in range(30):
        s = gen.uniform(-0.8, 0.8, 30)
        m = gen.random(30) < 0.4
        m[:2] = [True, False]
        shifted = np.clip(np.where(m, s + 0.1, s - 0.1), -1, 1)
        assert histogram_loss(pairset(shifted, m)).item() <= histogram_loss(pairset(s, m)).item() + 1e-12


def test_histogram_bin_stability(gen):
    pos = np.clip(gen.normal(0.4, 0.2, 400), -1, 1)
    neg = np.clip(gen.normal(0.0, 0.2, 400), -1, 1)
    ps = pairset(np.r_[pos, neg], np.r_[np.ones(400, bool), np.zeros(400, bool)])
    coarse = histogram_loss(ps, HistogramSpec(100)).item()
    dense = histogram_loss(ps, HistogramSpec(400)).item()
    assert abs(coarse - dense) < 0.02


def test_deviance_saturation_term():
    t = deviance_terms(np.array([1.0]), np.array([True]), DevianceParams(2.0, 0.5, 10.0))
    assert t[0] == pytest.approx(0.31326168751822286, abs=1e-15)
    assert t[0] == pytest.approx(math.log1p(math.exp(-1)), abs=1e-15)


def test_deviance_sign_structure():
    grid = np.linspace(-1, 1, 41)
    p = DevianceParams()
    pos = deviance_terms(grid, np.ones(41, bool), p)
    neg = deviance_terms(grid, np.zeros(41, bool), p)
    assert np.all(np.diff(pos) < 0)
    assert np.all(np.diff(neg) > 0)


def test_deviance_balanced_ln2():
    loss = binomial_deviance(pairset([0.5, 0.5, 0.5, 0.5, 0.5], [1, 0, 0, 0, 1]), DevianceParams(2.0, 0.5, 1.0))
    assert loss.item() == pytest.approx(math.log(2), abs=1e-15)


def test_deviance_class_balanced_mean():
    s = np.array([0.9, 0.2, -0.4, 0.7, 0.1])
    m = np.array([1, 1, 0, 0, 0], bool)
    p = DevianceParams()
    t = deviance_terms(s, m, p)
    assert binomial_deviance(pairset(s, m), p).item() == pytest.approx(0.5 * t[m].mean() + 0.5 * t[~m].mean())


@pytest.mark.parametrize("name", ["histogram", "binomial"])
def test_loss_gradient_through_sims(name, gen):
    loss = make_loss(name, n_bins=20)
    nodes = HistogramSpec(20).nodes
    for _ in range(5):
        s = gen.uniform(-0.95, 0.95, 15)
        near = np.min(np.abs(s[:, None] - nodes), axis=1) < 1e-3
        s[near] += 3e-3
        m = gen.random(15) < 0.4
        m[:2] = [True, False]
        st = Tensor(s, requires_grad=True)
        (g,) = grad_of(loss(pairset(st, m)), [st])
        num = finite_difference_grad(lambda t: loss(pairset(t, m)), s)
        assert relative_error(g, num) <= 1e-6


def test_loss_gradient_through_embeddings(gen):
    emb = gen.standard_normal((6, 5))
    ids = [0, 0, 1, 1, 2, 2]
    for name in ("histogram", "binomial"):
        loss = make_loss(name, n_bins=30)
        et = Tensor(emb, requires_grad=True)
        (g,) = grad_of(loss(pairs_from_embeddings(et, ids)), [et])
        num = finite_difference_grad(lambda t: loss(pairs_from_embeddings(t, ids)), emb)
        assert relative_error(g, num) <= 1e-5


def test_fd_reference_gradient_on_fixed_batch(gen):
    # an 8-descriptor batch; the central-difference gradient is the reference
    emb = gen.standard_normal((8, 6))
    ids = [0, 0, 1, 1, 2, 2, 3, 3]
    loss = make_loss("histogram", n_bins=100)
    et = Tensor(emb, requires_grad=True)
    (g,) = grad_of(loss(pairs_from_embeddings(et, ids)), [et])
    ref = finite_difference_grad(lambda t: loss(pairs_from_embeddings(t, ids)), emb)
    assert relative_error(g, ref) <= 1e-4


def test_unknown_loss():
    with pytest.raises(ContractError):
        make_loss("triplet")
