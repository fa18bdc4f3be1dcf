import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from subconcepts.exceptions import NumericalError, ValidationError
from subconcepts.guidance import (LossWeights, Query, QuerySet, loss_irr, loss_proj, loss_proto,
                                  make_pairs, pair_cosines, proto_targets, relevance_mask,
                                  relevance_vector, total_loss)
from subconcepts.prototypes import AssignmentBatch, PrototypeBank, assign


def random_D(rng, n, k):
    D = rng.random((n, k)) + 0.01
    return D / D.sum(1, keepdims=True)


def test_relevance_mask_trivial_cases():
    q = Query(np.array([1.0, 0, 0]), [0], 0.5)
    f = np.array([[1.0, 0, 0], [0, 1.0, 0], [0, 0, 0]])
    assert relevance_mask(q, f).tolist() == [True, False, False]


def test_relevance_mask_matches_elementwise(rng):
    q = Query(rng.normal(size=6), [0], 0.55)
    f = rng.normal(size=(50, 6))
    brute = [float(q.embedding @ x / np.linalg.norm(q.embedding) / np.linalg.norm(x)) >= 0.55
             for x in f]
    assert relevance_mask(q, f).tolist() == brute


def test_query_validation():
    with pytest.raises(ValidationError):
        Query(np.ones(3), [], 0.5)
    with pytest.raises(ValidationError):
        Query(np.ones(3), [0], 1.0)
    qs = QuerySet([Query(np.ones(3), [0, 4])])
    with pytest.raises(ValidationError):
        qs.validate(n_rel=4)
    with pytest.raises(ValidationError):
        qs.validate(n_rel=5, d_q=2)


def test_stacked_H_overlap():
    qs = QuerySet([Query(np.ones(2), [0, 1]), Query(np.ones(2), [1, 2])])
    H = qs.stacked_H(5)
    assert H.sum(0).tolist() == [1, 2, 1, 0, 0]
    np.testing.assert_array_equal(relevance_vector(qs.queries[0], 5), [1, 1, 0, 0, 0])


def test_make_pairs_is_a_derangement():
    for n in (2, 3, 17, 1000):
        p = make_pairs(n, 0)
        assert sorted(p.tolist()) == list(range(n))
        assert np.all(p != np.arange(n))


def test_loss_proj_examples():
    D = np.array([[1.0, 0], [1.0, 0]])
    assert loss_proj(D, np.array([1, 0]), np.array([0.5, 0.5]), 0.5)[0] == 0.0
    assert loss_proj(D, np.array([1, 0]), np.array([1.0, 1.0]), 0.5)[0] == 0.0
    # one pair, cos 0.9, b 0.5, D_k . D_l = 0.25
    D3 = np.array([[0.5, 0.5, 0], [0.5, 0, 0.5]])
    loss, _ = loss_proj(D3, np.array([1, 0]), np.array([0.9, 0.9]), 0.5, rows=[0])
    assert loss == pytest.approx(0.4 * 0.75, abs=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.integers(2, 12), st.integers(2, 5), st.integers(0, 10_000))
def test_loss_proj_pair_symmetry(n, k, seed):
    rng = np.random.default_rng(seed)
    D = random_D(rng, n, k)
    cos = rng.uniform(-1, 1, n)
    partner = make_pairs(n, seed)
    loss, _ = loss_proj(D, partner, cos, 0.5)
    # swapping members of each pair: pair k becomes (partner[k], k)
    inv = np.empty(n, dtype=np.int64)
    inv[partner] = np.arange(n)
    swapped_cos = cos[inv]
    loss2, _ = loss_proj(D, inv, swapped_cos, 0.5)
    assert loss == pytest.approx(loss2, abs=1e-12)


def test_loss_irr_examples():
    H = np.array([1.0, 0.0])
    mask = np.array([True, True, False, False])
    perfect = np.array([[1.0, 0], [1.0, 0], [0, 1.0], [0, 1.0]])
    assert loss_irr(perfect, mask, H)[0] == 0.0
    assert loss_irr(perfect[::-1], mask, H)[0] == 2.0
    D = np.array([[0.8, 0.2], [0.6, 0.4], [0.1, 0.9], [0.3, 0.7]])
    assert loss_irr(D, mask, H)[0] == pytest.approx(0.5, abs=1e-12)


def test_loss_irr_guarded_means():
    H = np.array([1.0, 0.0])
    D = np.array([[0.25, 0.75], [0.75, 0.25]])
    assert loss_irr(D, np.array([True, True]), H)[0] == pytest.approx(0.5)
    assert loss_irr(D, np.array([False, False]), H)[0] == pytest.approx(0.5)


def test_loss_proto_examples():
    clip = np.eye(3)
    f_clip = np.array([[1.0, 0.1, 0], [0, 0, 2.0]])
    H = np.array([[1.0, 0, 0], [0, 0, 1.0]])
    assert loss_proto(H, f_clip, clip)[0] == 0.0
    uniform = np.full((2, 3), 1 / 3)
    assert loss_proto(uniform, f_clip, clip)[0] == pytest.approx(1 - 1 / 3, abs=1e-12)
    loss, grad = loss_proto(uniform, f_clip, np.zeros((3, 3)))
    assert loss == 0.0 and not grad.any()


def test_loss_proto_brute_force(rng):
    D = random_D(rng, 3, 4)
    f_clip = rng.normal(size=(3, 5))
    clip = rng.normal(size=(4, 5))
    brute = 0.0
    for k in range(3):
        sims = [f_clip[k] @ c / np.linalg.norm(f_clip[k]) / np.linalg.norm(c) for c in clip]
        brute += 1 - D[k, int(np.argmax(sims))]
    assert loss_proto(D, f_clip, clip)[0] == pytest.approx(brute / 3, abs=1e-12)


def test_proto_targets_skip_empty_prototypes():
    clip = np.array([[0.0, 0.0], [-1.0, 0.0]])
    assert proto_targets(np.array([[1.0, 0.0]]), clip).tolist() == [1]


def setup(rng, n=10, d=4, dq=3, n_rel=3, n_irr=2):
    seg = rng.normal(size=(n, d))
    f_proj = rng.normal(size=(n, d))
    f_clip = rng.normal(size=(n, dq))
    bank = PrototypeBank(rng.normal(size=(n_rel + n_irr, d)), rng.normal(size=(n_rel + n_irr, dq)),
                         n_rel, n_irr, 0.9, 0.4)
    return seg, f_proj, f_clip, bank


def test_total_uss_is_proj_only(rng):
    seg, f_proj, f_clip, bank = setup(rng)
    bank.clip_protos[:] = 0
    a = assign(bank, f_proj)
    partner = make_pairs(len(seg), 0)
    out, _ = total_loss(seg, f_clip, f_proj, a, QuerySet(), bank, LossWeights(), partner)
    l_proj, _ = loss_proj(a.D, partner, pair_cosines(seg, partner), 0.5)
    assert out.total == pytest.approx(20 * l_proj, abs=1e-12)
    assert out.l_irr == 0 and out.l_proto == 0


def test_total_with_zero_weights(rng):
    seg, f_proj, f_clip, bank = setup(rng)
    a = assign(bank, f_proj)
    qs = QuerySet([Query(rng.normal(size=3), [0, 1], 0.0)])
    out, g = total_loss(seg, f_clip, f_proj, a, qs, bank, LossWeights(0, 0, 0),
                        make_pairs(len(seg), 0))
    assert out.total == 0 and not g.any()


def test_total_flags_non_finite(rng):
    seg, f_proj, f_clip, bank = setup(rng)
    a = assign(bank, f_proj)
    bad = AssignmentBatch(a.D.copy(), a.cos)
    bad.D[0, 0] = np.nan
    with pytest.raises(NumericalError, match="l_proj"):
        total_loss(seg, f_clip, f_proj, bad, QuerySet(), bank, LossWeights(),
                   make_pairs(len(seg), 0))


@pytest.mark.parametrize("scope", ["all", "relevant"])
def test_total_gradient_wrt_projected_features(rng, scope):
    seg, f_proj, f_clip, bank = setup(rng)
    qs = QuerySet([Query(rng.normal(size=3), [0, 1], 0.0), Query(rng.normal(size=3), [2], 0.2)])
    masks = [relevance_mask(q, f_clip) for q in qs]
    partner = make_pairs(len(seg), 1)

    def L(fp):
        return total_loss(seg, f_clip, fp, assign(bank, fp), qs, bank, LossWeights(), partner,
                          masks, scope)[0].total

    _, g = total_loss(seg, f_clip, f_proj, assign(bank, f_proj), qs, bank, LossWeights(),
                      partner, masks, scope)
    h = 1e-6
    num = np.zeros_like(f_proj)
    for idx in np.ndindex(f_proj.shape):
        p, m = f_proj.copy(), f_proj.copy()
        p[idx] += h
        m[idx] -= h
        num[idx] = (L(p) - L(m)) / (2 * h)
    np.testing.assert_allclose(g, num, rtol=1e-5, atol=1e-8)


def test_prototypes_receive_no_gradient(rng):
    seg, f_proj, f_clip, bank = setup(rng)
    before = bank.protos.copy()
    total_loss(seg, f_clip, f_proj, assign(bank, f_proj), QuerySet(), bank, LossWeights(),
               make_pairs(len(seg), 0))
    np.testing.assert_array_equal(bank.protos, before)
