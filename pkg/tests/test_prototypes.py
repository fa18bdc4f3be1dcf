import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from subconcepts.exceptions import FormatError, StructuralError, ValidationError
from subconcepts.prototypes import (AssignmentBatch, PrototypeBank, assign, contributor_mask,
                                    cosine_matrix, ema_update, match_prototypes_to_catalog,
                                    schedule_beta)


def bank_of(protos, n_rel=None, alpha=0.998, beta=0.5, d_q=2):
    protos = np.asarray(protos, dtype=np.float64)
    n = protos.shape[0]
    return PrototypeBank.from_protos(protos, d_q, n if n_rel is None else n_rel,
                                     0 if n_rel is None else n - n_rel, alpha, beta)


def test_assign_matches_formula(rng):
    bank = bank_of(rng.normal(size=(4, 3)), beta=0.3)
    f = rng.normal(size=(5, 3))
    cos = (f / np.linalg.norm(f, axis=1, keepdims=True)) @ (
        bank.protos / np.linalg.norm(bank.protos, axis=1, keepdims=True)).T
    e = np.exp(cos / 0.3)
    np.testing.assert_allclose(assign(bank, f).D, e / e.sum(1, keepdims=True), rtol=1e-12)


def test_feature_on_a_prototype_is_confident():
    bank = bank_of(np.eye(3), beta=0.01)
    a = assign(bank, np.array([[2.0, 0, 0]]))
    assert a.hard_labels[0] == 0
    assert a.confidences[0] > 0.99


def test_ties_go_to_lowest_index():
    bank = bank_of(np.array([[1.0, 0], [1.0, 0], [0, 1.0]]))
    assert assign(bank, np.array([[1.0, 0]])).hard_labels[0] == 0


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, (6, 4), elements=st.floats(-10, 10)),
       st.floats(0.05, 2.0))
def test_assignment_rows_are_distributions(f, beta):
    bank = bank_of(np.arange(12, dtype=float).reshape(3, 4) - 5.0, beta=beta)
    D = assign(bank, f).D
    assert np.all(D >= 0)
    np.testing.assert_allclose(D.sum(axis=1), 1.0, atol=1e-12)


def test_zero_feature_has_cosine_zero():
    assert np.all(cosine_matrix(np.zeros((1, 3)), np.eye(3)) == 0)


def one_hot_assignment(labels, n, conf=1.0):
    D = np.full((len(labels), n), (1 - conf) / max(n - 1, 1))
    D[np.arange(len(labels)), labels] = conf
    return AssignmentBatch(D, np.zeros_like(D))


def test_ema_alpha_one_is_identity(rng):
    bank = bank_of(rng.normal(size=(3, 2)), alpha=1.0)
    new = ema_update(bank, np.ones(4), rng.normal(size=(4, 2)), rng.normal(size=(4, 2)),
                     one_hot_assignment([0, 1, 2, 0], 3))
    np.testing.assert_array_equal(new.protos, bank.protos)
    np.testing.assert_array_equal(new.clip_protos, bank.clip_protos)


def test_ema_alpha_zero_replaces_with_single_sample():
    bank = bank_of(np.eye(2), alpha=0.0)
    f = np.array([[3.0, 4.0]])
    fc = np.array([[0.5, -1.0]])
    new = ema_update(bank, np.ones(1), f, fc, one_hot_assignment([1], 2))
    np.testing.assert_allclose(new.protos[1], f[0], atol=1e-9)
    np.testing.assert_allclose(new.clip_protos[1], fc[0], atol=1e-9)
    np.testing.assert_array_equal(new.protos[0], bank.protos[0])


def test_ema_three_sample_weighted_mean():
    bank = bank_of(np.array([[1.0, 1.0], [0.0, 0.0]]), alpha=0.5)
    f = np.array([[1.0, 0.0], [0.0, 2.0], [4.0, 4.0]])
    w = np.array([1.0, 0.5, 0.25])
    D = np.array([[0.9, 0.1], [0.6, 0.4], [0.8, 0.2]])
    new = ema_update(bank, w, f, f, AssignmentBatch(D, np.zeros_like(D)))
    c = w * D[:, 0]  # 0.9, 0.3, 0.2
    mean = (c[:, None] * f).sum(0) / c.sum()
    np.testing.assert_allclose(new.protos[0], 0.5 * np.array([1.0, 1.0]) + 0.5 * mean,
                               atol=1e-9)
    # by hand: mean = [1.7, 1.4] / 1.4, so the update is [31/28, 1]
    np.testing.assert_allclose(new.protos[0], [31 / 28, 1.0], atol=1e-9)


def test_ema_filters_low_confidence_and_low_weight():
    bank = bank_of(np.zeros((3, 2)), alpha=0.0)
    f = np.array([[1.0, 0.0], [100.0, 100.0], [-50.0, 7.0]])
    D = np.array([[0.9, 0.05, 0.05], [0.19, 0.8, 0.01], [0.1, 0.1, 0.8]])
    w = np.array([1.0, 1.0, 0.19])
    # Sample 2 has w < 0.2 and must not move prototype 2.
    new = ema_update(bank, w, f, f, AssignmentBatch(D, np.zeros_like(D)))
    np.testing.assert_array_equal(new.protos[2], [0.0, 0.0])
    keep = contributor_mask(AssignmentBatch(D, D), w)
    assert keep.tolist() == [True, True, False]
    # Confidence below the floor: a 10-way near-uniform row is excluded.
    D2 = np.full((1, 10), 0.1)
    D2[0, 3] = 0.19
    D2 /= D2.sum()
    assert not contributor_mask(AssignmentBatch(D2, D2), np.ones(1))[0]


def test_ema_untouched_class_keeps_zero_clip_prototype(rng):
    bank = bank_of(rng.normal(size=(3, 2)), alpha=0.5)
    new = ema_update(bank, np.ones(2), rng.normal(size=(2, 2)), rng.normal(size=(2, 2)),
                     one_hot_assignment([0, 0], 3))
    assert not new.clip_populated[1] and not new.clip_populated[2]
    assert new.clip_populated[0]


def test_beta_schedule():
    assert schedule_beta(0, 200) == 0.5
    assert schedule_beta(199, 200) == pytest.approx(0.1)
    vals = [schedule_beta(e, 200) for e in range(200)]
    assert all(a >= b for a, b in zip(vals, vals[1:]))
    assert schedule_beta(0, 1) == 0.5
    with pytest.raises(ValidationError):
        schedule_beta(0, 0)


def test_bank_validation_and_serialization(rng):
    with pytest.raises(StructuralError):
        PrototypeBank(np.zeros((3, 2)), np.zeros((2, 2)), 3)
    with pytest.raises(ValidationError):
        PrototypeBank(np.zeros((3, 2)), np.zeros((3, 2)), 3, alpha=1.5)
    bank = PrototypeBank(rng.normal(size=(5, 3)), rng.normal(size=(5, 2)), 2, 3, 0.99, 0.2)
    back = PrototypeBank.from_bytes(bank.to_bytes())
    assert (back.n_rel, back.n_irr) == (2, 3)
    np.testing.assert_array_equal(back.protos, bank.protos.astype(np.float32))
    with pytest.raises(FormatError):
        PrototypeBank.from_bytes(bank.to_bytes()[:10])


def test_catalog_matching_exact_centroid_and_unused():
    centroids = np.eye(3)
    bank = PrototypeBank(np.eye(3), np.array([[0, 1.0, 0], [0, 0, 0], [1.0, 0, 0]]), 3)
    m = match_prototypes_to_catalog(bank, centroids)
    assert m[0].class_id == 1 and m[0].distribution[1] > 0.99
    assert m[1].unused and m[1].class_id is None
    assert m[2].class_id == 0


def test_catalog_matching_is_nearest_centroid(rng):
    centroids = rng.normal(size=(5, 4))
    bank = PrototypeBank(rng.normal(size=(7, 3)), rng.normal(size=(7, 4)), 7)
    got = [m.class_id for m in match_prototypes_to_catalog(bank, centroids)]
    for i, cp in enumerate(bank.clip_protos):
        sims = [cp @ c / np.linalg.norm(cp) / np.linalg.norm(c) for c in centroids]
        assert got[i] == int(np.argmax(sims))
