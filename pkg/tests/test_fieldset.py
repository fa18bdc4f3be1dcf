import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from subconcepts.exceptions import StructuralError, ValidationError
from subconcepts.fieldset import (CatalogClass, ClassCatalog, FieldSet, Ray,
                                  compute_density_weights, transmittance)


def make_ray(sigmas, deltas=None):
    sigmas = np.asarray(sigmas, dtype=np.float64)
    n = sigmas.size
    deltas = np.full(n, 0.1) if deltas is None else np.asarray(deltas, dtype=np.float64)
    depths = np.cumsum(deltas)
    return Ray(np.zeros(3), np.array([0.0, 0.0, 1.0]), depths, sigmas, deltas)


def test_zero_density_gives_zero_weights():
    w = compute_density_weights(make_ray(np.zeros(7)))
    assert np.all(np.abs(w) <= 1e-6)


def test_opaque_first_sample_takes_everything():
    w = compute_density_weights(make_ray([1e6, 3.0, 5.0]))
    assert abs(w[0] - 1.0) <= 1e-6
    assert np.all(np.abs(w[1:]) <= 1e-6)


def test_two_sample_hand_computation():
    # sigma*delta = [0.5, 1.0]: w0 = 1 - e^-0.5, w1 = e^-0.5 (1 - e^-1)
    w = compute_density_weights(make_ray([5.0, 10.0], [0.1, 0.1]))
    assert w[0] == pytest.approx(1 - np.exp(-0.5), abs=1e-12)
    assert w[1] == pytest.approx(np.exp(-0.5) * (1 - np.exp(-1.0)), abs=1e-12)


def test_transmittance_starts_at_one_and_decreases():
    t = transmittance(make_ray([1.0, 2.0, 3.0, 0.0]))
    assert t[0] == 1.0
    assert np.all(np.diff(t) <= 0)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(0, 1e4, allow_nan=False), min_size=1, max_size=40),
       st.floats(1e-4, 2.0))
def test_weights_are_a_sub_partition_of_unity(sigmas, delta):
    w = compute_density_weights(make_ray(sigmas, np.full(len(sigmas), delta)))
    assert np.all(w >= 0)
    assert w.sum() <= 1 + 1e-12


def test_ray_validation():
    with pytest.raises(StructuralError):
        Ray(np.zeros(3), np.array([0, 0, 2.0]), np.array([1.0]), np.array([1.0]),
            np.array([1.0])).validate()
    with pytest.raises(StructuralError):
        make_ray([1.0, -1.0]).validate()
    with pytest.raises(StructuralError):
        Ray(np.zeros(3), np.array([0, 0, 1.0]), np.array([2.0, 1.0]), np.ones(2),
            np.ones(2)).validate()


def test_catalog_lookup_and_contiguity():
    cat = ClassCatalog((CatalogClass(0, "a", np.ones(2)), CatalogClass(1, "b", np.zeros(2))))
    assert cat.lookup("b").id == 1
    assert cat.lookup(0).name == "a"
    with pytest.raises(ValidationError):
        cat.lookup("zzz")
    with pytest.raises(ValidationError):
        ClassCatalog((CatalogClass(1, "a", np.ones(2)),))


def test_from_arrays_round_trips_weights():
    w = np.array([0.0, 0.25, 0.5, 0.999, 1.0])
    fs = FieldSet.from_arrays(np.eye(5, 3), np.eye(5, 2), weights=w)
    np.testing.assert_allclose(fs.sample_weights(), w, atol=1e-6)
    assert fs.n_samples == 5 and fs.d_seg == 3 and fs.d_q == 2


def test_fieldset_rejects_mismatched_arrays():
    with pytest.raises(StructuralError):
        FieldSet.from_arrays(np.zeros((4, 3)), np.zeros((5, 2)))


def test_ray_scene_weights_match_ray_recomputation(ray_scene):
    w = ray_scene.sample_weights()
    for j in (0, 7, len(ray_scene.rays) - 1):
        r = ray_scene.rays[j]
        np.testing.assert_array_equal(w[r.indices], compute_density_weights(ray_scene.ray(j)))
