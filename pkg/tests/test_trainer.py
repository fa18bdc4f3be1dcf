import numpy as np
import pytest

from subconcepts.exceptions import FormatError, NumericalError, StructuralError, ValidationError
from subconcepts.fieldset import FieldSet, compute_density_weights
from subconcepts.guidance import Query, QuerySet
from subconcepts.projector import project
from subconcepts.prototypes import assign
from subconcepts.synthetic import GeneratorSpec, generate_synthetic_scene
from subconcepts.trainer import (RunConfig, count_used_prototypes, decode_checkpoint,
                                 encode_checkpoint, load_checkpoint, run, sample_batch,
                                 save_checkpoint)

FAST = dict(epochs=40, batch_size=512)


def test_batches_are_seeded(small_scene):
    a = sample_batch(small_scene, 64, np.random.default_rng(3))
    b = sample_batch(small_scene, 64, np.random.default_rng(3))
    np.testing.assert_array_equal(a.indices, b.indices)
    np.testing.assert_array_equal(a.seg, b.seg)


def test_ray_free_selection_is_uniform():
    n = 20
    fs = FieldSet.from_arrays(np.eye(n), np.eye(n), weights=np.full(n, 0.5))
    rng = np.random.default_rng(0)
    counts = np.zeros(n)
    draws = 0
    while draws < 100_000:
        idx = sample_batch(fs, 5000, rng).indices
        counts += np.bincount(idx, minlength=n)
        draws += idx.size
    expected = draws / n
    sd = np.sqrt(draws * (1 / n) * (1 - 1 / n))
    assert np.all(np.abs(counts - expected) < 3 * sd + 1)


def test_ray_batch_weights_match_recomputation(ray_scene):
    batch = sample_batch(ray_scene, 200, np.random.default_rng(1))
    lookup = {}
    for j, r in enumerate(ray_scene.rays):
        w = compute_density_weights(ray_scene.ray(j))
        for i, wi in zip(r.indices, w):
            lookup[int(i)] = wi
    np.testing.assert_array_equal(batch.weights, [lookup[int(i)] for i in batch.indices])


def test_zero_epochs_is_a_no_op(small_scene):
    a = run(small_scene, None, RunConfig(epochs=0, n_rel=4, n_irr=0, seed=1))
    b = run(small_scene, None, RunConfig(epochs=0, n_rel=4, n_irr=0, seed=1))
    assert len(a.telemetry) == 0
    assert a.params.to_bytes() == b.params.to_bytes()
    assert not a.bank.clip_populated.any()


def test_one_class_scene_collapses_to_one_prototype():
    fs = generate_synthetic_scene(GeneratorSpec(n_classes=1, d_seg=8, d_q=8, n_samples=800,
                                                seed=3))
    r = run(fs, None, RunConfig(n_rel=1, n_irr=0, **FAST))
    inside = fs.labels >= 0
    D = assign(r.bank, project(r.params, fs.seg[inside])).D
    assert np.all(D.argmax(1) == 0)
    assert D[:, 0].min() >= 0.99


def test_telemetry_shape_and_beta_monotone(small_scene):
    r = run(small_scene, None, RunConfig(n_rel=4, n_irr=0, **FAST))
    assert len(r.telemetry) == 40
    beta = r.telemetry.column("beta")
    assert np.all(np.diff(beta) <= 0)
    assert beta[0] == 0.5 and beta[-1] == pytest.approx(0.1)
    assert np.all(r.telemetry.column("l_irr") == 0)
    header = r.telemetry.to_csv().splitlines()[0]
    assert header == "epoch,l_proj,l_irr,l_proto,total,beta,lr,used_prototypes,ms"


def test_checkpoints_identical_and_round_trip(small_scene, tmp_path):
    cfg = RunConfig(n_rel=4, n_irr=2, seed=9, **FAST)
    qs = QuerySet([Query(small_scene.catalog.centroids[0], [0, 1], 0.5, targets=[0])])
    a = encode_checkpoint(run(small_scene, qs, cfg))
    b = encode_checkpoint(run(small_scene, qs, cfg))
    assert a == b
    back = decode_checkpoint(a)
    assert encode_checkpoint(back) == a
    assert back.queryset.queries[0].targets == [0]
    save_checkpoint(back, tmp_path / "c.ck")
    assert (tmp_path / "c.ck").read_bytes() == a
    assert encode_checkpoint(load_checkpoint(tmp_path / "c.ck")) == a


def test_different_seeds_differ(small_scene):
    a = run(small_scene, None, RunConfig(n_rel=4, n_irr=0, seed=1, epochs=3, batch_size=64))
    b = run(small_scene, None, RunConfig(n_rel=4, n_irr=0, seed=2, epochs=3, batch_size=64))
    assert encode_checkpoint(a) != encode_checkpoint(b)


@pytest.mark.parametrize("cut", [0, 3, 20, -1])
def test_corrupt_checkpoints_raise_format_error(small_scene, cut):
    buf = encode_checkpoint(run(small_scene, None, RunConfig(n_rel=2, n_irr=0, epochs=1,
                                                             batch_size=32)))
    with pytest.raises(FormatError):
        decode_checkpoint(buf[:cut] if cut else b"NOPE" + buf[4:])


def test_non_finite_features_rejected():
    seg = np.ones((50, 3))
    seg[7, 1] = np.inf
    with pytest.raises(StructuralError):
        run(FieldSet.from_arrays(seg, np.ones((50, 2))), None, RunConfig(n_rel=2, n_irr=0))


def test_divergence_aborts_with_epoch_and_breakdown(small_scene):
    cfg = RunConfig(n_rel=4, n_irr=0, epochs=20, batch_size=128, lr_start=1e300, lr_end=1e300)
    with np.errstate(all="ignore"), pytest.raises(NumericalError) as e:
        run(small_scene, None, cfg)
    assert e.value.epoch is not None and e.value.epoch >= 1
    assert "epoch" in str(e.value)


def test_config_validation():
    with pytest.raises(ValidationError):
        RunConfig(batch_size=1).validate()
    with pytest.raises(ValidationError):
        RunConfig(beta_end=0).validate()
    with pytest.raises(ValidationError):
        RunConfig.from_dict({"epochs": 3, "nope": 1})
    with pytest.raises(ValidationError):
        RunConfig(proj_scope="some").validate()
    with pytest.raises(ValidationError):
        run(FieldSet.from_arrays(np.eye(3), np.eye(3)),
            QuerySet([Query(np.ones(3), [5])]), RunConfig(n_rel=2))


def test_irrelevance_loss_decreases_on_most_seeds():
    ok = 0
    for seed in range(10):
        fs = generate_synthetic_scene(GeneratorSpec(n_classes=4, d_seg=16, d_q=16,
                                                    n_samples=2000, query_margin=0.0,
                                                    seed=seed))
        qs = QuerySet([Query(fs.catalog.centroids[0], [0, 1], 0.5)])
        r = run(fs, qs, RunConfig(n_rel=2, n_irr=3, epochs=60, batch_size=1024, seed=seed))
        l_irr = r.telemetry.column("l_irr")
        ok += l_irr[-1] < l_irr[0]
    assert ok >= 9


def test_count_used_prototypes_helper():
    assert count_used_prototypes(np.zeros(100, int), 4) == 1
    assert count_used_prototypes(np.arange(100) % 4, 4) == 4
    assert count_used_prototypes(np.array([0] * 999 + [1]), 2) == 1
