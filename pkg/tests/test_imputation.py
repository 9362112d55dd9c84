import numpy as np
import pytest

from cyclefuse.cohort import CohortError, SyntheticSpec, generate_synthetic_cohort
from cyclefuse.cyclegan import GanTrainConfig, train_gan
from cyclefuse.imputation import (
    STRATEGIES, ImputationStrategy, LeakageError, ModalityImputer, apply_strategy,
)


@pytest.fixture(scope="module")
def cohort():
    c, _ = generate_synthetic_cohort(SyntheticSpec(n_cn=6, n_ad=6, missing_fnc_fraction=0.5,
                                                   missing_t1_fraction=0.2, n_components=5,
                                                   volume_shape=(8, 8, 8), seed=1))
    return c


@pytest.fixture(scope="module")
def gan(cohort):
    model, _ = train_gan(cohort, GanTrainConfig(epochs=1, batch_size=4, lr_initial=0.002), fold_tag=0)
    return model


def _strategies(gan):
    return [ImputationStrategy("subsample"), ImputationStrategy("zero_fill"), ImputationStrategy("generative", gan)]


def test_table1_shapes():
    # 207 CN / 195 AD with both modalities, rest T1 only (scaled-down volumes)
    spec = SyntheticSpec(n_cn=1445, n_ad=1465, n_components=53, volume_shape=(2, 2, 2),
                         missing_fnc_fraction={"CN": 1 - 207 / 1445, "AD": 1 - 195 / 1465}, seed=0)
    c, _ = generate_synthetic_cohort(spec)
    sub = apply_strategy(ImputationStrategy("subsample"), c)
    assert len(sub) == 402
    assert sub.counts()["CN"]["paired"] == 207 and sub.counts()["AD"]["paired"] == 195
    filled = apply_strategy(ImputationStrategy("zero_fill"), c)
    missing = next(r for r in c if r.fnc is None)
    got = filled.record(missing.subject_id).fnc
    assert got.shape == (1378,) and not got.any()


def test_complete_cohort_unchanged(gan):
    c, _ = generate_synthetic_cohort(SyntheticSpec(n_cn=3, n_ad=3, n_components=5, volume_shape=(8, 8, 8)))
    for s in _strategies(gan):
        assert apply_strategy(s, c).same_as(c)


def test_present_values_and_labels_preserved(cohort, gan):
    for s in _strategies(gan):
        out = apply_strategy(s, cohort)
        assert out.is_complete
        for r in out:
            orig = cohort.record(r.subject_id)
            assert r.diagnosis == orig.diagnosis
            if orig.fnc is not None:
                np.testing.assert_array_equal(r.fnc, orig.fnc)
            if orig.t1 is not None:
                np.testing.assert_array_equal(r.t1, orig.t1)


def test_sizes(cohort, gan):
    assert len(apply_strategy(ImputationStrategy("subsample"), cohort)) == len(cohort.paired())
    assert len(apply_strategy(ImputationStrategy("zero_fill"), cohort)) == len(cohort)
    assert len(apply_strategy(ImputationStrategy("generative", gan), cohort)) == len(cohort)


def test_idempotent(cohort, gan):
    for s in _strategies(gan):
        once = apply_strategy(s, cohort)
        assert apply_strategy(s, once).same_as(once)


def test_generative_requires_model():
    with pytest.raises(ValueError):
        ImputationStrategy("generative")
    with pytest.raises(ValueError):
        ImputationStrategy("mean")


def test_subsample_errors():
    c, _ = generate_synthetic_cohort(SyntheticSpec(n_cn=3, n_ad=3, missing_fnc_fraction=1.0, volume_shape=(4, 4, 4)))
    with pytest.raises(CohortError, match="no records"):
        apply_strategy(ImputationStrategy("subsample"), c)
    c, _ = generate_synthetic_cohort(SyntheticSpec(n_cn=3, n_ad=3, missing_fnc_fraction={"CN": 0.0, "AD": 1.0},
                                                   volume_shape=(4, 4, 4)))
    with pytest.raises(CohortError, match="single-class"):
        apply_strategy(ImputationStrategy("subsample"), c)


def test_fold_tag_binding(cohort, gan):
    with pytest.raises(LeakageError):
        apply_strategy(ImputationStrategy("generative", gan, fold_tag=1), cohort)
    assert apply_strategy(ImputationStrategy("generative", gan, fold_tag=0), cohort).is_complete


def test_dimension_mismatch(gan):
    other, _ = generate_synthetic_cohort(SyntheticSpec(n_cn=2, n_ad=2, n_components=6, volume_shape=(8, 8, 8)))
    with pytest.raises(ValueError, match="dimensions"):
        apply_strategy(ImputationStrategy("generative", gan), other)


def test_transformer(cohort, gan):
    for name in STRATEGIES:
        imp = ModalityImputer(strategy=name, model=gan if name == "generative" else None)
        assert imp.get_params()["strategy"] == name
        assert imp.fit(cohort).transform(cohort).is_complete
