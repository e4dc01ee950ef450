import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from sarddpm.data import generate_synthetic_dataset, scramble_pixels
from sarddpm.metrics import (
    EvalOptions,
    ExtractorConfig,
    FeatureSet,
    MetricError,
    MetricReport,
    TrainedExtractor,
    evaluate,
    frechet_distance,
    inception_score,
    kernel_distance,
    kernel_distance_subsets,
    mmd2_unbiased,
    train_feature_extractor,
)


def test_is_identities():
    assert inception_score(np.tile([0.2, 0.5, 0.3], (7, 1))) == 1.0
    assert inception_score(np.array([[1.0, 0.0], [0.0, 1.0]])) == 2.0
    assert inception_score(np.eye(5)) == pytest.approx(5.0, rel=1e-15)


def test_is_splits():
    p = np.vstack([np.eye(2), np.eye(2)])
    assert inception_score(p, splits=2) == 2.0
    with pytest.raises(MetricError):
        inception_score(p, splits=5)


@pytest.mark.parametrize("bad", [np.array([[0.5, 0.6]]), np.array([[1.5, -0.5]]), np.array([[np.nan, 1.0]]), np.zeros((0, 3)), np.ones(3)])
def test_is_rejects_invalid_rows(bad):
    with pytest.raises(MetricError):
        inception_score(bad)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 20), st.integers(1, 6)), elements=st.floats(0.0, 1.0)))
def test_is_bounds(raw):
    raw = raw + 1e-3
    p = raw / raw.sum(axis=1, keepdims=True)
    score = inception_score(p)
    assert 1.0 - 1e-12 <= score <= p.shape[1] + 1e-9


def test_fid_self_is_zero(rng):
    x = rng.normal(size=(300, 16))
    assert abs(frechet_distance(x, x)) <= 1e-6


def test_fid_one_dimensional_case():
    a = np.array([[-1.0], [1.0]]) / math.sqrt(2.0)
    assert abs(frechet_distance(a, a + 1.0) - 1.0) <= 1e-6


def test_fid_diagonal_closed_form():
    # four corner points of a square: zero sample mean, uncorrelated columns, unbiased variance 4 s^2 / 3
    def build(mu, var):
        s = np.sqrt(np.asarray(var) * 3.0 / 4.0)
        base = np.array([[-1.0, -1.0], [1.0, -1.0], [-1.0, 1.0], [1.0, 1.0]])
        return base * s + np.asarray(mu)

    mu_a, var_a, mu_b, var_b = [0.5, -1.0], [4.0, 0.25], [1.5, 2.0], [1.0, 9.0]
    a, b = build(mu_a, var_a), build(mu_b, var_b)
    assert np.allclose(np.cov(a, rowvar=False), np.diag(var_a))
    r = 1e-6
    va, vb = np.array(var_a) + r, np.array(var_b) + r
    expected = np.sum((np.subtract(mu_a, mu_b)) ** 2) + np.sum(va + vb - 2 * np.sqrt(va * vb))
    assert frechet_distance(a, b) == pytest.approx(expected, abs=1e-6)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000), shift=arrays(np.float64, 4, elements=st.floats(-5, 5)))
def test_fid_symmetry_and_translation(seed, shift):
    r = np.random.default_rng(seed)
    a = r.normal(size=(40, 4))
    b = r.normal(size=(30, 4)) * 1.5
    assert frechet_distance(a, b) == pytest.approx(frechet_distance(b, a), abs=1e-6)
    assert frechet_distance(a, a + shift) == pytest.approx(float(shift @ shift), abs=1e-6)


def test_fid_errors(rng):
    with pytest.raises(MetricError, match="dimension"):
        frechet_distance(rng.normal(size=(5, 3)), rng.normal(size=(5, 4)))
    with pytest.raises(MetricError, match="2 samples"):
        frechet_distance(rng.normal(size=(1, 3)), rng.normal(size=(5, 3)))


def test_kid_hand_example():
    x = np.array([[0.0], [1.0]])
    assert mmd2_unbiased(x, x) == -3.5
    assert kernel_distance(x, x, subset_size=2, num_subsets=1, seed=0) == -3.5


def test_kid_unbiased_on_independent_samples():
    r = np.random.default_rng(0)
    reps = np.array([kernel_distance(r.normal(size=(100, 8)), r.normal(size=(100, 8)), 100, 1, 0) for _ in range(200)])
    assert abs(reps.mean()) <= 3 * reps.std(ddof=1) / math.sqrt(len(reps))


def test_kid_detects_shift(rng):
    a = rng.normal(size=(200, 8))
    assert kernel_distance(a, rng.normal(size=(200, 8)) + 1.0, 100, 5) > 0.1


def test_kid_deterministic_and_errors(rng):
    a, b = rng.normal(size=(50, 4)), rng.normal(size=(60, 4))
    assert kernel_distance(a, b, 20, 5, seed=3) == kernel_distance(a, b, 20, 5, seed=3)
    assert len(kernel_distance_subsets(a, b, 20, 7)) == 7
    with pytest.raises(MetricError, match="exceeds"):
        kernel_distance(a, b, 55)
    with pytest.raises(MetricError):
        kernel_distance(a, b, 1)


def test_feature_set_validation():
    with pytest.raises(MetricError):
        FeatureSet(np.zeros(3))
    with pytest.raises(MetricError):
        FeatureSet(np.array([[np.inf]]))
    with pytest.raises(MetricError):
        FeatureSet(np.zeros((2, 3)), np.ones((3, 2)) / 2)


@pytest.fixture(scope="module")
def splits16():
    train = generate_synthetic_dataset(10, 40, 16, seed=0)
    test = generate_synthetic_dataset(10, 20, 16, seed=1, norm_params=train.norm_params, split="test")
    return train, test


@pytest.fixture(scope="module")
def extractor16(splits16):
    return train_feature_extractor(splits16[0], epochs=8)


def test_extractor_accuracy(extractor16, splits16):
    test = splits16[1]
    acc = float((extractor16.predict(test.images) == test.labels).mean())
    assert acc >= 0.9


def test_extractor_contract(extractor16, splits16, tmp_path):
    fs = extractor16.extract(splits16[1].images[:7])
    assert fs.features.shape == (7, 256)
    assert np.allclose(fs.probs.sum(axis=1), 1.0)
    extractor16.save(tmp_path / "ext.ckpt")
    again = TrainedExtractor.load(tmp_path / "ext.ckpt")
    assert np.array_equal(again.extract(splits16[1].images[:7]).features, fs.features)
    unlabeled = generate_synthetic_dataset(2, 2, 16)
    unlabeled.labels = None
    with pytest.raises(MetricError, match="labelled"):
        train_feature_extractor(unlabeled)


def _null_kid_se(ext, images, subset, reps=10):
    """Spread of KID between disjoint halves of real data, used as the standard error."""
    feats = ext.extract(images).features
    r = np.random.default_rng(0)
    vals = []
    for i in range(reps):
        order = r.permutation(len(feats))
        vals.append(kernel_distance(feats[order[:subset]], feats[order[subset : 2 * subset]], subset, 1, i))
    return float(np.std(vals, ddof=1))


def test_evaluate_copy_and_scrambled(extractor16, splits16, tmp_path):
    test = splits16[1]
    half = len(test) // 2
    copy = evaluate(test.images.copy(), test, extractor16, EvalOptions(kid_subset_size=half))
    assert abs(copy.fid) <= 1e-6
    assert abs(copy.kid) <= 3 * _null_kid_se(extractor16, test.images, half)
    scrambled = evaluate(scramble_pixels(test.images, 0), test, extractor16)
    assert scrambled.fid > copy.fid + 1.0
    assert scrambled.n_generated == scrambled.n_real == len(test)
    scrambled.save(tmp_path)
    data = json.loads((tmp_path / "metrics.json").read_text())
    assert {"is", "fid", "kid", "n_generated", "n_real", "seed"} <= set(data)
    assert "fid=" in (tmp_path / "metrics.txt").read_text()
    assert "IS ↑" in scrambled.table()


def test_evaluate_resolution_mismatch(extractor16):
    with pytest.raises(MetricError, match="differ"):
        evaluate(np.zeros((4, 1, 8, 8), np.float32), np.zeros((4, 1, 16, 16), np.float32), extractor16)
    with pytest.raises(MetricError, match="extractor expects"):
        evaluate(np.zeros((4, 1, 8, 8), np.float32), np.zeros((4, 1, 8, 8), np.float32), extractor16)


def test_report_text_roundtrip():
    rep = MetricReport(2.5, 1.25, -0.001, 0.01, 10, 20, 10, 10, 1, 0)
    text = rep.to_text()
    assert text.splitlines()[0] == "is=2.5"
    assert json.loads(rep.to_json())["n_real"] == 20
