import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from intentlab.model import (
    Classifier, ToySpec, estimate_lipschitz, gradient_matrix, input_gradient, load_model, logits, loss,
    predict_label, predict_probs, save_model, softmax, train_toy_model,
)


def linear_model(rng, d=6, c=3):
    return Classifier((rng.standard_normal((d, c)),), (rng.standard_normal(c),))


def test_zero_weights_give_uniform_probabilities():
    model = Classifier.zeros([5, 8, 4])
    np.testing.assert_allclose(predict_probs(model, np.full(5, 0.3)), np.full(4, 0.25))
    assert predict_label(model, np.full(5, 0.3)) == 0


def test_dimension_mismatch_raises():
    with pytest.raises(ValueError):
        predict_probs(Classifier.zeros([5, 3]), np.zeros(4))


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-1e3, 1e3), min_size=2, max_size=12))
def test_softmax_is_a_probability_vector(z):
    p = softmax(np.array(z))
    assert np.all((p >= 0) & (p <= 1))
    assert abs(p.sum() - 1.0) < 1e-6


def test_probabilities_valid_and_deterministic(small_result, rng):
    x = rng.uniform(0, 1, size=(200, 16))
    p = predict_probs(small_result.model, x)
    assert np.all((p >= 0) & (p <= 1))
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-6)
    np.testing.assert_array_equal(p, predict_probs(small_result.model, x.copy()))


def test_label_invariant_under_logit_shift_and_scale(rng):
    model = linear_model(rng)
    scaled = Classifier((model.weights[0] * 3.0,), (model.biases[0] * 3.0 + 0.0,))
    x = rng.uniform(0, 1, size=(50, 6))
    np.testing.assert_array_equal(predict_label(model, x), predict_label(scaled, x))
    assert np.argmax(logits(model, x[0])) == predict_label(model, x[0])


def test_loss_is_negative_log_probability(small_result, rng):
    model = small_result.model
    x = rng.uniform(0, 1, 16)
    p = predict_probs(model, x)
    for c in range(4):
        assert loss(model, x, c) == pytest.approx(-math.log(p[c]), rel=1e-12)


def test_uniform_ten_class_loss_is_log_ten():
    assert loss(Classifier.zeros([4, 10]), np.zeros(4), 3) == pytest.approx(math.log(10), abs=1e-12)


def test_loss_decreases_along_negative_gradient(small_result, rng):
    model = small_result.model
    x = rng.uniform(0.3, 0.7, 16)
    g = input_gradient(model, x, 2)
    assert loss(model, x - 1e-4 * g / np.linalg.norm(g), 2) < loss(model, x, 2)


def test_gradient_matches_central_differences(small_result):
    """Max relative error <= 1e-3 over 100 random (x, c) with step 1e-5.

    Points are drawn around test inputs and cases where p_c sits at the
    probability floor (flat loss) are redrawn.
    """
    model = small_result.model
    rng = np.random.default_rng(7)
    h = 1e-5
    worst, checked = 0.0, 0
    while checked < 100:
        x = small_result.x_test[rng.integers(len(small_result.x_test))] + 0.05 * rng.standard_normal(16)
        c = int(rng.integers(4))
        if predict_probs(model, x)[c] < 1e-9:
            continue
        checked += 1
        g = input_gradient(model, x, c)
        eye = np.eye(16) * h
        fd = np.array([(loss(model, x + e, c) - loss(model, x - e, c)) / (2 * h) for e in eye])
        worst = max(worst, np.linalg.norm(g - fd) / max(np.linalg.norm(fd), 1e-12))
    assert worst <= 1e-3, worst


def test_linear_softmax_gradient_closed_form(rng):
    model = linear_model(rng)
    x = rng.uniform(0, 1, 6)
    p = predict_probs(model, x)
    w = model.weights[0]
    for c in range(3):
        np.testing.assert_allclose(input_gradient(model, x, c), w @ (p - np.eye(3)[c]), atol=1e-12)


def test_constant_model_has_zero_gradient():
    model = Classifier.zeros([4, 6, 3])
    assert not np.any(input_gradient(model, np.full(4, 0.2), 1))


def test_gradient_matrix_rows(small_result, rng):
    model = small_result.model
    x = rng.uniform(0, 1, 16)
    g = gradient_matrix(model, x)
    assert g.shape == (4, 16) and np.all(np.isfinite(g))
    for c in range(4):
        np.testing.assert_allclose(g[c], input_gradient(model, x, c), atol=1e-14)


def test_two_blobs_train_well(two_blob_result):
    res = two_blob_result
    assert res.test_accuracy >= 0.95
    p = predict_probs(res.model, res.x_test[res.y_test == 0][0])
    assert p[0] > 0.5


def test_ten_blobs_train_well(bench):
    acc = np.mean(bench.labels == train_toy_model(seed=0).y_test)
    assert acc >= 0.85


def test_training_is_reproducible():
    spec = ToySpec(dim=8, n_classes=3, epochs=50)
    a, b = train_toy_model(spec, seed=3), train_toy_model(spec, seed=3)
    np.testing.assert_array_equal(a.model.parameters(), b.model.parameters())
    assert a.test_accuracy == b.test_accuracy


def test_lipschitz_estimates(rng):
    assert estimate_lipschitz(Classifier.zeros([4, 3]), np.full(4, 0.5), 0.1, 500) == 0.0
    model = linear_model(rng)
    centre = np.full(6, 0.5)
    ks = [estimate_lipschitz(model, centre, 0.2, 5000, seed=s) for s in range(4)]
    assert max(ks) / min(ks) < 1.2
    grow = [estimate_lipschitz(model, centre, 0.2, n, seed=1) for n in (10, 100, 1000)]
    assert grow == sorted(grow)


def test_save_load_round_trip(tmp_path, small_result):
    path = tmp_path / "model.json"
    save_model(small_result.model, path)
    loaded = load_model(path)
    np.testing.assert_array_equal(loaded.parameters(), small_result.model.parameters())
    assert loaded.widths == small_result.model.widths
