"""SDCA SVM: convergence, duality, ranking metrics, backward signal."""

import numpy as np
import pytest

from fvlayer.svm import (
    SvmModel,
    accuracy,
    average_precision,
    backward_signal,
    decision_scores,
    sdca_train,
)


def separable_set(n, margin, dim, seed):
    # two unit-direction clusters pushed apart so min margin >= `margin`
    rng = np.random.default_rng(seed)
    direction = np.zeros(dim)
    direction[0] = 1.0
    labels = np.where(np.arange(n) % 2 == 0, 1.0, -1.0)
    offsets = rng.uniform(margin, 3.0 * margin, size=n)
    vectors = labels[:, None] * offsets[:, None] * direction
    vectors[:, 1:] += 0.1 * rng.normal(size=(n, dim - 1))
    return vectors, labels


def ap_oracle(scores, labels):
    # literal definition: precision at each positive in rank order
    order = np.argsort(-scores, kind="stable")
    hits = 0
    total = 0.0
    for rank, idx in enumerate(order, start=1):
        if labels[idx] > 0:
            hits += 1
            total += hits / rank
    return total / hits


# ------------------------------------------------------------ training


def test_sdca_solves_separable_problem():
    vectors, labels = separable_set(80, margin=0.5, dim=4, seed=1)
    model = sdca_train(vectors, labels, gap_tol=0.01, seed=0)
    assert model.gap < 0.01
    scores = decision_scores(model, vectors)
    assert accuracy(scores, labels) == 1.0


def test_sdca_dual_objective_never_decreases():
    vectors, labels = separable_set(60, margin=0.3, dim=3, seed=2)
    model = sdca_train(vectors, labels, gap_tol=1e-4, max_epochs=60, seed=3)
    hist = np.array(model.dual_history)
    assert hist.size >= 1
    assert np.all(np.diff(hist) >= -1e-9)


def test_sdca_box_constraint_and_default_c():
    vectors, labels = separable_set(40, margin=0.4, dim=2, seed=4)
    model = sdca_train(vectors, labels, seed=0)
    assert model.c == 40.0  # defaults to N
    box = model.c / 40.0
    assert np.all(model.alpha >= -1e-15)
    assert np.all(model.alpha <= box + 1e-15)


def test_sdca_theta_is_dual_combination():
    # theta must equal sum_i alpha_i y_i x^_i at all times
    vectors, labels = separable_set(30, margin=0.4, dim=3, seed=5)
    model = sdca_train(vectors, labels, seed=1)
    augmented = np.concatenate([vectors, np.ones((30, 1))], axis=1)
    rebuilt = (model.alpha * labels) @ augmented
    np.testing.assert_allclose(model.theta, rebuilt, rtol=1e-10, atol=1e-12)


def test_sdca_warm_start_converges_immediately():
    vectors, labels = separable_set(50, margin=0.5, dim=3, seed=6)
    cold = sdca_train(vectors, labels, gap_tol=0.01, seed=2)
    warm = sdca_train(vectors, labels, gap_tol=0.01, seed=2,
                      init_alpha=cold.alpha)
    assert warm.epochs_run == 0  # gap already under tolerance before epoch 1
    np.testing.assert_allclose(warm.theta, cold.theta, rtol=1e-12)


def test_sdca_requires_both_labels():
    vectors = np.ones((4, 2))
    with pytest.raises(ValueError):
        sdca_train(vectors, np.ones(4))


def test_sdca_hits_epoch_cap_on_hard_data():
    rng = np.random.default_rng(7)
    vectors = rng.normal(size=(40, 2))
    labels = np.where(rng.random(40) > 0.5, 1.0, -1.0)  # unlearnable
    model = sdca_train(vectors, labels, gap_tol=1e-9, max_epochs=5, seed=0)
    assert model.epochs_run == 5
    assert model.gap > 1e-9


# ------------------------------------------------------------- metrics


def test_average_precision_perfect_ranking():
    scores = np.array([4.0, 3.0, 2.0, 1.0])
    labels = np.array([1.0, 1.0, -1.0, -1.0])
    assert average_precision(scores, labels) == 1.0


def test_average_precision_positives_ranked_last():
    scores = np.array([4.0, 3.0, 2.0, 1.0])
    labels = np.array([-1.0, -1.0, 1.0, 1.0])
    # precisions 1/3 and 2/4 at the two positives
    assert abs(average_precision(scores, labels) - 5.0 / 12.0) <= 1e-15


def test_average_precision_matches_literal_definition():
    rng = np.random.default_rng(11)
    for _ in range(25):
        n = int(rng.integers(2, 40))
        scores = rng.normal(size=n)
        labels = np.where(rng.random(n) > 0.5, 1.0, -1.0)
        if not np.any(labels > 0):
            labels[0] = 1.0
        got = average_precision(scores, labels)
        assert abs(got - ap_oracle(scores, labels)) <= 1e-12


def test_average_precision_tie_break_by_index():
    scores = np.array([1.0, 1.0, 1.0])
    # stable sort keeps index order under equal scores: ranks are 1,2,3
    assert average_precision(scores, np.array([1.0, -1.0, -1.0])) == 1.0
    assert average_precision(scores, np.array([-1.0, -1.0, 1.0])) == pytest.approx(1.0 / 3.0)


def test_average_precision_needs_a_positive():
    with pytest.raises(ValueError):
        average_precision(np.array([1.0, 2.0]), np.array([-1.0, -1.0]))


def test_accuracy_boundary_counts_as_negative():
    scores = np.array([0.5, 0.0, -0.5])
    labels = np.array([1.0, -1.0, -1.0])
    assert accuracy(scores, labels) == 1.0
    assert accuracy(scores, np.array([1.0, 1.0, -1.0])) == pytest.approx(2.0 / 3.0)


# ----------------------------------------------------- backward signal


def test_backward_signal_is_negated_label_times_theta():
    theta = np.array([0.3, -0.7, 2.0, 0.25])  # last entry is the bias
    model = SvmModel(theta=theta, alpha=np.zeros(2), c=2.0, gap=0.0,
                     epochs_run=0, dual_history=[])
    labels = np.array([1.0, -1.0])
    signal = backward_signal(labels, model)
    assert signal.shape == (2, 3)  # bias coordinate dropped
    np.testing.assert_array_equal(signal[0], -theta[:-1])
    np.testing.assert_array_equal(signal[1], theta[:-1])


def test_backward_signal_ignores_margin():
    # same label gives the same signal no matter where the item sits
    theta = np.array([1.0, -1.0, 0.0])
    model = SvmModel(theta=theta, alpha=np.zeros(3), c=3.0, gap=0.0,
                     epochs_run=0, dual_history=[])
    signal = backward_signal(np.array([1.0, 1.0, 1.0]), model)
    assert np.all(signal == signal[0])
