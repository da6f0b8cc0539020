import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tnfs.clustering import (ClusterConfig, ClusterResult, fcm, lagged_output_matrix,
                             rules_from_clusters, scan_cluster_counts, select_cluster_count,
                             teacher_forced_features, validity_index, best_cluster_count)
from tnfs.errors import DegenerateDataError, InvalidArgumentError, UndefinedIndexError
from tnfs.model import WIDTH_FLOOR, rollout
from tnfs.training import TrainingSequence


def blobs(centers, n=100, std=0.05, seed=0):
    rng = np.random.default_rng(seed)
    centers = np.atleast_2d(np.asarray(centers, dtype=float))
    pts = [c + std * rng.standard_normal((n, centers.shape[1])) for c in centers]
    return np.vstack(pts), pts


def matched(found, expected):
    """Distance from each expected center to its nearest found center."""
    d = np.linalg.norm(found[None] - np.asarray(expected)[:, None], axis=2)
    return d.min(axis=1)


def test_single_cluster_is_the_mean():
    X = np.random.default_rng(0).normal(size=(50, 3))
    r = fcm(X, ClusterConfig(cluster_count=1))
    assert np.allclose(r.centers[0], X.mean(axis=0), rtol=0, atol=1e-12)
    assert np.all(r.memberships == 1.0)


def test_two_blobs_recovered():
    X, pts = blobs([[0, 0], [10, 0]], std=0.01)
    r = fcm(X, ClusterConfig(cluster_count=2, fuzzifier_m=2.0))
    assert np.all(matched(r.centers, [p.mean(0) for p in pts]) < 0.05)


def test_fcm_errors():
    with pytest.raises(InvalidArgumentError):
        fcm(np.zeros((3, 2)) + np.arange(3)[:, None], ClusterConfig(cluster_count=4))
    with pytest.raises(DegenerateDataError):
        fcm(np.ones((10, 2)), ClusterConfig(cluster_count=2))
    with pytest.raises(InvalidArgumentError):
        ClusterConfig(fuzzifier_m=1.0)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2 ** 31), st.integers(1, 6), st.floats(1.1, 4.0))
def test_memberships_stochastic_and_objective_monotone(seed, c, m):
    X = np.random.default_rng(seed).normal(size=(60, 3))
    r = fcm(X, ClusterConfig(cluster_count=c, fuzzifier_m=m, seed=seed))
    assert np.all(np.abs(r.memberships.sum(axis=1) - 1) < 1e-9)
    assert np.all((r.memberships >= 0) & (r.memberships <= 1))
    J = np.array(r.objective_history)
    assert np.all(np.diff(J) <= 1e-12 * np.maximum(1.0, J[:-1]))


def test_seed_determinism():
    X = np.random.default_rng(1).normal(size=(80, 2))
    a = fcm(X, ClusterConfig(cluster_count=3, seed=5))
    b = fcm(X, ClusterConfig(cluster_count=3, seed=5))
    assert np.array_equal(a.centers, b.centers)
    assert np.array_equal(a.memberships, b.memberships)
    assert a.objective_history == b.objective_history


def test_near_hard_limit_is_almost_crisp():
    X, _ = blobs([[0, 0], [5, 5], [0, 5]], std=0.05)
    r = fcm(X, ClusterConfig(cluster_count=3, fuzzifier_m=1.05))
    assert np.all(r.memberships.max(axis=1) >= 0.99)


def test_validity_index_prefers_true_count():
    X, _ = blobs([[0, 0], [10, 0]], std=0.05)
    two = fcm(X, ClusterConfig(cluster_count=2))
    three = fcm(X, ClusterConfig(cluster_count=3))
    v2 = validity_index(X, two, 2.0)
    assert v2 < 0.1
    assert validity_index(X, three, 2.0) > v2


def test_validity_index_guards():
    X, _ = blobs([[0, 0], [10, 0]])
    r = fcm(X, ClusterConfig(cluster_count=1))
    with pytest.raises(UndefinedIndexError):
        validity_index(X, r, 2.0)
    dup = ClusterResult(np.zeros((2, 2)), np.full((len(X), 2), 0.5), [], 0)
    assert validity_index(X, dup, 2.0) == math.inf


def test_select_four_blobs():
    X, pts = blobs([[0, 0], [5, 0], [0, 5], [5, 5]], std=0.05)
    cfg = ClusterConfig()
    assert select_cluster_count(X, 2, 8, cfg) == 4
    table = scan_cluster_counts(X, 2, 8, cfg)
    assert np.all(matched(table[4][1].centers, [p.mean(0) for p in pts]) < 0.05)


def test_select_two_blobs():
    X, _ = blobs([[0, 0, 0], [6, 6, 6]], std=0.1)
    assert select_cluster_count(X, 2, 5, ClusterConfig()) == 2


def test_ties_go_to_the_smaller_count():
    table = {2: (0.5, None), 3: (0.5, None), 4: (0.7, None)}
    assert best_cluster_count(table) == 2


def test_rules_from_constant_column_clamp_width():
    X = np.column_stack([np.random.default_rng(2).normal(size=40), np.full(40, 3.0)])
    r = fcm(X, ClusterConfig(cluster_count=1))
    m = rules_from_clusters(r, X, (1, 1, 1))
    assert m.widths[0, 1] == WIDTH_FLOOR
    assert m.n_rules == 1


def test_rules_from_two_blobs():
    X, pts = blobs([[0, 0], [4, 4]], std=0.2, n=400, seed=3)
    r = fcm(X, ClusterConfig(cluster_count=2, fuzzifier_m=1.5))
    m = rules_from_clusters(r, X, (1, 1, 1), fuzzifier_m=1.5)
    assert np.all(matched(m.centers, [p.mean(0) for p in pts]) < 0.05)
    assert np.all(np.abs(m.widths / 0.2 - 1) < 0.2)


def test_rules_dimension_check():
    X = np.random.default_rng(4).normal(size=(30, 3))
    r = fcm(X, ClusterConfig(cluster_count=2))
    with pytest.raises(InvalidArgumentError):
        rules_from_clusters(r, X, (1, 1, 1))
    assert rules_from_clusters(r, X, (1, 1, 1), trailing_columns=1).centers.shape == (2, 2)


def test_state_width_floor_applies_to_state_terms_only():
    X, _ = blobs([[0, 0], [4, 4]], std=0.05)
    r = fcm(X, ClusterConfig(cluster_count=2))
    m = rules_from_clusters(r, X, (1, 1, 1), state_width_floor=2.0)
    assert np.all(m.widths[:, 0] == 2.0)
    assert np.all(m.widths[:, 1] < 0.2)


def test_relabeled_clusters_give_identical_rollouts():
    X, _ = blobs([[0, 0, 0], [3, 3, 0], [0, 3, 3]], std=0.3, seed=5)
    r = fcm(X, ClusterConfig(cluster_count=3))
    perm = [2, 0, 1]
    swapped = ClusterResult(r.centers[perm], r.memberships[:, perm], r.objective_history,
                            r.iterations_used)
    a = rules_from_clusters(r, X, (1, 2, 1))
    b = rules_from_clusters(swapped, X, (1, 2, 1))
    # give both models the same consequent per cluster
    b.A, b.B, b.C = a.A[perm], a.B[perm], a.C
    U = np.random.default_rng(6).normal(size=(15, 2))
    assert np.array_equal(rollout(a, U)[1], rollout(b, U)[1])


def test_lagged_output_rows():
    rows = lagged_output_matrix(np.arange(6.0), lags=3)
    assert rows.shape == (3, 4)
    assert np.array_equal(rows[0], [0, 1, 2, 3])
    with pytest.raises(InvalidArgumentError):
        lagged_output_matrix([1.0, 2.0, 3.0], lags=3)


def test_teacher_forced_rows():
    seq = TrainingSequence([[1.0], [2.0]], [[5.0, 6.0], [7.0, 8.0]])
    rows = teacher_forced_features([seq], n_states=3)
    assert np.array_equal(rows, [[0, 0, 0, 1.0], [5.0, 6.0, 0, 2.0]])
