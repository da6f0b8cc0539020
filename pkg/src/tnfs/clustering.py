"""Fuzzy C-means clustering and rule-base initialization.

The number of clusters picks the number of rules; cluster centers become
Gaussian term centers and the fuzzy scatter around each center becomes the
term widths.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateDataError, InvalidArgumentError, UndefinedIndexError
from .model import WIDTH_FLOOR, TnfsModel
from .training import default_consequents

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ClusterConfig:
    cluster_count: int = 4
    fuzzifier_m: float = 2.0
    tolerance: float = 1e-6
    max_iterations: int = 300
    seed: int = 0

    def __post_init__(self):
        if self.cluster_count < 1:
            raise InvalidArgumentError("cluster_count must be >= 1")
        if not self.fuzzifier_m > 1:
            raise InvalidArgumentError("fuzzifier_m must be strictly greater than 1")
        if not self.tolerance > 0:
            raise InvalidArgumentError("tolerance must be positive")
        if self.max_iterations < 1:
            raise InvalidArgumentError("max_iterations must be >= 1")


@dataclass
class ClusterResult:
    centers: np.ndarray
    memberships: np.ndarray
    objective_history: list
    iterations_used: int


def _sq_distances(data, centers):
    return np.sum((data[:, None, :] - centers[None]) ** 2, axis=2)


def _memberships(d2, m):
    # u_ik = 1 / sum_j (d_ik^2 / d_jk^2)^(1/(m-1)), evaluated in log space so
    # that fuzzifiers near 1 do not overflow.
    n, c = d2.shape
    U = np.empty((n, c))
    zero = d2 <= 0.0
    hit = zero.any(axis=1)
    if np.any(hit):
        U[hit] = zero[hit] / zero[hit].sum(axis=1, keepdims=True)
    rest = ~hit
    if np.any(rest):
        w = -np.log(d2[rest]) / (m - 1.0)
        w -= w.max(axis=1, keepdims=True)
        e = np.exp(w)
        U[rest] = e / e.sum(axis=1, keepdims=True)
    return U


def _objective(data, centers, U, m):
    return float(np.sum(U ** m * _sq_distances(data, centers)))


def _seed_centers(data, c, rng):
    # D^2-weighted choice of distinct data points.
    n = len(data)
    chosen = [int(rng.integers(n))]
    d2 = np.sum((data - data[chosen[0]]) ** 2, axis=1)
    while len(chosen) < c:
        total = d2.sum()
        if total <= 0:
            raise DegenerateDataError("fewer distinct points than clusters")
        i = int(rng.choice(n, p=d2 / total))
        chosen.append(i)
        d2 = np.minimum(d2, np.sum((data - data[i]) ** 2, axis=1))
    return data[chosen].copy()


def fcm(data, config: ClusterConfig) -> ClusterResult:
    """Alternate membership and center updates until centers settle.

    Iteration stops when no center moves by more than ``config.tolerance`` or
    after ``config.max_iterations`` rounds.
    """
    X = np.asarray(data, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    if X.ndim != 2 or X.shape[1] < 1:
        raise InvalidArgumentError("data must be an n x d matrix with d >= 1")
    if not np.all(np.isfinite(X)):
        raise InvalidArgumentError("data contains non-finite values")
    n, c, m = len(X), config.cluster_count, config.fuzzifier_m
    if n < c:
        raise InvalidArgumentError(f"{n} points cannot form {c} clusters")
    if c > 1 and np.all(X == X[0]):
        raise DegenerateDataError("all data points are identical")

    rng = np.random.default_rng(config.seed)
    V = X.mean(axis=0, keepdims=True) if c == 1 else _seed_centers(X, c, rng)
    history = []
    iterations = 0
    for iterations in range(1, config.max_iterations + 1):
        U = _memberships(_sq_distances(X, V), m)
        W = U ** m
        V_new = (W.T @ X) / W.sum(axis=0)[:, None]
        history.append(_objective(X, V_new, U, m))
        shift = float(np.max(np.abs(V_new - V)))
        V = V_new
        if shift < config.tolerance:
            break
    U = _memberships(_sq_distances(X, V), m)
    return ClusterResult(V, U, history, iterations)


def validity_index(data, result: ClusterResult, fuzzifier_m: float) -> float:
    """Xie-Beni index: compactness over ``n`` times the minimum center separation.

    Lower is better.  Coincident centers give ``inf``.
    """
    X = np.asarray(data, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    V = result.centers
    c = len(V)
    if c < 2:
        raise UndefinedIndexError("the Xie-Beni index needs at least two clusters")
    J = _objective(X, V, result.memberships, fuzzifier_m)
    sep = _sq_distances(V, V)
    sep[np.diag_indices(c)] = np.inf
    min_sep = float(sep.min())
    if min_sep <= 0.0:
        return math.inf
    return J / (len(X) * min_sep)


def scan_cluster_counts(data, c_min: int, c_max: int, config: ClusterConfig):
    """Cluster for every ``c`` in ``[c_min, c_max]``; returns ``{c: (index, result)}``."""
    n = len(np.asarray(data))
    if not 2 <= c_min <= c_max <= n:
        raise InvalidArgumentError(f"need 2 <= c_min <= c_max <= n, got {c_min}, {c_max}, {n}")
    table = {}
    for c in range(c_min, c_max + 1):
        cfg = ClusterConfig(c, config.fuzzifier_m, config.tolerance, config.max_iterations,
                            config.seed + c)
        result = fcm(data, cfg)
        table[c] = (validity_index(data, result, config.fuzzifier_m), result)
        log.debug("c=%d xie-beni=%.6g", c, table[c][0])
    return table


def best_cluster_count(table) -> int:
    # dict iteration runs over ascending c, so strict < keeps the smaller c on ties
    best_c, best = None, math.inf
    for c, (index, _) in table.items():
        if best_c is None or index < best:
            best_c, best = c, index
    return best_c


def select_cluster_count(data, c_min: int, c_max: int, config: ClusterConfig) -> int:
    return best_cluster_count(scan_cluster_counts(data, c_min, c_max, config))


def fuzzy_widths(result: ClusterResult, data, fuzzifier_m: float) -> np.ndarray:
    """Membership-weighted standard deviation per cluster and coordinate."""
    X = np.asarray(data, dtype=float)
    W = result.memberships ** fuzzifier_m
    var = np.einsum("kc,kcd->cd", W, (X[:, None, :] - result.centers[None]) ** 2)
    var /= W.sum(axis=0)[:, None]
    return np.maximum(np.sqrt(var), WIDTH_FLOOR)


def rules_from_clusters(result: ClusterResult, data, dims, fuzzifier_m: float = 2.0,
                        seed: int = 0, trailing_columns: int = 0,
                        state_width_floor: float | None = None) -> TnfsModel:
    """One rule per cluster over the ``[state, input]`` feature space.

    ``dims`` is ``(N, M, P)``.  Columns past ``N + M`` (``trailing_columns``
    of them, e.g. the ``y(t+1)`` component of lagged-output vectors) take part
    in clustering but do not produce antecedent terms.  Consequents and ``C``
    follow :func:`tnfs.training.default_consequents`.

    ``state_width_floor`` widens narrow state terms.  The state coordinates of
    cluster data are only proxies for the learned state, and tight terms there
    leave most rules unfired once training moves the state away.
    """
    N, M, P = dims
    X = np.asarray(data, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    if X.shape[1] != N + M + trailing_columns:
        raise InvalidArgumentError(
            f"cluster space has {X.shape[1]} columns, expected N + M"
            f"{' + trailing' if trailing_columns else ''} = {N + M + trailing_columns}")
    if result.centers.shape[1] != X.shape[1] or result.memberships.shape[0] != len(X):
        raise InvalidArgumentError("cluster result does not match data")
    D = N + M
    widths = fuzzy_widths(result, X, fuzzifier_m)[:, :D]
    if state_width_floor is not None:
        if not state_width_floor >= WIDTH_FLOOR:
            raise InvalidArgumentError(f"state_width_floor must be >= {WIDTH_FLOOR}")
        widths[:, :N] = np.maximum(widths[:, :N], state_width_floor)
    R = len(result.centers)
    A, B, C = default_consequents(N, M, P, R, np.random.default_rng(seed))
    return TnfsModel(result.centers[:, :D].copy(), widths, A, B, C)


def lagged_output_matrix(series, lags: int = 3) -> np.ndarray:
    """Rows ``[y(t-lags+1), ..., y(t), y(t+1)]`` from a scalar series.

    With ``lags=3`` each row matches the rule template over
    ``y(t-2), y(t-1), y(t)`` with ``y(t+1)`` as the predicted component.
    """
    y = np.asarray(series, dtype=float).ravel()
    if len(y) < lags + 1:
        raise InvalidArgumentError(f"series of length {len(y)} is too short for {lags} lags")
    return np.lib.stride_tricks.sliding_window_view(y, lags + 1).copy()


def teacher_forced_features(sequences, n_states: int) -> np.ndarray:
    """Cluster-space rows ``[state proxy, input]`` for every step of every sequence.

    The state proxy at step ``t`` is the previous target (``x_init`` or zero at
    ``t = 0``), zero-padded or truncated to ``n_states``.
    """
    rows = []
    for seq in sequences:
        U, Y = np.asarray(seq.inputs), np.asarray(seq.targets)
        prev = np.zeros(n_states) if seq.x_init is None else np.asarray(seq.x_init, float)
        for t in range(len(U)):
            rows.append(np.concatenate([prev, U[t]]))
            prev = np.zeros(n_states)
            k = min(n_states, Y.shape[1])
            prev[:k] = Y[t, :k]
    return np.array(rows)
