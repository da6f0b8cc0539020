"""Recurrent Takagi-Sugeno fuzzy state-space model.

Each rule pairs Gaussian antecedent terms over the concatenated
``[state, input]`` vector with a local linear consequent
``x(t+1) = A_r x(t) + B_r u(t)``.  The network output is ``y = C x``.

Parameters are held as stacked arrays so that inference and training work
on whole batches of sequences at once:

* ``centers``, ``widths``: ``(R, N + M)``, state terms first then input terms
* ``A``: ``(R, N, N)``, ``B``: ``(R, N, M)``, ``C``: ``(P, N)``, ``x0``: ``(N,)``
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import InvalidArgumentError

WIDTH_FLOOR = 1e-3
UNDERFLOW_EPS = 1e-30
_LOG_UNDERFLOW = math.log(UNDERFLOW_EPS)


@dataclass(frozen=True)
class GaussianTerm:
    center: float
    width: float

    def __post_init__(self):
        if not (math.isfinite(self.center) and math.isfinite(self.width)):
            raise InvalidArgumentError("Gaussian term parameters must be finite")
        if self.width < WIDTH_FLOOR:
            raise InvalidArgumentError(
                f"width {self.width!r} is below the floor {WIDTH_FLOOR}")


@dataclass(frozen=True)
class RuleAntecedent:
    state_terms: tuple[GaussianTerm, ...]
    input_terms: tuple[GaussianTerm, ...]


@dataclass(frozen=True)
class RuleConsequent:
    A: np.ndarray
    B: np.ndarray


@dataclass(frozen=True)
class Rule:
    antecedent: RuleAntecedent
    consequent: RuleConsequent


def _as_array(value, ndim, name):
    arr = np.array(value, dtype=float)
    if arr.ndim != ndim:
        raise InvalidArgumentError(f"{name} must have {ndim} dimensions, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise InvalidArgumentError(f"{name} contains non-finite entries")
    return arr


@dataclass
class TnfsModel:
    """Rule base plus output matrix.

    Inference never mutates a model; training returns new instances.
    """

    centers: np.ndarray
    widths: np.ndarray
    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    x0: np.ndarray = field(default=None)

    def __post_init__(self):
        self.A = _as_array(self.A, 3, "A")
        self.B = _as_array(self.B, 3, "B")
        self.C = _as_array(self.C, 2, "C")
        self.centers = _as_array(self.centers, 2, "centers")
        self.widths = _as_array(self.widths, 2, "widths")
        R, N, N2 = self.A.shape
        if R < 1:
            raise InvalidArgumentError("a model needs at least one rule")
        if N2 != N:
            raise InvalidArgumentError(f"rule state matrices must be square, got {self.A.shape[1:]}")
        if self.B.shape[:2] != (R, N):
            raise InvalidArgumentError(f"B has shape {self.B.shape}, expected ({R}, {N}, M)")
        M = self.B.shape[2]
        if self.C.shape[1] != N:
            raise InvalidArgumentError(f"C has shape {self.C.shape}, expected (P, {N})")
        if self.centers.shape != (R, N + M) or self.widths.shape != (R, N + M):
            raise InvalidArgumentError(
                f"antecedent arrays must have shape ({R}, {N + M}), got "
                f"{self.centers.shape} and {self.widths.shape}")
        if np.any(self.widths < WIDTH_FLOOR):
            raise InvalidArgumentError(f"all widths must be >= {WIDTH_FLOOR}")
        if self.x0 is None:
            self.x0 = np.zeros(N)
        self.x0 = _as_array(self.x0, 1, "x0")
        if self.x0.shape != (N,):
            raise InvalidArgumentError(f"x0 has shape {self.x0.shape}, expected ({N},)")

    @property
    def n_rules(self) -> int:
        return self.A.shape[0]

    @property
    def n_states(self) -> int:
        return self.A.shape[1]

    @property
    def n_inputs(self) -> int:
        return self.B.shape[2]

    @property
    def n_outputs(self) -> int:
        return self.C.shape[0]

    @property
    def dims(self) -> tuple[int, int, int, int]:
        """``(N, M, P, R)``."""
        return self.n_states, self.n_inputs, self.n_outputs, self.n_rules

    @property
    def rules(self) -> list[Rule]:
        N = self.n_states
        out = []
        for r in range(self.n_rules):
            terms = [GaussianTerm(float(c), float(s))
                     for c, s in zip(self.centers[r], self.widths[r])]
            out.append(Rule(
                RuleAntecedent(tuple(terms[:N]), tuple(terms[N:])),
                RuleConsequent(self.A[r].copy(), self.B[r].copy()),
            ))
        return out

    @classmethod
    def from_rules(cls, rules: Sequence[Rule], C, x0=None) -> "TnfsModel":
        if len(rules) < 1:
            raise InvalidArgumentError("a model needs at least one rule")
        centers, widths, As, Bs = [], [], [], []
        for rule in rules:
            terms = rule.antecedent.state_terms + rule.antecedent.input_terms
            centers.append([t.center for t in terms])
            widths.append([t.width for t in terms])
            As.append(rule.consequent.A)
            Bs.append(rule.consequent.B)
        B = np.array(Bs, dtype=float)
        N = np.shape(As[0])[0]
        for rule in rules:
            if (len(rule.antecedent.state_terms) != N
                    or len(rule.antecedent.input_terms) != B.shape[2]):
                raise InvalidArgumentError("antecedent term counts disagree with consequent shapes")
        return cls(np.array(centers), np.array(widths), np.array(As, dtype=float), B,
                   np.array(C, dtype=float), x0)

    def copy(self) -> "TnfsModel":
        return TnfsModel(self.centers.copy(), self.widths.copy(), self.A.copy(),
                         self.B.copy(), self.C.copy(), self.x0.copy())


def membership(term: GaussianTerm, value: float) -> float:
    """Gaussian membership degree ``exp(-(v - c)^2 / (2 s^2))``."""
    if not math.isfinite(value):
        raise InvalidArgumentError(f"membership value must be finite, got {value!r}")
    if not (term.width >= WIDTH_FLOOR):
        raise InvalidArgumentError(f"width {term.width!r} is below the floor {WIDTH_FLOOR}")
    d = (value - term.center) / term.width
    return math.exp(-0.5 * d * d)


def _check_vector(v, length, name):
    arr = np.asarray(v, dtype=float)
    if arr.shape != (length,):
        raise InvalidArgumentError(f"{name} must have shape ({length},), got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise InvalidArgumentError(f"{name} contains non-finite entries")
    return arr


def firing_strengths(model: TnfsModel, x, u) -> np.ndarray:
    """Product of all state and input memberships, one value per rule."""
    x = _check_vector(x, model.n_states, "x")
    u = _check_vector(u, model.n_inputs, "u")
    z = np.concatenate([x, u])
    mu = np.exp(-0.5 * ((z - model.centers) / model.widths) ** 2)
    return np.prod(mu, axis=1)


def normalize_strengths(f) -> np.ndarray:
    """Divide firing strengths by their sum.

    When the sum drops below ``UNDERFLOW_EPS`` every rule gets weight ``1/R``.
    """
    f = np.asarray(f, dtype=float)
    if f.ndim != 1 or f.size == 0:
        raise InvalidArgumentError("firing strengths must be a non-empty vector")
    if not np.all(np.isfinite(f)):
        raise InvalidArgumentError("firing strengths must be finite")
    if np.any(f < 0):
        raise InvalidArgumentError("firing strengths must be non-negative")
    s = f.sum()
    if s < UNDERFLOW_EPS:
        return np.full(f.size, 1.0 / f.size)
    return f / s


def aggregate_parameters(model: TnfsModel, h) -> tuple[np.ndarray, np.ndarray]:
    """Blend rule consequents into one ``(A, B)`` pair using weights ``h``."""
    h = np.asarray(h, dtype=float)
    if h.shape != (model.n_rules,):
        raise InvalidArgumentError(f"h must have shape ({model.n_rules},), got {h.shape}")
    if abs(h.sum() - 1.0) > 1e-9:
        raise InvalidArgumentError(f"h must sum to 1, got {h.sum()!r}")
    return np.tensordot(h, model.A, axes=1), np.tensordot(h, model.B, axes=1)


def log_firing(model: TnfsModel, Z: np.ndarray) -> np.ndarray:
    """Log firing strengths for a batch ``Z`` of shape ``(S, N + M)``."""
    d = (Z[:, None, :] - model.centers[None]) / model.widths[None]
    return -0.5 * np.einsum("srd,srd->sr", d, d)


def normalized_weights(logf: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Normalized strengths from log firing strengths, batch-wise.

    Returns ``(h, underflow)`` where ``underflow`` marks rows that fell back to
    uniform weights because the strength sum dropped below ``UNDERFLOW_EPS``.
    """
    top = logf.max(axis=1, keepdims=True)
    w = np.exp(logf - top)
    total = w.sum(axis=1, keepdims=True)
    log_s = top[:, 0] + np.log(total[:, 0])
    underflow = log_s < _LOG_UNDERFLOW
    h = w / total
    if np.any(underflow):
        h[underflow] = 1.0 / logf.shape[1]
    return h, underflow


def step_batch(model: TnfsModel, X: np.ndarray, U: np.ndarray) -> np.ndarray:
    """One transition for ``S`` independent (state, input) rows."""
    logf = log_firing(model, np.concatenate([X, U], axis=1))
    h, _ = normalized_weights(logf)
    A = np.einsum("sr,rij->sij", h, model.A)
    B = np.einsum("sr,rij->sij", h, model.B)
    return np.einsum("sij,sj->si", A, X) + np.einsum("sij,sj->si", B, U)


def state_transition(model: TnfsModel, x, u) -> np.ndarray:
    x = _check_vector(x, model.n_states, "x")
    u = _check_vector(u, model.n_inputs, "u")
    return step_batch(model, x[None], u[None])[0]


def output_projection(model: TnfsModel, x) -> np.ndarray:
    x = _check_vector(x, model.n_states, "x")
    return model.C @ x


def rollout_batch(model: TnfsModel, U: np.ndarray, X0: np.ndarray | None = None):
    """Roll ``S`` sequences of equal length ``T`` in lockstep.

    ``U`` has shape ``(S, T, M)``; returns states ``(S, T, N)`` and outputs
    ``(S, T, P)``.
    """
    U = np.asarray(U, dtype=float)
    S, T, M = U.shape
    if M != model.n_inputs:
        raise InvalidArgumentError(f"expected {model.n_inputs} input channels, found {M}")
    if T < 1:
        raise InvalidArgumentError("input sequence must contain at least one step")
    X = np.tile(model.x0, (S, 1)) if X0 is None else np.array(X0, dtype=float)
    states = np.empty((S, T, model.n_states))
    for t in range(T):
        X = step_batch(model, X, U[:, t])
        states[:, t] = X
    return states, states @ model.C.T


def rollout(model: TnfsModel, inputs, x_init=None) -> tuple[np.ndarray, np.ndarray]:
    """Run the recurrence over ``inputs`` (``T x M``) from ``x_init``.

    ``x_init`` defaults to ``model.x0``.  Returns ``(states, outputs)`` with
    ``states[t]`` the state after consuming ``inputs[t]``.
    """
    U = np.asarray(inputs, dtype=float)
    if U.ndim != 2 or U.shape[0] == 0:
        raise InvalidArgumentError("inputs must be a non-empty T x M sequence")
    if not np.all(np.isfinite(U)):
        raise InvalidArgumentError("inputs contain non-finite entries")
    x = model.x0 if x_init is None else _check_vector(x_init, model.n_states, "x_init")
    states, outputs = rollout_batch(model, U[None], x[None])
    return states[0], outputs[0]
