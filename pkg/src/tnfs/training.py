"""Gradient training of a TNFS through its unrolled recurrence.

Every trainable scalar (term centers and widths, rule matrices ``A_r`` and
``B_r``, output matrix ``C``) is fitted by plain full-batch gradient descent
on the mean squared output error.  Gradients come from reverse accumulation
through all time steps; :func:`finite_difference_gradients` is the
independent check.
"""

from __future__ import annotations

import logging
from collections import defaultdict
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import DivergenceError, InvalidArgumentError, NumericOverflowError
from .model import (UNDERFLOW_EPS, WIDTH_FLOOR, TnfsModel, normalized_weights,
                    rollout_batch)

log = logging.getLogger(__name__)

PARAMETER_GROUPS = ("centers", "widths", "A", "B", "C")


@dataclass
class TrainingSequence:
    """Input/target pair; ``weights`` optionally scores steps unevenly.

    Without ``weights`` every step counts once.  A zero weight removes a step
    from the loss while it still drives the recurrence.
    """

    inputs: np.ndarray
    targets: np.ndarray
    x_init: np.ndarray | None = None
    weights: np.ndarray | None = None

    def __post_init__(self):
        self.inputs = np.atleast_2d(np.asarray(self.inputs, dtype=float))
        self.targets = np.atleast_2d(np.asarray(self.targets, dtype=float))
        if len(self.inputs) < 1 or len(self.inputs) != len(self.targets):
            raise InvalidArgumentError(
                f"inputs and targets need equal non-zero length, got "
                f"{len(self.inputs)} and {len(self.targets)}")
        if not (np.all(np.isfinite(self.inputs)) and np.all(np.isfinite(self.targets))):
            raise InvalidArgumentError("training sequence contains non-finite values")
        if self.x_init is not None:
            self.x_init = np.asarray(self.x_init, dtype=float)
        if self.weights is not None:
            self.weights = np.asarray(self.weights, dtype=float)
            if self.weights.shape != (len(self.inputs),) or np.any(self.weights < 0):
                raise InvalidArgumentError("weights must be one non-negative value per step")
            if not self.weights.sum() > 0:
                raise InvalidArgumentError("at least one step needs a positive weight")

    @property
    def step_weights(self) -> np.ndarray:
        return np.ones(len(self.inputs)) if self.weights is None else self.weights


@dataclass
class TrainConfig:
    learning_rate: float = 0.01
    epochs: int = 100
    grad_clip_norm: float | None = 10.0
    shuffle_seed: int = 0
    validation_fraction: float = 0.0
    train_output_matrix: bool = True

    def __post_init__(self):
        if not self.learning_rate >= 0:
            raise InvalidArgumentError("learning_rate must be non-negative")
        if int(self.epochs) < 1:
            raise InvalidArgumentError("epochs must be >= 1")
        if self.grad_clip_norm is not None and not self.grad_clip_norm > 0:
            raise InvalidArgumentError("grad_clip_norm must be positive or None")
        if not 0 <= self.validation_fraction < 1:
            raise InvalidArgumentError("validation_fraction must lie in [0, 1)")


@dataclass
class GradientSet:
    """Gradients laid out exactly like the parameters of a :class:`TnfsModel`."""

    centers: np.ndarray
    widths: np.ndarray
    A: np.ndarray
    B: np.ndarray
    C: np.ndarray

    @classmethod
    def zeros_like(cls, model: TnfsModel) -> "GradientSet":
        return cls(*(np.zeros_like(getattr(model, g)) for g in PARAMETER_GROUPS))

    def flat(self) -> np.ndarray:
        return np.concatenate([getattr(self, g).ravel() for g in PARAMETER_GROUPS])

    def norm(self) -> float:
        return float(np.sqrt(sum(np.sum(getattr(self, g) ** 2) for g in PARAMETER_GROUPS)))

    def scaled(self, k: float) -> "GradientSet":
        return GradientSet(*(getattr(self, g) * k for g in PARAMETER_GROUPS))


@dataclass
class LossReport:
    epoch: int
    train_mse: float
    validation_mse: float | None = None


def flatten_parameters(model: TnfsModel) -> np.ndarray:
    return np.concatenate([getattr(model, g).ravel() for g in PARAMETER_GROUPS])


def unflatten_parameters(model: TnfsModel, theta: np.ndarray) -> TnfsModel:
    parts, i = [], 0
    for g in PARAMETER_GROUPS:
        ref = getattr(model, g)
        parts.append(np.asarray(theta[i:i + ref.size]).reshape(ref.shape).copy())
        i += ref.size
    parts[1] = np.maximum(parts[1], WIDTH_FLOOR)
    return TnfsModel(*parts, x0=model.x0.copy())


def _batches(model: TnfsModel, data: Sequence[TrainingSequence]):
    """Group sequences of equal length into stacked arrays."""
    if len(data) == 0:
        raise InvalidArgumentError("training data is empty")
    N, M, P, _ = model.dims
    groups = defaultdict(list)
    for i, seq in enumerate(data):
        if seq.inputs.shape[1] != M or seq.targets.shape[1] != P:
            raise InvalidArgumentError(
                f"sequence {i}: expected inputs with {M} channels and targets with {P}, "
                f"found {seq.inputs.shape[1]} and {seq.targets.shape[1]}")
        if seq.x_init is not None and seq.x_init.shape != (N,):
            raise InvalidArgumentError(f"sequence {i}: x_init must have shape ({N},)")
        groups[len(seq.inputs)].append(i)
    out = []
    for T in sorted(groups):
        idx = groups[T]
        U = np.stack([data[i].inputs for i in idx])
        Y = np.stack([data[i].targets for i in idx])
        X0 = np.stack([model.x0 if data[i].x_init is None else data[i].x_init for i in idx])
        W = np.stack([data[i].step_weights for i in idx])
        out.append((np.array(idx), U, Y, X0, W))
    return out


def _check_finite(states, idx):
    bad = ~np.all(np.isfinite(states.reshape(len(idx), -1)), axis=1)
    if np.any(bad):
        i = int(idx[np.argmax(bad)])
        raise NumericOverflowError(f"rollout of sequence {i} produced non-finite values",
                                   sequence_index=i)


def mse_loss(model: TnfsModel, data: Sequence[TrainingSequence]) -> float:
    """Mean over all (sequence, step) pairs of ``||y - y_target||^2 / P``.

    Step weights turn the mean into a weighted mean.
    """
    total, count = 0.0, 0.0
    with np.errstate(over="ignore", invalid="ignore"):
        for idx, U, Y, X0, W in _batches(model, data):
            _, out = rollout_batch(model, U, X0)
            total += float(np.sum(W * np.sum((out - Y) ** 2, axis=2)))
            count += float(W.sum())
    return total / (count * model.n_outputs)


def loss_and_gradients(model: TnfsModel, data: Sequence[TrainingSequence]):
    """Loss and its exact gradient via backpropagation through time."""
    N, _, P, _ = model.dims
    batches = _batches(model, data)
    count = sum(float(W.sum()) for *_, W in batches)
    scale = 2.0 / (count * P)
    grads = GradientSet.zeros_like(model)
    A, B, C = model.A, model.B, model.C
    total = 0.0

    for idx, U, Y, X0, W in batches:
        S, T, _ = U.shape
        with np.errstate(over="ignore", invalid="ignore"):
            states, out = rollout_batch(model, U, X0)
        _check_finite(states, idx)
        err = (out - Y) * W[:, :, None]
        total += float(np.sum(err * (out - Y)))

        gX = np.zeros((S, N))
        for t in range(T - 1, -1, -1):
            Xp = X0 if t == 0 else states[:, t - 1]
            Ut = U[:, t]
            dY = scale * err[:, t]
            grads.C += dY.T @ states[:, t]
            gX = gX + dY @ C

            Z = np.concatenate([Xp, Ut], axis=1)
            dn = (Z[:, None, :] - model.centers[None]) / model.widths[None]
            h, underflow = normalized_weights(-0.5 * np.einsum("srd,srd->sr", dn, dn))
            Q = np.einsum("rij,sj->sri", A, Xp) + np.einsum("rij,sj->sri", B, Ut)

            hg = h[:, :, None] * gX[:, None, :]
            grads.A += np.einsum("sri,sj->rij", hg, Xp)
            grads.B += np.einsum("sri,sj->rij", hg, Ut)

            dh = np.einsum("si,sri->sr", gX, Q)
            dlogf = h * (dh - np.sum(h * dh, axis=1, keepdims=True))
            dlogf[underflow] = 0.0
            dn_s = dn / model.widths[None]
            grads.centers += np.einsum("sr,srd->rd", dlogf, dn_s)
            grads.widths += np.einsum("sr,srd->rd", dlogf, dn * dn_s)
            gZ = -np.einsum("sr,srd->sd", dlogf, dn_s)

            gX = np.einsum("sri,rij->sj", hg, A) + gZ[:, :N]

    for g in PARAMETER_GROUPS:
        arr = getattr(grads, g)
        if not np.all(np.isfinite(arr)):
            raise NumericOverflowError(f"non-finite gradient in parameter group {g!r}")
    return total / (count * P), grads


def analytic_gradients(model: TnfsModel, data: Sequence[TrainingSequence]) -> GradientSet:
    return loss_and_gradients(model, data)[1]


def reference_loss(params, data: Sequence[TrainingSequence], dtype=np.longdouble):
    """Loss from a plain per-rule forward pass in extended precision.

    ``params`` is a ``(centers, widths, A, B, C, x0)`` tuple.  This path shares
    no code with :func:`mse_loss` and uses the rule-sum form of the update.
    The result stays in ``dtype`` so that probe differences keep its precision.
    """
    centers, widths, A, B, C, x0 = (np.asarray(p, dtype=dtype) for p in params)
    widths = np.maximum(widths, dtype(WIDTH_FLOOR))
    R = A.shape[0]
    total, count = dtype(0), dtype(0)
    for seq in data:
        x = x0.copy() if seq.x_init is None else np.asarray(seq.x_init, dtype=dtype)
        for u, target, w in zip(np.asarray(seq.inputs, dtype=dtype),
                                np.asarray(seq.targets, dtype=dtype),
                                np.asarray(seq.step_weights, dtype=dtype)):
            z = np.concatenate([x, u])
            f = np.array([np.prod(np.exp(-(z - centers[r]) ** 2 / (2 * widths[r] ** 2)))
                          for r in range(R)])
            s = f.sum()
            h = f / s if s >= UNDERFLOW_EPS else np.full(R, dtype(1) / R)
            x = sum(h[r] * (A[r] @ x + B[r] @ u) for r in range(R))
            e = C @ x - target
            total += w * (e @ e)
            count += w
    return total / (count * C.shape[0])


def finite_difference_gradients(model: TnfsModel, data: Sequence[TrainingSequence],
                                step: float = 1e-5) -> GradientSet:
    """Central-difference estimate of every parameter derivative.

    Probes are evaluated with :func:`reference_loss`; width probes are clamped
    to ``WIDTH_FLOOR`` on both sides.
    """
    if not step > 0:
        raise InvalidArgumentError("finite-difference step must be positive")
    if len(data) == 0:
        raise InvalidArgumentError("training data is empty")
    _batches(model, data)
    ld = np.longdouble
    params = [getattr(model, g).astype(ld) for g in PARAMETER_GROUPS]
    x0 = model.x0.astype(ld)
    out = []
    for k, p in enumerate(params):
        g = np.empty(p.shape)
        flat = p.reshape(-1)
        for i in range(flat.size):
            saved = flat[i]
            flat[i] = saved + ld(step)
            up = reference_loss((*params, x0), data)
            flat[i] = saved - ld(step)
            if PARAMETER_GROUPS[k] == "widths":
                flat[i] = max(flat[i], ld(WIDTH_FLOOR))
            down = reference_loss((*params, x0), data)
            flat[i] = saved
            g.flat[i] = (up - down) / (2 * step)
        out.append(g)
    return GradientSet(*out)


def relative_errors(a: GradientSet, b: GradientSet) -> np.ndarray:
    """Per-parameter ``|a - b| / max(|a|, |b|, 1e-8)``."""
    fa, fb = a.flat(), b.flat()
    return np.abs(fa - fb) / np.maximum(np.maximum(np.abs(fa), np.abs(fb)), 1e-8)


def gradient_step(model: TnfsModel, grads: GradientSet, learning_rate: float) -> TnfsModel:
    return TnfsModel(
        model.centers - learning_rate * grads.centers,
        np.maximum(model.widths - learning_rate * grads.widths, WIDTH_FLOOR),
        model.A - learning_rate * grads.A,
        model.B - learning_rate * grads.B,
        model.C - learning_rate * grads.C,
        model.x0.copy(),
    )


def split_validation(data: Sequence[TrainingSequence], fraction: float, seed: int):
    data = list(data)
    if fraction <= 0 or len(data) < 2:
        return data, []
    order = np.random.default_rng(seed).permutation(len(data))
    n_val = min(max(1, int(round(fraction * len(data)))), len(data) - 1)
    return [data[i] for i in sorted(order[n_val:])], [data[i] for i in sorted(order[:n_val])]


def train(model: TnfsModel, data: Sequence[TrainingSequence], config: TrainConfig,
          progress=None) -> tuple[TnfsModel, list[LossReport]]:
    """Full-batch gradient descent for ``config.epochs`` steps.

    The returned history holds ``epochs + 1`` reports: epoch 0 is the loss of
    the starting model, epoch ``e`` the loss after ``e`` updates.
    """
    train_set, val_set = split_validation(data, config.validation_fraction, config.shuffle_seed)

    def evaluate(m, epoch):
        try:
            loss, grads = loss_and_gradients(m, train_set)
            val = mse_loss(m, val_set) if val_set else None
        except NumericOverflowError as exc:
            raise DivergenceError(f"training diverged at epoch {epoch}: {exc}",
                                  last_finite_epoch=epoch - 1) from exc
        if not np.isfinite(loss) or (val is not None and not np.isfinite(val)):
            raise DivergenceError(f"training diverged at epoch {epoch}",
                                  last_finite_epoch=epoch - 1)
        return loss, grads, LossReport(epoch, loss, val)

    loss, grads, report = evaluate(model, 0)
    history = [report]
    for epoch in range(1, config.epochs + 1):
        if not config.train_output_matrix:
            grads.C[...] = 0.0
        if config.grad_clip_norm is not None:
            norm = grads.norm()
            if norm > config.grad_clip_norm:
                grads = grads.scaled(config.grad_clip_norm / norm)
        model = gradient_step(model, grads, config.learning_rate)
        loss, grads, report = evaluate(model, epoch)
        history.append(report)
        if progress is not None:
            progress(report)
    log.debug("trained %d epochs, final train mse %.6g", config.epochs, history[-1].train_mse)
    return model, history


def default_consequents(n_states: int, n_inputs: int, n_outputs: int, n_rules: int, rng):
    """``A_r = 0.5 I + U(-0.01, 0.01)``; ``B_r`` and ``C`` uniform in ``[-0.1, 0.1]``."""
    A = 0.5 * np.eye(n_states)[None] + rng.uniform(-0.01, 0.01, (n_rules, n_states, n_states))
    B = rng.uniform(-0.1, 0.1, (n_rules, n_states, n_inputs))
    C = rng.uniform(-0.1, 0.1, (n_outputs, n_states))
    return A, B, C


def random_model(n_states, n_inputs, n_outputs, n_rules, rng, center_scale=1.0,
                 width_range=(0.5, 1.5), consequent_scale=None) -> TnfsModel:
    """Random model for tests, teachers and gradient checks.

    With ``consequent_scale`` unset, consequents follow :func:`default_consequents`;
    otherwise every consequent entry is drawn from ``U(-scale, scale)``.
    """
    D = n_states + n_inputs
    centers = rng.normal(0.0, center_scale, (n_rules, D))
    widths = rng.uniform(*width_range, (n_rules, D))
    if consequent_scale is None:
        A, B, C = default_consequents(n_states, n_inputs, n_outputs, n_rules, rng)
    else:
        s = consequent_scale
        A = rng.uniform(-s, s, (n_rules, n_states, n_states))
        B = rng.uniform(-s, s, (n_rules, n_states, n_inputs))
        C = rng.uniform(-s, s, (n_outputs, n_states))
    return TnfsModel(centers, widths, A, B, C)
