"""Fault classification, detection and multi-step prediction with a trained TNFS."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .errors import InvalidArgumentError
from .model import TnfsModel, rollout_batch, step_batch
from .plant import DatasetSplit, WindowedSample
from .training import TrainingSequence


class Detection(str, enum.Enum):
    NORMAL = "NORMAL"
    ABNORMAL = "ABNORMAL"


@dataclass
class DiagnosisVerdict:
    class_index: int
    class_name: str
    score_vector: np.ndarray
    confidence: float


def softmax(scores: np.ndarray) -> np.ndarray:
    z = np.exp(scores - np.max(scores, axis=-1, keepdims=True))
    return z / z.sum(axis=-1, keepdims=True)


def window_inputs(features: np.ndarray, n_inputs: int) -> np.ndarray:
    """Reshape time-major flat window features to ``(..., points, channels)``."""
    features = np.asarray(features, dtype=float)
    F = features.shape[-1]
    if F % n_inputs:
        raise InvalidArgumentError(
            f"window of {F} features does not split into {n_inputs} channels per point")
    return features.reshape(*features.shape[:-1], F // n_inputs, n_inputs)


def class_scores(model: TnfsModel, features: np.ndarray, points_per_window: int | None = None):
    """Final-step outputs for a batch of flat windows, shape ``(n, P)``.

    Each window is rolled out on its own from ``model.x0``.
    """
    features = np.atleast_2d(np.asarray(features, dtype=float))
    if points_per_window is not None and features.shape[1] != points_per_window * model.n_inputs:
        raise InvalidArgumentError(
            f"expected {points_per_window} x {model.n_inputs} = "
            f"{points_per_window * model.n_inputs} features, found {features.shape[1]}")
    U = window_inputs(features, model.n_inputs)
    _, out = rollout_batch(model, U)
    return out[:, -1]


def verdict_from_scores(scores: np.ndarray, class_names: Sequence[str] | None = None) -> DiagnosisVerdict:
    scores = np.asarray(scores, dtype=float)
    k = int(np.argmax(scores))  # first maximum wins ties
    name = class_names[k] if class_names is not None else str(k)
    return DiagnosisVerdict(k, name, scores, float(softmax(scores)[k]))


def classify(model: TnfsModel, sample: WindowedSample | np.ndarray,
             class_names: Sequence[str] | None = None,
             points_per_window: int | None = None) -> DiagnosisVerdict:
    features = sample.features if isinstance(sample, WindowedSample) else sample
    scores = class_scores(model, np.asarray(features)[None], points_per_window)[0]
    return verdict_from_scores(scores, class_names)


def detect(verdict: DiagnosisVerdict, normal_class: int = 0, threshold: float = 0.5) -> Detection:
    if not 0 <= threshold <= 1:
        raise InvalidArgumentError("threshold must lie in [0, 1]")
    if verdict.class_index != normal_class and verdict.confidence >= threshold:
        return Detection.ABNORMAL
    return Detection.NORMAL


def classification_sequences(features: np.ndarray, onehot: np.ndarray, n_inputs: int,
                             final_only: bool = True) -> list[TrainingSequence]:
    """Turn windows into training sequences targeting the one-hot class.

    With ``final_only`` only the last step of each window enters the loss,
    matching how :func:`classify` reads the verdict.
    """
    U = window_inputs(features, n_inputs)
    T = U.shape[1]
    weights = None
    if final_only:
        weights = np.zeros(T)
        weights[-1] = 1.0
    return [TrainingSequence(u, np.tile(y, (T, 1)), weights=weights)
            for u, y in zip(U, np.asarray(onehot, dtype=float))]


@dataclass
class ForecastState:
    """Where a recursive forecast left off, so that it can be continued."""

    state: np.ndarray
    last_input: np.ndarray
    last_output: np.ndarray


def _feedback_input(u, y, feedback):
    u = u.copy()
    for out_idx, in_idx in feedback.items():
        u[in_idx] = y[out_idx]
    return u


def forecast(model: TnfsModel, start: ForecastState, steps: int,
             feedback: Mapping[int, int] | None = None, future_inputs=None):
    """Recursively roll ``steps`` transitions past ``start``.

    Inputs for each future step are the previous input with the ``feedback``
    channels (``output index -> input index``) overwritten by the latest
    prediction; exogenous channels come from ``future_inputs`` when given and
    are otherwise held at their last value.
    """
    feedback = {} if feedback is None else dict(feedback)
    x, u, y = start.state.copy(), start.last_input.copy(), start.last_output.copy()
    outputs = np.empty((steps, model.n_outputs))
    for k in range(steps):
        if future_inputs is not None:
            u = np.array(future_inputs[k], dtype=float)
        u = _feedback_input(u, y, feedback)
        x = step_batch(model, x[None], u[None])[0]
        y = model.C @ x
        outputs[k] = y
    return outputs, ForecastState(x, u, y)


def warm_start(model: TnfsModel, history, x_init=None) -> ForecastState:
    """Roll the model through ``history`` (``T x M``) to set the context state."""
    H = np.asarray(history, dtype=float)
    if H.ndim != 2 or len(H) < 1:
        raise InvalidArgumentError("history must hold at least one input vector")
    if H.shape[1] != model.n_inputs:
        raise InvalidArgumentError(f"history has {H.shape[1]} channels, model expects {model.n_inputs}")
    x0 = model.x0 if x_init is None else np.asarray(x_init, dtype=float)
    states, out = rollout_batch(model, H[None], x0[None])
    return ForecastState(states[0, -1], H[-1], out[0, -1])


def predict_horizon(model: TnfsModel, history, horizon_minutes: float, step_minutes: float,
                    feedback: Mapping[int, int] | None = None, future_inputs=None,
                    min_history: int = 1) -> np.ndarray:
    """Predicted outputs for the ``horizon / step`` steps following ``history``.

    The output after consuming the last history input is already one step
    ahead, so it is the first row; the remaining rows come from
    :func:`forecast`.  ``min_history`` is the number of history steps needed
    to settle the context state.
    """
    if not step_minutes > 0 or horizon_minutes < 0:
        raise InvalidArgumentError("step must be positive and horizon non-negative")
    q = horizon_minutes / step_minutes
    if abs(q - round(q)) > 1e-9:
        raise InvalidArgumentError(f"horizon {horizon_minutes} is not a multiple of step {step_minutes}")
    H = np.asarray(history, dtype=float)
    if H.ndim != 2 or len(H) < max(1, min_history):
        raise InvalidArgumentError(f"need at least {max(1, min_history)} history steps")
    steps = int(round(q))
    if steps == 0:
        return np.empty((0, model.n_outputs))
    start = warm_start(model, H)
    rest = forecast(model, start, steps - 1, feedback, future_inputs)[0]
    return np.vstack([start.last_output[None], rest])


@dataclass
class EvaluationReport:
    confusion_matrix: np.ndarray
    accuracy: float
    recall: np.ndarray
    mean_detection_delay_minutes: float | None
    class_names: list
    detected_scenarios: int = 0
    missed_scenarios: int = 0

    def to_text(self) -> str:
        lines = [
            f"samples={int(self.confusion_matrix.sum())}",
            f"accuracy={self.accuracy!r}",
            "mean_detection_delay_minutes="
            + ("NA" if self.mean_detection_delay_minutes is None
               else repr(self.mean_detection_delay_minutes)),
            f"detected_scenarios={self.detected_scenarios}",
            f"missed_scenarios={self.missed_scenarios}",
        ]
        for name, r in zip(self.class_names, self.recall):
            lines.append(f"recall.{name}=" + ("NA" if math.isnan(r) else repr(float(r))))
        for name, row in zip(self.class_names, self.confusion_matrix):
            lines.append(f"confusion.{name}=" + ",".join(str(int(v)) for v in row))
        return "\n".join(lines) + "\n"


def detection_delays(predicted: np.ndarray, split: DatasetSplit, normal_class: int = 0):
    """Per faulty scenario, minutes from onset to the first correctly classified window.

    Windows that begin before the onset count as zero delay.  Returns
    ``(delays, missed)`` where ``missed`` counts scenarios never flagged.
    """
    delays, missed = [], 0
    for sid in np.unique(split.scenario_ids):
        rows = np.flatnonzero((split.scenario_ids == sid) & (split.labels != normal_class))
        if len(rows) == 0 or np.isnan(split.onsets[rows[0]]):
            continue
        rows = rows[np.argsort(split.window_starts[rows], kind="stable")]
        hits = rows[predicted[rows] == split.labels[rows]]
        if len(hits) == 0:
            missed += 1
            continue
        delays.append(max(0.0, float(split.window_starts[hits[0]] - split.onsets[hits[0]])))
    return delays, missed


def confusion_report(true: np.ndarray, predicted: np.ndarray, class_names: Sequence[str],
                     delays=None, missed: int = 0) -> EvaluationReport:
    K = len(class_names)
    cm = np.zeros((K, K), dtype=int)
    np.add.at(cm, (np.asarray(true, int), np.asarray(predicted, int)), 1)
    total = cm.sum()
    support = cm.sum(axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        recall = np.where(support > 0, np.diag(cm) / np.maximum(support, 1), np.nan)
    mean_delay = float(np.mean(delays)) if delays else None
    return EvaluationReport(cm, float(np.trace(cm) / total) if total else float("nan"), recall,
                            mean_delay, list(class_names), len(delays or []), missed)


def evaluate(model: TnfsModel, split: DatasetSplit, class_names: Sequence[str],
             normal_class: int = 0, points_per_window: int | None = None) -> EvaluationReport:
    if len(split) == 0:
        raise InvalidArgumentError("cannot evaluate an empty split")
    predicted = np.argmax(class_scores(model, split.features, points_per_window), axis=1)
    if np.all(np.isnan(split.onsets)):
        delays, missed = None, 0
    else:
        delays, missed = detection_delays(predicted, split, normal_class)
    return confusion_report(split.labels, predicted, class_names, delays, missed)
