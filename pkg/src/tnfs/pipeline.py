"""Glue between the plant, clustering, training and diagnosis modules.

The CLI and the end-to-end tests both build models through these helpers so
that a pipeline run from the command line matches one run in code.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .clustering import (ClusterConfig, best_cluster_count, fcm, rules_from_clusters,
                         scan_cluster_counts, teacher_forced_features)
from .diagnosis import classification_sequences
from .errors import InvalidArgumentError
from .model import TnfsModel
from .plant import Dataset, Trajectory
from .training import TrainingSequence


@dataclass
class InitResult:
    model: TnfsModel
    cluster_count: int
    validity_table: dict  # c -> Xie-Beni index, empty for a fixed count


def initialize(sequences: Sequence[TrainingSequence], n_states: int, n_outputs: int,
               config: ClusterConfig, c_range: tuple[int, int] | None = None,
               state_width_floor: float | None = None, seed: int = 0) -> InitResult:
    """Cluster teacher-forced ``[state proxy, input]`` rows into a rule base.

    With ``c_range`` the rule count is chosen by the validity index over that
    range; otherwise ``config.cluster_count`` is used as is.
    """
    if not sequences:
        raise InvalidArgumentError("no training sequences to initialize from")
    n_inputs = sequences[0].inputs.shape[1]
    feats = teacher_forced_features(sequences, n_states)
    table = {}
    if c_range is None:
        result = fcm(feats, config)
        c = config.cluster_count
    else:
        scan = scan_cluster_counts(feats, c_range[0], c_range[1], config)
        c = best_cluster_count(scan)
        result = scan[c][1]
        table = {k: v[0] for k, v in scan.items()}
    model = rules_from_clusters(result, feats, (n_states, n_inputs, n_outputs),
                                config.fuzzifier_m, seed=seed,
                                state_width_floor=state_width_floor)
    return InitResult(model, c, table)


def classifier_sequences(dataset: Dataset, split: str = "train",
                         final_only: bool = True) -> list[TrainingSequence]:
    s = dataset.split(split)
    return classification_sequences(s.features, s.onehot, len(dataset.channel_names), final_only)


def output_indices(channel_names: Sequence[str], outputs: Sequence[str] | None) -> list[int]:
    if outputs is None:
        return list(range(len(channel_names)))
    missing = [o for o in outputs if o not in channel_names]
    if missing:
        raise InvalidArgumentError(f"forecast outputs {missing} are not among channels {list(channel_names)}")
    return [list(channel_names).index(o) for o in outputs]


def normalized_channels(traj: Trajectory, names, mean, std) -> np.ndarray:
    missing = [n for n in names if n not in traj.channels]
    if missing:
        raise InvalidArgumentError(f"trajectory lacks channels {missing}")
    return (traj.matrix(names) - mean) / std


def forecast_sequences(trajectories: Sequence[Trajectory], names, outputs: Sequence[int],
                       mean, std) -> list[TrainingSequence]:
    """One-step-ahead sequences: inputs at ``t``, chosen channels at ``t + 1`` as targets."""
    out = []
    for traj in trajectories:
        Z = normalized_channels(traj, names, mean, std)
        if len(Z) < 2:
            raise InvalidArgumentError("a forecast trajectory needs at least two samples")
        out.append(TrainingSequence(Z[:-1], Z[1:, outputs]))
    return out
