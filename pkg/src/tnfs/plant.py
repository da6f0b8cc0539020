"""Synthetic rotary-kiln sensor surrogate with injectable faults.

Each sensor channel is an AR(1) process around its nominal mean.  Faults add
a deterministic deviation (step or ramp) to the channels they affect.
Trajectories are cut into overlapping windows, labeled and z-scored into a
:class:`Dataset`.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .errors import InvalidArgumentError

log = logging.getLogger(__name__)

NORMAL = "NORMAL"
AR_COEFFICIENT = 0.9
MODES = ("incipient", "abrupt")


@dataclass(frozen=True)
class SensorSpec:
    name: str
    unit: str
    nominal_mean: float
    nominal_std: float
    noise_std: float

    def __post_init__(self):
        for v in (self.nominal_std, self.noise_std):
            if not (math.isfinite(v) and v >= 0):
                raise InvalidArgumentError(f"sensor {self.name}: std values must be finite and >= 0")


@dataclass(frozen=True)
class FaultSpec:
    fault_id: str
    mode: str = "abrupt"
    onset_minute: float | None = None
    magnitude: float = 0.0
    affected_channels: tuple[str, ...] = ()
    directions: tuple[float, ...] = ()

    def __post_init__(self):
        if self.fault_id == NORMAL:
            if self.affected_channels or self.onset_minute is not None:
                raise InvalidArgumentError("NORMAL carries no onset and no affected channels")
            return
        if self.mode not in MODES:
            raise InvalidArgumentError(f"fault mode must be one of {MODES}, got {self.mode!r}")
        if not self.affected_channels:
            raise InvalidArgumentError(f"fault {self.fault_id} affects no channels")
        if self.onset_minute is None or self.onset_minute < 0:
            raise InvalidArgumentError(f"fault {self.fault_id} needs an onset >= 0")
        if not self.directions:
            object.__setattr__(self, "directions", (1.0,) * len(self.affected_channels))
        if len(self.directions) != len(self.affected_channels):
            raise InvalidArgumentError("one direction per affected channel is required")

    @property
    def is_normal(self) -> bool:
        return self.fault_id == NORMAL


NORMAL_FAULT = FaultSpec(NORMAL)


@dataclass(frozen=True)
class FaultTemplate:
    """Catalog entry: which channels a fault moves and in which direction."""

    fault_id: str
    description: str
    modes: tuple[str, ...]
    channels: tuple[str, ...]
    directions: tuple[float, ...]

    def instantiate(self, mode: str, onset_minute: float, magnitude: float) -> FaultSpec:
        return FaultSpec(self.fault_id, mode, onset_minute, magnitude, self.channels,
                         self.directions)


@dataclass(frozen=True)
class Scenario:
    fault: FaultSpec = NORMAL_FAULT
    duration_minutes: float = 120.0
    step_minutes: float = 10.0
    seed: int = 0

    def __post_init__(self):
        if not (self.step_minutes > 0 and self.duration_minutes > 0):
            raise InvalidArgumentError("duration and step must be positive")
        n = self.duration_minutes / self.step_minutes
        if abs(n - round(n)) > 1e-9:
            raise InvalidArgumentError(
                f"duration {self.duration_minutes} is not a multiple of step {self.step_minutes}")
        onset = self.fault.onset_minute
        if onset is not None and onset > self.duration_minutes:
            raise InvalidArgumentError(f"onset {onset} lies past the scenario end")

    @property
    def n_steps(self) -> int:
        return int(round(self.duration_minutes / self.step_minutes))


@dataclass
class Trajectory:
    timestamps: np.ndarray
    channels: dict
    fault: FaultSpec = NORMAL_FAULT
    scenario_id: int = 0

    @property
    def channel_names(self) -> list[str]:
        return list(self.channels)

    @property
    def duration(self) -> float:
        return float(self.timestamps[-1] - self.timestamps[0])

    @property
    def step(self) -> float:
        return float(self.timestamps[1] - self.timestamps[0]) if len(self.timestamps) > 1 else 0.0

    def matrix(self, names: Sequence[str] | None = None) -> np.ndarray:
        """Values as a ``(time, channel)`` array."""
        names = self.channel_names if names is None else names
        return np.column_stack([self.channels[n] for n in names])


@dataclass
class WindowedSample:
    features: np.ndarray
    label: int
    window_start_minute: float
    scenario_id: int = 0
    onset_minute: float | None = None


DEFAULT_PLANT = (
    SensorSpec("CO", "%", 0.20, 0.05, 0.005),
    SensorSpec("Temp", "degC", 1100.0, 15.0, 1.5),
    SensorSpec("O2", "%", 2.5, 0.4, 0.04),
    SensorSpec("RPM", "rpm", 3.5, 0.1, 0.01),
    SensorSpec("Press", "mbar", -5.0, 0.5, 0.05),
    SensorSpec("BackEndTemp", "degC", 1050.0, 20.0, 2.0),
    SensorSpec("ClinkerFlow", "t/h", 65.0, 3.0, 0.3),
    SensorSpec("CoolerTemp", "degC", 180.0, 10.0, 1.0),
    SensorSpec("dBurner", "MW", 0.0, 0.5, 0.05),
    SensorSpec("dAir", "Nm3/s", 0.0, 0.3, 0.03),
    SensorSpec("dIDFan", "kW", 0.0, 5.0, 0.5),
)

_PROCESS_FAULTS = (
    ("F1", "Chute de la jupe", MODES),
    ("F2", "bouillage", MODES),
    ("F3", "No break", MODES),
    ("F4", "Transporteur a auget", MODES),
    ("F5", "Presence anneaux", ("incipient",)),
    ("F6", "Mauvaise homogeneisation", MODES),
    ("F7", "Chute de croutage", MODES),
    ("F8", "Atteinte des briques refractaires", ("incipient",)),
    ("F9", "bouillage", MODES),
    ("F10", "Moteur ventilateur tirage", MODES),
    ("F11", "Courroies ventilateur tirage", MODES),
)


def default_catalog(plant: Sequence[SensorSpec] = DEFAULT_PLANT) -> dict[str, FaultTemplate]:
    """Eleven process faults plus three single-channel sensor faults.

    Process fault ``Fk`` raises channel ``k-1`` and lowers channel
    ``k+3 (mod n)``; sensor faults bias one channel each.  Every signature is
    distinct so the classes are separable by construction.
    """
    names = [s.name for s in plant]
    n = len(names)
    catalog = {}
    for k, (fid, desc, modes) in enumerate(_PROCESS_FAULTS):
        a, b = names[k % n], names[(k + 4) % n]
        catalog[fid] = FaultTemplate(fid, desc, modes, (a, b), (1.0, -1.0))
    for j, (ch, sign) in enumerate(((1, 1.0), (3, -1.0), (4, 1.0))):
        fid = f"S{j + 1}"
        catalog[fid] = FaultTemplate(fid, f"sensor fault on {names[ch % n]}", MODES,
                                     (names[ch % n],), (sign,))
    return catalog


def default_class_names(catalog: Mapping[str, FaultTemplate] | None = None) -> list[str]:
    catalog = default_catalog() if catalog is None else catalog
    return [NORMAL, *catalog]


def fault_deviation(fault: FaultSpec, plant: Sequence[SensorSpec], t: float,
                    end_minute: float) -> np.ndarray:
    """Additive deviation per plant channel at minute ``t``.

    Abrupt faults step to ``magnitude * nominal_std`` at onset; incipient
    faults ramp linearly from zero at onset to that level at ``end_minute``.
    """
    dev = np.zeros(len(plant))
    if fault.is_normal or t < fault.onset_minute:
        return dev
    if fault.mode == "abrupt":
        level = 1.0
    else:
        span = end_minute - fault.onset_minute
        level = 1.0 if span <= 0 else (t - fault.onset_minute) / span
    index = {s.name: i for i, s in enumerate(plant)}
    for name, sign in zip(fault.affected_channels, fault.directions):
        if name not in index:
            raise InvalidArgumentError(f"fault {fault.fault_id} names unknown channel {name!r}")
        i = index[name]
        dev[i] = sign * level * fault.magnitude * plant[i].nominal_std
    return dev


def signal_to_noise(fault: FaultSpec, plant: Sequence[SensorSpec]) -> float:
    """Smallest ratio of full fault deviation to stationary AR(1) noise std."""
    if fault.is_normal:
        return math.inf
    by_name = {s.name: s for s in plant}
    ratios = []
    for name in fault.affected_channels:
        s = by_name[name]
        noise = s.noise_std / math.sqrt(1 - AR_COEFFICIENT ** 2)
        ratios.append(math.inf if noise == 0 else abs(fault.magnitude) * s.nominal_std / noise)
    return min(ratios)


def simulate_scenario(plant: Sequence[SensorSpec], scenario: Scenario,
                      scenario_id: int = 0) -> Trajectory:
    if len(plant) == 0:
        raise InvalidArgumentError("plant has no sensors")
    n = scenario.n_steps
    times = np.arange(n + 1) * scenario.step_minutes
    rng = np.random.default_rng(scenario.seed)
    noise = np.array([s.noise_std for s in plant])
    shocks = rng.standard_normal((n + 1, len(plant))) * noise
    ar = np.empty_like(shocks)
    ar[0] = shocks[0] / math.sqrt(1 - AR_COEFFICIENT ** 2)
    for k in range(1, n + 1):
        ar[k] = AR_COEFFICIENT * ar[k - 1] + shocks[k]
    mean = np.array([s.nominal_mean for s in plant])
    values = mean + ar
    for k, t in enumerate(times):
        values[k] += fault_deviation(scenario.fault, plant, t, scenario.duration_minutes)
    channels = {s.name: values[:, i] for i, s in enumerate(plant)}
    return Trajectory(times, channels, scenario.fault, scenario_id)


def window_count(duration: float, window: float, stride: float) -> int:
    return int(math.floor((duration - window) / stride + 1e-9)) + 1


def _is_multiple(a, b):
    q = a / b
    return abs(q - round(q)) < 1e-9


def window_samples(trajectory: Trajectory, window_minutes: float = 40.0,
                   stride_minutes: float = 10.0, class_index: Mapping[str, int] | None = None,
                   channels: Sequence[str] | None = None,
                   onset_labeling: str = "closed") -> list[WindowedSample]:
    """Cut a trajectory into labeled windows.

    A window starting at ``s`` covers ``(s, s + window]``: its points are the
    ``window / step`` samples at ``s + step, ..., s + window``.  Features are
    laid out time-major (all channels of the first point, then the next).

    With ``onset_labeling="closed"`` a window whose end touches the onset
    already carries the fault label; ``"open"`` requires the onset to lie
    strictly before the window end.
    """
    step = trajectory.step
    duration = trajectory.duration
    if not (stride_minutes > 0 and window_minutes > 0):
        raise InvalidArgumentError("window and stride must be positive")
    if window_minutes > duration:
        raise InvalidArgumentError(f"window {window_minutes} exceeds duration {duration}")
    if not (_is_multiple(window_minutes, step) and _is_multiple(stride_minutes, step)):
        raise InvalidArgumentError("window and stride must be multiples of the sampling step")
    if onset_labeling not in ("closed", "open"):
        raise InvalidArgumentError(f"unknown onset labeling rule {onset_labeling!r}")
    names = trajectory.channel_names if channels is None else list(channels)
    X = trajectory.matrix(names)
    t0 = trajectory.timestamps[0]
    points = int(round(window_minutes / step))
    fault = trajectory.fault
    class_index = {NORMAL: 0, fault.fault_id: 1} if class_index is None else class_index
    normal_label = class_index[NORMAL]
    fault_label = class_index[fault.fault_id]
    out = []
    for w in range(window_count(duration, window_minutes, stride_minutes)):
        start = t0 + w * stride_minutes
        first = int(round((start - t0) / step)) + 1
        feats = X[first:first + points].reshape(-1)
        end = start + window_minutes
        if fault.is_normal:
            exposed = False
        elif onset_labeling == "closed":
            exposed = end >= fault.onset_minute
        else:
            exposed = end > fault.onset_minute
        out.append(WindowedSample(feats.copy(), fault_label if exposed else normal_label,
                                  float(start), trajectory.scenario_id, fault.onset_minute))
    return out


@dataclass
class DatasetSplit:
    features: np.ndarray
    labels: np.ndarray
    onehot: np.ndarray
    window_starts: np.ndarray
    scenario_ids: np.ndarray
    onsets: np.ndarray

    def __len__(self):
        return len(self.labels)

    def samples(self) -> list[WindowedSample]:
        return [WindowedSample(self.features[i], int(self.labels[i]), float(self.window_starts[i]),
                               int(self.scenario_ids[i]),
                               None if np.isnan(self.onsets[i]) else float(self.onsets[i]))
                for i in range(len(self))]


@dataclass
class Dataset:
    train: DatasetSplit
    validation: DatasetSplit
    test: DatasetSplit
    feature_mean: np.ndarray
    feature_std: np.ndarray
    channel_mean: np.ndarray
    channel_std: np.ndarray
    class_names: list
    channel_names: list
    points_per_window: int
    scenario_splits: dict = field(default_factory=dict)
    warnings: list = field(default_factory=list)

    def split(self, name: str) -> DatasetSplit:
        return {"train": self.train, "validation": self.validation, "test": self.test}[name]

    def normalize(self, raw_features: np.ndarray) -> np.ndarray:
        return (np.asarray(raw_features) - self.feature_mean) / self.feature_std


def split_counts(n: int, fractions: Sequence[float]) -> tuple[int, int, int]:
    if len(fractions) != 3 or any(f < 0 for f in fractions) or abs(sum(fractions) - 1) > 1e-9:
        raise InvalidArgumentError(f"split fractions must be three non-negatives summing to 1, got {fractions}")
    n_train = int(round(fractions[0] * n))
    n_val = min(int(round(fractions[1] * n)), n - n_train)
    return n_train, n_val, n - n_train - n_val


def _stratified_order(classes: Sequence[str], class_names: Sequence[str]) -> list[int]:
    # round-robin over classes so that contiguous cuts stay class-balanced
    buckets = {c: [] for c in class_names}
    for i, c in enumerate(classes):
        buckets.setdefault(c, []).append(i)
    order, depth = [], 0
    while len(order) < len(classes):
        for c in buckets:
            if depth < len(buckets[c]):
                order.append(buckets[c][depth])
        depth += 1
    return order


def _stack(samples, n_classes, n_features):
    if not samples:
        return DatasetSplit(np.zeros((0, n_features)), np.zeros(0, int),
                            np.zeros((0, n_classes)), np.zeros(0), np.zeros(0, int), np.zeros(0))
    labels = np.array([s.label for s in samples])
    return DatasetSplit(
        np.stack([s.features for s in samples]),
        labels,
        np.eye(n_classes)[labels],
        np.array([s.window_start_minute for s in samples]),
        np.array([s.scenario_id for s in samples]),
        np.array([np.nan if s.onset_minute is None else s.onset_minute for s in samples]),
    )


def build_dataset(scenarios: Sequence[Scenario], plant: Sequence[SensorSpec] = DEFAULT_PLANT,
                  split: Sequence[float] = (1 / 3, 1 / 3, 1 / 3),
                  class_names: Sequence[str] | None = None,
                  class_map: Mapping[str, str] | None = None,
                  window_minutes: float = 40.0, stride_minutes: float = 10.0,
                  channels: Sequence[str] | None = None, stratify: bool = True,
                  trajectories: Sequence[Trajectory] | None = None) -> Dataset:
    """Simulate, window, split by scenario and z-score from the training split.

    ``class_map`` relabels fault ids (e.g. to collapse faults into a binary
    condition).  Pre-simulated ``trajectories`` may be passed to skip the
    simulation step; they must line up with ``scenarios``.
    """
    if len(scenarios) == 0:
        raise InvalidArgumentError("no scenarios given")
    class_names = default_class_names() if class_names is None else list(class_names)
    class_map = {} if class_map is None else dict(class_map)
    class_of = [class_map.get(sc.fault.fault_id, sc.fault.fault_id) for sc in scenarios]
    unknown = sorted(set(class_of) - set(class_names))
    if unknown:
        raise InvalidArgumentError(f"scenario classes {unknown} are not in the class list")
    warnings = []
    for c in class_names:
        if c not in class_of:
            msg = f"class {c} has no scenarios"
            warnings.append(msg)
            log.warning(msg)

    if trajectories is None:
        trajectories = [simulate_scenario(plant, sc, i) for i, sc in enumerate(scenarios)]
    names = [s.name for s in plant] if channels is None else list(channels)
    index = {c: i for i, c in enumerate(class_names)}
    per_scenario = []
    for i, traj in enumerate(trajectories):
        local = {NORMAL: index[class_map.get(NORMAL, NORMAL)],
                 traj.fault.fault_id: index[class_of[i]]}
        per_scenario.append(window_samples(traj, window_minutes, stride_minutes, local, names))

    order = _stratified_order(class_of, class_names) if stratify else list(range(len(scenarios)))
    n_train, n_val, _ = split_counts(len(scenarios), split)
    assignment = {
        "train": order[:n_train],
        "validation": order[n_train:n_train + n_val],
        "test": order[n_train + n_val:],
    }
    n_features = len(names) * int(round(window_minutes / trajectories[0].step))
    raw = {k: _stack([s for i in sorted(v) for s in per_scenario[i]], len(class_names), n_features)
           for k, v in assignment.items()}

    train_feats = raw["train"].features
    if len(train_feats) == 0:
        raise InvalidArgumentError("training split is empty")
    mean = train_feats.mean(axis=0)
    std = train_feats.std(axis=0)
    std[std == 0] = 1.0
    by_channel = train_feats.reshape(len(train_feats), -1, len(names)).reshape(-1, len(names))
    ch_mean = by_channel.mean(axis=0)
    ch_std = by_channel.std(axis=0)
    ch_std[ch_std == 0] = 1.0
    for split_ in raw.values():
        split_.features = (split_.features - mean) / std
    return Dataset(raw["train"], raw["validation"], raw["test"], mean, std, ch_mean, ch_std,
                   class_names, names, n_features // len(names),
                   {k: sorted(v) for k, v in assignment.items()}, warnings)


def make_scenarios(count: int, catalog: Mapping[str, FaultTemplate] | None = None,
                   mode: str = "catalog", onset_minute: float = 40.0, magnitude: float = 3.0,
                   duration_minutes: float = 120.0, step_minutes: float = 10.0,
                   seed: int = 0, include_normal: bool = True) -> list[Scenario]:
    """Cycle through the class list until ``count`` scenarios exist.

    ``mode="catalog"`` alternates through each fault's catalogued modes;
    ``"abrupt"`` or ``"incipient"`` forces one mode on every fault.
    """
    catalog = default_catalog() if catalog is None else catalog
    ids = ([NORMAL] if include_normal else []) + list(catalog)
    seeds = np.random.SeedSequence([seed, 0x5CE]).generate_state(count)
    out = []
    for i in range(count):
        fid = ids[i % len(ids)]
        if fid == NORMAL:
            fault = NORMAL_FAULT
        else:
            tpl = catalog[fid]
            m = tpl.modes[(i // len(ids)) % len(tpl.modes)] if mode == "catalog" else mode
            fault = tpl.instantiate(m, onset_minute, magnitude)
        out.append(Scenario(fault, duration_minutes, step_minutes, int(seeds[i])))
    return out


def load_plant(path) -> tuple[SensorSpec, ...]:
    doc = json.loads(Path(path).read_text())
    return tuple(SensorSpec(**s) for s in doc["sensors"])


def save_plant(plant: Sequence[SensorSpec], path) -> None:
    doc = {"sensors": [s.__dict__ for s in plant]}
    Path(path).write_text(json.dumps(doc, indent=2) + "\n")


def load_catalog(path) -> dict[str, FaultTemplate]:
    doc = json.loads(Path(path).read_text())
    out = {}
    for f in doc["faults"]:
        out[f["id"]] = FaultTemplate(f["id"], f.get("description", ""), tuple(f["modes"]),
                                     tuple(f["channels"]), tuple(f["directions"]))
    return out


def save_catalog(catalog: Mapping[str, FaultTemplate], path) -> None:
    doc = {"faults": [{"id": t.fault_id, "description": t.description, "modes": list(t.modes),
                       "channels": list(t.channels), "directions": list(t.directions)}
                      for t in catalog.values()]}
    Path(path).write_text(json.dumps(doc, indent=2) + "\n")
