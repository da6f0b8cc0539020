"""File formats: model archives, trajectory CSVs, manifests and run configs.

Everything is plain text.  Archives and configs are JSON; floats are written
with ``repr`` (shortest round-trip form) so save/load is exact.  Trajectory
CSVs print 17 significant digits.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import os
import tempfile
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from .clustering import ClusterConfig
from .errors import ArchiveVersionError, InvalidArgumentError
from .model import TnfsModel
from .plant import (DEFAULT_PLANT, NORMAL, NORMAL_FAULT, FaultSpec, Scenario, Trajectory,
                    default_catalog, load_catalog, load_plant, make_scenarios)
from .training import TrainConfig

FORMAT_VERSION = 1


def atomic_write(path, text: str) -> None:
    """Write ``text`` to a temp file beside ``path`` and rename it into place."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def derive_seed(master: int, label: str) -> int:
    """Stable 63-bit seed for one pipeline stage."""
    digest = hashlib.sha256(f"{int(master)}:{label}".encode()).digest()
    return int.from_bytes(digest[:8], "big") >> 1


def config_digest(doc: Any) -> str:
    return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()[:16]


def _matrix(a) -> dict:
    a = np.asarray(a, dtype=float)
    return {"shape": list(a.shape), "data": [float(v) for v in a.ravel()]}


def _unmatrix(doc) -> np.ndarray:
    shape = tuple(doc["shape"])
    data = np.array(doc["data"], dtype=float)
    if data.size != int(np.prod(shape)):
        raise InvalidArgumentError(f"matrix data of length {data.size} does not fit shape {shape}")
    return data.reshape(shape)


@dataclass
class ModelArchive:
    model: TnfsModel
    class_names: list = field(default_factory=list)
    channel_names: list = field(default_factory=list)
    points_per_window: int = 1
    feature_mean: np.ndarray | None = None
    feature_std: np.ndarray | None = None
    channel_mean: np.ndarray | None = None
    channel_std: np.ndarray | None = None
    task: str = "classify"
    feedback: dict = field(default_factory=dict)
    provenance: dict = field(default_factory=dict)

    def to_json(self) -> str:
        m = self.model
        N, M, P, R = m.dims
        rules = []
        for r in range(R):
            rules.append({
                "state_terms": [{"center": float(c), "width": float(s)}
                                for c, s in zip(m.centers[r, :N], m.widths[r, :N])],
                "input_terms": [{"center": float(c), "width": float(s)}
                                for c, s in zip(m.centers[r, N:], m.widths[r, N:])],
                "A": _matrix(m.A[r]),
                "B": _matrix(m.B[r]),
            })
        norm = {}
        for key in ("feature_mean", "feature_std", "channel_mean", "channel_std"):
            v = getattr(self, key)
            norm[key] = None if v is None else [float(x) for x in v]
        doc = {
            "format_version": FORMAT_VERSION,
            "dimensions": {"N": N, "M": M, "P": P, "R": R},
            "rules": rules,
            "C": _matrix(m.C),
            "x0": [float(v) for v in m.x0],
            "normalization": norm,
            "class_names": list(self.class_names),
            "channel_names": list(self.channel_names),
            "points_per_window": int(self.points_per_window),
            "task": self.task,
            "feedback": {str(k): int(v) for k, v in self.feedback.items()},
            "provenance": self.provenance,
        }
        return json.dumps(doc, indent=1) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "ModelArchive":
        doc = json.loads(text)
        version = doc.get("format_version")
        if version != FORMAT_VERSION:
            raise ArchiveVersionError(
                f"archive format version {version!r} is not supported (expected {FORMAT_VERSION})")
        dims = doc["dimensions"]
        rules = doc["rules"]
        if len(rules) != dims["R"]:
            raise InvalidArgumentError(f"archive declares R={dims['R']} but holds {len(rules)} rules")
        centers = [[t["center"] for t in r["state_terms"] + r["input_terms"]] for r in rules]
        widths = [[t["width"] for t in r["state_terms"] + r["input_terms"]] for r in rules]
        model = TnfsModel(np.array(centers), np.array(widths),
                          np.stack([_unmatrix(r["A"]) for r in rules]),
                          np.stack([_unmatrix(r["B"]) for r in rules]),
                          _unmatrix(doc["C"]), np.array(doc["x0"], dtype=float))
        if model.dims != (dims["N"], dims["M"], dims["P"], dims["R"]):
            raise InvalidArgumentError(f"archive dimensions {dims} disagree with its matrices")
        norm = {k: None if v is None else np.array(v, dtype=float)
                for k, v in doc.get("normalization", {}).items()}
        return cls(model, doc.get("class_names", []), doc.get("channel_names", []),
                   doc.get("points_per_window", 1), norm.get("feature_mean"),
                   norm.get("feature_std"), norm.get("channel_mean"), norm.get("channel_std"),
                   doc.get("task", "classify"),
                   {int(k): int(v) for k, v in doc.get("feedback", {}).items()},
                   doc.get("provenance", {}))


def save_archive(archive: ModelArchive, path) -> None:
    atomic_write(path, archive.to_json())


def load_archive(path) -> ModelArchive:
    return ModelArchive.from_json(Path(path).read_text())


def trajectory_to_csv(traj: Trajectory) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    names = traj.channel_names
    w.writerow(["minute", *names])
    X = traj.matrix(names)
    for t, row in zip(traj.timestamps, X):
        w.writerow([format(float(t), ".17g"), *(format(float(v), ".17g") for v in row)])
    return buf.getvalue()


def write_trajectory(traj: Trajectory, path) -> None:
    atomic_write(path, trajectory_to_csv(traj))


def read_trajectory(path, fault: FaultSpec = NORMAL_FAULT, scenario_id: int = 0) -> Trajectory:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0][0] != "minute":
        raise InvalidArgumentError(f"{path}: expected a header starting with 'minute'")
    names = rows[0][1:]
    data = np.array([[float(v) for v in r] for r in rows[1:] if r], dtype=float)
    if data.ndim != 2 or data.shape[1] != len(names) + 1:
        raise InvalidArgumentError(f"{path}: ragged rows")
    return Trajectory(data[:, 0], {n: data[:, i + 1] for i, n in enumerate(names)}, fault,
                      scenario_id)


def _kv_line(pairs: dict) -> str:
    return " ".join(f"{k}={v}" for k, v in pairs.items())


def _parse_kv_line(line: str) -> dict:
    out = {}
    for tok in line.split():
        k, _, v = tok.partition("=")
        out[k] = v
    return out


def manifest_line(filename: str, scenario: Scenario) -> str:
    f = scenario.fault
    pairs = {"file": filename, "fault_id": f.fault_id, "seed": scenario.seed,
             "duration_minutes": repr(float(scenario.duration_minutes)),
             "step_minutes": repr(float(scenario.step_minutes))}
    if not f.is_normal:
        pairs.update({"mode": f.mode, "onset_minute": repr(float(f.onset_minute)),
                      "magnitude": repr(float(f.magnitude)),
                      "channels": ";".join(f.affected_channels),
                      "directions": ";".join(repr(float(d)) for d in f.directions)})
    return _kv_line(pairs)


def parse_manifest(path) -> list[tuple[str, Scenario]]:
    out = []
    for line in Path(path).read_text().splitlines():
        if not line.strip() or line.startswith("#"):
            continue
        kv = _parse_kv_line(line)
        if kv["fault_id"] == NORMAL:
            fault = NORMAL_FAULT
        else:
            fault = FaultSpec(kv["fault_id"], kv["mode"], float(kv["onset_minute"]),
                              float(kv["magnitude"]), tuple(kv["channels"].split(";")),
                              tuple(float(d) for d in kv["directions"].split(";")))
        out.append((kv["file"], Scenario(fault, float(kv["duration_minutes"]),
                                         float(kv["step_minutes"]), int(kv["seed"]))))
    return out


def format_loss_history(history) -> str:
    lines = ["epoch,train_mse,validation_mse"]
    for r in history:
        val = "" if r.validation_mse is None else repr(r.validation_mse)
        lines.append(f"{r.epoch},{r.train_mse!r},{val}")
    return "\n".join(lines) + "\n"


@dataclass
class RunConfig:
    """Everything a CLI pipeline needs, loaded from one JSON document.

    ``plant`` and ``catalog`` are optional paths; the built-in surrogate and
    fault catalog are used when they are absent.
    """

    plant: str | None = None
    catalog: str | None = None
    scenarios: dict = field(default_factory=lambda: {
        "count": 38, "mode": "catalog", "onset_minute": 40.0, "magnitude": 3.0,
        "duration_minutes": 120.0, "step_minutes": 10.0})
    window: dict = field(default_factory=lambda: {
        "window_minutes": 40.0, "stride_minutes": 10.0, "channels": None})
    cluster: dict = field(default_factory=lambda: {
        "cluster_count": 4, "c_min": None, "c_max": None, "fuzzifier_m": 2.0,
        "tolerance": 1e-6, "max_iterations": 300, "state_width_floor": 1.0})
    train: dict = field(default_factory=lambda: {
        "learning_rate": 1.0, "epochs": 500, "grad_clip_norm": 10.0,
        "validation_fraction": 0.0, "train_output_matrix": True})
    model: dict = field(default_factory=lambda: {"n_states": 15})
    split: list = field(default_factory=lambda: [1 / 3, 1 / 3, 1 / 3])
    task: str = "classify"
    final_step_only: bool = True
    forecast: dict = field(default_factory=lambda: {"outputs": None})
    seed: int = 0
    base_dir: str = "."

    @classmethod
    def load(cls, path) -> "RunConfig":
        path = Path(path)
        doc = json.loads(path.read_text())
        cfg = cls()
        for key, value in doc.items():
            if not hasattr(cfg, key):
                raise InvalidArgumentError(f"{path}: unknown config key {key!r}")
            current = getattr(cfg, key)
            if isinstance(current, dict) and isinstance(value, dict):
                unknown = set(value) - set(current)
                if unknown:
                    raise InvalidArgumentError(f"{path}: unknown keys {sorted(unknown)} in {key!r}")
                current.update(value)
            else:
                setattr(cfg, key, value)
        cfg.base_dir = str(path.parent)
        cfg.validate()
        return cfg

    def _resolve(self, p):
        p = Path(p)
        return p if p.is_absolute() else Path(self.base_dir) / p

    def validate(self) -> None:
        for key in ("plant", "catalog"):
            p = getattr(self, key)
            if p is not None and not self._resolve(p).exists():
                raise InvalidArgumentError(f"{key} file {p} does not exist")
        self.train_config()
        self.cluster_config()
        if len(self.split) != 3 or abs(sum(self.split) - 1) > 1e-9:
            raise InvalidArgumentError("split must be three fractions summing to 1")
        if self.task not in ("classify", "forecast"):
            raise InvalidArgumentError(f"task must be 'classify' or 'forecast', got {self.task!r}")
        if int(self.model.get("n_states", 0)) < 1:
            raise InvalidArgumentError("model.n_states must be >= 1")
        c = self.cluster
        if (c.get("c_min") is None) != (c.get("c_max") is None):
            raise InvalidArgumentError("set both cluster.c_min and cluster.c_max, or neither")

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("base_dir")
        return d

    def digest(self) -> str:
        return config_digest(self.to_dict())

    def load_plant(self):
        return DEFAULT_PLANT if self.plant is None else load_plant(self._resolve(self.plant))

    def load_catalog(self, plant):
        return default_catalog(plant) if self.catalog is None else load_catalog(self._resolve(self.catalog))

    def build_scenarios(self, plant) -> list[Scenario]:
        s = dict(self.scenarios)
        if "list" in s:
            raise InvalidArgumentError("explicit scenario lists are read from a manifest")
        return make_scenarios(int(s.get("count", 38)), self.load_catalog(plant),
                              mode=s.get("mode", "catalog"),
                              onset_minute=float(s.get("onset_minute", 40.0)),
                              magnitude=float(s.get("magnitude", 3.0)),
                              duration_minutes=float(s.get("duration_minutes", 120.0)),
                              step_minutes=float(s.get("step_minutes", 10.0)),
                              seed=derive_seed(self.seed, "scenarios"))

    def train_config(self) -> TrainConfig:
        t = self.train
        return TrainConfig(float(t["learning_rate"]), int(t["epochs"]),
                           None if t.get("grad_clip_norm") is None else float(t["grad_clip_norm"]),
                           derive_seed(self.seed, "train") % (2 ** 32),
                           float(t.get("validation_fraction", 0.0)),
                           bool(t.get("train_output_matrix", True)))

    def cluster_range(self) -> tuple[int, int] | None:
        c = self.cluster
        return None if c.get("c_min") is None else (int(c["c_min"]), int(c["c_max"]))

    def cluster_config(self, count: int | None = None) -> ClusterConfig:
        c = self.cluster
        return ClusterConfig(int(count if count is not None else c.get("cluster_count") or 4),
                             float(c["fuzzifier_m"]), float(c["tolerance"]),
                             int(c["max_iterations"]), derive_seed(self.seed, "cluster") % (2 ** 32))


def scenario_filename(i: int) -> str:
    return f"scenario_{i:03d}.csv"


def load_trajectories(directory) -> tuple[list[Scenario], list[Trajectory]]:
    """Read every trajectory listed in ``directory/manifest.txt``."""
    directory = Path(directory)
    manifest = directory / "manifest.txt"
    if not manifest.exists():
        raise FileNotFoundError(f"{manifest} not found")
    scenarios, trajectories = [], []
    for i, (name, sc) in enumerate(parse_manifest(manifest)):
        scenarios.append(sc)
        trajectories.append(read_trajectory(directory / name, sc.fault, i))
    return scenarios, trajectories


def write_simulation(directory, scenarios: Sequence[Scenario], trajectories: Sequence[Trajectory]):
    directory = Path(directory)
    lines = []
    for i, (sc, traj) in enumerate(zip(scenarios, trajectories)):
        name = scenario_filename(i)
        write_trajectory(traj, directory / name)
        lines.append(manifest_line(name, sc))
    atomic_write(directory / "manifest.txt", "\n".join(lines) + "\n")
