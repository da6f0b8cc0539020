"""Command-line front end.

Every subcommand is one pipeline run.  Data comes either from a ``simulate``
output directory (``--data``) or is simulated in memory from the config, so
``init``, ``train`` and ``evaluate`` see identical datasets for one seed.
"""

from __future__ import annotations

import argparse
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import io as tio
from .diagnosis import classify, detect, evaluate, predict_horizon
from .errors import DivergenceError, InvalidArgumentError, NumericOverflowError, TnfsError
from .pipeline import (classifier_sequences, forecast_sequences, initialize,
                       normalized_channels, output_indices)
from .plant import build_dataset, default_class_names, simulate_scenario, window_samples
from .training import (analytic_gradients, finite_difference_gradients, random_model,
                       relative_errors, train, TrainingSequence)

log = logging.getLogger("tnfs")

EXIT_OK, EXIT_INVALID, EXIT_DIVERGED, EXIT_IO = 0, 1, 2, 3
GRADCHECK_TOLERANCE = 1e-4


def _config(args) -> tio.RunConfig:
    cfg = tio.RunConfig.load(args.config) if args.config else tio.RunConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    return cfg


def _out(args) -> Path:
    return Path(args.out)


def _load_data(cfg: tio.RunConfig, args):
    plant = cfg.load_plant()
    if getattr(args, "data", None):
        scenarios, trajectories = tio.load_trajectories(args.data)
    else:
        scenarios = cfg.build_scenarios(plant)
        trajectories = [simulate_scenario(plant, sc, i) for i, sc in enumerate(scenarios)]
    w = cfg.window
    ds = build_dataset(scenarios, plant, cfg.split,
                       default_class_names(cfg.load_catalog(plant)),
                       window_minutes=float(w["window_minutes"]),
                       stride_minutes=float(w["stride_minutes"]), channels=w.get("channels"),
                       trajectories=trajectories)
    return trajectories, ds


def _archive_path(args) -> Path:
    return Path(args.model) if args.model else _out(args) / "model.json"


def _train_sequences(cfg, trajectories, ds, arc=None, split="train"):
    if cfg.task == "classify":
        if arc is not None:
            _check_features(arc, ds.split(split).features.shape[1])
        return classifier_sequences(ds, split, cfg.final_step_only)
    outs = output_indices(ds.channel_names, cfg.forecast.get("outputs"))
    picked = [trajectories[i] for i in ds.scenario_splits[split]]
    return forecast_sequences(picked, ds.channel_names, outs, ds.channel_mean, ds.channel_std)


def _check_features(arc: tio.ModelArchive, n_features: int):
    expected = arc.points_per_window * arc.model.n_inputs
    if n_features != expected:
        raise InvalidArgumentError(
            f"geometry mismatch: archive expects {arc.points_per_window} points x "
            f"{arc.model.n_inputs} channels = {expected} features, data has {n_features}")


def cmd_simulate(cfg, args) -> int:
    plant = cfg.load_plant()
    scenarios = cfg.build_scenarios(plant)
    trajectories = [simulate_scenario(plant, sc, i) for i, sc in enumerate(scenarios)]
    tio.write_simulation(_out(args), scenarios, trajectories)
    print(f"scenarios={len(scenarios)}")
    print(f"directory={_out(args)}")
    return EXIT_OK


def cmd_init(cfg, args) -> int:
    trajectories, ds = _load_data(cfg, args)
    seqs = _train_sequences(cfg, trajectories, ds)
    if args.clusters is not None:
        c_range, count = None, args.clusters
    else:
        c_range, count = cfg.cluster_range(), None
    n_states = int(cfg.model["n_states"])
    if cfg.task == "classify":
        n_outputs, names = len(ds.class_names), ds.class_names
        feedback = {}
    else:
        outs = output_indices(ds.channel_names, cfg.forecast.get("outputs"))
        n_outputs, names = len(outs), [ds.channel_names[i] for i in outs]
        feedback = {k: i for k, i in enumerate(outs)}
    res = initialize(seqs, n_states, n_outputs, cfg.cluster_config(count), c_range,
                     cfg.cluster.get("state_width_floor"),
                     seed=tio.derive_seed(cfg.seed, "consequents") % (2 ** 32))
    for c, index in res.validity_table.items():
        print(f"validity.c{c}={index!r}")
    print(f"rules={res.cluster_count}")
    arc = tio.ModelArchive(res.model, list(names), list(ds.channel_names), ds.points_per_window,
                           ds.feature_mean, ds.feature_std, ds.channel_mean, ds.channel_std,
                           cfg.task, feedback,
                           {"seed": cfg.seed, "config_digest": cfg.digest(), "stage": "init"})
    path = _archive_path(args)
    tio.save_archive(arc, path)
    print(f"archive={path}")
    return EXIT_OK


def cmd_train(cfg, args) -> int:
    path = _archive_path(args)
    arc = tio.load_archive(path)
    trajectories, ds = _load_data(cfg, args)
    seqs = _train_sequences(cfg, trajectories, ds, arc if arc.task == "classify" else None)
    tc = cfg.train_config()
    if args.epochs is not None:
        tc.epochs = args.epochs
    t0 = time.perf_counter()
    try:
        model, history = train(arc.model, seqs, tc)
    finally:
        log.info("training took %.1f s", time.perf_counter() - t0)
    arc.model = model
    arc.provenance = {**arc.provenance, "seed": cfg.seed, "config_digest": cfg.digest(),
                      "stage": "train", "epochs": tc.epochs}
    tio.save_archive(arc, path)
    tio.atomic_write(_out(args) / "loss_history.csv", tio.format_loss_history(history))
    print(f"initial_mse={history[0].train_mse!r}")
    print(f"final_mse={history[-1].train_mse!r}")
    print(f"archive={path}")
    return EXIT_OK


def cmd_gradcheck(cfg, args) -> int:
    rng = np.random.default_rng(tio.derive_seed(cfg.seed, "gradcheck"))
    if args.model:
        arc = tio.load_archive(args.model)
        model = arc.model
        T = args.steps
        data = [TrainingSequence(rng.normal(size=(T, model.n_inputs)),
                                 rng.normal(size=(T, model.n_outputs)))]
    else:
        model = random_model(2, 1, 1, 3, rng)
        data = [TrainingSequence(rng.normal(size=(args.steps, 1)),
                                 rng.normal(size=(args.steps, 1)))]
    err = relative_errors(analytic_gradients(model, data),
                          finite_difference_gradients(model, data, args.fd_step))
    worst = float(err.max())
    print(f"parameters={err.size}")
    print(f"max_relative_error={worst!r}")
    ok = worst <= GRADCHECK_TOLERANCE
    print(f"status={'ok' if ok else 'FAIL'}")
    return EXIT_OK if ok else EXIT_INVALID


def _renormalize(arc, ds, features):
    raw = features * ds.feature_std + ds.feature_mean
    if arc.feature_mean is None:
        return features
    return (raw - arc.feature_mean) / arc.feature_std


def cmd_evaluate(cfg, args) -> int:
    arc = tio.load_archive(_archive_path(args))
    if arc.task != "classify":
        raise InvalidArgumentError("evaluate needs a classifier archive")
    _, ds = _load_data(cfg, args)
    split = ds.split(args.split)
    _check_features(arc, split.features.shape[1])
    split.features = _renormalize(arc, ds, split.features)
    report = evaluate(arc.model, split, arc.class_names, points_per_window=arc.points_per_window)
    text = report.to_text()
    tio.atomic_write(_out(args) / "evaluation.txt", text)
    sys.stdout.write(text)
    return EXIT_OK


def cmd_diagnose(cfg, args) -> int:
    arc = tio.load_archive(_archive_path(args))
    if arc.task != "classify":
        raise InvalidArgumentError("diagnose needs a classifier archive")
    traj = tio.read_trajectory(args.trajectory)
    missing = [c for c in arc.channel_names if c not in traj.channels]
    if missing:
        raise InvalidArgumentError(f"trajectory lacks channels {missing} expected by the archive")
    window = arc.points_per_window * traj.step
    samples = window_samples(traj, window, float(cfg.window["stride_minutes"]),
                             channels=arc.channel_names)
    lines = []
    for s in samples:
        feats = (s.features - arc.feature_mean) / arc.feature_std
        v = classify(arc.model, feats, arc.class_names, arc.points_per_window)
        flag = detect(v, arc.class_names.index("NORMAL") if "NORMAL" in arc.class_names else 0,
                      args.threshold)
        line = (f"window_start={s.window_start_minute!r} class={v.class_name} "
                f"confidence={v.confidence!r} detection={flag.value}")
        lines.append(line)
        print(line)
    tio.atomic_write(_out(args) / "verdicts.txt", "\n".join(lines) + "\n")
    return EXIT_OK


def cmd_predict(cfg, args) -> int:
    arc = tio.load_archive(_archive_path(args))
    if arc.task != "forecast":
        raise InvalidArgumentError("predict needs a forecast archive")
    traj = tio.read_trajectory(args.trajectory)
    step = traj.step
    Z = normalized_channels(traj, arc.channel_names, arc.channel_mean, arc.channel_std)
    outs = [arc.channel_names.index(n) for n in arc.class_names]
    o_mean, o_std = arc.channel_mean[outs], arc.channel_std[outs]
    q = args.horizon / step
    if abs(q - round(q)) > 1e-9:
        raise InvalidArgumentError(f"horizon {args.horizon} is not a multiple of step {step}")
    steps = int(round(q))
    stride = max(1, int(round((args.anchor_stride or step) / step)))
    header = ["anchor_minute", "minute", "ahead"]
    for n in arc.class_names:
        header += [f"pred_{n}", f"true_{n}"]
    rows = [",".join(header)]
    for a in range(args.min_history - 1, len(Z) - 1, stride):
        pred = predict_horizon(arc.model, Z[:a + 1], args.horizon, step, arc.feedback,
                               min_history=args.min_history)
        pred = pred * o_std + o_mean
        for k in range(steps):
            t = a + 1 + k
            cells = [repr(float(traj.timestamps[a])), repr(float(traj.timestamps[a]) + (k + 1) * step),
                     str(k + 1)]
            for j, c in enumerate(outs):
                truth = repr(float(traj.matrix([arc.channel_names[c]])[t, 0])) if t < len(Z) else ""
                cells += [repr(float(pred[k, j])), truth]
            rows.append(",".join(cells))
    tio.atomic_write(_out(args) / "predictions.csv", "\n".join(rows) + "\n")
    print(f"anchors={len(range(args.min_history - 1, len(Z) - 1, stride))}")
    print(f"rows_per_anchor={steps}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tnfs", description="Temporal neuro-fuzzy fault diagnosis")
    p.add_argument("--config", help="run configuration (JSON)")
    p.add_argument("--seed", type=int, help="master seed, overrides the config")
    p.add_argument("--out", default=".", help="output directory")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    sub.add_parser("simulate", help="write one CSV per scenario plus a manifest")

    def with_model(sp):
        sp.add_argument("--model", help="archive path (default <out>/model.json)")
        return sp

    def with_data(sp):
        sp.add_argument("--data", help="directory written by 'simulate'; simulated in memory if absent")
        return sp

    sp = with_data(with_model(sub.add_parser("init", help="cluster data into a fresh rule base")))
    sp.add_argument("--clusters", type=int, help="fixed rule count, skips the validity scan")

    sp = with_data(with_model(sub.add_parser("train", help="train an archive in place")))
    sp.add_argument("--epochs", type=int)

    sp = with_model(sub.add_parser("gradcheck", help="compare BPTT against finite differences"))
    sp.add_argument("--steps", type=int, default=5)
    sp.add_argument("--fd-step", type=float, default=1e-5)

    sp = with_data(with_model(sub.add_parser("evaluate", help="classify a dataset split")))
    sp.add_argument("--split", choices=("train", "validation", "test"), default="test")

    sp = with_model(sub.add_parser("predict", help="multi-step forecasts along a trajectory"))
    sp.add_argument("--trajectory", required=True)
    sp.add_argument("--horizon", type=float, required=True, help="minutes ahead")
    sp.add_argument("--anchor-stride", type=float, help="minutes between anchors (default: one step)")
    sp.add_argument("--min-history", type=int, default=1)

    sp = with_model(sub.add_parser("diagnose", help="stream verdicts for a trajectory"))
    sp.add_argument("--trajectory", required=True)
    sp.add_argument("--threshold", type=float, default=0.0,
                    help="minimum softmax confidence for an ABNORMAL flag")
    return p


COMMANDS = {"simulate": cmd_simulate, "init": cmd_init, "train": cmd_train,
            "gradcheck": cmd_gradcheck, "evaluate": cmd_evaluate, "predict": cmd_predict,
            "diagnose": cmd_diagnose}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _config(args)
        return COMMANDS[args.command](cfg, args)
    except (DivergenceError, NumericOverflowError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (TnfsError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
