"""Experiment orchestration CLI.

Subcommands: train, certify, attack, falsify, ablate-ce, report. Runs are
driven by a JSON config file (flags only carry paths and overrides) and
every command writes a manifest that echoes the fully resolved config, so
re-running from a manifest reproduces the outputs bit for bit. The
CLUSTR_SEED environment variable overrides the config seed.

Train config schema (JSON object; unknown keys are rejected):

    {
      "pipeline": "nominal" | "magnet" | "clustr" | "clustr_qtrades",   (required)
      "seed": 0,
      "out_dir": "run",
      "dataset": {"generator": "moons" | "circles", "n": 1000,
                  "noise_std": 0.1, "gap": 0.5, "test_fraction": 0.25},
      "arch": {"input_dim": 2, "hidden_dims": [20, 20], "feature_dim": 20},
      "train": { any TrainConfig field except pipeline/rng_seed }
    }

Exit codes: 0 success, 2 config error, 3 certificate-soundness violation,
1 anything else.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from clustr import __version__
from clustr.attacks import AttackConfig, epsilon_sweep, evaluate_robust_accuracy
from clustr.certify import attack_falsification, certified_curve
from clustr.clustering import refresh_clusters
from clustr.datasets import LabeledDataset, gen_circles, gen_moons, load_csv, save_csv, split
from clustr.errors import ClustrError, ConfigError
from clustr.magnet import MagnetConfig
from clustr.network import lipschitz_upper_bound
from clustr.train import (
    ArchSpec,
    TrainConfig,
    TrainedArtifact,
    ce_head_cluster_ablation,
    cluster_accuracy,
    derive_seed,
    nominal_accuracy,
    run_pipeline,
)

_DATASET_STAGE = 10
_SPLIT_STAGE = 11

_DATASET_DEFAULTS = {"generator": "moons", "n": 1000, "noise_std": 0.1, "gap": 0.5, "test_fraction": 0.25}
_ARCH_DEFAULTS = {"input_dim": 2, "hidden_dims": [20, 20], "feature_dim": 20}
_TRAIN_KEYS = {
    "warm_epochs", "finetune_epochs", "warm_lr", "finetune_lr", "alpha", "lam",
    "k_per_class", "clusters_per_batch", "samples_per_cluster", "qtrades_epsilon",
    "qtrades_eta", "batch_size", "adam_beta1", "adam_beta2", "adam_eps",
    "grad_clip", "kmeans_restarts", "d_nearest",
}


def _check_keys(obj: dict, allowed, path: str) -> None:
    for key in obj:
        if key not in allowed:
            raise ConfigError(f"unknown config key {path}{key!r}")


def load_train_config(path) -> dict:
    """Parse, validate, and resolve a train config (or a train manifest)."""
    try:
        raw = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    if isinstance(raw, dict) and "command" in raw and "config" in raw:
        raw = raw["config"]  # re-run straight from a manifest
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    _check_keys(raw, {"pipeline", "seed", "out_dir", "dataset", "arch", "train"}, "")
    if "pipeline" not in raw:
        raise ConfigError("missing required field 'pipeline'")
    dataset = dict(_DATASET_DEFAULTS)
    user_ds = raw.get("dataset", {})
    _check_keys(user_ds, set(_DATASET_DEFAULTS), "dataset.")
    dataset.update(user_ds)
    if dataset["generator"] not in ("moons", "circles"):
        raise ConfigError(f"dataset.generator must be 'moons' or 'circles', got {dataset['generator']!r}")
    arch = dict(_ARCH_DEFAULTS)
    user_arch = raw.get("arch", {})
    _check_keys(user_arch, set(_ARCH_DEFAULTS), "arch.")
    arch.update(user_arch)
    train = dict(raw.get("train", {}))
    _check_keys(train, _TRAIN_KEYS, "train.")
    seed = int(raw.get("seed", 0))
    env_seed = os.environ.get("CLUSTR_SEED")
    if env_seed is not None:
        try:
            seed = int(env_seed)
        except ValueError:
            raise ConfigError(f"CLUSTR_SEED must be an integer, got {env_seed!r}") from None
    return {
        "pipeline": raw["pipeline"],
        "seed": seed,
        "out_dir": raw.get("out_dir", "run"),
        "dataset": dataset,
        "arch": arch,
        "train": train,
    }


def build_dataset(config: dict):
    ds = config["dataset"]
    data_seed = derive_seed(config["seed"], _DATASET_STAGE)
    if ds["generator"] == "moons":
        full = gen_moons(int(ds["n"]), float(ds["noise_std"]), data_seed)
    else:
        full = gen_circles(int(ds["n"]), float(ds["gap"]), float(ds["noise_std"]), data_seed)
    return split(full, float(ds["test_fraction"]), derive_seed(config["seed"], _SPLIT_STAGE))


def build_train_config(config: dict) -> TrainConfig:
    try:
        return TrainConfig(pipeline=config["pipeline"], rng_seed=config["seed"], **config["train"])
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid train config: {exc}") from None


def _arch_spec(config: dict) -> ArchSpec:
    a = config["arch"]
    return ArchSpec(int(a["input_dim"]), tuple(a["hidden_dims"]), int(a["feature_dim"]))


def write_manifest(path: Path, command: str, config, timings: dict, outputs: dict, summary: dict) -> None:
    doc = {
        "command": command,
        "version": __version__,
        "config": config,
        "wall_time_s": {k: round(v, 6) for k, v in timings.items()},
        "outputs": outputs,
        "summary": summary,
    }
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _canonical_json(doc: dict) -> str:
    return json.dumps(doc, sort_keys=True)


def _load_artifact(path) -> TrainedArtifact:
    try:
        return TrainedArtifact.from_json_dict(json.loads(Path(path).read_text()))
    except (OSError, json.JSONDecodeError, KeyError, ValueError) as exc:
        raise ConfigError(f"cannot load artifact {path}: {exc}") from None


def cmd_train(args) -> int:
    config = load_train_config(args.config)
    out_dir = Path(args.out or config["out_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)
    timings = {}
    t0 = time.perf_counter()
    train_data, test_data = build_dataset(config)
    timings["dataset"] = time.perf_counter() - t0

    cfg = build_train_config(config)
    arch = _arch_spec(config)
    t0 = time.perf_counter()
    artifact = run_pipeline(train_data, arch, cfg)
    timings["train"] = time.perf_counter() - t0

    artifact_path = out_dir / "artifact.json"
    artifact_path.write_text(_canonical_json(artifact.to_json_dict()) + "\n")
    history_path = out_dir / "history.csv"
    with history_path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "phase", "loss", "accuracy"])
        for row in artifact.history:
            writer.writerow([row["epoch"], row["phase"], repr(row["loss"]), repr(row["accuracy"])])
    train_path = out_dir / "train.csv"
    test_path = out_dir / "test.csv"
    save_csv(train_data, train_path)
    save_csv(test_data, test_path)

    if artifact.cluster_model is not None:
        train_acc = cluster_accuracy(artifact.net, artifact.cluster_model, cfg.magnet_config(), train_data)
        test_acc = (
            cluster_accuracy(artifact.net, artifact.cluster_model, cfg.magnet_config(), test_data)
            if len(test_data)
            else float("nan")
        )
    else:
        train_acc = nominal_accuracy(artifact.net, train_data)
        test_acc = nominal_accuracy(artifact.net, test_data) if len(test_data) else float("nan")
    summary = {"train_accuracy": train_acc, "test_accuracy": test_acc}
    write_manifest(
        out_dir / "manifest.json",
        "train",
        config,
        timings,
        {
            "artifact": str(artifact_path),
            "history": str(history_path),
            "train_csv": str(train_path),
            "test_csv": str(test_path),
        },
        summary,
    )
    print(f"pipeline={config['pipeline']} train_acc={train_acc:.4f} test_acc={test_acc:.4f}")
    return 0


def _parse_grid(text: str) -> np.ndarray:
    text = text.strip()
    if not text:
        raise ConfigError("empty radius grid")
    if ":" in text:
        parts = text.split(":")
        if len(parts) != 3:
            raise ConfigError("grid range must be start:stop:count")
        try:
            start, stop, count = float(parts[0]), float(parts[1]), int(parts[2])
        except ValueError as exc:
            raise ConfigError(f"bad grid range: {exc}") from None
        if count < 1:
            raise ConfigError("grid count must be >= 1")
        return np.linspace(start, stop, count)
    try:
        values = np.array([float(v) for v in text.split(",") if v.strip() != ""])
    except ValueError as exc:
        raise ConfigError(f"bad grid: {exc}") from None
    if values.size == 0:
        raise ConfigError("empty radius grid")
    return values


def cmd_certify(args) -> int:
    artifact = _load_artifact(args.artifact)
    if artifact.cluster_model is None:
        raise ConfigError("artifact has no cluster model; certify needs a clustering pipeline artifact")
    data = load_csv(args.data)
    if data.inputs.shape[1] != artifact.net.input_dim:
        raise ConfigError("artifact and data disagree on the input dimension")
    grid = _parse_grid(args.grid)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    lip = float(args.lipschitz) if args.lipschitz is not None else lipschitz_upper_bound(artifact.net)
    mcfg = artifact.config.magnet_config() if artifact.config else MagnetConfig()
    curve = certified_curve(artifact.net, artifact.cluster_model, mcfg, data, grid, lip)
    elapsed = time.perf_counter() - t0
    curve_path = out_dir / "certified_curve.csv"
    with curve_path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["radius", "certified_accuracy"])
        for r, a in zip(curve.radii, curve.certified_accuracy):
            writer.writerow([repr(float(r)), repr(float(a))])
    config = {"artifact": str(args.artifact), "data": str(args.data), "grid": args.grid,
              "lipschitz_override": args.lipschitz}
    write_manifest(
        out_dir / "certify_manifest.json",
        "certify",
        config,
        {"certify": elapsed},
        {"curve": str(curve_path)},
        {"auc": curve.auc, "lipschitz_used": lip},
    )
    print(f"auc={curve.auc:.6f} lipschitz={lip:.6f}")
    return 0


def _load_attack_config(path) -> dict:
    try:
        raw = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read attack config {path}: {exc}") from None
    allowed = {"norm", "epsilon", "epsilons", "eta", "iterations", "restarts", "objective", "seed", "max_inputs"}
    _check_keys(raw, allowed, "")
    if "epsilon" in raw and "epsilons" in raw:
        raise ConfigError("give either 'epsilon' or 'epsilons', not both")
    return raw


def cmd_attack(args) -> int:
    artifact = _load_artifact(args.artifact)
    if artifact.cluster_model is None:
        raise ConfigError("artifact has no cluster model; attack evaluation needs one")
    data = load_csv(args.data)
    raw = _load_attack_config(args.attack_config)
    epsilons = raw.get("epsilons", [raw.get("epsilon", 8.0 / 255.0)])
    objective = raw.get("objective", "ce_vs_label")
    objectives = ["ce_vs_label", "magnet_loss"] if objective == "all" else [objective]
    max_inputs = raw.get("max_inputs")
    if max_inputs is not None:
        data = LabeledDataset(data.inputs[: int(max_inputs)], data.labels[: int(max_inputs)], data.split)
    mcfg = artifact.config.magnet_config() if artifact.config else MagnetConfig()
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    timings = {}
    for obj in objectives:
        try:
            atk = AttackConfig(
                norm=raw.get("norm", "linf"),
                epsilon=float(epsilons[0]),
                eta=float(raw.get("eta", 2.0 / 255.0)),
                iterations=int(raw.get("iterations", 20)),
                restarts=int(raw.get("restarts", 10)),
                objective=obj,
                rng_seed=int(raw.get("seed", 0)),
            )
        except ValueError as exc:
            raise ConfigError(f"invalid attack config: {exc}") from None
        t0 = time.perf_counter()
        if len(epsilons) > 1:
            accs = epsilon_sweep(artifact.net, artifact.cluster_model, mcfg, data, atk, epsilons)
        else:
            accs = [evaluate_robust_accuracy(artifact.net, artifact.cluster_model, mcfg, data, atk)]
        timings[obj] = time.perf_counter() - t0
        for eps, acc in zip(epsilons, accs):
            rows.append([atk.norm, float(eps), atk.iterations, atk.restarts, obj, acc])
    table_path = out_dir / "attacks.csv"
    with table_path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["norm", "epsilon", "iterations", "restarts", "objective", "robust_accuracy"])
        for row in rows:
            writer.writerow(row)
    config = {"artifact": str(args.artifact), "data": str(args.data), "attack": raw}
    summary = {f"{r[4]}@eps={r[1]:g}": r[5] for r in rows}
    write_manifest(out_dir / "attack_manifest.json", "attack", config, timings, {"table": str(table_path)}, summary)
    for row in rows:
        print(f"norm={row[0]} eps={row[1]:g} k={row[2]} R={row[3]} objective={row[4]} robust_acc={row[5]:.4f}")
    return 0


def cmd_falsify(args) -> int:
    artifact = _load_artifact(args.artifact)
    if artifact.cluster_model is None:
        raise ConfigError("artifact has no cluster model; falsification needs one")
    data = load_csv(args.data)
    lip = lipschitz_upper_bound(artifact.net) * float(args.lipschitz_scale)
    mcfg = artifact.config.magnet_config() if artifact.config else MagnetConfig()
    atk = AttackConfig(
        norm="l2", epsilon=1.0, eta=0.01, iterations=int(args.iterations),
        restarts=int(args.restarts), objective="ce_vs_label", rng_seed=int(args.seed),
    )
    t0 = time.perf_counter()
    violations = attack_falsification(
        artifact.net, artifact.cluster_model, mcfg, data, lip,
        budget_fraction=float(args.budget_fraction), attack=atk,
        max_inputs=args.max_inputs,
    )
    elapsed = time.perf_counter() - t0
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    config = {
        "artifact": str(args.artifact), "data": str(args.data),
        "budget_fraction": float(args.budget_fraction), "iterations": int(args.iterations),
        "restarts": int(args.restarts), "lipschitz_scale": float(args.lipschitz_scale),
        "max_inputs": args.max_inputs, "seed": int(args.seed),
    }
    write_manifest(
        out_dir / "falsify_manifest.json", "falsify", config, {"falsify": elapsed}, {},
        {"violations": violations, "lipschitz_used": lip},
    )
    print(f"violations={violations}")
    return 3 if violations > 0 else 0


def cmd_ablate_ce(args) -> int:
    config = load_train_config(args.config)
    train_data, _ = build_dataset(config)
    cfg = build_train_config(config)
    arch = _arch_spec(config)
    t0 = time.perf_counter()
    ce_acc, cluster_acc = ce_head_cluster_ablation(train_data, arch, cfg)
    elapsed = time.perf_counter() - t0
    out_dir = Path(args.out or config["out_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)
    write_manifest(
        out_dir / "ablate_manifest.json", "ablate-ce", config, {"ablate": elapsed}, {},
        {"ce_head_accuracy": ce_acc, "cluster_head_accuracy": cluster_acc},
    )
    print(f"ce_head_accuracy={ce_acc:.4f} cluster_head_accuracy={cluster_acc:.4f}")
    return 0


def cmd_report(args) -> int:
    try:
        doc = json.loads(Path(args.manifest).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read manifest {args.manifest}: {exc}") from None
    print(f"command: {doc.get('command')}   version: {doc.get('version')}")
    for key, value in sorted(doc.get("summary", {}).items()):
        print(f"  {key}: {value}")
    for key, value in sorted(doc.get("wall_time_s", {}).items()):
        print(f"  wall[{key}]: {value}s")
    for key, value in sorted(doc.get("outputs", {}).items()):
        print(f"  out[{key}]: {value}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="clustr", description=__doc__.splitlines()[0])
    parser.add_argument("--threads", type=int, default=None, help="cap BLAS worker threads (best effort)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a pipeline from a JSON config")
    p.add_argument("--config", required=True)
    p.add_argument("--out", default=None, help="override config out_dir")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("certify", help="certified-accuracy curve for an artifact")
    p.add_argument("--artifact", required=True)
    p.add_argument("--data", required=True, help="CSV dataset to certify")
    p.add_argument("--grid", required=True, help="radius grid: 'start:stop:count' or comma list")
    p.add_argument("--lipschitz", type=float, default=None, help="override the Lipschitz bound")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_certify)

    p = sub.add_parser("attack", help="robust accuracy under PGD attacks")
    p.add_argument("--artifact", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--attack-config", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_attack)

    p = sub.add_parser("falsify", help="attack inside certified radii; nonzero violations fail")
    p.add_argument("--artifact", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--budget-fraction", type=float, default=0.99)
    p.add_argument("--iterations", type=int, default=100)
    p.add_argument("--restarts", type=int, default=50)
    p.add_argument("--max-inputs", type=int, default=None)
    p.add_argument("--lipschitz-scale", type=float, default=1.0,
                   help="scale the bound (use <1 as a negative control)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_falsify)

    p = sub.add_parser("ablate-ce", help="CE-then-cluster head ablation")
    p.add_argument("--config", required=True)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_ablate_ce)

    p = sub.add_parser("report", help="summarize a manifest")
    p.add_argument("--manifest", required=True)
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.threads is not None:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ[var] = str(args.threads)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except ClustrError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
