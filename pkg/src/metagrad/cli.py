"""Command-line entry point: zoo training, attack generation, stored-run
evaluation, analyses, and parameter sweeps.

Every subcommand resolves its settings with the precedence

    command-line flag > config file (--config, JSON) > documented default

and writes the fully resolved configuration as `resolved_config.json`
next to its outputs, so any run can be replayed from its artifacts.

Exit codes: 0 success, 2 invalid configuration, 3 data or zoo integrity
failure, 4 numerical failure at runtime.

Attack runs write a directory:

    benign.npy         float32 [N,C,H,W] pixels, the filtered originals
    adversarial.npy    float32 [N,C,H,W] pixels inside the budget ball
    labels.npy         int64 [N] true labels
    targets.npy        int64 [N] target labels (targeted runs only)
    metadata.json      arm, budget, seed, zoo fingerprint, file hashes
    resolved_config.json

Adversarial pixels stay 32-bit floats; re-quantizing to bytes would
silently shrink perturbations.  --quantize on rounds them to whole
pixel values (still stored as float32) for byte-domain studies and
requires a whole-number budget so the rounded images stay inside the
ball.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import attacks as atk
from . import evaluation as ev
from .data import EvalDataset, filter_correct, load_cifar10_subset, make_synthetic
from .errors import (
    ConfigError,
    DatasetFormatError,
    IntegrityError,
    ModelFormatError,
    ShapeError,
    TrainingDivergenceError,
)
from .zoo import DESK_ZOO_MEMBERS, ModelZoo, build_zoo

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_INTEGRITY = 3
EXIT_NUMERICAL = 4

# Documented defaults, shared by the flag help strings and the resolver.
DEFAULTS = {
    "dataset": "synthetic",
    "data_root": None,  # METAGRAD_DATA when unset
    "data_seed": 0,
    "count": 300,
    "train_count": None,  # synthetic default: 10x count
    "seed": 0,
    "workers": None,  # cpu count
    "method": "ti-dim",
    "mgaa": True,
    "targeted": False,
    "quantize": False,
    "epsilon": 8.0,
    "tasks": 40,
    "inner_steps": 5,
    "ensemble": 5,
    "alpha": 1.0,
    "beta": None,  # epsilon / tasks
    "mu": None,  # keep the preset's momentum decay
    "dim_prob": None,
    "tim_kernel": None,
    "sim_copies": None,
    "epochs": 12,
    "learning_rate": 0.05,
    "accuracy_floor": 0.95,
    "which": "adversarial",
    "analysis": "cosine",
    "dimension": "K",
    "values": None,
    "with_baseline": False,
    "eps_max": 32.0,
    "search_iterations": 6,
    "smoke": False,
}

_BOOL_KEYS = {"mgaa", "targeted", "quantize", "with_baseline", "smoke"}


def _onoff(value: str) -> bool:
    if value not in ("on", "off"):
        raise argparse.ArgumentTypeError("expected 'on' or 'off'")
    return value == "on"


def _values_list(text: str) -> list:
    try:
        return [float(v) for v in text.split(",") if v.strip() != ""]
    except ValueError:
        raise argparse.ArgumentTypeError(
            f"expected comma-separated numbers, got {text!r}"
        )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="metagrad",
        description="Meta-iterated transfer attacks on a small model zoo.",
    )
    sub = parser.add_subparsers(dest="subcommand", required=True)

    def common(p, *, zoo=True, data=True, out=True):
        p.add_argument("--config", type=Path, default=None,
                       help="JSON config file; flags override its keys")
        p.add_argument("--seed", type=int, default=None,
                       help=f"run seed (default {DEFAULTS['seed']})")
        p.add_argument("--workers", type=int, default=None,
                       help="worker processes (default: cpu count)")
        p.add_argument("--quiet", action="store_true",
                       help="suppress progress logging")
        if zoo:
            p.add_argument("--zoo-dir", type=Path, default=None,
                           help="directory holding the zoo manifest")
        if data:
            p.add_argument("--dataset", choices=["synthetic", "cifar10"],
                           default=None,
                           help=f"dataset source (default {DEFAULTS['dataset']})")
            p.add_argument("--data-root", type=Path, default=None,
                           help="dataset root (default: $METAGRAD_DATA)")
            p.add_argument("--data-seed", type=int, default=None,
                           help=f"dataset draw seed (default {DEFAULTS['data_seed']})")
            p.add_argument("--count", type=int, default=None,
                           help=f"evaluation images (default {DEFAULTS['count']})")
            p.add_argument("--smoke", action="store_const", const=True,
                           default=None,
                           help="allow fewer than 200 reported images")
        if out:
            p.add_argument("--out", type=Path, required=True,
                           help="output directory")

    def attack_flags(p):
        p.add_argument("--method", default=None,
                       help=f"host attack preset (default {DEFAULTS['method']})")
        p.add_argument("--mgaa", type=_onoff, default=None,
                       help="wrap the host method in the meta loop (on/off, "
                            f"default {'on' if DEFAULTS['mgaa'] else 'off'})")
        p.add_argument("--epsilon", type=float, default=None,
                       help=f"L-inf budget in pixels (default {DEFAULTS['epsilon']})")
        p.add_argument("--tasks", type=int, default=None,
                       help=f"outer iterations T (default {DEFAULTS['tasks']})")
        p.add_argument("--inner-steps", type=int, default=None,
                       help=f"meta-train steps K (default {DEFAULTS['inner_steps']})")
        p.add_argument("--ensemble", type=int, default=None,
                       help=f"sampled train models n (default {DEFAULTS['ensemble']})")
        p.add_argument("--alpha", type=float, default=None,
                       help=f"inner step size (default {DEFAULTS['alpha']})")
        p.add_argument("--beta", type=float, default=None,
                       help="held-out step size (default: epsilon / tasks)")
        p.add_argument("--mu", type=float, default=None,
                       help="momentum decay override for the host method")
        p.add_argument("--dim-prob", type=float, default=None,
                       help="resize-pad transform probability override")
        p.add_argument("--tim-kernel", type=int, default=None,
                       help="gradient-smoothing kernel size override")
        p.add_argument("--sim-copies", type=int, default=None,
                       help="scale-copy loss aggregation count override")
        p.add_argument("--targeted", type=_onoff, default=None,
                       help="targeted objective (on/off, default off)")

    p = sub.add_parser("train-zoo", help="train the model zoo and write its manifest")
    common(p, zoo=False)
    p.add_argument("--train-count", type=int, default=None,
                   help="synthetic training images (default: 10x count)")
    p.add_argument("--epochs", type=int, default=None,
                   help=f"default member epochs (default {DEFAULTS['epochs']})")
    p.add_argument("--learning-rate", type=float, default=None,
                   help=f"default member learning rate (default {DEFAULTS['learning_rate']})")
    p.add_argument("--accuracy-floor", type=float, default=None,
                   help=f"required eval accuracy (default {DEFAULTS['accuracy_floor']})")

    p = sub.add_parser("attack", help="generate and store adversarial images")
    common(p)
    attack_flags(p)
    p.add_argument("--quantize", type=_onoff, default=None,
                   help="round stored pixels to whole values (on/off, default off)")

    p = sub.add_parser("evaluate", help="score a stored attack run against the zoo")
    common(p, data=False)
    p.add_argument("--run-dir", type=Path, required=True,
                   help="attack output directory")
    p.add_argument("--which", choices=["adversarial", "benign"], default=None,
                   help="which stored images to score (default adversarial)")

    p = sub.add_parser("analyze", help="gradient-alignment, minimum-noise, or ablation analyses")
    common(p)
    attack_flags(p)
    p.add_argument("--analysis", choices=["cosine", "min-noise", "ablation"],
                   default=None, help=f"analysis kind (default {DEFAULTS['analysis']})")
    p.add_argument("--run-dir", type=Path, default=None,
                   help="stored attack run (cosine analysis only)")
    p.add_argument("--eps-max", type=float, default=None,
                   help=f"search ceiling for min-noise (default {DEFAULTS['eps_max']})")
    p.add_argument("--search-iterations", type=int, default=None,
                   help=f"bisection steps for min-noise (default {DEFAULTS['search_iterations']})")

    p = sub.add_parser("sweep", help="budget or hyperparameter grids")
    common(p)
    attack_flags(p)
    p.add_argument("--dimension", choices=["epsilon", "K", "T", "n"],
                   default=None, help=f"swept knob (default {DEFAULTS['dimension']})")
    p.add_argument("--values", type=_values_list, default=None,
                   help="comma-separated grid values")
    p.add_argument("--with-baseline", type=_onoff, default=None,
                   help="also run the matched ensemble baseline (on/off)")

    return parser


# ---------------------------------------------------------------------------
# config resolution
# ---------------------------------------------------------------------------


def resolve_config(args: argparse.Namespace) -> dict:
    """Merge flags over the config file over documented defaults."""
    from_file = {}
    if getattr(args, "config", None) is not None:
        path = Path(args.config)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        try:
            from_file = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}")
        if not isinstance(from_file, dict):
            raise ConfigError(f"config file {path} must hold a JSON object")
        unknown = set(from_file) - set(DEFAULTS)
        if unknown:
            raise ConfigError(
                f"config file {path} has unknown keys: {sorted(unknown)}"
            )

    resolved = {"subcommand": args.subcommand}
    for key, default in DEFAULTS.items():
        flag = getattr(args, key, None)
        if flag is not None:
            resolved[key] = flag
        elif key in from_file:
            resolved[key] = from_file[key]
        else:
            resolved[key] = default
    for key in _BOOL_KEYS:
        if not isinstance(resolved[key], bool):
            raise ConfigError(f"config key {key!r} must be true/false")
    for key in ("run_dir", "out", "zoo_dir"):
        value = getattr(args, key, None)
        resolved[key] = str(value) if value is not None else None
    if resolved["data_root"] is None:
        resolved["data_root"] = os.environ.get("METAGRAD_DATA")
    if resolved["workers"] is None:
        resolved["workers"] = os.cpu_count() or 1
    return resolved


def write_resolved_config(resolved: dict, directory: Path) -> None:
    directory.mkdir(parents=True, exist_ok=True)
    serializable = {
        k: (str(v) if isinstance(v, Path) else v) for k, v in resolved.items()
    }
    (directory / "resolved_config.json").write_text(
        json.dumps(serializable, indent=2, sort_keys=True) + "\n"
    )


def _arm_from(resolved: dict) -> ev.Arm:
    method = atk.get_method(resolved["method"])
    if resolved["mu"] is not None:
        method = replace(method, momentum_decay=float(resolved["mu"]))
    if resolved["dim_prob"] is not None:
        current = method.input_transform or atk.DimTransform()
        method = replace(
            method,
            input_transform=replace(
                current, probability=float(resolved["dim_prob"])
            ),
        )
    if resolved["tim_kernel"] is not None:
        current = method.gradient_transform or atk.TimTransform()
        method = replace(
            method,
            gradient_transform=replace(
                current, kernel_size=int(resolved["tim_kernel"])
            ),
        )
    if resolved["sim_copies"] is not None:
        method = replace(
            method,
            loss_aggregation=atk.SimAggregation(int(resolved["sim_copies"])),
        )
    return ev.Arm(
        label=resolved["method"],
        method=method,
        mgaa=resolved["mgaa"],
        T=int(resolved["tasks"]),
        K=int(resolved["inner_steps"]),
        n=int(resolved["ensemble"]),
        alpha=float(resolved["alpha"]),
        beta=resolved["beta"],
    )


def _load_dataset(resolved: dict) -> EvalDataset:
    if resolved["dataset"] == "synthetic":
        _, evaluation = make_synthetic(
            seed=int(resolved["data_seed"]), count=int(resolved["count"])
        )
        return evaluation
    root = resolved["data_root"]
    if root is None:
        raise ConfigError(
            "cifar10 needs --data-root or the METAGRAD_DATA environment variable"
        )
    return load_cifar10_subset(
        root, count=int(resolved["count"]), seed=int(resolved["data_seed"])
    )


def _load_zoo(resolved: dict) -> ModelZoo:
    if resolved["zoo_dir"] is None:
        raise ConfigError("--zoo-dir is required for this subcommand")
    return ModelZoo.load(resolved["zoo_dir"])


def _check_domain(dataset: EvalDataset, zoo: ModelZoo) -> None:
    expected = tuple(zoo.models[0].input_shape_)
    if tuple(dataset.image_shape) != expected:
        raise IntegrityError(
            f"dataset images {tuple(dataset.image_shape)} do not match the "
            f"zoo's input shape {expected}"
        )


def _prepared_dataset(resolved: dict, zoo: ModelZoo) -> EvalDataset:
    dataset = _load_dataset(resolved)
    _check_domain(dataset, zoo)
    dataset = filter_correct(dataset, zoo, roles="all")
    if resolved["targeted"]:
        classes = len(zoo.models[0].classes_)
        dataset = dataset.with_targets(int(resolved["seed"]), classes)
    return dataset


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_train_zoo(resolved: dict) -> int:
    if resolved["dataset"] != "synthetic":
        raise ConfigError("train-zoo only supports the synthetic dataset")
    out = Path(resolved["out"])
    count = int(resolved["count"])
    train_count = resolved["train_count"]
    train, evaluation = make_synthetic(
        seed=int(resolved["data_seed"]),
        count=count,
        train_count=None if train_count is None else int(train_count),
    )
    zoo = build_zoo(
        train.images, train.labels, evaluation.images, evaluation.labels,
        members=DESK_ZOO_MEMBERS,
        seed=int(resolved["seed"]),
        epochs=int(resolved["epochs"]),
        learning_rate=float(resolved["learning_rate"]),
        accuracy_floor=float(resolved["accuracy_floor"]),
    )
    zoo.save(out)
    write_resolved_config(resolved, out)
    worst = min(zoo.accuracies)
    print(f"trained {len(zoo.models)} members into {out} "
          f"(worst eval accuracy {worst:.3f})")
    return EXIT_OK


def cmd_attack(resolved: dict) -> int:
    out = Path(resolved["out"])
    zoo = _load_zoo(resolved)
    dataset = _prepared_dataset(resolved, zoo)
    arm = _arm_from(resolved)
    epsilon = float(resolved["epsilon"])
    if resolved["quantize"] and epsilon != int(epsilon):
        raise ConfigError(
            "--quantize rounds pixels to whole values and therefore needs a "
            "whole-number budget to stay inside the ball"
        )
    if not resolved["smoke"] and len(dataset) < ev.MIN_IMAGES_FOR_REPORT:
        raise ConfigError(
            f"only {len(dataset)} images survive filtering; raise --count or "
            f"pass --smoke for exploratory runs"
        )
    budget = atk.AttackBudget(epsilon)
    start = time.perf_counter()
    adversarial = ev.generate_adversarial(
        dataset, zoo, arm, budget,
        seed=int(resolved["seed"]),
        targeted=resolved["targeted"],
        n_jobs=int(resolved["workers"]),
    )
    wall_ms = (time.perf_counter() - start) * 1000.0
    if resolved["quantize"]:
        adversarial = np.rint(adversarial).astype(np.float32)

    delta = np.abs(adversarial.astype(np.float64) - dataset.images)
    if delta.max() > epsilon or adversarial.min() < 0 or adversarial.max() > 255:
        raise FloatingPointError(
            f"stored images violate the budget: max delta {delta.max():.6f}, "
            f"range [{adversarial.min():.2f}, {adversarial.max():.2f}]"
        )

    out.mkdir(parents=True, exist_ok=True)
    np.save(out / "benign.npy", dataset.images)
    np.save(out / "adversarial.npy", adversarial)
    np.save(out / "labels.npy", dataset.labels)
    files = ["benign.npy", "adversarial.npy", "labels.npy"]
    if resolved["targeted"]:
        np.save(out / "targets.npy", dataset.target_labels)
        files.append("targets.npy")
    metadata = {
        "zoo_fingerprint": zoo.fingerprint(),
        "dataset_source": dataset.source,
        "dataset_excluded": dataset.excluded_count,
        "images": len(dataset),
        "targeted": resolved["targeted"],
        "quantized": resolved["quantize"],
        "epsilon": epsilon,
        "method": resolved["method"],
        "mgaa": resolved["mgaa"],
        "tasks": int(resolved["tasks"]),
        "inner_steps": int(resolved["inner_steps"]),
        "ensemble": int(resolved["ensemble"]),
        "seed": int(resolved["seed"]),
        "hashes": {name: _sha256(out / name) for name in files},
    }
    (out / "metadata.json").write_text(
        json.dumps(metadata, indent=2, sort_keys=True) + "\n"
    )
    write_resolved_config(resolved, out)
    logger.info("attack wall time %.0f ms", wall_ms)
    print(f"wrote {len(dataset)} adversarial images to {out}")
    return EXIT_OK


def _load_run(run_dir: Path) -> tuple:
    run_dir = Path(run_dir)
    meta_path = run_dir / "metadata.json"
    if not meta_path.exists():
        raise IntegrityError(f"no metadata.json under {run_dir}")
    metadata = json.loads(meta_path.read_text())
    arrays = {}
    for name, recorded in metadata["hashes"].items():
        path = run_dir / name
        if not path.exists():
            raise IntegrityError(f"attack run is missing {name}")
        actual = _sha256(path)
        if actual != recorded:
            raise IntegrityError(
                f"{name} hash {actual[:12]}... does not match the recorded "
                f"{recorded[:12]}..."
            )
        arrays[name] = np.load(path)
    return metadata, arrays


def cmd_evaluate(resolved: dict) -> int:
    run_dir = Path(resolved["run_dir"])
    metadata, arrays = _load_run(run_dir)
    zoo = _load_zoo(resolved)
    if zoo.fingerprint() != metadata["zoo_fingerprint"]:
        raise IntegrityError(
            "the loaded zoo does not match the one this run attacked "
            f"({zoo.fingerprint()[:12]}... vs "
            f"{metadata['zoo_fingerprint'][:12]}...)"
        )
    benign = arrays["benign.npy"]
    images = arrays[f"{resolved['which']}.npy"]
    labels = arrays["labels.npy"]
    targets = arrays.get("targets.npy")
    if tuple(images.shape[1:]) != tuple(zoo.models[0].input_shape_):
        raise IntegrityError("stored images do not match the zoo input shape")

    norms = ev.perturbation_norms(images, benign)
    run_id = (
        f"{metadata['method']}-{'mgaa' if metadata['mgaa'] else 'ens'}"
        f"-eps{metadata['epsilon']:g}-seed{metadata['seed']}-{resolved['which']}"
    )
    table = ev.ResultTable(metadata={
        "zoo_fingerprint": zoo.fingerprint(),
        "dataset_source": metadata["dataset_source"],
        "images": metadata["images"],
        "which": resolved["which"],
        "raw_l1": norms["raw_l1"],
        "raw_l2": norms["raw_l2"],
    })
    start = time.perf_counter()
    rates = [
        ev.success_rate(
            images, labels, model,
            targeted=metadata["targeted"], target_labels=targets,
        )
        for model in zoo.models
    ]
    wall_ms = (time.perf_counter() - start) * 1000.0
    for index, (name, rate) in enumerate(zip(zoo.names, rates)):
        table.add(ev.ResultRow(
            run_id=run_id, method=metadata["method"], mgaa=metadata["mgaa"],
            model=name, model_role=zoo.role_of(index),
            epsilon=float(metadata["epsilon"]), T=metadata["tasks"],
            K=metadata["inner_steps"] if metadata["mgaa"] else 0,
            n=(metadata["ensemble"] if metadata["mgaa"]
               else len(zoo.white_box_indices)),
            success_rate=rate, mean_linf=norms["mean_linf"],
            mean_l1=norms["mean_l1"], mean_l2=norms["mean_l2"],
            wall_ms=wall_ms, seed=metadata["seed"],
            images=metadata["images"],
        ))
    out = Path(resolved["out"])
    path = ev.emit_csv(table, out / "results.csv")
    write_resolved_config(resolved, out)
    print(f"wrote {len(table)} rows to {path}")
    return EXIT_OK


def cmd_analyze(resolved: dict) -> int:
    out = Path(resolved["out"])
    kind = resolved["analysis"]
    zoo = _load_zoo(resolved)
    if kind == "cosine":
        if resolved["run_dir"] is None:
            raise ConfigError("cosine analysis needs --run-dir")
        metadata, arrays = _load_run(Path(resolved["run_dir"]))
        if zoo.fingerprint() != metadata["zoo_fingerprint"]:
            raise IntegrityError("the loaded zoo does not match the stored run")
        perturbations = arrays["adversarial.npy"] - arrays["benign.npy"]
        names = [zoo.names[i] for i in zoo.black_box_indices]
        report = ev.cosine_analysis(
            perturbations, arrays["benign.npy"], zoo.black_models,
            arrays["labels.npy"], model_names=names,
        )
        out.mkdir(parents=True, exist_ok=True)
        path = out / "cosine.csv"
        with open(path, "w", encoding="utf-8") as handle:
            handle.write("# mean cosine of perturbations with held-out "
                         "input gradients at the benign points\n")
            handle.write("run_id,model,model_role,images,skipped,mean_cosine\n")
            for name in names:
                handle.write(
                    f"cosine-{metadata['method']},{name},black,"
                    f"{metadata['images']},{report['skipped']},"
                    f"{report['means'][name]:.6f}\n"
                )
        write_resolved_config(resolved, out)
        print(f"wrote {len(names)} rows to {path}")
        return EXIT_OK

    dataset = _prepared_dataset(resolved, zoo)
    if not resolved["smoke"] and len(dataset) < ev.MIN_IMAGES_FOR_REPORT:
        raise ConfigError(
            f"only {len(dataset)} images survive filtering; raise --count or "
            f"pass --smoke for exploratory runs"
        )
    if kind == "min-noise":
        arm = _arm_from(resolved)
        baseline = replace(arm, label=f"{arm.label}-ens", mgaa=False)
        table = ev.min_noise_table(
            dataset, zoo, [arm, baseline],
            eps_max=float(resolved["eps_max"]),
            iterations=int(resolved["search_iterations"]),
            seed=int(resolved["seed"]),
            n_jobs=int(resolved["workers"]),
        )
        path = ev.emit_csv(table, out / "min_noise.csv")
    else:
        table = ev.ablation(
            dataset, zoo, method=resolved["method"],
            epsilon=float(resolved["epsilon"]), T=int(resolved["tasks"]),
            K=int(resolved["inner_steps"]), n=int(resolved["ensemble"]),
            seed=int(resolved["seed"]), smoke=resolved["smoke"],
            n_jobs=int(resolved["workers"]),
        )
        path = ev.emit_csv(table, out / "ablation.csv")
    write_resolved_config(resolved, out)
    print(f"wrote {len(table)} rows to {path}")
    return EXIT_OK


def cmd_sweep(resolved: dict) -> int:
    out = Path(resolved["out"])
    zoo = _load_zoo(resolved)
    dataset = _prepared_dataset(resolved, zoo)
    arm = _arm_from(resolved)
    values = resolved["values"]
    if not values:
        raise ConfigError("--values must list at least one grid point")
    dimension = resolved["dimension"]
    if dimension == "epsilon":
        arms = [arm]
        if resolved["with_baseline"]:
            arms.append(replace(arm, label=f"{arm.label}-ens", mgaa=False))
        table = ev.budget_sweep(
            dataset, zoo, arms, [float(v) for v in values],
            T=int(resolved["tasks"]), seed=int(resolved["seed"]),
            smoke=resolved["smoke"], n_jobs=int(resolved["workers"]),
        )
    else:
        table = ev.hyperparam_sweep(
            dataset, zoo, dimension, [int(v) for v in values],
            base_arm=arm, epsilon=float(resolved["epsilon"]),
            seed=int(resolved["seed"]), smoke=resolved["smoke"],
            n_jobs=int(resolved["workers"]),
        )
    path = ev.emit_csv(table, out / "sweep.csv")
    write_resolved_config(resolved, out)
    print(f"wrote {len(table)} rows to {path}")
    return EXIT_OK


COMMANDS = {
    "train-zoo": cmd_train_zoo,
    "attack": cmd_attack,
    "evaluate": cmd_evaluate,
    "analyze": cmd_analyze,
    "sweep": cmd_sweep,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.WARNING if getattr(args, "quiet", False) else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        resolved = resolve_config(args)
        return COMMANDS[args.subcommand](resolved)
    except (IntegrityError, ModelFormatError, DatasetFormatError,
            FileNotFoundError) as exc:
        logger.error("integrity failure: %s", exc)
        return EXIT_INTEGRITY
    except (TrainingDivergenceError, FloatingPointError) as exc:
        logger.error("numerical failure: %s", exc)
        return EXIT_NUMERICAL
    except (ConfigError, ShapeError) as exc:
        logger.error("invalid configuration: %s", exc)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
