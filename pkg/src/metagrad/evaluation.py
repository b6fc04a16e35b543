"""Experiment harness: success rates, sweeps, ablations, perturbation
analyses, and CSV emission.

Row conventions: every result row carries the full (method, mgaa, model,
epsilon, T, K, n, seed) coordinate.  Baseline rows (mgaa=false) set K=0
and n to the ensemble width they attacked; meta rows carry their inner
loop shape.  Norms are means over the row's images: mean_linf is the
max-abs perturbation in 0-255 units, mean_l1 and mean_l2 are per-pixel
(L1 divided by pixel count, L2 as root-mean-square), with raw sums in
the metadata sidecar.  Reported success rates need >= 200 images unless
the run is explicitly marked smoke.

Per-image randomness: image i of a run with seed s draws from
SeedSequence([s, i]) split into (task-sampling, input-transform)
streams, so any two arms see identical streams per image and toggling
the input transform never shifts task sequences.
"""

from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from joblib import Parallel, delayed

from . import attacks as atk
from . import meta
from .data import EvalDataset
from .errors import ConfigError
from .validation import check_images

logger = logging.getLogger(__name__)

CSV_COLUMNS = [
    "run_id", "method", "mgaa", "model", "model_role", "epsilon",
    "T", "K", "n", "success_rate", "mean_linf", "mean_l1", "mean_l2",
    "wall_ms", "seed",
]
NORM_NOTE = (
    "# norms: mean_linf is max|delta| in 0-255 units; mean_l1 and mean_l2 "
    "are per-pixel (L1/pixel-count, L2 root-mean-square)"
)
MIN_IMAGES_FOR_REPORT = 200


@dataclass
class ResultRow:
    run_id: str
    method: str
    mgaa: bool
    model: str
    model_role: str
    epsilon: float
    T: int
    K: int
    n: int
    success_rate: float
    mean_linf: float
    mean_l1: float
    mean_l2: float
    wall_ms: float
    seed: int
    images: int = 0  # recorded per row; lives in the sidecar, not the CSV

    def __post_init__(self):
        if not 0.0 <= self.success_rate <= 1.0:
            raise ConfigError(
                f"success rate must lie in [0,1], got {self.success_rate}"
            )


@dataclass
class ResultTable:
    rows: list = field(default_factory=list)
    metadata: dict = field(default_factory=dict)

    def add(self, row: ResultRow) -> None:
        self.rows.append(row)

    def extend(self, other: "ResultTable") -> None:
        self.rows.extend(other.rows)

    def __len__(self) -> int:
        return len(self.rows)

    def mean_success(self, role: str | None = None, **match) -> float:
        picked = [
            r.success_rate
            for r in self.rows
            if (role is None or r.model_role == role)
            and all(getattr(r, k) == v for k, v in match.items())
        ]
        if not picked:
            raise ConfigError(f"no rows match role={role} {match}")
        return float(np.mean(picked))


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------


def success_rate(
    adversarial, labels, model, targeted: bool = False, target_labels=None
) -> float:
    """Untargeted: fraction no longer predicted as the true label.
    Targeted: fraction predicted as the target label."""
    adversarial = check_images(adversarial, name="adversarial")
    labels = np.asarray(labels)
    if targeted:
        if target_labels is None:
            raise ConfigError("targeted success rate requires target labels")
        predictions = model.predict(adversarial)
        return float(np.mean(predictions == np.asarray(target_labels)))
    predictions = model.predict(adversarial)
    return float(np.mean(predictions != labels))


def perturbation_norms(adversarial, benign) -> dict:
    """Batch-mean L-inf / per-pixel L1 / RMS L2 of adversarial - benign,
    plus raw L1 and L2 sums, all computed in float64."""
    delta = adversarial.astype(np.float64) - benign.astype(np.float64)
    flat = delta.reshape(delta.shape[0], -1)
    pixels = flat.shape[1]
    raw_l1 = np.abs(flat).sum(axis=1)
    raw_l2 = np.sqrt((flat**2).sum(axis=1))
    return {
        "mean_linf": float(np.abs(flat).max(axis=1).mean()),
        "mean_l1": float((raw_l1 / pixels).mean()),
        "mean_l2": float(np.sqrt((flat**2).mean(axis=1)).mean()),
        "raw_l1": float(raw_l1.mean()),
        "raw_l2": float(raw_l2.mean()),
    }


def cosine_analysis(
    perturbations, benign, models, labels, model_names=None
) -> dict:
    """Mean cosine between each image's perturbation and each model's
    input gradient at the benign point.

    Images whose perturbation or gradient is identically zero are
    skipped; the skip count is reported alongside the means.
    """
    perturbations = np.asarray(perturbations, dtype=np.float32)
    benign = check_images(benign, name="benign")
    labels = np.asarray(labels)
    if model_names is None:
        model_names = [f"model{i}" for i in range(len(models))]
    means, skipped = {}, 0
    flat_p = perturbations.reshape(perturbations.shape[0], -1).astype(np.float64)
    p_norm = np.linalg.norm(flat_p, axis=1)
    for name, model in zip(model_names, models):
        grad = model.input_gradient(benign, labels)
        flat_g = grad.reshape(grad.shape[0], -1).astype(np.float64)
        g_norm = np.linalg.norm(flat_g, axis=1)
        usable = (p_norm > 0) & (g_norm > 0)
        skipped += int((~usable).sum())
        if not usable.any():
            raise ConfigError(
                f"no usable image for cosine analysis against {name}"
            )
        cosine = (flat_p[usable] * flat_g[usable]).sum(axis=1) / (
            p_norm[usable] * g_norm[usable]
        )
        means[name] = float(cosine.mean())
    return {"means": means, "skipped": skipped}


# ---------------------------------------------------------------------------
# adversarial generation drivers
# ---------------------------------------------------------------------------


def per_image_streams(seed: int, index: int):
    """(task-sampling, input-transform) generators for one image."""
    streams = np.random.SeedSequence([seed, index]).spawn(2)
    return (
        np.random.default_rng(streams[0]),
        np.random.default_rng(streams[1]),
    )


@dataclass(frozen=True)
class Arm:
    """One experiment arm: a host method with or without the meta loop.

    K=0 with mgaa=True selects the single-sampled-model variant (the
    meta loop with its inner phase disabled)."""

    label: str
    method: str | atk.MethodConfig = "ti-dim"
    mgaa: bool = True
    T: int = 40
    K: int = 5
    n: int = 5
    alpha: float = 1.0
    beta: float | None = None

    def method_config(self) -> atk.MethodConfig:
        return atk.get_method(self.method)

    def method_name(self) -> str:
        return self.method if isinstance(self.method, str) else self.method.base


def _attack_one(
    arm: Arm, x, y, zoo, budget, seed, index, targeted, target_labels
):
    task_rng, transform_rng = per_image_streams(seed, index)
    target = None if target_labels is None else target_labels[index : index + 1]
    if arm.mgaa:
        config = meta.MgaaConfig(
            budget=budget, method=arm.method_config(),
            T=arm.T, K=max(arm.K, 1), n=arm.n, alpha=arm.alpha,
            beta=arm.beta, targeted=targeted, seed=seed,
        )
        attack = meta.mgaa_attack if arm.K >= 1 else meta.mgaa_without_meta_train
        adv, _ = attack(
            x, y, zoo, config, target_labels=target,
            task_rng=task_rng, transform_rng=transform_rng,
        )
        return adv.data[0]
    adv = meta.ensemble_baseline(
        x, y, zoo, arm.method_config(), arm.T, budget,
        rng=transform_rng, targeted=targeted, target_labels=target,
    )
    return adv.data[0]


def generate_adversarial(
    dataset: EvalDataset,
    zoo,
    arm: Arm,
    budget: atk.AttackBudget,
    seed: int = 0,
    targeted: bool = False,
    n_jobs: int = 1,
) -> np.ndarray:
    """Adversarial counterpart of every dataset image under one arm.

    Deterministic in (dataset, zoo, arm, budget, seed); images
    parallelize freely because each one owns its derived streams.
    """
    if targeted and dataset.target_labels is None:
        raise ConfigError("dataset has no target labels for a targeted run")
    images, labels = dataset.images, dataset.labels
    outputs = Parallel(n_jobs=n_jobs)(
        delayed(_attack_one)(
            arm, images[i : i + 1], labels[i : i + 1], zoo, budget, seed, i,
            targeted, dataset.target_labels,
        )
        for i in range(len(dataset))
    )
    return np.stack(outputs).astype(np.float32)


def _require_report_size(dataset: EvalDataset, smoke: bool) -> None:
    if not smoke and len(dataset) < MIN_IMAGES_FOR_REPORT:
        raise ConfigError(
            f"reported success rates need >= {MIN_IMAGES_FOR_REPORT} images "
            f"(got {len(dataset)}); pass smoke=True for exploratory runs"
        )


def _run_id(arm: Arm, epsilon: float, seed: int) -> str:
    mode = "mgaa" if arm.mgaa else "ens"
    return f"{arm.label}-{mode}-eps{epsilon:g}-seed{seed}"


def evaluate_arm(
    dataset: EvalDataset,
    zoo,
    arm: Arm,
    epsilon: float,
    seed: int = 0,
    targeted: bool = False,
    smoke: bool = False,
    n_jobs: int = 1,
) -> ResultTable:
    """One arm against every zoo member: a row per model plus the two
    role-average rows (model 'white-box-average' / 'black-box-average')."""
    _require_report_size(dataset, smoke)
    budget = atk.AttackBudget(epsilon)
    start = time.perf_counter()
    adversarial = generate_adversarial(
        dataset, zoo, arm, budget, seed=seed, targeted=targeted, n_jobs=n_jobs
    )
    wall_ms = (time.perf_counter() - start) * 1000.0
    logger.info(
        "arm %s: %d images at eps=%g in %.0f ms",
        arm.label, len(dataset), epsilon, wall_ms,
    )
    return _table_from_batch(
        dataset, zoo, arm, epsilon, seed, targeted, adversarial, wall_ms
    )


def _table_from_batch(
    dataset, zoo, arm, epsilon, seed, targeted, adversarial, wall_ms
) -> ResultTable:
    norms = perturbation_norms(adversarial, dataset.images)
    table = ResultTable(
        metadata={
            "zoo_fingerprint": zoo.fingerprint(),
            "dataset_source": dataset.source,
            "dataset_excluded": dataset.excluded_count,
            "images": len(dataset),
            "targeted": targeted,
            "raw_l1": norms["raw_l1"],
            "raw_l2": norms["raw_l2"],
        }
    )
    run_id = _run_id(arm, epsilon, seed)
    common = dict(
        run_id=run_id, method=arm.method_name(), mgaa=arm.mgaa,
        epsilon=epsilon, T=arm.T, K=arm.K if arm.mgaa else 0,
        n=arm.n if arm.mgaa else len(zoo.white_box_indices),
        mean_linf=norms["mean_linf"], mean_l1=norms["mean_l1"],
        mean_l2=norms["mean_l2"], wall_ms=wall_ms, seed=seed,
        images=len(dataset),
    )
    per_role: dict = {"white": [], "black": []}
    for index, (name, model) in enumerate(zip(zoo.names, zoo.models)):
        role = zoo.role_of(index)
        rate = success_rate(
            adversarial, dataset.labels, model,
            targeted=targeted, target_labels=dataset.target_labels,
        )
        per_role[role].append(rate)
        table.add(ResultRow(model=name, model_role=role, success_rate=rate, **common))
    for role in ("white", "black"):
        if per_role[role]:
            table.add(
                ResultRow(
                    model=f"{role}-box-average", model_role=role,
                    success_rate=float(np.mean(per_role[role])), **common,
                )
            )
    return table


def evaluate_arms(
    dataset, zoo, arms, epsilon, seed=0, targeted=False, smoke=False, n_jobs=1
) -> ResultTable:
    table = ResultTable()
    for arm in arms:
        part = evaluate_arm(
            dataset, zoo, arm, epsilon, seed=seed, targeted=targeted,
            smoke=smoke, n_jobs=n_jobs,
        )
        table.extend(part)
        table.metadata.setdefault("runs", {})[_run_id(arm, epsilon, seed)] = (
            part.metadata
        )
    return table


# ---------------------------------------------------------------------------
# sweeps and ablations
# ---------------------------------------------------------------------------


def budget_sweep(
    dataset, zoo, arms, epsilons, T=40, seed=0, smoke=False, n_jobs=1
) -> ResultTable:
    """Success-rate grid over ascending budgets; the meta-test step
    rescales with each budget (beta = epsilon / T).  epsilon=0 rows
    evaluate the untouched images."""
    epsilons = list(epsilons)
    if any(b < a for a, b in zip(epsilons, epsilons[1:])):
        raise ConfigError(f"budgets must ascend, got {epsilons}")
    _require_report_size(dataset, smoke)
    table = ResultTable()
    for epsilon in epsilons:
        for arm in arms:
            arm = replace(arm, T=T, beta=None)
            if epsilon == 0.0:
                part = _table_from_batch(
                    dataset, zoo, arm, 0.0, seed, False,
                    dataset.images.copy(), 0.0,
                )
            else:
                part = evaluate_arm(
                    dataset, zoo, arm, epsilon, seed=seed, smoke=smoke,
                    n_jobs=n_jobs,
                )
            table.extend(part)
    table.metadata["sweep"] = {"epsilons": epsilons, "T": T, "seed": seed}
    return table


def hyperparam_sweep(
    dataset, zoo, dimension: str, values, base_arm: Arm | None = None,
    epsilon: float = 8.0, seed: int = 0, smoke: bool = False, n_jobs: int = 1,
) -> ResultTable:
    """Sweep one meta knob (K, T, or n), reporting the white-box and
    black-box average rows per value."""
    if dimension not in ("K", "T", "n"):
        raise ConfigError(f"sweep dimension must be K, T, or n, got {dimension!r}")
    base_arm = base_arm or Arm(label="sweep")
    table = ResultTable()
    for value in values:
        arm = replace(
            base_arm,
            label=f"{base_arm.label}-{dimension}{value}",
            **{dimension: int(value)},
        )
        part = evaluate_arm(
            dataset, zoo, arm, epsilon, seed=seed, smoke=smoke, n_jobs=n_jobs
        )
        for row in part.rows:
            if row.model.endswith("-average"):
                table.add(row)
    table.metadata["sweep"] = {"dimension": dimension, "values": list(values)}
    return table


def ablation(
    dataset, zoo, method="ti-dim", epsilon: float = 8.0, T: int = 40,
    K: int = 5, n: int = 5, seed: int = 0, smoke: bool = False, n_jobs: int = 1,
) -> ResultTable:
    """Three arms on identical images and streams: the full meta attack,
    the ensemble attack (no held-out step), and the single-sampled-model
    variant (no inner loop)."""
    arms = [
        Arm(label="full", method=method, mgaa=True, T=T, K=K, n=n),
        Arm(label="no-meta-test", method=method, mgaa=False, T=T),
        Arm(label="no-meta-train", method=method, mgaa=True, T=T, K=0, n=n),
    ]
    return evaluate_arms(
        dataset, zoo, arms, epsilon, seed=seed, smoke=smoke, n_jobs=n_jobs
    )


# ---------------------------------------------------------------------------
# minimum-noise search
# ---------------------------------------------------------------------------


@dataclass
class MinNoiseResult:
    epsilon: float
    linf: float
    l1_per_pixel: float
    l2_rms: float
    raw_l1: float
    raw_l2: float
    censored: bool = False
    already_misclassified: bool = False


def _fools(model, adversarial, label) -> bool:
    return int(model.predict(adversarial)[0]) != int(label)


def min_noise_search(
    image,
    label,
    model,
    attack_fn,
    eps_max: float = 32.0,
    iterations: int = 6,
) -> MinNoiseResult:
    """Bisect the smallest budget at which `attack_fn(image, label, eps)`
    fools `model`.

    The attack must be deterministic per (image, eps).  An image the
    model already misclassifies reports all-zero norms; one that resists
    the attack at eps_max comes back censored and is excluded from means
    by the aggregation step.
    """
    image = np.asarray(image, dtype=np.float32)
    if image.ndim == 3:
        image = image[None]
    if _fools(model, image, label):
        return MinNoiseResult(0.0, 0.0, 0.0, 0.0, 0.0, 0.0,
                              already_misclassified=True)
    adv = attack_fn(image, label, eps_max)
    if not _fools(model, adv, label):
        return MinNoiseResult(eps_max, 0.0, 0.0, 0.0, 0.0, 0.0, censored=True)
    lo, hi = 0.0, eps_max
    best = (eps_max, adv)
    for _ in range(iterations):
        mid = (lo + hi) / 2.0
        adv = attack_fn(image, label, mid)
        if _fools(model, adv, label):
            hi = mid
            best = (mid, adv)
        else:
            lo = mid
    epsilon, adv = best
    norms = perturbation_norms(adv, image)
    return MinNoiseResult(
        epsilon=epsilon, linf=norms["mean_linf"],
        l1_per_pixel=norms["mean_l1"], l2_rms=norms["mean_l2"],
        raw_l1=norms["raw_l1"], raw_l2=norms["raw_l2"],
    )


def make_min_noise_attack_fn(zoo, arm: Arm, seed: int, image_index: int):
    """Deterministic (image, label, eps) -> adversarial array closure
    for the bisection search; beta rescales as eps / T per probe."""

    def attack(image, label, eps):
        budget = atk.AttackBudget(eps)
        y = np.asarray([label]) if np.ndim(label) == 0 else np.asarray(label)
        task_rng, transform_rng = per_image_streams(seed, image_index)
        if arm.mgaa:
            config = meta.MgaaConfig(
                budget=budget, method=arm.method_config(), T=arm.T,
                K=max(arm.K, 1), n=arm.n, alpha=arm.alpha, seed=seed,
            )
            attack_callable = (
                meta.mgaa_attack if arm.K >= 1 else meta.mgaa_without_meta_train
            )
            adv, _ = attack_callable(
                image, y, zoo, config, task_rng=task_rng,
                transform_rng=transform_rng,
            )
            return adv.data
        return meta.ensemble_baseline(
            image, y, zoo, arm.method_config(), arm.T, budget,
            rng=transform_rng,
        ).data

    return attack


def min_noise_table(
    dataset, zoo, arms, model_index: int | None = None,
    eps_max: float = 32.0, iterations: int = 6, seed: int = 0,
    n_jobs: int = 1,
) -> ResultTable:
    """Mean minimal budgets and norms per arm against one held-out
    model (the first black-box member unless overridden).

    Censored and already-misclassified images are excluded from the
    means; their counts land in the metadata.  Each row's epsilon column
    holds the mean minimal budget and its success_rate column holds the
    fraction of images that produced a usable minimum."""
    if model_index is None:
        model_index = zoo.black_box_indices[0]
    model = zoo.models[model_index]
    table = ResultTable(metadata={
        "zoo_fingerprint": zoo.fingerprint(),
        "dataset_source": dataset.source,
        "model": zoo.names[model_index],
        "eps_max": eps_max,
        "iterations": iterations,
        "censoring": {},
    })
    for arm in arms:
        start = time.perf_counter()
        results = Parallel(n_jobs=n_jobs)(
            delayed(min_noise_search)(
                dataset.images[i], int(dataset.labels[i]), model,
                make_min_noise_attack_fn(zoo, arm, seed, i),
                eps_max, iterations,
            )
            for i in range(len(dataset))
        )
        wall_ms = (time.perf_counter() - start) * 1000.0
        usable = [
            r for r in results if not r.censored and not r.already_misclassified
        ]
        censored = sum(r.censored for r in results)
        skipped = sum(r.already_misclassified for r in results)
        if not usable:
            raise ConfigError(
                f"arm {arm.label!r}: every image censored or skipped"
            )
        table.metadata["censoring"][arm.label] = {
            "censored": censored, "already_misclassified": skipped,
            "used": len(usable),
        }
        logger.info(
            "arm %s: %d usable minima, %d censored, %d already misclassified",
            arm.label, len(usable), censored, skipped,
        )
        table.add(
            ResultRow(
                run_id=f"minnoise-{_run_id(arm, eps_max, seed)}",
                method=arm.method_name(), mgaa=arm.mgaa,
                model=zoo.names[model_index],
                model_role=zoo.role_of(model_index),
                epsilon=float(np.mean([r.epsilon for r in usable])),
                T=arm.T, K=arm.K if arm.mgaa else 0,
                n=arm.n if arm.mgaa else len(zoo.white_box_indices),
                success_rate=len(usable) / len(results),
                mean_linf=float(np.mean([r.linf for r in usable])),
                mean_l1=float(np.mean([r.l1_per_pixel for r in usable])),
                mean_l2=float(np.mean([r.l2_rms for r in usable])),
                wall_ms=wall_ms, seed=seed, images=len(usable),
            )
        )
    return table


# ---------------------------------------------------------------------------
# CSV emission
# ---------------------------------------------------------------------------


def _format_cell(column: str, value) -> str:
    if column == "success_rate":
        return f"{value:.6f}"
    if column == "mgaa":
        return "true" if value else "false"
    if column == "wall_ms":
        return f"{value:.3f}"
    return str(value)


def emit_csv(table: ResultTable, path) -> Path:
    """Write the fixed-column CSV (with the norm-convention comment on
    line one) and a JSON metadata sidecar next to it."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as handle:
        handle.write(NORM_NOTE + "\n")
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(CSV_COLUMNS)
        for row in table.rows:
            writer.writerow(
                [_format_cell(c, getattr(row, c)) for c in CSV_COLUMNS]
            )
    sidecar = path.with_suffix(path.suffix + ".meta.json")
    payload = {
        "columns": CSV_COLUMNS,
        "row_images": [row.images for row in table.rows],
        "metadata": table.metadata,
    }
    sidecar.write_text(
        json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    return path


def parse_csv(path) -> ResultTable:
    """Read back an emitted CSV (comment line tolerated)."""
    table = ResultTable()
    with open(path, newline="", encoding="utf-8") as handle:
        rows = [r for r in csv.reader(handle) if r and not r[0].startswith("#")]
    header, data = rows[0], rows[1:]
    if header != CSV_COLUMNS:
        raise ConfigError(f"unexpected CSV columns: {header}")
    for record in data:
        values = dict(zip(header, record))
        table.add(
            ResultRow(
                run_id=values["run_id"], method=values["method"],
                mgaa=values["mgaa"] == "true", model=values["model"],
                model_role=values["model_role"],
                epsilon=float(values["epsilon"]), T=int(values["T"]),
                K=int(values["K"]), n=int(values["n"]),
                success_rate=float(values["success_rate"]),
                mean_linf=float(values["mean_linf"]),
                mean_l1=float(values["mean_l1"]),
                mean_l2=float(values["mean_l2"]),
                wall_ms=float(values["wall_ms"]), seed=int(values["seed"]),
            )
        )
    return table
