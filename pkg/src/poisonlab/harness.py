"""End-to-end experiment pipeline: data, clean model, poisoning plan, victim
model, attack metrics, and both defense evaluations, persisted deterministically.

Every stage draws from its own sub-stream of the master seed (see _SEED_LABELS),
so rerunning with the same config and seed reproduces every artifact byte for
byte. Stage failures surface as StageError tagged with the stage name.
"""

from __future__ import annotations

import csv
import itertools
import json
from contextlib import contextmanager
from pathlib import Path

import numpy as np

from .config import ExperimentConfig, config_to_text
from .data import (
    Dataset,
    dataset_from_idx,
    derive_seed,
    generate_synthetic,
    load_dataset,
    rng_from,
    save_dataset,
    split,
)
from .defense import (
    StripConfig,
    anomaly_index,
    cleanse_reverse_trigger,
    strip_entropies,
    strip_far,
    strip_threshold,
)
from .injectors import InjectorSpec, compose, default_patch_side, default_specs
from .nn import Architecture, Model, TrainConfig, forward_batch, load_model, save_model
from .nn import train as train_model
from .poisoner import AttackInstance, PoisonPlan, load_plan, poison_dataset, save_plan

# Stage seed labels, all derived from run.master_seed:
#   data, split, train-clean, train-victim, warp-fields, strip, strip-sample,
#   cleanse-probe, cleanse-class-<c>, lsba-<i>-select, lsba-<i>-relabel,
#   pilot-<i>-select, pilot-<i>-relabel, pilot-<i>-train, hard-select, hard-relabel


class StageError(RuntimeError):
    """A pipeline stage failed; the message carries the stage tag."""

    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"[{stage}] {cause}")
        self.stage = stage


@contextmanager
def _stage(name: str):
    try:
        yield
    except StageError:
        raise
    except Exception as exc:
        raise StageError(name, exc) from exc


def compute_accuracy(model: Model, dataset: Dataset) -> float:
    """Fraction of examples whose argmax prediction matches the label."""
    if len(dataset) == 0:
        raise ValueError("cannot score an empty dataset")
    x, y = dataset.stack()
    probs = forward_batch(model, x)
    return float(np.mean(np.argmax(probs, axis=1) == y))


def compute_asr(
    model: Model, test: Dataset, specs: list[InjectorSpec], target_class: int
) -> float:
    """Attack success rate: apply every spec to every test image and measure
    the fraction classified as the target, over all test examples."""
    if len(test) == 0:
        raise ValueError("cannot score an empty dataset")
    if not 0 <= target_class < test.class_count:
        raise ValueError(f"target_class {target_class} outside [0, {test.class_count})")
    batch = np.stack([compose(specs, ex.image).flat for ex in test.examples])
    probs = forward_batch(model, batch)
    return float(np.mean(np.argmax(probs, axis=1) == target_class))


def activation_sweep(
    model: Model, test: Dataset, specs: list[InjectorSpec], target_class: int
) -> dict[int, list[tuple[tuple[int, ...], float, float]]]:
    """For every nonempty subset of triggers: (subset, asr, mean target prob).

    Grouped by activation count k; subsets enumerate in combination order.
    """
    if not specs:
        raise ValueError("need at least one trigger spec")
    if len(test) == 0:
        raise ValueError("cannot sweep an empty dataset")
    images = [ex.image for ex in test.examples]
    results: dict[int, list[tuple[tuple[int, ...], float, float]]] = {}
    for k in range(1, len(specs) + 1):
        rows = []
        for combo in itertools.combinations(range(len(specs)), k):
            chosen = [specs[i] for i in combo]
            batch = np.stack([compose(chosen, img).flat for img in images])
            probs = forward_batch(model, batch)
            asr = float(np.mean(np.argmax(probs, axis=1) == target_class))
            mean_prob = float(np.mean(probs[:, target_class]))
            rows.append((combo, asr, mean_prob))
        results[k] = rows
    return results


def _aggregate(sweep, value_index: int) -> dict[int, tuple[float, float]]:
    out = {}
    for k, rows in sweep.items():
        values = np.array([row[value_index] for row in rows])
        out[k] = (float(values.mean()), float(values.std()))
    return out


def asr_by_activation(
    model: Model, test: Dataset, specs: list[InjectorSpec], target_class: int
) -> dict[int, tuple[float, float]]:
    """Mean and population std of ASR over all size-k trigger subsets, per k."""
    return _aggregate(activation_sweep(model, test, specs, target_class), 1)


def probability_by_activation(
    model: Model, test: Dataset, specs: list[InjectorSpec], target_class: int
) -> dict[int, tuple[float, float]]:
    """Mean and population std of the mean target-class probability, per k."""
    return _aggregate(activation_sweep(model, test, specs, target_class), 2)


# ---------------------------------------------------------------- pipeline stages


def build_datasets(config: ExperimentConfig) -> tuple[Dataset, Dataset]:
    if config.data_source == "synthetic":
        full = generate_synthetic(
            config.class_count,
            config.per_class,
            config.side,
            config.noise_std,
            derive_seed(config.master_seed, "data"),
        )
        return split(full, config.test_fraction, derive_seed(config.master_seed, "split"))
    train = dataset_from_idx(
        Path(config.idx_train_images).read_bytes(),
        Path(config.idx_train_labels).read_bytes(),
        class_count=config.class_count,
        name="idx-train",
    )
    test = dataset_from_idx(
        Path(config.idx_test_images).read_bytes(),
        Path(config.idx_test_labels).read_bytes(),
        class_count=config.class_count,
        name="idx-test",
    )
    return train, test


def make_architecture(config: ExperimentConfig, dataset: Dataset) -> Architecture:
    input_dim = dataset.height * dataset.width * dataset.channels
    return Architecture(input_dim, tuple(config.hidden), dataset.class_count)


def train_clean(config: ExperimentConfig, train: Dataset) -> Model:
    tc = TrainConfig(
        epochs=config.clean_epochs,
        batch_size=min(config.clean_batch, len(train)),
        learning_rate=config.clean_lr,
        momentum=config.clean_momentum,
        seed=derive_seed(config.master_seed, "train-clean"),
    )
    return train_model(train, make_architecture(config, train), tc)


def train_victim(config: ExperimentConfig, poisoned: Dataset) -> Model:
    tc = TrainConfig(
        epochs=config.victim_epochs,
        batch_size=min(config.victim_batch, len(poisoned)),
        learning_rate=config.victim_lr,
        momentum=config.victim_momentum,
        seed=derive_seed(config.master_seed, "train-victim"),
    )
    return train_model(poisoned, make_architecture(config, poisoned), tc)


def candidate_specs(config: ExperimentConfig, dataset: Dataset) -> list[InjectorSpec]:
    side = min(dataset.height, dataset.width)
    patch_side = config.patch_side if config.patch_side > 0 else default_patch_side(side)
    return default_specs(
        config.template,
        side,
        derive_seed(config.master_seed, "warp-fields"),
        patch_side=patch_side,
        sig_delta=config.sig_delta,
        warp_grid=config.warp_grid,
        warp_strength=config.warp_strength,
    )


def build_plan(
    config: ExperimentConfig, train: Dataset, test: Dataset
) -> tuple[PoisonPlan, dict | None]:
    """Smooth mode: one instance per stock trigger variant at the smooth rate.
    Hard mode: pilot-train each variant at the pilot rate on a reduced epoch
    budget, keep the variant with the highest pilot ASR (first wins ties), and
    field it alone at the hard rate. Returns (plan, pilot summary or None)."""
    ms = config.master_seed
    specs = candidate_specs(config, train)
    if config.mode == "smooth":
        instances = [
            AttackInstance(
                id=f"{config.template}-{i}",
                injector=spec,
                poison_rate=config.smooth_rate,
                target_class=config.target_class,
                selection_seed=derive_seed(ms, f"lsba-{i}-select"),
                relabel_seed=derive_seed(ms, f"lsba-{i}-relabel"),
            )
            for i, spec in enumerate(specs[: config.smooth_count])
        ]
        return PoisonPlan("smooth", instances), None

    arch = make_architecture(config, train)
    pilot_asr = []
    for i, spec in enumerate(specs):
        pilot_plan = PoisonPlan(
            "hard",
            [
                AttackInstance(
                    id=f"pilot-{i}",
                    injector=spec,
                    poison_rate=config.pilot_rate,
                    target_class=config.target_class,
                    selection_seed=derive_seed(ms, f"pilot-{i}-select"),
                    relabel_seed=derive_seed(ms, f"pilot-{i}-relabel"),
                )
            ],
        )
        pilot_poisoned, _ = poison_dataset(train, pilot_plan)
        tc = TrainConfig(
            epochs=config.pilot_epochs,
            batch_size=min(config.victim_batch, len(pilot_poisoned)),
            learning_rate=config.victim_lr,
            momentum=config.victim_momentum,
            seed=derive_seed(ms, f"pilot-{i}-train"),
        )
        pilot_model = train_model(pilot_poisoned, arch, tc)
        pilot_asr.append(compute_asr(pilot_model, test, [spec], config.target_class))
    chosen = int(np.argmax(pilot_asr))
    instance = AttackInstance(
        id=f"{config.template}-{chosen}-hard",
        injector=specs[chosen],
        poison_rate=config.hard_rate,
        target_class=config.target_class,
        selection_seed=derive_seed(ms, "hard-select"),
        relabel_seed=derive_seed(ms, "hard-relabel"),
    )
    pilot = {
        "candidate_asr": [float(a) for a in pilot_asr],
        "chosen_index": chosen,
        "chosen_id": instance.id,
    }
    return PoisonPlan("hard", [instance]), pilot


# ---------------------------------------------------------------- evaluations


def attack_metrics(
    config: ExperimentConfig,
    f_victim: Model,
    f_clean: Model,
    test: Dataset,
    specs: list[InjectorSpec],
    out_dir: Path | None = None,
) -> dict:
    sweep = activation_sweep(f_victim, test, specs, config.target_class)
    asr_k = _aggregate(sweep, 1)
    prob_k = _aggregate(sweep, 2)
    baseline = compute_accuracy(f_clean, test)
    clean_acc = compute_accuracy(f_victim, test)
    full_k = len(specs)
    metrics = {
        "baseline_accuracy": baseline,
        "clean_accuracy": clean_acc,
        "accuracy_drop": baseline - clean_acc,
        "asr_full": asr_k[full_k][0],
        "asr_by_k": {str(k): {"mean": m, "std": s} for k, (m, s) in asr_k.items()},
        "probability_by_k": {str(k): {"mean": m, "std": s} for k, (m, s) in prob_k.items()},
    }
    if out_dir is not None:
        _write_csv(
            out_dir / "asr_by_activation.csv",
            ["k", "mean_asr", "std_asr", "subsets"],
            [[k, m, s, len(sweep[k])] for k, (m, s) in sorted(asr_k.items())],
        )
        _write_csv(
            out_dir / "probability_by_activation.csv",
            ["k", "mean_probability", "std_probability", "subsets"],
            [[k, m, s, len(sweep[k])] for k, (m, s) in sorted(prob_k.items())],
        )
        _write_csv(
            out_dir / "activation_subsets.csv",
            ["k", "subset", "asr", "mean_probability"],
            [
                [k, "+".join(str(i) for i in combo), asr, prob]
                for k, rows in sorted(sweep.items())
                for combo, asr, prob in rows
            ],
        )
    return metrics


def strip_metrics(
    config: ExperimentConfig,
    f_victim: Model,
    test: Dataset,
    specs: list[InjectorSpec],
    out_dir: Path | None = None,
) -> dict:
    ms = config.master_seed
    images = [ex.image for ex in test.examples]
    if config.strip_max_inputs and len(images) > config.strip_max_inputs:
        picked = rng_from(derive_seed(ms, "strip-sample")).choice(
            len(images), size=config.strip_max_inputs, replace=False
        )
        images = [images[int(i)] for i in sorted(picked)]
    scfg = StripConfig(
        overlay_count=config.strip_overlays,
        weight=config.strip_weight,
        frr=config.strip_frr,
        seed=derive_seed(ms, "strip"),
    )
    clean_entropies = strip_entropies(f_victim, images, test, scfg)
    threshold = strip_threshold(clean_entropies, config.strip_frr)
    triggered = [compose(specs, img) for img in images]
    poisoned_entropies = strip_entropies(f_victim, triggered, test, scfg)
    far = strip_far(poisoned_entropies, threshold)
    metrics = {
        "threshold": threshold,
        "frr_target": config.strip_frr,
        "frr_realized": float(np.mean(clean_entropies < threshold)),
        "far": far,
        "clean_entropy_mean": float(clean_entropies.mean()),
        "poisoned_entropy_mean": float(poisoned_entropies.mean()),
        "inputs": len(images),
        "overlays": config.strip_overlays,
    }
    if out_dir is not None:
        for name, values in (("strip_clean.csv", clean_entropies), ("strip_poisoned.csv", poisoned_entropies)):
            _write_csv(
                out_dir / name,
                ["index", "entropy", "flagged"],
                [[i, float(e), int(e < threshold)] for i, e in enumerate(values)],
            )
        top = float(np.log(test.class_count))
        edges = np.linspace(0.0, top, 51)
        clean_hist, _ = np.histogram(np.clip(clean_entropies, 0.0, top), bins=edges)
        pois_hist, _ = np.histogram(np.clip(poisoned_entropies, 0.0, top), bins=edges)
        _write_csv(
            out_dir / "strip_histogram.csv",
            ["bin_low", "bin_high", "clean_count", "poisoned_count"],
            [
                [float(edges[i]), float(edges[i + 1]), int(clean_hist[i]), int(pois_hist[i])]
                for i in range(len(clean_hist))
            ],
        )
    return metrics


def cleanse_metrics(
    config: ExperimentConfig, f_victim: Model, test: Dataset, out_dir: Path | None = None
) -> dict:
    ms = config.master_seed
    probe_size = min(config.cleanse_probe, len(test))
    picked = rng_from(derive_seed(ms, "cleanse-probe")).choice(
        len(test), size=probe_size, replace=False
    )
    probe = Dataset(
        [test.examples[int(i)] for i in sorted(picked)], test.class_count, name="cleanse-probe"
    )
    norms = []
    for c in range(test.class_count):
        pattern = cleanse_reverse_trigger(
            f_victim,
            probe,
            c,
            steps=config.cleanse_steps,
            learning_rate=config.cleanse_lr,
            mask_penalty=config.cleanse_penalty,
            seed=derive_seed(ms, f"cleanse-class-{c}"),
        )
        norms.append(pattern.l1_norm)
    report = anomaly_index(norms, config.target_class)
    metrics = {
        "mask_norms": list(report.mask_norms),
        "median": report.median,
        "mad": report.mad,
        "anomaly_index": report.anomaly_index,
        "flagged_class": report.flagged_class,
        "target_class": report.target_class,
        "target_is_min_norm": report.target_is_min_norm,
        "exceeds_threshold": report.exceeds_threshold,
        "probe_size": probe_size,
        "steps": config.cleanse_steps,
    }
    if out_dir is not None:
        _write_csv(
            out_dir / "cleanse_norms.csv",
            ["class", "mask_norm", "is_target", "is_flagged"],
            [
                [
                    c,
                    float(norms[c]),
                    int(c == config.target_class),
                    int(report.flagged_class == c),
                ]
                for c in range(len(norms))
            ],
        )
        _write_csv(
            out_dir / "cleanse_summary.csv",
            ["median", "mad", "anomaly_index", "flagged_class", "target_is_min_norm"],
            [
                [
                    report.median,
                    report.mad,
                    "" if report.anomaly_index is None else report.anomaly_index,
                    "" if report.flagged_class is None else report.flagged_class,
                    int(report.target_is_min_norm),
                ]
            ],
        )
    return metrics


# ---------------------------------------------------------------- persistence


def _write_csv(path: Path, header: list[str], rows: list[list]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)


def write_metrics(path: Path, metrics: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(metrics, indent=2, sort_keys=True) + "\n")


def merge_metrics(path: Path, section: dict) -> None:
    """Read-update-write for staged runs; run-all writes the file in one shot."""
    existing = json.loads(path.read_text()) if path.exists() else {}
    existing.update(section)
    write_metrics(path, existing)


def run_experiment(config: ExperimentConfig, out_dir: str | Path) -> dict:
    """The whole pipeline in memory, artifacts written under out_dir:
    resolved_config.txt, plan.txt, models/, evaluation CSVs, metrics.json.
    Returns the metrics dictionary."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with _stage("data"):
        train_ds, test_ds = build_datasets(config)
    with _stage("train-clean"):
        f_clean = train_clean(config, train_ds)
    with _stage("plan"):
        plan, pilot = build_plan(config, train_ds, test_ds)
    with _stage("poison"):
        poisoned, plan = poison_dataset(train_ds, plan, f_clean)
    with _stage("train-victim"):
        f_victim = train_victim(config, poisoned)
    with _stage("eval-attack"):
        attack = attack_metrics(config, f_victim, f_clean, test_ds, plan.active_specs(), out)
    with _stage("eval-strip"):
        strip = strip_metrics(config, f_victim, test_ds, plan.active_specs(), out)
    with _stage("eval-cleanse"):
        cleanse = cleanse_metrics(config, f_victim, test_ds, out)
    with _stage("persist"):
        metrics = {
            "mode": config.mode,
            "template": config.template,
            "target_class": config.target_class,
            "master_seed": config.master_seed,
            **attack,
            "strip": strip,
            "cleanse": cleanse,
        }
        if pilot is not None:
            metrics["pilot"] = pilot
        (out / "resolved_config.txt").write_text(config_to_text(config))
        save_plan(plan, out / "plan.txt")
        save_model(f_clean, out / "models" / "f_clean.model")
        save_model(f_victim, out / "models" / "f_victim.model")
        write_metrics(out / "metrics.json", metrics)
        if config.save_datasets:
            save_dataset(train_ds, out / "data" / "train", provenance=f"master={config.master_seed}")
            save_dataset(test_ds, out / "data" / "test", provenance=f"master={config.master_seed}")
            save_dataset(poisoned, out / "data" / "poisoned", provenance=f"master={config.master_seed}")
    return metrics


# ------------------------------------------------------- staged CLI entry points


def run_gen_data(config: ExperimentConfig, out_dir: Path) -> None:
    with _stage("data"):
        train_ds, test_ds = build_datasets(config)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "resolved_config.txt").write_text(config_to_text(config))
        prov = f"master={config.master_seed}"
        save_dataset(train_ds, out_dir / "data" / "train", provenance=prov)
        save_dataset(test_ds, out_dir / "data" / "test", provenance=prov)


def run_train_clean(config: ExperimentConfig, out_dir: Path) -> None:
    with _stage("train-clean"):
        train_ds = load_dataset(out_dir / "data" / "train")
        model = train_clean(config, train_ds)
        save_model(model, out_dir / "models" / "f_clean.model")


def run_poison(config: ExperimentConfig, out_dir: Path) -> None:
    with _stage("poison"):
        train_ds = load_dataset(out_dir / "data" / "train")
        test_ds = load_dataset(out_dir / "data" / "test")
        f_clean = load_model(out_dir / "models" / "f_clean.model")
        plan, pilot = build_plan(config, train_ds, test_ds)
        poisoned, plan = poison_dataset(train_ds, plan, f_clean)
        save_plan(plan, out_dir / "plan.txt")
        save_dataset(poisoned, out_dir / "data" / "poisoned", provenance=f"master={config.master_seed}")
        if pilot is not None:
            merge_metrics(out_dir / "metrics.json", {"pilot": pilot})


def run_train_victim(config: ExperimentConfig, out_dir: Path) -> None:
    with _stage("train-victim"):
        poisoned = load_dataset(out_dir / "data" / "poisoned")
        model = train_victim(config, poisoned)
        save_model(model, out_dir / "models" / "f_victim.model")


def run_eval_attack(config: ExperimentConfig, out_dir: Path) -> dict:
    with _stage("eval-attack"):
        test_ds = load_dataset(out_dir / "data" / "test")
        f_clean = load_model(out_dir / "models" / "f_clean.model")
        f_victim = load_model(out_dir / "models" / "f_victim.model")
        plan = load_plan(out_dir / "plan.txt")
        metrics = attack_metrics(config, f_victim, f_clean, test_ds, plan.active_specs(), out_dir)
        header = {
            "mode": config.mode,
            "template": config.template,
            "target_class": config.target_class,
            "master_seed": config.master_seed,
        }
        merge_metrics(out_dir / "metrics.json", {**header, **metrics})
        return metrics


def run_eval_strip(config: ExperimentConfig, out_dir: Path) -> dict:
    with _stage("eval-strip"):
        test_ds = load_dataset(out_dir / "data" / "test")
        f_victim = load_model(out_dir / "models" / "f_victim.model")
        plan = load_plan(out_dir / "plan.txt")
        metrics = strip_metrics(config, f_victim, test_ds, plan.active_specs(), out_dir)
        merge_metrics(out_dir / "metrics.json", {"strip": metrics})
        return metrics


def run_eval_cleanse(config: ExperimentConfig, out_dir: Path) -> dict:
    with _stage("eval-cleanse"):
        test_ds = load_dataset(out_dir / "data" / "test")
        f_victim = load_model(out_dir / "models" / "f_victim.model")
        metrics = cleanse_metrics(config, f_victim, test_ds, out_dir)
        merge_metrics(out_dir / "metrics.json", {"cleanse": metrics})
        return metrics
