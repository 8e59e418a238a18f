"""Probabilistic label-smoothing poisoner.

A poisoning instance injects its trigger into a seeded random slice of the
training set and relabels each poisoned sample to the target class only with
probability p_n, calibrated per sample so the victim's expected target-class
confidence on triggered inputs lands at a chosen level beta:

    alpha = clean model's target-class probability on the pristine sample
    beta  = min(max-class probability + 0.1, 0.6)
    p_n   = clamp((beta - alpha) / (1 - alpha), 0, 1)

Hard (always-relabel) poisoning is the p_n = 1 special case. Relabel draws are
keyed by (relabel seed, sample index), so reordering never changes a draw.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .data import Dataset, Image, LabeledExample, derive_seed, rng_from
from .injectors import InjectorSpec, apply_injector, spec_from_kv, spec_to_kv
from .nn import Model, forward

MODES = ("smooth", "hard")

_INSTANCE_KEYS = ("id", "rate", "target", "selection_seed", "relabel_seed")


@dataclass(frozen=True)
class SmoothingRecord:
    """Per-sample bookkeeping: what the poisoner saw and what it decided."""

    sample_index: int
    alpha: float
    beta: float
    p_n: float
    relabeled: bool


@dataclass
class AttackInstance:
    """One poisoning attacker: a trigger, a poison rate, and its seed pair."""

    id: str
    injector: InjectorSpec
    poison_rate: float
    target_class: int
    selection_seed: int
    relabel_seed: int
    records: list[SmoothingRecord] = field(default_factory=list)

    def __post_init__(self) -> None:
        if not self.id or any(ch.isspace() for ch in self.id):
            raise ValueError("instance id must be nonempty and contain no whitespace")
        if not 0.0 < self.poison_rate < 1.0:
            raise ValueError("poison_rate must lie strictly between 0 and 1")
        if self.target_class < 0:
            raise ValueError("target_class must be nonnegative")


@dataclass
class PoisonPlan:
    mode: str
    instances: list[AttackInstance]

    def __post_init__(self) -> None:
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")

    def active_specs(self) -> list[InjectorSpec]:
        return [inst.injector for inst in self.instances]


def estimate_alpha(f_clean: Model, image: Image, target_class: int) -> float:
    """The clean model's probability of the target class on a pristine image."""
    probs = forward(f_clean, image)
    if not 0 <= target_class < probs.size:
        raise ValueError(f"target_class {target_class} outside [0, {probs.size})")
    return float(probs[target_class])


def set_beta(f_clean: Model, image: Image) -> float:
    """Desired triggered-confidence level: top clean probability plus 0.1,
    capped at 0.6 to keep the attack quiet."""
    probs = forward(f_clean, image)
    return float(min(probs.max() + 0.1, 0.6))


def solve_pn(alpha: float, beta: float) -> float:
    """Relabel probability hitting expectation beta given source rate alpha:
    clamp((beta - alpha) / (1 - alpha), 0, 1), with p_n = 1 as alpha -> 1."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must lie in [0, 1]")
    if not 0.0 <= beta <= 1.0:
        raise ValueError("beta must lie in [0, 1]")
    if 1.0 - alpha <= 1e-12:
        return 1.0
    return float(min(max((beta - alpha) / (1.0 - alpha), 0.0), 1.0))


def stacked_expectation(alpha: float, p_n: int | float, k: int = 1) -> float:
    """Closed-form expected relabeled rate when k independent poisoners with
    the same p_n hit the same sample population: alpha + (1-alpha)(1-(1-p_n)^k)."""
    if k < 1:
        raise ValueError("k must be at least 1")
    return float(alpha + (1.0 - alpha) * (1.0 - (1.0 - p_n) ** k))


def verify_theorem(alpha: float, p_n: float, k: int, trials: int, seed: int) -> float:
    """Monte Carlo estimate of the relabeled-to-target rate under the
    generative story: a sample starts at the target with probability alpha,
    then each of k independent poisoners relabels it with probability p_n.

    Returns the empirical mean; compare against :func:`stacked_expectation`.
    """
    if k < 1:
        raise ValueError("k must be at least 1")
    if trials < 1:
        raise ValueError("trials must be at least 1")
    rng = rng_from(seed)
    already_target = rng.random(trials) < alpha
    flips = rng.random((trials, k)) < p_n
    return float(np.mean(already_target | flips.any(axis=1)))


def select_samples(dataset: Dataset, rate: float, seed: int) -> list[int]:
    """Seeded uniform sample of round(rate * n) distinct indices, ascending."""
    if not 0.0 < rate < 1.0:
        raise ValueError("rate must lie strictly between 0 and 1")
    n = len(dataset)
    count = int(np.floor(rate * n + 0.5))
    picked = rng_from(seed).choice(n, size=count, replace=False)
    return sorted(int(i) for i in picked)


def relabel_draw(relabel_seed: int, sample_index: int, p_n: float) -> bool:
    """The Bernoulli(p_n) relabel decision for one sample. Keyed by index, so
    the draw is independent of selection order and of other samples."""
    u = rng_from(derive_seed(relabel_seed, f"sample-{sample_index}")).random()
    return bool(u < p_n)


def poison_dataset(
    train: Dataset, plan: PoisonPlan, f_clean: Model | None = None
) -> tuple[Dataset, PoisonPlan]:
    """Apply every instance of the plan to a copy of the training set.

    Smooth mode queries f_clean per selected sample for alpha and beta; hard
    mode skips the model entirely and always relabels. When instances overlap
    on a sample, triggers accumulate in instance order and the last instance's
    relabel decision determines the final label; alpha and beta are always
    estimated on the pristine image. Returns the poisoned dataset and a copy
    of the plan with per-sample records filled in.
    """
    if not plan.instances:
        raise ValueError("plan has no instances")
    if plan.mode == "smooth" and f_clean is None:
        raise ValueError("smooth poisoning needs the clean model")
    for inst in plan.instances:
        if inst.target_class >= train.class_count:
            raise ValueError(
                f"instance {inst.id} targets class {inst.target_class}, "
                f"dataset has {train.class_count} classes"
            )

    images = [ex.image for ex in train.examples]
    labels = [ex.label for ex in train.examples]
    filled: list[AttackInstance] = []
    for inst in plan.instances:
        picked = select_samples(train, inst.poison_rate, inst.selection_seed)
        records = []
        for i in picked:
            if plan.mode == "hard":
                alpha, beta, p_n, relabeled = 0.0, 1.0, 1.0, True
            else:
                pristine = train.examples[i].image
                alpha = estimate_alpha(f_clean, pristine, inst.target_class)
                beta = set_beta(f_clean, pristine)
                p_n = solve_pn(alpha, beta)
                relabeled = relabel_draw(inst.relabel_seed, i, p_n)
            images[i] = apply_injector(inst.injector, images[i])
            labels[i] = inst.target_class if relabeled else train.examples[i].label
            records.append(SmoothingRecord(i, alpha, beta, p_n, relabeled))
        filled.append(replace(inst, records=records))

    examples = [LabeledExample(img, lab) for img, lab in zip(images, labels)]
    poisoned = Dataset(examples, train.class_count, name=f"{train.name}-poisoned")
    return poisoned, PoisonPlan(plan.mode, filled)


def apply_plan(train: Dataset, plan: PoisonPlan) -> Dataset:
    """Replay a recorded plan on the same training set: no model, no RNG.

    Produces the identical poisoned dataset that :func:`poison_dataset`
    returned when it filled in the records.
    """
    images = [ex.image for ex in train.examples]
    labels = [ex.label for ex in train.examples]
    for inst in plan.instances:
        for rec in inst.records:
            i = rec.sample_index
            images[i] = apply_injector(inst.injector, images[i])
            labels[i] = inst.target_class if rec.relabeled else train.examples[i].label
    examples = [LabeledExample(img, lab) for img, lab in zip(images, labels)]
    return Dataset(examples, train.class_count, name=f"{train.name}-poisoned")


def plan_to_text(plan: PoisonPlan) -> str:
    """Line-oriented key=value form; floats use repr so parsing is lossless."""
    lines = [f"plan mode={plan.mode} instances={len(plan.instances)}"]
    for inst in plan.instances:
        lines.append(
            f"instance id={inst.id} rate={inst.poison_rate!r} target={inst.target_class} "
            f"selection_seed={inst.selection_seed} relabel_seed={inst.relabel_seed} "
            f"{spec_to_kv(inst.injector)}"
        )
        for rec in inst.records:
            lines.append(
                f"record index={rec.sample_index} alpha={rec.alpha!r} beta={rec.beta!r} "
                f"p_n={rec.p_n!r} relabeled={int(rec.relabeled)}"
            )
    return "\n".join(lines) + "\n"


def plan_from_text(text: str) -> PoisonPlan:
    mode: str | None = None
    instances: list[AttackInstance] = []
    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        word, _, rest = line.partition(" ")
        fields = {}
        for token in rest.split():
            if "=" not in token:
                raise ValueError(f"line {line_no}: malformed token {token!r}")
            key, value = token.split("=", 1)
            fields[key] = value
        try:
            if word == "plan":
                mode = fields["mode"]
            elif word == "instance":
                spec_tokens = [t for t in rest.split() if t.split("=", 1)[0] not in _INSTANCE_KEYS]
                instances.append(
                    AttackInstance(
                        id=fields["id"],
                        injector=spec_from_kv(" ".join(spec_tokens)),
                        poison_rate=float(fields["rate"]),
                        target_class=int(fields["target"]),
                        selection_seed=int(fields["selection_seed"]),
                        relabel_seed=int(fields["relabel_seed"]),
                    )
                )
            elif word == "record":
                if not instances:
                    raise ValueError(f"line {line_no}: record before any instance")
                instances[-1].records.append(
                    SmoothingRecord(
                        sample_index=int(fields["index"]),
                        alpha=float(fields["alpha"]),
                        beta=float(fields["beta"]),
                        p_n=float(fields["p_n"]),
                        relabeled=bool(int(fields["relabeled"])),
                    )
                )
            else:
                raise ValueError(f"line {line_no}: unknown directive {word!r}")
        except KeyError as missing:
            raise ValueError(f"line {line_no}: missing field {missing}") from None
    if mode is None:
        raise ValueError("plan text has no 'plan' line")
    return PoisonPlan(mode, instances)


def save_plan(plan: PoisonPlan, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(plan_to_text(plan))


def load_plan(path: str | Path) -> PoisonPlan:
    return plan_from_text(Path(path).read_text())
