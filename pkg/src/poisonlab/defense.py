"""Detection-side instruments: entropy-based input screening (overlay blending)
and per-class trigger reverse-engineering with a median-deviation anomaly score."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .data import Dataset, Image, derive_seed, rng_from
from .nn import Model, ce_with_input_gradient, forward_batch

MAD_SCALE = 1.4826  # consistency constant for normally distributed residuals
ANOMALY_THRESHOLD = 2.0


@dataclass(frozen=True)
class StripConfig:
    overlay_count: int = 100
    weight: float = 0.5
    frr: float = 0.01
    seed: int = 0

    def __post_init__(self) -> None:
        if self.overlay_count < 1:
            raise ValueError("overlay_count must be at least 1")
        if not 0.0 < self.weight < 1.0:
            raise ValueError("weight must lie strictly between 0 and 1")
        if not 0.0 < self.frr < 1.0:
            raise ValueError("frr must lie strictly between 0 and 1")


def shannon_entropy(probabilities: np.ndarray) -> np.ndarray:
    """Rowwise -sum(p * ln p) with the 0 * ln 0 = 0 convention."""
    p = np.asarray(probabilities, dtype=np.float64)
    safe = np.where(p > 0.0, p, 1.0)
    terms = np.where(p > 0.0, p * np.log(safe), 0.0)
    return -terms.sum(axis=-1)


def strip_entropy(model: Model, image: Image, clean_pool: Dataset, config: StripConfig) -> float:
    """Mean prediction entropy of the input blended with seeded random clean
    overlays: blend = clamp(w * x + (1 - w) * overlay). A sticky, low-entropy
    response across overlays is the trigger signature."""
    if len(clean_pool) == 0:
        raise ValueError("clean overlay pool is empty")
    rng = rng_from(config.seed)
    picks = rng.integers(0, len(clean_pool), size=config.overlay_count)
    x = image.pixels
    blends = np.stack(
        [
            np.clip(
                config.weight * x + (1.0 - config.weight) * clean_pool[int(i)].image.pixels,
                0.0,
                1.0,
            ).reshape(-1)
            for i in picks
        ]
    )
    probs = forward_batch(model, blends)
    return float(shannon_entropy(probs).mean())


def strip_entropies(
    model: Model, images: list[Image], clean_pool: Dataset, config: StripConfig
) -> np.ndarray:
    """Entropy per input, each with its own overlay stream derived by index."""
    values = np.empty(len(images))
    for i, image in enumerate(images):
        cfg = replace(config, seed=derive_seed(config.seed, f"input-{i}"))
        values[i] = strip_entropy(model, image, clean_pool, cfg)
    return values


def strip_threshold(clean_entropies: np.ndarray, frr: float) -> float:
    """Detection boundary from clean traffic: the largest observed entropy
    value tau such that the fraction of clean entropies strictly below tau is
    at most frr. Inputs scoring below tau are flagged as trojaned."""
    values = np.asarray(clean_entropies, dtype=np.float64)
    if values.size == 0:
        raise ValueError("need at least one clean entropy")
    if not 0.0 < frr < 1.0:
        raise ValueError("frr must lie strictly between 0 and 1")
    ordered = np.sort(values)
    candidates = np.unique(ordered)
    below = np.searchsorted(ordered, candidates, side="left") / values.size
    return float(candidates[below <= frr][-1])


def strip_far(entropies: np.ndarray, threshold: float) -> float:
    """Fraction of (putatively trojaned) inputs at or above the threshold,
    i.e. the fraction the screen falsely accepts as clean."""
    values = np.asarray(entropies, dtype=np.float64)
    if values.size == 0:
        raise ValueError("need at least one entropy")
    return float(np.mean(values >= threshold))


def _sigmoid(t: np.ndarray) -> np.ndarray:
    out = np.empty_like(t)
    pos = t >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-t[pos]))
    e = np.exp(t[~pos])
    out[~pos] = e / (1.0 + e)
    return out


@dataclass(eq=False)
class TriggerPattern:
    """Result of reverse-engineering one class: blend mask in [0, 1] of shape
    (H, W), pattern in [0, 1] of shape (H, W, C), the mask's L1 norm, and the
    objective value at every optimization step."""

    mask: np.ndarray
    pattern: np.ndarray
    l1_norm: float
    objective_trace: np.ndarray


def cleanse_reverse_trigger(
    model: Model,
    probe: Dataset,
    target_class: int,
    steps: int = 300,
    learning_rate: float = 0.2,
    mask_penalty: float = 0.03,
    seed: int = 0,
) -> TriggerPattern:
    """Search for the smallest mask/pattern overlay that flips the probe set
    to `target_class`: minimize mean CE((1-m) * x + m * p -> target) plus
    mask_penalty * sum(m) by full-batch gradient descent. Mask and pattern are
    kept in (0, 1) via a logistic squash of free variables.

    A class reachable through a tiny overlay (a planted trigger) yields a much
    smaller final L1 norm than untampered classes.
    """
    if len(probe) == 0:
        raise ValueError("probe dataset is empty")
    if not 0 <= target_class < model.arch.output_dim:
        raise ValueError(f"target_class {target_class} outside [0, {model.arch.output_dim})")
    if steps < 1:
        raise ValueError("steps must be at least 1")
    if learning_rate <= 0:
        raise ValueError("learning_rate must be positive")
    if mask_penalty < 0:
        raise ValueError("mask_penalty must be nonnegative")

    h, w, c = probe.height, probe.width, probe.channels
    x = probe.stack()[0].reshape(len(probe), h, w, c)
    rng = rng_from(seed)
    theta_m = rng.normal(0.0, 0.1, size=(h, w))
    theta_p = rng.normal(0.0, 0.1, size=(h, w, c))

    trace = np.empty(steps)
    mask = pattern = None
    for step in range(steps):
        mask = _sigmoid(theta_m)
        pattern = _sigmoid(theta_p)
        m3 = mask[:, :, None]
        blended = (1.0 - m3)[None] * x + (m3 * pattern)[None]
        ce, dblend = ce_with_input_gradient(model, blended.reshape(len(probe), -1), target_class)
        trace[step] = ce + mask_penalty * mask.sum()
        dblend = dblend.reshape(len(probe), h, w, c)
        dmask = ((pattern[None] - x) * dblend).sum(axis=(0, 3)) + mask_penalty
        dpattern = (m3[None] * dblend).sum(axis=0)
        theta_m -= learning_rate * dmask * mask * (1.0 - mask)
        theta_p -= learning_rate * dpattern * pattern * (1.0 - pattern)

    mask = _sigmoid(theta_m)
    pattern = _sigmoid(theta_p)
    return TriggerPattern(mask, pattern, float(mask.sum()), trace)


@dataclass(frozen=True)
class AnomalyReport:
    """Robust outlier summary of per-class reverse-trigger mask norms."""

    mask_norms: tuple[float, ...]
    median: float
    mad: float
    anomaly_index: float | None
    flagged_class: int | None
    target_class: int
    target_is_min_norm: bool
    exceeds_threshold: bool


def anomaly_index(mask_norms: list[float] | np.ndarray, target_class: int) -> AnomalyReport:
    """Median-based outlier score of the smallest mask norm:
    (median - min) / (1.4826 * MAD). A degenerate spread (MAD = 0) yields a
    report with no index and no flagged class rather than an error."""
    norms = np.asarray(mask_norms, dtype=np.float64)
    if norms.size < 3:
        raise ValueError("need at least 3 class norms")
    if not 0 <= target_class < norms.size:
        raise ValueError(f"target_class {target_class} outside [0, {norms.size})")
    med = float(np.median(norms))
    mad = float(np.median(np.abs(norms - med)))
    smallest = int(np.argmin(norms))
    # value comparison so an exact tie with the minimum still counts
    target_is_min = bool(norms[target_class] == norms.min())
    if mad == 0.0:
        return AnomalyReport(
            mask_norms=tuple(float(v) for v in norms),
            median=med,
            mad=0.0,
            anomaly_index=None,
            flagged_class=None,
            target_class=target_class,
            target_is_min_norm=target_is_min,
            exceeds_threshold=False,
        )
    index = (med - float(norms.min())) / (MAD_SCALE * mad)
    return AnomalyReport(
        mask_norms=tuple(float(v) for v in norms),
        median=med,
        mad=mad,
        anomaly_index=index,
        flagged_class=smallest,
        target_class=target_class,
        target_is_min_norm=target_is_min,
        exceeds_threshold=index > ANOMALY_THRESHOLD,
    )
