"""Render the evaluation CSVs and metrics of a run directory into PNG figures
plus a short plain-text summary. File rendering only (Agg backend)."""

from __future__ import annotations

import csv
import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def _read_csv(path: Path) -> list[dict[str, str]]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _activation_figure(rows: list[dict[str, str]], value: str, ylabel: str, path: Path) -> None:
    ks = [int(r["k"]) for r in rows]
    means = [float(r[f"mean_{value}"]) for r in rows]
    stds = [float(r[f"std_{value}"]) for r in rows]
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.errorbar(ks, means, yerr=stds, marker="o", capsize=4)
    ax.set_xlabel("active triggers k")
    ax.set_ylabel(ylabel)
    ax.set_xticks(ks)
    ax.set_ylim(0.0, 1.05)
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def _strip_figure(rows: list[dict[str, str]], threshold: float | None, path: Path) -> None:
    lows = [float(r["bin_low"]) for r in rows]
    highs = [float(r["bin_high"]) for r in rows]
    widths = [h - l for l, h in zip(lows, highs)]
    clean = [int(r["clean_count"]) for r in rows]
    poisoned = [int(r["poisoned_count"]) for r in rows]
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.bar(lows, clean, width=widths, align="edge", alpha=0.6, label="clean")
    ax.bar(lows, poisoned, width=widths, align="edge", alpha=0.6, label="triggered")
    if threshold is not None:
        ax.axvline(threshold, color="black", linestyle="--", linewidth=1, label="threshold")
    ax.set_xlabel("overlay-prediction entropy")
    ax.set_ylabel("inputs")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def _cleanse_figure(rows: list[dict[str, str]], path: Path) -> None:
    classes = [int(r["class"]) for r in rows]
    norms = [float(r["mask_norm"]) for r in rows]
    colors = ["tab:red" if int(r["is_target"]) else "tab:blue" for r in rows]
    fig, ax = plt.subplots(figsize=(5, 3.5))
    bars = ax.bar(classes, norms, color=colors)
    for bar, row in zip(bars, rows):
        if int(row["is_flagged"]):
            bar.set_edgecolor("black")
            bar.set_linewidth(2)
    ax.set_xlabel("class (target in red, flagged outlined)")
    ax.set_ylabel("reverse-trigger mask L1 norm")
    ax.set_xticks(classes)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def _summary_lines(metrics: dict) -> list[str]:
    lines = [
        f"mode = {metrics.get('mode', '?')}",
        f"template = {metrics.get('template', '?')}",
        f"target_class = {metrics.get('target_class', '?')}",
        f"master_seed = {metrics.get('master_seed', '?')}",
    ]
    if "baseline_accuracy" in metrics:
        lines += [
            f"baseline_accuracy = {metrics['baseline_accuracy']:.4f}",
            f"victim_clean_accuracy = {metrics['clean_accuracy']:.4f}",
            f"accuracy_drop = {metrics['accuracy_drop']:.4f}",
            f"asr_all_triggers = {metrics['asr_full']:.4f}",
        ]
    strip = metrics.get("strip")
    if strip:
        lines += [
            f"strip_threshold = {strip['threshold']:.6f}",
            f"strip_realized_frr = {strip['frr_realized']:.4f}",
            f"strip_far = {strip['far']:.4f}",
        ]
    cleanse = metrics.get("cleanse")
    if cleanse:
        index = cleanse.get("anomaly_index")
        lines += [
            "cleanse_anomaly_index = "
            + (f"{index:.4f}" if index is not None else "undefined (zero spread)"),
            f"cleanse_flagged_class = {cleanse.get('flagged_class')}",
            f"cleanse_target_is_min_norm = {cleanse.get('target_is_min_norm')}",
        ]
    pilot = metrics.get("pilot")
    if pilot:
        lines.append(f"pilot_chosen = {pilot.get('chosen_id')}")
    return lines


def render_report(out_dir: str | Path) -> list[Path]:
    """Render every figure whose inputs exist; returns the files written."""
    out = Path(out_dir)
    metrics_path = out / "metrics.json"
    if not metrics_path.exists():
        raise FileNotFoundError(f"{metrics_path} not found: {out} is not a finished run directory")
    metrics: dict = json.loads(metrics_path.read_text())

    figures = out / "figures"
    figures.mkdir(parents=True, exist_ok=True)
    written: list[Path] = []

    asr_csv = out / "asr_by_activation.csv"
    if asr_csv.exists():
        target = figures / "asr_by_activation.png"
        _activation_figure(_read_csv(asr_csv), "asr", "attack success rate", target)
        written.append(target)

    prob_csv = out / "probability_by_activation.csv"
    if prob_csv.exists():
        target = figures / "probability_by_activation.png"
        _activation_figure(
            _read_csv(prob_csv), "probability", "mean target-class probability", target
        )
        written.append(target)

    hist_csv = out / "strip_histogram.csv"
    if hist_csv.exists():
        threshold = metrics.get("strip", {}).get("threshold")
        target = figures / "strip_entropy.png"
        _strip_figure(_read_csv(hist_csv), threshold, target)
        written.append(target)

    norms_csv = out / "cleanse_norms.csv"
    if norms_csv.exists():
        target = figures / "cleanse_norms.png"
        _cleanse_figure(_read_csv(norms_csv), target)
        written.append(target)

    summary = out / "summary.txt"
    summary.write_text("\n".join(_summary_lines(metrics)) + "\n")
    written.append(summary)
    return written
