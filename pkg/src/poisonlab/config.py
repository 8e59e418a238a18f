"""Experiment configuration: a flat key = value text format with dotted
section prefixes, parsed into one dataclass with validated defaults."""

from __future__ import annotations

from dataclasses import dataclass, fields, replace
from pathlib import Path

# (config key, dataclass field, value kind)
REGISTRY = [
    ("data.source", "data_source", "str"),
    ("data.class_count", "class_count", "int"),
    ("data.per_class", "per_class", "int"),
    ("data.side", "side", "int"),
    ("data.noise_std", "noise_std", "float"),
    ("data.test_fraction", "test_fraction", "float"),
    ("data.idx_train_images", "idx_train_images", "str"),
    ("data.idx_train_labels", "idx_train_labels", "str"),
    ("data.idx_test_images", "idx_test_images", "str"),
    ("data.idx_test_labels", "idx_test_labels", "str"),
    ("model.hidden", "hidden", "ints"),
    ("train.clean_epochs", "clean_epochs", "int"),
    ("train.clean_batch", "clean_batch", "int"),
    ("train.clean_lr", "clean_lr", "float"),
    ("train.clean_momentum", "clean_momentum", "float"),
    ("train.victim_epochs", "victim_epochs", "int"),
    ("train.victim_batch", "victim_batch", "int"),
    ("train.victim_lr", "victim_lr", "float"),
    ("train.victim_momentum", "victim_momentum", "float"),
    ("attack.mode", "mode", "str"),
    ("attack.template", "template", "str"),
    ("attack.target_class", "target_class", "int"),
    ("attack.smooth_count", "smooth_count", "int"),
    ("attack.smooth_rate", "smooth_rate", "float"),
    ("attack.hard_rate", "hard_rate", "float"),
    ("attack.pilot_rate", "pilot_rate", "float"),
    ("attack.pilot_epochs", "pilot_epochs", "int"),
    ("attack.patch_side", "patch_side", "int"),
    ("attack.sig_delta", "sig_delta", "float"),
    ("attack.warp_grid", "warp_grid", "int"),
    ("attack.warp_strength", "warp_strength", "float"),
    ("strip.overlays", "strip_overlays", "int"),
    ("strip.weight", "strip_weight", "float"),
    ("strip.frr", "strip_frr", "float"),
    ("strip.max_inputs", "strip_max_inputs", "int"),
    ("cleanse.steps", "cleanse_steps", "int"),
    ("cleanse.lr", "cleanse_lr", "float"),
    ("cleanse.penalty", "cleanse_penalty", "float"),
    ("cleanse.probe", "cleanse_probe", "int"),
    ("run.master_seed", "master_seed", "int"),
    ("run.save_datasets", "save_datasets", "bool"),
]

_BY_KEY = {key: (field, kind) for key, field, kind in REGISTRY}
_BY_FIELD = {field: (key, kind) for key, field, kind in REGISTRY}


@dataclass
class ExperimentConfig:
    # data
    data_source: str = "synthetic"
    class_count: int = 3
    per_class: int = 1000
    side: int = 16
    noise_std: float = 0.1
    test_fraction: float = 0.2
    idx_train_images: str = ""
    idx_train_labels: str = ""
    idx_test_images: str = ""
    idx_test_labels: str = ""
    # model
    hidden: tuple[int, ...] = (48,)
    # training
    clean_epochs: int = 12
    clean_batch: int = 32
    clean_lr: float = 0.15
    clean_momentum: float = 0.9
    victim_epochs: int = 12
    victim_batch: int = 32
    victim_lr: float = 0.15
    victim_momentum: float = 0.9
    # attack
    mode: str = "smooth"
    template: str = "patch"
    target_class: int = 2
    smooth_count: int = 4
    smooth_rate: float = 0.01
    hard_rate: float = 0.04
    pilot_rate: float = 0.01
    pilot_epochs: int = 3
    patch_side: int = 0  # 0 derives the patch side from the image side
    sig_delta: float = 0.05
    warp_grid: int = 4
    warp_strength: float = 0.75
    # entropy screen
    strip_overlays: int = 100
    strip_weight: float = 0.5
    strip_frr: float = 0.01
    strip_max_inputs: int = 0  # 0 screens every test input
    # trigger reverse-engineering
    cleanse_steps: int = 300
    cleanse_lr: float = 0.2
    cleanse_penalty: float = 0.03
    cleanse_probe: int = 150
    # run
    master_seed: int = 42
    save_datasets: bool = False

    def __post_init__(self) -> None:
        if self.data_source not in ("synthetic", "idx"):
            raise ValueError(f"data.source must be 'synthetic' or 'idx', got {self.data_source!r}")
        if self.data_source == "idx":
            missing = [
                k
                for k, v in (
                    ("data.idx_train_images", self.idx_train_images),
                    ("data.idx_train_labels", self.idx_train_labels),
                    ("data.idx_test_images", self.idx_test_images),
                    ("data.idx_test_labels", self.idx_test_labels),
                )
                if not v
            ]
            if missing:
                raise ValueError(f"idx source needs {', '.join(missing)}")
        if self.class_count < 2:
            raise ValueError("data.class_count must be at least 2")
        if self.side < 8:
            raise ValueError("data.side must be at least 8")
        if self.noise_std < 0:
            raise ValueError("data.noise_std must be nonnegative")
        if not 0.0 < self.test_fraction < 1.0:
            raise ValueError("data.test_fraction must lie strictly between 0 and 1")
        if not self.hidden or any(h < 1 for h in self.hidden):
            raise ValueError("model.hidden must be a nonempty list of positive widths")
        for name in ("clean_epochs", "clean_batch", "victim_epochs", "victim_batch",
                     "pilot_epochs", "cleanse_steps", "cleanse_probe", "strip_overlays",
                     "per_class", "smooth_count"):
            if getattr(self, name) < 1:
                key = _BY_FIELD[name][0]
                raise ValueError(f"{key} must be at least 1")
        if self.mode not in ("smooth", "hard"):
            raise ValueError(f"attack.mode must be 'smooth' or 'hard', got {self.mode!r}")
        if self.template not in ("patch", "sig", "warp"):
            raise ValueError(f"attack.template must be patch, sig, or warp, got {self.template!r}")
        if not 0 <= self.target_class < self.class_count:
            raise ValueError("attack.target_class must name a valid class")
        if self.smooth_count > 4:
            raise ValueError("attack.smooth_count is capped at the 4 stock trigger variants")
        for name in ("smooth_rate", "hard_rate", "pilot_rate", "strip_weight", "strip_frr"):
            if not 0.0 < getattr(self, name) < 1.0:
                key = _BY_FIELD[name][0]
                raise ValueError(f"{key} must lie strictly between 0 and 1")
        if self.strip_max_inputs < 0 or self.patch_side < 0:
            raise ValueError("counts must be nonnegative")
        if self.cleanse_lr <= 0 or self.cleanse_penalty < 0:
            raise ValueError("cleanse.lr must be positive and cleanse.penalty nonnegative")


def _coerce(kind: str, value: str, key: str):
    try:
        if kind == "int":
            return int(value)
        if kind == "float":
            return float(value)
        if kind == "bool":
            lowered = value.lower()
            if lowered in ("true", "1", "yes"):
                return True
            if lowered in ("false", "0", "no"):
                return False
            raise ValueError(value)
        if kind == "ints":
            return tuple(int(part) for part in value.split(",") if part.strip())
        return value
    except ValueError as exc:
        raise ValueError(f"config key {key}: cannot parse {value!r} as {kind}") from exc


def _render(kind: str, value) -> str:
    if kind == "bool":
        return "true" if value else "false"
    if kind == "ints":
        return ",".join(str(v) for v in value)
    if kind == "float":
        return repr(value)
    return str(value)


def parse_config_text(text: str) -> dict[str, str]:
    """key = value lines; blank lines and # comments (full or trailing) ignored."""
    out: dict[str, str] = {}
    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {line_no}: expected key = value, got {raw!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def config_from_mapping(mapping: dict[str, str]) -> ExperimentConfig:
    values = {}
    for key, raw in mapping.items():
        if key not in _BY_KEY:
            raise ValueError(f"unknown config key {key!r}")
        field_name, kind = _BY_KEY[key]
        values[field_name] = _coerce(kind, raw, key)
    return ExperimentConfig(**values)


def load_config(path: str | Path | None, seed: int | None = None) -> ExperimentConfig:
    """Defaults, overlaid by the file at `path` (if given), overlaid by `seed`."""
    mapping = parse_config_text(Path(path).read_text()) if path else {}
    cfg = config_from_mapping(mapping)
    if seed is not None:
        cfg = replace(cfg, master_seed=seed)
    return cfg


def config_to_text(config: ExperimentConfig) -> str:
    """Every key in registry order; parses back to an equal config."""
    lines = []
    for key, field_name, kind in REGISTRY:
        lines.append(f"{key} = {_render(kind, getattr(config, field_name))}")
    return "\n".join(lines) + "\n"


def default_config() -> ExperimentConfig:
    return ExperimentConfig()
