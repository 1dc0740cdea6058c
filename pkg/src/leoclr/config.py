"""Run configuration: flat dotted-key text documents with typed defaults.

Format: one `key = value` per line, `#` comments, blank lines ignored.
Unknown keys are rejected with the offending line number so typos cannot
silently fall back to defaults. The resolved document (every key, canonical
order) is echoed into each run's output directory and hashed for resume
compatibility checks.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional

from .encoders import ArchSpec
from .losses import ContrastiveConfig
from .views import ALL_OPS, AugmentationPolicy


class ConfigError(ValueError):
    """Config parse or validation failure; message carries source:line."""


def _parse_bool(s: str) -> bool:
    low = s.strip().lower()
    if low in ("true", "1", "yes"):
        return True
    if low in ("false", "0", "no"):
        return False
    raise ValueError(f"expected true/false, got {s!r}")


def _parse_floats(s: str) -> tuple[float, ...]:
    return tuple(float(p) for p in s.split(","))


def _parse_ints(s: str) -> tuple[int, ...]:
    s = s.strip()
    if not s:
        return ()
    return tuple(int(p) for p in s.split(","))


def _parse_str(s: str) -> str:
    return s.strip()


@dataclass(frozen=True)
class _Key:
    default: object
    parse: Callable[[str], object]
    help: str


# Registry order defines the canonical echo order.
REGISTRY: dict[str, _Key] = {
    # dataset
    "dataset.format": _Key("synthetic", _parse_str, "folder | cifar-binary | synthetic"),
    "dataset.root": _Key("", _parse_str, "corpus root (folder/cifar-binary formats)"),
    "dataset.n": _Key(1024, int, "synthetic corpus size"),
    "dataset.image_size": _Key(32, int, "synthetic image side, pixels"),
    "dataset.num_classes": _Key(4, int, "synthetic class count (max 8)"),
    "dataset.seed": _Key(0, int, "synthetic generation seed"),
    # architecture
    "arch.name": _Key("cnn4", _parse_str, "resnet18 | resnet50 | cnn4 | mlp"),
    "arch.width": _Key(16, int, "cnn4 base width / mlp hidden width"),
    "arch.proj_dim": _Key(128, int, "projection head output dimension"),
    "arch.small_input": _Key(True, _parse_bool, "resnets: 3x3 stride-1 stem for small images"),
    # objective
    "loss.tau": _Key(0.2, float, "softmax temperature"),
    "loss.loss_mode": _Key("leoclr", _parse_str,
                           "leoclr | moco_baseline | end_to_end | random_anchor | "
                           "attract_all | end_to_end_baseline"),
    "loss.reduction": _Key("mean", _parse_str, "mean | sum over the batch"),
    # augmentation
    "aug.preset": _Key("baseline", _parse_str,
                       "baseline | crop_only | no_grayscale | no_color"),
    "aug.output_size": _Key(32, int, "view side, pixels"),
    "aug.crop_scale_min": _Key(0.2, float, "random-crop area fraction lower bound"),
    "aug.crop_scale_max": _Key(1.0, float, "random-crop area fraction upper bound"),
    "aug.flip_prob": _Key(0.5, float, "horizontal flip probability"),
    "aug.jitter_prob": _Key(0.8, float, "color jitter probability"),
    "aug.jitter_strength": _Key((0.4, 0.4, 0.4, 0.1), _parse_floats,
                                "brightness,contrast,saturation,hue"),
    "aug.grayscale_prob": _Key(0.2, float, "grayscale probability"),
    "aug.blur_prob": _Key(0.5, float, "gaussian blur probability"),
    "aug.blur_sigma": _Key((0.1, 2.0), _parse_floats, "blur sigma range lo,hi"),
    "aug.normalize_mean": _Key((0.485, 0.456, 0.406), _parse_floats, "per-channel mean"),
    "aug.normalize_std": _Key((0.229, 0.224, 0.225), _parse_floats, "per-channel std"),
    # optimizer + schedule
    "optimizer.lr": _Key(0.03, float, "initial SGD learning rate"),
    "optimizer.momentum": _Key(0.9, float, "SGD momentum"),
    "optimizer.weight_decay": _Key(1e-4, float, "SGD weight decay"),
    "schedule.kind": _Key("cosine", _parse_str, "cosine | step"),
    "schedule.milestones": _Key((), _parse_ints, "step schedule: epoch milestones"),
    "schedule.gamma": _Key(0.1, float, "step schedule decay factor"),
    # training loop
    "batch_size": _Key(64, int, "samples per step"),
    "epochs": _Key(30, int, "training epochs"),
    "m": _Key(0.999, float, "momentum-encoder EMA coefficient"),
    "queue.capacity": _Key(4096, int, "negative queue size K"),
    "queue.enqueue": _Key("both", _parse_str, "both | first_only key views enqueued"),
    "seed": _Key(0, int, "run seed"),
    "output_dir": _Key("runs/out", _parse_str, "run output directory"),
    "checkpoint_interval": _Key(0, int, "checkpoint every N steps (0: final only)"),
    "collapse_floor": _Key(0.01, float, "embedding-std warning threshold"),
    # evaluation defaults (overridable by CLI flags)
    "probe.epochs": _Key(100, int, "linear-probe training epochs"),
    "probe.lr": _Key(30.0, float, "linear-probe initial learning rate"),
    "probe.momentum": _Key(0.9, float, "linear-probe SGD momentum"),
    "probe.batch_size": _Key(64, int, "probe/finetune batch size"),
    "finetune.lr_grid": _Key((0.01, 0.001), _parse_floats, "backbone lr grid"),
    "finetune.head_lr_multiplier": _Key(10.0, float, "classifier lr / backbone lr"),
    "finetune.epochs": _Key(30, int, "finetune epochs default"),
    "crop_test.draws": _Key(1, int, "random-crop eval draws per image"),
}


def parse_config_text(text: str, source: str = "config") -> dict:
    """Parse `key = value` lines; raises ConfigError anchored to source:line."""
    entries: dict[str, object] = {}
    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{line_no}: expected 'key = value', got {raw!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        value = value.split("#", 1)[0].strip()
        if key not in REGISTRY:
            raise ConfigError(f"{source}:{line_no}: unknown key {key!r}")
        if key in entries:
            raise ConfigError(f"{source}:{line_no}: duplicate key {key!r}")
        try:
            entries[key] = REGISTRY[key].parse(value)
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"{source}:{line_no}: bad value for {key!r}: {exc}") from exc
    return entries


def load_config_file(path: str | Path) -> dict:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config_text(text, source=str(path))


def apply_overrides(entries: dict, overrides: list[str]) -> dict:
    """Apply `key=value` strings on top of parsed entries (CLI --override)."""
    out = dict(entries)
    for ov in overrides:
        if "=" not in ov:
            raise ConfigError(f"override {ov!r}: expected key=value")
        key, _, value = ov.partition("=")
        key, value = key.strip(), value.strip()
        if key not in REGISTRY:
            raise ConfigError(f"override {ov!r}: unknown key {key!r}")
        try:
            out[key] = REGISTRY[key].parse(value)
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"override {ov!r}: bad value: {exc}") from exc
    return out


def resolve(entries: dict) -> dict:
    """Full key->value map: defaults overlaid with parsed entries."""
    full = {k: spec.default for k, spec in REGISTRY.items()}
    full.update(entries)
    return full


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(_fmt(v) for v in value)
    return str(value)


def canonical_text(full: dict) -> str:
    lines = [f"{k} = {_fmt(full[k])}" for k in REGISTRY]
    return "\n".join(lines) + "\n"


def config_hash(full: dict) -> str:
    return hashlib.sha256(canonical_text(full).encode()).hexdigest()


def config_diff(a: dict, b: dict) -> list[str]:
    """Human-readable key-level differences between two resolved configs."""
    out = []
    for k in REGISTRY:
        if a.get(k) != b.get(k):
            out.append(f"{k}: {_fmt(a.get(k))} != {_fmt(b.get(k))}")
    return out


@dataclass(frozen=True)
class RunConfig:
    """Typed view over a resolved config document."""

    full: tuple  # canonical (key, value) pairs; hash/echo source of truth
    arch: ArchSpec
    loss: ContrastiveConfig
    policy: AugmentationPolicy
    dataset_format: str
    dataset_root: str
    dataset_n: int
    dataset_image_size: int
    dataset_num_classes: int
    dataset_seed: int
    lr: float
    momentum: float
    weight_decay: float
    schedule_kind: str
    schedule_milestones: tuple[int, ...]
    schedule_gamma: float
    batch_size: int
    epochs: int
    m: float
    queue_capacity: int
    enqueue: str
    seed: int
    output_dir: str
    checkpoint_interval: int
    collapse_floor: float
    probe_epochs: int
    probe_lr: float
    probe_momentum: float
    probe_batch_size: int
    finetune_lr_grid: tuple[float, ...]
    finetune_head_lr_multiplier: float
    finetune_epochs: int
    crop_test_draws: int

    def as_dict(self) -> dict:
        return dict(self.full)

    def text(self) -> str:
        return canonical_text(self.as_dict())

    def hash(self) -> str:
        return config_hash(self.as_dict())


def build_run_config(entries: dict) -> RunConfig:
    """Validate a parsed entry map and assemble the typed RunConfig."""
    full = resolve(entries)

    if full["dataset.format"] not in ("folder", "cifar-binary", "synthetic"):
        raise ConfigError(f"dataset.format: unknown format {full['dataset.format']!r}")
    if full["dataset.format"] != "synthetic" and not full["dataset.root"]:
        raise ConfigError(f"dataset.root required for format {full['dataset.format']!r}")
    for key in ("batch_size", "queue.capacity", "dataset.n", "aug.output_size",
                "probe.epochs", "probe.batch_size"):
        if full[key] <= 0:
            raise ConfigError(f"{key}: must be positive, got {full[key]}")
    if full["epochs"] < 0:
        raise ConfigError(f"epochs: must be >= 0, got {full['epochs']}")
    if not 0.0 <= full["m"] < 1.0:
        raise ConfigError(f"m: must be in [0, 1), got {full['m']}")
    if full["queue.enqueue"] not in ("both", "first_only"):
        raise ConfigError(f"queue.enqueue: expected both|first_only, got {full['queue.enqueue']!r}")
    if full["schedule.kind"] not in ("cosine", "step"):
        raise ConfigError(f"schedule.kind: expected cosine|step, got {full['schedule.kind']!r}")
    if len(full["aug.jitter_strength"]) != 4:
        raise ConfigError("aug.jitter_strength: expected 4 comma-separated values")
    for key in ("aug.normalize_mean", "aug.normalize_std"):
        if len(full[key]) != 3:
            raise ConfigError(f"{key}: expected 3 comma-separated values")
    if len(full["aug.blur_sigma"]) != 2:
        raise ConfigError("aug.blur_sigma: expected lo,hi")

    try:
        base = AugmentationPolicy.preset(full["aug.preset"])
        policy = AugmentationPolicy(
            crop_scale_range=(full["aug.crop_scale_min"], full["aug.crop_scale_max"]),
            output_size=full["aug.output_size"],
            flip_prob=full["aug.flip_prob"],
            jitter_strength=tuple(full["aug.jitter_strength"]),
            jitter_prob=full["aug.jitter_prob"],
            grayscale_prob=full["aug.grayscale_prob"],
            blur_prob=full["aug.blur_prob"],
            blur_sigma=tuple(full["aug.blur_sigma"]),
            normalize_mean=tuple(full["aug.normalize_mean"]),
            normalize_std=tuple(full["aug.normalize_std"]),
            enabled_ops=base.enabled_ops,
        )
        arch = ArchSpec(name=full["arch.name"], width=full["arch.width"],
                        proj_dim=full["arch.proj_dim"], input_size=full["aug.output_size"],
                        small_input=full["arch.small_input"])
        loss = ContrastiveConfig(tau=full["loss.tau"], loss_mode=full["loss.loss_mode"],
                                 reduction=full["loss.reduction"])
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc

    return RunConfig(
        full=tuple(sorted(full.items())),
        arch=arch, loss=loss, policy=policy,
        dataset_format=full["dataset.format"], dataset_root=full["dataset.root"],
        dataset_n=full["dataset.n"], dataset_image_size=full["dataset.image_size"],
        dataset_num_classes=full["dataset.num_classes"], dataset_seed=full["dataset.seed"],
        lr=full["optimizer.lr"], momentum=full["optimizer.momentum"],
        weight_decay=full["optimizer.weight_decay"],
        schedule_kind=full["schedule.kind"], schedule_milestones=full["schedule.milestones"],
        schedule_gamma=full["schedule.gamma"],
        batch_size=full["batch_size"], epochs=full["epochs"], m=full["m"],
        queue_capacity=full["queue.capacity"], enqueue=full["queue.enqueue"],
        seed=full["seed"], output_dir=full["output_dir"],
        checkpoint_interval=full["checkpoint_interval"], collapse_floor=full["collapse_floor"],
        probe_epochs=full["probe.epochs"], probe_lr=full["probe.lr"],
        probe_momentum=full["probe.momentum"], probe_batch_size=full["probe.batch_size"],
        finetune_lr_grid=full["finetune.lr_grid"],
        finetune_head_lr_multiplier=full["finetune.head_lr_multiplier"],
        finetune_epochs=full["finetune.epochs"],
        crop_test_draws=full["crop_test.draws"],
    )


def default_config_text() -> str:
    """Documented default config: every key, its default, and a help comment."""
    lines = []
    for key, spec in REGISTRY.items():
        lines.append(f"{key} = {_fmt(spec.default)}  # {spec.help}")
    return "\n".join(lines) + "\n"
