"""Evaluation battery: linear probe, label-fraction fine-tuning, center-vs-
random crop robustness, augmentation-removal grids, and representation
diagnostics.

Probes operate on backbone features (the projection head is a pretraining
artifact). All evaluation-time resizes are bicubic; training-time probe
augmentation is random-resized-crop plus horizontal flip.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
import torchvision.transforms.functional as TF
from torchvision.transforms import InterpolationMode

from .config import RunConfig, build_run_config, parse_config_text
from .data import (DatasetManifest, ImageSample, LabelFractionSpec, load_image,
                   split_manifest, subsample_labels)
from .encoders import Encoder
from .losses import info_nce  # noqa: F401  (re-exported for diagnostics users)
from .training import cosine_lr, load_checkpoint
from .views import AugmentationPolicy, augment, random_resized_crop, sample_stream


class EvalError(RuntimeError):
    pass


@dataclass
class ProbeResult:
    top1: float
    top5: Optional[float]
    protocol: str  # linear | finetune
    eval_crop: str  # center | random
    label_fraction: float
    epochs_trained: int
    notes: dict = field(default_factory=dict)

    def __post_init__(self):
        if not 0.0 <= self.top1 <= 1.0:
            raise EvalError(f"top1 out of range: {self.top1}")
        if self.top5 is not None and not self.top1 <= self.top5 <= 1.0:
            raise EvalError(f"need top1 <= top5 <= 1, got {self.top1}, {self.top5}")

    def to_json(self) -> str:
        return json.dumps(self.__dict__, indent=2) + "\n"


@dataclass
class ProbeArtifact:
    """Trained linear head plus enough metadata to re-evaluate it."""

    classifier_state: dict
    feature_dim: int
    num_classes: int


@dataclass
class AblationGrid:
    entries: list  # (preset name, ProbeResult)

    def to_json(self) -> str:
        return json.dumps([{"preset": name, **res.__dict__}
                           for name, res in self.entries], indent=2) + "\n"


# ---------------------------------------------------------------------------
# checkpoint plumbing
# ---------------------------------------------------------------------------

def encoder_from_checkpoint(path: str | Path) -> tuple[Encoder, RunConfig]:
    """Rebuild the query encoder (and its run config) from a checkpoint."""
    payload = load_checkpoint(path)
    cfg = build_run_config(parse_config_text(payload["config_text"], source=str(path)))
    encoder = Encoder(cfg.arch)
    encoder.load_state_dict(payload["query"])
    return encoder, cfg


def eval_resize_size(output_size: int) -> int:
    """Shorter-side eval resize, preserving the 256:224 ratio at any scale."""
    return int(math.floor(output_size * 256 / 224))


# ---------------------------------------------------------------------------
# evaluation-time view pipelines
# ---------------------------------------------------------------------------

def _to_float(pixels: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(pixels)).permute(2, 0, 1).float() / 255.0


def _normalize(img: torch.Tensor, policy: AugmentationPolicy) -> torch.Tensor:
    return TF.normalize(img, list(policy.normalize_mean), list(policy.normalize_std))


def center_eval_view(sample: ImageSample, policy: AugmentationPolicy) -> torch.Tensor:
    """Bicubic shorter-side resize then center crop; fully deterministic."""
    rs = eval_resize_size(policy.output_size)
    img = TF.resize(_to_float(sample.pixels), rs,
                    interpolation=InterpolationMode.BICUBIC, antialias=True)
    img = TF.center_crop(img, [policy.output_size, policy.output_size])
    return _normalize(img.clamp(0.0, 1.0), policy)


def random_eval_view(sample: ImageSample, policy: AugmentationPolicy,
                     rng: np.random.Generator) -> torch.Tensor:
    """Square bicubic resize then a seeded random crop."""
    rs = eval_resize_size(policy.output_size)
    img = TF.resize(_to_float(sample.pixels), [rs, rs],
                    interpolation=InterpolationMode.BICUBIC, antialias=True)
    s = policy.output_size
    top = int(rng.integers(0, rs - s + 1))
    left = int(rng.integers(0, rs - s + 1))
    img = img[:, top:top + s, left:left + s]
    return _normalize(img.clamp(0.0, 1.0), policy)


def probe_train_view(sample: ImageSample, policy: AugmentationPolicy,
                     rng: np.random.Generator) -> torch.Tensor:
    """Random-resized-crop + flip + normalize (the probe training recipe)."""
    s_crop, s_aug = rng.spawn(2)
    img, _ = random_resized_crop(sample, policy, s_crop)
    probe_policy = policy.with_ops({"flip", "normalize"})
    return augment(img, probe_policy, s_aug)


# ---------------------------------------------------------------------------
# shared training/eval loops
# ---------------------------------------------------------------------------

def _check_labels(train: DatasetManifest, eval_m: DatasetManifest) -> int:
    if train.num_classes != eval_m.num_classes:
        raise EvalError(f"label spaces differ: train has {train.num_classes} classes, "
                        f"eval has {eval_m.num_classes}")
    return train.num_classes


def _topk_correct(logits: torch.Tensor, labels: torch.Tensor, k: int) -> int:
    topk = logits.topk(min(k, logits.shape[1]), dim=1).indices
    return (topk == labels.unsqueeze(1)).any(dim=1).sum().item()


def _iter_batches(n: int, batch_size: int, order=None):
    idx = np.arange(n) if order is None else order
    for start in range(0, n, batch_size):
        chunk = idx[start:start + batch_size]
        if len(chunk):
            yield chunk


@torch.no_grad()
def _center_features(encoder: Encoder, manifest: DatasetManifest,
                     policy: AugmentationPolicy, batch_size: int) -> torch.Tensor:
    encoder.eval()
    feats = []
    for chunk in _iter_batches(len(manifest), batch_size):
        batch = torch.stack([center_eval_view(load_image(manifest.entries[i]), policy)
                             for i in chunk])
        feats.append(encoder.features(batch))
    return torch.cat(feats)


def _eval_classifier(classifier: nn.Module, feats: torch.Tensor,
                     labels: torch.Tensor) -> tuple[float, Optional[float]]:
    with torch.no_grad():
        logits = classifier(feats)
    n = len(labels)
    top1 = _topk_correct(logits, labels, 1) / n
    num_classes = logits.shape[1]
    top5 = _topk_correct(logits, labels, 5) / n if num_classes > 5 else None
    return top1, top5


# ---------------------------------------------------------------------------
# linear probe
# ---------------------------------------------------------------------------

def train_linear_classifier(encoder: Encoder, cfg: RunConfig,
                            train_manifest: DatasetManifest, num_classes: int,
                            epochs: int, seed: int) -> nn.Linear:
    """Train a linear head on frozen features; never touches encoder weights."""
    policy = cfg.policy
    batch_size = min(cfg.probe_batch_size, len(train_manifest))

    encoder.eval()
    for p in encoder.parameters():
        p.requires_grad_(False)

    torch.manual_seed(seed)
    classifier = nn.Linear(encoder.feature_dim, num_classes)
    optimizer = torch.optim.SGD(classifier.parameters(), lr=cfg.probe_lr,
                                momentum=cfg.probe_momentum, weight_decay=0.0)
    labels = torch.from_numpy(train_manifest.labels())
    steps_per_epoch = math.ceil(len(train_manifest) / batch_size)
    total_steps = epochs * steps_per_epoch

    step = 0
    for epoch in range(epochs):
        order = np.random.default_rng(
            np.random.SeedSequence([seed, epoch, 55331])).permutation(len(train_manifest))
        for chunk in _iter_batches(len(train_manifest), batch_size, order):
            batch = torch.stack([
                probe_train_view(load_image(train_manifest.entries[i]), policy,
                                 sample_stream(seed, epoch, train_manifest.entries[i].sample_id))
                for i in chunk])
            with torch.no_grad():
                feats = encoder.features(batch)
            logits = classifier(feats)
            loss = F.cross_entropy(logits, labels[chunk])
            for g in optimizer.param_groups:
                g["lr"] = cosine_lr(step, total_steps, cfg.probe_lr)
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            step += 1
    return classifier


def linear_probe(checkpoint: str | Path, train_manifest: DatasetManifest,
                 eval_manifest: DatasetManifest, epochs: Optional[int] = None,
                 seed: int = 0) -> tuple[ProbeResult, ProbeArtifact]:
    """Frozen-backbone linear classification: returns result + trained head."""
    encoder, cfg = encoder_from_checkpoint(checkpoint)
    num_classes = _check_labels(train_manifest, eval_manifest)
    epochs = cfg.probe_epochs if epochs is None else epochs
    classifier = train_linear_classifier(encoder, cfg, train_manifest, num_classes,
                                         epochs, seed)
    eval_feats = _center_features(encoder, eval_manifest, cfg.policy,
                                  cfg.probe_batch_size)
    eval_labels = torch.from_numpy(eval_manifest.labels())
    top1, top5 = _eval_classifier(classifier, eval_feats, eval_labels)
    result = ProbeResult(top1=top1, top5=top5, protocol="linear", eval_crop="center",
                         label_fraction=1.0, epochs_trained=epochs)
    artifact = ProbeArtifact(classifier_state=classifier.state_dict(),
                             feature_dim=encoder.feature_dim, num_classes=num_classes)
    return result, artifact


# ---------------------------------------------------------------------------
# fine-tuning at a label fraction
# ---------------------------------------------------------------------------

def _finetune_once(checkpoint, subset: DatasetManifest, eval_manifest: DatasetManifest,
                   epochs: int, backbone_lr: float, head_mult: float,
                   seed: int) -> tuple[float, Optional[float], nn.Module, Encoder]:
    encoder, cfg = encoder_from_checkpoint(checkpoint)
    num_classes = eval_manifest.num_classes
    policy = cfg.policy
    batch_size = min(cfg.probe_batch_size, len(subset))

    torch.manual_seed(seed)
    classifier = nn.Linear(encoder.feature_dim, num_classes)
    optimizer = torch.optim.SGD([
        {"params": encoder.parameters(), "lr": backbone_lr},
        {"params": classifier.parameters(), "lr": backbone_lr * head_mult},
    ], momentum=cfg.probe_momentum, weight_decay=0.0)
    labels = torch.from_numpy(subset.labels())
    steps_per_epoch = math.ceil(len(subset) / batch_size)
    total_steps = max(1, epochs * steps_per_epoch)

    encoder.train()
    step = 0
    for epoch in range(epochs):
        order = np.random.default_rng(
            np.random.SeedSequence([seed, epoch, 77003])).permutation(len(subset))
        for chunk in _iter_batches(len(subset), batch_size, order):
            batch = torch.stack([
                probe_train_view(load_image(subset.entries[i]), policy,
                                 sample_stream(seed, epoch, subset.entries[i].sample_id))
                for i in chunk])
            logits = classifier(encoder.features(batch))
            loss = F.cross_entropy(logits, labels[chunk])
            frac = cosine_lr(step, total_steps, 1.0)
            optimizer.param_groups[0]["lr"] = backbone_lr * frac
            optimizer.param_groups[1]["lr"] = backbone_lr * head_mult * frac
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            step += 1

    eval_feats = _center_features(encoder, eval_manifest, policy, batch_size)
    eval_labels = torch.from_numpy(eval_manifest.labels())
    top1, top5 = _eval_classifier(classifier, eval_feats, eval_labels)
    return top1, top5, classifier, encoder


def finetune_fraction(checkpoint: str | Path, train_manifest: DatasetManifest,
                      eval_manifest: DatasetManifest, fraction: float,
                      epochs: Optional[int] = None, seed: int = 0) -> ProbeResult:
    """Fine-tune the whole network on a balanced label fraction.

    The backbone-lr grid is selected on an internal validation split of the
    labeled subset; the winning setting's eval accuracy is reported and the
    full grid is recorded in the result's notes.
    """
    _, cfg = encoder_from_checkpoint(checkpoint)
    _check_labels(train_manifest, eval_manifest)
    epochs = cfg.finetune_epochs if epochs is None else epochs
    subset = subsample_labels(train_manifest, LabelFractionSpec(fraction=fraction, seed=seed))

    grid = list(cfg.finetune_lr_grid)
    notes: dict = {"lr_grid": {}}
    if len(grid) > 1 and len(subset) >= 10:
        fit, val = split_manifest(subset, val_fraction=0.2, seed=seed)
        scores = {}
        for lr in grid:
            val_top1, _, _, _ = _finetune_once(checkpoint, fit, val, epochs, lr,
                                               cfg.finetune_head_lr_multiplier, seed)
            scores[lr] = val_top1
            notes["lr_grid"][str(lr)] = val_top1
        best_lr = max(grid, key=lambda lr: (scores[lr], -lr))
    else:
        best_lr = grid[0]
    notes["selected_lr"] = best_lr

    top1, top5, _, _ = _finetune_once(checkpoint, subset, eval_manifest, epochs,
                                      best_lr, cfg.finetune_head_lr_multiplier, seed)
    return ProbeResult(top1=top1, top5=top5, protocol="finetune", eval_crop="center",
                       label_fraction=fraction, epochs_trained=epochs, notes=notes)


# ---------------------------------------------------------------------------
# center-vs-random crop robustness
# ---------------------------------------------------------------------------

def crop_test(checkpoint: str | Path, eval_manifest: DatasetManifest, mode: str,
              probe: Optional[ProbeArtifact], draws: int = 1,
              seed: int = 0) -> ProbeResult:
    """Evaluate a fixed linear probe under center or random eval-time crops."""
    if probe is None:
        raise EvalError("crop_test requires a trained linear probe artifact")
    if mode not in ("center", "random"):
        raise EvalError(f"unknown crop-test mode {mode!r}")
    if draws < 1:
        raise EvalError(f"draws must be >= 1, got {draws}")
    encoder, cfg = encoder_from_checkpoint(checkpoint)
    policy = cfg.policy
    classifier = nn.Linear(probe.feature_dim, probe.num_classes)
    classifier.load_state_dict(probe.classifier_state)
    encoder.eval()
    labels = torch.from_numpy(eval_manifest.labels())
    batch_size = cfg.probe_batch_size

    if mode == "center":
        feats = _center_features(encoder, eval_manifest, policy, batch_size)
        top1, top5 = _eval_classifier(classifier, feats, labels)
        return ProbeResult(top1=top1, top5=top5, protocol="linear", eval_crop="center",
                           label_fraction=1.0, epochs_trained=0,
                           notes={"draws": 1})

    draw_top1, draw_top5 = [], []
    for draw in range(draws):
        feats = []
        with torch.no_grad():
            for chunk in _iter_batches(len(eval_manifest), batch_size):
                batch = torch.stack([
                    random_eval_view(load_image(eval_manifest.entries[i]), policy,
                                     sample_stream(seed, draw, eval_manifest.entries[i].sample_id))
                    for i in chunk])
                feats.append(encoder.features(batch))
        top1, top5 = _eval_classifier(classifier, torch.cat(feats), labels)
        draw_top1.append(top1)
        draw_top5.append(top5)
    top5_out = (sum(draw_top5) / draws) if draw_top5[0] is not None else None
    return ProbeResult(top1=sum(draw_top1) / draws, top5=top5_out, protocol="linear",
                       eval_crop="random", label_fraction=1.0, epochs_trained=0,
                       notes={"draws": draws})


# ---------------------------------------------------------------------------
# augmentation-removal grid
# ---------------------------------------------------------------------------

def ablate_augmentations(base_entries: dict, presets: list[str],
                         train_manifest: DatasetManifest,
                         eval_manifest: DatasetManifest,
                         probe_epochs: Optional[int] = None,
                         seed: int = 0) -> AblationGrid:
    """One pretrain + probe per policy preset, otherwise identical config.

    base_entries is a parsed config entry map; output dirs get a per-preset
    suffix so runs never collide.
    """
    from .training import pretrain  # local import to avoid cycle at module load

    grid = []
    for preset in presets:
        AugmentationPolicy.preset(preset)  # validates the name early
        entries = dict(base_entries)
        entries["aug.preset"] = preset
        base_out = entries.get("output_dir", "runs/ablate")
        entries["output_dir"] = f"{base_out}_{preset}"
        cfg = build_run_config(entries)
        ckpt = pretrain(cfg)
        result, _ = linear_probe(ckpt, train_manifest, eval_manifest,
                                 epochs=probe_epochs, seed=seed)
        grid.append((preset, result))
    return AblationGrid(entries=grid)


# ---------------------------------------------------------------------------
# diagnostics
# ---------------------------------------------------------------------------

@torch.no_grad()
def diagnostics(checkpoint: str | Path, manifest: DatasetManifest,
                seed: int = 0, max_samples: int = 512) -> dict:
    """Collapse/quality telemetry on normalized projection embeddings."""
    encoder, cfg = encoder_from_checkpoint(checkpoint)
    policy = cfg.policy
    encoder.eval()
    n = min(len(manifest), max_samples)
    entries = manifest.entries[:n]

    embs, aligned_sq_dists = [], []
    for chunk in _iter_batches(n, cfg.probe_batch_size):
        batch = torch.stack([center_eval_view(load_image(entries[i]), policy)
                             for i in chunk])
        embs.append(encoder(batch))
        pairs_a, pairs_b = [], []
        for i in chunk:
            stream = sample_stream(seed, 90001, entries[i].sample_id)
            s1, s2 = stream.spawn(2)
            sample = load_image(entries[i])
            a, _ = random_resized_crop(sample, policy, s1)
            b, _ = random_resized_crop(sample, policy, s2)
            pairs_a.append(_normalize(a, policy))
            pairs_b.append(_normalize(b, policy))
        za = encoder(torch.stack(pairs_a))
        zb = encoder(torch.stack(pairs_b))
        aligned_sq_dists.append(((za - zb) ** 2).sum(dim=1))

    z = torch.cat(embs)
    labels = torch.from_numpy(np.array([e.label for e in entries], dtype=np.int64))
    per_dim_std = z.std(dim=0, correction=0)
    cos = z @ z.T
    same = labels.unsqueeze(0) == labels.unsqueeze(1)
    off_diag = ~torch.eye(n, dtype=torch.bool)
    same_mask = same & off_diag
    diff_mask = ~same & off_diag
    sq_dists = (2 - 2 * cos).clamp(min=0)
    uniformity = torch.log(torch.exp(-2 * sq_dists[off_diag]).mean()).item()
    return {
        "embedding_std_mean": per_dim_std.mean().item(),
        "embedding_std_min": per_dim_std.min().item(),
        "same_class_cosine": cos[same_mask].mean().item() if same_mask.any() else float("nan"),
        "diff_class_cosine": cos[diff_mask].mean().item() if diff_mask.any() else float("nan"),
        "alignment": torch.cat(aligned_sq_dists).mean().item(),
        "uniformity": uniformity,
        "num_samples": n,
    }
