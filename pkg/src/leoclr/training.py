"""Pretraining loop: batch views, mode-dispatched loss, SGD on the query
encoder, EMA after the optimizer step, then queue maintenance.

Step sequencing contract: the negatives snapshot for step t is taken before
the loss, and the step's own keys are enqueued only after the optimizer and
EMA updates — keys never serve as their own negatives.

All data-path randomness flows through named numpy streams keyed by
(seed, epoch, sample), so runs are reproducible and checkpoints carry no
generator state for the data pipeline.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from . import __version__
from .config import (ConfigError, RunConfig, config_diff, parse_config_text, resolve)
from .data import DatasetManifest, load_image, load_manifest, make_synthetic_corpus
from .encoders import init_pair
from .losses import LossBreakdown, total_loss
from .negatives import NegativeQueue
from .views import ViewTriplet, augment, make_views, random_resized_crop, sample_stream

SCHEMA_VERSION = 1
CHECKPOINT_VERSION = 1

E2E_MODES = ("end_to_end", "end_to_end_baseline")

# stream tags; sample streams hash ids to 64-bit ints so these cannot collide
_SHUFFLE_TAG = 104729
_PRIME_TAG = 7919


class TrainingError(RuntimeError):
    pass


class CheckpointError(RuntimeError):
    pass


class ConfigMismatchError(CheckpointError):
    def __init__(self, diff: list[str]):
        self.diff = diff
        super().__init__("checkpoint config does not match the requested run:\n  "
                         + "\n  ".join(diff))


def cosine_lr(step: int, total_steps: int, lr0: float) -> float:
    if total_steps <= 0:
        return lr0
    return lr0 * 0.5 * (1.0 + math.cos(math.pi * step / total_steps))


def step_lr(step: int, steps_per_epoch: int, milestones: tuple[int, ...],
            gamma: float, lr0: float) -> float:
    epoch = step // max(steps_per_epoch, 1)
    drops = sum(1 for mst in milestones if epoch >= mst)
    return lr0 * (gamma ** drops)


def manifest_from_config(cfg: RunConfig) -> DatasetManifest:
    if cfg.dataset_format == "synthetic":
        return make_synthetic_corpus(cfg.dataset_n, cfg.dataset_image_size,
                                     cfg.dataset_num_classes, cfg.dataset_seed)
    return load_manifest(cfg.dataset_root, cfg.dataset_format)


def build_views(sample, policy, rng, cropped_anchor: bool = False) -> ViewTriplet:
    """Standard triplet, or (random_anchor mode) a crop in the anchor slot."""
    if not cropped_anchor:
        return make_views(sample, policy, rng)
    s_ac, s_aa, s_c1, s_a1, s_c2, s_a2 = rng.spawn(6)
    anchor_img, anchor_box = random_resized_crop(sample, policy, s_ac)
    anchor = augment(anchor_img, policy, s_aa)
    crop1, box1 = random_resized_crop(sample, policy, s_c1)
    view1 = augment(crop1, policy, s_a1)
    crop2, box2 = random_resized_crop(sample, policy, s_c2)
    view2 = augment(crop2, policy, s_a2)
    return ViewTriplet(anchor, view1, view2, anchor_box, box1, box2, sample.sample_id)


@dataclass
class MetricsRecord:
    step: int
    epoch: int
    lr: float
    total: float
    term1: float
    term2: float
    term3: Optional[float]
    positive_logit_mean: float
    negative_logit_mean: float
    embedding_std: float
    queue_filled: int
    wall_time: float

    def to_line(self) -> str:
        payload = {"schema_version": SCHEMA_VERSION}
        payload.update(self.__dict__)
        return json.dumps(payload)

    @classmethod
    def from_line(cls, line: str) -> "MetricsRecord":
        rec = json.loads(line)
        rec.pop("schema_version", None)
        return cls(**rec)


class Trainer:
    def __init__(self, cfg: RunConfig, manifest: Optional[DatasetManifest] = None):
        self.cfg = cfg
        torch.manual_seed(cfg.seed)
        mode = "end_to_end" if cfg.loss.loss_mode in E2E_MODES else "momentum_contrast"
        self.momentum_mode = mode == "momentum_contrast"
        self.pair = init_pair(cfg.arch, m=cfg.m, mode=mode)
        self.optimizer = torch.optim.SGD(self.pair.query.parameters(), lr=cfg.lr,
                                         momentum=cfg.momentum,
                                         weight_decay=cfg.weight_decay)
        self.queue = (NegativeQueue(cfg.queue_capacity, cfg.arch.proj_dim)
                      if self.momentum_mode else None)
        self.manifest = manifest if manifest is not None else manifest_from_config(cfg)
        if cfg.batch_size > len(self.manifest):
            raise ConfigError(f"batch_size {cfg.batch_size} exceeds dataset size "
                              f"{len(self.manifest)}")
        self.steps_per_epoch = len(self.manifest) // cfg.batch_size
        self.total_steps = cfg.epochs * self.steps_per_epoch
        self.global_step = 0
        self.last_negatives: Optional[torch.Tensor] = None

    # ----------------------------------------------------------------- data

    def epoch_indices(self, epoch: int) -> np.ndarray:
        rng = np.random.default_rng(np.random.SeedSequence(
            [self.cfg.seed, epoch, _SHUFFLE_TAG]))
        return rng.permutation(len(self.manifest))

    def _batch_views(self, entries, epoch: int):
        cropped_anchor = self.cfg.loss.loss_mode == "random_anchor"
        triplets = []
        for e in entries:
            stream = sample_stream(self.cfg.seed, epoch, e.sample_id)
            triplets.append(build_views(load_image(e), self.cfg.policy, stream,
                                        cropped_anchor=cropped_anchor))
        anchors = torch.stack([t.anchor for t in triplets])
        v1 = torch.stack([t.view1 for t in triplets])
        v2 = torch.stack([t.view2 for t in triplets])
        return anchors, v1, v2

    # ----------------------------------------------------------------- queue

    def _enqueue(self, k1, k2) -> None:
        if k1 is not None:
            self.queue.enqueue(k1)
        if k2 is not None and (k1 is None or self.cfg.enqueue == "both"):
            self.queue.enqueue(k2)

    def prime_queue(self) -> None:
        """Key-encode one held-out batch so step 0 has real negatives."""
        if not self.momentum_mode or self.queue.filled > 0:
            return
        rng = np.random.default_rng(np.random.SeedSequence([self.cfg.seed, _PRIME_TAG]))
        idx = rng.permutation(len(self.manifest))[:self.cfg.batch_size]
        entries = [self.manifest.entries[i] for i in idx]
        _, v1, v2 = self._batch_views(entries, epoch=_PRIME_TAG)
        if self.cfg.loss.loss_mode == "moco_baseline":
            self._enqueue(self.pair.encode_key(v2), None)
        else:
            self._enqueue(self.pair.encode_key(v1), self.pair.encode_key(v2))

    # ----------------------------------------------------------------- step

    def _forward(self, anchors, v1s, v2s, negs) -> tuple[LossBreakdown, object, object, object]:
        """Mode dispatch. Returns (breakdown, query embeddings, key1, key2)."""
        cfg = self.cfg.loss
        pair = self.pair
        mode = cfg.loss_mode
        if mode in ("leoclr", "random_anchor"):
            u = pair.encode_query(anchors)
            k1, k2 = pair.encode_key(v1s), pair.encode_key(v2s)
            return total_loss(u, k1, k2, negs, cfg), u, k1, k2
        if mode == "moco_baseline":
            u = pair.encode_query(v1s)
            k2 = pair.encode_key(v2s)
            return total_loss(u, k2, None, negs, cfg), u, k2, None
        if mode == "attract_all":
            u = pair.encode_query(anchors)
            crop_q = pair.encode_query(v1s)
            k1, k2 = pair.encode_key(v1s), pair.encode_key(v2s)
            return total_loss(u, k1, k2, negs, cfg, crop_query=crop_q), u, k1, k2
        if mode == "end_to_end":
            u = pair.encode_query(anchors)
            e1, e2 = pair.encode_query(v1s), pair.encode_query(v2s)
            return total_loss(u, e1, e2, None, cfg), u, None, None
        if mode == "end_to_end_baseline":
            q1, q2 = pair.encode_query(v1s), pair.encode_query(v2s)
            return total_loss(q1, q2, None, None, cfg), q1, None, None
        raise ConfigError(f"unknown loss_mode {mode!r}")

    def train_step(self, entries, epoch: int) -> MetricsRecord:
        anchors, v1s, v2s = self._batch_views(entries, epoch)
        negs = self.queue.negatives_view() if self.momentum_mode else None
        self.last_negatives = negs

        breakdown, u, k1, k2 = self._forward(anchors, v1s, v2s, negs)
        if not torch.isfinite(breakdown.total):
            ids = [e.sample_id for e in entries]
            raise TrainingError(f"non-finite loss at step {self.global_step}; "
                                f"batch sample_ids: {ids}")

        lr = self.lr_at(self.global_step)
        for group in self.optimizer.param_groups:
            group["lr"] = lr
        self.optimizer.zero_grad()
        breakdown.total.backward()
        self.optimizer.step()

        if self.momentum_mode:
            self.pair.momentum_update()  # EMA after the optimizer step
            self._enqueue(k1, k2)

        record = MetricsRecord(
            step=self.global_step, epoch=epoch, lr=lr,
            total=breakdown.total.item(), term1=breakdown.term1,
            term2=breakdown.term2, term3=breakdown.term3,
            positive_logit_mean=breakdown.positive_logit_mean,
            negative_logit_mean=breakdown.negative_logit_mean,
            embedding_std=u.vectors.detach().std(dim=0, correction=0).mean().item(),
            queue_filled=self.queue.filled if self.momentum_mode else 0,
            wall_time=time.time(),
        )
        self.global_step += 1
        return record

    def lr_at(self, step: int) -> float:
        if self.cfg.schedule_kind == "cosine":
            return cosine_lr(step, self.total_steps, self.cfg.lr)
        return step_lr(step, self.steps_per_epoch, self.cfg.schedule_milestones,
                       self.cfg.schedule_gamma, self.cfg.lr)


# ---------------------------------------------------------------------------
# checkpointing
# ---------------------------------------------------------------------------

def checkpoint_name(step: int) -> str:
    return f"ckpt_step{step}.bin"


def save_checkpoint(trainer: Trainer, out_dir: str | Path) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    payload = {
        "version": CHECKPOINT_VERSION,
        "step": trainer.global_step,
        "query": trainer.pair.query.state_dict(),
        "key": trainer.pair.key.state_dict(),
        "optimizer": trainer.optimizer.state_dict(),
        "queue": trainer.queue.state_dict() if trainer.queue is not None else None,
        "config_text": trainer.cfg.text(),
        "config_hash": trainer.cfg.hash(),
        "torch_rng": torch.get_rng_state(),
    }
    path = out_dir / checkpoint_name(trainer.global_step)
    torch.save(payload, path)
    (out_dir / "latest").write_text(path.name + "\n")
    return path


def load_checkpoint(path: str | Path) -> dict:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    try:
        payload = torch.load(path, map_location="cpu", weights_only=False)
    except Exception as exc:
        raise CheckpointError(f"cannot load checkpoint {path}: {exc}") from exc
    if not isinstance(payload, dict) or payload.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint format "
                              f"(version {payload.get('version') if isinstance(payload, dict) else '?'})")
    return payload


def resolve_latest(out_dir: str | Path) -> Path:
    out_dir = Path(out_dir)
    pointer = out_dir / "latest"
    if not pointer.exists():
        raise CheckpointError(f"no 'latest' pointer in {out_dir}")
    return out_dir / pointer.read_text().strip()


def restore_trainer(cfg: RunConfig, payload: dict,
                    manifest: Optional[DatasetManifest] = None) -> Trainer:
    if payload["config_hash"] != cfg.hash():
        saved = resolve(parse_config_text(payload["config_text"], source="checkpoint"))
        diff = config_diff(saved, cfg.as_dict()) or ["<hash differs but no key-level diff>"]
        raise ConfigMismatchError(diff)
    trainer = Trainer(cfg, manifest=manifest)
    trainer.pair.query.load_state_dict(payload["query"])
    trainer.pair.key.load_state_dict(payload["key"])
    trainer.optimizer.load_state_dict(payload["optimizer"])
    if trainer.queue is not None:
        if payload["queue"] is None:
            raise CheckpointError("checkpoint has no queue state for a momentum-mode run")
        trainer.queue.load_state_dict(payload["queue"])
    trainer.global_step = int(payload["step"])
    torch.set_rng_state(payload["torch_rng"])
    return trainer


# ---------------------------------------------------------------------------
# full pretraining run
# ---------------------------------------------------------------------------

def _truncate_metrics(path: Path, below_step: int) -> list[str]:
    if not path.exists():
        return []
    kept = []
    for line in path.read_text().splitlines():
        if not line.strip():
            continue
        if json.loads(line)["step"] < below_step:
            kept.append(line)
    return kept


def write_provenance(cfg: RunConfig, out: Path) -> None:
    (out / "config.txt").write_text(cfg.text())
    provenance = {
        "package_version": __version__,
        "torch_version": torch.__version__,
        "numpy_version": np.__version__,
        "seed": cfg.seed,
        "config_hash": cfg.hash(),
        "loss_mode": cfg.loss.loss_mode,
        "reduction": cfg.loss.reduction,
        "ema_order": "after_optimizer_step",
        "normalize_mean": list(cfg.policy.normalize_mean),
        "normalize_std": list(cfg.policy.normalize_std),
    }
    (out / "provenance.json").write_text(json.dumps(provenance, indent=2) + "\n")


def pretrain(cfg: RunConfig, resume: Optional[str] = None,
             manifest: Optional[DatasetManifest] = None,
             max_steps: Optional[int] = None) -> Path:
    """Run (or resume) a full pretraining; returns the final checkpoint path.

    max_steps stops the run early after that many global steps (checkpointing
    at the stop point) — an in-process stand-in for an interrupted run.
    """
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_provenance(cfg, out)

    metrics_path = out / "metrics.jsonl"
    warnings_path = out / "warnings.jsonl"

    if resume is not None:
        ckpt_path = resolve_latest(out) if resume == "auto" else Path(resume)
        trainer = restore_trainer(cfg, load_checkpoint(ckpt_path), manifest=manifest)
        kept = _truncate_metrics(metrics_path, trainer.global_step)
        metrics_path.write_text("".join(line + "\n" for line in kept))
        kept_w = _truncate_metrics(warnings_path, trainer.global_step)
        warnings_path.write_text("".join(line + "\n" for line in kept_w))
        metrics_fh = open(metrics_path, "a")
    else:
        trainer = Trainer(cfg, manifest=manifest)
        metrics_fh = open(metrics_path, "w")
        warnings_path.write_text("")
        if trainer.total_steps > 0:
            trainer.prime_queue()

    spe = trainer.steps_per_epoch
    limit = trainer.total_steps if max_steps is None else min(max_steps, trainer.total_steps)
    try:
        while trainer.global_step < limit:
            epoch = trainer.global_step // spe
            order = trainer.epoch_indices(epoch)
            batch_index = trainer.global_step % spe
            for b in range(batch_index, spe):
                if trainer.global_step >= limit:
                    break
                entries = [trainer.manifest.entries[i]
                           for i in order[b * cfg.batch_size:(b + 1) * cfg.batch_size]]
                try:
                    rec = trainer.train_step(entries, epoch)
                except TrainingError as exc:
                    (out / f"abort_step{trainer.global_step}.json").write_text(
                        json.dumps({"error": str(exc)}) + "\n")
                    raise
                metrics_fh.write(rec.to_line() + "\n")
                metrics_fh.flush()
                if rec.step >= spe and rec.embedding_std < cfg.collapse_floor:
                    with open(warnings_path, "a") as wf:
                        wf.write(json.dumps({
                            "schema_version": SCHEMA_VERSION, "kind": "collapse",
                            "step": rec.step, "embedding_std": rec.embedding_std,
                            "floor": cfg.collapse_floor}) + "\n")
                if (cfg.checkpoint_interval > 0
                        and trainer.global_step % cfg.checkpoint_interval == 0
                        and trainer.global_step < trainer.total_steps):
                    save_checkpoint(trainer, out)
    finally:
        metrics_fh.close()

    return save_checkpoint(trainer, out)
