"""Two-stage training: frozen-backbone head fit, then end-to-end fine-tuning.

Each stage keeps the epoch with the lowest validation loss (earliest on
ties).  Validation loss is the weighted BCE over the full, unsampled
validation set with the training class weights.
"""

from __future__ import annotations

import copy
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch.utils.data import DataLoader

from .classes import ClassConfig
from .dataset import ImageRecord, PreprocessSpec, XrayDataset
from .loss import loss_for_config
from .model import ClassifierSpec, XrayClassifier, save_checkpoint, set_backbone_trainable
from .sampling import BatchPlan, RatioBatchSampler

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass
class StageConfig:
    stage: int
    batch_size: int
    max_epochs: int
    lr: float = 1e-4
    betas: tuple[float, float] = (0.9, 0.999)
    seed: int = 0
    # reserved; the protocol uses none of these
    weight_decay: float = 0.0
    grad_clip: float | None = None

    @property
    def backbone_trainable(self) -> bool:
        return self.stage == 2

    def __post_init__(self):
        self.betas = tuple(self.betas)
        problems = self.validate()
        if problems:
            raise ValueError("; ".join(problems))

    def validate(self) -> list[str]:
        p = []
        if self.stage not in (1, 2):
            p.append(f"stage must be 1 or 2, got {self.stage}")
        if self.batch_size < 1:
            p.append("batch_size must be >= 1")
        if self.max_epochs < 1:
            p.append("max_epochs must be >= 1")
        if not self.lr > 0:
            p.append("lr must be > 0")
        if not all(0 < b < 1 for b in self.betas):
            p.append("betas must lie in (0, 1)")
        return p

    @classmethod
    def protocol_stage1(cls, seed=0):
        return cls(stage=1, batch_size=16, max_epochs=30, seed=seed)

    @classmethod
    def protocol_stage2(cls, seed=0):
        return cls(stage=2, batch_size=8, max_epochs=10, seed=seed)


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    checkpoint: str | None


@dataclass
class TrainLog:
    stage: int
    seeds: dict
    initial_val_loss: float
    epochs: list[EpochRecord] = field(default_factory=list)
    selected_epoch: int | None = None
    selected_checkpoint: str | None = None

    @property
    def best_val_loss(self) -> float:
        return min(e.val_loss for e in self.epochs)

    def write(self, path) -> None:
        """Line-delimited JSON: header, one record per epoch, summary."""
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(json.dumps({"type": "header", "stage": self.stage, "seeds": self.seeds,
                                 "initial_val_loss": self.initial_val_loss}, sort_keys=True) + "\n")
            for e in self.epochs:
                fh.write(json.dumps({"type": "epoch", **asdict(e)}, sort_keys=True) + "\n")
            fh.write(json.dumps({"type": "summary", "selected_epoch": self.selected_epoch,
                                 "selected_checkpoint": self.selected_checkpoint,
                                 "best_val_loss": self.best_val_loss}, sort_keys=True) + "\n")

    @classmethod
    def read(cls, path) -> "TrainLog":
        with open(path, encoding="utf-8") as fh:
            lines = [json.loads(line) for line in fh if line.strip()]
        head = lines[0]
        tl = cls(head["stage"], head["seeds"], head["initial_val_loss"])
        for rec in lines[1:]:
            if rec["type"] == "epoch":
                tl.epochs.append(EpochRecord(rec["epoch"], rec["train_loss"], rec["val_loss"], rec["checkpoint"]))
            elif rec["type"] == "summary":
                tl.selected_epoch = rec["selected_epoch"]
                tl.selected_checkpoint = rec["selected_checkpoint"]
        return tl


def plan_for(class_cfg: ClassConfig, batch_size: int) -> tuple[BatchPlan, int]:
    """Composition plan plus the number of optimizer steps each composed batch is split into.

    A batch size smaller than the ratio sum (8 against 5:5:5:1 or 7:7:1)
    keeps the exact composition per group of ``sum(ratio)`` images and
    splits that group into ``ceil(sum / batch_size)`` near-equal optimizer
    steps of at most ``batch_size`` images (16 -> 8+8, 15 -> 8+7).
    """
    unit = sum(class_cfg.sampling_ratio)
    if batch_size % unit == 0:
        return BatchPlan.from_ratio(class_cfg.sampling_ratio, batch_size), 1
    if batch_size < unit:
        return BatchPlan.from_ratio(class_cfg.sampling_ratio, unit), math.ceil(unit / batch_size)
    raise ValueError(f"batch size {batch_size} exceeds ratio sum {unit} but is not a multiple of it")


def _collate(batch):
    xs, ys = zip(*batch)
    return torch.stack(xs), torch.as_tensor(ys, dtype=torch.long)


@torch.no_grad()
def validation_loss(model: XrayClassifier, loader: DataLoader, class_cfg: ClassConfig) -> float:
    was_training = model.training
    model.eval()
    total, n = 0.0, 0
    for x, y in loader:
        total += float(loss_for_config(model(x), y, class_cfg)) * len(y)
        n += len(y)
    model.train(was_training)
    if n == 0:
        raise TrainingError("validation set is empty")
    return total / n


@torch.no_grad()
def predict(model: XrayClassifier, records: Sequence[ImageRecord], class_cfg: ClassConfig,
            spec: PreprocessSpec, batch_size: int = 32, num_workers: int = 0) -> np.ndarray:
    model.eval()
    loader = DataLoader(XrayDataset(records, class_cfg, spec, "eval"), batch_size=batch_size,
                        shuffle=False, num_workers=num_workers, collate_fn=_collate)
    out = [model(x).numpy() for x, _ in loader]
    return np.concatenate(out) if out else np.zeros((0, class_cfg.num_classes))


def train_stage(model: XrayClassifier, cfg: StageConfig, train_records: Sequence[ImageRecord],
                val_records: Sequence[ImageRecord], class_cfg: ClassConfig, preprocess: PreprocessSpec,
                out_dir, *, classifier_spec: ClassifierSpec, num_workers: int = 0,
                save_every_epoch: bool = True, extra_meta: dict | None = None):
    """Run one stage and leave ``model`` holding the selected (min val loss) weights.

    Returns ``(TrainLog, best_checkpoint_path)``.
    """
    if not val_records:
        raise TrainingError("validation set is empty")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    torch.manual_seed(cfg.seed)

    set_backbone_trainable(model, cfg.backbone_trainable)
    params = [p for p in model.parameters() if p.requires_grad]
    opt = torch.optim.Adam(params, lr=cfg.lr, betas=cfg.betas, weight_decay=cfg.weight_decay)

    train_ds = XrayDataset(train_records, class_cfg, preprocess, "train")
    plan, steps_per_group = plan_for(class_cfg, cfg.batch_size)
    sampler = RatioBatchSampler(train_ds.targets, plan, seed=cfg.seed, with_aug_seeds=True)
    train_loader = DataLoader(train_ds, batch_sampler=sampler, num_workers=num_workers, collate_fn=_collate)
    val_loader = DataLoader(XrayDataset(val_records, class_cfg, preprocess, "eval"), batch_size=32,
                            shuffle=False, num_workers=num_workers, collate_fn=_collate)

    seeds = {"stage_seed": cfg.seed, "sampler": cfg.seed, "augmentation": cfg.seed,
             "head_init": classifier_spec.seed}
    tlog = TrainLog(cfg.stage, seeds, validation_loss(model, val_loader, class_cfg))
    log.info("stage %d: initial val loss %.6f", cfg.stage, tlog.initial_val_loss)

    meta = {"class_config": class_cfg.to_dict(), "spec": classifier_spec,
            "extra": {"preprocess": preprocess.to_dict(), **(extra_meta or {})}}
    best_state, best_loss, best_epoch, best_path = None, math.inf, None, None
    for epoch in range(1, cfg.max_epochs + 1):
        model.train()
        sampler.set_epoch(epoch)
        losses = []
        for b, (x, y) in enumerate(train_loader):
            for chunk_x, chunk_y in zip(x.chunk(steps_per_group), y.chunk(steps_per_group)):
                loss = loss_for_config(model(chunk_x), chunk_y, class_cfg)
                if not torch.isfinite(loss):
                    raise TrainingError(f"non-finite loss {loss.item()} at stage {cfg.stage} epoch {epoch} batch {b}")
                opt.zero_grad(set_to_none=True)
                loss.backward()
                if cfg.grad_clip:
                    torch.nn.utils.clip_grad_norm_(params, cfg.grad_clip)
                opt.step()
                losses.append(loss.item())
        vloss = validation_loss(model, val_loader, class_cfg)
        ckpt = None
        if save_every_epoch:
            ckpt = out_dir / f"stage{cfg.stage}_epoch{epoch:03d}.pt"
            save_checkpoint(model, ckpt, spec=meta["spec"], epoch=epoch, stage=cfg.stage, val_loss=vloss,
                            class_config=meta["class_config"], extra=meta["extra"])
        tlog.epochs.append(EpochRecord(epoch, float(np.mean(losses)), vloss, None if ckpt is None else ckpt.name))
        log.info("stage %d epoch %d: train %.6f val %.6f", cfg.stage, epoch, np.mean(losses), vloss)
        if vloss < best_loss:
            best_loss, best_epoch = vloss, epoch
            best_state = copy.deepcopy(model.state_dict())

    model.load_state_dict(best_state)
    best_path = out_dir / f"stage{cfg.stage}_best.pt"
    save_checkpoint(model, best_path, spec=meta["spec"], epoch=best_epoch, stage=cfg.stage, val_loss=best_loss,
                    class_config=meta["class_config"], extra=meta["extra"])
    tlog.selected_epoch = best_epoch
    tlog.selected_checkpoint = best_path.name
    tlog.write(out_dir / f"stage{cfg.stage}_log.jsonl")
    return tlog, best_path


def run_full_protocol(model: XrayClassifier, stages: Sequence[StageConfig], train_records, val_records,
                      class_cfg: ClassConfig, preprocess: PreprocessSpec, out_dir, *,
                      classifier_spec: ClassifierSpec, **kwargs):
    """Stage 1 then stage 2; stage 2 starts from the stage-1 selection.

    Returns ``(final_checkpoint_path, [TrainLog, ...])``.
    """
    logs, best = [], None
    for cfg in stages:
        tlog, best = train_stage(model, cfg, train_records, val_records, class_cfg, preprocess, out_dir,
                                 classifier_spec=classifier_spec, **kwargs)
        logs.append(tlog)
    return best, logs
