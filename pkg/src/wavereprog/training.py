"""Optimization loop, learning-rate schedule and checkpoint persistence."""
import csv
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import torch

from .backbone import BackboneHandle, TRAINED, build_backbone, save_backbone, set_frozen
from .checkpoint import load_state_strict, read_checkpoint, write_checkpoint
from .data import PairedPatchDataset
from .degradations import KINDS
from .errors import CheckpointSchemaError, ConfigError, DivergenceError
from .losses import LossConfig, TotalLoss
from .model import ReprogramModel

log = logging.getLogger(__name__)

HISTORY_TAIL = 5
CSV_FIELDS = ("epoch", "mean_l_s", "mean_l_p", "mean_total", "lr")


@dataclass
class TrainConfig:
    batch_size: int = 8
    patch: int = 120
    lr0: float = 1e-3
    lr_halve_every: int = 20
    epochs: int = 300
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    seed: int = 0
    frozen_backbone: bool = True
    train_kinds: tuple = ()
    checkpoint_every: int = 0
    hflip: bool = False

    def __post_init__(self):
        self.betas = tuple(self.betas)
        self.train_kinds = tuple(self.train_kinds)
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.patch < 8:
            raise ConfigError(f"patch must be >= 8, got {self.patch}")
        if not self.lr0 > 0:
            raise ConfigError(f"lr0 must be > 0, got {self.lr0}")
        if self.lr_halve_every < 1 or self.epochs < 0:
            raise ConfigError("lr_halve_every must be >= 1 and epochs >= 0")
        unknown = [k for k in self.train_kinds if k not in KINDS]
        if unknown:
            raise ConfigError(f"unknown train kind {unknown[0]!r}; valid kinds: {', '.join(KINDS)}")


def lr_at(epoch, cfg: TrainConfig):
    return cfg.lr0 * 0.5 ** (epoch // cfg.lr_halve_every)


@dataclass
class TrainResult:
    history: list
    checkpoint_path: Path = None
    loss_csv: Path = None
    epochs_run: int = 0
    extra: dict = field(default_factory=dict)


class Trainer:
    """Owns the optimizer; ``step`` applies one Adam update on a batch."""

    def __init__(self, module, params, loss_fn, cfg: TrainConfig):
        self.module = module
        self.loss_fn = loss_fn
        self.cfg = cfg
        self.params = [p for p in params if p.requires_grad]
        self.optimizer = torch.optim.Adam(self.params, lr=cfg.lr0, betas=cfg.betas, eps=cfg.eps)

    def set_epoch(self, epoch):
        lr = lr_at(epoch, self.cfg)
        for group in self.optimizer.param_groups:
            group["lr"] = lr
        return lr

    def step(self, degraded, clean):
        if isinstance(self.module, ReprogramModel):
            # unclamped so out-of-range pixels still receive gradient
            pred = self.module(degraded, clamp=False)
        else:
            pred = self.module(degraded)
        losses = self.loss_fn(pred, clean)
        if not torch.isfinite(losses.total):
            raise DivergenceError(f"non-finite loss {losses.total.item()}")
        self.optimizer.zero_grad(set_to_none=True)
        losses.total.backward()
        self.optimizer.step()
        return losses.l_s.item(), losses.l_p.item(), losses.total.item()


def write_loss_csv(path, history):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_FIELDS)
        for row in history:
            writer.writerow([repr(row[k]) if isinstance(row[k], float) else row[k]
                             for k in CSV_FIELDS])
    return path


def _fit(module, params, manifest, cfg, loss_cfg, save, out_dir=None, name="model"):
    if len(manifest) == 0:
        raise ConfigError("cannot train on an empty manifest")
    if cfg.train_kinds:
        extra = set(manifest.kinds) - set(cfg.train_kinds)
        if extra:
            raise ConfigError(f"manifest contains kinds {sorted(extra)} outside train_kinds "
                              f"{list(cfg.train_kinds)}")
    dataset = PairedPatchDataset(manifest, cfg.patch, cfg.hflip)
    trainer = Trainer(module, params, TotalLoss(loss_cfg), cfg)
    gen = torch.Generator().manual_seed(int(cfg.seed))
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    history = []
    module.train()
    for epoch in range(cfg.epochs):
        lr = trainer.set_epoch(epoch)
        sums = [0.0, 0.0, 0.0]
        steps = 0
        try:
            for degraded, clean in dataset.batches(cfg.batch_size, gen):
                for k, v in enumerate(trainer.step(degraded, clean)):
                    sums[k] += v
                steps += 1
        except DivergenceError as exc:
            path = None
            if out_dir is not None:
                path = save(out_dir / f"{name}-diverged.wrpg", epoch, history)
            raise DivergenceError(f"epoch {epoch}: {exc}", path) from exc
        row = {"epoch": epoch, "mean_l_s": sums[0] / steps, "mean_l_p": sums[1] / steps,
               "mean_total": sums[2] / steps, "lr": lr}
        history.append(row)
        log.info("epoch %d  loss %.6f  lr %.3g", epoch, row["mean_total"], lr)
        if out_dir is not None and cfg.checkpoint_every and (epoch + 1) % cfg.checkpoint_every == 0:
            save(out_dir / f"{name}-epoch{epoch + 1:04d}.wrpg", epoch + 1, history)
    module.eval()
    result = TrainResult(history, epochs_run=cfg.epochs)
    if out_dir is not None:
        result.checkpoint_path = save(out_dir / f"{name}.wrpg", cfg.epochs, history)
        result.loss_csv = write_loss_csv(out_dir / f"{name}-loss.csv", history)
    return result


def model_arrays(model: ReprogramModel):
    arrays = {"backbone." + k: v for k, v in model.backbone.net.state_dict().items()}
    arrays.update(model.transform_state())
    return arrays


def model_metadata(model: ReprogramModel, cfg=None, loss_cfg=None, epoch=0, history=()):
    return {
        "kind": "reprogram",
        "model": model.settings,
        "backbone": model.backbone.describe(),
        "backbone_fingerprint": model.backbone.fingerprint,
        "train_config": asdict(cfg) if cfg is not None else None,
        "loss_config": asdict(loss_cfg) if loss_cfg is not None else None,
        "epoch": epoch,
        "seed": cfg.seed if cfg is not None else None,
        "history_tail": list(history)[-HISTORY_TAIL:],
    }


def save_model(model: ReprogramModel, path, cfg=None, loss_cfg=None, epoch=0, history=()):
    return write_checkpoint(path, model_metadata(model, cfg, loss_cfg, epoch, history),
                            model_arrays(model))


def load_model(path):
    """Rebuild a :class:`ReprogramModel` from a checkpoint written by :func:`save_model`."""
    meta, arrays = read_checkpoint(path)
    if meta.get("kind") != "reprogram":
        raise CheckpointSchemaError(f"{path}: not a reprogramming checkpoint "
                                    f"(kind={meta.get('kind')!r})")
    info = meta["backbone"]
    backbone = build_backbone(info["name"], info["config"])
    load_state_strict(backbone.net, arrays, "backbone.")
    backbone.init_method = info["init_method"]
    set_frozen(backbone, info["frozen"])
    model = ReprogramModel(backbone, **meta["model"])
    load_state_strict(model.input_transform, arrays, "input_transform.")
    load_state_strict(model.output_transform, arrays, "output_transform.")
    model.eval()
    model.metadata = meta
    return model


def train(model: ReprogramModel, manifest, cfg: TrainConfig, loss_cfg: LossConfig = None,
          out_dir=None, name="model"):
    """Train the transforms (and the backbone if not frozen) on ``manifest``."""
    loss_cfg = loss_cfg or LossConfig()
    set_frozen(model.backbone, cfg.frozen_backbone)
    torch.manual_seed(cfg.seed)

    def save(path, epoch, history):
        return save_model(model, path, cfg, loss_cfg, epoch, history)

    return _fit(model, model.trainable_parameters(), manifest, cfg, loss_cfg, save, out_dir, name)


def train_backbone(handle: BackboneHandle, manifest, cfg: TrainConfig,
                   loss_cfg: LossConfig = None, out_dir=None, name="backbone"):
    """Supervised training of the bare backbone on degraded -> clean pairs."""
    loss_cfg = loss_cfg or LossConfig()
    set_frozen(handle, False)
    torch.manual_seed(cfg.seed)

    def save(path, epoch, history):
        return save_backbone(handle, path, {"train_config": asdict(cfg), "epoch": epoch,
                                            "history_tail": list(history)[-HISTORY_TAIL:]})

    result = _fit(handle, handle.parameters(), manifest, cfg, loss_cfg, save, out_dir, name)
    handle.init_method = TRAINED
    if result.checkpoint_path is not None:
        save(result.checkpoint_path, cfg.epochs, result.history)
    return result
