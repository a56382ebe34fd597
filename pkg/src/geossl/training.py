"""Pretext (contrastive) and downstream (supervised) training loops.

One master seed fans out into labelled sub-seeds, one each for weight init,
data order, augmentation and crops, so changing one aspect of a run does not
perturb the random streams of the others.
"""

from __future__ import annotations

import contextlib
import csv
import io
import json
import logging
import threading
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import torch
from torch import nn

from . import augment
from ._util import atomic_write_text, derive_seed, digest, make_rng
from .augment import AugmentationConfig
from .contrastive import NORMALIZATIONS, nt_xent_torch
from .data_ingest import DatasetManifest, ImageStore, SplitSpec
from .errors import ConfigError, StratificationError
from .metrics import MetricsReport, evaluate
from .models import (
    Checkpoint,
    ClassifierHeadConfig,
    DownstreamModel,
    EncoderConfig,
    PretextModel,
    ProjectionHeadConfig,
    build_downstream_model,
    build_pretext_model,
    checkpoint_from_model,
    load_external_encoder_weights,
    save_checkpoint,
)

log = logging.getLogger(__name__)

OPTIMIZERS = ("sgd", "adam")


def _from_dict(cls, d: dict):
    known = {f.name for f in fields(cls)}
    unknown = set(d) - known
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    return cls(**d)


@dataclass(frozen=True)
class PretextHyperparams:
    batch_size: int = 256
    optimizer: str = "sgd"
    momentum: float = 0.9
    nesterov: bool = True
    lr: float = 0.0005
    weight_decay: float = 0.0005
    epochs: int = 100
    seed: int = 0
    tau: float = 0.5
    loss_normalization: str = "mean"
    deterministic: bool = True

    def validate(self) -> None:
        if self.batch_size < 2:
            raise ConfigError("pretext batch_size must be >= 2")
        if self.lr <= 0 or self.weight_decay < 0 or self.epochs < 1 or self.tau <= 0:
            raise ConfigError("pretext lr, epochs and tau must be positive; weight_decay non-negative")
        if self.optimizer not in OPTIMIZERS:
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        if self.loss_normalization not in NORMALIZATIONS:
            raise ConfigError(f"loss_normalization must be one of {NORMALIZATIONS}")

    from_dict = classmethod(_from_dict)


@dataclass(frozen=True)
class DownstreamHyperparams:
    batch_size: int = 64
    optimizer: str = "sgd"
    momentum: float = 0.9
    nesterov: bool = True
    lr: float = 0.001
    weight_decay: float = 0.0005
    epochs: int = 30
    seed: int = 0
    loss: str = "cross_entropy"
    deterministic: bool = True

    def validate(self) -> None:
        if self.batch_size < 1 or self.lr <= 0 or self.epochs < 1 or self.weight_decay < 0:
            raise ConfigError("downstream batch_size, lr and epochs must be positive")
        if self.optimizer not in OPTIMIZERS:
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        if self.loss != "cross_entropy":
            raise ConfigError("only categorical cross-entropy is supported")

    from_dict = classmethod(_from_dict)


@dataclass
class TrainLog:
    kind: str
    seed: int
    config_digest: str
    rows: list[dict] = field(default_factory=list)
    wall_clock: float = 0.0
    events: list[dict] = field(default_factory=list)
    seen_indices: set[int] = field(default_factory=set)

    @property
    def losses(self) -> list[float]:
        return [r["loss"] for r in self.rows]

    def add_epoch(self, **values) -> None:
        row = {"epoch": len(self.rows) + 1, **values}
        self.rows.append(row)
        self.event("epoch_end", **row)

    def event(self, name: str, **payload) -> None:
        self.events.append({"event": name, "time": time.time(), **payload})

    def to_csv(self) -> str:
        keys = ["epoch", "loss"]
        for r in self.rows:
            keys.extend(k for k in sorted(r) if k not in keys)
        buf = io.StringIO()
        w = csv.DictWriter(buf, keys, lineterminator="\n")
        w.writeheader()
        for r in self.rows:
            w.writerow(r)
        return buf.getvalue()

    def to_jsonl(self) -> str:
        return "".join(json.dumps(e, sort_keys=True) + "\n" for e in self.events)

    def write(self, out_dir, stem: str = "train_log") -> None:
        out_dir = Path(out_dir)
        atomic_write_text(out_dir / f"{stem}.csv", self.to_csv())
        atomic_write_text(out_dir / f"{stem}.jsonl", self.to_jsonl())


# ---------------------------------------------------------------------------
# helpers


# torch's deterministic flag and default RNG are process globals; concurrent
# training loops share them through these guards
_state_lock = threading.Lock()
_deterministic_users = 0
_deterministic_saved = False


@contextlib.contextmanager
def deterministic_mode(enabled: bool = True):
    global _deterministic_users, _deterministic_saved
    if not enabled:
        yield
        return
    with _state_lock:
        if _deterministic_users == 0:
            _deterministic_saved = torch.are_deterministic_algorithms_enabled()
            torch.use_deterministic_algorithms(True)
        _deterministic_users += 1
    try:
        yield
    finally:
        with _state_lock:
            _deterministic_users -= 1
            if _deterministic_users == 0:
                torch.use_deterministic_algorithms(_deterministic_saved)


def _seeded(seed: int, build):
    """Run ``build`` right after seeding torch, without another thread reseeding in between."""
    with _state_lock:
        torch.manual_seed(seed)
        return build()


def param_groups(model: nn.Module, weight_decay: float) -> list[dict]:
    """Weight decay on weight matrices and conv kernels only; biases and norm scales are exempt."""
    decay, no_decay = [], []
    for p in model.parameters():
        if not p.requires_grad:
            continue
        (decay if p.ndim > 1 else no_decay).append(p)
    return [
        {"params": decay, "weight_decay": weight_decay},
        {"params": no_decay, "weight_decay": 0.0},
    ]


def make_optimizer(model: nn.Module, hp) -> torch.optim.Optimizer:
    groups = param_groups(model, hp.weight_decay)
    if hp.optimizer == "adam":
        return torch.optim.Adam(groups, lr=hp.lr)
    return torch.optim.SGD(groups, lr=hp.lr, momentum=hp.momentum, nesterov=hp.nesterov)


def _views_batch(store: ImageStore, indices, cfg: AugmentationConfig, seed: int) -> torch.Tensor:
    """Stack view one of every sample, then view two: rows n and n + N are a positive pair."""
    pairs = [augment.pretext_views(store[i], cfg, seed, int(i)) for i in indices]
    return torch.from_numpy(np.stack([p.view_a for p in pairs] + [p.view_b for p in pairs]))


def pretext_batch_loss(model: PretextModel, views: torch.Tensor, hp: PretextHyperparams):
    """Projections and NT-Xent loss for one stacked two-view batch."""
    z = model(views)
    return nt_xent_torch(z, hp.tau, hp.loss_normalization), z


def _eval_tensor(store: ImageStore, indices, size: int) -> torch.Tensor:
    arrs = [augment.downstream_transform(store[i], False, 0, size, int(i)) for i in indices]
    return torch.from_numpy(np.stack(arrs))


def _stats_from(store: ImageStore, indices, size: int):
    return augment.channel_stats(
        augment.to_chw(augment.resize(store[i].pixels, (size, size))) for i in indices
    )


# ---------------------------------------------------------------------------
# pretext


def pretrain(manifest: DatasetManifest, split: SplitSpec, aug_cfg: AugmentationConfig, enc_cfg: EncoderConfig,
             proj_cfg: ProjectionHeadConfig, hp: PretextHyperparams, out_dir=None,
             store: ImageStore | None = None) -> tuple[Checkpoint, TrainLog]:
    """Contrastive training on the (unlabelled) train split of ``manifest``.

    The final partial batch of every epoch is dropped so each step sees 2N
    views. With ``out_dir`` set, ``checkpoint.ckpt`` is rewritten at each
    epoch end and the log is written next to it.
    """
    hp.validate()
    enc_cfg.validate()
    proj_cfg.validate()
    problems = augment.validate_config(aug_cfg)
    if problems:
        raise ConfigError("; ".join(problems))
    if tuple(aug_cfg.resize) != (enc_cfg.input_size, enc_cfg.input_size):
        raise ConfigError(f"augmentation resize {aug_cfg.resize} does not match encoder input {enc_cfg.input_size}")
    train_idx = split.train
    if train_idx.size == 0:
        raise ConfigError("pretext train split is empty")
    if hp.batch_size > train_idx.size:
        raise ConfigError(f"batch_size {hp.batch_size} exceeds the {train_idx.size} training images")
    store = store or ImageStore(manifest)

    run_digest = digest({"dataset": manifest.digest(), "split_seed": split.seed, "ratios": split.ratios,
                         "aug": asdict(aug_cfg), "enc": asdict(enc_cfg), "proj": asdict(proj_cfg), "hp": asdict(hp)})
    tlog = TrainLog("pretext", hp.seed, run_digest)
    start = time.perf_counter()
    with deterministic_mode(hp.deterministic):
        model = _seeded(derive_seed(hp.seed, "init"), lambda: build_pretext_model(enc_cfg, proj_cfg))
        mean, std = _stats_from(store, train_idx, enc_cfg.input_size)
        model.encoder.normalize.set_stats(mean, std)
        opt = make_optimizer(model, hp)
        tlog.event("start", dataset=manifest.dataset_id, n_train=int(train_idx.size),
                   parameters=model.num_parameters())
        provenance = {}
        for epoch in range(1, hp.epochs + 1):
            model.train()
            t0 = time.perf_counter()
            order = make_rng(hp.seed, "order", epoch).permutation(train_idx)
            aug_seed = derive_seed(hp.seed, "augment", epoch)
            losses = []
            for b in range(order.size // hp.batch_size):
                idx = order[b * hp.batch_size:(b + 1) * hp.batch_size]
                tlog.seen_indices.update(int(i) for i in idx)
                loss, _ = pretext_batch_loss(model, _views_batch(store, idx, aug_cfg, aug_seed), hp)
                opt.zero_grad(set_to_none=True)
                loss.backward()
                opt.step()
                losses.append(loss.item())
            tlog.add_epoch(loss=float(np.mean(losses)), seconds=time.perf_counter() - t0)
            provenance = {"source_dataset": manifest.dataset_id, "seed": hp.seed, "epoch": epoch,
                          "run_digest": run_digest}
            if out_dir is not None:
                save_checkpoint(Path(out_dir) / "checkpoint.ckpt", model, provenance)
            log.info("pretext %s epoch %d loss %.4f", manifest.dataset_id, epoch, tlog.rows[-1]["loss"])
    tlog.wall_clock = time.perf_counter() - start
    ckpt = checkpoint_from_model(model, provenance)
    if out_dir is not None:
        tlog.write(out_dir, "pretext_log")
    return ckpt, tlog


# ---------------------------------------------------------------------------
# downstream


def predict(model: nn.Module, x: torch.Tensor, batch_size: int = 256):
    """Arg-max labels and softmax scores."""
    model.eval()
    outs = []
    with torch.no_grad():
        for s in range(0, x.shape[0], batch_size):
            outs.append(torch.softmax(model(x[s:s + batch_size]), dim=1))
    probs = torch.cat(outs).numpy().astype(np.float64)
    return probs.argmax(axis=1), probs


def train_downstream(manifest: DatasetManifest, split: SplitSpec, checkpoint: Checkpoint | None, mode: str,
                     hp: DownstreamHyperparams, enc_cfg: EncoderConfig | None = None,
                     cls_cfg: ClassifierHeadConfig | None = None, external_weights=None,
                     store: ImageStore | None = None) -> tuple[DownstreamModel, TrainLog, MetricsReport]:
    """Supervised training on ``split.retained_train``; report on the test split.

    ``checkpoint=None`` trains from random initialisation; ``external_weights``
    loads a torchvision ResNet-50 state dict into the encoder instead.
    """
    hp.validate()
    if checkpoint is not None:
        if enc_cfg is not None and enc_cfg != checkpoint.encoder_config:
            raise ConfigError("encoder config differs from the checkpoint's")
        enc_cfg = checkpoint.encoder_config
    if enc_cfg is None:
        raise ConfigError("an encoder config is needed when no checkpoint is given")
    cls_cfg = cls_cfg or ClassifierHeadConfig(manifest.num_classes)
    if cls_cfg.num_classes != manifest.num_classes:
        raise ConfigError(f"classifier has {cls_cfg.num_classes} outputs but {manifest.dataset_id} "
                          f"has {manifest.num_classes} classes")
    # an unsubsampled split keeps the whole train partition
    retained = np.array(split.retained_train, dtype=np.int64) if split.retained_train else split.train
    if retained.size == 0:
        raise ConfigError("no retained training samples")
    labels = manifest.labels
    missing = set(range(manifest.num_classes)) - set(labels[retained].tolist())
    if missing:
        raise StratificationError(f"classes {sorted(missing)} have no retained training samples")
    store = store or ImageStore(manifest)
    size = enc_cfg.input_size

    run_digest = digest({"dataset": manifest.digest(), "fraction": split.label_fraction, "mode": mode,
                         "init": checkpoint.config_digest() if checkpoint else None,
                         "init_run": checkpoint.provenance.get("run_digest") if checkpoint else None,
                         "external": str(external_weights) if external_weights else None, "hp": asdict(hp)})
    tlog = TrainLog("downstream", hp.seed, run_digest)
    start = time.perf_counter()
    with deterministic_mode(hp.deterministic):
        model = _seeded(derive_seed(hp.seed, "init"),
                        lambda: build_downstream_model(enc_cfg, cls_cfg, checkpoint, mode))
        if checkpoint is None:
            if external_weights is not None:
                load_external_encoder_weights(model.encoder, external_weights)
            model.encoder.normalize.set_stats(*_stats_from(store, retained, size))
        opt = make_optimizer(model, hp)
        val_idx, test_idx = split.val, split.test
        x_val = _eval_tensor(store, val_idx, size) if val_idx.size else None
        x_test = _eval_tensor(store, test_idx, size)
        loss_fn = nn.CrossEntropyLoss()
        tlog.event("start", dataset=manifest.dataset_id, mode=mode, n_train=int(retained.size),
                   fraction=split.label_fraction)
        for epoch in range(1, hp.epochs + 1):
            model.train()
            t0 = time.perf_counter()
            order = make_rng(hp.seed, "order", epoch).permutation(retained)
            crop_seed = derive_seed(hp.seed, "crop", epoch)
            losses, weights = [], []
            for s in range(0, order.size, hp.batch_size):
                idx = order[s:s + hp.batch_size]
                tlog.seen_indices.update(int(i) for i in idx)
                x = torch.from_numpy(np.stack(
                    [augment.downstream_transform(store[i], True, crop_seed, size, int(i)) for i in idx]))
                y = torch.from_numpy(labels[idx])
                loss = loss_fn(model(x), y)
                opt.zero_grad(set_to_none=True)
                loss.backward()
                opt.step()
                losses.append(loss.item())
                weights.append(len(idx))
            row = {"loss": float(np.average(losses, weights=weights))}
            if x_val is not None:
                pred, _ = predict(model, x_val)
                rep = evaluate(pred, labels[val_idx], manifest.num_classes)
                row.update(acc=rep.accuracy, f1=rep.f1)
            row["seconds"] = time.perf_counter() - t0
            tlog.add_epoch(**row)
        pred, probs = predict(model, x_test)
    report = evaluate(pred, labels[test_idx], manifest.num_classes, probs, manifest.classes)
    tlog.wall_clock = time.perf_counter() - start
    tlog.event("done", accuracy=report.accuracy, f1=report.f1)
    return model, tlog, report
