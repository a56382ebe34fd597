"""Encoders, projection/classifier heads and the checkpoint container.

Checkpoint container (format_version 1)
---------------------------------------
A single uncompressed ZIP file with fixed member timestamps:

* ``manifest.json``: format name and version, kind (``pretext`` or
  ``downstream``), encoder/head configs, normalisation stats, provenance,
  a config digest and the ordered list of tensor names.
* ``tensors/<name>.npy``: one array per state-dict entry, written with
  ``numpy.save``.

Members are written in sorted order and JSON is key-sorted, so saving the
same weights twice gives identical bytes. Files are written to a temporary
sibling and renamed into place.
"""

from __future__ import annotations

import io
import json
import zipfile
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from ._util import atomic_write_bytes, digest
from .errors import CheckpointIncompatible, ConfigError, FormatError, VersionError

FORMAT_NAME = "geossl-checkpoint"
FORMAT_VERSION = 1
BACKBONES = ("resnet50", "small_conv")
MODES = ("linear", "finetune")
_ZIP_DATE = (1980, 1, 1, 0, 0, 0)


@dataclass(frozen=True)
class EncoderConfig:
    backbone_id: str = "resnet50"
    feature_dim: int = 2048
    input_size: int = 224

    def validate(self) -> None:
        if self.backbone_id not in BACKBONES:
            raise ConfigError(f"unknown backbone {self.backbone_id!r}; expected one of {BACKBONES}")
        if self.feature_dim <= 0:
            raise ConfigError("feature_dim must be positive")
        if self.backbone_id == "resnet50" and self.feature_dim != 2048:
            raise ConfigError("resnet50 produces 2048 features")
        if self.backbone_id == "small_conv" and self.feature_dim % 8:
            raise ConfigError("small_conv feature_dim must be divisible by 8")
        if self.input_size < 32:
            raise ConfigError("input_size must be >= 32")


@dataclass(frozen=True)
class ProjectionHeadConfig:
    hidden_dim: int = 2048
    out_dim: int = 1024

    def validate(self) -> None:
        if self.hidden_dim <= 0 or self.out_dim <= 0:
            raise ConfigError("projection head sizes must be positive")


@dataclass(frozen=True)
class ClassifierHeadConfig:
    num_classes: int
    hidden_dim: int = 512

    def validate(self) -> None:
        if self.num_classes < 2:
            raise ConfigError("num_classes must be >= 2")
        if self.hidden_dim <= 0:
            raise ConfigError("classifier hidden_dim must be positive")


# ---------------------------------------------------------------------------
# networks


class Normalize(nn.Module):
    """Per-channel standardisation; the statistics travel with the weights."""

    def __init__(self, mean=(0.0, 0.0, 0.0), std=(1.0, 1.0, 1.0)):
        super().__init__()
        self.register_buffer("mean", torch.tensor(mean, dtype=torch.float32).view(1, 3, 1, 1))
        self.register_buffer("std", torch.tensor(std, dtype=torch.float32).view(1, 3, 1, 1))

    def set_stats(self, mean, std) -> None:
        self.mean.copy_(torch.tensor(mean, dtype=torch.float32).view(1, 3, 1, 1))
        self.std.copy_(torch.tensor(std, dtype=torch.float32).view(1, 3, 1, 1))

    def forward(self, x):
        return (x - self.mean) / self.std


def _conv_block(cin: int, cout: int, pool: bool) -> nn.Sequential:
    layers = [nn.Conv2d(cin, cout, 3, padding=1, bias=False), nn.BatchNorm2d(cout), nn.ReLU(inplace=True)]
    if pool:
        layers.append(nn.MaxPool2d(2))
    return nn.Sequential(*layers)


def small_conv(feature_dim: int = 128) -> nn.Sequential:
    """Four conv blocks with widths f/8, f/4, f/2, f; pooling after the first three."""
    w = [feature_dim // 8, feature_dim // 4, feature_dim // 2, feature_dim]
    return nn.Sequential(
        _conv_block(3, w[0], True),
        _conv_block(w[0], w[1], True),
        _conv_block(w[1], w[2], True),
        _conv_block(w[2], w[3], False),
    )


def resnet50_trunk() -> nn.Sequential:
    from torchvision.models import resnet50

    net = resnet50(weights=None)
    return nn.Sequential(
        net.conv1, net.bn1, net.relu, net.maxpool, net.layer1, net.layer2, net.layer3, net.layer4
    )


class Encoder(nn.Module):
    """normalise -> convolutional trunk -> global average pool."""

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        cfg.validate()
        self.config = cfg
        self.normalize = Normalize()
        self.backbone = small_conv(cfg.feature_dim) if cfg.backbone_id == "small_conv" else resnet50_trunk()
        self.pool = nn.AdaptiveAvgPool2d(1)

    def feature_map(self, x):
        return self.backbone(self.normalize(x))

    def forward(self, x):
        return torch.flatten(self.pool(self.feature_map(x)), 1)

    def last_conv_layer_name(self) -> str:
        names = [n for n, m in self.backbone.named_modules() if isinstance(m, nn.Conv2d)]
        return names[-1]


class PretextModel(nn.Module):
    def __init__(self, encoder: Encoder, proj: ProjectionHeadConfig):
        super().__init__()
        proj.validate()
        self.encoder = encoder
        self.proj_config = proj
        # no batch norm inside the head; ReLU only between the two layers
        self.projection = nn.Sequential(
            nn.Linear(encoder.config.feature_dim, proj.hidden_dim),
            nn.ReLU(inplace=True),
            nn.Linear(proj.hidden_dim, proj.out_dim),
        )

    def forward(self, x):
        return self.projection(self.encoder(x))

    def num_parameters(self) -> int:
        return sum(p.numel() for p in self.parameters())


class DownstreamModel(nn.Module):
    def __init__(self, encoder: Encoder, cls: ClassifierHeadConfig, mode: str):
        super().__init__()
        cls.validate()
        if mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {mode!r}")
        self.encoder = encoder
        self.cls_config = cls
        self.mode = mode
        self.classifier = nn.Sequential(
            nn.Linear(encoder.config.feature_dim, cls.hidden_dim),
            nn.ReLU(inplace=True),
            nn.Linear(cls.hidden_dim, cls.num_classes),
        )
        if mode == "linear":
            for p in self.encoder.parameters():
                p.requires_grad_(False)

    def train(self, mode: bool = True):
        super().train(mode)
        if self.mode == "linear":
            # frozen encoder: keep batch-norm statistics fixed as well
            self.encoder.eval()
        return self

    def forward(self, x):
        return self.classifier(self.encoder(x))

    def num_parameters(self) -> int:
        return sum(p.numel() for p in self.parameters())


# ---------------------------------------------------------------------------
# checkpoints


@dataclass
class Checkpoint:
    kind: str  # "pretext" | "downstream"
    encoder_config: EncoderConfig
    encoder_state: dict
    projection_config: ProjectionHeadConfig | None = None
    projection_state: dict | None = None
    classifier_config: ClassifierHeadConfig | None = None
    classifier_state: dict | None = None
    mode: str | None = None
    normalization: dict = field(default_factory=dict)
    provenance: dict = field(default_factory=dict)
    format_version: int = FORMAT_VERSION

    def config_digest(self) -> str:
        return digest({
            "kind": self.kind,
            "encoder": asdict(self.encoder_config),
            "projection": asdict(self.projection_config) if self.projection_config else None,
            "classifier": asdict(self.classifier_config) if self.classifier_config else None,
        })


def _state_numpy(module: nn.Module) -> dict:
    return {k: v.detach().cpu().numpy().copy() for k, v in module.state_dict().items()}


def _normalization_of(encoder: Encoder) -> dict:
    return {
        "mean": encoder.normalize.mean.view(-1).tolist(),
        "std": encoder.normalize.std.view(-1).tolist(),
    }


def checkpoint_from_model(model: nn.Module, provenance: dict | None = None) -> Checkpoint:
    provenance = dict(provenance or {})
    if isinstance(model, PretextModel):
        return Checkpoint(
            kind="pretext",
            encoder_config=model.encoder.config,
            encoder_state=_state_numpy(model.encoder),
            projection_config=model.proj_config,
            projection_state=_state_numpy(model.projection),
            normalization=_normalization_of(model.encoder),
            provenance=provenance,
        )
    if isinstance(model, DownstreamModel):
        return Checkpoint(
            kind="downstream",
            encoder_config=model.encoder.config,
            encoder_state=_state_numpy(model.encoder),
            classifier_config=model.cls_config,
            classifier_state=_state_numpy(model.classifier),
            mode=model.mode,
            normalization=_normalization_of(model.encoder),
            provenance=provenance,
        )
    raise ConfigError(f"cannot checkpoint a {type(model).__name__}")


def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    tensors = {}
    for prefix, state in (("encoder", ckpt.encoder_state), ("projection", ckpt.projection_state),
                          ("classifier", ckpt.classifier_state)):
        for k, v in (state or {}).items():
            tensors[f"{prefix}.{k}"] = np.asarray(v)
    manifest = {
        "format": FORMAT_NAME,
        "format_version": ckpt.format_version,
        "kind": ckpt.kind,
        "mode": ckpt.mode,
        "encoder_config": asdict(ckpt.encoder_config),
        "projection_config": asdict(ckpt.projection_config) if ckpt.projection_config else None,
        "classifier_config": asdict(ckpt.classifier_config) if ckpt.classifier_config else None,
        "normalization": ckpt.normalization,
        "provenance": ckpt.provenance,
        "config_digest": ckpt.config_digest(),
        "tensors": sorted(tensors),
    }
    buf = io.BytesIO()
    with zipfile.ZipFile(buf, "w", compression=zipfile.ZIP_STORED) as zf:
        zf.writestr(zipfile.ZipInfo("manifest.json", _ZIP_DATE), json.dumps(manifest, sort_keys=True, indent=1))
        for name in sorted(tensors):
            arr = io.BytesIO()
            np.save(arr, tensors[name], allow_pickle=False)
            zf.writestr(zipfile.ZipInfo(f"tensors/{name}.npy", _ZIP_DATE), arr.getvalue())
    return buf.getvalue()


def save_checkpoint(path, model_or_ckpt, meta: dict | None = None) -> Checkpoint:
    ckpt = model_or_ckpt if isinstance(model_or_ckpt, Checkpoint) else checkpoint_from_model(model_or_ckpt, meta)
    if meta and isinstance(model_or_ckpt, Checkpoint):
        ckpt.provenance = {**ckpt.provenance, **meta}
    atomic_write_bytes(path, checkpoint_bytes(ckpt))
    return ckpt


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    try:
        with zipfile.ZipFile(path) as zf:
            manifest = json.loads(zf.read("manifest.json"))
            if manifest.get("format") != FORMAT_NAME:
                raise FormatError(f"{path} is not a {FORMAT_NAME} file")
            if manifest.get("format_version") != FORMAT_VERSION:
                raise VersionError(
                    f"checkpoint version {manifest.get('format_version')!r} is not supported (expected {FORMAT_VERSION})"
                )
            states: dict[str, dict] = {"encoder": {}, "projection": {}, "classifier": {}}
            for name in manifest["tensors"]:
                prefix, key = name.split(".", 1)
                states[prefix][key] = np.load(io.BytesIO(zf.read(f"tensors/{name}.npy")), allow_pickle=False)
    except (zipfile.BadZipFile, KeyError, json.JSONDecodeError, ValueError, OSError) as exc:
        if isinstance(exc, FileNotFoundError):
            raise
        raise FormatError(f"corrupt checkpoint {path}: {exc}") from exc
    proj = manifest["projection_config"]
    cls = manifest["classifier_config"]
    ckpt = Checkpoint(
        kind=manifest["kind"],
        encoder_config=EncoderConfig(**manifest["encoder_config"]),
        encoder_state=states["encoder"],
        projection_config=ProjectionHeadConfig(**proj) if proj else None,
        projection_state=states["projection"] or None,
        classifier_config=ClassifierHeadConfig(**cls) if cls else None,
        classifier_state=states["classifier"] or None,
        mode=manifest["mode"],
        normalization=manifest["normalization"],
        provenance=manifest["provenance"],
        format_version=manifest["format_version"],
    )
    if ckpt.config_digest() != manifest["config_digest"]:
        raise FormatError(f"config digest mismatch in {path}")
    return ckpt


def _load_state(module: nn.Module, state: dict, what: str) -> None:
    tensors = {k: torch.from_numpy(np.array(v)) for k, v in state.items()}
    own = module.state_dict()
    if set(own) != set(tensors):
        raise CheckpointIncompatible(f"{what} weights do not match the model layout")
    for k, v in tensors.items():
        if own[k].shape != v.shape:
            raise CheckpointIncompatible(f"{what} weight {k} has shape {tuple(v.shape)}, expected {tuple(own[k].shape)}")
    module.load_state_dict(tensors)


# ---------------------------------------------------------------------------
# builders


def build_encoder(enc: EncoderConfig, init: Checkpoint | None = None) -> Encoder:
    encoder = Encoder(enc)
    if init is not None:
        if init.encoder_config != enc:
            raise CheckpointIncompatible(f"checkpoint encoder {init.encoder_config} does not match {enc}")
        _load_state(encoder, init.encoder_state, "encoder")
    return encoder


def build_pretext_model(enc: EncoderConfig, proj: ProjectionHeadConfig, init: Checkpoint | None = None) -> PretextModel:
    model = PretextModel(build_encoder(enc, init), proj)
    if init is not None and init.projection_state is not None:
        if init.projection_config != proj:
            raise CheckpointIncompatible("projection head config differs from checkpoint")
        _load_state(model.projection, init.projection_state, "projection")
    return model


def build_downstream_model(enc: EncoderConfig, cls: ClassifierHeadConfig, init: Checkpoint | None = None,
                           mode: str = "finetune") -> DownstreamModel:
    """Encoder (optionally from a checkpoint) plus a fresh classifier head.

    Projection weights in a pretext checkpoint are ignored.
    """
    return DownstreamModel(build_encoder(enc, init), cls, mode)


def restore_downstream_model(ckpt: Checkpoint) -> DownstreamModel:
    if ckpt.kind != "downstream":
        raise CheckpointIncompatible("checkpoint does not hold a classifier")
    model = DownstreamModel(build_encoder(ckpt.encoder_config, ckpt), ckpt.classifier_config, ckpt.mode)
    _load_state(model.classifier, ckpt.classifier_state, "classifier")
    return model


def load_external_encoder_weights(encoder: Encoder, path) -> None:
    """Load a torchvision-style ResNet-50 state dict (``fc.*`` ignored) into ``encoder``.

    Used for the supervised baseline with externally supplied ImageNet weights.
    """
    if encoder.config.backbone_id != "resnet50":
        raise CheckpointIncompatible("external weights are only supported for resnet50")
    state = torch.load(path, map_location="cpu", weights_only=True)
    order = ["conv1", "bn1", "relu", "maxpool", "layer1", "layer2", "layer3", "layer4"]
    remapped = {}
    for k, v in state.items():
        head = k.split(".", 1)[0]
        if head in order:
            remapped[f"{order.index(head)}.{k.split('.', 1)[1]}"] = v
    missing, unexpected = encoder.backbone.load_state_dict(remapped, strict=False)
    if missing or unexpected:
        raise CheckpointIncompatible(f"external weights mismatch: missing={missing[:3]} unexpected={unexpected[:3]}")
