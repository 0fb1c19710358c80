"""DenseNet classifier with an independent sigmoid output per class."""

from __future__ import annotations

import hashlib
import logging
import math
import re
from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from pathlib import Path

import torch
import torch.nn as nn
import torch.nn.functional as F
from torchvision.models import DenseNet, densenet121

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = 1
CHEXNET_URL = "https://github.com/arnoweng/CheXNet/raw/master/model.pth.tar"

# Small densely connected net for desk-scale tests; never used with real weights.
TINY_DENSENET = dict(growth_rate=4, block_config=(2, 2), num_init_features=8, bn_size=2)


class WeightsMismatchError(RuntimeError):
    pass


class CheckpointError(RuntimeError):
    pass


@dataclass
class ClassifierSpec:
    num_classes: int = 4
    backbone: str = "densenet121"
    init_weights: str | None = None
    weights_sha256: str | None = None
    seed: int = 0
    # only read when backbone == "tiny"
    tiny: dict = field(default_factory=lambda: dict(TINY_DENSENET))

    def __post_init__(self):
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if self.backbone not in ("densenet121", "tiny"):
            raise ValueError(f"unknown backbone {self.backbone!r}")

    def to_dict(self):
        d = asdict(self)
        d["tiny"] = {k: list(v) if isinstance(v, tuple) else v for k, v in self.tiny.items()}
        return d


class XrayClassifier(nn.Module):
    """Backbone features -> global average pool -> linear head -> sigmoid.

    The module stores logit-producing parameters; the sigmoid is applied in
    :meth:`forward`.  Scores are per-class probabilities and are not
    renormalized across classes.
    """

    def __init__(self, features: nn.Module, feature_width: int, num_classes: int):
        super().__init__()
        self.features = features
        self.classifier = nn.Linear(feature_width, num_classes)
        self.backbone_trainable = True
        self.backbone_sha256: str | None = None

    @property
    def num_classes(self) -> int:
        return self.classifier.out_features

    def logits(self, x: torch.Tensor) -> torch.Tensor:
        f = F.relu(self.features(x))
        f = torch.flatten(F.adaptive_avg_pool2d(f, 1), 1)
        return self.classifier(f)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.logits(x))

    def backbone_parameters(self):
        return self.features.parameters()

    def head_parameters(self):
        return self.classifier.parameters()

    def train(self, mode: bool = True):
        super().train(mode)
        # a frozen backbone must not drift through batch-norm running stats either
        if mode and not self.backbone_trainable:
            self.features.eval()
        return self


def _make_densenet(spec: ClassifierSpec) -> DenseNet:
    if spec.backbone == "densenet121":
        return densenet121(weights=None)
    cfg = dict(spec.tiny)
    cfg["block_config"] = tuple(cfg["block_config"])
    return DenseNet(**cfg)


def build_model(spec: ClassifierSpec) -> XrayClassifier:
    """Build the classifier; load pretrained backbone weights if given.

    Head initialization uses the framework default for ``nn.Linear``,
    seeded by ``spec.seed``.
    """
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(spec.seed)
        net = _make_densenet(spec)
        model = XrayClassifier(net.features, net.classifier.in_features, spec.num_classes)
    if spec.init_weights:
        model.backbone_sha256 = load_pretrained_backbone(model, spec.init_weights, spec.weights_sha256)
    elif spec.backbone == "densenet121":
        log.warning("densenet121 built without pretrained weights (random init)")
    return model


def set_backbone_trainable(model: XrayClassifier, trainable: bool) -> None:
    """Freeze or unfreeze every backbone parameter (head stays trainable)."""
    model.backbone_trainable = bool(trainable)
    for p in model.backbone_parameters():
        p.requires_grad_(trainable)
    for p in model.head_parameters():
        p.requires_grad_(True)
    model.train(model.training)


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


# torchvision < 0.4 named dense-layer modules "norm.1", "conv.2", ...
_LEGACY_KEY = re.compile(r"^(.*denselayer\d+\.(?:norm|relu|conv))\.((?:[12])\.(?:weight|bias|running_mean|running_var|num_batches_tracked))$")


def normalize_backbone_keys(state_dict) -> OrderedDict:
    """Map a CheXNet-style state dict onto ``features.*`` keys.

    Strips ``module.`` (DataParallel) and ``densenet121.`` prefixes, rewrites
    legacy dense-layer names and drops the original classifier.
    """
    out = OrderedDict()
    for key, value in state_dict.items():
        k = key
        for prefix in ("module.", "densenet121.", "model."):
            if k.startswith(prefix):
                k = k[len(prefix):]
        m = _LEGACY_KEY.match(k)
        if m:
            k = m.group(1) + m.group(2)
        if k.startswith("features."):
            out[k[len("features."):]] = value
    return out


def load_pretrained_backbone(model: XrayClassifier, path, expected_sha256: str | None = None) -> str:
    """Copy pretrained backbone weights into ``model``; returns the file hash."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(
            f"pretrained weights {path} not found; fetch them with scripts/fetch_chexnet_weights.py "
            f"(source: {CHEXNET_URL}) or use backbone 'tiny' for a random-init run")
    digest = sha256_file(path)
    if expected_sha256 and digest != expected_sha256.lower():
        raise WeightsMismatchError(f"{path}: sha256 {digest} does not match expected {expected_sha256}")
    blob = torch.load(path, map_location="cpu", weights_only=True)
    state = blob.get("state_dict", blob) if isinstance(blob, dict) else blob
    incoming = normalize_backbone_keys(state)
    own = model.features.state_dict()
    # releases older than the batch-norm step counter lack these buffers
    for k in own:
        if k.endswith("num_batches_tracked") and k not in incoming:
            incoming[k] = own[k]
    missing = sorted(set(own) - set(incoming))
    unexpected = sorted(set(incoming) - set(own))
    shape = sorted(k for k in set(own) & set(incoming) if tuple(own[k].shape) != tuple(incoming[k].shape))
    problems = [f"missing: {k}" for k in missing] + [f"unexpected: {k}" for k in unexpected] + [
        f"shape: {k} {tuple(incoming[k].shape)} vs {tuple(own[k].shape)}" for k in shape]
    if problems:
        raise WeightsMismatchError(f"{path} does not match the backbone:\n  " + "\n  ".join(problems))
    model.features.load_state_dict(incoming, strict=True)
    log.info("loaded pretrained backbone from %s (sha256 %s)", path, digest)
    return digest


# --------------------------------------------------------------------------- #
# Checkpoints
# --------------------------------------------------------------------------- #

def save_checkpoint(model: XrayClassifier, path, *, spec: ClassifierSpec, epoch: int, stage: int,
                    val_loss: float, class_config: dict, extra: dict | None = None) -> Path:
    if not math.isfinite(val_loss):
        raise CheckpointError(f"refusing to save checkpoint with non-finite val_loss {val_loss}")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    meta = {
        "format": CHECKPOINT_FORMAT,
        "epoch": int(epoch),
        "stage": int(stage),
        "val_loss": float(val_loss),
        "class_config": class_config,
        "classifier_spec": spec.to_dict(),
        "backbone_sha256": getattr(model, "backbone_sha256", None),
    }
    if extra:
        meta.update(extra)
    torch.save({"metadata": meta, "state_dict": model.state_dict()}, path)
    return path


def load_checkpoint(path, spec: ClassifierSpec | None = None):
    """Rebuild a model from a checkpoint file; returns ``(model, metadata)``.

    When ``spec`` is given its class count must agree with the stored head.
    """
    try:
        blob = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as exc:  # torch raises a variety of types for bad archives
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if not isinstance(blob, dict) or "metadata" not in blob or "state_dict" not in blob:
        raise CheckpointError(f"{path} is not a classifier checkpoint")
    meta = blob["metadata"]
    if meta.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path}: unsupported checkpoint format {meta.get('format')!r}")
    head = blob["state_dict"]["classifier.weight"]
    if len(meta["class_config"]["classes"]) != head.shape[0]:
        raise CheckpointError(f"{path}: class list does not match head width {head.shape[0]}")
    if spec is not None and spec.num_classes != head.shape[0]:
        raise CheckpointError(
            f"{path} holds a {head.shape[0]}-class head but a {spec.num_classes}-class model was requested")
    stored = dict(meta["classifier_spec"])
    stored["init_weights"] = None
    model = build_model(ClassifierSpec(**stored))
    try:
        model.load_state_dict(blob["state_dict"], strict=True)
    except RuntimeError as exc:
        raise CheckpointError(f"{path}: {exc}") from exc
    model.backbone_sha256 = meta.get("backbone_sha256")
    model.eval()
    return model, meta
