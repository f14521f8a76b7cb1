"""Prototypical-parts classifier: backbone ``f``, prototype layer ``g``, class connections ``h``."""

from __future__ import annotations

import io
import math
import struct
from dataclasses import asdict, dataclass, field
from typing import NamedTuple, Optional

import numpy as np
import torch
import torch.nn as nn

BACKBONES = ("toy-1x1-stack", "small-conv", "pluggable")

CHECKPOINT_MAGIC = b"PALNCKPT"
CHECKPOINT_VERSION = 1
SMALL_CONV_FACTORS = (4, 8)


class ConfigurationError(ValueError):
    pass


class InvalidInputError(ValueError):
    pass


@dataclass
class ModelConfig:
    num_classes: int = 8
    prototypes_per_class: int = 4
    prototype_dim: int = 128
    latent_height: int = 16
    latent_width: int = 16
    input_height: int = 64
    input_width: int = 64
    input_channels: int = 3
    eta: float = 1e-4
    backbone_id: str = "small-conv"
    hidden_channels: int = 32
    # applied inside the model so that callers always work in [0, 1] pixel space
    pixel_mean: float = 0.5
    pixel_std: float = 0.25

    def __post_init__(self):
        for name in ("num_classes", "prototypes_per_class", "prototype_dim", "latent_height",
                     "latent_width", "input_height", "input_width", "input_channels"):
            if int(getattr(self, name)) < 1:
                raise ConfigurationError(f"{name} must be a positive integer")
        if not 0.0 < self.eta < 1.0:
            raise ConfigurationError(f"eta must lie in (0, 1), got {self.eta}")
        if self.backbone_id not in BACKBONES:
            raise ConfigurationError(f"unknown backbone_id {self.backbone_id!r}")
        if self.backbone_id == "toy-1x1-stack" and (
            (self.latent_height, self.latent_width) != (self.input_height, self.input_width)
        ):
            raise ConfigurationError("toy-1x1-stack keeps input resolution; latent dims must match input dims")
        if self.backbone_id == "small-conv":
            fh, fw = self.input_height / self.latent_height, self.input_width / self.latent_width
            if fh != fw or fh not in SMALL_CONV_FACTORS:
                raise ConfigurationError(
                    f"small-conv downsamples by one of {SMALL_CONV_FACTORS} equally on both axes"
                )

    @property
    def num_prototypes(self) -> int:
        return self.num_classes * self.prototypes_per_class

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


def similarity(p, z, eta: float = 1e-4) -> float:
    """Scalar log-ratio similarity ``log((d + 1) / (d + eta))`` with ``d = ||z - p||_2``."""
    p = np.asarray(p, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    if not (np.all(np.isfinite(p)) and np.all(np.isfinite(z)) and math.isfinite(eta)):
        raise InvalidInputError("similarity requires finite inputs")
    if not 0.0 < eta < 1.0:
        raise InvalidInputError(f"eta must lie in (0, 1), got {eta}")
    d = float(np.linalg.norm(z - p))
    return math.log((d + 1.0) / (d + eta))


def similarity_from_distance(d: torch.Tensor, eta: float) -> torch.Tensor:
    return torch.log((d + 1.0) / (d + eta))


def patch_distances(features: torch.Tensor, prototypes: torch.Tensor) -> torch.Tensor:
    """L2 distances between every latent patch and every prototype.

    features: (B, D, H, W); prototypes: (P, D). Returns (B, P, H, W).
    Uses the direct difference formula, so a patch equal to a prototype has distance exactly 0.
    """
    b, d, h, w = features.shape
    z = features.flatten(2).transpose(1, 2)  # (B, HW, D)
    protos = prototypes.unsqueeze(0).expand(b, -1, -1)
    dist = torch.cdist(z, protos, compute_mode="donot_use_mm_for_euclid_dist")  # (B, HW, P)
    return dist.transpose(1, 2).reshape(b, prototypes.shape[0], h, w)


def similarity_map(prototype: torch.Tensor, features: torch.Tensor, eta: float = 1e-4) -> torch.Tensor:
    """Similarity of one prototype (D,) against a feature volume (D, H, W); returns (H, W)."""
    if features.dim() != 3 or prototype.dim() != 1 or features.shape[0] != prototype.shape[0]:
        raise ConfigurationError(
            f"shape mismatch: prototype {tuple(prototype.shape)} vs features {tuple(features.shape)}"
        )
    dist = patch_distances(features.unsqueeze(0), prototype.unsqueeze(0))
    return similarity_from_distance(dist, eta)[0, 0]


def max_similarity(prototype: torch.Tensor, features: torch.Tensor, eta: float = 1e-4) -> torch.Tensor:
    return similarity_map(prototype, features, eta).max()


def argmax_position(sim_map: torch.Tensor) -> tuple[int, int]:
    """Row-major argmax; ties go to the lowest linear index."""
    flat = int(torch.argmax(sim_map.flatten()))
    return divmod(flat, sim_map.shape[-1])


def cluster_separation_losses(features: torch.Tensor, labels: torch.Tensor,
                              prototypes: torch.Tensor, prototype_class: torch.Tensor):
    """Batch-mean cluster and separation costs on squared L2 distances.

    clst = min over own-class prototypes and patches of ||z - p||^2.
    sep  = -(min over other-class prototypes and patches of ||z - p||^2).
    """
    if features.dim() == 3:
        features = features.unsqueeze(0)
        labels = torch.as_tensor(labels).reshape(1)
    labels = labels.to(prototype_class.device)
    own = prototype_class.unsqueeze(0) == labels.unsqueeze(1)  # (B, P)
    if not bool(own.any(dim=1).all()):
        raise ConfigurationError("a class in the batch owns no prototypes")
    if not bool((~own).any(dim=1).all()):
        raise ConfigurationError("separation cost needs prototypes outside the true class")
    sq = patch_distances(features, prototypes).pow(2).flatten(2).amin(dim=2)  # (B, P)
    inf = torch.tensor(float("inf"), dtype=sq.dtype, device=sq.device)
    clst = torch.where(own, sq, inf).amin(dim=1)
    other = torch.where(own, inf, sq).amin(dim=1)
    return clst.mean(), -other.mean()


class Normalize(nn.Module):
    def __init__(self, mean: float, std: float):
        super().__init__()
        self.mean = mean
        self.std = std

    def forward(self, x):
        return (x - self.mean) / self.std


def _make_backbone(cfg: ModelConfig) -> nn.Module:
    c, hid = cfg.input_channels, cfg.hidden_channels
    if cfg.backbone_id == "toy-1x1-stack":
        # every latent vector sees exactly one input pixel
        layers = [nn.Conv2d(c, hid, 1), nn.ReLU(), nn.Conv2d(hid, hid, 1), nn.ReLU()]
    elif cfg.backbone_id == "small-conv":
        # receptive field 25 px at stride 4 and 33 px at stride 8, larger than a typical box
        n_down = SMALL_CONV_FACTORS.index(cfg.input_height // cfg.latent_height) + 2
        layers = [nn.Conv2d(c, hid // 2, 3, 1, 1), nn.ReLU(), nn.Conv2d(hid // 2, hid, 3, 2, 1), nn.ReLU()]
        for _ in range(n_down - 1):
            layers += [nn.Conv2d(hid, hid, 3, 2, 1), nn.ReLU()]
        for _ in range(4 - n_down):
            layers += [nn.Conv2d(hid, hid, 3, 1, 1), nn.ReLU()]
    else:
        raise ConfigurationError("pluggable backbones must be passed explicitly")
    return nn.Sequential(*layers)


def _init_module(module: nn.Module, generator: torch.Generator) -> None:
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.Linear)):
            nn.init.kaiming_uniform_(m.weight, a=math.sqrt(5), generator=generator)
            if m.bias is not None:
                fan_in = m.weight[0].numel()
                bound = 1.0 / math.sqrt(fan_in)
                nn.init.uniform_(m.bias, -bound, bound, generator=generator)


class ModelOutput(NamedTuple):
    logits: torch.Tensor  # (B, C)
    maps: torch.Tensor  # (B, P, H, W)
    scores: torch.Tensor  # (B, P)


class PrototypeModel(nn.Module):
    """ProtoPNet-style network taking [0, 1] images and returning logits, similarity maps and scores."""

    def __init__(self, config: ModelConfig, backbone: Optional[nn.Module] = None,
                 generator: Optional[torch.Generator] = None):
        super().__init__()
        self.config = config
        if generator is None:
            generator = torch.Generator().manual_seed(0)
        self.normalize = Normalize(config.pixel_mean, config.pixel_std)
        if backbone is None:
            backbone = _make_backbone(config)
            _init_module(backbone, generator)
        self.features = backbone
        # the add-on layer belongs to the prototype layer: it maps backbone channels into [0, 1]^D
        self.add_on = nn.Sequential(nn.LazyConv2d(config.prototype_dim, 1), nn.Sigmoid())
        p, d, c = config.num_prototypes, config.prototype_dim, config.num_classes
        self.prototype_vectors = nn.Parameter(torch.rand(p, d, generator=generator))
        self.register_buffer(
            "prototype_class", torch.arange(c).repeat_interleave(config.prototypes_per_class)
        )
        self.last_layer = nn.Linear(p, c, bias=False)
        self.reset_class_connections()
        self._check_latent_shape()
        _init_module(self.add_on, generator)

    def _check_latent_shape(self):
        cfg = self.config
        with torch.no_grad():
            probe = torch.zeros(1, cfg.input_channels, cfg.input_height, cfg.input_width)
            z = self.add_on(self.features(self.normalize(probe)))
        expected = (1, cfg.prototype_dim, cfg.latent_height, cfg.latent_width)
        if tuple(z.shape) != expected:
            raise ConfigurationError(f"backbone produced {tuple(z.shape)}, config expects {expected}")

    @property
    def num_prototypes(self) -> int:
        return self.prototype_vectors.shape[0]

    @property
    def num_classes(self) -> int:
        return self.config.num_classes

    @property
    def class_connections(self) -> torch.Tensor:
        """Connection matrix of shape (|P|, C)."""
        return self.last_layer.weight.t()

    def class_identity(self) -> torch.Tensor:
        """One-hot (|P|, C) prototype-to-class assignment."""
        return nn.functional.one_hot(self.prototype_class, self.config.num_classes).to(
            self.last_layer.weight.dtype
        )

    def reset_class_connections(self):
        with torch.no_grad():
            ident = self.class_identity()
            self.last_layer.weight.copy_((1.0 * ident - 0.5 * (1 - ident)).t())

    def _check_input(self, x: torch.Tensor):
        cfg = self.config
        expected = (cfg.input_channels, cfg.input_height, cfg.input_width)
        if x.dim() != 4 or tuple(x.shape[1:]) != expected:
            raise InvalidInputError(f"expected input (B, {expected}), got {tuple(x.shape)}")

    def latent(self, x: torch.Tensor) -> torch.Tensor:
        self._check_input(x)
        return self.add_on(self.features(self.normalize(x)))

    def similarity_maps(self, z: torch.Tensor, prototype_idx: Optional[torch.Tensor] = None) -> torch.Tensor:
        """Maps for all prototypes, (B, P, H, W); or (B, H, W) for one prototype index per sample."""
        if prototype_idx is None:
            return similarity_from_distance(patch_distances(z, self.prototype_vectors), self.config.eta)
        b, _, h, w = z.shape
        protos = self.prototype_vectors[prototype_idx].unsqueeze(1)  # (B, 1, D)
        # same kernel as the all-prototype path so both agree bit for bit
        dist = torch.cdist(z.flatten(2).transpose(1, 2), protos, compute_mode="donot_use_mm_for_euclid_dist")
        dist = dist.reshape(b, h, w)
        return similarity_from_distance(dist, self.config.eta)

    def forward(self, x: torch.Tensor) -> ModelOutput:
        maps = self.similarity_maps(self.latent(x))
        scores = maps.flatten(2).amax(dim=2)
        logits = self.last_layer(scores)
        return ModelOutput(logits, maps, scores)

    def remove_prototypes(self, keep: torch.Tensor):
        """Keep only the prototypes flagged in the boolean vector ``keep``."""
        keep = keep.to(torch.bool)
        with torch.no_grad():
            self.prototype_vectors = nn.Parameter(self.prototype_vectors[keep].clone())
            self.prototype_class = self.prototype_class[keep].clone()
            w = self.last_layer.weight[:, keep].clone()
            self.last_layer = nn.Linear(int(keep.sum()), self.config.num_classes, bias=False)
            self.last_layer.weight.copy_(w)


def build_model(config: ModelConfig, seed: int = 0, backbone: Optional[nn.Module] = None) -> PrototypeModel:
    return PrototypeModel(config, backbone=backbone, generator=torch.Generator().manual_seed(seed))


@dataclass
class Checkpoint:
    model: PrototypeModel
    seed_lineage: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)


def checkpoint_bytes(model: PrototypeModel, seed_lineage=(), meta: Optional[dict] = None) -> bytes:
    payload = {
        "config": model.config.to_dict(),
        "prototype_vectors": model.prototype_vectors.detach().cpu(),
        "prototype_class": model.prototype_class.cpu(),
        "backbone": {k: v.detach().cpu() for k, v in model.features.state_dict().items()},
        "add_on": {k: v.detach().cpu() for k, v in model.add_on.state_dict().items()},
        "class_connections": model.last_layer.weight.detach().cpu(),
        "seed_lineage": list(seed_lineage),
        "meta": dict(meta or {}),
    }
    buf = io.BytesIO()
    torch.save(payload, buf)
    return CHECKPOINT_MAGIC + struct.pack("<I", CHECKPOINT_VERSION) + buf.getvalue()


def save_checkpoint(path, model: PrototypeModel, seed_lineage=(), meta: Optional[dict] = None) -> None:
    with open(path, "wb") as fh:
        fh.write(checkpoint_bytes(model, seed_lineage, meta))


def load_checkpoint(path, backbone: Optional[nn.Module] = None) -> Checkpoint:
    with open(path, "rb") as fh:
        blob = fh.read()
    n = len(CHECKPOINT_MAGIC)
    if blob[:n] != CHECKPOINT_MAGIC:
        raise ConfigurationError(f"{path}: not a prototype-model checkpoint")
    (version,) = struct.unpack("<I", blob[n:n + 4])
    if version != CHECKPOINT_VERSION:
        raise ConfigurationError(f"{path}: unsupported checkpoint format version {version}")
    payload = torch.load(io.BytesIO(blob[n + 4:]), weights_only=True)
    config = ModelConfig.from_dict(payload["config"])
    if config.backbone_id == "pluggable" and backbone is None:
        raise ConfigurationError("checkpoint uses a pluggable backbone; pass the module to load it into")
    model = PrototypeModel(config, backbone=backbone)
    model.features.load_state_dict(payload["backbone"])
    model.add_on.load_state_dict(payload["add_on"])
    keep = torch.ones(model.num_prototypes, dtype=torch.bool)
    n_saved = payload["prototype_vectors"].shape[0]
    if n_saved != model.num_prototypes:
        keep[n_saved:] = False
        model.remove_prototypes(keep)
    with torch.no_grad():
        model.prototype_vectors.copy_(payload["prototype_vectors"])
        model.prototype_class.copy_(payload["prototype_class"])
        model.last_layer.weight.copy_(payload["class_connections"])
    return Checkpoint(model, payload["seed_lineage"], payload["meta"])
