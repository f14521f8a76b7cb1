"""Misalignment compensation: two-pass alignment loss, masking augmentation and the phase schedule.

All randomness comes from a ``numpy.random.Generator`` backed by the counter-based Philox
bit generator (see :func:`make_rng`), so a seed reproduces the same draws on every platform.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np
import torch
import torch.nn.functional as F

from .localization import binarize_percentile, upscale_map
from .model import (
    ConfigurationError,
    ModelConfig,
    PrototypeModel,
    build_model,
    cluster_separation_losses,
    patch_distances,
    save_checkpoint,
)

log = logging.getLogger(__name__)

PHASES = ("warmup", "joint", "projection", "pruning", "last-layer")
FILL_MODES = ("additive-noise", "gray-fill", "random-noise-fill")
LOG_COLUMNS = ("step", "CE", "clst", "sep", "L_align", "total")


class TrainingError(RuntimeError):
    pass


class SequencingError(RuntimeError):
    pass


def make_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(seed))


@dataclass
class AugConfig:
    apply_probability: float = 0.5
    min_regions: int = 1
    max_regions: int = 6
    extent_range: tuple = (0.1, 0.5)
    fill_modes: tuple = FILL_MODES
    noise_sigma: float = 0.1
    gray_value: float = 0.5

    def __post_init__(self):
        self.extent_range = tuple(float(v) for v in self.extent_range)
        self.fill_modes = tuple(self.fill_modes)
        lo, hi = self.extent_range
        if not 0.0 <= self.apply_probability <= 1.0:
            raise ConfigurationError("apply_probability must lie in [0, 1]")
        if self.min_regions < 1 or self.max_regions < self.min_regions:
            raise ConfigurationError("need 1 <= min_regions <= max_regions")
        if not 0.0 < lo <= hi <= 1.0:
            raise ConfigurationError("extent fractions must satisfy 0 < lo <= hi <= 1")
        unknown = set(self.fill_modes) - set(FILL_MODES)
        if unknown or not self.fill_modes:
            raise ConfigurationError(f"bad fill modes {self.fill_modes}")


@dataclass
class TrainConfig:
    lambda_align: float = 10.0
    masking_augmentation: bool = True
    smooth_mask: bool = False
    # plain-classifier pretraining of the conv body, standing in for an ImageNet-pretrained backbone
    pretrain_epochs: int = 20
    lr_pretrain: float = 2e-3
    warmup_epochs: int = 5
    joint_epochs: int = 20
    last_layer_epochs: int = 5
    batch_size: int = 32
    lr_features: float = 2e-3
    lr_add_on: float = 3e-3
    lr_prototypes: float = 3e-3
    lr_last_layer: float = 1e-3
    # L2 decay on the conv body and add-on keeps the add-on sigmoid out of saturation
    weight_decay: float = 1e-3
    w_clst: float = 0.8
    # ``sep`` is already negated, so a positive weight pushes other-class prototypes away
    w_sep: float = 0.08
    w_l1: float = 1e-4
    prune: bool = True
    prune_k: int = 6
    prune_threshold: int = 3
    seed: int = 0
    aug: AugConfig = field(default_factory=AugConfig)

    def __post_init__(self):
        if isinstance(self.aug, dict):
            self.aug = AugConfig(**self.aug)
        if self.lambda_align < 0:
            raise ConfigurationError("lambda_align must be non-negative")
        for name in ("pretrain_epochs", "warmup_epochs", "joint_epochs", "last_layer_epochs"):
            if getattr(self, name) < 0:
                raise ConfigurationError(f"{name} must be non-negative")
        if self.weight_decay < 0:
            raise ConfigurationError("weight_decay must be non-negative")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["aug"]["extent_range"] = list(self.aug.extent_range)
        d["aug"]["fill_modes"] = list(self.aug.fill_modes)
        return d


def load_config(path) -> tuple[ModelConfig, TrainConfig]:
    """Read ``{"model": {...}, "train": {...}, "aug": {...}}``; missing sections take defaults."""
    with open(path) as fh:
        raw = json.load(fh)
    train = dict(raw.get("train", {}))
    train["aug"] = AugConfig(**raw.get("aug", train.pop("aug", {})))
    return ModelConfig(**raw.get("model", {})), TrainConfig(**train)


# ---------------------------------------------------------------- masking augmentation

def masking_augmentation(x: torch.Tensor, cfg: AugConfig, rng: np.random.Generator) -> torch.Tensor:
    """Corrupt random rectangles of one image (C, H, W) in [0, 1].

    Draw order: apply coin, region count, then per region fill mode, height and width fractions,
    top-left corner, and fill noise if the mode needs it. Regions larger than the image are
    clamped to the image.
    """
    out = x.clone()
    if not rng.random() < cfg.apply_probability:
        return out
    c, h, w = x.shape
    lo, hi = cfg.extent_range
    for _ in range(int(rng.integers(cfg.min_regions, cfg.max_regions + 1))):
        mode = cfg.fill_modes[int(rng.integers(len(cfg.fill_modes)))]
        rh = min(max(int(round(rng.uniform(lo, hi) * h)), 1), h)
        rw = min(max(int(round(rng.uniform(lo, hi) * w)), 1), w)
        r0 = int(rng.integers(0, h - rh + 1))
        c0 = int(rng.integers(0, w - rw + 1))
        region = out[:, r0:r0 + rh, c0:c0 + rw]
        if mode == "additive-noise":
            noise = torch.from_numpy(rng.standard_normal((c, rh, rw)) * cfg.noise_sigma)
            fill = (region.double() + noise).clamp(0.0, 1.0)
        elif mode == "gray-fill":
            fill = torch.full((c, rh, rw), cfg.gray_value, dtype=torch.float64)
        else:
            fill = torch.from_numpy(rng.random((c, rh, rw)))
        out[:, r0:r0 + rh, c0:c0 + rw] = fill.to(out.dtype)
    return out


def augment_batch(x: torch.Tensor, cfg: AugConfig, rng: np.random.Generator) -> torch.Tensor:
    return torch.stack([masking_augmentation(xi, cfg, rng) for xi in x])


# ---------------------------------------------------------------- alignment loss

def make_prototype_mask(s: torch.Tensor, out_h: int, out_w: int, smooth: bool = False) -> torch.Tensor:
    """Pixel mask (..., out_h, out_w) from similarity maps (..., h, w); never carries gradient.

    Binary: 1 at or above the 90th percentile of the upscaled map. Smooth: the upscaled map
    rescaled to [0, 1], all ones for a constant map.
    """
    dense = upscale_map(s.detach(), out_h, out_w)
    if not smooth:
        return binarize_percentile(dense).to(s.dtype)
    lo = dense.flatten(-2).amin(-1)[..., None, None]
    hi = dense.flatten(-2).amax(-1)[..., None, None]
    span = hi - lo
    flat = span == 0
    return torch.where(flat, torch.ones_like(dense), (dense - lo) / torch.where(flat, 1.0, span))


def sample_class_prototypes(prototype_class: torch.Tensor, labels: torch.Tensor,
                            rng: np.random.Generator) -> torch.Tensor:
    """One prototype of each sample's class, uniformly at random."""
    out = []
    for y in labels.tolist():
        candidates = torch.nonzero(prototype_class == y).flatten()
        if candidates.numel() == 0:
            raise ConfigurationError(f"class {y} owns no prototypes")
        out.append(int(candidates[int(rng.integers(candidates.numel()))]))
    return torch.tensor(out, dtype=torch.long)


def _alignment_terms(model: PrototypeModel, x, labels, maps, rng, smooth=False) -> torch.Tensor:
    """Per-sample ``||s - s_bar||_F`` where ``s_bar`` is computed on the image masked by ``s``."""
    idx = sample_class_prototypes(model.prototype_class, labels, rng)
    s = maps[torch.arange(x.shape[0]), idx]
    mask = make_prototype_mask(s, x.shape[-2], x.shape[-1], smooth)
    x_bar = x * mask.unsqueeze(1)
    s_bar = model.similarity_maps(model.latent(x_bar), idx)
    return torch.linalg.vector_norm((s - s_bar).flatten(1), dim=1)


def alignment_loss(model: PrototypeModel, x: torch.Tensor, y, rng: np.random.Generator,
                   smooth: bool = False) -> torch.Tensor:
    """Batch mean of the two-pass alignment loss; accepts one image (C, H, W) or a batch."""
    if x.dim() == 3:
        x = x.unsqueeze(0)
    y = torch.as_tensor(y).reshape(-1)
    maps = model(x).maps
    return _alignment_terms(model, x, y, maps, rng, smooth).mean()


def total_loss(model: PrototypeModel, x: torch.Tensor, y: torch.Tensor, cfg: TrainConfig,
               rng: np.random.Generator):
    """CE + w_clst * clst + w_sep * sep + lambda_align * mean L_align. Returns ``(loss, parts)``."""
    if x.shape[0] == 0:
        raise ValueError("empty batch")
    z = model.latent(x)
    maps = model.similarity_maps(z)
    scores = maps.flatten(2).amax(dim=2)
    logits = model.last_layer(scores)
    ce = F.cross_entropy(logits, y)
    clst, sep = cluster_separation_losses(z, y, model.prototype_vectors, model.prototype_class)
    loss = ce + cfg.w_clst * clst + cfg.w_sep * sep
    l_align = torch.zeros((), dtype=loss.dtype)
    if cfg.lambda_align > 0:
        l_align = _alignment_terms(model, x, y, maps, rng, cfg.smooth_mask).mean()
        loss = loss + cfg.lambda_align * l_align
    parts = {"CE": ce.item(), "clst": clst.item(), "sep": sep.item(), "L_align": l_align.item(),
             "total": loss.item()}
    if not math.isfinite(parts["total"]):
        raise TrainingError(f"non-finite loss: {parts}")
    return loss, parts


def last_layer_loss(model: PrototypeModel, x, y, cfg: TrainConfig):
    logits = model(x).logits
    ce = F.cross_entropy(logits, y)
    off_class = 1.0 - model.class_identity().t()
    l1 = (model.last_layer.weight * off_class).abs().sum()
    loss = ce + cfg.w_l1 * l1
    parts = {"CE": ce.item(), "clst": "", "sep": "", "L_align": "", "total": loss.item()}
    if not math.isfinite(parts["total"]):
        raise TrainingError(f"non-finite loss: {parts}")
    return loss, parts


# ---------------------------------------------------------------- phases

@dataclass
class TrainingState:
    model: PrototypeModel
    rng: np.random.Generator
    history: list = field(default_factory=list)
    step: int = 0
    log_rows: list = field(default_factory=list)
    seed: int = 0


def init_state(model_cfg: ModelConfig, cfg: TrainConfig) -> TrainingState:
    model = build_model(model_cfg, seed=cfg.seed)
    return TrainingState(model=model, rng=make_rng(cfg.seed), seed=cfg.seed)


def pretrain_backbone(model: PrototypeModel, data, epochs: int, lr: float, batch_size: int,
                      rng: np.random.Generator) -> None:
    """Train the backbone as a global-max-pool classifier.

    No augmentation and no prototype terms, so every training variant sharing a seed starts
    from the same backbone.
    """
    body = model.features
    with torch.no_grad():
        width = body(model.normalize(data.images[:1])).shape[1]
    head = torch.nn.Linear(width, model.num_classes)
    gen = torch.Generator().manual_seed(int(rng.integers(2**31)))
    torch.nn.init.normal_(head.weight, std=0.01, generator=gen)
    torch.nn.init.zeros_(head.bias)
    opt = torch.optim.Adam(list(body.parameters()) + list(head.parameters()), lr=lr)
    n = len(data.labels)
    model.train()
    for _ in range(epochs):
        order = torch.from_numpy(rng.permutation(n))
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            feats = body(model.normalize(data.images[idx])).amax(dim=(2, 3))
            loss = F.cross_entropy(head(feats), data.labels[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
    model.eval()


@torch.no_grad()
def standardize_add_on(model: PrototypeModel, images: torch.Tensor, max_images: int = 256) -> None:
    """Rescale the add-on conv so its pre-activations have zero mean and unit std per channel.

    A pretrained body can emit features large enough to saturate the add-on sigmoid, which
    leaves the prototype layer without gradient; this puts every seed in the same regime.
    """
    if len(images) == 0:
        return
    conv = model.add_on[0]
    pre = conv(model.features(model.normalize(images[:max_images])))
    mean = pre.mean(dim=(0, 2, 3))
    std = pre.std(dim=(0, 2, 3)).clamp_min(1e-6)
    conv.weight.div_(std[:, None, None, None])
    conv.bias.sub_(mean).div_(std)


def _set_trainable(model: PrototypeModel, features: bool, prototypes: bool, last: bool):
    for p in model.features.parameters():
        p.requires_grad_(features)
    for p in model.add_on.parameters():
        p.requires_grad_(prototypes)
    model.prototype_vectors.requires_grad_(prototypes)
    model.last_layer.weight.requires_grad_(last)


def _train_epochs(state: TrainingState, data, cfg: TrainConfig, epochs: int, params, loss_fn):
    model = state.model
    if epochs == 0 or not params:
        return
    opt = torch.optim.Adam(params)
    n = len(data.labels)
    model.train()
    for _ in range(epochs):
        order = torch.from_numpy(state.rng.permutation(n))
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            x, y = data.images[idx], data.labels[idx]
            if cfg.masking_augmentation:
                x = augment_batch(x, cfg.aug, state.rng)
            loss, parts = loss_fn(x, y)
            opt.zero_grad()
            loss.backward()
            opt.step()
            state.step += 1
            state.log_rows.append({"step": state.step, **parts})
    model.eval()


@torch.no_grad()
def latent_volumes(model: PrototypeModel, images: torch.Tensor, batch_size: int = 128) -> torch.Tensor:
    model.eval()
    return torch.cat([model.latent(images[i:i + batch_size]) for i in range(0, len(images), batch_size)])


@torch.no_grad()
def project_prototypes(model: PrototypeModel, data, batch_size: int = 128) -> None:
    """Replace every prototype by its nearest latent patch among training images of its class."""
    z = latent_volumes(model, data.images, batch_size)  # (N, D, H, W)
    patches = z.permute(0, 2, 3, 1).reshape(z.shape[0], -1, z.shape[1])  # (N, HW, D)
    for j in range(model.num_prototypes):
        c = int(model.prototype_class[j])
        own = torch.nonzero(data.labels == c).flatten()
        if own.numel() == 0:
            raise ConfigurationError(f"no training images of class {c} to project onto")
        cand = patches[own].reshape(-1, patches.shape[-1])
        d = torch.cdist(cand, model.prototype_vectors[j:j + 1],
                        compute_mode="donot_use_mm_for_euclid_dist").flatten()
        model.prototype_vectors[j] = cand[int(torch.argmin(d))]


@torch.no_grad()
def prune_prototypes(model: PrototypeModel, data, k: int = 6, threshold: int = 3,
                     batch_size: int = 128) -> torch.Tensor:
    """Drop prototypes whose k nearest training images (by closest patch) mostly belong to other classes.

    A prototype survives if at least ``threshold`` of those k images share its class. The last
    prototype of a class is never removed. Returns the boolean keep-vector that was applied.
    """
    z = latent_volumes(model, data.images, batch_size)
    d = torch.cat([patch_distances(z[i:i + batch_size], model.prototype_vectors).flatten(2).amin(2)
                   for i in range(0, len(z), batch_size)])  # (N, P)
    k = min(k, d.shape[0])
    nearest = torch.topk(d, k, dim=0, largest=False).indices  # (k, P)
    pure = (data.labels[nearest] == model.prototype_class.unsqueeze(0)).sum(0)
    keep = pure >= threshold
    for c in range(model.num_classes):
        own = model.prototype_class == c
        if own.any() and not (keep & own).any():
            keep[torch.nonzero(own).flatten()[0]] = True
    model.remove_prototypes(keep)
    return keep


def run_training_phase(state: TrainingState, phase: str, cfg: TrainConfig, data,
                       out_dir: Optional[str] = None) -> TrainingState:
    """Run one phase in place and return the state; writes ``phase_<name>.ckpt`` if ``out_dir``."""
    if phase not in PHASES:
        raise SequencingError(f"unknown phase {phase!r}")
    if phase == "pruning" and "projection" not in state.history:
        raise SequencingError("pruning needs projected prototypes; run projection first")
    model = state.model
    if phase == "warmup":
        _set_trainable(model, features=False, prototypes=True, last=False)
        _train_epochs(state, data, cfg, cfg.warmup_epochs,
                      [{"params": list(model.add_on.parameters()), "lr": cfg.lr_add_on,
                        "weight_decay": cfg.weight_decay},
                       {"params": [model.prototype_vectors], "lr": cfg.lr_prototypes}],
                      lambda x, y: total_loss(model, x, y, cfg, state.rng))
    elif phase == "joint":
        _set_trainable(model, features=True, prototypes=True, last=False)
        _train_epochs(state, data, cfg, cfg.joint_epochs,
                      [{"params": list(model.features.parameters()), "lr": cfg.lr_features,
                        "weight_decay": cfg.weight_decay},
                       {"params": list(model.add_on.parameters()), "lr": cfg.lr_add_on,
                        "weight_decay": cfg.weight_decay},
                       {"params": [model.prototype_vectors], "lr": cfg.lr_prototypes}],
                      lambda x, y: total_loss(model, x, y, cfg, state.rng))
    elif phase == "projection":
        project_prototypes(model, data)
    elif phase == "pruning":
        keep = prune_prototypes(model, data, cfg.prune_k, cfg.prune_threshold)
        log.info("pruning kept %d of %d prototypes", int(keep.sum()), keep.numel())
    else:
        _set_trainable(model, features=False, prototypes=False, last=True)
        _train_epochs(state, data, cfg, cfg.last_layer_epochs,
                      [{"params": [model.last_layer.weight], "lr": cfg.lr_last_layer}],
                      lambda x, y: last_layer_loss(model, x, y, cfg))
    _set_trainable(model, True, True, True)
    model.eval()
    state.history.append(phase)
    if out_dir is not None:
        save_checkpoint(os.path.join(out_dir, f"phase_{phase}.ckpt"), model,
                        seed_lineage=[state.seed], meta={"phase": phase, "history": list(state.history)})
    return state


def write_training_log(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=LOG_COLUMNS, extrasaction="ignore")
        writer.writeheader()
        for row in rows:
            writer.writerow(row)


def train(model_cfg: ModelConfig, cfg: TrainConfig, data, out_dir: Optional[str] = None) -> TrainingState:
    """Full schedule: warmup, joint, projection, pruning (if enabled), last-layer."""
    state = init_state(model_cfg, cfg)
    if cfg.pretrain_epochs > 0:
        pretrain_backbone(state.model, data, cfg.pretrain_epochs, cfg.lr_pretrain, cfg.batch_size, state.rng)
    standardize_add_on(state.model, data.images)
    for phase in PHASES:
        if phase == "pruning" and not cfg.prune:
            continue
        run_training_phase(state, phase, cfg, data, out_dir)
    if out_dir is not None:
        write_training_log(state.log_rows, os.path.join(out_dir, "train_log.csv"))
    return state
