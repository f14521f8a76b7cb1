"""Small models and datasets shared by the tests."""

import math

import torch

from protoalign.data import ImageDataset
from protoalign.localization import ActivationBox
from protoalign.model import ModelConfig, build_model


def tiny_config(backbone="toy-1x1-stack", size=8, **kw) -> ModelConfig:
    latent = size if backbone == "toy-1x1-stack" else size // 4
    base = dict(num_classes=3, prototypes_per_class=2, prototype_dim=4, latent_height=latent,
                latent_width=latent, input_height=size, input_width=size, backbone_id=backbone,
                hidden_channels=8)
    base.update(kw)
    return ModelConfig(**base)


def tiny_model(backbone="toy-1x1-stack", size=8, seed=0, **kw):
    return build_model(tiny_config(backbone, size, **kw), seed=seed).eval()


def random_dataset(n, size, num_classes=3, seed=0) -> ImageDataset:
    g = torch.Generator().manual_seed(seed)
    images = torch.rand(n, 3, size, size, generator=g)
    labels = torch.randint(0, num_classes, (n,), generator=g)
    return ImageDataset([f"img{i:04d}" for i in range(n)], images, labels,
                        [f"c{i}" for i in range(num_classes)])


def brute_plc(a: ActivationBox, b: ActivationBox, h=40, w=40) -> float:
    inter = union = 0
    for i in range(h):
        for j in range(w):
            ina = a.row0 <= i < a.row1 and a.col0 <= j < a.col1
            inb = b.row0 <= i < b.row1 and b.col0 <= j < b.col1
            inter += ina and inb
            union += ina or inb
    return 1 - inter / union


def ref_percentile(values, q):
    v = sorted(float(a) for a in values)
    pos = q / 100 * (len(v) - 1)
    lo = math.floor(pos)
    hi = min(lo + 1, len(v) - 1)
    t, diff = pos - lo, v[hi] - v[lo]
    # numpy's "linear" method, including its choice of anchor for the interpolation
    return v[hi] - diff * (1 - t) if t >= 0.5 else v[lo] + diff * t


def double_toy_model():
    model = tiny_model(seed=11, size=6, num_classes=2, prototypes_per_class=2, prototype_dim=3,
                       hidden_channels=4).double()
    assert sum(p.numel() for p in model.parameters()) <= 1000
    return model


def fd_relative_error(model, loss_fn, eps=1e-6):
    params = [p for p in model.parameters() if p.requires_grad]
    grads = torch.autograd.grad(loss_fn(), params, allow_unused=True)
    analytic = torch.cat([(torch.zeros_like(p) if g is None else g).flatten() for p, g in zip(params, grads)])
    numeric = []
    with torch.no_grad():
        for p in params:
            flat = p.view(-1)
            for i in range(flat.numel()):
                orig = float(flat[i])
                flat[i] = orig + eps
                up = float(loss_fn())
                flat[i] = orig - eps
                down = float(loss_fn())
                flat[i] = orig
                numeric.append((up - down) / (2 * eps))
    numeric = torch.tensor(numeric, dtype=torch.float64)
    return float((analytic - numeric).norm() / max(float(analytic.norm()), float(numeric.norm()), 1e-30))
