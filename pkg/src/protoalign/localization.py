"""Explanation artifacts derived from a similarity map: dense map, percentile mask, box, overlay.

Bilinear kernel: half-pixel centres without corner alignment. Output pixel ``i`` of an
``out``-long axis samples the source at ``u = (i + 0.5) * in / out - 0.5``, clamped below at 0;
the two neighbours ``floor(u)`` and ``min(floor(u) + 1, in - 1)`` are blended with weight
``u - floor(u)``. This is ``torch.nn.functional.interpolate(mode="bilinear", align_corners=False)``.

Percentile: numpy's default "linear" method. For ``n`` sorted values ``v`` the q-th percentile
sits at virtual index ``q / 100 * (n - 1)`` and is interpolated between its neighbours.
"""

from __future__ import annotations

import io
import json
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image, ImageDraw


class DegenerateMaskError(ValueError):
    pass


@dataclass(frozen=True)
class ActivationBox:
    """Half-open pixel rectangle ``[row0, row1) x [col0, col1)``."""

    row0: int
    col0: int
    row1: int
    col1: int

    def __post_init__(self):
        if not (self.row0 < self.row1 and self.col0 < self.col1 and self.row0 >= 0 and self.col0 >= 0):
            raise ValueError(f"invalid box {self}")

    @property
    def area(self) -> int:
        return (self.row1 - self.row0) * (self.col1 - self.col0)

    def intersection(self, other: "ActivationBox") -> int:
        h = min(self.row1, other.row1) - max(self.row0, other.row0)
        w = min(self.col1, other.col1) - max(self.col0, other.col0)
        return max(h, 0) * max(w, 0)

    def to_mask(self, height: int, width: int) -> torch.Tensor:
        m = torch.zeros(height, width, dtype=torch.bool)
        m[self.row0:self.row1, self.col0:self.col1] = True
        return m

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d) -> "ActivationBox":
        return cls(int(d["row0"]), int(d["col0"]), int(d["row1"]), int(d["col1"]))


def upscale_map(s: torch.Tensor, out_h: int, out_w: int) -> torch.Tensor:
    """Bilinearly upscale ``(..., h, w)`` maps to ``(..., out_h, out_w)``."""
    if out_h < 1 or out_w < 1:
        raise ValueError("upscaled size must be positive")
    if out_h < s.shape[-2] or out_w < s.shape[-1]:
        raise ValueError("upscale_map only enlarges maps")
    lead = s.shape[:-2]
    flat = s.reshape(-1, 1, *s.shape[-2:])
    out = F.interpolate(flat, size=(out_h, out_w), mode="bilinear", align_corners=False)
    return out.reshape(*lead, out_h, out_w)


def percentile(values: torch.Tensor, q: float = 90.0) -> torch.Tensor:
    """q-th percentile over the last two dims, numpy "linear" method, computed in float64."""
    if not 0.0 < q < 100.0:
        raise ValueError("q must lie in (0, 100)")
    flat = values.detach().reshape(*values.shape[:-2], -1).to(torch.float64)
    v = torch.sort(flat, dim=-1).values
    n = v.shape[-1]
    pos = (q / 100.0) * (n - 1)
    lo = int(np.floor(pos))
    hi = min(lo + 1, n - 1)
    t = pos - lo
    a, b = v[..., lo], v[..., hi]
    diff = b - a
    # numpy's lerp: anchor on the nearer neighbour for numerical symmetry
    return b - diff * (1 - t) if t >= 0.5 else a + diff * t


def binarize_percentile(d: torch.Tensor, q: float = 90.0) -> torch.Tensor:
    """Mask of pixels at or above the q-th percentile; works on (H, W) or batched (..., H, W)."""
    thr = percentile(d, q)
    return d.to(torch.float64) >= thr[..., None, None]


def bounding_box(mask: torch.Tensor) -> ActivationBox:
    if mask.dim() != 2:
        raise ValueError("bounding_box expects a 2-D mask")
    rows = torch.nonzero(mask.any(dim=1)).flatten()
    cols = torch.nonzero(mask.any(dim=0)).flatten()
    if rows.numel() == 0:
        raise DegenerateMaskError("mask has no true pixel")
    return ActivationBox(int(rows[0]), int(cols[0]), int(rows[-1]) + 1, int(cols[-1]) + 1)


def activation_box(s: torch.Tensor, out_h: int, out_w: int, q: float = 90.0) -> ActivationBox:
    """Similarity map (h, w) to the box shown to the user."""
    return bounding_box(binarize_percentile(upscale_map(s.detach(), out_h, out_w), q))


def _to_uint8(img: np.ndarray) -> np.ndarray:
    return np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)


def _png_bytes(im: Image.Image) -> bytes:
    buf = io.BytesIO()
    im.save(buf, format="PNG")
    return buf.getvalue()


def render_overlay(x: torch.Tensor, d: torch.Tensor, box: Optional[ActivationBox] = None,
                   alpha: float = 0.5, box_color=(0, 255, 0), path=None) -> bytes:
    """Blend a jet-coloured dense map over the image (C, H, W in [0, 1]) and draw the box.

    Returns the PNG bytes; also writes them to ``path`` if given.
    """
    from matplotlib import colormaps

    img = x.detach().cpu().double().numpy()
    if img.shape[0] == 1:
        img = np.repeat(img, 3, axis=0)
    img = img.transpose(1, 2, 0)
    dm = d.detach().cpu().double().numpy()
    if dm.shape != img.shape[:2]:
        raise ValueError(f"map {dm.shape} does not match image {img.shape[:2]}")
    span = dm.max() - dm.min()
    norm = (dm - dm.min()) / span if span > 0 else np.zeros_like(dm)
    heat = colormaps["jet"](norm)[..., :3]
    blended = (1.0 - alpha) * img + alpha * heat
    im = Image.fromarray(_to_uint8(blended), mode="RGB")
    if box is not None:
        draw = ImageDraw.Draw(im)
        draw.rectangle([box.col0, box.row0, box.col1 - 1, box.row1 - 1], outline=box_color)
    data = _png_bytes(im)
    if path is not None:
        with open(path, "wb") as fh:
            fh.write(data)
    return data


def mask_to_png(mask: torch.Tensor) -> bytes:
    """1-bit PNG of a boolean mask."""
    arr = mask.detach().cpu().numpy().astype(bool)
    return _png_bytes(Image.fromarray(arr).convert("1"))
