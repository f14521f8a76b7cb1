"""Spatial-misalignment benchmark: region-restricted PGD on the top prototype plus PLC/PAC/PRC/AC."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional, Protocol, Sequence

import torch

from .localization import ActivationBox, activation_box

log = logging.getLogger(__name__)

REPORT_SCHEMA_VERSION = 1


class CapabilityError(RuntimeError):
    """The model cannot be differentiated with respect to its input."""


class InvariantViolation(ValueError):
    pass


class PrototypeAdapter(Protocol):
    """What the benchmark needs from a prototypical-parts model.

    Calling the adapter on a (B, C, H, W) batch in [0, 1] returns ``(logits, maps, scores)`` with
    shapes (B, num_classes), (B, P, h, w) and (B, P), differentiable w.r.t. the input.
    """

    prototype_class: torch.Tensor

    def __call__(self, x: torch.Tensor): ...


@dataclass(frozen=True)
class PGDParams:
    eps_total: float = 0.4
    eps_step: float = 0.01
    iterations: int = 40

    def __post_init__(self):
        if not 0.0 <= self.eps_step <= self.eps_total:
            raise ValueError("need 0 <= eps_step <= eps_total")
        if self.iterations < 0:
            raise ValueError("iterations must be non-negative")


@dataclass
class BenchmarkRecord:
    image_id: str
    true_class: int
    prototype_index: int
    prototype_class: int
    g_before: float
    g_after: float
    box_before: ActivationBox
    box_after: ActivationBox
    plc_term: float
    pac_term: float
    r_before: int
    r_after: int
    prc_term: int
    # rank counted against classes other than the prototype's own class instead of the true class
    r_before_own: int
    r_after_own: int
    pred_before: int
    pred_after: int
    delta_lb: float

    def to_dict(self) -> dict:
        d = asdict(self)
        d["box_before"] = self.box_before.to_dict()
        d["box_after"] = self.box_after.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "BenchmarkRecord":
        d = dict(d)
        d["box_before"] = ActivationBox.from_dict(d["box_before"])
        d["box_after"] = ActivationBox.from_dict(d["box_after"])
        return cls(**d)


def _mean(values) -> float:
    values = list(values)
    return math.fsum(values) / len(values) if values else 0.0


@dataclass
class BenchmarkReport:
    records: list[BenchmarkRecord]
    config: dict = field(default_factory=dict)
    seed: int = 0
    failures: int = 0
    schema_version: int = REPORT_SCHEMA_VERSION

    @property
    def aggregates(self) -> dict:
        """PLC and PAC scaled by 100, PRC raw, accuracies and AC in percentage points."""
        recs = self.records
        acc_before = 100.0 * _mean(r.pred_before == r.true_class for r in recs)
        acc_after = 100.0 * _mean(r.pred_after == r.true_class for r in recs)
        return {
            "PLC": 100.0 * _mean(r.plc_term for r in recs),
            "PAC": 100.0 * _mean(r.pac_term for r in recs),
            "PRC": _mean(r.prc_term for r in recs),
            "acc_before": acc_before,
            "acc_after": acc_after,
            "AC": acc_before - acc_after,
            "delta_lb": _mean(r.delta_lb for r in recs),
            "n": len(recs),
        }

    def to_dict(self) -> dict:
        return {
            "schema_version": self.schema_version,
            "seed": self.seed,
            "config": self.config,
            "failures": self.failures,
            "aggregates": self.aggregates,
            "records": [r.to_dict() for r in self.records],
        }


def select_top_prototype(model, x: torch.Tensor) -> torch.Tensor:
    """Index of the most activated prototype per image (lowest index on ties)."""
    squeeze = x.dim() == 3
    with torch.no_grad():
        scores = model(x.unsqueeze(0) if squeeze else x)[2]
    idx = torch.argmax(scores, dim=1)
    return idx[0] if squeeze else idx


def plc_term(a: ActivationBox, b: ActivationBox) -> float:
    inter = a.intersection(b)
    return 1.0 - inter / (a.area + b.area - inter)


def pac_term(g_before: float, g_after: float) -> float:
    if not g_before > 0:
        raise InvariantViolation(f"maximum activation must be positive, got {g_before}")
    return (g_before - g_after) / g_before


def rank_from_scores(scores: torch.Tensor, prototype: int, excluded_class: int,
                     prototype_class: torch.Tensor) -> int:
    """Prototypes outside ``excluded_class`` whose score strictly exceeds that of ``prototype``."""
    other = prototype_class != excluded_class
    return int(((scores > scores[prototype]) & other).sum())


def rank(model, image: torch.Tensor, prototype: int, true_class: int) -> int:
    with torch.no_grad():
        scores = model(image.unsqueeze(0))[2][0]
    return rank_from_scores(scores, prototype, true_class, model.prototype_class)


def prc_term(r_after: int, r_before: int) -> int:
    return int(r_after) - int(r_before)


def delta_lower_bound(s: torch.Tensor, s_bar: torch.Tensor) -> float:
    """Frobenius distance between the maps before and after modification."""
    if s.shape != s_bar.shape:
        raise ValueError(f"shape mismatch {tuple(s.shape)} vs {tuple(s_bar.shape)}")
    return float(torch.linalg.norm((s.double() - s_bar.double()).flatten()))


def boxes_to_keep_mask(boxes: Sequence[ActivationBox], height: int, width: int) -> torch.Tensor:
    keep = torch.zeros(len(boxes), 1, height, width, dtype=torch.bool)
    for i, b in enumerate(boxes):
        keep[i, 0, b.row0:b.row1, b.col0:b.col1] = True
    return keep


def _within(x: torch.Tensor, ref: torch.Tensor, radius: float) -> torch.Tensor:
    """Project ``x`` onto the L-inf ball of ``radius`` around ``ref`` exactly.

    Rounding ``x0 + clamp(x - x0)`` in float32 can land just outside the ball. The test runs in
    float64, where the difference of two float32 values is exact, and offenders are moved to the
    boundary and then at most one ulp inwards.
    """
    d = x.double() - ref.double()
    over = d.abs() > radius
    if not over.any():
        return x
    target = (ref.double() + d.clamp(-radius, radius)).to(x.dtype)
    outside = (target.double() - ref.double()).abs() > radius
    target = torch.where(outside, torch.nextafter(target, ref), target)
    return torch.where(over, target, x)


def pgd_minimize(objective: Callable[[torch.Tensor], torch.Tensor], x: torch.Tensor,
                 keep: torch.Tensor, params: PGDParams,
                 on_step: Optional[Callable[[int, torch.Tensor], None]] = None):
    """Signed-gradient descent on a per-sample objective, leaving ``keep`` pixels untouched.

    Returns ``(best_x, best_value, start_value, failed)``; ``best_x`` is the iterate with the lowest
    objective seen, the unmodified input included. Samples whose objective or gradient turns
    non-finite are frozen at their input and flagged in ``failed``.
    """
    x0 = x.detach()
    keep = keep.expand_as(x0)
    cur = x0.clone()
    best = x0.clone()
    best_val = start_val = None
    failed = torch.zeros(x0.shape[0], dtype=torch.bool)
    view = (-1,) + (1,) * (x0.dim() - 1)
    for it in range(params.iterations + 1):
        last = it == params.iterations
        cur.requires_grad_(not last)
        with torch.set_grad_enabled(not last):
            val = objective(cur)
        if not last and not val.requires_grad:
            raise CapabilityError("objective is not differentiable with respect to the input")
        v = val.detach()
        if best_val is None:
            start_val = v.clone()
            best_val = v.clone()
            failed |= ~torch.isfinite(v)
        else:
            failed |= ~torch.isfinite(v)
            better = (v < best_val) & ~failed
            best_val = torch.where(better, v, best_val)
            best = torch.where(better.view(view), cur.detach(), best)
        if last:
            break
        (grad,) = torch.autograd.grad(val[~failed].sum() if failed.any() else val.sum(), cur)
        failed |= ~torch.isfinite(grad).flatten(1).all(dim=1)
        grad = torch.nan_to_num(grad).masked_fill(keep, 0.0)
        step = cur.detach() - params.eps_step * grad.sign()
        nxt = (x0 + (step - x0).clamp(-params.eps_total, params.eps_total)).clamp(0.0, 1.0)
        nxt = _within(_within(nxt, cur.detach(), params.eps_step), x0, params.eps_total)
        # re-copy protected pixels so they stay bit-identical
        nxt = torch.where(keep | failed.view(view), x0, nxt)
        cur = nxt
        if on_step is not None:
            on_step(it + 1, cur.detach())
    best = torch.where(failed.view(view), x0, best)
    return best, best_val, start_val, failed


def _top_activation_objective(model, prototypes: torch.Tensor):
    rows = torch.arange(prototypes.shape[0])

    def objective(xb):
        scores = model(xb)[2]
        return scores[rows, prototypes]

    return objective


def masked_pgd(model, x: torch.Tensor, prototype, box, params: PGDParams = PGDParams(),
               on_step=None) -> torch.Tensor:
    """Lower the maximum activation of ``prototype`` by changing only pixels outside ``box``.

    Accepts one image (C, H, W) with an int and a box, or a batch with one of each per image.
    """
    single = x.dim() == 3
    if single:
        x = x.unsqueeze(0)
        prototype = [int(prototype)]
        box = [box]
    protos = torch.as_tensor(prototype, dtype=torch.long).reshape(-1)
    keep = boxes_to_keep_mask(box, x.shape[-2], x.shape[-1])
    out, *_ = pgd_minimize(_top_activation_objective(model, protos), x, keep, params, on_step)
    return out[0] if single else out


def _records_for_batch(model, ids, x, y, params, on_step=None):
    _, _, in_h, in_w = x.shape
    rows = torch.arange(x.shape[0])
    pclass = model.prototype_class
    with torch.no_grad():
        logits, maps, scores = model(x)
    top = torch.argmax(scores, dim=1)
    top_maps = maps[rows, top]
    broken = ~(torch.isfinite(maps).flatten(1).all(1) & torch.isfinite(logits).all(1))
    whole = ActivationBox(0, 0, in_h, in_w)
    # broken images get a whole-image box, so the attack leaves them alone; they are skipped below
    boxes = [whole if broken[i] else activation_box(top_maps[i], in_h, in_w) for i in range(len(ids))]
    keep = boxes_to_keep_mask(boxes, in_h, in_w)
    x_adv, _, _, failed = pgd_minimize(_top_activation_objective(model, top), x, keep, params, on_step)
    failed = failed | broken
    with torch.no_grad():
        logits2, maps2, scores2 = model(x_adv)
    # an unmodified image is, by definition, evaluated exactly as before
    same = (x_adv == x).flatten(1).all(dim=1)
    # best-iterate guard: fall back to the input if re-evaluation disagrees with the search
    worse = scores2[rows, top] > scores[rows, top]
    revert = same | worse
    if revert.any():
        v = revert.view(-1, 1, 1, 1)
        x_adv = torch.where(v, x, x_adv)
        logits2 = torch.where(revert.view(-1, 1), logits, logits2)
        maps2 = torch.where(v, maps, maps2)
        scores2 = torch.where(revert.view(-1, 1), scores, scores2)
    finite = torch.isfinite(scores2).all(1) & torch.isfinite(logits2).all(1) & torch.isfinite(maps2).flatten(1).all(1)
    failed = failed | ~finite
    records = []
    for i in range(len(ids)):
        if failed[i]:
            log.warning("benchmark: skipping %s (non-finite model output or gradient)", ids[i])
            continue
        p, k = int(top[i]), int(y[i])
        g0, g1 = float(scores[i, p]), float(scores2[i, p])
        box_after = activation_box(maps2[i, p], in_h, in_w)
        r0 = rank_from_scores(scores[i], p, k, pclass)
        r1 = rank_from_scores(scores2[i], p, k, pclass)
        own = int(pclass[p])
        records.append(BenchmarkRecord(
            image_id=str(ids[i]), true_class=k, prototype_index=p, prototype_class=own,
            g_before=g0, g_after=g1, box_before=boxes[i], box_after=box_after,
            plc_term=plc_term(boxes[i], box_after), pac_term=pac_term(g0, g1),
            r_before=r0, r_after=r1, prc_term=prc_term(r1, r0),
            r_before_own=rank_from_scores(scores[i], p, own, pclass),
            r_after_own=rank_from_scores(scores2[i], p, own, pclass),
            pred_before=int(torch.argmax(logits[i])), pred_after=int(torch.argmax(logits2[i])),
            delta_lb=delta_lower_bound(maps[i, p], maps2[i, p]),
        ))
    return records, x_adv, int(failed.sum())


def run_benchmark(model, dataset, params: PGDParams = PGDParams(), seed: int = 0,
                  batch_size: int = 64, on_batch=None, on_step=None) -> BenchmarkReport:
    """Run the misalignment test on every image of ``dataset``.

    ``dataset`` needs ``ids``, ``images`` (N, C, H, W) in [0, 1] and ``labels``. Images are processed
    in index order; the attack has no random start, so ``seed`` is only recorded.
    ``on_batch(start, x, x_adv)`` is called after each batch and ``on_step(iteration, x_i)`` after
    every attack iteration within a batch.
    """
    n = len(dataset.ids)
    if n == 0:
        raise ValueError("benchmark dataset is empty")
    was_training = model.training
    grad_flags = [p.requires_grad for p in model.parameters()]
    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)
    records, failures = [], 0
    try:
        for start in range(0, n, batch_size):
            sl = slice(start, min(start + batch_size, n))
            x = dataset.images[sl]
            recs, x_adv, nf = _records_for_batch(model, dataset.ids[sl], x, dataset.labels[sl], params,
                                                 on_step)
            records.extend(recs)
            failures += nf
            if on_batch is not None:
                on_batch(start, x, x_adv)
    finally:
        for p, flag in zip(model.parameters(), grad_flags):
            p.requires_grad_(flag)
        model.train(was_training)
    config = {"pgd": asdict(params), "batch_size": batch_size}
    return BenchmarkReport(records=records, config=config, seed=seed, failures=failures)

