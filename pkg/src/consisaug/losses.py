"""Supervised detection loss, flip-consistency losses and their combination.

The consistency terms compare the student's prediction at anchor ``k`` with
the teacher's prediction at the mirrored anchor ``perm[k]`` on the flipped
image. The teacher side is always plain numpy (detached), so gradients only
reach the student.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .boxgeom import AnchorGrid, FlipKind, encode, iou_matrix
from .errors import InvalidThresholds, NotADistribution, ShapeMismatch
from .model import DetectorOutput

POSITIVE_IOU = 0.5
NEGATIVE_IOU = 0.4

NEGATIVE = -1
IGNORE = -2


class NoAnchorsWarning(UserWarning):
    """A loss term had no anchors to average over and evaluated to 0."""


@dataclass(frozen=True)
class LossBreakdown:
    sup: float
    con_loc: float
    con_cls: float
    con: float
    total: float
    consistency_weight: float = 1.0

    def as_dict(self) -> dict[str, float]:
        return {"sup": self.sup, "con_loc": self.con_loc, "con_cls": self.con_cls,
                "con": self.con, "total": self.total}


@dataclass
class MatchedTargets:
    """Per-anchor assignment: gt index for positives, ``NEGATIVE`` or ``IGNORE``."""

    assignment: np.ndarray
    deltas: np.ndarray
    classes: np.ndarray

    @property
    def positive(self) -> np.ndarray:
        return self.assignment >= 0

    @property
    def negative(self) -> np.ndarray:
        return self.assignment == NEGATIVE


# ------------------------------------------------------------------ matching

def match_targets(grid: AnchorGrid, gt_boxes, gt_classes=None,
                  pos_threshold: float = POSITIVE_IOU, neg_threshold: float = NEGATIVE_IOU) -> MatchedTargets:
    if not 0.0 <= neg_threshold <= pos_threshold <= 1.0:
        raise InvalidThresholds(f"need 0 <= neg ({neg_threshold}) <= pos ({pos_threshold}) <= 1")
    anchors = grid.anchors()
    k = len(anchors)
    gt = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    classes = np.zeros(len(gt), dtype=np.int64) if gt_classes is None else np.asarray(gt_classes, dtype=np.int64)
    assignment = np.full(k, NEGATIVE, dtype=np.int64)
    deltas = np.zeros((k, 4))
    anchor_cls = np.zeros(k, dtype=np.int64)
    if len(gt) == 0:
        return MatchedTargets(assignment, deltas, anchor_cls)

    ious = iou_matrix(anchors, gt)
    best_gt = ious.argmax(axis=1)  # ties -> lowest gt index
    best_iou = ious[np.arange(k), best_gt]
    assignment[best_iou >= neg_threshold] = IGNORE
    pos = best_iou >= pos_threshold
    assignment[pos] = best_gt[pos]
    forced = set()
    for g in range(len(gt)):
        a = int(ious[:, g].argmax())  # ties -> lowest anchor index
        if a not in forced:
            assignment[a] = g
            forced.add(a)
    pos = assignment >= 0
    deltas[pos] = encode(gt[assignment[pos]], anchors[pos])
    anchor_cls[pos] = classes[assignment[pos]]
    return MatchedTargets(assignment, deltas, anchor_cls)


# ---------------------------------------------------------- supervised loss

def _as_list(targets) -> list[MatchedTargets]:
    return [targets] if isinstance(targets, MatchedTargets) else list(targets)


def supervised_terms(student_out: DetectorOutput, targets) -> tuple[ad.Tensor, ad.Tensor]:
    """Cross-entropy and smooth-L1 parts, each a per-image mean averaged over the batch."""
    out = student_out.batched()
    targets = _as_list(targets)
    n, k, c1 = out.log_cls.shape
    if len(targets) != n or any(t.assignment.shape != (k,) for t in targets):
        raise ShapeMismatch("targets do not match the detector output")
    ce_w = np.zeros((n, k, c1))
    loc_w = np.zeros((n, k, 4))
    loc_t = np.zeros((n, k, 4))
    for i, t in enumerate(targets):
        pos, neg = t.positive, t.negative
        n_cls = int(pos.sum() + neg.sum())
        if n_cls:
            ce_w[i, neg, 0] = -1.0 / (n * n_cls)
            ce_w[i, np.flatnonzero(pos), t.classes[pos] + 1] = -1.0 / (n * n_cls)
        n_pos = int(pos.sum())
        if n_pos:
            loc_w[i, pos] = 1.0 / (n * n_pos)
            loc_t[i, pos] = t.deltas[pos]
    if not ce_w.any():
        warnings.warn("supervised loss: every anchor is ignored", NoAnchorsWarning, stacklevel=2)
    ce = ad.sum(ad.mul(out.log_cls, ce_w))
    if loc_w.any():
        loc = ad.sum(ad.mul(ad.smooth_l1(ad.sub(out.loc, loc_t)), loc_w))
    else:
        loc = ad.Tensor(0.0)
    return ce, loc


def supervised_loss(student_out: DetectorOutput, targets) -> ad.Tensor:
    ce, loc = supervised_terms(student_out, targets)
    return ad.add(ce, loc)


# ------------------------------------------------------ localization consistency

def loc_consistency_pair(student_delta, teacher_delta, kind: FlipKind) -> float:
    """Quarter of the squared distance after sign-correcting the teacher delta."""
    s = np.asarray(student_delta, dtype=np.float64)
    t = np.asarray(teacher_delta, dtype=np.float64) * kind.delta_signs()
    return float(np.sum((s - t) ** 2) / 4.0)


def _pairing(perm, kind, n: int) -> tuple[np.ndarray, list[FlipKind]]:
    perms = np.asarray(perm, dtype=np.intp)
    if perms.ndim == 1:
        perms = np.broadcast_to(perms, (n, perms.shape[0]))
    kinds = [kind] * n if isinstance(kind, FlipKind) else list(kind)
    if perms.shape[0] != n or len(kinds) != n:
        raise ShapeMismatch("one permutation and flip kind per image required")
    return perms, kinds


def _mask_weights(mask, n: int, k: int, name: str) -> np.ndarray:
    """Per-anchor weights realizing a per-image masked mean averaged over the batch."""
    m = np.ones((n, k), dtype=bool) if mask is None else np.broadcast_to(np.asarray(mask, dtype=bool), (n, k))
    counts = m.sum(axis=1, keepdims=True)
    if not counts.all():
        warnings.warn(f"{name}: empty anchor mask for {int((counts == 0).sum())} image(s)",
                      NoAnchorsWarning, stacklevel=3)
    return np.where(m, 1.0 / (n * np.maximum(counts, 1)), 0.0)


def _teacher_array(t) -> np.ndarray:
    return t.data if isinstance(t, ad.Tensor) else np.asarray(t, dtype=np.float64)


def loc_consistency_total(student_out: DetectorOutput, teacher_out: DetectorOutput, perm, kind,
                          mask=None) -> ad.Tensor:
    """Mean of the pair loss over masked anchors ``(k, perm[k])``.

    ``perm``/``kind`` may be a single permutation and kind or one per image.
    """
    s_out = student_out.batched()
    t_loc = _teacher_array(teacher_out.loc)
    if t_loc.ndim == 2:
        t_loc = t_loc[None]
    n, k, _ = s_out.loc.shape
    if t_loc.shape != (n, k, 4):
        raise ShapeMismatch(f"student loc {s_out.loc.shape} vs teacher loc {t_loc.shape}")
    perms, kinds = _pairing(perm, kind, n)
    target = np.empty_like(t_loc)
    for i in range(n):
        target[i] = t_loc[i, perms[i]] * kinds[i].delta_signs()
    w = _mask_weights(mask, n, k, "localization consistency")
    w4 = np.repeat(w[..., None] / 4.0, 4, axis=2)
    return ad.sum(ad.mul(ad.square(ad.sub(s_out.loc, target)), w4))


# ---------------------------------------------------- classification consistency

def jsd(p, q) -> float:
    """Jensen-Shannon divergence in nats; zero-probability terms contribute 0."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    for name, d in (("p", p), ("q", q)):
        if np.any(d < 0) or abs(d.sum() - 1.0) > 1e-9:
            raise NotADistribution(f"{name} is not a probability distribution")
    if p.shape != q.shape:
        raise ShapeMismatch(f"jsd: shapes {p.shape} and {q.shape} differ")
    return float(jsd_rows(p[None], q[None])[0])


def _xlogy(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(x > 0, x * np.log(np.where(x > 0, y, 1.0)), 0.0)


def jsd_rows(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Row-wise JSD over the last axis (no validation)."""
    m = 0.5 * (p + q)
    return 0.5 * (_xlogy(p, p) - _xlogy(p, m)).sum(-1) + 0.5 * (_xlogy(q, q) - _xlogy(q, m)).sum(-1)


def jsd_tensor(log_p: ad.Tensor, q: np.ndarray, weights: np.ndarray) -> ad.Tensor:
    """sum_k weights[k] * JS(p_k, q_k) with ``p = exp(log_p)`` on the tape.

    Uses JS = 0.5 sum p log p + 0.5 sum q log q - sum m log m, m = (p + q) / 2.
    """
    p = ad.exp(log_p)
    m = ad.mul(ad.add(p, q), 0.5)
    wc = np.repeat(weights[..., None], q.shape[-1], axis=-1)
    plogp = ad.sum(ad.mul(ad.mul(p, log_p), 0.5 * wc))
    mlogm = ad.sum(ad.mul(ad.mul(m, ad.log(m)), wc))
    qlogq = float(np.sum(0.5 * wc * _xlogy(q, q)))
    return ad.add(ad.sub(plogp, mlogm), qlogq)


def cls_consistency_total(student_out: DetectorOutput, teacher_out: DetectorOutput, perm, mask=None) -> ad.Tensor:
    """Mean JSD between student class distributions and permuted teacher distributions."""
    s_out = student_out.batched()
    t_cls = _teacher_array(teacher_out.cls)
    if t_cls.ndim == 2:
        t_cls = t_cls[None]
    n, k, c1 = s_out.log_cls.shape
    if t_cls.shape != (n, k, c1):
        raise ShapeMismatch(f"student cls {s_out.log_cls.shape} vs teacher cls {t_cls.shape}")
    perms, _ = _pairing(perm, [FlipKind.HORIZONTAL] * n, n)
    q = np.stack([t_cls[i, perms[i]] for i in range(n)])
    w = _mask_weights(mask, n, k, "classification consistency")
    return jsd_tensor(s_out.log_cls, q, w)


def teacher_confidence_mask(teacher_out: DetectorOutput, perm, threshold: float) -> np.ndarray | None:
    """Anchors whose paired teacher foreground probability exceeds ``threshold``; None when off."""
    if threshold <= 0.0:
        return None
    t_cls = _teacher_array(teacher_out.cls)
    if t_cls.ndim == 2:
        t_cls = t_cls[None]
    n = t_cls.shape[0]
    perms, _ = _pairing(perm, [FlipKind.HORIZONTAL] * n, n)
    fg = 1.0 - t_cls[..., 0]
    return np.stack([fg[i, perms[i]] > threshold for i in range(n)])


# -------------------------------------------------------------- combination

def consistency_total(con_loc, con_cls):
    return con_loc + con_cls


def _value(x) -> float:
    return float(x.data) if isinstance(x, ad.Tensor) else float(x)


def total_loss(sup, con_loc, con_cls, consistency_weight: float = 1.0):
    """Objective ``sup + weight * (con_loc + con_cls)`` and its float breakdown.

    Returns ``(objective, breakdown)``; the objective is a Tensor when any input is.
    """
    if consistency_weight < 0:
        raise ValueError("consistency_weight must be >= 0")
    con = consistency_total(con_loc, con_cls)
    if consistency_weight == 1.0:
        objective = sup + con
    else:
        objective = sup + consistency_weight * con
    breakdown = LossBreakdown(
        sup=_value(sup), con_loc=_value(con_loc), con_cls=_value(con_cls),
        con=_value(con), total=_value(objective), consistency_weight=consistency_weight,
    )
    return objective, breakdown


def ramp_weight(step: int, ramp_steps: int, weight: float) -> float:
    """Optional linear ramp-up of the consistency weight; off when ramp_steps == 0."""
    if ramp_steps <= 0:
        return weight
    return weight * min(1.0, step / ramp_steps)


LN2 = math.log(2.0)
