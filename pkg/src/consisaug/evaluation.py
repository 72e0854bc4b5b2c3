"""Detection post-processing and metrics: precision, recall, AP50, F1, F2."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .boxgeom import AnchorGrid, decode, iou_matrix
from .model import DetectorOutput, DetectorParams, forward

CONF_THRESHOLD = 0.25
NMS_IOU = 0.45
MATCH_IOU = 0.5


@dataclass(frozen=True)
class Detection:
    box: tuple[float, float, float, float]
    class_id: int
    score: float
    anchor: int = 0


@dataclass(frozen=True)
class MetricsReport:
    precision: float
    recall: float
    map50: float
    f1: float
    f2: float
    tp: int
    fp: int
    fn: int
    conf_threshold: float = CONF_THRESHOLD
    nms_iou: float = NMS_IOU

    def as_dict(self) -> dict:
        return asdict(self)


def f_beta(precision: float, recall: float, beta: float) -> float:
    b2 = beta * beta
    denom = b2 * precision + recall
    return 0.0 if denom == 0 else (1 + b2) * precision * recall / denom


def decode_detections(out: DetectorOutput, grid: AnchorGrid, conf_threshold: float) -> list[Detection]:
    """One candidate per anchor scored by ``1 - P(background)``."""
    cls = out.cls.data if hasattr(out.cls, "data") else np.asarray(out.cls)
    loc = out.loc.data if hasattr(out.loc, "data") else np.asarray(out.loc)
    scores = 1.0 - cls[:, 0]
    class_ids = cls[:, 1:].argmax(axis=1)
    keep = np.flatnonzero(scores >= conf_threshold)
    boxes = decode(loc[keep], grid.anchors()[keep])
    return [Detection(tuple(map(float, b)), int(class_ids[k]), float(scores[k]), int(k))
            for k, b in zip(keep, boxes)]


def nms(dets: list[Detection], iou_threshold: float = NMS_IOU) -> list[Detection]:
    """Greedy per-class suppression; ties in score keep the lower anchor index first."""
    if not 0.0 < iou_threshold <= 1.0:
        raise ValueError("iou_threshold must lie in (0, 1]")
    order = sorted(dets, key=lambda d: (-d.score, d.anchor))
    if not order:
        return []
    boxes = np.array([d.box for d in order])
    classes = np.array([d.class_id for d in order])
    ious = iou_matrix(boxes, boxes)
    suppressed = np.zeros(len(order), dtype=bool)
    kept = []
    for i in range(len(order)):
        if suppressed[i]:
            continue
        kept.append(order[i])
        suppressed |= (ious[i] >= iou_threshold) & (classes == classes[i])
    return kept


def _match(dets_per_image, gts_per_image) -> tuple[np.ndarray, np.ndarray, int]:
    """Rank all detections by score; greedy-match to unmatched gts at IoU >= 0.5.

    Returns (scores, tp flags) in rank order and the total gt count.
    """
    flat = [(d.score, img, k, d) for img, dets in enumerate(dets_per_image) for k, d in enumerate(dets)]
    # stable order: score desc, then image, then position within the image
    flat.sort(key=lambda t: (-t[0], t[1], t[2]))
    gts = [np.asarray(g, dtype=np.float64).reshape(-1, 4) for g in gts_per_image]
    used = [np.zeros(len(g), dtype=bool) for g in gts]
    tp = np.zeros(len(flat), dtype=bool)
    for r, (_, img, _, d) in enumerate(flat):
        g = gts[img]
        if len(g) == 0:
            continue
        ious = iou_matrix(np.asarray(d.box)[None], g)[0]
        ious[used[img]] = -1.0
        best = int(ious.argmax())
        if ious[best] >= MATCH_IOU:
            used[img][best] = True
            tp[r] = True
    scores = np.array([t[0] for t in flat])
    return scores, tp, sum(len(g) for g in gts)


def average_precision_50(dets_per_image, gts_per_image) -> float:
    """All-point interpolated area under the precision-recall curve at IoU 0.5."""
    _, tp, n_gt = _match(dets_per_image, gts_per_image)
    if n_gt == 0 or len(tp) == 0:
        return 0.0
    ctp = np.cumsum(tp)
    cfp = np.cumsum(~tp)
    recall = ctp / n_gt
    precision = ctp / (ctp + cfp)
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    idx = np.flatnonzero(mrec[1:] != mrec[:-1])
    return float(np.sum((mrec[idx + 1] - mrec[idx]) * mpre[idx + 1]))


def prf_counts(dets_per_image, gts_per_image, conf_threshold: float) -> tuple[int, int, int]:
    kept = [[d for d in dets if d.score >= conf_threshold] for dets in dets_per_image]
    _, tp, n_gt = _match(kept, gts_per_image)
    n_tp = int(tp.sum())
    return n_tp, int(len(tp) - n_tp), n_gt - n_tp


def prf_from_counts(tp: int, fp: int, fn: int) -> tuple[float, float, float, float]:
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    return precision, recall, f_beta(precision, recall, 1.0), f_beta(precision, recall, 2.0)


def prf_at_threshold(dets_per_image, gts_per_image, conf_threshold: float = CONF_THRESHOLD):
    """(precision, recall, f1, f2) at ``conf_threshold``."""
    return prf_from_counts(*prf_counts(dets_per_image, gts_per_image, conf_threshold))


def detect(params: DetectorParams, images: np.ndarray, grid: AnchorGrid,
           conf_threshold: float = CONF_THRESHOLD, nms_iou: float = NMS_IOU,
           batch_size: int = 32) -> list[list[Detection]]:
    results = []
    for start in range(0, len(images), batch_size):
        out = forward(params, images[start:start + batch_size], train_mode=False)
        for n in range(out.loc.shape[0]):
            results.append(nms(decode_detections(out[n], grid, conf_threshold), nms_iou))
    return results


def evaluate(params: DetectorParams, dataset, grid: AnchorGrid,
             conf_threshold: float = CONF_THRESHOLD, nms_iou: float = NMS_IOU) -> MetricsReport:
    """Forward every sample without augmentation and compute all metrics."""
    if not dataset:
        raise ValueError("cannot evaluate on an empty dataset")
    images = np.stack([s.image for s in dataset])
    dets = detect(params, images, grid, conf_threshold, nms_iou)
    gts = [s.boxes for s in dataset]
    ap = average_precision_50(dets, gts)
    tp, fp, fn = prf_counts(dets, gts, conf_threshold)
    p, r, f1, f2 = prf_from_counts(tp, fp, fn)
    return MetricsReport(p, r, ap, f1, f2, tp, fp, fn, conf_threshold, nms_iou)
