"""Detection accuracy and uncertainty scores: greedy matching, AP and NLL."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .distributions import Variant, log_pdf
from .errors import MetricError
from .geometry import iou_matrix


@dataclass(frozen=True)
class Match:
    det: int
    gt: int
    iou: float


def score_order(scores: Sequence[float]) -> np.ndarray:
    """Indices by descending score, ties kept in input order."""
    return np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable")


def match_detections(detections, ground_truths, iou_threshold: float = 0.5) -> list[Match]:
    """Greedy matching in descending score.

    Each detection claims its highest-IoU ground truth; the pair counts when
    the IoU reaches ``iou_threshold`` and the ground truth is still free.
    ``detections`` need ``.score`` and ``.corners``; ``ground_truths`` are
    (I, D) corner arrays.
    """
    if not len(detections) or not len(ground_truths):
        return []
    order = score_order([d.score for d in detections])
    ious = iou_matrix([detections[i].corners for i in order], list(ground_truths))
    used = np.zeros(len(ground_truths), dtype=bool)
    matches: list[Match] = []
    for rank, det_idx in enumerate(order):
        j = int(np.argmax(ious[rank]))
        if ious[rank, j] >= iou_threshold and not used[j]:
            used[j] = True
            matches.append(Match(int(det_idx), j, float(ious[rank, j])))
    return matches


def _scored_flags(detections_per_frame, gts_per_frame, iou_threshold: float):
    scores: list[float] = []
    flags: list[bool] = []
    for dets, gts in zip(detections_per_frame, gts_per_frame):
        matched = {m.det for m in match_detections(dets, gts, iou_threshold)}
        for i, d in enumerate(dets):
            scores.append(d.score)
            flags.append(i in matched)
    return np.asarray(scores), np.asarray(flags, dtype=bool)


def precision_recall(scores: np.ndarray, is_tp: np.ndarray, n_gt: int) -> tuple[np.ndarray, np.ndarray]:
    order = score_order(scores)
    tp = np.cumsum(is_tp[order])
    fp = np.cumsum(~is_tp[order])
    return tp / np.maximum(tp + fp, 1), tp / n_gt


def average_precision(detections_per_frame, gts_per_frame, iou_threshold: float = 0.5) -> float:
    """All-point interpolated AP over a whole split.

    Both arguments are per-frame lists (detections, and ground-truth corner
    arrays). The precision envelope is integrated over recall.
    """
    n_gt = sum(len(g) for g in gts_per_frame)
    if n_gt == 0:
        raise MetricError("average precision is undefined without ground truths")
    scores, flags = _scored_flags(detections_per_frame, gts_per_frame, iou_threshold)
    if scores.size == 0:
        return 0.0
    precision, recall = precision_recall(scores, flags, n_gt)
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    steps = np.flatnonzero(mrec[1:] != mrec[:-1])
    return float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))


def corner_nll(variant: Variant, y: np.ndarray, y_hat: np.ndarray, cov: np.ndarray) -> float:
    """Negative log-density of one box's true corners, summed over corners.

    DMG scores the stacked coordinates jointly; IMG and ISG score corners
    independently (ISG covariances are diagonal, which is the per-coordinate
    product of univariate densities).
    """
    if Variant.parse(variant) is Variant.DMG:
        return float(-log_pdf(y.reshape(-1), y_hat.reshape(-1), cov))
    return float(-np.sum(log_pdf(y, y_hat, cov)))


@dataclass(frozen=True)
class NLLResult:
    value: float
    n_matched: int
    n_corners: int


def nll_details(detections_per_frame, gts_per_frame, iou_threshold: float = 0.5) -> NLLResult:
    total = 0.0
    n_boxes = 0
    n_corners = 0
    for dets, gts in zip(detections_per_frame, gts_per_frame):
        for m in match_detections(dets, gts, iou_threshold):
            det = dets[m.det]
            if det.uncertainty is None:
                raise MetricError("detections carry no covariance; NLL is undefined")
            y = np.asarray(gts[m.gt])
            total += corner_nll(det.uncertainty.variant, y, det.corners, det.uncertainty.cov)
            n_boxes += 1
            n_corners += y.shape[0]
    if n_boxes == 0:
        raise MetricError("no matched detections; NLL is undefined")
    return NLLResult(total / n_corners, n_boxes, n_corners)


def nll_score(detections_per_frame, gts_per_frame, iou_threshold: float = 0.5) -> float:
    """Mean negative log-likelihood per matched corner."""
    return nll_details(detections_per_frame, gts_per_frame, iou_threshold).value
