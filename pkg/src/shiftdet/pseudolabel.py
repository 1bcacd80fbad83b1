"""Reliability-scored pseudo-label generation for self-training.

A final (post-NMS) detection is scored by pooling every raw detection that
overlaps it: the score is the mean of IoU-weighted probabilities that the
supports assign to the final detection's class.  Detections whose score
clears a threshold become pseudo-labels.  The threshold is either fixed or
follows a logistic ramp over training progress.

Stateless by design: labels are regenerated from scratch on every call, so
nothing persists between training iterations.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .boxes import Detections, iou_matrix

logger = logging.getLogger(__name__)


@dataclass
class PseudoLabel:
    """A retained detection promoted to a training label."""

    box: np.ndarray
    class_id: int            # 1..K, never background
    srrs: float
    source_detection_index: int  # index into the post-NMS set


@dataclass
class SrrsPolicy:
    """Support threshold and retention-threshold policy.

    ``delta`` is the IoU level above which a raw detection counts as support.
    ``epsilon_mode`` selects a fixed retention threshold or the logistic
    schedule driven by window progress.
    """

    delta: float = 0.5
    epsilon_mode: str = "fixed"   # "fixed" | "scheduled"
    epsilon_fixed: float = 0.8

    def __post_init__(self):
        if not (0.0 < self.delta <= 1.0):
            raise ValueError("delta must lie in (0, 1]")
        if self.epsilon_mode not in ("fixed", "scheduled"):
            raise ValueError(f"unknown epsilon_mode {self.epsilon_mode!r}")
        if not (0.0 < self.epsilon_fixed < 1.0):
            raise ValueError("fixed epsilon must lie in (0, 1)")

    def epsilon(self, progress: float | None = None) -> float:
        if self.epsilon_mode == "fixed":
            return self.epsilon_fixed
        if progress is None:
            raise ValueError("scheduled epsilon requires a progress value")
        return epsilon_schedule(progress)


def epsilon_schedule(progress: float) -> float:
    """Logistic retention threshold: 1 / (1 + exp(-3 p)) for p in [0, 1]."""
    p = float(progress)
    if p < 0.0 or p > 1.0:
        logger.warning("schedule progress %.4f outside [0, 1]; clamping", p)
        p = min(max(p, 0.0), 1.0)
    return 1.0 / (1.0 + np.exp(-3.0 * p))


def srrs(r_star_index: int, final: Detections, raw: Detections, delta: float = 0.5) -> float:
    """Support-pooled reliability score of one final detection.

    Supports are all raw detections with IoU >= ``delta`` against the final
    box; each contributes IoU times its probability for the final detection's
    class.  A detection drawn from the raw set always supports itself
    (IoU = 1), so the support count is at least 1.
    """
    if not (0.0 < delta <= 1.0):
        raise ValueError("delta must lie in (0, 1]")
    box = final.boxes[r_star_index]
    cls = int(final.classes[r_star_index])
    overlaps = iou_matrix(raw.boxes, box[None])[:, 0]
    support = overlaps >= delta
    n_s = int(np.count_nonzero(support))
    if n_s == 0:
        return 0.0
    return float(np.sum(overlaps[support] * raw.probs[support, cls]) / n_s)


def _srrs_all(final: Detections, raw: Detections, delta: float) -> np.ndarray:
    """Vectorized scores for every final detection."""
    if len(final) == 0:
        return np.zeros(0)
    overlaps = iou_matrix(raw.boxes, final.boxes)        # (n_raw, n_final)
    support = overlaps >= delta
    cls_probs = raw.probs[:, final.classes]              # (n_raw, n_final)
    counts = support.sum(axis=0)
    sums = np.sum(np.where(support, overlaps * cls_probs, 0.0), axis=0)
    return np.divide(sums, counts, out=np.zeros(len(final)), where=counts > 0)


def generate_pseudo_labels(raw: Detections, final: Detections, policy: SrrsPolicy,
                           progress: float | None = None) -> list[PseudoLabel]:
    """Score every final detection and keep those at or above epsilon.

    ``final`` must be the NMS output of ``raw``; output order follows
    ``final``.  Background-argmax entries can never appear in ``final`` and
    are not handled here.
    """
    eps = policy.epsilon(progress)
    scores = _srrs_all(final, raw, policy.delta)
    classes = final.classes
    out = []
    for l in range(len(final)):
        if scores[l] >= eps:
            out.append(PseudoLabel(box=final.boxes[l].copy(), class_id=int(classes[l]),
                                   srrs=float(scores[l]), source_detection_index=l))
    return out
