"""Deterministic box geometry: IoU, NMS, anchor grids, matching, offset codecs.

Boxes are numpy arrays of shape (..., 4) holding (x_min, y_min, x_max, y_max)
in normalized image coordinates.  All functions are pure and thread-safe.

Tie-breaking is fixed everywhere so results are reproducible: argmax picks the
lowest index, NMS orders by (score desc, index asc), matching prefers the
lowest anchor/object index on equal IoU.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


def as_boxes(boxes) -> np.ndarray:
    """Coerce to a float64 (n, 4) array without validating."""
    arr = np.asarray(boxes, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr.reshape(1, 4)
    if arr.shape[-1] != 4:
        raise ValueError(f"boxes must have 4 coordinates, got shape {arr.shape}")
    return arr


def validate_boxes(boxes: np.ndarray) -> np.ndarray:
    """Reject boxes with min > max or non-finite coordinates."""
    arr = as_boxes(boxes)
    if not np.all(np.isfinite(arr)):
        raise ValueError("box coordinates must be finite")
    if np.any(arr[..., 2] < arr[..., 0]) or np.any(arr[..., 3] < arr[..., 1]):
        raise ValueError("invalid box: min coordinate exceeds max coordinate")
    return arr


def box_area(boxes: np.ndarray) -> np.ndarray:
    boxes = as_boxes(boxes)
    return (boxes[..., 2] - boxes[..., 0]) * (boxes[..., 3] - boxes[..., 1])


def iou(a, b) -> float:
    """IoU of two single boxes; 0 when the union is degenerate (zero area)."""
    a = validate_boxes(a)[0]
    b = validate_boxes(b)[0]
    return float(iou_matrix(a[None], b[None])[0, 0])


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between (n, 4) and (m, 4) boxes -> (n, m) float64."""
    a = as_boxes(a)
    b = as_boxes(b)
    lt = np.maximum(a[:, None, :2], b[None, :, :2])
    rb = np.minimum(a[:, None, 2:], b[None, :, 2:])
    wh = np.clip(rb - lt, 0.0, None)
    inter = wh[..., 0] * wh[..., 1]
    union = box_area(a)[:, None] + box_area(b)[None, :] - inter
    out = np.zeros_like(inter)
    np.divide(inter, union, out=out, where=union > 0)
    return out


def clip_boxes(boxes: np.ndarray) -> np.ndarray:
    """Clip coordinates to the unit square."""
    return np.clip(as_boxes(boxes), 0.0, 1.0)


@dataclass
class Detections:
    """A set of detections: boxes plus a per-detection class distribution.

    ``probs`` has shape (n, K+1) with index 0 reserved for background; rows
    sum to 1.  ``classes``/``scores`` derive from the argmax (lowest index
    wins on ties).
    """

    boxes: np.ndarray
    probs: np.ndarray

    def __post_init__(self):
        self.boxes = as_boxes(self.boxes) if len(self.boxes) else np.zeros((0, 4))
        self.probs = np.asarray(self.probs, dtype=np.float64)
        if self.probs.ndim == 1:
            self.probs = self.probs.reshape(1, -1)
        if len(self.boxes) != len(self.probs):
            raise ValueError("boxes and probs must have matching lengths")

    def __len__(self) -> int:
        return len(self.boxes)

    @property
    def classes(self) -> np.ndarray:
        """Argmax class per detection (0 = background)."""
        if len(self) == 0:
            return np.zeros(0, dtype=np.int64)
        return np.argmax(self.probs, axis=1)

    @property
    def scores(self) -> np.ndarray:
        """Probability of the argmax class per detection."""
        if len(self) == 0:
            return np.zeros(0)
        return self.probs[np.arange(len(self)), self.classes]

    def validate(self, atol: float = 1e-6) -> "Detections":
        validate_boxes(self.boxes)
        if np.any(self.probs < -atol) or np.any(self.probs > 1 + atol):
            raise ValueError("class probabilities must lie in [0, 1]")
        if np.any(np.abs(self.probs.sum(axis=1) - 1.0) > atol):
            raise ValueError("class probabilities must sum to 1")
        return self

    def select(self, idx) -> "Detections":
        idx = np.asarray(idx, dtype=np.int64)
        return Detections(self.boxes[idx], self.probs[idx])


def nms(dets: Detections, iou_thresh: float, conf_thresh: float) -> tuple[Detections, np.ndarray]:
    """Per-class greedy NMS over argmax-class detections.

    Background-argmax detections and detections scoring below ``conf_thresh``
    are dropped.  Within each class, survivors are kept in descending score
    order (ties by ascending index); classes are emitted in ascending id
    order.  Returns the kept detections and their indices into ``dets``.
    """
    if not (0.0 <= iou_thresh <= 1.0 and 0.0 <= conf_thresh <= 1.0):
        raise ValueError("iou_thresh and conf_thresh must lie in [0, 1]")
    if len(dets) == 0:
        return Detections(np.zeros((0, 4)), np.zeros((0, dets.probs.shape[1] if dets.probs.size else 1))), np.zeros(0, dtype=np.int64)
    classes = dets.classes
    scores = dets.scores
    keep: list[int] = []
    for cls in np.unique(classes):
        if cls == 0:
            continue
        cand = np.flatnonzero((classes == cls) & (scores >= conf_thresh))
        if cand.size == 0:
            continue
        # sort by (score desc, index asc); lexsort's last key is primary
        order = cand[np.lexsort((cand, -scores[cand]))]
        kept_cls: list[int] = []
        for i in order:
            if all(iou_matrix(dets.boxes[i][None], dets.boxes[j][None])[0, 0] <= iou_thresh
                   for j in kept_cls):
                kept_cls.append(int(i))
        keep.extend(kept_cls)
    keep_arr = np.asarray(keep, dtype=np.int64)
    return dets.select(keep_arr), keep_arr


@dataclass
class AnchorSet:
    """Fixed anchor grid for a detector configuration: (n, 4) boxes."""

    boxes: np.ndarray
    grid_sizes: tuple[int, ...]
    shapes_per_cell: int

    def __len__(self) -> int:
        return len(self.boxes)


def anchor_grid(image_size: int, grid_sizes: tuple[int, ...],
                anchor_sizes: tuple[tuple[float, ...], ...],
                aspect_ratios: tuple[float, ...] = (1.0,)) -> AnchorSet:
    """Build the anchor set for square grids at the given scales.

    ``anchor_sizes[k]`` lists side lengths in pixels for grid ``k``; each size
    is crossed with ``aspect_ratios`` (ratio = w/h, area preserved).  Anchors
    are ordered grid-major, then row-major within a grid, then by shape.
    Coordinates are normalized and may extend past [0, 1] at the borders.
    """
    all_boxes = []
    per_cell = None
    for g, sizes in zip(grid_sizes, anchor_sizes):
        step = 1.0 / g
        shapes = []
        for s in sizes:
            side = s / image_size
            for r in aspect_ratios:
                w = side * np.sqrt(r)
                h = side / np.sqrt(r)
                shapes.append((w, h))
        if per_cell is None:
            per_cell = len(shapes)
        cy, cx = np.mgrid[0:g, 0:g]
        cx = (cx.ravel() + 0.5) * step
        cy = (cy.ravel() + 0.5) * step
        for x, y in zip(cx, cy):
            for w, h in shapes:
                all_boxes.append((x - w / 2, y - h / 2, x + w / 2, y + h / 2))
    return AnchorSet(np.asarray(all_boxes, dtype=np.float64), tuple(grid_sizes), per_cell or 0)


@dataclass
class MatchResult:
    """Partition of anchor indices into positives and negative candidates."""

    pos_indices: np.ndarray
    neg_candidate_indices: np.ndarray
    matched_gt_boxes: np.ndarray    # (|pos|, 4), aligned with pos_indices
    matched_gt_classes: np.ndarray  # (|pos|,), foreground ids in 1..K
    matched_gt_index: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    @property
    def num_pos(self) -> int:
        return len(self.pos_indices)


def match_anchors(anchors: AnchorSet, gt_boxes: np.ndarray, gt_classes: np.ndarray,
                  pos_iou: float = 0.5) -> MatchResult:
    """Assign anchors to ground-truth boxes.

    An anchor is positive when its IoU with some gt reaches ``pos_iou`` or it
    was claimed as the best anchor for a gt.  Best-anchor claiming walks gt
    boxes in index order and takes the highest-IoU unclaimed anchor (lowest
    index on ties, overlap required), so every gt with any anchor overlap
    gets at least one positive.  Remaining anchors are negative candidates.
    """
    if not (0.0 < pos_iou < 1.0):
        raise ValueError("pos_iou must lie in (0, 1)")
    n = len(anchors)
    gt_boxes = as_boxes(gt_boxes) if len(gt_boxes) else np.zeros((0, 4))
    gt_classes = np.asarray(gt_classes, dtype=np.int64)
    if len(gt_boxes) == 0:
        return MatchResult(np.zeros(0, dtype=np.int64), np.arange(n),
                           np.zeros((0, 4)), np.zeros(0, dtype=np.int64))
    validate_boxes(gt_boxes)

    ious = iou_matrix(anchors.boxes, gt_boxes)  # (n, m)
    assigned = np.full(n, -1, dtype=np.int64)

    # pass 1: claim one distinct best anchor per gt
    claimed = np.zeros(n, dtype=bool)
    for j in range(len(gt_boxes)):
        col = np.where(claimed, -1.0, ious[:, j])
        best = int(np.argmax(col))
        if col[best] > 0:
            assigned[best] = j
            claimed[best] = True

    # pass 2: threshold assignment for the rest
    free = np.flatnonzero(~claimed)
    if free.size:
        best_gt = np.argmax(ious[free], axis=1)
        best_iou = ious[free, best_gt]
        hit = best_iou >= pos_iou
        assigned[free[hit]] = best_gt[hit]

    pos = np.flatnonzero(assigned >= 0)
    neg = np.flatnonzero(assigned < 0)
    gt_idx = assigned[pos]
    return MatchResult(pos, neg, gt_boxes[gt_idx], gt_classes[gt_idx], gt_idx)


def encode_offsets(anchors: np.ndarray, gt: np.ndarray) -> np.ndarray:
    """Encode gt boxes against anchors as (dcx/wa, dcy/ha, log wg/wa, log hg/ha)."""
    anchors = as_boxes(anchors)
    gt = as_boxes(gt)
    wa = anchors[:, 2] - anchors[:, 0]
    ha = anchors[:, 3] - anchors[:, 1]
    if np.any(wa <= 0) or np.any(ha <= 0):
        raise ValueError("anchors must have positive width and height")
    wg = gt[:, 2] - gt[:, 0]
    hg = gt[:, 3] - gt[:, 1]
    if np.any(wg <= 0) or np.any(hg <= 0):
        raise ValueError("gt boxes must have positive width and height")
    dcx = ((gt[:, 0] + gt[:, 2]) - (anchors[:, 0] + anchors[:, 2])) / 2 / wa
    dcy = ((gt[:, 1] + gt[:, 3]) - (anchors[:, 1] + anchors[:, 3])) / 2 / ha
    return np.stack([dcx, dcy, np.log(wg / wa), np.log(hg / ha)], axis=1)


def decode_boxes(anchors: np.ndarray, offsets: np.ndarray) -> np.ndarray:
    """Inverse of :func:`encode_offsets`; does not clip."""
    anchors = as_boxes(anchors)
    offsets = np.asarray(offsets, dtype=np.float64)
    if offsets.ndim == 1:
        offsets = offsets.reshape(1, 4)
    wa = anchors[:, 2] - anchors[:, 0]
    ha = anchors[:, 3] - anchors[:, 1]
    if np.any(wa <= 0) or np.any(ha <= 0):
        raise ValueError("anchors must have positive width and height")
    cx = (anchors[:, 0] + anchors[:, 2]) / 2 + offsets[:, 0] * wa
    cy = (anchors[:, 1] + anchors[:, 3]) / 2 + offsets[:, 1] * ha
    w = wa * np.exp(offsets[:, 2])
    h = ha * np.exp(offsets[:, 3])
    return np.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], axis=1)
