"""VOC-style detection evaluation (per-class AP, mAP) and trend plots.

Detections are matched greedily per class in descending score order against
unmatched ground truth at an IoU threshold; average precision integrates the
full precision/recall curve ("all-points") by default, with the coarser
11-point interpolation available for comparison.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .boxes import Detections, iou_matrix


@dataclass
class EvalResult:
    per_class_ap: dict[int, float]
    map: float | None
    counts: dict[int, dict[str, int]] = field(default_factory=dict)  # tp/fp/fn per class
    note: str = ""

    def row(self, class_names: dict[int, str] | None = None) -> dict[str, float | None]:
        names = class_names or {}
        out = {f"ap_{names.get(c, c)}": ap for c, ap in sorted(self.per_class_ap.items())}
        out["mAP"] = self.map
        return out


def _ap_all_points(recall: np.ndarray, precision: np.ndarray) -> float:
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    for i in range(len(mpre) - 2, -1, -1):
        mpre[i] = max(mpre[i], mpre[i + 1])
    idx = np.flatnonzero(mrec[1:] != mrec[:-1]) + 1
    return float(np.sum((mrec[idx] - mrec[idx - 1]) * mpre[idx]))


def _ap_11_point(recall: np.ndarray, precision: np.ndarray) -> float:
    ap = 0.0
    for r in np.linspace(0.0, 1.0, 11):
        mask = recall >= r - 1e-12
        ap += float(np.max(precision[mask])) if np.any(mask) else 0.0
    return ap / 11.0


def evaluate_map(detections: list[Detections], ground_truth: list[tuple[np.ndarray, np.ndarray]],
                 conf_thresh: float = 0.05, iou_thresh: float = 0.5,
                 ap_style: str = "all-points") -> EvalResult:
    """Score per-image detections against per-image (boxes, classes) labels.

    Classes absent from the ground truth are excluded from the mean; if no
    image has any ground truth the mAP is undefined and reported as None.
    Detections must already be post-NMS; entries below ``conf_thresh`` are
    ignored.
    """
    if len(detections) != len(ground_truth):
        raise ValueError("detections and ground_truth must cover the same images")
    if ap_style not in ("all-points", "11point"):
        raise ValueError(f"unknown ap_style {ap_style!r}")
    ap_fn = _ap_all_points if ap_style == "all-points" else _ap_11_point

    gt_classes_present: set[int] = set()
    for _, classes in ground_truth:
        gt_classes_present.update(int(c) for c in np.asarray(classes, dtype=np.int64))
    if not gt_classes_present:
        return EvalResult({}, None, note="no ground truth in any image; mAP undefined")

    per_class_ap: dict[int, float] = {}
    counts: dict[int, dict[str, int]] = {}
    for cls in sorted(gt_classes_present):
        # flatten this class's detections across images
        recs: list[tuple[float, int, int]] = []  # (score, image, det index)
        for img, dets in enumerate(detections):
            if len(dets) == 0:
                continue
            mask = (dets.classes == cls) & (dets.scores >= conf_thresh)
            for d in np.flatnonzero(mask):
                recs.append((float(dets.scores[d]), img, int(d)))
        recs.sort(key=lambda r: (-r[0], r[1], r[2]))

        n_gt = 0
        gt_boxes_by_img = []
        for boxes, classes in ground_truth:
            classes = np.asarray(classes, dtype=np.int64)
            boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
            sel = boxes[classes == cls]
            gt_boxes_by_img.append(sel)
            n_gt += len(sel)

        matched = [np.zeros(len(b), dtype=bool) for b in gt_boxes_by_img]
        tp = np.zeros(len(recs))
        fp = np.zeros(len(recs))
        for k, (_, img, d) in enumerate(recs):
            gtb = gt_boxes_by_img[img]
            if len(gtb) == 0:
                fp[k] = 1
                continue
            overlaps = iou_matrix(detections[img].boxes[d][None], gtb)[0]
            overlaps = np.where(matched[img], -1.0, overlaps)
            j = int(np.argmax(overlaps))
            if overlaps[j] >= iou_thresh:
                matched[img][j] = True
                tp[k] = 1
            else:
                fp[k] = 1

        tp_cum = np.cumsum(tp)
        fp_cum = np.cumsum(fp)
        if n_gt == 0:
            continue  # unreachable: cls comes from the present set
        if len(recs) == 0:
            per_class_ap[cls] = 0.0
            counts[cls] = {"tp": 0, "fp": 0, "fn": n_gt}
            continue
        recall = tp_cum / n_gt
        precision = tp_cum / np.maximum(tp_cum + fp_cum, 1e-12)
        per_class_ap[cls] = ap_fn(recall, precision)
        n_tp = int(tp_cum[-1])
        counts[cls] = {"tp": n_tp, "fp": int(fp_cum[-1]), "fn": n_gt - n_tp}

    mean_ap = float(np.mean([per_class_ap[c] for c in sorted(per_class_ap)]))
    return EvalResult(per_class_ap, mean_ap, counts)


# ---------------------------------------------------------------------------
# trend plots
# ---------------------------------------------------------------------------

def read_metrics(path: str | Path) -> list[dict[str, str]]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _column(rows: list[dict[str, str]], name: str) -> np.ndarray:
    if not rows or name not in rows[0]:
        raise KeyError(f"metrics table is missing required column {name!r}")
    return np.array([float(r[name]) if r[name] != "" else np.nan for r in rows])


def plot_trends(runs: dict[str, str | Path], out_dir: str | Path,
                metric: str = "target_mAP", stem: str = "map_trend") -> list[Path]:
    """Overlay ``metric`` vs epoch for several runs; writes PNG and SVG.

    ``runs`` maps a curve label to a metrics.csv path.  Needs at least two
    epochs of data per run.  Points are plotted exactly as logged.
    """
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    fig, ax = plt.subplots(figsize=(6, 4))
    for label, path in runs.items():
        rows = read_metrics(path)
        if len(rows) < 2:
            raise ValueError(f"run {label!r} has fewer than 2 epochs of metrics")
        epochs = _column(rows, "epoch")
        values = _column(rows, metric)
        ax.plot(epochs, values, marker="o", markersize=3, label=label)
    ax.set_xlabel("epoch")
    ax.set_ylabel(metric)
    ax.legend(fontsize=8)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    paths = []
    for ext in ("png", "svg"):
        p = out_dir / f"{stem}.{ext}"
        fig.savefig(p)
        paths.append(p)
    plt.close(fig)
    return paths


def plot_bsr_shape(out_dir: str | Path, t: float = 0.5,
                   gammas: tuple[float, ...] = (0.0, 1.0, 2.0, 4.0, 5.0),
                   stem: str = "bsr_shape") -> list[Path]:
    """Per-element adversarial loss value as a function of background prob."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    from .losses import bsr_pointwise

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    p = np.linspace(1e-4, 1 - 1e-4, 501)
    fig, ax = plt.subplots(figsize=(5, 4))
    for g in gammas:
        ax.plot(p, bsr_pointwise(p, t, g), label=f"gamma={g:g}")
    ax.set_xlabel("background probability")
    ax.set_ylabel("per-element loss")
    ax.set_title(f"background score regularization, t={t:g}")
    ax.legend(fontsize=8)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    paths = []
    for ext in ("png", "svg"):
        path = out_dir / f"{stem}.{ext}"
        fig.savefig(path)
        paths.append(path)
    plt.close(fig)
    return paths
