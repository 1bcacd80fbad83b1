"""Training objectives: supervised multibox loss, weak self-training, and
adversarial background score regularization.

Index selection (hard negative mining, weak negative mining, low-3N pooling)
is computed on detached values with a fixed tie-break (ascending index), so a
loss value is a deterministic function of its inputs.  Gradients flow only
through the selected log-probability terms; the focal weight of the
adversarial loss is detached by default and a config flag restores the
fully-differentiable variant.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F_nn

from .boxes import AnchorSet, MatchResult, encode_offsets
from .detector import RawOutput

HARD_NEGATIVE_RATIO = 3          # |Neg| = ratio * |Pos|, standard multibox practice
NO_POSITIVE_NEG_FALLBACK = 3     # negatives mined per image when it has no positives


@dataclass
class BsrConfig:
    """Adversarial background regularization hyperparameters."""

    t: float = 0.5                 # target background probability
    gamma: float = 2.0             # focal exponent
    selection_multiplier: int = 3  # pool keeps multiplier * N lowest-background entries
    detach_focal: bool = True      # treat |t - p|^gamma as a constant weight
    eps_clamp: float = 1e-6

    def __post_init__(self):
        if not (0.0 < self.t < 1.0):
            raise ValueError("t must lie in (0, 1)")
        if self.gamma < 0:
            raise ValueError("gamma must be non-negative")


@dataclass
class LossOutput:
    """A scalar objective with its named components and bookkeeping counts."""

    total: torch.Tensor
    components: dict[str, float] = field(default_factory=dict)
    counts: dict[str, int] = field(default_factory=dict)


def background_confidence_loss(class_logits: torch.Tensor) -> torch.Tensor:
    """Per-anchor -log p(background); the ranking key for negative mining."""
    return -torch.log_softmax(class_logits, dim=-1)[..., 0]


def _top_k_by_loss(losses: np.ndarray, indices: np.ndarray, k: int) -> np.ndarray:
    """Highest-loss k entries of ``indices``; ties resolved by ascending index."""
    if k <= 0 or indices.size == 0:
        return np.zeros(0, dtype=np.int64)
    vals = np.asarray(losses, dtype=np.float64)[indices]
    order = np.lexsort((indices, -vals))
    return indices[order[: min(k, indices.size)]]


def hard_negative_mining(conf_losses: np.ndarray, neg_candidates: np.ndarray,
                         num_pos: int) -> np.ndarray:
    """Select the highest-background-loss negatives at the 3:1 ratio.

    With no positives in the image, falls back to a fixed small count so the
    background class still receives supervision.
    """
    k = HARD_NEGATIVE_RATIO * num_pos if num_pos > 0 else NO_POSITIVE_NEG_FALLBACK
    return _top_k_by_loss(conf_losses, np.asarray(neg_candidates, dtype=np.int64), k)


def weak_negative_mining(conf_losses: np.ndarray, neg: np.ndarray) -> np.ndarray:
    """Keep the floor(|neg|/3) lowest-loss negatives (at least 1 when any exist).

    The inverse of hard mining: confidently-background examples are safe to
    supervise, while high-loss negatives risk being undetected foregrounds.
    Ties resolve by ascending index; empty input yields an empty selection.
    """
    neg = np.asarray(neg, dtype=np.int64)
    if neg.size == 0:
        return np.zeros(0, dtype=np.int64)
    k = max(1, neg.size // 3)
    vals = np.asarray(conf_losses, dtype=np.float64)[neg]
    order = np.lexsort((neg, vals))
    return neg[order[:k]]


def _gather_ce(class_logits: torch.Tensor, indices: np.ndarray, classes: np.ndarray) -> torch.Tensor:
    """Sum of -log p(class) over the given anchor rows of one image."""
    if indices.size == 0:
        return class_logits.new_zeros(())
    idx = torch.from_numpy(np.asarray(indices, dtype=np.int64))
    cls = torch.from_numpy(np.asarray(classes, dtype=np.int64))
    logp = torch.log_softmax(class_logits[idx], dim=-1)
    return -logp[torch.arange(len(idx)), cls].sum()


def task_loss(raw: RawOutput, matches: list[MatchResult], anchors: AnchorSet) -> LossOutput:
    """Supervised multibox objective on a batch.

    Sum over images of positive-class cross entropy, mined-negative background
    cross entropy and smooth-L1 localization over encoded offsets, normalized
    by the batch positive count.
    """
    b = raw.class_logits.shape[0]
    if len(matches) != b:
        raise ValueError("one MatchResult per image is required")
    conf_bg = background_confidence_loss(raw.class_logits).detach().cpu().numpy()

    cls_pos = raw.class_logits.new_zeros(())
    cls_neg = raw.class_logits.new_zeros(())
    loc = raw.class_logits.new_zeros(())
    n_pos_total = 0
    n_neg_total = 0
    for i, m in enumerate(matches):
        neg_sel = hard_negative_mining(conf_bg[i], m.neg_candidate_indices, m.num_pos)
        cls_neg = cls_neg + _gather_ce(raw.class_logits[i], neg_sel,
                                       np.zeros(len(neg_sel), dtype=np.int64))
        n_neg_total += len(neg_sel)
        if m.num_pos == 0:
            continue
        cls_pos = cls_pos + _gather_ce(raw.class_logits[i], m.pos_indices, m.matched_gt_classes)
        targets = encode_offsets(anchors.boxes[m.pos_indices], m.matched_gt_boxes)
        pred = raw.box_offsets[i][torch.from_numpy(m.pos_indices)]
        tgt = torch.from_numpy(targets).to(pred.dtype)
        loc = loc + F_nn.smooth_l1_loss(pred, tgt, reduction="sum")
        n_pos_total += m.num_pos

    denom = max(n_pos_total, 1)
    total = (cls_pos + cls_neg + loc) / denom
    return LossOutput(
        total,
        components={"cls_pos": float(cls_pos) / denom, "cls_neg": float(cls_neg) / denom,
                    "loc": float(loc) / denom},
        counts={"num_pos": n_pos_total, "num_neg": n_neg_total},
    )


def self_train_loss(raw: RawOutput, pseudo_matches: list[MatchResult],
                    mask_all_negatives: bool = False,
                    weak_mask: bool = True) -> LossOutput:
    """Classification-only self-training objective over pseudo-label matches.

    Positives use the pseudo class labels.  Negatives come from hard mining
    and are then reduced to the weak (lowest-loss) subset when ``weak_mask``
    is on, or dropped entirely when ``mask_all_negatives`` is on.  There is no
    localization term, so the box-offset head receives no gradient.  Images
    without pseudo-labels contribute nothing.
    """
    b = raw.class_logits.shape[0]
    if len(pseudo_matches) != b:
        raise ValueError("one MatchResult per image is required")
    conf_bg = background_confidence_loss(raw.class_logits).detach().cpu().numpy()

    cls_pos = raw.class_logits.new_zeros(())
    cls_neg = raw.class_logits.new_zeros(())
    n_pos_total = 0
    n_neg_total = 0
    n_weak_total = 0
    for i, m in enumerate(pseudo_matches):
        if m.num_pos == 0:
            continue  # no pseudo-labels: the image is skipped entirely
        cls_pos = cls_pos + _gather_ce(raw.class_logits[i], m.pos_indices, m.matched_gt_classes)
        n_pos_total += m.num_pos
        if mask_all_negatives:
            continue
        neg_sel = hard_negative_mining(conf_bg[i], m.neg_candidate_indices, m.num_pos)
        n_neg_total += len(neg_sel)
        if weak_mask:
            neg_sel = weak_negative_mining(conf_bg[i], neg_sel)
            n_weak_total += len(neg_sel)
        cls_neg = cls_neg + _gather_ce(raw.class_logits[i], neg_sel,
                                       np.zeros(len(neg_sel), dtype=np.int64))

    denom = max(n_pos_total, 1)
    total = (cls_pos + cls_neg) / denom
    return LossOutput(
        total,
        components={"st_pos": float(cls_pos) / denom, "st_neg": float(cls_neg) / denom},
        counts={"num_pos": n_pos_total, "num_neg": n_neg_total, "num_weak_neg": n_weak_total},
    )


def foreground_count(class_probs: np.ndarray) -> int:
    """Detections whose argmax over K+1 classes is a foreground class."""
    if class_probs.size == 0:
        return 0
    return int(np.count_nonzero(np.argmax(class_probs, axis=-1) != 0))


def select_bsr_examples(background_probs: np.ndarray, predicted_fg_count: int,
                        multiplier: int = 3) -> np.ndarray:
    """Indices of the ``multiplier * N`` lowest background probabilities.

    Selection operates on the whole pooled batch (image-major flattening);
    ties resolve by ascending pooled index.  N = 0 selects nothing.
    """
    if predicted_fg_count < 0:
        raise ValueError("predicted_fg_count must be non-negative")
    probs = np.asarray(background_probs, dtype=np.float64).reshape(-1)
    k = min(multiplier * predicted_fg_count, probs.size)
    if k == 0:
        return np.zeros(0, dtype=np.int64)
    order = np.lexsort((np.arange(probs.size), probs))
    return np.sort(order[:k])


def bsr_loss(background_probs: torch.Tensor, cfg: BsrConfig) -> torch.Tensor:
    """Focal-weighted binary cross entropy pulling background scores toward t.

    Mean over the selected entries; zero for an empty selection.  With
    ``detach_focal`` the |t - p|^gamma factor is treated as a constant weight,
    mirroring focal-loss practice; gamma = 0 recovers plain BCE against t.
    """
    p = background_probs.reshape(-1)
    if p.numel() == 0:
        return torch.zeros((), dtype=background_probs.dtype)
    p = torch.clamp(p, cfg.eps_clamp, 1.0 - cfg.eps_clamp)
    weight = torch.abs(cfg.t - p) ** cfg.gamma
    if cfg.detach_focal:
        weight = weight.detach()
    per_elem = -cfg.t * weight * torch.log(p) - (1.0 - cfg.t) * weight * torch.log1p(-p)
    return per_elem.mean()


def bsr_pointwise(p: np.ndarray, t: float = 0.5, gamma: float = 2.0,
                  eps_clamp: float = 1e-6) -> np.ndarray:
    """Per-element adversarial loss values (numpy), for curves and reports."""
    p = np.clip(np.asarray(p, dtype=np.float64), eps_clamp, 1.0 - eps_clamp)
    w = np.abs(t - p) ** gamma
    return -t * w * np.log(p) - (1.0 - t) * w * np.log1p(-p)


def adversarial_objectives(model, source_images: torch.Tensor,
                           source_matches: list[MatchResult],
                           target_images: torch.Tensor, cfg: BsrConfig,
                           lam: float = 1.0, adv_weight: float = 1.0) -> LossOutput:
    """One-backward composition of the supervised and adversarial objectives.

    The source pass trains both subnets on the task loss; the target pass
    routes through the gradient reversal layer, so minimizing the returned
    total lets the head minimize the adversarial term while the feature
    extractor maximizes it.  With no target batch this reduces to the task
    loss alone.
    """
    task = task_loss(model(source_images), source_matches, model.anchors)
    if target_images is None or target_images.shape[0] == 0:
        task.components["adv"] = 0.0
        task.counts.update({"fg_count": 0, "bsr_selected": 0})
        return task
    adv_out = model(target_images, reverse_at_junction=True, lam=lam)
    probs = adv_out.class_probs
    bg = probs[..., 0].reshape(-1)
    n_fg = foreground_count(probs.detach().cpu().numpy())
    sel = select_bsr_examples(bg.detach().cpu().numpy(), n_fg, cfg.selection_multiplier)
    adv = bsr_loss(bg[torch.from_numpy(sel)], cfg) if sel.size else bg.new_zeros(())
    total = task.total + adv_weight * adv
    out = LossOutput(total, dict(task.components), dict(task.counts))
    out.components["adv"] = float(adv)
    out.counts.update({"fg_count": n_fg, "bsr_selected": int(sel.size)})
    return out
