"""Bipartite matching and the set-prediction training loss.

Each of the K query groups is matched to the ground truth independently with
an optimal (Hungarian) assignment, so every ground truth collects exactly K
positive queries per forward pass. Denoising queries bypass matching: positives
carry a fixed ground-truth index, negatives are supervised as background.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from scipy.optimize import linear_sum_assignment

from .decoder import LayerPrediction
from .geometry import box_cxcywh_to_xyxy, generalized_box_iou_matrix
from .queries import DnSegment, QueryGroupConfig

logger = logging.getLogger(__name__)


@dataclass
class LossWeights:
    cls: float = 2.0
    l1: float = 5.0
    giou: float = 2.0
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0


@dataclass
class MatchResult:
    """Per-group assignments; pair indices are (query slot within group, gt index)."""

    pairs_per_group: list[list[tuple[int, int]]]

    @property
    def total_pairs(self) -> int:
        return sum(len(p) for p in self.pairs_per_group)


@dataclass
class LossBreakdown:
    """Unweighted loss terms plus the weighted total.

    Keys: cls/l1/giou for the final layer, dn_* for denoising terms,
    aux{i}_* for earlier decoder layers, enc_* for the encoder proposal head.
    """

    terms: dict[str, torch.Tensor] = field(default_factory=dict)
    weights: LossWeights = field(default_factory=LossWeights)

    def _weight_for(self, key: str) -> float:
        if key.endswith("cls"):
            return self.weights.cls
        if key.endswith("l1"):
            return self.weights.l1
        if key.endswith("giou"):
            return self.weights.giou
        raise KeyError(key)

    @property
    def total(self) -> torch.Tensor:
        return sum(self._weight_for(k) * v for k, v in self.terms.items())

    def scalars(self) -> dict[str, float]:
        return {k: float(v) for k, v in self.terms.items()}


def hungarian(cost: np.ndarray) -> list[tuple[int, int]]:
    """Optimal assignment for a rectangular cost matrix.

    Returns min(rows, cols) pairs sorted by row. Among equally optimal
    assignments, the lexicographically smallest pair list is returned, which
    makes tie-breaking deterministic.
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise ValueError(f"cost matrix must be 2-d, got shape {cost.shape}")
    rows, cols = cost.shape
    k_total = min(rows, cols)
    if k_total == 0:
        return []
    if not np.isfinite(cost).all():
        raise ValueError("cost matrix contains NaN or infinite entries")

    ri, ci = linear_sum_assignment(cost)
    z_star = float(cost[ri, ci].sum())
    tol = 1e-11 * (1.0 + abs(z_star))

    # suffix_min[r, c] = min over rows >= r of cost[r', c]; used to prune
    # candidate columns that cannot possibly complete to an optimal total.
    suffix_min = np.minimum.accumulate(cost[::-1], axis=0)[::-1]

    pairs: list[tuple[int, int]] = []
    avail = np.ones(cols, dtype=bool)
    z_fix = 0.0
    for r in range(rows):
        need = k_total - len(pairs)
        if need == 0:
            break
        rows_left_after = rows - r - 1
        for c in np.flatnonzero(avail):
            if need > 1:
                rest = avail.copy()
                rest[c] = False
                if rows > cols:
                    # every remaining column must still be matched below row r
                    bound = z_fix + cost[r, c] + suffix_min[r + 1][rest].sum()
                    if bound > z_star + tol:
                        continue
                sub = cost[r + 1 :, rest]
                sr, sc = linear_sum_assignment(sub)
                z_cand = z_fix + cost[r, c] + float(sub[sr, sc].sum())
            else:
                z_cand = z_fix + cost[r, c]
            if z_cand <= z_star + tol:
                pairs.append((r, int(c)))
                avail[c] = False
                z_fix += cost[r, c]
                break
        else:
            if rows_left_after < need:
                raise AssertionError("no feasible completion found")  # pragma: no cover
    return pairs


def focal_cost_values(
    logits: torch.Tensor, gt_labels: torch.Tensor, alpha: float, gamma: float
) -> torch.Tensor:
    """Focal matching cost [Q, M]: positive-focal minus negative-focal at each gt label."""
    prob = logits.sigmoid()
    eps = 1e-8
    pos = alpha * (1 - prob) ** gamma * (-(prob + eps).log())
    neg = (1 - alpha) * prob**gamma * (-(1 - prob + eps).log())
    return pos[:, gt_labels] - neg[:, gt_labels]


def matching_cost(
    logits: torch.Tensor,
    boxes: torch.Tensor,
    gt_boxes: torch.Tensor,
    gt_labels: torch.Tensor,
    weights: LossWeights,
) -> np.ndarray:
    """Cost matrix [Q, M] mixing focal, L1, and negated GIoU terms.

    Boxes are compared in normalized cxcywh form.
    """
    with torch.no_grad():
        cls = focal_cost_values(logits, gt_labels, weights.focal_alpha, weights.focal_gamma)
        l1 = torch.cdist(boxes, gt_boxes, p=1)
        gi = generalized_box_iou_matrix(box_cxcywh_to_xyxy(boxes), box_cxcywh_to_xyxy(gt_boxes))
        cost = weights.cls * cls + weights.l1 * l1 + weights.giou * (-gi)
    return cost.double().cpu().numpy()


def match_all_groups(
    logits: torch.Tensor,
    boxes: torch.Tensor,
    gt_boxes: torch.Tensor,
    gt_labels: torch.Tensor,
    cfg: QueryGroupConfig,
    weights: LossWeights | None = None,
) -> MatchResult:
    """Hungarian matching run independently per group on one image.

    logits/boxes cover the K*N matching queries in layout order.
    """
    weights = weights or LossWeights()
    if logits.shape[0] != cfg.total:
        raise ValueError(f"expected {cfg.total} matching queries, got {logits.shape[0]}")
    if gt_boxes.shape[0] == 0:
        return MatchResult([[] for _ in range(cfg.num_groups)])
    n = cfg.queries_per_group
    cost_full = matching_cost(logits, boxes, gt_boxes, gt_labels, weights)
    groups = []
    for k in range(cfg.num_groups):
        groups.append(hungarian(cost_full[k * n : (k + 1) * n]))
    return MatchResult(groups)


def sigmoid_focal_loss(
    logits: torch.Tensor, targets: torch.Tensor, alpha: float, gamma: float
) -> torch.Tensor:
    """Element-wise sigmoid focal loss (no reduction)."""
    prob = logits.sigmoid()
    ce = F.binary_cross_entropy_with_logits(logits, targets, reduction="none")
    p_t = prob * targets + (1 - prob) * (1 - targets)
    loss = ce * (1 - p_t) ** gamma
    if alpha >= 0:
        loss = (alpha * targets + (1 - alpha) * (1 - targets)) * loss
    return loss


@dataclass
class ImageTargets:
    boxes: torch.Tensor  # [M, 4] normalized cxcywh
    labels: torch.Tensor  # [M] long


def _set_terms(
    logits: torch.Tensor,
    boxes: torch.Tensor,
    targets: ImageTargets,
    matched_q: torch.Tensor,
    matched_t: torch.Tensor,
    weights: LossWeights,
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Focal/L1/GIoU sums for one prediction set with explicit matched indices."""
    onehot = torch.zeros_like(logits)
    if matched_q.numel():
        onehot[matched_q, targets.labels[matched_t]] = 1.0
    cls = sigmoid_focal_loss(logits, onehot, weights.focal_alpha, weights.focal_gamma).sum()
    if matched_q.numel():
        pb, tb = boxes[matched_q], targets.boxes[matched_t]
        l1 = (pb - tb).abs().sum()
        gi = generalized_box_iou_matrix(box_cxcywh_to_xyxy(pb), box_cxcywh_to_xyxy(tb))
        giou_term = (1.0 - gi.diagonal()).sum()
    else:
        l1 = boxes.sum() * 0.0
        giou_term = boxes.sum() * 0.0
    return cls, l1, giou_term


def _match_indices(match: MatchResult, n: int, device) -> tuple[torch.Tensor, torch.Tensor]:
    q, t = [], []
    for k, pairs in enumerate(match.pairs_per_group):
        for qi, ti in pairs:
            q.append(k * n + qi)
            t.append(ti)
    return (
        torch.as_tensor(q, dtype=torch.long, device=device),
        torch.as_tensor(t, dtype=torch.long, device=device),
    )


def total_loss(
    layer_preds: list[LayerPrediction],
    matches: list[MatchResult],
    dn_segments: list[DnSegment],
    targets: list[ImageTargets],
    cfg: QueryGroupConfig,
    weights: LossWeights | None = None,
    dn_pad: int | None = None,
    encoder_pred: LayerPrediction | None = None,
) -> LossBreakdown:
    """Weighted set-prediction loss over all decoder layers of a batch.

    ``matches`` holds the final-layer assignment per image; earlier layers are
    re-matched on their own predictions. Denoising positives use their fixed
    ground truth for all three terms, negatives only a background focal term.
    The optional encoder prediction contributes one extra singly-matched term.
    """
    weights = weights or LossWeights()
    bsz, t_total, _ = layer_preds[-1].logits.shape
    if dn_pad is None:
        dn_pad = t_total - cfg.total
    device = layer_preds[-1].logits.device
    n = cfg.queries_per_group

    num_pairs = max(sum(m.total_pairs for m in matches), 1)
    num_dn_pos = max(sum(int(s.is_positive.sum()) for s in dn_segments), 1)

    out = LossBreakdown(weights=weights)
    final = len(layer_preds) - 1
    for li, pred in enumerate(layer_preds):
        prefix = "" if li == final else f"aux{li}_"
        cls_sum = l1_sum = giou_sum = torch.zeros((), device=device)
        dn_cls = dn_l1 = dn_giou = torch.zeros((), device=device)
        for b in range(bsz):
            m_logits = pred.logits[b, dn_pad:]
            m_boxes = pred.boxes[b, dn_pad:]
            if li == final:
                match = matches[b]
            else:
                match = match_all_groups(
                    m_logits, m_boxes, targets[b].boxes, targets[b].labels, cfg, weights
                )
            mq, mt = _match_indices(match, n, device)
            c, l, g = _set_terms(m_logits, m_boxes, targets[b], mq, mt, weights)
            cls_sum = cls_sum + c
            l1_sum = l1_sum + l
            giou_sum = giou_sum + g

            dn = dn_segments[b]
            if len(dn):
                d_logits = pred.logits[b, : len(dn)]
                d_boxes = pred.boxes[b, : len(dn)]
                dq = torch.nonzero(dn.is_positive, as_tuple=True)[0].to(device)
                dt = dn.gt_index[dn.is_positive].to(device)
                c, l, g = _set_terms(d_logits, d_boxes, targets[b], dq, dt, weights)
                dn_cls = dn_cls + c
                dn_l1 = dn_l1 + l
                dn_giou = dn_giou + g
        out.terms[prefix + "cls"] = cls_sum / num_pairs
        out.terms[prefix + "l1"] = l1_sum / num_pairs
        out.terms[prefix + "giou"] = giou_sum / num_pairs
        if any(len(s) for s in dn_segments):
            out.terms[prefix + "dn_cls"] = dn_cls / num_dn_pos
            out.terms[prefix + "dn_l1"] = dn_l1 / num_dn_pos
            out.terms[prefix + "dn_giou"] = dn_giou / num_dn_pos

    if encoder_pred is not None:
        cls_sum = l1_sum = giou_sum = torch.zeros((), device=device)
        for b in range(bsz):
            logits_b = encoder_pred.logits[b]
            boxes_b = encoder_pred.boxes[b]
            if targets[b].boxes.shape[0]:
                cost = matching_cost(
                    logits_b, boxes_b, targets[b].boxes, targets[b].labels, weights
                )
                pairs = hungarian(cost)
            else:
                pairs = []
            mq = torch.as_tensor([p[0] for p in pairs], dtype=torch.long, device=device)
            mt = torch.as_tensor([p[1] for p in pairs], dtype=torch.long, device=device)
            c, l, g = _set_terms(logits_b, boxes_b, targets[b], mq, mt, weights)
            cls_sum = cls_sum + c
            l1_sum = l1_sum + l
            giou_sum = giou_sum + g
        enc_pairs = max(sum(min(t.boxes.shape[0], encoder_pred.logits.shape[1]) for t in targets), 1)
        out.terms["enc_cls"] = cls_sum / enc_pairs
        out.terms["enc_l1"] = l1_sum / enc_pairs
        out.terms["enc_giou"] = giou_sum / enc_pairs
    return out


def clip_oversized_gt(boxes: torch.Tensor, labels: torch.Tensor, limit: int):
    """Drop ground truths beyond the per-group query budget, with a warning."""
    if boxes.shape[0] <= limit:
        return boxes, labels
    logger.warning("image has %d ground truths, clipping to %d", boxes.shape[0], limit)
    return boxes[:limit], labels[:limit]
