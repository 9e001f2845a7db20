"""Query sequence construction: K matching groups plus a denoising segment.

The concatenated layout is [DN | group 0 | ... | group K-1]. The self-attention
mask keeps each matching group isolated from every other group and from the
denoising queries, and keeps each denoising group isolated from everything but
itself. Mask convention: True means "may NOT attend" (additive -inf before
softmax).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from .errors import ConfigurationError


@dataclass
class QueryGroupConfig:
    num_groups: int = 11  # K; inference uses exactly group 0
    queries_per_group: int = 20  # N

    def __post_init__(self):
        if self.num_groups < 1 or self.queries_per_group < 1:
            raise ConfigurationError("group count and queries per group must be >= 1")

    @property
    def total(self) -> int:
        return self.num_groups * self.queries_per_group


@dataclass
class DenoisingConfig:
    total_queries: int = 100
    pos_noise_scale: float = 0.4  # box jitter for positives
    neg_noise_scale: float = 1.0  # box jitter for negatives, must exceed the positive scale
    label_flip_prob: float = 0.5

    def __post_init__(self):
        if self.neg_noise_scale <= self.pos_noise_scale:
            raise ConfigurationError(
                f"negative noise scale ({self.neg_noise_scale}) must exceed "
                f"positive noise scale ({self.pos_noise_scale})"
            )


@dataclass
class DnSegment:
    """Denoising queries for one image.

    Within each of the ``groups`` groups there is one positive and one negative
    query per ground truth; positives carry a fixed assignment to their ground
    truth, negatives are supervised as "no object" (gt_index -1).
    """

    labels: torch.Tensor  # [M] long, content labels (positives possibly flipped)
    anchors: torch.Tensor  # [M, 4] normalized cxcywh, clamped to [0, 1]
    gt_index: torch.Tensor  # [M] long, -1 for negatives
    is_positive: torch.Tensor  # [M] bool
    groups: int = 0

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    @property
    def per_group(self) -> int:
        return 0 if self.groups == 0 else len(self) // self.groups

    @staticmethod
    def empty() -> "DnSegment":
        return DnSegment(
            labels=torch.zeros(0, dtype=torch.long),
            anchors=torch.zeros(0, 4),
            gt_index=torch.zeros(0, dtype=torch.long),
            is_positive=torch.zeros(0, dtype=torch.bool),
            groups=0,
        )


@dataclass
class QueryLayout:
    """Concatenated query sequence plus its self-attention mask.

    Order is fixed: denoising segment first, then the K matching groups.
    """

    embeddings: torch.Tensor  # [T, C]
    anchors: torch.Tensor  # [T, 4]
    mask: torch.Tensor  # [T, T] bool, True = blocked
    num_groups: int
    queries_per_group: int
    dn: DnSegment = field(default_factory=DnSegment.empty)

    @property
    def dn_total(self) -> int:
        return len(self.dn)

    @property
    def total(self) -> int:
        return int(self.embeddings.shape[0])

    def group_range(self, k: int) -> tuple[int, int]:
        start = self.dn_total + k * self.queries_per_group
        return start, start + self.queries_per_group

    def position_of(self, index: int) -> tuple[str, int, int]:
        """Map a flat query index to its segment: ("dn"|"group", segment id, slot)."""
        if index < 0 or index >= self.total:
            raise IndexError(index)
        if index < self.dn_total:
            per = self.dn.per_group
            return "dn", index // per, index % per
        rel = index - self.dn_total
        return "group", rel // self.queries_per_group, rel % self.queries_per_group


def build_attention_mask(
    num_groups: int, queries_per_group: int, dn_groups: int = 0, dn_per_group: int = 0
) -> torch.Tensor:
    """Blocked-pairs mask over [DN | groups]; True = query i may not attend to j."""
    if num_groups < 1:
        raise ConfigurationError("num_groups must be >= 1")
    if queries_per_group < 0 or dn_groups < 0 or dn_per_group < 0:
        raise ConfigurationError("counts must be non-negative")
    dn_total = dn_groups * dn_per_group
    total = dn_total + num_groups * queries_per_group
    mask = torch.ones(total, total, dtype=torch.bool)
    for g in range(dn_groups):
        s = g * dn_per_group
        mask[s : s + dn_per_group, s : s + dn_per_group] = False
    for k in range(num_groups):
        s = dn_total + k * queries_per_group
        mask[s : s + queries_per_group, s : s + queries_per_group] = False
    return mask


def make_denoising_queries(
    gt_boxes: torch.Tensor,
    gt_labels: torch.Tensor,
    num_categories: int,
    cfg: DenoisingConfig,
    rng: np.random.Generator,
) -> DnSegment:
    """Build the DN segment for one image from its ground truth.

    gt_boxes: [n, 4] normalized cxcywh. Per DN group and ground truth, a
    positive (noise magnitude U[0, pos_scale) per component, label flipped with
    label_flip_prob) and a negative (magnitude U[pos_scale, neg_scale), kept
    label, supervised as background) are emitted. The group count shrinks so
    the segment never exceeds total_queries, except that at least one group is
    built whenever there is any ground truth.
    """
    n = int(gt_boxes.shape[0])
    if n == 0:
        return DnSegment.empty()
    groups = max(cfg.total_queries // (2 * n), 1)
    m = groups * 2 * n

    base = gt_boxes.detach().to(torch.float64).cpu().numpy()  # [n, 4]
    tiled = np.tile(base, (groups * 2, 1))  # [m, 4]; order: (g0 pos, g0 neg, g1 pos, ...)
    positive = np.zeros(m, dtype=bool)
    for g in range(groups):
        positive[g * 2 * n : g * 2 * n + n] = True

    # component scale: centers jitter within half extent, sizes within full extent
    extent = np.concatenate([base[:, 2:4] / 2.0, base[:, 2:4]], axis=1)
    extent = np.tile(extent, (groups * 2, 1))
    mag = np.where(
        positive[:, None],
        rng.uniform(0.0, cfg.pos_noise_scale, size=(m, 4)),
        rng.uniform(cfg.pos_noise_scale, cfg.neg_noise_scale, size=(m, 4)),
    )
    sign = rng.integers(0, 2, size=(m, 4)) * 2 - 1
    noised = np.clip(tiled + sign * mag * extent, 0.0, 1.0)

    labels = np.tile(gt_labels.detach().cpu().numpy(), groups * 2)
    flip = (rng.random(m) < cfg.label_flip_prob) & positive
    if num_categories > 1:
        # flip to a uniformly random *other* category
        shift = rng.integers(1, num_categories, size=m)
        labels = np.where(flip, (labels + shift) % num_categories, labels)

    gt_index = np.tile(np.arange(n), groups * 2)
    gt_index[~positive] = -1

    return DnSegment(
        labels=torch.from_numpy(labels.astype(np.int64)),
        anchors=torch.from_numpy(noised).to(torch.float32),
        gt_index=torch.from_numpy(gt_index.astype(np.int64)),
        is_positive=torch.from_numpy(positive),
        groups=groups,
    )


def assemble_layout(
    matching_embeddings: torch.Tensor,
    matching_anchors: torch.Tensor,
    dn_segment: DnSegment,
    dn_embeddings: torch.Tensor,
    cfg: QueryGroupConfig,
) -> QueryLayout:
    """Concatenate [DN | groups] and attach the attention mask."""
    if matching_embeddings.shape[0] != cfg.total:
        raise ValueError(
            f"matching segment has {matching_embeddings.shape[0]} queries, expected "
            f"{cfg.num_groups} groups x {cfg.queries_per_group}"
        )
    if dn_embeddings.shape[0] != len(dn_segment):
        raise ValueError("dn embeddings do not match dn segment length")
    embeddings = torch.cat([dn_embeddings, matching_embeddings], dim=0)
    anchors = torch.cat([dn_segment.anchors.to(matching_anchors.dtype), matching_anchors], dim=0)
    mask = build_attention_mask(
        cfg.num_groups, cfg.queries_per_group, dn_segment.groups, dn_segment.per_group
    )
    return QueryLayout(
        embeddings=embeddings,
        anchors=anchors,
        mask=mask,
        num_groups=cfg.num_groups,
        queries_per_group=cfg.queries_per_group,
        dn=dn_segment,
    )


def select_inference_slice(layout: QueryLayout) -> tuple[torch.Tensor, torch.Tensor]:
    """Group-0 matching queries only: (embeddings [N, C], anchors [N, 4])."""
    s, e = layout.group_range(0)
    return layout.embeddings[s:e], layout.anchors[s:e]


class DnLabelEmbedder(torch.nn.Module):
    """Content embeddings for DN queries: learned per-category embedding plus a
    shared flag channel that distinguishes DN from matching queries."""

    def __init__(self, num_categories: int, dim: int):
        super().__init__()
        self.embed = torch.nn.Embedding(num_categories, dim)
        self.flag = torch.nn.Parameter(torch.zeros(dim))
        torch.nn.init.normal_(self.embed.weight, std=0.02)

    def forward(self, labels: torch.Tensor) -> torch.Tensor:
        return self.embed(labels) + self.flag
