"""Transformer decoder: two-stage proposal selection, multi-scale deformable
cross-attention, masked self-attention, and iterative box refinement with
look-forward-twice gradient routing (each layer's box prediction backpropagates
through its own and the immediately preceding layer's refinement).
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .backbone import FeaturePyramid
from .errors import ConfigurationError

ANCHOR_CLAMP = 1e-4


def inverse_sigmoid(x: torch.Tensor, eps: float = ANCHOR_CLAMP) -> torch.Tensor:
    x = x.clamp(min=eps, max=1.0 - eps)
    return torch.log(x / (1.0 - x))


def refine_box(anchor: torch.Tensor, delta: torch.Tensor) -> torch.Tensor:
    """sigma(sigma^-1(anchor) + delta), component-wise on [..., 4] cxcywh boxes."""
    return torch.sigmoid(inverse_sigmoid(anchor) + delta)


@dataclass
class DeformAttnParams:
    num_points: int = 4  # P, sampling points per head per level
    num_heads: int = 4  # H
    num_levels: int = 4  # L


@dataclass
class LayerPrediction:
    logits: torch.Tensor  # [B, T, num_categories]
    boxes: torch.Tensor  # [B, T, 4] normalized cxcywh, sigmoid-bounded


def deform_attn_core(
    value_maps: list[torch.Tensor],
    locations: torch.Tensor,
    weights: torch.Tensor,
) -> torch.Tensor:
    """Sample-and-mix core of deformable attention.

    value_maps: per level [B, H, D, h_l, w_l]
    locations:  [B, Q, H, L, P, 2] normalized to [0, 1] over each level's extent
    weights:    [B, Q, H, L, P], caller-normalized
    Out-of-bounds samples read as zero. Returns [B, Q, H*D].
    """
    b, q, h, l, p, _ = locations.shape
    sampled = []
    for lid, vm in enumerate(value_maps):
        d = vm.shape[2]
        grid = locations[:, :, :, lid] * 2.0 - 1.0  # [B, Q, H, P, 2]
        grid = grid.permute(0, 2, 1, 3, 4).reshape(b * h, q, p, 2)
        v = vm.reshape(b * h, d, vm.shape[3], vm.shape[4])
        s = F.grid_sample(v, grid, mode="bilinear", padding_mode="zeros", align_corners=False)
        sampled.append(s)  # [B*H, D, Q, P]
    stacked = torch.stack(sampled, dim=-2)  # [B*H, D, Q, L, P]
    w = weights.permute(0, 2, 1, 3, 4).reshape(b * h, 1, q, l, p)
    out = (stacked * w).sum(dim=(-2, -1))  # [B*H, D, Q]
    d = out.shape[1]
    return out.reshape(b, h, d, q).permute(0, 3, 1, 2).reshape(b, q, h * d)


class DeformableAttention(nn.Module):
    """Multi-scale deformable attention over a feature pyramid.

    Sampling points are predicted per (head, level, point) as offsets from the
    query's anchor center, scaled by the anchor size. Mixing weights are
    softmax-normalized per head and rescaled so each query's weights sum to 1
    over all heads x levels x points.
    """

    def __init__(self, dim: int, params: DeformAttnParams | None = None):
        super().__init__()
        self.params = params or DeformAttnParams()
        p = self.params
        if dim % p.num_heads != 0:
            raise ConfigurationError(f"dim {dim} not divisible by {p.num_heads} heads")
        self.dim = dim
        slots = p.num_heads * p.num_levels * p.num_points
        self.sampling_offsets = nn.Linear(dim, slots * 2)
        self.attention_weights = nn.Linear(dim, slots)
        self.value_proj = nn.Linear(dim, dim)
        self.output_proj = nn.Linear(dim, dim)
        self._reset_parameters()

    def _reset_parameters(self):
        p = self.params
        nn.init.constant_(self.sampling_offsets.weight, 0.0)
        thetas = torch.arange(p.num_heads, dtype=torch.float32) * (2.0 * math.pi / p.num_heads)
        grid = torch.stack([thetas.cos(), thetas.sin()], -1)
        grid = (grid / grid.abs().max(-1, keepdim=True)[0]).view(p.num_heads, 1, 1, 2)
        grid = grid.repeat(1, p.num_levels, p.num_points, 1)
        for i in range(p.num_points):
            grid[:, :, i, :] *= i + 1
        with torch.no_grad():
            self.sampling_offsets.bias.copy_(grid.reshape(-1))
        nn.init.constant_(self.attention_weights.weight, 0.0)
        nn.init.constant_(self.attention_weights.bias, 0.0)
        nn.init.xavier_uniform_(self.value_proj.weight)
        nn.init.constant_(self.value_proj.bias, 0.0)
        nn.init.xavier_uniform_(self.output_proj.weight)
        nn.init.constant_(self.output_proj.bias, 0.0)

    def _values(self, pyramid: FeaturePyramid) -> list[torch.Tensor]:
        p = self.params
        d = self.dim // p.num_heads
        masks = pyramid.padding_masks()
        out = []
        for m, pad in zip(pyramid.maps, masks):
            b, c, h, w = m.shape
            v = self.value_proj(m.flatten(2).transpose(1, 2))
            v = v.masked_fill(pad.flatten(1)[..., None], 0.0)
            out.append(v.transpose(1, 2).reshape(b, p.num_heads, d, h, w))
        return out

    def forward(
        self, query: torch.Tensor, anchors: torch.Tensor, pyramid: FeaturePyramid
    ) -> torch.Tensor:
        """query [B, Q, C], anchors [B, Q, 4] normalized cxcywh -> [B, Q, C]."""
        p = self.params
        if len(pyramid.maps) != p.num_levels:
            raise ConfigurationError(
                f"pyramid has {len(pyramid.maps)} levels, attention expects {p.num_levels}"
            )
        b, q, _ = query.shape
        offsets = self.sampling_offsets(query).view(b, q, p.num_heads, p.num_levels, p.num_points, 2)
        logits = self.attention_weights(query).view(b, q, p.num_heads, p.num_levels * p.num_points)
        weights = logits.softmax(-1).view(b, q, p.num_heads, p.num_levels, p.num_points)
        weights = weights / p.num_heads  # per-query total over all H*L*P slots is 1
        center = anchors[:, :, None, None, None, :2]
        size = anchors[:, :, None, None, None, 2:]
        locations = center + offsets / p.num_points * size * 0.5
        out = deform_attn_core(self._values(pyramid), locations, weights)
        return self.output_proj(out)


class Mlp(nn.Module):
    def __init__(self, in_dim: int, hidden: int, out_dim: int, num_layers: int = 3):
        super().__init__()
        dims = [in_dim] + [hidden] * (num_layers - 1) + [out_dim]
        self.layers = nn.ModuleList(nn.Linear(a, b) for a, b in zip(dims[:-1], dims[1:]))

    def forward(self, x):
        for i, layer in enumerate(self.layers):
            x = layer(x) if i == len(self.layers) - 1 else F.relu(layer(x))
        return x


def sine_box_encoding(boxes: torch.Tensor, dim: int) -> torch.Tensor:
    """Sine/cosine encoding of (cx, cy, w, h), dim//4 features per coordinate."""
    per = dim // 4
    t = torch.arange(per // 2, dtype=boxes.dtype, device=boxes.device)
    freq = 10000.0 ** (2 * t / per)
    scaled = boxes[..., None] * 2 * math.pi / freq  # [..., 4, per//2]
    enc = torch.stack([scaled.sin(), scaled.cos()], dim=-1).flatten(-3)
    return enc


@dataclass
class SelectionResult:
    anchors: torch.Tensor  # [B, n, 4] detached proposal boxes for the selected cells
    content: torch.Tensor  # [B, n, C] learned content embeddings (not encoder features)
    cell_logits: torch.Tensor  # [B, cells, num_categories] for the proposal aux loss
    cell_boxes: torch.Tensor  # [B, cells, 4] refined proposals, gradient-carrying
    indices: torch.Tensor  # [B, n] flat cell indices in level-major row-major order


class TwoStageSelector(nn.Module):
    """Scores every pyramid cell and turns the top cells into anchor boxes.

    Positional part (anchors) comes from the cell proposals; content part is a
    learned embedding table, one row per query slot.
    """

    def __init__(self, dim: int, num_categories: int, max_queries: int):
        super().__init__()
        self.class_head = nn.Linear(dim, num_categories)
        self.box_head = Mlp(dim, dim, 4)
        self.content = nn.Embedding(max_queries, dim)
        self.max_queries = max_queries
        prior = 0.01  # rare-positive bias keeps early focal loss stable
        nn.init.constant_(self.class_head.bias, -math.log((1 - prior) / prior))
        nn.init.normal_(self.content.weight, std=0.02)

    @staticmethod
    def base_proposals(pyramid: FeaturePyramid) -> torch.Tensor:
        """Per-cell base boxes [cells, 4]: cell centers with a per-level size prior."""
        out = []
        for lvl, m in enumerate(pyramid.maps):
            _, _, h, w = m.shape
            ys = (torch.arange(h, dtype=m.dtype, device=m.device) + 0.5) / h
            xs = (torch.arange(w, dtype=m.dtype, device=m.device) + 0.5) / w
            cy, cx = torch.meshgrid(ys, xs, indexing="ij")
            wh = torch.full_like(cx, 0.05 * 2**lvl)
            out.append(torch.stack([cx, cy, wh, wh], dim=-1).reshape(-1, 4))
        return torch.cat(out, dim=0)

    def forward(self, pyramid: FeaturePyramid, n_total: int) -> SelectionResult:
        feats = torch.cat([m.flatten(2).transpose(1, 2) for m in pyramid.maps], dim=1)
        b, cells, _ = feats.shape
        if n_total > cells:
            raise ConfigurationError(f"cannot select {n_total} queries from {cells} cells")
        if n_total > self.max_queries:
            raise ConfigurationError(
                f"{n_total} queries exceed the {self.max_queries} learned content slots"
            )
        logits = self.class_head(feats)
        base = self.base_proposals(pyramid)[None].expand(b, -1, -1)
        boxes = refine_box(base, self.box_head(feats))

        pad = torch.cat([m.flatten(1) for m in pyramid.padding_masks()], dim=1)
        scores = logits.max(-1).values.masked_fill(pad, float("-inf"))
        # stable sort keeps ascending cell index among equal scores
        order = torch.argsort(scores, dim=1, descending=True, stable=True)
        idx = order[:, :n_total]
        anchors = torch.gather(boxes, 1, idx[..., None].expand(-1, -1, 4)).detach()
        content = self.content.weight[:n_total][None].expand(b, -1, -1)
        return SelectionResult(
            anchors=anchors, content=content, cell_logits=logits, cell_boxes=boxes, indices=idx
        )


def two_stage_select(selector: TwoStageSelector, pyramid: FeaturePyramid, n_total: int):
    res = selector(pyramid, n_total)
    return res.anchors, res.content


class DecoderLayer(nn.Module):
    def __init__(self, dim: int, num_heads: int, attn_params: DeformAttnParams, ffn_dim: int):
        super().__init__()
        self.self_attn = nn.MultiheadAttention(dim, num_heads, batch_first=True)
        self.norm1 = nn.LayerNorm(dim)
        self.cross_attn = DeformableAttention(dim, attn_params)
        self.norm2 = nn.LayerNorm(dim)
        self.ffn = nn.Sequential(nn.Linear(dim, ffn_dim), nn.ReLU(), nn.Linear(ffn_dim, dim))
        self.norm3 = nn.LayerNorm(dim)
        self.num_heads = num_heads

    def forward(
        self,
        content: torch.Tensor,
        query_pos: torch.Tensor,
        anchors: torch.Tensor,
        pyramid: FeaturePyramid,
        mask: torch.Tensor | None,
    ) -> torch.Tensor:
        qk = content + query_pos
        attn_mask = None
        if mask is not None:
            if mask.dim() == 2:
                attn_mask = mask
            else:  # per-image masks -> per-head layout expected by MultiheadAttention
                b, t, _ = mask.shape
                attn_mask = (
                    mask[:, None].expand(b, self.num_heads, t, t).reshape(b * self.num_heads, t, t)
                )
        h, _ = self.self_attn(qk, qk, content, attn_mask=attn_mask, need_weights=False)
        content = self.norm1(content + h)
        h = self.cross_attn(content + query_pos, anchors, pyramid)
        content = self.norm2(content + h)
        content = self.norm3(content + self.ffn(content))
        return content


class DecoderStack(nn.Module):
    """Masked decoder layers with per-layer prediction heads and box refinement.

    With zero layers, a single prediction is still produced directly from the
    initial content and anchors.
    """

    def __init__(
        self,
        dim: int = 192,
        num_layers: int = 6,
        num_categories: int = 3,
        num_heads: int = 4,
        attn_params: DeformAttnParams | None = None,
        ffn_dim: int | None = None,
    ):
        super().__init__()
        params = attn_params or DeformAttnParams()
        self.layers = nn.ModuleList(
            DecoderLayer(dim, num_heads, params, ffn_dim or dim * 4) for _ in range(num_layers)
        )
        n_heads = max(num_layers, 1)
        class_head = nn.Linear(dim, num_categories)
        prior = 0.01
        nn.init.constant_(class_head.bias, -math.log((1 - prior) / prior))
        box_head = Mlp(dim, dim, 4)
        nn.init.constant_(box_head.layers[-1].weight, 0.0)
        nn.init.constant_(box_head.layers[-1].bias, 0.0)
        self.class_heads = nn.ModuleList(copy.deepcopy(class_head) for _ in range(n_heads))
        self.box_heads = nn.ModuleList(copy.deepcopy(box_head) for _ in range(n_heads))
        self.query_pos = Mlp(dim, dim, dim, num_layers=2)
        self.dim = dim

    def forward(
        self,
        content: torch.Tensor,
        anchors: torch.Tensor,
        pyramid: FeaturePyramid,
        mask: torch.Tensor | None = None,
    ) -> list[LayerPrediction]:
        """content [B, T, C], anchors [B, T, 4] -> one LayerPrediction per layer."""
        ref_detached = anchors.detach()
        ref_for_grad = ref_detached  # undetached refined box of the previous layer
        preds: list[LayerPrediction] = []
        if not self.layers:
            boxes = torch.sigmoid(self.box_heads[0](content) + inverse_sigmoid(ref_detached))
            return [LayerPrediction(self.class_heads[0](content), boxes)]
        for li, layer in enumerate(self.layers):
            qpos = self.query_pos(sine_box_encoding(ref_detached, self.dim))
            content = layer(content, qpos, ref_detached, pyramid, mask)
            delta = self.box_heads[li](content)
            boxes = torch.sigmoid(delta + inverse_sigmoid(ref_for_grad))
            preds.append(LayerPrediction(self.class_heads[li](content), boxes))
            ref_for_grad = boxes  # gradient reaches this layer and the next only
            ref_detached = boxes.detach()
        return preds
