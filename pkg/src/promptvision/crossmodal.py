"""Cross-modal fusion: project both streams to a joint width, run
co-attention blocks (each stream cross-attends the other, then
self-attends), score region relevance, condition region features on
relevance, and build the decoder memory.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from . import tensor as T
from .tensor import Tensor, TensorError


@dataclass
class CrossModalConfig:
    layers: int = 2
    d_joint: int = 64
    heads: int = 4
    d_ff: int = 128
    relevance_conditioning: bool = True

    def __post_init__(self):
        if self.d_joint % self.heads:
            raise ValueError("d_joint must be divisible by heads")


class CoAttentionBlock(nn.Module):
    """Bidirectional cross-attention followed by per-stream self-attention
    and feed-forward, all with residual + layer norm."""

    def __init__(self, rng, d, heads, d_ff):
        self.cross_rt = nn.MultiHeadAttention(rng, d, heads)  # regions attend tokens
        self.cross_tr = nn.MultiHeadAttention(rng, d, heads)  # tokens attend regions
        self.norm_r1 = nn.LayerNorm(d)
        self.norm_t1 = nn.LayerNorm(d)
        self.self_r = nn.EncoderLayer(rng, d, heads, d_ff)
        self.self_t = nn.EncoderLayer(rng, d, heads, d_ff)

    def __call__(self, regions, tokens, token_mask=None):
        r = self.norm_r1(T.add(regions, self.cross_rt(regions, tokens, token_mask)))
        t = self.norm_t1(T.add(tokens, self.cross_tr(tokens, regions)))
        r = self.self_r(r)
        t = self.self_t(t, token_mask)
        return r, t


class RelevanceConditioner(nn.Module):
    """Adds s * v_rel + (1 - s) * v_nrel to each region feature."""

    def __init__(self, rng, d_joint, enabled=True):
        self.v_rel = nn.param(rng, d_joint)
        self.v_nrel = nn.param(rng, d_joint)
        self.enabled = enabled

    def __call__(self, regions: Tensor, scores: Tensor) -> Tensor:
        if not self.enabled:
            return regions
        b, r = scores.shape
        s = T.reshape(scores, (b, r, 1))
        shift = T.add(T.mul(s, self.v_rel), T.mul(T.sub(1.0, s), self.v_nrel))
        return T.add(regions, shift)


def relevance_scores(relatedness_logits: Tensor, objectness_logits: Tensor) -> Tensor:
    """sigmoid(relatedness + objectness), elementwise over regions."""
    if relatedness_logits.shape != objectness_logits.shape:
        raise TensorError(
            f"relevance_scores: length mismatch {relatedness_logits.shape} vs "
            f"{objectness_logits.shape}"
        )
    return T.sigmoid(T.add(relatedness_logits, objectness_logits))


class CrossModalModule(nn.Module):
    def __init__(self, rng, d_region, d_token, cfg: CrossModalConfig):
        self.cfg = cfg
        self.project_regions = nn.Linear(rng, d_region, cfg.d_joint)
        self.project_tokens = nn.Linear(rng, d_token, cfg.d_joint)
        self.blocks = [CoAttentionBlock(rng, cfg.d_joint, cfg.heads, cfg.d_ff)
                       for _ in range(cfg.layers)]
        self.relatedness_head = nn.MLP(rng, [cfg.d_joint, cfg.d_joint, 1])
        self.conditioner = RelevanceConditioner(rng, cfg.d_joint,
                                                enabled=cfg.relevance_conditioning)

    def project_to_joint(self, region_descriptors, token_reprs):
        return self.project_regions(region_descriptors), self.project_tokens(token_reprs)

    def co_attend(self, regions, tokens, token_mask=None):
        for block in self.blocks:
            regions, tokens = block(regions, tokens, token_mask)
        return regions, tokens

    def relatedness(self, co_regions: Tensor) -> Tensor:
        out = self.relatedness_head(co_regions)  # (B, R, 1)
        return T.reshape(out, out.shape[:-1])

    def __call__(self, region_descriptors, token_reprs, objectness_logits,
                 token_mask=None):
        """Returns (memory, relevance scores, relatedness logits, co_tokens).

        Memory is regions first then tokens, width d_joint; the relevance
        used for ranking is the same tensor that conditions the memory.
        """
        regions, tokens = self.project_to_joint(region_descriptors, token_reprs)
        co_regions, co_tokens = self.co_attend(regions, tokens, token_mask)
        relatedness_logits = self.relatedness(co_regions)
        scores = relevance_scores(relatedness_logits, objectness_logits)
        conditioned = self.conditioner(co_regions, scores)
        memory = T.concat([conditioned, co_tokens], axis=1)
        return memory, scores, relatedness_logits, co_tokens


def memory_mask_from_token_mask(num_regions, token_lengths, max_tokens):
    """Additive cross-attention mask over [regions | tokens] memory."""
    b = len(token_lengths)
    m = np.zeros((b, 1, 1, num_regions + max_tokens))
    for i, n in enumerate(token_lengths):
        m[i, 0, 0, num_regions + n:] = nn.NEG_INF
    return m
