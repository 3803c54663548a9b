"""Vision stack: a small strided-conv backbone, transformer encoder over
grid features with 2-D sinusoidal positions, a query-based decoder that
emits one descriptor per region slot, and box / objectness heads. RoI
features pooled from the backbone are concatenated to the decoder output
to form the complete region descriptor (ablatable).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from . import tensor as T
from .tensor import Tensor, TensorError


@dataclass
class VisionConfig:
    num_queries: int = 16            # R
    d_model: int = 64
    encoder_layers: int = 2
    decoder_layers: int = 2
    heads: int = 4
    d_ff: int = 128
    backbone_channels: tuple = (16, 24, 32)
    roi_pool_size: int = 2           # p
    use_roi_features: bool = True

    def __post_init__(self):
        if self.d_model % self.heads:
            raise ValueError("d_model must be divisible by heads")

    @property
    def stride(self):
        return 2 ** len(self.backbone_channels)

    @property
    def d_region(self):
        if self.use_roi_features:
            return self.d_model + self.backbone_channels[-1] * self.roi_pool_size ** 2
        return self.d_model


class ConvBackbone(nn.Module):
    """Three strided conv + group-norm + GELU stages (stride 2 each)."""

    def __init__(self, rng, channels):
        self.convs = []
        self.norms = []
        c_in = 3
        for c_out in channels:
            self.convs.append(_Conv(rng, c_in, c_out))
            self.norms.append(_GroupNorm(c_out))
            c_in = c_out

    def __call__(self, images: Tensor) -> Tensor:
        """images: (B, 3, H, W) in [0,1] -> features (B, C, H/8, W/8)."""
        if images.shape[-1] < 2 ** len(self.convs) or images.shape[-2] < 2 ** len(self.convs):
            raise TensorError(
                f"backbone: image {images.shape[-2:]} smaller than stride "
                f"{2 ** len(self.convs)}"
            )
        x = images
        for conv, norm in zip(self.convs, self.norms):
            x = T.gelu(norm(conv(x)))
        return x


class _Conv(nn.Module):
    def __init__(self, rng, c_in, c_out, k=3):
        scale = 1.0 / np.sqrt(c_in * k * k)
        self.weight = Tensor(rng.normal(0.0, scale, size=(c_out, c_in, k, k)),
                             requires_grad=True)
        self.bias = nn.zeros_param(c_out)

    def __call__(self, x):
        return T.conv2d(x, self.weight, self.bias, stride=2, pad=1)


class _GroupNorm(nn.Module):
    def __init__(self, channels, groups=4):
        self.groups = min(groups, channels)
        self.gain = nn.ones_param(channels)
        self.bias = nn.zeros_param(channels)

    def __call__(self, x):
        return T.group_norm(x, self.groups, self.gain, self.bias)


def sinusoidal_positions_2d(h, w, d) -> np.ndarray:
    """(h*w, d) fixed 2-D sine/cosine grid encoding; half dims per axis."""
    def axis_enc(n, d_axis):
        pos = np.arange(n)[:, None]
        i = np.arange(d_axis // 2)[None, :]
        angles = pos / (100.0 ** (2 * i / d_axis))
        return np.concatenate([np.sin(angles), np.cos(angles)], axis=1)

    dy = d // 2
    dx = d - dy
    ey = axis_enc(h, dy)  # (h, dy)
    ex = axis_enc(w, dx)  # (w, dx)
    full = np.zeros((h, w, d))
    full[:, :, :dy] = ey[:, None, :]
    full[:, :, dy:] = ex[None, :, :]
    return full.reshape(h * w, d)


class VisionEncoderDecoder(nn.Module):
    """Transformer encoder over grid tokens, decoder over learned queries."""

    def __init__(self, rng, cfg: VisionConfig):
        self.cfg = cfg
        self.input_proj = nn.Linear(rng, cfg.backbone_channels[-1], cfg.d_model)
        self.query_embed = nn.param(rng, cfg.num_queries, cfg.d_model)
        self.encoder = [nn.EncoderLayer(rng, cfg.d_model, cfg.heads, cfg.d_ff)
                        for _ in range(cfg.encoder_layers)]
        self.decoder = [nn.DecoderLayer(rng, cfg.d_model, cfg.heads, cfg.d_ff)
                        for _ in range(cfg.decoder_layers)]

    def __call__(self, feature_map: Tensor, queries: Tensor | None = None) -> Tensor:
        """feature_map: (B, C, H', W') -> decoder features (B, R, d_model)."""
        b, c, h, w = feature_map.shape
        grid = T.reshape(T.transpose(feature_map, (0, 2, 3, 1)), (b, h * w, c))
        tokens = self.input_proj(grid)
        if tokens.shape[-1] != self.cfg.d_model:
            raise TensorError("encode_decode: d_model mismatch")
        tokens = T.add(tokens, sinusoidal_positions_2d(h, w, self.cfg.d_model))
        for layer in self.encoder:
            tokens = layer(tokens)
        q = queries if queries is not None else self.query_embed
        if q.shape[-1] != self.cfg.d_model:
            raise TensorError(
                f"encode_decode: query width {q.shape[-1]} != d_model {self.cfg.d_model}"
            )
        x = T.reshape(q, (1, self.cfg.num_queries, self.cfg.d_model))
        x = T.add(x, np.zeros((b, 1, 1)))  # broadcast queries across the batch
        for layer in self.decoder:
            x = layer(x, tokens)
        return x


class BoxHead(nn.Module):
    """3-layer MLP from decoder features to sigmoid cxcywh boxes."""

    def __init__(self, rng, d_model):
        self.mlp = nn.MLP(rng, [d_model, d_model, d_model, 4])

    def __call__(self, decoder_features: Tensor) -> Tensor:
        return T.sigmoid(self.mlp(decoder_features))


class ObjectnessHead(nn.Module):
    def __init__(self, rng, d_model):
        self.proj = nn.Linear(rng, d_model, 1)

    def __call__(self, decoder_features: Tensor) -> Tensor:
        out = self.proj(decoder_features)  # (B, R, 1)
        return T.reshape(out, out.shape[:-1])


def roi_pool(feature_map: Tensor, boxes: Tensor, p: int) -> Tensor:
    """Bilinearly sample a p x p grid over each box's extent.

    feature_map: (B, C, H', W'); boxes: (B, R, 4) normalized cxcywh.
    Returns (B, R, C * p * p). Sample points are clamped to the map, and a
    degenerate box collapses onto its containing cell.
    """
    b, c, h, w = feature_map.shape
    r = boxes.shape[1]
    offsets = (np.arange(p) + 0.5) / p - 0.5  # fractions of box extent
    cx = T.slice_(boxes, (slice(None), slice(None), 0))
    cy = T.slice_(boxes, (slice(None), slice(None), 1))
    bw = T.slice_(boxes, (slice(None), slice(None), 2))
    bh = T.slice_(boxes, (slice(None), slice(None), 3))
    # normalized sample centers (B, R, p): cx + off * w
    us = T.add(T.reshape(cx, (b, r, 1)), T.mul(T.reshape(bw, (b, r, 1)), offsets))
    vs = T.add(T.reshape(cy, (b, r, 1)), T.mul(T.reshape(bh, (b, r, 1)), offsets))
    # to feature-pixel coords (align-corners=false): x = u * W' - 0.5
    xs = T.sub(T.mul(us, float(w)), 0.5)
    ys = T.sub(T.mul(vs, float(h)), 0.5)
    # full p x p grid per box: broadcast y over x
    xs_g = T.reshape(T.add(T.reshape(xs, (b, r, 1, p)), np.zeros((1, 1, p, 1))),
                     (b, r * p * p))
    ys_g = T.reshape(T.add(T.reshape(ys, (b, r, p, 1)), np.zeros((1, 1, 1, p))),
                     (b, r * p * p))
    sampled = T.bilinear_sample(feature_map, xs_g, ys_g)  # (B, R*p*p, C)
    return T.reshape(sampled, (b, r, p * p * c))


class VisionModule(nn.Module):
    """Backbone + encoder-decoder + box/objectness heads + region encoding."""

    def __init__(self, rng, cfg: VisionConfig):
        self.cfg = cfg
        self.backbone = ConvBackbone(rng, cfg.backbone_channels)
        self.encdec = VisionEncoderDecoder(rng, cfg)
        self.box_head = BoxHead(rng, cfg.d_model)
        self.objectness_head = ObjectnessHead(rng, cfg.d_model)

    def __call__(self, images: Tensor):
        """images: (B, 3, H, W). Returns dict with feature_map, decoder
        features, boxes (B,R,4), objectness (B,R), region descriptors
        (B, R, d_region)."""
        fmap = self.backbone(images)
        dec = self.encdec(fmap)
        boxes = self.box_head(dec)
        objectness = self.objectness_head(dec)
        if self.cfg.use_roi_features:
            pooled = roi_pool(fmap, boxes, self.cfg.roi_pool_size)
            descriptors = T.concat([dec, pooled], axis=2)
        else:
            descriptors = dec
        return {
            "feature_map": fmap,
            "decoder_features": dec,
            "boxes": boxes,
            "objectness": objectness,
            "descriptors": descriptors,
        }
