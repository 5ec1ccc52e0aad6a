#!/usr/bin/env python3
"""
Fusion Attention Module for Harborsight
Stage-1 model pieces: strided image encoder pyramid, cross-attention fusion of
image queries with radar keys/values, and the mask decoder producing M_init.

Feature maps are (H, W, C) tensors. Wherever they are flattened for attention
or linear layers the order is row-major (v-major, then u).
"""

import logging
import math
from typing import Dict, List, Optional, Sequence

import numpy as np

from mask_ops import DEFAULT_LEGEND, MaskStack, NUM_CLASSES
from numerics import (
    Tensor, add, add_row, as_tensor, concat, matmul, relu, reshape, resize_bilinear,
    scale, softmax_rows, space_to_depth, take_rows, transpose, xavier_uniform, zeros,
)

logger = logging.getLogger(__name__)

DEFAULT_WIDTHS = (16, 32, 64, 128)
DEFAULT_DECODER_WIDTH = 32
PYRAMID_DIVISOR = 16


class ModelShapeError(Exception):
    """Exception for inputs or parameters with inconsistent shapes"""
    pass


ParamDict = Dict[str, Tensor]


def count_parameters(params: ParamDict) -> int:
    return int(sum(p.size for p in params.values()))


def _levels(params: ParamDict, prefix: str) -> int:
    count = 0
    while f"{prefix}.l{count + 1}.w" in params:
        count += 1
    return count


# ---------------------------------------------------------------- initialization

def init_image_encoder(widths: Sequence[int], rng: np.random.Generator,
                       prefix: str = "img") -> ParamDict:
    """Strided 2×2 patch layers 3 → widths[0] → ... with Xavier weights and zero bias"""
    params: ParamDict = {}
    channels = 3
    for level, width in enumerate(widths, start=1):
        name = f"{prefix}.l{level}"
        params[f"{name}.w"] = xavier_uniform(4 * channels, width, rng, name=f"{name}.w")
        params[f"{name}.b"] = zeros((width,), requires_grad=True, name=f"{name}.b")
        channels = width
    return params


def init_cross_attention(widths: Sequence[int], rng: np.random.Generator,
                         prefix: str = "caf", query_only: bool = False) -> ParamDict:
    """Square W_Q, W_K, W_V per level (W_Q alone for the camera-only model)"""
    params: ParamDict = {}
    roles = ("wq",) if query_only else ("wq", "wk", "wv")
    for level, width in enumerate(widths, start=1):
        for role in roles:
            name = f"{prefix}.l{level}.{role}"
            params[name] = xavier_uniform(width, width, rng, name=name)
    return params


def init_decoder(widths: Sequence[int], rng: np.random.Generator,
                 decoder_width: int = DEFAULT_DECODER_WIDTH,
                 num_classes: int = NUM_CLASSES, prefix: str = "dec") -> ParamDict:
    params: ParamDict = {}
    for level, width in enumerate(widths, start=1):
        name = f"{prefix}.l{level}"
        params[f"{name}.w"] = xavier_uniform(width, decoder_width, rng, name=f"{name}.w")
        params[f"{name}.b"] = zeros((decoder_width,), requires_grad=True, name=f"{name}.b")
    fan_in = decoder_width * len(widths)
    params[f"{prefix}.out.w"] = xavier_uniform(fan_in, num_classes, rng, name=f"{prefix}.out.w")
    params[f"{prefix}.out.b"] = zeros((num_classes,), requires_grad=True, name=f"{prefix}.out.b")
    return params


# ---------------------------------------------------------------- encoder

def pointwise_linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """Apply a (C_in × C_out) matrix to every pixel of an (H, W, C_in) map"""
    h, w, c = x.shape
    if weight.shape[0] != c:
        raise ModelShapeError(f"Linear layer expects {weight.shape[0]} channels, got map {x.shape}")
    out = matmul(reshape(x, (h * w, c)), weight)
    if bias is not None:
        out = add_row(out, bias)
    return reshape(out, (h, w, weight.shape[1]))


def encode_image(image, params: ParamDict, prefix: str = "img") -> List[Tensor]:
    """
    Four-level feature pyramid F_img^i of an (H, W, 3) image in [0, 1]

    Each level gathers 2×2 patches (stride 2) and applies a shared linear layer
    followed by ReLU, halving H and W per level.

    Raises:
        ModelShapeError: If H or W is not divisible by 16 or the image is not RGB
    """
    x = as_tensor(image)
    if x.ndim != 3 or x.shape[2] != 3:
        raise ModelShapeError(f"encode_image needs an (H, W, 3) image, got {x.shape}")
    if x.shape[0] % PYRAMID_DIVISOR or x.shape[1] % PYRAMID_DIVISOR:
        raise ModelShapeError(
            f"Image extents must be divisible by {PYRAMID_DIVISOR}, got {x.shape[0]}x{x.shape[1]}")
    pyramid: List[Tensor] = []
    for level in range(1, _levels(params, prefix) + 1):
        patches = space_to_depth(x, 2)
        x = relu(pointwise_linear(patches, params[f"{prefix}.l{level}.w"],
                                   params[f"{prefix}.l{level}.b"]))
        pyramid.append(x)
    return pyramid


# ---------------------------------------------------------------- cross-attention fusion

def attention_weights(query: Tensor, key: Tensor) -> Tensor:
    """softmax(Q Kᵀ / sqrt(C)) over the key axis"""
    width = query.shape[1]
    scores = scale(matmul(query, transpose(key)), 1.0 / math.sqrt(width))
    return softmax_rows(scores)


def query_projection(f_img: Tensor, weights: ParamDict, level: int, prefix: str = "caf") -> Tensor:
    """Q = F_img W_Q kept in (H, W, C) layout; the fused output when no radar key exists"""
    return pointwise_linear(as_tensor(f_img), weights[f"{prefix}.l{level}.wq"])


def cross_attention_fuse(f_img: Tensor, f_radar: Tensor, weights: ParamDict, level: int,
                         valid: Optional[np.ndarray] = None, prefix: str = "caf") -> Tensor:
    """
    Fuse one pyramid level with radar point features

        Q = F_img W_Q,  K = F_radar W_K,  V = F_radar W_V
        F = Q + softmax(Q Kᵀ / sqrt(C)) V

    Rows of F_radar flagged invalid are dropped before K and V are formed.
    With no valid rows the attention term is zero and F = Q.

    Args:
        f_img: (H, W, C) image features
        f_radar: (N, C) radar point features
        weights: Parameters holding {prefix}.l{level}.wq / wk / wv
        level: Pyramid level, 1-based
        valid: Optional (N,) validity flags

    Returns:
        (H, W, C) fused features
    """
    f_img, f_radar = as_tensor(f_img), as_tensor(f_radar)
    h, w, c = f_img.shape
    if f_radar.ndim != 2 or f_radar.shape[1] != c:
        raise ModelShapeError(f"Width mismatch at level {level} → image {f_img.shape}, radar {f_radar.shape}")
    rows = np.arange(f_radar.shape[0]) if valid is None else np.nonzero(np.asarray(valid))[0]
    if rows.size == 0:
        return query_projection(f_img, weights, level, prefix)
    w_k = weights[f"{prefix}.l{level}.wk"]
    w_v = weights[f"{prefix}.l{level}.wv"]

    query = matmul(reshape(f_img, (h * w, c)), weights[f"{prefix}.l{level}.wq"])
    points = take_rows(f_radar, rows)
    key = matmul(points, w_k)
    value = matmul(points, w_v)
    fused = add(query, matmul(attention_weights(query, key), value))
    return reshape(fused, (h, w, c))


# ---------------------------------------------------------------- decoder

def decode_masks(fused: Sequence[Tensor], params: ParamDict, out_height: int, out_width: int,
                 prefix: str = "dec") -> Tensor:
    """
    Per-pixel class probabilities (out_height, out_width, C_cls)

    Every level is projected to the common decoder width, resized to the level-1
    grid, concatenated, projected to C_cls, normalized by a per-pixel softmax and
    resized to the output size.
    """
    if not fused:
        raise ModelShapeError("decode_masks needs at least one feature level")
    base_h, base_w = fused[0].shape[:2]
    projected = []
    for level, features in enumerate(fused, start=1):
        level_map = pointwise_linear(features, params[f"{prefix}.l{level}.w"],
                                      params[f"{prefix}.l{level}.b"])
        projected.append(resize_bilinear(level_map, base_h, base_w))
    stacked = concat(projected, axis=-1)
    logits = pointwise_linear(stacked, params[f"{prefix}.out.w"], params[f"{prefix}.out.b"])
    num_classes = logits.shape[2]
    probs = softmax_rows(reshape(logits, (base_h * base_w, num_classes)))
    return resize_bilinear(reshape(probs, (base_h, base_w, num_classes)), out_height, out_width)


def to_maskstack(probs: Tensor, legend: Sequence[str] = DEFAULT_LEGEND) -> MaskStack:
    """Detach an (H, W, C) probability map into a (C, H, W) MaskStack"""
    data = as_tensor(probs).data
    return MaskStack(np.transpose(data, (2, 0, 1)).copy(), tuple(legend))
