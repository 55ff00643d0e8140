"""Image-text cross-attention with center/total/surrounding region routing.

The baseline operation attends image tokens over the full prompt embedding:

    Y = softmax(Q K^T / sqrt(d_k)) V,  Q = F_img W_q, K = F_txt W_k, V = F_txt W_v

The region-routed variant ("cts": center-total-surrounding) runs two extra
key/value branches over the center and surrounding prompt streams, reusing
the same query projection, gates the two branch outputs by the binary
region mask (1 = surrounding token, 0 = center token), and blends the gated
sum with the baseline output through a scalar fusion weight:

    regional = center_out * (1 - mask) + surround_out * mask
    output   = (1 - fusion) * baseline + fusion * regional

At fusion = 0 the module is exactly the baseline, which is why the extra
branches are initialized as copies of the baseline key/value weights.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from outpaint import tensor as T
from outpaint.prompt import PromptEmbedding
from outpaint.tensor import ShapeMismatch, Tensor


class MaskNotBinary(ValueError):
    """Region mask values must all be exactly 0 or 1."""


class IndivisibleGrid(ValueError):
    """Pixel mask dimensions are not divisible by the token grid."""


FUSION_RANDOM = "random"
FUSION_CONSTANT = "constant"
FUSION_LEARNABLE = "learnable"
FUSION_MODES = (FUSION_RANDOM, FUSION_CONSTANT, FUSION_LEARNABLE)


@dataclass
class CrossAttnWeights:
    """Projection weights for one attention site."""

    w_q: Tensor  # (d_img, d_k)
    w_k: Tensor  # (d_text, d_k)
    w_v: Tensor  # (d_text, d_v)

    def __post_init__(self):
        if self.w_q.shape[1] != self.w_k.shape[1]:
            raise ShapeMismatch(
                f"w_q and w_k disagree on key width: {self.w_q.shape} vs {self.w_k.shape}"
            )

    @property
    def d_k(self) -> int:
        return self.w_q.shape[1]


@dataclass
class CtsAttnWeights:
    """Baseline weights plus the center/surrounding key-value branches.

    ``fusion`` is the scalar blend weight; whether it trains depends on
    ``fusion_mode`` (random / constant: frozen, learnable: trainable).
    """

    base: CrossAttnWeights
    center_k: Tensor
    center_v: Tensor
    surround_k: Tensor
    surround_v: Tensor
    fusion: Tensor
    fusion_mode: str = FUSION_LEARNABLE

    def named_tensors(self):
        """Stable (name, tensor) ordering used by checkpoints."""
        return [
            ("base.w_q", self.base.w_q),
            ("base.w_k", self.base.w_k),
            ("base.w_v", self.base.w_v),
            ("center.w_k", self.center_k),
            ("center.w_v", self.center_v),
            ("surround.w_k", self.surround_k),
            ("surround.w_v", self.surround_v),
            ("fusion", self.fusion),
        ]


@dataclass
class RegionMask:
    """Per-image-token binary mask; 1 = surrounding (generate), 0 = center."""

    values: np.ndarray

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=np.float64)
        if vals.ndim != 1:
            raise ShapeMismatch(f"region mask must be 1-d, got {vals.shape}")
        if not np.all((vals == 0.0) | (vals == 1.0)):
            raise MaskNotBinary("region mask entries must be exactly 0 or 1")
        self.values = vals

    def __len__(self) -> int:
        return self.values.shape[0]


def _attend(q: Tensor, f_txt: Tensor, w_k: Tensor, w_v: Tensor, d_k: int) -> Tensor:
    k = T.matmul(f_txt, w_k)
    v = T.matmul(f_txt, w_v)
    logits = T.scale(T.matmul(q, T.transpose(k)), 1.0 / math.sqrt(d_k))
    return T.matmul(T.softmax_rows(logits), v)


def cross_attention(image_tokens, text_tokens, w: CrossAttnWeights) -> Tensor:
    """Baseline single-head cross-attention of image tokens over text tokens."""
    image_tokens = T.as_tensor(image_tokens)
    text_tokens = T.as_tensor(text_tokens)
    q = T.matmul(image_tokens, w.w_q)
    return _attend(q, text_tokens, w.w_k, w.w_v, w.d_k)


def cts_cross_attention(
    image_tokens, pe: PromptEmbedding, mask: RegionMask, w: CtsAttnWeights
) -> Tensor:
    """Region-routed cross-attention (see module docstring).

    The query projection is computed once from the image stream and shared
    by all three branches; only keys and values are branch-specific.
    """
    image_tokens = T.as_tensor(image_tokens)
    if len(mask) != image_tokens.shape[0]:
        raise ShapeMismatch(
            f"mask length {len(mask)} != image token count {image_tokens.shape[0]}"
        )
    q = T.matmul(image_tokens, w.base.w_q)
    d_k = w.base.d_k
    baseline = _attend(q, pe.total, w.base.w_k, w.base.w_v, d_k)
    center_out = _attend(q, pe.center, w.center_k, w.center_v, d_k)
    surround_out = _attend(q, pe.surrounding, w.surround_k, w.surround_v, d_k)

    col = mask.values.reshape(-1, 1)
    regional = T.add(T.mul(center_out, Tensor(1.0 - col)), T.mul(surround_out, Tensor(col)))
    one_minus_f = T.sub(1.0, w.fusion)
    return T.add(T.mul(baseline, one_minus_f), T.mul(regional, w.fusion))


def init_cts_from_base(
    base: CrossAttnWeights,
    fusion_mode: str = FUSION_LEARNABLE,
    constant: float | None = None,
    rng: np.random.Generator | None = None,
) -> CtsAttnWeights:
    """Wrap baseline weights, deep-copying key/value into both region branches.

    Fusion initialization per mode: random draws uniform(0,1) from ``rng``
    and stays frozen; constant pins the given value and stays frozen;
    learnable starts at 0 (the wrapped module then reproduces the baseline
    exactly) and trains.
    """
    if fusion_mode not in FUSION_MODES:
        raise ValueError(f"unknown fusion mode {fusion_mode!r}")
    if fusion_mode == FUSION_RANDOM:
        if rng is None:
            raise ValueError("random fusion mode needs an rng")
        fusion = Tensor(rng.uniform(0.0, 1.0))
    elif fusion_mode == FUSION_CONSTANT:
        if constant is None:
            raise ValueError("constant fusion mode needs a value")
        fusion = Tensor(float(constant))
    else:
        fusion = Tensor(0.0, requires_grad=True)
    return CtsAttnWeights(
        base=base,
        center_k=base.w_k.copy(),
        center_v=base.w_v.copy(),
        surround_k=base.w_k.copy(),
        surround_v=base.w_v.copy(),
        fusion=fusion,
        fusion_mode=fusion_mode,
    )


def resize_mask(pixel_mask, token_grid: tuple[int, int]) -> RegionMask:
    """Block-average a pixel mask onto the token grid and threshold at 0.5.

    Exact halves round up to 1 (surrounding). Token order is row-major,
    matching the patch order of the denoiser.
    """
    pm = np.asarray(pixel_mask, dtype=np.float64)
    if pm.ndim != 2:
        raise ShapeMismatch(f"pixel mask must be 2-d, got {pm.shape}")
    h, w = token_grid
    height, width = pm.shape
    if h <= 0 or w <= 0 or height % h or width % w:
        raise IndivisibleGrid(f"pixel mask {pm.shape} not divisible by token grid {token_grid}")
    cells = pm.reshape(h, height // h, w, width // w).mean(axis=(1, 3))
    return RegionMask((cells >= 0.5).astype(np.float64).reshape(-1))
