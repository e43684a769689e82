"""RoI-view and connectivity-view token encoders.

Both encoders take one subject (``M x M``) or a batch (``B x M x M``) and
return a :class:`TokenSequence` whose row 0 is the view's CLS token.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Literal

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


@dataclass
class TokenSequence:
    tokens: Tensor  # (..., 1 + count, d_model)
    view_tag: Literal["roi", "connectivity"]
    count: int

    @property
    def cls(self) -> Tensor:
        return ad.take(self.tokens, (Ellipsis, slice(0, 1), slice(None)))

    @property
    def content(self) -> Tensor:
        return ad.take(self.tokens, (Ellipsis, slice(1, None), slice(None)))


def patch_count(m: int, p: int) -> int:
    return math.ceil(m / p) ** 2


def init_tokenizer_params(m: int, p: int, d_model: int, rng: np.random.Generator,
                          std: float = 0.02, weight_init=None) -> dict[str, Tensor]:
    """Learned CLS/position vectors ~ N(0, std); projections ~ N(0, std) unless
    ``weight_init(rng, fan_in, fan_out, dtype)`` is given; zero biases."""
    dtype = ad.get_default_dtype()
    n = patch_count(m, p)

    def normal(*shape):
        return Tensor(rng.normal(0.0, std, size=shape), requires_grad=True, dtype=dtype)

    def weight(fan_in, fan_out):
        if weight_init is None:
            return normal(fan_in, fan_out)
        return weight_init(rng, fan_in, fan_out, dtype)

    def zeros(*shape):
        return Tensor(np.zeros(shape), requires_grad=True, dtype=dtype)

    return {
        "tok.roi_w": weight(m, d_model),
        "tok.roi_b": zeros(d_model),
        "tok.patch_w": weight(p * p, d_model),
        "tok.patch_b": zeros(d_model),
        "tok.cls_r": normal(d_model),
        "tok.cls_c": normal(d_model),
        "tok.pos_r": normal(1 + m, d_model),
        "tok.pos_c": normal(1 + n, d_model),
    }


def patchify(adjacency, p: int) -> np.ndarray:
    """Split ``(..., M, M)`` into ``(..., N, p*p)`` non-overlapping blocks.

    Zero-pads to the next multiple of ``p``; blocks are taken in row-major
    block order and each is flattened row-major.
    """
    if p < 2:
        raise ValueError(f"patch size must be >= 2, got {p}")
    a = np.asarray(adjacency)
    m = a.shape[-1]
    g = math.ceil(m / p)
    padded_m = g * p
    if padded_m != m:
        pad = [(0, 0)] * (a.ndim - 2) + [(0, padded_m - m), (0, padded_m - m)]
        a = np.pad(a, pad)
    lead = a.shape[:-2]
    blocks = a.reshape(*lead, g, p, g, p)
    blocks = np.moveaxis(blocks, -3, -2)  # (..., g_row, g_col, p, p)
    return blocks.reshape(*lead, g * g, p * p)


def unpatchify(patches, m: int, p: int) -> np.ndarray:
    """Inverse of :func:`patchify`, cropping the padding."""
    x = np.asarray(patches)
    g = math.ceil(m / p)
    lead = x.shape[:-2]
    blocks = x.reshape(*lead, g, g, p, p)
    blocks = np.moveaxis(blocks, -2, -3)
    return blocks.reshape(*lead, g * p, g * p)[..., :m, :m]


def _with_cls(body: Tensor, cls: Tensor, pos: Tensor) -> Tensor:
    lead = body.shape[:-2]
    d = body.shape[-1]
    cls_row = ad.add(ad.reshape(cls, (1, d)), np.zeros(lead + (1, d), dtype=body.dtype))
    return ad.add(ad.concat([cls_row, body], axis=-2), pos)


def encode_roi(roi_features, params: dict[str, Tensor]) -> TokenSequence:
    """Token i = row (i-1) of the correlation profile, projected, plus position."""
    x = np.asarray(roi_features, dtype=ad.get_default_dtype())
    m = params["tok.roi_w"].shape[0]
    if x.shape[-2:] != (m, m):
        raise ValueError(f"encode_roi: expected (..., {m}, {m}) features, got {x.shape}")
    body = ad.add(ad.matmul(Tensor._wrap(x), params["tok.roi_w"]), params["tok.roi_b"])
    return TokenSequence(_with_cls(body, params["tok.cls_r"], params["tok.pos_r"]), "roi", m)


def encode_connectivity(adjacency, params: dict[str, Tensor], p: int) -> TokenSequence:
    """Token i = projected patch i plus position."""
    a = np.asarray(adjacency)
    if params["tok.patch_w"].shape[0] != p * p:
        raise ValueError(
            f"encode_connectivity: patch size {p} does not match projection "
            f"{params['tok.patch_w'].shape}"
        )
    patches = patchify(a, p).astype(ad.get_default_dtype())
    n = patches.shape[-2]
    if params["tok.pos_c"].shape[0] != 1 + n:
        raise ValueError(f"encode_connectivity: {n} patches but {params['tok.pos_c'].shape[0] - 1} positions")
    body = ad.add(ad.matmul(Tensor._wrap(patches), params["tok.patch_w"]), params["tok.patch_b"])
    return TokenSequence(_with_cls(body, params["tok.cls_c"], params["tok.pos_c"]), "connectivity", n)
