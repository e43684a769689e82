"""Cross-view transformer: per-view encoder layers, CLS-query fusion, heads."""

from __future__ import annotations

import math
from dataclasses import dataclass, fields
from typing import Literal

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .tokenizers import TokenSequence, encode_connectivity, encode_roi, init_tokenizer_params, patch_count

# CLS and positional vectors; weight matrices use 1/sqrt(fan_in) instead
INIT_STD = 0.02


@dataclass(frozen=True)
class ModelConfig:
    M: int = 90
    P: int = 30
    d_model: int = 64
    num_heads: int = 4
    r: int = 4
    L: int = 4
    num_classes: int = 2
    fusion_every: int = 1
    use_roi: bool = True
    use_conn: bool = True
    use_cross: bool = True
    weighted_conn: bool = False

    def __post_init__(self):
        if self.d_model % self.num_heads:
            raise ValueError(f"num_heads={self.num_heads} must divide d_model={self.d_model}")
        if self.L < 1 or self.r < 1:
            raise ValueError("L and r must be >= 1")
        if not 1 <= self.fusion_every <= self.L:
            raise ValueError(f"fusion_every must lie in [1, L={self.L}]")
        if self.P < 2:
            raise ValueError("patch size P must be >= 2")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if not (self.use_roi or self.use_conn):
            raise ValueError("at least one view must be enabled")
        if self.use_cross and not (self.use_roi and self.use_conn):
            raise ValueError("cross-view fusion needs both views")

    @property
    def N(self) -> int:
        return patch_count(self.M, self.P)

    @property
    def d_k(self) -> int:
        return self.d_model // self.num_heads

    @property
    def fusion_sites(self) -> list[int]:
        """Encoder layer indices (1-based) followed by a cross-view block."""
        if not self.use_cross:
            return []
        return [l for l in range(1, self.L + 1) if l % self.fusion_every == 0]

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in fields(cls)]


@dataclass
class BrainEmbedding:
    cls_r: Tensor | None  # (B, d_model)
    cls_c: Tensor | None


@dataclass
class ForwardOutput:
    embedding: BrainEmbedding
    logits_r: Tensor | None  # (B, num_classes)
    logits_c: Tensor | None
    fused_probs: Tensor  # (B, num_classes)


# ---------------------------------------------------------------------------
# parameters

def fan_in_normal(rng: np.random.Generator, fan_in: int, fan_out: int, dtype) -> Tensor:
    return Tensor(rng.normal(0.0, 1.0 / math.sqrt(fan_in), size=(fan_in, fan_out)),
                  requires_grad=True, dtype=dtype)


def _block_params(prefix: str, d: int, hidden: int, rng, dtype) -> dict[str, Tensor]:
    def normal(*shape):
        return fan_in_normal(rng, *shape, dtype)

    def const(value, *shape):
        return Tensor(np.full(shape, value), requires_grad=True, dtype=dtype)

    return {
        f"{prefix}.wq": normal(d, d), f"{prefix}.bq": const(0.0, d),
        # no key bias: it shifts every score of a query equally, so softmax ignores it
        f"{prefix}.wk": normal(d, d),
        f"{prefix}.wv": normal(d, d), f"{prefix}.bv": const(0.0, d),
        f"{prefix}.wo": normal(d, d), f"{prefix}.bo": const(0.0, d),
        f"{prefix}.ln1_g": const(1.0, d), f"{prefix}.ln1_b": const(0.0, d),
        f"{prefix}.ff1_w": normal(d, hidden), f"{prefix}.ff1_b": const(0.0, hidden),
        f"{prefix}.ff2_w": normal(hidden, d), f"{prefix}.ff2_b": const(0.0, d),
        f"{prefix}.ln2_g": const(1.0, d), f"{prefix}.ln2_b": const(0.0, d),
    }


def init_params(config: ModelConfig, rng: np.random.Generator) -> dict[str, Tensor]:
    """Gaussian weights with std 1/sqrt(fan_in), zero biases, unit LN gains."""
    dtype = ad.get_default_dtype()
    d, hidden = config.d_model, config.r * config.d_model
    params = init_tokenizer_params(config.M, config.P, d, rng, INIT_STD, weight_init=fan_in_normal)
    views = [v for v, on in (("r", config.use_roi), ("c", config.use_conn)) if on]
    for l in range(1, config.L + 1):
        for v in views:
            params.update(_block_params(f"enc{l}.{v}", d, hidden, rng, dtype))
    for l in config.fusion_sites:
        for v in ("r", "c"):
            params.update(_block_params(f"xv{l}.{v}", d, hidden, rng, dtype))
    for v in views:
        params[f"head.{v}.w"] = fan_in_normal(rng, d, config.num_classes, dtype)
        params[f"head.{v}.b"] = Tensor(np.zeros(config.num_classes), requires_grad=True, dtype=dtype)
    return params


# ---------------------------------------------------------------------------
# building blocks

def attention(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    """softmax(q k^T / sqrt(d_k)) v over the last two axes.

    MAC cost for ``a`` queries and ``b`` keys: ``a*b*d_k`` scores,
    ``a*b`` scaling, ``a*b`` softmax and ``a*b*d_k`` mixing.
    """
    d_k = q.shape[-1]
    if k.shape[-1] != d_k or k.shape[-2] != v.shape[-2]:
        raise ad.ShapeError(f"attention: incompatible q{q.shape} k{k.shape} v{v.shape}")
    scores = ad.scale(ad.matmul(q, ad.transpose(k)), 1.0 / math.sqrt(d_k))
    return ad.matmul(ad.softmax_rows(scores), v)


def _linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    return ad.add(ad.matmul(x, w), b)


def _split_heads(x: Tensor, h: int) -> Tensor:
    b, t, d = x.shape
    return ad.transpose(ad.reshape(x, (b, t, h, d // h)), (0, 2, 1, 3))


def _merge_heads(x: Tensor) -> Tensor:
    b, h, t, dk = x.shape
    return ad.reshape(ad.transpose(x, (0, 2, 1, 3)), (b, t, h * dk))


def multi_head(x_q: Tensor, x_kv: Tensor, params: dict[str, Tensor], prefix: str, num_heads: int) -> Tensor:
    """Project, attend per head, concatenate heads, output-project.  Inputs are (B, T, d)."""
    q = _split_heads(_linear(x_q, params[f"{prefix}.wq"], params[f"{prefix}.bq"]), num_heads)
    k = _split_heads(ad.matmul(x_kv, params[f"{prefix}.wk"]), num_heads)
    v = _split_heads(_linear(x_kv, params[f"{prefix}.wv"], params[f"{prefix}.bv"]), num_heads)
    return _linear(_merge_heads(attention(q, k, v)), params[f"{prefix}.wo"], params[f"{prefix}.bo"])


def feed_forward(x: Tensor, params: dict[str, Tensor], prefix: str) -> Tensor:
    hidden = ad.gelu(_linear(x, params[f"{prefix}.ff1_w"], params[f"{prefix}.ff1_b"]))
    return _linear(hidden, params[f"{prefix}.ff2_w"], params[f"{prefix}.ff2_b"])


def _ln(x: Tensor, params: dict[str, Tensor], prefix: str, which: str) -> Tensor:
    return ad.layer_norm(x, params[f"{prefix}.{which}_g"], params[f"{prefix}.{which}_b"])


def _batched(x: Tensor) -> tuple[Tensor, bool]:
    if x.ndim == 2:
        return ad.reshape(x, (1,) + x.shape), True
    return x, False


def _unbatched(x: Tensor, squeeze: bool) -> Tensor:
    return ad.reshape(x, x.shape[1:]) if squeeze else x


def encoder_layer(seq: TokenSequence, params: dict[str, Tensor], prefix: str, num_heads: int) -> TokenSequence:
    """Post-norm block: x1 = LN(x + MSA(x)); out = LN(x1 + FFN(x1))."""
    x, squeeze = _batched(seq.tokens)
    x1 = _ln(ad.add(x, multi_head(x, x, params, prefix, num_heads)), params, prefix, "ln1")
    out = _ln(ad.add(x1, feed_forward(x1, params, prefix)), params, prefix, "ln2")
    return TokenSequence(_unbatched(out, squeeze), seq.view_tag, seq.count)


def _cross_direction(cls: Tensor, content: Tensor, params, prefix: str, num_heads: int) -> Tensor:
    c1 = _ln(ad.add(cls, multi_head(cls, content, params, prefix, num_heads)), params, prefix, "ln1")
    return _ln(ad.add(c1, feed_forward(c1, params, prefix)), params, prefix, "ln2")


def cross_view(seq_r: TokenSequence, seq_c: TokenSequence, params: dict[str, Tensor],
               prefix: str, num_heads: int) -> tuple[TokenSequence, TokenSequence]:
    """Each view's CLS token queries the other view's content tokens.

    Both updates read the pre-update sequences.  Only the two CLS rows change;
    content rows are copied through untouched.  ``{prefix}.r`` holds the
    parameters that update CLS_R, ``{prefix}.c`` those that update CLS_C.
    """
    xr, squeeze = _batched(seq_r.tokens)
    xc, _ = _batched(seq_c.tokens)
    cls_r, content_r = _split_cls(xr)
    cls_c, content_c = _split_cls(xc)
    new_r = _cross_direction(cls_r, content_c, params, f"{prefix}.r", num_heads)
    new_c = _cross_direction(cls_c, content_r, params, f"{prefix}.c", num_heads)
    out_r = ad.concat([new_r, content_r], axis=1)
    out_c = ad.concat([new_c, content_c], axis=1)
    return (
        TokenSequence(_unbatched(out_r, squeeze), seq_r.view_tag, seq_r.count),
        TokenSequence(_unbatched(out_c, squeeze), seq_c.view_tag, seq_c.count),
    )


def _split_cls(x: Tensor) -> tuple[Tensor, Tensor]:
    return ad.take(x, (slice(None), slice(0, 1))), ad.take(x, (slice(None), slice(1, None)))


# ---------------------------------------------------------------------------
# full model

def forward(roi_features, adjacency, params: dict[str, Tensor], config: ModelConfig) -> ForwardOutput:
    """Run the model on a batch ``(B, M, M)`` of views (or one ``(M, M)`` pair).

    Fused probabilities are the mean of the per-view softmax outputs; with a
    single enabled view they are that view's softmax.
    """
    roi_features = np.asarray(roi_features)
    adjacency = np.asarray(adjacency)
    if roi_features.ndim == 2:
        roi_features, adjacency = roi_features[None], adjacency[None]
    if roi_features.shape[1:] != (config.M, config.M):
        raise ValueError(f"expected views of shape ({config.M}, {config.M}), got {roi_features.shape[1:]}")

    seq_r = encode_roi(roi_features, params) if config.use_roi else None
    conn_input = roi_features if config.weighted_conn else adjacency
    seq_c = encode_connectivity(conn_input, params, config.P) if config.use_conn else None
    fusion = set(config.fusion_sites)
    for l in range(1, config.L + 1):
        if seq_r is not None:
            seq_r = encoder_layer(seq_r, params, f"enc{l}.r", config.num_heads)
        if seq_c is not None:
            seq_c = encoder_layer(seq_c, params, f"enc{l}.c", config.num_heads)
        if l in fusion:
            seq_r, seq_c = cross_view(seq_r, seq_c, params, f"xv{l}", config.num_heads)

    b, d = roi_features.shape[0], config.d_model
    cls_r = ad.reshape(seq_r.cls, (b, d)) if seq_r is not None else None
    cls_c = ad.reshape(seq_c.cls, (b, d)) if seq_c is not None else None
    logits_r = _linear(cls_r, params["head.r.w"], params["head.r.b"]) if cls_r is not None else None
    logits_c = _linear(cls_c, params["head.c.w"], params["head.c.b"]) if cls_c is not None else None
    probs = [ad.softmax_rows(x) for x in (logits_r, logits_c) if x is not None]
    fused = probs[0] if len(probs) == 1 else ad.scale(ad.add(probs[0], probs[1]), 0.5)
    return ForwardOutput(BrainEmbedding(cls_r, cls_c), logits_r, logits_c, fused)


def count_attention_macs(count: int, config: ModelConfig, mode: Literal["full", "cls_query"]) -> int:
    """MACs measured for one single-head attention over ``count`` content tokens."""
    if count < 1:
        raise ValueError("count must be >= 1")
    if mode not in ("full", "cls_query"):
        raise ValueError(f"unknown mode {mode!r}")
    rng = np.random.default_rng(0)
    d_k = config.d_k
    queries = count if mode == "full" else 1
    q = Tensor(rng.standard_normal((queries, d_k)))
    kv = Tensor(rng.standard_normal((count, d_k)))
    with ad.no_grad():
        before = ad.mac_count()
        attention(q, kv, kv)
        return ad.mac_count() - before


class CvFormer:
    """Config plus named parameters, with a seeded initialiser."""

    def __init__(self, config: ModelConfig, seed: int = 0, params: dict[str, Tensor] | None = None):
        self.config = config
        self.params = params if params is not None else init_params(config, np.random.default_rng(seed))

    def __call__(self, roi_features, adjacency) -> ForwardOutput:
        return forward(roi_features, adjacency, self.params, self.config)

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def state(self) -> dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self.params.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        missing = set(self.params) - set(state)
        if missing:
            raise KeyError(f"state is missing {sorted(missing)}")
        for name, t in self.params.items():
            if state[name].shape != t.shape:
                raise ValueError(f"{name}: shape {state[name].shape} != {t.shape}")
            t.data = np.array(state[name], dtype=t.dtype)
