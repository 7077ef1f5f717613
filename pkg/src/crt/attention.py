"""Multi-head self-attention over a segment with one prepended memory row.

Row 0 of the attended block is the memory vector. It is visible to every
token position but attends only to itself, so no token can see a later
token through a two-hop path via the memory row. Attention scores carry no
positional terms at all; position information reaches the scores only
through whatever encoding was already added to the input rows.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ContractError, DimensionError
from .tensor import MASK_SENTINEL, Tensor


@dataclass
class AttentionParams:
    w_q: list[Tensor]  # per head, [d_m x d_k]
    w_k: list[Tensor]
    w_v: list[Tensor]
    w_o: Tensor        # [d_m x d_m]
    heads: int

    @property
    def d_m(self) -> int:
        return self.w_o.shape[0]

    @property
    def d_k(self) -> int:
        return self.w_q[0].shape[1]


@dataclass
class LayerParams:
    attn: AttentionParams
    w1: Tensor  # [d_m x d_ff]
    b1: Tensor
    w2: Tensor  # [d_ff x d_m]
    b2: Tensor
    ln1_gain: Tensor
    ln1_bias: Tensor
    ln2_gain: Tensor
    ln2_bias: Tensor


def init_attention_params(rng: np.random.Generator, d_m: int, heads: int) -> AttentionParams:
    if d_m % heads != 0:
        raise ContractError(f"head count {heads} must divide width {d_m}")
    d_k = d_m // heads
    s = 1.0 / np.sqrt(d_m)
    mk = lambda rows, cols: Tensor(rng.uniform(-s, s, size=(rows, cols)))
    return AttentionParams(
        w_q=[mk(d_m, d_k) for _ in range(heads)],
        w_k=[mk(d_m, d_k) for _ in range(heads)],
        w_v=[mk(d_m, d_k) for _ in range(heads)],
        w_o=mk(d_m, d_m),
        heads=heads,
    )


def init_layer_params(rng: np.random.Generator, d_m: int, heads: int, d_ff: int) -> LayerParams:
    s_in = 1.0 / np.sqrt(d_m)
    s_ff = 1.0 / np.sqrt(d_ff)
    return LayerParams(
        attn=init_attention_params(rng, d_m, heads),
        w1=Tensor(rng.uniform(-s_in, s_in, size=(d_m, d_ff))),
        b1=Tensor(np.zeros(d_ff)),
        w2=Tensor(rng.uniform(-s_ff, s_ff, size=(d_ff, d_m))),
        b2=Tensor(np.zeros(d_m)),
        ln1_gain=Tensor(np.ones(d_m)),
        ln1_bias=Tensor(np.zeros(d_m)),
        ln2_gain=Tensor(np.ones(d_m)),
        ln2_bias=Tensor(np.zeros(d_m)),
    )


def causal_mask_with_memory(n: int) -> np.ndarray:
    """Additive mask over [memory, token_1..token_n] rows and columns.

    Row 0 (memory) may attend only to itself; token row i may attend to the
    memory and to tokens 1..i. Allowed entries are 0, the rest carry the
    large negative sentinel.
    """
    if n < 1:
        raise ContractError("segment length must be >= 1")
    mask = np.full((n + 1, n + 1), MASK_SENTINEL)
    mask[0, 0] = 0.0
    for i in range(1, n + 1):
        mask[i, 0] = 0.0
        mask[i, 1:i + 1] = 0.0
    return mask


def block_diag_mask(mask: np.ndarray, lanes: int) -> np.ndarray:
    """Tile a per-lane mask into a block-diagonal mask over stacked lanes."""
    if lanes == 1:
        return mask
    size = mask.shape[0]
    out = np.full((lanes * size, lanes * size), MASK_SENTINEL)
    for b in range(lanes):
        s = b * size
        out[s:s + size, s:s + size] = mask
    return out


def multi_head_attention(x: Tensor, p: AttentionParams, mask: np.ndarray) -> Tensor:
    """Scaled dot-product attention per head, concatenated and projected."""
    if x.data.ndim != 2 or x.shape[1] != p.d_m:
        raise DimensionError(f"attention input width {tuple(x.shape)} != {p.d_m}")
    if mask is not None and mask.shape != (x.shape[0], x.shape[0]):
        raise DimensionError(f"mask shape {mask.shape} does not fit {x.shape[0]} rows")
    inv_sqrt_dk = 1.0 / np.sqrt(p.d_k)
    heads = []
    for i in range(p.heads):
        q = T.matmul(x, p.w_q[i])
        k = T.matmul(x, p.w_k[i])
        v = T.matmul(x, p.w_v[i])
        scores = T.scale(T.matmul(q, T.transpose(k)), inv_sqrt_dk)
        weights = T.softmax_rows(scores, mask)
        heads.append(T.matmul(weights, v))
    merged = heads[0] if p.heads == 1 else T.cols_concat(heads)
    return T.matmul(merged, p.w_o)


def feed_forward(x: Tensor, p: LayerParams, activation: str = "gelu") -> Tensor:
    hidden = T.apply_unary(activation, T.add_bias(T.matmul(x, p.w1), p.b1))
    return T.add_bias(T.matmul(hidden, p.w2), p.b2)


def transformer_layer(x: Tensor, p: LayerParams, mask: np.ndarray, *,
                      activation: str = "gelu",
                      dropout: float = 0.0,
                      rng: np.random.Generator | None = None) -> Tensor:
    """Pre-norm residual block: x + MHA(LN(x)), then + FFN(LN(.)).

    The memory row is transformed like any other row. Dropout, when enabled,
    zeroes sublayer outputs before the residual add with inverted scaling.
    """
    attn_out = multi_head_attention(T.layer_norm(x, p.ln1_gain, p.ln1_bias), p.attn, mask)
    attn_out = _maybe_dropout(attn_out, dropout, rng)
    x = T.add(x, attn_out)
    ffn_out = feed_forward(T.layer_norm(x, p.ln2_gain, p.ln2_bias), p, activation)
    ffn_out = _maybe_dropout(ffn_out, dropout, rng)
    return T.add(x, ffn_out)


def _maybe_dropout(x: Tensor, rate: float, rng: np.random.Generator | None) -> Tensor:
    if rate <= 0.0 or rng is None:
        return x
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return T.hadamard(x, Tensor(keep))
