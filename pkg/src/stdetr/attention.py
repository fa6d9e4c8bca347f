"""Multi-head attention, transformer layers, and positional encodings.

Layers follow the DETR convention: positional encodings are added to the
queries and keys only (never the values), layer norm comes after each
residual, and attention scores are scaled by 1/sqrt(d_head).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import ShapeMismatch, Tensor


class DimNotDivisible(ValueError):
    pass


# -- positional encodings ----------------------------------------------------


def temporal_positional_encoding(t_steps: int, d: int) -> np.ndarray:
    """1-D sinusoid table over time, shape (t_steps, d).

    Column 2i is sin(t / 10000^(2i/d)), column 2i+1 the matching cosine.
    """
    if d % 2 != 0:
        raise DimNotDivisible(f"temporal encoding needs even d, got {d}")
    if t_steps < 1:
        raise ValueError("t_steps must be >= 1")
    pos = np.arange(t_steps, dtype=np.float64)[:, None]
    i = np.arange(d // 2, dtype=np.float64)[None, :]
    angle = pos / np.power(10000.0, 2.0 * i / d)
    out = np.zeros((t_steps, d), dtype=np.float64)
    out[:, 0::2] = np.sin(angle)
    out[:, 1::2] = np.cos(angle)
    return out


def spatial_positional_encoding(h: int, w: int, d: int) -> np.ndarray:
    """Fixed 2-D sinusoid table, shape (h*w, d), rows in row-major grid order.

    First d/2 columns encode the x coordinate, last d/2 the y coordinate,
    each as interleaved sine/cosine pairs at geometric frequencies.
    """
    if d % 4 != 0:
        raise DimNotDivisible(f"spatial encoding needs d divisible by 4, got {d}")
    half = d // 2
    xs = np.tile(np.arange(w, dtype=np.float64), h)
    ys = np.repeat(np.arange(h, dtype=np.float64), w)
    out = np.empty((h * w, d), dtype=np.float64)
    out[:, :half] = temporal_positional_encoding_like(xs, half)
    out[:, half:] = temporal_positional_encoding_like(ys, half)
    return out


def temporal_positional_encoding_like(pos: np.ndarray, d: int) -> np.ndarray:
    # shared sinusoid kernel for arbitrary position vectors
    i = np.arange(d // 2, dtype=np.float64)[None, :]
    angle = pos[:, None] / np.power(10000.0, 2.0 * i / d)
    out = np.zeros((pos.size, d), dtype=np.float64)
    out[:, 0::2] = np.sin(angle)
    out[:, 1::2] = np.cos(angle)
    return out


# -- attention ---------------------------------------------------------------


def attention_core(q: Tensor, k: Tensor, v: Tensor):
    """Scaled dot-product attention without projections.

    Returns (out, weights); weights is the row-stochastic softmax map,
    kept around for visualization dumps.
    """
    if q.shape[1] != k.shape[1]:
        raise ShapeMismatch(f"attention_core: q cols {q.shape[1]} != k cols {k.shape[1]}")
    if k.shape[0] != v.shape[0]:
        raise ShapeMismatch(f"attention_core: k rows {k.shape[0]} != v rows {v.shape[0]}")
    d = q.shape[1]
    scores = T.scale(T.matmul(q, T.transpose(k)), 1.0 / math.sqrt(d))
    w = T.softmax_rows(scores)
    return T.matmul(w, v), w


@dataclass
class MhaParams:
    """Per-head Q/K/V projections plus the output projection."""

    wq: list  # h tensors, each (d_model, d_head)
    wk: list
    wv: list
    wo: Tensor  # (h*d_head, d_model)
    heads: int

    @property
    def d_model(self) -> int:
        return self.wq[0].shape[0]


def multi_head_attention(params: MhaParams, q_in: Tensor, k_in: Tensor, v_in=None):
    """Project, attend per head, concat and apply the output projection.

    ``v_in`` defaults to ``k_in``; they differ when positional encodings
    were added to the keys but not the values.  Returns (out, attn) where
    attn is the head-averaged attention map.
    """
    if v_in is None:
        v_in = k_in
    if q_in.shape[1] != params.d_model:
        raise ShapeMismatch(
            f"mha: input width {q_in.shape[1]} != d_model {params.d_model}"
        )
    head_outs = []
    attn_acc = None
    for h in range(params.heads):
        q = T.matmul(q_in, params.wq[h])
        k = T.matmul(k_in, params.wk[h])
        v = T.matmul(v_in, params.wv[h])
        out, w = attention_core(q, k, v)
        head_outs.append(out)
        attn_acc = w if attn_acc is None else T.add(attn_acc, w)
    out = T.matmul(T.concat(head_outs, axis=1), params.wo)
    return out, T.scale(attn_acc, 1.0 / params.heads)


# -- transformer layers -------------------------------------------------------


@dataclass
class FfnParams:
    w1: Tensor  # (d_model, d_ff)
    b1: Tensor  # (1, d_ff)
    w2: Tensor  # (d_ff, d_model)
    b2: Tensor  # (1, d_model)


@dataclass
class LayerNormParams:
    gain: Tensor  # (1, d)
    bias: Tensor  # (1, d)


@dataclass
class EncoderLayerParams:
    self_attn: MhaParams
    ffn: FfnParams
    ln1: LayerNormParams
    ln2: LayerNormParams


@dataclass
class DecoderLayerParams:
    self_attn: MhaParams
    cross_attn: MhaParams
    ffn: FfnParams
    ln1: LayerNormParams
    ln2: LayerNormParams
    ln3: LayerNormParams


def _add_pos(x: Tensor, pos) -> Tensor:
    if pos is None:
        return x
    if isinstance(pos, np.ndarray):
        pos = Tensor(pos)
    return T.add(x, pos)


def _ffn(p: FfnParams, x: Tensor) -> Tensor:
    n = x.shape[0]
    h = T.relu(T.add(T.matmul(x, p.w1), T.tile(p.b1, (n, 1))))
    return T.add(T.matmul(h, p.w2), T.tile(p.b2, (n, 1)))


def _ln(p: LayerNormParams, x: Tensor) -> Tensor:
    return T.layer_norm(x, p.gain, p.bias)


def encoder_layer(params: EncoderLayerParams, x: Tensor, pos=None) -> Tensor:
    """Post-norm encoder layer; pos added to queries and keys only."""
    qk = _add_pos(x, pos)
    attn_out, _ = multi_head_attention(params.self_attn, qk, qk, x)
    x = _ln(params.ln1, T.add(x, attn_out))
    x = _ln(params.ln2, T.add(x, _ffn(params.ffn, x)))
    return x


def decoder_layer(
    params: DecoderLayerParams,
    queries: Tensor,
    memory: Tensor,
    qpos=None,
    mpos=None,
):
    """Post-norm decoder layer; returns (refined queries, cross-attn map)."""
    qk = _add_pos(queries, qpos)
    self_out, _ = multi_head_attention(params.self_attn, qk, qk, queries)
    x = _ln(params.ln1, T.add(queries, self_out))
    cross_out, cross_map = multi_head_attention(
        params.cross_attn, _add_pos(x, qpos), _add_pos(memory, mpos), memory
    )
    x = _ln(params.ln2, T.add(x, cross_out))
    x = _ln(params.ln3, T.add(x, _ffn(params.ffn, x)))
    return x, cross_map
