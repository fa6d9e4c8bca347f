"""The spatio-temporal detection transformer and its training step.

Three variants share one codebase:

- early:   per-step features are concatenated along the feature axis into
           per-location temporal traces of width T*d; encoder and decoder
           run at width T*d.  All width-T*d weights are built from one
           width-d set shared across time blocks (block-diagonal
           projections, tiled norms and heads), so the only things that
           can tell time apart are attention cross-terms, the temporal
           positional encoding, and the free query embeddings.  With T=1
           this collapses bitwise to the 1-step baseline.
- late:    per-step encoder/decoder stacks (weights shared across steps)
           produce T query sets; a final temporal decoder attends over
           the flattened T*Nq query traces with Nq fresh queries.
- seq2seq: late variant whose temporal decoder uses T*Nq queries and
           emits one detection set per step.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict

import numpy as np

from . import attention as A
from . import tensor as T
from .attention import (
    DecoderLayerParams,
    EncoderLayerParams,
    FfnParams,
    LayerNormParams,
    MhaParams,
)
from .setmatch import NUM_CLASSES, match, set_loss
from .synthdata import INPUT_CHANNELS, FrameSequence, render_input
from .tensor import Tensor


class ChannelMismatch(ValueError):
    pass


class MissingPerStepLabels(ValueError):
    pass


@dataclass
class ModelConfig:
    T: int = 2
    nq: int = 8
    d: int = 32
    heads: int = 4
    enc_layers: int = 2
    dec_layers: int = 2
    aggregation: str = "early"  # early | late
    seq2seq: bool = False
    tpe: bool = True
    input_mode: str = "rgb_of"  # rgb | rgb_rgb | rgb_of
    img_size: int = 64
    ffn_mult: int = 4

    @property
    def grid(self) -> int:
        # three stride-2 convs
        return self.img_size // 8

    @property
    def d_final(self) -> int:
        return self.T * self.d if self.aggregation == "early" else self.d

    def validate(self) -> None:
        if self.aggregation not in ("early", "late"):
            raise ValueError(f"unknown aggregation {self.aggregation!r}")
        if self.input_mode not in INPUT_CHANNELS:
            raise ValueError(f"unknown input mode {self.input_mode!r}")
        if self.d % self.heads != 0:
            raise ValueError("d must be divisible by heads")
        if self.d % 4 != 0:
            raise ValueError("d must be divisible by 4 for the spatial encoding")
        if self.T < 1:
            raise ValueError("T must be >= 1")
        if self.seq2seq and self.aggregation != "late":
            raise ValueError("seq2seq requires late aggregation")
        if self.img_size % 8 != 0:
            raise ValueError("image size must be divisible by 8")


@dataclass
class DetectionSet:
    boxes: Tensor  # (Nq, 4) cxcywh in (0, 1)
    class_logits: Tensor  # (Nq, C+1)


# -- parameter store -----------------------------------------------------------


class ParamStore:
    """Flat name -> Tensor registry; the unit of checkpointing/optimization."""

    def __init__(self, rng: np.random.Generator):
        self.rng = rng
        self.params: dict[str, Tensor] = {}

    def tensor(self, name: str, shape, init: str = "xavier") -> Tensor:
        if name in self.params:
            raise ValueError(f"duplicate parameter {name}")
        if init == "xavier":
            fan_in, fan_out = shape[-2], shape[-1]
            bound = math.sqrt(6.0 / (fan_in + fan_out))
            data = self.rng.uniform(-bound, bound, size=shape)
        elif init == "zeros":
            data = np.zeros(shape)
        elif init == "ones":
            data = np.ones(shape)
        elif init == "normal":
            data = self.rng.normal(0.0, 0.02, size=shape)
        elif init == "conv":
            fan_in = shape[1] * shape[2] * shape[3]
            bound = math.sqrt(6.0 / fan_in)
            data = self.rng.uniform(-bound, bound, size=shape)
        else:
            raise ValueError(init)
        t = Tensor(data, requires_grad=True)
        self.params[name] = t
        return t


def _make_mha(store: ParamStore, prefix: str, d: int, heads: int) -> MhaParams:
    dh = d // heads
    wq = [store.tensor(f"{prefix}.wq{h}", (d, dh)) for h in range(heads)]
    wk = [store.tensor(f"{prefix}.wk{h}", (d, dh)) for h in range(heads)]
    wv = [store.tensor(f"{prefix}.wv{h}", (d, dh)) for h in range(heads)]
    wo = store.tensor(f"{prefix}.wo", (heads * dh, d))
    return MhaParams(wq, wk, wv, wo, heads)


def _make_ffn(store: ParamStore, prefix: str, d: int, d_ff: int) -> FfnParams:
    return FfnParams(
        w1=store.tensor(f"{prefix}.w1", (d, d_ff)),
        b1=store.tensor(f"{prefix}.b1", (1, d_ff), init="zeros"),
        w2=store.tensor(f"{prefix}.w2", (d_ff, d)),
        b2=store.tensor(f"{prefix}.b2", (1, d), init="zeros"),
    )


def _make_ln(store: ParamStore, prefix: str, d: int) -> LayerNormParams:
    return LayerNormParams(
        gain=store.tensor(f"{prefix}.gain", (1, d), init="ones"),
        bias=store.tensor(f"{prefix}.bias", (1, d), init="zeros"),
    )


def _make_encoder_layer(store, prefix, d, heads, d_ff) -> EncoderLayerParams:
    return EncoderLayerParams(
        self_attn=_make_mha(store, f"{prefix}.self", d, heads),
        ffn=_make_ffn(store, f"{prefix}.ffn", d, d_ff),
        ln1=_make_ln(store, f"{prefix}.ln1", d),
        ln2=_make_ln(store, f"{prefix}.ln2", d),
    )


def _make_decoder_layer(store, prefix, d, heads, d_ff) -> DecoderLayerParams:
    return DecoderLayerParams(
        self_attn=_make_mha(store, f"{prefix}.self", d, heads),
        cross_attn=_make_mha(store, f"{prefix}.cross", d, heads),
        ffn=_make_ffn(store, f"{prefix}.ffn", d, d_ff),
        ln1=_make_ln(store, f"{prefix}.ln1", d),
        ln2=_make_ln(store, f"{prefix}.ln2", d),
        ln3=_make_ln(store, f"{prefix}.ln3", d),
    )


# -- temporal expansion of width-d weights to width-T*d -------------------------


def _expand_mha(p: MhaParams, t: int) -> MhaParams:
    if t == 1:
        return p
    # head outputs are concatenated per head, so wo has to be expanded one
    # head-row-block at a time to keep rows aligned with [h0_t0..h0_tT, h1_t0..]
    dh = p.wo.shape[0] // p.heads
    wo_blocks = [
        T.block_diag_expand(T.slice_axis(p.wo, 0, h * dh, (h + 1) * dh), t)
        for h in range(p.heads)
    ]
    return MhaParams(
        wq=[T.block_diag_expand(w, t) for w in p.wq],
        wk=[T.block_diag_expand(w, t) for w in p.wk],
        wv=[T.block_diag_expand(w, t) for w in p.wv],
        wo=T.concat(wo_blocks, axis=0),
        heads=p.heads,
    )


def _expand_ffn(p: FfnParams, t: int) -> FfnParams:
    if t == 1:
        return p
    return FfnParams(
        w1=T.block_diag_expand(p.w1, t),
        b1=T.tile(p.b1, (1, t)),
        w2=T.block_diag_expand(p.w2, t),
        b2=T.tile(p.b2, (1, t)),
    )


def _expand_ln(p: LayerNormParams, t: int) -> LayerNormParams:
    if t == 1:
        return p
    return LayerNormParams(gain=T.tile(p.gain, (1, t)), bias=T.tile(p.bias, (1, t)))


def _expand_encoder_layer(p: EncoderLayerParams, t: int) -> EncoderLayerParams:
    return EncoderLayerParams(
        self_attn=_expand_mha(p.self_attn, t),
        ffn=_expand_ffn(p.ffn, t),
        ln1=_expand_ln(p.ln1, t),
        ln2=_expand_ln(p.ln2, t),
    )


def _expand_decoder_layer(p: DecoderLayerParams, t: int) -> DecoderLayerParams:
    return DecoderLayerParams(
        self_attn=_expand_mha(p.self_attn, t),
        cross_attn=_expand_mha(p.cross_attn, t),
        ffn=_expand_ffn(p.ffn, t),
        ln1=_expand_ln(p.ln1, t),
        ln2=_expand_ln(p.ln2, t),
        ln3=_expand_ln(p.ln3, t),
    )


# -- the model -----------------------------------------------------------------


class STDETR:
    def __init__(self, config: ModelConfig, seed: int = 0):
        config.validate()
        self.config = config
        store = ParamStore(np.random.default_rng(np.random.SeedSequence([seed, 777])))
        c = config
        c_in = INPUT_CHANNELS[c.input_mode]
        d_ff = c.d * c.ffn_mult

        # backbone: three stride-2 3x3 convs, shared across time steps
        self.conv_w = [
            store.tensor("backbone.w0", (c.d, c_in, 3, 3), init="conv"),
            store.tensor("backbone.w1", (c.d, c.d, 3, 3), init="conv"),
            store.tensor("backbone.w2", (c.d, c.d, 3, 3), init="conv"),
        ]
        self.conv_b = [
            store.tensor(f"backbone.b{i}", (c.d,), init="zeros") for i in range(3)
        ]

        self.enc = [
            _make_encoder_layer(store, f"enc{i}", c.d, c.heads, d_ff)
            for i in range(c.enc_layers)
        ]
        self.dec = [
            _make_decoder_layer(store, f"dec{i}", c.d, c.heads, d_ff)
            for i in range(c.dec_layers)
        ]

        if c.aggregation == "early":
            self.query_embed = store.tensor(
                "queries.early", (c.nq, c.T * c.d), init="normal"
            )
        else:
            self.query_embed = store.tensor("queries.spatial", (c.nq, c.d), init="normal")
            n_temporal = c.T * c.nq if c.seq2seq else c.nq
            self.temporal_query_embed = store.tensor(
                "queries.temporal", (n_temporal, c.d), init="normal"
            )
            self.temporal_dec = [
                _make_decoder_layer(store, f"tdec{i}", c.d, c.heads, d_ff)
                for i in range(c.dec_layers)
            ]

        # heads operate on width d; the early variant applies them
        # tiled over the T feature blocks (summing block contributions)
        self.cls_w = store.tensor("head.cls.w", (c.d, NUM_CLASSES))
        self.cls_b = store.tensor("head.cls.b", (1, NUM_CLASSES), init="zeros")
        self.box_w = [
            store.tensor("head.box.w0", (c.d, c.d)),
            store.tensor("head.box.w1", (c.d, c.d)),
            store.tensor("head.box.w2", (c.d, 4)),
        ]
        self.box_b = [
            store.tensor("head.box.b0", (1, c.d), init="zeros"),
            store.tensor("head.box.b1", (1, c.d), init="zeros"),
            store.tensor("head.box.b2", (1, 4), init="zeros"),
        ]

        self.params = store.params
        g = c.grid
        self.spe = A.spatial_positional_encoding(g, g, c.d)
        self.tpe = A.temporal_positional_encoding(c.T, c.d)
        self.last_cross_attention = None

    # -- pieces ------------------------------------------------------------

    def extract_spatial_features(self, frame: Tensor) -> Tensor:
        """(C, H_img, W_img) -> (HW, d) via three stride-2 convs + relu."""
        c_in = INPUT_CHANNELS[self.config.input_mode]
        if frame.shape[0] != c_in:
            raise ChannelMismatch(
                f"expected {c_in} channels for {self.config.input_mode}, got {frame.shape[0]}"
            )
        x = frame
        for w, b in zip(self.conv_w, self.conv_b):
            x = T.relu(T.conv2d(x, w, b, stride=2, pad=1))
        d, gh, gw = x.shape
        # (d, gh, gw) -> (gh*gw, d), row-major over the grid
        return T.transpose(T.reshape(x, (d, gh * gw)))

    def early_aggregate(self, features: list) -> Tensor:
        """Concat T per-step (HW, d) maps along features, TPE added first."""
        c = self.config
        hw = features[0].shape[0]
        blocks = []
        for t, f in enumerate(features):
            if f.shape != features[0].shape:
                raise T.ShapeMismatch("feature maps disagree in shape")
            if c.tpe:
                f = T.add(f, Tensor(np.tile(self.tpe[t : t + 1], (hw, 1))))
            blocks.append(f)
        return T.concat(blocks, axis=1)

    def prediction_heads(self, decoded: Tensor) -> DetectionSet:
        """Class linear head + 3-layer box MLP with logistic squashing."""
        c = self.config
        t_blocks = decoded.shape[1] // c.d
        n = decoded.shape[0]

        def tiledmat(w):
            return T.tile(w, (t_blocks, 1)) if t_blocks > 1 else w

        logits = T.add(
            T.matmul(decoded, tiledmat(self.cls_w)), T.tile(self.cls_b, (n, 1))
        )
        h = decoded
        for i, (w, b) in enumerate(zip(self.box_w, self.box_b)):
            if i == 0:
                h = T.matmul(h, tiledmat(w))
            else:
                h = T.matmul(h, w)
            h = T.add(h, T.tile(b, (n, 1)))
            if i < 2:
                h = T.relu(h)
        return DetectionSet(boxes=T.sigmoid(h), class_logits=logits)

    def _step_inputs(self, seq: FrameSequence) -> list:
        c = self.config
        if seq.T < c.T:
            raise ValueError(f"sequence has {seq.T} steps, model expects {c.T}")
        inputs = []
        for t in range(c.T):
            x = render_input(seq, c.input_mode, t)
            # fixed input normalization: center pixel channels, and undo the
            # file format's 1/img_size flow scaling so flow is in pixel units
            x = x.copy()
            if c.input_mode == "rgb_of":
                x[:3] -= 0.5
                x[3:] *= float(c.img_size)
            else:
                x -= 0.5
            inputs.append(Tensor(x))
        return inputs

    # -- forward variants ----------------------------------------------------

    def forward_early(self, seq: FrameSequence):
        c = self.config
        feats = [self.extract_spatial_features(x) for x in self._step_inputs(seq)]
        agg = self.early_aggregate(feats)  # (HW, T*d)

        spe = Tensor(np.tile(self.spe, (1, c.T)))  # block-symmetric width T*d
        x = agg
        for layer in self.enc:
            x = A.encoder_layer(_expand_encoder_layer(layer, c.T), x, spe)
        memory = x  # E: (HW, T*d)

        tgt = Tensor(np.zeros((c.nq, c.T * c.d)))
        cross = None
        for layer in self.dec:
            tgt, cross = A.decoder_layer(
                _expand_decoder_layer(layer, c.T), tgt, memory, self.query_embed, spe
            )
        self.last_cross_attention = cross
        return self.prediction_heads(tgt), {"E": memory, "D": tgt}

    def _late_query_traces(self, seq: FrameSequence) -> Tensor:
        """Shared per-step encoder/decoder stacks -> (T*Nq, d) query traces."""
        c = self.config
        spe = Tensor(self.spe)
        traces = []
        for t, x_in in enumerate(self._step_inputs(seq)):
            x = self.extract_spatial_features(x_in)
            for layer in self.enc:
                x = A.encoder_layer(layer, x, spe)
            tgt = Tensor(np.zeros((c.nq, c.d)))
            for layer in self.dec:
                tgt, _ = A.decoder_layer(layer, tgt, x, self.query_embed, spe)
            if c.tpe:
                tgt = T.add(tgt, Tensor(np.tile(self.tpe[t : t + 1], (c.nq, 1))))
            traces.append(tgt)
        return T.concat(traces, axis=0)

    def _temporal_decode(self, traces: Tensor):
        queries = self.temporal_query_embed
        tgt = Tensor(np.zeros(queries.shape))
        cross = None
        for layer in self.temporal_dec:
            tgt, cross = A.decoder_layer(layer, tgt, traces, queries, None)
        self.last_cross_attention = cross
        return tgt, cross

    def forward_late(self, seq: FrameSequence):
        traces = self._late_query_traces(seq)
        tgt, cross = self._temporal_decode(traces)
        return self.prediction_heads(tgt), {"traces": traces, "W": cross}

    def forward_seq2seq(self, seq: FrameSequence):
        c = self.config
        if len(seq.gt_per_step) < c.T:
            raise MissingPerStepLabels("seq2seq needs labels for every step")
        traces = self._late_query_traces(seq)
        tgt, cross = self._temporal_decode(traces)  # (T*Nq, d)
        det = self.prediction_heads(tgt)
        per_step = [
            DetectionSet(
                boxes=T.slice_axis(det.boxes, 0, t * c.nq, (t + 1) * c.nq),
                class_logits=T.slice_axis(det.class_logits, 0, t * c.nq, (t + 1) * c.nq),
            )
            for t in range(c.T)
        ]
        return per_step, {"traces": traces, "W": cross}

    def forward(self, seq: FrameSequence):
        c = self.config
        if c.seq2seq:
            return self.forward_seq2seq(seq)
        if c.aggregation == "early":
            return self.forward_early(seq)
        return self.forward_late(seq)

    # -- loss ----------------------------------------------------------------

    def loss(self, seq: FrameSequence):
        """Match + set loss; supervision on the last step (all steps for
        seq2seq).  Returns (scalar Tensor, breakdown dict)."""
        c = self.config
        out, _ = self.forward(seq)
        if c.seq2seq:
            totals = []
            breakdown = {"class": 0.0, "l1": 0.0, "giou": 0.0, "total": 0.0}
            for t, det in enumerate(out):
                gts = seq.gt_per_step[t]
                assignment = match(det.class_logits, det.boxes, gts)
                lt, terms = set_loss(det.class_logits, det.boxes, gts, assignment)
                totals.append(lt)
                for k in breakdown:
                    breakdown[k] += terms[k] / c.T
            total = totals[0]
            for lt in totals[1:]:
                total = T.add(total, lt)
            return T.scale(total, 1.0 / c.T), breakdown
        gts = seq.gt_per_step[c.T - 1]
        det = out
        assignment = match(det.class_logits, det.boxes, gts)
        return set_loss(det.class_logits, det.boxes, gts, assignment)


# -- optimizer -------------------------------------------------------------------


class Adam:
    """Moment-based update over a ParamStore dict."""

    def __init__(self, params: dict, lr: float = 1e-4, betas=(0.9, 0.999), eps=1e-8):
        self.params = params
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(v.data) for k, v in params.items()}
        self.v = {k: np.zeros_like(v.data) for k, v in params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self) -> None:
        self.t += 1
        bc1 = 1.0 - self.b1**self.t
        bc2 = 1.0 - self.b2**self.t
        for k, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            self.m[k] = self.b1 * self.m[k] + (1.0 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1.0 - self.b2) * g * g
            p.data -= self.lr * (self.m[k] / bc1) / (np.sqrt(self.v[k] / bc2) + self.eps)


# -- inference helpers -------------------------------------------------------------


def detections_for_eval(det: DetectionSet):
    """Confident predictions as (score, Box) pairs.

    A slot is kept when its "moving" probability beats the no-object
    probability; the score is that probability.
    """
    from .setmatch import Box, _softmax_np

    probs = _softmax_np(det.class_logits.numpy())
    boxes = det.boxes.numpy()
    out = []
    for j in range(probs.shape[0]):
        if probs[j, 0] > probs[j, -1]:
            out.append((float(probs[j, 0]), Box(*boxes[j])))
    return out
