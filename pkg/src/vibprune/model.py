"""Gated transformer encoder.

One global width gate masks the residual stream wherever it is read or
written: the embedding output, each sub-layer's post-norm input, each
sub-layer's output, and the final pre-classifier norm. Per-layer gates
mask attention heads (one scalar per head, broadcast over that head's
output dims), FFN intermediate units, FFN output dims, and whole
sub-layers. This placement makes a dropped unit's weights provably
irrelevant, which is what lets extraction delete them.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from .errors import ContractError, DataError
from .gates import GateInit, Site, VibGate, eval_mask, new_gate, sample_mask
from .tensor import (
    Tensor,
    add,
    causal_mask_fill,
    concat_lastdim,
    constant,
    gather_rows,
    gelu,
    layer_norm_lastdim,
    matmul,
    mul,
    parameter,
    scale,
    slice_lastdim,
    softmax_lastdim,
    transpose_last2,
)

WEIGHT_INIT_STD = 0.02


@dataclass
class ModelConfig:
    vocab_size: int
    max_seq: int
    width: int
    layers: int
    heads: int
    ffn_dim: int
    num_classes: int
    causal: bool = False
    dropout: float = 0.0

    def __post_init__(self):
        dims = (self.vocab_size, self.max_seq, self.width, self.layers,
                self.heads, self.ffn_dim, self.num_classes)
        if any(int(v) < 1 for v in dims):
            raise ContractError(f"ModelConfig: all dims must be >= 1, got {self}")
        if self.width % self.heads != 0:
            raise ContractError(
                f"ModelConfig: width {self.width} not divisible by heads {self.heads}"
            )
        if not (0.0 <= self.dropout < 1.0):
            raise ContractError("ModelConfig: dropout must be in [0, 1)")

    @property
    def head_dim(self) -> int:
        return self.width // self.heads


@dataclass
class ForwardTrace:
    logits_t: Tensor                    # (batch, 1, classes), in the graph
    hidden_states: list                 # per layer, (batch, seq, width) tensors
    attention_probs: list               # per layer, (batch, heads, seq, seq) arrays
    embedding_output: Tensor            # (batch, seq, width)

    @property
    def logits(self) -> np.ndarray:
        b = self.logits_t.shape[0]
        return self.logits_t.data.reshape(b, -1)


class GateSet:
    """All gates of one student model, in checkpoint order."""

    def __init__(self, config: ModelConfig, init: GateInit, betas: dict):
        c = config
        seq = 0

        def mk(units, site):
            nonlocal seq
            g = new_gate(units, site, betas[site], replace(init, seed=init.seed + seq))
            seq += 1
            return g

        self.width = mk(c.width, Site.EMBEDDING_WIDTH)
        self.heads = [mk(c.heads, Site.HEADS) for _ in range(c.layers)]
        self.inter = [mk(c.ffn_dim, Site.FFN_INTERMEDIATE) for _ in range(c.layers)]
        self.out = [mk(c.width, Site.FFN_OUTPUT) for _ in range(c.layers)]
        self.layer_mha = [mk(1, Site.LAYER_MHA) for _ in range(c.layers)]
        self.layer_ffn = [mk(1, Site.LAYER_FFN) for _ in range(c.layers)]

    def named(self):
        yield "gate.embedding_width.0", self.width
        for i, g in enumerate(self.heads):
            yield f"gate.heads.{i}", g
        for i, g in enumerate(self.inter):
            yield f"gate.ffn_intermediate.{i}", g
        for i, g in enumerate(self.out):
            yield f"gate.ffn_output.{i}", g
        for i, g in enumerate(self.layer_mha):
            yield f"gate.layer_mha.{i}", g
        for i, g in enumerate(self.layer_ffn):
            yield f"gate.layer_ffn.{i}", g

    def all(self):
        return [g for _, g in self.named()]


def default_betas(config: ModelConfig, beta_global: float = 1e-3) -> dict:
    """Spread the information-cost weight evenly per unit within each group."""
    return {
        Site.EMBEDDING_WIDTH: beta_global / config.width,
        Site.HEADS: beta_global / config.heads,
        Site.FFN_INTERMEDIATE: beta_global / config.ffn_dim,
        Site.FFN_OUTPUT: beta_global / config.width,
        Site.LAYER_MHA: beta_global,
        Site.LAYER_FFN: beta_global,
    }


class GatedTransformer:
    def __init__(self, config: ModelConfig):
        self.config = config
        self.params: dict[str, Tensor] = {}
        self.gates: Optional[GateSet] = None
        self.binarized = False

    # -- construction ------------------------------------------------------

    @staticmethod
    def param_shapes(config: ModelConfig) -> dict:
        c = config
        shapes = {
            "emb.tok": (c.vocab_size, c.width),
            "emb.pos": (c.max_seq, c.width),
            "cls.weight": (c.width, c.num_classes),
            "cls.bias": (c.num_classes,),
        }
        for i in range(c.layers):
            p = f"layer.{i}."
            shapes[p + "ln1.weight"] = (c.width,)
            shapes[p + "ln1.bias"] = (c.width,)
            for w in ("wq", "wk", "wv", "wo"):
                shapes[p + w + ".weight"] = (c.width, c.width)
                shapes[p + w + ".bias"] = (c.width,)
            shapes[p + "ln2.weight"] = (c.width,)
            shapes[p + "ln2.bias"] = (c.width,)
            shapes[p + "wu.weight"] = (c.width, c.ffn_dim)
            shapes[p + "wu.bias"] = (c.ffn_dim,)
            shapes[p + "wd.weight"] = (c.ffn_dim, c.width)
            shapes[p + "wd.bias"] = (c.width,)
        return shapes

    def named_params(self):
        for name in sorted(self.params):
            yield name, self.params[name]
        if self.gates is not None:
            for gname, g in self.gates.named():
                yield gname + ".mu", g.mu
                yield gname + ".log_sigma", g.log_sigma

    def clone_weights(self) -> dict:
        return {k: v.data.copy() for k, v in self.params.items()}


def build_teacher(config: ModelConfig, seed: int) -> GatedTransformer:
    """Ungated model with scaled-normal (std 0.02) weight init."""
    m = GatedTransformer(config)
    rng = np.random.default_rng(seed)
    for name, shape in GatedTransformer.param_shapes(config).items():
        if name.endswith(".bias"):
            init = np.zeros(shape)
        elif ".ln1." in name or ".ln2." in name:
            init = np.ones(shape)
        else:
            init = rng.normal(0.0, WEIGHT_INIT_STD, size=shape)
        m.params[name] = parameter(init.astype(np.float32))
    return m


def build_student(teacher: GatedTransformer, gate_init: GateInit,
                  betas: dict) -> GatedTransformer:
    """Deep copy of the teacher with fresh gates at every placement site."""
    m = GatedTransformer(teacher.config)
    for name, p in teacher.params.items():
        m.params[name] = parameter(p.data.copy())
    m.gates = GateSet(teacher.config, gate_init, betas)
    return m


# ---------------------------------------------------------------------------
# forward


class _MaskPack:
    """Per-step gate masks in the form the forward pass consumes."""

    def __init__(self, model: GatedTransformer, mode: str, rng, tau: float):
        c = model.config
        g = model.gates
        self.identity = g is None
        if self.identity:
            return
        self.train = mode == "train" and not model.binarized
        if self.train and rng is None:
            raise ContractError("forward: train mode needs an rng for gate noise")
        self._rng = rng
        self._tau = tau
        self._g = g
        self._c = c

    def build(self, batch: int, seqlen: int):
        if self.identity:
            return
        c, g = self._c, self._g
        dh = c.head_dim
        if self.train:
            def draw(gate, per_sample=False):
                if per_sample:
                    e = self._rng.standard_normal((batch, 1, gate.unit_count))
                    e = np.repeat(e, seqlen, axis=1)
                else:
                    e = self._rng.standard_normal((batch, seqlen, gate.unit_count))
                return sample_mask(gate, e.astype(np.float32), "stochastic")

            head_expand = np.zeros((c.heads, c.width), dtype=np.float32)
            for h in range(c.heads):
                head_expand[h, h * dh:(h + 1) * dh] = 1.0
            he = constant(head_expand)
            one_row = constant(np.ones((1, c.width), dtype=np.float32))
            self.width = draw(g.width)
            self.heads = [matmul(draw(gh), he) for gh in g.heads]
            self.inter = [draw(gi) for gi in g.inter]
            self.out = [draw(go) for go in g.out]
            self.lmha = [matmul(draw(gl, True), one_row) for gl in g.layer_mha]
            self.lffn = [matmul(draw(gl, True), one_row) for gl in g.layer_ffn]
        else:
            def vec(gate):
                return constant(eval_mask(gate, self._tau))

            self.width = vec(g.width)
            self.heads = [constant(np.repeat(eval_mask(gh, self._tau), dh))
                          for gh in g.heads]
            self.inter = [vec(gi) for gi in g.inter]
            self.out = [vec(go) for go in g.out]
            self.lmha = [vec(gl) for gl in g.layer_mha]
            self.lffn = [vec(gl) for gl in g.layer_ffn]

    def apply_width(self, x):
        return x if self.identity else mul(x, self.width)

    def apply_heads(self, x, i):
        return x if self.identity else mul(x, self.heads[i])

    def apply_inter(self, x, i):
        return x if self.identity else mul(x, self.inter[i])

    def apply_out(self, x, i):
        return x if self.identity else mul(x, self.out[i])

    def apply_lmha(self, x, i):
        return x if self.identity else mul(x, self.lmha[i])

    def apply_lffn(self, x, i):
        return x if self.identity else mul(x, self.lffn[i])


def forward(model: GatedTransformer, tokens: np.ndarray, mode: str = "eval",
            rng=None, tau: float = 0.0) -> ForwardTrace:
    """Run the model; gates are stochastic in train mode, mean*hard in eval."""
    c = model.config
    tokens = np.asarray(tokens)
    if tokens.ndim != 2:
        raise DataError(f"forward: tokens must be (batch, seq), got {tokens.shape}")
    batch, seqlen = tokens.shape
    if seqlen > c.max_seq:
        raise DataError(f"forward: seq {seqlen} exceeds max {c.max_seq}")
    if tokens.min() < 0 or tokens.max() >= c.vocab_size:
        raise DataError("forward: token id out of vocabulary range")
    if mode not in ("train", "eval"):
        raise ContractError(f"forward: unknown mode '{mode}'")

    masks = _MaskPack(model, mode, rng, tau)
    masks.build(batch, seqlen)
    p = model.params
    dh = c.head_dim

    pos = np.broadcast_to(np.arange(seqlen), (batch, seqlen))
    x = add(gather_rows(p["emb.tok"], tokens), gather_rows(p["emb.pos"], pos))
    x = masks.apply_width(x)
    embedding_output = x

    hidden_states = []
    attention_probs = []
    for i in range(c.layers):
        pre = f"layer.{i}."
        # attention sub-layer
        xn = layer_norm_lastdim(x)
        xn = add(mul(xn, p[pre + "ln1.weight"]), p[pre + "ln1.bias"])
        xr = masks.apply_width(xn)
        q = add(matmul(xr, p[pre + "wq.weight"]), p[pre + "wq.bias"])
        k = add(matmul(xr, p[pre + "wk.weight"]), p[pre + "wk.bias"])
        v = add(matmul(xr, p[pre + "wv.weight"]), p[pre + "wv.bias"])
        heads_out = []
        probs_np = []
        for h in range(c.heads):
            qh = slice_lastdim(q, h * dh, (h + 1) * dh)
            kh = slice_lastdim(k, h * dh, (h + 1) * dh)
            vh = slice_lastdim(v, h * dh, (h + 1) * dh)
            scores = scale(matmul(qh, transpose_last2(kh)), 1.0 / np.sqrt(dh))
            if c.causal:
                scores = causal_mask_fill(scores)
            probs = softmax_lastdim(scores)
            probs_np.append(probs.data)
            heads_out.append(matmul(probs, vh))
        attention_probs.append(np.stack(probs_np, axis=1))
        a = masks.apply_heads(concat_lastdim(heads_out), i)
        mha = add(matmul(a, p[pre + "wo.weight"]), p[pre + "wo.bias"])
        mha = masks.apply_width(masks.apply_lmha(mha, i))
        x = add(x, mha)

        # feed-forward sub-layer
        xn2 = layer_norm_lastdim(x)
        xn2 = add(mul(xn2, p[pre + "ln2.weight"]), p[pre + "ln2.bias"])
        xr2 = masks.apply_width(xn2)
        mid = gelu(add(matmul(xr2, p[pre + "wu.weight"]), p[pre + "wu.bias"]))
        mid = masks.apply_inter(mid, i)
        ffn = add(matmul(mid, p[pre + "wd.weight"]), p[pre + "wd.bias"])
        ffn = masks.apply_width(masks.apply_lffn(masks.apply_out(ffn, i), i))
        x = add(x, ffn)
        hidden_states.append(x)

    # parameter-free final norm, masked read, single-position pooling
    xf = masks.apply_width(layer_norm_lastdim(x))
    sel = np.zeros((seqlen, 1), dtype=np.float32)
    sel[seqlen - 1 if c.causal else 0, 0] = 1.0
    pooled = transpose_last2(matmul(transpose_last2(xf), constant(sel)))  # (B,1,d)
    logits = add(matmul(pooled, p["cls.weight"]), p["cls.bias"])          # (B,1,C)

    return ForwardTrace(logits, hidden_states, attention_probs, embedding_output)


def count_gated_units(model: GatedTransformer) -> tuple[int, int]:
    """(number of gates, total gated units) for a student model."""
    if model.gates is None:
        return 0, 0
    gs = model.gates.all()
    return len(gs), sum(g.unit_count for g in gs)
