"""Transformer building blocks: attention, feed-forward, top-1-gated MoE.

Layers are pure functions reading their weights from a name->Tensor
mapping under a prefix; this keeps parameter sharing between submodels a
matter of which names two layer plans point at.  Pre-layer-norm residual
blocks throughout, with a final layer norm per stack.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DimensionError
from .tensor import (Tensor, argmax, broadcast_to, dropout, embedding,
                     gather_last, layer_norm, masked_fill, matmul, mul,
                     put_rows, relu, reshape, softmax, take_rows, transpose,
                     tsum)


@dataclass(frozen=True)
class TransformerLayerConfig:
    d: int
    heads: int
    ffn: int
    dropout: float = 0.0

    def __post_init__(self):
        if self.d <= 0 or self.heads <= 0 or self.ffn <= 0:
            raise ConfigError("layer sizes must be positive")
        if self.d % self.heads:
            raise ConfigError(f"hidden size {self.d} not divisible by {self.heads} heads")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must lie in [0, 1)")


@dataclass(frozen=True)
class MoELayerConfig:
    experts: int
    expert_ffn: int
    balance_coeff: float = 0.01

    def __post_init__(self):
        if self.experts < 1:
            raise ConfigError("a MoE layer needs at least one expert")
        if self.expert_ffn <= 0:
            raise ConfigError("expert ffn size must be positive")
        if self.balance_coeff < 0:
            raise ConfigError("balancing coefficient must be non-negative")


@dataclass
class RoutingReport:
    """Per-expert load statistics over the non-padding tokens of one batch."""

    fractions: np.ndarray   # share of tokens routed to each expert, sums to 1
    mean_probs: np.ndarray  # mean router probability per expert


@dataclass(frozen=True)
class Slot:
    kind: str    # "std" | "moe"
    prefix: str  # parameter namespace of this layer


@dataclass(frozen=True)
class LayerPlan:
    """Ordered layer slots of one submodel path plus its stack-level names."""

    emb: str
    enc: tuple
    dec: tuple
    enc_ln: str
    dec_ln: str
    heads: int
    dropout: float = 0.0

    def prefixes(self):
        ps = [self.emb, self.enc_ln, self.dec_ln]
        ps += [s.prefix for s in self.enc] + [s.prefix for s in self.dec]
        return ps


def plan_param_names(plan: LayerPlan, names) -> list[str]:
    """All parameter names reachable from a plan, in the store's order."""
    prefixes = plan.prefixes()
    out = []
    for n in names:
        for p in prefixes:
            if n == p or n.startswith(p + "."):
                out.append(n)
                break
    return out


# ---------------------------------------------------------------------------
# initialization shape tables (single source of truth for init and counting)

GLOROT, ZEROS, ONES, EMBED = "glorot", "zeros", "ones", "embed"


def linear_shapes(prefix, n_in, n_out):
    return [(f"{prefix}.w", (n_in, n_out), GLOROT), (f"{prefix}.b", (n_out,), ZEROS)]


def ln_shapes(prefix, d):
    return [(f"{prefix}.g", (d,), ONES), (f"{prefix}.b", (d,), ZEROS)]


def attention_shapes(prefix, d):
    shapes = []
    for name in ("wq", "wk", "wv", "wo"):
        shapes += linear_shapes(f"{prefix}.{name}", d, d)
    return shapes


def ffn_shapes(prefix, d, ffn):
    return linear_shapes(f"{prefix}.w1", d, ffn) + linear_shapes(f"{prefix}.w2", ffn, d)


def std_layer_shapes(prefix, cfg: TransformerLayerConfig, decoder: bool):
    shapes = ln_shapes(f"{prefix}.ln1", cfg.d) + attention_shapes(f"{prefix}.attn", cfg.d)
    if decoder:
        shapes += ln_shapes(f"{prefix}.lnx", cfg.d) + attention_shapes(f"{prefix}.xattn", cfg.d)
    shapes += ln_shapes(f"{prefix}.ln2", cfg.d) + ffn_shapes(f"{prefix}.ffn", cfg.d, cfg.ffn)
    return shapes


def moe_layer_shapes(prefix, cfg: TransformerLayerConfig, moe: MoELayerConfig, decoder: bool):
    shapes = ln_shapes(f"{prefix}.ln1", cfg.d) + attention_shapes(f"{prefix}.attn", cfg.d)
    if decoder:
        shapes += ln_shapes(f"{prefix}.lnx", cfg.d) + attention_shapes(f"{prefix}.xattn", cfg.d)
    shapes += ln_shapes(f"{prefix}.ln2", cfg.d)
    shapes += linear_shapes(f"{prefix}.router", cfg.d, moe.experts)
    for e in range(moe.experts):
        shapes += ffn_shapes(f"{prefix}.expert{e}", cfg.d, moe.expert_ffn)
    return shapes


def embedding_shapes(name, vocab, d):
    return [(name, (vocab, d), EMBED)]


def init_array(kind, shape, rng: np.random.Generator, dtype):
    if kind == ZEROS:
        return np.zeros(shape, dtype=dtype)
    if kind == ONES:
        return np.ones(shape, dtype=dtype)
    if kind == GLOROT:
        fan_in, fan_out = shape[0], shape[-1]
        a = np.sqrt(6.0 / (fan_in + fan_out))
        return rng.uniform(-a, a, size=shape).astype(dtype)
    if kind == EMBED:
        return (rng.standard_normal(shape) * shape[-1] ** -0.5).astype(dtype)
    raise ConfigError(f"unknown init kind {kind!r}")


# ---------------------------------------------------------------------------
# forward passes


def linear(params, prefix, x: Tensor) -> Tensor:
    w = params[f"{prefix}.w"]
    b = params[f"{prefix}.b"]
    shape = x.shape
    if len(shape) > 2:
        x = reshape(x, (-1, shape[-1]))
    out = matmul(x, w) + b
    if len(shape) > 2:
        out = reshape(out, shape[:-1] + (w.shape[1],))
    return out


def feed_forward(params, prefix, x: Tensor) -> Tensor:
    return linear(params, f"{prefix}.w2", relu(linear(params, f"{prefix}.w1", x)))


def multi_head_attention(q: Tensor, k: Tensor, v: Tensor, heads: int, mask=None) -> Tensor:
    """Scaled dot-product attention over pre-projected q/k/v.

    mask is a constant bool array broadcastable to [B, heads, Lq, Lk];
    True marks key positions a query may attend to.  Masked-out positions
    get zero attention weight.
    """
    B, Lq, d = q.shape
    Lk = k.shape[1]
    if d % heads:
        raise DimensionError(f"hidden size {d} not divisible by {heads} heads")
    if k.shape != (B, Lk, d) or v.shape != (B, Lk, d):
        raise DimensionError(f"k/v shapes {k.shape}/{v.shape} do not match q {q.shape}")
    dh = d // heads

    def split(t, L):
        return transpose(reshape(t, (B, L, heads, dh)), 1, 2)

    qh, kh, vh = split(q, Lq), split(k, Lk), split(v, Lk)
    scores = mul(matmul(qh, transpose(kh, -1, -2)), dh ** -0.5)
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        try:
            np.broadcast_shapes(mask.shape, (B, heads, Lq, Lk))
        except ValueError:
            raise DimensionError(
                f"attention mask shape {mask.shape} does not broadcast to {(B, heads, Lq, Lk)}"
            ) from None
        scores = masked_fill(scores, ~mask, -1e9)
    weights = softmax(scores, -1)
    ctx = matmul(weights, vh)
    return reshape(transpose(ctx, 1, 2), (B, Lq, d))


def attention_block(params, prefix, heads, x: Tensor, kv: Tensor, mask=None) -> Tensor:
    """Projections + multi-head attention + output projection."""
    q = linear(params, f"{prefix}.wq", x)
    k = linear(params, f"{prefix}.wk", kv)
    v = linear(params, f"{prefix}.wv", kv)
    return linear(params, f"{prefix}.wo", multi_head_attention(q, k, v, heads, mask))


def load_balancing_loss(fractions, mean_probs) -> float:
    """Switch-style load penalty E * sum_i f_i * P_i (plain numbers)."""
    f = np.asarray(fractions, dtype=np.float64)
    p = np.asarray(mean_probs, dtype=np.float64)
    return float(len(f) * np.sum(f * p))


def moe_forward(x: Tensor, params, prefix, pad_mask, experts: int):
    """Route each non-padding token to its argmax expert.

    Returns (output, RoutingReport, balancing_loss).  The selected gate
    probability scales the expert output so the router receives gradient;
    padding tokens produce zero output and are excluded from the load
    statistics.  balancing_loss is E * sum_i f_i * P_i, differentiable
    through the mean gate probabilities P.
    """
    if experts < 1:
        raise ConfigError("moe_forward requires at least one expert")
    B, L, d = x.shape
    n = B * L
    x2 = reshape(x, (n, d))
    router_logits = linear(params, f"{prefix}.router", x2)
    if router_logits.shape[1] != experts:
        raise ConfigError(
            f"router produces {router_logits.shape[1]} gates for {experts} experts")
    probs = softmax(router_logits, -1)
    assign = argmax(probs, -1)

    keep = np.asarray(pad_mask, dtype=bool).reshape(n)
    n_tokens = int(keep.sum())
    counts = np.bincount(assign[keep], minlength=experts)
    fractions = counts / max(n_tokens, 1)

    keep_f = keep.astype(probs.data.dtype)
    mean_probs = mul(tsum(mul(probs, Tensor(keep_f[:, None] * np.ones((1, experts)))), axis=0),
                     1.0 / max(n_tokens, 1))
    balancing = mul(tsum(mul(mean_probs, Tensor(fractions))), float(experts))

    combined = None
    for e in range(experts):
        idx = np.nonzero((assign == e) & keep)[0]
        if idx.size == 0:
            continue
        rows = feed_forward(params, f"{prefix}.expert{e}", take_rows(x2, idx))
        scattered = put_rows(rows, idx, n)
        combined = scattered if combined is None else combined + scattered
    if combined is None:
        combined = Tensor(np.zeros((n, d), dtype=x.data.dtype))

    gate = reshape(gather_last(probs, assign), (n, 1))
    out = mul(combined, broadcast_to(gate, (n, d)))
    report = RoutingReport(fractions=fractions, mean_probs=np.asarray(mean_probs.data))
    return reshape(out, (B, L, d)), report, balancing


def standard_layer(params, prefix, heads, x, self_mask, memory=None, memory_mask=None,
                   drop=0.0, rng=None):
    h = layer_norm(x, params[f"{prefix}.ln1.g"], params[f"{prefix}.ln1.b"])
    x = x + dropout(attention_block(params, f"{prefix}.attn", heads, h, h, self_mask), drop, rng)
    if memory is not None:
        h = layer_norm(x, params[f"{prefix}.lnx.g"], params[f"{prefix}.lnx.b"])
        x = x + dropout(attention_block(params, f"{prefix}.xattn", heads, h, memory, memory_mask),
                        drop, rng)
    h = layer_norm(x, params[f"{prefix}.ln2.g"], params[f"{prefix}.ln2.b"])
    return x + dropout(feed_forward(params, f"{prefix}.ffn", h), drop, rng)


def moe_block(params, prefix, heads, experts, x, self_mask, pad_mask, memory=None,
              memory_mask=None, drop=0.0, rng=None):
    h = layer_norm(x, params[f"{prefix}.ln1.g"], params[f"{prefix}.ln1.b"])
    x = x + dropout(attention_block(params, f"{prefix}.attn", heads, h, h, self_mask), drop, rng)
    if memory is not None:
        h = layer_norm(x, params[f"{prefix}.lnx.g"], params[f"{prefix}.lnx.b"])
        x = x + dropout(attention_block(params, f"{prefix}.xattn", heads, h, memory, memory_mask),
                        drop, rng)
    h = layer_norm(x, params[f"{prefix}.ln2.g"], params[f"{prefix}.ln2.b"])
    out, report, balancing = moe_forward(h, params, prefix, pad_mask, experts)
    return x + dropout(out, drop, rng), report, balancing


_pos_cache: dict = {}


def positional_table(max_len: int, d: int, dtype) -> np.ndarray:
    key = (max_len, d, np.dtype(dtype).name)
    tab = _pos_cache.get(key)
    if tab is None:
        pos = np.arange(max_len)[:, None]
        dim = np.arange(0, d, 2)[None, :]
        angle = pos / np.power(10000.0, dim / d)
        tab = np.zeros((max_len, d))
        tab[:, 0::2] = np.sin(angle)
        tab[:, 1::2] = np.cos(angle[:, : d - d // 2])
        tab = tab.astype(dtype)
        _pos_cache[key] = tab
    return tab


def _slot_experts(params, slot: Slot) -> int:
    return params[f"{slot.prefix}.router.w"].shape[1]


def encode_stack(params, plan: LayerPlan, src_ids, src_mask, rng=None):
    """Encoder pass: returns (memory [B, S, d], balancing sum or None)."""
    emb = params[plan.emb]
    d = emb.shape[1]
    src = np.asarray(src_ids)
    src_keep = np.asarray(src_mask, dtype=bool)
    pos = positional_table(src.shape[1], d, emb.data.dtype)
    x = mul(embedding(emb, src), float(np.sqrt(d))) + Tensor(pos[: src.shape[1]])
    enc_mask = src_keep[:, None, None, :]
    balancing = None
    for slot in plan.enc:
        if slot.kind == "moe":
            x, _, bal = moe_block(params, slot.prefix, plan.heads,
                                  _slot_experts(params, slot), x, enc_mask, src_keep,
                                  drop=plan.dropout, rng=rng)
            balancing = bal if balancing is None else balancing + bal
        else:
            x = standard_layer(params, slot.prefix, plan.heads, x, enc_mask,
                               drop=plan.dropout, rng=rng)
    memory = layer_norm(x, params[f"{plan.enc_ln}.g"], params[f"{plan.enc_ln}.b"])
    return memory, balancing


def decode_stack(params, plan: LayerPlan, memory, src_mask, dec_in, dec_mask, rng=None):
    """Decoder pass over teacher-forced inputs: returns (logits, balancing or None)."""
    emb = params[plan.emb]
    vocab, d = emb.shape
    dec = np.asarray(dec_in)
    B, T_len = dec.shape
    dec_keep = np.asarray(dec_mask, dtype=bool)
    src_keep = np.asarray(src_mask, dtype=bool)
    causal = np.tril(np.ones((T_len, T_len), dtype=bool))
    self_mask = causal[None, None, :, :] & dec_keep[:, None, None, :]
    cross_mask = src_keep[:, None, None, :]
    pos = positional_table(T_len, d, emb.data.dtype)
    y = mul(embedding(emb, dec), float(np.sqrt(d))) + Tensor(pos[:T_len])
    balancing = None
    for slot in plan.dec:
        if slot.kind == "moe":
            y, _, bal = moe_block(params, slot.prefix, plan.heads,
                                  _slot_experts(params, slot), y, self_mask, dec_keep,
                                  memory=memory, memory_mask=cross_mask,
                                  drop=plan.dropout, rng=rng)
            balancing = bal if balancing is None else balancing + bal
        else:
            y = standard_layer(params, slot.prefix, plan.heads, y, self_mask,
                               memory=memory, memory_mask=cross_mask,
                               drop=plan.dropout, rng=rng)
    y = layer_norm(y, params[f"{plan.dec_ln}.g"], params[f"{plan.dec_ln}.b"])
    logits = reshape(matmul(reshape(y, (B * T_len, d)), transpose(emb)), (B, T_len, vocab))
    return logits, balancing


def encoder_decoder_forward(params, plan: LayerPlan, batch, rng=None):
    """Teacher-forced forward pass.

    Returns (logits [B, T, V], balancing) where balancing is the sum of the
    load-balancing losses of every MoE layer traversed (0 for dense paths).
    The output projection is the transposed embedding table.
    """
    emb = params[plan.emb]
    vocab = emb.shape[0]
    if getattr(batch, "vocab_size", vocab) != vocab:
        raise ConfigError(
            f"batch vocabulary {batch.vocab_size} does not match embedding rows {vocab}")
    memory, bal_enc = encode_stack(params, plan, batch.src_ids, batch.src_mask, rng=rng)
    logits, bal_dec = decode_stack(params, plan, memory, batch.src_mask,
                                   batch.dec_in, batch.dec_mask, rng=rng)
    balancing = bal_enc
    if bal_dec is not None:
        balancing = bal_dec if balancing is None else balancing + bal_dec
    if balancing is None:
        balancing = Tensor(np.asarray(0.0, dtype=emb.data.dtype))
    return logits, balancing
