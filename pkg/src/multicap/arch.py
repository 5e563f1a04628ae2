"""Composite two-submodel architectures with shared or disjoint parameters.

The shared variant interleaves jointly-owned standard layers (odd slots,
1-indexed) with capacity-specific even slots: MoE layers on the big path,
private dense layers on the small path.  The indep variant keeps two fully
disjoint models, the small one defaulting to half the big one's width and
depth.  All parameters live in one ParameterStore; a submodel is just a
LayerPlan pointing at a subset of the names, so sharing is aliasing.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .layers import (LayerPlan, MoELayerConfig, Slot, TransformerLayerConfig,
                     embedding_shapes, encoder_decoder_forward, init_array,
                     ln_shapes, moe_layer_shapes, plan_param_names,
                     std_layer_shapes)
from .tensor import Tensor, default_dtype

OWNER_SHARED = "shared"
OWNER_BIG = "moe-only"
OWNER_SMALL = "small-only"
OWNER_STANDALONE = "standalone"


@dataclass(frozen=True)
class SubmodelConfig:
    kind: str  # "moe" | "dense"
    d: int
    heads: int
    ffn: int
    enc_layers: int
    dec_layers: int
    experts: int = 1
    expert_ffn: int = 0  # 0 means "same as ffn"
    dropout: float = 0.0

    def __post_init__(self):
        if self.kind not in ("moe", "dense"):
            raise ConfigError(f"unknown submodel kind {self.kind!r}")
        for field in ("d", "heads", "ffn", "enc_layers", "dec_layers"):
            if getattr(self, field) <= 0:
                raise ConfigError(f"{field} must be positive")
        if self.d % self.heads:
            raise ConfigError(f"hidden size {self.d} not divisible by {self.heads} heads")
        if self.kind == "moe" and self.experts < 1:
            raise ConfigError("a MoE submodel needs at least one expert")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must lie in [0, 1)")

    def layer_cfg(self) -> TransformerLayerConfig:
        return TransformerLayerConfig(self.d, self.heads, self.ffn, self.dropout)

    def moe_cfg(self) -> MoELayerConfig | None:
        if self.kind != "moe":
            return None
        return MoELayerConfig(self.experts, self.expert_ffn or self.ffn)


def derive_device_config(big: SubmodelConfig) -> SubmodelConfig:
    """Default small model for the indep architecture: half width and depth,
    width rounded down to the nearest multiple of the head count."""
    heads = min(big.heads, max(big.d // 2, 1))
    d = (big.d // 2) - ((big.d // 2) % heads)
    if d < heads:
        d = heads
    return SubmodelConfig(
        kind="dense",
        d=d,
        heads=heads,
        ffn=max(big.ffn // 2, 1),
        enc_layers=max(big.enc_layers // 2, 1),
        dec_layers=max(big.dec_layers // 2, 1),
        dropout=big.dropout,
    )


class ParameterStore:
    """Named, ownership-tagged parameter collection. Names are unique and
    ownership tags are fixed at assembly time."""

    def __init__(self):
        self._tensors: dict[str, Tensor] = {}
        self._owners: dict[str, str] = {}

    def add(self, name: str, tensor: Tensor, owner: str) -> None:
        if name in self._tensors:
            raise ConfigError(f"duplicate parameter name {name!r}")
        self._tensors[name] = tensor
        self._owners[name] = owner

    def __getitem__(self, name: str) -> Tensor:
        return self._tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self._tensors

    def __len__(self):
        return len(self._tensors)

    def names(self) -> list[str]:
        return list(self._tensors)

    def owner(self, name: str) -> str:
        return self._owners[name]

    def items(self):
        return self._tensors.items()

    def owned_by(self, owner: str) -> list[str]:
        return [n for n, o in self._owners.items() if o == owner]

    def copy_subset(self, names) -> "ParameterStore":
        sub = ParameterStore()
        for n in names:
            t = self._tensors[n]
            sub.add(n, Tensor(t.data.copy(), requires_grad=True), self._owners[n])
        return sub


# ---------------------------------------------------------------------------
# structure enumeration (shared by allocation, loading, and counting)


def _stack_structure(cfg: SubmodelConfig, side: str, prefix: str, split_even: bool):
    """Slots and shape records for one encoder/decoder stack.

    split_even=True suffixes even (1-indexed) slots with '.big', marking
    them as the capacity-specific position in a shared composite.
    """
    decoder = side == "dec"
    n = cfg.dec_layers if decoder else cfg.enc_layers
    lcfg = cfg.layer_cfg()
    mcfg = cfg.moe_cfg()
    slots, shapes = [], []
    for i in range(1, n + 1):
        is_even = i % 2 == 0
        if cfg.kind == "moe" and is_even:
            p = f"{prefix}{side}.{i}.big" if split_even else f"{prefix}{side}.{i}"
            slots.append(Slot("moe", p))
            shapes.append(("moe", p, moe_layer_shapes(p, lcfg, mcfg, decoder)))
        else:
            p = f"{prefix}{side}.{i}"
            slots.append(Slot("std", p))
            shapes.append(("std", p, std_layer_shapes(p, lcfg, decoder)))
    return slots, shapes


def standalone_structure(cfg: SubmodelConfig, vocab: int, prefix: str = "",
                         split_even: bool = False):
    """(plan, shape records) of a self-contained model under a name prefix."""
    emb = f"{prefix}emb"
    enc_ln, dec_ln = f"{prefix}enc.ln", f"{prefix}dec.ln"
    enc_slots, enc_shapes = _stack_structure(cfg, "enc", prefix, split_even)
    dec_slots, dec_shapes = _stack_structure(cfg, "dec", prefix, split_even)
    shapes = [("emb", emb, embedding_shapes(emb, vocab, cfg.d))]
    shapes += enc_shapes
    shapes += [("ln", enc_ln, ln_shapes(enc_ln, cfg.d))]
    shapes += dec_shapes
    shapes += [("ln", dec_ln, ln_shapes(dec_ln, cfg.d))]
    plan = LayerPlan(emb=emb, enc=tuple(enc_slots), dec=tuple(dec_slots),
                     enc_ln=enc_ln, dec_ln=dec_ln, heads=cfg.heads, dropout=cfg.dropout)
    return plan, shapes


def count_params(cfg: SubmodelConfig, vocab: int) -> int:
    """Symbolic parameter count of a standalone model; nothing is allocated."""
    _, shapes = standalone_structure(cfg, vocab)
    total = 0
    for _, _, records in shapes:
        for _, shape, _ in records:
            total += int(np.prod(shape))
    return total


def _alloc(store: ParameterStore, shape_groups, owner_fn, rng, dtype) -> None:
    for kind, prefix, records in shape_groups:
        owner = owner_fn(kind, prefix)
        for name, shape, init in records:
            store.add(name, Tensor(init_array(init, shape, rng, dtype), requires_grad=True),
                      owner)


# ---------------------------------------------------------------------------
# models


@dataclass
class Model:
    """One submodel: a config, a layer plan, and the store the plan reads."""

    cfg: SubmodelConfig
    plan: LayerPlan
    store: ParameterStore
    vocab_size: int

    def forward(self, batch, rng=None):
        return encoder_decoder_forward(self.store, self.plan, batch, rng=rng)

    def param_names(self) -> list[str]:
        return plan_param_names(self.plan, self.store.names())

    def parameters(self) -> dict[str, Tensor]:
        return {n: self.store[n] for n in self.param_names()}

    def param_count(self) -> int:
        return sum(t.size for t in self.parameters().values())


@dataclass
class CompositeModel:
    architecture: str  # "shared" | "indep"
    store: ParameterStore
    big: Model
    small: Model


def build_single(cfg: SubmodelConfig, vocab: int, seed: int) -> Model:
    store = ParameterStore()
    plan, shapes = standalone_structure(cfg, vocab)
    _alloc(store, shapes, lambda *_: OWNER_STANDALONE,
           np.random.default_rng(seed), default_dtype())
    return Model(cfg, plan, store, vocab)


def build_shared(cfg_big: SubmodelConfig, cfg_small: SubmodelConfig, vocab: int,
                 seed: int, small_even: str = "private") -> CompositeModel:
    """Composite with jointly-owned odd slots.

    small_even="private" (default): the small path walks every slot, with
    its own dense layers at even positions.  small_even="skip": the small
    path uses only the shared odd slots (half depth, no private layers).
    """
    if cfg_big.kind != "moe":
        raise ConfigError("shared architecture expects a MoE big submodel")
    if cfg_small.kind != "dense":
        raise ConfigError("shared architecture expects a dense small submodel")
    if cfg_big.d != cfg_small.d:
        raise ConfigError("shared architecture requires equal width "
                          f"(big d={cfg_big.d}, small d={cfg_small.d})")
    if cfg_big.heads != cfg_small.heads:
        raise ConfigError("shared architecture requires equal head counts")
    if cfg_big.enc_layers % 2 or cfg_big.dec_layers % 2:
        raise ConfigError("shared architecture requires even big-submodel depth")
    if small_even not in ("private", "skip"):
        raise ConfigError(f"unknown small_even mode {small_even!r}")
    expect_enc = cfg_big.enc_layers if small_even == "private" else cfg_big.enc_layers // 2
    expect_dec = cfg_big.dec_layers if small_even == "private" else cfg_big.dec_layers // 2
    if (cfg_small.enc_layers, cfg_small.dec_layers) != (expect_enc, expect_dec):
        raise ConfigError(
            f"shared small depth must be {expect_enc}/{expect_dec} in mode "
            f"{small_even!r}, got {cfg_small.enc_layers}/{cfg_small.dec_layers}")

    dtype = default_dtype()
    store = ParameterStore()
    plan_big, big_shapes = standalone_structure(cfg_big, vocab, split_even=True)

    def big_owner(kind, prefix):
        return OWNER_BIG if kind == "moe" else OWNER_SHARED

    _alloc(store, big_shapes, big_owner, np.random.default_rng(seed), dtype)

    small_lcfg = cfg_small.layer_cfg()
    small_rng = np.random.default_rng(seed)
    enc_small, dec_small = [], []
    for side, n, out in (("enc", cfg_big.enc_layers, enc_small),
                         ("dec", cfg_big.dec_layers, dec_small)):
        decoder = side == "dec"
        for i in range(1, n + 1):
            if i % 2:
                out.append(Slot("std", f"{side}.{i}"))
            elif small_even == "private":
                p = f"{side}.{i}.small"
                out.append(Slot("std", p))
                _alloc(store, [("std", p, std_layer_shapes(p, small_lcfg, decoder))],
                       lambda *_: OWNER_SMALL, small_rng, dtype)
    plan_small = LayerPlan(emb=plan_big.emb, enc=tuple(enc_small), dec=tuple(dec_small),
                           enc_ln=plan_big.enc_ln, dec_ln=plan_big.dec_ln,
                           heads=cfg_small.heads, dropout=cfg_small.dropout)
    big = Model(cfg_big, plan_big, store, vocab)
    small = Model(cfg_small, plan_small, store, vocab)
    return CompositeModel("shared", store, big, small)


def build_indep(cfg_big: SubmodelConfig, cfg_small: SubmodelConfig | None, vocab: int,
                seed: int) -> CompositeModel:
    """Composite with two fully disjoint submodels."""
    if cfg_small is None:
        cfg_small = derive_device_config(cfg_big)
    dtype = default_dtype()
    store = ParameterStore()
    plan_big, big_shapes = standalone_structure(cfg_big, vocab, prefix="big.")
    _alloc(store, big_shapes, lambda *_: OWNER_BIG, np.random.default_rng(seed), dtype)
    plan_small, small_shapes = standalone_structure(cfg_small, vocab, prefix="small.")
    _alloc(store, small_shapes, lambda *_: OWNER_SMALL, np.random.default_rng(seed), dtype)
    big = Model(cfg_big, plan_big, store, vocab)
    small = Model(cfg_small, plan_small, store, vocab)
    return CompositeModel("indep", store, big, small)


def extract_submodel(composite: CompositeModel, which: str) -> Model:
    """Deep-copy one path out of a composite into a self-contained model.

    Parameter names are remapped onto the canonical standalone layout so
    the result checkpoints and reloads like any single model; ownership
    tags are preserved.  The forward pass is bit-identical to the path
    inside the composite.
    """
    if which not in ("big", "small"):
        raise ConfigError(f"submodel must be 'big' or 'small', got {which!r}")
    src = composite.big if which == "big" else composite.small
    std_plan, _ = standalone_structure(src.cfg, src.vocab_size)
    if len(std_plan.enc) != len(src.plan.enc) or len(std_plan.dec) != len(src.plan.dec):
        raise ConfigError("submodel plan does not match its config")
    prefix_map = [(src.plan.emb, std_plan.emb),
                  (src.plan.enc_ln, std_plan.enc_ln),
                  (src.plan.dec_ln, std_plan.dec_ln)]
    prefix_map += [(a.prefix, b.prefix) for a, b in zip(src.plan.enc, std_plan.enc)]
    prefix_map += [(a.prefix, b.prefix) for a, b in zip(src.plan.dec, std_plan.dec)]
    store = composite.store
    sub = ParameterStore()
    for old_prefix, new_prefix in prefix_map:
        for name in store.names():
            if name == old_prefix or name.startswith(old_prefix + "."):
                new_name = new_prefix + name[len(old_prefix):]
                if new_name not in sub:
                    sub.add(new_name, Tensor(store[name].data.copy(), requires_grad=True),
                            store.owner(name))
    return Model(src.cfg, std_plan, sub, src.vocab_size)


def config_to_dict(cfg: SubmodelConfig) -> dict:
    return dataclasses.asdict(cfg)


def config_from_dict(d: dict) -> SubmodelConfig:
    return SubmodelConfig(**d)
