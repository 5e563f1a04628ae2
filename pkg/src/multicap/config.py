"""Declarative run specification: one YAML document drives corpus
generation, training, evaluation, and analysis.

The document has four sections (model, trainer, data, output).  Unknown
keys are rejected and every value is validated before anything is
allocated.  ``config_hash`` covers the three semantic sections with
defaults materialized; ``compare_key`` additionally drops the
strategy-defining fields (trainer.strategy, trainer.t_sep,
trainer.train_submodel, model.architecture) so runs that differ only in
training strategy can be compared by the analysis tools.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import yaml

from .arch import SubmodelConfig, derive_device_config
from .data import CorpusConfig, ToyLanguageSpec
from .errors import ConfigError
from .losses import ObjectiveConfig
from .trainer import TrainerConfig

ARCHITECTURES = ("shared", "indep", "single")

_REQUIRED = object()


def _take(section: str, doc: dict, fields: dict) -> dict:
    if not isinstance(doc, dict):
        raise ConfigError(f"{section}: expected a mapping, got {type(doc).__name__}")
    unknown = set(doc) - set(fields)
    if unknown:
        raise ConfigError(f"{section}: unknown key(s) {sorted(unknown)}")
    out = {}
    for key, (conv, default) in fields.items():
        if key in doc and doc[key] is not None:
            try:
                out[key] = conv(doc[key])
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"{section}.{key}: {exc}") from None
        elif default is _REQUIRED:
            raise ConfigError(f"{section}.{key}: missing required field")
        else:
            out[key] = default
    return out


def _str_choice(*choices):
    def conv(v):
        if v not in choices:
            raise ValueError(f"expected one of {choices}, got {v!r}")
        return v
    return conv


def _int_pair(v):
    pair = list(v)
    if len(pair) != 2:
        raise ValueError("expected a pair of integers")
    return (int(pair[0]), int(pair[1]))


_MODEL_FIELDS = {
    "kind": (_str_choice("moe", "dense"), _REQUIRED),
    "d": (int, _REQUIRED),
    "heads": (int, _REQUIRED),
    "ffn": (int, _REQUIRED),
    "enc_layers": (int, _REQUIRED),
    "dec_layers": (int, _REQUIRED),
    "experts": (int, 1),
    "expert_ffn": (int, 0),
    "dropout": (float, 0.0),
}

_LANGUAGE_FIELDS = {
    "name": (str, _REQUIRED),
    "transform": (str, _REQUIRED),
    "tier": (str, _REQUIRED),
    "train_pairs": (int, _REQUIRED),
    "key": (int, 0),
}

_DATA_FIELDS = {
    "vocab_size": (int, _REQUIRED),
    "languages": (list, _REQUIRED),
    "length_range": (_int_pair, (4, 12)),
    "seed": (int, 0),
    "valid_pairs": (int, 200),
    "test_pairs": (int, 300),
}

_TRAINER_FIELDS = {
    "strategy": (_str_choice("single", "constjt", "tsjt"), _REQUIRED),
    "t_sep": (float, None),
    "train_submodel": (_str_choice("big", "small"), None),
    "kl_ema_decay": (float, 0.98),
    "switch_check_interval": (int, 50),
    "peak_lr": (float, 5e-4),
    "warmup_steps": (int, 400),
    "max_epochs": (int, 3),
    "tokens_per_update": (int, 4096),
    "tokens_per_batch": (int, 0),
    "adam_beta1": (float, 0.9),
    "adam_beta2": (float, 0.98),
    "adam_eps": (float, 1e-8),
    "grad_clip": (float, 1.0),
    "seed": (int, 0),
    "dtype": (_str_choice("float32", "float64"), "float64"),
    "valid_interval": (int, 0),
    "checkpoint_interval": (int, 0),
    "alpha_big": (float, 5.0),
    "alpha_small": (float, 10.0),
    "balance_coeff": (float, 0.01),
}

_OUTPUT_FIELDS = {
    "dir": (str, _REQUIRED),
    "corpus_dir": (str, _REQUIRED),
}


@dataclass(frozen=True)
class ModelSection:
    architecture: str
    big: SubmodelConfig
    small: SubmodelConfig
    small_even: str = "private"


@dataclass(frozen=True)
class OutputSection:
    dir: str
    corpus_dir: str


@dataclass(frozen=True)
class RunSpec:
    model: ModelSection
    trainer: TrainerConfig
    data: CorpusConfig
    output: OutputSection


def _check_shared_compat(big: SubmodelConfig, small: SubmodelConfig, small_even: str):
    if big.kind != "moe":
        raise ConfigError("model.big: shared architecture expects a MoE big submodel")
    if small.kind != "dense":
        raise ConfigError("model.small: shared architecture expects a dense small submodel")
    if big.d != small.d:
        raise ConfigError("model: shared architecture requires equal width "
                          f"(big d={big.d}, small d={small.d})")
    if big.heads != small.heads:
        raise ConfigError("model: shared architecture requires equal head counts")
    if big.enc_layers % 2 or big.dec_layers % 2:
        raise ConfigError("model.big: shared architecture requires even depth")
    expect_enc = big.enc_layers if small_even == "private" else big.enc_layers // 2
    expect_dec = big.dec_layers if small_even == "private" else big.dec_layers // 2
    if (small.enc_layers, small.dec_layers) != (expect_enc, expect_dec):
        raise ConfigError(
            f"model.small: shared depth must be {expect_enc}/{expect_dec} "
            f"in mode {small_even!r}")


def parse_runspec(doc: dict) -> RunSpec:
    if not isinstance(doc, dict):
        raise ConfigError("run spec must be a mapping")
    unknown = set(doc) - {"model", "trainer", "data", "output"}
    if unknown:
        raise ConfigError(f"unknown top-level section(s) {sorted(unknown)}")
    for section in ("model", "trainer", "data", "output"):
        if section not in doc:
            raise ConfigError(f"missing required section {section!r}")

    model_doc = doc["model"]
    if not isinstance(model_doc, dict):
        raise ConfigError("model: expected a mapping")
    meta = _take("model", {k: v for k, v in model_doc.items()
                           if k in ("architecture", "small_even")},
                 {"architecture": (_str_choice(*ARCHITECTURES), _REQUIRED),
                  "small_even": (_str_choice("private", "skip"), "private")})
    extra = set(model_doc) - {"architecture", "small_even", "big", "small"}
    if extra:
        raise ConfigError(f"model: unknown key(s) {sorted(extra)}")
    if "big" not in model_doc:
        raise ConfigError("model.big: missing required field")
    try:
        big = SubmodelConfig(**_take("model.big", model_doc["big"], _MODEL_FIELDS))
    except ConfigError:
        raise
    if "small" in model_doc and model_doc["small"] is not None:
        small = SubmodelConfig(**_take("model.small", model_doc["small"], _MODEL_FIELDS))
    else:
        small = derive_device_config(big)
    if meta["architecture"] == "shared":
        _check_shared_compat(big, small, meta["small_even"])
    model = ModelSection(architecture=meta["architecture"], big=big, small=small,
                         small_even=meta["small_even"])

    tr = _take("trainer", doc["trainer"], _TRAINER_FIELDS)
    objective = ObjectiveConfig(alpha_big=tr.pop("alpha_big"),
                                alpha_small=tr.pop("alpha_small"),
                                balance_coeff=tr.pop("balance_coeff"))
    trainer = TrainerConfig(objective=objective, **tr)
    if (trainer.strategy == "single") != (model.architecture == "single"):
        raise ConfigError("trainer.strategy 'single' pairs only with "
                          "model.architecture 'single' (and vice versa)")

    da = _take("data", doc["data"], _DATA_FIELDS)
    langs = []
    for i, lang in enumerate(da.pop("languages")):
        fields = _take(f"data.languages[{i}]", lang, _LANGUAGE_FIELDS)
        langs.append(ToyLanguageSpec(**fields))
    data = CorpusConfig(languages=tuple(langs), **da)

    out = _take("output", doc["output"], _OUTPUT_FIELDS)
    return RunSpec(model=model, trainer=trainer, data=data, output=OutputSection(**out))


def load_runspec(path) -> RunSpec:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"spec file not found: {path}")
    doc = yaml.safe_load(path.read_text())
    return parse_runspec(doc)


# ---------------------------------------------------------------------------
# normalization, round-trip, hashing


def _model_dict(cfg: SubmodelConfig) -> dict:
    return {"kind": cfg.kind, "d": cfg.d, "heads": cfg.heads, "ffn": cfg.ffn,
            "enc_layers": cfg.enc_layers, "dec_layers": cfg.dec_layers,
            "experts": cfg.experts, "expert_ffn": cfg.expert_ffn,
            "dropout": cfg.dropout}


def dump_runspec(spec: RunSpec) -> dict:
    """The normalized document (defaults materialized); parses back equal."""
    tr = spec.trainer
    return {
        "model": {"architecture": spec.model.architecture,
                  "small_even": spec.model.small_even,
                  "big": _model_dict(spec.model.big),
                  "small": _model_dict(spec.model.small)},
        "trainer": {"strategy": tr.strategy, "t_sep": tr.t_sep,
                    "train_submodel": tr.train_submodel,
                    "kl_ema_decay": tr.kl_ema_decay,
                    "switch_check_interval": tr.switch_check_interval,
                    "peak_lr": tr.peak_lr, "warmup_steps": tr.warmup_steps,
                    "max_epochs": tr.max_epochs,
                    "tokens_per_update": tr.tokens_per_update,
                    "tokens_per_batch": tr.tokens_per_batch,
                    "adam_beta1": tr.adam_beta1, "adam_beta2": tr.adam_beta2,
                    "adam_eps": tr.adam_eps, "grad_clip": tr.grad_clip,
                    "seed": tr.seed, "dtype": tr.dtype,
                    "valid_interval": tr.valid_interval,
                    "checkpoint_interval": tr.checkpoint_interval,
                    "alpha_big": tr.objective.alpha_big,
                    "alpha_small": tr.objective.alpha_small,
                    "balance_coeff": tr.objective.balance_coeff},
        "data": {"vocab_size": spec.data.vocab_size,
                 "languages": [{"name": l.name, "transform": l.transform,
                                "tier": l.tier, "train_pairs": l.train_pairs,
                                "key": l.key} for l in spec.data.languages],
                 "length_range": list(spec.data.length_range),
                 "seed": spec.data.seed, "valid_pairs": spec.data.valid_pairs,
                 "test_pairs": spec.data.test_pairs},
        "output": {"dir": spec.output.dir, "corpus_dir": spec.output.corpus_dir},
    }


STRATEGY_FIELDS = (("trainer", "strategy"), ("trainer", "t_sep"),
                   ("trainer", "train_submodel"), ("model", "architecture"))


def semantic_sections(spec: RunSpec) -> dict:
    doc = dump_runspec(spec)
    doc.pop("output")
    return doc


def config_hash(spec: RunSpec) -> str:
    payload = json.dumps(semantic_sections(spec), sort_keys=True)
    return hashlib.sha256(payload.encode()).hexdigest()[:16]


def compare_key(spec: RunSpec) -> str:
    doc = semantic_sections(spec)
    for section, key in STRATEGY_FIELDS:
        doc[section].pop(key, None)
    payload = json.dumps(doc, sort_keys=True)
    return hashlib.sha256(payload.encode()).hexdigest()[:16]


def run_meta(spec: RunSpec) -> dict:
    return {"config_hash": config_hash(spec), "compare_key": compare_key(spec),
            "config": semantic_sections(spec)}
