"""Checkpoint archive: a JSON manifest line followed by raw little-endian
parameter bytes.

Each record carries {name, ownership tag, shape, dtype, offset, nbytes};
optimizer arrays are stored in a separate section so extracted submodels
stay lean.  The manifest also holds the architecture kind, the submodel
configs, and (for resumable training checkpoints) the trainer state.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import arch
from .errors import ContractError

FORMAT = "multicap-checkpoint"
VERSION = 1

_WIRE_DTYPES = {"float32": "<f4", "float64": "<f8"}


@dataclass
class Checkpoint:
    architecture: str  # "shared" | "indep" | "single"
    configs: dict
    train_state: dict | None
    params: dict  # name -> (array, owner)
    opt: dict     # name -> array


def _pack(records, blobs, section, name, owner, arr):
    wire = _WIRE_DTYPES[arr.dtype.name]
    raw = arr.astype(wire).tobytes()
    offset = sum(len(b) for b in blobs)
    records.append({"section": section, "name": name, "owner": owner,
                    "shape": list(arr.shape), "dtype": wire,
                    "offset": offset, "nbytes": len(raw)})
    blobs.append(raw)


def write_checkpoint(path, architecture: str, configs: dict, store,
                     train_state: dict | None = None, opt_arrays: dict | None = None):
    records, blobs = [], []
    for name, tensor in store.items():
        _pack(records, blobs, "params", name, store.owner(name), tensor.data)
    for name, arr in (opt_arrays or {}).items():
        _pack(records, blobs, "opt", name, "-", arr)
    manifest = {"format": FORMAT, "version": VERSION, "architecture": architecture,
                "configs": configs, "train_state": train_state, "records": records}
    with open(path, "wb") as f:
        f.write(json.dumps(manifest, sort_keys=True).encode("utf-8"))
        f.write(b"\n")
        for b in blobs:
            f.write(b)


def read_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as f:
        header = f.readline()
        blob = f.read()
    try:
        manifest = json.loads(header.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ContractError(f"{path}: not a checkpoint file ({exc})") from None
    if manifest.get("format") != FORMAT:
        raise ContractError(f"{path}: unrecognized checkpoint format")
    params, opt = {}, {}
    for rec in manifest["records"]:
        raw = blob[rec["offset"]: rec["offset"] + rec["nbytes"]]
        arr = np.frombuffer(raw, dtype=rec["dtype"]).reshape(rec["shape"]).copy()
        arr = arr.astype(np.dtype(rec["dtype"]).newbyteorder("=").name)
        if rec["section"] == "params":
            params[rec["name"]] = (arr, rec["owner"])
        else:
            opt[rec["name"]] = arr
    return Checkpoint(architecture=manifest["architecture"], configs=manifest["configs"],
                      train_state=manifest.get("train_state"), params=params, opt=opt)


# ---------------------------------------------------------------------------
# model-level helpers


def save_model(path, model: arch.Model, train_state=None, opt_arrays=None):
    configs = {"model": arch.config_to_dict(model.cfg), "vocab": model.vocab_size}
    write_checkpoint(path, "single", configs, model.store, train_state, opt_arrays)


def save_composite(path, comp: arch.CompositeModel, small_even: str = "private",
                   train_state=None, opt_arrays=None):
    configs = {"big": arch.config_to_dict(comp.big.cfg),
               "small": arch.config_to_dict(comp.small.cfg),
               "vocab": comp.big.vocab_size,
               "small_even": small_even}
    write_checkpoint(path, comp.architecture, configs, comp.store, train_state, opt_arrays)


def _fill_store(store, params: dict) -> None:
    names = set(store.names())
    got = set(params)
    if names != got:
        missing = sorted(names - got)[:3]
        extra = sorted(got - names)[:3]
        raise ContractError(
            f"checkpoint parameters do not match the architecture "
            f"(missing {missing}, unexpected {extra})")
    for name, (arr, _) in params.items():
        tensor = store[name]
        if tuple(arr.shape) != tensor.shape:
            raise ContractError(f"shape mismatch for {name}: "
                                f"{arr.shape} vs {tensor.shape}")
        tensor.data = arr
        tensor.grad = None


def restore_model(ckpt: Checkpoint) -> arch.Model:
    if ckpt.architecture != "single":
        raise ContractError(f"expected a single-model checkpoint, got {ckpt.architecture!r}")
    cfg = arch.config_from_dict(ckpt.configs["model"])
    model = arch.build_single(cfg, ckpt.configs["vocab"], seed=0)
    _fill_store(model.store, ckpt.params)
    return model


def restore_composite(ckpt: Checkpoint) -> arch.CompositeModel:
    if ckpt.architecture not in ("shared", "indep"):
        raise ContractError(f"expected a composite checkpoint, got {ckpt.architecture!r}")
    big = arch.config_from_dict(ckpt.configs["big"])
    small = arch.config_from_dict(ckpt.configs["small"])
    vocab = ckpt.configs["vocab"]
    if ckpt.architecture == "shared":
        comp = arch.build_shared(big, small, vocab, seed=0,
                                 small_even=ckpt.configs.get("small_even", "private"))
    else:
        comp = arch.build_indep(big, small, vocab, seed=0)
    _fill_store(comp.store, ckpt.params)
    return comp


def load_any(path):
    """Load a checkpoint as (Checkpoint, Model | CompositeModel)."""
    ckpt = read_checkpoint(path)
    if ckpt.architecture == "single":
        return ckpt, restore_model(ckpt)
    return ckpt, restore_composite(ckpt)
