"""Training strategies: single-model baseline, constant joint training, and
two-stage joint training.

Stage 1 runs both submodels on every batch with a symmetric-KL consistency
term; each submodel's objective treats the counterpart's distribution as a
constant.  Once the KL moving average falls to the separation threshold
the run switches (exactly once) to stage 2, which drops the consistency
term.  Shared-architecture composites take one summed optimizer step per
update because the odd slots are aliased; indep composites keep one
optimizer per submodel and update the MoE side first.
"""

from __future__ import annotations

import dataclasses
import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt_io
from .arch import CompositeModel, Model
from .data import group_updates, make_batches
from .errors import ConfigError, ContractError, TrainingDiverged
from .losses import (ObjectiveConfig, composite_objective, cross_entropy,
                     symmetric_kl, symmetric_kl_value)
from .tensor import Tensor, mul, set_default_dtype, trace

STRATEGIES = ("single", "constjt", "tsjt")


@dataclass(frozen=True)
class TrainerConfig:
    strategy: str
    t_sep: float | None = None
    train_submodel: str | None = None  # which submodel a single run trains
    kl_ema_decay: float = 0.98
    switch_check_interval: int = 50
    peak_lr: float = 5e-4
    warmup_steps: int = 400
    max_epochs: int = 3
    tokens_per_update: int = 4096
    tokens_per_batch: int = 0  # micro-batch budget; 0 means tokens_per_update
    adam_beta1: float = 0.9
    adam_beta2: float = 0.98
    adam_eps: float = 1e-8
    grad_clip: float = 1.0
    seed: int = 0
    dtype: str = "float64"
    valid_interval: int = 0       # updates between BLEU evals; 0 disables
    checkpoint_interval: int = 0  # updates between checkpoints; 0 disables
    objective: ObjectiveConfig = field(default_factory=ObjectiveConfig)

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"unknown strategy {self.strategy!r}; expected {STRATEGIES}")
        if self.strategy == "tsjt":
            if self.t_sep is None or self.t_sep <= 0:
                raise ConfigError("tsjt requires t_sep > 0")
        if self.strategy == "single":
            if self.train_submodel not in ("big", "small"):
                raise ConfigError("single training requires train_submodel: big|small")
        elif self.train_submodel is not None:
            raise ConfigError("train_submodel only applies to the single strategy")
        if not 0.0 <= self.kl_ema_decay < 1.0:
            raise ConfigError("kl_ema_decay must lie in [0, 1)")
        if self.switch_check_interval < 1:
            raise ConfigError("switch_check_interval must be positive")
        if self.warmup_steps < 1:
            raise ConfigError("warmup_steps must be at least 1")
        if self.max_epochs < 1 or self.tokens_per_update < 1:
            raise ConfigError("max_epochs and tokens_per_update must be positive")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError("dtype must be float32 or float64")

    @property
    def micro_budget(self) -> int:
        return self.tokens_per_batch or self.tokens_per_update


@dataclass
class TrainState:
    step: int = 0
    stage: int = 1
    kl_ema: float | None = None
    switch_step: int | None = None
    epoch: int = 0
    update_in_epoch: int = 0

    def as_dict(self):
        return dataclasses.asdict(self)


def lr_schedule(step: int, cfg: TrainerConfig) -> float:
    """Linear warmup to peak, then inverse-square-root decay."""
    if step < 1:
        raise ContractError("lr_schedule is defined for step >= 1")
    if step <= cfg.warmup_steps:
        return cfg.peak_lr * step / cfg.warmup_steps
    return cfg.peak_lr * math.sqrt(cfg.warmup_steps / step)


def update_kl_ema(ema: float | None, kl: float, decay: float) -> float:
    """EMA of the consistency loss; seeded with the first observation so the
    running value stays inside the observed min/max envelope."""
    if ema is None:
        return kl
    return decay * ema + (1.0 - decay) * kl


def maybe_switch_stage(state: TrainState, cfg: TrainerConfig) -> bool:
    """Stage 1 -> 2 when the KL moving average reaches the threshold
    (boundary inclusive); the transition fires at most once per run."""
    if state.stage != 1 or cfg.t_sep is None or state.kl_ema is None:
        return False
    if state.kl_ema <= cfg.t_sep:
        state.stage = 2
        state.switch_step = state.step
        return True
    return False


def adam_update(param: np.ndarray, grad: np.ndarray, m: np.ndarray, v: np.ndarray,
                t: int, lr: float, beta1: float, beta2: float, eps: float) -> None:
    """One bias-corrected Adam step, in place."""
    m *= beta1
    m += (1.0 - beta1) * grad
    v *= beta2
    v += (1.0 - beta2) * grad * grad
    mhat = m / (1.0 - beta1 ** t)
    vhat = v / (1.0 - beta2 ** t)
    param -= lr * mhat / (np.sqrt(vhat) + eps)


class Adam:
    """Adam over an ordered set of named parameters."""

    def __init__(self, params: dict, cfg: TrainerConfig):
        self.params = dict(params)
        self.beta1, self.beta2, self.eps = cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps
        self.m = {n: np.zeros_like(p.data) for n, p in self.params.items()}
        self.v = {n: np.zeros_like(p.data) for n, p in self.params.items()}
        self.t = 0

    def step(self, lr: float) -> None:
        self.t += 1
        for name, p in self.params.items():
            grad = p.grad if p.grad is not None else np.zeros_like(p.data)
            adam_update(p.data, grad, self.m[name], self.v[name], self.t, lr,
                        self.beta1, self.beta2, self.eps)

    def zero_grads(self) -> None:
        for p in self.params.values():
            p.grad = None

    def state_arrays(self, group: str) -> dict:
        out = {}
        for name in self.params:
            out[f"adam.{group}.m.{name}"] = self.m[name]
            out[f"adam.{group}.v.{name}"] = self.v[name]
        return out

    def load_state_arrays(self, group: str, arrays: dict, t: int) -> None:
        self.t = t
        for name in self.params:
            self.m[name] = arrays[f"adam.{group}.m.{name}"].copy()
            self.v[name] = arrays[f"adam.{group}.v.{name}"].copy()


def clip_global_norm(params: dict, max_norm: float) -> float:
    """Scale gradients so their global L2 norm is at most max_norm."""
    total = 0.0
    for p in params.values():
        if p.grad is not None:
            total += float(np.sum(np.square(p.grad, dtype=np.float64)))
    norm = math.sqrt(total)
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / norm
        for p in params.values():
            if p.grad is not None:
                p.grad *= scale
    return norm


class MetricsWriter:
    """Line-delimited JSON records with a fixed field order."""

    def __init__(self, path, keep_until_step: int | None = None):
        self.path = Path(path)
        if keep_until_step is not None and self.path.exists():
            kept = []
            for line in self.path.read_text().splitlines():
                rec = json.loads(line)
                if rec.get("kind") == "end":
                    continue
                if rec.get("kind") == "meta" or rec.get("step", 0) <= keep_until_step:
                    kept.append(line)
            self.path.write_text("".join(l + "\n" for l in kept))
            self._f = open(self.path, "a", encoding="utf-8")
        else:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self._f = open(self.path, "w", encoding="utf-8")

    def write(self, record: dict) -> None:
        self._f.write(json.dumps(record) + "\n")
        self._f.flush()

    def close(self):
        self._f.close()


@dataclass
class RunResult:
    metrics_path: Path
    final_checkpoint: Path | None
    state: TrainState


def _finite(values: dict) -> bool:
    return all(v is None or math.isfinite(v) for v in values.values())


class Trainer:
    """Owns one training run: model(s), optimizer state, metrics log."""

    def __init__(self, strategy: str, model, corpus, cfg: TrainerConfig, out_dir,
                 run_meta: dict | None = None, single_role: str | None = None,
                 small_even: str = "private"):
        if strategy != cfg.strategy:
            raise ConfigError(f"strategy argument {strategy!r} differs from config "
                              f"{cfg.strategy!r}")
        self.composite = isinstance(model, CompositeModel)
        if strategy == "single" and self.composite:
            raise ConfigError("the single strategy trains a standalone model, "
                              "not a composite")
        if strategy in ("constjt", "tsjt") and not self.composite:
            raise ConfigError(f"{strategy} requires a composite model")
        if strategy == "single":
            single_role = single_role or cfg.train_submodel
            if single_role not in ("big", "small"):
                raise ConfigError("single training needs single_role='big' or 'small'")
        self.strategy = strategy
        self.model = model
        self.corpus = corpus
        self.cfg = cfg
        self.out_dir = Path(out_dir)
        self.run_meta = dict(run_meta or {})
        self.single_role = single_role
        self.small_even = small_even
        self.state = TrainState()

        set_default_dtype(cfg.dtype)
        if self.composite:
            self.opts = {}
            if model.architecture == "shared":
                self.opts["all"] = Adam(dict(model.store.items()), cfg)
            else:
                self.opts["big"] = Adam(model.big.parameters(), cfg)
                self.opts["small"] = Adam(model.small.parameters(), cfg)
        else:
            self.opts = {"all": Adam(model.parameters(), cfg)}

    # -- checkpointing ------------------------------------------------------

    def _ckpt_dir(self) -> Path:
        d = self.out_dir / "checkpoints"
        d.mkdir(parents=True, exist_ok=True)
        return d

    def _save_checkpoint(self, name: str) -> Path:
        path = self._ckpt_dir() / name
        opt_arrays = {}
        for group, opt in self.opts.items():
            opt_arrays.update(opt.state_arrays(group))
        train_state = self.state.as_dict()
        train_state["adam_t"] = {g: o.t for g, o in self.opts.items()}
        if self.composite:
            ckpt_io.save_composite(path, self.model, small_even=self.small_even,
                                   train_state=train_state, opt_arrays=opt_arrays)
        else:
            ckpt_io.save_model(path, self.model, train_state=train_state,
                               opt_arrays=opt_arrays)
        return path

    def _restore_latest(self) -> bool:
        d = self.out_dir / "checkpoints"
        if not d.exists():
            return False
        steps = sorted(d.glob("step*.ckpt"))
        if not steps:
            return False
        ckpt = ckpt_io.read_checkpoint(steps[-1])
        store = self.model.store if self.composite else self.model.store
        ckpt_io._fill_store(store, ckpt.params)
        ts = ckpt.train_state or {}
        adam_t = ts.pop("adam_t", {})
        self.state = TrainState(**ts)
        for group, opt in self.opts.items():
            opt.load_state_arrays(group, ckpt.opt, adam_t.get(group, 0))
        return True

    # -- objective assembly per update --------------------------------------

    def single_update(self, micros, lr: float) -> dict:
        opt = self.opts["all"]
        total_tokens = sum(b.n_target_tokens for b in micros)
        ce_acc = bal_acc = 0.0
        has_moe = self.model.cfg.kind == "moe"
        for b in micros:
            w = b.n_target_tokens / total_tokens
            with trace() as tape:
                logits, bal = self.model.forward(b)
                ce = cross_entropy(logits, b.dec_out, b.dec_mask)
                obj = composite_objective(ce, None, bal if has_moe else None,
                                          alpha=0.0, stage=2,
                                          balance_coeff=self.cfg.objective.balance_coeff)
                tape.backward(mul(obj, w))
            ce_acc += ce.item() * w
            bal_acc += bal.item() * w
        losses = {"ce": ce_acc, "balancing": bal_acc if has_moe else None}
        if not _finite(losses):
            raise TrainingDiverged(self.state.step, losses)
        clip_global_norm(opt.params, self.cfg.grad_clip)
        opt.step(lr)
        opt.zero_grads()
        role = self.single_role
        return {"ce_big": ce_acc if role == "big" else None,
                "ce_small": ce_acc if role == "small" else None,
                "kl": None,
                "balancing": bal_acc if has_moe else None}

    def tsjt_step(self, micros, lr: float, use_kl: bool) -> dict:
        comp = self.model
        obj_cfg = self.cfg.objective
        shared = comp.architecture == "shared"
        total_tokens = sum(b.n_target_tokens for b in micros)
        ce_b_acc = ce_s_acc = kl_acc = bal_acc = 0.0
        stage = 1 if use_kl else 2
        small_has_moe = comp.small.cfg.kind == "moe"
        for b in micros:
            w = b.n_target_tokens / total_tokens
            with trace() as tape:
                logits_b, bal_b = comp.big.forward(b)
                logits_s, bal_s = comp.small.forward(b)
                ce_b = cross_entropy(logits_b, b.dec_out, b.dec_mask)
                ce_s = cross_entropy(logits_s, b.dec_out, b.dec_mask)
                if use_kl:
                    kl_b = symmetric_kl(logits_b, logits_s.detach(), b.dec_mask)
                    kl_s = symmetric_kl(logits_b.detach(), logits_s, b.dec_mask)
                    kl_val = kl_b.item()
                else:
                    kl_b = kl_s = None
                    kl_val = symmetric_kl_value(logits_b.data, logits_s.data, b.dec_mask)
                obj_b = composite_objective(ce_b, kl_b, bal_b, obj_cfg.alpha_big,
                                            stage, obj_cfg.balance_coeff)
                obj_s = composite_objective(ce_s, kl_s,
                                            bal_s if small_has_moe else None,
                                            obj_cfg.alpha_small,
                                            stage, obj_cfg.balance_coeff)
                if shared:
                    tape.backward(mul(obj_b + obj_s, w))
                else:
                    tape.backward(mul(obj_b, w))
                    tape.backward(mul(obj_s, w))
            ce_b_acc += ce_b.item() * w
            ce_s_acc += ce_s.item() * w
            kl_acc += kl_val * w
            bal_acc += bal_b.item() * w
        losses = {"ce_big": ce_b_acc, "ce_small": ce_s_acc, "kl": kl_acc,
                  "balancing": bal_acc}
        if not _finite(losses):
            raise TrainingDiverged(self.state.step, losses)
        if shared:
            opt = self.opts["all"]
            clip_global_norm(opt.params, self.cfg.grad_clip)
            opt.step(lr)
            opt.zero_grads()
        else:
            for group in ("big", "small"):  # MoE submodel steps first
                opt = self.opts[group]
                clip_global_norm(opt.params, self.cfg.grad_clip)
                opt.step(lr)
                opt.zero_grads()
        return losses

    # -- evaluation ----------------------------------------------------------

    def _eval_record(self) -> dict:
        from .evaluation import evaluate_model

        rec = {"kind": "eval", "step": self.state.step,
               "bleu_big": None, "bleu_small": None}
        if self.composite:
            rec["bleu_big"] = evaluate_model(self.model.big, self.corpus, "valid")["bleu"]
            rec["bleu_small"] = evaluate_model(self.model.small, self.corpus, "valid")["bleu"]
        else:
            key = "bleu_big" if self.single_role == "big" else "bleu_small"
            rec[key] = evaluate_model(self.model, self.corpus, "valid")["bleu"]
        return rec

    # -- main loop ------------------------------------------------------------

    def run(self, resume: bool = False) -> RunResult:
        cfg = self.cfg
        rows = self.corpus.rows("train")
        resumed = resume and self._restore_latest()
        metrics_path = self.out_dir / "metrics.jsonl"
        self.out_dir.mkdir(parents=True, exist_ok=True)
        writer = MetricsWriter(metrics_path,
                               keep_until_step=self.state.step if resumed else None)
        if not resumed:
            meta = {"kind": "meta", "format": "multicap-metrics", "version": 1,
                    "strategy": self.strategy,
                    "architecture": self.model.architecture if self.composite else "single",
                    "single_role": self.single_role,
                    "seed": cfg.seed, "dtype": cfg.dtype,
                    "config_hash": self.run_meta.get("config_hash"),
                    "compare_key": self.run_meta.get("compare_key"),
                    "config": self.run_meta.get("config")}
            writer.write(meta)
        t0 = time.monotonic()
        vocab = self.corpus.vocab.size
        is_tsjt = self.strategy == "tsjt"
        start_epoch = self.state.epoch
        try:
            for epoch in range(start_epoch, cfg.max_epochs):
                self.state.epoch = epoch
                micro = make_batches(rows, cfg.micro_budget, vocab,
                                     seed=cfg.seed, epoch=epoch)
                updates = group_updates(micro, cfg.tokens_per_update)
                skip = self.state.update_in_epoch if (resumed and epoch == start_epoch) else 0
                for ui in range(skip, len(updates)):
                    self.state.step += 1
                    self.state.update_in_epoch = ui + 1
                    lr = lr_schedule(self.state.step, cfg)
                    if self.strategy == "single":
                        vals = self.single_update(updates[ui], lr)
                        stage_field = None
                    else:
                        use_kl = True if self.strategy == "constjt" else self.state.stage == 1
                        vals = self.tsjt_step(updates[ui], lr, use_kl)
                        stage_field = 1 if self.strategy == "constjt" else self.state.stage
                        self.state.kl_ema = update_kl_ema(self.state.kl_ema, vals["kl"],
                                                          cfg.kl_ema_decay)
                    writer.write({"kind": "update", "step": self.state.step,
                                  "stage": stage_field, "lr": lr,
                                  "ce_big": vals["ce_big"], "ce_small": vals["ce_small"],
                                  "kl": vals["kl"], "balancing": vals["balancing"],
                                  "kl_ema": self.state.kl_ema
                                  if self.strategy != "single" else None})
                    if is_tsjt and self.state.step % cfg.switch_check_interval == 0:
                        if maybe_switch_stage(self.state, cfg):
                            writer.write({"kind": "switch", "step": self.state.step,
                                          "kl_ema": self.state.kl_ema})
                            self._save_checkpoint(f"step{self.state.step:07d}.ckpt")
                    if cfg.valid_interval and self.state.step % cfg.valid_interval == 0:
                        writer.write(self._eval_record())
                    if (cfg.checkpoint_interval
                            and self.state.step % cfg.checkpoint_interval == 0):
                        self._save_checkpoint(f"step{self.state.step:07d}.ckpt")
                self.state.update_in_epoch = 0
                self.state.epoch = epoch + 1
            writer.write({"kind": "end", "step": self.state.step})
            final = self._save_checkpoint("final.ckpt")
        finally:
            writer.close()
        info = {"wall_time_s": time.monotonic() - t0, "completed": True,
                "total_updates": self.state.step}
        (self.out_dir / "run_info.json").write_text(json.dumps(info, indent=2))
        return RunResult(metrics_path=metrics_path, final_checkpoint=final,
                         state=self.state)


def run_strategy(strategy: str, model, corpus, cfg: TrainerConfig, out_dir,
                 run_meta: dict | None = None, single_role: str | None = None,
                 small_even: str = "private", resume: bool = False) -> RunResult:
    """Train `model` on `corpus` under the given strategy; returns the final
    checkpoint path, metrics log path, and end state."""
    trainer = Trainer(strategy, model, corpus, cfg, out_dir, run_meta=run_meta,
                      single_role=single_role, small_even=small_even)
    return trainer.run(resume=resume)
