"""Command-line interface: generate / train / evaluate / analyze.

All four subcommands are driven by one declarative spec file, so a full
strategy comparison is four invocations on specs differing only in the
trainer.strategy field.  Exit codes: 0 success, 1 validation failure,
2 runtime failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from pathlib import Path

from . import analysis
from . import checkpoint as ckpt_io
from . import config as cfg_mod
from .arch import build_indep, build_shared, build_single, extract_submodel
from .data import generate_corpus, load_corpus, write_corpus
from .errors import ConfigError, MulticapError, TrainingDiverged
from .evaluation import evaluate_model
from .tensor import set_default_dtype
from .trainer import run_strategy

EXIT_OK, EXIT_VALIDATION, EXIT_RUNTIME = 0, 1, 2

OUTPUT_ROOT_ENV = "MULTICAP_OUT"


def _resolve(path_str: str) -> Path:
    p = Path(path_str)
    root = os.environ.get(OUTPUT_ROOT_ENV)
    if root and not p.is_absolute():
        return Path(root) / p
    return p


def _load_spec(args) -> cfg_mod.RunSpec:
    spec = cfg_mod.load_runspec(args.spec)
    if getattr(args, "seed", None) is not None:
        trainer = dataclasses.replace(spec.trainer, seed=args.seed)
        spec = dataclasses.replace(spec, trainer=trainer)
    return spec


def _build_training_model(spec: cfg_mod.RunSpec):
    """Returns (model_or_composite, single_role)."""
    m = spec.model
    vocab = spec.data.vocab_size
    seed = spec.trainer.seed
    if spec.trainer.strategy == "single":
        role = spec.trainer.train_submodel
        cfg = m.big if role == "big" else m.small
        return build_single(cfg, vocab, seed), role
    if m.architecture == "shared":
        return build_shared(m.big, m.small, vocab, seed, small_even=m.small_even), None
    return build_indep(m.big, m.small, vocab, seed), None


def _load_matching_corpus(spec: cfg_mod.RunSpec):
    corpus_dir = _resolve(spec.output.corpus_dir)
    corpus = load_corpus(corpus_dir)
    on_disk = json.loads(json.dumps(dataclasses.asdict(corpus.config)))
    wanted = cfg_mod.dump_runspec(spec)["data"]
    wanted["length_range"] = list(wanted["length_range"])
    if on_disk != wanted:
        raise ConfigError(
            f"corpus at {corpus_dir} was generated from a different data section; "
            "regenerate with --force or fix the spec")
    return corpus


def cmd_generate(args) -> int:
    spec = _load_spec(args)
    corpus_dir = _resolve(spec.output.corpus_dir)
    manifest_path = corpus_dir / "manifest.json"
    if manifest_path.exists() and not args.force:
        print(f"refusing to overwrite existing corpus at {corpus_dir} "
              "(use --force)", file=sys.stderr)
        return EXIT_VALIDATION
    corpus = generate_corpus(spec.data)
    manifest = write_corpus(corpus, corpus_dir)
    print(f"corpus written to {corpus_dir}")
    print(f"manifest hash: {manifest['manifest_hash']}")
    return EXIT_OK


def _print_dry_run(model, single_role):
    if single_role is not None:
        print(f"single model ({single_role}): {model.param_count()} parameters")
        return
    print(f"architecture: {model.architecture}")
    print(f"big submodel:   {model.big.param_count()} parameters")
    print(f"small submodel: {model.small.param_count()} parameters")
    by_owner: dict = {}
    for name, tensor in model.store.items():
        owner = model.store.owner(name)
        by_owner[owner] = by_owner.get(owner, 0) + tensor.size
    for owner in sorted(by_owner):
        print(f"ownership {owner}: {by_owner[owner]} parameters")


def cmd_train(args) -> int:
    spec = _load_spec(args)
    corpus = _load_matching_corpus(spec)
    set_default_dtype(spec.trainer.dtype)
    model, single_role = _build_training_model(spec)
    if args.dry_run:
        _print_dry_run(model, single_role)
        return EXIT_OK
    out_dir = _resolve(spec.output.dir)
    try:
        result = run_strategy(spec.trainer.strategy, model, corpus, spec.trainer,
                              out_dir, run_meta=cfg_mod.run_meta(spec),
                              single_role=single_role,
                              small_even=spec.model.small_even, resume=args.resume)
    except TrainingDiverged as exc:
        print(f"training aborted: {exc}", file=sys.stderr)
        print("last periodic checkpoint (if any) remains in "
              f"{out_dir / 'checkpoints'}", file=sys.stderr)
        return EXIT_RUNTIME
    print(f"metrics log: {result.metrics_path}")
    print(f"final checkpoint: {result.final_checkpoint}")
    if result.state.switch_step is not None:
        print(f"stage switch at update {result.state.switch_step}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    spec = _load_spec(args)
    corpus = _load_matching_corpus(spec)
    set_default_dtype(spec.trainer.dtype)
    ckpt = ckpt_io.read_checkpoint(_resolve(args.checkpoint))
    if ckpt.architecture == "single":
        model = ckpt_io.restore_model(ckpt)
    else:
        if ckpt.architecture != spec.model.architecture:
            raise ConfigError(
                f"checkpoint architecture {ckpt.architecture!r} does not match "
                f"spec architecture {spec.model.architecture!r}")
        composite = ckpt_io.restore_composite(ckpt)
        model = extract_submodel(composite, args.submodel)
    results = evaluate_model(model, corpus, split=args.split)
    for rec in results["per_group"]:
        print(f"{rec['lang']}.{rec['direction']}: bleu={rec['bleu']:.2f} "
              f"exact={rec['exact_match']:.4f} token_acc={rec['token_accuracy']:.4f} "
              f"({rec['count']} pairs)")
    for direction, m in results["macro"].items():
        print(f"macro {direction}: bleu={m['bleu']:.2f} exact={m['exact_match']:.4f} "
              f"token_acc={m['token_accuracy']:.4f}")
    print(json.dumps({k: results[k] for k in ("bleu", "exact_match", "token_accuracy")}))
    return EXIT_OK


def cmd_analyze(args) -> int:
    logs = [analysis.load_run_log(p) for p in args.logs]
    out_dir = Path(args.out) if args.out else Path(args.logs[0]).parent
    out_dir.mkdir(parents=True, exist_ok=True)

    summaries = [analysis.summarize_run(log) for log in logs]
    columns = ["strategy", "final_ce_big", "final_ce_small", "switch_step",
               "best_valid_bleu_big", "best_valid_bleu_small", "total_updates",
               "wall_time_s"]
    analysis.write_table(out_dir / "summary.tsv", summaries, columns)
    for s in summaries:
        print(json.dumps(s))
    if len(logs) < 2:
        return EXIT_OK

    thresholds = [float(x) for x in args.thresholds.split(",")] if args.thresholds else []
    traj = analysis.loss_trajectory(logs, window=args.window, thresholds=thresholds)
    analysis.write_table(out_dir / "trajectory.tsv", traj["rows"],
                         ["step", "strategy", "ce_big", "ce_small"])
    if traj["time_to_loss"]:
        analysis.write_table(out_dir / "time_to_loss.tsv", traj["time_to_loss"],
                             ["strategy", "submodel", "threshold", "step"])
    by_strategy: dict = {}
    for log in logs:
        by_strategy.setdefault(log.strategy, []).append(log)
    if len(by_strategy.get("constjt", [])) == 1 and len(by_strategy.get("tsjt", [])) == 1:
        kl = analysis.kl_trajectory(by_strategy["constjt"][0], by_strategy["tsjt"][0])
        analysis.write_table(out_dir / "kl_compare.tsv", kl["rows"],
                             ["step", "constjt", "tsjt"])
        print(f"kl crossover: {kl['crossover']}")
    print(f"analysis tables written to {out_dir}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="multicap",
        description="Joint training of paired high/low-capacity seq2seq models")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="generate the synthetic corpus")
    p.add_argument("--spec", required=True)
    p.add_argument("--force", action="store_true")
    p.set_defaults(fn=cmd_generate)

    p = sub.add_parser("train", help="train under the spec's strategy")
    p.add_argument("--spec", required=True)
    p.add_argument("--resume", action="store_true")
    p.add_argument("--dry-run", action="store_true", dest="dry_run")
    p.add_argument("--seed", type=int, default=None, help="override trainer.seed")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("evaluate", help="evaluate a checkpointed (sub)model")
    p.add_argument("--spec", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--submodel", choices=("big", "small"), default="big")
    p.add_argument("--split", default="test", choices=("train", "valid", "test"))
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(fn=cmd_evaluate)

    p = sub.add_parser("analyze", help="produce plot-ready tables from metrics logs")
    p.add_argument("logs", nargs="+")
    p.add_argument("--window", type=int, default=25)
    p.add_argument("--thresholds", default="3.0,2.5,2.0,1.5,1.0,0.5")
    p.add_argument("--out", default=None)
    p.set_defaults(fn=cmd_analyze)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"validation error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except MulticapError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
