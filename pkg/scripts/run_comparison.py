#!/usr/bin/env python3
"""Three-way strategy comparison on one composite spec.

Trains the single baselines (big and small), constant joint training, and
two-stage joint training from a single base spec, then writes the
trajectory / KL / summary tables next to the logs and prints test-set
scores per strategy.

Usage:
    python scripts/run_comparison.py --spec specs/shared_tsjt.yaml
                                     [--seed N] [--out DIR]
The base spec must use a composite architecture and strategy tsjt (its
t_sep is kept); the other strategies are derived from it.
"""

import argparse
import dataclasses
import json
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from multicap import analysis
from multicap.arch import build_indep, build_shared, build_single, extract_submodel
from multicap.config import load_runspec, run_meta
from multicap.data import generate_corpus, load_corpus, write_corpus
from multicap.evaluation import evaluate_model
from multicap.tensor import set_default_dtype
from multicap.trainer import run_strategy


def derive(spec, strategy, train_submodel=None):
    trainer = dataclasses.replace(spec.trainer, strategy=strategy,
                                  train_submodel=train_submodel,
                                  t_sep=spec.trainer.t_sep if strategy == "tsjt" else None)
    arch = "single" if strategy == "single" else spec.model.architecture
    model = dataclasses.replace(spec.model, architecture=arch)
    return dataclasses.replace(spec, trainer=trainer, model=model)


def build_for(spec):
    m, seed, vocab = spec.model, spec.trainer.seed, spec.data.vocab_size
    if spec.trainer.strategy == "single":
        cfg = m.big if spec.trainer.train_submodel == "big" else m.small
        return build_single(cfg, vocab, seed)
    if m.architecture == "shared":
        return build_shared(m.big, m.small, vocab, seed, small_even=m.small_even)
    return build_indep(m.big, m.small, vocab, seed)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--spec", required=True)
    ap.add_argument("--seed", type=int, default=None)
    ap.add_argument("--out", default=None)
    args = ap.parse_args()

    base = load_runspec(args.spec)
    if base.trainer.strategy != "tsjt":
        raise SystemExit("base spec must use strategy tsjt (t_sep included)")
    if args.seed is not None:
        base = dataclasses.replace(base, trainer=dataclasses.replace(base.trainer,
                                                                     seed=args.seed))
    out_root = Path(args.out or base.output.dir)
    corpus_dir = Path(base.output.corpus_dir)
    if not (corpus_dir / "manifest.json").exists():
        write_corpus(generate_corpus(base.data), corpus_dir)
    corpus = load_corpus(corpus_dir)
    set_default_dtype(base.trainer.dtype)

    jobs = [("single_big", derive(base, "single", "big")),
            ("single_small", derive(base, "single", "small")),
            ("constjt", derive(base, "constjt")),
            ("tsjt", base)]
    logs = []
    scores = {}
    for name, spec in jobs:
        model = build_for(spec)
        role = spec.trainer.train_submodel
        res = run_strategy(spec.trainer.strategy, model, corpus, spec.trainer,
                           out_root / name, run_meta=run_meta(spec), single_role=role,
                           small_even=spec.model.small_even)
        logs.append(res.metrics_path)
        if spec.trainer.strategy == "single":
            scores[name] = evaluate_model(model, corpus, "test")
        else:
            for which in ("big", "small"):
                scores[f"{name}_{which}"] = evaluate_model(
                    extract_submodel(model, which), corpus, "test")
        print(f"{name}: done ({res.state.step} updates, "
              f"switch={res.state.switch_step})", flush=True)

    loaded = [analysis.load_run_log(p) for p in logs]
    traj = analysis.loss_trajectory(loaded, window=9,
                                    thresholds=[3.0, 2.0, 1.5, 1.0, 0.5])
    analysis.write_table(out_root / "trajectory.tsv", traj["rows"],
                         ["step", "strategy", "ce_big", "ce_small"])
    analysis.write_table(out_root / "time_to_loss.tsv", traj["time_to_loss"],
                         ["strategy", "submodel", "threshold", "step"])
    by_name = dict(zip([j[0] for j in jobs], loaded))
    kl = analysis.kl_trajectory(by_name["constjt"], by_name["tsjt"])
    analysis.write_table(out_root / "kl_compare.tsv", kl["rows"],
                         ["step", "constjt", "tsjt"])
    print(f"kl crossover at step {kl['crossover']}")
    summary = {name: {"exact_match": s["exact_match"], "bleu": s["bleu"],
                      "token_accuracy": s["token_accuracy"]}
               for name, s in scores.items()}
    (out_root / "test_scores.json").write_text(json.dumps(summary, indent=2))
    print(json.dumps(summary, indent=2))


if __name__ == "__main__":
    main()
