#!/usr/bin/env python3
"""Suggest a stage-separation threshold for a spec.

Runs constant joint training for one epoch on the spec's configuration and
prints half the end-of-epoch KL moving average, which is a reasonable
default for trainer.t_sep: the switch then fires once the models agree
about twice as well as they did after the first pass over the data.

Usage: python scripts/calibrate_threshold.py --spec specs/shared_tsjt.yaml
"""

import argparse
import dataclasses
import json
import sys
import tempfile
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from multicap.arch import build_indep, build_shared
from multicap.config import load_runspec, run_meta
from multicap.data import generate_corpus, load_corpus, write_corpus
from multicap.tensor import set_default_dtype
from multicap.trainer import run_strategy


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--spec", required=True)
    args = ap.parse_args()

    base = load_runspec(args.spec)
    trainer = dataclasses.replace(base.trainer, strategy="constjt", t_sep=None,
                                  train_submodel=None, max_epochs=1)
    spec = dataclasses.replace(base, trainer=trainer)
    corpus_dir = Path(spec.output.corpus_dir)
    if not (corpus_dir / "manifest.json").exists():
        write_corpus(generate_corpus(spec.data), corpus_dir)
    corpus = load_corpus(corpus_dir)
    set_default_dtype(trainer.dtype)
    m = spec.model
    if m.architecture == "shared":
        comp = build_shared(m.big, m.small, spec.data.vocab_size, trainer.seed,
                            small_even=m.small_even)
    else:
        comp = build_indep(m.big, m.small, spec.data.vocab_size, trainer.seed)
    with tempfile.TemporaryDirectory() as tmp:
        res = run_strategy("constjt", comp, corpus, trainer, tmp,
                           run_meta=run_meta(spec))
        records = [json.loads(line)
                   for line in Path(res.metrics_path).read_text().splitlines()]
    last = [r for r in records if r["kind"] == "update"][-1]
    print(f"end-of-epoch kl_ema: {last['kl_ema']:.6f}")
    print(f"suggested t_sep:     {0.5 * last['kl_ema']:.6f}")


if __name__ == "__main__":
    main()
