"""Greedy decoding and corpus-level evaluation (BLEU-4, exact match,
token accuracy) on the synthetic test sets."""

from __future__ import annotations

from collections import Counter
from math import exp, log

import numpy as np

from .data import BOS, EOS, PAD, Corpus, make_batch
from .errors import ContractError
from .layers import decode_stack, encode_stack


def greedy_decode(model, batch, max_len: int) -> list:
    """Argmax decoding until EOS or max_len; EOS is not included in the output.

    Deterministic: argmax ties break to the lowest token id.  Rows that
    have finished keep a PAD placeholder so the batch stays rectangular.
    """
    if max_len < 1:
        raise ContractError("max_len must be at least 1")
    params, plan = model.store, model.plan
    memory, _ = encode_stack(params, plan, batch.src_ids, batch.src_mask)
    n = batch.src_ids.shape[0]
    dec = np.full((n, 1), BOS, dtype=np.int64)
    done = np.zeros(n, dtype=bool)
    outputs: list = [[] for _ in range(n)]
    for _ in range(max_len):
        logits, _ = decode_stack(params, plan, memory, batch.src_mask, dec,
                                 np.ones_like(dec, dtype=bool))
        nxt = np.argmax(logits.data[:, -1, :], axis=-1)
        nxt = np.where(done, PAD, nxt)
        for i in range(n):
            if not done[i]:
                if nxt[i] == EOS:
                    done[i] = True
                else:
                    outputs[i].append(int(nxt[i]))
        if done.all():
            break
        dec = np.concatenate([dec, nxt[:, None]], axis=1)
    return outputs


def _ngrams(seq, n):
    return Counter(tuple(seq[i:i + n]) for i in range(len(seq) - n + 1))


def corpus_bleu(pairs, max_order: int = 4, smooth: bool = False) -> float:
    """Corpus BLEU in percent: clipped n-gram precisions pooled over the
    corpus, geometric mean over orders, times a brevity penalty.

    Without smoothing, any order with zero matches makes the score 0
    (strict geometric mean).  smooth=True applies exponential smoothing:
    each zero-match order contributes 1/(2^k * total) with k counting the
    zero orders seen so far.
    """
    if not pairs:
        raise ContractError("corpus_bleu of an empty pair list")
    matches = [0] * max_order
    totals = [0] * max_order
    hyp_len = ref_len = 0
    for hyp, ref in pairs:
        hyp_len += len(hyp)
        ref_len += len(ref)
        for n in range(1, max_order + 1):
            h = _ngrams(hyp, n)
            r = _ngrams(ref, n)
            totals[n - 1] += max(len(hyp) - n + 1, 0)
            matches[n - 1] += sum(min(c, r[k]) for k, c in h.items())
    if min(totals) == 0:
        return 0.0
    log_sum = 0.0
    smooth_scale = 1.0
    for m, t in zip(matches, totals):
        if m == 0:
            if not smooth:
                return 0.0
            smooth_scale *= 2.0
            log_sum += log(1.0 / (smooth_scale * t))
        else:
            log_sum += log(m / t)
    bp = 1.0 if hyp_len > ref_len else exp(1.0 - ref_len / max(hyp_len, 1))
    return 100.0 * bp * exp(log_sum / max_order)


def token_accuracy(pairs) -> float:
    """Matching tokens at aligned positions over the total reference length."""
    match = total = 0
    for hyp, ref in pairs:
        total += len(ref)
        match += sum(1 for h, r in zip(hyp, ref) if h == r)
    return match / total if total else 0.0


def exact_match_rate(pairs) -> float:
    return sum(1 for hyp, ref in pairs if list(hyp) == list(ref)) / len(pairs)


def score_pairs(pairs, smooth: bool = False) -> dict:
    return {"bleu": corpus_bleu(pairs, smooth=smooth),
            "exact_match": exact_match_rate(pairs),
            "token_accuracy": token_accuracy(pairs)}


def evaluate_model(model, corpus: Corpus, split: str = "test", max_len: int | None = None,
                   rows_per_batch: int = 256, smooth: bool = False) -> dict:
    """Decode every group of a split and score it.

    Returns overall metrics plus per-(language, direction) records and
    per-direction macro averages (arithmetic means over languages).
    """
    groups = corpus.splits.get(split, [])
    groups = [g for g in groups if g.pairs]
    if not groups:
        raise ContractError(f"split {split!r} is empty")
    if max_len is None:
        max_len = corpus.config.length_range[1] + 2
    per_group = []
    all_pairs = []
    for g in groups:
        hyps = []
        for i in range(0, len(g.pairs), rows_per_batch):
            chunk = g.pairs[i:i + rows_per_batch]
            batch = make_batch(chunk, corpus.vocab.size)
            hyps.extend(greedy_decode(model, batch, max_len))
        scored = [(h, ref) for h, (_, ref) in zip(hyps, g.pairs)]
        all_pairs.extend(scored)
        rec = {"lang": g.lang, "direction": g.direction, "count": len(g.pairs)}
        rec.update(score_pairs(scored, smooth=smooth))
        per_group.append(rec)
    macro = {}
    for direction in ("xe", "ex"):
        rows = [r for r in per_group if r["direction"] == direction]
        if rows:
            macro[direction] = {k: sum(r[k] for r in rows) / len(rows)
                                for k in ("bleu", "exact_match", "token_accuracy")}
    result = score_pairs(all_pairs, smooth=smooth)
    result["per_group"] = per_group
    result["macro"] = macro
    return result
