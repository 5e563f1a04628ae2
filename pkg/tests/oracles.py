"""Independent oracles shared across the test suite.

Everything here is deliberately naive: finite differences, direct
summations, brute-force enumeration.  None of it may import gradient code
paths from the package under test.
"""

import math

import numpy as np

from multicap.tensor import Tensor


def finite_difference(loss_fn, params, h=1e-4):
    """Central-difference gradients of a scalar function of named parameters.

    loss_fn() -> float re-evaluates the loss from the current parameter
    values; params is a dict name -> Tensor whose .data is perturbed in
    place.  Returns dict name -> gradient array.
    """
    grads = {}
    for name, p in params.items():
        g = np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = loss_fn()
            flat[i] = orig - h
            down = loss_fn()
            flat[i] = orig
            gflat[i] = (up - down) / (2.0 * h)
        grads[name] = g
    return grads


def assert_grads_close(analytic, numeric, rtol=1e-3, atol=1e-6):
    """Relative-tolerance comparison with an absolute floor for near-zeros.

    A missing analytic gradient counts as exact zeros (parameters that no
    computation path touched).
    """
    for name in numeric:
        a = analytic[name]
        n = numeric[name]
        if a is None:
            a = np.zeros_like(n)
        denom = np.maximum(np.abs(n), np.maximum(np.abs(a), 1.0e-3))
        rel = np.abs(a - n) / denom
        worst = rel.max() if rel.size else 0.0
        assert np.allclose(a, n, rtol=rtol, atol=atol) or worst <= rtol, (
            f"gradient mismatch for {name}: max rel err {worst:.3e}"
        )


def kl_direct(p, q):
    """D_KL(p || q) by direct summation over explicit probabilities."""
    total = 0.0
    for pi, qi in zip(p, q):
        if pi > 0:
            total += pi * math.log(pi / qi)
    return total


def symmetric_kl_direct(logits_a, logits_b):
    """Symmetric KL from two logit vectors via explicit softmax + summation."""
    def soft(v):
        m = max(v)
        e = [math.exp(x - m) for x in v]
        z = sum(e)
        return [x / z for x in e]

    p, q = soft(list(logits_a)), soft(list(logits_b))
    return kl_direct(p, q) + kl_direct(q, p)


def ngram_counts(seq, n):
    counts = {}
    for i in range(len(seq) - n + 1):
        key = tuple(seq[i:i + n])
        counts[key] = counts.get(key, 0) + 1
    return counts


def bleu_by_hand(pairs, max_order=4):
    """Corpus BLEU-4 with clipped precisions, geometric mean, brevity penalty.

    pairs: list of (hypothesis tokens, reference tokens).  Returns percent.
    """
    matches = [0] * max_order
    totals = [0] * max_order
    hyp_len = 0
    ref_len = 0
    for hyp, ref in pairs:
        hyp_len += len(hyp)
        ref_len += len(ref)
        for n in range(1, max_order + 1):
            h = ngram_counts(hyp, n)
            r = ngram_counts(ref, n)
            totals[n - 1] += max(len(hyp) - n + 1, 0)
            matches[n - 1] += sum(min(c, r.get(k, 0)) for k, c in h.items())
    if min(totals) == 0 or min(matches) == 0:
        return 0.0
    log_prec = sum(math.log(m / t) for m, t in zip(matches, totals)) / max_order
    bp = 1.0 if hyp_len > ref_len else math.exp(1.0 - ref_len / max(hyp_len, 1))
    return 100.0 * bp * math.exp(log_prec)


def pack_by_budget(costs, budget):
    """Greedy in-order packing: consecutive items while the cost sum fits."""
    batches = []
    cur = []
    cur_cost = 0
    for i, c in enumerate(costs):
        if cur and cur_cost + c > budget:
            batches.append(cur)
            cur = []
            cur_cost = 0
        cur.append(i)
        cur_cost += c
    if cur:
        batches.append(cur)
    return batches


def constant(x):
    """An untracked tensor, for feeding plain values into tensor code."""
    return Tensor(np.asarray(x, dtype=np.float64))
