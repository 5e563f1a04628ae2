import math

import numpy as np
import pytest

from multicap import tensor as T
from multicap.arch import SubmodelConfig, build_single
from multicap.data import (CorpusConfig, ToyLanguageSpec, generate_corpus,
                           make_batch)
from multicap.errors import ContractError
from multicap.evaluation import (corpus_bleu, evaluate_model, exact_match_rate,
                                 greedy_decode, score_pairs, token_accuracy)
from multicap.losses import cross_entropy
from multicap.trainer import Adam, TrainerConfig, clip_global_norm
from oracles import bleu_by_hand


class TestBleuHandCases:
    """Five fixed cases, each hand-computed in the comments."""

    def test_case1_perfect_match(self):
        pairs = [([5, 6, 7, 8], [5, 6, 7, 8]), ([9, 10, 11, 12, 13], [9, 10, 11, 12, 13])]
        assert corpus_bleu(pairs) == pytest.approx(100.0, abs=1e-9)

    def test_case2_disjoint_tokens(self):
        pairs = [([5, 6, 7, 8], [9, 10, 11, 12])]
        assert corpus_bleu(pairs) == pytest.approx(0.0, abs=1e-9)

    def test_case3_zero_fourgram_strict(self):
        # hyp "a b c d" vs ref "a b c e": p1=3/4, p2=2/3, p3=1/2, p4=0
        # -> strict geometric mean is 0 (smoothing off by default).
        pairs = [([1, 2, 3, 4], [1, 2, 3, 5])]
        assert corpus_bleu(pairs) == pytest.approx(0.0, abs=1e-9)

    def test_case4_all_orders_positive(self):
        # hyp "a b c d e" vs ref "a b c d f": precisions 4/5, 3/4, 2/3, 1/2;
        # geometric mean = 0.2^(1/4); equal lengths -> BP = 1.
        pairs = [([1, 2, 3, 4, 5], [1, 2, 3, 4, 6])]
        expected = 100.0 * (0.2 ** 0.25)
        assert corpus_bleu(pairs) == pytest.approx(expected, abs=1e-9)

    def test_case5_brevity_penalty(self):
        # hyp is a 4-token prefix of the 5-token ref: all precisions 1;
        # BP = exp(1 - 5/4).
        pairs = [([1, 2, 3, 4], [1, 2, 3, 4, 5])]
        expected = 100.0 * math.exp(1.0 - 5.0 / 4.0)
        assert corpus_bleu(pairs) == pytest.approx(expected, abs=1e-9)

    def test_exp_smoothing_case3(self):
        # With exp smoothing the zero-match 4-gram order contributes
        # 1/(2 * 1 total): (3/4 * 2/3 * 1/2 * 1/2)^(1/4) = 0.125^(1/4).
        pairs = [([1, 2, 3, 4], [1, 2, 3, 5])]
        expected = 100.0 * (0.125 ** 0.25)
        assert corpus_bleu(pairs, smooth=True) == pytest.approx(expected, abs=1e-9)

    def test_matches_independent_oracle_on_random_pairs(self):
        rng = np.random.default_rng(5)
        for _ in range(25):
            pairs = []
            for _ in range(rng.integers(1, 6)):
                hyp = list(rng.integers(1, 9, size=rng.integers(4, 10)))
                ref = list(rng.integers(1, 9, size=rng.integers(4, 10)))
                pairs.append((hyp, ref))
            assert corpus_bleu(pairs) == pytest.approx(bleu_by_hand(pairs), abs=1e-9)

    def test_empty_rejected(self):
        with pytest.raises(ContractError):
            corpus_bleu([])


class TestSimpleMetrics:
    def test_token_accuracy(self):
        pairs = [([1, 2, 3], [1, 9, 3]), ([4], [4, 5])]
        assert token_accuracy(pairs) == pytest.approx(3 / 5)

    def test_exact_match(self):
        pairs = [([1, 2], [1, 2]), ([3], [4])]
        assert exact_match_rate(pairs) == 0.5

    def test_score_pairs_keys(self):
        out = score_pairs([([1, 2, 3, 4], [1, 2, 3, 4])])
        assert set(out) == {"bleu", "exact_match", "token_accuracy"}


def tiny_corpus(seed=0):
    langs = (ToyLanguageSpec(name="l1", transform="copy", tier="high", train_pairs=12),)
    cfg = CorpusConfig(vocab_size=16, languages=langs, length_range=(3, 5),
                       seed=seed, valid_pairs=4, test_pairs=4)
    return generate_corpus(cfg)


class TestGreedyDecode:
    def model(self, vocab=16, seed=0):
        cfg = SubmodelConfig(kind="dense", d=16, heads=2, ffn=32, enc_layers=1,
                             dec_layers=1)
        return build_single(cfg, vocab, seed)

    def test_zero_projection_repeats_lowest_id(self):
        model = self.model()
        model.store["emb"].data[:] = 0.0
        batch = make_batch([([6, 7, 2], [8, 9])], 16)
        out = greedy_decode(model, batch, max_len=5)
        assert out == [[0, 0, 0, 0, 0]]  # argmax tie-break: lowest id, never EOS

    def test_memorizes_single_pair(self):
        model = self.model(seed=3)
        batch = make_batch([([5, 6, 7, 2], [7, 6, 5])], 16)
        cfg = TrainerConfig(strategy="single", train_submodel="small", peak_lr=3e-3,
                            warmup_steps=1)
        opt = Adam(model.parameters(), cfg)
        for _ in range(120):
            with T.trace() as tape:
                logits, _ = model.forward(batch)
                loss = cross_entropy(logits, batch.dec_out, batch.dec_mask)
            tape.backward(loss)
            clip_global_norm(opt.params, 1.0)
            opt.step(3e-3)
            opt.zero_grads()
        assert greedy_decode(model, batch, max_len=6) == [[7, 6, 5]]

    def test_invariant_to_appended_padding_rows(self):
        model = self.model(seed=1)
        base = make_batch([([5, 6, 2], [7, 8]), ([9, 10, 11, 2], [12])], 16)
        import dataclasses
        padded = dataclasses.replace(
            base,
            src_ids=np.vstack([base.src_ids, np.zeros((1, base.src_ids.shape[1]), int)]),
            src_mask=np.vstack([base.src_mask, np.zeros((1, base.src_mask.shape[1]), bool)]),
            tgt_ids=np.vstack([base.tgt_ids, np.zeros((1, base.tgt_ids.shape[1]), int)]),
            tgt_mask=np.vstack([base.tgt_mask, np.zeros((1, base.tgt_mask.shape[1]), bool)]),
            dec_in=np.vstack([base.dec_in, np.zeros((1, base.dec_in.shape[1]), int)]),
            dec_out=np.vstack([base.dec_out, np.zeros((1, base.dec_out.shape[1]), int)]),
            dec_mask=np.vstack([base.dec_mask, np.zeros((1, base.dec_mask.shape[1]), bool)]),
            tags=np.concatenate([base.tags, [0]]),
        )
        a = greedy_decode(model, base, max_len=6)
        b = greedy_decode(model, padded, max_len=6)
        assert b[: len(a)] == a

    def test_max_len_contract(self):
        model = self.model()
        batch = make_batch([([5, 2], [6])], 16)
        with pytest.raises(ContractError):
            greedy_decode(model, batch, max_len=0)


class TestEvaluateModel:
    def test_empty_split_rejected(self):
        corpus = tiny_corpus()
        corpus.splits["test"] = []
        model = TestGreedyDecode().model()
        with pytest.raises(ContractError):
            evaluate_model(model, corpus, "test")

    def test_returns_per_group_and_macro(self):
        corpus = tiny_corpus()
        model = TestGreedyDecode().model()
        out = evaluate_model(model, corpus, "test")
        assert {r["direction"] for r in out["per_group"]} == {"xe", "ex"}
        assert set(out["macro"]) == {"xe", "ex"}
        for key in ("bleu", "exact_match", "token_accuracy"):
            assert key in out

    def test_macro_is_mean_over_languages(self):
        langs = (ToyLanguageSpec(name="a", transform="copy", tier="high", train_pairs=5),
                 ToyLanguageSpec(name="b", transform="reverse", tier="low", train_pairs=5))
        cfg = CorpusConfig(vocab_size=20, languages=langs, length_range=(3, 4),
                           seed=2, valid_pairs=3, test_pairs=3)
        corpus = generate_corpus(cfg)
        model = TestGreedyDecode().model(vocab=20)
        out = evaluate_model(model, corpus, "test")
        xe = [r for r in out["per_group"] if r["direction"] == "xe"]
        assert out["macro"]["xe"]["bleu"] == pytest.approx(
            sum(r["bleu"] for r in xe) / len(xe))
