"""Synthetic multilingual translation corpora with controllable resource skew.

Each toy language is a bijective transform on token sequences, so an exact
reference translation always exists.  A pair (e, x) with x = transform(e)
yields two training rows, one per direction.  Every source row starts with
a tag token identifying the translation task (language plus direction);
with random-token sentences the source text alone cannot identify the
task, so the tag carries the direction as well.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ContractError

PAD, BOS, EOS, UNK = 0, 1, 2, 3

TRANSFORMS = ("copy", "reverse", "substitution", "swap")
TIERS = ("high", "medium", "low")
DIRECTIONS = ("xe", "ex")  # toy analogues of X->En and En->X


@dataclass(frozen=True)
class ToyLanguageSpec:
    name: str
    transform: str
    tier: str
    train_pairs: int
    key: int = 0  # substitution shift

    def __post_init__(self):
        if self.transform not in TRANSFORMS:
            raise ConfigError(f"unknown transform {self.transform!r}; "
                              f"expected one of {TRANSFORMS}")
        if self.tier not in TIERS:
            raise ConfigError(f"unknown tier {self.tier!r}; expected one of {TIERS}")
        if self.train_pairs < 1:
            raise ConfigError("train_pairs must be positive")


@dataclass(frozen=True)
class CorpusConfig:
    vocab_size: int
    languages: tuple
    length_range: tuple = (4, 12)
    seed: int = 0
    valid_pairs: int = 200
    test_pairs: int = 300

    def __post_init__(self):
        if isinstance(self.languages, list):
            object.__setattr__(self, "languages", tuple(self.languages))
        if isinstance(self.length_range, list):
            object.__setattr__(self, "length_range", tuple(self.length_range))
        n = len(self.languages)
        if n == 0:
            raise ConfigError("at least one language is required")
        if len({lang.name for lang in self.languages}) != n:
            raise ConfigError("language names must be unique")
        if self.vocab_size < 8 + n:
            raise ConfigError(f"vocab_size must be at least {8 + n} for {n} languages")
        lo, hi = self.length_range
        if lo < 1 or hi < lo:
            raise ConfigError(f"invalid length_range {self.length_range}")
        if self.valid_pairs < 1 or self.test_pairs < 1:
            raise ConfigError("valid_pairs and test_pairs must be positive")


class Vocab:
    """Fixed id layout: 4 specials, one tag per (language, direction),
    then the content alphabet shared by all languages."""

    def __init__(self, vocab_size: int, lang_names):
        self.size = vocab_size
        self.lang_names = list(lang_names)
        self._tags = {}
        next_id = 4
        for name in self.lang_names:
            for direction in DIRECTIONS:
                self._tags[(name, direction)] = next_id
                next_id += 1
        self.content_base = next_id
        self.content_size = vocab_size - next_id
        if self.content_size < 2:
            raise ConfigError(
                f"vocab_size {vocab_size} leaves only {self.content_size} content tokens")

    def tag(self, lang: str, direction: str) -> int:
        return self._tags[(lang, direction)]

    def layout(self) -> dict:
        return {"size": self.size,
                "specials": {"pad": PAD, "bos": BOS, "eos": EOS, "unk": UNK},
                "tags": {f"{l}.{d}": t for (l, d), t in self._tags.items()},
                "content_base": self.content_base,
                "content_size": self.content_size}


def apply_transform(spec: ToyLanguageSpec, tokens, vocab: Vocab) -> list:
    """The language's bijection, mapping the pivot sentence to its translation."""
    toks = list(tokens)
    if spec.transform == "copy":
        return toks
    if spec.transform == "reverse":
        return toks[::-1]
    if spec.transform == "substitution":
        base, size = vocab.content_base, vocab.content_size
        return [base + (t - base + spec.key) % size for t in toks]
    if spec.transform == "swap":
        out = list(toks)
        for i in range(0, len(out) - 1, 2):
            out[i], out[i + 1] = out[i + 1], out[i]
        return out
    raise ConfigError(f"unknown transform {spec.transform!r}")


def invert_transform(spec: ToyLanguageSpec, tokens, vocab: Vocab) -> list:
    if spec.transform == "substitution":
        base, size = vocab.content_base, vocab.content_size
        return [base + (t - base - spec.key) % size for t in tokens]
    return apply_transform(spec, tokens, vocab)  # the others are involutions


@dataclass
class PairGroup:
    lang: str
    direction: str
    pairs: list  # [(src ids incl tag+eos, tgt ids raw)]


@dataclass
class Corpus:
    config: CorpusConfig
    vocab: Vocab
    splits: dict = field(default_factory=dict)  # split -> [PairGroup]

    def rows(self, split: str) -> list:
        out = []
        for group in self.splits[split]:
            out.extend(group.pairs)
        return out


def _sample_sentences(rng, count, lo, hi, base, size, taken):
    out = []
    while len(out) < count:
        length = int(rng.integers(lo, hi + 1))
        sent = tuple(int(t) for t in rng.integers(base, base + size, size=length))
        if sent in taken:
            continue
        taken.add(sent)
        out.append(list(sent))
    return out


def generate_corpus(cfg: CorpusConfig) -> Corpus:
    """Deterministic corpus from the config seed.

    Train/valid/test pivot sentences are pairwise disjoint per language;
    each pair is emitted in both directions.
    """
    vocab = Vocab(cfg.vocab_size, [lang.name for lang in cfg.languages])
    lo, hi = cfg.length_range
    corpus = Corpus(cfg, vocab, {s: [] for s in ("train", "valid", "test")})
    for li, lang in enumerate(cfg.languages):
        rng = np.random.default_rng([cfg.seed, li])
        taken: set = set()
        counts = {"train": lang.train_pairs, "valid": cfg.valid_pairs,
                  "test": cfg.test_pairs}
        for split, count in counts.items():
            pivots = _sample_sentences(rng, count, lo, hi, vocab.content_base,
                                       vocab.content_size, taken)
            by_dir = {d: [] for d in DIRECTIONS}
            for e in pivots:
                x = apply_transform(lang, e, vocab)
                by_dir["xe"].append(([vocab.tag(lang.name, "xe")] + x + [EOS], list(e)))
                by_dir["ex"].append(([vocab.tag(lang.name, "ex")] + list(e) + [EOS], x))
            for d in DIRECTIONS:
                corpus.splits[split].append(PairGroup(lang.name, d, by_dir[d]))
    return corpus


# ---------------------------------------------------------------------------
# on-disk format: one pair per line, tab-separated id sequences + manifest


def _pair_lines(pairs):
    return "".join(f"{' '.join(map(str, s))}\t{' '.join(map(str, t))}\n" for s, t in pairs)


def write_corpus(corpus: Corpus, out_dir) -> dict:
    """Write split files and manifest.json; returns the manifest."""
    from pathlib import Path

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = {}
    for split, groups in corpus.splits.items():
        for g in groups:
            fname = f"{split}.{g.lang}.{g.direction}.tsv"
            payload = _pair_lines(g.pairs).encode("utf-8")
            (out / fname).write_bytes(payload)
            files[fname] = hashlib.sha256(payload).hexdigest()
    manifest = {
        "config": dataclasses.asdict(corpus.config),
        "vocab": corpus.vocab.layout(),
        "files": files,
    }
    manifest["manifest_hash"] = hashlib.sha256(
        json.dumps(manifest, sort_keys=True).encode()).hexdigest()
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return manifest


def load_corpus(corpus_dir) -> Corpus:
    from pathlib import Path

    root = Path(corpus_dir)
    manifest_path = root / "manifest.json"
    if not manifest_path.exists():
        raise ContractError(f"no corpus manifest at {manifest_path}")
    manifest = json.loads(manifest_path.read_text())
    raw = manifest["config"]
    langs = tuple(ToyLanguageSpec(**lang) for lang in raw.pop("languages"))
    cfg = CorpusConfig(languages=langs, **{k: tuple(v) if isinstance(v, list) else v
                                           for k, v in raw.items()})
    vocab = Vocab(cfg.vocab_size, [lang.name for lang in cfg.languages])
    corpus = Corpus(cfg, vocab, {s: [] for s in ("train", "valid", "test")})
    for split in corpus.splits:
        for lang in cfg.languages:
            for d in DIRECTIONS:
                fname = f"{split}.{lang.name}.{d}.tsv"
                pairs = []
                for line in (root / fname).read_text().splitlines():
                    s, t = line.split("\t")
                    pairs.append(([int(v) for v in s.split()],
                                  [int(v) for v in t.split()]))
                corpus.splits[split].append(PairGroup(lang.name, d, pairs))
    return corpus


# ---------------------------------------------------------------------------
# batching


@dataclass
class Batch:
    """Padded id matrices plus masks; masks are True at real tokens."""

    src_ids: np.ndarray   # [B, S]
    src_mask: np.ndarray  # [B, S] bool
    tgt_ids: np.ndarray   # [B, T] raw target, no bos/eos
    tgt_mask: np.ndarray  # [B, T] bool
    dec_in: np.ndarray    # [B, T+1] bos + target
    dec_out: np.ndarray   # [B, T+1] target + eos
    dec_mask: np.ndarray  # [B, T+1] bool
    tags: np.ndarray      # [B] the leading tag of each source row
    vocab_size: int

    @property
    def n_rows(self):
        return self.src_ids.shape[0]

    @property
    def n_target_tokens(self):
        return int(self.dec_mask.sum())


def _pad_matrix(seqs, width):
    out = np.full((len(seqs), width), PAD, dtype=np.int64)
    for i, s in enumerate(seqs):
        out[i, : len(s)] = s
    return out


def make_batch(pairs, vocab_size: int) -> Batch:
    srcs = [s for s, _ in pairs]
    tgts = [t for _, t in pairs]
    S = max(len(s) for s in srcs)
    T = max(len(t) for t in tgts)
    src = _pad_matrix(srcs, S)
    tgt = _pad_matrix(tgts, T)
    dec_in = _pad_matrix([[BOS] + t for t in tgts], T + 1)
    dec_out = _pad_matrix([t + [EOS] for t in tgts], T + 1)
    return Batch(src_ids=src, src_mask=src != PAD,
                 tgt_ids=tgt, tgt_mask=tgt != PAD,
                 dec_in=dec_in, dec_out=dec_out, dec_mask=dec_out != PAD,
                 tags=src[:, 0].copy(), vocab_size=vocab_size)


def make_batches(rows, tokens_per_batch: int, vocab_size: int, seed=None,
                 epoch: int = 0) -> list:
    """Length-bucketed batches capped by raw target-token count.

    A row costs len(target); rows are (optionally) shuffled by (seed,
    epoch), stably ordered by cost, and packed greedily in order, so equal
    cost keeps the incoming order.  seed=None keeps corpus order and skips
    the final batch-order shuffle.
    """
    if not rows:
        raise ContractError("cannot batch an empty split")
    costs = np.array([len(t) for _, t in rows])
    longest = max(max(len(s), len(t)) for s, t in rows)
    if longest > tokens_per_batch:
        raise ContractError(
            f"a sentence of length {longest} exceeds the batch budget {tokens_per_batch}")
    order = np.arange(len(rows))
    rng = None
    if seed is not None:
        rng = np.random.default_rng([seed, epoch])
        order = rng.permutation(len(rows))
    order = order[np.argsort(costs[order], kind="stable")]

    batches = []
    cur: list = []
    cur_cost = 0
    for i in order:
        c = int(costs[i])
        if cur and cur_cost + c > tokens_per_batch:
            batches.append(cur)
            cur, cur_cost = [], 0
        cur.append(rows[i])
        cur_cost += c
    if cur:
        batches.append(cur)
    if rng is not None:
        batches = [batches[j] for j in rng.permutation(len(batches))]
    return [make_batch(b, vocab_size) for b in batches]


def group_updates(batches, tokens_per_update: int) -> list:
    """Group consecutive micro-batches into updates of roughly the token
    budget: a group closes before the next batch would push it past the
    budget, and always holds at least one batch."""
    updates = []
    cur: list = []
    cur_tokens = 0
    for b in batches:
        n = int(b.tgt_mask.sum())
        if cur and cur_tokens + n > tokens_per_update:
            updates.append(cur)
            cur, cur_tokens = [], 0
        cur.append(b)
        cur_tokens += n
    if cur:
        updates.append(cur)
    return updates
