"""Corpus ingestion: whitespace vocabulary, fixed-length encoding, synthetic corpora.

A corpus is UTF-8 text with one document per line. Sequences never pack
tokens across documents; each chunk is framed ``<s> ... </s>`` and the tail
chunk is padded.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

SPECIAL_TOKENS = ("<pad>", "<s>", "</s>", "<unk>", "[MASK]")
PAD_ID, BOS_ID, EOS_ID, UNK_ID, MASK_ID = range(5)
NUM_SPECIAL = len(SPECIAL_TOKENS)


class CorpusError(ValueError):
    """Unusable corpus or vocabulary input."""


class Vocabulary:
    """Token list with reserved ids 0..4 and per-token corpus frequencies."""

    def __init__(self, tokens: Sequence[str], frequencies: Sequence[int]):
        self.tokens = list(SPECIAL_TOKENS) + list(tokens)
        self.token_to_id = {t: i for i, t in enumerate(self.tokens)}
        if len(self.token_to_id) != len(self.tokens):
            raise CorpusError("duplicate tokens in vocabulary")
        self.frequencies = dict(zip(tokens, frequencies))

    def __len__(self):
        return len(self.tokens)

    def id_of(self, token: str) -> int:
        return self.token_to_id.get(token, UNK_ID)

    def token_of(self, token_id: int) -> str:
        return self.tokens[token_id]

    def frequency_of_id(self, token_id: int) -> int:
        if token_id < NUM_SPECIAL:
            return 0
        return self.frequencies[self.tokens[token_id]]

    def top_frequent_ids(self, count: int) -> np.ndarray:
        """Ids of the ``count`` most frequent regular tokens (stable order)."""
        return np.arange(NUM_SPECIAL, min(NUM_SPECIAL + count, len(self.tokens)))

    def save(self, path) -> None:
        # one "token<TAB>frequency" line per regular token; ids implicit by order
        with open(path, "w", encoding="utf-8") as fh:
            for token in self.tokens[NUM_SPECIAL:]:
                fh.write(f"{token}\t{self.frequencies[token]}\n")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        tokens, freqs = [], []
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                line = line.rstrip("\n")
                if not line:
                    continue
                token, freq = line.split("\t")
                tokens.append(token)
                freqs.append(int(freq))
        return cls(tokens, freqs)

    def to_manifest(self) -> dict:
        return {"tokens": self.tokens[NUM_SPECIAL:], "frequencies": [self.frequencies[t] for t in self.tokens[NUM_SPECIAL:]]}

    @classmethod
    def from_manifest(cls, manifest: dict) -> "Vocabulary":
        return cls(manifest["tokens"], manifest["frequencies"])


def _iter_documents(paths_or_lines) -> Iterable[str]:
    if isinstance(paths_or_lines, (str, Path)):
        paths_or_lines = [paths_or_lines]
    for item in paths_or_lines:
        if isinstance(item, (str, Path)) and Path(str(item)).exists():
            with open(item, encoding="utf-8") as fh:
                for line in fh:
                    yield line
        else:
            yield str(item)


def build_vocab(corpus, min_count: int = 1, max_size: Optional[int] = None) -> Vocabulary:
    """Whitespace tokens sorted by frequency (ties lexicographic).

    ``corpus`` is a path, a list of paths, or a list of raw document lines.
    Tokens below ``min_count`` fall back to <unk> at encode time.
    """
    counts: dict[str, int] = {}
    saw_any = False
    for line in _iter_documents(corpus):
        for token in line.split():
            saw_any = True
            counts[token] = counts.get(token, 0) + 1
    if not saw_any:
        raise CorpusError("empty corpus: no tokens found")
    kept = [(t, c) for t, c in counts.items() if c >= min_count]
    kept.sort(key=lambda tc: (-tc[1], tc[0]))
    if max_size is not None:
        kept = kept[: max(0, max_size - NUM_SPECIAL)]
    return Vocabulary([t for t, _ in kept], [c for _, c in kept])


@dataclass
class CorpusDataset:
    """Fixed-length encoded sequences: ids[B, n] with <s>/</s> framing and padding."""

    ids: np.ndarray
    n: int

    @property
    def pad(self) -> np.ndarray:
        return self.ids == PAD_ID

    def __len__(self):
        return self.ids.shape[0]

    def eligible_counts(self, num_special: int = NUM_SPECIAL) -> np.ndarray:
        """Per-row count of corruption-eligible (regular, non-pad) tokens."""
        return (self.ids >= num_special).sum(axis=1)

    def rows_by_eligibility(self) -> dict[int, np.ndarray]:
        """Row indices grouped by eligible-token count; keeps batches rectangular."""
        counts = self.eligible_counts()
        return {int(c): np.nonzero(counts == c)[0] for c in np.unique(counts)}


def encode_corpus(corpus, vocab: Vocabulary, n: int) -> CorpusDataset:
    """Encode documents into length-``n`` chunks, one or more per document.

    Every chunk starts with <s> and carries at most n-2 payload tokens before
    </s>; the tail chunk is padded. Documents never share a chunk.
    """
    if n < 3:
        raise CorpusError(f"sequence length {n} leaves no room for payload")
    payload = n - 2
    rows = []
    for line in _iter_documents(corpus):
        token_ids = [vocab.id_of(t) for t in line.split()]
        if not token_ids:
            continue
        for start in range(0, len(token_ids), payload):
            chunk = token_ids[start : start + payload]
            row = [BOS_ID] + chunk + [EOS_ID]
            row.extend([PAD_ID] * (n - len(row)))
            rows.append(row)
    if not rows:
        raise CorpusError("empty corpus: no documents to encode")
    return CorpusDataset(np.asarray(rows, dtype=np.int64), n)


def decode_ids(ids: Sequence[int], vocab: Vocabulary) -> list[str]:
    return [vocab.token_of(int(i)) for i in ids if int(i) not in (PAD_ID, BOS_ID, EOS_ID)]


# ---------------------------------------------------------------------------
# synthetic corpora

TRIGRAM_SYMBOLS = 200
_TRIGRAM_BRANCH = 3
_TRIGRAM_PROBS = (0.7, 0.2, 0.1)

CLASS_KEYWORDS = (
    tuple(f"keya{i}" for i in range(8)),
    tuple(f"keyb{i}" for i in range(8)),
)


def _trigram_tables(rng: np.random.Generator, symbols: int):
    # successor sets keyed by the previous symbol, successor order permuted by
    # the symbol before it: an order-2 chain that is learnable from one neighbor
    successors = rng.integers(0, symbols, size=(symbols, _TRIGRAM_BRANCH))
    return successors


def synth_corpus(kind: str, size: int, seed: int, out_dir=None):
    """Generate a synthetic corpus of ``size`` documents.

    ``trigram_grammar``: seeded order-2 Markov chain over TRIGRAM_SYMBOLS
    symbols with a peaked successor distribution, so masked prediction with
    context beats any unigram model by a wide margin.

    ``separable_classification``: two classes told apart by disjoint keyword
    sets; returns (lines, labels). Writes corpus.txt (and labels.txt) when
    ``out_dir`` is given.
    """
    rng = np.random.default_rng(seed)
    if kind == "trigram_grammar":
        successors = _trigram_tables(rng, TRIGRAM_SYMBOLS)
        probs = np.asarray(_TRIGRAM_PROBS)
        lines = []
        for _ in range(size):
            length = int(rng.integers(16, 48))
            prev2 = int(rng.integers(0, TRIGRAM_SYMBOLS))
            prev1 = int(rng.integers(0, TRIGRAM_SYMBOLS))
            doc = [prev2, prev1]
            for _ in range(length - 2):
                branch = rng.choice(_TRIGRAM_BRANCH, p=probs)
                if prev2 % 2 == 1:  # order-2 effect: odd pre-context flips the top branches
                    branch = {0: 1, 1: 0, 2: 2}[branch]
                nxt = int(successors[prev1, branch])
                doc.append(nxt)
                prev2, prev1 = prev1, nxt
            lines.append(" ".join(f"w{t:03d}" for t in doc))
        labels = None
    elif kind == "separable_classification":
        filler = [f"w{t:03d}" for t in range(TRIGRAM_SYMBOLS)]
        lines, labels = [], []
        for i in range(size):
            label = i % 2  # balanced within one document
            words = [filler[int(rng.integers(0, len(filler)))] for _ in range(int(rng.integers(12, 24)))]
            keys = CLASS_KEYWORDS[label]
            for _ in range(int(rng.integers(1, 4))):
                pos = int(rng.integers(0, len(words) + 1))
                words.insert(pos, keys[int(rng.integers(0, len(keys)))])
            lines.append(" ".join(words))
            labels.append(label)
    else:
        raise ValueError(f"unknown synthetic corpus kind {kind!r}")

    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        with open(out_dir / "corpus.txt", "w", encoding="utf-8") as fh:
            fh.write("\n".join(lines) + "\n")
        if labels is not None:
            with open(out_dir / "labels.txt", "w", encoding="utf-8") as fh:
                fh.write("\n".join(str(l) for l in labels) + "\n")
    return (lines, labels) if labels is not None else lines


def unigram_perplexity(dataset: CorpusDataset) -> float:
    """Perplexity of the best unigram model of the regular tokens."""
    ids = dataset.ids[dataset.ids >= NUM_SPECIAL]
    counts = np.bincount(ids)
    p = counts[counts > 0] / ids.size
    return float(np.exp(-(p * np.log(p)).sum()))
