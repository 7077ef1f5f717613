"""Corpus ingestion, vocabularies, and synthetic probe streams."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ContractError, VocabularyError

UNKNOWN_SYMBOL = "<unk>"
TRAIN_FRACTION = 0.95


@dataclass
class Vocab:
    symbol_to_id: dict[str, int]
    id_to_symbol: list[str]
    mode: str  # "char" | "word"

    @property
    def size(self) -> int:
        return len(self.id_to_symbol)

    def encode(self, symbols) -> np.ndarray:
        ids = np.empty(len(symbols), dtype=np.intp)
        unk = self.symbol_to_id.get(UNKNOWN_SYMBOL)
        for i, s in enumerate(symbols):
            found = self.symbol_to_id.get(s)
            if found is None:
                if unk is None:
                    raise VocabularyError(repr(s), self.size)
                found = unk
            ids[i] = found
        return ids

    def decode(self, ids) -> list[str]:
        return [self.id_to_symbol[int(i)] for i in ids]


def tokenize(text: str, mode: str) -> list[str]:
    if mode == "char":
        return list(text)
    if mode == "word":
        return text.split()
    raise ContractError(f"unknown tokenizer mode {mode!r}")


def build_vocab(tokens, mode: str) -> Vocab:
    """Deterministic vocabulary: sorted symbols; word mode reserves id 0 for unknowns."""
    symbols = sorted(set(tokens))
    if mode == "word":
        symbols = [UNKNOWN_SYMBOL] + [s for s in symbols if s != UNKNOWN_SYMBOL]
    return Vocab(symbol_to_id={s: i for i, s in enumerate(symbols)},
                 id_to_symbol=symbols, mode=mode)


def ingest(path, mode: str = "char"):
    """Read a plain-text corpus into (vocab, token ids).

    The vocabulary is built from the contiguous training prefix only, so
    evaluation symbols unseen in training map to the unknown id in word mode
    (and are an error in char mode, where no unknown id is reserved).
    """
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise OSError(f"cannot read corpus {path}: {exc}") from exc
    tokens = tokenize(text, mode)
    if not tokens:
        raise ContractError(f"corpus {path} is empty")
    split = max(1, int(len(tokens) * TRAIN_FRACTION))
    vocab = build_vocab(tokens[:split], mode)
    return vocab, vocab.encode(tokens)


def split_train_valid(ids: np.ndarray, fraction: float = TRAIN_FRACTION):
    """Contiguous prefix/suffix split, preserving stream order."""
    split = max(1, int(len(ids) * fraction))
    return ids[:split], ids[split:]


# ---------------------------------------------------------------------------
# cross-segment recall probe


@dataclass
class RecallTaskSpec:
    alphabet: int        # number of distinct keys
    filler: int
    key_marker: int
    query_marker: int
    seg_len: int
    gap: int             # segments between the key's segment and the query's

    @property
    def vocab_size(self) -> int:
        return max(self.alphabet - 1, self.filler, self.key_marker, self.query_marker) + 1

    @property
    def episode_len(self) -> int:
        return (self.gap + 1) * self.seg_len

    def validate(self) -> None:
        if self.gap < 1:
            raise ContractError("gap must be >= 1 so the key is outside the query's segment")
        if self.seg_len < 2:
            raise ContractError("recall needs segments of at least 2 tokens")
        if self.alphabet < 2:
            raise ContractError("recall needs at least 2 keys")
        special = {self.filler, self.key_marker, self.query_marker}
        if len(special) != 3 or min(special) < self.alphabet:
            raise ContractError("marker and filler ids must be distinct and outside the alphabet")


def recall_spec(alphabet: int, seg_len: int, gap: int = 1) -> RecallTaskSpec:
    """Standard id layout: keys 0..K-1, then filler, key marker, query marker."""
    return RecallTaskSpec(alphabet=alphabet, filler=alphabet, key_marker=alphabet + 1,
                          query_marker=alphabet + 2, seg_len=seg_len, gap=gap)


def gen_recall(spec: RecallTaskSpec, count: int, seed: int):
    """Token stream of recall episodes plus the scored-position mask.

    Each episode opens with [key-marker, key] and, ``gap`` segments later,
    poses [query-marker, key]: the only scored position is the query marker,
    whose next token is the key it must recall. Everything else is filler,
    so a predictor without access to the earlier segment can do no better
    than chance 1/alphabet at the scored positions.
    """
    spec.validate()
    if count < 1:
        raise ContractError("need at least one episode")
    rng = np.random.default_rng(seed)
    ep = spec.episode_len
    ids = np.full(count * ep, spec.filler, dtype=np.intp)
    mask = np.zeros(count * ep, dtype=bool)
    keys = rng.integers(0, spec.alphabet, size=count)
    for e in range(count):
        base = e * ep
        q = base + spec.gap * spec.seg_len
        ids[base] = spec.key_marker
        ids[base + 1] = keys[e]
        ids[q] = spec.query_marker
        ids[q + 1] = keys[e]
        mask[q] = True
    return ids, mask


# ---------------------------------------------------------------------------
# synthetic character corpus


_TOPICS = ["marble", "copper", "violet", "harbor", "meadow", "signal", "timber",
           "carbon", "sierra", "lagoon", "prairie", "cobalt", "willow", "ember"]
_VERBS = ["holds", "finds", "keeps", "meets", "turns", "lifts", "names", "marks"]
_GLUE = ["the", "a", "its", "near", "under", "over", "by", "with"]


def synthetic_text(n_chars: int, seed: int = 0) -> str:
    """Deterministic pseudo-prose with two learnable structures: paragraphs
    reuse a small set of topic words across many lines (rewarding carried
    memory), and lines have regular lengths (rewarding position tracking
    that can re-anchor on newlines)."""
    if n_chars < 1:
        raise ContractError("corpus size must be positive")
    rng = np.random.default_rng(seed)
    chunks: list[str] = []
    total = 0
    while total < n_chars:
        topics = list(rng.choice(_TOPICS, size=2, replace=False))
        for _ in range(int(rng.integers(5, 9))):
            a, b = rng.permuted(topics)[:2]
            line = " ".join([
                str(rng.choice(_GLUE)), a, str(rng.choice(_VERBS)),
                str(rng.choice(_GLUE)), b,
            ]) + ".\n"
            chunks.append(line)
            total += len(line)
    return "".join(chunks)[:n_chars]
