import hashlib
import logging
import os
from collections import Counter
from dataclasses import dataclass, field
from typing import Dict, Iterator, List, Tuple

import numpy as np

from src import tensor
from src.errors import DataError

logger = logging.getLogger(__name__)

UNK = "<unk>"
EOS = "<eos>"
RESERVED = (UNK, EOS)
SPLITS = ("train", "valid", "test")


@dataclass
class Vocab:
    tokens: List[str]
    cap: int = 10000
    index: Dict[str, int] = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if len(set(self.tokens)) != len(self.tokens):
            raise DataError("vocabulary contains duplicate tokens")
        for reserved in RESERVED:
            if reserved not in self.tokens:
                raise DataError(f"vocabulary is missing reserved token {reserved}")
        self.index = {token: i for i, token in enumerate(self.tokens)}

    def __len__(self):
        return len(self.tokens)

    @property
    def unk_id(self) -> int:
        return self.index[UNK]

    @property
    def eos_id(self) -> int:
        return self.index[EOS]

    def id_of(self, token: str) -> int:
        return self.index.get(token, self.unk_id)

    def digest(self) -> str:
        return hashlib.sha256("\n".join(self.tokens).encode("utf-8")).hexdigest()

    def save(self, path):
        with open(path, "w", encoding="utf-8") as f:
            f.write("\n".join(self.tokens) + "\n")

    @classmethod
    def load(cls, path, cap: int = 10000) -> "Vocab":
        if not os.path.exists(path):
            raise DataError(f"Vocab file not found: {path}")
        with open(path, "r", encoding="utf-8") as f:
            tokens = [line.rstrip("\n") for line in f if line.rstrip("\n")]
        return cls(tokens, cap=max(cap, len(tokens)))


@dataclass
class TokenStream:
    ids: np.ndarray
    split: str = "train"

    def __len__(self):
        return len(self.ids)

    def head(self, count: int) -> "TokenStream":
        return TokenStream(self.ids[:count], self.split)


@dataclass
class Corpus:
    vocab: Vocab
    train: TokenStream
    valid: TokenStream
    test: TokenStream

    def split(self, name: str) -> TokenStream:
        if name not in SPLITS:
            raise DataError(f"unknown split {name!r}; expected one of {SPLITS}")
        return getattr(self, name)


def build_vocab(text: str, cap: int = 10000) -> Vocab:
    """Frequency-ranked vocabulary, ties by first occurrence, capped including reserved tokens."""
    if cap < len(RESERVED):
        raise DataError(f"vocab cap {cap} leaves no room for {RESERVED}")
    counts = Counter()
    first_seen = {}
    for token in text.split():
        if token in RESERVED:
            continue
        counts[token] += 1
        first_seen.setdefault(token, len(first_seen))
    if not counts:
        raise DataError("cannot build a vocabulary from an empty corpus")
    ranked = sorted(counts, key=lambda t: (-counts[t], first_seen[t]))
    kept = ranked[: cap - len(RESERVED)]
    return Vocab(list(RESERVED) + kept, cap=cap)


def encode(text: str, vocab: Vocab, split: str = "train") -> TokenStream:
    ids = []
    for line in text.split("\n"):
        ids.extend(vocab.id_of(token) for token in line.split())
        ids.append(vocab.eos_id)
    # a trailing newline is a line terminator, not an empty line
    if text.endswith("\n"):
        ids.pop()
    return TokenStream(np.asarray(ids, dtype=np.int64), split)


def decode(stream: TokenStream, vocab: Vocab) -> str:
    words = []
    for token_id in stream.ids:
        token = vocab.tokens[int(token_id)]
        words.append("\n" if token == EOS else token)
    return " ".join(words).replace(" \n ", "\n").replace(" \n", "\n")


def oov_rate(stream: TokenStream, vocab: Vocab) -> float:
    words = stream.ids[stream.ids != vocab.eos_id]
    if len(words) == 0:
        return 0.0
    return float(np.mean(words == vocab.unk_id))


def bptt_batches(
    stream: TokenStream, batch_size: int, bptt_len: int, drop_last: bool = True
) -> Iterator[Tuple[np.ndarray, np.ndarray]]:
    """
    Contiguous batching: the stream is cut into ``batch_size`` columns and
    walked in blocks of ``bptt_len`` rows; blocks are ``(seq, batch)``.
    """
    if batch_size < 1 or bptt_len < 1:
        raise DataError("batch_size and bptt_len must be positive")
    if len(stream) <= batch_size:
        raise DataError(f"stream of {len(stream)} tokens is too short for batch size {batch_size}")
    rows = len(stream) // batch_size
    grid = stream.ids[: rows * batch_size].reshape(batch_size, rows).T
    for start in range(0, rows - 1, bptt_len):
        length = min(bptt_len, rows - 1 - start)
        if drop_last and length < bptt_len:
            break
        yield grid[start:start + length], grid[start + 1:start + 1 + length]


def read_split(corpus_dir: str, split: str) -> str:
    path = os.path.join(corpus_dir, f"{split}.txt")
    if not os.path.exists(path):
        raise DataError(f"Corpus file not found: {path}")
    with open(path, "r", encoding="utf-8") as f:
        return f.read()


def load_corpus(corpus_dir: str, vocab_cap: int = 10000, vocab: Vocab = None) -> Corpus:
    train_text = read_split(corpus_dir, "train")
    vocab = vocab or build_vocab(train_text, vocab_cap)
    streams = {"train": encode(train_text, vocab, "train")}
    for split in ("valid", "test"):
        streams[split] = encode(read_split(corpus_dir, split), vocab, split)
    for split, stream in streams.items():
        logger.debug("%s: %d tokens, OOV rate %.2f%%", split, len(stream), 100 * oov_rate(stream, vocab))
    return Corpus(vocab, **streams)


def unigram_perplexity(train: TokenStream, evaluation: TokenStream, vocab_size: int) -> float:
    """Add-one unigram perplexity over the next-token positions of ``evaluation``."""
    counts = np.bincount(train.ids, minlength=vocab_size).astype(np.float64) + 1.0
    log_probs = np.log(counts / counts.sum())
    targets = evaluation.ids[1:]
    if len(targets) == 0:
        raise DataError("evaluation stream is too short")
    return float(np.exp(-np.mean(log_probs[targets])))


def _sparse_rows(rng, rows, size, branching, base):
    table = np.zeros((rows, size))
    for row in range(rows):
        successors = rng.choice(size, size=branching, replace=False, p=base)
        table[row, successors] = rng.dirichlet(np.full(branching, 0.5))
    return table


def markov_text(
    token_count: int,
    seed: int,
    vocab_size: int = 500,
    branching: int = 8,
    purpose: str = "corpus",
) -> str:
    """Order-2 Markov text: the next word depends on the previous two."""
    rng = tensor.rng_for(seed, "corpus-chain")
    base = 1.0 / np.arange(1, vocab_size + 1)
    base /= base.sum()
    near = _sparse_rows(rng, vocab_size, vocab_size, branching, base)
    far = _sparse_rows(rng, vocab_size, vocab_size, branching, base)
    words = [f"w{i:03d}" for i in range(vocab_size)]

    sampler = tensor.rng_for(seed, purpose)
    lines, produced = [], 0
    while produced < token_count:
        length = int(sampler.integers(8, 25))
        prev2 = prev1 = None
        line = []
        for _ in range(length):
            if prev1 is None:
                probs = base
            elif prev2 is None:
                probs = 0.9 * near[prev1] + 0.1 * base
            else:
                probs = 0.6 * near[prev1] + 0.3 * far[prev2] + 0.1 * base
            token = int(sampler.choice(vocab_size, p=probs / probs.sum()))
            line.append(words[token])
            prev2, prev1 = prev1, token
        lines.append(" ".join(line))
        produced += length + 1
    return "\n".join(lines) + "\n"


def generate_markov_corpus(
    out_dir: str,
    seed: int = 1234,
    vocab_size: int = 500,
    train_tokens: int = 60000,
    valid_tokens: int = 6000,
    test_tokens: int = 6000,
) -> str:
    """Write the synthetic desk corpus (train/valid/test.txt) into ``out_dir``."""
    os.makedirs(out_dir, exist_ok=True)
    sizes = {"train": train_tokens, "valid": valid_tokens, "test": test_tokens}
    for split, count in sizes.items():
        text = markov_text(count, seed, vocab_size, purpose=f"corpus-{split}")
        with open(os.path.join(out_dir, f"{split}.txt"), "w", encoding="utf-8") as f:
            f.write(text)
        logger.info("wrote %s split (%d tokens) to %s", split, count, out_dir)
    return out_dir
