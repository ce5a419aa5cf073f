"""Small builders shared by the verify_* test modules."""
import numpy as np

from src import model as qrnn
from src.data import Corpus, TokenStream, Vocab
from src.model import ModelConfig


def toy_config(vocab=20, embed=8, hidden=(12, 8), window=(2, 1)) -> ModelConfig:
    return ModelConfig(vocab, embed, len(hidden), tuple(hidden), tuple(window))


def toy_model(seed=0, dtype=np.float64, **config_kwargs) -> qrnn.QrnnModel:
    return qrnn.init_model(toy_config(**config_kwargs), seed, dtype)


def random_tokens(n, vocab=20, seed=0, batch=None) -> np.ndarray:
    rng = np.random.default_rng(seed)
    shape = (n,) if batch is None else (batch, n)
    return rng.integers(0, vocab, size=shape)


def toy_stream(n=400, vocab=20, seed=0, split="train") -> TokenStream:
    return TokenStream(random_tokens(n, vocab, seed).astype(np.int64), split)


def periodic_stream(n=600, period=7, split="train") -> TokenStream:
    return TokenStream((np.arange(n) % period).astype(np.int64), split)


def toy_vocab(size=20) -> Vocab:
    return Vocab(["<unk>", "<eos>"] + [f"w{i}" for i in range(size - 2)], cap=size)


def toy_corpus(vocab=20, seed=0, train=1200, valid=300, test=300) -> Corpus:
    return Corpus(
        toy_vocab(vocab),
        toy_stream(train, vocab, seed, "train"),
        toy_stream(valid, vocab, seed + 1, "valid"),
        toy_stream(test, vocab, seed + 2, "test"),
    )


def zeroed_gates(model: qrnn.QrnnModel, kept):
    """0/1 vectors per prunable layer that silence every filter not in ``kept``."""
    gates = []
    for index in model.config.prunable_layers:
        z = np.zeros(model.config.hidden_sizes[index], dtype=model.dtype)
        z[list(kept[index])] = 1.0
        gates.append(z)
    return gates + [None]
