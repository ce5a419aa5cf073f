import os
import tempfile
import unittest

import numpy as np

from src import data
from src.data import TokenStream, Vocab
from src.errors import DataError


class TestVocab(unittest.TestCase):
    def test_frequency_ranking_with_first_seen_ties(self):
        vocab = data.build_vocab("b a b c c c\nx y\n")
        self.assertEqual(vocab.tokens, ["<unk>", "<eos>", "c", "b", "a", "x", "y"])

    def test_cap_includes_reserved_tokens(self):
        vocab = data.build_vocab("b a b c c c", cap=4)
        self.assertEqual(vocab.tokens, ["<unk>", "<eos>", "c", "b"])
        self.assertEqual(vocab.id_of("a"), vocab.unk_id)

    def test_reserved_tokens_in_text_are_not_counted_twice(self):
        vocab = data.build_vocab("<unk> a <eos> a")
        self.assertEqual(vocab.tokens, ["<unk>", "<eos>", "a"])

    def test_invalid_vocabularies(self):
        with self.assertRaises(DataError):
            data.build_vocab("   \n")
        with self.assertRaises(DataError):
            data.build_vocab("a b", cap=1)
        with self.assertRaises(DataError):
            Vocab(["<unk>", "<eos>", "a", "a"])
        with self.assertRaises(DataError):
            Vocab(["<unk>", "a"])

    def test_save_and_load(self):
        vocab = data.build_vocab("one two two three three three")
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, "vocab.txt")
            vocab.save(path)
            loaded = Vocab.load(path)
            self.assertEqual(loaded.tokens, vocab.tokens)
            self.assertEqual(loaded.digest(), vocab.digest())
            with self.assertRaises(DataError):
                Vocab.load(os.path.join(tmp, "missing.txt"))


class TestEncoding(unittest.TestCase):
    def setUp(self):
        self.vocab = data.build_vocab("a b c a")

    def test_every_line_ends_with_eos(self):
        with_newline = data.encode("a b\nc\n", self.vocab)
        without = data.encode("a b\nc", self.vocab)
        a, b, c, eos = (self.vocab.id_of(t) for t in ("a", "b", "c", "<eos>"))
        self.assertEqual(with_newline.ids.tolist(), [a, b, eos, c, eos])
        np.testing.assert_array_equal(with_newline.ids, without.ids)

    def test_decode_inverts_encode(self):
        self.assertEqual(data.decode(data.encode("a b\nc\n", self.vocab), self.vocab), "a b\nc\n")

    def test_unknown_words_and_oov_rate(self):
        stream = data.encode("a zebra", self.vocab, "valid")
        self.assertEqual(stream.split, "valid")
        self.assertEqual(stream.ids[1], self.vocab.unk_id)
        self.assertAlmostEqual(data.oov_rate(stream, self.vocab), 0.5)
        self.assertEqual(data.oov_rate(TokenStream(np.array([], dtype=np.int64)), self.vocab), 0.0)


class TestBatching(unittest.TestCase):
    def test_block_shapes_and_shift(self):
        stream = TokenStream(np.arange(100))
        blocks = list(data.bptt_batches(stream, batch_size=4, bptt_len=5))
        self.assertEqual(len(blocks), 4)
        for inputs, targets in blocks:
            self.assertEqual(inputs.shape, (5, 4))
            np.testing.assert_array_equal(targets, inputs + 1)
        np.testing.assert_array_equal(blocks[0][0][:, 1], np.arange(25, 30))

    def test_short_tail_is_kept_on_request(self):
        blocks = list(data.bptt_batches(TokenStream(np.arange(100)), 4, 5, drop_last=False))
        self.assertEqual(len(blocks), 5)
        self.assertEqual(blocks[-1][0].shape, (4, 4))

    def test_rejected_inputs(self):
        with self.assertRaises(DataError):
            list(data.bptt_batches(TokenStream(np.arange(4)), 4, 5))
        with self.assertRaises(DataError):
            list(data.bptt_batches(TokenStream(np.arange(40)), 0, 5))


class TestCorpus(unittest.TestCase):
    def test_uniform_unigram_perplexity_is_vocab_size(self):
        train = TokenStream(np.tile(np.arange(20), 5))
        evaluation = TokenStream(np.array([3, 7, 7, 19, 0]))
        self.assertAlmostEqual(data.unigram_perplexity(train, evaluation, 20), 20.0, places=9)

    def test_markov_text_is_seeded(self):
        a = data.markov_text(300, seed=3, vocab_size=40)
        self.assertEqual(a, data.markov_text(300, seed=3, vocab_size=40))
        self.assertNotEqual(a, data.markov_text(300, seed=4, vocab_size=40))
        self.assertTrue(a.endswith("\n"))
        self.assertGreaterEqual(len(a.split()) + a.count("\n"), 300)

    def test_generate_and_load(self):
        with tempfile.TemporaryDirectory() as tmp:
            data.generate_markov_corpus(tmp, seed=1, vocab_size=40, train_tokens=800, valid_tokens=200, test_tokens=200)
            self.assertEqual(sorted(os.listdir(tmp)), ["test.txt", "train.txt", "valid.txt"])
            corpus = data.load_corpus(tmp, vocab_cap=20)
            self.assertEqual(len(corpus.vocab), 20)
            self.assertGreaterEqual(len(corpus.train), 800)
            self.assertIs(corpus.split("valid"), corpus.valid)
            self.assertEqual(corpus.test.split, "test")
            with self.assertRaises(DataError):
                corpus.split("dev")

    def test_missing_split(self):
        with tempfile.TemporaryDirectory() as tmp:
            with self.assertRaises(DataError):
                data.load_corpus(tmp)


if __name__ == '__main__':
    unittest.main()
