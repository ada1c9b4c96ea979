"""Tokenizers, corpus loading and batch sampling."""
import logging

import attr
import numpy as np

from .exceptions import CorpusError

log = logging.getLogger("data")


@attr.s(frozen=True)
class ByteTokenizer:
    """UTF-8 bytes as tokens; the vocabulary is always 256 entries."""
    name = 'byte'
    vocab_size = 256

    def encode(self, text):
        if isinstance(text, str):
            text = text.encode('utf-8')
        return np.frombuffer(bytes(text), dtype=np.uint8).astype(np.int64)

    def decode(self, ids):
        return bytes(int(i) for i in ids).decode('utf-8', errors='replace')


@attr.s(frozen=True)
class CharTokenizer:
    """One token per distinct character of the training text, in sorted order."""
    name = 'char'
    chars = attr.ib(converter=tuple)

    @classmethod
    def from_text(cls, text):
        return cls(sorted(set(text)))

    @property
    def vocab_size(self):
        return len(self.chars)

    def encode(self, text):
        index = {c: i for i, c in enumerate(self.chars)}
        try:
            return np.array([index[c] for c in text], dtype=np.int64)
        except KeyError as e:
            raise CorpusError(f"character {e.args[0]!r} is not in the vocabulary") from None

    def decode(self, ids):
        return ''.join(self.chars[int(i)] for i in ids)


@attr.s(eq=False)
class Corpus:
    train = attr.ib()
    val = attr.ib()
    tokenizer = attr.ib()

    @property
    def vocab_size(self):
        return self.tokenizer.vocab_size


def corpus_from_text(text, tokenizer='byte', val_fraction=0.1):
    if not text:
        raise CorpusError("corpus is empty")
    if tokenizer == "byte":
        tok = ByteTokenizer()
    elif tokenizer == "char":
        tok = CharTokenizer.from_text(text)
    elif hasattr(tokenizer, "encode"):
        tok = tokenizer
    else:
        raise CorpusError(f"unknown tokenizer '{tokenizer}'")
    ids = tok.encode(text)
    split = int(len(ids) * (1.0 - val_fraction))
    return Corpus(ids[:split], ids[split:], tok)


def load_corpus(path, tokenizer='byte', val_fraction=0.1):
    """Reads a UTF-8 text file and splits it into train and validation ids."""
    try:
        with open(path, 'rb') as f:
            raw = f.read()
    except OSError as e:
        raise CorpusError(f"cannot read corpus {path}: {e.strerror}") from e
    try:
        text = raw.decode('utf-8')
    except UnicodeDecodeError as e:
        raise CorpusError(f"corpus {path} is not valid UTF-8: {e}") from e
    corpus = corpus_from_text(text, tokenizer, val_fraction)
    log.info("loaded %s: %d train / %d val tokens, vocabulary %d", path, len(corpus.train),
             len(corpus.val), corpus.vocab_size)
    return corpus


def sample_batch(ids, batch_size, seq_len, rng):
    """Random windows of seq_len tokens and their next-token targets."""
    if len(ids) < seq_len + 1:
        raise CorpusError(f"{len(ids)} tokens are too few for sequences of length {seq_len}")
    starts = rng.integers(0, len(ids) - seq_len, batch_size)
    x = np.stack([ids[s:s + seq_len] for s in starts])
    y = np.stack([ids[s + 1:s + seq_len + 1] for s in starts])
    return x, y
