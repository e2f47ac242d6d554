"""Character-level corpora.

Two sources share one vocabulary layout: the configured alphabet, then a
document separator (SEP), then an out-of-vocabulary token (OOV).

- synthetic_grammar: a seeded first-order Markov grammar over the alphabet
  plus SEP. Rows are Dirichlet draws, every letter ends its document with
  probability 1 / doc_mean_length, and SEP never follows SEP. Its entropy
  rate is known in closed form, which gives held-out NLL a floor.
- text_file: a UTF-8 file split into documents on blank lines. Characters
  outside the alphabet become OOV and are counted.

Documents are joined with SEP and the stream is cut into sequences of
exactly seq_len tokens; a short tail is dropped.
"""
from __future__ import annotations
from dataclasses import dataclass
import logging
import re
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np

from ..errors import ConfigError, DatasetError

SOURCES = ("synthetic_grammar", "text_file")
DEFAULT_ALPHABET = "abcdefghijklmn"
_DOC_BREAK = re.compile(r"\n\s*\n")


@dataclass
class CorpusConfig:
    source: str = "synthetic_grammar"
    path: Optional[str] = None
    seed: int = 0
    seq_len: int = 32
    alphabet: str = DEFAULT_ALPHABET
    lowercase: bool = True
    concentration: float = 0.3
    doc_mean_length: float = 64.0
    # text_file: 0 keeps every full sequence in the file
    n_sequences: int = 1024

    def validate(self) -> None:
        if self.source not in SOURCES:
            raise ConfigError("task.corpus.source", f"expected one of {SOURCES}")
        if self.source == "text_file" and not self.path:
            raise ConfigError("task.corpus.path", "text_file source needs a path")
        if self.seq_len < 1:
            raise ConfigError("task.corpus.seq_len", "must be positive")
        if len(set(self.alphabet)) != len(self.alphabet) or not self.alphabet:
            raise ConfigError("task.corpus.alphabet", "must be a non-empty string of distinct characters")
        if self.concentration <= 0:
            raise ConfigError("task.corpus.concentration", "must be > 0")
        if self.doc_mean_length <= 1:
            raise ConfigError("task.corpus.doc_mean_length", "must be > 1")
        if self.n_sequences < 0:
            raise ConfigError("task.corpus.n_sequences", "must be >= 0")


class Vocabulary:
    """Alphabet characters, then SEP, then OOV."""

    def __init__(self, alphabet: str):
        self.symbols = list(alphabet)
        self.index = {ch: i for i, ch in enumerate(self.symbols)}
        self.sep_id = len(self.symbols)
        self.oov_id = len(self.symbols) + 1

    @property
    def size(self) -> int:
        return len(self.symbols) + 2

    def encode(self, text: str) -> Tuple[np.ndarray, int]:
        ids = np.fromiter((self.index.get(ch, self.oov_id) for ch in text), dtype=np.int64, count=len(text))
        return ids, int(np.count_nonzero(ids == self.oov_id))

    def decode(self, ids) -> str:
        out = []
        for i in np.asarray(ids).reshape(-1):
            i = int(i)
            if i < len(self.symbols):
                out.append(self.symbols[i])
            elif i == self.sep_id:
                out.append("|")
            elif i == self.oov_id:
                out.append("?")
            else:
                out.append("_")
        return "".join(out)


@dataclass
class SyntheticGrammar:
    """Markov chain over the alphabet plus SEP (state index = token id)."""

    transitions: np.ndarray
    vocab: Vocabulary

    @property
    def n_states(self) -> int:
        return self.transitions.shape[0]


def make_grammar(cfg: CorpusConfig) -> SyntheticGrammar:
    vocab = Vocabulary(cfg.alphabet)
    n = len(vocab.symbols)
    rng = np.random.default_rng(cfg.seed)
    rows = rng.dirichlet(np.full(n, cfg.concentration), size=n + 1)
    p_end = 1.0 / cfg.doc_mean_length
    transitions = np.zeros((n + 1, n + 1))
    transitions[:n, :n] = (1.0 - p_end) * rows[:n]
    transitions[:n, vocab.sep_id] = p_end
    transitions[vocab.sep_id, :n] = rows[n]
    return SyntheticGrammar(transitions, vocab)


def stationary_distribution(transitions: np.ndarray) -> np.ndarray:
    n = transitions.shape[0]
    system = np.vstack([transitions.T - np.eye(n), np.ones((1, n))])
    rhs = np.zeros(n + 1)
    rhs[-1] = 1.0
    pi, *_ = np.linalg.lstsq(system, rhs, rcond=None)
    pi = np.clip(pi, 0.0, None)
    return pi / pi.sum()


def _row_entropy(p: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, -p * np.log(p), 0.0)
    return terms.sum(axis=-1)


def grammar_entropy_rate(grammar: SyntheticGrammar) -> float:
    """Entropy rate in nats per token: sum_i pi_i H(P_i)."""
    pi = stationary_distribution(grammar.transitions)
    return float(pi @ _row_entropy(grammar.transitions))


def sample_grammar_tokens(grammar: SyntheticGrammar, n_tokens: int, rng: np.random.Generator) -> np.ndarray:
    """A token stream that starts right after a document separator."""
    cdf = np.cumsum(grammar.transitions, axis=1)
    draws = rng.random(n_tokens)
    out = np.empty(n_tokens, dtype=np.int64)
    state = grammar.vocab.sep_id
    last = grammar.n_states - 1
    for i in range(n_tokens):
        state = min(int(np.searchsorted(cdf[state], draws[i], side="right")), last)
        out[i] = state
    return out


def empirical_entropy_rate(tokens: np.ndarray, n_states: int) -> float:
    """Plug-in conditional entropy H(X_i | X_(i-1)) in nats from bigram counts."""
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.size < 2:
        return 0.0
    counts = np.zeros((n_states, n_states))
    np.add.at(counts, (tokens[:-1], tokens[1:]), 1.0)
    totals = counts.sum(axis=1, keepdims=True)
    with np.errstate(divide="ignore", invalid="ignore"):
        cond = np.where(counts > 0, counts / totals, 1.0)
    return float(-(counts * np.log(cond)).sum() / counts.sum())


@dataclass
class CorpusStream:
    sequences: np.ndarray
    oov_count: int
    vocab: Vocabulary

    def __len__(self) -> int:
        return int(self.sequences.shape[0])


def chunk(stream: np.ndarray, seq_len: int, limit: Optional[int] = None) -> np.ndarray:
    n = stream.size // seq_len
    if limit is not None:
        n = min(n, limit)
    return stream[: n * seq_len].reshape(n, seq_len)


def split_documents(text: str) -> List[str]:
    return [doc.strip("\n") for doc in _DOC_BREAK.split(text) if doc.strip()]


def _read_text_file(cfg: CorpusConfig, vocab: Vocabulary) -> Tuple[np.ndarray, int]:
    path = Path(cfg.path)
    try:
        text = path.read_text(encoding="utf-8")
    except UnicodeDecodeError as exc:
        raise DatasetError(str(path), 0, f"not valid UTF-8: {exc}") from exc
    except OSError as exc:
        raise DatasetError(str(path), 0, f"cannot read corpus: {exc}") from exc
    if cfg.lowercase:
        text = text.lower()
    pieces: List[np.ndarray] = []
    oov = 0
    for i, doc in enumerate(split_documents(text)):
        if i:
            pieces.append(np.asarray([vocab.sep_id], dtype=np.int64))
        ids, missing = vocab.encode(doc)
        pieces.append(ids)
        oov += missing
    stream = np.concatenate(pieces) if pieces else np.zeros(0, dtype=np.int64)
    return stream, oov


def load_corpus(cfg: CorpusConfig) -> CorpusStream:
    """Sequences of exactly `seq_len` tokens from the configured source."""
    cfg.validate()
    if cfg.source == "synthetic_grammar":
        grammar = make_grammar(cfg)
        # sampling stream is separate from the stream that drew the grammar
        rng = np.random.default_rng(np.random.SeedSequence(cfg.seed).spawn(1)[0])
        stream = sample_grammar_tokens(grammar, cfg.n_sequences * cfg.seq_len, rng)
        return CorpusStream(chunk(stream, cfg.seq_len), 0, grammar.vocab)

    vocab = Vocabulary(cfg.alphabet)
    stream, oov = _read_text_file(cfg, vocab)
    if oov:
        logging.warning("corpus: %d character(s) in %s mapped to OOV", oov, cfg.path)
    sequences = chunk(stream, cfg.seq_len, cfg.n_sequences or None)
    logging.info("corpus: %d sequence(s) of length %d from %s", len(sequences), cfg.seq_len, cfg.path)
    return CorpusStream(sequences, oov, vocab)
