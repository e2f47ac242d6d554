import numpy as np
import pytest

from loopmdm.errors import ConfigError, DatasetError
from loopmdm.tasks.corpus import (
    CorpusConfig,
    Vocabulary,
    chunk,
    empirical_entropy_rate,
    grammar_entropy_rate,
    load_corpus,
    make_grammar,
    sample_grammar_tokens,
    split_documents,
    stationary_distribution,
)


def test_vocabulary_layout():
    vocab = Vocabulary("abc")
    assert vocab.size == 5
    assert (vocab.sep_id, vocab.oov_id) == (3, 4)
    ids, oov = vocab.encode("abz")
    assert ids.tolist() == [0, 1, 4] and oov == 1
    assert vocab.decode([0, 3, 4, 2]) == "a|?c"


def test_grammar_rows_are_distributions():
    cfg = CorpusConfig(alphabet="abcd", doc_mean_length=10.0, seed=3)
    grammar = make_grammar(cfg)
    P = grammar.transitions
    assert P.shape == (5, 5)
    assert np.allclose(P.sum(axis=1), 1.0)
    sep = grammar.vocab.sep_id
    assert P[sep, sep] == 0.0
    assert np.allclose(P[:sep, sep], 0.1)


def test_stationary_distribution_is_invariant():
    grammar = make_grammar(CorpusConfig(seed=1))
    pi = stationary_distribution(grammar.transitions)
    assert pi.sum() == pytest.approx(1.0)
    assert np.allclose(pi @ grammar.transitions, pi, atol=1e-10)


def test_sampled_stream_matches_entropy_rate():
    cfg = CorpusConfig(alphabet="abcdef", seed=2, doc_mean_length=16.0)
    grammar = make_grammar(cfg)
    tokens = sample_grammar_tokens(grammar, 200_000, np.random.default_rng(0))
    sep = grammar.vocab.sep_id
    assert tokens.max() <= sep
    assert not np.any((tokens[:-1] == sep) & (tokens[1:] == sep))
    assert tokens[0] != sep
    exact = grammar_entropy_rate(grammar)
    assert empirical_entropy_rate(tokens, grammar.n_states) == pytest.approx(exact, abs=0.03)


def test_synthetic_corpus_is_seeded():
    cfg = CorpusConfig(seq_len=8, n_sequences=20, seed=4)
    a = load_corpus(cfg)
    b = load_corpus(cfg)
    assert a.sequences.shape == (20, 8)
    assert np.array_equal(a.sequences, b.sequences)
    assert a.oov_count == 0
    other = load_corpus(CorpusConfig(seq_len=8, n_sequences=20, seed=5))
    assert not np.array_equal(a.sequences, other.sequences)


def test_split_documents():
    text = "first doc\nline two\n\n\n second\n  \nthird\n"
    assert split_documents(text) == ["first doc\nline two", " second", "third"]


def test_chunk_drops_tail():
    stream = np.arange(10)
    assert chunk(stream, 3).tolist() == [[0, 1, 2], [3, 4, 5], [6, 7, 8]]
    assert chunk(stream, 3, limit=1).tolist() == [[0, 1, 2]]


def test_text_file_corpus(tmp_path):
    path = tmp_path / "corpus.txt"
    path.write_text("Abc cab\n\nbad!\n", encoding="utf-8")
    cfg = CorpusConfig(source="text_file", path=str(path), alphabet="abcd", seq_len=4, n_sequences=0)
    stream = load_corpus(cfg)
    vocab = stream.vocab
    # "abc?cab" + SEP + "bad?" = 12 tokens, spaces and '!' are OOV
    assert stream.oov_count == 2
    assert stream.sequences.shape == (3, 4)
    assert vocab.decode(stream.sequences.reshape(-1)) == "abc?cab|bad?"


def test_text_file_errors(tmp_path):
    with pytest.raises(DatasetError):
        load_corpus(CorpusConfig(source="text_file", path=str(tmp_path / "missing.txt")))
    binary = tmp_path / "bin.txt"
    binary.write_bytes(b"\xff\xfe\xfa")
    with pytest.raises(DatasetError):
        load_corpus(CorpusConfig(source="text_file", path=str(binary)))


def test_corpus_config_validation():
    with pytest.raises(ConfigError):
        CorpusConfig(source="web").validate()
    with pytest.raises(ConfigError):
        CorpusConfig(source="text_file").validate()
    with pytest.raises(ConfigError):
        CorpusConfig(alphabet="aab").validate()
    with pytest.raises(ConfigError):
        CorpusConfig(doc_mean_length=1.0).validate()
