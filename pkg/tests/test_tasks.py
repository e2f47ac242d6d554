import numpy as np
import pytest

from loopmdm.diffusion import forward_mask
from loopmdm.errors import ConfigError, DatasetError
from loopmdm.tasks import (
    SequenceDataset,
    TaskConfig,
    build_datasets,
    clique_labels,
    sudoku_instances,
    task_seq_len,
    task_vocab_size,
    write_datasets,
)
from loopmdm.tasks.clique import has_clique
from loopmdm.tasks.corpus import CorpusConfig
from loopmdm.tasks.roles import ROLE_ANSWER, ROLE_GIVEN, ROLE_OPEN, ROLE_WORKSPACE
from loopmdm.tasks.sudoku import check_grid, count_solutions

ROLES = np.array([[ROLE_GIVEN, ROLE_OPEN, ROLE_WORKSPACE, ROLE_ANSWER]])
TOKENS = np.array([[0, 1, 2, 3]])


def test_roles_with_workspace_supervision():
    data = SequenceDataset.from_roles(TOKENS, ROLES, supervise_workspace=True)
    assert data.maskable.tolist() == [[False, True, True, True]]
    assert data.supervise.tolist() == [[False, True, True, True]]
    assert not data.force_mask.any()


def test_roles_without_workspace_supervision():
    data = SequenceDataset.from_roles(TOKENS, ROLES, supervise_workspace=False)
    assert data.maskable.tolist() == [[False, True, False, True]]
    assert data.force_mask.tolist() == [[False, False, True, False]]
    assert data.supervise.tolist() == [[False, True, False, True]]
    batch = data.batch([0])
    x_t = forward_mask(batch.tokens, 0.0, np.random.default_rng(0), mask_id=4,
                       maskable=batch.maskable, force_mask=batch.force_mask)
    assert x_t.tolist() == [[0, 1, 4, 3]]


def test_prompts_mask_everything_the_model_fills():
    data = SequenceDataset.from_roles(TOKENS, ROLES)
    assert data.prompts(4).tolist() == [[0, 4, 4, 4]]


def test_vocab_and_length_per_task():
    assert (task_vocab_size(TaskConfig()), task_seq_len(TaskConfig())) == (4, 16)
    clique = TaskConfig(name="clique", clique_n=5, clique_k=3)
    assert (task_vocab_size(clique), task_seq_len(clique)) == (4, 25 + 125 + 1)
    clique.workspace = False
    assert task_seq_len(clique) == 26
    lm = TaskConfig(name="lm", corpus=CorpusConfig(alphabet="abc", seq_len=12))
    assert (task_vocab_size(lm), task_seq_len(lm)) == (5, 12)


def test_task_config_validation():
    with pytest.raises(ConfigError):
        TaskConfig(name="chess").validate()
    with pytest.raises(ConfigError):
        TaskConfig(name="clique", clique_n=6, clique_k=4).validate()
    # the cap only binds when a workspace is encoded
    TaskConfig(name="clique", clique_n=6, clique_k=4, workspace=False).validate()
    with pytest.raises(ConfigError):
        TaskConfig(sudoku_grid=5).validate()


def test_sudoku_datasets():
    cfg = TaskConfig(name="sudoku", n_train=12, n_eval=5)
    train, evals = build_datasets(cfg, seed=0)
    assert (len(train), len(evals)) == (12, 5)
    assert train.seq_len == 16
    assert not (train.maskable & (train.roles == ROLE_GIVEN)).any()
    for inst in sudoku_instances(cfg, evals):
        assert check_grid(inst.solution)
        assert count_solutions(inst.givens) == 1
    again, _ = build_datasets(cfg, seed=0)
    assert np.array_equal(again.tokens, train.tokens)


def test_clique_datasets_and_labels():
    cfg = TaskConfig(name="clique", clique_n=4, clique_k=3, n_train=10, n_eval=6, supervise_workspace=False)
    train, evals = build_datasets(cfg, seed=1)
    assert train.seq_len == 16 + 64 + 1
    assert train.force_mask[:, 16:-1].all()
    assert not train.supervise[:, 16:-1].any()
    labels = clique_labels(evals)
    for row, label in zip(evals.tokens, labels):
        adj = row[:16].reshape(4, 4) == 1
        assert label == int(has_clique(adj, 3))


def test_lm_datasets_from_synthetic_grammar():
    cfg = TaskConfig(name="lm", n_train=30, n_eval=10, corpus=CorpusConfig(seq_len=8))
    train, evals = build_datasets(cfg, seed=0)
    assert (len(train), len(evals)) == (30, 10)
    assert (train.roles == ROLE_OPEN).all()
    assert train.maskable.all()


def test_lm_short_text_corpus_shrinks_eval_split(tmp_path):
    path = tmp_path / "c.txt"
    path.write_text("abcabcabcabc" * 4, encoding="utf-8")
    cfg = TaskConfig(name="lm", n_train=100, n_eval=100,
                     corpus=CorpusConfig(source="text_file", path=str(path), alphabet="abc", seq_len=4))
    train, evals = build_datasets(cfg, seed=0)
    assert len(train) + len(evals) == 12
    assert len(evals) == 6


def test_lm_corpus_too_small(tmp_path):
    path = tmp_path / "c.txt"
    path.write_text("abcd", encoding="utf-8")
    cfg = TaskConfig(name="lm", corpus=CorpusConfig(source="text_file", path=str(path), alphabet="abcd", seq_len=4))
    with pytest.raises(DatasetError):
        build_datasets(cfg, seed=0)


def test_written_datasets_load_back(tmp_path):
    cfg = TaskConfig(name="sudoku", n_train=6, n_eval=3)
    write_datasets(cfg, 7, tmp_path)
    generated_train, generated_eval = build_datasets(cfg, seed=7)
    cfg.data_dir = str(tmp_path)
    train, evals = build_datasets(cfg, seed=999)
    assert np.array_equal(train.tokens, generated_train.tokens)
    assert np.array_equal(evals.roles, generated_eval.roles)


def test_dataset_for_another_task_is_rejected(tmp_path):
    write_datasets(TaskConfig(name="sudoku", n_train=2, n_eval=2), 0, tmp_path)
    cfg = TaskConfig(name="clique", clique_n=4, clique_k=3, data_dir=str(tmp_path))
    with pytest.raises(DatasetError):
        build_datasets(cfg, seed=0)


def test_sample_batch_and_subset():
    data = SequenceDataset.from_roles(np.arange(20).reshape(5, 4) % 4, np.ones((5, 4)))
    batch = data.sample_batch(np.random.default_rng(0), 3)
    assert batch.tokens.shape == (3, 4)
    assert len(data.subset([0, 2])) == 2
