from itertools import product

import numpy as np
import pytest

from loopmdm.errors import ConfigError, DomainError
from loopmdm.tasks.clique import (
    EDGE0,
    EDGE1,
    FALSE,
    TRUE,
    CliqueInstance,
    answer_from_probs,
    clique_sequence_length,
    clique_tuple_of_index,
    decode_clique,
    encode_clique,
    gen_clique,
    has_clique,
    workspace_target,
)
from loopmdm.tasks.roles import ROLE_ANSWER, ROLE_GIVEN, ROLE_WORKSPACE


def _adjacency(n, edges):
    adj = np.zeros((n, n), dtype=bool)
    for a, b in edges:
        adj[a, b] = adj[b, a] = True
    return adj


TRIANGLE = _adjacency(4, [(0, 1), (1, 2), (0, 2), (2, 3)])
PATH = _adjacency(4, [(0, 1), (1, 2), (2, 3)])


def test_tuple_index_is_a_bijection():
    n, k = 3, 3
    tuples = [clique_tuple_of_index(t, n, k) for t in range(1, n ** k + 1)]
    assert tuples[0] == (1, 1, 1)
    assert tuples[1] == (2, 1, 1)
    assert tuples[n] == (1, 2, 1)
    assert tuples[-1] == (3, 3, 3)
    assert sorted(tuples) == sorted(product(range(1, n + 1), repeat=k))
    with pytest.raises(DomainError):
        clique_tuple_of_index(0, n, k)
    with pytest.raises(DomainError):
        clique_tuple_of_index(n ** k + 1, n, k)


def test_has_clique_brute_force():
    assert has_clique(TRIANGLE, 3)
    assert not has_clique(PATH, 3)
    assert has_clique(PATH, 2)


def test_workspace_target():
    assert workspace_target(TRIANGLE, (1, 2, 3)) == 1
    assert workspace_target(TRIANGLE, (1, 1, 2)) == 0
    assert workspace_target(TRIANGLE, (1, 2, 4)) == 0


def test_encoding_layout_and_answer():
    inst = CliqueInstance(4, 3, TRIANGLE, 1)
    tokens, roles = encode_clique(inst)
    assert len(tokens) == clique_sequence_length(4, 3) == 16 + 64 + 1
    assert set(tokens[:16].tolist()) <= {EDGE0, EDGE1}
    assert tokens[0] == EDGE0  # diagonal
    assert tokens[1] == EDGE1  # edge (1, 2)
    workspace = tokens[16:-1]
    assert set(workspace.tolist()) <= {FALSE, TRUE}
    # ordered distinct triples of {1, 2, 3}
    assert int((workspace == TRUE).sum()) == 6
    assert tokens[-1] == TRUE
    assert (roles[:16] == ROLE_GIVEN).all()
    assert (roles[16:-1] == ROLE_WORKSPACE).all()
    assert roles[-1] == ROLE_ANSWER


def test_padding_free_encoding():
    tokens, roles = encode_clique(CliqueInstance(4, 3, PATH, 0), workspace=False)
    assert len(tokens) == clique_sequence_length(4, 3, workspace=False) == 17
    assert tokens[-1] == FALSE and roles[-1] == ROLE_ANSWER


def test_decode_round_trip_and_errors():
    inst = CliqueInstance(4, 3, TRIANGLE, 1)
    tokens, _ = encode_clique(inst)
    back = decode_clique(tokens, 4, 3)
    assert np.array_equal(back.adjacency, TRIANGLE) and back.label == 1
    with pytest.raises(DomainError):
        decode_clique(tokens[:-1], 4, 3)
    bad = tokens.copy()
    bad[-1] = EDGE1
    with pytest.raises(DomainError):
        decode_clique(bad, 4, 3)


def test_generated_labels_match_oracle():
    instances = gen_clique(5, 3, 200, 0.5, np.random.default_rng(0))
    assert len(instances) == 200
    for inst in instances:
        assert inst.label == int(has_clique(inst.adjacency, 3))
        assert np.array_equal(inst.adjacency, inst.adjacency.T)
        assert not inst.adjacency.diagonal().any()
        tokens, _ = encode_clique(inst)
        assert (tokens[-1] == TRUE) == bool((tokens[25:-1] == TRUE).any())
    positives = sum(inst.label for inst in instances)
    assert positives >= 100


def test_gen_clique_validation():
    rng = np.random.default_rng(0)
    with pytest.raises(ConfigError):
        gen_clique(6, 4, 1, 0.5, rng)  # 6^4 = 1296 workspace slots
    with pytest.raises(ConfigError):
        gen_clique(3, 4, 1, 0.5, rng)
    with pytest.raises(ConfigError):
        gen_clique(5, 3, 1, 1.5, rng)


def test_answer_from_probs():
    assert answer_from_probs(np.array([0.5, 0.1, 0.1, 0.3])) == 1
    assert answer_from_probs(np.array([0.1, 0.1, 0.5, 0.3])) == 0
