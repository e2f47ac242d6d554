"""k-Clique detection with a masked workspace.

Sequence layout for a graph on n vertices:

    n*n edge tokens e(a, b), row-major, diagonal included (always EDGE0)
    n**k workspace positions, one per vertex tuple
    1 answer position

Workspace position t (1-based) stands for the tuple
v_r(t) = 1 + floor((t - 1) / n**(r - 1)) mod n, r = 1..k, and its target is
c_v = 1 iff the tuple's vertices are pairwise distinct and pairwise
adjacent. The answer is 1 iff some c_v is 1. The padding-free variant drops
the workspace.

Vocabulary: EDGE0, EDGE1, FALSE, TRUE (size 4).
"""
from __future__ import annotations
from dataclasses import dataclass
from itertools import combinations
from typing import List, Tuple

import numpy as np

from ..errors import ConfigError, DomainError
from ..workers import parallel_map, shard_rngs, shard_sizes
from .roles import ROLE_ANSWER, ROLE_GIVEN, ROLE_WORKSPACE

EDGE0, EDGE1, FALSE, TRUE = 0, 1, 2, 3
VOCAB_SIZE = 4
ROLE_EDGE = ROLE_GIVEN
MAX_WORKSPACE = 1024
MAX_REJECTIONS = 10000
SHARD_SIZE = 256


@dataclass
class CliqueInstance:
    n: int
    k: int
    adjacency: np.ndarray
    label: int

    def to_dict(self) -> dict:
        return {"n": self.n, "k": self.k, "adjacency": self.adjacency.astype(int).tolist(), "label": self.label}

    @staticmethod
    def from_dict(d: dict) -> "CliqueInstance":
        return CliqueInstance(int(d["n"]), int(d["k"]), np.asarray(d["adjacency"], dtype=bool), int(d["label"]))


def has_clique(adjacency: np.ndarray, k: int) -> bool:
    """Brute force over all vertex subsets of size k."""
    n = adjacency.shape[0]
    for subset in combinations(range(n), k):
        if all(adjacency[a, b] for a, b in combinations(subset, 2)):
            return True
    return False


def clique_sequence_length(n: int, k: int, workspace: bool = True) -> int:
    return n * n + (n ** k if workspace else 0) + 1


def clique_tuple_of_index(tindex: int, n: int, k: int) -> Tuple[int, ...]:
    """1-based vertex tuple of workspace position `tindex` (1..n**k)."""
    if not 1 <= tindex <= n ** k:
        raise DomainError(f"workspace index {tindex} outside [1, {n ** k}]")
    return tuple(1 + ((tindex - 1) // n ** (r - 1)) % n for r in range(1, k + 1))


def workspace_target(adjacency: np.ndarray, vertices: Tuple[int, ...]) -> int:
    if len(set(vertices)) != len(vertices):
        return 0
    return int(all(adjacency[a - 1, b - 1] for a, b in combinations(vertices, 2)))


def _random_graph(n: int, edge_prob: float, rng: np.random.Generator) -> np.ndarray:
    upper = np.triu(rng.random((n, n)) < edge_prob, k=1)
    return upper | upper.T


def _gen_shard(args) -> List[CliqueInstance]:
    n, k, planted_flags, edge_prob, rng = args
    out = []
    for planted in planted_flags:
        if planted:
            adj = _random_graph(n, edge_prob, rng)
            members = rng.choice(n, size=k, replace=False)
            for a, b in combinations(members, 2):
                adj[a, b] = adj[b, a] = True
        else:
            for _ in range(MAX_REJECTIONS):
                adj = _random_graph(n, edge_prob, rng)
                if not has_clique(adj, k):
                    break
            else:
                raise ConfigError("task.edge_prob", f"no {k}-clique-free graph found at edge_prob={edge_prob}")
        # the oracle labels every instance, whatever its construction
        out.append(CliqueInstance(n, k, adj, int(has_clique(adj, k))))
    return out


def gen_clique(
    n: int,
    k: int,
    n_instances: int,
    planted_fraction: float,
    rng: np.random.Generator,
    edge_prob: float = 0.4,
    max_workspace: int = MAX_WORKSPACE,
) -> List[CliqueInstance]:
    if not n >= k >= 2:
        raise ConfigError("task.clique_k", f"need n >= k >= 2, got n={n}, k={k}")
    if n ** k > max_workspace:
        raise ConfigError("task.clique_n", f"workspace n^k = {n ** k} exceeds the cap of {max_workspace}")
    if not 0.0 <= planted_fraction <= 1.0:
        raise ConfigError("task.planted_fraction", "must lie in [0, 1]")
    n_planted = int(round(n_instances * planted_fraction))
    flags = np.zeros(n_instances, dtype=bool)
    flags[rng.permutation(n_instances)[:n_planted]] = True
    sizes = shard_sizes(n_instances, SHARD_SIZE)
    bounds = np.cumsum([0] + sizes)
    jobs = [
        (n, k, flags[bounds[i]:bounds[i + 1]], edge_prob, r)
        for i, r in enumerate(shard_rngs(rng, len(sizes)))
    ]
    return [inst for shard in parallel_map(_gen_shard, jobs) for inst in shard]


def encode_clique(instance: CliqueInstance, workspace: bool = True) -> Tuple[np.ndarray, np.ndarray]:
    """(clean tokens, roles). Workspace/answer tokens are the training targets."""
    n, k = instance.n, instance.k
    edges = np.where(instance.adjacency.reshape(-1), EDGE1, EDGE0)
    parts = [edges]
    roles = [np.full(n * n, ROLE_EDGE)]
    if workspace:
        cells = [workspace_target(instance.adjacency, clique_tuple_of_index(t, n, k)) for t in range(1, n ** k + 1)]
        parts.append(np.where(np.asarray(cells, dtype=bool), TRUE, FALSE))
        roles.append(np.full(n ** k, ROLE_WORKSPACE))
    parts.append(np.asarray([TRUE if instance.label else FALSE]))
    roles.append(np.asarray([ROLE_ANSWER]))
    return np.concatenate(parts).astype(np.int64), np.concatenate(roles).astype(np.int64)


def decode_clique(tokens: np.ndarray, n: int, k: int, workspace: bool = True) -> CliqueInstance:
    tokens = np.asarray(tokens)
    if tokens.shape[0] != clique_sequence_length(n, k, workspace):
        raise DomainError(f"sequence length {tokens.shape[0]} does not fit n={n}, k={k}")
    edges = tokens[: n * n]
    if np.any((edges != EDGE0) & (edges != EDGE1)):
        raise DomainError("edge positions must hold EDGE0/EDGE1")
    answer = int(tokens[-1])
    if answer not in (FALSE, TRUE):
        raise DomainError("answer position must hold FALSE/TRUE")
    return CliqueInstance(n, k, (edges == EDGE1).reshape(n, n), int(answer == TRUE))


def answer_from_probs(probs: np.ndarray) -> int:
    """Label read at the answer position, restricted to FALSE/TRUE."""
    return int(probs[TRUE] > probs[FALSE])
