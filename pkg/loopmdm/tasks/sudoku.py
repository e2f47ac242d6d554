"""Sudoku puzzles with unique solutions.

Grids are lists of rows with values 1..n and 0 for a blank. Full grids
come from randomized backtracking; cells are then removed in random
order while the exhaustive solver still finds exactly one completion,
down to about `givens_fraction` of the cells.

Token encoding is row-major over cells, value v -> token v - 1, so the
vocabulary size is n and blanks become the mask id at inference.

API:
- SudokuInstance, box_shape(n)
- check_grid(grid), is_valid(grid, r, c, value), count_solutions(grid, limit=2)
- generate_full_grid(n, rng), make_puzzle(solution, givens_fraction, rng)
- gen_sudoku(grid_size, n_instances, givens_fraction, rng)
- encode_sudoku / decode_sudoku, solve_rate, chance_solve_rate, random_guess_grids
"""
from __future__ import annotations
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

from ..errors import ConfigError, ContractError
from ..workers import parallel_map, shard_rngs, shard_sizes

Grid = List[List[int]]
SHARD_SIZE = 256


def box_shape(n: int) -> Tuple[int, int]:
    if n == 4:
        return 2, 2
    if n == 9:
        return 3, 3
    raise ConfigError("task.sudoku_grid", f"supported grid sizes are 4 and 9, got {n}")


@dataclass
class SudokuInstance:
    grid_size: int
    givens: Grid
    solution: Grid

    @property
    def blanks(self) -> int:
        return sum(1 for row in self.givens for v in row if v == 0)

    def to_dict(self) -> dict:
        return {"grid_size": self.grid_size, "givens": self.givens, "solution": self.solution}

    @staticmethod
    def from_dict(d: dict) -> "SudokuInstance":
        return SudokuInstance(int(d["grid_size"]), [list(r) for r in d["givens"]], [list(r) for r in d["solution"]])


def find_empty(grid: Grid) -> Optional[Tuple[int, int]]:
    for r, row in enumerate(grid):
        for c, v in enumerate(row):
            if v == 0:
                return r, c
    return None


def is_valid(grid: Grid, r: int, c: int, value: int) -> bool:
    """Whether `value` may go at (r, c) given the other filled cells."""
    n = len(grid)
    if any(grid[r][j] == value for j in range(n) if j != c):
        return False
    if any(grid[i][c] == value for i in range(n) if i != r):
        return False
    bh, bw = box_shape(n)
    br, bc = (r // bh) * bh, (c // bw) * bw
    for i in range(br, br + bh):
        for j in range(bc, bc + bw):
            if (i, j) != (r, c) and grid[i][j] == value:
                return False
    return True


def check_grid(grid: Sequence[Sequence[int]]) -> bool:
    """A complete grid satisfying every row, column and box constraint."""
    n = len(grid)
    try:
        box_shape(n)
    except ConfigError:
        return False
    rows = [list(r) for r in grid]
    if any(len(r) != n for r in rows):
        return False
    values = set(range(1, n + 1))
    for r in range(n):
        for c in range(n):
            if rows[r][c] not in values or not is_valid(rows, r, c, rows[r][c]):
                return False
    return True


def count_solutions(grid: Grid, limit: Optional[int] = 2) -> int:
    """Number of completions of `grid`, stopping early once `limit` is reached."""
    work = [list(r) for r in grid]
    n = len(work)

    def count() -> int:
        empty = find_empty(work)
        if empty is None:
            return 1
        r, c = empty
        total = 0
        for value in range(1, n + 1):
            if is_valid(work, r, c, value):
                work[r][c] = value
                total += count()
                work[r][c] = 0
                if limit is not None and total >= limit:
                    break
        return total

    return count()


def solve(grid: Grid) -> Optional[Grid]:
    work = [list(r) for r in grid]
    n = len(work)

    def fill() -> bool:
        empty = find_empty(work)
        if empty is None:
            return True
        r, c = empty
        for value in range(1, n + 1):
            if is_valid(work, r, c, value):
                work[r][c] = value
                if fill():
                    return True
                work[r][c] = 0
        return False

    return work if fill() else None


def generate_full_grid(n: int, rng: np.random.Generator) -> Grid:
    box_shape(n)
    grid = [[0] * n for _ in range(n)]

    def fill() -> bool:
        empty = find_empty(grid)
        if empty is None:
            return True
        r, c = empty
        for value in rng.permutation(n) + 1:
            if is_valid(grid, r, c, int(value)):
                grid[r][c] = int(value)
                if fill():
                    return True
                grid[r][c] = 0
        return False

    fill()
    return grid


def make_puzzle(solution: Grid, givens_fraction: float, rng: np.random.Generator) -> Grid:
    n = len(solution)
    target = max(1, int(round(givens_fraction * n * n)))
    puzzle = [list(r) for r in solution]
    filled = n * n
    for cell in rng.permutation(n * n):
        if filled <= target:
            break
        r, c = divmod(int(cell), n)
        backup = puzzle[r][c]
        puzzle[r][c] = 0
        if count_solutions(puzzle, 2) != 1:
            puzzle[r][c] = backup
        else:
            filled -= 1
    return puzzle


def _gen_shard(args) -> List[SudokuInstance]:
    grid_size, count, givens_fraction, rng = args
    out = []
    for _ in range(count):
        solution = generate_full_grid(grid_size, rng)
        out.append(SudokuInstance(grid_size, make_puzzle(solution, givens_fraction, rng), solution))
    return out


def gen_sudoku(grid_size: int, n_instances: int, givens_fraction: float, rng: np.random.Generator) -> List[SudokuInstance]:
    if not 0.0 < givens_fraction < 1.0:
        raise ConfigError("task.givens_fraction", "must lie in (0, 1)")
    box_shape(grid_size)
    sizes = shard_sizes(n_instances, SHARD_SIZE)
    jobs = [(grid_size, size, givens_fraction, r) for size, r in zip(sizes, shard_rngs(rng, len(sizes)))]
    return [inst for shard in parallel_map(_gen_shard, jobs) for inst in shard]


def encode_sudoku(instance: SudokuInstance) -> Tuple[np.ndarray, np.ndarray]:
    """(clean tokens, given flags) in row-major cell order."""
    tokens = np.asarray(instance.solution, dtype=np.int64).reshape(-1) - 1
    given = np.asarray(instance.givens, dtype=np.int64).reshape(-1) != 0
    return tokens, given


def decode_sudoku(tokens: np.ndarray, grid_size: int) -> Grid:
    arr = np.asarray(tokens, dtype=np.int64).reshape(grid_size, grid_size) + 1
    return arr.tolist()


def solve_rate(outputs: Sequence[Sequence[Sequence[int]]], instances: Sequence[SudokuInstance]) -> float:
    """Fraction of outputs equal to their instance's unique solution."""
    if len(outputs) != len(instances):
        raise ContractError(f"{len(outputs)} outputs for {len(instances)} instances")
    if not instances:
        return 0.0
    solved = sum(
        1 for out, inst in zip(outputs, instances)
        if np.array_equal(np.asarray(out), np.asarray(inst.solution))
    )
    return solved / len(instances)


def chance_solve_rate(instances: Sequence[SudokuInstance]) -> float:
    """Expected solve rate when every blank is filled uniformly at random."""
    if not instances:
        return 0.0
    return float(np.mean([float(inst.grid_size) ** -inst.blanks for inst in instances]))


def random_guess_grids(instances: Sequence[SudokuInstance], rng: np.random.Generator) -> List[Grid]:
    out = []
    for inst in instances:
        grid = [list(r) for r in inst.givens]
        for r, row in enumerate(grid):
            for c, v in enumerate(row):
                if v == 0:
                    row[c] = int(rng.integers(1, inst.grid_size + 1))
        out.append(grid)
    return out
