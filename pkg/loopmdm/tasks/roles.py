"""Per-position roles shared by every task encoding."""

ROLE_GIVEN = 0      # visible prompt: sudoku givens, clique edges
ROLE_OPEN = 1       # free positions: sudoku blanks, corpus tokens
ROLE_WORKSPACE = 2  # clique tuple slots
ROLE_ANSWER = 3     # clique answer

ROLE_NAMES = {ROLE_GIVEN: "given", ROLE_OPEN: "open", ROLE_WORKSPACE: "workspace", ROLE_ANSWER: "answer"}
