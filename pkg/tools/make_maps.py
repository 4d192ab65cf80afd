"""Regenerate the bundled maps (seeded, so the output is stable).

    python3 tools/make_maps.py src/rdpp/maps
"""

import sys
from pathlib import Path

import numpy as np

from rdpp.gridworld import load_map


def render(blocked: np.ndarray, goals, start) -> str:
    rows = []
    for y in range(blocked.shape[0]):
        row = []
        for x in range(blocked.shape[1]):
            if (x, y) == start:
                row.append("S")
            elif (x, y) in goals:
                row.append(str(goals.index((x, y))))
            else:
                row.append("#" if blocked[y, x] else ".")
        rows.append("".join(row))
    return "\n".join(rows) + "\n"


def seal_pockets(blocked: np.ndarray, start) -> np.ndarray:
    """Block every free cell that cannot be reached from the start."""
    h, w = blocked.shape
    seen = np.zeros_like(blocked)
    stack = [start]
    seen[start[1], start[0]] = True
    while stack:
        x, y = stack.pop()
        for dx, dy in ((0, -1), (0, 1), (-1, 0), (1, 0)):
            nx, ny = x + dx, y + dy
            if 0 <= nx < w and 0 <= ny < h and not blocked[ny, nx] and not seen[ny, nx]:
                seen[ny, nx] = True
                stack.append((nx, ny))
    return blocked | ~seen


def clear(blocked, cells, radius=1):
    h, w = blocked.shape
    for x, y in cells:
        blocked[max(0, y - radius):min(h, y + radius + 1), max(0, x - radius):min(w, x + radius + 1)] = False


def alcove_row(blocked, goals):
    """Wall off row 0 except the goal cells, so each goal is a dead end.

    A dead-end goal never lies on a shortest path to another goal.
    """
    blocked[0, :] = True
    for x, y in goals:
        blocked[y, x] = False
    return blocked


def deceptive15():
    """Central block between the start and two top alcove goals; a third goal
    in the bottom-right dead-end corner."""
    blocked = np.zeros((15, 15), dtype=bool)
    blocked[3:13, 4:11] = True
    blocked[13, 14] = True
    goals = [(1, 0), (13, 0), (14, 14)]
    return alcove_row(blocked, goals[:2]), goals, (7, 14)


def large_obstacles(size=49, seed=49, n_blocks=7):
    """Open field with a few big rectangular structures."""
    rng = np.random.default_rng(seed)
    blocked = np.zeros((size, size), dtype=bool)
    blocked[18:31, 12:37] = True  # central mass between start and the goal row
    for _ in range(n_blocks):
        bw, bh = rng.integers(4, 9, size=2)
        x0 = rng.integers(2, size - bw - 2)
        y0 = rng.integers(6, size - bh - 8)
        blocked[y0:y0 + bh, x0:x0 + bw] = True
    step = (size - 5) // 4
    goals = [(2 + i * step, 0) for i in range(5)]
    goals = [goals[0], goals[4], goals[2], goals[1], goals[3]]
    start = (size // 2, size - 3)
    clear(blocked, goals + [start], radius=2)
    return seal_pockets(alcove_row(blocked, goals), start), goals, start


def dense_random(size=100, seed=100, density=0.22):
    """High-density random single-cell obstacles."""
    rng = np.random.default_rng(seed)
    blocked = rng.random((size, size)) < density
    goals = [(5, 5), (size - 6, 5), (size // 2, 4), (5, size // 2), (size - 6, size // 2)]
    start = (size // 2, size - 5)
    clear(blocked, goals + [start], radius=2)
    return seal_pockets(blocked, start), goals, start


def pirate_field(size=49, seed=7):
    """Sparser obstacles so pirates can move freely."""
    rng = np.random.default_rng(seed)
    blocked = np.zeros((size, size), dtype=bool)
    for _ in range(10):
        bw, bh = rng.integers(3, 7, size=2)
        x0 = rng.integers(2, size - bw - 2)
        y0 = rng.integers(6, size - bh - 8)
        blocked[y0:y0 + bh, x0:x0 + bw] = True
    step = (size - 5) // 4
    goals = [(2 + i * step, 0) for i in range(5)]
    start = (size // 2, size - 3)
    clear(blocked, goals + [start], radius=2)
    return seal_pockets(alcove_row(blocked, goals), start), goals, start


def main(out: str) -> None:
    out = Path(out)
    for name, (blocked, goals, start) in {
        "grid15": deceptive15(),
        "grid49": large_obstacles(),
        "grid100": dense_random(),
        "pirate49": pirate_field(),
    }.items():
        text = render(blocked, goals, start)
        load_map(text)
        (out / f"{name}.txt").write_text(text)


if __name__ == "__main__":
    main(sys.argv[1] if len(sys.argv) > 1 else "src/rdpp/maps")
