"""Procedurally generated gridworld families.

DodgeGrid: a 16x16 arena with bordered walls, a few wall blocks, 2-4 hazard
projectiles bouncing deterministically along rows or columns, and one
collectible. Surviving a step earns +0.1, collecting ends the episode at +10,
collision ends it at 0. Admits a sparse-dependent policy: dodging is decided
by the agent's immediate surroundings plus the collectible location.

MazeGrid: a perfect maze carved by seeded depth-first search on a 7x7 cell
lattice, rendered to 16x16 pixels. Reaching the goal earns +10, everything
else 0. Optimal play requires most of the layout, i.e. a dense-dependent
policy.

Layouts are pure functions of (kind, seed). Generation rejects DodgeGrid
layouts without a provably safe full-horizon policy, resampling from a
seed-derived substream, so every exposed level is solvable.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, replace
from functools import lru_cache
from typing import Optional

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, UsageError

GRID = 16
MAZE_CELLS = 7
DODGE_HORIZON = 128
MAZE_HORIZON = 256
TICK_REWARD = 0.1
GOAL_REWARD = 10.0
N_PALETTES = 10

KIND_DODGE = "DodgeGrid"
KIND_MAZE = "MazeGrid"
KINDS = (KIND_DODGE, KIND_MAZE)

ACTIONS = ("up", "down", "left", "right", "stay")
DELTAS = ((-1, 0), (1, 0), (0, -1), (0, 1), (0, 0))
N_ACTIONS = len(ACTIONS)

RETURN_BOUNDS = {
    KIND_DODGE: (0.0, GOAL_REWARD + TICK_REWARD * DODGE_HORIZON),
    KIND_MAZE: (0.0, GOAL_REWARD),
}

_SPLIT_ENTROPY = 0x5EEDB10C
TEST_SEED_BASE = 10 ** 6
TEST_SEED_SPAN = 10 ** 4


@dataclass(frozen=True)
class Emitter:
    """Fires a projectile along its line every ``period`` steps.

    Projectiles travel one cell per step from the span's firing end to the
    far wall and vanish there, so several are usually in flight at once.
    """
    axis: int          # 0: projectiles travel along a row, 1: along a column
    line: int          # the fixed row (axis 0) or column (axis 1)
    span_start: int
    span_len: int
    period: int
    phase: int
    direction: int     # +1: fired from span_start end, -1: from the far end


@dataclass(frozen=True)
class LevelSpec:
    kind: str
    seed: int
    walls: np.ndarray                   # (16, 16) bool
    agent_start: tuple[int, int]
    palette: int
    horizon: int
    emitters: tuple[Emitter, ...] = ()
    item: Optional[tuple[int, int]] = None
    goal: Optional[tuple[int, int]] = None
    # per timestep: projectile cells now, where each moves next (-1,-1 when it
    # leaves the arena), and the cell just behind it (trail, -1,-1 if none)
    hazards: Optional[tuple[tuple[np.ndarray, np.ndarray, np.ndarray], ...]] = None


@dataclass(frozen=True)
class EnvState:
    level: LevelSpec
    pos: tuple[int, int]
    t: int
    done: bool


def hazard_positions(state: EnvState) -> np.ndarray:
    """(k, 2) projectile cells at the state's timestep (empty for MazeGrid)."""
    if state.level.hazards is None:
        return np.zeros((0, 2), dtype=np.int16)
    return state.level.hazards[state.t][0]


def _emitter_cell(e: Emitter, x: int) -> tuple[int, int]:
    coord = e.span_start + x if e.direction > 0 else e.span_start + e.span_len - 1 - x
    return (e.line, coord) if e.axis == 0 else (coord, e.line)


def _hazard_tables(emitters: tuple[Emitter, ...], horizon: int
                   ) -> tuple[tuple[np.ndarray, np.ndarray, np.ndarray], ...]:
    frames = []
    dead = (-1, -1)
    for t in range(horizon + 1):
        cur, nxt, trail = [], [], []
        for e in emitters:
            for x in range(e.span_len):
                if t - x >= 0 and (t - x - e.phase) % e.period == 0:
                    cur.append(_emitter_cell(e, x))
                    nxt.append(_emitter_cell(e, x + 1) if x + 1 < e.span_len else dead)
                    trail.append(_emitter_cell(e, x - 1) if x - 1 >= 0 else dead)
        frames.append((np.array(cur, dtype=np.int16).reshape(-1, 2),
                       np.array(nxt, dtype=np.int16).reshape(-1, 2),
                       np.array(trail, dtype=np.int16).reshape(-1, 2)))
    return tuple(frames)


def _line_runs(free_line: np.ndarray) -> list[tuple[int, int]]:
    """Maximal runs (start, length) of free cells along one grid line."""
    runs = []
    start = None
    for i, f in enumerate(free_line):
        if f and start is None:
            start = i
        elif not f and start is not None:
            runs.append((start, i - start))
            start = None
    if start is not None:
        runs.append((start, len(free_line) - start))
    return runs


def _shift(grid: np.ndarray, dr: int, dc: int) -> np.ndarray:
    """out[r, c] = grid[r - dr, c - dc], zero-filled at the borders."""
    out = np.zeros_like(grid)
    out[max(0, dr):GRID + min(0, dr), max(0, dc):GRID + min(0, dc)] = \
        grid[max(0, -dr):GRID + min(0, -dr), max(0, -dc):GRID + min(0, -dc)]
    return out


def _dodge_safe_policy_exists(walls: np.ndarray, hazards, start: tuple[int, int],
                              horizon: int) -> bool:
    """Forward reach-set check: can the agent provably avoid all collisions?

    A blocked move has the same effect as staying, so the transitions reduce
    to stay plus the four unblocked moves. A transition source -> target also
    dies when a projectile crosses it in the opposite direction (swap).
    """
    free = ~walls
    if any(tuple(p) == start for p in hazards[0][0]):
        return False
    reach = np.zeros_like(free)
    reach[start] = True
    for t in range(horizon):
        cur, nxt, _ = hazards[t]
        occ2 = np.zeros_like(free)
        at2 = hazards[t + 1][0]
        occ2[at2[:, 0], at2[:, 1]] = True
        new_reach = reach & ~occ2
        for dr, dc in DELTAS[:4]:
            tgt = _shift(reach, dr, dc) & free
            for j in range(cur.shape[0]):
                p, q = tuple(cur[j]), tuple(nxt[j])
                if q != (-1, -1) and (p[0] - q[0], p[1] - q[1]) == (dr, dc) and reach[q]:
                    tgt[p] = False
            new_reach |= tgt & ~occ2
        reach = new_reach
        if not reach.any():
            return False
    return True


def _generate_dodge(seed: int) -> LevelSpec:
    for attempt in range(64):
        ss = np.random.SeedSequence(entropy=(seed & 0xFFFFFFFFFFFFFFFF),
                                    spawn_key=(0xD0D6E, attempt))
        rng = np.random.default_rng(ss)
        walls = np.zeros((GRID, GRID), dtype=bool)
        walls[0, :] = walls[-1, :] = walls[:, 0] = walls[:, -1] = True
        palette = int(rng.integers(0, N_PALETTES))

        n_blocks = int(rng.integers(0, 7))
        for _ in range(n_blocks):
            r = int(rng.integers(2, GRID - 2))
            c = int(rng.integers(2, GRID - 2))
            walls[r, c] = True

        free = ~walls
        open_cells = [tuple(int(v) for v in cell) for cell in np.argwhere(free)]
        rng.shuffle(open_cells)
        # spawn away from the border so there is room to dodge from step one
        interior = [c for c in open_cells if 3 <= c[0] <= 12 and 3 <= c[1] <= 12]
        if not interior:
            continue
        start = interior[0]

        # emitter lines stay close to the spawn so projectiles actually
        # threaten the agent; both axes are used
        emitters = []
        n_emit = int(rng.integers(2, 5))
        guard = 0
        while len(emitters) < n_emit and guard < 100:
            guard += 1
            axis = int(rng.integers(0, 2))
            anchor = start[0] if axis == 0 else start[1]
            line = int(np.clip(anchor + int(rng.integers(-3, 4)), 1, GRID - 2))
            if any(e.axis == axis and e.line == line for e in emitters):
                continue
            line_cells = free[line, :] if axis == 0 else free[:, line]
            runs = [run for run in _line_runs(line_cells) if run[1] >= 6]
            if not runs:
                continue
            span_start, span_len = max(runs, key=lambda run: run[1])
            period = int(rng.integers(4, 8))
            phase = int(rng.integers(0, period))
            direction = 1 if rng.random() < 0.5 else -1
            emitters.append(Emitter(axis, line, span_start, span_len,
                                    period, phase, direction))
        if len(emitters) < 2:
            continue
        emitters = tuple(emitters)
        hazards = _hazard_tables(emitters, DODGE_HORIZON)

        t0_occupied = {tuple(p) for p in hazards[0][0]}
        if start in t0_occupied:
            continue
        item = None
        for cell in open_cells:
            if cell != start and abs(cell[0] - start[0]) + abs(cell[1] - start[1]) >= 6:
                item = cell
                break
        if item is None:
            continue
        if not _dodge_safe_policy_exists(walls, hazards, start, DODGE_HORIZON):
            continue
        walls.setflags(write=False)
        return LevelSpec(kind=KIND_DODGE, seed=seed, walls=walls, agent_start=start,
                         palette=palette, horizon=DODGE_HORIZON, emitters=emitters,
                         item=item, hazards=hazards)
    raise RuntimeError(f"could not generate a valid DodgeGrid level for seed {seed}")


def _generate_maze(seed: int) -> LevelSpec:
    ss = np.random.SeedSequence(entropy=(seed & 0xFFFFFFFFFFFFFFFF), spawn_key=(0xA7E,))
    rng = np.random.default_rng(ss)
    palette = int(rng.integers(0, N_PALETTES))

    visited = np.zeros((MAZE_CELLS, MAZE_CELLS), dtype=bool)
    open_h = np.zeros((MAZE_CELLS, MAZE_CELLS - 1), dtype=bool)   # (r,c)-(r,c+1)
    open_v = np.zeros((MAZE_CELLS - 1, MAZE_CELLS), dtype=bool)   # (r,c)-(r+1,c)
    start_cell = (int(rng.integers(0, MAZE_CELLS)), int(rng.integers(0, MAZE_CELLS)))
    stack = [start_cell]
    visited[start_cell] = True
    while stack:
        r, c = stack[-1]
        options = []
        for dr, dc in ((-1, 0), (1, 0), (0, -1), (0, 1)):
            nr, nc = r + dr, c + dc
            if 0 <= nr < MAZE_CELLS and 0 <= nc < MAZE_CELLS and not visited[nr, nc]:
                options.append((nr, nc))
        if not options:
            stack.pop()
            continue
        nr, nc = options[int(rng.integers(0, len(options)))]
        if nr == r:
            open_h[r, min(c, nc)] = True
        else:
            open_v[min(r, nr), c] = True
        visited[nr, nc] = True
        stack.append((nr, nc))

    walls = np.ones((GRID, GRID), dtype=bool)
    for r in range(MAZE_CELLS):
        for c in range(MAZE_CELLS):
            walls[2 * r + 1, 2 * c + 1] = False
    for r in range(MAZE_CELLS):
        for c in range(MAZE_CELLS - 1):
            if open_h[r, c]:
                walls[2 * r + 1, 2 * c + 2] = False
    for r in range(MAZE_CELLS - 1):
        for c in range(MAZE_CELLS):
            if open_v[r, c]:
                walls[2 * r + 2, 2 * c + 1] = False

    agent_cell = (int(rng.integers(0, MAZE_CELLS)), int(rng.integers(0, MAZE_CELLS)))
    dists = maze_cell_distances(open_h, open_v, agent_cell)
    goal_cell = tuple(int(v) for v in np.unravel_index(np.argmax(dists), dists.shape))

    walls.setflags(write=False)
    return LevelSpec(kind=KIND_MAZE, seed=seed, walls=walls,
                     agent_start=(2 * agent_cell[0] + 1, 2 * agent_cell[1] + 1),
                     palette=palette, horizon=MAZE_HORIZON,
                     goal=(2 * goal_cell[0] + 1, 2 * goal_cell[1] + 1))


def maze_cell_distances(open_h: np.ndarray, open_v: np.ndarray,
                        source: tuple[int, int]) -> np.ndarray:
    """BFS distances over maze cells from a source cell."""
    dist = np.full((MAZE_CELLS, MAZE_CELLS), -1, dtype=np.int32)
    dist[source] = 0
    queue = [source]
    while queue:
        r, c = queue.pop(0)
        moves = []
        if c + 1 < MAZE_CELLS and open_h[r, c]:
            moves.append((r, c + 1))
        if c - 1 >= 0 and open_h[r, c - 1]:
            moves.append((r, c - 1))
        if r + 1 < MAZE_CELLS and open_v[r, c]:
            moves.append((r + 1, c))
        if r - 1 >= 0 and open_v[r - 1, c]:
            moves.append((r - 1, c))
        for nxt in moves:
            if dist[nxt] < 0:
                dist[nxt] = dist[r, c] + 1
                queue.append(nxt)
    return dist


@lru_cache(maxsize=4096)
def generate_level(kind: str, seed: int) -> LevelSpec:
    """Deterministically expand (kind, seed) into a level layout."""
    if kind == KIND_DODGE:
        return _generate_dodge(int(seed))
    if kind == KIND_MAZE:
        return _generate_maze(int(seed))
    raise ConfigError(f"unknown environment kind {kind!r}")


def reset(level: LevelSpec) -> EnvState:
    return EnvState(level=level, pos=level.agent_start, t=0, done=False)


def step(state: EnvState, action: int) -> tuple[EnvState, float, bool]:
    """Advance one step. Moves into walls are no-ops."""
    if state.done:
        raise UsageError("step() called on a terminated episode")
    if not 0 <= action < N_ACTIONS:
        raise UsageError(f"action must be in [0, {N_ACTIONS}), got {action}")
    level = state.level
    dr, dc = DELTAS[action]
    r, c = state.pos
    if level.kind == KIND_MAZE:
        between = (r + dr, c + dc)
        target = (r + 2 * dr, c + 2 * dc)
        new_pos = state.pos if (dr, dc) == (0, 0) or level.walls[between] else target
    else:
        target = (r + dr, c + dc)
        new_pos = state.pos if level.walls[target] else target
    t2 = state.t + 1

    if level.kind == KIND_DODGE:
        if new_pos == level.item:
            return replace(state, pos=new_pos, t=t2, done=True), GOAL_REWARD, True
        cur, nxt, _ = level.hazards[state.t]
        at2 = level.hazards[t2][0]
        hit = any(tuple(p) == new_pos for p in at2)
        if not hit:
            for j in range(cur.shape[0]):
                if tuple(cur[j]) == new_pos and tuple(nxt[j]) == state.pos:
                    hit = True
                    break
        if hit:
            return replace(state, pos=new_pos, t=t2, done=True), 0.0, True
        done = t2 >= level.horizon
        return replace(state, pos=new_pos, t=t2, done=done), TICK_REWARD, done

    if new_pos == level.goal:
        return replace(state, pos=new_pos, t=t2, done=True), GOAL_REWARD, True
    done = t2 >= level.horizon
    return replace(state, pos=new_pos, t=t2, done=done), 0.0, done


def render_obs(state: EnvState, dtype=None) -> np.ndarray:
    """(4, 16, 16) observation: walls, agent, hazards/goal, palette tint."""
    dtype = dtype or ad.get_default_dtype()
    level = state.level
    obs = np.zeros((4, GRID, GRID), dtype=dtype)
    obs[0][level.walls] = 1.0
    obs[1][state.pos] = 1.0
    if level.kind == KIND_DODGE:
        obs[2][level.item] = 1.0
        cur, _, trail = level.hazards[state.t]
        for j in range(trail.shape[0]):
            cell = tuple(trail[j])
            if cell != (-1, -1) and not level.walls[cell]:
                obs[2][cell] = max(obs[2][cell], 0.3)
        for j in range(cur.shape[0]):
            cell = tuple(cur[j])
            obs[2][cell] = max(obs[2][cell], 0.6)
    else:
        obs[2][level.goal] = 1.0
    obs[3][:] = 0.15 + 0.8 * level.palette / (N_PALETTES - 1)
    return obs


def make_split(kind: str, n_train: int, n_test: int) -> tuple[list[int], list[int]]:
    """Disjoint train/test level seeds: [0, n_train) vs draws from [1e6, 1e6+1e4)."""
    if kind not in KINDS:
        raise ConfigError(f"unknown environment kind {kind!r}")
    if n_train < 1 or n_test < 1:
        raise ConfigError("split sizes must be at least 1")
    if n_test > TEST_SEED_SPAN:
        raise ConfigError(f"n_test must be <= {TEST_SEED_SPAN}")
    train = list(range(n_train))
    rng = np.random.default_rng(np.random.SeedSequence(
        entropy=_SPLIT_ENTROPY, spawn_key=(zlib.crc32(kind.encode("utf-8")),)))
    draws = rng.choice(TEST_SEED_SPAN, size=n_test, replace=False)
    test = sorted(int(TEST_SEED_BASE + d) for d in draws)
    return train, test


_PALETTE_RGB = [
    (40, 42, 54), (68, 71, 90), (98, 114, 164), (80, 250, 123), (255, 184, 108),
    (255, 121, 198), (139, 233, 253), (241, 250, 140), (189, 147, 249), (255, 85, 85),
]


def render_ppm(state: EnvState, path) -> None:
    """Export the current frame as a binary portable pixmap (P6)."""
    level = state.level
    img = np.zeros((GRID, GRID, 3), dtype=np.uint8)
    bg = _PALETTE_RGB[level.palette % len(_PALETTE_RGB)]
    img[:, :] = [max(8, v // 3) for v in bg]
    img[level.walls] = (200, 200, 200)
    if level.kind == KIND_DODGE:
        for p in level.hazards[state.t][0]:
            img[tuple(p)] = (230, 60, 60)
        img[level.item] = (250, 220, 60)
    else:
        img[level.goal] = (250, 220, 60)
    img[state.pos] = (80, 240, 120)
    with open(path, "wb") as fh:
        fh.write(f"P6\n{GRID} {GRID}\n255\n".encode("ascii"))
        fh.write(img.tobytes())
