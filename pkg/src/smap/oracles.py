"""Independent brute-force reference implementations.

These deliberately avoid the code paths they are used to verify: path counts
are enumerated edge by edge over the layered graph instead of via matrix
products, the dense attention reference is plain numpy softmax attention
(no masks, no tape), and the gridworld oracles are dynamic programs over the
exact deterministic MDPs.
"""

from __future__ import annotations

import numpy as np

from . import envs
from .envs import DELTAS, GRID, LevelSpec


# ---------------------------------------------------------------------------
# path counting


def count_paths_bruteforce(layer_masks: list[np.ndarray], out_mask: np.ndarray) -> np.ndarray:
    """Paths from each input token to the output node, enumerated one edge
    instance at a time (residual self-edges carry their own multiplicity)."""
    n = out_mask.shape[-1]
    out_row = np.asarray(out_mask).reshape(n)
    counts = np.zeros(n, dtype=np.int64)
    for start in range(n):
        stack = [(0, start, 1)]
        total = 0
        while stack:
            depth, node, mult = stack.pop()
            if depth == len(layer_masks):
                if out_row[node] > 0:
                    total += mult
                continue
            m = layer_masks[depth]
            for nxt in range(n):
                edges = int(m[nxt, node] > 0) + (1 if nxt == node else 0)
                if edges:
                    stack.append((depth + 1, nxt, mult * edges))
        counts[start] = total
    return counts


# ---------------------------------------------------------------------------
# dense attention reference (numpy only)


def _np_softmax_rows(x: np.ndarray) -> np.ndarray:
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def _np_layer_norm(x: np.ndarray, g: np.ndarray, b: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    m = x.mean(axis=-1, keepdims=True)
    v = ((x - m) ** 2).mean(axis=-1, keepdims=True)
    return (x - m) / np.sqrt(v + eps) * g + b


def dense_reference_stack(tokens: np.ndarray, params: dict, n_layers: int,
                          d_k: int) -> np.ndarray:
    """Mask-free attention trunk on (B, n, d) tokens; returns (B, d) features."""
    x = np.asarray(tokens, dtype=np.float64)

    def p(name):
        return np.asarray(params[name].data, dtype=np.float64)

    for l in range(n_layers):
        pre = f"layer{l}."
        q = x @ p(pre + "wq")
        k = x @ p(pre + "wk")
        v = x @ p(pre + "wv")
        attn = _np_softmax_rows(q @ np.swapaxes(k, -1, -2) / np.sqrt(d_k))
        y = _np_layer_norm(x + attn @ v, p(pre + "ln1_g"), p(pre + "ln1_b"))
        hidden = np.maximum(y @ p(pre + "ffn_w1") + p(pre + "ffn_b1"), 0.0)
        ff = hidden @ p(pre + "ffn_w2") + p(pre + "ffn_b2")
        x = _np_layer_norm(y + ff, p(pre + "ln2_g"), p(pre + "ln2_b"))

    k = x @ p("agg.wk")
    v = x @ p("agg.wv")
    attn = _np_softmax_rows(p("agg.q") @ np.swapaxes(k, -1, -2) / np.sqrt(d_k))
    feat = attn @ v
    return feat[:, 0, :]


# ---------------------------------------------------------------------------
# DodgeGrid dynamic programming


def _target_maps(walls: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
    """Per action: target row/col index grids (blocked moves stay put)."""
    rr, cc = np.meshgrid(np.arange(GRID), np.arange(GRID), indexing="ij")
    maps = []
    for dr, dc in DELTAS:
        tr = np.clip(rr + dr, 0, GRID - 1)
        tc = np.clip(cc + dc, 0, GRID - 1)
        blocked = walls[tr, tc]
        maps.append((np.where(blocked, rr, tr), np.where(blocked, cc, tc)))
    return maps


def dodge_optimal_values(level: LevelSpec, start_t: int = 0,
                         hazards=None) -> np.ndarray:
    """V[t, r, c]: best achievable return from (r, c) at time t (free cells)."""
    hazards = hazards if hazards is not None else level.hazards
    horizon = level.horizon
    walls = level.walls
    maps = _target_maps(walls)
    item = level.item
    values = np.zeros((horizon + 1, GRID, GRID))
    for t in range(horizon - 1, start_t - 1, -1):
        cur, nxt, _ = hazards[t]
        at2 = hazards[t + 1][0]
        occ2 = np.zeros((GRID, GRID), dtype=bool)
        if at2.size:
            occ2[at2[:, 0], at2[:, 1]] = True
        best = np.full((GRID, GRID), -np.inf)
        for a, (tr, tc) in enumerate(maps):
            val = envs.TICK_REWARD + values[t + 1][tr, tc]
            collide = occ2[tr, tc].copy()
            for j in range(cur.shape[0]):
                p, q = tuple(cur[j]), tuple(nxt[j])
                if q == (-1, -1):
                    continue
                # swap: moving from q into p while the projectile does p -> q
                hits = (tr == p[0]) & (tc == p[1])
                src_is_q = np.zeros_like(hits)
                src_is_q[q] = True
                collide |= hits & src_is_q
            val = np.where(collide, 0.0, val)
            val = np.where((tr == item[0]) & (tc == item[1]), envs.GOAL_REWARD, val)
            best = np.maximum(best, val)
        best[walls] = 0.0
        values[t] = best
    return values


def dodge_optimal_actions(level: LevelSpec, values: np.ndarray, t: int,
                          hazards=None) -> np.ndarray:
    """Greedy action grid at time t under the given value table (first-max)."""
    hazards = hazards if hazards is not None else level.hazards
    walls = level.walls
    maps = _target_maps(walls)
    item = level.item
    cur, nxt, _ = hazards[t]
    at2 = hazards[t + 1][0]
    occ2 = np.zeros((GRID, GRID), dtype=bool)
    if at2.size:
        occ2[at2[:, 0], at2[:, 1]] = True
    q_values = np.full((len(DELTAS), GRID, GRID), -np.inf)
    for a, (tr, tc) in enumerate(maps):
        val = envs.TICK_REWARD + values[t + 1][tr, tc]
        collide = occ2[tr, tc].copy()
        for j in range(cur.shape[0]):
            p, qq = tuple(cur[j]), tuple(nxt[j])
            if qq == (-1, -1):
                continue
            hits = (tr == p[0]) & (tc == p[1])
            src_is_q = np.zeros_like(hits)
            src_is_q[qq] = True
            collide |= hits & src_is_q
        val = np.where(collide, 0.0, val)
        val = np.where((tr == item[0]) & (tc == item[1]), envs.GOAL_REWARD, val)
        q_values[a] = val
    return np.argmax(q_values, axis=0)


def dodge_reachable_states(level: LevelSpec, max_t: int | None = None) -> list[tuple[tuple[int, int], int]]:
    """(pos, t) pairs reachable without dying, by forward expansion."""
    horizon = max_t if max_t is not None else level.horizon
    reach = np.zeros((GRID, GRID), dtype=bool)
    reach[level.agent_start] = True
    out = [(level.agent_start, 0)]
    for t in range(horizon):
        cur, nxt, _ = level.hazards[t]
        at2 = level.hazards[t + 1][0]
        occ2 = np.zeros((GRID, GRID), dtype=bool)
        if at2.size:
            occ2[at2[:, 0], at2[:, 1]] = True
        new_reach = reach & ~occ2
        for dr, dc in DELTAS[:4]:
            tgt = envs._shift(reach, dr, dc) & ~level.walls
            for j in range(cur.shape[0]):
                p, q = tuple(cur[j]), tuple(nxt[j])
                if q != (-1, -1) and (p[0] - q[0], p[1] - q[1]) == (dr, dc) and reach[q]:
                    tgt[p] = False
            new_reach |= tgt & ~occ2
        new_reach[level.item] = False      # collecting ends the episode
        reach = new_reach
        if not reach.any():
            break
        for r, c in np.argwhere(reach):
            out.append(((int(r), int(c)), t + 1))
    return out


def blanked_level(level: LevelSpec, pos: tuple[int, int], t: int,
                  radius: int = 2) -> LevelSpec:
    """Blank everything beyond Chebyshev ``radius`` of ``pos`` (item exempt).

    Interior wall blocks outside the window disappear; only projectiles
    currently inside the window survive, and they continue their flight until
    the first remaining wall. The border stays (it frames every level).
    """
    rr, cc = np.meshgrid(np.arange(GRID), np.arange(GRID), indexing="ij")
    window = np.maximum(np.abs(rr - pos[0]), np.abs(cc - pos[1])) <= radius
    walls = level.walls.copy()
    interior = np.ones_like(walls)
    interior[0, :] = interior[-1, :] = interior[:, 0] = interior[:, -1] = False
    walls[interior & ~window] = False

    kept = []
    cur = level.hazards[t][0]
    nxt = level.hazards[t][1]
    for j in range(cur.shape[0]):
        p = (int(cur[j, 0]), int(cur[j, 1]))
        q = (int(nxt[j, 0]), int(nxt[j, 1]))
        if q == (-1, -1) or not window[p]:
            continue
        kept.append((p, (q[0] - p[0], q[1] - p[1])))

    horizon = level.horizon
    frames = []
    dead = (-1, -1)
    for s in range(horizon + 1):
        cur_s, nxt_s, trail_s = [], [], []
        if s >= t:
            k = s - t
            for (p, d) in kept:
                cell = (p[0] + k * d[0], p[1] + k * d[1])
                if not (0 <= cell[0] < GRID and 0 <= cell[1] < GRID) or walls[cell]:
                    continue
                nxt_cell = (cell[0] + d[0], cell[1] + d[1])
                if not (0 <= nxt_cell[0] < GRID and 0 <= nxt_cell[1] < GRID) or walls[nxt_cell]:
                    nxt_cell = dead
                prev_cell = (cell[0] - d[0], cell[1] - d[1])
                if k == 0 or not (0 <= prev_cell[0] < GRID and 0 <= prev_cell[1] < GRID):
                    prev_cell = dead
                cur_s.append(cell)
                nxt_s.append(nxt_cell)
                trail_s.append(prev_cell)
        frames.append((np.array(cur_s, dtype=np.int16).reshape(-1, 2),
                       np.array(nxt_s, dtype=np.int16).reshape(-1, 2),
                       np.array(trail_s, dtype=np.int16).reshape(-1, 2)))
    walls.setflags(write=False)
    return LevelSpec(kind=level.kind, seed=level.seed, walls=walls,
                     agent_start=level.agent_start, palette=level.palette,
                     horizon=horizon, emitters=(), item=level.item,
                     hazards=tuple(frames))


def dodge_sparse_dependence_fraction(level: LevelSpec, sample: int = 300,
                                     radius: int = 2, rng=None) -> float:
    """Fraction of (sampled) reachable states whose optimal action is
    unchanged after blanking everything beyond the local window."""
    rng = rng or np.random.default_rng(0)
    states = dodge_reachable_states(level, max_t=level.horizon - 2)
    if len(states) > sample:
        idx = rng.choice(len(states), size=sample, replace=False)
        states = [states[i] for i in sorted(idx)]
    full_values = dodge_optimal_values(level)
    same = 0
    for pos, t in states:
        full_action = dodge_optimal_actions(level, full_values, t)[pos]
        blanked = blanked_level(level, pos, t, radius=radius)
        blank_values = dodge_optimal_values(blanked, start_t=t)
        blank_action = dodge_optimal_actions(blanked, blank_values, t)[pos]
        same += int(full_action == blank_action)
    return same / len(states)


def dodge_random_policy_return(level: LevelSpec, episodes: int, rng) -> float:
    total = 0.0
    for _ in range(episodes):
        s = envs.reset(level)
        while not s.done:
            s, r, _ = envs.step(s, int(rng.integers(0, envs.N_ACTIONS)))
            total += r
    return total / episodes


def dodge_rollout_optimal(level: LevelSpec) -> float:
    """Roll the greedy DP policy through the real env; cross-checks both."""
    values = dodge_optimal_values(level)
    s = envs.reset(level)
    total = 0.0
    while not s.done:
        action = dodge_optimal_actions(level, values, s.t)[s.pos]
        s, r, _ = envs.step(s, int(action))
        total += r
    return total


# ---------------------------------------------------------------------------
# MazeGrid analysis


def maze_open_cells(level: LevelSpec) -> list[tuple[int, int]]:
    cells = []
    for r in range(envs.MAZE_CELLS):
        for c in range(envs.MAZE_CELLS):
            cells.append((r, c))
    return cells


def _maze_adjacency(walls: np.ndarray) -> dict[tuple[int, int], list[tuple[int, tuple[int, int]]]]:
    """Cell graph from the pixel walls: (action, neighbor) pairs per cell."""
    adj = {}
    for r in range(envs.MAZE_CELLS):
        for c in range(envs.MAZE_CELLS):
            px = (2 * r + 1, 2 * c + 1)
            moves = []
            for a, (dr, dc) in enumerate(DELTAS[:4]):
                between = (px[0] + dr, px[1] + dc)
                nr, nc = r + dr, c + dc
                if 0 <= nr < envs.MAZE_CELLS and 0 <= nc < envs.MAZE_CELLS \
                        and not walls[between]:
                    moves.append((a, (nr, nc)))
            adj[(r, c)] = moves
    return adj


def maze_bfs_distances(walls: np.ndarray, goal_cell: tuple[int, int]) -> np.ndarray:
    adj = _maze_adjacency(walls)
    dist = np.full((envs.MAZE_CELLS, envs.MAZE_CELLS), np.inf)
    dist[goal_cell] = 0
    queue = [goal_cell]
    while queue:
        cell = queue.pop(0)
        for _, nxt in adj[cell]:
            if dist[nxt] == np.inf:
                dist[nxt] = dist[cell] + 1
                queue.append(nxt)
    return dist


def maze_optimal_actions(walls: np.ndarray, goal_cell: tuple[int, int]) -> dict[tuple[int, int], int]:
    """First step along a shortest path per cell (first-max tie-break)."""
    adj = _maze_adjacency(walls)
    dist = maze_bfs_distances(walls, goal_cell)
    actions = {}
    for cell, moves in adj.items():
        if cell == goal_cell or dist[cell] == np.inf:
            continue
        best_a, best_d = None, np.inf
        for a, nxt in moves:
            if dist[nxt] < best_d:
                best_a, best_d = a, dist[nxt]
        actions[cell] = best_a
    return actions


def maze_blank_quadrant(level: LevelSpec, quadrant: int) -> np.ndarray:
    """Open every wall pixel strictly inside one quadrant of the maze area."""
    walls = level.walls.copy()
    half_r = (0, 8) if quadrant in (0, 1) else (8, 15)
    half_c = (0, 8) if quadrant in (0, 2) else (8, 15)
    for r in range(max(1, half_r[0]), min(14, half_r[1]) + 1):
        for c in range(max(1, half_c[0]), min(14, half_c[1]) + 1):
            walls[r, c] = False
    # cell pixels are always open; keep non-maze padding intact
    walls[15, :] = True
    walls[:, 15] = True
    walls[0, :] = True
    walls[:, 0] = True
    return walls


def maze_dense_dependence_fraction(level: LevelSpec, quadrant: int) -> float:
    """Fraction of cells whose BFS-optimal action changes when a quadrant of
    the maze is opened up."""
    goal_cell = ((level.goal[0] - 1) // 2, (level.goal[1] - 1) // 2)
    base = maze_optimal_actions(level.walls, goal_cell)
    blanked = maze_optimal_actions(maze_blank_quadrant(level, quadrant), goal_cell)
    cells = [c for c in base if c in blanked]
    changed = sum(base[c] != blanked[c] for c in cells)
    return changed / max(1, len(cells))


def maze_count_simple_paths(level: LevelSpec) -> int:
    """Number of simple start->goal paths (1 for a perfect maze)."""
    start = ((level.agent_start[0] - 1) // 2, (level.agent_start[1] - 1) // 2)
    goal = ((level.goal[0] - 1) // 2, (level.goal[1] - 1) // 2)
    adj = _maze_adjacency(level.walls)
    count = 0
    stack = [(start, frozenset([start]))]
    while stack:
        cell, seen = stack.pop()
        if cell == goal:
            count += 1
            continue
        for _, nxt in adj[cell]:
            if nxt not in seen:
                stack.append((nxt, seen | {nxt}))
    return count


# ---------------------------------------------------------------------------
# influence blocking


def influence_blocking_trial(seed: int, n_perturbations: int = 3) -> tuple[int, bool]:
    """Check that tokens with zero surviving paths cannot move the output.

    Uses eval-mode deterministic masks (betas biased negative so zero-path
    tokens exist), then perturbs the observation inside one token's receptive
    field while holding the masks fixed. Returns (tokens tested, all exactly
    invariant). Exactness is bitwise at the active precision.
    """
    from . import paths as pathmod
    from .attention import TrunkConfig
    from .policies import make_policy

    rng = np.random.default_rng(seed)
    cfg = TrunkConfig()
    policy = make_policy("sparse_masked", cfg, seed=seed)
    for name, t in policy.params.items():
        if name.endswith("beta"):
            t.data = np.asarray(rng.uniform(-3.0, -0.5), dtype=t.data.dtype)
    obs = rng.random((1, cfg.obs_channels, 16, 16))
    out = policy.output(obs, mode="eval", want_records=True)
    relevance = pathmod.effective_input_relevance(out.path_matrix)
    dead = [i for i in range(relevance.size) if not relevance[i]]
    if not dead:
        return 0, True

    from .attention import forward_trunk
    from . import autodiff as ad_mod
    from .tokenizer import receptive_fields as rf_fn

    rects = out.grid.receptive_fields
    base = forward_trunk(ad_mod.Tensor(obs.astype(ad_mod.get_default_dtype())),
                         policy.params, cfg, mode="eval",
                         masks_override=out.mask_set)
    tested = 0
    for i in dead:
        r0, r1, c0, c1 = rects[i]
        for _ in range(n_perturbations):
            perturbed = obs.copy()
            perturbed[0, :, r0:r1, c0:c1] += rng.standard_normal(
                (obs.shape[1], r1 - r0, c1 - c0)) * 10.0
            alt = forward_trunk(
                ad_mod.Tensor(perturbed.astype(ad_mod.get_default_dtype())),
                policy.params, cfg, mode="eval", masks_override=out.mask_set)
            if not np.array_equal(base.features.data, alt.features.data):
                return tested, False
            tested += 1
    return tested, True


# ---------------------------------------------------------------------------
# oracle suite (used by the CLI and the acceptance tests)


def run_oracle_suite(patterns: int = 10_000, progress=None) -> list[tuple[str, bool, str]]:
    """Named pass/fail checks pairing fast implementations with brute force."""
    from . import autodiff as ad_mod
    from . import paths as pathmod
    from .attention import LayerMask, MaskSet
    from .autodiff import Tensor

    checks: list[tuple[str, bool, str]] = []

    def record(name, ok, detail=""):
        checks.append((name, ok, detail))
        if progress:
            progress(f"{'PASS' if ok else 'FAIL'} {name:<28} {detail}")

    rng = np.random.default_rng(20_240_601)
    mismatches = 0
    for _ in range(patterns):
        n = int(rng.integers(1, 5))
        layers = int(rng.integers(0, 4))
        layer_masks = [(rng.random((n, n)) < rng.random()).astype(float)
                       for _ in range(layers)]
        out_mask = (rng.random((1, n)) < rng.random()).astype(float)
        ms = MaskSet(layers=[LayerMask(None, None, Tensor(m[None])) for m in layer_masks],
                     out=LayerMask(None, None, Tensor(out_mask[None])),
                     tau=1.0, mode="eval")
        pm = pathmod.path_matrix(ms)
        brute = count_paths_bruteforce(layer_masks, out_mask)
        if not np.array_equal(pm.a_out.data[0, 0].astype(np.int64), brute):
            mismatches += 1
    record("path_bruteforce_equivalence", mismatches == 0,
           f"{patterns} random mask patterns, {mismatches} mismatches")

    mu_ok = True
    for n in range(1, 9):
        for layers in range(0, 5):
            ms = MaskSet(layers=[LayerMask(None, None, Tensor(np.ones((1, n, n))))
                                 for _ in range(layers)],
                         out=LayerMask(None, None, Tensor(np.ones((1, 1, n)))),
                         tau=1.0, mode="eval")
            total = float(pathmod.path_matrix(ms).total.data[0])
            if total != pathmod.max_paths(n, layers):
                mu_ok = False
    record("mu_closed_form", mu_ok, "n in 1..8, L in 0..4, exact")

    dp_ok = True
    worst = 0.0
    for seed in range(5):
        level = envs.generate_level(envs.KIND_DODGE, seed)
        v0 = dodge_optimal_values(level)[0][level.agent_start]
        ret = dodge_rollout_optimal(level)
        worst = max(worst, abs(v0 - ret))
        if abs(v0 - ret) > 1e-9:
            dp_ok = False
    record("dodge_dp_vs_rollout", dp_ok, f"5 seeds, worst |diff| {worst:.2e}")

    safe_ok = True
    for seed in range(1000):
        level = envs.generate_level(envs.KIND_DODGE, seed)
        if len(level.emitters) < 1 or not envs._dodge_safe_policy_exists(
                level.walls, level.hazards, level.agent_start, level.horizon):
            safe_ok = False
            break
    record("dodge_safe_policy_validator", safe_ok, "1000 seeds")

    maze_ok = all(maze_count_simple_paths(envs.generate_level(envs.KIND_MAZE, s)) == 1
                  for s in range(100))
    record("maze_unique_path", maze_ok, "100 seeds, exactly one start->goal path")

    split_ok = True
    for kind in envs.KINDS:
        tr, te = envs.make_split(kind, 200, 100)
        if set(tr) & set(te):
            split_ok = False
    record("split_disjoint", split_ok, "200 train / 100 test, both env kinds")

    with ad_mod.precision(np.float64):
        blocked_ok = True
        tested_total = 0
        for seed in range(100):
            tested, ok = influence_blocking_trial(seed)
            tested_total += tested
            if not ok:
                blocked_ok = False
                break
    record("influence_blocking", blocked_ok,
           f"100 trials, {tested_total} zero-path perturbations, exact equality")

    return checks
