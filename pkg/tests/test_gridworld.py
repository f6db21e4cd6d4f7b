from collections import deque

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dynsleuth.gridworld import (
    GenerationFailed,
    GridAction,
    GridMap,
    MapParseError,
    MdpSpec,
    bellman_residual,
    boltzmann_policy,
    lidar,
    lidar_all,
    parse_map,
    random_map,
    render_map,
    step,
    validate_constraints,
    value_iteration,
)

SPEC = MdpSpec()

FIG_LIKE = """\
...#..G
.#.#.#.
.#...#.
.####..
......#
.#.#...
...#.#.
"""


# -- independent oracles -----------------------------------------------------


def brute_force_constraints(cells, width, height, goal):
    grid = [[cells[r * width + c] for c in range(width)] for r in range(height)]
    no_block = True
    for r in range(height - 1):
        for c in range(width - 1):
            if grid[r][c] and grid[r + 1][c] and grid[r][c + 1] and grid[r + 1][c + 1]:
                no_block = False
    goal_free = grid[goal // width][goal % width] == 0
    free = {(r, c) for r in range(height) for c in range(width) if grid[r][c] == 0}
    seen = set()
    if goal_free:
        stack = [divmod(goal, width)]
        while stack:
            cur = stack.pop()
            if cur in seen or cur not in free:
                continue
            seen.add(cur)
            r, c = cur
            stack.extend([(r + 1, c), (r - 1, c), (r, c + 1), (r, c - 1)])
    return (seen == free and goal_free), goal_free, no_block


def ray_march(m: GridMap, cell: int):
    r0, c0 = divmod(cell, m.width)
    out = []
    for dr, dc in [(-1, 0), (-1, 1), (0, 1), (1, 1), (1, 0), (1, -1), (0, -1), (-1, -1)]:
        k = 0
        r, c = r0, c0
        while True:
            k += 1
            r += dr
            c += dc
            if not (0 <= r < m.height and 0 <= c < m.width) or m.cells[r * m.width + c]:
                out.append(k)
                break
    return out


def bfs_distances(m: GridMap):
    dist = {m.goal: 0}
    q = deque([m.goal])
    while q:
        cur = q.popleft()
        r, c = divmod(cur, m.width)
        for nr, nc in [(r + 1, c), (r - 1, c), (r, c + 1), (r, c - 1)]:
            nxt = nr * m.width + nc
            if 0 <= nr < m.height and 0 <= nc < m.width and not m.cells[nxt] and nxt not in dist:
                dist[nxt] = dist[cur] + 1
                q.append(nxt)
    return dist


def random_maps(n, seed=0, size=7):
    rng = np.random.default_rng(seed)
    return [random_map(size, size, int(rng.integers(size * size)), 0.3, rng) for _ in range(n)]


# -- parse / render ----------------------------------------------------------


def test_parse_open_map_with_goal_top_right():
    m = parse_map("..G\n...\n...")
    assert (m.width, m.height, m.goal) == (3, 3, 2)
    assert m.cells.sum() == 0


def test_render_goal_at_origin():
    m = GridMap(3, 3, np.zeros(9), 0)
    assert render_map(m) == "G..\n...\n..."


def test_render_obstacle_center():
    cells = np.zeros(9)
    cells[4] = 1
    assert render_map(GridMap(3, 3, cells, 0)).split("\n")[1] == ".#."


def test_round_trip_fixed_text():
    assert render_map(parse_map(FIG_LIKE)) == FIG_LIKE.strip()


@pytest.mark.parametrize(
    "text, fragment",
    [
        ("G.G\n...", "second goal"),
        ("...\n...", "no goal"),
        ("G..\n..", "line 2"),
        ("G.x\n...", "column 3"),
    ],
)
def test_parse_errors(text, fragment):
    with pytest.raises(MapParseError, match=fragment):
        parse_map(text)


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 6), st.integers(1, 6), st.data())
def test_round_trip_random_grids(w, h, data):
    cells = data.draw(st.lists(st.integers(0, 1), min_size=w * h, max_size=w * h))
    goal = data.draw(st.integers(0, w * h - 1))
    cells[goal] = 0
    m = GridMap(w, h, np.array(cells), goal)
    assert parse_map(render_map(m)) == m


def test_round_trip_generated_maps():
    for m in random_maps(10):
        assert parse_map(render_map(m)) == m


# -- constraints -------------------------------------------------------------


def test_open_map_passes():
    assert validate_constraints(GridMap(7, 7, np.zeros(49), 6)).passed


def test_full_width_wall_disconnects():
    cells = np.zeros(49)
    cells[21:28] = 1
    rep = validate_constraints(GridMap(7, 7, cells, 6))
    assert not rep.connected and rep.no_2x2_block and not rep.passed


def test_2x2_block_detected():
    m = parse_map("G....\n.##..\n.##..\n.....")
    rep = validate_constraints(m)
    assert rep.connected and not rep.no_2x2_block


def test_validator_matches_brute_force_on_1000_grids():
    rng = np.random.default_rng(123)
    for _ in range(1000):
        w, h = rng.integers(1, 7, size=2)
        cells = (rng.random(w * h) < rng.uniform(0.1, 0.6)).astype(np.uint8)
        goal = int(rng.integers(w * h))
        if rng.random() < 0.9:
            cells[goal] = 0
        rep = validate_constraints(GridMap(int(w), int(h), cells, goal))
        assert (rep.connected, rep.unique_goal_free, rep.no_2x2_block) == brute_force_constraints(
            cells, int(w), int(h), goal
        )


def test_random_map_density_zero_is_open():
    m = random_map(7, 7, 6, 0.0, np.random.default_rng(0), max_tries=1)
    assert m.cells.sum() == 0


def test_random_map_density_one_fails():
    with pytest.raises(GenerationFailed):
        random_map(7, 7, 6, 1.0, np.random.default_rng(0), max_tries=50)


def test_random_map_deterministic():
    a = random_map(7, 7, 6, 0.3, np.random.default_rng(42))
    b = random_map(7, 7, 6, 0.3, np.random.default_rng(42))
    assert a == b and validate_constraints(a).passed


# -- lidar -------------------------------------------------------------------


def test_lidar_center_of_open_map():
    m = GridMap(7, 7, np.zeros(49), 0)
    assert lidar(m, 3 * 7 + 3).tolist() == [4] * 8


def test_lidar_corner_of_open_map():
    m = GridMap(7, 7, np.zeros(49), 6)
    # values from the ray-march oracle: N, NE, E, SE, S, SW, W, NW
    assert ray_march(m, 0) == [1, 1, 7, 7, 7, 1, 1, 1]
    assert lidar(m, 0).tolist() == [1, 1, 7, 7, 7, 1, 1, 1]


def test_lidar_adjacent_obstacle_east():
    m = parse_map("G.#\n...\n...")
    assert lidar(m, 1)[2] == 1


def test_lidar_rejects_obstacle_cell():
    m = parse_map("G.#\n...\n...")
    with pytest.raises(ValueError):
        lidar(m, 2)


def test_lidar_matches_ray_march_on_20_maps():
    for m in random_maps(20, seed=7):
        table = lidar_all(m)
        bound = max(m.width, m.height) + 1
        for cell in m.free_cells:
            assert table[cell].tolist() == ray_march(m, int(cell))
            assert table[cell].min() >= 1 and table[cell].max() <= bound


def test_lidar_non_square_map():
    m = parse_map("G....#...\n.........\n...#.....")
    for cell in m.free_cells:
        assert lidar(m, int(cell)).tolist() == ray_march(m, int(cell))


# -- step --------------------------------------------------------------------


def test_step_into_goal():
    m = parse_map("..G\n...")
    assert step(m, SPEC, 1, GridAction.MOVE_RIGHT) == (2, 1.0, True)


def test_step_into_wall():
    m = parse_map("G.#\n...")
    assert step(m, SPEC, 1, GridAction.MOVE_RIGHT) == (1, -0.1, False)


def test_step_off_boundary():
    m = parse_map("G..\n...")
    assert step(m, SPEC, 3, GridAction.MOVE_LEFT) == (3, -0.1, False)


def test_stay_is_penalised():
    m = parse_map("G..\n...")
    assert step(m, SPEC, 4, GridAction.STAY) == (4, -0.1, False)


def test_step_rejects_obstacle():
    m = parse_map("G.#\n...")
    with pytest.raises(ValueError):
        step(m, SPEC, 2, GridAction.STAY)


def test_step_properties_random_maps():
    rewards = {SPEC.reward_goal, SPEC.reward_penalty, SPEC.reward_default}
    for m in random_maps(5, seed=3):
        for cell in m.free_cells:
            if cell == m.goal:
                continue
            for a in GridAction:
                nxt, r, done = step(m, SPEC, int(cell), a)
                assert m.cells[nxt] == 0
                assert r in rewards
                assert done == (nxt == m.goal)


# -- value iteration ---------------------------------------------------------


def test_vi_two_cell_corridor():
    m = parse_map(".G")
    q = value_iteration(m, SPEC)
    left = q.row(0)
    assert left[GridAction.MOVE_RIGHT] == pytest.approx(1.0, abs=1e-12)
    assert left[GridAction.STAY] == pytest.approx(-0.1 + SPEC.gamma * 1.0, abs=1e-12)


def test_vi_residual_below_tolerance():
    for m in random_maps(5, seed=11):
        q = value_iteration(m, SPEC, 1e-8)
        assert np.all(np.isfinite(q.values))
        assert bellman_residual(m, SPEC, q).max() < 1e-8


def test_vi_greedy_follows_bfs_shortest_paths():
    for m in random_maps(5, seed=5):
        q = value_iteration(m, SPEC)
        dist = bfs_distances(m)
        for cell in m.free_cells:
            cell = int(cell)
            steps = 0
            cur = cell
            while cur != m.goal:
                cur, _, _ = step(m, SPEC, cur, int(np.argmax(q.row(cur))))
                steps += 1
                assert steps <= len(m.free_cells)
            assert steps == dist[cell]


# -- boltzmann ---------------------------------------------------------------


def test_boltzmann_limits():
    q = value_iteration(random_maps(1, seed=2)[0], SPEC)
    hot = boltzmann_policy(q, 1e6)
    assert np.all(np.abs(hot - 0.2) < 1e-3)
    cold = boltzmann_policy(np.array([[0.1, 0.5, 0.2, 0.0, -0.1]]), 1e-3)
    assert cold[0, 1] >= 0.999


def test_boltzmann_uniform_row():
    assert np.array_equal(boltzmann_policy(np.full((1, 5), 0.3), 0.7), np.full((1, 5), 0.2))


def test_boltzmann_rejects_nonpositive_temperature():
    with pytest.raises(ValueError):
        boltzmann_policy(np.zeros((1, 5)), 0.0)


@settings(max_examples=200, deadline=None)
@given(
    st.lists(st.floats(-5, 5), min_size=5, max_size=5),
    st.floats(0.01, 10),
)
def test_boltzmann_rows_sum_to_one_and_keep_argmax(row, temperature):
    q = np.array([row])
    p = boltzmann_policy(q, temperature)
    assert abs(p.sum() - 1) < 1e-9
    top2 = np.sort(q[0])[-2:]
    if top2[1] - top2[0] > 1e-6:
        assert np.argmax(p) == np.argmax(q)
