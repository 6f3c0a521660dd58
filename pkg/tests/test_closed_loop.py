from collections import deque

import numpy as np
import pytest

from taxiverify import closed_loop as cl
from taxiverify.grid import SINK, Grid
from taxiverify.network import NetworkError, concatenate, evaluate, identity, mlp
from taxiverify.plant import PlantParams, control_law, simulate_batch, step, step_overapprox
from taxiverify.zonotope import Box

PASS = cl.passthrough_composite()


def random_tm(rng, grid, sink_p=0.2, max_span=3):
    n = grid.n_cells
    nb = np.array(grid.bins)
    first = rng.integers(0, nb, size=(n, 2))
    last = np.minimum(first + rng.integers(0, max_span, size=(n, 2)), nb - 1)
    to_sink = rng.random(n) < sink_p
    empty = np.zeros(n, dtype=bool)
    return cl.TransitionMap(grid, first, last, to_sink, empty)


def bfs_reaches_unsafe(tm, unsafe_nodes):
    """Independent oracle: breadth-first search from each cell over successors()."""
    n = tm.grid.n_cells
    out = np.zeros(n, dtype=bool)
    for start in range(n):
        seen, queue = {start}, deque([start])
        while queue:
            c = queue.popleft()
            node = n if c == SINK else c
            if node in unsafe_nodes:
                out[start] = True
                break
            for s in tm.successors(c):
                if s not in seen:
                    seen.add(s)
                    queue.append(s)
    return out


class TestActionBounds:
    def test_passthrough_reference_cell(self):
        cell = Box([0.0, 0.0], [0.171875, 0.46875])
        a = cl.action_bounds_for_box(PASS, cell)
        assert a.certified
        assert a.phi_min == pytest.approx(-0.74 * 0.171875 - 0.44 * 0.46875, abs=1e-4)
        assert a.phi_min <= -0.74 * 0.171875 - 0.44 * 0.46875 + 1e-12
        assert a.phi_max == pytest.approx(0.0, abs=1e-4)
        assert a.phi_max >= 0.0

    def test_point_cell_point_latent(self):
        rng = np.random.default_rng(0)
        comp = concatenate(mlp([4, 8, 6], rng, input_names=("z1", "z2", "p", "theta")), mlp([6, 5, 2], rng))
        s = np.array([1.5, -4.0])
        z = Box([0.2, -0.1], [0.2, -0.1])
        a = cl.action_bounds_for_box(comp, Box(s, s), z)
        expected = control_law(*evaluate(comp, [0.2, -0.1, 1.5, -4.0]))
        assert a.phi_min == pytest.approx(expected) and a.phi_max == pytest.approx(expected)

    def test_centre_sample_contained(self):
        rng = np.random.default_rng(1)
        comp = concatenate(mlp([4, 16, 16], rng, input_names=("z1", "z2", "p", "theta")), mlp([16, 8, 2], rng))
        g = Grid(bins=(8, 8))
        tol = 1e-2
        table = cl.compute_action_table(comp, g, tol=tol)
        lo, hi = g.all_bounds()
        for c in range(g.n_cells):
            mid = (lo[c] + hi[c]) / 2
            phi = control_law(*evaluate(comp, [0.0, 0.0, *mid]))
            assert table.phi_min[c] - tol <= phi <= table.phi_max[c] + tol
            assert table.phi_min[c] <= table.phi_max[c]

    def test_sampled_phi_within_bounds(self):
        rng = np.random.default_rng(2)
        comp = concatenate(mlp([4, 16], rng, input_names=("z1", "z2", "p", "theta")), mlp([16, 8, 2], rng))
        cell = Box([2.0, 5.0], [2.5, 6.0])
        a = cl.action_bounds_for_box(comp, cell)
        x = np.column_stack([rng.uniform(-0.8, 0.8, (2000, 2)), cell.sample(rng, 2000)])
        phi = control_law(*evaluate(comp, x).T)
        assert phi.min() >= a.phi_min and phi.max() <= a.phi_max

    def test_errors_carry_cell(self):
        with pytest.raises(cl.ActionBoundsError, match="cell 5"):
            cl.action_bounds(identity(3), Grid(bins=(4, 4)), 5)

    def test_missing_state_inputs(self):
        with pytest.raises(cl.ActionBoundsError, match="no input named"):
            cl.action_bounds_for_box(identity(2), Box([0.0, 0.0], [1.0, 1.0]))

    def test_workers_do_not_change_results(self):
        g = Grid(bins=(6, 6))
        rng = np.random.default_rng(3)
        comp = concatenate(mlp([4, 8], rng, input_names=("z1", "z2", "p", "theta")), mlp([8, 2], rng))
        a = cl.compute_action_table(comp, g, threads=1)
        b = cl.compute_action_table(comp, g, threads=2, chunk=5)
        for f in ("phi_min", "phi_max", "certified"):
            np.testing.assert_array_equal(getattr(a, f), getattr(b, f))


@pytest.fixture(scope="module")
def pass_tm():
    g = Grid(bins=(32, 32))
    table = cl.compute_action_table(PASS, g)
    return g, table, cl.build_transitions(g, table)


class TestTransitions:
    def test_tiny_step_keeps_self(self):
        g = Grid(bins=(16, 16))
        table = cl.compute_action_table(PASS, g)
        tm = cl.build_transitions(g, table, PlantParams(dt=1e-9))
        for c in range(g.n_cells):
            assert c in tm.successors(c)

    def test_sink_absorbing(self, pass_tm):
        _, _, tm = pass_tm
        assert tm.successors(SINK) == {SINK}

    def test_sampled_transitions_land_in_successors(self, pass_tm):
        g, table, tm = pass_tm
        rng = np.random.default_rng(4)
        for c in rng.choice(g.n_cells, 100, replace=False):
            c = int(c)
            box = step_overapprox(g.cell_bounds(c), table.phi_min[c], table.phi_max[c])
            s = g.cell_bounds(c).sample(rng, 300)
            phi = rng.uniform(table.phi_min[c], table.phi_max[c], 300)
            nxt = np.column_stack(step(s[:, 0], s[:, 1], phi))
            assert box.contains(nxt).all()
            succ = tm.successors(c)
            assert set(g.locate_all(nxt).tolist()) <= succ

    def test_edges_match_successors(self):
        rng = np.random.default_rng(5)
        g = Grid(bins=(8, 8))
        tm = random_tm(rng, g)
        src, dst = tm.edges()
        n = g.n_cells
        for c in range(n):
            want = {n if s == SINK else s for s in tm.successors(c)}
            assert set(dst[src == c].tolist()) == want

    def test_wrong_table_size(self):
        with pytest.raises(ValueError):
            cl.build_transitions(Grid(bins=(4, 4)), cl.ActionTable(np.zeros(3), np.zeros(3), np.ones(3, bool)))


class TestBackwardSafety:
    def test_no_unsafe_all_safe(self, pass_tm):
        _, _, tm = pass_tm
        res = cl.backward_safety(tm, unsafe=[])
        assert res.safe.all()

    def test_self_loops(self):
        g = Grid(bins=(8, 8))
        n = g.n_cells
        i, j = np.divmod(np.arange(n), 8)
        ij = np.stack([i, j], axis=1)
        tm = cl.TransitionMap(g, ij, ij, np.zeros(n, bool), np.zeros(n, bool))
        res = cl.backward_safety(tm, unsafe=[17])
        assert np.flatnonzero(~res.safe).tolist() == [17]

    @pytest.mark.parametrize("seed", range(12))
    def test_matches_bfs(self, seed):
        rng = np.random.default_rng(seed)
        g = Grid(bins=(8, 8))
        tm = random_tm(rng, g, sink_p=0.05, max_span=2)
        unsafe = set(rng.choice(g.n_cells, 3, replace=False).tolist())
        if seed % 2:
            unsafe.add(g.n_cells)
        res = cl.backward_safety(tm, unsafe=[SINK if u == g.n_cells else u for u in unsafe])
        np.testing.assert_array_equal(~res.safe, bfs_reaches_unsafe(tm, unsafe))

    def test_default_unsafe_flags_runway_edge(self, pass_tm):
        g, _, tm = pass_tm
        res = cl.backward_safety(tm)
        lo, hi = g.all_bounds()
        edge = (hi[:, 0] > 10) | (lo[:, 0] < -10)
        assert not res.safe[edge].any()
        assert res.sink_unsafe


class TestForwardReach:
    def test_self_loops_converge_immediately(self):
        g = Grid(bins=(8, 8))
        n = g.n_cells
        i, j = np.divmod(np.arange(n), 8)
        ij = np.stack([i, j], axis=1)
        tm = cl.TransitionMap(g, ij, ij, np.zeros(n, bool), np.zeros(n, bool))
        r = cl.forward_reach(tm, Box([-5.0, -5.0], [5.0, 5.0]))
        assert r.converged_at == 0 and len(r.sets) == 1

    def test_empty_initial(self, pass_tm):
        _, _, tm = pass_tm
        r = cl.forward_reach(tm, None)
        assert r.converged_at == 0 and not r.sets[0].any()

    def test_matches_successor_union(self):
        rng = np.random.default_rng(6)
        g = Grid(bins=(8, 8))
        tm = random_tm(rng, g)
        r = cl.forward_reach(tm, np.eye(1, g.n_cells, 10, dtype=bool)[0], max_steps=20)
        cur = {10}
        for t in range(len(r.sets)):
            assert r.cells(t) == cur
            cur = set().union(*(tm.successors(c) for c in cur))

    def test_stops_at_max_steps(self):
        g = Grid(bins=(8, 8))
        n = g.n_cells
        i, j = np.divmod(np.arange(n), 8)
        nxt = np.stack([(i + 1) % 8, j], axis=1)
        tm = cl.TransitionMap(g, nxt, nxt, np.zeros(n, bool), np.zeros(n, bool))
        r = cl.forward_reach(tm, np.eye(1, n, 0, dtype=bool)[0], max_steps=5)
        assert r.converged_at is None and len(r.sets) == 6

    def test_contains_simulations(self, pass_tm):
        g, _, tm = pass_tm
        init = Box([-10.0, -10.0], [10.0, 10.0])
        r = cl.forward_reach(tm, init, max_steps=400)
        rng = np.random.default_rng(7)
        sims = simulate_batch(lambda s, z: s, init.sample(rng, 300), 400)
        assert cl.containment_violations(r, g, sims) == []
