import json
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stacca.graph import (
    GenerationError,
    Graph,
    GraphSpec,
    InvalidSpecError,
    bfs_distances,
    degrees,
    generate,
    k_hop_subgraph,
)

FIXTURES = Path(__file__).parent / "fixtures"


def path_graph(n):
    return Graph(n, [(i, i + 1) for i in range(n - 1)])


def star_graph(leaves):
    return Graph(leaves + 1, [(0, j) for j in range(1, leaves + 1)])


def test_graph_rejects_self_loops_and_bad_indices():
    with pytest.raises(ValueError):
        Graph(3, [(1, 1)])
    with pytest.raises(IndexError):
        Graph(3, [(0, 3)])


def test_duplicate_edges_collapse():
    g = Graph(3, [(0, 1), (1, 0), (0, 1)])
    assert g.edges == ((0, 1),)


def test_ba_m1_is_a_tree():
    for seed in range(5):
        g = generate(GraphSpec.barabasi_albert(50, m=1, seed=seed))
        assert g.num_edges == 49
        assert g.is_connected()
        assert degrees(g).sum() == 98


def test_ws_without_rewiring_is_ring_lattice():
    g = generate(GraphSpec.watts_strogatz(10, k=4, p=0.0))
    assert g.num_edges == 20
    assert np.all(g.degrees() == 4)


def test_ba_m2_matches_reference_fixture():
    ref = json.loads((FIXTURES / "ba_m2_n100_seed7.json").read_text())
    g = generate(GraphSpec.barabasi_albert(100, m=2, seed=7))
    # triangle core plus m edges for every later node
    assert g.num_edges == ref["num_edges"] == 197
    assert np.bincount(g.degrees()).tolist() == ref["degree_histogram"]
    assert g.degrees().tolist() == ref["degrees"]


@pytest.mark.parametrize(
    "spec",
    [
        GraphSpec("ba", 10, m=0),
        GraphSpec("ba", 10, m=10),
        GraphSpec("ws", 10, k=3),
        GraphSpec("ws", 10, k=10),
        GraphSpec("ws", 10, k=4, p=1.5),
        GraphSpec("er", 10),
    ],
)
def test_invalid_specs(spec):
    with pytest.raises(InvalidSpecError):
        generate(spec)


def test_ws_gives_up_after_bounded_retries():
    # k=0 has no edges at all, so every attempt is disconnected
    with pytest.raises(GenerationError):
        generate(GraphSpec.watts_strogatz(5, k=0, p=0.5))


def test_generation_is_reproducible():
    for spec in (GraphSpec.barabasi_albert(40, 2, seed=3), GraphSpec.watts_strogatz(40, 4, 0.3, seed=3)):
        assert generate(spec) == generate(spec)
    assert generate(GraphSpec.barabasi_albert(40, 2, seed=3)) != generate(
        GraphSpec.barabasi_albert(40, 2, seed=4)
    )


@settings(max_examples=40, deadline=None)
@given(
    family=st.sampled_from(["ba", "ws"]),
    n=st.integers(6, 50),
    seed=st.integers(0, 10_000),
    p=st.floats(0.0, 1.0),
)
def test_generated_graph_invariants(family, n, seed, p):
    spec = GraphSpec.barabasi_albert(n, 2, seed) if family == "ba" else GraphSpec.watts_strogatz(n, 4, p, seed)
    g = generate(spec)
    assert g.degrees().sum() == 2 * g.num_edges
    assert all(i < j for i, j in g.edges)
    for i, nbrs in enumerate(g.adjacency):
        assert i not in nbrs
        for j in nbrs:
            assert i in g.adjacency[j]
    assert g.is_connected()


def test_k_hop_examples():
    g = path_graph(4)
    sub, node_map, ego = k_hop_subgraph(g, 1, 1)
    assert ego == 0 and node_map[ego] == 1
    assert sorted(node_map.tolist()) == [0, 1, 2]
    orig_edges = {tuple(sorted((int(node_map[i]), int(node_map[j])))) for i, j in sub.edges}
    assert orig_edges == {(0, 1), (1, 2)}

    sub0, nm0, _ = k_hop_subgraph(g, 2, 0)
    assert sub0.num_nodes == 1 and sub0.num_edges == 0 and nm0.tolist() == [2]

    ring = generate(GraphSpec.watts_strogatz(10, 4, 0.0))
    assert k_hop_subgraph(ring, 0, 1)[0].num_nodes == 5


def test_k_hop_out_of_range():
    with pytest.raises(IndexError):
        k_hop_subgraph(path_graph(3), 3, 1)


@settings(max_examples=30, deadline=None)
@given(n=st.integers(2, 50), seed=st.integers(0, 1000), k=st.integers(0, 4))
def test_k_hop_agrees_with_bfs(n, seed, k):
    g = generate(GraphSpec.barabasi_albert(n, 1, seed))
    for ego in range(0, n, max(1, n // 7)):
        dist = bfs_distances(g, ego)
        sub, node_map, _ = k_hop_subgraph(g, ego, k)
        assert set(node_map.tolist()) == set(np.flatnonzero(dist <= k).tolist())
        inside = set(node_map.tolist())
        induced = {(i, j) for i, j in g.edges if i in inside and j in inside}
        mapped = {tuple(sorted((int(node_map[a]), int(node_map[b])))) for a, b in sub.edges}
        assert mapped == induced


def test_bfs_examples():
    assert bfs_distances(path_graph(4), 0).tolist() == [0, 1, 2, 3]
    assert bfs_distances(star_graph(4), 0).tolist() == [0, 1, 1, 1, 1]
    g = Graph(4, [(0, 1)])
    d = bfs_distances(g, 0)
    assert d[0] == 0 and d[1] == 1 and d[2] == d[3] == 4


def test_degrees_empty():
    assert degrees(Graph(5)).tolist() == [0] * 5


def test_neighbor_sum_batches():
    g = path_graph(3)
    vals = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 1.0]])
    assert g.neighbor_sum(vals).tolist() == [[0.0, 1.0, 0.0], [1.0, 1.0, 1.0]]


def test_edgelist_round_trip(tmp_path):
    g = generate(GraphSpec.barabasi_albert(50, 1, seed=2))
    text = g.to_edgelist()
    lines = text.strip().splitlines()
    assert lines[0] == "50" and len(lines) == 50
    pairs = [tuple(map(int, ln.split())) for ln in lines[1:]]
    assert pairs == sorted(pairs) and all(i < j for i, j in pairs)
    g.save(tmp_path / "g.txt")
    assert Graph.load(tmp_path / "g.txt") == g
    with pytest.raises(ValueError):
        Graph.from_edgelist("3\n0 1 2\n")


def test_relabel_preserves_structure():
    g = generate(GraphSpec.barabasi_albert(12, 2, seed=1))
    perm = np.random.default_rng(0).permutation(12)
    h = g.relabel(perm)
    assert sorted(h.degrees()) == sorted(g.degrees())
    assert h.degrees()[perm].tolist() == g.degrees().tolist()
