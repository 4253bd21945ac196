"""Graph container, ordering, dequantization, valency rules, generators,
and the MOLT text format."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from graphflow import graph as G
from graphflow import molt
from graphflow.graph import (
    AtomVocab,
    BondVocab,
    GraphError,
    MolecularGraph,
    empty_categories,
)

VOCAB = G.default_atom_vocab()
BONDS = G.default_bond_vocab()
NO_EDGE = BONDS.no_edge


def chain(types, cats_pairs, n=None):
    """Graph from a list of (i, j, category) bonds."""
    types = np.asarray(types)
    n = len(types) if n is None else n
    cats = empty_categories(n, NO_EDGE)
    for i, j, c in cats_pairs:
        cats[i, j] = cats[j, i] = c
    return MolecularGraph(types, cats, NO_EDGE)


@st.composite
def connected_graphs(draw, max_nodes=8):
    """Random connected molecular-shaped graph (types and bonds arbitrary)."""
    n = draw(st.integers(min_value=1, max_value=max_nodes))
    types = draw(
        st.lists(
            st.integers(min_value=0, max_value=VOCAB.size - 1),
            min_size=n,
            max_size=n,
        )
    )
    cats = empty_categories(n, NO_EDGE)
    for i in range(1, n):
        j = draw(st.integers(min_value=0, max_value=i - 1))
        c = draw(st.integers(min_value=0, max_value=NO_EDGE - 1))
        cats[i, j] = cats[j, i] = c
    extras = draw(st.integers(min_value=0, max_value=3))
    for _ in range(extras):
        if n < 3:
            break
        i = draw(st.integers(min_value=2, max_value=n - 1))
        j = draw(st.integers(min_value=0, max_value=i - 2))
        c = draw(st.integers(min_value=0, max_value=NO_EDGE - 1))
        cats[i, j] = cats[j, i] = c
    return MolecularGraph(np.array(types), cats, NO_EDGE)


# ---------------------------------------------------------------- container


def test_rejects_empty_graph():
    with pytest.raises(GraphError):
        MolecularGraph(np.array([], dtype=np.int64), np.zeros((0, 0)), NO_EDGE)


def test_rejects_asymmetric_matrix():
    cats = empty_categories(2, NO_EDGE)
    cats[0, 1] = 0
    with pytest.raises(GraphError):
        MolecularGraph(np.array([0, 0]), cats, NO_EDGE)


def test_rejects_bond_on_diagonal():
    cats = empty_categories(2, NO_EDGE)
    cats[0, 0] = 0
    with pytest.raises(GraphError):
        MolecularGraph(np.array([0, 0]), cats, NO_EDGE)


def test_rejects_category_out_of_range():
    cats = empty_categories(2, NO_EDGE)
    cats[0, 1] = cats[1, 0] = NO_EDGE + 1
    with pytest.raises(GraphError):
        MolecularGraph(np.array([0, 0]), cats, NO_EDGE)


def test_bonds_and_neighbors():
    g = chain([0, 1, 2], [(0, 1, 0), (1, 2, 2)])
    assert g.bonds() == [(0, 1, 0), (1, 2, 2)]
    assert list(g.neighbors(1)) == [0, 2]
    assert list(g.neighbors(0)) == [1]


def test_equality_and_copy_are_value_based():
    g = chain([0, 1], [(0, 1, 1)])
    h = g.copy()
    assert g == h
    h.categories[0, 1] = h.categories[1, 0] = 0
    assert g != h


# ---------------------------------------------------------------- ordering


@given(connected_graphs())
@settings(max_examples=60, deadline=None)
def test_bfs_reorder_produces_valid_generation_order(g):
    h, order = G.bfs_reorder(g, 0)
    assert G.is_bfs_ordered(h)
    assert sorted(order.permutation.tolist()) == list(range(g.n))
    # relabeling preserves the multiset of (type, type, category) bond triples
    def triples(x):
        return sorted(
            (min(x.node_types[i], x.node_types[j]), max(x.node_types[i], x.node_types[j]), c)
            for i, j, c in x.bonds()
        )
    assert triples(g) == triples(h)


def test_bfs_reorder_rejects_disconnected():
    cats = empty_categories(3, NO_EDGE)
    cats[0, 1] = cats[1, 0] = 0
    g = MolecularGraph(np.array([0, 0, 0]), cats, NO_EDGE)
    with pytest.raises(GraphError):
        G.bfs_reorder(g, 0)


def test_bfs_depths_non_decreasing():
    g = chain([0, 0, 0, 0, 0], [(0, 1, 0), (0, 2, 0), (1, 3, 0), (2, 4, 0)])
    _, order = G.bfs_reorder(g, 0)
    assert np.all(np.diff(order.depths) >= 0)


def test_max_dependency_distance_hand_case():
    g = chain([0, 0, 0, 0], [(0, 1, 0), (1, 2, 0), (0, 3, 0)])
    assert G.max_dependency_distance(g) == 3  # the bond (0, 3)


def test_relabel_round_trip():
    g = chain([0, 1, 2], [(0, 1, 0), (1, 2, 1)])
    perm = np.array([2, 0, 1])
    h = G.relabel(g, perm)
    inverse = np.argsort(perm)
    assert G.relabel(h, inverse) == g


# ---------------------------------------------------------- dequantization


@given(connected_graphs(), st.integers(min_value=0, max_value=2**32 - 1))
@settings(max_examples=60, deadline=None)
def test_dequantize_quantize_round_trip(g, seed):
    z = G.dequantize(g, VOCAB, BONDS, np.random.default_rng(seed))
    back = G.quantize(z, NO_EDGE)
    assert back == g


def test_dequantize_values_in_expected_boxes():
    g = chain([1, 2], [(0, 1, 2)])
    z = G.dequantize(g, VOCAB, BONDS, np.random.default_rng(0))
    # the hot coordinate lands in [1, 2), the rest in [0, 1)
    assert 1.0 <= z.zx[0, 1] < 2.0
    cold = [z.zx[0, j] for j in range(VOCAB.size) if j != 1]
    assert all(0.0 <= v < 1.0 for v in cold)
    assert 1.0 <= z.za[(1, 0)][2] < 2.0


def test_dequantize_window_limits_slots():
    g = chain([0] * 5, [(i, i + 1, 0) for i in range(4)])
    z = G.dequantize(g, VOCAB, BONDS, np.random.default_rng(0), window=2)
    assert (4, 1) not in z.za and (4, 0) not in z.za
    assert (4, 2) in z.za and (4, 3) in z.za


def test_quantize_rejects_nan():
    g = chain([0, 0], [(0, 1, 0)])
    z = G.dequantize(g, VOCAB, BONDS, np.random.default_rng(0))
    z.zx[0, 0] = np.nan
    with pytest.raises(GraphError):
        G.quantize(z, NO_EDGE)


# ----------------------------------------------------------------- valency


def brute_force_valency_ok(g):
    """Independent audit: sum bond orders per node against the valence table."""
    for i in range(g.n):
        total = 0
        for j in range(g.n):
            c = g.categories[i, j]
            if j != i and c != NO_EDGE:
                total += BONDS.orders[c]
        if total > VOCAB.valences[g.node_types[i]]:
            return False
    return True


@given(connected_graphs())
@settings(max_examples=100, deadline=None)
def test_valency_ok_matches_brute_force(g):
    assert G.valency_ok(g, VOCAB, BONDS) == brute_force_valency_ok(g)


def test_check_valency_predicts_insertion():
    # O (valence 2) with an existing single bond: one more single is fine
    # on a fresh carbon, a double bond is not
    g = chain([2, 0], [(0, 1, 0)])  # O-C single
    ext = chain([2, 0, 0], [(0, 1, 0)])
    assert G.check_valency(ext, VOCAB, BONDS, 0, 2, 0) is True
    assert G.check_valency(ext, VOCAB, BONDS, 0, 2, 1) is False
    assert G.check_valency(ext, VOCAB, BONDS, 0, 2, NO_EDGE) is True


def test_check_valency_replaces_existing_bond():
    # upgrading the O-C single to a double uses the freed order
    g = chain([2, 0], [(0, 1, 0)])
    assert G.check_valency(g, VOCAB, BONDS, 0, 1, 1) is True
    assert G.check_valency(g, VOCAB, BONDS, 0, 1, 2) is False  # triple > 2


def test_valency_violations_lists_offenders():
    cats = empty_categories(3, NO_EDGE)
    cats[0, 1] = cats[1, 0] = 2  # triple
    cats[0, 2] = cats[2, 0] = 2  # another triple on node 0
    g = MolecularGraph(np.array([0, 0, 0]), cats, NO_EDGE)  # C capacity 4 < 6
    assert G.valency_violations(g, VOCAB, BONDS) == [0]


# -------------------------------------------------------------- generators


def test_synthetic_molecules_all_valid_connected_deterministic():
    mols = G.gen_synthetic_molecules(50, 10, VOCAB, BONDS, np.random.default_rng(5))
    assert len(mols) == 50
    for m in mols:
        assert m.n <= 10
        assert G.valency_ok(m, VOCAB, BONDS)
        assert G.is_connected(m)
    again = G.gen_synthetic_molecules(50, 10, VOCAB, BONDS, np.random.default_rng(5))
    assert all(a == b for a, b in zip(mols, again))


def test_community_graphs_shape_and_connectivity():
    gs = G.gen_community_graphs(10, 4, 0.8, 0.1, np.random.default_rng(1))
    for g in gs:
        assert g.n == 8
        assert G.is_connected(g)
        assert set(np.unique(g.node_types)) == set(range(8))  # positional types


def test_community_generator_gives_up_when_impossible():
    with pytest.raises(GraphError):
        G.gen_community_graphs(1, 3, 0.9, 0.0, np.random.default_rng(0), max_tries=20)


def test_erdos_renyi_density_tracks_p():
    gs = G.gen_erdos_renyi(200, 10, 0.3, np.random.default_rng(2))
    rate = np.mean([len(g.bonds()) / 45 for g in gs])
    assert abs(rate - 0.3) < 0.03


# -------------------------------------------------------------------- MOLT


def test_molt_header_literal():
    text = molt.write_molt([chain([0], [])], VOCAB, BONDS)
    assert text.startswith("#MOLT v1\n")


@given(connected_graphs())
@settings(max_examples=60, deadline=None)
def test_molt_round_trip(g):
    # only valency-valid graphs survive the default reader
    if not G.valency_ok(g, VOCAB, BONDS):
        back = molt.parse_molt(
            molt.write_molt([g], VOCAB, BONDS), VOCAB, BONDS, allow_invalid=True
        )
    else:
        back = molt.parse_molt(molt.write_molt([g], VOCAB, BONDS), VOCAB, BONDS)
    assert len(back) == 1 and back[0] == g


def test_molt_multiple_records():
    gs = [chain([0, 1], [(0, 1, 0)]), chain([2], [])]
    back = molt.parse_molt(molt.write_molt(gs, VOCAB, BONDS), VOCAB, BONDS)
    assert back == gs


def test_molt_rejects_bad_header_with_line_number():
    with pytest.raises(molt.MoltError) as err:
        molt.parse_molt("#MOLT v2\natoms 1\n0 C\nbonds 0\n", VOCAB, BONDS)
    assert err.value.line == 1


def test_molt_rejects_unknown_symbol():
    text = "#MOLT v1\natoms 1\n0 Xe\nbonds 0\n"
    with pytest.raises(molt.MoltError):
        molt.parse_molt(text, VOCAB, BONDS)


def test_molt_rejects_duplicate_bond():
    text = "#MOLT v1\natoms 2\n0 C\n1 C\nbonds 2\n0 1 1\n1 0 1\n"
    with pytest.raises(molt.MoltError):
        molt.parse_molt(text, VOCAB, BONDS)


def test_molt_rejects_self_loop():
    text = "#MOLT v1\natoms 1\n0 C\nbonds 1\n0 0 1\n"
    with pytest.raises(molt.MoltError):
        molt.parse_molt(text, VOCAB, BONDS)


def test_molt_rejects_valency_violation_unless_admitted():
    # three double bonds on one carbon
    text = (
        "#MOLT v1\natoms 4\n0 C\n1 O\n2 O\n3 O\nbonds 3\n"
        "0 1 2\n0 2 2\n0 3 2\n"
    )
    with pytest.raises(molt.MoltError):
        molt.parse_molt(text, VOCAB, BONDS)
    out = molt.parse_molt(text, VOCAB, BONDS, allow_invalid=True)
    assert len(out) == 1 and not G.valency_ok(out[0], VOCAB, BONDS)


def test_molt_rejects_unknown_bond_order():
    text = "#MOLT v1\natoms 2\n0 C\n1 C\nbonds 1\n0 1 9\n"
    with pytest.raises(molt.MoltError):
        molt.parse_molt(text, VOCAB, BONDS)


def test_molt_rejects_missing_atom_index():
    text = "#MOLT v1\natoms 2\n0 C\n0 C\nbonds 0\n"
    with pytest.raises(molt.MoltError):
        molt.parse_molt(text, VOCAB, BONDS)


# ------------------------------------------------------------- vocabularies


def test_default_vocab_shapes():
    assert VOCAB.symbols == ("C", "N", "O")
    assert VOCAB.valences == (4, 3, 2)
    assert BONDS.orders == (1, 2, 3)
    assert BONDS.no_edge == 3  # one category beyond the bond types


def test_atom_vocab_rejects_mismatched_lengths():
    with pytest.raises((GraphError, ValueError)):
        AtomVocab(symbols=("C", "N"), valences=(4,))


def test_bond_vocab_rejects_empty():
    with pytest.raises((GraphError, ValueError)):
        BondVocab(orders=())
