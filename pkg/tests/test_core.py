import numpy as np
import pytest

from netrecon.core import (
    FlowMatrix,
    InfeasibleMarginsError,
    MarginSystem,
    NodeSet,
    apply_margins,
    build_routing_matrix,
    error_metrics,
    is_feasible,
    reduce_problem,
    summarize_errors,
)

from conftest import problem_from_sums


def test_routing_n2_columns():
    A = build_routing_matrix(NodeSet.of_size(2), [("1", "2"), ("2", "1")]).matrix
    np.testing.assert_array_equal(A, [[1, 0], [0, 1], [0, 1], [1, 0]])


def test_routing_n3_row_sums_two():
    A = build_routing_matrix(NodeSet.of_size(3)).matrix
    assert A.shape == (6, 6)
    np.testing.assert_array_equal(A.sum(axis=1), 2)
    np.testing.assert_array_equal(A.sum(axis=0), 2)


def test_routing_missing_cell():
    nodes = NodeSet.of_size(3)
    cells = [c for c in nodes.off_diagonal() if c != ("1", "2")]
    A = build_routing_matrix(nodes, cells).matrix
    assert A[0].sum() == 1


@pytest.mark.parametrize("cells,match", [
    ([("1", "1")], "self-loops undefined"),
    ([("1", "2"), ("1", "2")], "duplicate"),
])
def test_routing_rejects(cells, match):
    with pytest.raises(ValueError, match=match):
        build_routing_matrix(NodeSet.of_size(2), cells)


def test_nodeset_validation():
    with pytest.raises(ValueError):
        NodeSet(("a",))
    with pytest.raises(ValueError):
        NodeSet(("a", "a"))


def test_apply_margins_n2():
    nodes = NodeSet.of_size(2)
    x = FlowMatrix.from_cells(nodes, {("1", "2"): 3.0, ("2", "1"): 5.0})
    ms = apply_margins(build_routing_matrix(nodes), x)
    np.testing.assert_array_equal(ms.y, [3, 5, 5, 3])


def test_apply_margins_ones():
    nodes = NodeSet.of_size(3)
    x = FlowMatrix.from_dense(nodes, np.ones((3, 3)))
    np.testing.assert_array_equal(apply_margins(build_routing_matrix(nodes), x).y, 2.0)


def test_apply_margins_cell_mismatch():
    nodes = NodeSet.of_size(3)
    x = FlowMatrix.from_cells(nodes, {("1", "2"): 1.0})
    with pytest.raises(ValueError, match="active cells differ"):
        apply_margins(build_routing_matrix(nodes), x)


def test_flow_matrix_rejects_negative():
    with pytest.raises(ValueError, match="non-negative"):
        FlowMatrix.from_cells(NodeSet.of_size(2), {("1", "2"): -1.0})


def test_margins_reject_unbalanced():
    with pytest.raises(ValueError, match="unbalanced"):
        MarginSystem.from_sums(NodeSet.of_size(2), [1, 2], [2, 2])


def test_balance_tolerance_accepts_rounding():
    MarginSystem.from_sums(NodeSet.of_size(2), [1, 2], [2, 1 + 1e-12])


def test_reduce_zero_margins():
    p = problem_from_sums([0, 4, 4], [4, 4, 0])
    kept = [(p.senders[k], p.receivers[k]) for k in range(p.N)]
    assert sorted(kept) == [(1, 0), (2, 0), (2, 1)]
    # (2,2) in one-based labels is a self-loop, so only three of the four
    # (i in {2,3}, j in {1,2}) cells exist
    assert p.N == 3
    assert np.all(p.y > 0)
    full = p.recompose(np.ones(p.N)).to_dense()
    assert full[0].sum() == 0 and full[:, 2].sum() == 0


def test_reduce_identity():
    p = problem_from_sums([1, 2, 3], [3, 2, 1])
    assert p.N == 6 and len(p.dropped_cells) == 0
    np.testing.assert_array_equal(p.A, p.original.routing.matrix)


def test_reduce_single_forced_cell():
    p = problem_from_sums([5, 0, 0], [0, 0, 5])
    assert p.N == 1
    assert (p.senders[0], p.receivers[0]) == (0, 2)
    np.testing.assert_array_equal(p.y, [5, 5])


def test_reduce_infeasible():
    # node 1 sends everything and receives everything: only (1,1) could carry it
    nodes = NodeSet.of_size(2)
    with pytest.raises(InfeasibleMarginsError):
        reduce_problem(MarginSystem.from_sums(nodes, [5, 0], [5, 0]))


def test_is_feasible():
    assert is_feasible(problem_from_sums([10, 5, 3], [6, 8, 4]))
    # node 1 must send 10 but the others can only absorb 2 in total
    assert not is_feasible(problem_from_sums([10, 1, 1], [10, 1, 1]))


def test_restricted_and_with_margins():
    p = problem_from_sums([2, 2, 2], [2, 2, 2])
    q = p.with_margins(p.y * 2)
    np.testing.assert_array_equal(q.y, 4.0)
    keep = np.ones(p.N, bool)
    keep[0] = False
    r = p.restricted(keep)
    assert r.N == p.N - 1 and len(r.dropped_cells) == 1
    with pytest.raises(ValueError):
        p.with_margins(np.ones(3))


def test_error_metrics_arithmetic():
    nodes = NodeSet.of_size(2)
    est = FlowMatrix.from_cells(nodes, {("1", "2"): 1.0, ("2", "1"): 2.0})
    tru = FlowMatrix.from_cells(nodes, {("1", "2"): 2.0, ("2", "1"): 4.0})
    rep = error_metrics(est, tru)
    assert rep.l1 == 3.0
    assert rep.l2 == pytest.approx(np.sqrt(5), abs=1e-15)
    assert error_metrics(tru, tru).l1 == 0 == error_metrics(tru, tru).l2


def test_error_metrics_alignment_by_label():
    nodes = NodeSet.of_size(2)
    est = FlowMatrix.from_cells(nodes, {("2", "1"): 4.0, ("1", "2"): 2.0})
    tru = FlowMatrix.from_cells(nodes, {("1", "2"): 2.0, ("2", "1"): 4.0})
    assert error_metrics(est, tru).l1 == 0


def test_error_metrics_mismatch():
    nodes = NodeSet.of_size(3)
    a = FlowMatrix.from_cells(nodes, {("1", "2"): 1.0})
    b = FlowMatrix.from_cells(nodes, {("1", "3"): 1.0})
    with pytest.raises(ValueError):
        error_metrics(a, b)


def test_summarize_two_periods():
    rep = summarize_errors([("a", 1.0, 1.0), ("b", 3.0, 2.0)])
    assert rep.overall_l1 == 4 and rep.average_l1 == 2 and rep.se_l1 == pytest.approx(1.0)


def test_reduction_roundtrip_random():
    rng = np.random.default_rng(3)
    nodes = NodeSet.of_size(5)
    for _ in range(20):
        m = rng.exponential(size=(5, 5)) * (rng.random((5, 5)) < 0.5)
        x = FlowMatrix.from_dense(nodes, m)
        ms = apply_margins(build_routing_matrix(nodes), x)
        if ms.y.sum() == 0:
            continue
        p = reduce_problem(ms)
        back = p.recompose(x.values[p.cell_map])
        zero_rows = ms.y == 0
        forced = zero_rows[x.senders] | zero_rows[5 + x.receivers]
        np.testing.assert_array_equal(back.values, np.where(forced, 0.0, x.values))
        np.testing.assert_allclose(back.values, x.values)
