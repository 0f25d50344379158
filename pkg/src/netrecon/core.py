"""Domain types for directed flows, their margins and the routing matrix.

A flow matrix lives on an ordered set of *active cells* ``(i, j)`` with
``i != j``. The routing matrix ``A`` maps the cell vector ``x`` to the stacked
margins ``y = A x`` (row sums first, then column sums). Cells touching a zero
margin carry no information and are removed by :func:`reduce_problem` before
any estimator runs.
"""

from __future__ import annotations

from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

BALANCE_RTOL = 1e-8


class InfeasibleMarginsError(ValueError):
    """No non-negative matrix on the active cells reproduces the margins."""


def _frozen(a, dtype=float) -> np.ndarray:
    arr = np.array(a, dtype=dtype)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class NodeSet:
    """Ordered, uniquely labelled observational units."""

    labels: tuple[str, ...]

    def __post_init__(self):
        labels = tuple(str(v) for v in self.labels)
        object.__setattr__(self, "labels", labels)
        if len(labels) < 2:
            raise ValueError("a node set needs at least two nodes")
        if len(set(labels)) != len(labels):
            raise ValueError("node labels must be unique")
        object.__setattr__(self, "_pos", {lab: k for k, lab in enumerate(labels)})

    @classmethod
    def of_size(cls, n: int) -> NodeSet:
        return cls(tuple(str(k) for k in range(1, n + 1)))

    @property
    def n(self) -> int:
        return len(self.labels)

    def index(self, label) -> int:
        try:
            return self._pos[str(label)]
        except KeyError:
            raise KeyError(f"unknown node {label!r}") from None

    def off_diagonal(self) -> list[tuple[str, str]]:
        """All ``n(n-1)`` ordered pairs in row-major order."""
        return [(a, b) for a in self.labels for b in self.labels if a != b]


def _cell_indices(nodes: NodeSet, cells: Iterable) -> tuple[np.ndarray, np.ndarray]:
    senders, receivers = [], []
    seen = set()
    for i, j in cells:
        a, b = nodes.index(i), nodes.index(j)
        if a == b:
            raise ValueError(f"cell ({i}, {j}): self-loops undefined")
        if (a, b) in seen:
            raise ValueError(f"duplicate cell ({i}, {j})")
        seen.add((a, b))
        senders.append(a)
        receivers.append(b)
    return _frozen(senders, int), _frozen(receivers, int)


@dataclass(frozen=True, eq=False)
class FlowMatrix:
    """Non-negative values on an ordered set of off-diagonal cells.

    ``senders[k], receivers[k]`` are node positions of the k-th cell.
    """

    nodes: NodeSet
    senders: np.ndarray
    receivers: np.ndarray
    values: np.ndarray
    period: str | None = None

    def __post_init__(self):
        s = _frozen(self.senders, int)
        r = _frozen(self.receivers, int)
        v = _frozen(self.values, float)
        if not (s.shape == r.shape == v.shape) or s.ndim != 1:
            raise ValueError("senders, receivers and values must be equal-length vectors")
        if np.any(s == r):
            raise ValueError("self-loops undefined")
        if not np.all(np.isfinite(v)) or np.any(v < 0):
            raise ValueError("flow values must be finite and non-negative")
        if len(set(zip(s.tolist(), r.tolist()))) != len(s):
            raise ValueError("duplicate cell")
        if len(s) > self.nodes.n * (self.nodes.n - 1):
            raise ValueError("more cells than off-diagonal positions")
        object.__setattr__(self, "senders", s)
        object.__setattr__(self, "receivers", r)
        object.__setattr__(self, "values", v)

    @classmethod
    def from_cells(cls, nodes: NodeSet, cells: Mapping, period=None) -> FlowMatrix:
        s, r = _cell_indices(nodes, cells.keys())
        return cls(nodes, s, r, np.fromiter(cells.values(), float, len(s)), period)

    @classmethod
    def from_dense(cls, nodes: NodeSet, matrix, cells=None, period=None) -> FlowMatrix:
        """Read cell values from an ``n x n`` array; the diagonal is ignored."""
        m = np.asarray(matrix, dtype=float)
        if m.shape != (nodes.n, nodes.n):
            raise ValueError(f"expected a {nodes.n}x{nodes.n} matrix, got {m.shape}")
        if cells is None:
            cells = nodes.off_diagonal()
        s, r = _cell_indices(nodes, cells)
        return cls(nodes, s, r, m[s, r], period)

    @property
    def N(self) -> int:
        return len(self.values)

    @property
    def cells(self) -> list[tuple[str, str]]:
        lab = self.nodes.labels
        return [(lab[a], lab[b]) for a, b in zip(self.senders, self.receivers)]

    def cell_keys(self) -> list[tuple[int, int]]:
        return list(zip(self.senders.tolist(), self.receivers.tolist()))

    def to_dense(self, fill: float = 0.0) -> np.ndarray:
        out = np.full((self.nodes.n, self.nodes.n), fill, dtype=float)
        out[self.senders, self.receivers] = self.values
        return out

    def as_dict(self) -> dict[tuple[str, str], float]:
        return dict(zip(self.cells, self.values.tolist()))

    def with_values(self, values, period=None) -> FlowMatrix:
        return FlowMatrix(self.nodes, self.senders, self.receivers, values,
                          self.period if period is None else period)

    def aligned_to(self, other: FlowMatrix) -> np.ndarray:
        """Values of ``self`` reordered to the cell order of ``other``."""
        if self.nodes.labels != other.nodes.labels:
            raise ValueError("flow matrices are defined on different node sets")
        pos = {k: q for q, k in enumerate(self.cell_keys())}
        try:
            idx = [pos[k] for k in other.cell_keys()]
        except KeyError:
            raise ValueError("active cells differ between flow matrices") from None
        if len(idx) != self.N:
            raise ValueError("active cells differ between flow matrices")
        return self.values[idx]


@dataclass(frozen=True, eq=False)
class RoutingMatrix:
    """Binary ``2n x N`` incidence matrix: row ``i`` sums sender ``i``,
    row ``n + j`` sums receiver ``j``."""

    nodes: NodeSet
    senders: np.ndarray
    receivers: np.ndarray
    matrix: np.ndarray = field(repr=False)

    @property
    def n(self) -> int:
        return self.nodes.n

    @property
    def N(self) -> int:
        return len(self.senders)

    @property
    def cells(self) -> list[tuple[str, str]]:
        lab = self.nodes.labels
        return [(lab[a], lab[b]) for a, b in zip(self.senders, self.receivers)]

    def cell_keys(self) -> list[tuple[int, int]]:
        return list(zip(self.senders.tolist(), self.receivers.tolist()))


def _incidence(n: int, senders: np.ndarray, receivers: np.ndarray) -> np.ndarray:
    A = np.zeros((2 * n, len(senders)))
    cols = np.arange(len(senders))
    A[senders, cols] = 1.0
    A[n + receivers, cols] = 1.0
    return A


def build_routing_matrix(nodes: NodeSet, active_cells: Sequence | None = None) -> RoutingMatrix:
    """Routing matrix for ``active_cells`` (default: every off-diagonal pair).

    Column order follows ``active_cells``.
    """
    if active_cells is None:
        active_cells = nodes.off_diagonal()
    s, r = _cell_indices(nodes, active_cells)
    if len(s) == 0:
        raise ValueError("at least one active cell is required")
    return RoutingMatrix(nodes, s, r, _frozen(_incidence(nodes.n, s, r)))


def _check_balance(y: np.ndarray, n: int) -> None:
    rows, cols = y[:n].sum(), y[n:].sum()
    if abs(rows - cols) > BALANCE_RTOL * max(1.0, rows):
        raise ValueError(
            f"unbalanced margins: total outflow {rows!r} != total inflow {cols!r}")


@dataclass(frozen=True, eq=False)
class MarginSystem:
    """Routing matrix plus observed margins ``y`` (row sums, then column sums)."""

    routing: RoutingMatrix
    y: np.ndarray

    def __post_init__(self):
        y = _frozen(self.y)
        n = self.routing.n
        if y.shape != (2 * n,):
            raise ValueError(f"margin vector must have length {2 * n}")
        if not np.all(np.isfinite(y)) or np.any(y < 0):
            raise ValueError("margins must be finite and non-negative")
        _check_balance(y, n)
        object.__setattr__(self, "y", y)

    @classmethod
    def from_sums(cls, nodes: NodeSet, row_sums, col_sums, active_cells=None) -> MarginSystem:
        y = np.concatenate([np.asarray(row_sums, float), np.asarray(col_sums, float)])
        return cls(build_routing_matrix(nodes, active_cells), y)

    @property
    def nodes(self) -> NodeSet:
        return self.routing.nodes

    @property
    def row_sums(self) -> np.ndarray:
        return self.y[: self.routing.n]

    @property
    def col_sums(self) -> np.ndarray:
        return self.y[self.routing.n:]


def apply_margins(routing: RoutingMatrix, x: FlowMatrix) -> MarginSystem:
    """Margins ``y = A x`` of a flow matrix defined on the routing's cells."""
    ref = FlowMatrix(routing.nodes, routing.senders, routing.receivers,
                     np.zeros(routing.N))
    values = x.aligned_to(ref)
    return MarginSystem(routing, routing.matrix @ values)


@dataclass(frozen=True, eq=False)
class ReducedProblem:
    """Margin system restricted to strictly positive margins.

    ``row_index`` lists the kept margin rows (positions in ``0..2n-1``),
    ``cell_map`` the kept cells and ``dropped_cells`` the cells forced to zero
    (both as positions in the original active-cell order). ``A`` and ``y``
    are the reduced routing matrix and margins used by every estimator.
    """

    original: MarginSystem
    row_index: np.ndarray
    cell_map: np.ndarray
    dropped_cells: np.ndarray
    A: np.ndarray = field(repr=False)
    y: np.ndarray

    @property
    def nodes(self) -> NodeSet:
        return self.original.nodes

    @property
    def n(self) -> int:
        return self.original.routing.n

    @property
    def N(self) -> int:
        return len(self.cell_map)

    @property
    def senders(self) -> np.ndarray:
        return self.original.routing.senders[self.cell_map]

    @property
    def receivers(self) -> np.ndarray:
        return self.original.routing.receivers[self.cell_map]

    @property
    def scale(self) -> float:
        """Residual normaliser ``max(1, ||y||_inf)``."""
        return max(1.0, float(np.max(self.y, initial=0.0)))

    @property
    def margins(self) -> MarginSystem:
        """The reduced system as a stand-alone :class:`MarginSystem`."""
        rt = self.original.routing
        routing = RoutingMatrix(rt.nodes, self.senders, self.receivers,
                                _frozen(_incidence(rt.n, self.senders, self.receivers)))
        return MarginSystem(routing, self.full_margins())

    @cached_property
    def cell_rows(self) -> tuple[np.ndarray, np.ndarray]:
        """Positions (within ``y``) of each kept cell's sender and receiver margin."""
        pos = np.full(2 * self.n, -1)
        pos[self.row_index] = np.arange(len(self.row_index))
        return pos[self.senders], pos[self.n + self.receivers]

    def full_margins(self) -> np.ndarray:
        y = np.zeros(2 * self.n)
        y[self.row_index] = self.y
        return y

    def residual(self, mu) -> np.ndarray:
        return self.A @ np.asarray(mu, float) - self.y

    def max_residual(self, mu) -> float:
        if self.N == 0:
            return 0.0
        return float(np.max(np.abs(self.residual(mu))))

    def recompose(self, values, period=None) -> FlowMatrix:
        """Embed reduced cell values into the original cells, zeros elsewhere."""
        rt = self.original.routing
        full = np.zeros(rt.N)
        full[self.cell_map] = np.asarray(values, float)
        return FlowMatrix(rt.nodes, rt.senders, rt.receivers, full, period)

    def with_margins(self, y) -> ReducedProblem:
        """Same support with new (reduced, strictly positive) margins."""
        y = _frozen(y)
        if y.shape != self.y.shape:
            raise ValueError("margin vector does not match the reduced rows")
        if np.any(y <= 0):
            raise ValueError("reduced margins must be strictly positive")
        full = np.zeros(2 * self.n)
        full[self.row_index] = y
        _check_balance(full, self.n)
        return ReducedProblem(self.original, self.row_index, self.cell_map,
                              self.dropped_cells, self.A, y)

    def restricted(self, keep) -> ReducedProblem:
        """Sub-problem on the cells selected by the boolean mask ``keep``."""
        keep = np.asarray(keep, bool)
        if keep.shape != (self.N,):
            raise ValueError("mask must select among the reduced cells")
        A = self.A[:, keep]
        if np.any(A.sum(axis=1) == 0):
            raise InfeasibleMarginsError("a positive margin has no remaining cell")
        dropped = np.sort(np.concatenate([self.dropped_cells, self.cell_map[~keep]]))
        return ReducedProblem(self.original, self.row_index, _frozen(self.cell_map[keep], int),
                              _frozen(dropped, int), _frozen(A), self.y)


def reduce_problem(margins: MarginSystem) -> ReducedProblem:
    """Drop cells incident to a zero margin and the zero margins themselves."""
    rt = margins.routing
    n, y = rt.n, margins.y
    keep_cell = (y[rt.senders] > 0) & (y[n + rt.receivers] > 0)
    rows = np.flatnonzero(y > 0)
    cells = np.flatnonzero(keep_cell)
    A = rt.matrix[np.ix_(rows, cells)]
    if len(rows) and (len(cells) == 0 or np.any(A.sum(axis=1) == 0)):
        raise InfeasibleMarginsError(
            "positive margins cannot be reached by any active cell")
    return ReducedProblem(margins, _frozen(rows, int), _frozen(cells, int),
                          _frozen(np.flatnonzero(~keep_cell), int), _frozen(A), _frozen(y[rows]))


def is_feasible(problem: ReducedProblem) -> bool:
    """Whether some ``x >= 0`` on the kept cells satisfies ``A x = y``."""
    from scipy.optimize import linprog

    if problem.N == 0:
        return bool(np.all(problem.y == 0))
    s = problem.scale
    res = linprog(np.zeros(problem.N), A_eq=problem.A, b_eq=problem.y / s,
                  bounds=(0, None), method="highs")
    return res.status == 0


@dataclass(frozen=True)
class ErrorReport:
    """L1/L2 prediction errors per period and aggregated over periods."""

    per_period: tuple[tuple[str | None, float, float], ...]
    overall_l1: float
    overall_l2: float
    average_l1: float
    average_l2: float
    se_l1: float
    se_l2: float

    @property
    def l1(self) -> float:
        return self.overall_l1

    @property
    def l2(self) -> float:
        return self.overall_l2


def _l1_l2(estimate: FlowMatrix, truth: FlowMatrix) -> tuple[float, float]:
    diff = estimate.aligned_to(truth) - truth.values
    return float(np.sum(np.abs(diff))), float(np.sqrt(np.sum(diff**2)))


def summarize_errors(per_period: Sequence[tuple]) -> ErrorReport:
    """Aggregate ``(period, l1, l2)`` rows: sums, means and standard errors."""
    rows = tuple((t, float(a), float(b)) for t, a, b in per_period)
    if not rows:
        raise ValueError("no periods to summarize")
    l1 = np.array([r[1] for r in rows])
    l2 = np.array([r[2] for r in rows])
    T = len(rows)

    def se(v):
        return float(np.std(v, ddof=1) / np.sqrt(T)) if T > 1 else float("nan")

    return ErrorReport(rows, float(l1.sum()), float(l2.sum()), float(l1.mean()),
                       float(l2.mean()), se(l1), se(l2))


def error_metrics(estimate, truth) -> ErrorReport:
    """L1 and L2 errors of ``estimate`` against ``truth``.

    Both arguments may be single :class:`FlowMatrix` objects or equally long
    sequences of them (one per period).
    """
    if isinstance(estimate, FlowMatrix):
        estimate, truth = [estimate], [truth]
    if len(estimate) != len(truth):
        raise ValueError("estimate and truth cover different numbers of periods")
    rows = []
    for est, tru in zip(estimate, truth):
        rows.append((tru.period, *_l1_l2(est, tru)))
    return summarize_errors(rows)
