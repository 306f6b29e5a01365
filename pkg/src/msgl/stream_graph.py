"""Stream networks at one scale, and the fine x coarse interpolation operator."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import ValidationError

EPS_D = 1e-6  # km, distance floor for coincident reaches

STATIC_FIELDS = ("length_km", "elevation_m", "slope", "width_m")


@dataclass
class StreamGraph:
    """Reaches of one scale with static attributes and a row-stochastic adjacency.

    ``static_attrs`` is ``[n, 4]`` in the column order of ``STATIC_FIELDS``.
    Row ``i`` of ``adjacency`` holds the weights of reaches flowing into ``i``.
    """

    scale: str
    node_ids: list
    static_attrs: np.ndarray
    adjacency: np.ndarray

    def __post_init__(self):
        n = len(self.node_ids)
        if len(set(self.node_ids)) != n:
            raise ValidationError(f"{self.scale}: duplicate node ids")
        self.static_attrs = np.asarray(self.static_attrs, dtype=np.float64).reshape(n, len(STATIC_FIELDS))
        self.adjacency = np.asarray(self.adjacency, dtype=np.float64)
        if self.adjacency.shape != (n, n):
            raise ValidationError(
                f"{self.scale}: adjacency shape {self.adjacency.shape} != ({n}, {n})")

    @property
    def n(self) -> int:
        return len(self.node_ids)

    def index(self) -> dict:
        return {k: i for i, k in enumerate(self.node_ids)}

    def attr(self, name: str) -> np.ndarray:
        return self.static_attrs[:, STATIC_FIELDS.index(name)]

    def headwaters(self) -> list:
        return [k for k, row in zip(self.node_ids, self.adjacency) if not row.any()]


@dataclass
class CrossScaleMap:
    fine_ids: list
    coarse_ids: list
    d_matrix: np.ndarray
    coincidence: dict = field(default_factory=dict)

    def coincidence_index(self) -> np.ndarray:
        """Coarse column index of each fine row's coincident reach."""
        col = {k: j for j, k in enumerate(self.coarse_ids)}
        try:
            return np.array([col[self.coincidence[f]] for f in self.fine_ids], dtype=np.intp)
        except KeyError as e:
            raise ValidationError(f"no coincidence entry for {e.args[0]!r}") from None


def build_adjacency(edges: Iterable[tuple], node_ids: Sequence | None = None) -> np.ndarray:
    """Inverse-distance adjacency, row = downstream reach, rows normalized to 1.

    ``edges`` are ``(from_id, to_id, stream_distance_km)`` with flow from
    ``from_id`` (upstream) into ``to_id``. Node order follows ``node_ids``, or the
    sorted set of ids appearing in the edges.
    """
    edges = list(edges)
    if node_ids is None:
        node_ids = sorted({e[0] for e in edges} | {e[1] for e in edges})
    pos = {k: i for i, k in enumerate(node_ids)}
    n = len(node_ids)
    A = np.zeros((n, n))
    for row, (u, v, d) in enumerate(edges):
        if u not in pos or v not in pos:
            bad = u if u not in pos else v
            raise ValidationError(f"edge {row}: unknown node id {bad!r}")
        d = float(d)
        if not d > 0:
            raise ValidationError(f"edge {row} ({u}->{v}): distance must be > 0, got {d}")
        if u == v:
            raise ValidationError(f"edge {row}: self loop on {u!r}")
        A[pos[v], pos[u]] += 1.0 / d
    s = A.sum(axis=1, keepdims=True)
    np.divide(A, s, out=A, where=s > 0)
    return A


def build_cross_scale_matrix(pairs: Iterable[tuple], fine_ids: Sequence | None = None,
                             coarse_ids: Sequence | None = None,
                             coincidence: Mapping | None = None,
                             eps_d: float = EPS_D) -> CrossScaleMap:
    """Row-normalized inverse stream distance between fine and coarse reaches.

    ``pairs`` are ``(fine_id, coarse_id, distance_km)``. The coincident coarse
    reach of each fine reach is the row argmax (smaller coarse id on ties)
    unless given explicitly in ``coincidence``.
    """
    pairs = list(pairs)
    if fine_ids is None:
        fine_ids = sorted({p[0] for p in pairs})
    if coarse_ids is None:
        coarse_ids = sorted({p[1] for p in pairs})
    fpos = {k: i for i, k in enumerate(fine_ids)}
    cpos = {k: j for j, k in enumerate(coarse_ids)}
    D = np.zeros((len(fine_ids), len(coarse_ids)))
    for row, (f, c, d) in enumerate(pairs):
        if f not in fpos:
            raise ValidationError(f"pair {row}: unknown fine id {f!r}")
        if c not in cpos:
            raise ValidationError(f"pair {row}: unknown coarse id {c!r}")
        d = float(d)
        if not d >= 0:
            raise ValidationError(f"pair {row} ({f}, {c}): distance must be >= 0, got {d}")
        D[fpos[f], cpos[c]] = 1.0 / max(d, eps_d)
    s = D.sum(axis=1, keepdims=True)
    empty = np.flatnonzero(s[:, 0] == 0)
    if empty.size:
        raise ValidationError(f"fine node {fine_ids[empty[0]]!r} has no cross-scale pairs")
    D /= s

    # argmax over columns sorted by coarse id gives the smaller-id tie-break
    order = sorted(range(len(coarse_ids)), key=lambda j: coarse_ids[j])
    best = np.asarray(order)[np.argmax(D[:, order], axis=1)]
    coin = {f: coarse_ids[best[i]] for i, f in enumerate(fine_ids)}
    if coincidence:
        for f, c in coincidence.items():
            if f not in fpos or c not in cpos:
                raise ValidationError(f"coincidence ({f!r}, {c!r}) references an unknown node")
            if D[fpos[f], cpos[c]] <= 0:
                raise ValidationError(f"coincidence ({f!r}, {c!r}) has no cross-scale pair")
            coin[f] = c
    return CrossScaleMap(list(fine_ids), list(coarse_ids), D, coin)


def epsilon_spread(distances_to_a: Sequence[float], eps: float,
                   distances_to_b: Sequence[float] | None = None) -> float:
    """max - min of d(A, B') over the fine reaches B' near coarse reach B.

    ``distances_to_a`` lists d(A, B') for every B' in the neighborhood. When
    ``distances_to_b`` is given, each B' is checked to lie within ``eps`` of B.
    """
    if not eps > 0:
        raise ValidationError(f"eps must be > 0, got {eps}")
    da = np.asarray(distances_to_a, dtype=np.float64)
    if da.size == 0:
        raise ValidationError("empty neighborhood")
    if distances_to_b is not None:
        db = np.asarray(distances_to_b, dtype=np.float64)
        if db.shape != da.shape:
            raise ValidationError("distance lists differ in length")
        if np.any(db > eps):
            raise ValidationError(f"neighborhood point farther than eps={eps} from B")
    return float(da.max() - da.min())
