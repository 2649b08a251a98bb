"""Short-term memory as a topological map, with attention-driven forgetting.

Forgotten nodes are only hidden from encoding and decoding.  They keep their
features and edges, still take part in localization, and come back either when
the agent localizes at them again or when a goal is reached.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Any, Optional, Sequence

import numpy as np


class TopoMemError(ValueError):
    """Raised on contract violations of the map operations."""


class DeltaKind(enum.Enum):
    NO_CHANGE = "no_change"
    FEATURE_REPLACED = "feature_replaced"
    NODE_ADDED = "node_added"
    RESTORED = "restored"


@dataclass(frozen=True)
class GraphDelta:
    kind: DeltaKind
    node: Optional[int] = None
    edge: Optional[tuple[int, int]] = None


def _edge(a: int, b: int) -> tuple[int, int]:
    return (a, b) if a < b else (b, a)


@dataclass
class TopoGraph:
    dim: int
    features: list[np.ndarray] = field(default_factory=list)
    edges: set[tuple[int, int]] = field(default_factory=set)
    last_localized: Optional[int] = None
    forgotten: set[int] = field(default_factory=set)
    global_feature: np.ndarray = None  # type: ignore[assignment]
    node_meta: list[Any] = field(default_factory=list)
    exempt_last: bool = True

    def __post_init__(self):
        if self.global_feature is None:
            self.global_feature = np.zeros(self.dim)

    @property
    def n_nodes(self) -> int:
        return len(self.features)

    def active_ids(self) -> list[int]:
        return [i for i in range(self.n_nodes) if i not in self.forgotten]

    def degree(self, node: int, active_only: bool = True) -> int:
        count = 0
        for a, b in self.edges:
            if node not in (a, b):
                continue
            other = b if a == node else a
            if active_only and other in self.forgotten:
                continue
            count += 1
        return count

    def active_edges(self) -> set[tuple[int, int]]:
        return {e for e in self.edges if e[0] not in self.forgotten and e[1] not in self.forgotten}

    def feature_matrix(self) -> np.ndarray:
        if not self.features:
            return np.zeros((0, self.dim))
        return np.stack(self.features)

    def snapshot(self) -> dict:
        """JSON-ready view of the map structure for trace export."""
        return {
            "nodes": list(range(self.n_nodes)),
            "edges": sorted([list(e) for e in self.edges]),
            "forgotten": sorted(self.forgotten),
            "last_localized": self.last_localized,
        }

    def copy(self) -> "TopoGraph":
        return TopoGraph(
            dim=self.dim,
            features=[f.copy() for f in self.features],
            edges=set(self.edges),
            last_localized=self.last_localized,
            forgotten=set(self.forgotten),
            global_feature=self.global_feature.copy(),
            node_meta=list(self.node_meta),
            exempt_last=self.exempt_last,
        )


def cosine_similarities(g: TopoGraph, e: np.ndarray) -> np.ndarray:
    e = np.asarray(e, dtype=float)
    if e.shape != (g.dim,):
        raise TopoMemError(f"embedding has shape {e.shape}, expected ({g.dim},)")
    norm_e = np.linalg.norm(e)
    if norm_e == 0:
        raise TopoMemError("zero-norm embedding cannot be localized")
    if g.n_nodes == 0:
        return np.zeros(0)
    V = g.feature_matrix()
    return (V @ e) / (np.linalg.norm(V, axis=1) * norm_e)


def localize(g: TopoGraph, e: np.ndarray, s_th: float) -> tuple[Optional[int], np.ndarray]:
    """Best-matching node over all nodes (forgotten included) if its cosine exceeds ``s_th``."""
    sims = cosine_similarities(g, e)
    if sims.size == 0:
        return None, sims
    best = int(np.argmax(sims))  # first maximum -> lowest id on ties
    if sims[best] > s_th:
        return best, sims
    return None, sims


def update_map(g: TopoGraph, e: np.ndarray, loc: Optional[int], meta: Any = None) -> GraphDelta:
    """Apply one of the three graph-update cases for the embedding ``e``."""
    e = np.array(e, dtype=float)
    if loc is None:
        node = g.n_nodes
        g.features.append(e)
        g.node_meta.append(meta)
        edge = None
        if g.last_localized is not None:
            edge = _edge(node, g.last_localized)
            g.edges.add(edge)
        g.last_localized = node
        return GraphDelta(DeltaKind.NODE_ADDED, node=node, edge=edge)

    if not 0 <= loc < g.n_nodes:
        raise TopoMemError(f"node {loc} does not exist")
    restored = False
    if loc in g.forgotten:
        restore_on_revisit(g, loc)
        restored = True
    if loc == g.last_localized:
        if restored:
            return GraphDelta(DeltaKind.RESTORED, node=loc)
        return GraphDelta(DeltaKind.NO_CHANGE)

    edge = None
    if g.last_localized is not None:
        edge = _edge(loc, g.last_localized)
        g.edges.add(edge)
    g.features[loc] = e
    if meta is not None:
        g.node_meta[loc] = meta
    g.last_localized = loc
    kind = DeltaKind.RESTORED if restored else DeltaKind.FEATURE_REPLACED
    return GraphDelta(kind, node=loc, edge=edge)


def forget(g: TopoGraph, scores: Sequence[float], p: float) -> set[int]:
    """Hide the ``floor(p * n_active)`` lowest-scored active nodes.

    ``scores`` is aligned with ``g.active_ids()``.  Ties go to the lower node
    id.  The current node is skipped when ``g.exempt_last`` is set, which can
    leave the result one short of the nominal count.
    """
    if not 0.0 <= p <= 1.0:
        raise TopoMemError(f"forgetting fraction {p} outside [0, 1]")
    ids = g.active_ids()
    scores = np.asarray(scores, dtype=float)
    if scores.shape != (len(ids),):
        raise TopoMemError(f"{scores.size} scores for {len(ids)} active nodes")
    n = int(np.floor(p * len(ids)))
    if n == 0:
        return set()
    order = np.lexsort((np.asarray(ids), scores))[:n]
    chosen = {ids[i] for i in order}
    if g.exempt_last:
        chosen.discard(g.last_localized)
    g.forgotten |= chosen
    return chosen


def restore_on_revisit(g: TopoGraph, node: int) -> GraphDelta:
    if node not in g.forgotten:
        raise TopoMemError(f"node {node} is not forgotten")
    g.forgotten.discard(node)
    return GraphDelta(DeltaKind.RESTORED, node=node)


def restore_all(g: TopoGraph) -> int:
    count = len(g.forgotten)
    g.forgotten.clear()
    return count


@dataclass(frozen=True)
class ActiveView:
    """Encoder input: active node rows (ascending id) followed by the global row if present."""

    node_ids: tuple[int, ...]
    features: np.ndarray
    src: np.ndarray
    dst: np.ndarray
    has_global: bool

    @property
    def n_rows(self) -> int:
        return self.features.shape[0]

    def adjacency(self) -> np.ndarray:
        A = np.zeros((self.n_rows, self.n_rows))
        A[self.dst, self.src] = 1.0
        return A


def active_view(g: TopoGraph, include_global: bool = True) -> ActiveView:
    """Active subgraph plus the global node linked to every active node; self-loops everywhere.

    Edges come back as a directed list sorted by destination then source
    (``dst`` receives from ``src``), both directions of every undirected edge.
    """
    ids = g.active_ids()
    if not ids:
        raise TopoMemError("no active nodes to encode")
    index = {nid: k for k, nid in enumerate(ids)}
    rows = [g.features[i] for i in ids]
    pairs = {(k, k) for k in range(len(ids))}
    for a, b in g.edges:
        if a in index and b in index:
            pairs.add((index[a], index[b]))
            pairs.add((index[b], index[a]))
    if include_global:
        gi = len(ids)
        rows.append(g.global_feature)
        pairs.add((gi, gi))
        for k in range(len(ids)):
            pairs.add((k, gi))
            pairs.add((gi, k))
    ordered = sorted(pairs)  # (dst, src)
    dst = np.fromiter((p[0] for p in ordered), dtype=np.int64, count=len(ordered))
    src = np.fromiter((p[1] for p in ordered), dtype=np.int64, count=len(ordered))
    return ActiveView(tuple(ids), np.stack(rows).astype(float), src, dst, include_global)
