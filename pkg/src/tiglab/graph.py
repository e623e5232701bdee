"""Temporal interaction graph storage: Jodie CSV ingestion, chronological splits,
inductive node masking and recency-bounded neighbor queries."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

DEFAULT_FEATURE_DIM = 172
NEVER = -np.inf


class GraphDataError(ValueError):
    """Raised for malformed or inconsistent interaction data."""


class SplitConfigError(ValueError):
    """Raised for invalid split fractions or masking that empties a stage."""


@dataclass(frozen=True)
class InteractionEvent:
    src: int
    dst: int
    t: float
    edge_feat: np.ndarray
    state_label: int | None = None


class EventTable:
    """Columnar interaction stream; iterates as :class:`InteractionEvent`."""

    def __init__(self, src, dst, t, edge_feats, labels=None):
        self.src = np.asarray(src, dtype=np.int64)
        self.dst = np.asarray(dst, dtype=np.int64)
        self.t = np.asarray(t, dtype=np.float64)
        self.edge_feats = np.asarray(edge_feats, dtype=np.float32)
        n = len(self.src)
        if self.edge_feats.ndim != 2 or self.edge_feats.shape[0] != n:
            self.edge_feats = self.edge_feats.reshape(n, -1)
        # -1 marks a missing state label
        self.labels = np.full(n, -1, dtype=np.int64) if labels is None else np.asarray(labels, dtype=np.int64)
        if not (len(self.dst) == len(self.t) == len(self.labels) == n):
            raise GraphDataError("event columns have inconsistent lengths")

    @classmethod
    def from_events(cls, events: Sequence[InteractionEvent]) -> "EventTable":
        if not events:
            return cls([], [], [], np.zeros((0, 0)))
        dims = {np.asarray(e.edge_feat).size for e in events}
        if len(dims) != 1:
            raise GraphDataError(f"inconsistent edge feature dimensions: {sorted(dims)}")
        return cls([e.src for e in events], [e.dst for e in events], [e.t for e in events],
                   np.stack([np.asarray(e.edge_feat, dtype=np.float32).ravel() for e in events]),
                   [-1 if e.state_label is None else e.state_label for e in events])

    @property
    def d_e(self) -> int:
        return self.edge_feats.shape[1]

    def __len__(self) -> int:
        return len(self.src)

    def __getitem__(self, i: int) -> InteractionEvent:
        label = int(self.labels[i])
        return InteractionEvent(int(self.src[i]), int(self.dst[i]), float(self.t[i]),
                                self.edge_feats[i], None if label < 0 else label)

    def __iter__(self) -> Iterator[InteractionEvent]:
        return (self[i] for i in range(len(self)))

    def take(self, idx: np.ndarray) -> "EventTable":
        return EventTable(self.src[idx], self.dst[idx], self.t[idx], self.edge_feats[idx], self.labels[idx])


def load_jodie_csv(path: str | Path) -> tuple[EventTable, int, int, int]:
    """
    Parse a Jodie-format interaction file.
    :param path: file with header ``user_id,item_id,timestamp,state_label,f1,...,fk``
    :return: (events in file order, n_users, n_items, d_e); item ids are shifted by n_users
    """
    users, items, times, labels, feats = [], [], [], [], []
    k = None
    with open(path, encoding="utf-8") as fh:
        fh.readline()
        for lineno, line in enumerate(fh, start=2):
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            if len(parts) < 4:
                raise GraphDataError(f"line {lineno}: expected at least 4 fields, got {len(parts)}")
            if k is None:
                k = len(parts) - 4
            elif len(parts) - 4 != k:
                raise GraphDataError(f"line {lineno}: feature dimension {len(parts) - 4} != {k}")
            try:
                u, i = int(parts[0]), int(parts[1])
                ts = float(parts[2])
                lab = int(float(parts[3]))
                feats.append([float(x) for x in parts[4:]])
            except ValueError as exc:
                raise GraphDataError(f"line {lineno}: non-numeric field ({exc})") from None
            users.append(u)
            items.append(i)
            times.append(ts)
            labels.append(lab)
    if not users:
        raise GraphDataError("empty stream")
    users_a = np.asarray(users, dtype=np.int64)
    items_a = np.asarray(items, dtype=np.int64)
    n_users = int(users_a.max()) + 1
    n_items = int(items_a.max()) + 1
    edge = np.asarray(feats, dtype=np.float32).reshape(len(users), k)
    events = EventTable(users_a, items_a + n_users, times, edge, labels)
    return events, n_users, n_items, k


def write_jodie_csv(path: str | Path, graph: "TemporalGraph") -> None:
    """Write ``graph`` back in Jodie format; features use shortest round-trip reprs."""
    n_users = graph.n_users if graph.n_users is not None else 0
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("user_id,item_id,timestamp,state_label,comma_separated_list_of_features\n")
        for i in range(graph.n_events):
            lab = max(int(graph.labels[i]), 0)
            feats = ",".join(repr(float(x)) for x in graph.edge_feats[i])
            row = f"{int(graph.src[i])},{int(graph.dst[i]) - n_users},{float(graph.t[i])!r},{lab}"
            fh.write(row + ("," + feats if feats else "") + "\n")


class NeighborIndex:
    """Per-node interaction lists in CSR layout, each sorted ascending by (t, event index)."""

    def __init__(self, src: np.ndarray, dst: np.ndarray, t: np.ndarray, n_nodes: int):
        n = len(src)
        owner = np.concatenate([src, dst])
        other = np.concatenate([dst, src])
        eidx = np.concatenate([np.arange(n), np.arange(n)])
        times = np.concatenate([t, t])
        order = np.lexsort((eidx, times, owner))
        self.n_nodes = n_nodes
        self.neighbors = other[order]
        self.event_idx = eidx[order]
        self.times = times[order]
        counts = np.bincount(owner, minlength=n_nodes)
        self.offsets = np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)

    def node_list(self, v: int) -> list[tuple[int, int, float]]:
        lo, hi = self.offsets[v], self.offsets[v + 1]
        return [(int(u), int(e), float(ts)) for u, e, ts in
                zip(self.neighbors[lo:hi], self.event_idx[lo:hi], self.times[lo:hi])]

    def _cut(self, nodes: np.ndarray, times: np.ndarray) -> np.ndarray:
        # vectorised lower-bound search of each query time inside its node's slice
        lo = self.offsets[nodes].copy()
        hi = self.offsets[nodes + 1].copy()
        while True:
            active = lo < hi
            if not active.any():
                return lo
            mid = (lo + hi) // 2
            go_right = active & (self.times[np.minimum(mid, len(self.times) - 1)] < times)
            lo = np.where(go_right, mid + 1, lo)
            hi = np.where(active & ~go_right, mid, hi)

    def query(self, nodes, times, k: int):
        """
        Batched most-recent-neighbor lookup.
        :return: (neighbors, event_idx, times, mask), each shaped (len(nodes), k), most recent first
        """
        nodes = np.asarray(nodes, dtype=np.int64)
        times = np.broadcast_to(np.asarray(times, dtype=np.float64), nodes.shape)
        end = self._cut(nodes, times)
        start = self.offsets[nodes]
        pos = end[:, None] - 1 - np.arange(k)[None, :]
        mask = pos >= start[:, None]
        pos = np.where(mask, pos, 0)
        nbr = np.where(mask, self.neighbors[pos] if len(self.neighbors) else 0, 0)
        eid = np.where(mask, self.event_idx[pos] if len(self.event_idx) else 0, 0)
        ts = np.where(mask, self.times[pos] if len(self.times) else 0.0, 0.0)
        return nbr, eid, ts, mask


@dataclass
class TemporalGraph:
    src: np.ndarray
    dst: np.ndarray
    t: np.ndarray
    edge_feats: np.ndarray
    labels: np.ndarray
    node_feats: np.ndarray
    n_nodes: int
    n_users: int | None = None
    neighbor_index: NeighborIndex = field(repr=False, default=None)

    @property
    def n_events(self) -> int:
        return len(self.src)

    @property
    def d_e(self) -> int:
        return self.edge_feats.shape[1]

    @property
    def d_n(self) -> int:
        return self.node_feats.shape[1]

    @property
    def events(self) -> EventTable:
        return EventTable(self.src, self.dst, self.t, self.edge_feats, self.labels)

    @property
    def destination_pool(self) -> np.ndarray:
        """Candidate ids for negative sampling: the item partition when known."""
        if self.n_users is not None and self.n_users < self.n_nodes:
            return np.arange(self.n_users, self.n_nodes)
        return np.unique(self.dst)

    def content_hash(self) -> str:
        import hashlib
        h = hashlib.sha256()
        for arr in (self.src, self.dst, self.t, self.edge_feats, self.labels, self.node_feats):
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()


def build_graph(events: EventTable | Sequence[InteractionEvent], n_nodes: int | None = None,
                node_feats: np.ndarray | None = None, n_users: int | None = None,
                feature_dim: int = DEFAULT_FEATURE_DIM) -> TemporalGraph:
    """Stable-sort events by time, fill missing features with zeros and build the neighbor index."""
    if not isinstance(events, EventTable):
        events = EventTable.from_events(list(events))
    if len(events) == 0:
        raise GraphDataError("empty stream")
    if not np.all(np.isfinite(events.t)):
        raise GraphDataError("non-finite timestamp")
    if (events.t < 0).any():
        raise GraphDataError(f"negative timestamp at event {int(np.argmax(events.t < 0))}")
    if (events.src < 0).any() or (events.dst < 0).any():
        raise GraphDataError("negative node id")
    order = np.argsort(events.t, kind="stable")
    ev = events.take(order)
    max_id = int(max(ev.src.max(), ev.dst.max()))
    if n_nodes is None:
        n_nodes = max_id + 1
    elif n_nodes <= max_id:
        raise GraphDataError(f"n_nodes={n_nodes} but max node id is {max_id}")
    edge = ev.edge_feats
    if edge.shape[1] == 0:
        edge = np.zeros((len(ev), feature_dim), dtype=np.float32)
    if node_feats is None:
        node_feats = np.zeros((n_nodes, feature_dim), dtype=np.float32)
    node_feats = np.asarray(node_feats, dtype=np.float32)
    if node_feats.shape[0] != n_nodes:
        raise GraphDataError(f"node feature table has {node_feats.shape[0]} rows, expected {n_nodes}")
    index = NeighborIndex(ev.src, ev.dst, ev.t, n_nodes)
    return TemporalGraph(ev.src, ev.dst, ev.t, edge, ev.labels, node_feats, n_nodes, n_users, index)


def load_graph(path: str | Path) -> TemporalGraph:
    events, n_users, n_items, _ = load_jodie_csv(path)
    return build_graph(events, n_nodes=n_users + n_items, n_users=n_users)


def recent_neighbors(index: NeighborIndex, v: int, t: float, k: int) -> list[tuple[int, int, float]]:
    """
    Up to ``k`` interactions of ``v`` strictly before ``t``, newest first.

    The bound is strict so an event never sees itself; on tied timestamps the
    later event index counts as more recent.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    if not 0 <= v < index.n_nodes:
        raise IndexError(f"unknown node id {v}")
    nbr, eid, ts, mask = index.query(np.array([v]), np.array([t]), k)
    m = mask[0]
    return [(int(u), int(e), float(s)) for u, e, s in zip(nbr[0][m], eid[0][m], ts[0][m])]


STAGES = ("pretrain", "prompt", "val", "test")


@dataclass(frozen=True)
class SplitSpec:
    fractions: tuple[float, float, float, float]
    boundaries: tuple[int, int, int, int]

    def stage(self, name: str) -> range:
        i = STAGES.index(name)
        lo = 0 if i == 0 else self.boundaries[i - 1]
        return range(lo, self.boundaries[i])

    @property
    def n_events(self) -> int:
        return self.boundaries[-1]

    @property
    def val_start(self) -> int:
        return self.boundaries[1]

    def stage_sizes(self) -> list[int]:
        return [len(self.stage(s)) for s in STAGES]


def chronological_split(graph: TemporalGraph | int, fractions: Iterable[float],
                        allow_empty_prompt: bool = False) -> SplitSpec:
    """
    Cut the time-sorted stream into pretrain / prompt / val / test stages.
    :param allow_empty_prompt: baseline mode (e.g. 70/0/15/15) where the prompt stage may be empty
    """
    fr = tuple(float(f) for f in fractions)
    if len(fr) != 4:
        raise SplitConfigError("expected 4 fractions (pretrain, prompt, val, test)")
    if any(f < 0 for f in fr) or any(f == 0 for i, f in enumerate(fr) if not (i == 1 and allow_empty_prompt)):
        raise SplitConfigError(f"fractions must be positive: {fr}")
    if abs(sum(fr) - 1.0) > 1e-9:
        raise SplitConfigError(f"fractions sum to {sum(fr)}, expected 1")
    n = graph if isinstance(graph, int) else graph.n_events
    cum = np.cumsum(fr)
    bounds = [int(math.floor(n * c + 0.5)) for c in cum[:3]] + [n]
    spec = SplitSpec(fr, tuple(bounds))
    for name, size in zip(STAGES, spec.stage_sizes()):
        if size == 0 and not (name == "prompt" and allow_empty_prompt):
            raise SplitConfigError(f"stage '{name}' is empty for {n} events")
    return spec


@dataclass(frozen=True)
class InductiveSpec:
    unseen_nodes: frozenset
    seed: int
    train_mask: np.ndarray = field(repr=False, compare=False)
    eval_mask: np.ndarray = field(repr=False, compare=False)


def mask_inductive_nodes(graph: TemporalGraph, split: SplitSpec, node_fraction: float = 0.1,
                         seed: int = 0) -> InductiveSpec:
    """
    Hide a seeded sample of val/test nodes from every training stage.

    ``train_mask`` is False for pretrain/prompt events touching an unseen node;
    ``eval_mask`` marks val/test events touching at least one unseen node.
    """
    if not 0 < node_fraction < 1:
        raise SplitConfigError("node_fraction must lie in (0, 1)")
    later = np.arange(split.val_start, graph.n_events)
    candidates = np.unique(np.concatenate([graph.src[later], graph.dst[later]]))
    rng = np.random.default_rng(seed)
    n_pick = int(node_fraction * len(candidates))
    unseen = np.sort(rng.choice(candidates, size=n_pick, replace=False)) if n_pick else np.array([], dtype=np.int64)
    touches = np.isin(graph.src, unseen) | np.isin(graph.dst, unseen)
    idx = np.arange(graph.n_events)
    train_mask = ~(touches & (idx < split.val_start))
    if not train_mask[: split.boundaries[0]].any():
        raise SplitConfigError("inductive masking removed every pretraining event")
    eval_mask = touches & (idx >= split.val_start)
    return InductiveSpec(frozenset(int(u) for u in unseen), seed, train_mask, eval_mask)


def transductive_mask(graph: TemporalGraph, split: SplitSpec, inductive: InductiveSpec | None = None) -> np.ndarray:
    """Events whose endpoints both occur in the (possibly masked) pretraining stage."""
    pre = np.arange(split.boundaries[0])
    if inductive is not None:
        pre = pre[inductive.train_mask[pre]]
    seen = np.zeros(graph.n_nodes, dtype=bool)
    seen[graph.src[pre]] = True
    seen[graph.dst[pre]] = True
    return seen[graph.src] & seen[graph.dst]


class LastInteractionTracker:
    """Most recent interaction time per node, replayed in stream order."""

    def __init__(self, n_nodes: int):
        self.last = np.full(n_nodes, NEVER, dtype=np.float64)

    def update(self, src, dst, t) -> None:
        src = np.atleast_1d(src)
        dst = np.atleast_1d(dst)
        t = np.broadcast_to(np.asarray(t, dtype=np.float64), src.shape)
        np.maximum.at(self.last, src, t)
        np.maximum.at(self.last, dst, t)

    def replay(self, graph: TemporalGraph, idx) -> "LastInteractionTracker":
        idx = np.asarray(idx, dtype=np.int64)
        if len(idx):
            self.update(graph.src[idx], graph.dst[idx], graph.t[idx])
        return self

    def get(self, nodes) -> np.ndarray:
        return self.last[np.asarray(nodes, dtype=np.int64)]

    def copy(self) -> "LastInteractionTracker":
        out = LastInteractionTracker(0)
        out.last = self.last.copy()
        return out
