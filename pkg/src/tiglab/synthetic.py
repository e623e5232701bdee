"""Seeded synthetic interaction streams with planted structure, used as ground truth at desk scale."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .graph import EventTable, TemporalGraph, build_graph

GENERATORS = ("planted_repeat", "planted_drift", "hetero_nodes")


@dataclass(frozen=True)
class SyntheticSpec:
    generator: str = "planted_repeat"
    n_users: int = 100
    n_items: int = 50
    n_events: int = 2000
    seed: int = 0
    drift_point: float = 0.6
    repeat_prob: float = 0.8
    d_e: int = 8
    d_n: int = 8
    mean_gap: float = 10.0
    label_signal: float = 0.5
    item_turnover: float = 0.0

    @property
    def n_nodes(self) -> int:
        return self.n_users + self.n_items


def generate_synthetic(spec: SyntheticSpec) -> TemporalGraph:
    """
    planted_repeat: each user returns to a personal favorite item with probability ``repeat_prob``.
    planted_drift: as planted_repeat, but all favorites are redrawn at event ``drift_point * n_events``;
    with ``item_turnover`` > 0 that fraction of the catalogue is retired at the drift and replaced
    by items that were inactive before it.
    hetero_nodes: fixed binary user labels; edge features carry a weak label signal plus noise and
    every event carries its user's label.
    """
    if spec.generator not in GENERATORS:
        raise ValueError(f"unknown generator {spec.generator!r}; expected one of {GENERATORS}")
    rng = np.random.default_rng(spec.seed)
    n = spec.n_events
    t = np.cumsum(rng.exponential(spec.mean_gap, size=n))
    users = rng.integers(0, spec.n_users, size=n)
    # active item pool [lo, hi); under turnover the pool slides at the drift point
    shift = int(round(spec.item_turnover * spec.n_items)) if spec.generator == "planted_drift" else 0
    lo = np.zeros(n, dtype=np.int64)
    hi = np.full(n, spec.n_items - shift, dtype=np.int64)
    favorites = rng.integers(0, spec.n_items - shift, size=spec.n_users)
    fav = favorites[users]
    if spec.generator == "planted_drift":
        after = np.arange(n) >= int(spec.drift_point * n)
        new_favorites = rng.integers(shift, spec.n_items, size=spec.n_users)
        fav = np.where(after, new_favorites[users], fav)
        lo[after] += shift
        hi[after] += shift
    repeat = rng.random(n) < spec.repeat_prob
    items = np.where(repeat, fav, lo + (rng.random(n) * (hi - lo)).astype(np.int64))
    edge = rng.normal(0.0, 1.0, size=(n, spec.d_e)).astype(np.float32)
    labels = np.full(n, -1, dtype=np.int64)
    if spec.generator == "hetero_nodes":
        user_label = rng.integers(0, 2, size=spec.n_users)
        labels = user_label[users]
        edge[:, 0] += spec.label_signal * (2 * labels - 1)
    events = EventTable(users, items + spec.n_users, t, edge, labels)
    node_feats = np.zeros((spec.n_nodes, spec.d_n), dtype=np.float32)
    return build_graph(events, n_nodes=spec.n_nodes, node_feats=node_feats, n_users=spec.n_users)


def favorite_counts(graph: TemporalGraph, idx, n_users: int, n_items: int) -> np.ndarray:
    """User x item interaction count matrix over events ``idx``."""
    idx = np.asarray(idx)
    counts = np.zeros((n_users, n_items), dtype=np.int64)
    np.add.at(counts, (graph.src[idx], graph.dst[idx] - n_users), 1)
    return counts
