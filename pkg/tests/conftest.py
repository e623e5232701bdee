import sys
from pathlib import Path

import numpy as np
import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))

from tiglab.backbone import BackboneConfig, PretrainConfig, pretrain  # noqa: E402
from tiglab.graph import EventTable, build_graph, chronological_split  # noqa: E402
from tiglab.synthetic import SyntheticSpec, generate_synthetic  # noqa: E402

torch.set_num_threads(1)


@pytest.fixture
def toy_events():
    # users 0-1, items 2-4; two events share t=3.0
    src = np.array([0, 1, 0, 1, 0])
    dst = np.array([2, 3, 3, 2, 4])
    t = np.array([1.0, 2.0, 3.0, 3.0, 5.0])
    edge = np.arange(10, dtype=np.float32).reshape(5, 2) / 10
    return EventTable(src, dst, t, edge, np.array([0, 1, 0, 1, 1]))


@pytest.fixture
def toy_graph(toy_events):
    return build_graph(toy_events, node_feats=np.zeros((5, 3), dtype=np.float32), n_users=2)


def small_backbone_config(graph, d=8, n_heads=2, dropout=0.0):
    return BackboneConfig(n_nodes=graph.n_nodes, d_n=graph.d_n, d_e=graph.d_e, d_mem=d, d_t=d, d_embed=d,
                          n_heads=n_heads, dropout=dropout)


@pytest.fixture(scope="session")
def drift_graph():
    return generate_synthetic(SyntheticSpec("planted_drift", n_users=20, n_items=10, n_events=600, seed=3,
                                            drift_point=0.55, item_turnover=0.5, d_e=4, d_n=4))


@pytest.fixture(scope="session")
def drift_split(drift_graph):
    return chronological_split(drift_graph, (0.5, 0.2, 0.15, 0.15))


@pytest.fixture(scope="session")
def drift_pretrained(drift_graph, drift_split):
    bc = small_backbone_config(drift_graph, d=8)
    return pretrain(drift_graph, drift_split, PretrainConfig(lr=3e-3, epochs=3, patience=2, seed=0), bc)


@pytest.fixture(scope="session")
def hetero_graph():
    return generate_synthetic(SyntheticSpec("hetero_nodes", n_users=20, n_items=10, n_events=600, seed=1,
                                            d_e=4, d_n=4))
