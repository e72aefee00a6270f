"""Degree-normalized bipartite propagation over user-item interaction graphs.

A propagation step replaces each node's embedding with the weighted sum of
its neighbors' embeddings, weights 1/sqrt(|N_u| * |N_i|); there are no
transforms and no self loops.  Aggregation sums the per-layer embeddings
including layer 0.
"""

from __future__ import annotations

import numpy as np
from scipy import sparse

from .dataset import BehaviorMatrix
from .errors import DataError


class PropagationGraph:
    """Symmetric-normalized adjacency over user nodes then item nodes.

    Node j of an item i is stored at row ``num_users + i``.  The matrix is
    symmetric: weight(u -> i) == weight(i -> u).  CSR indices are kept sorted
    so neighbor enumeration is deterministic (ascending id).
    """

    def __init__(self, adj: sparse.csr_matrix, num_users: int, num_items: int):
        self.adj = adj
        self.num_users = num_users
        self.num_items = num_items

    @property
    def num_edges(self) -> int:
        return self.adj.nnz // 2

    def user_neighbors(self, u: int):
        """(item ids, weights) adjacent to user ``u``, ascending by item id."""
        row = self.adj.getrow(u)
        return row.indices - self.num_users, row.data

    def item_neighbors(self, i: int):
        """(user ids, weights) adjacent to item ``i``, ascending by user id."""
        row = self.adj.getrow(self.num_users + i)
        return row.indices, row.data


def build_graph(matrix: BehaviorMatrix, num_users: int, num_items: int) -> PropagationGraph:
    """Build the normalized propagation structure for one behavior matrix."""
    if len(matrix) and (matrix.users.max() >= num_users or matrix.items.max() >= num_items):
        raise DataError("interaction pair outside the declared user/item universe")
    n = num_users + num_items
    u = matrix.users
    i = matrix.items + num_users
    deg = np.zeros(n, dtype=np.float64)
    np.add.at(deg, u, 1.0)
    np.add.at(deg, i, 1.0)
    with np.errstate(divide="ignore"):
        inv_sqrt = np.where(deg > 0, 1.0 / np.sqrt(deg), 0.0)
    w = inv_sqrt[u] * inv_sqrt[i]
    rows = np.concatenate([u, i])
    cols = np.concatenate([i, u])
    data = np.concatenate([w, w])
    adj = sparse.csr_matrix((data, (rows, cols)), shape=(n, n))
    adj.sort_indices()
    return PropagationGraph(adj, num_users, num_items)


def propagate(graph: PropagationGraph, user_emb: np.ndarray, item_emb: np.ndarray,
              num_layers: int):
    """Run ``num_layers`` propagation steps.

    Returns ``(user_layers, item_layers)``, each a list of ``num_layers + 1``
    tables starting with the inputs.  Isolated nodes produce zero rows at
    layers >= 1.
    """
    if num_layers < 1:
        raise DataError("num_layers must be >= 1")
    if user_emb.shape[0] != graph.num_users or item_emb.shape[0] != graph.num_items:
        raise DataError("embedding row counts do not match the graph")
    if user_emb.shape[1] != item_emb.shape[1]:
        raise DataError("user/item embedding widths differ")
    x = np.vstack([user_emb, item_emb])
    user_layers = [user_emb]
    item_layers = [item_emb]
    for _ in range(num_layers):
        x = graph.adj @ x
        user_layers.append(x[:graph.num_users])
        item_layers.append(x[graph.num_users:])
    return user_layers, item_layers


def aggregate_layers(layers) -> np.ndarray:
    """Elementwise sum of per-layer tables (layer 0 included by the caller)."""
    layers = list(layers)
    if not layers:
        raise DataError("no layers to aggregate")
    shape = layers[0].shape
    for t in layers[1:]:
        if t.shape != shape:
            raise DataError(f"layer shape mismatch: {t.shape} vs {shape}")
    return np.sum(layers, axis=0)


def propagate_sum(adj: sparse.csr_matrix, x: np.ndarray, num_layers: int) -> np.ndarray:
    """Fused propagate-and-aggregate: sum of A^l x for l = 0..num_layers.

    The operator is self-adjoint (A symmetric), so it is also the backward
    map for itself; the training engine relies on this.  ``num_layers == 0``
    returns ``x`` unchanged.
    """
    acc = x.copy()
    cur = x
    for _ in range(num_layers):
        cur = adj @ cur
        acc += cur
    return acc
