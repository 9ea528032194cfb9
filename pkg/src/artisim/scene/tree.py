"""Directed-tree extraction from the pairwise joint-type matrix."""

from __future__ import annotations

import numpy as np

from artisim.scene.model import ModelError, TreeStructure


def softmax_types(logits: np.ndarray) -> np.ndarray:
    z = np.asarray(logits, dtype=float)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def edge_weights(J: np.ndarray) -> np.ndarray:
    """W[u, v] = 1 - P_None(u, v) (0-based), diagonal masked to -inf."""
    J = np.asarray(J, dtype=float)
    if J.ndim != 3 or J.shape[0] != J.shape[1] or J.shape[2] != 4:
        raise ModelError(f"joint-type logits must be K x K x 4, got {J.shape}")
    W = 1.0 - softmax_types(J)[..., 0]
    np.fill_diagonal(W, -np.inf)
    return W


def greedy_tree(J: np.ndarray) -> TreeStructure:
    """Prim-style maximum-weight arborescence growth.

    The root is the node with the largest total outgoing weight.  Each step
    attaches the not-yet-covered node reachable by the heaviest edge out of the
    current tree.  Ties go to the smaller child id, then the smaller parent id.
    Link ids in the result are 1-based.
    """
    W = edge_weights(J)
    K = W.shape[0]
    if K < 2:
        raise ModelError(f"greedy_tree needs K >= 2, got {K}")
    out_weight = np.where(np.isfinite(W), W, 0.0).sum(axis=1)
    root = int(np.argmax(out_weight))  # argmax keeps the first (smallest) index on ties
    in_tree = [root]
    edges = []
    while len(in_tree) < K:
        best = None
        for v in range(K):
            if v in in_tree:
                continue
            for u in in_tree:
                key = (-W[u, v], v, u)
                if best is None or key < best:
                    best = key
        _, v, u = best
        edges.append((u + 1, v + 1))
        in_tree.append(v)
    return TreeStructure(tuple(edges), root + 1)
