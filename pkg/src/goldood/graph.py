"""Undirected graphs, GCN adjacency normalisations and energy propagation."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .errors import ContractError

UNLABELED = -1


def canonical_edges(edges, n):
    """Deduplicated ``(u, v)`` pairs with ``u < v``, self-loops dropped, sorted."""
    e = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    if e.size and (e.min() < 0 or e.max() >= n):
        raise ContractError(f"edge endpoint out of range for n={n}")
    e = e[e[:, 0] != e[:, 1]]
    e = np.sort(e, axis=1)
    if len(e) == 0:
        return np.zeros((0, 2), dtype=np.int64)
    return np.unique(e, axis=0)


@dataclass(frozen=True, eq=False)
class Graph:
    """Node features, undirected edges, labels and named node masks.

    ``labels`` uses ``-1`` for unlabeled nodes; masks are sorted index arrays.
    Build instances with :meth:`from_edges` so edges get canonicalised.
    """

    features: np.ndarray
    edges: np.ndarray
    labels: np.ndarray
    num_classes: int
    masks: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def from_edges(cls, features, edges, labels=None, num_classes=None, masks=None):
        features = np.array(features, dtype=np.float64)
        if features.ndim != 2:
            raise ContractError(f"features must be n x d, got shape {features.shape}")
        n = features.shape[0]
        if labels is None:
            labels = np.full(n, UNLABELED, dtype=np.int64)
        labels = np.array(labels, dtype=np.int64).reshape(-1)
        if labels.shape[0] != n:
            raise ContractError(f"{labels.shape[0]} labels for {n} nodes")
        if num_classes is None:
            num_classes = int(labels.max()) + 1 if (labels >= 0).any() else 0
        if (labels >= num_classes).any() or (labels < UNLABELED).any():
            raise ContractError(f"labels must lie in [-1, {num_classes})")
        clean_masks = {}
        for name, idx in (masks or {}).items():
            idx = np.unique(np.asarray(idx, dtype=np.int64))
            if idx.size and (idx[0] < 0 or idx[-1] >= n):
                raise ContractError(f"mask {name!r} has indices outside [0, {n})")
            clean_masks[name] = idx
        return cls(features, canonical_edges(edges, n), labels, int(num_classes), clean_masks)

    @property
    def n(self):
        return self.features.shape[0]

    @property
    def num_features(self):
        return self.features.shape[1]

    def replace(self, **changes):
        kw = dict(
            features=self.features,
            edges=self.edges,
            labels=self.labels,
            num_classes=self.num_classes,
            masks=self.masks,
        )
        kw.update(changes)
        return Graph.from_edges(**kw)

    def adjacency(self):
        """Symmetric 0/1 adjacency in CSR form, without self-loops."""
        n = self.n
        u, v = self.edges[:, 0], self.edges[:, 1]
        rows = np.concatenate([u, v])
        cols = np.concatenate([v, u])
        A = sp.csr_matrix((np.ones(rows.size), (rows, cols)), shape=(n, n))
        A.sort_indices()
        return A

    def degrees(self):
        d = np.zeros(self.n, dtype=np.int64)
        np.add.at(d, self.edges.reshape(-1), 1)
        return d

    def digest(self):
        h = hashlib.sha256()
        for arr in (self.features, self.edges, self.labels):
            h.update(repr(arr.shape).encode())
            h.update(np.ascontiguousarray(arr).tobytes())
        h.update(str(self.num_classes).encode())
        for name in sorted(self.masks):
            h.update(name.encode())
            h.update(self.masks[name].tobytes())
        return h.hexdigest()


def sym_normalize(g):
    """``D~^-1/2 (A + I) D~^-1/2`` with ``D~`` the degree matrix of ``A + I``."""
    A = g.adjacency() + sp.identity(g.n, format="csr")
    dinv = 1.0 / np.sqrt(np.asarray(A.sum(axis=1)).ravel())
    out = sp.csr_matrix(sp.diags(dinv) @ A @ sp.diags(dinv))
    out.sort_indices()
    return out


def row_normalize(g):
    """``D^-1 A`` without self-loops; rows of isolated nodes stay zero."""
    A = g.adjacency()
    deg = np.asarray(A.sum(axis=1)).ravel()
    inv = np.divide(1.0, deg, out=np.zeros_like(deg), where=deg > 0)
    out = sp.csr_matrix(sp.diags(inv) @ A)
    out.sort_indices()
    return out


def propagation_matrix(g, alpha):
    """One step of energy propagation as a sparse linear map.

    ``alpha * I + (1 - alpha) * P`` where ``P`` is :func:`row_normalize` with
    isolated nodes mapped to themselves, so their energy is a fixed point.
    """
    if not 0.0 <= alpha <= 1.0:
        raise ContractError(f"alpha must lie in [0, 1], got {alpha}")
    P = row_normalize(g)
    isolated = (g.degrees() == 0).astype(np.float64)
    M = alpha * sp.identity(g.n, format="csr") + (1.0 - alpha) * (P + sp.diags(isolated))
    M = sp.csr_matrix(M)
    M.sort_indices()
    return M


def propagate_energy(e, g, alpha, k):
    """Apply ``e <- alpha e + (1 - alpha) D^-1 A e`` ``k`` times."""
    if not 0.0 <= alpha <= 1.0:
        raise ContractError(f"alpha must lie in [0, 1], got {alpha}")
    if k < 0:
        raise ContractError(f"k must be >= 0, got {k}")
    e = np.asarray(e, dtype=np.float64)
    column = e.ndim == 2
    e = e.reshape(-1)
    if e.shape[0] != g.n:
        raise ContractError(f"energy vector has length {e.shape[0]}, graph has {g.n} nodes")
    if k == 0 or alpha == 1.0:
        out = e.copy()
    else:
        M = propagation_matrix(g, alpha)
        out = e
        for _ in range(k):
            out = M @ out
    return out[:, None] if column else out
