"""Graph containers, Laplacian spectrum, and the diffusion-time schedule.

File formats
------------
edge list   three plain-text columns ``i j weight`` (0-based, each undirected
            edge once); attributes: comma-separated N x D table, optional
            ``#``-prefixed header; labels: one integer per line.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

__all__ = [
    "AttributedGraph",
    "HeatTimeSchedule",
    "laplacian",
    "spectral_bounds",
    "heat_times",
    "read_edge_list",
    "write_edge_list",
    "read_attributes",
    "write_attributes",
    "read_labels",
    "write_labels",
]


class AttributedGraph:
    """Symmetric weighted adjacency plus an N x D attribute matrix."""

    def __init__(self, adjacency, attributes, labels=None):
        adj = sp.csr_matrix(adjacency, dtype=np.float64)
        if adj.shape[0] != adj.shape[1]:
            raise ValueError("adjacency must be square")
        if (adj != adj.T).nnz != 0:
            raise ValueError("adjacency must be exactly symmetric")
        if adj.diagonal().any():
            raise ValueError("adjacency must have a zero diagonal (no self-loops)")
        if adj.nnz and adj.data.min() < 0:
            raise ValueError("adjacency weights must be nonnegative")
        attributes = np.asarray(attributes, dtype=np.float64)
        if attributes.ndim != 2 or attributes.shape[0] != adj.shape[0]:
            raise ValueError(
                f"attribute rows ({attributes.shape[0] if attributes.ndim == 2 else '?'}) "
                f"must align with adjacency size ({adj.shape[0]})"
            )
        if not np.isfinite(attributes).all():
            raise ValueError("attributes must be finite")
        if labels is not None:
            labels = np.asarray(labels, dtype=np.int64)
            if labels.shape != (adj.shape[0],):
                raise ValueError("labels must have one entry per node")
        self.adjacency = adj
        self.attributes = attributes
        self.labels = labels

    @property
    def n(self) -> int:
        return self.adjacency.shape[0]

    @property
    def data_dim(self) -> int:
        return self.attributes.shape[1]

    def degrees(self) -> np.ndarray:
        return np.asarray(self.adjacency.sum(axis=1)).ravel()

    def edge_list(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Unique undirected edges as (i, j, w) arrays with i < j."""
        coo = sp.triu(self.adjacency, k=1).tocoo()
        return coo.row.astype(np.int64), coo.col.astype(np.int64), coo.data.copy()


def laplacian(graph: AttributedGraph, normalized: bool = False) -> np.ndarray:
    """Dense graph Laplacian, unnormalized ``Deg - A`` by default."""
    A = graph.adjacency.toarray()
    deg = A.sum(axis=1)
    L = np.diag(deg) - A
    if normalized:
        with np.errstate(divide="ignore"):
            inv_sqrt = np.where(deg > 0, 1.0 / np.sqrt(np.where(deg > 0, deg, 1.0)), 0.0)
        L = inv_sqrt[:, None] * L * inv_sqrt[None, :]
    return L


def spectral_bounds(L: np.ndarray) -> tuple[float, float]:
    """Smallest nonzero and largest eigenvalues of a symmetric PSD matrix.

    "Nonzero" means > 1e-9 * lambda_max, which skips the zero eigenvalue of
    every connected component.
    """
    L = np.asarray(L, dtype=np.float64)
    vals = np.linalg.eigvalsh(L)
    lam_max = float(vals[-1])
    if lam_max <= 0.0:
        raise ValueError("graph has no edges: no nonzero Laplacian eigenvalue")
    nonzero = vals[vals > 1e-9 * lam_max]
    if nonzero.size == 0:
        raise ValueError("graph has no edges: no nonzero Laplacian eigenvalue")
    return float(nonzero[0]), lam_max


@dataclass(frozen=True)
class HeatTimeSchedule:
    """k log-spaced diffusion times between 1/lambda_max and 4/lambda_2."""

    times: np.ndarray
    lambda2: float
    lambda_max: float

    def __len__(self) -> int:
        return len(self.times)


def heat_times(lambda2: float, lambda_max: float, k: int = 15) -> HeatTimeSchedule:
    if not (0.0 < lambda2 <= lambda_max):
        raise ValueError(
            f"need 0 < lambda2 <= lambda_max, got lambda2={lambda2}, lambda_max={lambda_max}"
        )
    if k < 2:
        raise ValueError("need at least two diffusion times")
    t_min = 1.0 / lambda_max
    t_max = 4.0 / lambda2
    times = np.exp(np.linspace(np.log(t_min), np.log(t_max), k))
    times[0] = t_min
    times[-1] = t_max
    return HeatTimeSchedule(times=times, lambda2=float(lambda2), lambda_max=float(lambda_max))


# File I/O -------------------------------------------------------------------

def write_edge_list(path, graph: AttributedGraph) -> None:
    i, j, w = graph.edge_list()
    with open(path, "w") as f:
        for a, b, weight in zip(i, j, w):
            f.write(f"{a} {b} {weight:.17g}\n")


def read_edge_list(path, n: int) -> sp.csr_matrix:
    rows, cols, vals = [], [], []
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 3:
                raise ValueError(f"{path}:{lineno}: expected 'i j weight'")
            i, j, w = int(parts[0]), int(parts[1]), float(parts[2])
            if not (0 <= i < n and 0 <= j < n):
                raise ValueError(f"{path}:{lineno}: node index out of range")
            rows += [i, j]
            cols += [j, i]
            vals += [w, w]
    return sp.csr_matrix((vals, (rows, cols)), shape=(n, n))


def write_attributes(path, X: np.ndarray, header: str | None = None) -> None:
    np.savetxt(path, np.atleast_2d(X), delimiter=",", fmt="%.17g",
               header=header or "", comments="# " if header else "# ")


def read_attributes(path) -> np.ndarray:
    return np.atleast_2d(np.loadtxt(path, delimiter=",", comments="#", dtype=np.float64))


def write_labels(path, labels: np.ndarray) -> None:
    np.savetxt(path, np.asarray(labels, dtype=np.int64), fmt="%d")


def read_labels(path) -> np.ndarray:
    return np.atleast_1d(np.loadtxt(path, dtype=np.int64, comments="#"))
