"""Latent-space Riemannian machinery.

Pullback metric tensors from decoder Jacobians, a cached metric field over a
bounded latent grid, grid geodesics via shortest paths with gradient
decoupling (the path is found without gradients; the returned length is the
differentiable sum of edge weights along it), a straight-segment estimator
integrating the metric along the chord, and Gaussian curvature.

A "decoder" here is anything exposing ``jacobian_batch(Z) -> (N, D, d)``;
taped field construction additionally needs ``jacobian_on_tape``.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import dijkstra as _dijkstra

from . import autodiff as ad
from .autodiff import Tensor

__all__ = [
    "GeodesicResult",
    "MetricField",
    "pullback_metric",
    "metric_batch",
    "metric_batch_tape",
    "bounds_from_points",
    "build_metric_field",
    "edge_weight",
    "geodesic_grid",
    "grid_pair_distances",
    "grid_pair_distances_tape",
    "geodesic_linear",
    "linear_distances",
    "linear_distances_tape",
    "gaussian_curvature",
    "curvature_grid",
    "pairwise_distances",
]

# additive guard under square roots: keeps gradients finite if a quadratic
# form underflows to ~0 without perturbing any honest length
_SQRT_GUARD = 1e-30

# eigenvalue floor for cached tensors, relative to the tensor trace
_PSD_FLOOR_SCALE = 1e-12


def metric_batch(decoder_mu, decoder_sigma, Z: np.ndarray) -> np.ndarray:
    """Pullback tensors Jmu^T Jmu + Jsigma^T Jsigma at each row of Z."""
    Z = np.atleast_2d(np.asarray(Z, dtype=np.float64))
    Jm = decoder_mu.jacobian_batch(Z)
    Js = decoder_sigma.jacobian_batch(Z)
    G = np.einsum("nij,nik->njk", Jm, Jm) + np.einsum("nij,nik->njk", Js, Js)
    return 0.5 * (G + G.transpose(0, 2, 1))


def metric_batch_tape(decoder_mu, decoder_sigma, Z: np.ndarray) -> Tensor:
    """Taped version of :func:`metric_batch`; gradients flow to decoder params."""
    Jm = decoder_mu.jacobian_on_tape(Z)
    Js = decoder_sigma.jacobian_on_tape(Z)
    G = ad.matmul(ad.swapaxes(Jm, -1, -2), Jm) + ad.matmul(ad.swapaxes(Js, -1, -2), Js)
    return (G + ad.swapaxes(G, -1, -2)) * 0.5


def pullback_metric(decoder_mu, decoder_sigma, z: np.ndarray) -> np.ndarray:
    """Metric tensor at a single latent point; symmetric PSD by construction."""
    z = np.asarray(z, dtype=np.float64)
    return metric_batch(decoder_mu, decoder_sigma, z[None, :])[0]


def _floor_psd(G: np.ndarray) -> np.ndarray:
    """Diagonal shift lifting each tensor's smallest eigenvalue to the floor."""
    eigs = np.linalg.eigvalsh(G)
    trace = np.trace(G, axis1=-2, axis2=-1)
    floor = _PSD_FLOOR_SCALE * trace
    deficit = np.maximum(floor - eigs[..., 0], 0.0)
    return deficit


@dataclass(frozen=True)
class GeodesicResult:
    """A single estimated geodesic.

    ``distance`` is recomputable from ``path``: for the grid estimator it is
    the sum of edge weights along the node path; for the segment estimator the
    trapezoid sum over the sample points.  ``differentiable`` says whether
    this particular evaluation carries gradients (a taped field / taped batch).
    """

    distance: float
    path: np.ndarray
    differentiable: bool
    snapped: tuple[np.ndarray, np.ndarray] | None = None


def bounds_from_points(Z: np.ndarray, margin: float = 0.1) -> np.ndarray:
    """Bounding box of the rows of Z, expanded by ``margin`` x width per side."""
    Z = np.atleast_2d(np.asarray(Z, dtype=np.float64))
    lo = Z.min(axis=0)
    hi = Z.max(axis=0)
    width = np.maximum(hi - lo, 1e-9)
    return np.stack([lo - margin * width, hi + margin * width], axis=1)


def _offsets(d: int, connectivity: str) -> np.ndarray:
    if connectivity == "axis":
        return np.eye(d, dtype=np.int64)
    if connectivity == "axis+diagonal":
        grids = np.stack(
            np.meshgrid(*([np.array([-1, 0, 1])] * d), indexing="ij"), axis=-1
        ).reshape(-1, d)
        keep = []
        for o in grids:
            nz = np.nonzero(o)[0]
            if nz.size and o[nz[0]] > 0:  # one representative per +-pair
                keep.append(o)
        return np.array(keep, dtype=np.int64)
    raise ValueError(f"unknown connectivity {connectivity!r}")


@dataclass
class MetricField:
    """Metric tensors cached on a uniform grid over a bounded latent domain.

    Immutable once built; rebuild after every decoder update.  ``resolution``
    is the cell count per axis, so the grid has (resolution+1)^d nodes.
    """

    bounds: np.ndarray  # (d, 2)
    resolution: int
    connectivity: str
    coords: np.ndarray  # (M, d)
    tensors: np.ndarray  # (M, d, d)
    edges: np.ndarray  # (E, 2) node ids, i < j
    edge_weights: np.ndarray  # (E,)
    tensors_node: Tensor | None = None
    edge_weights_node: Tensor | None = None
    _edge_ids: dict = dc_field(default_factory=dict, repr=False)
    _csgraph: sp.csr_matrix | None = dc_field(default=None, repr=False)

    @property
    def dim(self) -> int:
        return self.bounds.shape[0]

    @property
    def shape(self) -> tuple[int, ...]:
        return (self.resolution + 1,) * self.dim

    @property
    def spacing(self) -> np.ndarray:
        return (self.bounds[:, 1] - self.bounds[:, 0]) / self.resolution

    @property
    def n_nodes(self) -> int:
        return self.coords.shape[0]

    @property
    def differentiable(self) -> bool:
        return self.edge_weights_node is not None

    def snap(self, z: np.ndarray) -> int:
        """Nearest grid node for an in-bounds query point."""
        z = np.asarray(z, dtype=np.float64)
        if z.shape != (self.dim,):
            raise ValueError(f"query must have dimension {self.dim}")
        if np.any(z < self.bounds[:, 0]) or np.any(z > self.bounds[:, 1]):
            raise ValueError(f"query point {z} is outside the field bounds")
        k = np.rint((z - self.bounds[:, 0]) / self.spacing).astype(np.int64)
        k = np.clip(k, 0, self.resolution)
        return int(np.ravel_multi_index(tuple(k), self.shape))

    def snap_many(self, Z: np.ndarray) -> np.ndarray:
        return np.array([self.snap(z) for z in np.atleast_2d(Z)], dtype=np.int64)

    def edge_id(self, i: int, j: int) -> int:
        key = (i, j) if i < j else (j, i)
        eid = self._edge_ids.get(key)
        if eid is None:
            raise ValueError(f"grid nodes {i} and {j} are not neighbors")
        return eid

    def csgraph(self) -> sp.csr_matrix:
        if self._csgraph is None:
            i, j = self.edges[:, 0], self.edges[:, 1]
            w = self.edge_weights
            self._csgraph = sp.csr_matrix(
                (np.concatenate([w, w]), (np.concatenate([i, j]), np.concatenate([j, i]))),
                shape=(self.n_nodes, self.n_nodes),
            )
        return self._csgraph


def build_metric_field(
    decoder_mu,
    decoder_sigma,
    bounds,
    resolution: int = 64,
    connectivity: str = "axis+diagonal",
    with_gradients: bool = False,
) -> MetricField:
    """Cache pullback tensors at every grid node and weight the grid edges
    with the midpoint rule w_ij = sqrt(v^T (g_i+g_j)/2 v), v = x_j - x_i."""
    bounds = np.asarray(bounds, dtype=np.float64)
    if bounds.ndim != 2 or bounds.shape[1] != 2:
        raise ValueError("bounds must be a (d, 2) array")
    if np.any(bounds[:, 0] >= bounds[:, 1]):
        raise ValueError("bounds must be strictly ordered per axis")
    d = bounds.shape[0]
    if d > 3:
        raise ValueError(
            f"grid fields support at most 3 latent dimensions (got {d}); "
            "use the linear estimator for higher-dimensional latents"
        )
    if resolution < 2:
        raise ValueError("resolution must be at least 2 cells per axis")

    shape = (resolution + 1,) * d
    multi = np.indices(shape).reshape(d, -1).T  # (M, d), row-major
    spacing = (bounds[:, 1] - bounds[:, 0]) / resolution
    coords = bounds[:, 0] + multi * spacing

    offs = _offsets(d, connectivity)
    src_list, dst_list = [], []
    for o in offs:
        nbr = multi + o
        ok = np.all((nbr >= 0) & (nbr <= resolution), axis=1)
        src = np.nonzero(ok)[0]
        dst = np.ravel_multi_index(tuple(nbr[ok].T), shape)
        src_list.append(src)
        dst_list.append(dst)
    ei = np.concatenate(src_list)
    ej = np.concatenate(dst_list)
    swap = ei > ej
    ei[swap], ej[swap] = ej[swap], ei[swap].copy()
    edges = np.stack([ei, ej], axis=1)

    vdiff = coords[ej] - coords[ei]

    tensors_node = None
    weights_node = None
    if with_gradients:
        G_node = metric_batch_tape(decoder_mu, decoder_sigma, coords)
        deficit = _floor_psd(G_node.data)
        if np.any(deficit > 0):
            shift = deficit[:, None, None] * np.eye(d)
            G_node = G_node + ad.constant(shift)
        tensors = G_node.data
        mid = (ad.gather(G_node, ei) + ad.gather(G_node, ej)) * 0.5
        q = ad.reshape(
            ad.matmul(
                ad.constant(vdiff[:, None, :]),
                ad.matmul(mid, ad.constant(vdiff[:, :, None])),
            ),
            (len(edges),),
        )
        weights_node = ad.sqrt(ad.relu(q) + _SQRT_GUARD)
        weights = weights_node.data
        tensors_node = G_node
    else:
        G = metric_batch(decoder_mu, decoder_sigma, coords)
        deficit = _floor_psd(G)
        if np.any(deficit > 0):
            G = G + deficit[:, None, None] * np.eye(d)
        tensors = G
        mid = 0.5 * (G[ei] + G[ej])
        q = np.einsum("eij,ei,ej->e", mid, vdiff, vdiff)
        weights = np.sqrt(np.maximum(q, 0.0) + _SQRT_GUARD)

    out = MetricField(
        bounds=bounds,
        resolution=resolution,
        connectivity=connectivity,
        coords=coords,
        tensors=tensors,
        edges=edges,
        edge_weights=weights,
        tensors_node=tensors_node,
        edge_weights_node=weights_node,
    )
    out._edge_ids = {(int(a), int(b)): k for k, (a, b) in enumerate(edges)}
    return out


def edge_weight(field: MetricField, i: int, j: int) -> float:
    """Midpoint-rule weight of a grid edge; rejects non-neighbors."""
    return float(field.edge_weights[field.edge_id(i, j)])


def _walk_path(pred_row: np.ndarray, source: int, target: int) -> list[int]:
    path = [target]
    node = target
    while node != source:
        node = int(pred_row[node])
        if node < 0:
            raise RuntimeError("grid graph unexpectedly disconnected")
        path.append(node)
    path.reverse()
    return path


def geodesic_grid(field: MetricField, u: np.ndarray, v: np.ndarray) -> GeodesicResult:
    """Shortest grid path between the snapped endpoints.

    The path is selected without gradients; the distance is the sum of the
    (differentiable, when the field is taped) edge weights along it.
    """
    su = field.snap(u)
    sv = field.snap(v)
    if su == sv:
        return GeodesicResult(
            0.0,
            np.array([su]),
            field.differentiable,
            (field.coords[su].copy(), field.coords[sv].copy()),
        )
    _, pred = _dijkstra(
        field.csgraph(), directed=True, indices=su, return_predecessors=True
    )
    nodes = _walk_path(pred, su, sv)
    eids = [field.edge_id(a, b) for a, b in zip(nodes[:-1], nodes[1:])]
    distance = float(field.edge_weights[eids].sum())
    return GeodesicResult(
        distance,
        np.array(nodes, dtype=np.int64),
        field.differentiable,
        (field.coords[su].copy(), field.coords[sv].copy()),
    )


def grid_pair_distances(
    field: MetricField, src_nodes: np.ndarray, dst_nodes: np.ndarray
) -> np.ndarray:
    """Plain distances between node-id pairs (one Dijkstra per unique source)."""
    src_nodes = np.asarray(src_nodes, dtype=np.int64)
    dst_nodes = np.asarray(dst_nodes, dtype=np.int64)
    unique_src, inv = np.unique(src_nodes, return_inverse=True)
    dist = _dijkstra(field.csgraph(), directed=True, indices=unique_src)
    return dist[inv, dst_nodes]


def grid_pair_distances_tape(
    field: MetricField, src_nodes: np.ndarray, dst_nodes: np.ndarray
) -> tuple[Tensor, list[np.ndarray]]:
    """Differentiable path-weight sums for a batch of node-id pairs.

    Paths are fixed by Dijkstra on current weights (no gradients); the
    returned tensor sums taped edge weights along each path.
    """
    if field.edge_weights_node is None:
        raise ValueError("field was built without gradients")
    src_nodes = np.asarray(src_nodes, dtype=np.int64)
    dst_nodes = np.asarray(dst_nodes, dtype=np.int64)
    n_pairs = len(src_nodes)
    unique_src, inv = np.unique(src_nodes, return_inverse=True)
    _, pred = _dijkstra(
        field.csgraph(), directed=True, indices=unique_src, return_predecessors=True
    )
    pred = np.atleast_2d(pred)
    edge_ids: list[int] = []
    seg: list[int] = []
    paths: list[np.ndarray] = []
    for p in range(n_pairs):
        s, t = int(src_nodes[p]), int(dst_nodes[p])
        if s == t:
            paths.append(np.array([s], dtype=np.int64))
            continue
        nodes = _walk_path(pred[inv[p]], s, t)
        paths.append(np.array(nodes, dtype=np.int64))
        for a, b in zip(nodes[:-1], nodes[1:]):
            edge_ids.append(field.edge_id(a, b))
            seg.append(p)
    if edge_ids:
        picked = ad.gather(field.edge_weights_node, np.array(edge_ids, dtype=np.intp))
        dists = ad.segment_sum(picked, np.array(seg, dtype=np.intp), n_pairs)
    else:
        dists = ad.constant(np.zeros(n_pairs))
    return dists, paths


def _trapezoid_weights(steps: int) -> np.ndarray:
    w = np.ones(steps)
    w[0] = w[-1] = 0.5
    return w / (steps - 1)


def geodesic_linear(
    decoder_mu, decoder_sigma, u: np.ndarray, v: np.ndarray, steps: int = 32
) -> GeodesicResult:
    """Length of the straight latent segment under the pullback metric
    (trapezoid rule over ``steps`` sample points); upper-bounds the geodesic
    up to quadrature error."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if steps < 2:
        raise ValueError("need at least two sample points")
    ts = np.linspace(0.0, 1.0, steps)
    pts = u[None, :] + ts[:, None] * (v - u)[None, :]
    if np.array_equal(u, v):
        return GeodesicResult(0.0, pts, False, None)
    G = metric_batch(decoder_mu, decoder_sigma, pts)
    q = np.einsum("tij,i,j->t", G, v - u, v - u)
    speed = np.sqrt(np.maximum(q, 0.0) + _SQRT_GUARD)
    distance = float(_trapezoid_weights(steps) @ speed)
    return GeodesicResult(distance, pts, False, None)


def linear_distances(
    decoder_mu, decoder_sigma, U: np.ndarray, V: np.ndarray, steps: int = 32
) -> np.ndarray:
    """Batched straight-segment distances for pairs (U[k], V[k])."""
    U = np.atleast_2d(np.asarray(U, dtype=np.float64))
    V = np.atleast_2d(np.asarray(V, dtype=np.float64))
    n, d = U.shape
    ts = np.linspace(0.0, 1.0, steps)
    diff = V - U
    pts = (U[:, None, :] + ts[None, :, None] * diff[:, None, :]).reshape(n * steps, d)
    G = metric_batch(decoder_mu, decoder_sigma, pts).reshape(n, steps, d, d)
    q = np.einsum("ntij,ni,nj->nt", G, diff, diff)
    speed = np.sqrt(np.maximum(q, 0.0) + _SQRT_GUARD)
    out = speed @ _trapezoid_weights(steps)
    out[np.all(diff == 0.0, axis=1)] = 0.0
    return out


def linear_distances_tape(
    decoder_mu, decoder_sigma, U: np.ndarray, V: np.ndarray, steps: int = 32
) -> Tensor:
    """Taped batched straight-segment distances (gradients to decoders)."""
    U = np.atleast_2d(np.asarray(U, dtype=np.float64))
    V = np.atleast_2d(np.asarray(V, dtype=np.float64))
    n, d = U.shape
    ts = np.linspace(0.0, 1.0, steps)
    diff = V - U
    pts = (U[:, None, :] + ts[None, :, None] * diff[:, None, :]).reshape(n * steps, d)
    G = metric_batch_tape(decoder_mu, decoder_sigma, pts)  # (n*steps, d, d)
    vrow = ad.constant(np.repeat(diff, steps, axis=0)[:, None, :])
    vcol = ad.constant(np.repeat(diff, steps, axis=0)[:, :, None])
    q = ad.reshape(ad.matmul(vrow, ad.matmul(G, vcol)), (n, steps))
    speed = ad.sqrt(ad.relu(q) + _SQRT_GUARD)
    return ad.tsum(speed * ad.constant(_trapezoid_weights(steps)), axis=1)


# Curvature --------------------------------------------------------------------

def _brioschi_interior(E, F, G, du, dv):
    """Gaussian curvature on interior nodes of a 2-d metric grid via the
    Brioschi formula with central finite differences."""
    def d_u(A):
        return (A[2:, 1:-1] - A[:-2, 1:-1]) / (2.0 * du)

    def d_v(A):
        return (A[1:-1, 2:] - A[1:-1, :-2]) / (2.0 * dv)

    def d_uu(A):
        return (A[2:, 1:-1] - 2.0 * A[1:-1, 1:-1] + A[:-2, 1:-1]) / (du * du)

    def d_vv(A):
        return (A[1:-1, 2:] - 2.0 * A[1:-1, 1:-1] + A[1:-1, :-2]) / (dv * dv)

    def d_uv(A):
        return (A[2:, 2:] - A[2:, :-2] - A[:-2, 2:] + A[:-2, :-2]) / (4.0 * du * dv)

    Ei, Fi, Gi = E[1:-1, 1:-1], F[1:-1, 1:-1], G[1:-1, 1:-1]
    Eu, Ev, Evv = d_u(E), d_v(E), d_vv(E)
    Gu, Gv, Guu = d_u(G), d_v(G), d_uu(G)
    Fu, Fv, Fuv = d_u(F), d_v(F), d_uv(F)

    def det3(a, b, c, d, e, f, g, h, i):
        return a * (e * i - f * h) - b * (d * i - f * g) + c * (d * h - e * g)

    m1 = det3(
        -0.5 * Evv + Fuv - 0.5 * Guu, 0.5 * Eu, Fu - 0.5 * Ev,
        Fv - 0.5 * Gu, Ei, Fi,
        0.5 * Gv, Fi, Gi,
    )
    m2 = det3(
        np.zeros_like(Ei), 0.5 * Ev, 0.5 * Gu,
        0.5 * Ev, Ei, Fi,
        0.5 * Gu, Fi, Gi,
    )
    denom = (Ei * Gi - Fi * Fi) ** 2
    return (m1 - m2) / denom


def curvature_grid(field: MetricField) -> np.ndarray:
    """Gaussian curvature at every grid node (NaN on the boundary); d=2 only."""
    if field.dim != 2:
        raise ValueError("Gaussian curvature is defined here for 2-d fields only")
    shape = field.shape
    E = field.tensors[:, 0, 0].reshape(shape)
    F = field.tensors[:, 0, 1].reshape(shape)
    G = field.tensors[:, 1, 1].reshape(shape)
    du, dv = field.spacing
    out = np.full(shape, np.nan)
    out[1:-1, 1:-1] = _brioschi_interior(E, F, G, du, dv)
    return out


def gaussian_curvature(field: MetricField, node) -> float:
    """Curvature at one interior grid node (flat id or (i, j) multi-index)."""
    if field.dim != 2:
        raise ValueError("Gaussian curvature is defined here for 2-d fields only")
    shape = field.shape
    if np.isscalar(node) or isinstance(node, (int, np.integer)):
        i, j = np.unravel_index(int(node), shape)
    else:
        i, j = (int(node[0]), int(node[1]))
    if not (1 <= i <= shape[0] - 2 and 1 <= j <= shape[1] - 2):
        raise ValueError(f"node ({i}, {j}) is on the grid boundary")
    E = field.tensors[:, 0, 0].reshape(shape)
    F = field.tensors[:, 0, 1].reshape(shape)
    G = field.tensors[:, 1, 1].reshape(shape)
    du, dv = field.spacing
    window = slice(i - 1, i + 2), slice(j - 1, j + 2)
    k = _brioschi_interior(E[window], F[window], G[window], du, dv)
    return float(k[0, 0])


# Batched all-pairs ------------------------------------------------------------

def pairwise_distances(
    points: np.ndarray,
    estimator: str,
    field: MetricField | None = None,
    decoder_mu=None,
    decoder_sigma=None,
    steps: int = 32,
    chunk_pairs: int = 4096,
) -> np.ndarray:
    """Symmetric zero-diagonal distance matrix over the given points."""
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    n = points.shape[0]
    out = np.zeros((n, n))
    iu, ju = np.triu_indices(n, k=1)
    if estimator == "grid":
        if field is None:
            raise ValueError("grid estimator needs a metric field")
        nodes = field.snap_many(points)
        unique_nodes, inv = np.unique(nodes, return_inverse=True)
        dist = _dijkstra(field.csgraph(), directed=True, indices=unique_nodes)
        vals = dist[inv[iu], nodes[ju]]
    elif estimator == "linear":
        if decoder_mu is None or decoder_sigma is None:
            raise ValueError("linear estimator needs the decoder pair")
        vals = np.empty(len(iu))
        for lo in range(0, len(iu), chunk_pairs):
            hi = min(lo + chunk_pairs, len(iu))
            vals[lo:hi] = linear_distances(
                decoder_mu, decoder_sigma, points[iu[lo:hi]], points[ju[lo:hi]], steps
            )
    else:
        raise ValueError(f"unknown estimator {estimator!r}; use 'grid' or 'linear'")
    out[iu, ju] = vals
    out[ju, iu] = vals
    return out
