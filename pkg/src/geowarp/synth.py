"""Synthetic benchmark: a soft swiss-roll immersed in R^D, a thresholded
Gaussian similarity matrix, a localized score-shuffling perturbation, and a
Bernoulli graph sampler.

The graph generator draws each edge independently with probability equal to
the (perturbed) similarity score, so connectivity is determined by manifold
proximity except inside the perturbed group, where that link is broken while
the score distribution is preserved.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial.distance import pdist, squareform

from . import graphs
from .graphs import AttributedGraph

__all__ = [
    "NONLINEARITIES",
    "ExtraDimension",
    "ManifoldSpec",
    "SimilarityMatrix",
    "EmptyGraphError",
    "resolve_recipe",
    "sample_manifold",
    "similarity_matrix",
    "perturb",
    "sample_graph",
    "generate_bundle",
    "load_bundle",
    "GENERATOR_TAG",
]

GENERATOR_TAG = "bernoulli-similarity"

NONLINEARITIES = {
    "sin": np.sin,
    "cos": np.cos,
    "tanh": np.tanh,
    "gauss_bump": lambda x: np.exp(-0.1 * x**2),
    "rational": lambda x: x / (1.0 + x**2),
}


class EmptyGraphError(RuntimeError):
    """Sampled graph has no usable nodes."""


@dataclass(frozen=True)
class ExtraDimension:
    a: float
    b: float
    kind: str

    def __post_init__(self):
        if self.kind not in NONLINEARITIES:
            raise ValueError(f"unknown nonlinearity {self.kind!r}")


@dataclass(frozen=True)
class ManifoldSpec:
    """Soft swiss-roll sample: n points in [0, 2pi]^2 mapped to R^ambient_dim.

    The base immersion fills the first three coordinates; the recipe (one
    (a, b, nonlinearity) triple per remaining dimension) fills the rest with
    nonlinearity(a u + b v).  A None recipe is derived from the seed."""

    n: int = 500
    ambient_dim: int = 20
    r0: float = 1.0
    spread: float = 1.0
    twist: float = 1.0
    seed: int = 0
    recipe: tuple[ExtraDimension, ...] | None = None

    def __post_init__(self):
        if self.n < 1:
            raise ValueError("n must be positive")
        if self.ambient_dim < 3:
            raise ValueError("ambient_dim must be at least 3")
        if min(self.r0, self.spread, self.twist) <= 0:
            raise ValueError("r0, spread and twist must be positive")
        if self.recipe is not None and len(self.recipe) != self.ambient_dim - 3:
            raise ValueError(
                f"recipe must cover dimensions 4..{self.ambient_dim} "
                f"({self.ambient_dim - 3} entries)"
            )


def _spawn_rngs(seed: int, count: int) -> list[np.random.Generator]:
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(count)]


def resolve_recipe(spec: ManifoldSpec) -> tuple[ExtraDimension, ...]:
    if spec.recipe is not None:
        return spec.recipe
    rng = _spawn_rngs(spec.seed, 4)[0]
    kinds = sorted(NONLINEARITIES)
    out = []
    for _ in range(spec.ambient_dim - 3):
        a, b = rng.standard_normal(2)
        out.append(ExtraDimension(float(a), float(b), kinds[int(rng.integers(len(kinds)))]))
    return tuple(out)


def _softplus(x):
    return np.logaddexp(0.0, x)


def base_immersion(spec: ManifoldSpec, U: np.ndarray) -> np.ndarray:
    """(u, v) -> (r(u) cos(theta(v)), r(u) sin(theta(v)), v)."""
    u, v = U[:, 0], U[:, 1]
    r = spec.r0 + _softplus(spec.spread * u)
    theta = spec.twist * v
    return np.stack([r * np.cos(theta), r * np.sin(theta), v], axis=1)


def sample_manifold(spec: ManifoldSpec) -> tuple[np.ndarray, np.ndarray]:
    """Intrinsic coordinates U (n x 2, uniform on [0, 2pi]^2) and ambient
    attributes X (n x ambient_dim)."""
    _, rng_u, _, _ = _spawn_rngs(spec.seed, 4)
    U = rng_u.uniform(0.0, 2.0 * np.pi, size=(spec.n, 2))
    X = np.empty((spec.n, spec.ambient_dim))
    X[:, :3] = base_immersion(spec, U)
    for k, dim in enumerate(resolve_recipe(spec)):
        X[:, 3 + k] = NONLINEARITIES[dim.kind](dim.a * U[:, 0] + dim.b * U[:, 1])
    return U, X


@dataclass
class SimilarityMatrix:
    """Thresholded Gaussian similarity over intrinsic coordinates."""

    S: np.ndarray
    threshold: float = 0.2
    perturbed_group: np.ndarray | None = None

    def __post_init__(self):
        S = np.asarray(self.S, dtype=np.float64)
        if S.ndim != 2 or S.shape[0] != S.shape[1]:
            raise ValueError("similarity matrix must be square")
        if not np.array_equal(S, S.T):
            raise ValueError("similarity matrix must be symmetric")
        if np.diag(S).any():
            raise ValueError("similarity diagonal must be zero")
        if S.min() < 0 or S.max() > 1:
            raise ValueError("similarity values must lie in [0, 1]")
        self.S = S

    @property
    def n(self) -> int:
        return self.S.shape[0]


def similarity_matrix(U: np.ndarray, threshold: float = 0.2) -> SimilarityMatrix:
    """s_ab = exp(-2 ||z_a - z_b||^2 / median ||z_i - z_j||^2), zero diagonal,
    entries below the sparsity threshold set to 0."""
    U = np.atleast_2d(np.asarray(U, dtype=np.float64))
    sq = pdist(U, metric="sqeuclidean")
    med = np.median(sq)
    S = squareform(np.exp(-2.0 * sq / med))
    S[S < threshold] = 0.0
    np.fill_diagonal(S, 0.0)
    return SimilarityMatrix(S=S, threshold=threshold)


def perturb(
    sim: SimilarityMatrix, U: np.ndarray, group_size: int = 70, seed: int = 0
) -> SimilarityMatrix:
    """Shuffle the intra-group pairwise scores of a tight manifold
    neighborhood (a seeded center plus its nearest intrinsic neighbors),
    preserving the score multiset and leaving every other entry untouched."""
    if group_size > sim.n:
        raise ValueError("group_size cannot exceed the node count")
    rng = np.random.default_rng(seed)
    center = int(rng.integers(sim.n))
    dist = np.linalg.norm(U - U[center], axis=1)
    group = np.argsort(dist, kind="stable")[:group_size]
    group = np.sort(group)
    S = sim.S.copy()
    block = S[np.ix_(group, group)]
    iu, ju = np.triu_indices(group_size, k=1)
    vals = block[iu, ju]
    perm = rng.permutation(len(vals))
    block[iu, ju] = vals[perm]
    block[ju, iu] = vals[perm]
    S[np.ix_(group, group)] = block
    return SimilarityMatrix(S=S, threshold=sim.threshold, perturbed_group=group)


def sample_graph(
    sim: SimilarityMatrix,
    attributes: np.ndarray,
    seed: int = 0,
    labels: np.ndarray | None = None,
) -> tuple[AttributedGraph, np.ndarray]:
    """Independent Bernoulli(S_ab) edge draws, accepted edges weighted S_ab.

    Isolated nodes are dropped (with the index remap returned); ground-truth
    labels default to perturbed-group membership.
    """
    rng = np.random.default_rng(seed)
    n = sim.n
    attributes = np.asarray(attributes, dtype=np.float64)
    if attributes.shape[0] != n:
        raise ValueError("attribute rows must align with the similarity matrix")
    if labels is None:
        labels = np.zeros(n, dtype=np.int64)
        if sim.perturbed_group is not None:
            labels[sim.perturbed_group] = 1
    iu, ju = np.triu_indices(n, k=1)
    probs = sim.S[iu, ju]
    accept = rng.random(len(probs)) < probs
    A = np.zeros((n, n))
    A[iu[accept], ju[accept]] = probs[accept]
    A[ju[accept], iu[accept]] = probs[accept]
    degrees = (A != 0).sum(axis=1)
    kept = np.nonzero(degrees > 0)[0]
    if kept.size == 0:
        raise EmptyGraphError("every node is isolated; no graph to analyze")
    A = A[np.ix_(kept, kept)]
    graph = AttributedGraph(A, attributes[kept], labels=labels[kept])
    return graph, kept


def generate_bundle(
    spec: ManifoldSpec, outdir, group_size: int = 70, threshold: float = 0.2
) -> dict:
    """Run the full synthesis pipeline and write the dataset bundle.

    Files: attributes.csv, edges.txt, labels.txt, intrinsic.csv and
    manifest.json (spec echo + seeds + generator tag + dropped nodes).
    """
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    U, X = sample_manifold(spec)
    sim = similarity_matrix(U, threshold=threshold)
    # dedicated child seeds keep perturbation and graph draws decoupled
    seeds = np.random.SeedSequence(spec.seed).spawn(4)
    sim = perturb(sim, U, group_size=group_size,
                  seed=int(seeds[2].generate_state(1)[0]))
    graph, kept = sample_graph(sim, X, seed=int(seeds[3].generate_state(1)[0]))

    graphs.write_attributes(outdir / "attributes.csv", graph.attributes,
                            header=f"{graph.n} x {graph.data_dim}")
    graphs.write_edge_list(outdir / "edges.txt", graph)
    graphs.write_labels(outdir / "labels.txt", graph.labels)
    graphs.write_attributes(outdir / "intrinsic.csv", U[kept], header=f"{graph.n} x 2")

    recipe = resolve_recipe(spec)
    manifest = {
        "generator": GENERATOR_TAG,
        "spec": {
            "n": spec.n,
            "ambient_dim": spec.ambient_dim,
            "r0": spec.r0,
            "spread": spec.spread,
            "twist": spec.twist,
            "seed": spec.seed,
            "recipe": [{"a": d.a, "b": d.b, "kind": d.kind} for d in recipe],
        },
        "similarity_threshold": threshold,
        "group_size": group_size,
        "perturbed_group_original_indices": [int(i) for i in sim.perturbed_group],
        "kept_nodes": [int(i) for i in kept],
        "dropped_nodes": [int(i) for i in np.setdiff1d(np.arange(spec.n), kept)],
        "n_nodes": int(graph.n),
        "n_edges": int(graph.adjacency.nnz // 2),
        "files": {
            "attributes": "attributes.csv",
            "edges": "edges.txt",
            "labels": "labels.txt",
            "intrinsic": "intrinsic.csv",
        },
    }
    with open(outdir / "manifest.json", "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")
    return manifest


def load_bundle(bundle_dir) -> tuple[AttributedGraph, np.ndarray, dict]:
    """Read a dataset bundle back: (graph-with-labels, intrinsic coords, manifest)."""
    bundle_dir = Path(bundle_dir)
    with open(bundle_dir / "manifest.json") as f:
        manifest = json.load(f)
    X = graphs.read_attributes(bundle_dir / manifest["files"]["attributes"])
    labels = graphs.read_labels(bundle_dir / manifest["files"]["labels"])
    adj = graphs.read_edge_list(bundle_dir / manifest["files"]["edges"], X.shape[0])
    U = graphs.read_attributes(bundle_dir / manifest["files"]["intrinsic"])
    return AttributedGraph(adj, X, labels=labels), U, manifest
