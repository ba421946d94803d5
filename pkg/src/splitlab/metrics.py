"""Distribution-quality metrics over embedding batches.

Two forces are measured: spread of the marginal embedding distribution
against a uniform spherical prior (sliced 1-D transport over random
projections, closed form via order statistics), and temporal smoothness as
the mean weighted squared difference over a k-nearest-in-time graph (the
graph Laplacian quadratic form). Both come with analytic gradients so the
server objective can optimize them directly. The theorem harnesses at the
bottom turn the two supporting bounds into numerical experiments.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import (ConfigurationError, DegenerateGraphError,
                     DisconnectedGraphError)
from .numerics import log_sum_exp, make_rng


@dataclass(frozen=True)
class ProjectionSet:
    vectors: np.ndarray  # (M, d), unit rows
    seed: int

    @property
    def count(self) -> int:
        return self.vectors.shape[0]


def make_projections(seed: int, num: int, dim: int) -> ProjectionSet:
    rng = make_rng(seed)
    g = rng.standard_normal((num, dim))
    g /= np.linalg.norm(g, axis=1, keepdims=True)
    return ProjectionSet(g, seed)


def sample_sphere_prior(rng: np.random.Generator, n: int, dim: int) -> np.ndarray:
    g = rng.standard_normal((n, dim))
    g /= np.linalg.norm(g, axis=1, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# Sliced transport
# ---------------------------------------------------------------------------


def sliced_wasserstein(batch_a, batch_b, projections: ProjectionSet) -> float:
    """Mean over projections of the mean squared gap between sorted 1-D
    projections. Exact for equal-size empirical measures: optimal transport
    in 1-D pairs order statistics."""
    a = np.asarray(batch_a, dtype=np.float64)
    b = np.asarray(batch_b, dtype=np.float64)
    if a.shape[0] != b.shape[0]:
        raise ConfigurationError("batches must have equal sample counts")
    if a.shape[0] < 2:
        raise ConfigurationError("need at least 2 samples per batch")
    pa = np.sort(a @ projections.vectors.T, axis=0)
    pb = np.sort(b @ projections.vectors.T, axis=0)
    return float(np.mean((pa - pb) ** 2))


def swd_gradient(batch_a, prior_samples, projections: ProjectionSet) -> np.ndarray:
    """Gradient of sliced_wasserstein w.r.t. batch_a rows.

    The sort permutation is held fixed (subgradient at ties, broken by stable
    index order); gradient of each squared gap flows back through the
    projection onto the matched sample.
    """
    a = np.asarray(batch_a, dtype=np.float64)
    b = np.asarray(prior_samples, dtype=np.float64)
    if a.shape[0] != b.shape[0]:
        raise ConfigurationError("batches must have equal sample counts")
    n, _ = a.shape
    omega = projections.vectors
    m = omega.shape[0]
    pa = a @ omega.T            # (n, M)
    pb = b @ omega.T
    grad = np.zeros_like(a)
    coef = 2.0 / (m * n)
    for j in range(m):
        order_a = np.argsort(pa[:, j], kind="stable")
        sorted_b = np.sort(pb[:, j], kind="stable")
        diff = pa[order_a, j] - sorted_b
        grad[order_a] += coef * diff[:, None] * omega[j][None, :]
    return grad


# ---------------------------------------------------------------------------
# Temporal graph and Dirichlet energy
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class EmbeddingBatch:
    timestamps: np.ndarray   # (n,) ms, non-decreasing
    vectors: np.ndarray      # (n, d) unit rows

    def __post_init__(self):
        if np.any(np.diff(self.timestamps) < 0):
            raise ConfigurationError("timestamps must be non-decreasing")


@dataclass
class TemporalGraph:
    num_nodes: int
    edges: list              # [(i, j)] with i < j, each undirected edge once
    weights: np.ndarray      # (|E|,) positive

    @property
    def edge_count(self) -> int:
        return len(self.edges)

    def adjacency(self) -> np.ndarray:
        w = np.zeros((self.num_nodes, self.num_nodes))
        for (i, j), wij in zip(self.edges, self.weights):
            w[i, j] = wij
            w[j, i] = wij
        return w

    def laplacian(self) -> np.ndarray:
        w = self.adjacency()
        return np.diag(np.sum(w, axis=1)) - w

    def neighbors(self, i: int):
        out = []
        for (a, b), wij in zip(self.edges, self.weights):
            if a == i:
                out.append((b, wij))
            elif b == i:
                out.append((a, wij))
        return out


def build_knn_temporal_graph(batch: EmbeddingBatch, k: int, window_ms: float) -> TemporalGraph:
    """Link each node to its k nearest-in-time neighbors within window_ms,
    then symmetrize; unit weights. Ties in |dt| break by index order."""
    ts = np.asarray(batch.timestamps, dtype=np.float64)
    n = ts.shape[0]
    if n < 2:
        raise DegenerateGraphError("need at least 2 nodes")
    if k < 1:
        raise ConfigurationError("k must be >= 1")
    edge_set = set()
    for i in range(n):
        dt = np.abs(ts - ts[i])
        cand = [j for j in range(n) if j != i and dt[j] <= window_ms]
        cand.sort(key=lambda j: (dt[j], j))
        for j in cand[:k]:
            edge_set.add((min(i, j), max(i, j)))
    edges = sorted(edge_set)
    return TemporalGraph(n, edges, np.ones(len(edges)))


def dirichlet_energy(graph: TemporalGraph, embeddings) -> float:
    """(1/|E|) sum over edges of w_ij ||z_i - z_j||^2."""
    z = np.asarray(embeddings, dtype=np.float64)
    if z.shape[0] != graph.num_nodes:
        raise ConfigurationError("embedding count must match node count")
    if graph.edge_count == 0:
        return 0.0
    total = 0.0
    for (i, j), w in zip(graph.edges, graph.weights):
        d = z[i] - z[j]
        total += w * float(d @ d)
    return total / graph.edge_count


def dirichlet_energy_trace(graph: TemporalGraph, embeddings) -> float:
    """Same quantity via (1/|E|) Tr(Z^T L Z); cross-check route."""
    z = np.asarray(embeddings, dtype=np.float64)
    if graph.edge_count == 0:
        return 0.0
    lap = graph.laplacian()
    return float(np.trace(z.T @ lap @ z)) / graph.edge_count


def dirichlet_gradient(graph: TemporalGraph, embeddings) -> np.ndarray:
    """(2/|E|) L Z -- rows sum to zero because constants are in the null space."""
    z = np.asarray(embeddings, dtype=np.float64)
    if z.shape[0] != graph.num_nodes:
        raise ConfigurationError("embedding count must match node count")
    if graph.edge_count == 0:
        return np.zeros_like(z)
    return (2.0 / graph.edge_count) * (graph.laplacian() @ z)


def spectral_gap(graph: TemporalGraph) -> float:
    """Second-smallest Laplacian eigenvalue; zero iff disconnected."""
    if graph.num_nodes < 2:
        raise DegenerateGraphError("spectral gap needs at least 2 nodes")
    w = np.linalg.eigvalsh(graph.laplacian())
    lam2 = float(w[1])
    return lam2 if lam2 > 1e-8 else max(lam2, 0.0)


def connected_components(graph: TemporalGraph) -> int:
    seen = [False] * graph.num_nodes
    adj = [[] for _ in range(graph.num_nodes)]
    for (i, j) in graph.edges:
        adj[i].append(j)
        adj[j].append(i)
    comps = 0
    for s in range(graph.num_nodes):
        if seen[s]:
            continue
        comps += 1
        stack = [s]
        seen[s] = True
        while stack:
            u = stack.pop()
            for v in adj[u]:
                if not seen[v]:
                    seen[v] = True
                    stack.append(v)
    return comps


def reconstruct_missing(graph: TemporalGraph, embeddings, t_star: int) -> np.ndarray:
    """Weighted neighbor average: (1/d_t*) sum_j W_{t*j} z_j."""
    z = np.asarray(embeddings, dtype=np.float64)
    nbrs = graph.neighbors(t_star)
    if not nbrs:
        raise DegenerateGraphError(f"node {t_star} has no neighbors")
    total = np.zeros(z.shape[1])
    deg = 0.0
    for j, w in nbrs:
        total += w * z[j]
        deg += w
    return total / deg


def theorem2_bound(alpha: float, edge_count: int, lam2: float, neighbor_count: int) -> float:
    """Right-hand side of the interpolation bound: 2 alpha |E| / (lam2 |N|)."""
    if lam2 <= 0:
        raise DisconnectedGraphError("bound undefined for disconnected graphs")
    if neighbor_count <= 0:
        raise DegenerateGraphError("node must have neighbors")
    return 2.0 * alpha * edge_count / (lam2 * neighbor_count)


# ---------------------------------------------------------------------------
# Finite-negative-batch gap experiment
# ---------------------------------------------------------------------------


def contrastive_partition_gap(sampler, critic: np.ndarray, n: int,
                              reference_samples: np.ndarray,
                              rng: np.random.Generator) -> float:
    """|log (1/n) sum e^{f.z_i} - log of the same estimate at reference size|.

    The positive term of the mean-normalized contrastive loss cancels in the
    gap, so only the log partition estimate matters.
    """
    zs = sampler(rng, n)
    est = log_sum_exp(zs @ critic) - np.log(n)
    ref = log_sum_exp(reference_samples @ critic) - np.log(reference_samples.shape[0])
    return abs(float(est - ref))


def theorem1_gap_experiment(sampler, n_values, trials: int, seed: int,
                            dim: int, n_ref: int = 8192):
    """Empirical loss gap versus negative-batch size.

    For each trial a fresh unit critic and a reference pool of n_ref samples
    stand in for the population loss; each N in n_values is evaluated against
    the same reference so gaps are paired across N. Returns a list of
    (N, mean_gap, median_gap, gaps-array) rows, N ascending.
    """
    n_values = sorted(n_values)
    if n_values and n_values[-1] * 4 > n_ref:
        raise ConfigurationError("reference size should dwarf the largest N")
    rng = make_rng(seed)
    gaps = {n: [] for n in n_values}
    for _ in range(trials):
        critic = sample_sphere_prior(rng, 1, dim)[0]
        ref = sampler(rng, n_ref)
        for n in n_values:
            gaps[n].append(contrastive_partition_gap(sampler, critic, n, ref, rng))
    rows = []
    for n in n_values:
        g = np.asarray(gaps[n])
        rows.append((n, float(np.mean(g)), float(np.median(g)), g))
    return rows


def loglog_slope(ns, values) -> float:
    """Least-squares slope of log(values) against log(ns)."""
    x = np.log(np.asarray(ns, dtype=np.float64))
    y = np.log(np.asarray(values, dtype=np.float64))
    x = x - x.mean()
    return float(np.sum(x * (y - y.mean())) / np.sum(x * x))


def effective_rank(embeddings) -> float:
    """Participation ratio of the covariance spectrum: (sum l)^2 / sum l^2.

    1 for a perfectly collapsed batch, d for an isotropic one.
    """
    z = np.asarray(embeddings, dtype=np.float64)
    zc = z - z.mean(axis=0, keepdims=True)
    lam = np.linalg.eigvalsh(zc.T @ zc / max(1, z.shape[0]))
    lam = np.maximum(lam, 0.0)
    s = np.sum(lam)
    if s <= 0:
        return 1.0
    return float(s * s / np.sum(lam * lam))
