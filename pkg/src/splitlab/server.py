"""Server-side refinement over a sliding temporal buffer.

Frames arrive as whatever the edge transmitted (raw features at k=0 or a
dequantized activation at 0<k<L); at desk scale the server model is the
shared encoder's suffix, and refining means re-running stored payloads
through the suffix, scoring the combined objective (buffer contrastive term
plus weighted spread and smoothness regularizers), and taking momentum-SGD
steps. Frames the edge processed locally or the link dropped simply stay
missing: the temporal graph routes around gaps, never imputing them.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .encoder import EncoderState, backward_from, forward_from, zero_grads
from .errors import ConfigurationError, RefinementAborted
from .gmm import GmmState, serialized_size_bytes
from .metrics import (EmbeddingBatch, ProjectionSet, build_knn_temporal_graph,
                      dirichlet_energy, dirichlet_gradient, sliced_wasserstein,
                      swd_gradient)
from .numerics import log_sum_exp


@dataclass
class BufferEntry:
    timestamp_ms: int
    split_k: int
    payload: np.ndarray   # activation at split_k (raw features when k=0)


@dataclass
class TemporalBuffer:
    capacity: int = 100
    entries: dict = field(default_factory=dict)    # ts -> BufferEntry
    arrival_log: list = field(default_factory=list)
    replaced: int = 0

    def __post_init__(self):
        if self.capacity < 1:
            raise ConfigurationError("capacity must be >= 1")

    def __len__(self):
        return len(self.entries)

    def insert(self, timestamp_ms: int, payload, split_k: int):
        """Place by timestamp; duplicates replace (logged); oldest slot is
        evicted once over capacity."""
        if timestamp_ms in self.entries:
            self.replaced += 1
        self.entries[timestamp_ms] = BufferEntry(
            timestamp_ms, split_k, np.asarray(payload, dtype=np.float64))
        self.arrival_log.append(timestamp_ms)
        while len(self.entries) > self.capacity:
            del self.entries[min(self.entries)]

    def sorted_entries(self):
        return [self.entries[t] for t in sorted(self.entries)]

    def timestamps(self) -> np.ndarray:
        return np.array(sorted(self.entries), dtype=np.int64)


def insert(buffer: TemporalBuffer, timestamp_ms: int, payload, split_k: int):
    buffer.insert(timestamp_ms, payload, split_k)
    return buffer


def buffer_embeddings(buffer: TemporalBuffer, state: EncoderState):
    """Current suffix embeddings of every stored payload, with caches."""
    zs, caches = [], []
    for e in buffer.sorted_entries():
        z, cache = forward_from(state, e.payload, e.split_k)
        zs.append(z)
        caches.append(cache)
    return np.stack(zs) if zs else np.zeros((0, state.config.embed_dim)), caches


@dataclass(frozen=True)
class HybridLossConfig:
    lambda_sw: float = 0.1
    lambda_lap: float = 0.01
    tau_server: float = 0.1
    knn_k: int = 5
    graph_window_ms: float = 200.0
    positive_max_gap_ms: float = 60.0

    def __post_init__(self):
        if self.lambda_sw < 0 or self.lambda_lap < 0:
            raise ConfigurationError("loss weights must be non-negative")
        if self.tau_server <= 0:
            raise ConfigurationError("temperature must be positive")


def _buffer_infonce(zs: np.ndarray, timestamps: np.ndarray, tau: float,
                    max_gap_ms: float):
    """Contrastive term over the buffer: each entry whose successor is within
    max_gap_ms anchors a positive pair; every other entry is a negative.
    Returns (loss, dL/dZ); гaps wider than max_gap_ms contribute no pair."""
    n = zs.shape[0]
    grad = np.zeros_like(zs)
    pairs = [(i, i + 1) for i in range(n - 1)
             if timestamps[i + 1] - timestamps[i] <= max_gap_ms]
    if not pairs:
        return 0.0, grad
    sims = zs @ zs.T / tau
    total = 0.0
    for (i, j) in pairs:
        others = [m for m in range(n) if m != i and m != j]
        logits = np.concatenate(([sims[i, j]], sims[i, others]))
        lse = log_sum_exp(logits)
        total += lse - sims[i, j]
        p = np.exp(logits - lse)
        grad[i] += ((p[0] - 1.0) * zs[j] + p[1:] @ zs[others]) / tau
        grad[j] += (p[0] - 1.0) * zs[i] / tau
        for idx, m in enumerate(others):
            grad[m] += p[1 + idx] * zs[i] / tau
    k = len(pairs)
    return total / k, grad / k


def hybrid_loss_and_grad(buffer: TemporalBuffer, state: EncoderState,
                         prior_samples: np.ndarray, config: HybridLossConfig,
                         projections: ProjectionSet):
    """Combined objective task + lambda_sw * spread + lambda_lap * smoothness.

    Returns None while the buffer holds fewer than 2*knn_k entries (not ready,
    no update). Otherwise (loss, per-block param grads, per-term dict).
    """
    if len(buffer) < 2 * config.knn_k:
        return None
    zs, caches = buffer_embeddings(buffer, state)
    ts = buffer.timestamps()
    n = zs.shape[0]

    task_loss, dz = _buffer_infonce(zs, ts, config.tau_server,
                                    config.positive_max_gap_ms)

    prior = np.asarray(prior_samples, dtype=np.float64)
    if prior.shape[0] != n:
        raise ConfigurationError("prior sample count must match buffer size")
    sw_loss = sliced_wasserstein(zs, prior, projections)
    if config.lambda_sw != 0.0:
        dz = dz + config.lambda_sw * swd_gradient(zs, prior, projections)

    graph = build_knn_temporal_graph(
        EmbeddingBatch(ts, zs), config.knn_k, config.graph_window_ms)
    lap_loss = dirichlet_energy(graph, zs)
    if config.lambda_lap != 0.0:
        dz = dz + config.lambda_lap * dirichlet_gradient(graph, zs)

    grads = zero_grads(state)
    for i in range(n):
        gi = backward_from(state, caches[i], dz[i])
        for (aw, ab), (gw, gb) in zip(grads, gi):
            aw += gw
            ab += gb
    loss = task_loss + config.lambda_sw * sw_loss + config.lambda_lap * lap_loss
    parts = {"task": float(task_loss), "sw": float(sw_loss), "lap": float(lap_loss)}
    return float(loss), grads, parts


@dataclass
class ServerRefiner:
    state: EncoderState
    loss_config: HybridLossConfig
    momentum: float = 0.9
    velocity: list = None
    initial_loss: float = None
    loss_trace: list = field(default_factory=list)

    def __post_init__(self):
        if self.velocity is None:
            self.velocity = [(np.zeros_like(w), np.zeros_like(b))
                             for w, b in self.state.params]


def refine_step(refiner: ServerRefiner, buffer: TemporalBuffer,
                prior_samples, projections: ProjectionSet, lr: float):
    """One momentum-SGD step on the hybrid objective.

    Returns the pre-step loss, or None when the buffer is not ready. Raises
    RefinementAborted once the loss exceeds 10x the first recorded loss.
    """
    out = hybrid_loss_and_grad(buffer, refiner.state, prior_samples,
                               refiner.loss_config, projections)
    if out is None:
        return None
    loss, grads, _ = out
    if refiner.initial_loss is None:
        refiner.initial_loss = max(abs(loss), 1e-9)
    elif abs(loss) > 10.0 * refiner.initial_loss:
        raise RefinementAborted(
            f"loss {loss:.4g} exceeds 10x initial {refiner.initial_loss:.4g}")
    refiner.loss_trace.append(loss)
    if lr != 0.0:
        for (vw, vb), (gw, gb), (w, b) in zip(refiner.velocity, grads,
                                              refiner.state.params):
            vw *= refiner.momentum; vw -= lr * gw
            vb *= refiner.momentum; vb -= lr * gb
            w += vw
            b += vb
    return loss


def stitch_metric(snapshot_before: EmbeddingBatch, snapshot_after: EmbeddingBatch,
                  gap_start_ms: float, gap_end_ms: float,
                  knn_k: int = 5, window_ms: float = 400.0):
    """Mean edge energy across the outage boundary, before vs after refinement.

    Both snapshots must share timestamps (same gap structure). Boundary edges
    connect a pre-gap node to a post-gap node; when the gap spans no edge the
    whole graph's energy is reported instead.
    """
    ts_b = np.asarray(snapshot_before.timestamps)
    ts_a = np.asarray(snapshot_after.timestamps)
    if ts_b.shape != ts_a.shape or np.any(ts_b != ts_a):
        raise ConfigurationError("snapshots must share the same gap structure")
    graph = build_knn_temporal_graph(snapshot_before, knn_k, window_ms)
    boundary = [(i, j) for (i, j) in graph.edges
                if ts_b[i] < gap_start_ms and ts_b[j] >= gap_end_ms]

    def edge_energy(z, edges):
        if not edges:
            return dirichlet_energy(graph, z)
        total = sum(float((z[i] - z[j]) @ (z[i] - z[j])) for i, j in edges)
        return total / len(edges)

    return (edge_energy(snapshot_before.vectors, boundary),
            edge_energy(snapshot_after.vectors, boundary))


# ---------------------------------------------------------------------------
# Lazy downlink synchronization
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SyncSchedule:
    t_sync_frames: int = 100

    def __post_init__(self):
        if self.t_sync_frames < 1:
            raise ConfigurationError("t_sync must be >= 1")


@dataclass(frozen=True)
class LinkFlags:
    charging: bool = False
    high_bandwidth: bool = False


@dataclass(frozen=True)
class PayloadDescriptor:
    kind: str          # "gmm" | "encoder"
    size_bytes: int


def lazy_sync(frame_index: int, schedule: SyncSchedule, gmm: GmmState,
              encoder_state: EncoderState, flags: LinkFlags,
              gmm_precision: int = 2):
    """Scheduled downlink: mixture parameters every t_sync frames; full
    encoder weights only when the device reports charging or a fat pipe."""
    if frame_index <= 0 or frame_index % schedule.t_sync_frames != 0:
        return []
    payloads = [PayloadDescriptor("gmm", serialized_size_bytes(gmm, gmm_precision))]
    if flags.charging or flags.high_bandwidth:
        payloads.append(PayloadDescriptor("encoder", encoder_state.num_params() * 4))
    return payloads
