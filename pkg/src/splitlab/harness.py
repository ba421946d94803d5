"""End-to-end experiment pipeline.

One simulated frame every 10 ms: the edge learner augments and encodes it,
updates the mixture memory, and accumulates contrastive gradients; the
control plane re-decides the split every T_step frames (atomically -- the
active split never changes inside an epoch); the system model prices the
frame's serving path; delivered payloads land in the server buffer, which is
refined periodically; the mixture syncs downlink on its lazy schedule.

Everything is driven by child generators spawned from the experiment seed,
so a (config, seed) pair reproduces its metrics files byte for byte.
"""

from __future__ import annotations

import configparser
import math
import os
from dataclasses import dataclass, field, fields, replace

import numpy as np

from . import control, encoder, gmm, metrics, numerics, server, stream, system
from .control import (PolicyParams, RewardWeights, RuleThresholds, SplitAction,
                      SystemState, compute_reward, observe, rule_based_action,
                      select_action, static_action)
from .encoder import EncoderConfig
from .errors import ConfigurationError, RefinementAborted
from .server import HybridLossConfig, LinkFlags, SyncSchedule
from .stream import FRAME_HOP_MS, SyntheticStreamSpec
from .system import MAX_BANDWIDTH_MBPS, LinkState

POLICY_KINDS = ("rl", "rule", "static-k", "edge-only", "server-only")


@dataclass(frozen=True)
class AccuracyModel:
    """Difficulty-aware per-frame accuracy used inside the reward.

    Error escalates once normalized uncertainty passes a hinge (easy
    steady-state content is near the accuracy ceiling either way); routing a
    frame through the server flattens the escalation and buys a small flat
    edge. A frame that was offloaded but lost, or whose end-to-end latency
    blew the deadline, counts as a timeout. Constants are calibrated once
    against the synthetic stream's recorded uncertainty pools.
    """

    local_base: float = 0.12
    local_slope: float = 0.55
    served_base: float = 0.12
    served_slope: float = 0.05
    hinge_lo: float = 0.05
    hinge_hi: float = 0.15
    timeout_err: float = 0.90

    def _hinge(self, u_norm: float) -> float:
        span = max(self.hinge_hi - self.hinge_lo, 1e-9)
        return float(np.clip((u_norm - self.hinge_lo) / span, 0.0, 1.0))

    def frame_accuracy(self, u_norm: float, outcome: str) -> float:
        """outcome: 'local' | 'served' | 'timeout'."""
        if outcome == "timeout":
            return 1.0 - self.timeout_err
        h = self._hinge(u_norm)
        if outcome == "served":
            return 1.0 - (self.served_base + self.served_slope * h)
        return 1.0 - (self.local_base + self.local_slope * h)


@dataclass
class ExperimentConfig:
    seed: int = 0
    scenario: str = "default"
    platform: str = "pi-like"
    network: str = "congested"
    policy: str = "rl"
    static_k: int = 3
    num_frames: int = 6000
    min_k: int = 0

    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    init_gain: float = 1.67             # edge-of-chaos tanh init (depth 8)
    sigma_aug: float = 0.05
    mask_width: int = 16
    tau: float = 0.1
    n_syn: int = 256
    negatives_mode: str = "virtual"     # virtual | batch | both
    batch_size: int = 8
    lr: float = 2e-4
    lr_warmup_frames: int = 800

    gmm_components: int = 12
    gmm_decay: float = 0.995
    variance_floor: float = 0.02        # assignment bandwidth at desk scale
    tau_hardness: float = 2.0

    reward: RewardWeights = field(default_factory=RewardWeights)
    accuracy: AccuracyModel = field(default_factory=AccuracyModel)
    t_step: int = 10
    cold_start: int = 50

    ema_coefficient: float = 0.9
    local_processing: bool = True

    buffer_capacity: int = 100
    hybrid: HybridLossConfig = field(default_factory=HybridLossConfig)
    server_lr: float = 0.02
    refine_every: int = 10
    t_sync: int = 100
    charging: bool = False

    stream: SyntheticStreamSpec = field(default_factory=SyntheticStreamSpec)
    swd_projections: int = 50

    metrics_every: int = 50
    metrics_window: int = 128
    probe_every: int = 1000
    probe_window: int = 600

    def validate(self):
        if self.policy not in POLICY_KINDS:
            raise ConfigurationError(f"unknown policy kind {self.policy!r}")
        if self.network not in ("stable", "variable", "congested"):
            raise ConfigurationError(f"unknown network profile {self.network!r}")
        system.get_platform(self.platform, self.encoder.num_blocks)
        if self.negatives_mode not in ("virtual", "batch", "both"):
            raise ConfigurationError(f"unknown negatives mode {self.negatives_mode!r}")
        if self.stream.input_dim != self.encoder.input_dim:
            raise ConfigurationError("stream and encoder input dims differ")
        if not 0 <= self.static_k <= self.encoder.num_blocks:
            raise ConfigurationError("static_k outside split range")
        if self.num_frames < 1:
            raise ConfigurationError("num_frames must be >= 1")
        return self


# -- rng plumbing ------------------------------------------------------------

_RNG_ROLES = ("stream", "augment", "encoder", "negatives", "policy", "trace",
              "cpu", "drops", "prior", "probe", "metrics_prior")


def _child_rngs(seed: int) -> dict:
    seqs = np.random.SeedSequence(seed).spawn(len(_RNG_ROLES))
    return {role: np.random.Generator(np.random.PCG64(s))
            for role, s in zip(_RNG_ROLES, seqs)}


def trace_for(config: ExperimentConfig) -> system.NetworkTrace:
    duration = config.num_frames * FRAME_HOP_MS + 1000.0
    return system.make_profile(config.network, seed=config.seed * 1009 + 7,
                               duration_ms=duration)


# ---------------------------------------------------------------------------
# Edge learner
# ---------------------------------------------------------------------------


class EdgeLearner:
    """Streaming contrastive learner plus mixture memory on the device."""

    def __init__(self, config: ExperimentConfig, rngs):
        self.config = config
        self.encoder = encoder.init_encoder(config.encoder, rngs["encoder"])
        if config.init_gain != 1.0:
            for i, (W, b) in enumerate(self.encoder.params):
                self.encoder.params[i] = (W * config.init_gain, b)
        self.gmm = gmm.make_gmm(config.gmm_components, config.encoder.embed_dim,
                                config.gmm_decay, config.variance_floor,
                                warmup_separation=0.3,
                                warmup_deadline=6 * config.gmm_components)
        self.rng_aug = rngs["augment"]
        self.rng_neg = rngs["negatives"]
        self._grad_acc = encoder.zero_grads(self.encoder)
        self._grad_count = 0
        self._frames_done = 0
        self.recent = []          # small fifo of past embeddings (batch negatives)
        self.loss_trace = []

    def _negatives_from(self, z, resp):
        mode = self.config.negatives_mode
        parts = []
        if mode in ("virtual", "both") and resp is not None:
            c_star = int(np.argmax(resp))
            parts.append(gmm.sample_virtual_negatives(
                self.gmm, z, c_star, self.config.n_syn,
                self.config.tau_hardness, self.rng_neg))
        if mode in ("batch", "both") and self.recent:
            parts.append(np.stack(self.recent))
        if not parts:
            return None
        return np.concatenate(parts, axis=0)

    def step(self, frame: encoder.StreamFrame):
        """One streaming update; returns (embedding, uncertainty_nats)."""
        cfg = self.config
        pair = encoder.augment(frame, self.rng_aug, cfg.sigma_aug, cfg.mask_width)
        za, zb, cache = encoder.pair_forward(self.encoder, pair.view_a, pair.view_b)
        resp = gmm.posterior(self.gmm, za) if self.gmm.initialized else None
        negs = self._negatives_from(za, resp)
        if negs is not None:
            s_pos = np.dot(za, zb) / cfg.tau
            logits = np.concatenate(([s_pos], negs @ za / cfg.tau))
            lse = numerics.log_sum_exp(logits)
            p = np.exp(logits - lse)
            g_za = ((p[0] - 1.0) * zb + p[1:] @ negs) / cfg.tau
            g_zb = (p[0] - 1.0) * za / cfg.tau
            encoder.pair_backward_accumulate(self.encoder, cache, g_za, g_zb,
                                             self._grad_acc)
            self._grad_count += 1
            self.loss_trace.append(float(lse - s_pos))
            if self._grad_count >= cfg.batch_size:
                mean = [(gw / self._grad_count, gb / self._grad_count)
                        for gw, gb in self._grad_acc]
                warm = min(1.0, (self._frames_done + 1) / max(cfg.lr_warmup_frames, 1))
                encoder.adam_step(self.encoder, mean, cfg.lr * warm)
                self._grad_acc = encoder.zero_grads(self.encoder)
                self._grad_count = 0
        gmm.em_update(self.gmm, za, responsibilities=resp)
        u = gmm.entropy_of(resp) if resp is not None else math.log(cfg.gmm_components)
        self._frames_done += 1
        self.recent.append(za)
        if len(self.recent) >= self.config.batch_size:
            self.recent.pop(0)
        return za, u


# ---------------------------------------------------------------------------
# Metrics rows
# ---------------------------------------------------------------------------

METRICS_COLUMNS = ("frame", "k", "u_t", "edge_ms", "tx_ms", "server_ms",
                   "energy_mj", "tx_bytes", "dropped", "swd_uniform",
                   "dirichlet", "probe_acc")


@dataclass
class MetricsRow:
    frame: int
    k: int
    u_t: float
    edge_ms: float
    tx_ms: float
    server_ms: float
    energy_mj: float
    tx_bytes_x100: int
    dropped: bool
    swd_uniform: float
    dirichlet: float
    probe_acc: float = float("nan")

    def csv_values(self):
        return (str(self.frame), str(self.k), repr(float(self.u_t)),
                repr(float(self.edge_ms)), repr(float(self.tx_ms)),
                repr(float(self.server_ms)), repr(float(self.energy_mj)),
                repr(self.tx_bytes_x100 / 100.0),
                "1" if self.dropped else "0", repr(float(self.swd_uniform)),
                repr(float(self.dirichlet)),
                "" if math.isnan(self.probe_acc) else repr(float(self.probe_acc)))


@dataclass
class RunSummary:
    frames: int
    mean_latency_ms: float
    mean_energy_mj: float
    total_tx_bytes: float
    total_downlink_bytes: int
    mean_reward: float
    drop_count: int
    adaptation_frames: object            # int, or None when not applicable
    probe_accuracies: list
    final_swd_uniform: float
    final_effective_rank: float
    refinement_aborted: bool

    def as_dict(self):
        return {
            "frames": self.frames,
            "mean_latency_ms": self.mean_latency_ms,
            "mean_energy_mj": self.mean_energy_mj,
            "total_tx_bytes": self.total_tx_bytes,
            "total_downlink_bytes": self.total_downlink_bytes,
            "mean_reward": self.mean_reward,
            "drop_count": self.drop_count,
            "adaptation_frames": "n/a" if self.adaptation_frames is None
                                 else self.adaptation_frames,
            "final_probe_acc": self.probe_accuracies[-1] if self.probe_accuracies
                               else float("nan"),
            "final_swd_uniform": self.final_swd_uniform,
            "final_effective_rank": self.final_effective_rank,
            "refinement_aborted": int(self.refinement_aborted),
        }


def write_metrics_csv(rows, path):
    tmp = str(path) + ".tmp"
    with open(tmp, "w") as f:
        f.write(",".join(METRICS_COLUMNS) + "\n")
        for r in rows:
            f.write(",".join(r.csv_values()) + "\n")
    os.replace(tmp, path)


def write_summary_csv(summary_dicts, path):
    if not isinstance(summary_dicts, list):
        summary_dicts = [summary_dicts]
    keys = list(summary_dicts[0].keys())
    tmp = str(path) + ".tmp"
    with open(tmp, "w") as f:
        f.write(",".join(keys) + "\n")
        for d in summary_dicts:
            f.write(",".join(repr(d[k]) if isinstance(d[k], float) else str(d[k])
                             for k in keys) + "\n")
    os.replace(tmp, path)


# ---------------------------------------------------------------------------
# The pipeline
# ---------------------------------------------------------------------------


def _decide(config: ExperimentConfig, state: SystemState, frame_idx: int,
            policy_params, thresholds, rng) -> SplitAction:
    L = config.encoder.num_blocks
    kind = config.policy
    if kind == "rl":
        action, _ = select_action(policy_params, state, "greedy", rng, frame_idx,
                                  L, min_k=config.min_k,
                                  cold_start_frames=config.cold_start)
        return action
    if kind == "rule":
        return rule_based_action(state, thresholds, L, MAX_BANDWIDTH_MBPS)
    if kind == "static-k":
        return static_action(config.static_k, L)
    if kind == "edge-only":
        return static_action(L, L)
    if kind == "server-only":
        return static_action(0, L)
    raise ConfigurationError(f"unknown policy kind {kind!r}")


def run_experiment(config: ExperimentConfig, policy_params: PolicyParams = None,
                   rule_thresholds: RuleThresholds = None,
                   force_drop_rate: float = 0.0):
    """Run the full pipeline; returns (rows, summary, artifacts).

    artifacts carries live objects (learner, refiner, buffer, trace) for
    suites that keep analyzing after the run. force_drop_rate additionally
    drops delivered frames uniformly at random (server-side ablation knob).
    """
    config.validate()
    if config.policy == "rl" and policy_params is None:
        raise ConfigurationError("policy 'rl' needs trained policy parameters")
    if config.policy == "rule" and rule_thresholds is None:
        raise ConfigurationError("policy 'rule' needs calibrated thresholds")

    rngs = _child_rngs(config.seed)
    L = config.encoder.num_blocks
    platform = system.get_platform(config.platform, L)
    trace = trace_for(config)
    frames = stream.generate_stream(config.stream, config.seed, config.num_frames)
    learner = EdgeLearner(config, rngs)

    refiner = server.ServerRefiner(learner.encoder.copy(),
                                   config.hybrid)
    buffer = server.TemporalBuffer(config.buffer_capacity)
    projections = metrics.make_projections(config.seed + 17, config.swd_projections,
                                           config.encoder.embed_dim)
    schedule = SyncSchedule(config.t_sync)
    flags = LinkFlags(charging=config.charging)

    link = LinkState(MAX_BANDWIDTH_MBPS, config.ema_coefficient)
    cpu = 0.35
    max_u = math.log(config.gmm_components)

    active = static_action(L, L)     # until the first decision
    rows = []
    rewards = []
    epoch_u = []                     # smoothed uncertainty entering the state
    epoch_acc, epoch_lat, epoch_energy = [], [], []
    probe_accs = []
    recent_z, recent_ts, recent_labels = [], [], []
    swd_now, dirichlet_now = float("nan"), float("nan")
    eff_rank = float("nan")
    total_down = 0
    refinement_aborted = False
    us = np.zeros(config.num_frames)

    for idx, frame in enumerate(frames):
        t_ms = frame.timestamp_ms
        point = trace.at(t_ms)
        z, u = learner.step(frame)
        u_norm = u / max_u
        us[idx] = u_norm
        cpu = float(np.clip(cpu + 0.15 * (0.35 - cpu)
                            + 0.06 * rngs["cpu"].standard_normal(), 0.05, 0.95))

        if idx % config.t_step == 0:
            if idx > 0:
                rewards.append(compute_reward(float(np.mean(epoch_acc)),
                                              float(np.mean(epoch_lat)),
                                              float(np.mean(epoch_energy)),
                                              config.reward))
                epoch_acc, epoch_lat, epoch_energy = [], [], []
            # the state smooths uncertainty over the previous decision epoch
            u_state = float(np.mean(epoch_u)) if epoch_u else u
            epoch_u = []
            state = observe(u_state, max_u, cpu * 100.0,
                            link.ema_bandwidth_mbps, MAX_BANDWIDTH_MBPS)
            active = _decide(config, state, idx, policy_params,
                             rule_thresholds, rngs["policy"])
        epoch_u.append(u)

        cost = system.frame_cost(active.k, platform, point, active.quantize,
                                 config.encoder, rngs["drops"],
                                 config.local_processing)
        transmitted = cost.tx_bytes_x100 > 0
        delivered = transmitted and not cost.dropped
        if delivered and force_drop_rate > 0.0:
            delivered = bool(rngs["drops"].random() >= force_drop_rate)

        if delivered and active.k < L:
            if active.k == 0:
                payload = np.asarray(frame.features, dtype=np.float64)
            else:
                h = encoder.encode_prefix(learner.encoder, frame.features, active.k)
                if active.quantize:
                    spec_q = system.calibrate(h)
                    h = system.quantize_dequantize(h, spec_q)
                payload = h
            buffer.insert(t_ms, payload, active.k)
        if transmitted:
            link = system.ema_update(link, point.bandwidth_mbps)

        if (not refinement_aborted and idx % config.refine_every == 0
                and len(buffer) >= 2 * config.hybrid.knn_k):
            prior = metrics.sample_sphere_prior(rngs["prior"], len(buffer),
                                                config.encoder.embed_dim)
            try:
                server.refine_step(refiner, buffer, prior, projections,
                                   config.server_lr)
            except RefinementAborted:
                refinement_aborted = True

        if idx > 0 and idx % config.t_sync == 0:
            for p in server.lazy_sync(idx, schedule, learner.gmm,
                                      refiner.state, flags):
                total_down += p.size_bytes
            # the downlink exchange doubles as a passive bandwidth sample
            link = system.ema_update(link, point.bandwidth_mbps)

        if transmitted and active.k < L:
            if delivered and cost.latency_ms <= config.reward.t_max_ms:
                outcome = "served"
            else:
                outcome = "timeout"
        else:
            outcome = "local"
        epoch_acc.append(config.accuracy.frame_accuracy(u_norm, outcome))
        epoch_lat.append(cost.latency_ms)
        epoch_energy.append(cost.energy_mj)

        recent_z.append(z)
        recent_ts.append(t_ms)
        recent_labels.append(frame.label)
        if len(recent_z) > max(config.metrics_window, config.probe_window):
            recent_z.pop(0)
            recent_ts.pop(0)
            recent_labels.pop(0)

        if idx % config.metrics_every == 0 and len(recent_z) >= 8:
            zs = np.stack(recent_z[-config.metrics_window:])
            prior = metrics.sample_sphere_prior(rngs["metrics_prior"], zs.shape[0],
                                                zs.shape[1])
            swd_now = metrics.sliced_wasserstein(zs, prior, projections)
            graph = metrics.build_knn_temporal_graph(
                metrics.EmbeddingBatch(np.asarray(recent_ts[-config.metrics_window:]),
                                       zs),
                config.hybrid.knn_k, config.hybrid.graph_window_ms)
            dirichlet_now = metrics.dirichlet_energy(graph, zs)
            eff_rank = metrics.effective_rank(zs)

        probe_now = float("nan")
        if (idx + 1) % config.probe_every == 0 and len(recent_z) >= 50:
            zs = np.stack(recent_z[-config.probe_window:])
            labels = np.asarray(recent_labels[-config.probe_window:])
            if np.unique(labels).size >= 2:
                probe_now = stream.linear_probe(zs, labels,
                                                int(rngs["probe"].integers(1 << 31)))
                probe_accs.append(probe_now)

        rows.append(MetricsRow(idx, active.k, u, cost.edge_ms, cost.tx_ms,
                               cost.server_ms, cost.energy_mj, cost.tx_bytes_x100,
                               cost.dropped, swd_now, dirichlet_now, probe_now))

    rewards.append(compute_reward(float(np.mean(epoch_acc)),
                                  float(np.mean(epoch_lat)),
                                  float(np.mean(epoch_energy)), config.reward))

    adapt = adaptation_frames(rows, trace, config.reward.t_max_ms) \
        if config.policy in ("rl", "rule") else None
    summary = RunSummary(
        frames=len(rows),
        mean_latency_ms=float(np.mean([r.edge_ms + r.tx_ms + r.server_ms for r in rows])),
        mean_energy_mj=float(np.mean([r.energy_mj for r in rows])),
        total_tx_bytes=sum(r.tx_bytes_x100 for r in rows) / 100.0,
        total_downlink_bytes=total_down,
        mean_reward=float(np.mean(rewards)),
        drop_count=sum(1 for r in rows if r.dropped),
        adaptation_frames=adapt,
        probe_accuracies=probe_accs,
        final_swd_uniform=swd_now,
        final_effective_rank=eff_rank,
        refinement_aborted=refinement_aborted,
    )
    artifacts = {"learner": learner, "refiner": refiner, "buffer": buffer,
                 "trace": trace, "frames": frames, "u_norm": us,
                 "projections": projections}
    return rows, summary, artifacts


def adaptation_frames(rows, trace: system.NetworkTrace, t_max_ms: float):
    """Frames from the bandwidth collapse until per-frame latency stays back
    under the deadline; 0 when the deadline is never violated after onset."""
    onset_ms = system.collapse_onset_ms(trace)
    if onset_ms is None:
        return 0
    onset_idx = int(onset_ms // FRAME_HOP_MS)
    last_violation = None
    for r in rows[onset_idx:]:
        if r.edge_ms + r.tx_ms + r.server_ms > t_max_ms:
            last_violation = r.frame
    if last_violation is None:
        return 0
    return last_violation - onset_idx + 1


# ---------------------------------------------------------------------------
# Config file round trip (key = value with sections)
# ---------------------------------------------------------------------------

_SECTIONS = {
    "experiment": ["seed", "scenario", "platform", "network", "policy",
                   "static_k", "num_frames", "min_k"],
    "encoder": ["init_gain", "sigma_aug", "mask_width", "tau", "n_syn",
                "negatives_mode", "batch_size", "lr", "lr_warmup_frames"],
    "gmm": ["gmm_components", "gmm_decay", "variance_floor", "tau_hardness"],
    "control": ["t_step", "cold_start"],
    "system": ["ema_coefficient", "local_processing", "charging"],
    "server": ["buffer_capacity", "server_lr", "refine_every", "t_sync"],
    "metrics": ["metrics_every", "metrics_window", "probe_every", "probe_window",
                "swd_projections"],
}

_NESTED = {
    "encoder_shape": (("num_blocks", "input_dim", "hidden_dim", "embed_dim"),
                      "encoder", EncoderConfig),
    "reward": (("alpha", "beta", "eta", "t_max_ms", "e_budget_mj"),
               "reward", RewardWeights),
    "accuracy": (("local_base", "local_slope", "served_base", "served_slope",
                  "hinge_lo", "hinge_hi", "timeout_err"),
                 "accuracy", AccuracyModel),
    "hybrid": (("lambda_sw", "lambda_lap", "tau_server", "knn_k",
                "graph_window_ms", "positive_max_gap_ms"), "hybrid",
               HybridLossConfig),
    "stream": (("num_classes", "steady_fraction", "transient_fraction",
                "input_dim", "num_transient_classes", "steady_sigma",
                "transient_sigma", "steady_mean_frames", "transient_mean_frames"),
               "stream", SyntheticStreamSpec),
}


def _parse_scalar(text: str):
    t = text.strip()
    if t.lower() in ("true", "false"):
        return t.lower() == "true"
    try:
        return int(t)
    except ValueError:
        pass
    try:
        return float(t)
    except ValueError:
        return t


def load_config(path) -> ExperimentConfig:
    parser = configparser.ConfigParser()
    read = parser.read(path)
    if not read:
        raise ConfigurationError(f"cannot read config file {path!r}")
    cfg = ExperimentConfig()
    flat = {}
    for section, keys in _SECTIONS.items():
        if not parser.has_section(section):
            continue
        for key, raw in parser.items(section):
            if key not in keys:
                raise ConfigurationError(f"unknown key {key!r} in [{section}]")
            flat[key] = _parse_scalar(raw)
    for field_ in fields(ExperimentConfig):
        if field_.name in flat:
            setattr(cfg, field_.name, flat[field_.name])
    for section, (keys, attr, factory) in _NESTED.items():
        if not parser.has_section(section):
            continue
        kwargs = {}
        for key, raw in parser.items(section):
            if key not in keys:
                raise ConfigurationError(f"unknown key {key!r} in [{section}]")
            kwargs[key] = _parse_scalar(raw)
        base = getattr(cfg, attr)
        setattr(cfg, attr, replace(base, **kwargs))
    return cfg.validate()


def save_config(cfg: ExperimentConfig, path):
    parser = configparser.ConfigParser()
    for section, keys in _SECTIONS.items():
        parser, _ = parser, parser.add_section(section)
        for key in keys:
            parser.set(section, key, str(getattr(cfg, key)))
    for section, (keys, attr, _factory) in _NESTED.items():
        parser.add_section(section)
        obj = getattr(cfg, attr)
        for key in keys:
            parser.set(section, key, str(getattr(obj, key)))
    with open(path, "w") as f:
        parser.write(f)
