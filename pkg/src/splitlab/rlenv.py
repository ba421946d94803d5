"""Offline control-plane training.

The split policy is trained the way it would be in the field: offline,
against recorded traces. A short real pipeline run records the uncertainty
signal per regime; the environment then replays regime-switching uncertainty,
a wandering CPU load, and link traces, pricing every candidate split with the
same cost model and reward the evaluation pipeline uses. One environment step
is one decision epoch (T_step frames).
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import control, stream, system
from .control import PolicyParams, PpoConfig, RuleThresholds, init_policy, train_ppo
from .errors import ConfigurationError
from .harness import EdgeLearner, ExperimentConfig, _child_rngs
from .stream import FRAME_HOP_MS
from .system import MAX_BANDWIDTH_MBPS, LinkState


@dataclass
class UncertaintyPools:
    """Empirical per-regime uncertainty samples recorded from a real run."""
    steady: np.ndarray
    transient: np.ndarray


def record_uncertainty_pools(config: ExperimentConfig, record_frames: int = 2000,
                             skip: int = 200) -> UncertaintyPools:
    """Run the edge learner alone over the synthetic stream and bucket the
    normalized posterior entropy by regime. skip discards warm-up frames."""
    rngs = _child_rngs(config.seed + 101)
    frames = stream.generate_stream(config.stream, config.seed + 101, record_frames)
    learner = EdgeLearner(config, rngs)
    max_u = np.log(config.gmm_components)
    transient_classes = config.stream.transient_classes()
    steady, transient = [], []
    for idx, frame in enumerate(frames):
        _z, u = learner.step(frame)
        if idx < skip:
            continue
        (transient if frame.label in transient_classes else steady).append(u / max_u)
    if not steady or not transient:
        raise ConfigurationError("recording produced an empty regime pool")
    return UncertaintyPools(np.asarray(steady), np.asarray(transient))


class ControlEnv:
    """Decision-epoch MDP over recorded traces and uncertainty pools.

    Action indices below min_k behave as stay-local, so a policy trained with
    a restricted action space keeps the full L+1 head.
    """

    def __init__(self, config: ExperimentConfig, pools: UncertaintyPools,
                 traces, min_k: int = 0):
        self.config = config
        self.pools = pools
        self.traces = list(traces)
        if not self.traces:
            raise ConfigurationError("need at least one trace")
        self.min_k = min_k
        self.platform = system.get_platform(config.platform,
                                            config.encoder.num_blocks)
        self.num_actions = config.encoder.num_blocks + 1
        self._trace_idx = -1

    # regime switching uses the stream's segment-length statistics
    def _switch_prob(self, transient: bool) -> float:
        mean = (self.config.stream.transient_mean_frames if transient
                else self.config.stream.steady_mean_frames)
        return 1.0 / max(mean, 1)

    def _draw_u(self, rng) -> float:
        pool = self.pools.transient if self._transient else self.pools.steady
        return float(pool[rng.integers(pool.shape[0])])

    def _state(self) -> np.ndarray:
        return np.array([self._u_smooth, self._cpu,
                         self._link.ema_bandwidth_mbps / MAX_BANDWIDTH_MBPS])

    def reset(self, rng) -> np.ndarray:
        self._trace_idx = (self._trace_idx + 1) % len(self.traces)
        self._trace = self.traces[self._trace_idx]
        self._t = 0.0
        self._frame = 0
        self._link = LinkState(MAX_BANDWIDTH_MBPS, self.config.ema_coefficient)
        self._cpu = 0.35
        self._transient = False
        self._u = self._draw_u(rng)
        self._u_smooth = self._u
        return self._state()

    def step(self, action: int, rng):
        cfg = self.config
        L = cfg.encoder.num_blocks
        k = int(action)
        if k < self.min_k:
            k = L
        quantized = 0 < k < L
        accs, lats, energies, us = [], [], [], []
        for _ in range(cfg.t_step):
            if rng.random() < self._switch_prob(self._transient):
                self._transient = not self._transient
            self._u = self._draw_u(rng)
            us.append(self._u)
            self._cpu = float(np.clip(self._cpu + 0.15 * (0.35 - self._cpu)
                                      + 0.06 * rng.standard_normal(), 0.05, 0.95))
            point = self._trace.at(self._t)
            cost = system.frame_cost(k, self.platform, point, quantized,
                                     cfg.encoder, rng, cfg.local_processing)
            transmitted = cost.tx_bytes_x100 > 0
            if transmitted:
                self._link = system.ema_update(self._link, point.bandwidth_mbps)
            if self._frame > 0 and self._frame % cfg.t_sync == 0:
                self._link = system.ema_update(self._link, point.bandwidth_mbps)
            if transmitted and k < L:
                delivered = not cost.dropped and cost.latency_ms <= cfg.reward.t_max_ms
                outcome = "served" if delivered else "timeout"
            else:
                outcome = "local"
            accs.append(cfg.accuracy.frame_accuracy(self._u, outcome))
            lats.append(cost.latency_ms)
            energies.append(cost.energy_mj)
            self._t += FRAME_HOP_MS
            self._frame += 1
        reward = control.compute_reward(float(np.mean(accs)), float(np.mean(lats)),
                                        float(np.mean(energies)), cfg.reward)
        self._u_smooth = float(np.mean(us))
        done = self._t >= self._trace.duration_ms - cfg.t_step * FRAME_HOP_MS
        return self._state(), reward, done


def training_traces(config: ExperimentConfig, seed: int):
    """A small suite spanning the three link regimes."""
    dur = 45000.0
    return [
        system.make_profile("stable", seed * 31 + 1, dur),
        system.make_profile("variable", seed * 31 + 2, dur),
        system.make_profile("congested", seed * 31 + 3, dur),
        system.make_profile("congested", seed * 31 + 4, dur),
    ]


def train_split_policy(config: ExperimentConfig, seed: int,
                       total_steps: int = 36000, horizon: int = 256,
                       pools: UncertaintyPools = None,
                       ppo: PpoConfig = None) -> PolicyParams:
    """Record, then train the split policy offline on the trace suite."""
    if pools is None:
        pools = record_uncertainty_pools(config)
    env = ControlEnv(config, pools, training_traces(config, seed),
                     min_k=config.min_k)
    rng = np.random.Generator(np.random.PCG64(seed * 7919 + 13))
    params = init_policy(env.num_actions, rng)
    cfg = ppo or PpoConfig()
    return train_ppo(env, params, cfg, total_steps, horizon, rng)


def evaluate_policy_in_env(env: ControlEnv, act_fn, episodes: int, seed: int) -> float:
    """Mean per-decision reward of a deterministic state->k policy."""
    rng = np.random.Generator(np.random.PCG64(seed))
    total, count = 0.0, 0
    for _ in range(episodes):
        s = env.reset(rng)
        done = False
        while not done:
            s, r, done = env.step(act_fn(s), rng)
            total += r
            count += 1
    return total / max(count, 1)


def calibrate_rule_thresholds(config: ExperimentConfig, seed: int,
                              pools: UncertaintyPools = None,
                              bw_grid=None, cpu_grid=None) -> RuleThresholds:
    """Grid-search the offload thresholds for maximum mean reward on the
    training traces, so the heuristic baseline is tuned to the same objective
    the learned policy optimizes."""
    if pools is None:
        pools = record_uncertainty_pools(config)
    if bw_grid is None:
        bw_grid = [2.0, 4.0, 6.0, 8.0, 10.0, 14.0, 18.0, 22.0, 26.0, 30.0]
    if cpu_grid is None:
        cpu_grid = [0.5, 0.7, 0.9]
    env = ControlEnv(config, pools, training_traces(config, seed))
    L = config.encoder.num_blocks
    best, best_thr = -np.inf, None
    for bw_min in bw_grid:
        for cpu_max in cpu_grid:
            def act(s, bw_min=bw_min, cpu_max=cpu_max):
                bw = s[2] * MAX_BANDWIDTH_MBPS
                return 0 if (bw > bw_min and s[1] < cpu_max) else L
            mean = evaluate_policy_in_env(env, act, len(env.traces), seed * 13 + 5)
            if mean > best:
                best, best_thr = mean, RuleThresholds(bw_min, cpu_max)
    return best_thr
