"""Uncertainty-guided split control.

A two-layer network with a shared tanh layer feeding a softmax policy head
over the L+1 split indices and a scalar value head. Training is clipped-
surrogate policy optimization with generalized advantage estimation; all
gradients are analytic. Rule-based and static baselines share the same
action type so the harness can swap policies freely.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, TrainingDivergenceError

COLD_START_FRAMES = 50


@dataclass(frozen=True)
class SystemState:
    uncertainty_norm: float
    cpu_util: float
    bandwidth_norm: float

    def vector(self) -> np.ndarray:
        return np.array([self.uncertainty_norm, self.cpu_util, self.bandwidth_norm])


def observe(uncertainty: float, max_uncertainty: float, cpu_pct: float,
            ema_bandwidth: float, max_bandwidth: float) -> SystemState:
    """Normalize raw signals into the unit-cube state vector."""
    if max_uncertainty <= 0 or max_bandwidth <= 0:
        raise ConfigurationError("normalizers must be positive")
    return SystemState(
        float(np.clip(uncertainty / max_uncertainty, 0.0, 1.0)),
        float(np.clip(cpu_pct / 100.0, 0.0, 1.0)),
        float(np.clip(ema_bandwidth / max_bandwidth, 0.0, 1.0)),
    )


@dataclass(frozen=True)
class SplitAction:
    k: int
    quantize: bool = False


@dataclass(frozen=True)
class RewardWeights:
    alpha: float = 10.0
    beta: float = 5.0
    eta: float = 3.0
    t_max_ms: float = 200.0
    e_budget_mj: float = 600.0

    def __post_init__(self):
        if min(self.alpha, self.beta, self.eta, self.t_max_ms, self.e_budget_mj) <= 0:
            raise ConfigurationError("reward weights and budgets must be positive")


def compute_reward(accuracy_proxy: float, latency_ms: float, energy_mj: float,
                   weights: RewardWeights) -> float:
    """alpha * A - beta * Lat/T_max - eta * E/E_budget."""
    return (weights.alpha * accuracy_proxy
            - weights.beta * latency_ms / weights.t_max_ms
            - weights.eta * energy_mj / weights.e_budget_mj)


# ---------------------------------------------------------------------------
# Policy / value network
# ---------------------------------------------------------------------------


@dataclass
class PolicyParams:
    w1: np.ndarray   # (hidden, state_dim)
    b1: np.ndarray
    wp: np.ndarray   # (actions, hidden)
    bp: np.ndarray
    wv: np.ndarray   # (1, hidden)
    bv: np.ndarray

    @property
    def num_actions(self) -> int:
        return self.wp.shape[0]

    def arrays(self):
        return [self.w1, self.b1, self.wp, self.bp, self.wv, self.bv]

    def copy(self) -> "PolicyParams":
        return PolicyParams(*[a.copy() for a in self.arrays()])


def init_policy(num_actions: int, rng: np.random.Generator,
                state_dim: int = 3, hidden: int = 32) -> PolicyParams:
    # shared layer random, heads zeroed: fresh policies start uniform
    w1 = rng.standard_normal((hidden, state_dim)) / np.sqrt(state_dim)
    return PolicyParams(w1, np.zeros(hidden),
                        np.zeros((num_actions, hidden)), np.zeros(num_actions),
                        np.zeros((1, hidden)), np.zeros(1))


def _forward(params: PolicyParams, s: np.ndarray):
    h = np.tanh(params.w1 @ s + params.b1)
    logits = params.wp @ h + params.bp
    logits = logits - np.max(logits)
    p = np.exp(logits)
    p /= np.sum(p)
    value = float((params.wv @ h)[0] + params.bv[0])
    return p, value, h, logits


def policy_forward(params: PolicyParams, state: SystemState):
    """(action probabilities, state value)."""
    p, v, _, _ = _forward(params, state.vector())
    return p, v


def log_prob(params: PolicyParams, state: SystemState, action_k: int) -> float:
    p, _ = policy_forward(params, state)
    return float(np.log(max(p[action_k], 1e-300)))


def logprob_gradient(params: PolicyParams, state: SystemState, action_k: int):
    """Analytic gradient of log pi(a|s) w.r.t. every parameter array."""
    s = state.vector()
    p, _v, h, _ = _forward(params, s)
    glogits = -p.copy()
    glogits[action_k] += 1.0
    gwp = np.outer(glogits, h)
    gbp = glogits.copy()
    gh = params.wp.T @ glogits
    gpre = gh * (1.0 - h * h)
    gw1 = np.outer(gpre, s)
    gb1 = gpre.copy()
    return [gw1, gb1, gwp, gbp, np.zeros_like(params.wv), np.zeros_like(params.bv)]


def select_action(params: PolicyParams, state: SystemState, mode: str,
                  rng: np.random.Generator, frame_index: int,
                  num_blocks: int, min_k: int = 0,
                  cold_start_frames: int = COLD_START_FRAMES):
    """Sample (or argmax) a split action; the first cold_start_frames frames
    of an episode force conservative local processing regardless of policy."""
    if mode not in ("sample", "greedy"):
        raise ConfigurationError(f"unknown mode {mode!r}")
    p, _ = policy_forward(params, state)
    if min_k > 0:
        masked = p.copy()
        masked[:min_k] = 0.0
        total = masked.sum()
        if total <= 0:
            masked[min_k:] = 1.0 / (len(masked) - min_k)
        else:
            masked /= total
        p = masked
    if frame_index < cold_start_frames:
        k = num_blocks
    elif mode == "greedy":
        k = int(np.argmax(p))
    else:
        k = int(rng.choice(len(p), p=p))
    quantize = 0 < k < num_blocks
    return SplitAction(k, quantize), float(np.log(max(p[k], 1e-300)))


# ---------------------------------------------------------------------------
# PPO
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Transition:
    state: np.ndarray
    action: int
    log_prob: float
    reward: float
    value: float
    done: bool


@dataclass
class PpoConfig:
    gamma: float = 0.99
    clip: float = 0.2
    gae_lambda: float = 0.95
    epochs: int = 4
    lr: float = 3e-3
    value_coef: float = 0.5
    entropy_coef: float = 0.01


@dataclass
class PpoOptimizer:
    """Adam state for the six parameter arrays."""
    m: list = None
    v: list = None
    t: int = 0

    def ensure(self, params: PolicyParams):
        if self.m is None:
            self.m = [np.zeros_like(a) for a in params.arrays()]
            self.v = [np.zeros_like(a) for a in params.arrays()]

    def step(self, params: PolicyParams, grads, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.ensure(params)
        self.t += 1
        c1 = 1.0 - beta1 ** self.t
        c2 = 1.0 - beta2 ** self.t
        for a, g, m, v in zip(params.arrays(), grads, self.m, self.v):
            m *= beta1; m += (1 - beta1) * g
            v *= beta2; v += (1 - beta2) * g * g
            a -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


def gae_advantages(transitions, gamma: float, lam: float, bootstrap_value: float = 0.0):
    """Generalized advantage estimates and discounted return targets."""
    n = len(transitions)
    adv = np.zeros(n)
    last = 0.0
    for i in range(n - 1, -1, -1):
        tr = transitions[i]
        next_v = 0.0 if tr.done else (bootstrap_value if i == n - 1 else transitions[i + 1].value)
        delta = tr.reward + gamma * next_v - tr.value
        last = delta + gamma * lam * (0.0 if tr.done else last)
        adv[i] = last
    returns = adv + np.array([tr.value for tr in transitions])
    return adv, returns


def _ppo_batch_grads(params: PolicyParams, states, actions, old_logp, adv, returns,
                     cfg: PpoConfig):
    n = states.shape[0]
    grads = [np.zeros_like(a) for a in params.arrays()]
    total_loss = 0.0
    ratios = np.zeros(n)
    for i in range(n):
        s = states[i]
        p, value, h, logits = _forward(params, s)
        logp_all = np.log(np.maximum(p, 1e-300))
        a = actions[i]
        ratio = float(np.exp(logp_all[a] - old_logp[i]))
        ratios[i] = ratio
        unclipped = ratio * adv[i]
        clipped = float(np.clip(ratio, 1.0 - cfg.clip, 1.0 + cfg.clip)) * adv[i]
        surr = min(unclipped, clipped)
        ent = float(-np.sum(p * logp_all))
        verr = value - returns[i]
        total_loss += -surr + cfg.value_coef * verr * verr - cfg.entropy_coef * ent

        # d(-surr)/dlogits: active only when the unclipped branch attains the min
        glogits = np.zeros_like(p)
        if unclipped <= clipped:
            coeff = -ratio * adv[i]
            glogits += coeff * (-p)
            glogits[a] += coeff
        # entropy bonus
        glogits += cfg.entropy_coef * p * (logp_all + ent)
        # value loss
        gvalue = 2.0 * cfg.value_coef * verr

        gwp = np.outer(glogits, h)
        gbp = glogits
        gwv = gvalue * h[None, :]
        gbv = np.array([gvalue])
        gh = params.wp.T @ glogits + gvalue * params.wv[0]
        gpre = gh * (1.0 - h * h)
        gw1 = np.outer(gpre, s)
        gb1 = gpre
        for acc, g in zip(grads, (gw1, gb1, gwp, gbp, gwv, gbv)):
            acc += g
    for g in grads:
        g /= n
    return grads, total_loss / n, ratios


def ppo_update(params: PolicyParams, transitions, cfg: PpoConfig,
               optimizer: PpoOptimizer):
    """In-place clipped-surrogate update over one trajectory.

    Advantages are GAE with per-batch normalization; the full trajectory is
    one minibatch, iterated cfg.epochs times. Returns diagnostics including
    post-update importance ratios against the behavior policy.
    """
    if not transitions:
        raise ConfigurationError("trajectory must be non-empty")
    adv, returns = gae_advantages(transitions, cfg.gamma, cfg.gae_lambda)
    std = np.std(adv)
    adv_n = (adv - np.mean(adv)) / (std + 1e-8)
    states = np.stack([t.state for t in transitions])
    actions = np.array([t.action for t in transitions])
    old_logp = np.array([t.log_prob for t in transitions])

    loss = ratios = None
    for _ in range(cfg.epochs):
        grads, loss, ratios = _ppo_batch_grads(
            params, states, actions, old_logp, adv_n, returns, cfg)
        if not np.isfinite(loss):
            raise TrainingDivergenceError("non-finite PPO loss")
        optimizer.step(params, grads, cfg.lr)
    return {"loss": float(loss), "ratios": ratios,
            "mean_advantage": float(np.mean(adv)),
            "mean_return": float(np.mean(returns))}


def train_ppo(env, params: PolicyParams, cfg: PpoConfig, total_steps: int,
              horizon: int, rng: np.random.Generator):
    """Generic on-policy loop: env exposes reset(rng)->state_vec and
    step(action, rng)->(state_vec, reward, done)."""
    optimizer = PpoOptimizer()
    s = env.reset(rng)
    steps = 0
    while steps < total_steps:
        batch = []
        for _ in range(min(horizon, total_steps - steps)):
            p, v, _, _ = _forward(params, s)
            a = int(rng.choice(len(p), p=p))
            logp = float(np.log(max(p[a], 1e-300)))
            s2, r, done = env.step(a, rng)
            batch.append(Transition(s.copy(), a, logp, r, v, done))
            s = env.reset(rng) if done else s2
            steps += 1
        ppo_update(params, batch, cfg, optimizer)
    return params


# ---------------------------------------------------------------------------
# Baselines
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RuleThresholds:
    bw_min_mbps: float
    cpu_max: float

    def __post_init__(self):
        if self.bw_min_mbps <= 0 or self.cpu_max <= 0:
            raise ConfigurationError("thresholds must be positive")


def rule_based_action(state: SystemState, thresholds: RuleThresholds,
                      num_blocks: int, max_bandwidth: float) -> SplitAction:
    """Offload fully when bandwidth is strictly above and CPU strictly below
    threshold, else stay local. Equality counts as not-offload."""
    bw_mbps = state.bandwidth_norm * max_bandwidth
    cpu = state.cpu_util
    if bw_mbps > thresholds.bw_min_mbps and cpu < thresholds.cpu_max:
        return SplitAction(0, False)
    return SplitAction(num_blocks, False)


def static_action(k_fixed: int, num_blocks: int) -> SplitAction:
    if not 0 <= k_fixed <= num_blocks:
        raise ConfigurationError(f"static k {k_fixed} outside 0..{num_blocks}")
    return SplitAction(k_fixed, 0 < k_fixed < num_blocks)


# ---------------------------------------------------------------------------
# Checkpoint wire format: header (dims) + little-endian float64 arrays
# ---------------------------------------------------------------------------

_CKPT_HEADER = struct.Struct("<III")  # state_dim, hidden, actions


def save_policy(params: PolicyParams, path):
    hidden, state_dim = params.w1.shape
    blob = _CKPT_HEADER.pack(state_dim, hidden, params.num_actions)
    for a in params.arrays():
        blob += a.astype("<f8").tobytes()
    with open(path, "wb") as f:
        f.write(blob)


def load_policy(path) -> PolicyParams:
    with open(path, "rb") as f:
        blob = f.read()
    state_dim, hidden, actions = _CKPT_HEADER.unpack_from(blob, 0)
    shapes = [(hidden, state_dim), (hidden,), (actions, hidden), (actions,),
              (1, hidden), (1,)]
    offset = _CKPT_HEADER.size
    arrays = []
    for shape in shapes:
        count = int(np.prod(shape))
        arr = np.frombuffer(blob, dtype="<f8", count=count, offset=offset)
        arrays.append(arr.reshape(shape).copy())
        offset += count * 8
    if offset != len(blob):
        raise ConfigurationError("checkpoint length mismatch")
    return PolicyParams(*arrays)
