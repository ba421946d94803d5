"""Splitable L-block encoder.

Blocks are dense layers of constant hidden width; hidden blocks use tanh, the
final block is linear and its output is projected onto the unit sphere. The
same parameters can be evaluated as an edge prefix (blocks 1..k) plus a server
suffix (blocks k+1..L), and the composition is bit-identical to a single full
pass, which is the core correctness property of split execution.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import ConfigurationError, DegenerateInputError, TrainingDivergenceError
from .numerics import l2_normalize, log_sum_exp


@dataclass(frozen=True)
class EncoderConfig:
    num_blocks: int = 8
    input_dim: int = 128
    hidden_dim: int = 128
    embed_dim: int = 128

    def __post_init__(self):
        if self.num_blocks < 1 or min(self.input_dim, self.hidden_dim, self.embed_dim) < 1:
            raise ConfigurationError("encoder dims must be >= 1")

    def block_dims(self, i: int) -> tuple[int, int]:
        """(in, out) dims of block i, 1-indexed."""
        din = self.input_dim if i == 1 else self.hidden_dim
        dout = self.embed_dim if i == self.num_blocks else self.hidden_dim
        return din, dout

    def payload_width(self, k: int) -> int:
        """Number of scalars crossing the link when splitting after block k."""
        if k == 0:
            return self.input_dim
        if k == self.num_blocks:
            return self.embed_dim
        return self.hidden_dim


@dataclass
class EncoderState:
    config: EncoderConfig
    params: list            # [(W, b)] per block
    step: int = 0
    m: list = field(default_factory=list)   # Adam first moments
    v: list = field(default_factory=list)   # Adam second moments

    def copy(self) -> "EncoderState":
        return EncoderState(
            self.config,
            [(W.copy(), b.copy()) for W, b in self.params],
            self.step,
            [(mw.copy(), mb.copy()) for mw, mb in self.m],
            [(vw.copy(), vb.copy()) for vw, vb in self.v],
        )

    def num_params(self) -> int:
        return sum(W.size + b.size for W, b in self.params)


def init_encoder(config: EncoderConfig, rng: np.random.Generator) -> EncoderState:
    params, m, v = [], [], []
    for i in range(1, config.num_blocks + 1):
        din, dout = config.block_dims(i)
        W = rng.standard_normal((dout, din)) / np.sqrt(din)
        b = np.zeros(dout)
        params.append((W, b))
        m.append((np.zeros_like(W), np.zeros_like(b)))
        v.append((np.zeros_like(W), np.zeros_like(b)))
    return EncoderState(config, params, 0, m, v)


@dataclass(frozen=True)
class StreamFrame:
    timestamp_ms: int
    features: np.ndarray
    label: Optional[int] = None


@dataclass(frozen=True)
class AugmentedPair:
    view_a: np.ndarray
    view_b: np.ndarray


def _one_view(features, rng, sigma, mask_width):
    v = features + (rng.standard_normal(features.shape[0]) * sigma if sigma > 0 else 0.0)
    v = np.asarray(v, dtype=np.float64).copy()
    if mask_width > 0:
        w = min(mask_width, v.shape[0])
        start = int(rng.integers(0, v.shape[0] - w + 1))
        v[start:start + w] = 0.0
    return v


def augment(frame: StreamFrame, rng: np.random.Generator,
            sigma: float = 0.05, mask_width: int = 16) -> AugmentedPair:
    """Two independent views: additive Gaussian noise, then a contiguous zeroed band."""
    f = np.asarray(frame.features, dtype=np.float64)
    return AugmentedPair(_one_view(f, rng, sigma, mask_width),
                         _one_view(f, rng, sigma, mask_width))


# ---------------------------------------------------------------------------
# Split evaluation
# ---------------------------------------------------------------------------


def _check_k(state: EncoderState, k: int):
    if not 0 <= k <= state.config.num_blocks:
        raise ConfigurationError(f"split index {k} outside 0..{state.config.num_blocks}")


def _run_blocks(state: EncoderState, h: np.ndarray, first: int, last: int) -> np.ndarray:
    """Apply blocks first..last (1-indexed, inclusive); tanh except final block."""
    L = state.config.num_blocks
    for i in range(first, last + 1):
        W, b = state.params[i - 1]
        if W.shape[1] != h.shape[0]:
            raise ConfigurationError(
                f"block {i} expects dim {W.shape[1]}, got {h.shape[0]}"
            )
        h = W @ h + b
        if i < L:
            h = np.tanh(h)
    return h


def encode_prefix(state: EncoderState, features, k: int) -> np.ndarray:
    """Edge-side pass up to block k; k=0 is the identity, k=L the full embedding."""
    _check_k(state, k)
    h = np.asarray(features, dtype=np.float64)
    if k == 0:
        return h.copy()
    h = _run_blocks(state, h, 1, k)
    if k == state.config.num_blocks:
        h = l2_normalize(h)
    return h


def encode_suffix(state: EncoderState, intermediate, k: int) -> np.ndarray:
    """Server-side continuation from a k-level activation to the unit embedding."""
    _check_k(state, k)
    h = np.asarray(intermediate, dtype=np.float64)
    L = state.config.num_blocks
    if k == L:
        return h.copy()
    h = _run_blocks(state, h, k + 1, L)
    return l2_normalize(h)


def encode_full(state: EncoderState, features) -> np.ndarray:
    return encode_suffix(state, np.asarray(features, dtype=np.float64), 0)


def forward_from(state: EncoderState, h, start_k: int = 0):
    """Pass from level start_k to the unit embedding, keeping the per-block
    cache needed for backprop. start_k=0 consumes raw features."""
    _check_k(state, start_k)
    L = state.config.num_blocks
    h = np.asarray(h, dtype=np.float64)
    pres, outs = [], [h]
    for i in range(start_k + 1, L + 1):
        W, b = state.params[i - 1]
        pre = W @ h + b
        h = np.tanh(pre) if i < L else pre
        pres.append(pre)
        outs.append(h)
    norm = np.linalg.norm(h)
    if norm == 0.0:
        raise DegenerateInputError("zero pre-normalization embedding")
    z = h / norm
    return z, {"pres": pres, "outs": outs, "norm": norm, "z": z, "start": start_k}


def backward_from(state: EncoderState, cache, grad_z):
    """Backprop a gradient w.r.t. the unit embedding to per-block (dW, db).

    Blocks at or below the cache's start level get zero gradients.
    """
    L = state.config.num_blocks
    start = cache["start"]
    z, norm = cache["z"], cache["norm"]
    grad_z = np.asarray(grad_z, dtype=np.float64)
    g = (grad_z - np.dot(grad_z, z) * z) / norm
    grads = [None] * L
    for i in range(L, start, -1):
        W, _b = state.params[i - 1]
        j = i - start - 1  # index inside the cache
        # outs[j+1] is the activation output of block i, so tanh' = 1 - y^2
        gpre = g if i == L else g * (1.0 - cache["outs"][j + 1] ** 2)
        grads[i - 1] = (gpre[:, None] * cache["outs"][j][None, :], gpre)
        g = W.T @ gpre
    for i in range(start):
        W, b = state.params[i]
        grads[i] = (np.zeros_like(W), np.zeros_like(b))
    return grads


def forward_full(state: EncoderState, features):
    return forward_from(state, features, 0)


def backward_full(state: EncoderState, cache, grad_z):
    return backward_from(state, cache, grad_z)


def zero_grads(state: EncoderState):
    return [(np.zeros_like(W), np.zeros_like(b)) for W, b in state.params]


def add_grads(acc, grads, scale=1.0):
    for (aW, ab), (gW, gb) in zip(acc, grads):
        aW += scale * gW
        ab += scale * gb
    return acc


# ---------------------------------------------------------------------------
# Streaming InfoNCE with virtual negatives
# ---------------------------------------------------------------------------


def pair_forward(state: EncoderState, view_a, view_b):
    """Both augmented views through the encoder as one column-stacked batch.

    Returns (za, zb, cache); one matmul per block instead of two.
    """
    L = state.config.num_blocks
    h = np.stack([view_a, view_b], axis=1)   # (din, 2)
    outs = [h]
    for i in range(1, L + 1):
        W, b = state.params[i - 1]
        h = W @ h + b[:, None]
        if i < L:
            h = np.tanh(h)
        outs.append(h)
    norms = np.sqrt(np.sum(h * h, axis=0))
    if np.any(norms == 0.0):
        raise DegenerateInputError("zero pre-normalization embedding")
    z = h / norms[None, :]
    return z[:, 0], z[:, 1], {"outs": outs, "norms": norms, "z": z}


def pair_backward_accumulate(state: EncoderState, cache, gz_a, gz_b, acc):
    """Backprop per-view embedding gradients, adding into acc in place."""
    L = state.config.num_blocks
    z, norms = cache["z"], cache["norms"]
    gz = np.stack([gz_a, gz_b], axis=1)
    g = (gz - np.sum(gz * z, axis=0)[None, :] * z) / norms[None, :]
    for i in range(L, 0, -1):
        W, _b = state.params[i - 1]
        y = cache["outs"][i]
        gpre = g if i == L else g * (1.0 - y * y)
        aw, ab = acc[i - 1]
        aw += gpre @ cache["outs"][i - 1].T
        ab += np.sum(gpre, axis=1)
        if i > 1:
            g = W.T @ gpre
    return acc


def edge_loss_from_forwards(state: EncoderState, za, cache_a, zb, cache_b,
                            negatives, temperature: float):
    """Loss/grads given already-computed view forwards (hot-path variant)."""
    negatives = np.atleast_2d(np.asarray(negatives, dtype=np.float64))
    if negatives.size == 0:
        raise DegenerateInputError("negatives must be non-empty")
    if temperature <= 0:
        raise ConfigurationError("temperature must be positive")

    s_pos = np.dot(za, zb) / temperature
    s_neg = negatives @ za / temperature
    logits = np.concatenate(([s_pos], s_neg))
    lse = log_sum_exp(logits)
    loss = lse - s_pos
    p = np.exp(logits - lse)

    # d loss / d za and / d zb through the softmax
    g_za = ((p[0] - 1.0) * zb + p[1:] @ negatives) / temperature
    g_zb = (p[0] - 1.0) * za / temperature

    grads = backward_full(state, cache_a, g_za)
    grads = add_grads(grads, backward_full(state, cache_b, g_zb))
    return float(loss), grads


def edge_loss_and_grad(state: EncoderState, pair: AugmentedPair, negatives,
                       temperature: float):
    """Contrastive loss of one augmented pair against synthesized negatives.

    Similarity is the dot product of unit embeddings; the denominator is the
    positive term plus one term per negative. Gradients flow through both
    views (shared parameters, summed).
    """
    za, cache_a = forward_full(state, pair.view_a)
    zb, cache_b = forward_full(state, pair.view_b)
    return edge_loss_from_forwards(state, za, cache_a, zb, cache_b,
                                   negatives, temperature)


def adam_step(state: EncoderState, grads, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> EncoderState:
    """In-place Adam update with bias correction; returns the same state."""
    for (gW, gb) in grads:
        if not (np.all(np.isfinite(gW)) and np.all(np.isfinite(gb))):
            raise TrainingDivergenceError("non-finite gradient in adam_step")
    state.step += 1
    t = state.step
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for i, (gW, gb) in enumerate(grads):
        mW, mb = state.m[i]
        vW, vb = state.v[i]
        mW *= beta1; mW += (1 - beta1) * gW
        mb *= beta1; mb += (1 - beta1) * gb
        vW *= beta2; vW += (1 - beta2) * gW * gW
        vb *= beta2; vb += (1 - beta2) * gb * gb
        W, b = state.params[i]
        W -= lr * (mW / c1) / (np.sqrt(vW / c2) + eps)
        b -= lr * (mb / c1) / (np.sqrt(vb / c2) + eps)
    return state
