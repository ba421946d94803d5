"""Synthetic feature stream and linear-probe evaluation.

The stream is a regime-switching process shaped like ambient audio: long
steady segments (background classes, tight low-variance features) and short
transient bursts (event classes). Transient frames are both noisier and
semantically ambiguous -- their features drift along a mixture path between
the event prototype and a second class -- so a downstream mixture memory
genuinely spreads its posterior on them, which is what makes posterior
entropy track difficulty.
"""

from __future__ import annotations

import math

from dataclasses import dataclass

import numpy as np

from .encoder import StreamFrame
from .errors import ConfigurationError, DegenerateInputError
from .numerics import make_rng

FRAME_HOP_MS = 10


@dataclass(frozen=True)
class SyntheticStreamSpec:
    num_classes: int = 15
    steady_fraction: float = 0.6
    transient_fraction: float = 0.4
    input_dim: int = 128
    num_transient_classes: int = 6
    steady_sigma: float = 0.04
    transient_sigma: float = 0.35
    steady_mean_frames: int = 220
    transient_mean_frames: int = 45
    noise_autocorr: float = 0.99   # adjacent analysis windows overlap heavily
    prototype_scale: float = 1.0

    def __post_init__(self):
        if abs(self.steady_fraction + self.transient_fraction - 1.0) > 1e-9:
            raise ConfigurationError("regime fractions must sum to 1")
        if not 0 < self.num_transient_classes < self.num_classes:
            raise ConfigurationError("need both steady and transient classes")

    @property
    def num_steady_classes(self) -> int:
        return self.num_classes - self.num_transient_classes

    def transient_classes(self) -> set:
        return set(range(self.num_steady_classes, self.num_classes))


def _steady_segment_prob(spec: SyntheticStreamSpec) -> float:
    """Per-segment steady probability giving the requested frame share."""
    s, t = spec.steady_mean_frames, spec.transient_mean_frames
    f = spec.steady_fraction
    return f * t / (f * t + (1.0 - f) * s)


def generate_stream(spec: SyntheticStreamSpec, seed: int, num_frames: int):
    """Deterministic labeled frame sequence at a 10 ms hop."""
    if num_frames < 1:
        raise ConfigurationError("num_frames must be >= 1")
    rng = make_rng(seed)
    protos = rng.standard_normal((spec.num_classes, spec.input_dim))
    protos *= spec.prototype_scale / np.sqrt(spec.input_dim)

    p_steady = _steady_segment_prob(spec)
    frames = []
    i = 0
    while i < num_frames:
        steady = (rng.random() < p_steady) if spec.transient_fraction > 0 else True
        if steady:
            cls = int(rng.integers(0, spec.num_steady_classes))
            length = max(5, int(rng.poisson(spec.steady_mean_frames)))
            sigma = spec.steady_sigma
            base = protos[cls]
        else:
            cls = int(rng.integers(spec.num_steady_classes, spec.num_classes))
            length = max(5, int(rng.poisson(spec.transient_mean_frames)))
            sigma = spec.transient_sigma
            # ambiguous event: features sit on a path between the event
            # prototype and a per-segment confuser class, so each event is a
            # fresh inter-cluster region the memory has not resolved
            other = int(rng.integers(0, spec.num_classes - 1))
            if other >= cls:
                other += 1
            mix = float(rng.uniform(0.45, 0.8))
        length = min(length, num_frames - i)
        drift = rng.standard_normal(spec.input_dim) * sigma * 0.5
        phi = spec.noise_autocorr
        innov = sigma * math.sqrt(max(1.0 - phi * phi, 1e-9))
        noise = rng.standard_normal(spec.input_dim) * sigma
        for _ in range(length):
            noise = phi * noise + rng.standard_normal(spec.input_dim) * innov
            scale = 1.0
            if not steady:
                mix = float(np.clip(mix + rng.normal(0.0, 0.04), 0.4, 0.9))
                base = mix * protos[cls] + (1.0 - mix) * protos[other]
                scale = 1.0 + rng.exponential(0.5)   # bursty amplitude
            frames.append(StreamFrame(i * FRAME_HOP_MS, base + drift + scale * noise,
                                      cls))
            i += 1
    return frames


def regime_mask(spec: SyntheticStreamSpec, frames) -> np.ndarray:
    """True where the frame belongs to a transient class."""
    transient = spec.transient_classes()
    return np.array([f.label in transient for f in frames])


# ---------------------------------------------------------------------------
# Linear probe
# ---------------------------------------------------------------------------


def _softmax_rows(logits):
    logits = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(logits)
    return e / e.sum(axis=1, keepdims=True)


def linear_probe(embeddings, labels, split_seed: int,
                 lr: float = 0.5, max_iters: int = 400, tol: float = 1e-5) -> float:
    """Held-out accuracy of multinomial logistic regression on frozen
    embeddings: 80/20 shuffle split, full-batch gradient descent."""
    x = np.asarray(embeddings, dtype=np.float64)
    y = np.asarray(labels)
    classes = np.unique(y)
    if classes.size < 2:
        raise DegenerateInputError("probe needs at least 2 classes")
    class_index = {c: i for i, c in enumerate(classes)}
    yi = np.array([class_index[c] for c in y])

    rng = make_rng(split_seed)
    order = rng.permutation(x.shape[0])
    cut = max(1, int(0.8 * x.shape[0]))
    train, test = order[:cut], order[cut:]
    if test.size == 0:
        raise ConfigurationError("not enough samples for a held-out split")

    n, d = train.size, x.shape[1]
    k = classes.size
    w = np.zeros((d, k))
    b = np.zeros(k)
    onehot = np.zeros((n, k))
    onehot[np.arange(n), yi[train]] = 1.0
    xt = x[train]
    prev = np.inf
    for _ in range(max_iters):
        p = _softmax_rows(xt @ w + b)
        loss = -np.mean(np.log(np.maximum(p[np.arange(n), yi[train]], 1e-300)))
        gw = xt.T @ (p - onehot) / n
        gb = np.mean(p - onehot, axis=0)
        w -= lr * gw
        b -= lr * gb
        if abs(prev - loss) < tol:
            break
        prev = loss
    pred = np.argmax(x[test] @ w + b, axis=1)
    return float(np.mean(pred == yi[test]))
