"""Distributional memory: a diagonal-covariance Gaussian mixture over unit
embeddings, maintained by decayed streaming EM.

The mixture replaces an explicit negative queue: virtual negatives are drawn
from components near the anchor's component, normalized, used once and
discarded. Posterior entropy over components doubles as the per-frame
uncertainty signal consumed by the control plane.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, DegenerateInputError, InvalidStateError
from .numerics import l2_normalize

_LOG_2PI = math.log(2.0 * math.pi)


@dataclass
class GmmState:
    num_components: int
    dim: int
    decay: float = 0.995
    variance_floor: float = 1e-4
    init_variance: float = 0.1
    reseed_variance: float = 0.02    # tight enough for a reseed to claim its region
    reseed_count: float = 0.5
    warmup_separation: float = 0.1   # min distance between warm-up seed means
    warmup_deadline: int = 0         # 0: wait for C separated seeds; else fill at deadline
    weights: np.ndarray = None          # (C,)
    means: np.ndarray = None            # (C, d)
    variances: np.ndarray = None        # (C, d) diagonal
    counts: np.ndarray = None           # decayed soft counts
    sums: np.ndarray = None             # decayed sum of r*z
    sumsqs: np.ndarray = None           # decayed sum of r*z^2
    frames_seen: int = 0
    initialized: bool = False
    _warmup: list = field(default_factory=list)

    def __post_init__(self):
        if self.num_components < 2:
            raise ConfigurationError("mixture needs at least 2 components")
        if self.dim < 1:
            raise ConfigurationError("dim must be >= 1")

    def copy(self) -> "GmmState":
        g = GmmState(self.num_components, self.dim, self.decay,
                     self.variance_floor, self.init_variance,
                     self.reseed_variance, self.reseed_count,
                     self.warmup_separation, self.warmup_deadline)
        g.frames_seen = self.frames_seen
        g.initialized = self.initialized
        g._warmup = [w.copy() for w in self._warmup]
        for name in ("weights", "means", "variances", "counts", "sums", "sumsqs"):
            a = getattr(self, name)
            setattr(g, name, None if a is None else a.copy())
        return g


def make_gmm(num_components: int = 64, dim: int = 128, decay: float = 0.995,
             variance_floor: float = 1e-4, init_variance: float = 0.1,
             reseed_variance: float = 0.02, reseed_count: float = 0.5,
             warmup_separation: float = 0.1, warmup_deadline: int = 0) -> GmmState:
    return GmmState(num_components, dim, decay, variance_floor, init_variance,
                    reseed_variance, reseed_count, warmup_separation,
                    warmup_deadline)


def _initialize_from(gmm: GmmState, seeds: list):
    C, d = gmm.num_components, gmm.dim
    gmm.means = np.stack(seeds).astype(np.float64)
    gmm.variances = np.full((C, d), gmm.init_variance)
    gmm.weights = np.full(C, 1.0 / C)
    gmm.counts = np.ones(C)
    gmm.sums = gmm.means.copy()
    gmm.sumsqs = gmm.means ** 2 + gmm.variances
    gmm.initialized = True
    gmm._warmup = []


def log_component_densities(gmm: GmmState, z: np.ndarray) -> np.ndarray:
    """log pi_c + log N(z; mu_c, diag Sigma_c) for every component."""
    diff = z[None, :] - gmm.means
    quad = np.sum(diff * diff / gmm.variances, axis=1)
    logdet = np.sum(np.log(gmm.variances), axis=1)
    return np.log(gmm.weights) - 0.5 * (quad + logdet + gmm.dim * _LOG_2PI)


def posterior(gmm: GmmState, z) -> np.ndarray:
    """Bayes responsibilities p(c|z), computed in the log domain."""
    if not gmm.initialized:
        raise InvalidStateError("mixture not initialized (still warming up)")
    z = np.asarray(z, dtype=np.float64)
    if z.shape[0] != gmm.dim:
        raise ConfigurationError(f"embedding dim {z.shape[0]} != mixture dim {gmm.dim}")
    if not np.any(gmm.weights > 0):
        raise InvalidStateError("all mixture weights are zero")
    lp = log_component_densities(gmm, z)
    lp -= np.max(lp)
    p = np.exp(lp)
    return p / np.sum(p)


def assign_component(gmm: GmmState, z) -> int:
    return int(np.argmax(posterior(gmm, z)))


def entropy_of(responsibilities: np.ndarray) -> float:
    p = responsibilities[responsibilities > 0]
    return float(-np.sum(p * np.log(p)))


def em_update(gmm: GmmState, z, responsibilities=None) -> GmmState:
    """One decayed streaming EM step (in place; returns the same object).

    Before C distinct embeddings have been seen, updates only collect
    initialization seeds. After that: responsibilities act as soft counts,
    all sufficient statistics decay by rho per frame, and the mixture
    parameters are re-derived from the statistics. Components whose decayed
    count collapses are re-seeded at the current embedding so C stays fixed.
    """
    z = np.asarray(z, dtype=np.float64)
    gmm.frames_seen += 1
    if not gmm.initialized:
        # only genuinely separated embeddings seed components; near-duplicate
        # seeds would split posteriors inside tight clusters forever
        if all(np.linalg.norm(z - w) > gmm.warmup_separation for w in gmm._warmup):
            gmm._warmup.append(z.copy())
        deadline_hit = (gmm.warmup_deadline > 0
                        and gmm.frames_seen >= gmm.warmup_deadline
                        and len(gmm._warmup) >= 2)
        if len(gmm._warmup) >= gmm.num_components or deadline_hit:
            seeds = list(gmm._warmup)
            rng = np.random.Generator(np.random.PCG64(gmm.frames_seen))
            while len(seeds) < gmm.num_components:
                base = seeds[int(rng.integers(len(gmm._warmup)))]
                seeds.append(base + rng.standard_normal(gmm.dim)
                             * np.sqrt(gmm.init_variance) * 0.5)
            _initialize_from(gmm, seeds[:gmm.num_components])
        return gmm

    r = posterior(gmm, z) if responsibilities is None else responsibilities
    rho = gmm.decay
    gmm.counts *= rho
    gmm.counts += r
    gmm.sums *= rho
    gmm.sums += r[:, None] * z[None, :]
    zz = z * z
    gmm.sumsqs *= rho
    gmm.sumsqs += r[:, None] * zz[None, :]

    dead = gmm.counts < 1e-3
    if np.any(dead):
        # re-seed at the live embedding, tight enough to claim the local
        # region from broader established components
        gmm.counts[dead] = gmm.reseed_count
        gmm.sums[dead] = gmm.reseed_count * z[None, :]
        gmm.sumsqs[dead] = gmm.reseed_count * (zz + gmm.reseed_variance)[None, :]

    gmm.weights = gmm.counts / np.sum(gmm.counts)
    gmm.means = gmm.sums / gmm.counts[:, None]
    var = gmm.sumsqs / gmm.counts[:, None] - gmm.means * gmm.means
    gmm.variances = np.maximum(var, gmm.variance_floor, out=var)
    return gmm


def boundary_weights(gmm: GmmState, anchor_component: int, hardness: float) -> np.ndarray:
    """Normalized selection distribution over non-anchor components:
    proportional to pi_c * exp(-||mu_anchor - mu_c||^2 / (2 hardness^2))."""
    if not gmm.initialized:
        raise InvalidStateError("mixture not initialized")
    if gmm.num_components < 2:
        raise DegenerateInputError("need at least 2 components to sample negatives")
    if not 0 <= anchor_component < gmm.num_components:
        raise ConfigurationError("anchor component out of range")
    d2 = np.sum((gmm.means - gmm.means[anchor_component]) ** 2, axis=1)
    logw = np.log(np.maximum(gmm.weights, 1e-300)) - d2 / (2.0 * hardness * hardness)
    logw[anchor_component] = -np.inf
    logw -= np.max(logw[np.isfinite(logw)])
    w = np.exp(logw)
    w[anchor_component] = 0.0
    return w / np.sum(w)


def sample_virtual_negatives(gmm: GmmState, anchor, anchor_component: int,
                             count: int, hardness: float,
                             rng: np.random.Generator) -> np.ndarray:
    """Boundary-aware virtual negatives: pick a non-anchor component by the
    proximity-weighted distribution, draw from its Gaussian, normalize."""
    if count < 1:
        raise ConfigurationError("count must be >= 1")
    w = boundary_weights(gmm, anchor_component, hardness)
    # inverse-cdf categorical: much cheaper than Generator.choice with probs
    comps = np.searchsorted(np.cumsum(w), rng.random(count), side="right")
    comps = np.minimum(comps, gmm.num_components - 1)
    eps = rng.standard_normal((count, gmm.dim))
    draws = gmm.means[comps] + eps * np.sqrt(gmm.variances[comps])
    norms = np.linalg.norm(draws, axis=1, keepdims=True)
    norms[norms < 1e-12] = 1.0
    return draws / norms


def uncertainty(gmm: GmmState, z) -> float:
    """Shannon entropy of the component posterior, in [0, ln C].

    An uninitialized mixture is maximally uncertain by convention.
    """
    if not gmm.initialized:
        return math.log(gmm.num_components)
    p = posterior(gmm, z)
    nz = p[p > 0]
    h = float(-np.sum(nz * np.log(nz)))
    return min(max(h, 0.0), math.log(gmm.num_components))


def serialized_size_bytes(gmm: GmmState, precision: int) -> int:
    """Stored size of (means, variances, weights) at the given bytes/scalar."""
    if precision not in (2, 4, 8):
        raise ConfigurationError("precision must be 2, 4, or 8 bytes per scalar")
    C, d = gmm.num_components, gmm.dim
    return 2 * C * d * precision + C * precision


_HEADER = struct.Struct("<IHH")  # C, d, precision: 8 bytes
_DTYPES = {2: "<f2", 4: "<f4", 8: "<f8"}


def pack_sync_payload(gmm: GmmState, precision: int = 2) -> bytes:
    """Wire form of the mixture: 8-byte header then [pi | mu | Sigma], little-endian."""
    if not gmm.initialized:
        raise InvalidStateError("cannot serialize an uninitialized mixture")
    if precision not in _DTYPES:
        raise ConfigurationError("precision must be 2, 4, or 8")
    flat = np.concatenate([gmm.weights, gmm.means.ravel(), gmm.variances.ravel()])
    return _HEADER.pack(gmm.num_components, gmm.dim, precision) + \
        flat.astype(_DTYPES[precision]).tobytes()


def unpack_sync_payload(buf: bytes):
    """Inverse of pack_sync_payload; returns (weights, means, variances)."""
    C, d, precision = _HEADER.unpack_from(buf, 0)
    if precision not in _DTYPES:
        raise ConfigurationError("bad precision field in sync payload")
    flat = np.frombuffer(buf, dtype=_DTYPES[precision], offset=_HEADER.size).astype(np.float64)
    expected = C + 2 * C * d
    if flat.size != expected:
        raise ConfigurationError("sync payload length mismatch")
    weights = flat[:C]
    means = flat[C:C + C * d].reshape(C, d)
    variances = flat[C + C * d:].reshape(C, d)
    return weights, means, variances
