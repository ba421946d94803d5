"""Trace-driven system model: link traces, INT8 payload compression, and
per-frame latency/energy/byte accounting for a split running at index k.

Default platform coefficients are fitted, not measured: they are chosen so
that the three canonical operating points (all-local, all-raw-offload, mixed
split) land on the energy table this lab is calibrated against. Byte counts
are carried in hundredths of a byte so that the per-frame share of a raw
audio clip (32768 B / 100 frames) sums exactly over clip windows.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .encoder import EncoderConfig
from .errors import ConfigurationError

RAW_CLIP_BYTES = 32768        # 1 s of 16 kHz 16-bit mono
FRAMES_PER_CLIP = 100         # 10 ms hop
QUANT_HEADER_BYTES = 8        # scale (f32) + zero point (i32)
SYNC_OVERHEAD_MJ = 0.4        # amortized downlink sync cost per frame


# ---------------------------------------------------------------------------
# Platform profiles
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PlatformProfile:
    name: str
    edge_block_ms: tuple        # per-block edge compute latency, len L
    edge_power_mw: float
    radio_mj_per_kb: float
    server_block_ms: tuple      # per-block server compute latency, len L

    def __post_init__(self):
        if min(self.edge_block_ms) < 0 or min(self.server_block_ms) < 0:
            raise ConfigurationError("block latencies must be non-negative")
        if self.edge_power_mw < 0 or self.radio_mj_per_kb < 0:
            raise ConfigurationError("power figures must be non-negative")


def pi_like_profile(num_blocks: int = 8) -> PlatformProfile:
    """Constrained-device profile.

    Fitted so that: all-local = 50 ms * 1.34 W + 0.4 mJ sync = 67.4 mJ/frame,
    and all-raw-offload = 327.68 B/frame * radio + 0.4 = 187.2 mJ/frame.
    """
    radio = 186.8 * 1024.0 / (RAW_CLIP_BYTES / FRAMES_PER_CLIP)
    return PlatformProfile(
        name="pi-like",
        edge_block_ms=tuple([50.0 / num_blocks] * num_blocks),
        edge_power_mw=1340.0,
        radio_mj_per_kb=radio,
        server_block_ms=tuple([24.0 / num_blocks] * num_blocks),
    )


def m2_like_profile(num_blocks: int = 8) -> PlatformProfile:
    """Capable-device profile: 3x faster local compute, higher draw."""
    base = pi_like_profile(num_blocks)
    return replace(
        base,
        name="m2-like",
        edge_block_ms=tuple(t / 3.0 for t in base.edge_block_ms),
        edge_power_mw=2800.0,
    )


PLATFORMS = {"pi-like": pi_like_profile, "m2-like": m2_like_profile}


def get_platform(name: str, num_blocks: int = 8) -> PlatformProfile:
    if name not in PLATFORMS:
        raise ConfigurationError(f"unknown platform {name!r}")
    return PLATFORMS[name](num_blocks)


# ---------------------------------------------------------------------------
# Network traces
# ---------------------------------------------------------------------------

MAX_BANDWIDTH_MBPS = 50.0


@dataclass(frozen=True)
class TracePoint:
    t_ms: float
    bandwidth_mbps: float
    rtt_ms: float
    loss: float


@dataclass
class NetworkTrace:
    t_ms: np.ndarray
    bandwidth_mbps: np.ndarray
    rtt_ms: np.ndarray
    loss: np.ndarray

    def __post_init__(self):
        if np.any(np.diff(self.t_ms) <= 0):
            raise ConfigurationError("trace timestamps must be strictly increasing")

    def at(self, t: float) -> TracePoint:
        i = int(np.searchsorted(self.t_ms, t, side="right")) - 1
        i = max(0, min(i, len(self.t_ms) - 1))
        return TracePoint(float(self.t_ms[i]), float(self.bandwidth_mbps[i]),
                          float(self.rtt_ms[i]), float(self.loss[i]))

    @property
    def duration_ms(self) -> float:
        return float(self.t_ms[-1])


def make_profile(kind: str, seed: int, duration_ms: float = 60000.0) -> NetworkTrace:
    """Synthetic link profiles within the 1-50 Mbps / 20-200 ms / 0-5% ranges.

    stable: constant comfortable link. variable: wandering mid-range link.
    congested: decent link with one contiguous collapse window (>= 5 s at
    <= 2 Mbps with elevated rtt and loss) for adaptation-time measurement.
    """
    if duration_ms <= 0:
        raise ConfigurationError("duration must be positive")
    rng = np.random.Generator(np.random.PCG64(seed))
    step = 500.0
    n = max(2, int(duration_ms // step) + 1)
    t = np.arange(n) * step

    if kind == "stable":
        bw = np.full(n, 25.0)
        rtt = np.full(n, 40.0)
        loss = np.zeros(n)
    elif kind == "variable":
        bw = np.empty(n)
        bw[0] = 18.0
        for i in range(1, n):
            bw[i] = np.clip(bw[i - 1] + rng.normal(0.0, 2.5), 4.0, 50.0)
        rtt = np.clip(60.0 + 15.0 * rng.standard_normal(n), 30.0, 90.0)
        loss = np.clip(rng.normal(0.005, 0.004, n), 0.0, 0.02)
    elif kind == "congested":
        bw = np.clip(24.0 + 2.0 * rng.standard_normal(n), 18.0, 30.0)
        rtt = np.clip(55.0 + 8.0 * rng.standard_normal(n), 40.0, 70.0)
        loss = np.clip(rng.normal(0.005, 0.003, n), 0.0, 0.01)
        # one contiguous collapse window somewhere in the middle half
        collapse_ms = float(rng.uniform(6000.0, 8000.0))
        latest = max(step, duration_ms - collapse_ms - 4000.0)
        start_ms = float(rng.uniform(duration_ms * 0.25, max(duration_ms * 0.25 + step, latest)))
        lo = np.searchsorted(t, start_ms)
        hi = min(n, int(lo + collapse_ms // step))
        if hi - lo < int(5000 // step) + 1:
            hi = min(n, lo + int(5000 // step) + 1)
        bw[lo:hi] = rng.uniform(1.0, 1.6, hi - lo)
        rtt[lo:hi] = rng.uniform(150.0, 170.0, hi - lo)
        loss[lo:hi] = rng.uniform(0.02, 0.05, hi - lo)
    else:
        raise ConfigurationError(f"unknown trace kind {kind!r}")
    return NetworkTrace(t, bw, rtt, loss)


def collapse_onset_ms(trace: NetworkTrace, threshold_mbps: float = 2.0):
    """First trace time at or below the collapse threshold, or None."""
    idx = np.nonzero(trace.bandwidth_mbps <= threshold_mbps)[0]
    return float(trace.t_ms[idx[0]]) if idx.size else None


def write_trace(trace: NetworkTrace, path):
    lines = ["t_ms,bandwidth_mbps,rtt_ms,loss"]
    for i in range(len(trace.t_ms)):
        # repr of builtin floats is the shortest exact round-trip form
        lines.append(",".join(repr(float(v)) for v in
                              (trace.t_ms[i], trace.bandwidth_mbps[i],
                               trace.rtt_ms[i], trace.loss[i])))
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")


def read_trace(path) -> NetworkTrace:
    with open(path) as f:
        header = f.readline().strip()
        if header != "t_ms,bandwidth_mbps,rtt_ms,loss":
            raise ConfigurationError(f"unexpected trace header {header!r}")
        cols = [[], [], [], []]
        for line in f:
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != 4:
                raise ConfigurationError(f"bad trace row {line!r}")
            for c, p in zip(cols, parts):
                c.append(float(p))
    return NetworkTrace(*[np.asarray(c) for c in cols])


# ---------------------------------------------------------------------------
# Asymmetric INT8 quantization (per-tensor, post-training)
# ---------------------------------------------------------------------------

_SCALE_FLOOR = 1e-8


@dataclass(frozen=True)
class QuantizationSpec:
    scale: float
    zero_point: int
    cal_min: float
    cal_max: float


def calibrate(values) -> QuantizationSpec:
    """Min/max calibration over a representative sample."""
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        raise ConfigurationError("cannot calibrate on empty values")
    if not np.all(np.isfinite(v)):
        raise ConfigurationError("calibration values must be finite")
    lo, hi = float(np.min(v)), float(np.max(v))
    scale = max((hi - lo) / 255.0, _SCALE_FLOOR)
    zp = int(np.clip(round(-lo / scale), 0, 255))
    return QuantizationSpec(scale, zp, lo, hi)


def quantize(values, spec: QuantizationSpec) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64)
    q = np.rint((v - spec.cal_min) / spec.scale)
    return np.clip(q, 0, 255).astype(np.uint8)


def dequantize(q, spec: QuantizationSpec) -> np.ndarray:
    return spec.cal_min + np.asarray(q, dtype=np.float64) * spec.scale


def quantize_dequantize(values, spec: QuantizationSpec) -> np.ndarray:
    """Round trip; per-element error <= scale/2 for in-range values,
    clamped to the representable range otherwise."""
    return dequantize(quantize(values, spec), spec)


# ---------------------------------------------------------------------------
# Payload, transmission, link estimation
# ---------------------------------------------------------------------------


def payload_bytes(k: int, quantized: bool, config: EncoderConfig,
                  local_processing: bool = True) -> int:
    """Uplink payload of one transmission unit at split k.

    k=0 is a raw 1-second clip; intermediate splits carry one frame's
    activation vector (1 B/scalar + header when quantized, else 4 B/scalar);
    k=L carries nothing when processing stays local, else the embedding.
    """
    L = config.num_blocks
    if not 0 <= k <= L:
        raise ConfigurationError(f"split index {k} outside 0..{L}")
    if k == 0:
        return RAW_CLIP_BYTES
    width = config.payload_width(k)
    if k == L and local_processing:
        return 0
    return width + QUANT_HEADER_BYTES if quantized else width * 4


def frame_payload_x100(k: int, quantized: bool, config: EncoderConfig,
                       local_processing: bool = True) -> int:
    """Per-frame uplink bytes in hundredths: raw clips amortize over the clip."""
    p = payload_bytes(k, quantized, config, local_processing)
    if k == 0:
        return p * 100 // FRAMES_PER_CLIP
    return p * 100


def transmit(payload_bytes_: float, point: TracePoint, rng: np.random.Generator):
    """(latency_ms, dropped): propagation rtt/2 plus serialization at the
    current bandwidth; independent Bernoulli loss per transmission."""
    if point.bandwidth_mbps <= 0:
        raise ConfigurationError("bandwidth must be positive")
    latency = point.rtt_ms / 2.0 + payload_bytes_ * 8.0 / (point.bandwidth_mbps * 1e6) * 1e3
    dropped = bool(rng.random() < point.loss)
    return latency, dropped


@dataclass(frozen=True)
class LinkState:
    ema_bandwidth_mbps: float
    ema_coefficient: float = 0.9

    def __post_init__(self):
        if self.ema_bandwidth_mbps < 0:
            raise ConfigurationError("ema must be non-negative")


def ema_update(link: LinkState, observed_mbps: float) -> LinkState:
    if observed_mbps < 0:
        raise ConfigurationError("observation must be non-negative")
    c = link.ema_coefficient
    return LinkState(c * link.ema_bandwidth_mbps + (1.0 - c) * observed_mbps, c)


# ---------------------------------------------------------------------------
# Per-frame cost accounting
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FrameCost:
    edge_ms: float
    tx_ms: float
    server_ms: float
    energy_mj: float
    tx_bytes_x100: int
    dropped: bool

    @property
    def latency_ms(self) -> float:
        return self.edge_ms + self.tx_ms + self.server_ms

    @property
    def tx_bytes(self) -> float:
        return self.tx_bytes_x100 / 100.0


def frame_cost(k: int, platform: PlatformProfile, point: TracePoint,
               quantized: bool, config: EncoderConfig,
               rng: np.random.Generator, local_processing: bool = True) -> FrameCost:
    """Latency/energy/bytes of one frame processed with split k.

    Latency for raw offload is experienced per clip (a frame inside a clip
    upload waits for the whole clip), while bytes amortize per frame so clip
    windows sum exactly. Dropped frames keep their edge and tx costs but
    deliver nothing, so server compute is zero.
    """
    L = config.num_blocks
    if not 0 <= k <= L:
        raise ConfigurationError(f"split index {k} outside 0..{L}")
    edge_ms = float(sum(platform.edge_block_ms[:k]))
    bytes_x100 = frame_payload_x100(k, quantized, config, local_processing)
    dropped = False
    tx_ms = 0.0
    if bytes_x100 > 0:
        wire_bytes = payload_bytes(k, quantized, config, local_processing)
        tx_ms, dropped = transmit(wire_bytes, point, rng)
    delivered = bytes_x100 > 0 and not dropped
    server_ms = float(sum(platform.server_block_ms[k:])) if delivered else 0.0
    energy = (edge_ms * platform.edge_power_mw / 1000.0
              + (bytes_x100 / 100.0) * platform.radio_mj_per_kb / 1024.0
              + SYNC_OVERHEAD_MJ)
    return FrameCost(edge_ms, tx_ms, server_ms, energy, bytes_x100, dropped)


def battery_life_hours(energy_mj_per_frame: float,
                       battery_mj: float = 1.8e8,
                       frames_per_hour: float = 180000.0) -> float:
    """Runtime of a 10,000 mAh / 5 V pack at the given steady per-frame draw."""
    if energy_mj_per_frame <= 0:
        raise ConfigurationError("energy per frame must be positive")
    return battery_mj / (energy_mj_per_frame * frames_per_hour)
