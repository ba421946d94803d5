import numpy as np
import pytest

from splitlab.encoder import EncoderConfig
from splitlab.errors import ConfigurationError
from splitlab.numerics import make_rng
from splitlab.system import (FRAMES_PER_CLIP, MAX_BANDWIDTH_MBPS, RAW_CLIP_BYTES,
                             LinkState, TracePoint, battery_life_hours, calibrate,
                             collapse_onset_ms, dequantize, ema_update, frame_cost,
                             frame_payload_x100, get_platform, make_profile,
                             payload_bytes, pi_like_profile, quantize,
                             quantize_dequantize, read_trace, transmit,
                             write_trace)

ENC = EncoderConfig()


class TestCalibration:
    def test_identity_range(self):
        spec = calibrate(np.array([0.0, 255.0, 17.0]))
        assert spec.scale == 1.0
        assert spec.zero_point == 0

    def test_symmetric_unit_range(self):
        spec = calibrate(np.array([-1.0, 1.0]))
        assert abs(spec.scale - 2.0 / 255.0) < 1e-15
        assert spec.zero_point == 128  # round(1/(2/255)) = round(127.5)

    def test_constant_input_roundtrip_exact(self):
        values = np.full(16, 3.75)
        spec = calibrate(values)
        assert spec.scale == 1e-8
        np.testing.assert_array_equal(quantize_dequantize(values, spec), values)


class TestQuantizeDequantize:
    def test_grid_points_exact(self):
        rng = make_rng(0)
        spec = calibrate(rng.uniform(-3, 5, 100))
        grid = spec.cal_min + np.arange(256) * spec.scale
        np.testing.assert_array_equal(quantize_dequantize(grid, spec), grid)

    def test_error_bound_random(self):
        rng = make_rng(1)
        for _ in range(50):
            values = rng.uniform(-10, 10, 200)
            spec = calibrate(values)
            err = np.abs(quantize_dequantize(values, spec) - values)
            assert np.max(err) <= spec.scale / 2 + 1e-12

    def test_above_max_clamps(self):
        spec = calibrate(np.array([0.0, 1.0]))
        top_grid = spec.cal_min + 255 * spec.scale
        assert quantize_dequantize(np.array([5.0]), spec)[0] == top_grid
        assert quantize(np.array([5.0]), spec)[0] == 255


class TestPayload:
    def test_raw_batch_of_eight(self):
        assert 8 * payload_bytes(0, False, ENC) == 262144

    def test_quantized_intermediate(self):
        assert payload_bytes(4, True, ENC) == 136

    def test_unquantized_intermediate(self):
        assert payload_bytes(4, False, ENC) == 512

    def test_local_terminal_zero(self):
        assert payload_bytes(ENC.num_blocks, True, ENC, local_processing=True) == 0

    def test_embedding_uplink_when_not_local(self):
        assert payload_bytes(ENC.num_blocks, True, ENC, local_processing=False) == 136

    def test_quantization_never_grows_payload(self):
        for k in range(ENC.num_blocks + 1):
            assert (payload_bytes(k, True, ENC) <= payload_bytes(k, False, ENC)
                    or k == 0)

    def test_per_frame_share_sums_exactly(self):
        # 8 clips = 800 frames of the raw share, exactly 262144 bytes
        per_frame = frame_payload_x100(0, False, ENC)
        assert per_frame * 8 * FRAMES_PER_CLIP % 100 == 0
        assert per_frame * 8 * FRAMES_PER_CLIP // 100 == 262144

    def test_out_of_range_k(self):
        with pytest.raises(ConfigurationError):
            payload_bytes(ENC.num_blocks + 1, False, ENC)


class TestTransmit:
    def test_serialization_time(self):
        pt = TracePoint(0, 10.0, 0.0, 0.0)
        latency, dropped = transmit(125000, pt, make_rng(2))
        assert abs(latency - 100.0) < 1e-9
        assert not dropped

    def test_zero_payload_is_half_rtt(self):
        pt = TracePoint(0, 10.0, 80.0, 0.0)
        latency, _ = transmit(0, pt, make_rng(3))
        assert latency == 40.0

    def test_drop_rate_monte_carlo(self):
        pt = TracePoint(0, 10.0, 40.0, 0.05)
        rng = make_rng(4)
        drops = sum(transmit(100, pt, rng)[1] for _ in range(100000))
        assert 0.045 <= drops / 100000 <= 0.055


class TestEma:
    def test_constant_converges(self):
        link = LinkState(50.0, 0.9)
        for _ in range(500):
            link = ema_update(link, 7.0)
        assert abs(link.ema_bandwidth_mbps - 7.0) < 1e-4

    def test_zero_coefficient_tracks_latest(self):
        link = LinkState(50.0, 0.0)
        link = ema_update(link, 3.0)
        assert link.ema_bandwidth_mbps == 3.0

    def test_geometric_decay_step_change(self):
        # oracle: after t updates the residual is (10-2) * 0.9^t, so the
        # estimate reaches 10% of the target only at t = 36; at t = 22 the
        # residual is still 8 * 0.9^22 = 0.7878...
        link = LinkState(10.0, 0.9)
        for t in range(36):
            if t == 22:
                assert abs(link.ema_bandwidth_mbps - (2.0 + 8.0 * 0.9 ** 22)) < 1e-9
            link = ema_update(link, 2.0)
        assert abs(link.ema_bandwidth_mbps - 2.0) <= 0.1 * 2.0


class TestFrameCost:
    def test_local_terminal(self):
        platform = pi_like_profile()
        pt = TracePoint(0, 20.0, 60.0, 0.0)
        cost = frame_cost(8, platform, pt, False, ENC, make_rng(5))
        assert cost.tx_ms == 0.0
        assert cost.server_ms == 0.0
        assert cost.tx_bytes_x100 == 0
        expected = sum(platform.edge_block_ms) * platform.edge_power_mw / 1000 + 0.4
        assert abs(cost.energy_mj - expected) < 1e-9

    def test_full_offload(self):
        platform = pi_like_profile()
        pt = TracePoint(0, 25.0, 40.0, 0.0)
        cost = frame_cost(0, platform, pt, False, ENC, make_rng(6))
        assert cost.edge_ms == 0.0
        assert abs(cost.server_ms - sum(platform.server_block_ms)) < 1e-12

    def test_fitted_energy_anchors(self):
        platform = pi_like_profile()
        pt = TracePoint(0, 25.0, 40.0, 0.0)
        rng = make_rng(7)
        edge_only = frame_cost(8, platform, pt, False, ENC, rng).energy_mj
        server_only = frame_cost(0, platform, pt, False, ENC, rng).energy_mj
        assert abs(edge_only - 67.4) < 1e-6
        assert abs(server_only - 187.2) < 1e-6

    def test_latency_identity(self):
        platform = pi_like_profile()
        rng = make_rng(8)
        pt = TracePoint(0, 8.0, 120.0, 0.0)
        for k in range(9):
            c = frame_cost(k, platform, pt, 0 < k < 8, ENC, rng)
            assert c.latency_ms == c.edge_ms + c.tx_ms + c.server_ms

    def test_dropped_frames_deliver_nothing(self):
        platform = pi_like_profile()
        pt = TracePoint(0, 5.0, 100.0, 1.0)   # always dropped
        cost = frame_cost(3, platform, pt, True, ENC, make_rng(9))
        assert cost.dropped
        assert cost.server_ms == 0.0


class TestBatteryLife:
    def test_paper_rows_within_tolerance(self):
        for energy, hours in ((67.4, 14.8), (187.2, 5.3), (89.3, 11.2)):
            derived = battery_life_hours(energy)
            assert abs(derived - hours) / hours < 0.05

    def test_ordering_from_energy_rows(self):
        rows = {"edge-only": 67.4, "stream": 89.3, "rule": 141.3,
                "fsl": 147.0, "fedcl": 164.7, "server-only": 187.2}
        hours = {k: battery_life_hours(v) for k, v in rows.items()}
        order = sorted(hours, key=hours.get, reverse=True)
        assert order == ["edge-only", "stream", "rule", "fsl", "fedcl",
                         "server-only"]


class TestTraces:
    def test_stable_profile(self):
        t = make_profile("stable", 0, 10000)
        assert np.all(t.bandwidth_mbps == 25.0)
        assert np.all(t.rtt_ms == 40.0)
        assert np.all(t.loss == 0.0)

    def test_congested_has_collapse_window(self):
        for seed in range(5):
            t = make_profile("congested", seed, 60000)
            low = t.bandwidth_mbps <= 2.0
            assert np.any(low)
            # contiguous window of at least 5 seconds
            idx = np.nonzero(low)[0]
            runs = np.split(idx, np.where(np.diff(idx) != 1)[0] + 1)
            longest = max(len(r) for r in runs)
            assert longest * (t.t_ms[1] - t.t_ms[0]) >= 5000
            assert collapse_onset_ms(t) == t.t_ms[idx[0]]

    def test_ranges_respected(self):
        for kind in ("stable", "variable", "congested"):
            t = make_profile(kind, 3, 60000)
            assert np.all((t.bandwidth_mbps >= 1.0) & (t.bandwidth_mbps <= 50.0))
            assert np.all((t.rtt_ms >= 20.0) & (t.rtt_ms <= 200.0))
            assert np.all((t.loss >= 0.0) & (t.loss <= 0.05))
            assert np.all(t.bandwidth_mbps <= MAX_BANDWIDTH_MBPS)

    def test_same_seed_identical(self):
        a = make_profile("variable", 9, 30000)
        b = make_profile("variable", 9, 30000)
        for x, y in ((a.t_ms, b.t_ms), (a.bandwidth_mbps, b.bandwidth_mbps),
                     (a.rtt_ms, b.rtt_ms), (a.loss, b.loss)):
            np.testing.assert_array_equal(x, y)

    def test_file_roundtrip_exact(self, tmp_path):
        t = make_profile("congested", 11, 30000)
        path = tmp_path / "trace.csv"
        write_trace(t, path)
        back = read_trace(path)
        np.testing.assert_array_equal(t.t_ms, back.t_ms)
        np.testing.assert_array_equal(t.bandwidth_mbps, back.bandwidth_mbps)
        np.testing.assert_array_equal(t.rtt_ms, back.rtt_ms)
        np.testing.assert_array_equal(t.loss, back.loss)
        # and the rewritten file is byte-identical
        path2 = tmp_path / "trace2.csv"
        write_trace(back, path2)
        assert path.read_bytes() == path2.read_bytes()

    def test_unknown_kind(self):
        with pytest.raises(ConfigurationError):
            make_profile("chaotic", 0)

    def test_unknown_platform(self):
        with pytest.raises(ConfigurationError):
            get_platform("gpu-cluster")
