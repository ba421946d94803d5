import numpy as np
import pytest

from splitlab.encoder import EncoderConfig, encode_full, encode_prefix, init_encoder
from splitlab.errors import ConfigurationError
from splitlab.gmm import make_gmm, em_update
from splitlab.metrics import EmbeddingBatch, make_projections, sample_sphere_prior
from splitlab.numerics import l2_normalize, make_rng
from splitlab.server import (HybridLossConfig, LinkFlags, ServerRefiner,
                             SyncSchedule, TemporalBuffer, buffer_embeddings,
                             hybrid_loss_and_grad, lazy_sync, refine_step,
                             stitch_metric)

CFG = EncoderConfig(num_blocks=4, input_dim=6, hidden_dim=5, embed_dim=5)


def fill_buffer(state, rng, n=24, split_k=2, start_ts=0, step=10, skip=()):
    buf = TemporalBuffer(capacity=100)
    for i in range(n):
        if i in skip:
            continue
        x = rng.standard_normal(CFG.input_dim)
        h = encode_prefix(state, x, split_k)
        buf.insert(start_ts + i * step, h, split_k)
    return buf


def loss_only(buf, state, prior, cfg, proj):
    out = hybrid_loss_and_grad(buf, state, prior, cfg, proj)
    return out[0]


class TestTemporalBuffer:
    def test_capacity_ring(self):
        buf = TemporalBuffer(capacity=5)
        for i in range(9):
            buf.insert(i * 10, np.ones(3), 2)
        assert len(buf) == 5
        assert buf.timestamps()[0] == 40

    def test_out_of_order_sorted(self):
        buf = TemporalBuffer(capacity=10)
        buf.insert(30, np.ones(2), 1)
        buf.insert(10, np.ones(2), 1)
        buf.insert(20, np.ones(2), 1)
        np.testing.assert_array_equal(buf.timestamps(), [10, 20, 30])

    def test_duplicate_replaces_and_logs(self):
        buf = TemporalBuffer(capacity=10)
        buf.insert(10, np.zeros(2), 1)
        buf.insert(10, np.ones(2), 1)
        assert len(buf) == 1
        assert buf.replaced == 1
        np.testing.assert_array_equal(buf.entries[10].payload, np.ones(2))

    def test_gap_visible_to_graph(self):
        state = init_encoder(CFG, make_rng(0))
        rng = make_rng(1)
        buf = fill_buffer(state, rng, n=12, skip=(5, 6))
        assert len(buf) == 10
        ts = buf.timestamps()
        assert 50 not in ts and 60 not in ts


class TestHybridLoss:
    def setup_method(self):
        self.rng = make_rng(2)
        self.state = init_encoder(CFG, self.rng)
        self.proj = make_projections(3, 10, CFG.embed_dim)
        self.cfg = HybridLossConfig(knn_k=3, graph_window_ms=50.0,
                                    positive_max_gap_ms=25.0)

    def test_not_ready_below_threshold(self):
        buf = fill_buffer(self.state, self.rng, n=2 * self.cfg.knn_k - 1)
        prior = sample_sphere_prior(self.rng, len(buf), CFG.embed_dim)
        assert hybrid_loss_and_grad(buf, self.state, prior, self.cfg,
                                    self.proj) is None

    def test_degenerate_config_is_pure_task_loss(self):
        buf = fill_buffer(self.state, self.rng)
        prior = sample_sphere_prior(self.rng, len(buf), CFG.embed_dim)
        cfg0 = HybridLossConfig(lambda_sw=0.0, lambda_lap=0.0, knn_k=3,
                                graph_window_ms=50.0, positive_max_gap_ms=25.0)
        loss, _grads, parts = hybrid_loss_and_grad(buf, self.state, prior, cfg0,
                                                   self.proj)
        assert abs(loss - parts["task"]) < 1e-12

    def test_term_decomposition(self):
        buf = fill_buffer(self.state, self.rng)
        prior = sample_sphere_prior(self.rng, len(buf), CFG.embed_dim)
        loss, _grads, parts = hybrid_loss_and_grad(buf, self.state, prior,
                                                   self.cfg, self.proj)
        expected = (parts["task"] + self.cfg.lambda_sw * parts["sw"]
                    + self.cfg.lambda_lap * parts["lap"])
        assert abs(loss - expected) < 1e-9

    def test_gradient_matches_finite_differences(self):
        buf = fill_buffer(self.state, self.rng, n=8)
        cfg = HybridLossConfig(knn_k=2, graph_window_ms=50.0,
                               positive_max_gap_ms=25.0)
        prior = sample_sphere_prior(self.rng, len(buf), CFG.embed_dim)
        _, grads, _ = hybrid_loss_and_grad(buf, self.state, prior, cfg, self.proj)
        h = 1e-6
        worst = 0.0
        for bi, (W, b) in enumerate(self.state.params):
            flat = W.ravel()
            for idx in range(0, flat.size, max(1, flat.size // 6)):
                old = flat[idx]
                flat[idx] = old + h
                fp = loss_only(buf, self.state, prior, cfg, self.proj)
                flat[idx] = old - h
                fm = loss_only(buf, self.state, prior, cfg, self.proj)
                flat[idx] = old
                fd = (fp - fm) / (2 * h)
                worst = max(worst, abs(grads[bi][0].ravel()[idx] - fd)
                            / (abs(fd) + 1e-6))
        assert worst < 1e-3

    def test_gradients_respect_split_levels(self):
        # payloads received at k leave blocks <= k untouched
        buf = fill_buffer(self.state, self.rng, split_k=2)
        prior = sample_sphere_prior(self.rng, len(buf), CFG.embed_dim)
        _, grads, _ = hybrid_loss_and_grad(buf, self.state, prior, self.cfg,
                                           self.proj)
        assert not np.any(grads[0][0]) and not np.any(grads[1][0])
        assert np.any(grads[2][0]) and np.any(grads[3][0])


class TestRefineStep:
    def setup_method(self):
        self.rng = make_rng(3)
        self.state = init_encoder(CFG, self.rng)
        self.proj = make_projections(4, 10, CFG.embed_dim)
        self.cfg = HybridLossConfig(knn_k=3, graph_window_ms=50.0,
                                    positive_max_gap_ms=25.0)

    def test_zero_lr_keeps_parameters(self):
        buf = fill_buffer(self.state, self.rng)
        refiner = ServerRefiner(self.state.copy(), self.cfg)
        before = [(W.copy(), b.copy()) for W, b in refiner.state.params]
        prior = sample_sphere_prior(self.rng, len(buf), CFG.embed_dim)
        loss = refine_step(refiner, buf, prior, self.proj, lr=0.0)
        assert loss is not None
        for (W, b), (W0, b0) in zip(refiner.state.params, before):
            np.testing.assert_array_equal(W, W0)
            np.testing.assert_array_equal(b, b0)

    def test_descent_on_frozen_buffer(self):
        wins = 0
        for seed in range(10):
            rng = make_rng(100 + seed)
            state = init_encoder(CFG, rng)
            buf = fill_buffer(state, rng)
            refiner = ServerRefiner(state.copy(), self.cfg)
            prior = sample_sphere_prior(rng, len(buf), CFG.embed_dim)
            losses = [refine_step(refiner, buf, prior, self.proj, lr=0.02)
                      for _ in range(20)]
            if losses[-1] < losses[0]:
                wins += 1
        assert wins >= 9

    def test_divergence_aborts(self):
        from splitlab.errors import RefinementAborted
        buf = fill_buffer(self.state, self.rng)
        refiner = ServerRefiner(self.state.copy(), self.cfg)
        prior = sample_sphere_prior(self.rng, len(buf), CFG.embed_dim)
        refine_step(refiner, buf, prior, self.proj, lr=0.0)
        refiner.initial_loss = 1e-9   # force the guard
        with pytest.raises(RefinementAborted):
            refine_step(refiner, buf, prior, self.proj, lr=0.0)


class TestStitchMetric:
    def test_no_gap_no_refinement_equal(self):
        rng = make_rng(4)
        ts = np.arange(10) * 10
        z = np.stack([l2_normalize(rng.standard_normal(4)) for _ in range(10)])
        snap = EmbeddingBatch(ts, z)
        e_before, e_after = stitch_metric(snap, snap, gap_start_ms=45,
                                          gap_end_ms=45, knn_k=2, window_ms=30)
        assert e_before == e_after

    def test_mismatched_gap_structure_rejected(self):
        rng = make_rng(5)
        z = np.stack([l2_normalize(rng.standard_normal(4)) for _ in range(6)])
        a = EmbeddingBatch(np.arange(6) * 10, z)
        b = EmbeddingBatch(np.arange(6) * 10 + 5, z)
        with pytest.raises(ConfigurationError):
            stitch_metric(a, b, 0, 0)

    def test_boundary_energy_reflects_smoothing(self):
        # after pulling the post-gap side toward the pre-gap side, the
        # boundary energy must drop
        rng = make_rng(6)
        ts = np.concatenate([np.arange(6) * 10, np.arange(6) * 10 + 200])
        pre = l2_normalize(rng.standard_normal(4))
        post = l2_normalize(rng.standard_normal(4))
        z_before = np.stack([pre] * 6 + [post] * 6)
        z_after = np.stack([pre] * 6 + [l2_normalize(pre + 0.2 * post)] * 6)
        snap_b = EmbeddingBatch(ts, z_before)
        snap_a = EmbeddingBatch(ts, z_after)
        # k must exceed the same-side neighbor count for edges to span the gap
        e_b, e_a = stitch_metric(snap_b, snap_a, gap_start_ms=60,
                                 gap_end_ms=200, knn_k=6, window_ms=400)
        assert e_a < e_b


class TestLazySync:
    def setup_method(self):
        self.gmm = make_gmm(64, 128, warmup_separation=1e-9)
        rng = make_rng(7)
        while not self.gmm.initialized:
            em_update(self.gmm, rng.standard_normal(128))
        self.encoder = init_encoder(EncoderConfig(), make_rng(8))
        self.schedule = SyncSchedule(100)

    def test_scheduled_frame_emits_gmm_only(self):
        payloads = lazy_sync(100, self.schedule, self.gmm, self.encoder,
                             LinkFlags())
        assert [p.kind for p in payloads] == ["gmm"]
        assert payloads[0].size_bytes == 32896
        assert payloads[0].size_bytes < 35 * 1024

    def test_off_schedule_silent(self):
        assert lazy_sync(101, self.schedule, self.gmm, self.encoder,
                         LinkFlags()) == []
        assert lazy_sync(0, self.schedule, self.gmm, self.encoder,
                         LinkFlags()) == []

    def test_flags_gate_encoder_payload(self):
        payloads = lazy_sync(200, self.schedule, self.gmm, self.encoder,
                             LinkFlags(charging=True))
        kinds = [p.kind for p in payloads]
        assert kinds == ["gmm", "encoder"]
        assert payloads[1].size_bytes == self.encoder.num_params() * 4

    def test_sync_payload_under_35kb_for_default_geometry(self):
        for precision in (2,):
            from splitlab.gmm import serialized_size_bytes
            assert serialized_size_bytes(self.gmm, precision) < 35 * 1024


class TestBufferEmbeddings:
    def test_embeddings_unit_norm_and_consistent(self):
        rng = make_rng(9)
        state = init_encoder(CFG, rng)
        buf = TemporalBuffer(capacity=10)
        xs = [rng.standard_normal(CFG.input_dim) for _ in range(4)]
        for i, x in enumerate(xs):
            buf.insert(i * 10, encode_prefix(state, x, 2), 2)
        zs, _ = buffer_embeddings(buf, state)
        np.testing.assert_allclose(np.linalg.norm(zs, axis=1), 1.0, atol=1e-9)
        for z, x in zip(zs, xs):
            np.testing.assert_allclose(z, encode_full(state, x), atol=1e-9)
