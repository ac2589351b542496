import dataclasses
import math

import numpy as np
import pytest

from gridcast.actions import ActionCondition
from gridcast.config import EngineConfig
from gridcast.decoder import (
    BevEmbedding,
    LossWeights,
    MemoryQueue,
    NormContext,
    WorldDecoderParams,
    action_implied_pose,
    decode_next,
    encode_observation,
    forecast_loss,
    grid_query_coords,
    memory_push,
    norm_loss,
    rollout_forecast,
    temporal_reference_points,
    warmup_memory,
)
from gridcast.grid import FREE, VEHICLE, EgoPose, FlowGrid, GridConfig, SemanticGrid
from gridcast.kernels import grad_check, layer_norm_noaffine, seeded_uniform
from gridcast.neural import LinearParams
from gridcast.synthworld import GridFrame, generate_random_scenario, rasterize_frame

CFG = EngineConfig(
    grid=GridConfig((-8.0, 8.0), (-8.0, 8.0), (0.0, 4.0), 1.0),
    channels=16,
    num_heads=2,
    num_points=2,
    num_layers=2,
    ffn_hidden=32,
    memory_capacity=2,
    horizon=3,
    dt=0.5,
)
H, W, D = CFG.grid.dims
C = CFG.channels


def embedding(seed=0, t=0, pose=EgoPose.identity(), scale=1.0):
    return BevEmbedding(t, seeded_uniform(seed, (H, W, C), scale), pose)


def gt_frame(seed=0, t=1):
    scn = generate_random_scenario(seed, "dense")
    return rasterize_frame(scn, t, scn.ego0, CFG.grid)


def seeded_queue(params, n=2, seed=50):
    q = MemoryQueue(CFG.memory_capacity)
    for i in range(n):
        e = embedding(seed + i, t=i)
        ctx = NormContext(params.sem_gen, params.ego_gen, params.agent_gen,
                          EgoPose.identity(), FlowGrid.zeros(CFG.grid))
        q = memory_push(q, e, ctx)
    return q


class TestEncodeObservation:
    def test_identical_frames_identical_embeddings(self):
        params = WorldDecoderParams.seeded(0, CFG)
        f = gt_frame(1)
        a = encode_observation(f, params.embed, CFG.num_categories)
        b = encode_observation(f, params.embed, CFG.num_categories)
        assert np.array_equal(a.features, b.features)
        assert a.t == f.t and a.ego_pose_world == f.ego_pose_world

    def test_locality_of_per_cell_map(self):
        params = WorldDecoderParams.seeded(1, CFG)
        free = SemanticGrid.empty(CFG.grid)
        labels = free.labels.copy()
        labels[3, 4, 1] = VEHICLE
        one = SemanticGrid(CFG.grid, labels)
        fa = GridFrame(0, free, FlowGrid.zeros(CFG.grid),
                       __import__("gridcast.grid", fromlist=["InstanceGrid"]).InstanceGrid.empty(CFG.grid),
                       EgoPose.identity())
        ids = np.zeros(CFG.grid.dims, np.int32)
        ids[3, 4, 1] = 1
        fb = GridFrame(0, one, FlowGrid.zeros(CFG.grid),
                       __import__("gridcast.grid", fromlist=["InstanceGrid"]).InstanceGrid(CFG.grid, ids),
                       EgoPose.identity())
        ea = encode_observation(fa, params.embed, CFG.num_categories)
        eb = encode_observation(fb, params.embed, CFG.num_categories)
        diff = np.abs(ea.features - eb.features).sum(axis=-1)
        assert diff[3, 4] > 0
        mask = np.ones((H, W), bool)
        mask[3, 4] = False
        assert not diff[mask].any()

    def test_zero_weights_zero_embedding(self):
        embed = LinearParams.zeros(D * CFG.num_categories, C)
        e = encode_observation(gt_frame(2), embed, CFG.num_categories)
        assert not e.features.any()


class TestMemoryQueue:
    def test_push_to_empty(self):
        params = WorldDecoderParams.seeded(2, CFG)
        q = seeded_queue(params, n=1)
        assert len(q) == 1

    def test_fifo_eviction(self):
        params = WorldDecoderParams.seeded(3, CFG)
        q = MemoryQueue(3)
        for i in range(4):
            ctx = NormContext(params.sem_gen, params.ego_gen, params.agent_gen,
                              EgoPose.identity(), FlowGrid.zeros(CFG.grid))
            q = memory_push(q, embedding(i, t=i), ctx)
        assert len(q) == 3
        assert [e.t for e in q.entries] == [1, 2, 3]

    def test_non_monotonic_t_rejected(self):
        params = WorldDecoderParams.seeded(4, CFG)
        q = seeded_queue(params, n=2)
        ctx = NormContext(params.sem_gen, params.ego_gen, params.agent_gen,
                          EgoPose.identity(), FlowGrid.zeros(CFG.grid))
        with pytest.raises(ValueError):
            memory_push(q, embedding(9, t=0), ctx)

    def test_identity_generators_store_plain_layer_norm(self):
        params = WorldDecoderParams.seeded(5, CFG, identity_norm=True)
        e = embedding(42, t=0, scale=2.0)
        flow = FlowGrid(CFG.grid, seeded_uniform(43, CFG.grid.dims + (3,), 1.0))
        ctx = NormContext(params.sem_gen, params.ego_gen, params.agent_gen,
                          EgoPose(0.3, 1.0, -0.5), flow)
        q = memory_push(MemoryQueue(2), e, ctx)
        stored = q.entries[0].features
        assert np.abs(stored - layer_norm_noaffine(e.features)).max() <= 1e-6


class TestTemporalReferences:
    def test_identity_gives_own_coords(self):
        coords = grid_query_coords(H, W)
        refs = temporal_reference_points(coords, EgoPose.identity(), CFG.grid)
        np.testing.assert_allclose(refs, coords, atol=1e-9)

    def test_translation_shifts_refs_opposite(self):
        # memory frame sits +k voxels ahead: its content appears -k in refs
        k = 3
        coords = grid_query_coords(H, W)
        rel = EgoPose(0.0, k * CFG.grid.resolution, 0.0)
        refs = temporal_reference_points(coords, rel, CFG.grid)
        np.testing.assert_allclose(refs[:, 0], coords[:, 0] - k, atol=1e-9)
        np.testing.assert_allclose(refs[:, 1], coords[:, 1], atol=1e-9)

    def test_far_pose_moves_refs_off_grid(self):
        coords = grid_query_coords(H, W)
        rel = EgoPose(0.0, 100.0, 0.0)
        refs = temporal_reference_points(coords, rel, CFG.grid)
        assert (refs[:, 0] < 0).all()


class TestDecodeNext:
    def test_zero_output_projections_identity(self):
        params = WorldDecoderParams.seeded(6, CFG, zero_output=True)
        q = seeded_queue(params)
        out = decode_next(q, [], params, CFG)
        assert np.array_equal(out.features.reshape(-1, C), params.queries.reshape(-1, C))
        assert out.t == q.last.t + 1

    def test_velocity_controllability(self):
        params = WorldDecoderParams.seeded(7, CFG)
        q = seeded_queue(params)
        a = decode_next(q, [ActionCondition.velocity(1.0, 0.0)], params, CFG)
        b = decode_next(q, [ActionCondition.velocity(2.0, 0.0)], params, CFG)
        assert np.abs(a.features - b.features).max() > 1e-6

    def test_empty_queue_rejected(self):
        params = WorldDecoderParams.seeded(8, CFG)
        with pytest.raises(ValueError):
            decode_next(MemoryQueue(2), [], params, CFG)

    def test_unreachable_memory_region_is_ignored(self):
        # zero offsets + refs shifted by -2 rows: the last memory row can
        # never fall inside any query's bilinear support
        params = WorldDecoderParams.seeded(9, CFG)

        def zero_offsets(layer):
            return dataclasses.replace(
                layer,
                self_attn=dataclasses.replace(
                    layer.self_attn,
                    offset=LinearParams.zeros(C, layer.self_attn.num_heads * layer.self_attn.num_points * 2),
                ),
                temporal=dataclasses.replace(
                    layer.temporal,
                    offset=LinearParams.zeros(C, layer.temporal.num_heads * layer.temporal.num_points * 2),
                ),
            )

        params = dataclasses.replace(params, layers=tuple(zero_offsets(l) for l in params.layers))
        # old entry sits 2 voxels ahead of the (identity-pose) present frame,
        # so its refs are own-2 rows and its last row is outside every
        # query's bilinear support
        pose_old = EgoPose(0.0, 2 * CFG.grid.resolution, 0.0)
        old = embedding(60, t=0, pose=pose_old)
        last = embedding(61, t=1, pose=EgoPose.identity())
        q = MemoryQueue(2, (old, last))

        out1 = decode_next(q, [], params, CFG)
        mutated = old.features.copy()
        mutated[H - 1, :, :] += 100.0
        q2 = MemoryQueue(2, (BevEmbedding(0, mutated, pose_old), last))
        out2 = decode_next(q2, [], params, CFG)
        assert np.array_equal(out1.features, out2.features)

    def test_action_implied_pose(self):
        last = EgoPose(0.0, 1.0, 1.0)
        p = action_implied_pose(last, [ActionCondition.trajectory_step(1.0, 0.5)], 0.5)
        assert (p.x, p.y) == pytest.approx((2.0, 1.5))
        p = action_implied_pose(last, [ActionCondition.velocity(2.0, 0.0)], 0.5)
        assert (p.x, p.y) == pytest.approx((2.0, 1.0))
        p = action_implied_pose(last, [ActionCondition.command("left")], 0.5)
        assert p == last


class TestRollout:
    def test_single_step_equals_decode_plus_heads(self):
        from gridcast.neural import channel_to_height_heads, heads_to_grids

        params = WorldDecoderParams.seeded(10, CFG)
        q = seeded_queue(params)
        steps, _ = rollout_forecast(q, [[ActionCondition.velocity(1, 0)]], params, CFG, horizon=1)
        direct = decode_next(q, [ActionCondition.velocity(1, 0)], params, CFG)
        logits, flow = channel_to_height_heads(direct.features, params.heads)
        sem, fl = heads_to_grids(logits, flow, CFG.grid)
        assert np.array_equal(steps[0].embedding.features, direct.features)
        assert np.array_equal(steps[0].semantic.labels, sem.labels)
        assert np.array_equal(steps[0].flow.vectors, fl.vectors)

    def test_zero_projections_and_heads_give_free_grids(self):
        params = WorldDecoderParams.seeded(11, CFG, zero_output=True, zero_heads=True)
        q = seeded_queue(params)
        steps, _ = rollout_forecast(q, [[] for _ in range(3)], params, CFG, horizon=3)
        for s in steps:
            assert (s.semantic.labels == FREE).all()
            assert not s.flow.vectors.any()

    def test_causality_bitwise(self):
        params = WorldDecoderParams.seeded(12, CFG)
        q = seeded_queue(params)
        base = [[ActionCondition.velocity(1.0, 0.0)] for _ in range(3)]
        changed = [list(a) for a in base]
        changed[2] = [ActionCondition.velocity(-3.0, 1.0)]
        s1, _ = rollout_forecast(q, base, params, CFG, horizon=3)
        s2, _ = rollout_forecast(q, changed, params, CFG, horizon=3)
        for k in range(2):
            assert np.array_equal(s1[k].embedding.features, s2[k].embedding.features)
            assert np.array_equal(s1[k].semantic.labels, s2[k].semantic.labels)
        assert not np.array_equal(s1[2].embedding.features, s2[2].embedding.features)

    def test_shape_contract(self):
        params = WorldDecoderParams.seeded(13, CFG)
        q = seeded_queue(params)
        steps, _ = rollout_forecast(q, [[], []], params, CFG, horizon=2)
        for s in steps:
            assert s.semantic.labels.shape == (H, W, D)
            assert s.flow.vectors.shape == (H, W, D, 3)
            assert s.logits.shape == (H, W, D, CFG.num_categories)

    def test_length_mismatch_rejected(self):
        params = WorldDecoderParams.seeded(14, CFG)
        q = seeded_queue(params)
        with pytest.raises(ValueError):
            rollout_forecast(q, [[]], params, CFG, horizon=2)

    def test_full_rollout_deterministic(self):
        params = WorldDecoderParams.seeded(15, CFG)
        scn = generate_random_scenario(3, "sparse")
        frames = [rasterize_frame(scn, t, scn.ego0, CFG.grid) for t in range(2)]
        q = warmup_memory(frames, params, CFG)
        acts = [[ActionCondition.trajectory_step(0.5, 0.0)] for _ in range(3)]
        s1, _ = rollout_forecast(q, acts, params, CFG, horizon=3)
        s2, _ = rollout_forecast(q, acts, params, CFG, horizon=3)
        for a, b in zip(s1, s2):
            assert np.array_equal(a.embedding.features, b.embedding.features)
            assert np.array_equal(a.semantic.labels, b.semantic.labels)


class TestForecastLoss:
    def saturated_logits(self, frame, lo=-10.0, hi=10.0):
        labels = frame.semantic.labels
        ncat = CFG.num_categories
        logits = np.full(labels.shape + (ncat,), lo, np.float32)
        np.put_along_axis(logits, labels[..., None].astype(np.int64), hi, axis=-1)
        return logits

    def test_saturated_predictions_near_zero(self):
        frames = [gt_frame(20, t) for t in (1, 2)]
        logits = [self.saturated_logits(f) for f in frames]
        flows = [f.flow.vectors.copy() for f in frames]
        loss, _ = forecast_loss(logits, flows, frames)
        assert loss < 0.01

    def test_uniform_logits_ce_is_log5(self):
        frames = [gt_frame(21, 1)]
        logits = [np.zeros(CFG.grid.dims + (CFG.num_categories,), np.float32)]
        flows = [frames[0].flow.vectors.copy()]
        loss, _ = forecast_loss(logits, flows, frames)
        # CE = ln 5 exactly; BCE adds the binary term for p = 1 - 1/5
        occ = (frames[0].semantic.labels != 0).astype(np.float64)
        p = 1.0 - 1.0 / CFG.num_categories
        bce = float(-(occ * np.log(p) + (1 - occ) * np.log(1 - p)).mean())
        assert loss == pytest.approx(math.log(5) + bce, rel=1e-6)

    def test_zero_flow_zero_l1(self):
        cfg_grid = CFG.grid
        free = SemanticGrid.empty(cfg_grid)
        from gridcast.grid import InstanceGrid

        frame = GridFrame(1, free, FlowGrid.zeros(cfg_grid), InstanceGrid.empty(cfg_grid),
                          EgoPose.identity())
        logits = [np.zeros(cfg_grid.dims + (CFG.num_categories,), np.float32)]
        flows = [np.zeros(cfg_grid.dims + (3,), np.float32)]
        loss_a, _ = forecast_loss(logits, flows, [frame])
        loss_b, _ = forecast_loss(logits, flows, [frame], LossWeights(lambda_flow=100.0))
        assert loss_a == loss_b  # flow term contributes nothing

    def test_lambda_scales_flow_term_exactly(self):
        frame = gt_frame(22, 1)
        logits = [self.saturated_logits(frame)]
        flows = [np.zeros(CFG.grid.dims + (3,), np.float32)]
        base, _ = forecast_loss(logits, flows, [frame], LossWeights(lambda_flow=0.0))
        one, _ = forecast_loss(logits, flows, [frame], LossWeights(lambda_flow=1.0))
        two, _ = forecast_loss(logits, flows, [frame], LossWeights(lambda_flow=2.0))
        assert two - base == pytest.approx(2 * (one - base), rel=1e-9)

    def test_shape_mismatch_rejected(self):
        frame = gt_frame(23, 1)
        bad = [np.zeros((2, 2, 2, CFG.num_categories), np.float32)]
        with pytest.raises(ValueError):
            forecast_loss(bad, [frame.flow.vectors], [frame])

    def test_extra_semantic_term_hook(self):
        frame = gt_frame(28, 1)
        logits = [self.saturated_logits(frame)]
        flows = [frame.flow.vectors.copy()]
        base, base_grads = forecast_loss(logits, flows, [frame])

        def ridge(lg, _labels):
            return float((lg.astype(np.float64) ** 2).mean()), 2 * lg.astype(np.float64) / lg.size

        hooked, grads = forecast_loss(logits, flows, [frame], extra_semantic_terms=[ridge])
        assert hooked == pytest.approx(base + (logits[0].astype(np.float64) ** 2).mean())
        assert not np.array_equal(grads[0][0], base_grads[0][0])

        def f(v):
            return forecast_loss([v], flows, [frame], extra_semantic_terms=[ridge])[0]

        small = seeded_uniform(29, logits[0].shape, 1.0)
        _, g = forecast_loss([small], flows, [frame], extra_semantic_terms=[ridge])
        assert grad_check(f, small, g[0][0]) < 1e-3

    def test_logit_gradients_pass_fd(self):
        small = GridConfig((-2.0, 2.0), (-2.0, 2.0), (0.0, 2.0), 1.0)
        labels = np.zeros(small.dims, np.uint8)
        labels[1, 1, 0] = VEHICLE
        labels[2, 3, 1] = 1
        from gridcast.grid import InstanceGrid

        ids = np.zeros(small.dims, np.int32)
        ids[1, 1, 0] = 1
        vecs = np.zeros(small.dims + (3,), np.float32)
        vecs[1, 1, 0] = (0.5, -0.25, 0.1)
        frame = GridFrame(1, SemanticGrid(small, labels), FlowGrid(small, vecs),
                          InstanceGrid(small, ids), EgoPose.identity())
        logits0 = seeded_uniform(24, small.dims + (5,), 1.0)
        flow0 = seeded_uniform(25, small.dims + (3,), 1.0)

        def f_logits(v):
            loss, _ = forecast_loss([v], [flow0], [frame])
            return loss

        _, grads = forecast_loss([logits0], [flow0], [frame])
        assert grad_check(f_logits, logits0, grads[0][0]) < 1e-3

        def f_flow(v):
            loss, _ = forecast_loss([logits0], [v], [frame])
            return loss

        assert grad_check(f_flow, flow0, grads[0][1]) < 1e-3


class TestNormLoss:
    def test_perfect_history_near_zero(self):
        frames = [gt_frame(26, t) for t in (0, 1)]
        logits = [TestForecastLoss.saturated_logits(TestForecastLoss(), f) for f in frames]
        flows = [f.flow.vectors.copy() for f in frames]
        loss, _ = norm_loss(logits, flows, frames)
        assert loss < 0.01

    def test_empty_history_rejected(self):
        with pytest.raises(ValueError):
            norm_loss([], [], [])

    def test_lambda_linearity(self):
        frame = gt_frame(27, 0)
        logits = [np.zeros(CFG.grid.dims + (5,), np.float32)]
        flows = [np.zeros(CFG.grid.dims + (3,), np.float32)]
        l0, _ = norm_loss(logits, flows, [frame], LossWeights(lambda_flow=0.0))
        l1, _ = norm_loss(logits, flows, [frame], LossWeights(lambda_flow=1.0))
        l2, _ = norm_loss(logits, flows, [frame], LossWeights(lambda_flow=2.0))
        assert l2 - l0 == pytest.approx(2 * (l1 - l0), rel=1e-9)
