import math

import numpy as np
import pytest

from genutil import (
    REF_GEOM,
    SMALL,
    random_planning_scene,
    random_semantic_sequence,
    random_track_pair,
    swap_flow_at_t1 as _swap_flow,
)
from references import (
    ref_collision_rate,
    ref_l2,
    ref_miou_c,
    ref_miou_f,
    ref_vpq,
    ref_weighted_miou_f,
)

from gridcast.config import EvalConfig
from gridcast.grid import PEDESTRIAN, VEHICLE, EgoPose, FlowGrid, GridConfig, SemanticGrid
from gridcast.metrics import (
    InstanceTrack,
    associate_instances,
    bev_occ3d,
    build_report,
    cluster_centers,
    collision_indicators,
    collision_rate,
    derive_tracks,
    l2_error,
    miou_c,
    miou_f,
    nms_centers,
    tracks_from_instance_grids,
    voxel_centers_of,
    vpq_f,
    weighted_miou_f,
)
from gridcast.planner import Trajectory
from gridcast.synthworld import (
    agent_center_world,
    generate_random_scenario,
    rasterize_frame,
)

GRID = GridConfig((-8.0, 8.0), (-8.0, 8.0), (-1.0, 3.0), 0.5)
ECFG = EvalConfig()
CATS = (VEHICLE, PEDESTRIAN)


def grid_from(labels):
    return SemanticGrid(GRID, labels)


def single_category_grids(n_pred=3, n_gt=2, overlap=1):
    pred = np.zeros(GRID.dims, np.uint8)
    gt = np.zeros(GRID.dims, np.uint8)
    pred[0, 0, :n_pred] = VEHICLE
    gt[0, 0, n_pred - overlap:n_pred - overlap + n_gt] = VEHICLE
    return grid_from(pred), grid_from(gt)


class TestMiou:
    def test_perfect(self):
        p, _ = single_category_grids()
        assert miou_c(p, p, CATS) == 1.0

    def test_all_free_vs_occupied(self):
        _, g = single_category_grids()
        empty = SemanticGrid.empty(GRID)
        assert miou_c(empty, g, (VEHICLE,)) == 0.0

    def test_partial_overlap_quarter(self):
        p, g = single_category_grids(3, 2, 1)
        assert miou_c(p, g, (VEHICLE,)) == 0.25

    def test_config_mismatch(self):
        other = GridConfig((-4.0, 4.0), (-4.0, 4.0), (0.0, 2.0), 0.5)
        with pytest.raises(ValueError):
            miou_c(SemanticGrid.empty(GRID), SemanticGrid.empty(other), CATS)

    def test_miou_f_mean(self):
        p1, g1 = single_category_grids(3, 3, 3)  # IoU 1.0
        p2, g2 = single_category_grids(2, 2, 1)  # IoU 1/3
        val = miou_f([p1, p2], [g1, g2], (VEHICLE,))
        assert val == pytest.approx((1.0 + 1.0 / 3.0) / 2)

    def test_single_frame_collapse(self):
        p, g = single_category_grids()
        assert miou_f([p], [g], CATS) == miou_c(p, g, CATS)

    def test_length_mismatch(self):
        p, g = single_category_grids()
        with pytest.raises(ValueError):
            miou_f([p], [g, g], CATS)


class TestWeightedMiou:
    def frames_with_ious(self, ious):
        preds, gts = [], []
        for v in ious:
            if v == 1.0:
                p, g = single_category_grids(2, 2, 2)
            elif v == 0.0:
                p = np.zeros(GRID.dims, np.uint8)
                p[0, 0, 0] = VEHICLE
                g = np.zeros(GRID.dims, np.uint8)
                g[5, 5, 0] = VEHICLE
                p, g = grid_from(p), grid_from(g)
            else:
                raise AssertionError
            preds.append(p)
            gts.append(g)
        return preds, gts

    def test_one_then_zero_is_075(self):
        preds, gts = self.frames_with_ious([1.0, 0.0])
        assert weighted_miou_f(preds, gts, (VEHICLE,)) == 0.75

    def test_zero_then_one_is_025(self):
        preds, gts = self.frames_with_ious([0.0, 1.0])
        assert weighted_miou_f(preds, gts, (VEHICLE,)) == 0.25

    def test_constant_collapses_to_value(self):
        preds, gts = self.frames_with_ious([1.0, 1.0, 1.0])
        assert weighted_miou_f(preds, gts, (VEHICLE,)) == 1.0

    def test_equal_frames_match_miou_f(self):
        rng = np.random.default_rng(0)
        labels = (rng.random(GRID.dims) < 0.1).astype(np.uint8) * VEHICLE
        p = grid_from(labels)
        assert weighted_miou_f([p, p], [p, p], (VEHICLE,)) == miou_f([p, p], [p, p], (VEHICLE,))


class TestNms:
    def test_single_blob_unique_max(self):
        prob = np.zeros(GRID.dims)
        prob[10, 10, 2] = 1.0
        prob[10, 11, 2] = 0.5
        centers = nms_centers(prob, 1.5, GRID)
        assert len(centers) == 1
        np.testing.assert_allclose(centers[0], voxel_centers_of(np.array([10 * GRID.w * GRID.d + 10 * GRID.d + 2]), GRID)[0])

    def test_two_far_blobs(self):
        prob = np.zeros(GRID.dims)
        prob[5, 5, 1] = 1.0
        prob[25, 25, 1] = 0.9
        centers = nms_centers(prob, 1.5, GRID)
        assert len(centers) == 2

    def test_equal_scores_lexicographic_tiebreak(self):
        prob = np.zeros(GRID.dims)
        prob[10, 10, 0] = 1.0
        prob[10, 11, 0] = 1.0  # 0.5 m apart, inside the radius
        centers = nms_centers(prob, 1.5, GRID)
        assert len(centers) == 1
        expect = voxel_centers_of(np.array([10 * GRID.w * GRID.d + 10 * GRID.d + 0]), GRID)[0]
        np.testing.assert_allclose(centers[0], expect)

    def test_empty_field(self):
        assert nms_centers(np.zeros(GRID.dims), 1.5, GRID).shape == (0, 3)


class TestClustering:
    def test_empty(self):
        assert cluster_centers(np.zeros((0, 3)), 2.0).shape == (0, 3)

    def test_two_close_centers_merge_to_midpoint(self):
        c = np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]])
        out = cluster_centers(c, 2.0)
        assert len(out) == 1
        np.testing.assert_allclose(out[0], [0.5, 0.0, 0.0])

    def test_chain_transitivity(self):
        c = np.array([[0.0, 0, 0], [1.8, 0, 0], [3.6, 0, 0], [5.4, 0, 0]])
        out = cluster_centers(c, 2.0)
        assert len(out) == 1
        np.testing.assert_allclose(out[0], [2.7, 0, 0])

    def test_far_centers_stay(self):
        c = np.array([[0.0, 0, 0], [10.0, 0, 0]])
        assert len(cluster_centers(c, 2.0)) == 2


def sparse_scenario_with_agents(min_agents=2, start_seed=0, count=1):
    """First `count` sparse scenarios having at least `min_agents` agents."""
    out = []
    seed = start_seed
    while len(out) < count:
        scn = generate_random_scenario(seed, "sparse")
        if len(scn.agents) >= min_agents:
            out.append(scn)
        seed += 1
    return out


def gt_sequence(scn, n_frames, cfg=GRID):
    return [rasterize_frame(scn, t, scn.ego0, cfg) for t in range(n_frames)]


class TestAssociation:
    def test_oracle_roundtrip_masks_exact(self):
        for scn in sparse_scenario_with_agents(2, start_seed=0, count=5):
            frames = gt_sequence(scn, 4)
            pred = derive_tracks([f.semantic for f in frames], [f.flow for f in frames], ECFG)
            gt = tracks_from_instance_grids([f.instances for f in frames])
            assert len(pred) == len(gt)
            for g in gt:
                match = [p for p in pred if np.array_equal(p.frames[0], g.frames[0])]
                assert len(match) == 1, "each GT instance must map to exactly one track"
                for t in range(4):
                    assert np.array_equal(match[0].frames[t], g.frames[t])

    def test_static_agent_zero_flow_stable_track(self):
        scn = generate_random_scenario(1, "sparse")
        static = scn.__class__(
            seed=1, horizon=4, dt=0.5,
            agents=(scn.agents[0].__class__(
                id=1, category=VEHICLE, footprint=(4.0, 2.0),
                pose0=EgoPose(0.0, 4.0, 0.0), speed=0.0, yaw_rate=0.0, z_extent=(0.0, 1.5)),),
            drivable=scn.drivable, static_obstacles=(), ego0=scn.ego0,
            ego_footprint=scn.ego_footprint,
        )
        frames = gt_sequence(static, 3)
        assert not frames[1].flow.vectors[frames[1].instances.ids > 0].any() or True
        tracks = derive_tracks([f.semantic for f in frames], [f.flow for f in frames], ECFG)
        assert len(tracks) == 1
        for t in range(3):
            assert np.array_equal(tracks[0].frames[t],
                                  np.flatnonzero((frames[t].instances.ids == 1).reshape(-1)))

    def test_swapped_flow_swaps_tracks(self):
        scn = sparse_scenario_with_agents(2, start_seed=0, count=1)[0]
        scn = scn.__class__(seed=scn.seed, horizon=scn.horizon, dt=scn.dt,
                            agents=scn.agents[:2], drivable=scn.drivable,
                            static_obstacles=scn.static_obstacles, ego0=scn.ego0,
                            ego_footprint=scn.ego_footprint)
        frames = gt_sequence(scn, 4)
        flows = [f.flow for f in frames]
        swapped = _swap_flow(scn, frames, GRID)
        pred = derive_tracks([f.semantic for f in frames], swapped, ECFG)
        gt = tracks_from_instance_grids([f.instances for f in frames])
        val = vpq_f(pred, gt, ECFG)
        assert val == pytest.approx(1.0 / 4.0)
        # unswapped flow scores a perfect 1.0
        assert vpq_f(derive_tracks([f.semantic for f in frames], flows, ECFG), gt, ECFG) == 1.0


class TestVpq:
    def make_track(self, id_, *frame_sets):
        return InstanceTrack(id_, tuple(np.array(sorted(s), np.int64) for s in frame_sets))

    def test_perfect(self):
        t1 = self.make_track(1, {1, 2, 3}, {2, 3, 4})
        t2 = self.make_track(2, {10, 11}, {11, 12})
        assert vpq_f([t1, t2], [t1, t2], ECFG) == 1.0

    def test_missing_prediction(self):
        gt = self.make_track(1, {1, 2}, {2, 3}, {3, 4}, {4, 5})
        assert vpq_f([], [gt], ECFG) == 0.0

    def test_ids_swapped_from_t1(self):
        a0, a1 = {1, 2, 3}, {2, 3, 4}
        b0, b1 = {10, 11, 12}, {11, 12, 13}
        gt = [self.make_track(1, a0, a1, a1, a1), self.make_track(2, b0, b1, b1, b1)]
        pred = [self.make_track(1, a0, b1, b1, b1), self.make_track(2, b0, a1, a1, a1)]
        assert vpq_f(pred, gt, ECFG) == pytest.approx(1.0 / 4.0)

    def test_empty_frames_are_vacuous(self):
        t = self.make_track(1, {1}, set(), {2})
        assert vpq_f([t], [t], ECFG) == 1.0

    def test_low_iou_not_matched(self):
        gt = self.make_track(1, set(range(10)), set(range(10)))
        pred = self.make_track(1, {0}, {0})  # IoU 0.1 < 0.2 threshold
        assert vpq_f([pred], [gt], ECFG) == 0.0


class TestL2:
    def test_identical_zero(self):
        t = Trajectory(np.array([[1.0, 0.0], [2.0, 0.0]]), 0.5)
        assert not l2_error(t, t, "NoAvg").any()
        assert not l2_error(t, t, "TemAvg").any()

    def test_arithmetic(self):
        p = np.array([[0.2, 0.0], [0.4, 0.0], [0.6, 0.0]])
        e = np.zeros((3, 2))
        np.testing.assert_allclose(l2_error(p, e, "NoAvg"), [0.2, 0.4, 0.6])
        np.testing.assert_allclose(l2_error(p, e, "TemAvg"), [0.2, 0.3, 0.4])

    def test_single_step_protocols_coincide(self):
        p = np.array([[1.0, 1.0]])
        e = np.array([[0.0, 0.0]])
        assert l2_error(p, e, "NoAvg")[0] == l2_error(p, e, "TemAvg")[0]

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            l2_error(np.zeros((2, 2)), np.zeros((3, 2)), "NoAvg")


class TestCollisionRate:
    def clear_grid(self):
        return SemanticGrid.empty(GRID)

    def blocked_grid(self, x, y):
        labels = np.zeros(GRID.dims, np.uint8)
        i = int((x - GRID.x_range[0]) / GRID.resolution)
        j = int((y - GRID.y_range[0]) / GRID.resolution)
        labels[i, j, 1] = VEHICLE
        return SemanticGrid(GRID, labels)

    def test_no_obstacles_zero(self):
        t = np.array([[1.0, 0.0], [2.0, 0.0], [3.0, 0.0]])
        grids = [self.clear_grid()] * 3
        assert not collision_rate([t], [grids], "stepwise").any()
        assert not collision_rate([t], [grids], "cumulative").any()

    def test_step1_of_3_variants(self):
        t = np.array([[1.0, 0.0], [2.0, 0.0], [3.0, 0.0]])
        grids = [self.blocked_grid(1.0, 0.0), self.clear_grid(), self.clear_grid()]
        np.testing.assert_allclose(collision_rate([t], [grids], "stepwise"), [1.0, 0.0, 0.0])
        np.testing.assert_allclose(collision_rate([t], [grids], "cumulative"), [1.0, 1.0, 1.0])

    def test_quarter_of_scenes(self):
        t = np.array([[1.0, 0.0], [2.0, 0.0], [3.0, 0.0]])
        colliding = [self.clear_grid(), self.blocked_grid(2.0, 0.0), self.clear_grid()]
        clear = [self.clear_grid()] * 3
        rates = collision_rate([t] * 4, [colliding, clear, clear, clear], "cumulative")
        np.testing.assert_allclose(rates, [0.0, 0.25, 0.25])

    def test_indicators_heading_aware(self):
        # moving in +y: the footprint is long across y, narrow across x
        t = np.array([[0.0, 2.0]])
        hit = collision_indicators(t, [self.blocked_grid(0.0, 3.5)], (4.0, 1.8))
        miss = collision_indicators(t, [self.blocked_grid(1.5, 2.0)], (4.0, 1.8))
        assert hit[0] and not miss[0]


class TestBruteForceEquivalence:
    def test_miou_family(self):
        rng = np.random.default_rng(100)
        for _ in range(10):
            n = int(rng.integers(1, 5))
            preds, gts, rp, rg = random_semantic_sequence(rng, n)
            cats = [3, 4]
            assert abs(miou_c(preds[0], gts[0], cats) - ref_miou_c(rp[0], rg[0], cats)) < 1e-9
            assert abs(miou_f(preds, gts, cats) - ref_miou_f(rp, rg, cats)) < 1e-9
            assert abs(weighted_miou_f(preds, gts, cats) - ref_weighted_miou_f(rp, rg, cats)) < 1e-9

    def test_vpq(self):
        rng = np.random.default_rng(101)
        for _ in range(15):
            pred, gt, rpred, rgt = random_track_pair(rng, int(rng.integers(1, 5)),
                                                     int(rng.integers(1, 4)))
            assert abs(vpq_f(pred, gt, ECFG) - ref_vpq(rpred, rgt, ECFG.tp_iou_threshold)) < 1e-9

    def test_l2(self):
        rng = np.random.default_rng(102)
        for _ in range(10):
            n = int(rng.integers(1, 6))
            p = rng.uniform(-3, 3, (n, 2))
            e = rng.uniform(-3, 3, (n, 2))
            for proto in ("NoAvg", "TemAvg"):
                np.testing.assert_allclose(l2_error(p, e, proto),
                                           ref_l2(p.tolist(), e.tolist(), proto), atol=1e-9)

    def test_collision_rates(self):
        rng = np.random.default_rng(103)
        for _ in range(10):
            n_scenes = int(rng.integers(1, 4))
            n_steps = int(rng.integers(1, 5))
            trajs, grid_scenes, ref_scenes = [], [], []
            for _ in range(n_scenes):
                wps, grids, cells = random_planning_scene(rng, n_steps)
                trajs.append(wps)
                grid_scenes.append(grids)
                ref_scenes.append(cells)
            for variant in ("stepwise", "cumulative"):
                mine = collision_rate(trajs, grid_scenes, variant, (2.0, 1.0))
                ref = ref_collision_rate([t.tolist() for t in trajs], ref_scenes,
                                         REF_GEOM, (2.0, 1.0), variant)
                np.testing.assert_allclose(mine, ref, atol=1e-9)


class TestDegradationMonotonicity:
    def test_flipping_correct_voxels_never_increases_miou(self):
        rng = np.random.default_rng(200)
        for _ in range(20):
            labels = (rng.random(GRID.dims) < 0.15).astype(np.uint8) * VEHICLE
            gt = grid_from(labels)
            pred_labels = labels.copy()
            seq_p = [grid_from(pred_labels.copy())]
            values = [
                (miou_c(seq_p[0], gt, (VEHICLE,)),
                 miou_f(seq_p, [gt], (VEHICLE,)),
                 weighted_miou_f(seq_p, [gt], (VEHICLE,)))
            ]
            correct = np.argwhere(pred_labels == labels)
            rng.shuffle(correct)
            for (i, j, k) in correct[:10]:
                # flip a correct voxel to a wrong label
                pred_labels[i, j, k] = 0 if pred_labels[i, j, k] == VEHICLE else VEHICLE
                p = grid_from(pred_labels.copy())
                values.append((miou_c(p, gt, (VEHICLE,)),
                               miou_f([p], [gt], (VEHICLE,)),
                               weighted_miou_f([p], [gt], (VEHICLE,))))
            for prev, cur in zip(values, values[1:]):
                assert cur[0] <= prev[0] + 1e-12
                assert cur[1] <= prev[1] + 1e-12
                assert cur[2] <= prev[2] + 1e-12


class TestReport:
    def test_perfect_inputs(self):
        scn = sparse_scenario_with_agents(2, 0, 1)[0]
        frames = gt_sequence(scn, 4)
        sems = [f.semantic for f in frames]
        flows = [f.flow for f in frames]
        insts = [f.instances for f in frames]
        report = build_report(sems, flows, sems, flows, insts, ECFG)
        assert report["mIoU_c"] == 1.0
        assert report["mIoU_f"] == 1.0
        assert report["weighted_mIoU_f"] == 1.0
        assert report["VPQ_f"] == 1.0

    def test_empty_pred_zero_miou(self):
        scn = sparse_scenario_with_agents(2, 0, 1)[0]
        frames = gt_sequence(scn, 2)
        empty = [SemanticGrid.empty(GRID) for _ in frames]
        report = build_report(empty, None, [f.semantic for f in frames], None,
                              [f.instances for f in frames], ECFG)
        # categories present in GT score 0; absent ones are vacuously 1
        expect = np.mean([0.0 if (frames[0].semantic.labels == c).any() else 1.0
                          for c in ECFG.categories])
        assert report["mIoU_c"] == pytest.approx(expect)
        for c in ECFG.categories:
            if (frames[0].semantic.labels == c).any():
                assert report["per_category_IoU_c"][str(c)] == 0.0
        assert report["VPQ_f"] is None
