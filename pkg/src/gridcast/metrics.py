"""Evaluation suite: mIoU family, VPQ with flow-based association, and
planning metrics.

Occupancy quality is scored by per-category IoU at the current frame
(mIoU_c), averaged over future frames (mIoU_f), and with near-frame
weighting (the nested prefix-mean form). Instance quality (VPQ) follows
the panoptic-quality formula with an instance-ID consistency requirement:
centers are extracted from the t=0 movable-probability field by greedy
NMS, merged by single-linkage clustering on relative distances, and
propagated through time by matching each voxel's backward-flow target to
the nearest previous-frame instance center. Planning is scored by L2
error under the NoAvg / TemAvg protocols and by stepwise / cumulative
collision rates.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import EvalConfig
from .grid import GMO_CATEGORIES, FlowGrid, GridConfig, InstanceGrid, SemanticGrid, binary_iou
from .planner import Trajectory, bev_category_mask, _lattice_cells


def miou_c(pred: SemanticGrid, gt: SemanticGrid, cats) -> float:
    """Mean over categories of binary voxel IoU at one frame."""
    if pred.config != gt.config:
        raise ValueError("prediction and ground truth grids have different configs")
    cats = sorted(set(int(c) for c in cats))
    if not cats:
        raise ValueError("category set is empty")
    return float(np.mean([binary_iou(pred.labels == c, gt.labels == c) for c in cats]))


def miou_f(pred_seq, gt_seq, cats) -> float:
    """Mean over future frames of the per-frame mIoU."""
    if len(pred_seq) != len(gt_seq) or not pred_seq:
        raise ValueError("sequences must be nonempty and equally long")
    return float(np.mean([miou_c(p, g, cats) for p, g in zip(pred_seq, gt_seq)]))


def weighted_miou_f(pred_seq, gt_seq, cats) -> float:
    """Timestamp-weighted mIoU: the mean over t of the prefix mean of the
    per-frame IoUs up to t, so near frames weigh more."""
    if len(pred_seq) != len(gt_seq) or not pred_seq:
        raise ValueError("sequences must be nonempty and equally long")
    ious = [miou_c(p, g, cats) for p, g in zip(pred_seq, gt_seq)]
    n = len(ious)
    return float(sum(sum(ious[:t]) / t for t in range(1, n + 1)) / n)


# --- instance extraction and association ------------------------------------------

def voxel_centers_of(indices: np.ndarray, cfg: GridConfig) -> np.ndarray:
    """(m, 3) metric centers of flat voxel indices."""
    h, w, d = cfg.dims
    i, rem = np.divmod(indices, w * d)
    j, k = np.divmod(rem, d)
    res = cfg.resolution
    return np.stack([
        cfg.x_range[0] + (i + 0.5) * res,
        cfg.y_range[0] + (j + 0.5) * res,
        cfg.z_range[0] + (k + 0.5) * res,
    ], axis=-1)


def nms_centers(prob: np.ndarray, radius: float, cfg: GridConfig) -> np.ndarray:
    """Greedy non-maximum suppression over a voxel probability field.

    Candidates (prob > 0) are visited in descending score, ties broken by
    lexicographic voxel index; candidates within `radius` meters of a
    kept center are suppressed. Returns (k, 3) metric centers.
    """
    prob = np.asarray(prob, np.float64)
    flat = prob.reshape(-1)
    cand = np.flatnonzero(flat > 0)
    if not cand.size:
        return np.zeros((0, 3))
    order = cand[np.argsort(-flat[cand], kind="stable")]
    pts = voxel_centers_of(order, cfg)
    alive = np.ones(len(order), bool)
    kept = []
    for i in range(len(order)):
        if not alive[i]:
            continue
        kept.append(pts[i])
        alive &= np.linalg.norm(pts - pts[i], axis=1) > radius
        alive[i] = False
    return np.array(kept)


def cluster_centers(centers: np.ndarray, merge_distance: float) -> np.ndarray:
    """Single-linkage clustering: centers chained within the merge
    distance collapse to their centroid. Output order follows the first
    member of each cluster."""
    centers = np.asarray(centers, np.float64).reshape(-1, 3)
    n = len(centers)
    if n == 0:
        return centers
    parent = list(range(n))

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    for i in range(n):
        for j in range(i + 1, n):
            if np.linalg.norm(centers[i] - centers[j]) <= merge_distance:
                ri, rj = find(i), find(j)
                if ri != rj:
                    parent[max(ri, rj)] = min(ri, rj)
    groups: dict[int, list[int]] = {}
    for i in range(n):
        groups.setdefault(find(i), []).append(i)
    return np.array([centers[m].mean(axis=0) for _, m in sorted(groups.items())])


@dataclass(frozen=True)
class InstanceTrack:
    """One instance over time: per-frame sorted flat voxel indices."""

    id: int
    frames: tuple[np.ndarray, ...]

    def present(self, t: int) -> bool:
        return self.frames[t].size > 0


def _flow_vectors(flow) -> np.ndarray:
    return flow.vectors if isinstance(flow, FlowGrid) else np.asarray(flow)


def associate_instances(centers: np.ndarray, occ_seq, flow_seq, cfg: GridConfig,
                        gating_distance: float) -> list[InstanceTrack]:
    """Assign voxels to instance tracks using backward flow.

    Frame 0 voxels go to their nearest center (tracks whose birth frame
    stays empty are dropped). For t >= 1, each movable voxel's position
    plus its backward-flow vector is matched to the nearest previous-frame
    instance center within the gating distance; unmatched voxels join no
    track. Instance centers update to the per-instance voxel centroid
    each frame. All frames must share one coordinate frame.
    """
    centers = np.asarray(centers, np.float64).reshape(-1, 3)
    n_frames = len(occ_seq)
    if len(flow_seq) != n_frames:
        raise ValueError("occupancy and flow sequences must align")
    if centers.size == 0 or n_frames == 0:
        return []
    k = len(centers)
    frames_per_track: list[list[np.ndarray]] = [[] for _ in range(k)]
    current = centers.copy()

    for t in range(n_frames):
        occ = np.asarray(occ_seq[t], bool)
        vox = np.flatnonzero(occ.reshape(-1))
        assigned: list[list[int]] = [[] for _ in range(k)]
        if vox.size:
            pts = voxel_centers_of(vox, cfg)
            if t == 0:
                targets = pts
                dist = np.linalg.norm(targets[:, None, :] - current[None, :, :], axis=-1)
                owner = dist.argmin(axis=1)
                ok = np.ones(len(vox), bool)
            else:
                vecs = _flow_vectors(flow_seq[t]).reshape(-1, 3)[vox]
                targets = pts + vecs
                dist = np.linalg.norm(targets[:, None, :] - current[None, :, :], axis=-1)
                owner = dist.argmin(axis=1)
                ok = dist[np.arange(len(vox)), owner] <= gating_distance
            for v, o, keep in zip(vox, owner, ok):
                if keep:
                    assigned[o].append(int(v))
        for ti in range(k):
            idx = np.array(sorted(assigned[ti]), np.int64)
            frames_per_track[ti].append(idx)
            if idx.size:
                current[ti] = voxel_centers_of(idx, cfg).mean(axis=0)

    tracks = []
    next_id = 1
    for ti in range(k):
        if frames_per_track[ti][0].size == 0:
            continue
        tracks.append(InstanceTrack(next_id, tuple(frames_per_track[ti])))
        next_id += 1
    return tracks


def tracks_from_instance_grids(instance_seq) -> list[InstanceTrack]:
    """Ground-truth tracks from per-frame instance-id grids."""
    ids = sorted(set().union(*[set(np.unique(g.ids)) for g in instance_seq]) - {0})
    tracks = []
    for inst in ids:
        frames = tuple(np.flatnonzero((g.ids == inst).reshape(-1)).astype(np.int64)
                       for g in instance_seq)
        tracks.append(InstanceTrack(int(inst), frames))
    return tracks


def _set_iou(a: np.ndarray, b: np.ndarray) -> float:
    inter = np.intersect1d(a, b, assume_unique=True).size
    union = a.size + b.size - inter
    return inter / union if union else 1.0


def vpq_f(pred_tracks, gt_tracks, cfg: EvalConfig) -> float:
    """Video panoptic quality over the whole sequence (frame 0 included).

    Per frame, candidate pairs with voxel IoU above the TP threshold are
    matched greedily one-to-one by descending IoU; a matched pair is a
    true positive only if it agrees with the frame-0 pairing (the
    instance ID must be tracked consistently). The frame score is
    sum(IoU of TPs) / (|TP| + |FP|/2 + |FN|/2), and the result is the
    mean over all frames. Frames with no instances on either side are
    vacuously perfect.
    """
    lengths = {len(t.frames) for t in pred_tracks} | {len(t.frames) for t in gt_tracks}
    if not lengths:
        return 1.0
    if len(lengths) != 1:
        raise ValueError("all tracks must span the same number of frames")
    n_frames = lengths.pop()

    bijection: dict[int, int] = {}
    scores = []
    for t in range(n_frames):
        preds = {tr.id: tr.frames[t] for tr in pred_tracks if tr.present(t)}
        gts = {tr.id: tr.frames[t] for tr in gt_tracks if tr.present(t)}
        pairs = []
        for pid, pv in preds.items():
            for gid, gv in gts.items():
                iou = _set_iou(pv, gv)
                if iou > cfg.tp_iou_threshold:
                    pairs.append((iou, pid, gid))
        pairs.sort(key=lambda x: (-x[0], x[1], x[2]))
        used_p, used_g = set(), set()
        matched = []
        for iou, pid, gid in pairs:
            if pid in used_p or gid in used_g:
                continue
            used_p.add(pid)
            used_g.add(gid)
            matched.append((iou, pid, gid))
        if t == 0:
            bijection = {pid: gid for _, pid, gid in matched}
        tp = [(iou, pid, gid) for iou, pid, gid in matched if bijection.get(pid) == gid]
        tp_p = {pid for _, pid, _ in tp}
        tp_g = {gid for _, _, gid in tp}
        fp = len([p for p in preds if p not in tp_p])
        fn = len([g for g in gts if g not in tp_g])
        denom = len(tp) + 0.5 * fp + 0.5 * fn
        scores.append(sum(iou for iou, _, _ in tp) / denom if denom > 0 else 1.0)
    return float(np.mean(scores))


def derive_tracks(semantic_seq, flow_seq, cfg: EvalConfig,
                  prob0: np.ndarray | None = None) -> list[InstanceTrack]:
    """Full instance pipeline: NMS on the t=0 movable-probability field,
    center clustering, then flow-based association over the sequence."""
    if not semantic_seq:
        return []
    grid_cfg = semantic_seq[0].config
    occ = [bev_occ3d(s) for s in semantic_seq]
    if prob0 is None:
        prob0 = occ[0].astype(np.float64)
    centers = nms_centers(prob0, cfg.nms_radius, grid_cfg)
    centers = cluster_centers(centers, cfg.cluster_merge_distance)
    return associate_instances(centers, occ, flow_seq, grid_cfg, cfg.gating_distance)


def bev_occ3d(semantic: SemanticGrid) -> np.ndarray:
    """(h, w, d) boolean movable-object mask."""
    return np.isin(semantic.labels, sorted(GMO_CATEGORIES))


# --- planning metrics ----------------------------------------------------------------

def l2_error(planned, expert, protocol: str = "NoAvg") -> np.ndarray:
    """Euclidean waypoint error per horizon step.

    NoAvg reports the distance at each step; TemAvg reports, at each
    step, the mean of the NoAvg values from the first step up to it.
    """
    p = planned.waypoints if isinstance(planned, Trajectory) else np.asarray(planned, float)
    e = expert.waypoints if isinstance(expert, Trajectory) else np.asarray(expert, float)
    if p.shape != e.shape:
        raise ValueError(f"trajectory shapes differ: {p.shape} vs {e.shape}")
    dist = np.linalg.norm(p - e, axis=1)
    if protocol == "NoAvg":
        return dist
    if protocol == "TemAvg":
        return np.cumsum(dist) / (np.arange(len(dist)) + 1)
    raise ValueError(f"unknown protocol {protocol!r}")


def collision_indicators(traj, obstacle_grids, ego_footprint,
                         categories=GMO_CATEGORIES) -> np.ndarray:
    """Per-step booleans: footprint at waypoint k overlaps an obstacle
    column of grid k."""
    t = traj if isinstance(traj, Trajectory) else Trajectory(np.asarray(traj, float), 0.5)
    if len(obstacle_grids) < len(t):
        raise ValueError("not enough obstacle grids for the trajectory")
    headings = t.headings()
    half_l, half_w = ego_footprint[0] / 2, ego_footprint[1] / 2
    out = np.zeros(len(t), bool)
    for k, (wp, grid) in enumerate(zip(t.waypoints, obstacle_grids)):
        mask = bev_category_mask(grid, categories)
        cells, in_grid, _ = _lattice_cells(grid.config, wp, headings[k], half_l, half_w)
        hit = cells[in_grid]
        out[k] = bool(mask[hit[:, 0], hit[:, 1]].any())
    return out


def collision_rate(planned_per_scene, obstacle_grids_per_scene, variant: str = "cumulative",
                   ego_footprint=(4.0, 1.8), categories=GMO_CATEGORIES) -> np.ndarray:
    """Collision rate per horizon step over a scene set.

    stepwise: fraction of scenes whose ego collides exactly at step t.
    cumulative: fraction of scenes with any collision at or before step t
    (a scene keeps counting once it has collided).
    """
    if variant not in ("stepwise", "cumulative"):
        raise ValueError(f"unknown variant {variant!r}")
    if len(planned_per_scene) != len(obstacle_grids_per_scene) or not planned_per_scene:
        raise ValueError("scene lists must be nonempty and equally long")
    rows = []
    for traj, grids in zip(planned_per_scene, obstacle_grids_per_scene):
        ind = collision_indicators(traj, grids, ego_footprint, categories).astype(float)
        rows.append(np.maximum.accumulate(ind) if variant == "cumulative" else ind)
    rows = np.stack(rows)
    return rows.mean(axis=0)


# --- report ------------------------------------------------------------------------

def build_report(pred_semantic, pred_flow, gt_semantic, gt_flow, gt_instances,
                 cfg: EvalConfig) -> dict:
    """Full metric report over aligned frame sequences (frame 0 = current).

    VPQ derives predicted tracks through the NMS -> clustering -> flow
    association pipeline; ground-truth tracks come from the instance
    grids when available, else through the same pipeline on GT flow.
    """
    if len(pred_semantic) != len(gt_semantic) or not pred_semantic:
        raise ValueError("prediction and ground-truth frame counts differ")
    cats = list(cfg.categories)
    per_cat_c = {str(c): binary_iou(pred_semantic[0].labels == c, gt_semantic[0].labels == c)
                 for c in cats}
    report = {
        "v": 1,
        "frames": len(pred_semantic),
        "mIoU_c": miou_c(pred_semantic[0], gt_semantic[0], cats),
        "per_category_IoU_c": per_cat_c,
    }
    if len(pred_semantic) > 1:
        report["mIoU_f"] = miou_f(pred_semantic[1:], gt_semantic[1:], cats)
        report["weighted_mIoU_f"] = weighted_miou_f(pred_semantic[1:], gt_semantic[1:], cats)
        report["per_category_IoU_f"] = {
            str(c): float(np.mean([binary_iou(p.labels == c, g.labels == c)
                                   for p, g in zip(pred_semantic[1:], gt_semantic[1:])]))
            for c in cats
        }
    else:
        report["mIoU_f"] = None
        report["weighted_mIoU_f"] = None
        report["per_category_IoU_f"] = None
    if pred_flow is not None and all(f is not None for f in pred_flow):
        pred_tracks = derive_tracks(pred_semantic, pred_flow, cfg)
        if gt_instances is not None:
            gt_tracks = tracks_from_instance_grids(gt_instances)
        elif gt_flow is not None and all(f is not None for f in gt_flow):
            gt_tracks = derive_tracks(gt_semantic, gt_flow, cfg)
        else:
            gt_tracks = None
        report["VPQ_f"] = vpq_f(pred_tracks, gt_tracks, cfg) if gt_tracks is not None else None
    else:
        report["VPQ_f"] = None
    report["L2"] = {"NoAvg": None, "TemAvg": None}
    report["CR"] = {"stepwise": None, "cumulative": None}
    return report
