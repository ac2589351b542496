"""Memory queue and the autoregressive world decoder.

The decoder turns learnable BEV queries into the next frame's BEV
embedding through a stack of pre-norm residual blocks: deformable
self-attention, ego-aligned temporal cross-attention over the memory
queue, standard cross-attention against the fused action token, and a
feed-forward network. Prediction heads decode each embedding into
semantic occupancy and backward flow; the predicted embedding is pushed
back into memory (normalized with its own predicted semantics / flow and
the action-implied ego transform), closing the rollout loop without
ground truth.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .actions import TRAJECTORY_STEP, VELOCITY, ActionCondition
from .config import EngineConfig
from .grid import EgoPose, FlowGrid, GridConfig, SemanticGrid, compose, inverse, relative_pose
from .kernels import F32, derive_seed, layer_norm_noaffine, seeded_uniform, softmax
from .neural import (
    AgentMotionCondGen,
    AttentionParams,
    DeformAttnParams,
    EgoMotionCondGen,
    FfnParams,
    FourierSpec,
    HeadParams,
    LinearParams,
    SemanticCondGen,
    action_token,
    agent_motion_cond_params,
    attention,
    channel_to_height_heads,
    conditional_normalize,
    deformable_attention,
    ego_motion_cond_params,
    heads_to_grids,
    semantic_cond_params,
)
from .synthworld import GridFrame


@dataclass(frozen=True)
class BevEmbedding:
    """A BEV latent (h, w, c) tagged with its frame index and the ego pose
    at acquisition time."""

    t: int
    features: np.ndarray
    ego_pose_world: EgoPose

    def __post_init__(self):
        f = np.ascontiguousarray(self.features, F32)
        if f.ndim != 3:
            raise ValueError(f"features must be (h, w, c), got {f.shape}")
        if not np.isfinite(f).all():
            raise ValueError("features must be finite")
        object.__setattr__(self, "features", f)


@dataclass(frozen=True)
class MemoryQueue:
    """FIFO of normalized historical embeddings, oldest first."""

    capacity: int
    entries: tuple[BevEmbedding, ...] = ()

    def __post_init__(self):
        if self.capacity < 1:
            raise ValueError("capacity must be >= 1")
        if len(self.entries) > self.capacity:
            raise ValueError("more entries than capacity")
        ts = [e.t for e in self.entries]
        if any(b <= a for a, b in zip(ts, ts[1:])):
            raise ValueError("entry frame indices must be strictly increasing")

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def last(self) -> BevEmbedding:
        if not self.entries:
            raise ValueError("memory queue is empty")
        return self.entries[-1]


@dataclass(frozen=True)
class NormContext:
    """Inputs for normalizing an embedding at push time: the generators,
    the ego transform covering the last step (previous frame -> this one,
    in previous-frame coordinates), and the frame's flow field."""

    sem_gen: SemanticCondGen
    ego_gen: EgoMotionCondGen
    agent_gen: AgentMotionCondGen
    ego_motion: EgoPose
    flow: FlowGrid


def memory_push(queue: MemoryQueue, e: BevEmbedding, ctx: NormContext) -> MemoryQueue:
    """Normalize an embedding with the three generated parameter sets and
    append it; evicts the oldest entry when full. Returns a new queue."""
    if queue.entries and e.t <= queue.last.t:
        raise ValueError(f"frame {e.t} is not after the last stored frame {queue.last.t}")
    params = [
        semantic_cond_params(e.features, ctx.sem_gen),
        ego_motion_cond_params(ctx.ego_motion, ctx.ego_gen, e.features.shape[:2]),
        agent_motion_cond_params(ctx.flow, ctx.agent_gen),
    ]
    normalized = BevEmbedding(e.t, conditional_normalize(e.features, params), e.ego_pose_world)
    entries = queue.entries + (normalized,)
    if len(entries) > queue.capacity:
        entries = entries[1:]
    return MemoryQueue(queue.capacity, entries)


def encode_observation(frame: GridFrame, embed: LinearParams, num_categories: int) -> BevEmbedding:
    """Stand-in for the camera history encoder: one-hot semantic slabs,
    stacked over height, linearly embedded per BEV cell."""
    labels = frame.semantic.labels
    h, w, d = labels.shape
    onehot = np.zeros((h, w, d, num_categories), F32)
    np.put_along_axis(onehot, labels[..., None].astype(np.int64), 1.0, axis=-1)
    feats = embed.apply(onehot.reshape(h, w, d * num_categories))
    return BevEmbedding(frame.t, feats, frame.ego_pose_world)


def grid_query_coords(h: int, w: int) -> np.ndarray:
    """(h*w, 2) fractional (row, col) coordinates of every BEV cell."""
    rows, cols = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64),
                             indexing="ij")
    return np.stack([rows.reshape(-1), cols.reshape(-1)], axis=-1)


def temporal_reference_points(coords: np.ndarray, rel_pose: EgoPose, cfg: GridConfig) -> np.ndarray:
    """Map fractional (row, col) query coordinates of the present frame
    into a memory entry's frame.

    `rel_pose` is the pose of the memory entry's ego frame expressed in
    the present frame; query cell centers are carried through its inverse
    and converted back to fractional grid coordinates (the identity pose
    returns the input coordinates). Points leaving the grid simply map
    outside [0, h-1] x [0, w-1], where the sampler zero-pads.
    """
    coords = np.asarray(coords, np.float64)
    res = cfg.resolution
    x = cfg.x_range[0] + (coords[:, 0] + 0.5) * res
    y = cfg.y_range[0] + (coords[:, 1] + 0.5) * res
    pts = inverse(rel_pose).apply(np.stack([x, y], axis=-1))
    out = np.empty_like(coords)
    out[:, 0] = (pts[:, 0] - cfg.x_range[0]) / res - 0.5
    out[:, 1] = (pts[:, 1] - cfg.y_range[0]) / res - 0.5
    return out


@dataclass(frozen=True)
class DecoderLayerParams:
    self_attn: DeformAttnParams
    temporal: DeformAttnParams
    cond: AttentionParams
    ffn: FfnParams

    @classmethod
    def seeded(cls, seed: int, c: int, num_heads: int, num_points: int, ffn_hidden: int,
               scale: float = 0.1, zero_output: bool = False):
        return cls(
            self_attn=DeformAttnParams.seeded(derive_seed(seed, "self"), c, num_heads,
                                              num_points, scale, zero_output),
            temporal=DeformAttnParams.seeded(derive_seed(seed, "temporal"), c, num_heads,
                                             num_points, scale, zero_output),
            cond=AttentionParams.seeded(derive_seed(seed, "cond"), c, num_heads, scale,
                                        zero_output),
            ffn=FfnParams.seeded(derive_seed(seed, "ffn"), c, ffn_hidden, scale, zero_output),
        )


@dataclass(frozen=True)
class WorldDecoderParams:
    queries: np.ndarray  # learnable BEV queries (h, w, c), reused every step
    layers: tuple[DecoderLayerParams, ...]
    cond_proj: LinearParams
    fourier: FourierSpec
    sem_gen: SemanticCondGen
    ego_gen: EgoMotionCondGen
    agent_gen: AgentMotionCondGen
    embed: LinearParams  # observation encoder, d * categories -> c
    heads: HeadParams

    @classmethod
    def seeded(cls, seed: int, cfg: EngineConfig, scale: float = 0.1,
               zero_output: bool = False, identity_norm: bool = False,
               zero_heads: bool = False) -> "WorldDecoderParams":
        from .neural import unified_input_length

        h, w, d = cfg.grid.dims
        c = cfg.channels
        ncat = cfg.num_categories
        fourier = FourierSpec(cfg.num_frequencies, cfg.fourier_base, cfg.fourier_include_input)
        layers = tuple(
            DecoderLayerParams.seeded(derive_seed(seed, f"layer{i}"), c, cfg.num_heads,
                                      cfg.num_points, cfg.ffn_hidden, scale, zero_output)
            for i in range(cfg.num_layers)
        )
        if identity_norm:
            sem = SemanticCondGen.identity(c, d, ncat)
            ego = EgoMotionCondGen.identity(c)
            agent = AgentMotionCondGen.identity(c, d)
        else:
            sem = SemanticCondGen.seeded(derive_seed(seed, "sem"), c, d, ncat, scale)
            ego = EgoMotionCondGen.seeded(derive_seed(seed, "ego"), c, scale=scale)
            agent = AgentMotionCondGen.seeded(derive_seed(seed, "agent"), c, d, scale)
        heads = (HeadParams.zeros(c, d, ncat) if zero_heads
                 else HeadParams.seeded(derive_seed(seed, "heads"), c, d, ncat, scale))
        return cls(
            queries=seeded_uniform(derive_seed(seed, "queries"), (h, w, c), scale),
            layers=layers,
            cond_proj=LinearParams.seeded(derive_seed(seed, "cond_proj"),
                                          unified_input_length(fourier), c, scale),
            fourier=fourier,
            sem_gen=sem,
            ego_gen=ego,
            agent_gen=agent,
            embed=LinearParams.seeded(derive_seed(seed, "embed"), d * ncat, c, scale),
            heads=heads,
        )


def action_implied_pose(last_pose: EgoPose, actions, dt: float) -> EgoPose:
    """World pose of the next frame implied by the per-step actions.

    A trajectory step (or a velocity integrated over dt) translates the
    ego with heading held fixed; other conditions leave the pose as-is.
    """
    for a in actions:
        if a.kind == TRAJECTORY_STEP:
            return compose(last_pose, EgoPose(0.0, a.values[0], a.values[1]))
    for a in actions:
        if a.kind == VELOCITY:
            return compose(last_pose, EgoPose(0.0, a.values[0] * dt, a.values[1] * dt))
    return last_pose


def decode_next(queue: MemoryQueue, actions, params: WorldDecoderParams,
                cfg: EngineConfig) -> BevEmbedding:
    """One autoregressive step: BEV queries -> next frame's embedding.

    Each layer runs pre-norm residual sub-blocks (deformable self-attn,
    temporal cross-attn averaged over the memory entries with ego-aligned
    references, cross-attn against the fused action token, FFN); with all
    output projections zeroed the whole decoder is the identity on the
    queries. Only the current memory and this step's actions are read.
    """
    if not queue.entries:
        raise ValueError("memory queue is empty; push at least one observation first")
    h, w, d = cfg.grid.dims
    c = cfg.channels
    next_pose = action_implied_pose(queue.last.ego_pose_world, actions, cfg.dt)
    token = action_token(list(actions), params.cond_proj, params.fourier)
    coords = grid_query_coords(h, w)
    refs_per_entry = [
        temporal_reference_points(coords, relative_pose(next_pose, e.ego_pose_world), cfg.grid)
        for e in queue.entries
    ]
    x = params.queries.reshape(h * w, c)
    for layer in params.layers:
        y = layer_norm_noaffine(x)
        x = x + deformable_attention(y, y.reshape(h, w, c), coords, layer.self_attn)
        y = layer_norm_noaffine(x)
        temporal = np.zeros_like(x, dtype=np.float64)
        for entry, refs in zip(queue.entries, refs_per_entry):
            temporal += deformable_attention(y, entry.features, refs, layer.temporal)
        x = (x + temporal / len(queue.entries)).astype(F32)
        y = layer_norm_noaffine(x)
        x = x + attention(y, token, layer.cond)
        y = layer_norm_noaffine(x)
        x = x + layer.ffn.apply(y)
    return BevEmbedding(queue.last.t + 1, x.reshape(h, w, c), next_pose)


@dataclass(frozen=True)
class RolloutStep:
    embedding: BevEmbedding
    logits: np.ndarray  # (h, w, d, C)
    flow_raw: np.ndarray  # (h, w, d, 3), unmasked head output
    semantic: SemanticGrid
    flow: FlowGrid


def rollout_forecast(queue: MemoryQueue, actions_per_step, params: WorldDecoderParams,
                     cfg: EngineConfig, horizon: int | None = None):
    """Autoregressive forecast of `horizon` future frames.

    Per step: decode -> heads -> push the predicted embedding back into
    memory, normalized with the predicted semantics / flow and the
    action-implied ego transform. Returns (steps, final queue); grids per
    step are (semantic, flow) in the frame implied by the actions.
    """
    horizon = cfg.horizon if horizon is None else horizon
    if len(actions_per_step) != horizon:
        raise ValueError(f"got {len(actions_per_step)} action lists for horizon {horizon}")
    steps: list[RolloutStep] = []
    for acts in actions_per_step:
        prev_pose = queue.last.ego_pose_world
        e = decode_next(queue, acts, params, cfg)
        logits, flow_raw = channel_to_height_heads(e.features, params.heads)
        semantic, flow = heads_to_grids(logits, flow_raw, cfg.grid)
        ctx = NormContext(
            sem_gen=params.sem_gen,
            ego_gen=params.ego_gen,
            agent_gen=params.agent_gen,
            ego_motion=relative_pose(prev_pose, e.ego_pose_world),
            flow=flow,
        )
        queue = memory_push(queue, e, ctx)
        steps.append(RolloutStep(e, logits, flow_raw, semantic, flow))
    return steps, queue


def warmup_memory(frames, params: WorldDecoderParams, cfg: EngineConfig,
                  capacity: int | None = None) -> MemoryQueue:
    """Encode observed frames and push them through the normalization path."""
    queue = MemoryQueue(cfg.memory_capacity if capacity is None else capacity)
    prev_pose = None
    for frame in frames:
        e = encode_observation(frame, params.embed, cfg.num_categories)
        motion = (EgoPose.identity() if prev_pose is None
                  else relative_pose(prev_pose, frame.ego_pose_world))
        ctx = NormContext(params.sem_gen, params.ego_gen, params.agent_gen, motion, frame.flow)
        queue = memory_push(queue, e, ctx)
        prev_pose = frame.ego_pose_world
    return queue


# --- losses -------------------------------------------------------------------

@dataclass(frozen=True)
class LossWeights:
    lambda_flow: float = 1.0


def _one_hot(labels: np.ndarray, num_categories: int) -> np.ndarray:
    out = np.zeros(labels.shape + (num_categories,), np.float64)
    np.put_along_axis(out, labels[..., None].astype(np.int64), 1.0, axis=-1)
    return out


def _frame_semantic_loss(logits: np.ndarray, gt_labels: np.ndarray):
    """Cross-entropy + binary-occupancy loss for one frame, with the
    gradient w.r.t. the logits."""
    ncat = logits.shape[-1]
    nvox = gt_labels.size
    s = softmax(logits, axis=-1).astype(np.float64)
    onehot = _one_hot(gt_labels, ncat)
    s_safe = np.clip(s, 1e-12, None)
    ce = float(-(onehot * np.log(s_safe)).sum() / nvox)
    dlogits = (s - onehot) / nvox

    # binary occupancy: P(occupied) = 1 - P(free); target = label != 0
    occ = (gt_labels != 0).astype(np.float64)
    p = np.clip(1.0 - s[..., 0], 1e-7, 1.0 - 1e-7)
    bce = float(-(occ * np.log(p) + (1.0 - occ) * np.log1p(-p)).mean())
    dp = (-occ / p + (1.0 - occ) / (1.0 - p)) / nvox
    # p depends on the logits only through s_free
    upstream = np.zeros_like(s)
    upstream[..., 0] = -dp
    dot = (upstream * s).sum(axis=-1, keepdims=True)
    dlogits = dlogits + s * (upstream - dot)
    return ce + bce, dlogits


def _frame_flow_loss(pred: np.ndarray, gt: np.ndarray, mask: np.ndarray):
    """Masked mean absolute error and its gradient w.r.t. pred."""
    m = mask[..., None] if mask.ndim == pred.ndim - 1 else mask
    count = float(np.count_nonzero(m) * pred.shape[-1])
    if count == 0:
        return 0.0, np.zeros_like(pred, dtype=np.float64)
    diff = (pred.astype(np.float64) - gt.astype(np.float64)) * m
    loss = float(np.abs(diff).sum() / count)
    grad = np.sign(diff) * m / count
    return loss, grad


def forecast_loss(pred_logits, pred_flows, gt_frames, weights: LossWeights = LossWeights(),
                  extra_semantic_terms=()):
    """Future forecasting loss over N_f frames.

    Mean over frames of [cross-entropy + binary occupancy] on semantics,
    plus lambda_flow times the mean masked L1 on flow over ground-truth
    movable voxels. Returns (loss, [(dlogits, dflow) per frame]).

    `extra_semantic_terms` is the extension point for additional
    per-frame semantic losses (e.g. set-overlap surrogates): callables
    (logits, gt_labels) -> (loss, dlogits) whose results join the
    per-frame mean.
    """
    if not (len(pred_logits) == len(pred_flows) == len(gt_frames)) or not gt_frames:
        raise ValueError("prediction/ground-truth frame counts must match and be nonempty")
    n = len(gt_frames)
    total = 0.0
    grads = []
    for logits, flow, frame in zip(pred_logits, pred_flows, gt_frames):
        if logits.shape[:3] != frame.semantic.labels.shape or flow.shape[:3] != frame.semantic.labels.shape:
            raise ValueError(f"prediction shape {logits.shape} does not match ground truth "
                             f"{frame.semantic.labels.shape}")
        sem_loss, dlogits = _frame_semantic_loss(logits, frame.semantic.labels)
        for term in extra_semantic_terms:
            extra, dextra = term(logits, frame.semantic.labels)
            sem_loss += extra
            dlogits = dlogits + np.asarray(dextra, np.float64)
        gmo = frame.instances.ids > 0
        flow_loss, dflow = _frame_flow_loss(flow, frame.flow.vectors, gmo)
        total += (sem_loss + weights.lambda_flow * flow_loss) / n
        grads.append((
            (dlogits / n).astype(F32),
            (weights.lambda_flow * dflow / n).astype(F32),
        ))
    return total, grads


def norm_loss(hist_logits, hist_flows, gt_frames, weights: LossWeights = LossWeights()):
    """Supervision of the historical semantic probabilities and flow used
    by the normalization path: cross-entropy plus weighted L1, averaged
    over the history length. Empty histories are rejected."""
    if not gt_frames:
        raise ValueError("history is empty")
    if not (len(hist_logits) == len(hist_flows) == len(gt_frames)):
        raise ValueError("history length mismatch")
    n = len(gt_frames)
    total = 0.0
    grads = []
    for logits, flow, frame in zip(hist_logits, hist_flows, gt_frames):
        ncat = logits.shape[-1]
        nvox = frame.semantic.labels.size
        s = softmax(logits, axis=-1).astype(np.float64)
        onehot = _one_hot(frame.semantic.labels, ncat)
        ce = float(-(onehot * np.log(np.clip(s, 1e-12, None))).sum() / nvox)
        dlogits = (s - onehot) / nvox
        gmo = frame.instances.ids > 0
        flow_loss, dflow = _frame_flow_loss(flow, frame.flow.vectors, gmo)
        total += (ce + weights.lambda_flow * flow_loss) / n
        grads.append(((dlogits / n).astype(F32),
                      (weights.lambda_flow * dflow / n).astype(F32)))
    return total, grads
