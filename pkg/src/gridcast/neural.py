"""Neural building blocks of the forecasting engine.

Covers conditional normalization (scale/shift generated from semantic
labels, ego motion, or agent flow), Fourier action embeddings with a
unified conditioning interface, deformable and standard multi-head
attention, feed-forward blocks, channel-to-height prediction heads, and
the flat binary checkpoint format.

All parameter containers are frozen dataclasses of float32 arrays;
forward passes are pure functions.
"""

from __future__ import annotations

import dataclasses
import struct
from dataclasses import dataclass

import numpy as np

from .actions import COMMAND, COMMANDS, CURVATURE, TRAJECTORY_STEP, VELOCITY, ActionCondition
from .grid import GMO_CATEGORIES, EgoPose, FlowGrid, GridConfig, SemanticGrid
from .kernels import (
    F32,
    bilinear_sample_2d,
    derive_seed,
    layer_norm64,
    layer_norm_backward,
    layer_norm_noaffine,
    matmul,
    seeded_uniform,
    softmax,
)


# --- linear maps ------------------------------------------------------------

@dataclass(frozen=True)
class LinearParams:
    """y = x @ w + b with w (din, dout), b (dout)."""

    w: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        if self.w.ndim != 2 or self.b.shape != (self.w.shape[1],):
            raise ValueError(f"inconsistent linear shapes {self.w.shape} / {self.b.shape}")

    @classmethod
    def seeded(cls, seed: int, din: int, dout: int, scale: float = 0.1) -> "LinearParams":
        return cls(seeded_uniform(seed, (din, dout), scale), np.zeros(dout, F32))

    @classmethod
    def zeros(cls, din: int, dout: int) -> "LinearParams":
        return cls(np.zeros((din, dout), F32), np.zeros(dout, F32))

    @property
    def din(self) -> int:
        return self.w.shape[0]

    @property
    def dout(self) -> int:
        return self.w.shape[1]

    def apply(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, F32)
        lead = x.shape[:-1]
        out = matmul(x.reshape(-1, self.din), self.w) + self.b
        return out.reshape(*lead, self.dout)

    def backward(self, x: np.ndarray, dout: np.ndarray):
        """VJP: returns (dx, dw, db)."""
        x2 = np.asarray(x, np.float64).reshape(-1, self.din)
        d2 = np.asarray(dout, np.float64).reshape(-1, self.dout)
        dx = (d2 @ self.w.astype(np.float64).T).reshape(np.shape(x)).astype(F32)
        dw = (x2.T @ d2).astype(F32)
        db = d2.sum(axis=0).astype(F32)
        return dx, dw, db


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0).astype(F32)


# --- conditional normalization ----------------------------------------------

COND_SOURCES = ("semantic", "ego_motion", "agent_motion")


@dataclass(frozen=True)
class CondNormParams:
    """Per-cell scale and shift (h, w, c) produced by one generator."""

    gamma: np.ndarray
    beta: np.ndarray
    source: str

    def __post_init__(self):
        if self.gamma.shape != self.beta.shape:
            raise ValueError("gamma/beta shapes differ")
        if self.source not in COND_SOURCES:
            raise ValueError(f"unknown source {self.source!r}")
        if not (np.isfinite(self.gamma).all() and np.isfinite(self.beta).all()):
            raise ValueError("conditional norm parameters must be finite")


def conditional_normalize64(features: np.ndarray, params, order=COND_SOURCES) -> np.ndarray:
    """Float64 core of conditional_normalize (no final cast); useful when
    probing gradients without float32 output rounding."""
    params = sorted(params, key=lambda p: order.index(p.source))
    y = layer_norm64(features)
    for p in params:
        if p.gamma.shape != y.shape:
            raise ValueError(f"param shape {p.gamma.shape} != features {y.shape}")
        y = p.gamma.astype(np.float64) * y + p.beta.astype(np.float64)
    return y


def conditional_normalize(features: np.ndarray, params, order=COND_SOURCES) -> np.ndarray:
    """Layer-normalize a BEV feature map and apply the affine modulation
    stages in canonical source order (semantic, ego_motion, agent_motion).

    An empty parameter list is a plain no-affine layer norm. The affine
    stages compose on the single normalized tensor; identity parameters
    (gamma=1, beta=0) therefore reproduce layer_norm_noaffine bitwise.
    """
    return conditional_normalize64(features, params, order).astype(F32) + F32(0.0)


def conditional_normalize_backward(features: np.ndarray, params, dout: np.ndarray,
                                   order=COND_SOURCES):
    """VJP of conditional_normalize: (dfeatures, [(dgamma, dbeta) per param,
    in the given params order])."""
    sorted_params = sorted(params, key=lambda p: order.index(p.source))
    z = [layer_norm64(features)]
    for p in sorted_params:
        z.append(p.gamma.astype(np.float64) * z[-1] + p.beta.astype(np.float64))
    dz = np.asarray(dout, np.float64)
    grads_sorted = []
    for k in range(len(sorted_params) - 1, -1, -1):
        p = sorted_params[k]
        grads_sorted.append((dz * z[k], dz.copy()))
        dz = dz * p.gamma.astype(np.float64)
    grads_sorted.reverse()
    dx = layer_norm_backward(features, dz)
    remap = {id(p): g for p, g in zip(sorted_params, grads_sorted)}
    grads = [tuple(a.astype(F32) for a in remap[id(p)]) for p in params]
    return dx, grads


@dataclass(frozen=True)
class SemanticCondGen:
    """Lightweight voxel classifier + 1x1 mix producing (gamma, beta) from
    the argmax semantic labels of a BEV embedding."""

    head: LinearParams  # c -> d * num_categories
    mix: LinearParams  # d * num_categories -> 2c
    d: int
    num_categories: int

    @classmethod
    def seeded(cls, seed: int, c: int, d: int, num_categories: int, scale: float = 0.1):
        return cls(
            head=LinearParams.seeded(derive_seed(seed, "sem.head"), c, d * num_categories, scale),
            mix=LinearParams.seeded(derive_seed(seed, "sem.mix"), d * num_categories, 2 * c, scale),
            d=d,
            num_categories=num_categories,
        )

    @classmethod
    def identity(cls, c: int, d: int, num_categories: int, head: LinearParams | None = None):
        """Zero mix weights with bias (1, 0): modulation is the identity."""
        bias = np.concatenate([np.ones(c, F32), np.zeros(c, F32)])
        mix = LinearParams(np.zeros((d * num_categories, 2 * c), F32), bias)
        if head is None:
            head = LinearParams.zeros(c, d * num_categories)
        return cls(head=head, mix=mix, d=d, num_categories=num_categories)


def semantic_logits(features: np.ndarray, gen: SemanticCondGen) -> np.ndarray:
    """Voxel-wise classifier logits (h, w, d, C) from BEV features."""
    h, w, _ = features.shape
    return gen.head.apply(features).reshape(h, w, gen.d, gen.num_categories)


def semantic_cond_params(features: np.ndarray, gen: SemanticCondGen) -> CondNormParams:
    """(gamma^s, beta^s) from predicted voxel labels.

    The classifier output passes through argmax (labels only; logits
    cannot leak through), labels are one-hot encoded, the d one-hot slabs
    are concatenated along channels, and a 1x1 mix maps them to 2c.
    """
    h, w, _ = features.shape
    logits = semantic_logits(features, gen)
    labels = logits.argmax(axis=-1)  # (h, w, d)
    onehot = np.zeros((h, w, gen.d, gen.num_categories), F32)
    np.put_along_axis(onehot, labels[..., None], 1.0, axis=-1)
    mixed = gen.mix.apply(onehot.reshape(h, w, gen.d * gen.num_categories))
    c = mixed.shape[-1] // 2
    return CondNormParams(mixed[..., :c], mixed[..., c:], "semantic")


@dataclass(frozen=True)
class EgoMotionCondGen:
    """Two-layer MLP from the flattened 2x3 [R|T] matrix to (gamma, beta),
    broadcast uniformly over the BEV plane."""

    fc1: LinearParams  # 6 -> hidden
    fc2: LinearParams  # hidden -> 2c

    @classmethod
    def seeded(cls, seed: int, c: int, hidden: int = 32, scale: float = 0.1):
        return cls(
            fc1=LinearParams.seeded(derive_seed(seed, "ego.fc1"), 6, hidden, scale),
            fc2=LinearParams.seeded(derive_seed(seed, "ego.fc2"), hidden, 2 * c, scale),
        )

    @classmethod
    def identity(cls, c: int, hidden: int = 32):
        bias = np.concatenate([np.ones(c, F32), np.zeros(c, F32)])
        return cls(
            fc1=LinearParams.zeros(6, hidden),
            fc2=LinearParams(np.zeros((hidden, 2 * c), F32), bias),
        )


def ego_motion_cond_params(rel: EgoPose, gen: EgoMotionCondGen, hw: tuple[int, int]) -> CondNormParams:
    """(gamma^e, beta^e) from a relative ego transform, spatially uniform."""
    flat = rel.matrix().reshape(-1).astype(F32)
    out = gen.fc2.apply(relu(gen.fc1.apply(flat[None, :])))[0]
    c = out.shape[-1] // 2
    h, w = hw
    gamma = np.broadcast_to(out[:c], (h, w, c)).copy()
    beta = np.broadcast_to(out[c:], (h, w, c)).copy()
    return CondNormParams(gamma, beta, "ego_motion")


@dataclass(frozen=True)
class AgentMotionCondGen:
    """1x1 map from the height-stacked flow field (d*3 channels) to
    (gamma, beta) for fine-grained motion-aware normalization."""

    mix: LinearParams  # d * 3 -> 2c
    d: int

    @classmethod
    def seeded(cls, seed: int, c: int, d: int, scale: float = 0.1):
        return cls(mix=LinearParams.seeded(derive_seed(seed, "agent.mix"), d * 3, 2 * c, scale), d=d)

    @classmethod
    def identity(cls, c: int, d: int):
        bias = np.concatenate([np.ones(c, F32), np.zeros(c, F32)])
        return cls(mix=LinearParams(np.zeros((d * 3, 2 * c), F32), bias), d=d)


def agent_motion_cond_params(flow: FlowGrid, gen: AgentMotionCondGen) -> CondNormParams:
    h, w, d = flow.config.dims
    if d != gen.d:
        raise ValueError(f"flow depth {d} != generator depth {gen.d}")
    mixed = gen.mix.apply(flow.vectors.reshape(h, w, d * 3))
    c = mixed.shape[-1] // 2
    return CondNormParams(mixed[..., :c], mixed[..., c:], "agent_motion")


# --- action conditioning ------------------------------------------------------

@dataclass(frozen=True)
class FourierSpec:
    num_frequencies: int = 4
    base: float = 2.0
    include_input: bool = True

    def __post_init__(self):
        if self.num_frequencies < 1:
            raise ValueError("num_frequencies must be >= 1")

    @property
    def per_scalar(self) -> int:
        return 2 * self.num_frequencies + (1 if self.include_input else 0)


_KIND_SCALARS = {VELOCITY: 2, CURVATURE: 1, TRAJECTORY_STEP: 2}
SLOT_ORDER = (VELOCITY, CURVATURE, TRAJECTORY_STEP, COMMAND)


def fourier_feature_length(kind: str, spec: FourierSpec) -> int:
    if kind == COMMAND:
        return len(COMMANDS)
    return _KIND_SCALARS[kind] * spec.per_scalar


def fourier_embed(action: ActionCondition, spec: FourierSpec) -> np.ndarray:
    """Fixed-length embedding of one action condition.

    Each scalar s emits [sin(base^j * pi * s), cos(base^j * pi * s)] for
    j < num_frequencies, followed by s itself when include_input is set.
    Commands bypass the Fourier map and become a one-hot triple.
    """
    if action.kind == COMMAND:
        out = np.zeros(len(COMMANDS), F32)
        out[COMMANDS.index(action.command)] = 1.0
        return out
    feats = []
    for s in action.scalars():
        for j in range(spec.num_frequencies):
            arg = (spec.base ** j) * np.pi * s
            feats.extend((np.sin(arg), np.cos(arg)))
        if spec.include_input:
            feats.append(s)
    return np.array(feats, F32)


def unified_input_length(spec: FourierSpec) -> int:
    return sum(fourier_feature_length(k, spec) for k in SLOT_ORDER)


def unify_conditions(embeds, proj: LinearParams, spec: FourierSpec) -> np.ndarray:
    """Fuse per-kind embeddings into one (1, c) conditioning token.

    `embeds` is a list of (kind, vector) pairs; missing kinds are
    zero-padded into a fixed slot layout (velocity | curvature |
    trajectory | command) before the learned projection.
    """
    if not embeds:
        raise ValueError("at least one action embedding is required")
    slots = {}
    for kind, vec in embeds:
        if kind not in SLOT_ORDER:
            raise ValueError(f"unknown condition kind {kind!r}")
        if kind in slots:
            raise ValueError(f"duplicate condition kind {kind!r}")
        vec = np.asarray(vec, F32)
        expected = fourier_feature_length(kind, spec)
        if vec.shape != (expected,):
            raise ValueError(f"{kind} embedding must have length {expected}, got {vec.shape}")
        slots[kind] = vec
    parts = [slots.get(k, np.zeros(fourier_feature_length(k, spec), F32)) for k in SLOT_ORDER]
    return proj.apply(np.concatenate(parts)[None, :])


def action_token(actions, proj: LinearParams, spec: FourierSpec) -> np.ndarray:
    """Embed and fuse a list of ActionConditions; an empty list yields the
    all-slots-zero token."""
    if actions:
        return unify_conditions([(a.kind, fourier_embed(a, spec)) for a in actions], proj, spec)
    zero = np.zeros(unified_input_length(spec), F32)
    return proj.apply(zero[None, :])


# --- attention ----------------------------------------------------------------

@dataclass(frozen=True)
class DeformAttnParams:
    num_heads: int
    num_points: int
    query: LinearParams  # c -> c
    offset: LinearParams  # c -> heads * points * 2
    weight: LinearParams  # c -> heads * points
    value: LinearParams  # c -> c
    output: LinearParams  # c -> c

    def __post_init__(self):
        c = self.query.din
        if self.num_points < 1:
            raise ValueError("num_points must be >= 1")
        if c % self.num_heads:
            raise ValueError("channels must divide evenly into heads")
        hp = self.num_heads * self.num_points
        if (self.query.dout != c or self.value.w.shape != (c, c) or self.output.w.shape != (c, c)
                or self.offset.w.shape != (c, hp * 2) or self.weight.w.shape != (c, hp)):
            raise ValueError("deformable attention projection shapes are inconsistent")

    @classmethod
    def seeded(cls, seed: int, c: int, num_heads: int, num_points: int,
               scale: float = 0.1, zero_output: bool = False):
        hp = num_heads * num_points
        return cls(
            num_heads=num_heads,
            num_points=num_points,
            query=LinearParams.seeded(derive_seed(seed, "q"), c, c, scale),
            offset=LinearParams.seeded(derive_seed(seed, "off"), c, hp * 2, scale),
            weight=LinearParams.seeded(derive_seed(seed, "w"), c, hp, scale),
            value=LinearParams.seeded(derive_seed(seed, "v"), c, c, scale),
            output=LinearParams.zeros(c, c) if zero_output
            else LinearParams.seeded(derive_seed(seed, "o"), c, c, scale),
        )


def deformable_attention(queries: np.ndarray, value_map: np.ndarray,
                         ref_points: np.ndarray, params: DeformAttnParams) -> np.ndarray:
    """Deformable attention: each query predicts per-head sampling offsets
    and weights, gathers the projected value map bilinearly at
    ref + offset, and mixes the samples with softmax weights.

    queries (n, c), value_map (h, w, c), ref_points (n, 2) fractional
    (row, col). Returns (n, c).
    """
    n, c = queries.shape
    heads, points = params.num_heads, params.num_points
    ch = c // heads
    q = params.query.apply(queries)
    offsets = params.offset.apply(q).reshape(n, heads, points, 2)
    attn = softmax(params.weight.apply(q).reshape(n, heads, points), axis=-1)
    h, w, _ = value_map.shape
    v = params.value.apply(value_map.reshape(-1, c)).reshape(h, w, heads, ch)
    pts = np.asarray(ref_points, np.float64)[:, None, None, :] + offsets.astype(np.float64)
    mixed = np.empty((n, heads, ch), np.float64)
    for hi in range(heads):
        samples = bilinear_sample_2d(v[:, :, hi, :], pts[:, hi].reshape(-1, 2))
        samples = samples.reshape(n, points, ch).astype(np.float64)
        mixed[:, hi] = (attn[:, hi, :, None].astype(np.float64) * samples).sum(axis=1)
    return params.output.apply(mixed.reshape(n, c).astype(F32))


@dataclass(frozen=True)
class AttentionParams:
    """Standard multi-head attention projections."""

    num_heads: int
    q: LinearParams
    k: LinearParams
    v: LinearParams
    o: LinearParams

    @classmethod
    def seeded(cls, seed: int, c: int, num_heads: int, scale: float = 0.1,
               zero_output: bool = False):
        return cls(
            num_heads=num_heads,
            q=LinearParams.seeded(derive_seed(seed, "q"), c, c, scale),
            k=LinearParams.seeded(derive_seed(seed, "k"), c, c, scale),
            v=LinearParams.seeded(derive_seed(seed, "v"), c, c, scale),
            o=LinearParams.zeros(c, c) if zero_output
            else LinearParams.seeded(derive_seed(seed, "o"), c, c, scale),
        )


def attention(queries: np.ndarray, keys: np.ndarray, params: AttentionParams) -> np.ndarray:
    """Scaled dot-product cross-attention of (n, c) queries over (m, c) keys."""
    n, c = queries.shape
    m = keys.shape[0]
    heads = params.num_heads
    ch = c // heads
    q = params.q.apply(queries).reshape(n, heads, ch)
    k = params.k.apply(keys).reshape(m, heads, ch)
    v = params.v.apply(keys).reshape(m, heads, ch)
    scores = np.einsum("nhc,mhc->nhm", q.astype(np.float64), k.astype(np.float64)) / np.sqrt(ch)
    attn = softmax(scores, axis=-1).astype(np.float64)
    out = np.einsum("nhm,mhc->nhc", attn, v.astype(np.float64)).reshape(n, c)
    return params.o.apply(out.astype(F32))


@dataclass(frozen=True)
class FfnParams:
    fc1: LinearParams
    fc2: LinearParams

    @classmethod
    def seeded(cls, seed: int, c: int, hidden: int, scale: float = 0.1,
               zero_output: bool = False):
        return cls(
            fc1=LinearParams.seeded(derive_seed(seed, "fc1"), c, hidden, scale),
            fc2=LinearParams.zeros(hidden, c) if zero_output
            else LinearParams.seeded(derive_seed(seed, "fc2"), hidden, c, scale),
        )

    def apply(self, x: np.ndarray) -> np.ndarray:
        return self.fc2.apply(relu(self.fc1.apply(x)))


# --- channel-to-height heads ---------------------------------------------------

@dataclass(frozen=True)
class HeadParams:
    """Per-BEV-cell linear heads decoding channels into d height bins of
    category logits and 3D flow."""

    occupancy: LinearParams  # c -> d * num_categories
    flow: LinearParams  # c -> d * 3
    d: int
    num_categories: int

    @classmethod
    def seeded(cls, seed: int, c: int, d: int, num_categories: int, scale: float = 0.1):
        return cls(
            occupancy=LinearParams.seeded(derive_seed(seed, "occ"), c, d * num_categories, scale),
            flow=LinearParams.seeded(derive_seed(seed, "flow"), c, d * 3, scale),
            d=d,
            num_categories=num_categories,
        )

    @classmethod
    def zeros(cls, c: int, d: int, num_categories: int):
        return cls(LinearParams.zeros(c, d * num_categories), LinearParams.zeros(c, d * 3),
                   d, num_categories)


def channel_to_height_heads(features: np.ndarray, heads: HeadParams):
    """(h, w, c) BEV features -> ((h, w, d, C) logits, (h, w, d, 3) flow)."""
    h, w, _ = features.shape
    logits = heads.occupancy.apply(features).reshape(h, w, heads.d, heads.num_categories)
    flow = heads.flow.apply(features).reshape(h, w, heads.d, 3)
    return logits, flow


def heads_to_grids(logits: np.ndarray, flow: np.ndarray, cfg: GridConfig):
    """Argmax the logits into a SemanticGrid (ties resolve to the lowest
    category) and wrap the flow, zeroed outside predicted movable voxels."""
    labels = logits.argmax(axis=-1).astype(np.uint8)
    masked = np.ascontiguousarray(flow, F32).copy()
    masked[~np.isin(labels, sorted(GMO_CATEGORIES))] = 0.0
    return SemanticGrid(cfg, labels), FlowGrid(cfg, masked)


# --- checkpoint format ---------------------------------------------------------
# name length u16, name bytes, rank u8, dims u32 each, f32 payload; little-endian

def iter_named_tensors(obj, prefix: str = ""):
    """Yield (name, float32 array) for every ndarray field reachable from a
    dataclass tree (tuples/lists recursed with numeric names)."""
    if isinstance(obj, np.ndarray):
        yield prefix or "value", obj
        return
    if dataclasses.is_dataclass(obj):
        for f in dataclasses.fields(obj):
            v = getattr(obj, f.name)
            name = f"{prefix}.{f.name}" if prefix else f.name
            yield from iter_named_tensors(v, name)
        return
    if isinstance(obj, (tuple, list)):
        for i, v in enumerate(obj):
            yield from iter_named_tensors(v, f"{prefix}.{i}" if prefix else str(i))


def replace_tensors(obj, mapping: dict, prefix: str = ""):
    """Rebuild a dataclass tree with arrays taken from mapping (by name)."""
    if isinstance(obj, np.ndarray):
        key = prefix or "value"
        arr = mapping[key]
        if arr.shape != obj.shape:
            raise ValueError(f"checkpoint tensor {key} has shape {arr.shape}, expected {obj.shape}")
        return np.ascontiguousarray(arr, F32)
    if dataclasses.is_dataclass(obj):
        updates = {}
        for f in dataclasses.fields(obj):
            v = getattr(obj, f.name)
            name = f"{prefix}.{f.name}" if prefix else f.name
            if isinstance(v, (np.ndarray, tuple, list)) or dataclasses.is_dataclass(v):
                new = replace_tensors(v, mapping, name)
                if new is not v:
                    updates[f.name] = new
        return dataclasses.replace(obj, **updates) if updates else obj
    if isinstance(obj, (tuple, list)):
        items = [replace_tensors(v, mapping, f"{prefix}.{i}" if prefix else str(i))
                 for i, v in enumerate(obj)]
        return type(obj)(items) if isinstance(obj, list) else tuple(items)
    return obj


def save_checkpoint(path, obj) -> None:
    """Write all named tensors of a dataclass tree (or a plain name->array
    dict), sorted by name for byte determinism."""
    tensors = dict(obj) if isinstance(obj, dict) else dict(iter_named_tensors(obj))
    with open(path, "wb") as f:
        for name in sorted(tensors):
            arr = np.ascontiguousarray(tensors[name], F32)
            encoded = name.encode()
            f.write(struct.pack("<H", len(encoded)))
            f.write(encoded)
            f.write(struct.pack("<B", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(arr.astype("<f4").tobytes())


def load_checkpoint(path) -> dict:
    tensors = {}
    with open(path, "rb") as f:
        raw = f.read()
    pos = 0
    while pos < len(raw):
        (nlen,) = struct.unpack_from("<H", raw, pos)
        pos += 2
        name = raw[pos:pos + nlen].decode()
        pos += nlen
        (rank,) = struct.unpack_from("<B", raw, pos)
        pos += 1
        dims = struct.unpack_from(f"<{rank}I", raw, pos)
        pos += 4 * rank
        count = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(raw, dtype="<f4", count=count, offset=pos).reshape(dims)
        pos += 4 * count
        tensors[name] = arr.astype(F32)
    return tensors
