"""Attention variants over 2D token grids.

Exact quadratic references (softmax over all pairs, per-group softmax), the
linearized global form, and the locality-weighted group mechanism in two
implementations that must agree: a per-member enumeration oracle and a
prefix-sum dynamic program whose cost per query is the number of individually
weighted groups plus one closed-form tail term.

Forward passes record a tape holding every intermediate the analytic backward
pass needs, so gradients never re-derive the forward numerics.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .featmap import FeatureMapParams, feature_forward
from .sat import SummedAreaTable
from .vicinal import GridShape, PartitionKind, PartitionScheme, group_members
from .weights import (StickParams, WeightGrid, WeightScheme, WeightSchemeKind,
                      scheme_weights_grid)

DEFAULT_EPSILON = 1e-6


@dataclass(frozen=True)
class AttentionConfig:
    """Single-head configuration: how to weight groups and featurize tokens."""

    scheme: WeightScheme
    partition: PartitionScheme
    featmap: FeatureMapParams
    epsilon: float = DEFAULT_EPSILON

    def __post_init__(self):
        if self.epsilon < 0.0:
            raise ValueError("epsilon must be >= 0")


@dataclass
class AttentionTape:
    """Everything the backward pass consumes, captured during one forward."""

    config: AttentionConfig
    q: np.ndarray
    k: np.ndarray
    v: np.ndarray
    phi_q: np.ndarray          # (H, W, Dp)
    phi_k: np.ndarray          # (H, W, Dp)
    sat_kv: SummedAreaTable    # prefix sums of phi_k v^T, channels (Dp, C)
    sat_k: SummedAreaTable     # prefix sums of phi_k, channels (Dp,)
    weights: WeightGrid
    y_num: np.ndarray          # (H, W, Dp, C) weighted group sums, numerator stream
    y_den: np.ndarray          # (H, W, Dp) weighted group sums, denominator stream
    num: np.ndarray            # (H, W, C)
    den: np.ndarray            # (H, W), stabilizer included


@dataclass
class AttentionOutput:
    out: np.ndarray
    tape: AttentionTape | None


# ---------- flat-sequence references ----------

def _as_float(a) -> np.ndarray:
    """Pass float32/float64 through untouched, promote everything else to f64.

    The flat reference paths honor a 32-bit input dtype so they can be
    benchmarked in single precision; the grid paths always accumulate in f64.
    """
    a = np.asarray(a)
    if a.dtype in (np.float32, np.float64):
        return a
    return a.astype(np.float64)


def softmax_attention(q: np.ndarray, k: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Exact softmax attention over flat sequences; no scaling factor.

    q: (N, D), k: (M, D), v: (M, C) -> (N, C). Quadratic time and memory.
    """
    q = _as_float(q)
    k = _as_float(k)
    v = _as_float(v)
    if q.shape[-1] != k.shape[-1] or k.shape[0] != v.shape[0]:
        raise ValueError("query/key widths and key/value counts must match")
    scores = q @ k.T
    scores -= scores.max(axis=1, keepdims=True)  # shift-invariant, avoids overflow
    wts = np.exp(scores)
    wts /= wts.sum(axis=1, keepdims=True)
    return wts @ v


def linearized_attention(q: np.ndarray, k: np.ndarray, v: np.ndarray,
                         featmap: FeatureMapParams,
                         epsilon: float = DEFAULT_EPSILON) -> np.ndarray:
    """Feature-factorized attention: one pass over keys, one over queries."""
    pq = feature_forward(q, featmap)
    pk = feature_forward(k, featmap)
    z1 = pk.T @ _as_float(v)
    z2 = pk.sum(axis=0)
    num = pq @ z1
    den = pq @ z2 + epsilon
    _check_denominator(den)
    return num / den[:, None]


def linearized_attention_into(out: np.ndarray, q: np.ndarray, k: np.ndarray,
                              v: np.ndarray, featmap: FeatureMapParams,
                              epsilon: float = DEFAULT_EPSILON,
                              chunk: int = 512) -> None:
    """Streaming form for the benchmark memory probe: tokens are featurized in
    fixed-size chunks and reduced into running statistics, so peak transient
    allocation is independent of the token count."""
    v = _as_float(v)
    dp = featmap.out_dim
    z1 = np.zeros((dp, v.shape[1]), dtype=v.dtype)
    z2 = np.zeros(dp, dtype=v.dtype)
    for lo in range(0, k.shape[0], chunk):
        pk = feature_forward(k[lo:lo + chunk], featmap)
        z1 += pk.T @ v[lo:lo + chunk]
        z2 += pk.sum(axis=0)
    for lo in range(0, q.shape[0], chunk):
        pq = feature_forward(q[lo:lo + chunk], featmap)
        den = pq @ z2 + epsilon
        _check_denominator(den)
        out[lo:lo + chunk] = (pq @ z1) / den[:, None]


def _check_denominator(den: np.ndarray) -> None:
    if np.any(den == 0.0):
        raise FloatingPointError(
            "attention denominator is exactly zero; use a positive epsilon or "
            "different feature parameters")


# ---------- grouped attention over grids ----------

def _featurize(qgrid, kgrid, vgrid, config: AttentionConfig):
    q = np.asarray(qgrid, dtype=np.float64)
    k = np.asarray(kgrid, dtype=np.float64)
    v = np.asarray(vgrid, dtype=np.float64)
    if q.ndim != 3 or k.shape[:2] != q.shape[:2] or v.shape[:2] != q.shape[:2]:
        raise ValueError("q, k, v must be (H, W, dim) grids over the same shape")
    if q.shape[2] != k.shape[2]:
        raise ValueError("query and key widths must match")
    shape = GridShape(q.shape[0], q.shape[1])
    pq = feature_forward(q, config.featmap)
    pk = feature_forward(k, config.featmap)
    return q, k, v, shape, pq, pk


def _finalize(pq, y_num, y_den, epsilon):
    num = np.einsum("hwd,hwdc->hwc", pq, y_num)
    den = np.einsum("hwd,hwd->hw", pq, y_den) + epsilon
    _check_denominator(den)
    return num, den, num / den[..., None]


def _make_tape(config, q, k, v, pq, pk, wg, y_num, y_den, num, den,
               sat_kv=None, sat_k=None):
    if sat_kv is None:
        sat_kv = SummedAreaTable(np.einsum("hwd,hwc->hwdc", pk, v))
    if sat_k is None:
        sat_k = SummedAreaTable(pk)
    return AttentionTape(config=config, q=q, k=k, v=v, phi_q=pq, phi_k=pk,
                         sat_kv=sat_kv, sat_k=sat_k, weights=wg,
                         y_num=y_num, y_den=y_den, num=num, den=den)


def ripple_naive(qgrid, kgrid, vgrid, config: AttentionConfig,
                 build_tape: bool = True,
                 weights: WeightGrid | None = None) -> AttentionOutput:
    """Trusted oracle: every group summed member by member, no prefix sums.

    Cost grows with the square of the group count per query; use it to check
    the dynamic program, not to run at scale.
    """
    q, k, v, shape, pq, pk = _featurize(qgrid, kgrid, vgrid, config)
    wg = weights if weights is not None else scheme_weights_grid(
        config.scheme, v, shape, config.partition)
    h, w = shape.height, shape.width
    dp, c = pq.shape[2], v.shape[2]
    x1 = np.einsum("hwd,hwc->hwdc", pk, v)
    y_num = np.zeros((h, w, dp, c))
    y_den = np.zeros((h, w, dp))
    for i in range(1, h + 1):
        for j in range(1, w + 1):
            for r in range(int(wg.groups[i - 1, j - 1])):
                members = group_members(config.partition, shape, (i, j), r)
                if not members:
                    continue
                rows = np.fromiter((m[0] - 1 for m in members), dtype=np.int64)
                cols = np.fromiter((m[1] - 1 for m in members), dtype=np.int64)
                a = wg.alphas[i - 1, j - 1, r]
                y_num[i - 1, j - 1] += a * x1[rows, cols].sum(axis=0)
                y_den[i - 1, j - 1] += a * pk[rows, cols].sum(axis=0)
    num, den, out = _finalize(pq, y_num, y_den, config.epsilon)
    tape = _make_tape(config, q, k, v, pq, pk, wg, y_num, y_den, num, den) \
        if build_tape else None
    return AttentionOutput(out=out, tape=tape)


def _span_hi(kind: PartitionKind, g) -> np.ndarray:
    """Outer radius of group g (vectorized); -1 for g < 0 (the empty prefix)."""
    g = np.asarray(g)
    if kind is PartitionKind.UNIT_RING:
        return g
    return np.where(g <= 0, g, 2 ** np.maximum(g, 0) - 1)


def _ripple_core(qgrid, kgrid, vgrid, config: AttentionConfig,
                 weights: WeightGrid | None = None) -> AttentionOutput:
    q, k, v, shape, pq, pk = _featurize(qgrid, kgrid, vgrid, config)
    wg = weights if weights is not None else scheme_weights_grid(
        config.scheme, v, shape, config.partition)
    kind = config.partition.kind
    x1 = np.einsum("hwd,hwc->hwdc", pk, v)
    sat_kv = SummedAreaTable(x1)
    sat_k = SummedAreaTable(pk)
    h, w = shape.height, shape.width
    dp, c = pq.shape[2], v.shape[2]
    y_num = np.zeros((h, w, dp, c))
    y_den = np.zeros((h, w, dp))
    hat = wg.hat
    prev1 = np.zeros_like(y_num)
    prev2 = np.zeros_like(y_den)
    # ascending sweep: each group is the difference of two nested windows
    for g in range(int(hat.max())):
        hi = int(_span_hi(kind, g))
        cur1 = sat_kv.window_sum_grid(hi)
        cur2 = sat_k.window_sum_grid(hi)
        coef = np.where(g < hat, wg.alphas[..., g], 0.0)
        y_num += coef[..., None, None] * (cur1 - prev1)
        y_den += coef[..., None] * (cur2 - prev2)
        prev1, prev2 = cur1, cur2
    # everything past the halting index shares one weight, so it needs only
    # the total minus the already-covered window
    covered = _span_hi(kind, hat - 1)
    tail1 = sat_kv.total() - sat_kv.window_sum_grid(covered)
    tail2 = sat_k.total() - sat_k.window_sum_grid(covered)
    y_num += wg.merged[..., None, None] * tail1
    y_den += wg.merged[..., None] * tail2
    num, den, out = _finalize(pq, y_num, y_den, config.epsilon)
    tape = _make_tape(config, q, k, v, pq, pk, wg, y_num, y_den, num, den,
                      sat_kv=sat_kv, sat_k=sat_k)
    return AttentionOutput(out=out, tape=tape)


def ripple_dp(qgrid, kgrid, vgrid, config: AttentionConfig,
              weights: WeightGrid | None = None) -> AttentionOutput:
    """Prefix-sum forward for the unit-ring partition; equals ripple_naive."""
    if config.partition.kind is not PartitionKind.UNIT_RING:
        raise ValueError("ripple_dp expects the unit-ring partition")
    return _ripple_core(qgrid, kgrid, vgrid, config, weights)


def ripple_dp_dyadic(qgrid, kgrid, vgrid, config: AttentionConfig,
                     weights: WeightGrid | None = None) -> AttentionOutput:
    """Prefix-sum forward over dyadic distance bands: the per-query sweep
    length drops from the grid radius to its logarithm."""
    if config.partition.kind is not PartitionKind.DYADIC:
        raise ValueError("ripple_dp_dyadic expects the dyadic partition")
    return _ripple_core(qgrid, kgrid, vgrid, config, weights)


def ripple_softmax_reference(qgrid, kgrid, vgrid, weights: WeightGrid,
                             partition: PartitionScheme) -> np.ndarray:
    """Quadratic reference with an explicit softmax inside every group.

    This variant defines its own semantics (it is not the linearized form and
    matches no other implementation); empty groups contribute nothing.
    """
    q = np.asarray(qgrid, dtype=np.float64)
    k = np.asarray(kgrid, dtype=np.float64)
    v = np.asarray(vgrid, dtype=np.float64)
    shape = GridShape(q.shape[0], q.shape[1])
    out = np.zeros((shape.height, shape.width, v.shape[2]))
    for i in range(1, shape.height + 1):
        for j in range(1, shape.width + 1):
            for r in range(int(weights.groups[i - 1, j - 1])):
                members = group_members(partition, shape, (i, j), r)
                if not members:
                    continue
                rows = np.fromiter((m[0] - 1 for m in members), dtype=np.int64)
                cols = np.fromiter((m[1] - 1 for m in members), dtype=np.int64)
                local = softmax_attention(q[i - 1, j - 1][None, :],
                                          k[rows, cols], v[rows, cols])[0]
                out[i - 1, j - 1] += weights.alphas[i - 1, j - 1, r] * local
    return out


# ---------- linearized attention on grids (for the hybrid model) ----------

@dataclass
class LinearTape:
    featmap: FeatureMapParams
    epsilon: float
    q: np.ndarray
    k: np.ndarray
    v: np.ndarray
    phi_q: np.ndarray
    phi_k: np.ndarray
    z1: np.ndarray   # (Dp, C)
    z2: np.ndarray   # (Dp,)
    num: np.ndarray
    den: np.ndarray


def linearized_grid(qgrid, kgrid, vgrid, featmap: FeatureMapParams,
                    epsilon: float = DEFAULT_EPSILON):
    """Global linearized attention with grid-shaped inputs; returns (out, tape)."""
    q = np.asarray(qgrid, dtype=np.float64)
    k = np.asarray(kgrid, dtype=np.float64)
    v = np.asarray(vgrid, dtype=np.float64)
    pq = feature_forward(q, featmap)
    pk = feature_forward(k, featmap)
    z1 = np.einsum("hwd,hwc->dc", pk, v)
    z2 = pk.sum(axis=(0, 1))
    num = pq @ z1
    den = pq @ z2 + epsilon
    _check_denominator(den)
    out = num / den[..., None]
    tape = LinearTape(featmap=featmap, epsilon=epsilon, q=q, k=k, v=v,
                      phi_q=pq, phi_k=pk, z1=z1, z2=z2, num=num, den=den)
    return out, tape


# ---------- multi-head wrapper ----------

@dataclass(frozen=True)
class HeadParams:
    wq: np.ndarray                 # (head_dim, model_dim)
    wk: np.ndarray
    wv: np.ndarray
    featmap: FeatureMapParams
    stick: StickParams | None = None


@dataclass(frozen=True)
class MultiHeadParams:
    heads: tuple[HeadParams, ...]
    w_out: np.ndarray              # (model_dim, num_heads * head_dim)
    b_out: np.ndarray              # (model_dim,)


@dataclass(frozen=True)
class MultiHeadConfig:
    partition: PartitionScheme
    scheme_kind: WeightSchemeKind
    epsilon: float = DEFAULT_EPSILON
    attention: str = "ripple"      # "ripple" or "linearized"
    saturating_sigmoid: bool = False
    overcount_merge_divisor: bool = False

    def head_config(self, head: HeadParams) -> AttentionConfig:
        scheme = WeightScheme(kind=self.scheme_kind, params=head.stick,
                              saturating_sigmoid=self.saturating_sigmoid,
                              overcount_merge_divisor=self.overcount_merge_divisor)
        return AttentionConfig(scheme=scheme, partition=self.partition,
                               featmap=head.featmap, epsilon=self.epsilon)


@dataclass
class MultiHeadTape:
    x: np.ndarray
    head_tapes: list
    concat: np.ndarray
    config: MultiHeadConfig
    params: MultiHeadParams


def init_multi_head(rng: np.random.Generator, model_dim: int, num_heads: int,
                    head_dim: int, r_max: int, scheme_kind: WeightSchemeKind,
                    stick_dim: int | None = None) -> MultiHeadParams:
    from .featmap import FeatureMapKind, init_feature_map
    from .weights import LEARNED_KINDS
    stick_dim = head_dim if stick_dim is None else stick_dim
    heads = []
    scale = 1.0 / np.sqrt(model_dim)
    for _ in range(num_heads):
        wq = rng.standard_normal((head_dim, model_dim)) * scale
        wk = rng.standard_normal((head_dim, model_dim)) * scale
        wv = rng.standard_normal((head_dim, model_dim)) * scale
        fm = init_feature_map(FeatureMapKind.DETERMINISTIC_ADAPTIVE, head_dim, rng)
        stick = None
        if scheme_kind in LEARNED_KINDS:
            stick = StickParams(
                unit_embeddings=rng.standard_normal((r_max, stick_dim)),
                value_projection=rng.standard_normal((stick_dim, head_dim)) / np.sqrt(head_dim))
        heads.append(HeadParams(wq=wq, wk=wk, wv=wv, featmap=fm, stick=stick))
    w_out = rng.standard_normal((model_dim, num_heads * head_dim)) / np.sqrt(num_heads * head_dim)
    b_out = np.zeros(model_dim)
    return MultiHeadParams(heads=tuple(heads), w_out=w_out, b_out=b_out)


def multi_head_forward(xgrid, params: MultiHeadParams, config: MultiHeadConfig,
                       oracle: bool = False):
    """Project per head, attend per head, concatenate, mix. Returns (out, tape).

    With ``oracle`` the group attention runs through the enumeration path, so
    the wrapper can be checked end to end against trusted sums.
    """
    x = np.asarray(xgrid, dtype=np.float64)
    head_outs = []
    head_tapes = []
    for head in params.heads:
        q = x @ head.wq.T
        k = x @ head.wk.T
        v = x @ head.wv.T
        if config.attention == "linearized":
            out_h, tape_h = linearized_grid(q, k, v, head.featmap, config.epsilon)
        else:
            cfg = config.head_config(head)
            res = ripple_naive(q, k, v, cfg) if oracle else _ripple_core(q, k, v, cfg)
            out_h, tape_h = res.out, res.tape
        head_outs.append(out_h)
        head_tapes.append(tape_h)
    concat = np.concatenate(head_outs, axis=-1)
    out = concat @ params.w_out.T + params.b_out
    tape = MultiHeadTape(x=x, head_tapes=head_tapes, concat=concat,
                         config=config, params=params)
    return out, tape


def multi_head_ripple(xgrid, params: MultiHeadParams,
                      config: MultiHeadConfig) -> np.ndarray:
    """Multi-head grouped attention on a (H, W, model_dim) grid."""
    out, _ = multi_head_forward(xgrid, params, config)
    return out
