"""Analytic backward passes for the grid attention forward ops.

Every gradient here is a closed-form vector-Jacobian product pulled off the
tapes the forward passes record; nothing is differentiated numerically except
in finite_diff_check, which exists to audit the rest of this module.

The group-weighted pass has two structural tricks worth naming. First, the
per-group weight gradient splits the same way the forward does: individually
weighted head groups get per-group band inner products, while everything past
the halting index shares one weight and therefore one gradient, computable
from the total minus the covered window. Second, scatter gradients back to
token positions without enumerating members: weight fields of the form
coef[i, j] * upstream[i, j] are themselves prefix-summed, so the gradient a
token receives from every query whose group-r band contains it is one band sum
over that derived field. The shared-tail contribution collapses further: every
token lies inside every query's group range, so the tail pushes one global sum.
Both tricks keep the backward fetch count at O(H W R), matching the forward.

Halting indices and group counts are integers and are treated as locally
constant, which matches central differences at generic points.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .attention import AttentionTape, LinearTape, MultiHeadTape, _span_hi
from .featmap import feature_vjp
from .sat import SummedAreaTable
from .vicinal import GridShape, PartitionKind, PartitionScheme, group_members, group_span
from .weights import (LEARNED_KINDS, StickParams, WeightGrid, WeightScheme,
                      WeightSchemeKind, _grid_stick_breaking, grid_stick_fractions)


@dataclass
class FeatureParamGrads:
    """Feature-map parameter gradients summed over the query and key streams."""

    w1: np.ndarray
    w2: np.ndarray | None
    b2: np.ndarray | None


@dataclass
class StickGrads:
    unit_embeddings: np.ndarray   # rows past r_max stay zero: the forward never reads them
    value_projection: np.ndarray


@dataclass
class RippleGradients:
    grad_q: np.ndarray
    grad_k: np.ndarray
    grad_v: np.ndarray
    grad_alpha_head: np.ndarray   # (H, W, max hat), zero past each query's hat
    grad_merged: np.ndarray       # (H, W), gradient of the shared tail weight
    featmap: FeatureParamGrads
    stick: StickGrads | None


@dataclass
class LinearizedGradients:
    grad_q: np.ndarray
    grad_k: np.ndarray
    grad_v: np.ndarray
    featmap: FeatureParamGrads


@dataclass
class HeadGradients:
    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    featmap: FeatureParamGrads
    stick: StickGrads | None


@dataclass
class MultiHeadGradients:
    grad_x: np.ndarray
    heads: list[HeadGradients]
    w_out: np.ndarray
    b_out: np.ndarray


# ---------- shared pieces ----------

def _quotient_streams(num, den, upstream):
    """Split d(num/den) into cotangents for the two accumulated streams."""
    g = np.asarray(upstream, dtype=np.float64)
    gnum = g / den[..., None]
    gden = -np.einsum("hwc,hwc->hw", g, num) / (den * den)
    return gnum, gden


def _channel_dot(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Sum a * b over every axis past the leading (H, W)."""
    h, w = a.shape[:2]
    return (a * b).reshape(h, w, -1).sum(axis=-1)


def _stream_alpha_grads(sat: SummedAreaTable, cot: np.ndarray,
                        kind: PartitionKind, length: int) -> np.ndarray:
    """Per-group weight gradients from one accumulated stream.

    cot is the (H, W, ...) cotangent of the stream; entry r is the inner
    product of cot with the group-r band sum. Groups past a query's own count
    come out exactly zero because their clipped windows coincide.
    """
    h, w = cot.shape[:2]
    out = np.zeros((h, w, length))
    prev = 0.0
    for r in range(length):
        cur = sat.window_sum_grid(int(_span_hi(kind, r)))
        out[..., r] = _channel_dot(cot, cur - prev)
        prev = cur
    return out


# ---------- weight gradients, expanded form ----------

def grad_alpha(tape: AttentionTape, upstream: np.ndarray) -> np.ndarray:
    """Gradient of the loss wrt every entry of the padded weight grid.

    Treats each alphas[i, j, r] as an independent weight (the enumeration
    oracle's view); shape matches tape.weights.alphas. The merged-tail
    structure is ignored here, so rows with a shared tail report one gradient
    per underlying group, not one for the shared value.
    """
    gnum, gden = _quotient_streams(tape.num, tape.den, upstream)
    cot1 = np.einsum("hwd,hwc->hwdc", tape.phi_q, gnum)
    cot2 = tape.phi_q * gden[..., None]
    kind = tape.config.partition.kind
    length = tape.weights.alphas.shape[-1]
    return (_stream_alpha_grads(tape.sat_kv, cot1, kind, length)
            + _stream_alpha_grads(tape.sat_k, cot2, kind, length))


# ---------- token-position gradients ----------

def grad_pixels(weights: WeightGrid, upstream_field: np.ndarray,
                partition: PartitionScheme) -> np.ndarray:
    """Gradient each token position receives through the weighted group sums.

    For out[i, j] accumulating alpha_r(i, j) * sum over the group-r band, the
    gradient at token (m, n) is sum over queries (i, j) of alpha(i, j)[group of
    the (i, j)-(m, n) distance] * upstream[i, j]. Computed in O(H W hat_max)
    fetches: the shared tail is one global sum (every token is within range of
    every query), corrected per head group by band sums of derived fields.
    """
    g = np.asarray(upstream_field, dtype=np.float64)
    h, w = g.shape[:2]
    lift = (h, w) + (1,) * (g.ndim - 2)
    kind = partition.kind
    tail = (weights.merged.reshape(lift) * g).sum(axis=(0, 1))
    out = np.broadcast_to(tail, g.shape).copy()
    for r in range(int(weights.hat.max())):
        coef = np.where(r < weights.hat, weights.alphas[..., r] - weights.merged, 0.0)
        sat = SummedAreaTable(coef.reshape(lift) * g)
        lo, hi = group_span(kind, r)
        out += sat.window_sum_grid(hi) - sat.window_sum_grid(lo - 1)
    return out


def grad_pixels_reference(weights: WeightGrid, upstream_field: np.ndarray,
                          partition: PartitionScheme) -> np.ndarray:
    """Brute-force scatter over explicit group members; quadratic, for tests."""
    g = np.asarray(upstream_field, dtype=np.float64)
    h, w = g.shape[:2]
    shape = GridShape(h, w)
    out = np.zeros_like(g)
    for i in range(1, h + 1):
        for j in range(1, w + 1):
            push = g[i - 1, j - 1]
            for r in range(int(weights.groups[i - 1, j - 1])):
                a = weights.alphas[i - 1, j - 1, r]
                for (m, n) in group_members(partition, shape, (i, j), r):
                    out[m - 1, n - 1] += a * push
    return out


# ---------- learned-scheme backward ----------

def _stick_param_grads(params: StickParams, projected: np.ndarray,
                       v: np.ndarray, glogits: np.ndarray, r_max: int):
    """Pull per-query logit cotangents back to the stick parameters and v."""
    used = params.unit_embeddings[:r_max]
    g_units = np.zeros_like(params.unit_embeddings)
    g_units[:r_max] = np.einsum("hwr,hwe->re", glogits, projected)
    gproj = np.einsum("hwr,re->hwe", glogits, used)
    g_proj_mat = np.einsum("hwe,hwc->ec", gproj, v)
    gv = gproj @ params.value_projection
    return gv, StickGrads(unit_embeddings=g_units, value_projection=g_proj_mat)


def _scheme_backward(scheme: WeightScheme, partition: PartitionScheme,
                     wg: WeightGrid, v: np.ndarray, ghead: np.ndarray,
                     gmerged: np.ndarray):
    """Route head/tail weight gradients into the stick parameters.

    ghead must already be zero at and past each query's hat. Returns the value
    gradient through the weight pipeline plus parameter grads, or (0, None)
    for schemes with nothing to learn.
    """
    if scheme.kind not in LEARNED_KINDS:
        return 0.0, None
    r_max = partition.r_max
    fracs, logits, projected = grid_stick_fractions(v, scheme, r_max)
    hat = wg.hat
    max_hat = ghead.shape[-1]
    in_head = np.arange(max_hat) < hat[..., None]
    divisor = (wg.groups - hat) + (1 if scheme.overcount_merge_divisor else 0)

    if scheme.kind is WeightSchemeKind.SOFTMAX_WEIGHTS:
        padded = np.concatenate((logits, np.zeros(logits.shape[:-1] + (1,))), axis=-1)
        z = padded - padded.max(axis=-1, keepdims=True)
        gamma = np.exp(z)
        gamma /= gamma.sum(axis=-1, keepdims=True)
        ggamma = np.zeros_like(gamma)
        adj = ghead - np.where(in_head, (gmerged / divisor)[..., None], 0.0)
        ggamma[..., :max_hat] = np.where(in_head, adj, 0.0)
        dot = np.einsum("hwr,hwr->hw", ggamma, gamma)
        gfull = gamma * (ggamma - dot[..., None])
        return _stick_param_grads(scheme.params, projected, v, gfull[..., :r_max], r_max)

    beta, remaining = _grid_stick_breaking(fracs)
    gbeta = np.zeros_like(beta)

    if scheme.kind is WeightSchemeKind.TRUNCATED:
        cut = hat  # for this scheme hat is the renormalized-head length
        keep = np.arange(beta.shape[-1]) < cut[..., None]
        headb = np.where(keep, beta, 0.0)
        total = headb.sum(axis=-1)
        gh = np.zeros_like(beta)
        gh[..., :max_hat] = ghead
        s_dot = np.einsum("hwr,hwr->hw", gh, headb)
        gbeta = np.where(keep,
                         gh / total[..., None] - (s_dot / (total * total))[..., None],
                         0.0)
    else:
        adj = ghead - np.where(in_head, (gmerged / divisor)[..., None], 0.0)
        gbeta[..., :max_hat] = np.where(in_head, adj, 0.0)

    # stick-breaking Jacobian: piece m scales with its own fraction through the
    # lead product and shrinks every later piece through (1 - fraction)
    lead = np.concatenate((np.ones(fracs.shape[:-1] + (1,)),
                           remaining[..., :-1]), axis=-1)
    weighted = gbeta * beta
    rev = np.cumsum(weighted[..., ::-1], axis=-1)[..., ::-1]
    one_minus = 1.0 - fracs
    # a fraction pinned at exactly 1 zeroes its own logit sensitivity anyway,
    # so the guarded quotient never leaks a wrong value into glogits
    safe = np.where(one_minus > 0.0, one_minus, 1.0)
    gs = gbeta[..., :r_max] * lead - rev[..., 1:] / safe
    glogits = gs * fracs * one_minus
    return _stick_param_grads(scheme.params, projected, v, glogits, r_max)


# ---------- full backward passes ----------

def ripple_vjp(tape: AttentionTape, upstream: np.ndarray) -> RippleGradients:
    """Backward pass of the prefix-sum group attention.

    Fetch cost is O(H W) per head group plus a constant number of whole-grid
    window reads, the same order as the forward sweep.
    """
    cfg = tape.config
    kind = cfg.partition.kind
    wg = tape.weights
    gnum, gden = _quotient_streams(tape.num, tape.den, upstream)
    cot1 = np.einsum("hwd,hwc->hwdc", tape.phi_q, gnum)
    cot2 = tape.phi_q * gden[..., None]
    grad_pq = (np.einsum("hwdc,hwc->hwd", tape.y_num, gnum)
               + tape.y_den * gden[..., None])

    max_hat = int(wg.hat.max())
    in_head = np.arange(max_hat) < wg.hat[..., None]
    ghead = np.where(in_head,
                     _stream_alpha_grads(tape.sat_kv, cot1, kind, max_hat)
                     + _stream_alpha_grads(tape.sat_k, cot2, kind, max_hat),
                     0.0)
    covered = _span_hi(kind, wg.hat - 1)
    tail1 = tape.sat_kv.total() - tape.sat_kv.window_sum_grid(covered)
    tail2 = tape.sat_k.total() - tape.sat_k.window_sum_grid(covered)
    gmerged = _channel_dot(cot1, tail1) + _channel_dot(cot2, tail2)

    grad_x1 = grad_pixels(wg, cot1, cfg.partition)          # (H, W, Dp, C)
    grad_x2 = grad_pixels(wg, cot2, cfg.partition)          # (H, W, Dp)
    grad_pk = np.einsum("hwdc,hwc->hwd", grad_x1, tape.v) + grad_x2
    grad_v = np.einsum("hwdc,hwd->hwc", grad_x1, tape.phi_k)

    gv_stick, stick = _scheme_backward(cfg.scheme, cfg.partition, wg, tape.v,
                                       ghead, gmerged)
    grad_v = grad_v + gv_stick

    fq = feature_vjp(tape.q, cfg.featmap, grad_pq)
    fk = feature_vjp(tape.k, cfg.featmap, grad_pk)
    featmap = FeatureParamGrads(
        w1=fq.grad_w1 + fk.grad_w1,
        w2=None if fq.grad_w2 is None else fq.grad_w2 + fk.grad_w2,
        b2=None if fq.grad_b2 is None else fq.grad_b2 + fk.grad_b2)
    return RippleGradients(grad_q=fq.grad_x, grad_k=fk.grad_x, grad_v=grad_v,
                           grad_alpha_head=ghead, grad_merged=gmerged,
                           featmap=featmap, stick=stick)


def linearized_vjp(tape: LinearTape, upstream: np.ndarray) -> LinearizedGradients:
    """Backward pass of the global linearized attention."""
    gnum, gden = _quotient_streams(tape.num, tape.den, upstream)
    grad_pq = np.einsum("hwc,dc->hwd", gnum, tape.z1) + gden[..., None] * tape.z2
    gz1 = np.einsum("hwd,hwc->dc", tape.phi_q, gnum)
    gz2 = np.einsum("hwd,hw->d", tape.phi_q, gden)
    grad_pk = np.einsum("dc,hwc->hwd", gz1, tape.v) + gz2
    grad_v = np.einsum("dc,hwd->hwc", gz1, tape.phi_k)
    fq = feature_vjp(tape.q, tape.featmap, grad_pq)
    fk = feature_vjp(tape.k, tape.featmap, grad_pk)
    featmap = FeatureParamGrads(
        w1=fq.grad_w1 + fk.grad_w1,
        w2=None if fq.grad_w2 is None else fq.grad_w2 + fk.grad_w2,
        b2=None if fq.grad_b2 is None else fq.grad_b2 + fk.grad_b2)
    return LinearizedGradients(grad_q=fq.grad_x, grad_k=fk.grad_x,
                               grad_v=grad_v, featmap=featmap)


def multi_head_vjp(tape: MultiHeadTape, upstream: np.ndarray) -> MultiHeadGradients:
    """Backward pass of the multi-head wrapper: output mix, heads, projections."""
    g = np.asarray(upstream, dtype=np.float64)
    params = tape.params
    b_out = g.sum(axis=(0, 1))
    w_out = np.einsum("hwm,hwn->mn", g, tape.concat)
    gconcat = g @ params.w_out
    x = tape.x
    grad_x = np.zeros_like(x)
    heads = []
    offset = 0
    for head, htape in zip(params.heads, tape.head_tapes):
        head_dim = head.wq.shape[0]
        gout = gconcat[..., offset:offset + head_dim]
        offset += head_dim
        if isinstance(htape, LinearTape):
            hg = linearized_vjp(htape, gout)
            gq, gk, gv, fg, stick = hg.grad_q, hg.grad_k, hg.grad_v, hg.featmap, None
        else:
            rg = ripple_vjp(htape, gout)
            gq, gk, gv, fg, stick = rg.grad_q, rg.grad_k, rg.grad_v, rg.featmap, rg.stick
        heads.append(HeadGradients(wq=np.einsum("hwd,hwm->dm", gq, x),
                                   wk=np.einsum("hwd,hwm->dm", gk, x),
                                   wv=np.einsum("hwd,hwm->dm", gv, x),
                                   featmap=fg, stick=stick))
        grad_x += gq @ head.wq + gk @ head.wk + gv @ head.wv
    return MultiHeadGradients(grad_x=grad_x, heads=heads, w_out=w_out, b_out=b_out)


# ---------- numerical audit ----------

@dataclass
class FiniteDiffReport:
    passed: bool
    tolerance: float
    max_rel_error: float
    worst_param: str
    worst_index: tuple
    per_param: dict[str, float]
    checked: int
    loss: float

    def __str__(self):
        state = "ok" if self.passed else "FAIL"
        return (f"gradcheck {state}: max rel err {self.max_rel_error:.3e} "
                f"at {self.worst_param}{list(self.worst_index)} "
                f"({self.checked} coordinates, tol {self.tolerance:.1e})")


def finite_diff_check(loss_fn, params: dict[str, np.ndarray], step: float = 1e-5,
                      tolerance: float = 1e-4, mode: str = "full",
                      sample: int = 25, rng: np.random.Generator | None = None
                      ) -> FiniteDiffReport:
    """Audit analytic gradients against central differences.

    loss_fn(params) must return (scalar loss, dict of gradients matching the
    parameter shapes). mode "full" checks every coordinate; "sample" checks up
    to ``sample`` random coordinates per tensor, which is the only practical
    option for model-sized parameter sets. Relative errors are normalized per
    tensor by the largest magnitude either side produced.
    """
    if mode not in ("full", "sample"):
        raise ValueError(f"mode must be 'full' or 'sample', got {mode!r}")
    rng = rng if rng is not None else np.random.default_rng(0)
    loss0, analytic = loss_fn(params)
    per_param: dict[str, float] = {}
    max_rel, worst_param, worst_index = 0.0, "", ()
    checked = 0
    for name in sorted(params):
        base = np.asarray(params[name], dtype=np.float64)
        ana = np.asarray(analytic[name], dtype=np.float64)
        if ana.shape != base.shape:
            raise ValueError(f"gradient shape mismatch for {name!r}")
        if mode == "full" or base.size <= sample:
            flat = np.arange(base.size)
        else:
            flat = np.sort(rng.choice(base.size, size=sample, replace=False))
        fd = np.zeros(flat.size)
        an = np.zeros(flat.size)
        for t, f in enumerate(flat):
            idx = np.unravel_index(int(f), base.shape)
            an[t] = ana[idx]
            for sign in (1.0, -1.0):
                bumped = base.copy()
                bumped[idx] += sign * step
                shifted = dict(params)
                shifted[name] = bumped
                fd[t] += sign * float(loss_fn(shifted)[0])
            fd[t] /= 2.0 * step
        scale = max(float(np.abs(an).max(initial=0.0)),
                    float(np.abs(fd).max(initial=0.0)), 1e-12)
        rel = np.abs(an - fd) / scale
        worst_t = int(np.argmax(rel))
        per_param[name] = float(rel[worst_t])
        checked += flat.size
        if rel[worst_t] > max_rel:
            max_rel = float(rel[worst_t])
            worst_param = name
            worst_index = tuple(int(i) for i in
                                np.unravel_index(int(flat[worst_t]), base.shape))
    return FiniteDiffReport(passed=max_rel <= tolerance, tolerance=tolerance,
                            max_rel_error=max_rel, worst_param=worst_param,
                            worst_index=worst_index, per_param=per_param,
                            checked=checked, loss=float(loss0))
