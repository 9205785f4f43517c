import dataclasses

import numpy as np
import pytest

from ripplegrid.attention import (
    DEFAULT_EPSILON,
    AttentionConfig,
    MultiHeadConfig,
    init_multi_head,
    linearized_attention,
    linearized_attention_into,
    linearized_grid,
    multi_head_forward,
    ripple_dp,
    ripple_dp_dyadic,
    ripple_naive,
    ripple_softmax_reference,
    softmax_attention,
)
from ripplegrid.featmap import FeatureMapKind, FeatureMapParams, init_feature_map
from ripplegrid.vicinal import GridShape, PartitionKind, PartitionScheme, num_groups_grid
from ripplegrid.weights import (
    LEARNED_KINDS,
    StickParams,
    WeightGrid,
    WeightScheme,
    WeightSchemeKind,
)

ALL_SCHEMES = list(WeightSchemeKind)


def make_config(kind, partition_kind, rng, value_dim, r_max=3, tau=0.05,
                d=5, epsilon=DEFAULT_EPSILON,
                featmap_kind=FeatureMapKind.DETERMINISTIC_ADAPTIVE, **flags):
    partition = PartitionScheme(kind=partition_kind, r_max=r_max, tau=tau)
    params = None
    if kind in LEARNED_KINDS:
        params = StickParams(
            unit_embeddings=rng.standard_normal((r_max, 4)),
            value_projection=rng.standard_normal((4, value_dim)))
    scheme = WeightScheme(kind=kind, params=params, **flags)
    featmap = init_feature_map(featmap_kind, d, rng)
    return AttentionConfig(scheme=scheme, partition=partition,
                           featmap=featmap, epsilon=epsilon)


def random_grids(rng, h, w, d=5, c=4):
    q = rng.standard_normal((h, w, d))
    k = rng.standard_normal((h, w, d))
    v = rng.standard_normal((h, w, c))
    return q, k, v


def point_mass_weights(shape, partition):
    """All weight on group 0 (the query itself), zero tail."""
    groups = num_groups_grid(partition.kind, shape)
    alphas = np.zeros((shape.height, shape.width, int(groups.max())))
    alphas[..., 0] = 1.0
    return WeightGrid(alphas=alphas,
                      hat=np.ones((shape.height, shape.width), dtype=np.int64),
                      merged=np.zeros((shape.height, shape.width)),
                      groups=groups)


# ---------- softmax reference ----------

def test_softmax_single_key_returns_value():
    rng = np.random.default_rng(0)
    q = rng.standard_normal((3, 2))
    k = rng.standard_normal((1, 2))
    v = rng.standard_normal((1, 4))
    out = softmax_attention(q, k, v)
    np.testing.assert_allclose(out, np.broadcast_to(v[0], (3, 4)), atol=1e-12)


def test_softmax_identical_keys_average_values():
    rng = np.random.default_rng(1)
    key = rng.standard_normal(3)
    k = np.stack([key, key])
    v = rng.standard_normal((2, 5))
    out = softmax_attention(rng.standard_normal((4, 3)), k, v)
    np.testing.assert_allclose(out, np.broadcast_to(v.mean(axis=0), (4, 5)),
                               atol=1e-12)


def test_softmax_matches_double_loop():
    rng = np.random.default_rng(2)
    q = rng.standard_normal((5, 3))
    k = rng.standard_normal((7, 3))
    v = rng.standard_normal((7, 2))
    want = np.zeros((5, 2))
    for i in range(5):
        wts = np.exp(q[i] @ k.T)
        want[i] = (wts / wts.sum()) @ v
    np.testing.assert_allclose(softmax_attention(q, k, v), want, atol=1e-12)


def test_softmax_shift_invariance():
    # adding one fixed vector to every key shifts each score row by a
    # constant, which softmax ignores
    rng = np.random.default_rng(3)
    q = rng.standard_normal((4, 3))
    k = rng.standard_normal((6, 3))
    v = rng.standard_normal((6, 2))
    shift = rng.standard_normal(3)
    np.testing.assert_allclose(softmax_attention(q, k + shift, v),
                               softmax_attention(q, k, v), atol=1e-10)


def test_softmax_shape_validation():
    rng = np.random.default_rng(4)
    with pytest.raises(ValueError):
        softmax_attention(rng.standard_normal((3, 2)),
                          rng.standard_normal((3, 4)),
                          rng.standard_normal((3, 2)))
    with pytest.raises(ValueError):
        softmax_attention(rng.standard_normal((3, 2)),
                          rng.standard_normal((4, 2)),
                          rng.standard_normal((3, 2)))


def test_softmax_preserves_float32():
    rng = np.random.default_rng(5)
    out = softmax_attention(rng.standard_normal((3, 2)).astype(np.float32),
                            rng.standard_normal((4, 2)).astype(np.float32),
                            rng.standard_normal((4, 2)).astype(np.float32))
    assert out.dtype == np.float32


# ---------- linearized attention ----------

def test_linearized_single_key_eps_zero_returns_value():
    # seed chosen so every query has a positive feature overlap with the key;
    # a dead ReLU overlap would make the epsilon-free quotient 0/0
    rng = np.random.default_rng(8)
    fm = init_feature_map(FeatureMapKind.DETERMINISTIC_ADAPTIVE, 3, rng)
    q = rng.standard_normal((4, 3))
    k = rng.standard_normal((1, 3))
    v = rng.standard_normal((1, 2))
    out = linearized_attention(q, k, v, fm, epsilon=0.0)
    np.testing.assert_allclose(out, np.broadcast_to(v[0], (4, 2)), atol=1e-12)


def test_linearized_matches_unfactored_form():
    rng = np.random.default_rng(7)
    fm = init_feature_map(FeatureMapKind.DETERMINISTIC_ADAPTIVE, 4, rng)
    q = rng.standard_normal((6, 4))
    k = rng.standard_normal((9, 4))
    v = rng.standard_normal((9, 3))
    from ripplegrid.featmap import feature_forward
    score = feature_forward(q, fm) @ feature_forward(k, fm).T   # (N, M)
    want = (score @ v) / (score.sum(axis=1) + DEFAULT_EPSILON)[:, None]
    np.testing.assert_allclose(linearized_attention(q, k, v, fm), want,
                               atol=1e-12)


def test_linearized_key_permutation_invariance():
    rng = np.random.default_rng(8)
    fm = init_feature_map(FeatureMapKind.DETERMINISTIC_ADAPTIVE, 4, rng)
    q = rng.standard_normal((5, 4))
    k = rng.standard_normal((8, 4))
    v = rng.standard_normal((8, 3))
    perm = rng.permutation(8)
    np.testing.assert_allclose(linearized_attention(q, k[perm], v[perm], fm),
                               linearized_attention(q, k, v, fm), atol=1e-10)


def test_linearized_into_matches_plain():
    rng = np.random.default_rng(9)
    fm = init_feature_map(FeatureMapKind.DETERMINISTIC_ADAPTIVE, 4, rng)
    q = rng.standard_normal((10, 4))
    k = rng.standard_normal((10, 4))
    v = rng.standard_normal((10, 3))
    out = np.empty((10, 3))
    linearized_attention_into(out, q, k, v, fm, chunk=3)
    np.testing.assert_allclose(out, linearized_attention(q, k, v, fm),
                               atol=1e-12)


def test_zero_denominator_raises_at_eps_zero():
    # second layer clamps every feature to ReLU(-1) = 0
    fm = FeatureMapParams(kind=FeatureMapKind.DETERMINISTIC_ADAPTIVE,
                          w1=np.zeros((2, 3)), w2=np.zeros((2, 4)),
                          b2=-np.ones(2))
    rng = np.random.default_rng(10)
    q = rng.standard_normal((4, 3))
    k = rng.standard_normal((4, 3))
    v = rng.standard_normal((4, 2))
    with pytest.raises(FloatingPointError):
        linearized_attention(q, k, v, fm, epsilon=0.0)
    grid = (q.reshape(2, 2, 3), k.reshape(2, 2, 3), v.reshape(2, 2, 2))
    cfg = AttentionConfig(
        scheme=WeightScheme(kind=WeightSchemeKind.UNIFORM),
        partition=PartitionScheme(kind=PartitionKind.UNIT_RING, r_max=2, tau=0.05),
        featmap=fm, epsilon=0.0)
    with pytest.raises(FloatingPointError):
        ripple_naive(*grid, cfg)


def test_negative_epsilon_rejected():
    rng = np.random.default_rng(11)
    with pytest.raises(ValueError):
        make_config(WeightSchemeKind.UNIFORM, PartitionKind.UNIT_RING, rng,
                    value_dim=3, epsilon=-1e-9)


# ---------- grouped attention: degeneracies ----------

def test_single_cell_grid_returns_value():
    rng = np.random.default_rng(12)
    q, k, v = random_grids(rng, 1, 1)
    for kind in ALL_SCHEMES:
        cfg = make_config(kind, PartitionKind.UNIT_RING, rng, v.shape[2],
                          epsilon=0.0)
        np.testing.assert_allclose(ripple_naive(q, k, v, cfg).out, v,
                                   atol=1e-12)
        np.testing.assert_allclose(ripple_dp(q, k, v, cfg).out, v, atol=1e-12)


def test_uniform_weights_equal_linearized():
    # alpha_r = 1/G cancels between numerator and denominator, leaving the
    # global linearized form (at epsilon 0 the cancellation is exact)
    rng = np.random.default_rng(13)
    q, k, v = random_grids(rng, 5, 4)
    cfg = make_config(WeightSchemeKind.UNIFORM, PartitionKind.UNIT_RING, rng,
                      v.shape[2], r_max=2, epsilon=0.0)
    flat = linearized_attention(q.reshape(-1, 5), k.reshape(-1, 5),
                                v.reshape(-1, 4), cfg.featmap, epsilon=0.0)
    want = flat.reshape(5, 4, 4)
    np.testing.assert_allclose(ripple_naive(q, k, v, cfg).out, want, atol=1e-9)
    np.testing.assert_allclose(ripple_dp(q, k, v, cfg).out, want, atol=1e-9)


def test_point_mass_weights_recover_values():
    rng = np.random.default_rng(14)
    q, k, v = random_grids(rng, 4, 5)
    for pk, runner in ((PartitionKind.UNIT_RING, ripple_dp),
                       (PartitionKind.DYADIC, ripple_dp_dyadic)):
        # trig features: dense, so the per-cell overlap never lands on zero
        cfg = make_config(WeightSchemeKind.UNIFORM, pk, rng, v.shape[2],
                          epsilon=0.0, featmap_kind=FeatureMapKind.RANDOM_TRIG)
        wg = point_mass_weights(GridShape(4, 5), cfg.partition)
        np.testing.assert_allclose(
            ripple_naive(q, k, v, cfg, weights=wg).out, v, atol=1e-12)
        np.testing.assert_allclose(
            runner(q, k, v, cfg, weights=wg).out, v, atol=1e-12)


# ---------- dynamic program vs enumeration oracle ----------

def test_dp_matches_naive_all_schemes():
    rng = np.random.default_rng(15)
    for kind in ALL_SCHEMES:
        for h, w in ((4, 5), (6, 6)):
            q, k, v = random_grids(rng, h, w)
            cfg = make_config(kind, PartitionKind.UNIT_RING, rng, v.shape[2])
            got = ripple_dp(q, k, v, cfg).out
            want = ripple_naive(q, k, v, cfg).out
            assert np.abs(got - want).max() < 1e-10, kind


def test_dyadic_dp_matches_naive():
    rng = np.random.default_rng(16)
    for kind in (WeightSchemeKind.UNIFORM, WeightSchemeKind.FIXED_EXPONENTIAL,
                 WeightSchemeKind.LEARNED_SBT):
        for h, w in ((5, 7), (8, 8)):
            q, k, v = random_grids(rng, h, w)
            cfg = make_config(kind, PartitionKind.DYADIC, rng, v.shape[2])
            got = ripple_dp_dyadic(q, k, v, cfg).out
            want = ripple_naive(q, k, v, cfg).out
            assert np.abs(got - want).max() < 1e-10, kind


def test_dp_matches_naive_with_scheme_flags():
    rng = np.random.default_rng(17)
    q, k, v = random_grids(rng, 6, 5)
    for flags in ({"saturating_sigmoid": True},
                  {"overcount_merge_divisor": True},
                  {"saturating_sigmoid": True, "overcount_merge_divisor": True}):
        cfg = make_config(WeightSchemeKind.LEARNED_SBT, PartitionKind.UNIT_RING,
                          rng, v.shape[2], **flags)
        got = ripple_dp(q, k, v, cfg).out
        want = ripple_naive(q, k, v, cfg).out
        assert np.abs(got - want).max() < 1e-10, flags


def test_dp_partition_guards():
    rng = np.random.default_rng(18)
    q, k, v = random_grids(rng, 3, 3)
    unit = make_config(WeightSchemeKind.UNIFORM, PartitionKind.UNIT_RING, rng,
                       v.shape[2])
    dyadic = make_config(WeightSchemeKind.UNIFORM, PartitionKind.DYADIC, rng,
                         v.shape[2])
    with pytest.raises(ValueError):
        ripple_dp(q, k, v, dyadic)
    with pytest.raises(ValueError):
        ripple_dp_dyadic(q, k, v, unit)


def test_grid_shape_validation():
    rng = np.random.default_rng(19)
    cfg = make_config(WeightSchemeKind.UNIFORM, PartitionKind.UNIT_RING, rng, 4)
    q, k, v = random_grids(rng, 3, 4)
    with pytest.raises(ValueError):
        ripple_naive(q[0], k[0], v[0], cfg)
    with pytest.raises(ValueError):
        ripple_naive(q, k[:2], v, cfg)
    with pytest.raises(ValueError):
        ripple_naive(q, k[..., :3], v, cfg)


def test_query_purity():
    # weights come from the values, so nudging one query can only move the
    # output row at that position
    rng = np.random.default_rng(20)
    q, k, v = random_grids(rng, 6, 6)
    cfg = make_config(WeightSchemeKind.FIXED_EXPONENTIAL,
                      PartitionKind.UNIT_RING, rng, v.shape[2])
    base = ripple_dp(q, k, v, cfg).out
    q2 = q.copy()
    q2[2, 3] += 0.5
    bumped = ripple_dp(q2, k, v, cfg).out
    mask = np.ones((6, 6), dtype=bool)
    mask[2, 3] = False
    np.testing.assert_array_equal(bumped[mask], base[mask])
    assert np.abs(bumped[2, 3] - base[2, 3]).max() > 0


def test_grid_paths_accumulate_float64():
    rng = np.random.default_rng(21)
    q, k, v = (a.astype(np.float32) for a in random_grids(rng, 3, 4))
    cfg = make_config(WeightSchemeKind.UNIFORM, PartitionKind.UNIT_RING, rng, 4)
    res = ripple_dp(q, k, v, cfg)
    assert res.out.dtype == np.float64
    assert res.tape.den.dtype == np.float64


def test_tape_reproduces_output():
    rng = np.random.default_rng(22)
    q, k, v = random_grids(rng, 4, 4)
    cfg = make_config(WeightSchemeKind.LEARNED_SBT, PartitionKind.UNIT_RING,
                      rng, v.shape[2])
    res = ripple_dp(q, k, v, cfg)
    t = res.tape
    np.testing.assert_array_equal(t.num / t.den[..., None], res.out)
    assert t.phi_q.shape == (4, 4, cfg.featmap.out_dim)
    assert t.y_num.shape == (4, 4, cfg.featmap.out_dim, v.shape[2])
    assert t.weights.alphas.shape[:2] == (4, 4)
    assert np.all(t.den > 0)
    # skipping the tape skips the prefix tables too
    assert ripple_naive(q, k, v, cfg, build_tape=False).tape is None


# ---------- per-group softmax reference ----------

def test_softmax_reference_point_mass_recovers_values():
    rng = np.random.default_rng(23)
    q, k, v = random_grids(rng, 4, 4)
    partition = PartitionScheme(kind=PartitionKind.UNIT_RING, r_max=3, tau=0.05)
    wg = point_mass_weights(GridShape(4, 4), partition)
    out = ripple_softmax_reference(q, k, v, wg, partition)
    np.testing.assert_allclose(out, v, atol=1e-12)


def test_softmax_reference_single_cell():
    rng = np.random.default_rng(24)
    q, k, v = random_grids(rng, 1, 1)
    partition = PartitionScheme(kind=PartitionKind.UNIT_RING, r_max=2, tau=0.05)
    wg = point_mass_weights(GridShape(1, 1), partition)
    np.testing.assert_allclose(
        ripple_softmax_reference(q, k, v, wg, partition), v, atol=1e-12)


def test_softmax_reference_weight_scaling():
    # the reference is linear in the group weights: doubling every alpha
    # doubles the output
    rng = np.random.default_rng(25)
    q, k, v = random_grids(rng, 3, 5)
    from ripplegrid.weights import scheme_weights_grid
    partition = PartitionScheme(kind=PartitionKind.UNIT_RING, r_max=2, tau=0.05)
    wg = scheme_weights_grid(WeightScheme(kind=WeightSchemeKind.FIXED_EXPONENTIAL),
                             v, GridShape(3, 5), partition)
    doubled = WeightGrid(alphas=2.0 * wg.alphas, hat=wg.hat,
                         merged=2.0 * wg.merged, groups=wg.groups)
    np.testing.assert_allclose(
        ripple_softmax_reference(q, k, v, doubled, partition),
        2.0 * ripple_softmax_reference(q, k, v, wg, partition), atol=1e-12)


# ---------- multi-head wrapper ----------

def test_multi_head_oracle_path_agrees():
    rng = np.random.default_rng(26)
    params = init_multi_head(rng, model_dim=6, num_heads=2, head_dim=4,
                             r_max=2, scheme_kind=WeightSchemeKind.LEARNED_SBT)
    config = MultiHeadConfig(
        partition=PartitionScheme(kind=PartitionKind.UNIT_RING, r_max=2, tau=0.05),
        scheme_kind=WeightSchemeKind.LEARNED_SBT)
    x = rng.standard_normal((5, 4, 6))
    fast, _ = multi_head_forward(x, params, config)
    slow, _ = multi_head_forward(x, params, config, oracle=True)
    np.testing.assert_allclose(fast, slow, atol=1e-10)


def test_single_head_identity_mix_reduces_to_ripple():
    rng = np.random.default_rng(27)
    params = init_multi_head(rng, model_dim=4, num_heads=1, head_dim=4,
                             r_max=2, scheme_kind=WeightSchemeKind.LEARNED_SBT)
    params = dataclasses.replace(params, w_out=np.eye(4), b_out=np.zeros(4))
    config = MultiHeadConfig(
        partition=PartitionScheme(kind=PartitionKind.UNIT_RING, r_max=2, tau=0.05),
        scheme_kind=WeightSchemeKind.LEARNED_SBT)
    x = rng.standard_normal((4, 5, 4))
    out, _ = multi_head_forward(x, params, config)
    head = params.heads[0]
    want = ripple_dp(x @ head.wq.T, x @ head.wk.T, x @ head.wv.T,
                     config.head_config(head)).out
    np.testing.assert_array_equal(out, want)


def test_multi_head_linearized_mode():
    rng = np.random.default_rng(28)
    params = init_multi_head(rng, model_dim=4, num_heads=1, head_dim=4,
                             r_max=2, scheme_kind=WeightSchemeKind.UNIFORM)
    params = dataclasses.replace(params, w_out=np.eye(4), b_out=np.zeros(4))
    config = MultiHeadConfig(
        partition=PartitionScheme(kind=PartitionKind.UNIT_RING, r_max=2, tau=0.05),
        scheme_kind=WeightSchemeKind.UNIFORM, attention="linearized")
    x = rng.standard_normal((3, 6, 4))
    out, tape = multi_head_forward(x, params, config)
    head = params.heads[0]
    want, _ = linearized_grid(x @ head.wq.T, x @ head.wk.T, x @ head.wv.T,
                              head.featmap)
    np.testing.assert_array_equal(out, want)
    assert tape.concat.shape == (3, 6, 4)


def test_multi_head_output_mixes_heads():
    rng = np.random.default_rng(29)
    params = init_multi_head(rng, model_dim=6, num_heads=2, head_dim=3,
                             r_max=2, scheme_kind=WeightSchemeKind.UNIFORM)
    config = MultiHeadConfig(
        partition=PartitionScheme(kind=PartitionKind.UNIT_RING, r_max=2, tau=0.05),
        scheme_kind=WeightSchemeKind.UNIFORM)
    x = rng.standard_normal((4, 4, 6))
    out, tape = multi_head_forward(x, params, config)
    assert out.shape == (4, 4, 6)
    want = tape.concat @ params.w_out.T + params.b_out
    np.testing.assert_array_equal(out, want)
    assert len(tape.head_tapes) == 2
