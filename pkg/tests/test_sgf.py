import math

import numpy as np
import pytest
from oracles import naive_attention, naive_softmax_rows

from refharm.errors import GuidanceMisalignedError, ShapeMismatchError
from refharm.sgf import (
    GOLDEN_DIGEST,
    MODES,
    ProjectionWeights,
    SgfDims,
    WEIGHT_MOD,
    WEIGHT_MULT_COL,
    WEIGHT_MULT_ROW,
    align_guidance,
    attention_extended,
    attention_sgf,
    attention_vanilla,
    golden_bundle,
    golden_digest,
    init_weights,
    invariant_report,
    modulate,
    pool_grid,
    run_sgf,
    softmax_rows,
    weight_matrix,
    weighted_features,
)
from refharm.util import seeded_generator


def _draw_tokens(rng, f, b, r, d_e, d_c):
    return (
        rng.standard_normal((f, d_e)),
        rng.standard_normal((b, d_e)),
        rng.standard_normal((r, d_e)),
        rng.standard_normal((f, d_c)),
        rng.standard_normal((b, d_c)),
        rng.standard_normal((r, d_c)),
    )


# --- weight generation -------------------------------------------------------


def test_weight_formula_origin():
    assert weight_matrix(1, 1, 0)[0, 0] == -0.1


def test_weight_formula_big_int_entry():
    # re-derive one entry with Python integers, off the vectorized path
    mixed = (1 * WEIGHT_MULT_ROW + 2 * WEIGHT_MULT_COL + 7 % WEIGHT_MOD) % WEIGHT_MOD
    want = (mixed / WEIGHT_MOD - 0.5) * 0.2
    assert weight_matrix(3, 4, 7)[1, 2] == want


def test_weight_matrix_deterministic_and_bounded():
    a = weight_matrix(9, 5, 123)
    b = weight_matrix(9, 5, 123)
    assert np.array_equal(a, b)
    assert float(np.abs(a).max()) <= 0.1


def test_weight_matrix_rejects_empty():
    with pytest.raises(ValueError):
        weight_matrix(0, 3, 0)


def test_init_weights_shapes_and_shared_projection():
    dims = SgfDims(d_e=4, d_c=6, d_proj=3)
    for mode in MODES:
        w = init_weights(11, dims, mode)
        d_in = 10 if mode == "sgf" else 4
        assert w.w_query.shape == (d_in, 3)
        assert np.array_equal(w.w_query, w.w_key)
        assert w.w_out.shape == (8, 4)


def test_guided_projection_extends_plain_rows():
    dims = SgfDims(d_e=4, d_c=6, d_proj=3)
    plain = init_weights(5, dims, "extended")
    guided = init_weights(5, dims, "sgf")
    assert np.array_equal(guided.w_query[:4], plain.w_query)
    assert np.array_equal(guided.w_out, plain.w_out)


def test_projection_weights_validation():
    ok = weight_matrix(2, 2, 0)
    with pytest.raises(ShapeMismatchError):
        ProjectionWeights(w_query=ok, w_key=ok, w_out=np.zeros((3, 2)), mode="vanilla")
    with pytest.raises(ValueError):
        ProjectionWeights(w_query=ok, w_key=ok, w_out=np.zeros((4, 2)), mode="bogus")
    with pytest.raises(ShapeMismatchError):
        ProjectionWeights(w_query=np.zeros(2), w_key=ok, w_out=np.zeros((4, 2)), mode="vanilla")
    with pytest.raises(ValueError):
        ProjectionWeights(
            w_query=np.full((2, 2), np.nan), w_key=ok, w_out=np.zeros((4, 2)), mode="vanilla"
        )


def test_dims_must_be_positive():
    with pytest.raises(ValueError):
        SgfDims(d_e=0, d_c=1, d_proj=1)


# --- softmax -----------------------------------------------------------------


def test_softmax_hand_case():
    got = softmax_rows(np.array([[0.0, math.log(3.0)]]))
    assert np.allclose(got, [[0.25, 0.75]], atol=1e-12)


def test_softmax_rows_sum_to_one():
    rng = seeded_generator("softmax", 0)
    got = softmax_rows(rng.standard_normal((7, 5)))
    assert np.allclose(got.sum(axis=1), 1.0, atol=1e-12)
    assert float(got.min()) >= 0.0


def test_softmax_large_spread_is_stable():
    got = softmax_rows(np.array([[0.0, 1e4]]))
    assert np.isfinite(got).all()
    assert abs(got[0, 1] - 1.0) < 1e-12


def test_softmax_shift_invariance():
    rng = seeded_generator("softmax-shift", 1)
    a = rng.standard_normal((4, 6))
    assert np.allclose(softmax_rows(a + 13.5), softmax_rows(a), atol=1e-12)


def test_softmax_input_validation():
    with pytest.raises(ShapeMismatchError):
        softmax_rows(np.zeros((2, 0)))
    with pytest.raises(ShapeMismatchError):
        softmax_rows(np.zeros(3))
    with pytest.raises(ValueError):
        softmax_rows(np.array([[np.inf, 0.0]]))


# --- value mixing and fusion -------------------------------------------------


def test_weighted_features_one_hot_selects_row():
    e_b = np.array([[1.0, 2.0], [3.0, 4.0]])
    e_r = np.array([[5.0, 6.0]])
    got = weighted_features(np.array([[0.0, 0.0, 1.0]]), e_b, e_r)
    assert np.array_equal(got, [[5.0, 6.0]])


def test_weighted_features_uniform_is_mean():
    e_b = np.array([[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]])
    got = weighted_features(np.full((2, 3), 1.0 / 3.0), e_b, None)
    assert np.allclose(got, [[3.0, 4.0], [3.0, 4.0]], atol=1e-12)


def test_weighted_features_checks_column_count():
    with pytest.raises(ShapeMismatchError):
        weighted_features(np.ones((1, 3)), np.ones((2, 2)), None)


def test_modulate_identity_blocks():
    e_f = np.array([[1.0, 2.0], [3.0, 4.0]])
    e_w = np.array([[5.0, 6.0], [7.0, 8.0]])
    qk = weight_matrix(2, 2, 0)
    top = ProjectionWeights(
        w_query=qk, w_key=qk, w_out=np.vstack([np.eye(2), np.zeros((2, 2))]), mode="vanilla"
    )
    bottom = ProjectionWeights(
        w_query=qk, w_key=qk, w_out=np.vstack([np.zeros((2, 2)), np.eye(2)]), mode="vanilla"
    )
    assert np.array_equal(modulate(e_f, e_w, top), e_f)
    assert np.array_equal(modulate(e_f, e_w, bottom), e_w)


# --- score variants ----------------------------------------------------------


def test_vanilla_scalar_trace():
    w = ProjectionWeights(
        w_query=[[1.0]], w_key=[[1.0]], w_out=[[1.0], [0.0]], mode="vanilla"
    )
    out = run_sgf([[2.0]], [[3.0]], w=w)
    assert np.array_equal(out.scores, [[6.0]])
    assert np.array_equal(out.weights, [[1.0]])
    assert np.array_equal(out.weighted, [[3.0]])
    assert np.array_equal(out.modulated, [[2.0]])


def test_extended_scalar_trace():
    w = ProjectionWeights(
        w_query=[[1.0]], w_key=[[1.0]], w_out=[[0.5], [2.0]], mode="extended"
    )
    out = run_sgf([[2.0]], [[3.0]], [[5.0]], w=w)
    assert np.array_equal(out.scores, [[6.0, 10.0]])
    w1 = 1.0 / (1.0 + math.exp(4.0))
    w2 = math.exp(4.0) / (1.0 + math.exp(4.0))
    assert np.allclose(out.weights, [[w1, w2]], atol=1e-12)
    e_w = 3.0 * w1 + 5.0 * w2
    assert np.allclose(out.weighted, [[e_w]], atol=1e-12)
    assert np.allclose(out.modulated, [[2.0 * 0.5 + e_w * 2.0]], atol=1e-12)


def test_extended_with_duplicate_reference_repeats_columns():
    rng = seeded_generator("dup-ref", 0)
    e_f = rng.standard_normal((3, 4))
    e_b = rng.standard_normal((2, 4))
    w = init_weights(1, SgfDims(d_e=4, d_c=2, d_proj=5), "extended")
    scores = attention_extended(e_f, e_b, e_b, w)
    assert scores.shape == (3, 4)
    assert np.allclose(scores[:, :2], scores[:, 2:], atol=1e-12)


def test_zero_guidance_collapses_to_extended():
    rng = seeded_generator("collapse", 2)
    dims = SgfDims(d_e=5, d_c=3, d_proj=4)
    e_f, e_b, e_r, _, _, _ = _draw_tokens(rng, 4, 3, 2, 5, 3)
    w_sgf = init_weights(77, dims, "sgf")
    w_ext = init_weights(77, dims, "extended")
    guided = run_sgf(
        e_f, e_b, e_r, np.zeros((4, 3)), np.zeros((3, 3)), np.zeros((2, 3)), w=w_sgf
    )
    plain = run_sgf(e_f, e_b, e_r, w=w_ext)
    assert np.allclose(guided.scores, plain.scores, atol=1e-12)
    assert np.allclose(guided.modulated, plain.modulated, atol=1e-12)


def test_empty_reference_collapses_to_vanilla():
    rng = seeded_generator("collapse", 3)
    dims = SgfDims(d_e=5, d_c=3, d_proj=4)
    e_f = rng.standard_normal((4, 5))
    e_b = rng.standard_normal((3, 5))
    w_ext = init_weights(9, dims, "extended")
    w_van = init_weights(9, dims, "vanilla")
    assert np.allclose(
        attention_extended(e_f, e_b, None, w_ext),
        attention_vanilla(e_f, e_b, w_van),
        atol=1e-12,
    )


def test_identity_projection_scores_are_additive():
    rng = seeded_generator("additive", 4)
    d_e, d_c = 3, 2
    d_in = d_e + d_c
    e_f, e_b, e_r, c_f, c_b, c_r = _draw_tokens(rng, 4, 3, 2, d_e, d_c)
    eye = np.eye(d_in)
    w = ProjectionWeights(
        w_query=eye, w_key=eye, w_out=weight_matrix(2 * d_e, d_e, 0), mode="sgf"
    )
    scores = attention_sgf(e_f, e_b, e_r, c_f, c_b, c_r, w)
    keys = np.concatenate([e_b, e_r], axis=0)
    guides = np.concatenate([c_b, c_r], axis=0)
    want = (e_f @ keys.T + c_f @ guides.T) / math.sqrt(d_in)
    assert np.allclose(scores, want, atol=1e-12)


def test_key_permutation_leaves_mix_unchanged():
    rng = seeded_generator("perm", 5)
    dims = SgfDims(d_e=4, d_c=3, d_proj=4)
    e_f, e_b, e_r, c_f, c_b, c_r = _draw_tokens(rng, 3, 6, 2, 4, 3)
    w = init_weights(21, dims, "sgf")
    base = run_sgf(e_f, e_b, e_r, c_f, c_b, c_r, w=w)
    perm = rng.permutation(6)
    shuffled = run_sgf(e_f, e_b[perm], e_r, c_f, c_b[perm], c_r, w=w)
    assert np.allclose(shuffled.weighted, base.weighted, atol=1e-12)
    assert np.allclose(shuffled.modulated, base.modulated, atol=1e-12)


def test_positive_query_scaling_preserves_argmax():
    rng = seeded_generator("scale", 6)
    dims = SgfDims(d_e=4, d_c=3, d_proj=4)
    e_f, e_b, e_r, c_f, c_b, c_r = _draw_tokens(rng, 5, 4, 3, 4, 3)
    w = init_weights(33, dims, "sgf")
    base = run_sgf(e_f, e_b, e_r, c_f, c_b, c_r, w=w)
    scaled = run_sgf(3.0 * e_f, e_b, e_r, 3.0 * c_f, c_b, c_r, w=w)
    assert np.array_equal(
        base.weights.argmax(axis=1), scaled.weights.argmax(axis=1)
    )


def test_vanilla_rejects_reference_tokens():
    w = init_weights(0, SgfDims(d_e=2, d_c=2, d_proj=2), "vanilla")
    with pytest.raises(ShapeMismatchError):
        run_sgf(np.ones((1, 2)), np.ones((1, 2)), np.ones((1, 2)), w=w)


def test_run_sgf_requires_weights():
    with pytest.raises(ValueError):
        run_sgf(np.ones((1, 2)), np.ones((1, 2)))


def test_guidance_row_mismatch_is_an_error():
    w = init_weights(0, SgfDims(d_e=2, d_c=2, d_proj=2), "sgf")
    with pytest.raises(GuidanceMisalignedError):
        attention_sgf(
            np.ones((2, 2)),
            np.ones((3, 2)),
            np.zeros((0, 2)),
            np.ones((1, 2)),  # 1 guidance row for 2 foreground tokens
            np.ones((3, 2)),
            np.zeros((0, 2)),
            w,
        )


# --- oracle equivalence ------------------------------------------------------


def test_bundle_matches_naive_oracle_across_modes():
    rng = seeded_generator("sgf-oracle", 0)
    for draw in range(24):
        mode = MODES[draw % 3]
        d_e = int(rng.integers(1, 10))
        d_c = int(rng.integers(1, 10))
        d_proj = int(rng.integers(1, 10))
        f = int(rng.integers(1, 9))
        b = int(rng.integers(1, 9))
        r = 0 if mode == "vanilla" else int(rng.integers(0, 9))
        e_f, e_b, e_r, c_f, c_b, c_r = _draw_tokens(rng, f, b, r, d_e, d_c)
        w = init_weights(int(rng.integers(0, 2**31)), SgfDims(d_e, d_c, d_proj), mode)
        got = run_sgf(e_f, e_b, e_r, c_f, c_b, c_r, w=w)
        want = naive_attention(
            e_f, e_b, e_r, c_f, c_b, c_r, w.w_query, w.w_key, w.w_out, mode
        )
        assert np.allclose(got.scores, want["scores"], atol=1e-9)
        assert np.allclose(got.weights, want["weights"], atol=1e-9)
        assert np.allclose(got.weighted, want["weighted"], atol=1e-9)
        assert np.allclose(got.modulated, want["modulated"], atol=1e-9)


def test_softmax_matches_naive():
    rng = seeded_generator("softmax-oracle", 0)
    a = rng.standard_normal((5, 7)) * 10.0
    assert np.allclose(softmax_rows(a), naive_softmax_rows(a), atol=1e-12)


def test_golden_digest_is_pinned():
    assert golden_digest() == GOLDEN_DIGEST


def test_golden_bundle_matches_naive_oracle():
    bundle = golden_bundle()
    from refharm.sgf import GOLDEN_CASE

    rng = seeded_generator("sgf-golden", GOLDEN_CASE["seed"])
    d_e, d_c = GOLDEN_CASE["d_e"], GOLDEN_CASE["d_c"]
    f, b, r = GOLDEN_CASE["f"], GOLDEN_CASE["b"], GOLDEN_CASE["r"]
    e_f = rng.standard_normal((f, d_e))
    e_b = rng.standard_normal((b, d_e))
    e_r = rng.standard_normal((r, d_e))
    c_f = rng.standard_normal((f, d_c))
    c_b = rng.standard_normal((b, d_c))
    c_r = rng.standard_normal((r, d_c))
    dims = SgfDims(d_e=d_e, d_c=d_c, d_proj=GOLDEN_CASE["d_proj"])
    w = init_weights(GOLDEN_CASE["seed"], dims, "sgf")
    want = naive_attention(
        e_f, e_b, e_r, c_f, c_b, c_r, w.w_query, w.w_key, w.w_out, "sgf"
    )
    assert np.allclose(bundle.modulated, want["modulated"], atol=1e-9)


def test_invariant_report_passes():
    report = invariant_report(seed=0, draws=10)
    assert report["passed"] is True
    assert report["draws"] == 10
    assert report["digest"] == GOLDEN_DIGEST
    names = {c["name"] for c in report["checks"]}
    assert names == {
        "softmax-distribution",
        "key-permutation",
        "zero-guidance-collapse",
        "empty-reference-collapse",
        "weight-formula",
        "golden-digest",
    }
    assert all(c["passed"] for c in report["checks"])


# --- grid pooling ------------------------------------------------------------


def test_pool_grid_averages_blocks():
    vec = np.array([[0.0], [2.0], [4.0], [6.0]])  # 2x2 grid of scalars
    got = pool_grid(vec, (2, 2), (1, 1))
    assert np.array_equal(got, [[3.0]])


def test_pool_grid_partial_pooling():
    vec = np.arange(8, dtype=np.float64).reshape(8, 1)  # 4x2 grid
    got = pool_grid(vec, (4, 2), (2, 1))
    # rows 0..1 x both cols -> mean of 0,1,2,3; rows 2..3 -> mean of 4..7
    assert np.array_equal(got, [[1.5], [5.5]])


def test_pool_grid_rejects_uneven_factor():
    with pytest.raises(GuidanceMisalignedError):
        pool_grid(np.zeros((6, 2)), (3, 2), (2, 1))


def test_pool_grid_rejects_wrong_row_count():
    with pytest.raises(GuidanceMisalignedError):
        pool_grid(np.zeros((5, 2)), (3, 2), (1, 1))


def test_align_guidance_identity_and_pooling():
    vec = np.arange(4, dtype=np.float64).reshape(4, 1)
    same = align_guidance(vec, (2, 2), (2, 2))
    assert np.array_equal(same, vec)
    pooled = align_guidance(vec, (2, 2), (1, 1))
    assert np.array_equal(pooled, [[1.5]])
