import math
import os

import numpy as np
import pytest

from mu2.config import DEFAULT_CONFIG, DEFAULT_VOCAB, FULL_CONFIG, load_config
from mu2.encoder import encode_frames, load_vocab
from mu2.errors import InvalidInputError
from mu2.functional import gelu, mha_forward
from mu2.tokenizer import (
    PooledTokens,
    RelBiasTable,
    check_params,
    dmtp,
    dts,
    init_params,
    pool_matrix,
    pooled_length,
    rpe_bias,
    rpe_bias_backward,
    rpe_bias_matrix,
    svr,
    svr_layer,
    tokenize,
    tta,
)
from mu2.types import Precision, ScaleSummary
from mu2.volume import Volume, prepare_frames, synthetic_volume


def _naive_bias(n, row, max_distance):
    out = np.empty((n, n))
    for i in range(n):
        for j in range(n):
            offset = max(-max_distance, min(max_distance, i - j))
            out[i, j] = row[offset + max_distance]
    return out


def _desk():
    config = load_config(DEFAULT_CONFIG)
    vocab = load_vocab(DEFAULT_VOCAB)
    params = init_params(config, len(vocab), config.seed)
    stack = prepare_frames(synthetic_volume((8, 16, 16), seed=3), config.ingest.target)
    return config, vocab, params, stack


def _svr_params(layers, embed=8, heads=2, d_max=2, seed=0):
    rng = np.random.default_rng(seed)
    params = {}
    for i in range(layers):
        p = f"svr.{i}"
        params[f"{p}.rel_bias"] = rng.normal(size=(heads, 2 * d_max + 1))
        for name in ("wq", "wk", "wv", "wo"):
            params[f"{p}.{name}"] = rng.normal(size=(embed, embed)) / np.sqrt(embed)
        params[f"{p}.ff1_w"] = rng.normal(size=(embed, 2 * embed)) / np.sqrt(embed)
        params[f"{p}.ff1_b"] = np.zeros(2 * embed)
        params[f"{p}.ff2_w"] = rng.normal(size=(2 * embed, embed)) / np.sqrt(2 * embed)
        params[f"{p}.ff2_b"] = np.zeros(embed)
    return params


def test_rpe_bias_three_by_three():
    table = RelBiasTable(values=np.array([[1.0, 2.0, 3.0]]))
    # columns hold offsets -1, 0, +1 (a, b, c); entry (i, j) uses i - j
    expected = np.array([[2.0, 1.0, 1.0], [3.0, 2.0, 1.0], [3.0, 3.0, 2.0]])
    np.testing.assert_array_equal(rpe_bias_matrix(3, table, head=0), expected)


def test_rpe_bias_matches_loop_and_is_toeplitz():
    rng = np.random.default_rng(4)
    table = RelBiasTable(values=rng.normal(size=(3, 5)))
    for head in range(3):
        bias = rpe_bias_matrix(7, table, head)
        np.testing.assert_array_equal(bias, _naive_bias(7, table.values[head], 2))
        for i in range(1, 7):
            for j in range(1, 7):
                assert bias[i, j] == bias[i - 1, j - 1]
    np.testing.assert_array_equal(rpe_bias(7, table.values)[1], _naive_bias(7, table.values[1], 2))


def test_rpe_bias_without_distance_is_constant():
    table = RelBiasTable(values=np.array([[0.25]]))
    np.testing.assert_array_equal(rpe_bias_matrix(4, table, 0), np.full((4, 4), 0.25))


def test_rpe_bias_rejects_bad_inputs():
    table = RelBiasTable(values=np.zeros((2, 3)))
    with pytest.raises(InvalidInputError):
        rpe_bias_matrix(0, table, 0)
    with pytest.raises(InvalidInputError):
        rpe_bias_matrix(3, table, 2)
    with pytest.raises(InvalidInputError):
        RelBiasTable(values=np.zeros((2, 4)))


def test_rpe_bias_backward_accumulates_per_offset():
    rng = np.random.default_rng(5)
    dbias = rng.normal(size=(2, 5, 5))
    grads = rpe_bias_backward(dbias, max_distance=1)
    expected = np.zeros((2, 3))
    for h in range(2):
        for i in range(5):
            for j in range(5):
                expected[h, max(-1, min(1, i - j)) + 1] += dbias[h, i, j]
    np.testing.assert_allclose(grads, expected)


def test_spatial_layer_keeps_frames_apart_and_temporal_layer_mixes_them():
    rng = np.random.default_rng(6)
    tokens = rng.normal(size=(3, 5, 8))
    bumped = tokens.copy()
    bumped[2] += 1.0

    one = _svr_params(1)
    np.testing.assert_allclose(svr(tokens, one, 1, 2)[0], svr(bumped, one, 1, 2)[0])

    two = _svr_params(2)
    out = svr(tokens, two, 2, 2)
    assert out.shape == tokens.shape
    assert not np.allclose(out[0], svr(bumped, two, 2, 2)[0])


def test_dts_rows_are_convex_weights():
    rng = np.random.default_rng(7)
    tokens = rng.normal(size=(2, 5, 4))
    selected = dts(tokens, rng.normal(size=(4, 3)))
    flat = tokens.reshape(-1, 4)

    assert selected.weights.shape == (3, 10)
    assert np.all(selected.weights > 0)
    np.testing.assert_allclose(selected.weights.sum(axis=1), 1.0)
    np.testing.assert_allclose(selected.tokens, selected.weights @ flat)
    assert np.all(selected.tokens <= flat.max(axis=0) + 1e-12)
    assert np.all(selected.tokens >= flat.min(axis=0) - 1e-12)


def test_dts_with_zero_scores_averages_everything():
    tokens = np.arange(12, dtype=np.float64).reshape(1, 3, 4)
    selected = dts(tokens, np.zeros((4, 2)))
    np.testing.assert_allclose(selected.tokens, np.tile(tokens[0].mean(axis=0), (2, 1)))


def _dmtp_params(width, embed, seed=8):
    rng = np.random.default_rng(seed)
    return {
        "dmtp.g1_w": rng.normal(size=(width, embed // 2)),
        "dmtp.g1_b": rng.normal(size=(embed // 2,)),
        "dmtp.g2_w": rng.normal(size=(embed // 2, 1)),
    }


def test_dmtp_pools_every_scale():
    rng = np.random.default_rng(9)
    tokens = rng.normal(size=(8, 4))
    pooled = dmtp(tokens, [1, 2, 4], _dmtp_params(8, 4), ScaleSummary.MEAN_STD)

    assert pooled_length(8, [1, 2, 4]) == 14
    assert pooled.tokens.shape == (14, 4)
    assert pooled.pool_matrix.shape == (14, 8)
    np.testing.assert_allclose(pooled.pool_matrix.sum(axis=1), 1.0)
    np.testing.assert_allclose(pooled.scale_weights.sum(), 1.0)

    scale_of_row = np.repeat(pooled.scale_weights, [8, 4, 2])
    np.testing.assert_allclose(pooled.tokens, scale_of_row[:, None] * (pooled.pool_matrix @ tokens))
    np.testing.assert_allclose(pooled.tokens[8], pooled.scale_weights[1] * tokens[:2].mean(axis=0))


def test_dmtp_mean_summary_gives_uniform_scale_weights():
    rng = np.random.default_rng(10)
    pooled = dmtp(rng.normal(size=(8, 4)), [1, 2, 4], _dmtp_params(4, 4))
    np.testing.assert_allclose(pooled.scale_weights, np.full(3, 1.0 / 3.0))


def test_pool_matrix_single_scale_is_identity():
    np.testing.assert_array_equal(pool_matrix(4, [1]), np.eye(4))


def test_dmtp_rejects_indivisible_k_and_bad_kernels():
    params = _dmtp_params(4, 4)
    with pytest.raises(InvalidInputError, match="divisible"):
        dmtp(np.zeros((6, 4)), [1, 2, 4], params)
    with pytest.raises(InvalidInputError):
        dmtp(np.zeros((8, 4)), [2, 4], params)


def test_tta_output_is_last_map_applied_to_pooled_tokens():
    config, vocab, params, _ = _desk()
    rng = np.random.default_rng(11)
    pooled = PooledTokens(tokens=rng.normal(size=(14, 16)), scale_weights=np.full(3, 1 / 3), pool_matrix=pool_matrix(8, [1, 2, 4]))
    compact = tta(rng.normal(size=(3, 16)), pooled, params, layers=2, heads=2)

    assert compact.tokens.shape == (4, 16)
    assert compact.layer_maps.shape == (2, 4, 14)
    np.testing.assert_allclose(compact.provenance_weights.sum(axis=1), 1.0)
    np.testing.assert_allclose(compact.tokens, compact.provenance_weights @ pooled.tokens)
    np.testing.assert_array_equal(compact.layer_maps[-1], compact.provenance_weights)


def test_tokenize_desk_scale():
    config, vocab, params, stack = _desk()
    compact = tokenize(stack, "Is there a lesion in the right kidney?", config, params, vocab)

    assert compact.tokens.shape == (config.model.n_queries, config.model.hidden)
    assert compact.tokens.dtype == np.float64
    assert np.isfinite(compact.tokens).all()
    assert compact.provenance_weights.shape == (4, config.model.pooled_length)
    np.testing.assert_allclose(compact.provenance_weights.sum(axis=1), 1.0)
    np.testing.assert_allclose(compact.scale_weights.sum(), 1.0)


def test_tokenize_is_deterministic_and_question_dependent():
    config, vocab, params, stack = _desk()
    first = tokenize(stack, "Is the liver normal in size?", config, params, vocab)
    again = tokenize(stack, "Is the liver normal in size?", config, params, vocab)
    other = tokenize(stack, "Is the spleen enlarged?", config, params, vocab)
    np.testing.assert_array_equal(first.tokens, again.tokens)
    assert not np.allclose(first.tokens, other.tokens)


def test_tokenize_float32():
    config, vocab, params, stack = _desk()
    config.model.dtype = Precision.FLOAT32
    compact = tokenize(stack, "Is the spleen enlarged?", config, params, vocab)
    assert compact.tokens.dtype == np.float32


def test_tokenize_names_the_failing_stage():
    config, vocab, params, stack = _desk()
    with pytest.raises(InvalidInputError, match="^encode_frames:"):
        tokenize(stack, "   ", config, params, vocab)


def test_check_params_reports_missing_and_misshapen():
    config, vocab, params, _ = _desk()
    missing = dict(params)
    del missing["dts.w_s"]
    with pytest.raises(InvalidInputError, match="dts.w_s"):
        check_params(missing, config, len(vocab))
    wrong = dict(params)
    wrong["tta.queries"] = np.zeros((3, 16))
    with pytest.raises(InvalidInputError, match="tta.queries"):
        check_params(wrong, config, len(vocab))


def test_init_params_is_seeded():
    config, vocab, params, _ = _desk()
    again = init_params(config, len(vocab), config.seed)
    other = init_params(config, len(vocab), config.seed + 1)
    assert all(np.array_equal(params[name], again[name]) for name in params)
    assert not np.array_equal(params["dts.w_s"], other["dts.w_s"])


@pytest.mark.slow
@pytest.mark.skipif(os.environ.get("MU2_RUN_SLOW") != "1", reason="set MU2_RUN_SLOW=1 for the full-size run")
def test_tokenize_full_scale():
    config = load_config(FULL_CONFIG)
    vocab = load_vocab(DEFAULT_VOCAB)
    params = init_params(config, len(vocab), config.seed)
    stack = prepare_frames(synthetic_volume((64, 128, 128), seed=1), config.ingest.target)
    compact = tokenize(stack, "Is there a lesion in the right kidney?", config, params, vocab)
    assert compact.tokens.shape == (1024, 768)
    assert np.isfinite(compact.tokens).all()


def test_rpe_bias_is_toeplitz_for_random_configurations():
    rng = np.random.default_rng(12)
    for _ in range(100):
        n = int(rng.integers(1, 65))
        max_distance = int(rng.integers(0, 17))
        heads = int(rng.integers(1, 9))
        values = rng.normal(size=(heads, 2 * max_distance + 1))
        bias = rpe_bias(n, values)
        assert bias.shape == (heads, n, n)
        assert np.array_equal(bias[:, 1:, 1:], bias[:, :-1, :-1])
        head = int(rng.integers(0, heads))
        table = RelBiasTable(values=values)
        np.testing.assert_array_equal(rpe_bias_matrix(n, table, head), _naive_bias(n, values[head], max_distance))


def _gelu(z):
    return 0.5 * z * (1.0 + math.erf(z / math.sqrt(2.0)))


def _dense_svr_layer(x, params, prefix, heads):
    n, embed = x.shape
    width = embed // heads
    table = params[f"{prefix}.rel_bias"]
    max_distance = (table.shape[1] - 1) // 2
    q, k, v = (x @ params[f"{prefix}.{name}"] for name in ("wq", "wk", "wv"))
    context = np.zeros((n, embed))
    for h in range(heads):
        cols = slice(h * width, (h + 1) * width)
        bias = _naive_bias(n, table[h], max_distance)
        for i in range(n):
            scores = [float(q[i, cols] @ k[j, cols]) / math.sqrt(width) + bias[i, j] for j in range(n)]
            top = max(scores)
            weights = [math.exp(s - top) for s in scores]
            total = sum(weights)
            for j in range(n):
                context[i, cols] += weights[j] / total * v[j, cols]
    hidden = x + context @ params[f"{prefix}.wo"]
    pre = hidden @ params[f"{prefix}.ff1_w"] + params[f"{prefix}.ff1_b"]
    activated = np.vectorize(_gelu)(pre)
    return hidden + activated @ params[f"{prefix}.ff2_w"] + params[f"{prefix}.ff2_b"]


def test_svr_layer_matches_dense_attention_loop():
    rng = np.random.default_rng(13)
    params = _svr_params(1, seed=13)
    for p in ("ff1_b", "ff2_b"):
        params[f"svr.0.{p}"] = rng.normal(size=params[f"svr.0.{p}"].shape)
    x = rng.normal(size=(4, 8))
    out, _ = svr_layer(x[None], params, "svr.0", heads=2)
    np.testing.assert_allclose(out[0], _dense_svr_layer(x, params, "svr.0", heads=2), atol=1e-6)


def test_single_token_attention_is_the_value_path():
    params = _svr_params(1, seed=14)
    x = np.random.default_rng(14).normal(size=(1, 1, 8))
    weights = [params[f"svr.0.{name}"] for name in ("wq", "wk", "wv", "wo")]
    out, cache = mha_forward(x, x, *weights, heads=2)
    np.testing.assert_array_equal(cache.weights, np.ones((1, 2, 1, 1)))
    np.testing.assert_allclose(out, x @ weights[2] @ weights[3], atol=1e-12)


def test_identical_tokens_attend_uniformly():
    params = _svr_params(1, seed=15)
    row = np.random.default_rng(15).normal(size=8)
    x = np.tile(row, (1, 5, 1))
    weights = [params[f"svr.0.{name}"] for name in ("wq", "wk", "wv", "wo")]
    _, cache = mha_forward(x, x, *weights, heads=2)
    np.testing.assert_allclose(cache.weights, np.full((1, 2, 5, 5), 0.2), atol=1e-12)


def test_dts_is_permutation_equivariant():
    rng = np.random.default_rng(16)
    tokens = rng.normal(size=(2, 5, 4))
    w_s = rng.normal(size=(4, 3))
    flat = tokens.reshape(-1, 4)
    base = dts(tokens, w_s)
    for _ in range(5):
        order = rng.permutation(flat.shape[0])
        shuffled = dts(flat[order][None], w_s)
        np.testing.assert_allclose(shuffled.weights, base.weights[:, order], atol=1e-12)
        np.testing.assert_allclose(shuffled.tokens, base.tokens, atol=1e-12)


def test_dts_of_a_single_token_copies_it():
    token = np.array([[[0.5, -1.0, 2.0]]])
    selected = dts(token, np.random.default_rng(17).normal(size=(3, 4)))
    np.testing.assert_array_equal(selected.weights, np.ones((4, 1)))
    np.testing.assert_allclose(selected.tokens, np.tile(token[0, 0], (4, 1)))


def test_pooled_length_formula_on_random_kernel_sets():
    rng = np.random.default_rng(18)
    for _ in range(20):
        largest = int(rng.choice([1, 2, 3, 4, 6, 8]))
        middle = [s for s in range(2, largest) if largest % s == 0 and rng.random() < 0.5]
        kernels = sorted({1, largest, *middle})
        k = largest * int(rng.integers(1, 6))
        pooled = dmtp(rng.normal(size=(k, 4)), kernels, _dmtp_params(4, 4))
        expected = sum(k // s for s in kernels)
        assert pooled_length(k, kernels) == expected
        assert pooled.tokens.shape == (expected, 4)
        assert pooled.pool_matrix.shape == (expected, k)


def _pooled(tokens):
    return PooledTokens(tokens=tokens, scale_weights=np.ones(1), pool_matrix=np.eye(tokens.shape[0]))


def test_tta_with_one_pooled_token_returns_it_for_every_question():
    _, _, params, _ = _desk()
    rng = np.random.default_rng(19)
    token = rng.normal(size=(1, 16))
    for _ in range(3):
        compact = tta(rng.normal(size=(int(rng.integers(1, 6)), 16)), _pooled(token), params, layers=2, heads=2)
        np.testing.assert_allclose(compact.tokens, np.tile(token, (4, 1)), atol=1e-12)
        np.testing.assert_allclose(compact.provenance_weights, np.ones((4, 1)))


def test_tta_rows_stay_inside_the_pooled_hull():
    _, _, params, _ = _desk()
    rng = np.random.default_rng(20)
    for _ in range(10):
        pooled = rng.normal(size=(int(rng.integers(2, 15)), 16))
        compact = tta(rng.normal(size=(3, 16)), _pooled(pooled), params, layers=2, heads=2)
        assert np.all(compact.provenance_weights >= 0)
        np.testing.assert_allclose(compact.provenance_weights.sum(axis=1), 1.0)
        assert np.all(compact.tokens <= pooled.max(axis=0) + 1e-12)
        assert np.all(compact.tokens >= pooled.min(axis=0) - 1e-12)


def test_shape_ladder_with_five_visual_tokens():
    config = load_config(DEFAULT_CONFIG, {"ingest.target": [2, 2, 4, 4]})
    vocab = load_vocab(DEFAULT_VOCAB)
    params = init_params(config, len(vocab), config.seed)
    stack = prepare_frames(synthetic_volume((8, 16, 16), seed=3), config.ingest.target)

    grid = encode_frames(stack, config.encoder.patch, params)
    assert grid.tokens.shape == (2, 5, 16)
    assert config.model.pooled_length == 14
    compact = tokenize(stack, "Is there a lesion in the right kidney?", config, params, vocab)
    assert compact.tokens.shape == (4, 16)
    assert compact.provenance_weights.shape == (4, 14)
    assert np.isfinite(compact.tokens).all()


def test_constant_volume_gives_identical_compact_tokens_with_an_identity_global_token():
    config, vocab, params, _ = _desk()
    stack = prepare_frames(Volume(voxels=np.full((8, 16, 16), 7.0)), config.ingest.target)
    question = "Is the liver normal in size?"

    distinct = tokenize(stack, question, config, params, vocab)
    assert not np.allclose(distinct.tokens, distinct.tokens[0])

    params = dict(params)
    params["encoder.global_w"] = np.eye(16)
    params["encoder.global_b"] = np.zeros(16)
    compact = tokenize(stack, question, config, params, vocab)
    np.testing.assert_allclose(compact.tokens, np.broadcast_to(compact.tokens[0], compact.tokens.shape), atol=1e-10)
    np.testing.assert_allclose(compact.scale_weights, np.full(3, 1.0 / 3.0))


def test_float32_stays_float32_through_every_stage():
    _, _, params, _ = _desk()
    params = {name: value.astype(np.float32) for name, value in params.items()}
    tokens = np.random.default_rng(21).normal(size=(2, 5, 16)).astype(np.float32)

    assert gelu(np.ones(3, np.float32)).dtype == np.float32
    refined = svr(tokens, params, layers=2, heads=2)
    assert refined.dtype == np.float32
    selected = dts(refined, params["dts.w_s"])
    assert selected.tokens.dtype == np.float32
    pooled = dmtp(selected.tokens, [1, 2, 4], params)
    assert pooled.tokens.dtype == np.float32
    compact = tta(np.ones((2, 16), np.float32), pooled, params, layers=2, heads=2)
    assert compact.tokens.dtype == np.float32
