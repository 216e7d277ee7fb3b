import numpy as np
import pytest

from mu2.config import DEFAULT_VOCAB, SAMPLES_DIR
from mu2.encoder import (
    UNK_TOKEN,
    Vocab,
    build_vocab,
    embed_text,
    encode_frames,
    encoder_param_shapes,
    load_vocab,
    patch_count,
    patchify,
    save_vocab,
    unpatchify,
)
from mu2.errors import InvalidInputError, NonFiniteError
from mu2.storage import read_lines
from mu2.volume import FrameStack


def _encoder_params(patch=(2, 2, 2), hidden=4, vocab_size=5, seed=0, biases=True):
    rng = np.random.default_rng(seed)
    params = {name: rng.normal(size=shape) for name, shape, _ in encoder_param_shapes(patch, hidden, vocab_size)}
    if not biases:
        params["encoder.patch_b"] = np.zeros(hidden)
        params["encoder.global_b"] = np.zeros(hidden)
    return params


def test_patchify_roundtrip_and_order():
    frames = np.arange(2 * 2 * 4 * 4, dtype=np.float64).reshape(2, 2, 4, 4)
    patches = patchify(frames, (2, 2, 2))
    assert patches.shape == (2, 4, 8)
    # first patch: depth 0..1, rows 0..1, columns 0..1 of frame 0
    np.testing.assert_array_equal(patches[0, 0], frames[0, :, :2, :2].ravel())
    np.testing.assert_array_equal(patches[0, 1], frames[0, :, :2, 2:].ravel())
    np.testing.assert_array_equal(unpatchify(patches, (2, 4, 4), (2, 2, 2)), frames)


def test_patch_count_names_the_axis():
    assert patch_count((4, 8, 8), (2, 4, 4)) == 8
    with pytest.raises(InvalidInputError, match="axis H"):
        patch_count((2, 5, 4), (2, 2, 2))


def test_encode_frames_appends_global_token_last():
    rng = np.random.default_rng(1)
    stack = FrameStack(data=rng.uniform(size=(3, 2, 4, 4)))
    params = _encoder_params()
    grid = encode_frames(stack, (2, 2, 2), params)

    assert grid.tokens.shape == (3, 5, 4)
    assert grid.n_visual_tokens == 5
    patches = grid.tokens[:, :-1]
    expected = patches.mean(axis=1) @ params["encoder.global_w"] + params["encoder.global_b"]
    np.testing.assert_allclose(grid.tokens[:, -1], expected)


def test_encoder_without_biases_is_linear():
    rng = np.random.default_rng(2)
    a = rng.uniform(size=(2, 2, 4, 4))
    b = rng.uniform(size=(2, 2, 4, 4))
    params = _encoder_params(biases=False)
    together = encode_frames(FrameStack(data=a + 2.0 * b), (2, 2, 2), params).tokens
    apart = (
        encode_frames(FrameStack(data=a), (2, 2, 2), params).tokens
        + 2.0 * encode_frames(FrameStack(data=b), (2, 2, 2), params).tokens
    )
    np.testing.assert_allclose(together, apart, atol=1e-12)


def test_build_vocab_orders_by_frequency_then_token():
    vocab = build_vocab(["b a a", "c b a", "d"], max_size=4)
    assert vocab.tokens == [UNK_TOKEN, "a", "b", "c"]
    assert vocab.lookup("d") == 0
    assert "a" in vocab
    assert len(vocab) == 4


def test_build_vocab_min_freq():
    vocab = build_vocab(["x y y", "z y"], max_size=10, min_freq=2)
    assert vocab.tokens == [UNK_TOKEN, "y"]


def test_bundled_vocab_matches_question_corpus():
    rebuilt = build_vocab(read_lines(SAMPLES_DIR / "questions.txt"), max_size=512)
    assert load_vocab(DEFAULT_VOCAB).tokens == rebuilt.tokens


def test_vocab_file_roundtrip(tmp_path):
    vocab = Vocab(["lesion", "liver"])
    save_vocab(tmp_path / "vocab.txt", vocab)
    assert load_vocab(tmp_path / "vocab.txt").tokens == [UNK_TOKEN, "lesion", "liver"]


def test_vocab_rejects_duplicates():
    with pytest.raises(InvalidInputError):
        Vocab(["a", "a"])


def test_embed_text_pads_and_masks():
    vocab = Vocab(["is", "there", "ascites"])
    params = _encoder_params(vocab_size=len(vocab))
    table = params["text.table"]

    embedded = embed_text("Is there ascites, doctor?", vocab, params, n_q=6)
    assert embedded.tokens.shape == (6, 4)
    assert embedded.attention_mask.tolist() == [True, True, True, True, False, False]
    np.testing.assert_array_equal(embedded.tokens[3], table[0])
    np.testing.assert_array_equal(embedded.tokens[4:], np.zeros((2, 4)))
    assert embedded.valid_tokens.shape == (4, 4)


def test_embed_text_truncates_to_n_q():
    vocab = Vocab(["a"])
    params = _encoder_params(vocab_size=len(vocab))
    embedded = embed_text("a a a a a", vocab, params, n_q=3)
    assert embedded.attention_mask.all()


def test_embed_text_rejects_empty_question_and_wrong_table():
    vocab = Vocab(["a"])
    with pytest.raises(InvalidInputError, match="empty"):
        embed_text("   ", vocab, _encoder_params(vocab_size=2), n_q=3)
    with pytest.raises(InvalidInputError, match="rows"):
        embed_text("a", vocab, _encoder_params(vocab_size=5), n_q=3)


@pytest.mark.parametrize("voxel", [(0, 0, 0, 0), (1, 1, 3, 2), (2, 0, 2, 1), (0, 1, 1, 3)])
def test_one_voxel_moves_one_patch_token_and_its_global_token(voxel):
    rng = np.random.default_rng(3)
    data = rng.uniform(size=(3, 2, 4, 4))
    params = _encoder_params()
    before = encode_frames(FrameStack(data=data), (2, 2, 2), params).tokens
    bumped = data.copy()
    bumped[voxel] += 0.5
    after = encode_frames(FrameStack(data=bumped), (2, 2, 2), params).tokens

    changed = np.argwhere(np.abs(before - after).max(axis=-1) > 1e-12)
    frame = voxel[0]
    patch = (voxel[1] // 2) * 4 + (voxel[2] // 2) * 2 + voxel[3] // 2
    assert sorted(map(tuple, changed)) == [(frame, patch), (frame, 4)]


def test_constant_frames_share_patch_tokens_but_not_the_global_token():
    params = _encoder_params()
    grid = encode_frames(FrameStack(data=np.full((2, 2, 4, 4), 0.3)), (2, 2, 2), params)
    patches = grid.tokens[:, :-1]
    np.testing.assert_allclose(patches, np.broadcast_to(patches[0, 0], patches.shape), atol=1e-12)
    np.testing.assert_allclose(grid.tokens[0], grid.tokens[1], atol=1e-12)
    assert not np.allclose(grid.tokens[0, -1], patches[0, 0])

    params["encoder.global_w"] = np.eye(4)
    params["encoder.global_b"] = np.zeros(4)
    grid = encode_frames(FrameStack(data=np.full((2, 2, 4, 4), 0.3)), (2, 2, 2), params)
    np.testing.assert_allclose(grid.tokens, np.broadcast_to(grid.tokens[0, 0], grid.tokens.shape), atol=1e-12)


def test_non_finite_frames_fail_the_encoder_stage():
    data = np.zeros((1, 2, 4, 4))
    data[0, 1, 2, 2] = np.inf
    with pytest.raises(NonFiniteError) as caught:
        encode_frames(FrameStack(data=data), (2, 2, 2), _encoder_params())
    assert caught.value.stage == "encode_frames"
