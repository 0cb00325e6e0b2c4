import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from adaptok.compressor import (TokenMask, build_mask, gather, keep_top, patch_scores,
                                per_token_scores, scatter)
from adaptok.exceptions import ValidationError

PATCH_MAP = np.repeat(np.arange(16), 4)


def test_scores_zero_and_concentrated():
    assert np.all(per_token_scores(np.zeros(64), PATCH_MAP) == 0)
    err = np.zeros(64)
    err[20:24] = [1, 2, 3, 4]
    s = per_token_scores(err, PATCH_MAP)
    assert np.flatnonzero(s).tolist() == [5] and s[5] == 10


def test_scores_sum_to_total():
    err = np.random.default_rng(0).exponential(size=64)
    assert abs(per_token_scores(err, PATCH_MAP).sum() - err.sum()) < 1e-12
    assert np.allclose(patch_scores(err[None], 4)[0], per_token_scores(err, PATCH_MAP))


def test_scores_with_scattered_map():
    pm = np.array([0, 1, 0, 2, 1, 2])
    assert per_token_scores([1, 2, 3, 4, 5, 6], pm).tolist() == [4, 7, 10]


@pytest.mark.parametrize("pm", [[0, 2, 2], [0, -1, 1], [0, 1]])
def test_scores_bad_map(pm):
    with pytest.raises(ValidationError):
        per_token_scores([1.0, 1.0, 1.0], pm)


def test_build_mask_examples():
    assert build_mask([1, 5, 3, 2], 2).positions().tolist() == [1, 2]
    assert build_mask([7, 7, 7, 7], 2).positions().tolist() == [0, 1]
    assert build_mask(np.arange(16.0), 16).n_x == 16
    for bad in (0, 5):
        with pytest.raises(ValidationError):
            build_mask([1, 2, 3, 4], bad)


@given(arrays(np.float64, 16, elements=st.integers(0, 5).map(float)), st.integers(1, 16))
def test_keep_set_matches_sort_oracle(scores, n_x):
    order = sorted(range(16), key=lambda i: (-scores[i], i))
    mask = build_mask(scores, n_x)
    assert mask.positions().tolist() == sorted(order[:n_x])
    assert mask.n_x == n_x


def test_keep_top_batched_lengths():
    scores = np.random.default_rng(1).random((5, 16))
    n_x = np.array([1, 4, 8, 12, 16])
    masks = keep_top(scores, n_x)
    assert masks.sum(axis=1).tolist() == n_x.tolist()
    for row, k in zip(range(5), n_x):
        assert np.array_equal(masks[row], build_mask(scores[row], int(k)).kept)


def test_gather_scatter():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(16, 6))
    full = TokenMask(np.ones(16, dtype=bool))
    assert np.array_equal(gather(x, full), x)
    assert np.array_equal(scatter(x, full, np.full(6, 9.0)), x)
    one = TokenMask(np.eye(16, dtype=bool)[3])
    assert np.array_equal(gather(x, one), x[3:4])
    out = scatter(x[3:4], one, np.zeros(6))
    assert np.array_equal(out[3], x[3]) and np.count_nonzero(out) == np.count_nonzero(x[3])


@given(arrays(bool, 16).filter(lambda m: m.any()), st.integers(0, 2**32 - 1))
def test_roundtrips(kept, seed):
    rng = np.random.default_rng(seed)
    m = TokenMask(kept)
    comp = rng.normal(size=(m.n_x, 6))
    assert np.array_equal(gather(scatter(comp, m, rng.normal(size=6)), m), comp)
    x = rng.normal(size=(16, 6))
    fill = rng.normal(size=6)
    back = scatter(gather(x, m), m, fill)
    assert np.array_equal(back[kept], x[kept])
    assert np.all(back[~kept] == fill)


def test_shape_errors():
    m = TokenMask(np.ones(16, dtype=bool))
    with pytest.raises(ValidationError):
        gather(np.zeros((15, 6)), m)
    with pytest.raises(ValidationError):
        scatter(np.zeros((3, 6)), m, np.zeros(6))
    with pytest.raises(ValidationError):
        TokenMask(np.zeros((2, 2), dtype=bool))


def test_mask_bytes_lsb_first():
    kept = np.zeros(16, dtype=bool)
    kept[[0, 9]] = True
    m = TokenMask(kept)
    assert m.to_bytes() == bytes([0x01, 0x02])
    assert TokenMask.from_bytes(m.to_bytes(), 16) == m
    assert len(TokenMask(np.ones(13, dtype=bool)).to_bytes()) == 2
    with pytest.raises(ValidationError):
        TokenMask.from_bytes(bytes([0xFF, 0xFF]), 13)
