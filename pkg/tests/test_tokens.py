import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pdet import tokens as K
from pdet.nn import Linear
from pdet.tensor import Tensor


def test_token_counts_and_expansion():
    u = np.zeros((1, 1, 256, 256))
    g = K.patchify(u, 4, "MC")
    assert g.grid == (64, 64)
    assert K.expansion_rate(96, 4, 1) == 6.0
    sc1 = K.patchify(np.zeros((1, 1, 32, 32)), 4, "SC")
    sc2 = K.patchify(np.zeros((1, 2, 32, 32)), 4, "SC")
    assert sc2.num_tokens == 2 * sc1.num_tokens
    mc2 = K.patchify(np.zeros((1, 2, 32, 32)), 4, "MC")
    assert mc2.num_tokens == sc1.num_tokens
    assert K.count_tokens(64, 64, 4, 2, "SC", 4) == [512, 128, 32, 8]


def test_patch_feature_sizes():
    u = np.zeros((3, 1, 16, 16))
    assert K.patchify(u, 4, "MC").tokens.shape == (1, 1, 4, 4, 3 * 2 * 16)
    assert K.patchify(u, 4, "SC").tokens.shape == (1, 1, 4, 4, 3 * 16)


def test_patchify_errors():
    with pytest.raises(ValueError, match="divisible"):
        K.patchify(np.zeros((1, 1, 10, 16)), 4)
    with pytest.raises(ValueError, match="C_max"):
        K.patchify(np.zeros((1, 3, 16, 16)), 4, "MC")


@pytest.mark.parametrize("mode,c", [("MC", 1), ("MC", 2), ("SC", 1), ("SC", 2)])
def test_raw_patch_roundtrip_is_exact(mode, c):
    u = np.random.default_rng(0).standard_normal((2, 3, c, 8, 12))
    g = K.patchify(u, 4, mode)
    np.testing.assert_array_equal(K.unpatchify(g).data, u)


def test_raw_patch_holds_one_square():
    u = np.arange(16.0).reshape(1, 1, 4, 4)
    g = K.patchify(u, 2, "SC")
    np.testing.assert_array_equal(g.tokens.data[0, 0, 0, 1], [2, 3, 6, 7])


@pytest.mark.parametrize("mode,c", [("MC", 2), ("SC", 2), ("MC", 1)])
def test_embed_unembed_roundtrip_with_pseudo_inverse(mode, c):
    rng = np.random.default_rng(1)
    d, p, t = 48, 4, 1
    embed, unembed = K.pseudo_inverse_pair(d, p, t, mode, rng=rng)
    enc = Linear(embed.shape[0], d, bias=False, rng=rng, dtype=np.float64)
    dec = Linear(d, embed.shape[0], bias=False, rng=rng, dtype=np.float64)
    enc.weight.data, dec.weight.data = embed, unembed
    u = rng.standard_normal((t, c, 16, 16))
    out = K.unpatchify(K.patchify(u, p, mode, enc), dec)
    np.testing.assert_allclose(out.data[0], u, atol=1e-5)


def test_zero_tokens_give_zero_field():
    rng = np.random.default_rng(2)
    dec = Linear(16, 2 * 16, bias=False, rng=rng)
    g = K.patchify(np.zeros((1, 2, 16, 16)), 4, "MC")
    g.tokens = Tensor(np.zeros((1, 1, 4, 4, 16)))
    out = K.unpatchify(g, dec)
    assert out.shape == (1, 1, 2, 16, 16) and np.all(out.data == 0)


def test_unpatchify_shape_contract():
    g = K.patchify(np.zeros((1, 1, 256, 256)), 4, "MC")
    assert K.unpatchify(g).shape == (1, 1, 1, 256, 256)


def test_zero_padding_channel_leaves_mc_tokens_unchanged():
    rng = np.random.default_rng(3)
    enc = Linear(2 * 16, 8, rng=rng, dtype=np.float64)
    u1 = rng.standard_normal((1, 1, 8, 8))
    explicit = np.concatenate([u1, np.zeros_like(u1)], axis=1)
    a = K.patchify(u1, 4, "MC", enc).tokens.data
    b = K.patchify(explicit, 4, "MC", enc).tokens.data
    assert a.tobytes() == b.tobytes()


def test_unshuffle_shapes():
    x = np.zeros((1, 1, 8, 8, 5))
    assert K.pixel_unshuffle_down(x).shape == (1, 1, 4, 4, 20)
    with pytest.raises(ValueError):
        K.pixel_unshuffle_down(np.zeros((1, 7, 8, 5)))
    with pytest.raises(ValueError):
        K.pixel_shuffle_up(np.zeros((1, 4, 4, 6)))


@settings(max_examples=30, deadline=None)
@given(ty=st.integers(1, 4), tx=st.integers(1, 4), d=st.integers(1, 5), lead=st.integers(1, 3))
def test_shuffle_inverts_unshuffle(ty, tx, d, lead):
    x = np.random.default_rng(ty * 100 + tx * 10 + d).standard_normal((lead, 2 * ty, 2 * tx, d))
    down = K.pixel_unshuffle_down(x)
    assert sorted(down.data.ravel()) == sorted(x.ravel())
    np.testing.assert_array_equal(K.pixel_shuffle_up(down).data, x)


def test_unshuffle_groups_2x2_neighbourhood():
    x = np.arange(16.0).reshape(1, 4, 4, 1)
    down = K.pixel_unshuffle_down(x).data
    np.testing.assert_array_equal(down[0, 0, 0], [0, 1, 4, 5])


def test_stage_widths():
    assert [K.stage_width(96, s) for s in range(4)] == [96, 192, 384, 384]
    assert K.token_pyramid(64, 64, 4, 4) == [(16, 16), (8, 8), (4, 4), (2, 2)]
