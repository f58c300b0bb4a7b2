"""Encoder modes: length law, finalization, incremental equivalence."""

import numpy as np
import pytest

from speechbridge import tensor as T
from speechbridge.encoder import EncoderConfig, SpeechEncoder, SpeechUtterance, num_steps
from speechbridge.gradcheck import grad_check
from speechbridge.layers import ParamStore
from speechbridge.tensor import Tensor


def make_encoder(seed=0, **kw):
    defaults = dict(mode="bidi", P=4, n_layers=2, d_model=16, d_in=3, n_heads=2, d_ff=32)
    defaults.update(kw)
    cfg = EncoderConfig(**defaults)
    return SpeechEncoder(ParamStore(np.random.default_rng(seed)), "enc", cfg), cfg


def frames(n, d=3, seed=0):
    return np.random.default_rng(seed).normal(size=(n, d))


# -----------------------------------------------------------------------------
# downsample
# -----------------------------------------------------------------------------


@pytest.mark.parametrize("t_raw,p,want", [(16, 8, 2), (17, 8, 3), (1, 8, 1), (8, 1, 8)])
def test_length_law(t_raw, p, want):
    assert num_steps(t_raw, p) == want
    enc, _ = make_encoder(P=p, d_in=3, d_model=16)
    assert enc.downsample(frames(t_raw)).shape[0] == want


def test_downsample_identity_projection():
    enc, _ = make_encoder(P=1, d_in=4, d_model=4)
    enc.proj_w.data[:] = np.eye(4)
    enc.proj_b.data[:] = 0.0
    x = frames(5, d=4)
    np.testing.assert_allclose(enc.downsample(x).data, x, atol=1e-15)


def test_downsample_rejects_empty():
    enc, _ = make_encoder()
    with pytest.raises(ValueError):
        enc.downsample(np.zeros((0, 3)))


def test_utterance_validation():
    with pytest.raises(ValueError):
        SpeechUtterance(np.array([[np.inf, 0.0, 0.0]]))
    u = SpeechUtterance(frames(4))
    assert u.frame_period_ms == 10


# -----------------------------------------------------------------------------
# offline bidirectional
# -----------------------------------------------------------------------------


def test_offline_deterministic():
    enc, _ = make_encoder(seed=1)
    u = SpeechUtterance(frames(20))
    a = enc.encode_offline(u).states
    b = enc.encode_offline(u).states
    np.testing.assert_array_equal(a, b)


def test_offline_is_bidirectional():
    enc, _ = make_encoder(seed=2)
    f = frames(24, seed=3)
    base = enc.encode_offline(SpeechUtterance(f)).states
    f2 = f.copy()
    f2[-1] += 5.0
    pert = enc.encode_offline(SpeechUtterance(f2)).states
    assert not np.allclose(base[0], pert[0])  # last frame reaches first state


def test_encoder_gradcheck():
    enc, _ = make_encoder(seed=4, n_layers=1)
    rng = np.random.default_rng(5)
    w = Tensor(rng.normal(size=(3, 16)))
    x = Tensor(rng.normal(size=(10, 3)), requires_grad=True)

    def f(t):
        return T.tensor_sum(T.mul(enc.encode(t), w))

    assert grad_check(f, x, tol=1e-4).ok


def test_mode_guards():
    enc, _ = make_encoder(mode="bidi")
    u = SpeechUtterance(frames(8))
    with pytest.raises(ValueError):
        enc.encode_streaming_bidi(u)
    with pytest.raises(ValueError):
        enc.encode_causal_full(u)


# -----------------------------------------------------------------------------
# bidi with recompute
# -----------------------------------------------------------------------------


def test_full_prefix_equals_offline_exactly():
    enc_b, _ = make_encoder(seed=6, mode="bidi")
    enc_r, _ = make_encoder(seed=6, mode="bidi_recompute")
    f = frames(32, seed=7)
    off = enc_b.encode_offline(SpeechUtterance(f)).states
    stream, _ = enc_r.encode_streaming_bidi(f)
    np.testing.assert_array_equal(off, stream.states)


def test_finalization_count_rule():
    enc, _ = make_encoder(mode="bidi_recompute", right_context_frames=13, P=1)
    out, n_final = enc.encode_streaming_bidi(frames(20))
    assert len(out) == 20 and n_final == 7  # 20 - 13
    out, n_final = enc.encode_streaming_bidi(frames(10))
    assert n_final == 0
    out, n_final = enc.encode_streaming_bidi(frames(10), final=True)
    assert n_final == 10


def test_finalized_states_stable_under_longer_prefixes():
    # holds exactly with windowed attention enabled
    enc, cfg = make_encoder(
        seed=8, mode="bidi_recompute", P=2, right_context_frames=6, bidi_window_left=8
    )
    f = frames(60, seed=9)
    prev = None
    for prefix_steps in (14, 20, 26, 30):
        out, n_final = enc.encode_streaming_bidi(f[: prefix_steps * 2])
        assert n_final == prefix_steps - 6
        if prev is not None:
            n_prev, states_prev = prev
            np.testing.assert_allclose(out.states[:n_prev], states_prev[:n_prev], atol=1e-9)
        prev = (n_final, out.states)


# -----------------------------------------------------------------------------
# causal incremental
# -----------------------------------------------------------------------------


def test_one_shot_block_equals_full_bit_exact():
    enc, _ = make_encoder(seed=10, mode="causal")
    f = frames(37, seed=11)
    full = enc.encode_causal_full(f).states
    delta, cache = enc.encode_causal_incremental(f, enc.new_cache(), final=True)
    np.testing.assert_array_equal(delta, full)
    assert cache.done


@pytest.mark.parametrize("step", [4, 1 * 4, 7])  # multiples of P and a ragged size
def test_blockwise_equals_one_shot(step):
    enc, _ = make_encoder(seed=12, mode="causal")
    f = frames(41, seed=13)
    full = enc.encode_causal_full(f).states
    cache = enc.new_cache()
    outs = []
    for i in range(0, 41, step):
        d, cache = enc.encode_causal_incremental(f[i : i + step], cache, final=i + step >= 41)
        outs.append(d)
    got = np.concatenate(outs, axis=0)
    assert got.shape == full.shape
    np.testing.assert_allclose(got, full, atol=1e-9)


def test_random_partitions_match(seed=0):
    enc, _ = make_encoder(seed=14, mode="causal", causal_window_index=1)  # (70, 6) lookahead
    f = frames(53, seed=15)
    full = enc.encode_causal_full(f).states
    rng = np.random.default_rng(seed)
    for _ in range(10):
        n_cuts = int(rng.integers(1, 6))
        cuts = sorted(rng.choice(np.arange(1, 53), size=n_cuts, replace=False).tolist())
        parts = np.split(f, cuts)
        cache = enc.new_cache()
        outs = []
        for j, p in enumerate(parts):
            d, cache = enc.encode_causal_incremental(p, cache, final=j == len(parts) - 1)
            outs.append(d)
        np.testing.assert_allclose(np.concatenate(outs, axis=0), full, atol=1e-9)


def test_right_context_zero_is_strictly_causal():
    enc, _ = make_encoder(seed=16, mode="causal", causal_window_index=3)  # (70, 0)
    f = frames(40, seed=17)
    base = enc.encode_causal_full(f).states
    f2 = f.copy()
    f2[20:] += 3.0  # perturb from raw frame 20 == encoder step 5
    pert = enc.encode_causal_full(f2).states
    np.testing.assert_array_equal(base[:5], pert[:5])
    assert not np.allclose(base[5:], pert[5:])


def test_cache_config_mismatch_rejected():
    enc_a, _ = make_encoder(seed=18, mode="causal")
    enc_b, _ = make_encoder(seed=18, mode="causal", P=8)
    cache = enc_b.new_cache()
    with pytest.raises(ValueError, match="configuration"):
        enc_a.encode_causal_incremental(frames(8), cache)


def test_cache_left_context_bound():
    enc, cfg = make_encoder(seed=19, mode="causal")
    left = cfg.causal_window[0]
    cache = enc.new_cache()
    f = frames(400, seed=20)
    for i in range(0, 400, 40):
        _, cache = enc.encode_causal_incremental(f[i : i + 40], cache, final=i + 40 >= 400)
        for l in range(cfg.n_layers):
            assert cache.bufs[l].shape[0] <= left + cfg.causal_window[1] + 1 + 40 // cfg.P
