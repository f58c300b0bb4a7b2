"""Synthetic task generation: determinism, oracles, dataset files."""

import numpy as np
import pytest

from speechbridge import data as data_mod
from speechbridge.data import (
    SynthTaskSpec,
    file_digest,
    generate,
    load_dataset,
    make_example,
    nearest_tokens,
    oracle_target,
    render_table,
    save_dataset,
)


def spec(**kw):
    defaults = dict(kind="copy", vocab_size=8, seq_len=(3, 6), upsample=4, noise_std=0.0, seed=0, d_in=4)
    defaults.update(kw)
    return SynthTaskSpec(**defaults)


# -----------------------------------------------------------------------------
# oracles
# -----------------------------------------------------------------------------


def test_oracle_copy():
    assert oracle_target(spec(), [3, 1, 2]) == [3, 1, 2]


def test_oracle_shift_vocab_wraps():
    s = spec(kind="shift_vocab", vocab_size=5, shift_offset=1)
    assert oracle_target(s, [4]) == [0]
    assert oracle_target(s, [0, 3]) == [1, 4]


def test_oracle_local_reorder_window_two():
    s = spec(kind="local_reorder")
    assert oracle_target(s, [10, 11, 12, 13]) == [11, 10, 13, 12]
    assert oracle_target(s, [1, 2, 3]) == [2, 1, 3]  # odd tail stays


def test_oracle_local_reorder_is_involution():
    s = spec(kind="local_reorder")
    rng = np.random.default_rng(0)
    for _ in range(20):
        src = rng.integers(0, 8, size=rng.integers(1, 9)).tolist()
        assert oracle_target(s, oracle_target(s, src)) == src


# -----------------------------------------------------------------------------
# generation
# -----------------------------------------------------------------------------


def test_exact_embeddings_at_zero_noise_u1():
    s = spec(upsample=1, noise_std=0.0)
    table = render_table(s)
    ex = make_example(s, 0)
    np.testing.assert_array_equal(ex.utterance.frames, table[ex.source])


def test_same_seed_identical_datasets():
    a = generate(spec(noise_std=0.3), 5)
    b = generate(spec(noise_std=0.3), 5)
    for x, y in zip(a, b):
        np.testing.assert_array_equal(x.utterance.frames, y.utterance.frames)
        assert x.source == y.source


def test_different_seed_differs():
    a = generate(spec(), 3)
    b = generate(spec(seed=9), 3)
    assert any(x.source != y.source for x, y in zip(a, b))


def test_frame_count_law():
    s = spec(upsample=7)
    for ex in generate(s, 5):
        assert ex.utterance.frames.shape[0] == 7 * len(ex.source)


def test_rendering_invertible_at_zero_noise():
    s = spec(upsample=5, noise_std=0.0)
    for ex in generate(s, 5):
        assert nearest_tokens(s, ex.utterance.frames) == ex.source


def test_prompt_layout_and_token_space():
    s = spec(kind="shift_vocab")
    ex = make_example(s, 0)
    assert ex.prompt.context == [data_mod.task_tag_id(8, "shift_vocab")]
    assert ex.prompt.boundary == 1
    assert ex.prompt.targets == oracle_target(s, ex.source)
    assert data_mod.model_vocab_size(8) == 8 + 1 + 3
    assert data_mod.eos_id(8) == 8
    assert data_mod.task_tag_id(8, "copy") == 9


def test_invalid_specs_rejected():
    with pytest.raises(ValueError):
        SynthTaskSpec(kind="asr")
    with pytest.raises(ValueError):
        SynthTaskSpec(vocab_size=2)
    with pytest.raises(ValueError):
        SynthTaskSpec(seq_len=(5, 3))
    with pytest.raises(ValueError):
        generate(spec(), 0)


# -----------------------------------------------------------------------------
# dataset files
# -----------------------------------------------------------------------------


def test_dataset_round_trip_regenerates_frames(tmp_path):
    s = spec(noise_std=0.2)
    examples = generate(s, 6)
    path = tmp_path / "data.txt"
    save_dataset(path, s, examples)
    spec2, loaded = load_dataset(path)
    assert spec2 == s
    for a, b in zip(examples, loaded):
        assert a.source == b.source
        assert a.prompt.targets == b.prompt.targets
        np.testing.assert_array_equal(a.utterance.frames, b.utterance.frames)


def test_dataset_digest_deterministic(tmp_path):
    s = spec()
    p1, p2 = tmp_path / "a.txt", tmp_path / "b.txt"
    save_dataset(p1, s, generate(s, 4))
    save_dataset(p2, s, generate(s, 4))
    assert file_digest(p1) == file_digest(p2)


def test_dataset_rejects_corrupt_targets(tmp_path):
    s = spec()
    path = tmp_path / "data.txt"
    save_dataset(path, s, generate(s, 2))
    lines = path.read_text().splitlines()
    idx, src, tgt = lines[1].split("\t")
    bad_target = " ".join(["7"] * (len(tgt.split()) + 2))
    lines[1] = f"{idx}\t{src}\t{bad_target}"
    path.write_text("\n".join(lines) + "\n")
    with pytest.raises(ValueError, match="oracle"):
        load_dataset(path)
