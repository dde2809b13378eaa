import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tagleak.model import ConfigError, ModelConfig, ParameterStore, preset
from tagleak.autodiff import Tensor
from tagleak.weights import InitSpec, WeightFileError, init_weights, load_weights, make_rng, save_weights

TINY = preset("tiny", vocab_size=20)


def test_same_seed_same_store():
    a = init_weights(TINY, InitSpec("normal", seed=3))
    b = init_weights(TINY, InitSpec("normal", seed=3))
    c = init_weights(TINY, InitSpec("normal", seed=4))
    assert a.equals(b)
    assert not a.equals(c)


def test_normal_sample_mean():
    n = 100_000
    cfg = ModelConfig(hidden=8, vocab_size=n // 8, filter_size=8, max_seq_len=2)
    word = init_weights(cfg, InitSpec("normal", std=0.02, seed=0))["embeddings.word"].data
    assert word.size == n
    assert abs(word.mean()) <= 3 * 0.02 / np.sqrt(n)


def test_uniform_support():
    store = init_weights(preset("transformer", vocab_size=50), InitSpec("uniform", range=0.03, seed=1))
    for p in store:
        if not (p.name.endswith(".gain") or p.name.endswith(".bias")):
            assert np.abs(p.tensor.data).max() <= 0.03


def test_norms_and_biases_fixed():
    store = init_weights(TINY, InitSpec("normal", std=0.5, seed=2))
    for p in store:
        if p.name.endswith(".gain"):
            assert (p.tensor.data == 1).all()
        elif p.name.endswith(".bias"):
            assert (p.tensor.data == 0).all()


def test_philox_stream_is_the_documented_one():
    expected = np.random.Generator(np.random.Philox(np.random.SeedSequence(11))).normal(0, 0.02, size=(20, 8))
    got = init_weights(TINY, InitSpec("normal", std=0.02, seed=11))["embeddings.word"].data
    np.testing.assert_array_equal(got, expected)
    assert make_rng(11, 1).normal() != make_rng(11).normal()


def test_invalid_specs():
    for kw in (dict(kind="normal", std=0), dict(kind="uniform", range=-1), dict(kind="file"), dict(kind="beta")):
        with pytest.raises(ConfigError):
            InitSpec(**kw)


def test_round_trip(tmp_path):
    store = init_weights(TINY, InitSpec("normal", seed=5))
    path = tmp_path / "w.glkw"
    save_weights(store, path)
    assert load_weights(path, TINY).equals(store)
    assert init_weights(TINY, InitSpec("file", path=str(path))).equals(store)


def test_file_layout(tmp_path):
    store = ParameterStore()
    store.add("ab", 2, Tensor([[1.5, -2.0]]))
    path = tmp_path / "one.glkw"
    save_weights(store, path)
    raw = path.read_bytes()
    assert raw == (b"GLKW\x01" + struct.pack("<I", 2) + b"ab" + struct.pack("<IIQQ", 2, 2, 1, 2)
                   + struct.pack("<2d", 1.5, -2.0))


def test_truncated_file(tmp_path):
    path = tmp_path / "w.glkw"
    save_weights(init_weights(TINY, InitSpec(seed=0)), path)
    raw = path.read_bytes()
    for cut in (3, 5, 9, len(raw) - 1):
        path.write_bytes(raw[:cut])
        with pytest.raises(WeightFileError):
            load_weights(path)


def test_bad_magic_and_version(tmp_path):
    path = tmp_path / "w.glkw"
    path.write_bytes(b"NOPE\x01")
    with pytest.raises(WeightFileError, match="not a GLKW"):
        load_weights(path)
    path.write_bytes(b"GLKW\x02")
    with pytest.raises(WeightFileError, match="version"):
        load_weights(path)


def test_vocab_mismatch_names_tensor(tmp_path):
    path = tmp_path / "w.glkw"
    save_weights(init_weights(TINY, InitSpec(seed=0)), path)
    with pytest.raises(WeightFileError, match="embeddings.word"):
        load_weights(path, preset("tiny", vocab_size=21))


def test_non_finite_payload(tmp_path):
    path = tmp_path / "w.glkw"
    path.write_bytes(b"GLKW\x01" + struct.pack("<I", 1) + b"x" + struct.pack("<IIQ", 0, 1, 1) + struct.pack("<d", np.inf))
    with pytest.raises(WeightFileError, match="non-finite"):
        load_weights(path)


@settings(max_examples=25, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 3), st.lists(st.integers(1, 3), max_size=3)), min_size=1, max_size=5),
       st.integers(0, 2**32 - 1))
def test_round_trip_arbitrary_stores(tmp_path_factory, specs, seed):
    rng = np.random.default_rng(seed)
    store = ParameterStore()
    for i, (layer_step, shape) in enumerate(sorted(specs)):
        store.add(f"t{i}.é", layer_step, Tensor(rng.normal(size=tuple(shape)) * 10.0 ** rng.integers(-300, 300)))
    path = tmp_path_factory.mktemp("rt") / "w.glkw"
    save_weights(store, path)
    assert load_weights(path).equals(store)
