import io

import numpy as np
import pytest

from entnorm.encoder import (
    UNK,
    CharVocab,
    EncoderConfig,
    EncoderModel,
    IntegrityError,
    ModelFormatError,
    backward,
    build_vocab,
    forward,
    init_bound,
    init_params,
    load_model,
    model_fingerprint,
    model_from_bytes,
    model_to_bytes,
    new_model,
    numerical_gradient,
    param_shapes,
    parameter_count,
    save_model,
)
from entnorm.losses import cosine_distance
from entnorm.refset import Entity, ReferenceSet

REF = ReferenceSet([Entity("A", ("abc d", "ab")), Entity("B", ("xyz", "x-y"))])
TINY = EncoderConfig(char_embed_dim=3, hidden_dim=3, num_recurrent_layers=2, output_dim=4, max_sequence_length=10)


def rel_error(a, n, floor=1e-7):
    return float(np.max(np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)))


def max_rel_error(g, n):
    return max(rel_error(g[k], n[k]) for k in g)


def test_vocab_sorted_with_unk():
    r = ReferenceSet.from_pairs([("1", "bc"), ("2", "ab")])
    v = build_vocab(r, 8)
    assert len(v) == 4
    assert v.unk_index == 0 and v.index(UNK) == 0
    assert [v.index(c) for c in "abc"] == [1, 2, 3]
    assert v == build_vocab(r, 8)
    assert v.encode("aZ") == [v.index("a"), 0]


def test_param_count_closed_form():
    cfg = EncoderConfig(char_embed_dim=2, hidden_dim=3, num_recurrent_layers=1, output_dim=2, max_sequence_length=5)
    vocab = CharVocab("abc", 5)
    # emb 4*2, W 2*2*12, U 2*3*12, b 2*12, dense 6*2 + 2
    assert parameter_count(init_params(cfg, vocab, 0)) == 8 + 48 + 72 + 24 + 12 + 2
    assert set(param_shapes(cfg, 4)) == set(init_params(cfg, vocab, 0))


def test_init_reproducible_and_bounded():
    vocab = build_vocab(REF, 10)
    a = init_params(TINY, vocab, 7)
    b = init_params(TINY, vocab, 7)
    c = init_params(TINY, vocab, 8)
    assert all(np.array_equal(a[k], b[k]) for k in a)
    assert any(not np.array_equal(a[k], c[k]) for k in a)
    H = TINY.hidden_dim
    for key, arr in a.items():
        if key == "dense.b":
            np.testing.assert_array_equal(arr, 0.0)
        elif key.endswith(".b"):
            np.testing.assert_array_equal(arr[:, H:2 * H], 1.0)
            np.testing.assert_array_equal(arr[:, :H], 0.0)
        else:
            assert np.max(np.abs(arr)) <= init_bound(key, arr.shape)


def test_forward_shape_purity_truncation():
    m = new_model(REF, TINY, seed=1)
    for n in range(1, 11):
        v = m.embed_one("a" * n)
        assert v.shape == (4,)
        assert np.all(np.isfinite(v))
    np.testing.assert_array_equal(m.embed_one("abc d"), m.embed_one("abc d"))
    long = "abcxyz-d" * 4
    np.testing.assert_array_equal(m.embed_one(long), m.embed_one(long[:10]))
    # unseen characters fall back to the unknown token
    np.testing.assert_array_equal(m.embed_one("a#"), m.embed_one("a%"))
    with pytest.raises(ValueError):
        m.embed_one("")


@pytest.mark.parametrize("pooling", ["last", "mean"])
def test_batch_embedding_matches_single(pooling):
    cfg = EncoderConfig(3, 4, 2, 5, 10, pooling)
    m = new_model(REF, cfg, seed=2)
    names = ["ab", "xyz", "abc d", "x", "x-y", "ab"]
    batch = m.embed(names, batch_size=4)
    for name, row in zip(names, batch):
        np.testing.assert_allclose(row, forward(m.params, m.vocab, name, cfg), rtol=0, atol=1e-13)


def test_tower_symmetry():
    m = new_model(REF, TINY, seed=3)
    ga, la = backward(m.params, m.vocab, ("abc d", "xyz", 0.4), 1.0, TINY)
    gb, lb = backward(m.params, m.vocab, ("xyz", "abc d", 0.4), 1.0, TINY)
    assert la == lb
    for k in ga:
        np.testing.assert_allclose(ga[k], gb[k], rtol=1e-12, atol=1e-15)
    u, v = m.embed_one("abc d"), m.embed_one("xyz")
    assert cosine_distance(u, v) == cosine_distance(v, u)


@pytest.mark.parametrize("pooling", ["last", "mean"])
@pytest.mark.parametrize("seed", [0, 1])
@pytest.mark.parametrize("y", [1.0, 0.0, 0.5])
def test_gradient_matches_finite_differences(pooling, seed, y):
    cfg = EncoderConfig(3, 3, 2, 4, 10, pooling)
    m = new_model(REF, cfg, seed=seed)
    pair = ("abc d", "x-y", y)
    g, _ = backward(m.params, m.vocab, pair, 1.0, cfg)
    n = numerical_gradient(m.params, m.vocab, pair, 1.0, 1e-5, cfg)
    assert max_rel_error(g, n) < 1e-4


def test_outside_margin_gradient_is_zero():
    m = new_model(REF, TINY, seed=4)
    delta = cosine_distance(m.embed_one("ab"), m.embed_one("xyz"))
    margin = delta / 2
    g, loss = backward(m.params, m.vocab, ("ab", "xyz", 0.0), margin, TINY)
    assert loss == 0.0
    assert all(not np.any(v) for v in g.values())


def test_same_string_pair_has_no_gradient():
    m = new_model(REF, TINY, seed=4)
    g, loss = backward(m.params, m.vocab, ("ab", "ab", 1.0), 1.0, TINY)
    assert loss < 1e-30
    assert max(np.max(np.abs(v)) for v in g.values()) < 1e-12


def test_numerical_gradient_on_quadratic():
    params = {"w": np.array([1.0, -2.0, 0.5]), "b": np.array([[3.0]])}

    def loss(p):
        return float(np.sum(p["w"] ** 2) + 2.0 * p["b"][0, 0] ** 2)

    g = numerical_gradient(params, None, None, loss_fn=loss)
    np.testing.assert_allclose(g["w"], 2 * params["w"], rtol=1e-9)
    np.testing.assert_allclose(g["b"], 4 * params["b"], rtol=1e-9)


def test_finite_difference_second_order():
    m = new_model(REF, TINY, seed=5)
    pair = ("abc d", "xyz", 0.5)
    g, _ = backward(m.params, m.vocab, pair, 1.0, TINY)
    errs = []
    for eps in (4e-2, 2e-2):
        n = numerical_gradient(m.params, m.vocab, pair, 1.0, eps, TINY)
        errs.append(max(np.max(np.abs(g[k] - n[k])) for k in g))
    assert 2.5 < errs[0] / errs[1] < 6.0


def test_checkpoint_round_trip():
    m = new_model(REF, TINY, seed=6)
    buf = io.BytesIO()
    fp = save_model(m, buf)
    buf.seek(0)
    again = load_model(buf)
    assert again == m
    assert model_fingerprint(again) == fp
    np.testing.assert_array_equal(again.embed_one("x-y"), m.embed_one("x-y"))


def test_checkpoint_errors():
    m = new_model(REF, TINY, seed=6)
    data = model_to_bytes(m)
    with pytest.raises(ModelFormatError):
        model_from_bytes(data[:-5])
    with pytest.raises(ModelFormatError):
        model_from_bytes(data[:20])
    with pytest.raises(ModelFormatError):
        model_from_bytes(b"XXXX" + data[4:])
    bad_version = data[:4] + (99).to_bytes(4, "little") + data[8:]
    with pytest.raises(ModelFormatError, match="version"):
        model_from_bytes(bad_version)
    flipped = bytearray(data)
    flipped[-40] ^= 0xFF
    with pytest.raises(IntegrityError):
        model_from_bytes(bytes(flipped))


def test_models_compare_bitwise():
    m = new_model(REF, TINY, seed=6)
    other = m.copy()
    assert other == m
    other.params["dense.b"][0] += 1e-300
    assert other != m
    assert isinstance(m, EncoderModel)
