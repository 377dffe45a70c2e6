from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fmexpert import tensor as T
from fmexpert.encoder import (N_TIME_BUCKETS, ContractError, EncoderConfig, ItemFeatures, SequenceBatch,
                              age_bucket, build_unified_sequence, embed_batch, embed_history_item,
                              embed_target_item, encode, encode_batch, hash_index, init_encoder, run_layers)
from fmexpert.tensor import ParamSet, Tensor

from conftest import grad_rel_error, project, random_history, random_targets, tiny_encoder


def weights(cfg: EncoderConfig, seed: int = 0) -> ParamSet:
    return ParamSet(init_encoder(cfg, np.random.default_rng(seed)))


def _silu(x):
    return x / (1.0 + np.exp(-x))


def _ln(x, eps=1e-5):
    mu = x.mean(axis=1, keepdims=True)
    return (x - mu) / np.sqrt(((x - mu) ** 2).mean(axis=1, keepdims=True) + eps)


def oracle_embed(feats, w, cfg, with_action):
    """Straight-line numpy rendering of f(Emb_p, Emb_c) (+ Emb_a)."""
    p = cfg.prefix
    item = w.array(f"{p}.emb.item")[hash_index([f.item_id for f in feats], cfg.item_buckets)]
    ctx_key = np.array([f.surface_id * N_TIME_BUCKETS + f.time_bucket for f in feats])
    ctx = w.array(f"{p}.emb.ctx")[hash_index(ctx_key, cfg.ctx_buckets, salt=1)]
    x = np.concatenate([item, ctx], axis=1)
    h = _silu(x @ w.array(f"{p}.f.w1") + w.array(f"{p}.f.b1"))
    out = h @ w.array(f"{p}.f.w2") + w.array(f"{p}.f.b2")
    if with_action:
        out = out + w.array(f"{p}.emb.action")[[f.action for f in feats]]
    return out


def test_hash_index_range_and_determinism():
    keys = np.arange(10_000)
    a = hash_index(keys, 97)
    assert a.min() >= 0 and a.max() < 97
    assert np.array_equal(a, hash_index(keys, 97))
    assert not np.array_equal(a, hash_index(keys, 97, salt=3))
    # roughly uniform occupancy
    assert np.bincount(a, minlength=97).min() > 50


def test_age_bucket():
    b = age_bucket([0.0, 1.0, 600.0, 3600.0, 86400.0, 1e12])
    assert b[0] == 0 and np.all(np.diff(b) >= 0) and b[-1] == N_TIME_BUCKETS - 1


def test_history_embedding_matches_oracle(rng):
    cfg = tiny_encoder()
    w = weights(cfg)
    hist = random_history(rng, 6)
    got = np.concatenate([embed_history_item(f, w, cfg).data for f in hist])
    want = oracle_embed(hist, w, cfg, with_action=True)
    np.testing.assert_allclose(got, want, rtol=0, atol=1e-14)
    tg = random_targets(rng, 4)
    got = np.concatenate([embed_target_item(f, w, cfg).data for f in tg])
    np.testing.assert_allclose(got, oracle_embed(tg, w, cfg, with_action=False), rtol=0, atol=1e-14)


def test_zero_action_reduces_to_target_embedding(rng):
    cfg = tiny_encoder()
    w = weights(cfg)
    w.set_array("enc.emb.action", np.zeros_like(w.array("enc.emb.action")))
    f = ItemFeatures(7, 2, 3, 4)
    assert np.array_equal(embed_history_item(f, w, cfg).data,
                          embed_target_item(ItemFeatures(7, 2, 3), w, cfg).data)


def test_identity_f_is_concatenation_plus_action():
    cfg = tiny_encoder(f_identity=True, emb_dim=4)
    w = weights(cfg)
    f = ItemFeatures(11, 1, 5, 2)
    item = w.array("enc.emb.item")[hash_index([11], cfg.item_buckets)[0]]
    ctx = w.array("enc.emb.ctx")[hash_index([1 * N_TIME_BUCKETS + 5], cfg.ctx_buckets, salt=1)[0]]
    want = np.concatenate([item, ctx]) + w.array("enc.emb.action")[2]
    assert np.array_equal(embed_history_item(f, w, cfg).data[0], want)
    assert "enc.f.w1" not in w


def test_target_embedding_shares_f_and_is_deterministic():
    cfg = tiny_encoder()
    w = weights(cfg)
    t, h = ItemFeatures(3, 0), ItemFeatures(3, 0, 0, 1)
    t1, h1 = embed_target_item(t, w, cfg).data, embed_history_item(h, w, cfg).data
    assert np.array_equal(t1, embed_target_item(t, w, cfg).data)
    w.set_array("enc.f.w1", w.array("enc.f.w1") + 0.1)
    assert not np.array_equal(t1, embed_target_item(t, w, cfg).data)
    assert not np.array_equal(h1, embed_history_item(h, w, cfg).data)


def test_zero_tables_give_bias_only_constant(rng):
    cfg = tiny_encoder()
    w = weights(cfg)
    for n in ("enc.emb.item", "enc.emb.ctx"):
        w.set_array(n, np.zeros_like(w.array(n)))
    w.set_array("enc.f.b1", rng.normal(size=(1, cfg.hidden)))
    w.set_array("enc.f.b2", rng.normal(size=(1, cfg.d)))
    want = _silu(w.array("enc.f.b1")) @ w.array("enc.f.w2") + w.array("enc.f.b2")
    for f in random_targets(rng, 5):
        np.testing.assert_allclose(embed_target_item(f, w, cfg).data, want, rtol=0, atol=1e-15)


def test_contract_errors():
    cfg = tiny_encoder()
    w = weights(cfg)
    with pytest.raises(ContractError):
        embed_history_item(ItemFeatures(1, 0), w, cfg)
    with pytest.raises(ContractError):
        embed_target_item(ItemFeatures(1, 0, 0, 1), w, cfg)
    with pytest.raises(ContractError):
        build_unified_sequence([ItemFeatures(1, 0, 0, 1)], [], w, cfg)
    with pytest.raises(ContractError):
        build_unified_sequence([ItemFeatures(1, 0)], [ItemFeatures(2, 0)], w, cfg)
    with pytest.raises(ContractError):
        build_unified_sequence([], [ItemFeatures(2, 0, 0, 1)], w, cfg)


def test_unified_sequence_shapes_and_masks(rng):
    cfg = tiny_encoder()
    w = weights(cfg)
    seq = build_unified_sequence([], random_targets(rng, 1), w, cfg)
    assert len(seq) == 1 and seq.attention_mask.tolist() == [[True]]
    seq = build_unified_sequence(random_history(rng, 2), random_targets(rng, 2), w, cfg)
    m = seq.attention_mask.astype(int)
    assert m[2].tolist() == [1, 1, 1, 0] and m[3].tolist() == [1, 1, 0, 1]
    assert m[0].tolist() == [1, 0, 0, 0] and m[1].tolist() == [1, 1, 0, 0]


@settings(max_examples=25, deadline=None)
@given(n=st.integers(0, 9), m=st.integers(1, 6), seed=st.integers(0, 10_000))
def test_sequence_length_is_n_plus_m(n, m, seed):
    r = np.random.default_rng(seed)
    cfg = tiny_encoder(max_history=16)
    seq = build_unified_sequence(random_history(r, n), random_targets(r, m), weights(cfg), cfg)
    assert len(seq) == n + m and seq.positions.rows == n + m


def test_truncation_keeps_most_recent(rng):
    cfg = tiny_encoder(max_history=2)
    w = weights(cfg)
    hist = random_history(rng, 3)
    seq = build_unified_sequence(hist, random_targets(rng, 1), w, cfg)
    assert seq.n_history == 2
    want = np.concatenate([embed_history_item(f, w, cfg).data for f in hist[1:]])
    assert np.array_equal(seq.positions.data[:2], want)


def _encode(hist, targets, w, cfg):
    return encode(build_unified_sequence(hist, targets, w, cfg), w, cfg).data


@pytest.mark.parametrize("n", [0, 1, 3, 5])
def test_encode_agrees_with_batched_path(n, rng):
    cfg = tiny_encoder()
    w = weights(cfg)
    hist, tg = random_history(rng, n), random_targets(rng, 3)
    single = _encode(hist, tg, w, cfg)
    batch = SequenceBatch.from_features([random_history(rng, 4), hist], [random_targets(rng, 2), tg], cfg)
    out = encode_batch(batch, w, cfg).targets.data
    assert np.array_equal(single, out[2:])


@settings(max_examples=25, deadline=None)
@given(n=st.integers(0, 7), m=st.integers(1, 5), seed=st.integers(0, 10_000))
def test_candidate_independence(n, m, seed):
    r = np.random.default_rng(seed)
    cfg = tiny_encoder()
    w = weights(cfg, seed % 3)
    hist, tg = random_history(r, n), random_targets(r, m)
    full = _encode(hist, tg, w, cfg)
    for j in range(m):
        assert np.array_equal(_encode(hist, [tg[j]], w, cfg)[0], full[j])
    # extra unrelated target appended
    assert np.array_equal(_encode(hist, tg + random_targets(r, 1), w, cfg)[:m], full)
    # permutation equivariance
    perm = r.permutation(m)
    assert np.array_equal(_encode(hist, [tg[i] for i in perm], w, cfg), full[perm])


@settings(max_examples=20, deadline=None)
@given(n=st.integers(2, 5), seed=st.integers(0, 10_000))
def test_no_future_leakage(n, seed):
    r = np.random.default_rng(seed)
    cfg = tiny_encoder()
    w = weights(cfg)
    batch = SequenceBatch.from_features([random_history(r, n)], [random_targets(r, 2)], cfg)
    x = embed_batch(batch, w, cfg)
    base = run_layers(x, batch, w, cfg).data
    i = int(r.integers(1, n))
    z = x.data.copy()
    z[i] = 0.0
    changed = run_layers(Tensor(z), batch, w, cfg).data
    assert np.array_equal(changed[:i], base[:i])
    assert not np.array_equal(changed[i], base[i])


def test_single_layer_attention_trace(rng):
    cfg = EncoderConfig(d=4, n_layers=1, item_buckets=8, ctx_buckets=8, max_history=1)
    w = weights(cfg, 3)
    hist, tg = [ItemFeatures(1, 0, 2, 3)], [ItemFeatures(5, 1)]
    seq = build_unified_sequence(hist, tg, w, cfg)
    x = seq.positions.data
    h = _ln(x)
    q, k, v, u = (h @ w.array(f"enc.layer0.{m}") for m in ("wq", "wk", "wv", "wu"))
    s = np.array([q[1] @ k[0], q[1] @ k[1]]) / 2.0
    a = np.exp(s - s.max())
    a /= a.sum()
    att = a[0] * v[0] + a[1] * v[1]
    want = x[1] + (att * _silu(u[1])) @ w.array("enc.layer0.wo")
    np.testing.assert_allclose(encode(seq, w, cfg).data[0], want, rtol=0, atol=1e-13)


def test_encoder_gradients():
    cfg = tiny_encoder(d=6, n_layers=2, max_history=4)
    w = weights(cfg, 1)
    r = np.random.default_rng(5)
    batch = SequenceBatch.from_features([random_history(r, 3), random_history(r, 0), random_history(r, 6)],
                                        [random_targets(r, 2), random_targets(r, 3), random_targets(r, 1)], cfg)
    errs = grad_rel_error(lambda: project(encode_batch(batch, w, cfg).targets, 2), w)
    assert max(errs.values()) < 1e-5, errs
