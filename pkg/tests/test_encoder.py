import math

import numpy as np
import pytest
from scipy.special import erf

from ctd import encoder as enc
from ctd import numeric as nm
from ctd.encoder import EncoderConfig
from ctd.numeric import Tensor
from ctd.text import MASK_ID, N_SPECIAL, PAD_ID, build_vocab, encode


def tensors(params, grad=False):
    return {k: Tensor(v, requires_grad=grad) for k, v in params.items()}


def small_cfg(**kw):
    base = dict(vocab_size=12, d=8, layers=2, heads=2, d_ff=16, max_len=10, dropout=0.1)
    base.update(kw)
    return EncoderConfig(**base)


def test_config_validation_and_presets():
    with pytest.raises(ValueError):
        EncoderConfig(vocab_size=10, d=10, heads=4)
    full = enc.preset_config("paper")
    assert (full.d, full.layers, full.heads, full.vocab_size) == (768, 12, 12, 21128)
    toy = enc.preset_config("toy", 40)
    assert (toy.d, toy.layers) == (64, 2)
    assert EncoderConfig.from_dict(toy.to_dict()) == toy


def test_truncated_normal_bounds():
    x = enc.truncated_normal(np.random.default_rng(0), (20000,))
    assert np.abs(x).max() <= 0.04 + 1e-7
    assert 0.015 < x.std() < 0.02


def test_embed_is_token_plus_position():
    cfg = small_cfg()
    p = enc.init_encoder_params(cfg, np.random.default_rng(1))
    ids = np.array([[2, 7, 3]])
    v = enc.embed(tensors(p), ids, cfg).data
    np.testing.assert_array_equal(v[0, 1], p["emb.tok"][7] + p["emb.pos"][1])
    bare = enc.embed(tensors(p), ids, small_cfg(positional_in_input_repr=False)).data
    np.testing.assert_array_equal(bare[0, 1], p["emb.tok"][7])


def test_embed_rejects_over_length():
    cfg = small_cfg(max_len=4)
    p = tensors(enc.init_encoder_params(cfg, np.random.default_rng(0)))
    with pytest.raises(nm.ShapeError):
        enc.embed(p, np.zeros((1, 5), dtype=np.int64), cfg)


def test_permutation_equivariance_without_positions():
    cfg = small_cfg(layers=1)
    p = enc.init_encoder_params(cfg, np.random.default_rng(2))
    p["emb.pos"][:] = 0.0
    ids = np.array([[5, 6, 7, 8, 9]])
    perm = np.array([3, 0, 4, 1, 2])
    mask = np.ones_like(ids, dtype=bool)
    a = enc.forward(tensors(p), ids, mask, cfg).v_context.data
    b = enc.forward(tensors(p), ids[:, perm], mask, cfg).v_context.data
    np.testing.assert_allclose(b[0], a[0, perm], atol=1e-6)


def test_padding_gets_zero_attention_and_no_influence():
    cfg = small_cfg()
    p = tensors(enc.init_encoder_params(cfg, np.random.default_rng(3)))
    ids = np.array([[2, 5, 6, 3, 0, 0]])
    mask = ids != PAD_ID
    out = enc.forward(p, ids, mask, cfg, keep_attention=True)
    for attn in out.attentions:
        assert np.all(attn[..., 4:] == 0.0)
    other = ids.copy()
    other[0, 4:] = [9, 10]
    out2 = enc.forward(p, other, mask, cfg)
    np.testing.assert_array_equal(out.v_context.data[0, :4], out2.v_context.data[0, :4])


def _gelu(x):
    return 0.5 * x * (1 + erf(x / math.sqrt(2)))


def _ln(x, g, b, eps=1e-12):
    mu = x.mean(-1, keepdims=True)
    var = ((x - mu) ** 2).mean(-1, keepdims=True)
    return g * (x - mu) / np.sqrt(var + eps) + b


def test_single_layer_matches_hand_computation():
    cfg = EncoderConfig(vocab_size=6, d=4, layers=1, heads=1, d_ff=8, max_len=2, dropout=0.0)
    rng = np.random.default_rng(4)
    p = {k: (rng.standard_normal(v.shape) * 0.5).astype(np.float64)
         for k, v in enc.init_encoder_params(cfg, rng).items()}
    ids = np.array([[2, 5]])
    got = enc.forward(tensors(p), ids, np.ones((1, 2), bool), cfg).v_context.data[0]

    x = p["emb.tok"][[2, 5]] + p["emb.pos"][[0, 1]]
    x = _ln(x, p["emb.ln.g"], p["emb.ln.b"])
    q = x @ p["layer0.attn.q.w"].T + p["layer0.attn.q.b"]
    k = x @ p["layer0.attn.k.w"].T + p["layer0.attn.k.b"]
    v = x @ p["layer0.attn.v.w"].T + p["layer0.attn.v.b"]
    s = q @ k.T / 2.0
    a = np.exp(s - s.max(1, keepdims=True))
    a /= a.sum(1, keepdims=True)
    h = (a @ v) @ p["layer0.attn.o.w"].T + p["layer0.attn.o.b"]
    x = _ln(x + h, p["layer0.attn.ln.g"], p["layer0.attn.ln.b"])
    f = _gelu(x @ p["layer0.ff.in.w"].T + p["layer0.ff.in.b"]) @ p["layer0.ff.out.w"].T + p["layer0.ff.out.b"]
    want = _ln(x + f, p["layer0.ff.ln.g"], p["layer0.ff.ln.b"])
    np.testing.assert_allclose(got, want, atol=1e-5)


def test_dropout_only_with_rng():
    cfg = small_cfg()
    p = tensors(enc.init_encoder_params(cfg, np.random.default_rng(5)))
    ids = np.array([[2, 5, 6, 7, 3]])
    mask = np.ones_like(ids, bool)
    a = enc.forward(p, ids, mask, cfg).v_context.data
    b = enc.forward(p, ids, mask, cfg).v_context.data
    c = enc.forward(p, ids, mask, cfg, rng=np.random.default_rng(0)).v_context.data
    assert a.tobytes() == b.tobytes()
    assert not np.allclose(a, c)


def test_every_position_receives_gradient():
    cfg = small_cfg()
    p = tensors(enc.init_encoder_params(cfg, np.random.default_rng(6)))
    ids = np.array([[2, 5, 6, 7, 3, 0]])
    v_in = enc.embed(p, ids, cfg)
    v_in = Tensor(v_in.data, requires_grad=True)
    out = enc.encode(p, v_in, ids != PAD_ID, cfg)
    nm.sum_(out.v_context).backward()
    norms = np.linalg.norm(v_in.grad[0], axis=-1)
    assert np.all(norms[:5] > 0)


def test_mlm_mask_never_touches_specials():
    ids = np.array([2, 5, 6, 7, 3, 0, 0])
    corrupted, targets = enc.mlm_mask(ids, 1.0, np.random.default_rng(0), vocab_size=10)
    assert set(targets) == {1, 2, 3}
    assert all(targets[i] == ids[i] for i in targets)
    np.testing.assert_array_equal(corrupted[[0, 4, 5, 6]], ids[[0, 4, 5, 6]])
    with pytest.raises(ValueError):
        enc.mlm_mask(ids, 0.0, np.random.default_rng(0), 10)


def test_mlm_mask_rates_over_many_tokens():
    n = 100_000
    ids = np.concatenate([[2], np.full(n, 7), [3]])
    corrupted, targets = enc.mlm_mask(ids, 0.15, np.random.default_rng(1), vocab_size=1000)
    k = len(targets)
    sd = math.sqrt(n * 0.15 * 0.85)
    assert abs(k - 0.15 * n) < 3 * sd
    chosen = np.array(sorted(targets))
    masked = np.mean(corrupted[chosen] == MASK_ID)
    kept = np.mean(corrupted[chosen] == 7)
    assert abs(masked - 0.8) < 0.015
    # kept includes the ~0.1% of random draws that land on 7 again
    assert abs(kept - 0.1) < 0.01


def test_untrained_mlm_loss_near_log_vocab():
    V = 200
    cfg = EncoderConfig(vocab_size=V, d=16, layers=1, heads=2, d_ff=32, max_len=20)
    p = {**enc.init_encoder_params(cfg, np.random.default_rng(7)), **enc.init_mlm_params(cfg, np.random.default_rng(8))}
    ids = np.random.default_rng(9).integers(N_SPECIAL, V, size=(4, 20))
    t = tensors(p)
    out = enc.forward(t, ids, np.ones_like(ids, bool), cfg)
    loss = enc.mlm_loss(t, out.v_context, np.arange(80), ids.reshape(-1)).item()
    assert abs(loss - math.log(V)) < 0.1 * math.log(V)


def test_mlm_loss_ignores_unselected_targets():
    cfg = small_cfg()
    p = tensors({**enc.init_encoder_params(cfg, np.random.default_rng(0)), **enc.init_mlm_params(cfg, np.random.default_rng(1))})
    ids = np.array([[2, 5, 6, 7, 3]])
    out = enc.forward(p, ids, np.ones_like(ids, bool), cfg)
    a = enc.mlm_loss(p, out.v_context, [1, 3], [5, 7]).item()
    b = enc.mlm_loss(p, out.v_context, [1, 3], [5, 7]).item()
    assert a == b
    assert enc.mlm_loss(p, out.v_context, [], []).item() == 0.0


def test_mlm_overfits_a_few_sentences():
    from ctd.trainer import AdamW, clip_grad_norm

    sents = ["今天老师在学校写作业", "医生在医院看病人", "妈妈去超市买水果", "农民在田里种小麦",
             "球员在球场踢足球", "司机在车站等班车", "学生复习功课", "护士检查血压"]
    vocab = build_vocab(sents)
    cfg = enc.preset_config("toy", len(vocab), dropout=0.0)
    rng = np.random.default_rng(0)
    params = {**enc.init_encoder_params(cfg, rng), **enc.init_mlm_params(cfg, rng)}
    ids, mask = enc.pad_batch([encode(s, vocab) for s in sents])
    # every content position masked at once: the model must memorize by position
    pos = np.flatnonzero(ids.reshape(-1) >= N_SPECIAL)
    tgt = ids.reshape(-1)[pos]
    corrupted = ids.copy().reshape(-1)
    corrupted[pos[::2]] = MASK_ID
    corrupted = corrupted.reshape(ids.shape)
    opt = AdamW(weight_decay=0.0)
    for _ in range(300):
        t = tensors(params, grad=True)
        out = enc.forward(t, corrupted, mask, cfg)
        loss = enc.mlm_loss(t, out.v_context, pos, tgt)
        loss.backward()
        grads = {k: v.grad for k, v in t.items() if v.grad is not None}
        clip_grad_norm(grads, 1.0)
        opt.step(params, grads, 3e-3)
    assert loss.item() < 0.05


def test_encoder_gradients_match_finite_differences():
    cfg = EncoderConfig(vocab_size=10, d=8, layers=1, heads=2, d_ff=8, max_len=5, dropout=0.0)
    rng = np.random.default_rng(10)
    p = {k: v.astype(np.float64) for k, v in enc.init_encoder_params(cfg, rng).items()}
    for k in p:
        p[k] = p[k] + 0.3 * rng.standard_normal(p[k].shape)
    ids = np.array([[2, 6, 7, 3, 0]])
    w = rng.standard_normal((1, 5, 8))

    def f(t):
        return nm.sum_(enc.forward(t, ids, ids != PAD_ID, cfg).v_context * w)

    # attn.k.b has an exactly-zero gradient (softmax shift invariance); a
    # smaller h lets rounding noise dominate its relative error
    report = nm.finite_diff_check(f, p, h=1e-3)
    assert report.passed, report.table()
