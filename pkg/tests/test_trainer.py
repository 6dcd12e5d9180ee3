import math

import numpy as np
import pytest

from ctd import synthetic
from ctd.encoder import EncoderConfig
from ctd.head import CTDModel, correct_batch
from ctd.text import CorrectionPair, build_vocab
from ctd.trainer import (
    AdamW, CheckpointError, EarlyStopping, NonFiniteGradientError, ScheduleConfig, TrainConfig, checkpoint_bytes,
    clip_grad_norm, decays, load_checkpoint, lr_at, save_checkpoint, train_stage, write_history,
)


def test_schedule_anchors():
    cfg = ScheduleConfig(total_steps=1000)
    w = cfg.warmup_steps
    assert w == 50
    assert lr_at(0, cfg) == 1e-7
    assert lr_at(w, cfg) == 5e-4
    assert abs(lr_at(1000, cfg) - 1e-5) / 1e-5 < 1e-9
    # linear branch evaluated at w agrees with the decay branch
    assert cfg.floor_lr + (cfg.peak_lr - cfg.floor_lr) * w / w == lr_at(w, cfg)
    assert abs(lr_at(w - 1, cfg) - lr_at(w, cfg)) < (5e-4 - 1e-7) / w + 1e-15
    with pytest.raises(ValueError):
        lr_at(1001, cfg)


def test_schedule_is_monotone_on_each_side():
    cfg = ScheduleConfig(total_steps=333, peak_lr=2e-3)
    lrs = [lr_at(s, cfg) for s in range(334)]
    w = cfg.warmup_steps
    assert all(a < b for a, b in zip(lrs[:w], lrs[1:w + 1]))
    assert all(a > b for a, b in zip(lrs[w:], lrs[w + 1:]))


def test_schedule_validation():
    with pytest.raises(ValueError):
        ScheduleConfig(total_steps=10, peak_lr=1e-8)
    with pytest.raises(ValueError):
        ScheduleConfig(total_steps=10, warmup_frac=0.0)


def test_adamw_single_step_by_hand():
    b1, b2, eps, lr, g = 0.9, 0.98, 1e-9, 0.1, 0.5
    m = (1 - b1) * g
    v = (1 - b2) * g * g
    want = 1.0 - lr * (m / (1 - b1)) / (math.sqrt(v / (1 - b2)) + eps)
    p = {"w": np.array([1.0])}
    AdamW(weight_decay=0.0).step(p, {"w": np.array([g])}, lr)
    assert abs(p["w"][0] - want) < 1e-7
    p = {"w": np.array([1.0])}
    AdamW(weight_decay=0.01).step(p, {"w": np.array([g])}, lr)
    assert abs(p["w"][0] - (want - lr * 0.01)) < 1e-7


def test_adamw_zero_gradient_cases():
    p = {"w": np.array([1.5, -2.0]), "x.b": np.array([3.0])}
    AdamW(weight_decay=0.0).step(p, {"w": np.zeros(2), "x.b": np.zeros(1)}, 1e-2)
    np.testing.assert_array_equal(p["w"], [1.5, -2.0])
    AdamW(weight_decay=0.1).step(p, {"w": np.zeros(2), "x.b": np.zeros(1)}, 1e-2)
    np.testing.assert_allclose(p["w"], np.array([1.5, -2.0]) * (1 - 1e-3), rtol=1e-12)
    np.testing.assert_array_equal(p["x.b"], [3.0])


def test_decay_excludes_bias_and_norm():
    assert decays("layer0.attn.q.w") and decays("emb.tok")
    assert not decays("layer0.attn.q.b") and not decays("emb.ln.g") and not decays("layer1.ff.ln.b")


def test_adamw_rejects_nan():
    p = {"w": np.ones(2)}
    with pytest.raises(NonFiniteGradientError, match="'w'"):
        AdamW().step(p, {"w": np.array([1.0, np.nan])}, 1e-3)
    np.testing.assert_array_equal(p["w"], [1.0, 1.0])


def test_adamw_decreases_quadratic():
    p = {"x": np.array([2.0])}
    opt = AdamW(weight_decay=0.0)
    before = p["x"][0] ** 2
    opt.step(p, {"x": 2 * p["x"]}, 1e-3)
    assert p["x"][0] ** 2 < before


def test_clip_grad_norm():
    g = {"a": np.array([3.0]), "b": np.array([4.0])}
    assert clip_grad_norm(g, 1.0) == pytest.approx(5.0)
    assert math.hypot(g["a"][0], g["b"][0]) == pytest.approx(1.0, abs=1e-6)


def test_early_stopping_patience_two():
    stop = EarlyStopping(patience=2, higher_is_better=True)
    metrics = [0.9, 0.8, 0.7, 0.6, 0.5]
    epochs_run = 0
    for epoch, m in enumerate(metrics, 1):
        stop.update(m, epoch)
        epochs_run = epoch
        if stop.should_stop:
            break
    assert epochs_run == 3 and stop.best_epoch == 1


def _tiny_setup(seed=0):
    sents = synthetic.generate_corpus(40, seed=seed)
    rng = np.random.default_rng(seed)
    from ctd.text import inject_errors

    pairs = [inject_errors(s, synthetic.confusion_model(0.2), rng) for s in sents]
    vocab = build_vocab(sents + [p.source for p in pairs])
    cfg = EncoderConfig(vocab_size=len(vocab), d=16, layers=1, heads=2, d_ff=32, max_len=32)
    return pairs, vocab, cfg


def test_train_stage_stops_on_worsening_metric():
    pairs, vocab, cfg = _tiny_setup()
    model = CTDModel.init(cfg, vocab, "ctd", np.random.default_rng(0))
    scores = iter([0.5, 0.4, 0.3, 0.2, 0.1, 0.0])
    res = train_stage(model, pairs[:32], pairs[32:], TrainConfig(max_epochs=6, patience=2, batch_size=16),
                      dev_metric=lambda m, e: next(scores))
    assert res.stopped_epoch == 3 and res.best_epoch == 1
    assert res.epoch_metrics == [0.5, 0.4, 0.3]
    # the returned model is the epoch-1 snapshot
    assert max(res.epoch_metrics) == res.best_metric


def test_training_is_deterministic(tmp_path):
    pairs, vocab, cfg = _tiny_setup(1)
    runs = []
    for _ in range(2):
        m = CTDModel.init(cfg, vocab, "ctd", np.random.default_rng(3))
        r = train_stage(m, pairs[:32], pairs[32:], TrainConfig(stage="mlm", max_epochs=1, batch_size=8, seed=5))
        r = train_stage(r.model, pairs[:32], pairs[32:], TrainConfig(max_epochs=2, batch_size=8, seed=5))
        runs.append(r)
    assert [h["loss"] for h in runs[0].history] == [h["loss"] for h in runs[1].history]
    assert checkpoint_bytes(runs[0].model) == checkpoint_bytes(runs[1].model)
    write_history(runs[0].history, tmp_path / "h.csv")
    rows = (tmp_path / "h.csv").read_text().splitlines()
    assert rows[0] == "step,stage,epoch,lr,loss,loss_sum,tokens,dev_metric"
    assert len(rows) == 1 + len(runs[0].history)


def test_history_rows_and_schedule():
    pairs, vocab, cfg = _tiny_setup(2)
    m = CTDModel.init(cfg, vocab, "ctd", np.random.default_rng(0))
    r = train_stage(m, pairs[:32], pairs[32:], TrainConfig(max_epochs=2, batch_size=8, patience=5))
    steps = [h["step"] for h in r.history]
    assert steps == list(range(8))
    assert r.history[0]["lr"] == 1e-7
    assert all(h["loss_sum"] == pytest.approx(h["loss"] * h["tokens"]) for h in r.history)
    assert r.history[3]["dev_metric"] != "" and r.history[2]["dev_metric"] == ""


@pytest.fixture
def saved_model(tmp_path):
    pairs, vocab, cfg = _tiny_setup(3)
    m = CTDModel.init(cfg, vocab, "ctd", np.random.default_rng(0))
    return m, save_checkpoint(m, tmp_path / "m.ckpt"), pairs


def test_checkpoint_round_trip_is_byte_exact(saved_model, tmp_path):
    m, path, pairs = saved_model
    loaded = load_checkpoint(path)
    again = save_checkpoint(loaded, tmp_path / "again.ckpt")
    assert path.read_bytes() == again.read_bytes()
    assert path.read_bytes()[:8] == b"CTDCKPT1"
    qs = [p.source for p in pairs[:5]]
    assert [c.to_json() for c in correct_batch(qs, m)] == [c.to_json() for c in correct_batch(qs, loaded)]


def test_checkpoint_mismatches(saved_model, tmp_path):
    m, path, _ = saved_model
    with pytest.raises(CheckpointError, match="vocabulary"):
        load_checkpoint(path, vocab=build_vocab(["xyz"]))
    with pytest.raises(CheckpointError, match="config"):
        load_checkpoint(path, config=EncoderConfig(vocab_size=m.config.vocab_size, d=32))
    data = bytearray(path.read_bytes())
    data[20:30] = b"\xff" * 10
    (tmp_path / "bad.ckpt").write_bytes(bytes(data))
    with pytest.raises(CheckpointError, match="corrupt"):
        load_checkpoint(tmp_path / "bad.ckpt")
    (tmp_path / "short.ckpt").write_bytes(path.read_bytes()[:-16])
    with pytest.raises(CheckpointError, match="truncated"):
        load_checkpoint(tmp_path / "short.ckpt")
    (tmp_path / "junk.ckpt").write_bytes(b"hello")
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "junk.ckpt")


def test_train_rejects_bad_config():
    with pytest.raises(ValueError):
        TrainConfig(stage="rl")
    with pytest.raises(ValueError):
        TrainConfig(patience=0)


def test_clean_pairs_still_train():
    pairs = [CorrectionPair("ABCDEF", "ABCDEF")] * 4
    vocab = build_vocab(["ABCDEF"])
    cfg = EncoderConfig(vocab_size=len(vocab), d=8, layers=1, heads=2, d_ff=8, max_len=10)
    m = CTDModel.init(cfg, vocab, "base", np.random.default_rng(0))
    r = train_stage(m, pairs, pairs, TrainConfig(max_epochs=1, batch_size=4))
    assert r.history[0]["tokens"] == 20
