"""AdamW with warmup/exponential-decay schedule, MLM and CTD training stages, checkpoints."""
from __future__ import annotations

import csv
import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import encoder as enc
from . import numeric as nm
from .encoder import EncoderConfig
from .evaluator import evaluate_model
from .head import CTDModel, ctd_loss, make_batch, model_param_shapes
from .text import CorrectionPair, Vocabulary, encode

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ScheduleConfig:
    total_steps: int
    peak_lr: float = 5e-4
    floor_lr: float = 1e-7
    warmup_frac: float = 0.05
    final_lr: float = 1e-5

    def __post_init__(self):
        if not self.floor_lr < self.peak_lr:
            raise ValueError("floor_lr must be below peak_lr")
        if not 0.0 < self.warmup_frac < 1.0:
            raise ValueError("warmup_frac must lie in (0, 1)")
        if self.total_steps < 1:
            raise ValueError("total_steps must be positive")

    @property
    def warmup_steps(self) -> int:
        return max(1, math.ceil(self.warmup_frac * self.total_steps))


def lr_at(step: int, cfg: ScheduleConfig) -> float:
    """Linear rise floor -> peak over the warmup, then geometric decay to ``final_lr``."""
    if not 0 <= step <= cfg.total_steps:
        raise ValueError(f"step {step} outside [0, {cfg.total_steps}]")
    w = cfg.warmup_steps
    if step < w:
        return cfg.floor_lr + (cfg.peak_lr - cfg.floor_lr) * step / w
    span = cfg.total_steps - w
    if span <= 0:
        return cfg.peak_lr
    return cfg.peak_lr * (cfg.final_lr / cfg.peak_lr) ** ((step - w) / span)


def decays(name: str) -> bool:
    """Weight decay applies to everything but biases and norm parameters."""
    return not (name.endswith(".b") or ".ln." in name)


class NonFiniteGradientError(FloatingPointError):
    pass


@dataclass
class AdamW:
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-9
    weight_decay: float = 0.01
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray], lr: float) -> None:
        """In-place decoupled-weight-decay update of every parameter that has a gradient."""
        for name, g in grads.items():
            if not np.all(np.isfinite(g)):
                raise NonFiniteGradientError(f"non-finite gradient for parameter {name!r}")
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for name, g in grads.items():
            p = params[name]
            if name not in self.m:
                self.m[name] = np.zeros_like(p)
                self.v[name] = np.zeros_like(p)
            m, v = self.m[name], self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            if self.weight_decay and decays(name):
                p *= 1.0 - lr * self.weight_decay
            p -= (lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.dtype)


def clip_grad_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    total = math.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads.values()))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / (total + 1e-6)
        for g in grads.values():
            g *= scale
    return total


@dataclass
class TrainConfig:
    stage: str = "ctd"  # "mlm" or "ctd"
    batch_size: int = 32
    max_epochs: int = 25
    patience: int = 3
    seed: int = 0
    ratio: int = 5
    mask_rate: float = 0.15
    peak_lr: float = 5e-4
    floor_lr: float = 1e-7
    warmup_frac: float = 0.05
    final_lr: float = 1e-5
    weight_decay: float = 0.01
    clip_norm: float = 1.0
    max_steps: int | None = None  # cap on optimizer steps; also fixes the schedule length

    def __post_init__(self):
        if self.stage not in ("mlm", "ctd"):
            raise ValueError(f"unknown stage {self.stage!r}")
        if self.batch_size < 1 or self.patience < 1 or self.max_epochs < 1:
            raise ValueError("batch_size, patience and max_epochs must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)


FULL_TRAIN = dict(batch_size=512, max_epochs=25, peak_lr=5e-4, floor_lr=1e-7, warmup_frac=0.05)
# the small encoder needs a hotter peak than the full-size recipe to converge in a few epochs
TOY_TRAIN = dict(batch_size=32, max_epochs=15, peak_lr=2e-3, floor_lr=1e-7, warmup_frac=0.05)
TRAIN_PRESETS = {"toy": TOY_TRAIN, "paper": FULL_TRAIN}


@dataclass
class TrainResult:
    model: CTDModel
    history: list[dict]
    epoch_metrics: list[float]
    best_epoch: int
    best_metric: float
    stopped_epoch: int


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, result: TrainResult):
        super().__init__(message)
        self.result = result


class EarlyStopping:
    def __init__(self, patience: int, higher_is_better: bool):
        self.patience = patience
        self.sign = 1.0 if higher_is_better else -1.0
        self.best: float | None = None
        self.best_epoch = -1
        self.bad_epochs = 0

    def update(self, metric: float, epoch: int) -> bool:
        """Record a dev metric; True when this epoch is the new best."""
        if self.best is None or self.sign * (metric - self.best) > 0:
            self.best, self.best_epoch, self.bad_epochs = metric, epoch, 0
            return True
        self.bad_epochs += 1
        return False

    @property
    def should_stop(self) -> bool:
        return self.bad_epochs >= self.patience


def mlm_batch(sentences: Sequence[str], vocab: Vocabulary, cfg: EncoderConfig, rate: float,
              rng: np.random.Generator):
    ids, mask = enc.pad_batch([encode(s, vocab, cfg.max_len) for s in sentences])
    corrupted = ids.copy()
    flat_pos, tgt = [], []
    T = ids.shape[1]
    for b in range(ids.shape[0]):
        row, targets = enc.mlm_mask(ids[b], rate, rng, cfg.vocab_size)
        corrupted[b] = row
        for pos, tid in sorted(targets.items()):
            flat_pos.append(b * T + pos)
            tgt.append(tid)
    return corrupted, mask, np.array(flat_pos, dtype=np.int64), np.array(tgt, dtype=np.int64)


def mlm_dev_loss(model: CTDModel, sentences: Sequence[str], rate: float, seed: int, batch_size: int = 128) -> float:
    """Mean MLM loss under a fixed masking seed, so epochs are comparable."""
    rng = np.random.default_rng(seed)
    total, count = 0.0, 0
    params = model.tensors()
    with nm.no_grad():
        for start in range(0, len(sentences), batch_size):
            ids, mask, pos, tgt = mlm_batch(sentences[start:start + batch_size], model.vocab, model.config, rate, rng)
            if pos.size == 0:
                continue
            out = enc.forward(params, ids, mask, model.config)
            total += enc.mlm_loss(params, out.v_context, pos, tgt).item() * pos.size
            count += pos.size
    return total / count if count else 0.0


def _stage_loss(model: CTDModel, items, cfg: TrainConfig, params, rng_task, rng_drop):
    """Return (mean loss tensor or None, number of supervised tokens)."""
    if cfg.stage == "mlm":
        ids, mask, pos, tgt = mlm_batch(items, model.vocab, model.config, cfg.mask_rate, rng_task)
        if pos.size == 0:
            enc.mlm_stats.empty_target_batches += 1
            log.warning("MLM batch without masked targets; step skipped")
            return None, 0
        out = enc.forward(params, ids, mask, model.config, rng_drop)
        return enc.mlm_loss(params, out.v_context, pos, tgt), int(pos.size)
    batch = make_batch(items, model.vocab, model.config, rng_task, cfg.ratio)
    n = int(batch.supervised.sum())
    if n == 0:
        log.warning("batch without supervised positions; step skipped")
        return None, 0
    logits = model.logits(batch.ids, batch.mask, params, rng_drop)
    return ctd_loss(logits, batch.targets, batch.supervised), n


def train_stage(
    model: CTDModel,
    train: Sequence,
    dev: Sequence,
    cfg: TrainConfig,
    dev_metric: Callable[[CTDModel, int], float] | None = None,
) -> TrainResult:
    """Train ``model`` in place for one stage and return the best checkpoint.

    ``train``/``dev`` are sentences for the MLM stage and correction pairs for
    the CTD stage. ``dev_metric(model, epoch)`` overrides the default dev
    selection metric (MLM dev loss, lower is better; CTD dev sentence F1,
    higher is better).
    """
    if cfg.stage == "mlm":
        train = [p.target if isinstance(p, CorrectionPair) else p for p in train]
        dev = [p.target if isinstance(p, CorrectionPair) else p for p in dev]
    seeds = np.random.SeedSequence(cfg.seed).spawn(4)
    rng_shuffle, rng_task, rng_drop = (np.random.default_rng(s) for s in seeds[:3])
    dev_seed = int(seeds[3].generate_state(1)[0])
    steps_per_epoch = math.ceil(len(train) / cfg.batch_size)
    total = cfg.max_epochs * steps_per_epoch
    if cfg.max_steps is not None:
        total = min(total, cfg.max_steps)
    schedule = ScheduleConfig(total, cfg.peak_lr, cfg.floor_lr, cfg.warmup_frac, cfg.final_lr)
    opt = AdamW(weight_decay=cfg.weight_decay)

    if dev_metric is None:
        if cfg.stage == "mlm":
            def dev_metric(m, epoch):
                return mlm_dev_loss(m, dev, cfg.mask_rate, dev_seed)
        else:
            def dev_metric(m, epoch):
                return evaluate_model(m, dev).f1
    stopper = EarlyStopping(cfg.patience, higher_is_better=cfg.stage == "ctd")

    history: list[dict] = []
    epoch_metrics: list[float] = []
    best_params = {k: v.copy() for k, v in model.params.items()}
    step = 0
    epoch = 0

    def result(stopped):
        best = CTDModel(model.config, model.vocab, model.variant, best_params)
        return TrainResult(best, history, epoch_metrics, stopper.best_epoch,
                           stopper.best if stopper.best is not None else float("nan"), stopped)

    for epoch in range(1, cfg.max_epochs + 1):
        order = rng_shuffle.permutation(len(train))
        for start in range(0, len(train), cfg.batch_size):
            if step >= total:
                break
            items = [train[i] for i in order[start:start + cfg.batch_size]]
            params = model.tensors(requires_grad=True)
            loss, n = _stage_loss(model, items, cfg, params, rng_task, rng_drop)
            lr = lr_at(step, schedule)
            if loss is None:
                step += 1
                continue
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingDiverged(f"loss became {value} at step {step}", result(epoch))
            loss.backward()
            grads = {k: t.grad for k, t in params.items() if t.grad is not None}
            clip_grad_norm(grads, cfg.clip_norm)
            opt.step(model.params, grads, lr)
            history.append({"step": step, "stage": cfg.stage, "epoch": epoch, "lr": lr, "loss": value,
                            "loss_sum": value * n, "tokens": n, "dev_metric": ""})
            step += 1
        metric = float(dev_metric(model, epoch))
        epoch_metrics.append(metric)
        if history:
            history[-1]["dev_metric"] = metric
        if stopper.update(metric, epoch):
            best_params = {k: v.copy() for k, v in model.params.items()}
        log.info("%s epoch %d: loss %.4f dev %.4f", cfg.stage, epoch, history[-1]["loss"] if history else float("nan"),
                 metric)
        if stopper.should_stop or step >= total:
            break
    model.params = {k: v.copy() for k, v in best_params.items()}
    return result(epoch)


def write_history(history: Sequence[dict], path) -> None:
    cols = ["step", "stage", "epoch", "lr", "loss", "loss_sum", "tokens", "dev_metric"]
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=cols, extrasaction="ignore")
        w.writeheader()
        for row in history:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})


# ---------------------------------------------------------------------------
# checkpoints: magic, u64 little-endian header length, JSON header, f32 LE blob

MAGIC = b"CTDCKPT1"


class CheckpointError(ValueError):
    pass


def checkpoint_bytes(model: CTDModel) -> bytes:
    manifest, blobs, offset = [], [], 0
    for name in sorted(model.params):
        arr = np.ascontiguousarray(model.params[name], dtype="<f4")
        manifest.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": arr.nbytes})
        blobs.append(arr.tobytes())
        offset += arr.nbytes
    header = {
        "format": 1,
        "dtype": "float32-le",
        "config": model.config.to_dict(),
        "variant": model.variant,
        "vocab": model.vocab.tokens,
        "params": manifest,
    }
    raw = json.dumps(header, ensure_ascii=False, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return MAGIC + struct.pack("<Q", len(raw)) + raw + b"".join(blobs)


def save_checkpoint(model: CTDModel, path) -> Path:
    path = Path(path)
    path.write_bytes(checkpoint_bytes(model))
    return path


def load_checkpoint(path, vocab: Vocabulary | None = None, config: EncoderConfig | None = None) -> CTDModel:
    data = Path(path).read_bytes()
    if data[:8] != MAGIC or len(data) < 16:
        raise CheckpointError(f"{path}: not a CTD checkpoint")
    (hlen,) = struct.unpack("<Q", data[8:16])
    try:
        header = json.loads(data[16:16 + hlen].decode("utf-8"))
        cfg = EncoderConfig.from_dict(header["config"])
        variant = header["variant"]
        ckpt_vocab = Vocabulary(header["vocab"])
        manifest = header["params"]
    except (ValueError, KeyError, TypeError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt checkpoint header ({exc})") from None
    if config is not None and config != cfg:
        raise CheckpointError(f"{path}: config mismatch: checkpoint {cfg} vs expected {config}")
    if vocab is not None and vocab != ckpt_vocab:
        raise CheckpointError(
            f"{path}: vocabulary mismatch (checkpoint V={len(ckpt_vocab)}, given V={len(vocab)})"
        )
    blob = memoryview(data)[16 + hlen:]
    with_mlm = any(e["name"].startswith("mlm.") for e in manifest)
    expected = model_param_shapes(cfg, variant, with_mlm)
    params = {}
    for entry in manifest:
        name, shape = entry["name"], tuple(entry["shape"])
        if expected.get(name) != shape:
            raise CheckpointError(f"{path}: parameter {name} has shape {shape}, expected {expected.get(name)}")
        end = entry["offset"] + entry["nbytes"]
        if end > len(blob) or entry["nbytes"] != 4 * int(np.prod(shape)):
            raise CheckpointError(f"{path}: truncated data for {name}")
        params[name] = np.frombuffer(blob[entry["offset"]:end], dtype="<f4").reshape(shape).astype(np.float32)
    missing = set(expected) - set(params)
    if missing:
        raise CheckpointError(f"{path}: missing parameters {sorted(missing)}")
    return CTDModel(cfg, ckpt_vocab, variant, params)
