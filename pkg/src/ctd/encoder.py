"""BERT-style post-LN transformer encoder and the MLM objective."""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import numeric as nm
from .numeric import Tensor
from .text import MASK_ID, N_SPECIAL, PAD_ID

log = logging.getLogger(__name__)

INIT_STD = 0.02


@dataclass(frozen=True)
class EncoderConfig:
    vocab_size: int
    d: int = 64
    layers: int = 2
    heads: int = 4
    d_ff: int = 128
    max_len: int = 64
    dropout: float = 0.1
    # add positional embeddings into the representation handed to the CTD head
    positional_in_input_repr: bool = True

    def __post_init__(self):
        if self.d % self.heads:
            raise ValueError(f"hidden size {self.d} not divisible by {self.heads} heads")
        if min(self.vocab_size, self.d, self.layers, self.heads, self.d_ff, self.max_len) < 1:
            raise ValueError(f"non-positive encoder dimension in {self}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "EncoderConfig":
        return cls(**data)


PRESETS = {
    "toy": dict(d=64, layers=2, heads=4, d_ff=128, max_len=64),
    # bert-base-chinese dimensions
    "paper": dict(d=768, layers=12, heads=12, d_ff=3072, max_len=512, vocab_size=21128),
}


def preset_config(name: str, vocab_size: int | None = None, **overrides) -> EncoderConfig:
    if name not in PRESETS:
        raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    kwargs = dict(PRESETS[name])
    if vocab_size is not None:
        kwargs["vocab_size"] = vocab_size
    kwargs.update(overrides)
    return EncoderConfig(**kwargs)


def truncated_normal(rng: np.random.Generator, shape, std: float = INIT_STD) -> np.ndarray:
    """Normal(0, std) resampled outside two standard deviations."""
    x = rng.standard_normal(shape)
    bad = np.abs(x) > 2.0
    while bad.any():
        x[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(x) > 2.0
    return (x * std).astype(np.float32)


def encoder_param_shapes(cfg: EncoderConfig) -> dict[str, tuple[int, ...]]:
    d, f = cfg.d, cfg.d_ff
    shapes = {"emb.tok": (cfg.vocab_size, d), "emb.pos": (cfg.max_len, d), "emb.ln.g": (d,), "emb.ln.b": (d,)}
    for i in range(cfg.layers):
        pre = f"layer{i}."
        for name in ("q", "k", "v", "o"):
            shapes[pre + f"attn.{name}.w"] = (d, d)
            shapes[pre + f"attn.{name}.b"] = (d,)
        shapes[pre + "attn.ln.g"] = (d,)
        shapes[pre + "attn.ln.b"] = (d,)
        shapes[pre + "ff.in.w"] = (f, d)
        shapes[pre + "ff.in.b"] = (f,)
        shapes[pre + "ff.out.w"] = (d, f)
        shapes[pre + "ff.out.b"] = (d,)
        shapes[pre + "ff.ln.g"] = (d,)
        shapes[pre + "ff.ln.b"] = (d,)
    return shapes


def mlm_param_shapes(cfg: EncoderConfig) -> dict[str, tuple[int, ...]]:
    d, V = cfg.d, cfg.vocab_size
    return {"mlm.dense.w": (d, d), "mlm.dense.b": (d,), "mlm.ln.g": (d,), "mlm.ln.b": (d,),
            "mlm.out.w": (V, d), "mlm.out.b": (V,)}


def init_from_shapes(shapes: dict[str, tuple[int, ...]], rng: np.random.Generator) -> dict[str, np.ndarray]:
    """Norm gains start at one, biases at zero, everything else truncated normal."""
    params = {}
    for name, shape in shapes.items():
        if name.endswith(".g"):
            params[name] = np.ones(shape, dtype=np.float32)
        elif name.endswith(".b"):
            params[name] = np.zeros(shape, dtype=np.float32)
        else:
            params[name] = truncated_normal(rng, shape)
    return params


def init_encoder_params(cfg: EncoderConfig, rng: np.random.Generator) -> dict[str, np.ndarray]:
    return init_from_shapes(encoder_param_shapes(cfg), rng)


def init_mlm_params(cfg: EncoderConfig, rng: np.random.Generator) -> dict[str, np.ndarray]:
    return init_from_shapes(mlm_param_shapes(cfg), rng)


@dataclass
class EncoderOutput:
    v_input: Tensor  # [B, T, d]
    v_context: Tensor  # [B, T, d]
    hidden: list[Tensor] = field(default_factory=list)
    attentions: list[np.ndarray] = field(default_factory=list)


def embed(params: dict[str, Tensor], ids: np.ndarray, cfg: EncoderConfig) -> Tensor:
    """Token plus positional embedding: the input representation."""
    ids = np.asarray(ids)
    if ids.ndim == 1:
        ids = ids[None, :]
    T = ids.shape[1]
    if T > cfg.max_len:
        raise nm.ShapeError(f"sequence length {T} exceeds max_len {cfg.max_len}")
    tok = nm.embedding(params["emb.tok"], ids)
    if not cfg.positional_in_input_repr:
        return tok
    pos = nm.reshape(nm.embedding(params["emb.pos"], np.arange(T)), (1, T, cfg.d))
    return tok + pos


def _split_heads(x: Tensor, B: int, T: int, H: int) -> Tensor:
    return nm.transpose(nm.reshape(x, (B, T, H, x.shape[-1] // H)), (0, 2, 1, 3))


def encode(
    params: dict[str, Tensor],
    v_input: Tensor,
    attention_mask: np.ndarray,
    cfg: EncoderConfig,
    rng: np.random.Generator | None = None,
    keep_attention: bool = False,
) -> EncoderOutput:
    """Run the transformer stack; ``attention_mask`` is True on real tokens.

    ``rng`` enables dropout (training); pass None for deterministic inference.
    """
    mask = np.asarray(attention_mask, dtype=bool)
    if mask.ndim == 1:
        mask = mask[None, :]
    B, T, d = v_input.shape
    if mask.shape != (B, T):
        raise nm.ShapeError(f"attention mask {mask.shape} does not match input {(B, T)}")
    H = cfg.heads
    scale = 1.0 / math.sqrt(d // H)
    bias = np.where(mask, 0.0, nm.MASK_VALUE).astype(v_input.dtype)[:, None, None, :]
    rate = cfg.dropout if rng is not None else 0.0

    x = v_input
    if not cfg.positional_in_input_repr:
        pos = nm.reshape(nm.embedding(params["emb.pos"], np.arange(T)), (1, T, d))
        x = x + pos
    x = nm.layer_norm(x, params["emb.ln.g"], params["emb.ln.b"])
    x = nm.dropout(x, rate, rng)
    out = EncoderOutput(v_input=v_input, v_context=x)
    for i in range(cfg.layers):
        pre = f"layer{i}."
        q = _split_heads(nm.linear(x, params[pre + "attn.q.w"], params[pre + "attn.q.b"]), B, T, H)
        k = _split_heads(nm.linear(x, params[pre + "attn.k.w"], params[pre + "attn.k.b"]), B, T, H)
        v = _split_heads(nm.linear(x, params[pre + "attn.v.w"], params[pre + "attn.v.b"]), B, T, H)
        scores = nm.matmul(q, nm.transpose(k, (0, 1, 3, 2))) * scale + bias
        attn = nm.softmax(scores)
        if keep_attention:
            out.attentions.append(attn.data)
        attn = nm.dropout(attn, rate, rng)
        ctx = nm.reshape(nm.transpose(nm.matmul(attn, v), (0, 2, 1, 3)), (B, T, d))
        h = nm.dropout(nm.linear(ctx, params[pre + "attn.o.w"], params[pre + "attn.o.b"]), rate, rng)
        x = nm.layer_norm(x + h, params[pre + "attn.ln.g"], params[pre + "attn.ln.b"])
        h = nm.gelu(nm.linear(x, params[pre + "ff.in.w"], params[pre + "ff.in.b"]))
        h = nm.dropout(nm.linear(h, params[pre + "ff.out.w"], params[pre + "ff.out.b"]), rate, rng)
        x = nm.layer_norm(x + h, params[pre + "ff.ln.g"], params[pre + "ff.ln.b"])
        out.hidden.append(x)
    out.v_context = x
    return out


def forward(params, ids, attention_mask, cfg, rng=None, keep_attention=False) -> EncoderOutput:
    return encode(params, embed(params, ids, cfg), attention_mask, cfg, rng, keep_attention)


def mlm_mask(
    ids, rate: float, rng: np.random.Generator, vocab_size: int
) -> tuple[np.ndarray, dict[int, int]]:
    """BERT corruption: of the selected positions 80% -> [MASK], 10% random, 10% kept.

    Special tokens are never selected. Returns corrupted ids and
    ``{position: original id}`` for the selected positions.
    """
    if not 0.0 < rate <= 1.0:
        raise ValueError(f"mask rate must lie in (0, 1], got {rate}")
    ids = np.asarray(ids, dtype=np.int64)
    corrupted = ids.copy()
    cand = np.flatnonzero(ids >= N_SPECIAL)
    chosen = cand[rng.random(cand.size) < rate]
    action = rng.random(chosen.size)
    randoms = rng.integers(N_SPECIAL, vocab_size, size=chosen.size)
    targets = {}
    for pos, a, r in zip(chosen, action, randoms):
        targets[int(pos)] = int(ids[pos])
        if a < 0.8:
            corrupted[pos] = MASK_ID
        elif a < 0.9:
            corrupted[pos] = r
    return corrupted, targets


class _Counter:
    empty_target_batches = 0


mlm_stats = _Counter()


def mlm_logits(params: dict[str, Tensor], hidden: Tensor) -> Tensor:
    h = nm.gelu(nm.linear(hidden, params["mlm.dense.w"], params["mlm.dense.b"]))
    h = nm.layer_norm(h, params["mlm.ln.g"], params["mlm.ln.b"])
    return nm.linear(h, params["mlm.out.w"], params["mlm.out.b"])


def mlm_loss(params: dict[str, Tensor], v_context: Tensor, flat_positions, target_ids) -> Tensor:
    """Mean cross-entropy at the selected positions of the flattened [B*T] sequence."""
    flat_positions = np.asarray(flat_positions, dtype=np.int64)
    if flat_positions.size == 0:
        mlm_stats.empty_target_batches += 1
        log.warning("MLM batch without masked targets; loss defined as 0")
        return Tensor(np.zeros((), dtype=v_context.dtype))
    B, T, d = v_context.shape
    picked = nm.take_rows(nm.reshape(v_context, (B * T, d)), flat_positions)
    return nm.cross_entropy(mlm_logits(params, picked), target_ids)


def pad_batch(seqs: list[list[int]]) -> tuple[np.ndarray, np.ndarray]:
    T = max(len(s) for s in seqs)
    ids = np.full((len(seqs), T), PAD_ID, dtype=np.int64)
    for i, s in enumerate(seqs):
        ids[i, : len(s)] = s
    return ids, ids != PAD_ID
