"""Contextualized token discrimination head: composition, classifier, loss, inference."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import encoder as enc
from . import numeric as nm
from .encoder import EncoderConfig
from .numeric import Tensor
from .text import N_SPECIAL, UNK_ID, CorrectionPair, Vocabulary, encode, nfc

VARIANTS = ("ctd", "base")


def compose(v_input: Tensor, v_context: Tensor) -> Tensor:
    """Per position ``[v_context; v_input; v_context - v_input]``."""
    if v_input.shape != v_context.shape:
        raise nm.ShapeError(f"compose shape mismatch: v_input {v_input.shape} vs v_context {v_context.shape}")
    return nm.concat([v_context, v_input, v_context - v_input], axis=-1)


def head_param_shapes(cfg: EncoderConfig, variant: str) -> dict[str, tuple[int, ...]]:
    if variant == "ctd":
        return {"head.w": (cfg.vocab_size, 3 * cfg.d), "head.b": (cfg.vocab_size,)}
    if variant == "base":
        return {"base.w": (cfg.vocab_size, cfg.d), "base.b": (cfg.vocab_size,)}
    raise ValueError(f"unknown head variant {variant!r}; expected one of {VARIANTS}")


def init_head_params(cfg: EncoderConfig, variant: str, rng: np.random.Generator) -> dict[str, np.ndarray]:
    return enc.init_from_shapes(head_param_shapes(cfg, variant), rng)


def model_param_shapes(cfg: EncoderConfig, variant: str, with_mlm: bool = True) -> dict[str, tuple[int, ...]]:
    shapes = enc.encoder_param_shapes(cfg)
    if with_mlm:
        shapes.update(enc.mlm_param_shapes(cfg))
    shapes.update(head_param_shapes(cfg, variant))
    return shapes


def ctd_logits(composed: Tensor, params: dict[str, Tensor]) -> Tensor:
    return nm.linear(composed, params["head.w"], params["head.b"])


def predict(composed: Tensor, params: dict[str, Tensor]) -> Tensor:
    """Correction distribution ``softmax(W c_i + b)`` at every position."""
    return nm.softmax(ctd_logits(composed, params))


def base_logits(v_context: Tensor, params: dict[str, Tensor]) -> Tensor:
    return nm.linear(v_context, params["base.w"], params["base.b"])


def base_predict(v_context: Tensor, params: dict[str, Tensor]) -> Tensor:
    """Plain linear classifier on the last encoder layer."""
    return nm.softmax(base_logits(v_context, params))


def head_logits(out: enc.EncoderOutput, params: dict[str, Tensor], variant: str) -> Tensor:
    if variant == "ctd":
        return ctd_logits(compose(out.v_input, out.v_context), params)
    if variant == "base":
        return base_logits(out.v_context, params)
    raise ValueError(f"unknown head variant {variant!r}")


@dataclass(frozen=True)
class SupervisionSet:
    """Character positions (no [CLS] offset) that receive loss."""

    errors: tuple[int, ...]
    sampled: tuple[int, ...]

    @property
    def positions(self) -> tuple[int, ...]:
        return tuple(sorted(self.errors + self.sampled))


def build_supervision(pair: CorrectionPair, rng: np.random.Generator, ratio: int = 5) -> SupervisionSet:
    """All error positions plus ``ratio`` correct positions per error, sampled without replacement.

    A clean pair is treated as having one error's worth of budget so it
    still contributes ``ratio`` correct positions.
    """
    if ratio < 1:
        raise ValueError(f"ratio must be a positive integer, got {ratio}")
    errors = tuple(sorted(pair.error_positions))
    correct = np.array([i for i in range(len(pair.target)) if i not in pair.error_positions], dtype=np.int64)
    k = min(ratio * max(len(errors), 1), correct.size)
    sampled = rng.choice(correct, size=k, replace=False) if k else correct[:0]
    return SupervisionSet(errors, tuple(sorted(int(i) for i in sampled)))


def ctd_loss(logits: Tensor, targets, positions, reduction: str = "mean") -> Tensor:
    """Negative log-likelihood of gold ids at the supervised positions only.

    ``logits`` is [B, T, V] (or [T, V]); ``positions`` is a boolean mask of the
    same leading shape or an array of flat indices into it. Log-softmax is
    applied to the gathered rows, so rows outside the set get zero gradient.
    """
    targets = np.asarray(targets, dtype=np.int64)
    lead = logits.shape[:-1]
    if targets.shape != lead:
        raise nm.ShapeError(f"targets {targets.shape} do not match logits {logits.shape}")
    positions = np.asarray(positions)
    flat = np.flatnonzero(positions) if positions.dtype == bool else positions.astype(np.int64).reshape(-1)
    if flat.size == 0:
        raise ValueError("empty supervision set")
    V = logits.shape[-1]
    rows = nm.take_rows(nm.reshape(logits, (-1, V)), flat)
    return nm.cross_entropy(rows, targets.reshape(-1)[flat], reduction=reduction)


@dataclass
class Batch:
    ids: np.ndarray  # source ids with [CLS]/[SEP], [B, T]
    mask: np.ndarray  # real-token mask, [B, T]
    targets: np.ndarray  # gold ids aligned with ids, [B, T]
    supervised: np.ndarray  # bool [B, T]
    n_errors: int = 0


def make_batch(
    pairs: Sequence[CorrectionPair],
    vocab: Vocabulary,
    cfg: EncoderConfig,
    rng: np.random.Generator | None = None,
    ratio: int = 5,
) -> Batch:
    """Encode pairs; with ``rng`` also sample the supervised positions."""
    src = [encode(p.source, vocab, cfg.max_len) for p in pairs]
    ids, mask = enc.pad_batch(src)
    targets, _ = enc.pad_batch([encode(p.target, vocab, cfg.max_len) for p in pairs])
    supervised = np.zeros(ids.shape, dtype=bool)
    n_errors = 0
    if rng is not None:
        for b, p in enumerate(pairs):
            sup = build_supervision(p, rng, ratio)
            n_errors += len(sup.errors)
            for i in sup.positions:
                supervised[b, i + 1] = True
    return Batch(ids, mask, targets, supervised, n_errors)


@dataclass
class CTDModel:
    config: EncoderConfig
    vocab: Vocabulary
    variant: str
    params: dict[str, np.ndarray]

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown head variant {self.variant!r}")
        if len(self.vocab) != self.config.vocab_size:
            raise ValueError(f"vocabulary has {len(self.vocab)} entries, config expects {self.config.vocab_size}")

    @classmethod
    def init(cls, config: EncoderConfig, vocab: Vocabulary, variant: str, rng: np.random.Generator,
             with_mlm: bool = True) -> "CTDModel":
        params = enc.init_encoder_params(config, rng)
        if with_mlm:
            params.update(enc.init_mlm_params(config, rng))
        params.update(init_head_params(config, variant, rng))
        return cls(config, vocab, variant, params)

    def with_variant(self, variant: str, rng: np.random.Generator) -> "CTDModel":
        """Same encoder (and MLM head), fresh classifier for ``variant``."""
        params = {k: v.copy() for k, v in self.params.items() if not k.startswith(("head.", "base."))}
        params.update(init_head_params(self.config, variant, rng))
        return CTDModel(self.config, self.vocab, variant, params)

    def tensors(self, requires_grad: bool = False) -> dict[str, Tensor]:
        return {k: Tensor(v, requires_grad=requires_grad) for k, v in self.params.items()}

    def logits(self, ids, mask, params: dict[str, Tensor] | None = None, rng=None) -> Tensor:
        params = params if params is not None else self.tensors()
        out = enc.forward(params, ids, mask, self.config, rng)
        return head_logits(out, params, self.variant)

    def probabilities(self, queries: Sequence[str]) -> tuple[np.ndarray, np.ndarray]:
        """Softmaxed head outputs [B, T, V] for a list of queries, plus the padded ids."""
        ids, mask = enc.pad_batch([encode(q, self.vocab, self.config.max_len) for q in queries])
        with nm.no_grad():
            probs = nm.softmax(self.logits(ids, mask)).data
        return probs, ids


@dataclass
class Correction:
    input: str
    output: str
    predictions: list[tuple[int, float]] = field(default_factory=list)

    @property
    def edits(self) -> list[dict]:
        out = []
        for pos, (a, b) in enumerate(zip(self.input, self.output)):
            if a != b:
                out.append({"pos": pos, "from": a, "to": b, "prob": round(self.predictions[pos][1], 6)})
        return out

    def to_json(self) -> dict:
        return {"input": self.input, "output": self.output, "edits": self.edits}


def correct_batch(
    queries: Sequence[str], model: CTDModel, mode: str = "argmax", threshold: float = 0.5
) -> list[Correction]:
    """Position-wise correction.

    ``argmax`` replaces every character by the most probable non-special
    token. ``threshold`` keeps the original unless the argmax differs from it
    and reaches probability ``threshold``. Characters unknown to the
    vocabulary are always kept.
    """
    if mode not in ("argmax", "threshold"):
        raise ValueError(f"unknown correction mode {mode!r}")
    if not queries:
        return []
    queries = [nfc(q) for q in queries]
    probs, ids = model.probabilities(queries)
    restricted = probs[..., N_SPECIAL:]
    best = restricted.argmax(axis=-1) + N_SPECIAL
    best_p = np.take_along_axis(probs, best[..., None], axis=-1)[..., 0]
    results = []
    for b, q in enumerate(queries):
        chars, preds = [], []
        for i, ch in enumerate(q):
            src_id = ids[b, i + 1]
            pid, pp = int(best[b, i + 1]), float(best_p[b, i + 1])
            preds.append((pid, pp))
            if src_id == UNK_ID:
                chars.append(ch)
            elif mode == "threshold" and (pid == src_id or pp < threshold):
                chars.append(ch)
            else:
                chars.append(model.vocab.tokens[pid])
        results.append(Correction(q, "".join(chars), preds))
    return results


def correct(query: str, model: CTDModel, mode: str = "argmax", threshold: float = 0.5) -> Correction:
    return correct_batch([query], model, mode, threshold)[0]


def count_params(cfg: EncoderConfig, variant: str, with_mlm: bool = False) -> int:
    return int(sum(np.prod(s) for s in model_param_shapes(cfg, variant, with_mlm).values()))
