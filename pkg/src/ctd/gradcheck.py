"""End-to-end finite-difference check of encoder plus correction head."""
from __future__ import annotations

import numpy as np

from . import numeric as nm
from .encoder import EncoderConfig
from .head import CTDModel, ctd_loss
from .text import CLS_ID, N_SPECIAL, SEP_ID, SPECIALS, Vocabulary

CHECK_CONFIG = dict(vocab_size=32, d=16, layers=2, heads=2, d_ff=32, max_len=8, dropout=0.0)


def end_to_end_check(seed: int, h: float = 1e-3, tol: float = 1e-4, variant: str = "ctd",
                     names=None) -> nm.GradCheckReport:
    """Check every parameter gradient of the correction loss on one random sequence."""
    cfg = EncoderConfig(**CHECK_CONFIG)
    V, T = cfg.vocab_size, cfg.max_len
    vocab = Vocabulary(list(SPECIALS) + [chr(0x4E00 + i) for i in range(V - N_SPECIAL)])
    rng = np.random.default_rng(seed)
    model = CTDModel.init(cfg, vocab, variant, rng, with_mlm=False)
    ids = rng.integers(N_SPECIAL, V, size=(1, T))
    ids[0, 0], ids[0, -1] = CLS_ID, SEP_ID
    targets = ids.copy()
    targets[0, 1 + rng.integers(T - 2)] = rng.integers(N_SPECIAL, V)
    supervised = np.zeros((1, T), dtype=bool)
    supervised[0, 1:T - 1] = True
    mask = np.ones((1, T), dtype=bool)

    def loss(params):
        return ctd_loss(model.logits(ids, mask, params), targets, supervised)

    return nm.finite_diff_check(loss, model.params, h=h, tol=tol, names=names)
