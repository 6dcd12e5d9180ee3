"""Sentence-level correction metrics, token diagnostics and representation similarity."""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import encoder as enc
from . import numeric as nm
from .head import CTDModel, correct_batch
from .text import CorrectionPair, encode, nfc

log = logging.getLogger(__name__)

METRIC_DEFINITION = (
    "correction level, per sentence: positive iff source != gold; "
    "TP positive & output == gold; FN positive & output != gold; "
    "FP negative & output != gold; TN negative & output == gold"
)

Record = tuple[str, str, str]  # (source, gold, output)


def _check(records: Iterable[Record]) -> list[Record]:
    out = []
    for i, (src, gold, pred) in enumerate(records):
        if not len(src) == len(gold) == len(pred):
            raise ValueError(
                f"record {i}: lengths differ (source {len(src)}, gold {len(gold)}, output {len(pred)})"
            )
        out.append((src, gold, pred))
    return out


def verdict(source: str, gold: str, output: str) -> str:
    if source != gold:
        return "TP" if output == gold else "FN"
    return "TN" if output == gold else "FP"


def _ratio(num: int, den: int) -> float:
    return num / den if den else 0.0


@dataclass
class EvalReport:
    tp: int
    fp: int
    fn: int
    tn: int
    token_correction_rate: float = 0.0
    token_false_change_rate: float = 0.0
    records: list[dict] = field(default_factory=list)
    definition: str = METRIC_DEFINITION

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    # fractions in [0, 1]; reports print percentages
    @property
    def accuracy(self) -> float:
        return _ratio(self.tp + self.tn, self.total)

    @property
    def precision(self) -> float:
        return _ratio(self.tp, self.tp + self.fp)

    @property
    def recall(self) -> float:
        return _ratio(self.tp, self.tp + self.fn)

    @property
    def f1(self) -> float:
        p, r = self.precision, self.recall
        return 2 * p * r / (p + r) if p + r > 0 else 0.0

    def summary(self) -> dict:
        return {
            "accuracy": round(100 * self.accuracy, 1),
            "precision": round(100 * self.precision, 1),
            "recall": round(100 * self.recall, 1),
            "f1": round(100 * self.f1, 1),
        }

    def to_dict(self) -> dict:
        data = asdict(self)
        data["summary"] = self.summary()
        data["total"] = self.total
        return data

    @classmethod
    def from_dict(cls, data: dict) -> "EvalReport":
        keys = ("tp", "fp", "fn", "tn", "token_correction_rate", "token_false_change_rate", "records", "definition")
        return cls(**{k: data[k] for k in keys})


def sentence_metrics(records: Iterable[Record]) -> EvalReport:
    records = _check(records)
    counts = {"TP": 0, "FP": 0, "FN": 0, "TN": 0}
    rows = []
    for src, gold, pred in records:
        v = verdict(src, gold, pred)
        counts[v] += 1
        rows.append({"input": src, "gold": gold, "output": pred, "verdict": v})
    tok = token_metrics(records)
    return EvalReport(
        tp=counts["TP"], fp=counts["FP"], fn=counts["FN"], tn=counts["TN"],
        token_correction_rate=tok.correction_rate, token_false_change_rate=tok.false_change_rate,
        records=rows,
    )


@dataclass
class TokenReport:
    error_positions: int
    fixed: int
    clean_positions: int
    changed_clean: int
    detected: int = 0  # error positions that were changed, rightly or not

    @property
    def correction_rate(self) -> float:
        return _ratio(self.fixed, self.error_positions)

    @property
    def false_change_rate(self) -> float:
        return _ratio(self.changed_clean, self.clean_positions)

    @property
    def detection_rate(self) -> float:
        return _ratio(self.detected, self.error_positions)


def token_metrics(records: Iterable[Record]) -> TokenReport:
    rep = TokenReport(0, 0, 0, 0)
    for src, gold, pred in _check(records):
        for s, g, o in zip(src, gold, pred):
            if s != g:
                rep.error_positions += 1
                rep.fixed += o == g
                rep.detected += o != s
            else:
                rep.clean_positions += 1
                rep.changed_clean += o != g
    return rep


def evaluate_model(
    model: CTDModel, pairs: Sequence[CorrectionPair], mode: str = "argmax", threshold: float = 0.5,
    batch_size: int = 128,
) -> EvalReport:
    outputs = []
    for start in range(0, len(pairs), batch_size):
        chunk = pairs[start:start + batch_size]
        outputs.extend(c.output for c in correct_batch([p.source for p in chunk], model, mode, threshold))
    return sentence_metrics((p.source, p.target, o) for p, o in zip(pairs, outputs))


# ---------------------------------------------------------------------------
# similarity diagnostics


@dataclass
class SimilarityMatrix:
    labels: list[str]
    values: np.ndarray  # [n, n]

    def context_alignment(self, position: int) -> float:
        """Mean cosine similarity of one token to every other token."""
        n = len(self.labels)
        if n < 2:
            return 0.0
        row = self.values[position]
        return float((row.sum() - row[position]) / (n - 1))

    def to_csv(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            w = csv.writer(fh)
            w.writerow([""] + self.labels)
            for label, row in zip(self.labels, self.values):
                w.writerow([label] + [f"{x:.6f}" for x in row])


def cosine_matrix(rows: np.ndarray) -> np.ndarray:
    rows = np.asarray(rows, dtype=np.float64)
    norms = np.linalg.norm(rows, axis=1)
    zero = norms == 0
    if zero.any():
        log.warning("zero-norm representation at %d position(s); similarity set to 0", int(zero.sum()))
    unit = rows / np.where(zero, 1.0, norms)[:, None]
    sim = np.clip(unit @ unit.T, -1.0, 1.0)
    sim = (sim + sim.T) / 2
    idx = np.flatnonzero(~zero)
    sim[idx, idx] = 1.0
    return sim


def contextual_rows(queries: Sequence[str], model: CTDModel) -> list[np.ndarray]:
    """Final-layer representations of the content positions of each query."""
    queries = [nfc(q) for q in queries]
    ids, mask = enc.pad_batch([encode(q, model.vocab, model.config.max_len) for q in queries])
    with nm.no_grad():
        out = enc.forward(model.tensors(), ids, mask, model.config)
    vc = out.v_context.data
    return [vc[b, 1:1 + len(q)] for b, q in enumerate(queries)]


def similarity_matrix(query: str, model: CTDModel) -> SimilarityMatrix:
    query = nfc(query)
    (rows,) = contextual_rows([query], model)
    return SimilarityMatrix(list(query), cosine_matrix(rows))


@dataclass
class ContrastResult:
    n_pairs: int
    n_lower: int
    error_scores: list[float]
    gold_scores: list[float]

    @property
    def fraction_lower(self) -> float:
        return _ratio(self.n_lower, self.n_pairs)


def similarity_contrast(pairs: Sequence[CorrectionPair], model: CTDModel, batch_size: int = 128) -> ContrastResult:
    """Per erroneous pair: is the wrong token less aligned with its context than the gold one?

    For pairs with several errors the alignments are averaged over error
    positions. Clean pairs are skipped.
    """
    pairs = [p for p in pairs if p.error_positions]
    err_scores, gold_scores = [], []
    for start in range(0, len(pairs), batch_size):
        chunk = pairs[start:start + batch_size]
        src_rows = contextual_rows([p.source for p in chunk], model)
        gold_rows = contextual_rows([p.target for p in chunk], model)
        for p, s, g in zip(chunk, src_rows, gold_rows):
            sm, gm = SimilarityMatrix(list(p.source), cosine_matrix(s)), SimilarityMatrix(list(p.target), cosine_matrix(g))
            pos = sorted(p.error_positions)
            err_scores.append(float(np.mean([sm.context_alignment(i) for i in pos])))
            gold_scores.append(float(np.mean([gm.context_alignment(i) for i in pos])))
    lower = sum(e < g for e, g in zip(err_scores, gold_scores))
    return ContrastResult(len(pairs), lower, err_scores, gold_scores)


# ---------------------------------------------------------------------------
# report files


def markdown_table(reports: dict[str, EvalReport], dataset: str = "") -> str:
    head = "| Model | Acc.(%) | Prec.(%) | Rec.(%) | F1.(%) |"
    if dataset:
        head = f"<!-- {dataset} -->\n" + head
    lines = [head, "|---|---|---|---|---|"]
    for name, r in reports.items():
        s = r.summary()
        lines.append(f"| {name} | {s['accuracy']:.1f} | {s['precision']:.1f} | {s['recall']:.1f} | {s['f1']:.1f} |")
    return "\n".join(lines) + "\n"


def emit_report(report: EvalReport, path, fmt: str = "json", name: str = "model") -> Path:
    path = Path(path)
    if fmt == "json":
        path.write_text(json.dumps(report.to_dict(), ensure_ascii=False, indent=2, sort_keys=True) + "\n",
                        encoding="utf-8")
    elif fmt == "csv":
        with open(path, "w", encoding="utf-8", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["input", "gold", "output", "verdict"])
            for r in report.records:
                w.writerow([r["input"], r["gold"], r["output"], r["verdict"]])
    elif fmt in ("md", "markdown", "markdown-table"):
        path.write_text(markdown_table({name: report}), encoding="utf-8")
    else:
        raise ValueError(f"unknown report format {fmt!r}")
    return path


def load_report(path) -> EvalReport:
    return EvalReport.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
