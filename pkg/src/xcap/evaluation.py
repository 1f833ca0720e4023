"""Corpus BLEU, grammar-based content scoring, and attention exports."""
from __future__ import annotations

import json
import math
import re
from collections import Counter
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Sequence

import numpy as np

from .captioner import CaptionerParams, decode_greedy
from .grammar import LOCATIONS, NO_FRACTURE, NEGATIVE_SENTENCE, FractureLabels, Vocabulary, parse, render
from .synthdata import GRID, DatasetRecord, block_cells

MAX_N = 4


@dataclass
class BleuReport:
    precisions: list[float]  # p1..p4 in percent
    brevity_penalty: float
    cumulative: float  # BLEU-4 in percent
    matched: list[int] = field(default_factory=list)  # clipped n-gram matches
    proposed: list[int] = field(default_factory=list)  # candidate n-gram totals

    def fraction(self, n: int) -> Fraction:
        """Exact modified precision for order ``n``."""
        return Fraction(self.matched[n - 1], self.proposed[n - 1]) if self.proposed[n - 1] else Fraction(0)

    def as_dict(self) -> dict:
        out = {f"p{i + 1}": p for i, p in enumerate(self.precisions)}
        out.update(bp=self.brevity_penalty, cumulative=self.cumulative)
        return out

    def is_monotone(self, tol: float = 1e-9) -> bool:
        p = self.precisions
        return all(p[i] + tol >= p[i + 1] for i in range(len(p) - 1))


@dataclass
class ContentReport:
    location_acc: float
    character_acc: float
    off_by_one: int
    unparseable: int
    n: int


def ngram_counts(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def bleu(candidates: Sequence[Sequence[str]], references: Sequence[Sequence[str]]) -> BleuReport:
    """Corpus-level BLEU with one reference per candidate and uniform weights, no smoothing."""
    if len(candidates) != len(references):
        raise ValueError(f"{len(candidates)} candidates vs {len(references)} references")
    if not candidates:
        raise ValueError("BLEU of an empty corpus is undefined")
    matched = [0] * MAX_N
    proposed = [0] * MAX_N
    cand_len = ref_len = 0
    for cand, ref in zip(candidates, references):
        cand_len += len(cand)
        ref_len += len(ref)
        for n in range(1, MAX_N + 1):
            cand_counts = ngram_counts(cand, n)
            ref_counts = ngram_counts(ref, n)
            matched[n - 1] += sum(min(c, ref_counts[g]) for g, c in cand_counts.items())
            proposed[n - 1] += sum(cand_counts.values())
    precisions = [m / p if p else 0.0 for m, p in zip(matched, proposed)]
    if cand_len == 0:
        bp = 0.0
    elif cand_len < ref_len:
        bp = math.exp(1.0 - ref_len / cand_len)
    else:
        bp = 1.0
    if min(precisions) > 0:
        cumulative = bp * math.exp(sum(math.log(p) for p in precisions) / MAX_N)
    else:
        cumulative = 0.0
    return BleuReport([100.0 * p for p in precisions], bp, 100.0 * cumulative, matched, proposed)


def _location_distance(a: str, b: str) -> int:
    return abs(LOCATIONS.index(a) - LOCATIONS.index(b))


def content_accuracy(predicted: Sequence[Sequence[str]], gold: Sequence[FractureLabels]) -> ContentReport:
    """Share of predictions naming the right location and the right character.

    Character means displacement plus the three flags. An unparseable or
    negative prediction is wrong on both counts.
    """
    if len(predicted) != len(gold):
        raise ValueError(f"{len(predicted)} predictions vs {len(gold)} gold cases")
    if any(g is NO_FRACTURE for g in gold):
        raise ValueError("content accuracy is defined on fracture cases only")
    loc_ok = char_ok = off_by_one = unparseable = 0
    for words, truth in zip(predicted, gold):
        case = parse(list(words))
        if not isinstance(case, FractureLabels):
            unparseable += case is not NO_FRACTURE
            continue
        if case.location == truth.location:
            loc_ok += 1
        elif _location_distance(case.location, truth.location) == 1:
            off_by_one += 1
        if (case.displacement, case.comminuted, case.impacted, case.avulsed_fragment) == (
                truth.displacement, truth.comminuted, truth.impacted, truth.avulsed_fragment):
            char_ok += 1
    n = len(gold)
    pct = (lambda k: 100.0 * k / n) if n else (lambda k: 0.0)
    return ContentReport(pct(loc_ok), pct(char_ok), off_by_one, unparseable, n)


def attention_focus(trace: np.ndarray, case: FractureLabels, dilate: int = 1) -> float:
    """Fraction of steps whose most-attended region lies in the (dilated) planted block."""
    trace = np.asarray(trace)
    if len(trace) == 0:
        return 0.0
    inside = set(block_cells(case.location, dilate))
    return float(np.mean([int(np.argmax(row)) in inside for row in trace]))


def _safe(word: str) -> str:
    return re.sub(r"[^a-z0-9]+", "", word.lower()) or "tok"


def export_attention(trace: np.ndarray, words: Sequence[str], out_dir: str | Path) -> list[Path]:
    """One CSV and one 8-bit PGM heatmap per emitted token, plus ``index.csv``."""
    trace = np.asarray(trace, dtype=np.float64)
    if len(trace) != len(words):
        raise ValueError(f"{len(trace)} attention rows for {len(words)} tokens")
    side = int(round(math.sqrt(trace.shape[1]))) if trace.ndim == 2 else GRID
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    index_lines = ["position,token,csv,pgm"]
    for pos, (row, word) in enumerate(zip(trace, words)):
        grid = row.reshape(side, side)
        stem = f"{pos:02d}_{_safe(word)}"
        csv_path, pgm_path = out / f"{stem}.csv", out / f"{stem}.pgm"
        csv_path.write_text("\n".join(",".join(repr(float(v)) for v in r) for r in grid) + "\n")
        peak = grid.max()
        pixels = np.rint(grid / peak * 255.0) if peak > 0 else np.zeros_like(grid)
        pgm_path.write_bytes(f"P5\n{side} {side}\n255\n".encode() + pixels.astype(np.uint8).tobytes())
        index_lines.append(f"{pos},{word},{csv_path.name},{pgm_path.name}")
        written += [csv_path, pgm_path]
    index = out / "index.csv"
    index.write_text("\n".join(index_lines) + "\n")
    return [index, *written]


def read_pgm(path: str | Path) -> np.ndarray:
    data = Path(path).read_bytes()
    magic, width, height, maxval, pixels = data.split(maxsplit=4)
    if magic != b"P5" or int(maxval) != 255:
        raise ValueError(f"{path}: not an 8-bit binary PGM")
    return np.frombuffer(pixels, dtype=np.uint8).reshape(int(height), int(width))


def evaluate(params: CaptionerParams, records: Sequence[DatasetRecord], vocab: Vocabulary,
             max_len: int = 20, batch_size: int = 100) -> tuple[dict, list]:
    """Decode every record and score it.

    Returns the JSON-ready report and the per-record ``(record, words, trace)``
    predictions. BLEU and content are computed on fractures only; negatives
    are scored separately by exact match against the fixed sentence.
    """
    predictions = []
    for start in range(0, len(records), batch_size):
        chunk = records[start:start + batch_size]
        decoded = decode_greedy(np.stack([r.features for r in chunk]), params, max_len)
        for record, (ids, trace) in zip(chunk, decoded):
            predictions.append((record, vocab.decode(ids), trace))

    fractures = [(r, w, t) for r, w, t in predictions if r.case is not NO_FRACTURE]
    negatives = [(r, w) for r, w, _ in predictions if r.case is NO_FRACTURE]
    report: dict = {"n_records": len(records)}
    if fractures:
        bleu_report = bleu([w for _, w, _ in fractures], [render(r.case) for r, _, _ in fractures])
        report["bleu"] = bleu_report.as_dict()
        report["bleu_monotone"] = bleu_report.is_monotone()
        report["content"] = asdict(content_accuracy([w for _, w, _ in fractures],
                                                    [r.case for r, _, _ in fractures]))
        focus = {r.id: attention_focus(t, r.case) for r, _, t in fractures}
        report["attention_focus"] = {"mean": float(np.mean(list(focus.values()))), "per_record": focus}
    else:
        report["bleu"] = None
        report["content"] = None
    exact = sum(tuple(w) == NEGATIVE_SENTENCE for _, w in negatives)
    report["negatives"] = {
        "n": len(negatives),
        "exact": exact,
        "exact_rate": 100.0 * exact / len(negatives) if negatives else None,
    }
    return report, predictions


def write_report(report: dict, path: str | Path) -> None:
    Path(path).write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")


def format_report(report: dict) -> str:
    lines = []
    b = report.get("bleu")
    if b:
        lines += ["BLEU (fractures)", f"  1-gram  {b['p1']:6.2f}", f"  2-gram  {b['p2']:6.2f}",
                  f"  3-gram  {b['p3']:6.2f}", f"  4-gram  {b['p4']:6.2f}",
                  f"  BP      {b['bp']:6.4f}", f"  BLEU-4  {b['cumulative']:6.2f}"]
    c = report.get("content")
    if c:
        lines += [f"Content (n={c['n']})", f"  location   {c['location_acc']:6.2f}%",
                  f"  character  {c['character_acc']:6.2f}%",
                  f"  off-by-one {c['off_by_one']}", f"  unparseable {c['unparseable']}"]
    neg = report["negatives"]
    if neg["n"]:
        lines.append(f"Negatives exact {neg['exact']}/{neg['n']} ({neg['exact_rate']:.2f}%)")
    if "attention_focus" in report:
        lines.append(f"Attention focus (mean) {report['attention_focus']['mean']:.3f}")
    return "\n".join(lines)
