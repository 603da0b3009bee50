"""Caption metrics: token accuracy, exact match, BLEU-4, length error, infilling."""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import asdict, dataclass, field
from typing import Sequence

LENGTH_BIN_EDGES = (0.0, 0.05, 0.1, 0.15, 0.2, 0.25, math.inf)


def token_accuracy(pred: Sequence, ref: Sequence) -> float:
    correct, total = token_counts(pred, ref)
    return 1.0 if total == 0 else correct / total


def token_counts(pred: Sequence, ref: Sequence) -> tuple[int, int]:
    """Position-wise matches and the longer of the two lengths."""
    correct = sum(1 for a, b in zip(pred, ref) if a == b)
    return correct, max(len(pred), len(ref))


def corpus_token_accuracy(preds, refs) -> float:
    correct = total = 0
    for p, r in zip(preds, refs, strict=True):
        c, n = token_counts(p, r)
        correct += c
        total += n
    return 1.0 if total == 0 else correct / total


def exact_match(preds, refs) -> float:
    pairs = list(zip(preds, refs, strict=True))
    if not pairs:
        return 1.0
    return sum(list(p) == list(r) for p, r in pairs) / len(pairs)


def _ngrams(seq: Sequence, n: int) -> Counter:
    return Counter(tuple(seq[i : i + n]) for i in range(len(seq) - n + 1))


def bleu4(candidates, references) -> float:
    """Corpus BLEU-4 against a single reference per candidate.

    Unigram precision is unsmoothed; 2- to 4-gram precisions use add-one
    smoothing on matched and total counts. Brevity penalty is
    ``exp(1 - r/c)`` when the candidate corpus is shorter.
    """
    pairs = list(zip(candidates, references, strict=True))
    if not pairs:
        raise ValueError("BLEU needs a nonempty corpus")
    matched = [0] * 4
    totals = [0] * 4
    c_len = r_len = 0
    for cand, ref in pairs:
        cand, ref = list(cand), list(ref)
        c_len += len(cand)
        r_len += len(ref)
        for n in range(1, 5):
            cg, rg = _ngrams(cand, n), _ngrams(ref, n)
            matched[n - 1] += sum(min(c, rg[g]) for g, c in cg.items())
            totals[n - 1] += max(len(cand) - n + 1, 0)
    if c_len == 0 or matched[0] == 0:
        return 0.0
    log_p = math.log(matched[0] / totals[0])
    for n in range(1, 4):
        log_p += math.log((matched[n] + 1) / (totals[n] + 1))
    bp = 1.0 if c_len > r_len else math.exp(1.0 - r_len / c_len)
    return bp * math.exp(log_p / 4.0)


@dataclass
class LengthHistogram:
    edges: tuple[float, ...]
    counts: list[int]
    excluded: int = 0

    @property
    def mass(self) -> list[float]:
        total = sum(self.counts)
        return [c / total if total else 0.0 for c in self.counts]


def length_error_histogram(pred_lengths, true_lengths, edges=LENGTH_BIN_EDGES) -> LengthHistogram:
    """Histogram of ``|N_L - GT| / GT`` over left-closed bins."""
    pred_lengths, true_lengths = list(pred_lengths), list(true_lengths)
    if len(pred_lengths) != len(true_lengths):
        raise ValueError("length sequences must pair up")
    counts = [0] * (len(edges) - 1)
    excluded = 0
    for n, gt in zip(pred_lengths, true_lengths):
        if gt == 0:
            excluded += 1
            continue
        err = abs(n - gt) / gt
        for b in range(len(counts)):
            if edges[b] <= err < edges[b + 1]:
                counts[b] += 1
                break
    return LengthHistogram(tuple(edges), counts, excluded)


def infill_accuracy(filled: Sequence, reference: Sequence, holes: Sequence[int]) -> float:
    holes = list(holes)
    if not holes:
        return 1.0
    return sum(filled[i] == reference[i] for i in holes) / len(holes)


def corpus_infill_accuracy(filled, references, holes) -> float:
    right = total = 0
    for f, r, h in zip(filled, references, holes, strict=True):
        right += sum(f[i] == r[i] for i in h)
        total += len(h)
    return 1.0 if total == 0 else right / total


@dataclass
class EvalReport:
    token_accuracy: float
    exact_match: float
    bleu4: float
    length_histogram: dict
    infill_accuracy: float | None
    n_samples: int
    settings: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, indent=2)
