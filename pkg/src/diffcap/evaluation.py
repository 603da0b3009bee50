"""Run a trained model over a dataset split and score it."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import metrics
from .sampler import Denoiser, SamplerConfig, ar_infill, decode_ar, infill, sample_captions
from .scenegen import CaptionedScene
from .textcodec import Vocabulary
from .training import Batch, encode_records


@dataclass
class HoleSet:
    templates: list[list[int]]
    references: list[list[int]]
    holes: list[list[int]]


def color_holes(records: list[CaptionedScene], vocab: Vocabulary, l_max: int) -> HoleSet:
    """Blank every color word of each reference caption."""
    batch = encode_records(records, vocab, l_max)
    templates, refs, holes = [], [], []
    for rec, row, n in zip(records, batch.ids, batch.lengths):
        ref = row[:n].tolist()
        tpl = list(ref)
        for i in rec.color_positions:
            tpl[i] = vocab.mask_id
        templates.append(tpl)
        refs.append(ref)
        holes.append(list(rec.color_positions))
    return HoleSet(templates, refs, holes)


def fill_holes(model: Denoiser, features: np.ndarray, templates, config: SamplerConfig, ar: bool = False, traces=None):
    if ar:
        return ar_infill(model, features, templates)
    if not model.pad_is_token:
        return infill(model, features, templates, config, traces)
    # models that treat PAD as a token expect full-width inputs
    pad, width = model.config.pad_id, model.config.l_max
    padded = [list(t) + [pad] * (width - len(t)) for t in templates]
    out = infill(model, features, padded, config, traces)
    return [row[: len(t)] for row, t in zip(out, templates)]


def generate(model: Denoiser, batch: Batch, config: SamplerConfig, ar: bool = False, traces=None):
    """Captions (PAD-stripped id lists) and the lengths the sampler committed to."""
    if ar:
        caps = decode_ar(model, batch.features)
        return caps, np.array([len(c) for c in caps])
    caps = sample_captions(model, batch.features, config, oracle_lengths=batch.lengths, traces=traces)
    if model.pad_is_token:
        return caps, np.array([len(c) for c in caps])
    if config.length == "predicted":
        return caps, model.predicted_lengths(batch.features)
    return caps, np.array([len(c) for c in caps])


def evaluate(
    model: Denoiser,
    records: list[CaptionedScene],
    vocab: Vocabulary,
    config: SamplerConfig,
    ar: bool = False,
    with_infill: bool = True,
) -> tuple[metrics.EvalReport, list[list[int]]]:
    if not records:
        raise ValueError("nothing to evaluate: the split is empty")
    batch = encode_records(records, vocab, model.config.l_max)
    refs = [row[:n].tolist() for row, n in zip(batch.ids, batch.lengths)]
    caps, lengths = generate(model, batch, config, ar)
    hist = metrics.length_error_histogram(lengths.tolist(), batch.lengths.tolist())
    fill_acc = None
    if with_infill:
        hs = color_holes(records, vocab, model.config.l_max)
        filled = fill_holes(model, batch.features, hs.templates, config, ar)
        fill_acc = metrics.corpus_infill_accuracy(filled, hs.references, hs.holes)
    settings = {"mode": "ar" if ar else "diffusion", "sampler": asdict(config)}
    report = metrics.EvalReport(
        token_accuracy=metrics.corpus_token_accuracy(caps, refs),
        exact_match=metrics.exact_match(caps, refs),
        bleu4=metrics.bleu4(caps, refs),
        length_histogram={"edges": [str(e) for e in hist.edges], "counts": hist.counts, "mass": hist.mass},
        infill_accuracy=fill_acc,
        n_samples=len(records),
        settings=settings,
    )
    return report, caps
