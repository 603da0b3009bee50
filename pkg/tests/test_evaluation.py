import json

import numpy as np
import pytest

from diffcap import ablation
from diffcap.config import RunConfig
from diffcap.evaluation import color_holes, evaluate, fill_holes, generate
from diffcap.sampler import Denoiser, SamplerConfig
from diffcap.scenegen import COLORS, load_dataset
from diffcap.schedule import build_schedule
from diffcap.textcodec import L_MAX, build_vocab, decode
from diffcap.training import encode_records
from diffcap import denoiser as dn

TINY = {"layers": 1, "d_model": 16, "heads": 2, "d_ff": 32}


@pytest.fixture(scope="module")
def setup(small_dataset):
    train = load_dataset(small_dataset, "train")
    vocab = build_vocab([r.caption for r in train])
    cfg = dn.DenoiserConfig(vocab_size=vocab.size, **TINY)
    sched = build_schedule(cfg.T, vocab.size - 2)
    model = Denoiser(dn.init_params(cfg, seed=0), cfg, sched)
    return load_dataset(small_dataset, "test")[:6], vocab, model


def test_color_holes_blank_exactly_the_colors(setup):
    records, vocab, _ = setup
    hs = color_holes(records, vocab, L_MAX)
    for tpl, ref, holes in zip(hs.templates, hs.references, hs.holes):
        assert [i for i, t in enumerate(tpl) if t == vocab.mask_id] == holes
        assert all(vocab.tokens[ref[i]] in COLORS for i in holes)


def test_fill_holes_keeps_template_tokens(setup):
    records, vocab, model = setup
    hs = color_holes(records, vocab, L_MAX)
    feats = encode_records(records, vocab, L_MAX).features
    filled = fill_holes(model, feats, hs.templates, SamplerConfig())
    for f, tpl in zip(filled, hs.templates):
        assert len(f) == len(tpl)
        assert all(a == b for a, b in zip(f, tpl) if b != vocab.mask_id)
        assert vocab.mask_id not in f


def test_pad_token_model_infill_returns_template_width(setup):
    records, vocab, model = setup
    pad_model = Denoiser(model.params, model.config, model.schedule, pad_is_token=True)
    hs = color_holes(records, vocab, L_MAX)
    feats = encode_records(records, vocab, L_MAX).features
    filled = fill_holes(pad_model, feats, hs.templates, SamplerConfig())
    assert [len(f) for f in filled] == [len(t) for t in hs.templates]


def test_generate_reports_predicted_lengths(setup):
    records, vocab, model = setup
    batch = encode_records(records, vocab, L_MAX)
    caps, lengths = generate(model, batch, SamplerConfig(length="predicted"))
    np.testing.assert_array_equal(lengths, model.predicted_lengths(batch.features))
    assert [len(c) for c in caps] == lengths.tolist()


def test_evaluate_oracle_and_empty(setup):
    records, vocab, model = setup
    report, caps = evaluate(model, records, vocab, SamplerConfig(length="oracle"))
    assert report.n_samples == len(records) and len(caps) == len(records)
    assert report.length_histogram["mass"][0] == 1.0
    assert 0.0 <= report.infill_accuracy <= 1.0
    with pytest.raises(ValueError):
        evaluate(model, [], vocab, SamplerConfig())


def test_perfect_captions_score_one(setup):
    records, vocab, _ = setup
    refs = encode_records(records, vocab, L_MAX)
    assert all(decode(row[:n], vocab) == r.caption for row, n, r in zip(refs.ids, refs.lengths, records))


class TestAblation:
    def test_grid_shapes(self):
        assert [v.name for v in ablation.GRIDS["cumulative"]] == list("abcdefg")
        names = [v.name for v in ablation.GRIDS["components"]]
        assert {"full", "no_cam", "no_best_first", "m2m_only", "t2m_only"} <= set(names)

    def test_training_key_ignores_sampler(self):
        base = RunConfig()
        assert ablation.training_key(base) == ablation.training_key(base.with_updates(sampler={"guidance_scale": 3.0}))
        assert ablation.training_key(base) != ablation.training_key(base.with_updates(train={"cam": "off"}))

    def test_variant_without_length_head_samples_full_width(self):
        row_a = ablation.GRIDS["cumulative"][0]
        run = ablation.variant_run(RunConfig(), row_a)
        assert run.sampler.length == str(L_MAX)
        assert run.sampler.guidance_scale == 1.0 and not run.sampler.best_first

    def test_no_best_first_shares_the_full_model(self):
        grid = {v.name: v for v in ablation.GRIDS["components"]}
        keys = {n: ablation.training_key(ablation.variant_run(RunConfig(), grid[n])) for n in grid}
        assert keys["full"] == keys["no_best_first"]
        assert len({keys[n] for n in ("full", "no_cam", "m2m_only", "t2m_only")}) == 4

    def test_run_grid_caches_training(self, small_dataset, tmp_path):
        base = RunConfig(data=str(small_dataset)).with_updates(
            model=TINY, train={"epochs": 1, "batch_size": 32, "val_limit": 4}
        )
        table = ablation.run_grid(base, "timestep", tmp_path, limit=4)
        assert [r["name"] for r in table["rows"]] == ["sinusoidal", "learned", "none"]
        stamps = {p: p.stat().st_mtime_ns for p in (tmp_path / "models").glob("*/best.ckpt")}
        assert len(stamps) == 3
        again = ablation.run_grid(base, "timestep", tmp_path, limit=4)
        assert {p: p.stat().st_mtime_ns for p in stamps} == stamps
        assert json.dumps(again, sort_keys=True) == json.dumps(table, sort_keys=True)
