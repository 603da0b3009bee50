import json

import pytest

from diffcap.cli import main
from diffcap.config import RunConfig
from diffcap.scenegen import load_dataset

TINY = {
    "model": {"layers": 1, "d_model": 16, "heads": 2, "d_ff": 32},
    "train": {"epochs": 1, "batch_size": 32, "lr": 1e-3, "val_limit": 8},
}


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    data = root / "scenes.jsonl"
    assert main(["gen-data", "--n", "120", "--seed", "5", "--out", str(data)]) == 0
    cfg = root / "tiny.json"
    cfg.write_text(json.dumps(TINY))
    assert main(["train", "--config", str(cfg), "--data", str(data), "--out", str(root / "run"), "--deterministic"]) == 0
    return root


def _ckpt(ws):
    return str(ws / "run" / "best.ckpt")


class TestGenData:
    def test_same_seed_byte_identical(self, tmp_path):
        for name in ("a", "b"):
            assert main(["gen-data", "--n", "40", "--seed", "7", "--out", str(tmp_path / name)]) == 0
        assert (tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes()

    def test_zero_scenes_is_usage_error(self, tmp_path):
        assert main(["gen-data", "--n", "0", "--out", str(tmp_path / "x")]) == 2

    def test_default_split_sizes(self, tmp_path):
        out = tmp_path / "d.jsonl"
        assert main(["gen-data", "--seed", "1", "--out", str(out)]) == 0
        assert [len(load_dataset(out, s)) for s in ("train", "val", "test")] == [4500, 250, 250]


class TestTrain:
    def test_outputs_written(self, workspace):
        run = workspace / "run"
        for name in ("best.ckpt", "last.ckpt", "metrics.jsonl", "vocab.txt", "timing.json"):
            assert (run / name).exists()

    def test_bad_config_key_is_usage_error(self, workspace, tmp_path):
        cfg = tmp_path / "bad.json"
        cfg.write_text(json.dumps({"train": {"epochz": 3}}))
        assert main(["train", "--config", str(cfg), "--data", str(workspace / "scenes.jsonl"), "--out", str(tmp_path)]) == 2

    def test_missing_dataset_is_usage_error(self, tmp_path):
        assert main(["train", "--data", str(tmp_path / "nope.jsonl"), "--out", str(tmp_path / "o")]) == 2

    def test_unknown_flag_is_usage_error(self):
        assert main(["train", "--bogus"]) == 2

    def test_resume_keeps_steps_increasing(self, workspace, tmp_path):
        cfg = RunConfig.from_dict(TINY).with_updates(train={"epochs": 2})
        path = tmp_path / "two.json"
        path.write_text(json.dumps(cfg.to_dict()))
        args = ["train", "--config", str(path), "--data", str(workspace / "scenes.jsonl"), "--out", str(tmp_path / "r")]
        assert main(args + ["--resume", str(workspace / "run" / "last.ckpt")]) == 0
        rows = [json.loads(x) for x in (tmp_path / "r" / "metrics.jsonl").read_text().splitlines()]
        first = json.loads((workspace / "run" / "metrics.jsonl").read_text().splitlines()[-1])
        assert [r["epoch"] for r in rows] == [1] and rows[0]["step"] > first["step"]


class TestSampling:
    def test_sample_writes_one_caption_per_scene(self, workspace, tmp_path):
        out = tmp_path / "caps.txt"
        data = str(workspace / "scenes.jsonl")
        assert main(["sample", "--checkpoint", _ckpt(workspace), "--input", data, "--limit", "5", "--out", str(out)]) == 0
        assert len(out.read_text().splitlines()) == 5

    @pytest.mark.parametrize("length", ["oracle", "predicted", "6"])
    def test_length_sources(self, workspace, tmp_path, length):
        out = tmp_path / "caps.txt"
        args = ["sample", "--checkpoint", _ckpt(workspace), "--input", str(workspace / "scenes.jsonl")]
        assert main(args + ["--limit", "3", "--length", length, "--out", str(out)]) == 0
        lines = out.read_text().splitlines()
        if length == "6":
            assert all(len(line.split()) == 6 for line in lines)
        if length == "oracle":
            refs = [r.caption for r in load_dataset(workspace / "scenes.jsonl", "test")[:3]]
            assert [len(x.split()) for x in lines] == [len(r.split()) for r in refs]

    def test_bad_length_is_usage_error(self, workspace):
        args = ["sample", "--checkpoint", _ckpt(workspace), "--input", str(workspace / "scenes.jsonl")]
        assert main(args + ["--length", "sideways"]) == 2

    def test_vocab_mismatch_is_usage_error(self, workspace, tmp_path):
        vocab = tmp_path / "v.txt"
        vocab.write_text("a\nb\n[MASK]\n[PAD]\n")
        args = ["sample", "--checkpoint", _ckpt(workspace), "--input", str(workspace / "scenes.jsonl")]
        assert main(args + ["--vocab", str(vocab)]) == 2

    def test_missing_checkpoint_is_usage_error(self, workspace, tmp_path):
        args = ["sample", "--checkpoint", str(tmp_path / "none.ckpt"), "--input", str(workspace / "scenes.jsonl")]
        assert main(args) == 2

    def test_trace_file(self, workspace, tmp_path):
        trace = tmp_path / "t.jsonl"
        args = ["sample", "--checkpoint", _ckpt(workspace), "--input", str(workspace / "scenes.jsonl")]
        assert main(args + ["--limit", "2", "--trace", str(trace), "--out", str(tmp_path / "c")]) == 0
        assert trace.read_text().strip()

    def test_zero_hole_infill_echoes_input(self, workspace, tmp_path):
        rec = load_dataset(workspace / "scenes.jsonl", "test")[0]
        rows = tmp_path / "in.jsonl"
        rows.write_text(json.dumps({"scene": rec.scene.to_dict(), "template": rec.caption}) + "\n")
        out = tmp_path / "out.txt"
        assert main(["infill", "--checkpoint", _ckpt(workspace), "--input", str(rows), "--out", str(out)]) == 0
        assert out.read_text().strip() == rec.caption

    def test_infill_from_caption_keeps_non_color_words(self, workspace, tmp_path):
        rec = load_dataset(workspace / "scenes.jsonl", "test")[1]
        rows = tmp_path / "in.jsonl"
        rows.write_text(json.dumps({"scene": rec.scene.to_dict(), "caption": rec.caption}) + "\n")
        out = tmp_path / "out.txt"
        assert main(["infill", "--checkpoint", _ckpt(workspace), "--input", str(rows), "--out", str(out)]) == 0
        got, ref = out.read_text().split(), rec.caption.split()
        keep = [i for i in range(len(ref)) if i not in rec.color_positions]
        assert len(got) == len(ref) and [got[i] for i in keep] == [ref[i] for i in keep]

    def test_eval_report_fields_in_range(self, workspace, tmp_path):
        out = tmp_path / "report.json"
        args = ["eval", "--checkpoint", _ckpt(workspace), "--input", str(workspace / "scenes.jsonl")]
        assert main(args + ["--limit", "6", "--out", str(out)]) == 0
        rep = json.loads(out.read_text())
        for key in ("token_accuracy", "exact_match", "bleu4", "infill_accuracy"):
            assert 0.0 <= rep[key] <= 1.0
        assert rep["n_samples"] == 6
        assert sum(rep["length_histogram"]["counts"]) == 6
        assert rep["settings"]["sampler"]["guidance_scale"] == pytest.approx(1.17)


class TestInspectAndCheck:
    def test_schedule_tsv(self, tmp_path):
        out = tmp_path / "s.tsv"
        assert main(["inspect-schedule", "--T", "20", "--n-text", "5", "--out", str(out)]) == 0
        lines = out.read_text().splitlines()
        assert len(lines) == 22  # header plus t = 0..20
        row10 = dict(zip(lines[0].split("\t"), lines[11].split("\t")))
        assert float(row10["gbar"]) == pytest.approx(0.5)

    def test_schedule_from_checkpoint(self, workspace, tmp_path):
        out = tmp_path / "s.tsv"
        assert main(["inspect-schedule", "--checkpoint", _ckpt(workspace), "--out", str(out)]) == 0
        assert len(out.read_text().splitlines()) == 22

    def test_invalid_schedule_is_usage_error(self):
        assert main(["inspect-schedule", "--c-u", "1.5"]) == 2

    def test_gradcheck_passes(self, capsys):
        assert main(["gradcheck"]) == 0
        assert "max relative error" in capsys.readouterr().out


def test_deterministic_sampling_repeats(workspace, tmp_path):
    outs = []
    for k in range(2):
        out = tmp_path / f"c{k}.txt"
        args = ["sample", "--checkpoint", _ckpt(workspace), "--input", str(workspace / "scenes.jsonl")]
        assert main(args + ["--deterministic", "--seed", "3", "--out", str(out)]) == 0
        outs.append(out.read_bytes())
    assert outs[0] == outs[1]
