import json

import numpy as np
import pytest

from textrich.checkpoint import build_model, checkpoint_from_model, read_checkpoint, save_checkpoint
from textrich.cli import main
from textrich.codec import Vocab
from textrich.decoder import DecoderConfig
from textrich.encoder import EncoderConfig
from textrich.model import ModelConfig
from textrich.sampler import SamplerConfig
from textrich.synth.imageio import write_pnm


def small_model_dict(bins: int = 10) -> dict:
    """64 px model with toy widths, so synthetic images feed it directly."""
    enc = EncoderConfig(input_size=64, patch_size=4, window_size=2, stage_depths=[1, 1, 1, 1],
                        stage_dims=[4, 8, 16, 32], stage_heads=[1, 1, 2, 2], mlp_ratio=2)
    smp = SamplerConfig(queries_per_stage=2, depth=1, decoder_dim=8, heads=2, mlp_ratio=2, stage_dims=[16, 32])
    dec = DecoderConfig(layers=1, heads=2, hidden=8, ffn_mult=2, max_seq=128, vocab_size=Vocab(bins).size)
    return ModelConfig(enc, smp, dec, bins).to_dict()


def run_config(**extra) -> dict:
    stage = {"batch_size": 2, "max_seq": 128, "log_every": 1}
    cfg = {"model": small_model_dict(), "seed": 0, "counts": {"spotting": 4, "doc_vqa": 2},
           "generator": {"bins": 10, "word_count": [1, 2], "word_length": [2, 3]},
           "stages": {"1": dict(stage), "2": dict(stage), "3": dict(stage)}, "finetune_every": 2}
    cfg.update(extra)
    return cfg


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """Synthesized data plus a short stage-1 run shared by the read-only tests."""
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "run.json"
    cfg.write_text(json.dumps(run_config()))
    assert main(["synth", "--config", str(cfg), "--out", str(root / "data")]) == 0
    assert main(["train", "--config", str(cfg), "--data", str(root / "data" / "data.jsonl"),
                 "--out", str(root / "run"), "--steps", "3"]) == 0
    return root


def read_lines(path):
    return [json.loads(line) for line in path.read_text().splitlines()]


class TestSynth:
    def test_counts_table(self, tmp_path, capsys):
        assert main(["synth", "--out", str(tmp_path), "--task", "kie", "--count", "3"]) == 0
        out = capsys.readouterr().out.splitlines()
        assert out == ["task\tcount", "kie\t3"]
        recs = read_lines(tmp_path / "data.jsonl")
        assert len(recs) == 3 and all(r["task"] == "kie" for r in recs)
        assert len(list((tmp_path / "images").iterdir())) == 3

    def test_deterministic(self, tmp_path):
        for d in ("a", "b"):
            assert main(["synth", "--out", str(tmp_path / d), "--task", "spotting", "--count", "4", "--seed", "7"]) == 0
        assert (tmp_path / "a" / "data.jsonl").read_bytes() == (tmp_path / "b" / "data.jsonl").read_bytes()
        for img in (tmp_path / "a" / "images").iterdir():
            assert img.read_bytes() == (tmp_path / "b" / "images" / img.name).read_bytes()

    def test_seed_changes_output(self, tmp_path):
        for d, seed in (("a", "1"), ("b", "2")):
            main(["synth", "--out", str(tmp_path / d), "--task", "spotting", "--count", "4", "--seed", seed])
        assert (tmp_path / "a" / "data.jsonl").read_bytes() != (tmp_path / "b" / "data.jsonl").read_bytes()

    def test_chart_format(self, tmp_path):
        assert main(["synth", "--out", str(tmp_path), "--task", "chart_parse", "--count", "2", "--format", "json"]) == 0
        for rec in read_lines(tmp_path / "data.jsonl"):
            json.loads(rec["target"])

    def test_unknown_task(self, tmp_path, capsys):
        assert main(["synth", "--out", str(tmp_path / "x"), "--task", "poetry"]) == 1
        assert "unknown task" in capsys.readouterr().err
        assert not (tmp_path / "x").exists()

    def test_count_without_task(self, tmp_path):
        assert main(["synth", "--out", str(tmp_path), "--count", "3"]) == 1

    def test_bad_config_key(self, tmp_path):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"nonsense": 1}))
        assert main(["synth", "--config", str(cfg), "--out", str(tmp_path)]) == 1

    def test_invalid_json_config(self, tmp_path):
        cfg = tmp_path / "c.json"
        cfg.write_text("{")
        assert main(["synth", "--config", str(cfg), "--out", str(tmp_path)]) == 1


class TestTrain:
    def test_outputs(self, workspace):
        run = workspace / "run"
        assert {p.name for p in run.iterdir()} == {"stage1.ckpt", "train_log.csv", "loss.png"}
        assert (run / "loss.png").read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"
        rows = (run / "train_log.csv").read_text().splitlines()
        assert rows[0] == "stage,step,loss,accuracy,image_size,lr"
        assert len(rows) == 1 + 3

    def test_summary_table(self, tmp_path, capsys):
        cfg = tmp_path / "run.json"
        cfg.write_text(json.dumps(run_config()))
        main(["synth", "--config", str(cfg), "--out", str(tmp_path / "data")])
        capsys.readouterr()
        assert main(["train", "--config", str(cfg), "--data", str(tmp_path / "data" / "data.jsonl"),
                     "--out", str(tmp_path / "run"), "--stage", "1,2,3", "--steps", "2"]) == 0
        lines = capsys.readouterr().out.splitlines()
        assert lines[0] == "stage\tsteps\tfinal_loss\tskipped\tcheckpoint"
        assert [ln.split("\t")[0] for ln in lines[1:]] == ["1", "2", "3"]
        assert read_checkpoint(tmp_path / "run" / "stage3.ckpt").lineage[-1]["stage"] == 3
        assert len(read_checkpoint(tmp_path / "run" / "stage3.ckpt").lineage) == 3

    def test_init_continues_lineage(self, workspace, tmp_path):
        assert main(["train", "--config", str(workspace / "run.json"),
                     "--data", str(workspace / "data" / "data.jsonl"), "--out", str(tmp_path),
                     "--init", str(workspace / "run" / "stage1.ckpt"), "--stage", "2", "--steps", "1"]) == 0
        lineage = read_checkpoint(tmp_path / "stage2.ckpt").lineage
        assert [e["stage"] for e in lineage] == [1, 2]

    def test_missing_data(self, tmp_path, capsys):
        assert main(["train", "--data", str(tmp_path / "none.jsonl"), "--out", str(tmp_path / "o")]) == 2
        assert "not found" in capsys.readouterr().err

    @pytest.mark.parametrize("stages", ["4", "2,1", "a", ""])
    def test_bad_stage_list(self, workspace, tmp_path, stages):
        assert main(["train", "--data", str(workspace / "data" / "data.jsonl"), "--out", str(tmp_path),
                     "--stage", stages]) == 1

    def test_non_finite_weights_abort(self, workspace, tmp_path):
        ckpt = read_checkpoint(workspace / "run" / "stage1.ckpt")
        model = build_model(ckpt)
        model.parameters()[0].data[...] = np.nan
        bad = tmp_path / "bad.ckpt"
        save_checkpoint(bad, checkpoint_from_model(model))
        code = main(["train", "--config", str(workspace / "run.json"),
                     "--data", str(workspace / "data" / "data.jsonl"), "--out", str(tmp_path / "o"),
                     "--init", str(bad), "--steps", "2"])
        assert code == 3


class TestInfer:
    def test_single_image_spotting(self, workspace, capsys):
        rec = read_lines(workspace / "data" / "data.jsonl")[0]
        image = workspace / "data" / rec["image"]
        assert main(["infer", str(workspace / "run" / "stage1.ckpt"), str(image), "--task", "spotting",
                     "--max-new", "8"]) == 0
        lines = capsys.readouterr().out.splitlines()
        payload = json.loads(lines[-1])
        assert set(payload) == {"instances", "diagnostics"}

    def test_dataset_mode(self, workspace, tmp_path):
        out = tmp_path / "pred.jsonl"
        args = ["infer", str(workspace / "run" / "stage1.ckpt"), "--data", str(workspace / "data" / "data.jsonl"),
                "--out", str(out), "--max-new", "6"]
        assert main(args) == 0
        preds = read_lines(out)
        gts = read_lines(workspace / "data" / "data.jsonl")
        assert [p["id"] for p in preds] == [g["id"] for g in gts]
        assert all(set(p) == {"id", "task", "output"} for p in preds)
        first = out.read_bytes()
        assert main(args) == 0
        assert out.read_bytes() == first

    def test_dataset_task_filter(self, workspace, tmp_path):
        out = tmp_path / "pred.jsonl"
        assert main(["infer", str(workspace / "run" / "stage1.ckpt"), "--data",
                     str(workspace / "data" / "data.jsonl"), "--out", str(out), "--task", "doc_vqa",
                     "--max-new", "4"]) == 0
        assert {p["task"] for p in read_lines(out)} == {"doc_vqa"}

    def test_unknown_task(self, workspace, capsys):
        assert main(["infer", str(workspace / "run" / "stage1.ckpt"), "--task", "poetry"]) == 1
        assert "unknown task" in capsys.readouterr().err

    def test_size_mismatch(self, workspace, tmp_path, capsys):
        img = tmp_path / "small.ppm"
        write_pnm(img, np.zeros((32, 32, 3), dtype=np.uint8))
        assert main(["infer", str(workspace / "run" / "stage1.ckpt"), str(img), "--task", "spotting"]) == 2
        assert "expects 64x64" in capsys.readouterr().err

    def test_missing_param(self, workspace):
        rec = read_lines(workspace / "data" / "data.jsonl")[0]
        image = workspace / "data" / rec["image"]
        assert main(["infer", str(workspace / "run" / "stage1.ckpt"), str(image), "--task", "doc_vqa"]) == 1

    def test_corrupt_checkpoint(self, workspace, tmp_path, capsys):
        data = bytearray((workspace / "run" / "stage1.ckpt").read_bytes())
        data[len(data) // 2] ^= 0xFF
        bad = tmp_path / "bad.ckpt"
        bad.write_bytes(bytes(data))
        assert main(["infer", str(bad), "--task", "pure_text"]) == 2


class TestEval:
    def test_self_eval(self, workspace, tmp_path, capsys):
        gts = read_lines(workspace / "data" / "data.jsonl")
        pred = tmp_path / "pred.jsonl"
        pred.write_text("".join(json.dumps({"id": g["id"], "task": g["task"], "output": g["target"]}) + "\n"
                                for g in gts))
        assert main(["eval", str(pred), str(workspace / "data" / "data.jsonl"), "--out", str(tmp_path / "r")]) == 0
        report = json.loads(capsys.readouterr().out)
        assert report["metrics"] and all(m["value"] == 1.0 for m in report["metrics"])
        assert json.loads((tmp_path / "r" / "report.json").read_text()) == report
        assert (tmp_path / "r" / "metrics.png").read_bytes()[:4] == b"\x89PNG"

    def test_missing_file(self, workspace, tmp_path):
        assert main(["eval", str(tmp_path / "none.jsonl"), str(workspace / "data" / "data.jsonl")]) == 2

    def test_unknown_task(self, workspace):
        path = str(workspace / "data" / "data.jsonl")
        assert main(["eval", path, path, "--task", "poetry"]) == 1


class TestInspect:
    def test_header_and_stats(self, workspace, capsys):
        assert main(["inspect", str(workspace / "run" / "stage1.ckpt")]) == 0
        out = capsys.readouterr().out
        head, table = out.split("name\tdtype\tshape", 1)
        header = json.loads(head)
        assert header["optimizer_moments"] > 0
        rows = table.strip().splitlines()[1:]
        assert len(rows) == len(build_model(read_checkpoint(workspace / "run" / "stage1.ckpt")).parameters())

    def test_missing(self, tmp_path):
        assert main(["inspect", str(tmp_path / "none.ckpt")]) == 2


class TestEntryPoint:
    def test_help(self, capsys):
        assert main(["--help"]) == 0
        assert "synth" in capsys.readouterr().out

    def test_no_command(self):
        assert main([]) == 1

    def test_unknown_flag(self):
        assert main(["synth", "--bogus"]) == 1

    def test_thread_limit(self, tmp_path, monkeypatch):
        monkeypatch.setenv("STXV3_THREADS", "1")
        assert main(["synth", "--out", str(tmp_path), "--task", "spotting", "--count", "1"]) == 0

    def test_bad_thread_limit(self, tmp_path, monkeypatch):
        monkeypatch.setenv("STXV3_THREADS", "many")
        assert main(["synth", "--out", str(tmp_path), "--task", "spotting", "--count", "1"]) == 1
