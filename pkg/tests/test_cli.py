import json

import pytest

from designfill.cli import (
    DEFAULT_CONFIG,
    UsageError,
    _load_config,
    _parse_span,
    _tupled,
    main,
)
from designfill.quantizer import build_quantizer, save_quantizer
from designfill.sequences import Attribute, ImageHref, TextContent

from conftest import tiny_quantizer_config

TINY_QUANT = [
    "--set", "quantizer.square_size=16",
    "--set", "quantizer.scaling_factor=8",
    "--set", "quantizer.codebook_size=32",
    "--set", "quantizer.code_dim=8",
    "--set", "quantizer.channels=[8,8,16,16]",
]


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """Full in-process run: datagen -> quantizer -> corpus -> lm."""
    root = tmp_path_factory.mktemp("pipe")
    data, quant, corpus, lm = (root / n for n in ("data", "quant", "corpus", "lm"))

    rc = main([
        "datagen", "--out-dir", str(data), "--count", "12", "--seed", "0",
        "--set", "datagen.canvas_width=[48,64]",
        "--set", "datagen.canvas_height=[48,64]",
        "--set", "datagen.n_images=[1,2]",
    ])
    assert rc == 0

    rc = main([
        "train-quantizer", "--data", str(data), "--out-dir", str(quant),
        *TINY_QUANT,
        "--set", "quant_train.steps=4",
        "--set", "quant_train.batch_size=4",
        "--set", "quant_train.eval_every=4",
    ])
    assert rc == 0

    rc = main([
        "build-corpus", "--data", str(data),
        "--ckpt", str(quant / "quantizer.ckpt"), "--out-dir", str(corpus),
    ])
    assert rc == 0

    rc = main([
        "train-lm", "--corpus", str(corpus / "corpus.bin"),
        "--quantizer", str(quant / "quantizer.ckpt"), "--out-dir", str(lm),
        "--set", "lm.d_model=32",
        "--set", "lm.n_layers=1",
        "--set", "lm.n_heads=2",
        "--set", "lm.max_seq_len=1024",
        "--set", "lm.fourier_frequencies=2",
        "--set", "lm_train.steps=3",
        "--set", "lm_train.batch_size=2",
        "--set", "lm_train.log_every=1",
    ])
    assert rc == 0

    manifest = json.loads((data / "manifest.json").read_text())
    return {
        "root": root,
        "data": data,
        "quant_ckpt": quant / "quantizer.ckpt",
        "lm_ckpt": lm / "lm.ckpt",
        "corpus": corpus / "corpus.bin",
        "manifest": manifest,
    }


class TestPipelineArtifacts:
    def test_dataset_layout(self, pipeline):
        data = pipeline["data"]
        assert (data / "manifest.json").exists()
        assert len(list((data / "templates").glob("*.svg"))) == 12
        assert list((data / "assets").glob("*.png"))
        assert (data / "run_manifest.json").exists()

    def test_run_manifest_contents(self, pipeline):
        rm = json.loads((pipeline["data"] / "run_manifest.json").read_text())
        assert rm["command"] == "datagen"
        assert rm["seed"] == 0
        assert rm["config"]["datagen"]["canvas_width"] == [48, 64]

    def test_quantizer_artifacts(self, pipeline):
        q = pipeline["quant_ckpt"]
        assert q.exists()
        history = json.loads((q.parent / "history.json").read_text())
        assert history[-1]["step"] == 4
        rm = json.loads((q.parent / "run_manifest.json").read_text())
        assert "dataset_manifest" in rm["inputs"]

    def test_corpus_artifact(self, pipeline):
        from designfill.sequences import read_corpus

        header, docs = read_corpus(pipeline["corpus"])
        assert header["grid_side"] == 2
        assert header["codebook_size"] == 32
        assert header["split"] == "train"
        assert len(docs) == len(pipeline["manifest"]["splits"]["train"])

    def test_lm_artifact(self, pipeline):
        from designfill.lm import load_lm

        model = load_lm(pipeline["lm_ckpt"])
        assert model.config.d_model == 32
        assert model.config.codebook_size == 32


class TestEvalQuantizerCommand:
    def test_writes_report(self, pipeline, tmp_path, capsys):
        rc = main([
            "eval-quantizer", "--data", str(pipeline["data"]),
            "--ckpt", str(pipeline["quant_ckpt"]),
            "--out-dir", str(tmp_path / "out"), "--split", "test",
        ])
        assert rc == 0
        report = json.loads((tmp_path / "out" / "report.json").read_text())
        assert report["count"] >= 1
        assert "rgb_mse_x1e3" in report
        out = capsys.readouterr().out
        assert "RGB MSE (x1e-3)" in out


class TestCompleteCommand:
    def test_attr_completion(self, pipeline, tmp_path):
        tid = pipeline["manifest"]["splits"]["test"][0]
        out = tmp_path / "done"
        rc = main([
            "complete", "--data", str(pipeline["data"]),
            "--lm", str(pipeline["lm_ckpt"]),
            "--quantizer", str(pipeline["quant_ckpt"]),
            "--template-id", tid, "--task", "attr", "--span", "0:x",
            "--out-dir", str(out), "--set", "sampler.greedy=true",
        ])
        assert rc == 0
        transcript = json.loads((out / "transcript.json").read_text())
        assert transcript["task"] == "attr"
        assert isinstance(transcript["middle_literal"], str)
        assert (out / "input.png").exists()
        assert (out / "original.png").exists()

    def test_deterministic_transcript(self, pipeline, tmp_path):
        from designfill.datagen import load_dataset

        tid = pipeline["manifest"]["splits"]["test"][0]
        _, templates = load_dataset(pipeline["data"], split="test")
        last = len(templates[tid].elements) - 1  # generator puts texts last
        argv = lambda out: [
            "complete", "--data", str(pipeline["data"]),
            "--lm", str(pipeline["lm_ckpt"]),
            "--quantizer", str(pipeline["quant_ckpt"]),
            "--template-id", tid, "--task", "text", "--span", str(last),
            "--out-dir", str(out), "--seed", "3",
        ]
        assert main(argv(tmp_path / "a")) == 0
        assert main(argv(tmp_path / "b")) == 0
        ta = (tmp_path / "a" / "transcript.json").read_bytes()
        tb = (tmp_path / "b" / "transcript.json").read_bytes()
        assert ta == tb

    def test_unknown_template_id(self, pipeline, tmp_path, capsys):
        rc = main([
            "complete", "--data", str(pipeline["data"]),
            "--lm", str(pipeline["lm_ckpt"]),
            "--quantizer", str(pipeline["quant_ckpt"]),
            "--template-id", "t99999", "--task", "attr", "--span", "0:x",
            "--out-dir", str(tmp_path / "x"),
        ])
        assert rc == 2
        assert "t99999" in capsys.readouterr().err

    def test_mismatched_quantizer_rejected(self, pipeline, tmp_path, capsys):
        other = tmp_path / "other.ckpt"
        save_quantizer(other, build_quantizer(tiny_quantizer_config(), seed=123), {})
        tid = pipeline["manifest"]["splits"]["test"][0]
        rc = main([
            "complete", "--data", str(pipeline["data"]),
            "--lm", str(pipeline["lm_ckpt"]),
            "--quantizer", str(other),
            "--template-id", tid, "--task", "attr", "--span", "0:x",
            "--out-dir", str(tmp_path / "x"),
        ])
        assert rc == 2
        assert "codebook" in capsys.readouterr().err


class TestEvaluateCommand:
    def run_eval_cmd(self, pipeline, out):
        return main([
            "evaluate", "--data", str(pipeline["data"]),
            "--lm", str(pipeline["lm_ckpt"]),
            "--quantizer", str(pipeline["quant_ckpt"]),
            "--task", "attr", "--split", "test", "--max-templates", "1",
            "--out-dir", str(out), "--set", "sampler.greedy=true",
        ])

    def test_report_files(self, pipeline, tmp_path):
        assert self.run_eval_cmd(pipeline, tmp_path / "ev") == 0
        report = json.loads((tmp_path / "ev" / "report.json").read_text())
        assert report["task"] == "attr"
        assert 0.0 <= report["overall_accuracy"] <= 1.0
        assert report["cases"] >= 1
        assert "columns" in report
        csv = (tmp_path / "ev" / "suffix_breakdown.csv").read_text()
        assert csv.startswith("suffix_lo,suffix_hi,count,accuracy")
        assert (tmp_path / "ev" / "report.txt").exists()

    def test_deterministic_report(self, pipeline, tmp_path):
        assert self.run_eval_cmd(pipeline, tmp_path / "a") == 0
        assert self.run_eval_cmd(pipeline, tmp_path / "b") == 0
        ra = (tmp_path / "a" / "report.json").read_bytes()
        rb = (tmp_path / "b" / "report.json").read_bytes()
        assert ra == rb


class TestErrorPaths:
    def test_unknown_flag_is_usage_error(self, tmp_path, capsys):
        rc = main(["datagen", "--out-dir", str(tmp_path / "x"), "--bogus"])
        assert rc == 1
        assert "usage error" in capsys.readouterr().err

    def test_bad_set_syntax(self, tmp_path, capsys):
        rc = main(["datagen", "--out-dir", str(tmp_path / "x"), "--set", "nokey"])
        assert rc == 1
        rc = main(["datagen", "--out-dir", str(tmp_path / "y"), "--set", "bogus.key=1"])
        assert rc == 1

    def test_missing_config_file(self, tmp_path, capsys):
        rc = main([
            "datagen", "--out-dir", str(tmp_path / "x"),
            "--config", str(tmp_path / "none.json"),
        ])
        assert rc == 2

    def test_unknown_config_section(self, tmp_path, capsys):
        cfg = tmp_path / "cfg.json"
        cfg.write_text('{"mystery": {}}')
        rc = main(["datagen", "--out-dir", str(tmp_path / "x"), "--config", str(cfg)])
        assert rc == 2
        assert "mystery" in capsys.readouterr().err

    def test_missing_dataset(self, tmp_path, capsys):
        rc = main([
            "train-quantizer", "--data", str(tmp_path / "nodata"),
            "--out-dir", str(tmp_path / "x"),
        ])
        assert rc == 2

    def test_overwrite_guard(self, tmp_path, capsys):
        out = tmp_path / "ds"
        args = [
            "datagen", "--out-dir", str(out), "--count", "2",
            "--set", "datagen.canvas_width=[48,48]",
            "--set", "datagen.canvas_height=[48,48]",
        ]
        assert main(args) == 0
        assert main(args) == 1
        assert "overwrite" in capsys.readouterr().err
        assert main(args + ["--overwrite"]) == 0

    def test_corpus_quantizer_shape_mismatch(self, pipeline, tmp_path, capsys):
        coarse = tiny_quantizer_config(scaling_factor=4, channels=(8, 8, 16))  # grid 4x4
        other = tmp_path / "coarse.ckpt"
        save_quantizer(other, build_quantizer(coarse, seed=0), {})
        rc = main([
            "train-lm", "--corpus", str(pipeline["corpus"]),
            "--quantizer", str(other), "--out-dir", str(tmp_path / "x"),
        ])
        assert rc == 2
        assert "disagree" in capsys.readouterr().err


class TestHelpers:
    def test_parse_span_forms(self):
        assert _parse_span("attr", "1:x") == Attribute(1, "x")
        assert _parse_span("image", "2") == ImageHref(2)
        assert _parse_span("text", "4") == TextContent(4)
        with pytest.raises(UsageError):
            _parse_span("attr", "x")
        with pytest.raises(UsageError):
            _parse_span("image", "abc")

    def test_load_config_deep_copies_defaults(self):
        cfg = _load_config(None, ["lm.d_model=32"])
        assert cfg["lm"]["d_model"] == 32
        assert DEFAULT_CONFIG["lm"] == {}

    def test_set_value_parsing(self):
        cfg = _load_config(None, [
            "lm.d_model=32",
            "datagen.fonts=[\"Arial\"]",
            "sampler.greedy=true",
            "datagen.note=hello",
        ])
        assert cfg["lm"]["d_model"] == 32
        assert cfg["datagen"]["fonts"] == ["Arial"]
        assert cfg["sampler"]["greedy"] is True
        assert cfg["datagen"]["note"] == "hello"

    def test_tupled(self):
        assert _tupled([1, 2]) == (1, 2)
        assert _tupled("x") == "x"
        assert _tupled(3) == 3
