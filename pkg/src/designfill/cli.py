"""Batch command line for the full pipeline.

Subcommands map onto the pipeline stages: datagen, train-quantizer,
eval-quantizer, build-corpus, train-lm, complete, evaluate. Every run
writes a run_manifest.json with the resolved config and content hashes of
its inputs. Exit codes: 0 ok, 1 usage, 2 data/validation error, 3 numeric
failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import datagen as dg
from . import evaluation as ev
from . import lm as lm_mod
from . import quantizer as qz
from . import sequences as seq
from .sampling import SamplerConfig
from .svg_codec import serialize
from .templates import ImageElement, TextElement
from .utils import NonFiniteLoss, canonical_json, set_determinism, sha256_file, write_text


class UsageError(ValueError):
    pass


class DataError(ValueError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


DEFAULT_CONFIG = {
    "datagen": {},       # GenConfig overrides
    "quantizer": {},     # QuantizerConfig overrides
    "quant_train": {},   # QuantTrainConfig overrides
    "lm": {},            # LMConfig overrides (codebook fields come from the quantizer)
    "lm_train": {},      # LMTrainConfig overrides
    "sampler": {},       # SamplerConfig overrides
}


def _load_config(path, sets):
    cfg = json.loads(json.dumps(DEFAULT_CONFIG))
    if path:
        p = Path(path)
        if not p.exists():
            raise DataError(f"config file {p} does not exist")
        user = json.loads(p.read_text(encoding="utf-8"))
        for k, v in user.items():
            if k not in cfg:
                raise DataError(f"unknown config section {k!r}")
            cfg[k].update(v)
    for item in sets or []:
        if "=" not in item:
            raise UsageError(f"--set needs section.key=value, got {item!r}")
        dotted, raw = item.split("=", 1)
        parts = dotted.split(".")
        if len(parts) != 2 or parts[0] not in cfg:
            raise UsageError(f"--set path must be <section>.<key>, got {dotted!r}")
        try:
            val = json.loads(raw)
        except json.JSONDecodeError:
            val = raw
        cfg[parts[0]][parts[1]] = val
    return cfg


def _prep_out_dir(args) -> Path:
    out = Path(args.out_dir)
    if out.exists() and any(out.iterdir()) and not args.overwrite:
        raise UsageError(f"output directory {out} is not empty (pass --overwrite)")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_run_manifest(out: Path, args, cfg, inputs: dict):
    manifest = {
        "command": args.command,
        "seed": args.seed,
        "deterministic": bool(args.deterministic),
        "config": cfg,
        "inputs": {k: sha256_file(v) for k, v in inputs.items() if Path(v).exists()},
    }
    write_text(out / "run_manifest.json", canonical_json(manifest))


def _dataset_payload_images(templates):
    seen, images = set(), []
    for t in templates:
        for el in t.elements:
            if isinstance(el, ImageElement) and hasattr(el.payload, "pixels"):
                key = el.payload.pixels.tobytes()
                if key not in seen:
                    seen.add(key)
                    images.append(el.payload)
    return images


# ---------------------------------------------------------------------------
# subcommands


def cmd_datagen(args, cfg):
    out = _prep_out_dir(args)
    gen_cfg = dg.GenConfig(**{k: _tupled(v) for k, v in cfg["datagen"].items()})
    templates = dg.generate_templates(args.seed, args.count, gen_cfg)
    dg.save_dataset(out, templates)
    _write_run_manifest(out, args, cfg, {})
    print(f"wrote {len(templates)} templates to {out}")
    return 0


def _tupled(v):
    return tuple(v) if isinstance(v, list) else v


def cmd_train_quantizer(args, cfg):
    out = _prep_out_dir(args)
    _, templates = dg.load_dataset(args.data, split="train")
    images = _dataset_payload_images(templates.values())
    if not images:
        raise DataError(f"no raster payloads in the train split of {args.data}")
    qcfg = qz.QuantizerConfig(**{k: _tupled(v) for k, v in cfg["quantizer"].items()})
    model = qz.build_quantizer(qcfg, seed=args.seed)
    tcfg = qz.QuantTrainConfig(seed=args.seed, **cfg["quant_train"])
    history = qz.fit_quantizer(model, images, tcfg, log=lambda r: print(_fmt(r)))
    qz.save_quantizer(out / "quantizer.ckpt", model, {"train_steps": history[-1]["step"]})
    write_text(out / "history.json", canonical_json(history))
    _write_run_manifest(out, args, cfg, {"dataset_manifest": Path(args.data) / "manifest.json"})
    print(f"saved {out / 'quantizer.ckpt'} after {history[-1]['step']} steps")
    return 0


def _fmt(rec: dict) -> str:
    return " ".join(
        f"{k}={v:.5f}" if isinstance(v, float) else f"{k}={v}" for k, v in rec.items()
    )


def cmd_eval_quantizer(args, cfg):
    out = _prep_out_dir(args)
    model = qz.load_quantizer(args.ckpt)
    _, templates = dg.load_dataset(args.data, split=args.split)
    images = _dataset_payload_images(templates.values())
    if not images:
        raise DataError(f"no raster payloads in split {args.split!r}")
    metrics = ev.recon_metrics(model, images)
    write_text(out / "report.json", canonical_json(metrics))
    write_text(out / "report.txt", ev.format_recon_table(metrics))
    _write_run_manifest(out, args, cfg, {"ckpt": args.ckpt})
    print(ev.format_recon_table(metrics), end="")
    return 0


def cmd_build_corpus(args, cfg):
    out = _prep_out_dir(args)
    model = qz.load_quantizer(args.ckpt)
    _, templates = dg.load_dataset(args.data, split=args.split)
    docs = [seq.build_document_stream(t, model) for t in templates.values()]
    seq.write_corpus(
        out / "corpus.bin",
        docs,
        grid_side=model.config.grid_side,
        codebook_size=model.config.codebook_size,
        extra_header={"split": args.split, "quantizer_sha256": sha256_file(args.ckpt)},
    )
    _write_run_manifest(out, args, cfg, {"ckpt": args.ckpt})
    print(f"wrote {len(docs)} documents to {out / 'corpus.bin'}")
    return 0


def cmd_train_lm(args, cfg):
    out = _prep_out_dir(args)
    header, docs = seq.read_corpus(args.corpus)
    quant = qz.load_quantizer(args.quantizer)
    if header["grid_side"] != quant.config.grid_side or header["codebook_size"] != quant.config.codebook_size:
        raise DataError("corpus and quantizer disagree on grid/codebook shape")
    lm_cfg = lm_mod.LMConfig(
        codebook_size=quant.config.codebook_size,
        grid_side=quant.config.grid_side,
        code_dim=quant.config.code_dim,
        **cfg["lm"],
    )
    set_determinism(args.seed, args.deterministic)
    import torch

    model = lm_mod.DualHeadLM(lm_cfg, quant.codebook_numpy())
    tcfg = lm_mod.LMTrainConfig(seed=args.seed, **cfg["lm_train"])
    history = lm_mod.fit_lm(model, docs, tcfg, log=lambda r: print(_fmt(r)))
    lm_mod.save_lm(
        out / "lm.ckpt",
        model,
        {
            "quantizer_sha256": sha256_file(args.quantizer),
            "corpus_sha256": sha256_file(args.corpus),
            "train_steps": tcfg.steps,
        },
    )
    write_text(out / "history.json", canonical_json(history))
    _write_run_manifest(out, args, cfg, {"corpus": args.corpus, "quantizer": args.quantizer})
    print(f"saved {out / 'lm.ckpt'} ({sum(p.numel() for p in model.parameters())} parameters)")
    return 0


def _parse_span(task: str, span: str):
    if task == "attr":
        if ":" not in span:
            raise UsageError("--span for attr must be <element>:<name>, e.g. 0:x")
        e, name = span.split(":", 1)
        return seq.Attribute(int(e), name)
    try:
        idx = int(span)
    except ValueError:
        raise UsageError(f"--span for {task} must be an element index") from None
    return seq.ImageHref(idx) if task == "image" else seq.TextContent(idx)


def _load_models(args):
    quant = qz.load_quantizer(args.quantizer)
    model = lm_mod.load_lm(args.lm)
    if model.codebook_hash() != quant.codebook_hash():
        raise DataError("lm checkpoint was trained against a different codebook")
    return model, quant


def cmd_complete(args, cfg):
    out = _prep_out_dir(args)
    model, quant = _load_models(args)
    _, templates = dg.load_dataset(args.data, split=args.split)
    if args.template_id not in templates:
        raise DataError(f"template {args.template_id!r} not in split {args.split!r}")
    template = seq.tokenize_template(templates[args.template_id], quant)
    selector = _parse_span(args.task, args.span)
    try:
        prompt, gold = seq.make_completion_prompt(template, selector)
    except seq.SpanNotFound as e:
        raise DataError(str(e)) from None
    scfg = SamplerConfig(**cfg["sampler"])
    rng = np.random.default_rng(args.seed)
    from .sampling import generate

    result = generate(model, prompt, args.task, scfg, rng, quant.config.grid_side)
    case = ev.EvalCase(0, template, selector, None, None, prompt, gold, 0)
    completed = ev.export_qualitative(out, case, result, quant)
    transcript = {
        "task": args.task,
        "span": args.span,
        "complete": result.complete,
        "stop_reason": result.stop_reason,
        "middle_literal": seq.middle_to_literal(result.tokens, errors="backslashreplace"),
        "gold_literal": seq.middle_to_literal(gold, errors="backslashreplace"),
        "n_tokens": len(result.tokens),
    }
    write_text(out / "transcript.json", canonical_json(transcript))
    _write_run_manifest(out, args, cfg, {"lm": args.lm, "quantizer": args.quantizer})
    if completed is None:
        print(f"generation flagged: {result.stop_reason} (see pred_failed.txt)")
    else:
        print(f"completed {args.task} span {args.span}; files in {out}")
    return 0


def cmd_evaluate(args, cfg):
    out = _prep_out_dir(args)
    model, quant = _load_models(args)
    _, templates = dg.load_dataset(args.data, split=args.split)
    tlist = [seq.tokenize_template(t, quant) for t in templates.values()]
    binning = ev.AttrBinning.from_templates(tlist)
    cases = ev.build_eval_set(tlist, args.task, max_templates=args.max_templates)
    if not cases:
        raise DataError(f"no {args.task!r} cases in split {args.split!r}")
    scfg = SamplerConfig(**cfg["sampler"])
    rng = np.random.default_rng(args.seed)
    outcomes = ev.run_eval(model, cases, args.task, binning, scfg, rng, quant.config.grid_side)
    rows = ev.score_suffix_breakdown(outcomes)
    report = {
        "task": args.task,
        "split": args.split,
        "cases": len(cases),
        "overall_accuracy": ev.overall_accuracy(outcomes),
        "binning": binning.to_dict(),
        "suffix_breakdown": rows,
    }
    if args.task == "attr":
        report["columns"] = ev.accuracy_table(outcomes)
        write_text(out / "report.txt", ev.format_accuracy_table(report["columns"], binning))
    else:
        write_text(
            out / "report.txt",
            f"task {args.task}: exact-match accuracy "
            f"{report['overall_accuracy']:.3f} over {len(cases)} cases\n",
        )
    write_text(out / "report.json", canonical_json(report))
    write_text(out / "suffix_breakdown.csv", ev.suffix_breakdown_csv(rows))
    _write_run_manifest(out, args, cfg, {"lm": args.lm, "quantizer": args.quantizer})
    print((out / "report.txt").read_text(), end="")
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> _Parser:
    p = _Parser(prog="designfill", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--config", help="JSON config file with per-module sections")
        sp.add_argument("--out-dir", required=True)
        sp.add_argument("--deterministic", action="store_true", help="single-thread, seeded everywhere")
        sp.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="config override")
        sp.add_argument("--overwrite", action="store_true")

    sp = sub.add_parser("datagen", help="generate a synthetic dataset directory")
    sp.add_argument("--count", type=int, default=200)
    common(sp)

    sp = sub.add_parser("train-quantizer", help="train the image quantizer on a dataset")
    sp.add_argument("--data", required=True)
    common(sp)

    sp = sub.add_parser("eval-quantizer", help="reconstruction metrics for a checkpoint")
    sp.add_argument("--data", required=True)
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--split", default="test")
    common(sp)

    sp = sub.add_parser("build-corpus", help="tokenize a dataset split into a corpus file")
    sp.add_argument("--data", required=True)
    sp.add_argument("--ckpt", required=True, help="quantizer checkpoint")
    sp.add_argument("--split", default="train")
    common(sp)

    sp = sub.add_parser("train-lm", help="train the infilling model on a corpus")
    sp.add_argument("--corpus", required=True)
    sp.add_argument("--quantizer", required=True)
    common(sp)

    sp = sub.add_parser("complete", help="fill one span of one template")
    sp.add_argument("--data", required=True)
    sp.add_argument("--lm", required=True)
    sp.add_argument("--quantizer", required=True)
    sp.add_argument("--template-id", required=True)
    sp.add_argument("--split", default="test")
    sp.add_argument("--task", choices=("attr", "image", "text"), required=True)
    sp.add_argument("--span", required=True, help="attr: <elem>:<name>; image/text: <elem>")
    common(sp)

    sp = sub.add_parser("evaluate", help="run a completion benchmark")
    sp.add_argument("--data", required=True)
    sp.add_argument("--lm", required=True)
    sp.add_argument("--quantizer", required=True)
    sp.add_argument("--task", choices=("attr", "image", "text"), required=True)
    sp.add_argument("--split", default="test")
    sp.add_argument("--max-templates", type=int)
    common(sp)
    return p


COMMANDS = {
    "datagen": cmd_datagen,
    "train-quantizer": cmd_train_quantizer,
    "eval-quantizer": cmd_eval_quantizer,
    "build-corpus": cmd_build_corpus,
    "train-lm": cmd_train_lm,
    "complete": cmd_complete,
    "evaluate": cmd_evaluate,
}


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        cfg = _load_config(args.config, args.set)
        set_determinism(args.seed, args.deterministic)
        return COMMANDS[args.command](args, cfg)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return 1
    except NonFiniteLoss as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return 3
    except (DataError, ValueError, FileNotFoundError, KeyError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
