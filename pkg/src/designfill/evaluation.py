"""Completion benchmarks and reconstruction metrics.

Attribute completions are scored in a quantized representation: positions
and sizes fall into 64 uniform bins over the canvas extent, font sizes into
16 bins over the corpus range, font families by exact identity. A predicted
middle scores 1 iff its bin matches the gold bin; unparseable output scores
0. The quantizer report mirrors the usual reconstruction-MSE table layout:
RGB error after compositing over white (x1e-3) and alpha error (x1e-1),
next to a baseline that pretends every pixel is opaque.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, replace as dc_replace
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np

from . import tokenizer as tok
from .raster import composite_over_white, mse, resize_bilinear, write_png
from .sampling import GenerationResult, SamplerConfig, generate
from .sequences import (
    Attribute,
    ImageHref,
    Modality,
    TextContent,
    Token,
    detokenize_template,
    make_completion_prompt,
    middle_to_literal,
    tokenize_template,
)
from .svg_codec import parse, render_markup_with_spans
from .templates import Canvas, DesignTemplate, ImageElement, ImageTokenBlock, TextElement
from .utils import write_text

ATTR_TYPES = ("x", "y", "width", "height", "font-family", "font-size")

COLUMN_LABELS = {
    "x": "X",
    "y": "Y",
    "width": "Width",
    "height": "Height",
    "font-family": "Font",
    "font-size": "F-Size",
}

_INT_RE = re.compile(r"-?\d+\Z")
_REAL_RE = re.compile(r"-?\d+(\.\d+)?\Z")


@dataclass(frozen=True)
class AttrBinning:
    positional_bins: int = 64
    font_size_bins: int = 16
    font_size_range: Tuple[float, float] = (0.0, 0.0)

    @staticmethod
    def from_templates(templates: Sequence[DesignTemplate]) -> "AttrBinning":
        sizes = [
            el.font_size
            for t in templates
            for el in t.elements
            if isinstance(el, TextElement)
        ]
        rng = (min(sizes), max(sizes)) if sizes else (0.0, 0.0)
        return AttrBinning(font_size_range=rng)

    def position_bin(self, v: float, extent: int) -> int:
        b = math.floor(v * self.positional_bins / extent)
        return min(max(b, 0), self.positional_bins - 1)

    def font_size_bin(self, v: float) -> int:
        lo, hi = self.font_size_range
        if hi <= lo:
            return 0
        b = math.floor((v - lo) / (hi - lo) * self.font_size_bins)
        return min(max(b, 0), self.font_size_bins - 1)

    def to_dict(self) -> dict:
        return {
            "positional_bins": self.positional_bins,
            "font_size_bins": self.font_size_bins,
            "font_size_range": list(self.font_size_range),
        }


def score_attribute(
    pred_text: str, gold_value, attr_type: str, canvas: Canvas, binning: AttrBinning
) -> int:
    """1 iff the prediction parses as the attribute's type and lands in the
    gold value's bin."""
    pred_text = pred_text.strip()
    if attr_type in ("x", "y", "width", "height"):
        if not _INT_RE.match(pred_text):
            return 0
        pred = int(pred_text)
        extent = canvas.width if attr_type in ("x", "width") else canvas.height
        return int(binning.position_bin(pred, extent) == binning.position_bin(float(gold_value), extent))
    if attr_type == "font-size":
        if not _REAL_RE.match(pred_text):
            return 0
        return int(binning.font_size_bin(float(pred_text)) == binning.font_size_bin(float(gold_value)))
    if attr_type == "font-family":
        return int(pred_text == str(gold_value))
    raise ValueError(f"unknown attribute type {attr_type!r}")


# ---------------------------------------------------------------------------
# case construction


@dataclass
class EvalCase:
    template_index: int
    template: DesignTemplate  # token-block payloads
    selector: object
    attr_type: Optional[str]
    gold_value: object
    prompt: List[Token]
    gold_middle: List[Token]
    suffix_len: int


def _selectors_for(task: str, template: DesignTemplate):
    for i, el in enumerate(template.elements):
        if task == "attr":
            if isinstance(el, ImageElement):
                for name in ("x", "y", "width", "height"):
                    yield Attribute(i, name), name, getattr(el, name)
            else:
                yield Attribute(i, "x"), "x", el.x
                yield Attribute(i, "y"), "y", el.y
                yield Attribute(i, "font-family"), "font-family", el.font_family
                yield Attribute(i, "font-size"), "font-size", el.font_size
        elif task == "image" and isinstance(el, ImageElement):
            yield ImageHref(i), None, el.payload
        elif task == "text" and isinstance(el, TextElement):
            yield TextContent(i), None, el.content


def build_eval_set(
    templates: Sequence[DesignTemplate],
    task: str,
    max_templates: Optional[int] = None,
    quantizer=None,
) -> List[EvalCase]:
    """One case per matching span, in deterministic template-then-element
    order. Templates with raster payloads need the quantizer."""
    cases = []
    picked = templates if max_templates is None else templates[:max_templates]
    for ti, t in enumerate(picked):
        if quantizer is not None:
            t = tokenize_template(t, quantizer)
        for selector, attr_type, gold in _selectors_for(task, t):
            prompt, middle = make_completion_prompt(t, selector)
            suf_start = next(
                k for k, x in enumerate(prompt) if x.modality == Modality.TEXT and x.id == tok.FIM_SUFFIX
            )
            cases.append(
                EvalCase(
                    template_index=ti,
                    template=t,
                    selector=selector,
                    attr_type=attr_type,
                    gold_value=gold,
                    prompt=prompt,
                    gold_middle=middle,
                    suffix_len=len(prompt) - suf_start - 2,
                )
            )
    return cases


# ---------------------------------------------------------------------------
# running and scoring


@dataclass
class EvalOutcome:
    case: EvalCase
    result: GenerationResult
    pred_text: Optional[str]
    correct: int


def middle_text(tokens: Sequence[Token]) -> Optional[str]:
    try:
        return tok.decode_text([t.id for t in tokens if t.modality == Modality.TEXT])
    except ValueError:
        return None


def score_case(case: EvalCase, result: GenerationResult, binning: AttrBinning) -> EvalOutcome:
    if case.attr_type is not None:
        text = middle_text(result.tokens)
        if any(t.modality == Modality.IMAGE for t in result.tokens) or text is None:
            return EvalOutcome(case, result, None, 0)
        ok = score_attribute(text, case.gold_value, case.attr_type, case.template.canvas, binning)
        return EvalOutcome(case, result, text, ok)
    # text/image tasks: exact token match of the middle
    same = int(
        len(result.tokens) == len(case.gold_middle)
        and all(
            a.modality == b.modality and a.id == b.id
            for a, b in zip(result.tokens, case.gold_middle)
        )
    )
    return EvalOutcome(case, result, middle_text(result.tokens), same)


def run_eval(
    model,
    cases: Sequence[EvalCase],
    task: str,
    binning: AttrBinning,
    config: SamplerConfig = SamplerConfig(),
    rng: Optional[np.random.Generator] = None,
    grid_side: Optional[int] = None,
) -> List[EvalOutcome]:
    if rng is None:
        rng = np.random.default_rng(0)
    out = []
    for case in cases:
        res = generate(model, case.prompt, task, config, rng, grid_side)
        out.append(score_case(case, res, binning))
    return out


def accuracy_table(outcomes: Sequence[EvalOutcome]) -> dict:
    """Per-attribute-type accuracies keyed by report column label."""
    table = {}
    for at in ATTR_TYPES:
        hits = [o.correct for o in outcomes if o.case.attr_type == at]
        if hits:
            table[COLUMN_LABELS[at]] = {"accuracy": sum(hits) / len(hits), "count": len(hits)}
    return table


def overall_accuracy(outcomes: Sequence[EvalOutcome]) -> float:
    return sum(o.correct for o in outcomes) / max(1, len(outcomes))


def score_suffix_breakdown(outcomes: Sequence[EvalOutcome]) -> List[dict]:
    """Mean accuracy per power-of-two suffix-length bin, with counts."""
    if not outcomes:
        return []
    buckets = {}
    for o in outcomes:
        s = max(1, o.case.suffix_len)
        k = int(math.floor(math.log2(s)))
        buckets.setdefault(k, []).append(o.correct)
    rows = []
    for k in range(min(buckets), max(buckets) + 1):
        hits = buckets.get(k, [])
        rows.append(
            {
                "suffix_lo": 2**k,
                "suffix_hi": 2 ** (k + 1),
                "count": len(hits),
                "accuracy": (sum(hits) / len(hits)) if hits else None,
            }
        )
    return rows


def suffix_breakdown_csv(rows: Sequence[dict]) -> str:
    lines = ["suffix_lo,suffix_hi,count,accuracy"]
    for r in rows:
        acc = "" if r["accuracy"] is None else f"{r['accuracy']:.6f}"
        lines.append(f"{r['suffix_lo']},{r['suffix_hi']},{r['count']},{acc}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# reconstruction metrics


def recon_metrics(quantizer, images) -> dict:
    """Mean round-trip MSE at square size over an image set, plus the
    opaque-alpha baseline and codebook utilization."""
    s = quantizer.config.square_size
    rgb_t, alpha_t, base_t = 0.0, 0.0, 0.0
    used = set()
    for im in images:
        target = resize_bilinear(im, s, s)
        grid = quantizer.encode(im)
        used.update(int(i) for i in grid.reshape(-1))
        recon = quantizer.decode(grid, s, s)
        rgb_t += mse(composite_over_white(recon), composite_over_white(target), "rgb")
        alpha_t += mse(recon, target, "alpha")
        base_t += float(np.mean((1.0 - target.pixels[..., 3]) ** 2))
    n = max(1, len(images))
    rgb, alpha, base = rgb_t / n, alpha_t / n, base_t / n
    return {
        "count": len(images),
        "rgb_mse": rgb,
        "alpha_mse": alpha,
        "rgb_mse_x1e3": rgb * 1e3,
        "alpha_mse_x1e1": alpha * 1e1,
        "fixed_alpha_alpha_mse": base,
        "fixed_alpha_alpha_mse_x1e1": base * 1e1,
        "codebook_utilization": len(used) / quantizer.config.codebook_size,
    }


def format_recon_table(m: dict) -> str:
    lines = [
        f"{'model':<24}{'RGB MSE (x1e-3)':>18}{'Alpha MSE (x1e-1)':>20}",
        f"{'rgba autoencoder':<24}{m['rgb_mse_x1e3']:>18.2f}{m['alpha_mse_x1e1']:>20.2f}",
        f"{'fixed-alpha baseline':<24}{'-':>18}{m['fixed_alpha_alpha_mse_x1e1']:>20.2f}",
        f"codebook utilization: {m['codebook_utilization']:.3f} over {m['count']} images",
    ]
    return "\n".join(lines) + "\n"


def format_accuracy_table(table: dict, binning: AttrBinning) -> str:
    cols = [COLUMN_LABELS[a] for a in ATTR_TYPES if COLUMN_LABELS[a] in table]
    head = "".join(f"{c:>10}" for c in cols)
    accs = "".join(f"{table[c]['accuracy']:>10.3f}" for c in cols)
    counts = "".join(f"{table[c]['count']:>10}" for c in cols)
    return (
        f"{'':<10}{head}\n{'accuracy':<10}{accs}\n{'cases':<10}{counts}\n"
        f"bins: positions {binning.positional_bins}, font-size {binning.font_size_bins} "
        f"over {binning.font_size_range}\n"
    )


# ---------------------------------------------------------------------------
# applying middles and qualitative export


def apply_middle_to_template(
    template: DesignTemplate, selector, middle: Sequence[Token]
) -> DesignTemplate:
    """Splice a generated middle into the template's canonical markup at the
    selector's value region and re-parse. Raises on markup that no longer
    parses; callers score that as failure. Needs token-block payloads."""
    for el in template.elements:
        if isinstance(el, ImageElement) and not isinstance(el.payload, ImageTokenBlock):
            raise ValueError("apply_middle_to_template needs a tokenized template")
    markup, spans = render_markup_with_spans(template, href_mode="token_block")
    if isinstance(selector, Attribute):
        key = ("attr", selector.element, selector.name)
    elif isinstance(selector, ImageHref):
        key = ("attr", selector.element, "href")
    elif isinstance(selector, TextContent):
        key = ("content", selector.element)
    else:
        raise TypeError(f"unsupported selector {selector!r}")
    if key not in spans:
        raise KeyError(f"{selector!r} has no value region")
    lo, hi = spans[key]
    spliced = markup[:lo] + middle_to_literal(middle) + markup[hi:]
    return parse(spliced)


def _masked_variant(template: DesignTemplate, selector) -> DesignTemplate:
    """Input-side rendering of a case: the target is blanked out."""
    elements = list(template.elements)
    if isinstance(selector, Attribute):
        elements.pop(selector.element)
    elif isinstance(selector, ImageHref):
        el = elements[selector.element]
        blank = ImageTokenBlock(
            el.payload.width, el.payload.height, np.zeros_like(el.payload.grid)
        )
        elements[selector.element] = dc_replace(el, payload=blank)
    elif isinstance(selector, TextContent):
        el = elements[selector.element]
        elements[selector.element] = dc_replace(el, content="?" * max(1, len(el.content)))
    return dc_replace(template, elements=tuple(elements))


def export_qualitative(out_dir, case: EvalCase, result: GenerationResult, quantizer):
    """Write the input/prediction/original triplet plus the completed markup.
    A failed generation leaves pred_failed.txt instead of the middle files."""
    from .datagen import render_preview

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    masked = _masked_variant(case.template, case.selector)
    write_png(out / "input.png", render_preview(detokenize_template(masked, quantizer)))
    write_png(out / "original.png", render_preview(detokenize_template(case.template, quantizer)))
    try:
        completed = apply_middle_to_template(case.template, case.selector, result.tokens)
        if not result.complete:
            raise ValueError(f"generation incomplete: {result.stop_reason}")
        write_png(
            out / "prediction.png", render_preview(detokenize_template(completed, quantizer))
        )
    except (ValueError, KeyError) as e:
        write_text(
            out / "pred_failed.txt",
            f"stop_reason: {result.stop_reason}\nerror: {e}\n"
            f"middle: {middle_to_literal(result.tokens, errors='backslashreplace')!r}\n",
        )
        return None
    from .svg_codec import serialize

    write_text(out / "completed.svg", serialize(completed, href_mode="token_block"))
    return completed
