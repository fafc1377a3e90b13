"""Synthetic template generator and a minimal preview renderer.

The generator is the package's data source: seeded, valid-by-construction
templates with transparent sprite images and short text elements, plus the
layout patterns the pipeline should be able to exploit (repeated payloads,
mirrored positions, full-bleed backgrounds).

The renderer is diagnostic only: alpha compositing with the over operator
and a crude embedded 5x7 bitmap font, enough to eyeball completions.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .raster import RasterImage, from_uint8, png_bytes, resize_bilinear, write_png
from .svg_codec import dir_asset_loader, parse, serialize
from .templates import (
    Canvas,
    DesignTemplate,
    ImageElement,
    ImageTokenBlock,
    TextElement,
    validate,
)
from .utils import canonical_json, sha256_bytes


class RenderError(ValueError):
    pass


MAX_RENDER_PIXELS = 16_000_000

# 5x7 glyphs, rows top to bottom, '1' = inked. Unknown characters render as
# a filled box.
GLYPHS = {
    "A": ("01110", "10001", "10001", "11111", "10001", "10001", "10001"),
    "B": ("11110", "10001", "10001", "11110", "10001", "10001", "11110"),
    "C": ("01110", "10001", "10000", "10000", "10000", "10001", "01110"),
    "D": ("11100", "10010", "10001", "10001", "10001", "10010", "11100"),
    "E": ("11111", "10000", "10000", "11110", "10000", "10000", "11111"),
    "F": ("11111", "10000", "10000", "11110", "10000", "10000", "10000"),
    "G": ("01110", "10001", "10000", "10111", "10001", "10001", "01111"),
    "H": ("10001", "10001", "10001", "11111", "10001", "10001", "10001"),
    "I": ("01110", "00100", "00100", "00100", "00100", "00100", "01110"),
    "J": ("00111", "00010", "00010", "00010", "00010", "10010", "01100"),
    "K": ("10001", "10010", "10100", "11000", "10100", "10010", "10001"),
    "L": ("10000", "10000", "10000", "10000", "10000", "10000", "11111"),
    "M": ("10001", "11011", "10101", "10101", "10001", "10001", "10001"),
    "N": ("10001", "11001", "10101", "10011", "10001", "10001", "10001"),
    "O": ("01110", "10001", "10001", "10001", "10001", "10001", "01110"),
    "P": ("11110", "10001", "10001", "11110", "10000", "10000", "10000"),
    "Q": ("01110", "10001", "10001", "10001", "10101", "10010", "01101"),
    "R": ("11110", "10001", "10001", "11110", "10100", "10010", "10001"),
    "S": ("01111", "10000", "10000", "01110", "00001", "00001", "11110"),
    "T": ("11111", "00100", "00100", "00100", "00100", "00100", "00100"),
    "U": ("10001", "10001", "10001", "10001", "10001", "10001", "01110"),
    "V": ("10001", "10001", "10001", "10001", "10001", "01010", "00100"),
    "W": ("10001", "10001", "10001", "10101", "10101", "11011", "10001"),
    "X": ("10001", "10001", "01010", "00100", "01010", "10001", "10001"),
    "Y": ("10001", "10001", "01010", "00100", "00100", "00100", "00100"),
    "Z": ("11111", "00001", "00010", "00100", "01000", "10000", "11111"),
    "0": ("01110", "10001", "10011", "10101", "11001", "10001", "01110"),
    "1": ("00100", "01100", "00100", "00100", "00100", "00100", "01110"),
    "2": ("01110", "10001", "00001", "00110", "01000", "10000", "11111"),
    "3": ("11110", "00001", "00001", "01110", "00001", "00001", "11110"),
    "4": ("00010", "00110", "01010", "10010", "11111", "00010", "00010"),
    "5": ("11111", "10000", "11110", "00001", "00001", "10001", "01110"),
    "6": ("00110", "01000", "10000", "11110", "10001", "10001", "01110"),
    "7": ("11111", "00001", "00010", "00100", "01000", "01000", "01000"),
    "8": ("01110", "10001", "10001", "01110", "10001", "10001", "01110"),
    "9": ("01110", "10001", "10001", "01111", "00001", "00010", "01100"),
    " ": ("00000", "00000", "00000", "00000", "00000", "00000", "00000"),
    ".": ("00000", "00000", "00000", "00000", "00000", "00110", "00110"),
    ",": ("00000", "00000", "00000", "00000", "00110", "00100", "01000"),
    "!": ("00100", "00100", "00100", "00100", "00100", "00000", "00100"),
    "?": ("01110", "10001", "00001", "00110", "00100", "00000", "00100"),
    "-": ("00000", "00000", "00000", "01110", "00000", "00000", "00000"),
    "&": ("01100", "10010", "10100", "01000", "10101", "10010", "01101"),
    "'": ("00100", "00100", "01000", "00000", "00000", "00000", "00000"),
    "%": ("11001", "11010", "00010", "00100", "01000", "01011", "10011"),
}
_BOX = ("11111",) * 7


@dataclass(frozen=True)
class GenConfig:
    canvas_width: Tuple[int, int] = (96, 200)
    canvas_height: Tuple[int, int] = (96, 200)
    n_images: Tuple[int, int] = (1, 3)
    n_texts: Tuple[int, int] = (1, 2)
    shape_weights: dict = field(
        default_factory=lambda: {"rect": 0.3, "circle": 0.3, "ring": 0.2, "bar": 0.2}
    )
    palette: tuple = (
        (214, 69, 65),
        (240, 178, 122),
        (38, 166, 91),
        (31, 58, 147),
        (244, 208, 63),
        (44, 44, 52),
        (236, 236, 236),
    )
    fonts: tuple = ("Montserrat", "Arial", "Roboto", "Lora")
    lexicon: tuple = (
        "SALE",
        "NEW!",
        "B&W",
        "HELLO",
        "DESIGN",
        "SUMMER",
        "2024",
        "50% OFF",
        "STUDIO",
        "MONDAY",
    )
    font_size_range: Tuple[int, int] = (10, 32)
    p_repetition: float = 0.35
    p_symmetry: float = 0.35
    p_background: float = 0.5
    sprite_side: Tuple[int, int] = (16, 48)

    def __post_init__(self):
        total = sum(self.shape_weights.values())
        if abs(total - 1.0) > 1e-9:
            raise ValueError(f"shape weights sum to {total}, need 1")
        for lo, hi in (self.canvas_width, self.canvas_height, self.n_images,
                       self.n_texts, self.font_size_range, self.sprite_side):
            if lo > hi:
                raise ValueError(f"empty range ({lo}, {hi})")
        for f in self.fonts:
            # width/height digit budget analysis assumes short font names
            if len(f.encode("utf-8")) > 10:
                raise ValueError(f"font name {f!r} longer than 10 bytes")


# ---------------------------------------------------------------------------
# sprites


def _disc_mask(side: int, r: float, cx: float, cy: float) -> np.ndarray:
    yy, xx = np.mgrid[0:side, 0:side]
    return (xx - cx) ** 2 + (yy - cy) ** 2 <= r * r


def make_sprite(rng: np.random.Generator, config: GenConfig, shape: Optional[str] = None) -> RasterImage:
    """One transparent RGBA sprite with hard edges; all channel values are
    exact k/255 so PNG round-trips are bit-identical."""
    names = sorted(config.shape_weights)
    if shape is None:
        w = np.array([config.shape_weights[n] for n in names])
        shape = names[rng.choice(len(names), p=w / w.sum())]
    side = int(rng.integers(config.sprite_side[0], config.sprite_side[1] + 1))
    color = config.palette[rng.integers(0, len(config.palette))]
    alpha = 255 if rng.random() < 0.8 else 128
    arr = np.zeros((side, side, 4), dtype=np.uint8)
    if shape == "rect":
        m = max(1, side // 8)
        mask = np.zeros((side, side), dtype=bool)
        mask[m : side - m, m : side - m] = True
    elif shape == "circle":
        c = (side - 1) / 2
        mask = _disc_mask(side, side * 0.45, c, c)
    elif shape == "ring":
        c = (side - 1) / 2
        mask = _disc_mask(side, side * 0.45, c, c) & ~_disc_mask(side, side * 0.28, c, c)
    elif shape == "bar":
        h = max(3, side // 3)
        top = (side - h) // 2
        r = h / 2
        mask = np.zeros((side, side), dtype=bool)
        mask[top : top + h, int(r) : side - int(r)] = True
        mask |= _disc_mask(side, r, r, top + r - 0.5)
        mask |= _disc_mask(side, r, side - 1 - r, top + r - 0.5)
    else:
        raise ValueError(f"unknown shape {shape!r}")
    arr[mask, 0] = color[0]
    arr[mask, 1] = color[1]
    arr[mask, 2] = color[2]
    arr[mask, 3] = alpha
    return from_uint8(arr)


def make_background(rng: np.random.Generator, config: GenConfig) -> RasterImage:
    """Opaque two-band backdrop sprite."""
    side = int(rng.integers(24, 49))
    c1 = config.palette[rng.integers(0, len(config.palette))]
    c2 = config.palette[rng.integers(0, len(config.palette))]
    arr = np.zeros((side, side, 4), dtype=np.uint8)
    split = side // 2 if rng.random() < 0.5 else side
    arr[:split, :, :3] = c1
    arr[split:, :, :3] = c2
    arr[..., 3] = 255
    return from_uint8(arr)


# ---------------------------------------------------------------------------
# template generation


def _rint(rng, lo, hi) -> int:
    return int(rng.integers(lo, hi + 1))


def generate_template(rng: np.random.Generator, config: GenConfig = GenConfig()) -> DesignTemplate:
    cw = _rint(rng, *config.canvas_width)
    ch = _rint(rng, *config.canvas_height)
    elements: List = []

    if rng.random() < config.p_background:
        bleed = _rint(rng, 0, 12)
        elements.append(
            ImageElement(
                payload=make_background(rng, config),
                x=-bleed,
                y=-bleed,
                width=cw + 2 * bleed,
                height=ch + 2 * bleed,
            )
        )

    n_img = _rint(rng, *config.n_images)
    repeat = rng.random() < config.p_repetition and n_img >= 1
    mirror = rng.random() < config.p_symmetry
    sprites = [make_sprite(rng, config) for _ in range(n_img)]
    if repeat:
        # a duplicated payload pair, byte-identical by construction
        sprites.append(sprites[-1])
        n_img += 1
    for k, sp in enumerate(sprites):
        size = _rint(rng, 16, max(17, min(cw, ch) * 2 // 3))
        x = _rint(rng, -8, max(-7, cw - size + 8))
        y = _rint(rng, -8, max(-7, ch - size + 8))
        if repeat and mirror and k == n_img - 1:
            prev = elements[-1]
            size = prev.width
            x = cw - prev.x - size
            y = prev.y
        kwargs = {}
        if rng.random() < 0.15:
            kwargs["opacity"] = float(rng.choice([0.5, 0.8]))
        if rng.random() < 0.1:
            kwargs["transform"] = (1, 0, 0, 1, _rint(rng, -6, 6), _rint(rng, -6, 6))
        elements.append(ImageElement(payload=sp, x=x, y=y, width=size, height=size, **kwargs))

    for _ in range(_rint(rng, *config.n_texts)):
        word = config.lexicon[rng.integers(0, len(config.lexicon))]
        fs = _rint(rng, *config.font_size_range)
        color = config.palette[rng.integers(0, len(config.palette))]
        kwargs = {}
        if rng.random() < 0.25:
            kwargs["font_weight"] = "bold"
        if rng.random() < 0.1:
            kwargs["font_style"] = "italic"
        if rng.random() < 0.2:
            kwargs["text_anchor"] = "middle"
        if rng.random() < 0.15:
            kwargs["letter_spacing"] = float(rng.choice([0.5, 1.0, 2.0]))
        if rng.random() < 0.1:
            kwargs["opacity"] = 0.8
        elements.append(
            TextElement(
                content=word,
                x=_rint(rng, 0, max(1, cw - 24)),
                y=_rint(rng, 12, max(13, ch - 4)),
                fill=(color[0], color[1], color[2], 1.0 if rng.random() < 0.85 else 0.8),
                font_family=config.fonts[rng.integers(0, len(config.fonts))],
                font_size=float(fs),
                **kwargs,
            )
        )

    t = DesignTemplate(canvas=Canvas(cw, ch), elements=tuple(elements))
    report = validate(t, known_fonts=config.fonts)
    assert report.ok, f"generator produced an invalid template: {report.violations[:3]}"
    return t


def generate_templates(seed: int, n: int, config: GenConfig = GenConfig()) -> List[DesignTemplate]:
    rng = np.random.default_rng(seed)
    return [generate_template(rng, config) for _ in range(n)]


# ---------------------------------------------------------------------------
# preview rendering


def _over(dst: np.ndarray, src: np.ndarray):
    """Composite src over dst in place; both HxWx4 float arrays."""
    sa = src[..., 3:4]
    da = dst[..., 3:4]
    out_a = sa + da * (1.0 - sa)
    rgb = src[..., :3] * sa + dst[..., :3] * da * (1.0 - sa)
    safe = np.where(out_a > 0, out_a, 1.0)
    dst[..., :3] = rgb / safe
    dst[..., 3:4] = out_a


def _checkerboard(h: int, w: int) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w]
    light = ((yy // 8 + xx // 8) % 2).astype(np.float64)
    arr = np.empty((h, w, 4))
    arr[..., :3] = np.where(light[..., None] > 0, 200 / 255, 150 / 255)
    arr[..., 3] = 1.0
    return arr


def _blit(canvas: np.ndarray, layer: np.ndarray, x: int, y: int):
    ch, cw = canvas.shape[:2]
    lh, lw = layer.shape[:2]
    x0, y0 = max(0, x), max(0, y)
    x1, y1 = min(cw, x + lw), min(ch, y + lh)
    if x0 >= x1 or y0 >= y1:
        return
    _over(canvas[y0:y1, x0:x1], layer[y0 - y : y1 - y, x0 - x : x1 - x])


def _glyph_layer(el: TextElement) -> np.ndarray:
    scale = max(1, int(round(el.font_size / 7)))
    gap = scale + int(round(el.letter_spacing))
    n = len(el.content)
    if n == 0:
        return np.zeros((7 * scale, 1, 4))
    tw = n * 5 * scale + (n - 1) * gap
    layer = np.zeros((7 * scale, tw, 4))
    r, g, b, a = el.fill
    color = np.array([r / 255, g / 255, b / 255])
    cx = 0
    for chr_ in el.content:
        rows = GLYPHS.get(chr_.upper(), _BOX)
        for ri, row in enumerate(rows):
            for ci, bit in enumerate(row):
                if bit == "1":
                    ys, xs = ri * scale, cx + ci * scale
                    layer[ys : ys + scale, xs : xs + scale, :3] = color
                    layer[ys : ys + scale, xs : xs + scale, 3] = a * el.opacity
        cx += 5 * scale + gap
    return layer


def render_preview(template: DesignTemplate) -> RasterImage:
    """White canvas, elements composited in document order. Transforms apply
    their translation part only; token-block payloads draw as checkerboards."""
    report = validate(template)
    if not report.ok:
        raise RenderError(f"template invalid: {report.violations[:3]}")
    cw, ch = template.canvas.width, template.canvas.height
    if cw * ch > MAX_RENDER_PIXELS:
        raise RenderError(f"canvas {cw}x{ch} exceeds {MAX_RENDER_PIXELS} pixels")
    canvas = np.zeros((ch, cw, 4))
    canvas[..., :] = 1.0
    for el in template.elements:
        dx = dy = 0
        if el.transform is not None:
            dx, dy = int(round(el.transform[4])), int(round(el.transform[5]))
        if isinstance(el, ImageElement):
            if el.width * el.height > MAX_RENDER_PIXELS:
                raise RenderError(f"element {el.width}x{el.height} exceeds render budget")
            if isinstance(el.payload, ImageTokenBlock):
                layer = _checkerboard(el.height, el.width)
            else:
                layer = resize_bilinear(el.payload, el.height, el.width).pixels.copy()
            if el.opacity != 1:
                layer = layer.copy()
                layer[..., 3] *= el.opacity
            _blit(canvas, layer, el.x + dx, el.y + dy)
        else:
            layer = _glyph_layer(el)
            tw = layer.shape[1]
            x = el.x + dx
            if el.text_anchor == "middle":
                x -= tw // 2
            elif el.text_anchor == "end":
                x -= tw
            _blit(canvas, layer, x, el.y + dy - layer.shape[0])
    return RasterImage(canvas)


# ---------------------------------------------------------------------------
# dataset directories


def save_dataset(
    root,
    templates: Sequence[DesignTemplate],
    split_fractions: Tuple[float, float, float] = (0.8, 0.1, 0.1),
):
    """Write templates/*.svg + content-addressed assets/*.png + manifest.
    hrefs are relative to the dataset root; splits are disjoint by id."""
    root = Path(root)
    (root / "templates").mkdir(parents=True, exist_ok=True)
    (root / "assets").mkdir(parents=True, exist_ok=True)
    ids = []
    for i, t in enumerate(templates):
        tid = f"t{i:05d}"
        ids.append(tid)
        asset_paths = {}
        token_mode = False
        for ei, el in enumerate(t.elements):
            if not isinstance(el, ImageElement):
                continue
            if isinstance(el.payload, ImageTokenBlock):
                token_mode = True
                continue
            data = png_bytes(el.payload)
            rel = f"assets/{sha256_bytes(data)}.png"
            target = root / rel
            if not target.exists():
                target.write_bytes(data)
            asset_paths[ei] = rel
        mode = "token_block" if token_mode else "opaque_payload"
        markup = serialize(t, href_mode=mode, asset_paths=asset_paths)
        (root / "templates" / f"{tid}.svg").write_text(markup, encoding="utf-8")
    n = len(ids)
    n_train = int(n * split_fractions[0])
    n_val = int(n * split_fractions[1])
    manifest = {
        "count": n,
        "ids": ids,
        "splits": {
            "train": ids[:n_train],
            "val": ids[n_train : n_train + n_val],
            "test": ids[n_train + n_val :],
        },
    }
    (root / "manifest.json").write_text(canonical_json(manifest), encoding="utf-8")
    return manifest


def load_dataset(root, split: Optional[str] = None) -> Tuple[dict, Dict[str, DesignTemplate]]:
    import json

    root = Path(root)
    manifest = json.loads((root / "manifest.json").read_text(encoding="utf-8"))
    wanted = manifest["ids"] if split is None else manifest["splits"][split]
    loader = dir_asset_loader(root)
    out = {}
    for tid in wanted:
        markup = (root / "templates" / f"{tid}.svg").read_text(encoding="utf-8")
        out[tid] = parse(markup, asset_loader=loader)
    return manifest, out


def write_preview_png(path, template: DesignTemplate):
    write_png(path, render_preview(template))
