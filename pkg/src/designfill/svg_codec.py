"""Canonical serializer and parser for the SVG-subset markup.

The canonical form is byte-exact: one space between attributes, two-space
child indentation, attribute order fixed per tag, default-valued attributes
elided, numbers in canonical form. parse(serialize(t)) == t for every valid
template, and serialize(parse(s)) == s for any s this module produced.

Image hrefs come in two modes:
  * token_block: the href value is the literal
    ``[boi]W[sep]H[sep][img:a][img:b]...[eoi]`` string for an
    ImageTokenBlock payload.
  * opaque_payload: the href value is a relative file path to a PNG; the
    payload is restored through an asset loader at parse time.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable, List, Optional, Sequence, Union

import numpy as np

from . import templates as tm
from .raster import RasterImage, read_png
from .templates import (
    Canvas,
    DesignTemplate,
    ImageElement,
    ImageTokenBlock,
    TextElement,
    format_number,
    validate,
)

SVG_XMLNS = "http://www.w3.org/2000/svg"

SVG_ATTR_ORDER = ("xmlns", "viewBox", "width", "height")
IMAGE_ATTR_ORDER = ("href", "x", "y", "width", "height", "transform", "opacity")
TEXT_ATTR_ORDER = (
    "x",
    "y",
    "fill",
    "font-family",
    "font-size",
    "font-weight",
    "font-style",
    "text-anchor",
    "letter-spacing",
    "transform",
    "opacity",
)

HREF_MODES = ("token_block", "opaque_payload")


class MarkupSyntaxError(ValueError):
    """Malformed markup; carries the byte offset of the failure."""

    def __init__(self, message: str, position: int):
        super().__init__(f"{message} (at offset {position})")
        self.position = position


class UnknownTag(MarkupSyntaxError):
    pass


class MarkupAttributeError(ValueError):
    """Unknown, duplicate, missing, or unparseable attribute."""


class LengthMismatch(ValueError):
    pass


class UnencodableCharacter(ValueError):
    """Content falls outside the byte-transparent range of the tokenizer.

    Unreachable with UTF-8 byte tokenization except for unpaired surrogates;
    kept as a distinct type for vocabularies with a narrower range.
    """


# ---------------------------------------------------------------------------
# annotated serialization


@dataclass(frozen=True)
class TextPart:
    """Literal markup text. ``span`` marks a value region: ("attr", elem,
    name) for an attribute value, ("content", elem) for text content; elem is
    None for canvas-level attributes."""

    text: str
    span: Optional[tuple] = None


@dataclass(frozen=True)
class BlockPart:
    """A token-block href value; stands in for the literal bracket string."""

    element_index: int
    block: ImageTokenBlock

    @property
    def span(self) -> tuple:
        return ("attr", self.element_index, "href")


Part = Union[TextPart, BlockPart]


def block_literal(block: ImageTokenBlock) -> str:
    toks = "".join(f"[img:{int(i)}]" for i in block.grid.reshape(-1))
    return f"[boi]{block.width}[sep]{block.height}[sep]{toks}[eoi]"


class _Emitter:
    def __init__(self):
        self.parts: List[Part] = []
        self._buf: List[str] = []

    def text(self, s: str):
        self._buf.append(s)

    def _flush(self):
        if self._buf:
            self.parts.append(TextPart("".join(self._buf)))
            self._buf = []

    def spanned(self, s: str, span: tuple):
        self._flush()
        self.parts.append(TextPart(s, span=span))

    def block(self, element_index: int, block: ImageTokenBlock):
        self._flush()
        self.parts.append(BlockPart(element_index, block))

    def done(self) -> List[Part]:
        self._flush()
        return self.parts


def _escape_content(s: str) -> str:
    return s.replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")


def _escape_attr(s: str) -> str:
    return _escape_content(s).replace('"', "&quot;")


def _check_encodable(s: str):
    try:
        s.encode("utf-8")
    except UnicodeEncodeError as e:
        raise UnencodableCharacter(f"cannot encode {s!r}: {e}") from None


def _fill_str(fill: tuple) -> str:
    r, g, b, a = fill
    return f"rgba({int(r)}, {int(g)}, {int(b)}, {format_number(a)})"


def _transform_str(t: tuple) -> str:
    return "matrix(" + " ".join(format_number(v) for v in t) + ")"


def serialize_parts(
    template: DesignTemplate,
    href_mode: str = "token_block",
    asset_paths: Optional[dict] = None,
) -> List[Part]:
    """Serialize to an ordered part list with value-region annotations.

    ``"".join`` of the rendered parts is the canonical markup; the parts
    exist so the sequence layer can swap token-block hrefs for image tokens
    and locate attribute/content regions without re-parsing.
    """
    if href_mode not in HREF_MODES:
        raise ValueError(f"href_mode must be one of {HREF_MODES}, got {href_mode!r}")
    report = validate(template)
    if not report.ok:
        raise ValueError(f"template fails validation: {report.violations[:3]}")

    em = _Emitter()
    c = template.canvas
    em.text(f'<svg xmlns="{SVG_XMLNS}"')
    em.text(' viewBox="')
    em.spanned(f"0 0 {c.width} {c.height}", ("attr", None, "viewBox"))
    em.text('" width="')
    em.spanned(str(c.width), ("attr", None, "width"))
    em.text('" height="')
    em.spanned(str(c.height), ("attr", None, "height"))
    em.text('">')

    for i, el in enumerate(template.elements):
        em.text("\n  ")
        if isinstance(el, ImageElement):
            _emit_image(em, i, el, href_mode, asset_paths)
        else:
            _emit_text(em, i, el)
    em.text("\n</svg>")
    return em.done()


def _attr(em: _Emitter, idx, name: str, value: str):
    _check_encodable(value)
    em.text(f' {name}="')
    em.spanned(_escape_attr(value), ("attr", idx, name))
    em.text('"')


def _emit_image(em, i, el: ImageElement, href_mode, asset_paths):
    em.text("<image")
    if href_mode == "token_block":
        if not isinstance(el.payload, ImageTokenBlock):
            raise ValueError(
                f"element {i}: token_block mode needs ImageTokenBlock payloads; "
                "quantize raster payloads first"
            )
        em.text(' href="')
        em.block(i, el.payload)
        em.text('"')
    else:
        if asset_paths is None or i not in asset_paths:
            raise ValueError(f"element {i}: opaque_payload mode needs an asset path")
        _attr(em, i, "href", str(asset_paths[i]))
    _attr(em, i, "x", str(el.x))
    _attr(em, i, "y", str(el.y))
    _attr(em, i, "width", str(el.width))
    _attr(em, i, "height", str(el.height))
    if el.transform is not None:
        _attr(em, i, "transform", _transform_str(el.transform))
    if el.opacity != 1:
        _attr(em, i, "opacity", format_number(el.opacity))
    em.text("/>")


def _emit_text(em, i, el: TextElement):
    em.text("<text")
    _attr(em, i, "x", str(el.x))
    _attr(em, i, "y", str(el.y))
    _attr(em, i, "fill", _fill_str(el.fill))
    _attr(em, i, "font-family", el.font_family)
    _attr(em, i, "font-size", format_number(el.font_size))
    if el.font_weight != "normal":
        _attr(em, i, "font-weight", el.font_weight)
    if el.font_style != "normal":
        _attr(em, i, "font-style", el.font_style)
    if el.text_anchor != "start":
        _attr(em, i, "text-anchor", el.text_anchor)
    if el.letter_spacing != 0:
        _attr(em, i, "letter-spacing", format_number(el.letter_spacing))
    if el.transform is not None:
        _attr(em, i, "transform", _transform_str(el.transform))
    if el.opacity != 1:
        _attr(em, i, "opacity", format_number(el.opacity))
    em.text(">")
    _check_encodable(el.content)
    em.spanned(_escape_content(el.content), ("content", i))
    em.text("</text>")


def render_part(p: Part) -> str:
    return p.text if isinstance(p, TextPart) else block_literal(p.block)


def render_markup_with_spans(
    template: DesignTemplate,
    href_mode: str = "token_block",
    asset_paths: Optional[dict] = None,
):
    """Canonical markup plus character ranges of every value region, keyed
    like the part annotations. Used to splice generated middles back in."""
    parts = serialize_parts(template, href_mode, asset_paths)
    chunks = []
    spans = {}
    pos = 0
    for p in parts:
        s = render_part(p)
        if p.span is not None:
            spans[p.span] = (pos, pos + len(s))
        chunks.append(s)
        pos += len(s)
    return "".join(chunks), spans


def serialize(
    template: DesignTemplate,
    href_mode: str = "token_block",
    asset_paths: Optional[dict] = None,
) -> str:
    return "".join(render_part(p) for p in serialize_parts(template, href_mode, asset_paths))


# ---------------------------------------------------------------------------
# parsing

_INT_RE = re.compile(r"-?\d+\Z")
_REAL_RE = re.compile(r"-?\d+(\.\d+)?\Z")
_NAME_RE = re.compile(r"[A-Za-z][A-Za-z0-9:_-]*")
_BLOCK_RE = re.compile(r"\[boi\](\d+)\[sep\](\d+)\[sep\]((?:\[img:\d+\])*)\[eoi\]\Z")
_IMG_TOKEN_RE = re.compile(r"\[img:(\d+)\]")
_FILL_RE = re.compile(r"rgba\((\d+), (\d+), (\d+), (-?\d+(?:\.\d+)?)\)\Z")
_TRANSFORM_RE = re.compile(r"matrix\(([^)]*)\)\Z")

_ENTITIES = {"&amp;": "&", "&lt;": "<", "&gt;": ">", "&quot;": '"'}


class _Cursor:
    __slots__ = ("s", "pos")

    def __init__(self, s: str):
        self.s = s
        self.pos = 0

    def eof(self) -> bool:
        return self.pos >= len(self.s)

    def peek(self, n: int = 1) -> str:
        return self.s[self.pos : self.pos + n]

    def skip_ws(self):
        while not self.eof() and self.s[self.pos] in " \t\r\n":
            self.pos += 1

    def expect(self, literal: str):
        if not self.s.startswith(literal, self.pos):
            raise MarkupSyntaxError(f"expected {literal!r}", self.pos)
        self.pos += len(literal)

    def take_until(self, ch: str) -> str:
        end = self.s.find(ch, self.pos)
        if end < 0:
            raise MarkupSyntaxError(f"unterminated, expected {ch!r}", self.pos)
        out = self.s[self.pos : end]
        self.pos = end
        return out


def _unescape(raw: str, origin: int) -> str:
    if "&" not in raw:
        return raw
    out = []
    i = 0
    while i < len(raw):
        ch = raw[i]
        if ch != "&":
            out.append(ch)
            i += 1
            continue
        end = raw.find(";", i)
        if end < 0:
            raise MarkupSyntaxError("bare '&' in value", origin + i)
        ent = raw[i : end + 1]
        if ent not in _ENTITIES:
            raise MarkupSyntaxError(f"unknown entity {ent}", origin + i)
        out.append(_ENTITIES[ent])
        i = end + 1
    return "".join(out)


def _parse_attrs(cur: _Cursor, tag: str, allowed) -> dict:
    attrs = {}
    while True:
        start = cur.pos
        cur.skip_ws()
        if cur.peek() in (">", "/") or cur.eof():
            return attrs
        if cur.pos == start:
            raise MarkupSyntaxError("expected whitespace before attribute", cur.pos)
        m = _NAME_RE.match(cur.s, cur.pos)
        if not m:
            raise MarkupSyntaxError("expected attribute name", cur.pos)
        name = m.group(0)
        cur.pos = m.end()
        if name not in allowed:
            raise MarkupAttributeError(f"<{tag}> does not take attribute {name!r}")
        if name in attrs:
            raise MarkupAttributeError(f"<{tag}> repeats attribute {name!r}")
        cur.expect('="')
        origin = cur.pos
        raw = cur.take_until('"')
        cur.expect('"')
        attrs[name] = _unescape(raw, origin)


def _want_int(tag, name, attrs, required=True, default=None, lo=None):
    if name not in attrs:
        if required:
            raise MarkupAttributeError(f"<{tag}> is missing {name!r}")
        return default
    v = attrs[name]
    if not _INT_RE.match(v):
        raise MarkupAttributeError(f"<{tag}> {name}={v!r} is not an integer")
    n = int(v)
    if lo is not None and n < lo:
        raise MarkupAttributeError(f"<{tag}> {name}={n} must be >= {lo}")
    return n


def _want_real(tag, name, attrs, required=True, default=None):
    if name not in attrs:
        if required:
            raise MarkupAttributeError(f"<{tag}> is missing {name!r}")
        return default
    v = attrs[name]
    if not _REAL_RE.match(v):
        raise MarkupAttributeError(f"<{tag}> {name}={v!r} is not a number")
    return float(v)


def _want_transform(tag, attrs):
    if "transform" not in attrs:
        return None
    m = _TRANSFORM_RE.match(attrs["transform"])
    if not m:
        raise MarkupAttributeError(f"<{tag}> transform {attrs['transform']!r} is not matrix(...)")
    fields = m.group(1).split(" ")
    if len(fields) != 6 or not all(_REAL_RE.match(f) for f in fields):
        raise MarkupAttributeError(f"<{tag}> transform needs 6 numbers")
    return tuple(float(f) for f in fields)


def parse_href_value(value: str):
    """Decode an href attribute value: ImageTokenBlock for a bracketed token
    run, otherwise the value is returned as an opaque path string."""
    if not value.startswith("[boi]"):
        return value
    m = _BLOCK_RE.match(value)
    if not m:
        raise MarkupAttributeError(f"malformed token-block href {value!r}")
    w, h = int(m.group(1)), int(m.group(2))
    ids = [int(t) for t in _IMG_TOKEN_RE.findall(m.group(3))]
    g = int(round(len(ids) ** 0.5))
    if g * g != len(ids) or g == 0:
        raise MarkupAttributeError(
            f"token-block href has {len(ids)} tokens; expected a positive square count"
        )
    return ImageTokenBlock(w, h, np.array(ids, dtype=np.int64).reshape(g, g))


def dir_asset_loader(base_dir) -> Callable[[str], RasterImage]:
    base = Path(base_dir)

    def load(path: str) -> RasterImage:
        return read_png(base / path)

    return load


def _parse_image(cur: _Cursor, asset_loader) -> ImageElement:
    attrs = _parse_attrs(cur, "image", IMAGE_ATTR_ORDER)
    cur.expect("/>")
    if "href" not in attrs:
        raise MarkupAttributeError("<image> is missing 'href'")
    payload = parse_href_value(attrs["href"])
    if isinstance(payload, str):
        if asset_loader is None:
            raise MarkupAttributeError(
                f"<image> href {payload!r} is a file reference but no asset loader was given"
            )
        payload = asset_loader(payload)
    return ImageElement(
        payload=payload,
        x=_want_int("image", "x", attrs),
        y=_want_int("image", "y", attrs),
        width=_want_int("image", "width", attrs, lo=1),
        height=_want_int("image", "height", attrs, lo=1),
        transform=_want_transform("image", attrs),
        opacity=_want_real("image", "opacity", attrs, required=False, default=1.0),
    )


def _parse_fill(attrs) -> tuple:
    if "fill" not in attrs:
        raise MarkupAttributeError("<text> is missing 'fill'")
    m = _FILL_RE.match(attrs["fill"])
    if not m:
        raise MarkupAttributeError(f"<text> fill {attrs['fill']!r} is not rgba(r, g, b, a)")
    r, g, b = (int(m.group(k)) for k in (1, 2, 3))
    if max(r, g, b) > 255:
        raise MarkupAttributeError("<text> fill channels must be <= 255")
    return (r, g, b, float(m.group(4)))


def _want_enum(tag, name, attrs, options, default):
    v = attrs.get(name, default)
    if v not in options:
        raise MarkupAttributeError(f"<{tag}> {name}={v!r} must be one of {options}")
    return v


def _parse_text(cur: _Cursor) -> TextElement:
    attrs = _parse_attrs(cur, "text", TEXT_ATTR_ORDER)
    cur.expect(">")
    origin = cur.pos
    content = _unescape(cur.take_until("<"), origin)
    cur.expect("</text>")
    if "font-family" not in attrs:
        raise MarkupAttributeError("<text> is missing 'font-family'")
    size = _want_real("text", "font-size", attrs)
    if size <= 0:
        raise MarkupAttributeError(f"<text> font-size={size} must be positive")
    return TextElement(
        content=content,
        x=_want_int("text", "x", attrs),
        y=_want_int("text", "y", attrs),
        fill=_parse_fill(attrs),
        font_family=attrs["font-family"],
        font_size=size,
        font_weight=_want_enum("text", "font-weight", attrs, tm.FONT_WEIGHTS, "normal"),
        font_style=_want_enum("text", "font-style", attrs, tm.FONT_STYLES, "normal"),
        text_anchor=_want_enum("text", "text-anchor", attrs, tm.TEXT_ANCHORS, "start"),
        letter_spacing=_want_real("text", "letter-spacing", attrs, required=False, default=0.0),
        transform=_want_transform("text", attrs),
        opacity=_want_real("text", "opacity", attrs, required=False, default=1.0),
    )


def parse(markup: str, asset_loader: Optional[Callable[[str], RasterImage]] = None) -> DesignTemplate:
    """Parse canonical markup back to a template.

    asset_loader resolves opaque href paths to raster payloads; token-block
    hrefs need no loader.
    """
    cur = _Cursor(markup)
    cur.skip_ws()
    cur.expect("<svg")
    attrs = _parse_attrs(cur, "svg", SVG_ATTR_ORDER)
    cur.expect(">")
    if attrs.get("xmlns") != SVG_XMLNS:
        raise MarkupAttributeError(f"<svg> xmlns must be {SVG_XMLNS!r}")
    w = _want_int("svg", "width", attrs, lo=1)
    h = _want_int("svg", "height", attrs, lo=1)
    if attrs.get("viewBox") != f"0 0 {w} {h}":
        raise MarkupAttributeError(
            f"<svg> viewBox {attrs.get('viewBox')!r} must mirror width/height as '0 0 {w} {h}'"
        )
    elements = []
    while True:
        cur.skip_ws()
        if cur.peek(2) == "</":
            break
        pos = cur.pos
        cur.expect("<")
        m = _NAME_RE.match(cur.s, cur.pos)
        if not m:
            raise MarkupSyntaxError("expected tag name", cur.pos)
        tag = m.group(0)
        cur.pos = m.end()
        if tag == "image":
            elements.append(_parse_image(cur, asset_loader))
        elif tag == "text":
            elements.append(_parse_text(cur))
        else:
            raise UnknownTag(f"<{tag}> is outside the markup subset", pos)
    cur.expect("</svg>")
    cur.skip_ws()
    if not cur.eof():
        raise MarkupSyntaxError("trailing data after </svg>", cur.pos)
    return DesignTemplate(canvas=Canvas(w, h), elements=tuple(elements))


# ---------------------------------------------------------------------------
# multi-line splitting and file I/O


def split_multiline(raw_text: str, base: TextElement, per_line_y: Sequence[int]) -> List[TextElement]:
    """One element per line of raw_text, styled like base, y values as given.

    Empty lines yield empty-content elements; callers decide whether to drop
    them.
    """
    lines = raw_text.split("\n")
    if len(lines) != len(per_line_y):
        raise LengthMismatch(
            f"{len(lines)} lines but {len(per_line_y)} y values"
        )
    return [replace(base, content=line, y=y) for line, y in zip(lines, per_line_y)]


def write_markup(path, markup: str):
    Path(path).write_text(markup, encoding="utf-8")


def read_markup(path) -> str:
    return Path(path).read_text(encoding="utf-8")
