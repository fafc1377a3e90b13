"""In-memory graphic design templates and their validation rules.

A template is a canvas plus an ordered list of image and text elements;
document order is z-order (later elements render on top). Elements are
immutable value objects, safe to share across threads. Invariants are not
enforced at construction; ``validate`` reports every violation instead.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np

from .raster import RasterImage

IDENTITY_TRANSFORM = (1.0, 0.0, 0.0, 1.0, 0.0, 0.0)

FONT_WEIGHTS = ("normal", "bold")
FONT_STYLES = ("normal", "italic")
TEXT_ANCHORS = ("start", "middle", "end")


def format_number(v: float) -> str:
    """Canonical numeric form: integers bare, reals with up to 3 decimals.

    Shared by the markup codec and by validation (a real that does not survive
    this formatting cannot round-trip and is reported as a violation).
    """
    if isinstance(v, bool):
        raise TypeError("booleans are not numbers here")
    f = float(v)
    if f == int(f):
        return str(int(f))
    s = f"{f:.3f}".rstrip("0").rstrip(".")
    return s


def is_canonical_real(v: float) -> bool:
    try:
        return float(format_number(v)) == float(v)
    except (TypeError, ValueError, OverflowError):
        return False


@dataclass(frozen=True, eq=False)
class ImageTokenBlock:
    """Quantized image payload: intrinsic size plus a g x g index grid."""

    width: int
    height: int
    grid: np.ndarray

    def __post_init__(self):
        g = np.asarray(self.grid, dtype=np.int64)
        if g.ndim != 2 or g.shape[0] != g.shape[1]:
            raise ValueError(f"grid must be square, got shape {g.shape}")
        g = g.copy()
        g.flags.writeable = False
        object.__setattr__(self, "grid", g)

    @property
    def grid_side(self) -> int:
        return self.grid.shape[0]

    def __eq__(self, other) -> bool:
        if not isinstance(other, ImageTokenBlock):
            return NotImplemented
        return (
            self.width == other.width
            and self.height == other.height
            and bool(np.array_equal(self.grid, other.grid))
        )

    def __repr__(self) -> str:
        return f"ImageTokenBlock({self.width}x{self.height}, g={self.grid_side})"


ImagePayload = Union[RasterImage, ImageTokenBlock]


def payload_size(payload: ImagePayload) -> tuple:
    """Intrinsic (width, height) of an image payload."""
    if isinstance(payload, RasterImage):
        return payload.width, payload.height
    return payload.width, payload.height


@dataclass(frozen=True)
class Canvas:
    width: int
    height: int


def _normalize_transform(obj, values):
    t = values
    if t is not None:
        t = tuple(float(x) for x in t)
        if t == IDENTITY_TRANSFORM:
            t = None
    object.__setattr__(obj, "transform", t)


@dataclass(frozen=True)
class ImageElement:
    payload: ImagePayload
    x: int
    y: int
    width: int
    height: int
    transform: Optional[tuple] = None
    opacity: float = 1.0

    def __post_init__(self):
        _normalize_transform(self, self.transform)


@dataclass(frozen=True)
class TextElement:
    content: str
    x: int
    y: int
    fill: tuple  # (r, g, b, a) with r,g,b ints 0-255 and a in [0, 1]
    font_family: str
    font_size: float
    font_weight: str = "normal"
    font_style: str = "normal"
    text_anchor: str = "start"
    letter_spacing: float = 0.0
    transform: Optional[tuple] = None
    opacity: float = 1.0

    def __post_init__(self):
        _normalize_transform(self, self.transform)


Element = Union[ImageElement, TextElement]


@dataclass(frozen=True)
class DesignTemplate:
    canvas: Canvas
    elements: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "elements", tuple(self.elements))


@dataclass(frozen=True)
class Violation:
    element: Optional[int]  # None means the canvas itself
    field: str
    message: str


@dataclass(frozen=True)
class ValidationReport:
    violations: tuple = ()

    @property
    def ok(self) -> bool:
        return not self.violations

    def __bool__(self) -> bool:
        return self.ok


def _check_int(val, lo=None) -> Optional[str]:
    if isinstance(val, bool) or not isinstance(val, (int, np.integer)):
        return f"expected an integer, got {type(val).__name__}"
    if lo is not None and val < lo:
        return f"must be >= {lo}, got {val}"
    return None


def _check_real(val, field_name, out, elem_idx, lo=None, hi=None, strict_lo=None):
    if isinstance(val, bool) or not isinstance(val, (int, float, np.integer, np.floating)):
        out.append(Violation(elem_idx, field_name, f"expected a number, got {type(val).__name__}"))
        return
    v = float(val)
    if not np.isfinite(v):
        out.append(Violation(elem_idx, field_name, "must be finite"))
        return
    if strict_lo is not None and v <= strict_lo:
        out.append(Violation(elem_idx, field_name, f"must be > {strict_lo}, got {v}"))
    if lo is not None and v < lo:
        out.append(Violation(elem_idx, field_name, f"must be >= {lo}, got {v}"))
    if hi is not None and v > hi:
        out.append(Violation(elem_idx, field_name, f"must be <= {hi}, got {v}"))
    if not is_canonical_real(v):
        out.append(Violation(elem_idx, field_name, f"{v!r} does not survive canonical formatting"))


def validate(template: DesignTemplate, known_fonts: Optional[Sequence] = None) -> ValidationReport:
    """Collect every invariant violation. Never raises; an empty report means
    the template is serializable (and will round-trip the codec exactly)."""
    out = []
    for fname in ("width", "height"):
        msg = _check_int(getattr(template.canvas, fname), lo=1)
        if msg:
            out.append(Violation(None, fname, msg))

    for i, el in enumerate(template.elements):
        if isinstance(el, ImageElement):
            _validate_image(el, i, out)
        elif isinstance(el, TextElement):
            _validate_text(el, i, out, known_fonts)
        else:
            out.append(Violation(i, "element", f"unknown element type {type(el).__name__}"))
    return ValidationReport(tuple(out))


def _validate_transform(el, i, out):
    if el.transform is None:
        return
    if len(el.transform) != 6:
        out.append(Violation(i, "transform", "must have 6 entries"))
        return
    for v in el.transform:
        if not is_canonical_real(v):
            out.append(Violation(i, "transform", f"{v!r} does not survive canonical formatting"))
            return


def _validate_image(el: ImageElement, i: int, out: list):
    if not isinstance(el.payload, (RasterImage, ImageTokenBlock)):
        out.append(Violation(i, "payload", f"unsupported payload {type(el.payload).__name__}"))
    elif isinstance(el.payload, ImageTokenBlock):
        if el.payload.width < 1 or el.payload.height < 1:
            out.append(Violation(i, "payload", "intrinsic size must be at least 1x1"))
        if el.payload.grid.size and el.payload.grid.min() < 0:
            out.append(Violation(i, "payload", "token indices must be non-negative"))
    for fname in ("x", "y"):
        msg = _check_int(getattr(el, fname))
        if msg:
            out.append(Violation(i, fname, msg))
    for fname in ("width", "height"):
        msg = _check_int(getattr(el, fname), lo=1)
        if msg:
            out.append(Violation(i, fname, msg))
    _check_real(el.opacity, "opacity", out, i, lo=0.0, hi=1.0)
    _validate_transform(el, i, out)


def _validate_text(el: TextElement, i: int, out: list, known_fonts):
    if not isinstance(el.content, str):
        out.append(Violation(i, "content", "must be a string"))
    elif "\n" in el.content:
        out.append(Violation(i, "content", "contains a newline; split upstream"))
    for fname in ("x", "y"):
        msg = _check_int(getattr(el, fname))
        if msg:
            out.append(Violation(i, fname, msg))
    fill = el.fill
    if not (isinstance(fill, tuple) and len(fill) == 4):
        out.append(Violation(i, "fill", "must be an (r, g, b, a) tuple"))
    else:
        for ci, c in enumerate(fill[:3]):
            msg = _check_int(c, lo=0)
            if msg or c > 255:
                out.append(Violation(i, "fill", f"channel {ci} must be an integer in [0, 255]"))
        _check_real(fill[3], "fill", out, i, lo=0.0, hi=1.0)
    if not isinstance(el.font_family, str) or not el.font_family:
        out.append(Violation(i, "font-family", "must be a non-empty string"))
    elif known_fonts is not None and el.font_family not in known_fonts:
        out.append(Violation(i, "font-family", f"unknown font {el.font_family!r}"))
    _check_real(el.font_size, "font-size", out, i, strict_lo=0.0)
    if el.font_weight not in FONT_WEIGHTS:
        out.append(Violation(i, "font-weight", f"must be one of {FONT_WEIGHTS}"))
    if el.font_style not in FONT_STYLES:
        out.append(Violation(i, "font-style", f"must be one of {FONT_STYLES}"))
    if el.text_anchor not in TEXT_ANCHORS:
        out.append(Violation(i, "text-anchor", f"must be one of {TEXT_ANCHORS}"))
    _check_real(el.letter_spacing, "letter-spacing", out, i)
    _check_real(el.opacity, "opacity", out, i, lo=0.0, hi=1.0)
    _validate_transform(el, i, out)
