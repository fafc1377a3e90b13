"""Build a small design template by hand and round-trip it through the
markup codec. Shows the canonical serialization rules: fixed attribute
order, rgba() fills, and image payloads written as token runs."""

import numpy as np

from designfill.svg_codec import parse, serialize
from designfill.templates import (
    Canvas,
    DesignTemplate,
    ImageElement,
    ImageTokenBlock,
    TextElement,
    validate,
)

grid = np.arange(16, dtype=np.int64).reshape(4, 4)
poster = DesignTemplate(
    canvas=Canvas(240, 180),
    elements=(
        ImageElement(payload=ImageTokenBlock(96, 96, grid), x=12, y=20, width=96, height=96),
        TextElement(
            content="SUMMER",
            x=24,
            y=150,
            fill=(31, 58, 147, 1.0),
            font_family="Montserrat",
            font_size=28.0,
            font_weight="bold",
        ),
    ),
)

report = validate(poster)
print(f"valid: {report.ok}")

markup = serialize(poster)
print("--- serialized ---")
print(markup)

back = parse(markup)
print("--- round trip ---")
print(f"parse(serialize(t)) == t      : {back == poster}")
print(f"serialize(parse(s)) == s      : {serialize(back) == markup}")

# integer attributes are strict; reals are normalized on write
try:
    parse(markup.replace('height="180"', 'height="180.0"'))
except ValueError as e:
    print(f"non-integer size rejected     : {e}")
renorm = parse(markup.replace('font-size="28"', 'font-size="28.000"'))
print(f"real values renormalize       : {serialize(renorm) == markup}")
