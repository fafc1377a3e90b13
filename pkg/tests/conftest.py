"""Shared fixtures: a reference template with known values, synthetic token
blocks, and tiny model configs sized for fast unit runs."""

import numpy as np
import pytest

from designfill.raster import RasterImage
from designfill.templates import (
    Canvas,
    DesignTemplate,
    ImageElement,
    ImageTokenBlock,
    TextElement,
)


def make_grid(rng, g, z):
    return rng.integers(0, z, size=(g, g), dtype=np.int64)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture
def poster_template():
    """A poster-like reference template with hand-pinned values: 419x298
    canvas, a 436x315 image block at (-9, -9) with a 360x260 payload, and a
    bold white headline at (32, 81)."""
    grid = np.arange(256, dtype=np.int64).reshape(16, 16) % 256
    return DesignTemplate(
        canvas=Canvas(419, 298),
        elements=(
            ImageElement(
                payload=ImageTokenBlock(360, 260, grid),
                x=-9,
                y=-9,
                width=436,
                height=315,
            ),
            TextElement(
                content="FAMILY",
                x=32,
                y=81,
                fill=(255, 255, 255, 1.0),
                font_family="Montserrat",
                font_size=30.0,
                font_weight="bold",
            ),
        ),
    )


def blockify(template, rng, codebook_size=32, grid_side=2):
    """Replace raster payloads with synthetic token blocks; grammar and
    span structure do not depend on what the indices are."""
    from dataclasses import replace

    elements = []
    for el in template.elements:
        if isinstance(el, ImageElement) and isinstance(el.payload, RasterImage):
            block = ImageTokenBlock(
                el.payload.width,
                el.payload.height,
                make_grid(rng, grid_side, codebook_size),
            )
            el = replace(el, payload=block)
        elements.append(el)
    return DesignTemplate(canvas=template.canvas, elements=tuple(elements))


def tiny_quantizer_config(**overrides):
    from designfill.quantizer import QuantizerConfig

    kw = dict(
        square_size=16,
        scaling_factor=8,
        codebook_size=32,
        code_dim=8,
        channels=(8, 8, 16, 16),
    )
    kw.update(overrides)
    return QuantizerConfig(**kw)


def solid_image(h, w, r, g, b, a):
    px = np.zeros((h, w, 4))
    px[..., 0] = r
    px[..., 1] = g
    px[..., 2] = b
    px[..., 3] = a
    return RasterImage(px)
