"""Decode image blocks from a model that knows nothing: logits are pure
noise, and only the routing rules plus grammar masks keep the output
well-formed. Every draw still comes out as a legal token block."""

from types import SimpleNamespace

import numpy as np

from designfill import tokenizer as tok
from designfill.sampling import SamplerConfig, generate
from designfill.sequences import ImageHref, make_completion_prompt, middle_to_literal
from designfill.svg_codec import parse_href_value
from designfill.templates import (
    Canvas,
    DesignTemplate,
    ImageElement,
    ImageTokenBlock,
    TextElement,
)

Z, G = 32, 2


class NoiseModel:
    """Uniform random logits for both heads on every step."""

    def __init__(self, seed):
        self.rng = np.random.default_rng(seed)
        self.config = SimpleNamespace(grid_side=G)

    def next_logits(self, ctx):
        return self.rng.normal(size=tok.TEXT_VOCAB_SIZE), self.rng.normal(size=Z)


grid = np.zeros((G, G), dtype=np.int64)
template = DesignTemplate(
    canvas=Canvas(120, 90),
    elements=(
        ImageElement(payload=ImageTokenBlock(48, 48, grid), x=8, y=8, width=48, height=48),
        TextElement(content="HELLO", x=10, y=80, fill=(44, 44, 52, 1.0),
                    font_family="Arial", font_size=12.0),
    ),
)

prompt, gold = make_completion_prompt(template, ImageHref(0))
print(f"prompt: {len(prompt)} tokens, gold middle: {len(gold)} tokens")

model = NoiseModel(seed=0)
rng = np.random.default_rng(42)
cfg = SamplerConfig(top_p=0.9, temperature=1.0)

for k in range(3):
    res = generate(model, prompt, "image", cfg, rng, G)
    block = parse_href_value(middle_to_literal(res.tokens))
    print(
        f"draw {k}: stop={res.stop_reason}  declared {block.width}x{block.height}"
        f"  tokens {block.grid.reshape(-1).tolist()}"
    )

# without enforcement the same model violates the grammar immediately
free = SamplerConfig(top_p=0.9, temperature=1.0, enforce_grammar=False)
res = generate(model, prompt, "image", free, rng, G)
print(f"enforcement off: stop={res.stop_reason}, kept {len(res.tokens)} tokens")
