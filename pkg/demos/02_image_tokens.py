"""Train a small RGBA quantizer on procedural sprites for a minute, then
push one sprite through encode -> token grid -> decode and report the
reconstruction error against a predict-alpha-1 baseline."""

import numpy as np

from designfill.datagen import GenConfig, make_sprite
from designfill.evaluation import format_recon_table, recon_metrics
from designfill.quantizer import (
    QuantTrainConfig,
    QuantizerConfig,
    build_quantizer,
    fit_quantizer,
)

rng = np.random.default_rng(7)
gen = GenConfig()
train = [make_sprite(rng, gen) for _ in range(24)]
test = [make_sprite(rng, gen) for _ in range(8)]

# quarter-scale config so this runs in about a minute on one core
cfg = QuantizerConfig(
    square_size=32,
    scaling_factor=8,
    codebook_size=64,
    code_dim=16,
    channels=(16, 24, 32, 48),
)
model = build_quantizer(cfg, seed=0)
print(f"grid: {cfg.grid_side}x{cfg.grid_side} tokens per image, codebook {cfg.codebook_size}")

history = fit_quantizer(
    model,
    train,
    QuantTrainConfig(steps=300, lr=2e-3, batch_size=8, eval_every=100),
    log=lambda r: print(
        f"step {r['step']:4d}  loss {r['loss']:.4f}"
        + (f"  rgb_mse {r['rgb_mse']:.4f}  alpha_mse {r['alpha_mse']:.4f}" if "rgb_mse" in r else "")
    ),
)

sprite = test[0]
tokens = model.encode(sprite)
print("--- one sprite as tokens ---")
print(tokens)
recon = model.decode(tokens, sprite.width, sprite.height)
print(f"decoded back to {recon.width}x{recon.height} rgba")

print("--- held-out metrics ---")
print(format_recon_table(recon_metrics(model, test)), end="")
