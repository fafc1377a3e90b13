"""RGBA vector-quantizing autoencoder.

Encodes an arbitrary-size transparent image to a g x g grid of discrete
codebook indices and decodes back to any target size. Resizing on both
paths goes through the package's own bilinear filter so encode/decode are
bit-reproducible for a given set of weights.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict
from typing import Callable, List, Optional, Sequence

import numpy as np
import torch
from torch import nn

from .checkpoints import load_checkpoint, save_checkpoint
from .raster import RasterImage, ShapeMismatch, composite_over_white, mse, resize_bilinear
from .utils import NonFiniteLoss, sha256_bytes

GN_GROUPS = 8

# cap on decode output size; sampled size fields can be arbitrary digit runs
MAX_DECODE_PIXELS = 16_000_000


class IndexOutOfRange(ValueError):
    pass


@dataclass(frozen=True)
class QuantizerConfig:
    square_size: int = 64
    scaling_factor: int = 8
    codebook_size: int = 256
    code_dim: int = 32
    channels: tuple = (32, 48, 64, 96)
    commitment_weight: float = 0.25
    perceptual_loss_enabled: bool = False
    io_channels: int = 4

    def __post_init__(self):
        s, f = self.square_size, self.scaling_factor
        if s % f != 0:
            raise ValueError(f"square_size {s} must be divisible by scaling_factor {f}")
        stages = int(math.log2(f))
        if 2**stages != f:
            raise ValueError(f"scaling_factor {f} must be a power of two")
        if len(self.channels) != stages + 1:
            raise ValueError(
                f"need {stages + 1} channel widths for f={f}, got {len(self.channels)}"
            )
        for c in self.channels:
            if c % GN_GROUPS != 0:
                raise ValueError(f"channel width {c} must be divisible by {GN_GROUPS}")
        if self.io_channels not in (3, 4):
            raise ValueError("io_channels must be 3 (RGB) or 4 (RGBA)")

    @property
    def grid_side(self) -> int:
        return self.square_size // self.scaling_factor

    @property
    def n_stages(self) -> int:
        return int(math.log2(self.scaling_factor))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channels"] = list(self.channels)
        return d

    @staticmethod
    def from_dict(d: dict) -> "QuantizerConfig":
        d = dict(d)
        d["channels"] = tuple(d["channels"])
        return QuantizerConfig(**d)


class ResBlock(nn.Module):
    def __init__(self, cin: int, cout: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(GN_GROUPS, cin)
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.norm2 = nn.GroupNorm(GN_GROUPS, cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.skip = nn.Conv2d(cin, cout, 1) if cin != cout else nn.Identity()

    def forward(self, x):
        h = self.conv1(torch.nn.functional.silu(self.norm1(x)))
        h = self.conv2(torch.nn.functional.silu(self.norm2(h)))
        return self.skip(x) + h


class Encoder(nn.Module):
    def __init__(self, cfg: QuantizerConfig):
        super().__init__()
        ch = cfg.channels
        self.conv_in = nn.Conv2d(cfg.io_channels, ch[0], 3, padding=1)
        blocks = []
        for k in range(cfg.n_stages):
            blocks.append(ResBlock(ch[k], ch[k + 1]))
            blocks.append(nn.Conv2d(ch[k + 1], ch[k + 1], 3, stride=2, padding=1))
        self.down = nn.Sequential(*blocks)
        self.mid = ResBlock(ch[-1], ch[-1])
        self.norm_out = nn.GroupNorm(GN_GROUPS, ch[-1])
        self.conv_out = nn.Conv2d(ch[-1], cfg.code_dim, 1)

    def forward(self, x):
        h = self.mid(self.down(self.conv_in(x)))
        return self.conv_out(torch.nn.functional.silu(self.norm_out(h)))


class Decoder(nn.Module):
    def __init__(self, cfg: QuantizerConfig):
        super().__init__()
        ch = cfg.channels
        self.conv_in = nn.Conv2d(cfg.code_dim, ch[-1], 3, padding=1)
        self.mid = ResBlock(ch[-1], ch[-1])
        blocks = []
        for k in reversed(range(cfg.n_stages)):
            blocks.append(nn.Upsample(scale_factor=2, mode="nearest"))
            blocks.append(nn.Conv2d(ch[k + 1], ch[k + 1], 3, padding=1))
            blocks.append(ResBlock(ch[k + 1], ch[k]))
        self.up = nn.Sequential(*blocks)
        self.norm_out = nn.GroupNorm(GN_GROUPS, ch[0])
        self.conv_out = nn.Conv2d(ch[0], cfg.io_channels, 3, padding=1)

    def forward(self, z):
        h = self.up(self.mid(self.conv_in(z)))
        return self.conv_out(torch.nn.functional.silu(self.norm_out(h)))


def nearest_code(z_e: torch.Tensor, codebook: torch.Tensor) -> torch.Tensor:
    """Lowest-index argmin of squared L2 distance. z_e: (..., d_z),
    codebook: (Z, d_z); returns integer indices shaped like z_e[..., 0]."""
    flat = z_e.reshape(-1, z_e.shape[-1])
    d = (
        flat.pow(2).sum(1, keepdim=True)
        - 2.0 * flat @ codebook.t()
        + codebook.pow(2).sum(1)[None, :]
    )
    # exact ties go to the lowest index: integer min over the tied set
    min_d = d.min(dim=1, keepdim=True).values
    z = codebook.shape[0]
    cand = torch.where(d == min_d, torch.arange(z, device=d.device), z)
    idx = cand.min(dim=1).values
    return idx.reshape(z_e.shape[:-1])


@dataclass
class LossReport:
    total: float
    recon_l1: float
    codebook: float
    commitment: float
    perceptual: float
    batch_codes_used: int


class QuantizerModel(nn.Module):
    def __init__(self, config: QuantizerConfig):
        super().__init__()
        self.config = config
        self.encoder = Encoder(config)
        self.decoder = Decoder(config)
        self.codebook = nn.Embedding(config.codebook_size, config.code_dim)
        nn.init.uniform_(self.codebook.weight, -1.0 / config.codebook_size, 1.0 / config.codebook_size)
        self.perceptual_fn: Optional[Callable] = None

    @property
    def _dtype(self):
        return self.codebook.weight.dtype

    def wide_precision(self) -> "QuantizerModel":
        """Switch to float64 weights; used by gradient finite-difference checks."""
        return self.double()

    def codebook_numpy(self) -> np.ndarray:
        return self.codebook.weight.detach().cpu().numpy().copy()

    def codebook_hash(self) -> str:
        w = self.codebook.weight.detach().cpu().to(torch.float32).numpy()
        return sha256_bytes(np.ascontiguousarray(w).tobytes())

    # training path ---------------------------------------------------------

    def forward_train(self, x: torch.Tensor):
        """x: (B, C, s, s). Returns recon, indices, and the three loss terms."""
        z_e = self.encoder(x)
        zperm = z_e.permute(0, 2, 3, 1)
        idx = nearest_code(zperm, self.codebook.weight)
        z_q = self.codebook(idx).permute(0, 3, 1, 2)
        codebook_loss = torch.mean((z_q - z_e.detach()) ** 2)
        commit_loss = torch.mean((z_e - z_q.detach()) ** 2)
        dec_in = z_e + (z_q - z_e).detach()
        recon = self.decoder(dec_in)
        return recon, idx, codebook_loss, commit_loss

    def loss_terms(self, x: torch.Tensor):
        recon, idx, codebook_loss, commit_loss = self.forward_train(x)
        recon_l1 = torch.mean(torch.abs(recon - x))
        perceptual = x.new_zeros(())
        if self.config.perceptual_loss_enabled:
            if self.perceptual_fn is None:
                raise ValueError("perceptual loss enabled but no feature-loss callable is set")
            perceptual = self.perceptual_fn(
                _composite_tensor(recon.clamp(0.0, 1.0)), _composite_tensor(x)
            )
        total = recon_l1 + codebook_loss + self.config.commitment_weight * commit_loss + perceptual
        return total, recon_l1, codebook_loss, commit_loss, perceptual, idx

    def train_step(self, batch: torch.Tensor, optimizer: torch.optim.Optimizer) -> LossReport:
        self.train()
        total, recon_l1, cb, cm, perc, idx = self.loss_terms(batch)
        if not torch.isfinite(total):
            raise NonFiniteLoss(
                f"loss={total.detach().item()} recon={recon_l1.detach().item()} "
                f"codebook={cb.detach().item()} commit={cm.detach().item()} "
                f"perceptual={perc.detach().item()}"
            )
        optimizer.zero_grad(set_to_none=True)
        total.backward()
        optimizer.step()
        return LossReport(
            total.detach().item(), recon_l1.detach().item(),
            cb.detach().item(), cm.detach().item(), perc.detach().item(),
            int(idx.unique().numel()),
        )

    # inference path --------------------------------------------------------

    def _to_tensor(self, img: RasterImage) -> torch.Tensor:
        s = self.config.square_size
        sq = resize_bilinear(img, s, s)
        arr = sq.pixels[..., : self.config.io_channels]
        return torch.from_numpy(np.ascontiguousarray(arr.transpose(2, 0, 1)))[None].to(self._dtype)

    @torch.no_grad()
    def encode(self, img: RasterImage) -> np.ndarray:
        self.eval()
        z_e = self.encoder(self._to_tensor(img))
        idx = nearest_code(z_e.permute(0, 2, 3, 1), self.codebook.weight)
        return idx[0].cpu().numpy().astype(np.int64)

    @torch.no_grad()
    def decode(self, grid: np.ndarray, out_w: int, out_h: int) -> RasterImage:
        self.eval()
        if out_w < 1 or out_h < 1:
            raise ValueError(f"output size {out_w}x{out_h} must be positive")
        if out_w * out_h > MAX_DECODE_PIXELS:
            raise ValueError(
                f"output size {out_w}x{out_h} exceeds {MAX_DECODE_PIXELS} pixels"
            )
        g = np.asarray(grid)
        z = self.config.codebook_size
        if g.size and (g.min() < 0 or g.max() >= z):
            raise IndexOutOfRange(f"indices must lie in [0, {z}), got [{g.min()}, {g.max()}]")
        if g.shape != (self.config.grid_side, self.config.grid_side):
            raise ShapeMismatch(
                f"grid shape {g.shape}, expected {(self.config.grid_side,) * 2}"
            )
        idx = torch.from_numpy(g.astype(np.int64))[None]
        z_q = self.codebook(idx).permute(0, 3, 1, 2)
        out = self.decoder(z_q).clamp(0.0, 1.0)
        arr = out[0].cpu().to(torch.float64).numpy().transpose(1, 2, 0)
        if self.config.io_channels == 3:
            arr = np.concatenate([arr, np.ones_like(arr[..., :1])], axis=-1)
        square = RasterImage(np.ascontiguousarray(arr))
        return resize_bilinear(square, out_h, out_w)


def _composite_tensor(x: torch.Tensor) -> torch.Tensor:
    """Alpha-composite a (B, 4, H, W) batch over white; returns RGB."""
    if x.shape[1] == 3:
        return x
    rgb, a = x[:, :3], x[:, 3:4]
    return 1.0 + a * (rgb - 1.0)


def build_quantizer(config: QuantizerConfig, seed: int = 0) -> QuantizerModel:
    torch.manual_seed(seed)
    return QuantizerModel(config)


def init_alpha_from_rgb(rgb_state: dict, config: QuantizerConfig) -> QuantizerModel:
    """Grow a 3-channel pretrained model to RGBA: the new input filter slice
    and output filter row (and output bias entry) are the mean of the RGB
    ones; every other tensor is copied verbatim."""
    if config.io_channels != 4:
        raise ValueError("target config must have io_channels=4")
    model = QuantizerModel(config)
    target = model.state_dict()
    in_w, out_w, out_b = "encoder.conv_in.weight", "decoder.conv_out.weight", "decoder.conv_out.bias"
    for name, dst in target.items():
        if name not in rgb_state:
            raise ShapeMismatch(f"pretrained weights missing {name!r}")
        src = torch.as_tensor(rgb_state[name])
        if name == in_w:
            if src.shape[1] != 3 or dst.shape[1] != 4 or src.shape[0] != dst.shape[0]:
                raise ShapeMismatch(f"{name}: {tuple(src.shape)} cannot grow to {tuple(dst.shape)}")
            dst.copy_(torch.cat([src, src.mean(dim=1, keepdim=True)], dim=1))
        elif name == out_w:
            if src.shape[0] != 3 or dst.shape[0] != 4:
                raise ShapeMismatch(f"{name}: {tuple(src.shape)} cannot grow to {tuple(dst.shape)}")
            dst.copy_(torch.cat([src, src.mean(dim=0, keepdim=True)], dim=0))
        elif name == out_b:
            if src.shape != (3,):
                raise ShapeMismatch(f"{name}: expected (3,), got {tuple(src.shape)}")
            dst.copy_(torch.cat([src, src.mean()[None]]))
        else:
            if src.shape != dst.shape:
                raise ShapeMismatch(f"{name}: {tuple(src.shape)} != {tuple(dst.shape)}")
            dst.copy_(src)
    model.load_state_dict(target)
    return model


# ---------------------------------------------------------------------------
# training loop and metrics


@dataclass
class QuantTrainConfig:
    steps: int = 2000
    lr: float = 1e-3
    batch_size: int = 16
    seed: int = 0
    eval_every: int = 250
    early_stop_rgb: Optional[float] = None
    early_stop_alpha: Optional[float] = None


def images_to_batch(model: QuantizerModel, images: Sequence[RasterImage]) -> torch.Tensor:
    return torch.cat([model._to_tensor(im) for im in images], dim=0)


def reconstruction_mse(model: QuantizerModel, images: Sequence[RasterImage]) -> dict:
    """Round-trip error at square size: decode(encode(x), s, s) against the
    resized target; RGB compared after compositing over white."""
    s = model.config.square_size
    rgb_total, alpha_total = 0.0, 0.0
    for im in images:
        target = resize_bilinear(im, s, s)
        recon = model.decode(model.encode(im), s, s)
        rgb_total += mse(composite_over_white(recon), composite_over_white(target), "rgb")
        alpha_total += mse(recon, target, "alpha")
    n = max(1, len(images))
    return {"rgb_mse": rgb_total / n, "alpha_mse": alpha_total / n}


def codebook_utilization(model: QuantizerModel, images: Sequence[RasterImage]) -> float:
    used = set()
    for im in images:
        used.update(int(i) for i in model.encode(im).reshape(-1))
    return len(used) / model.config.codebook_size


def fit_quantizer(
    model: QuantizerModel,
    images: Sequence[RasterImage],
    cfg: QuantTrainConfig,
    log: Optional[Callable[[dict], None]] = None,
) -> List[dict]:
    """Adam training over a fixed image set; batches are sampled with a
    seeded generator. Early-stops when both MSE targets (if set) are met."""
    rng = np.random.default_rng(cfg.seed)
    data = images_to_batch(model, images)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    history = []
    for step in range(1, cfg.steps + 1):
        take = rng.integers(0, len(images), size=min(cfg.batch_size, len(images)))
        report = model.train_step(data[take], opt)
        rec = {"step": step, "loss": report.total, "recon_l1": report.recon_l1}
        if step % cfg.eval_every == 0 or step == cfg.steps:
            rec.update(reconstruction_mse(model, images))
            if log:
                log(rec)
            history.append(rec)
            if (
                cfg.early_stop_rgb is not None
                and cfg.early_stop_alpha is not None
                and rec["rgb_mse"] < cfg.early_stop_rgb
                and rec["alpha_mse"] < cfg.early_stop_alpha
            ):
                break
        else:
            history.append(rec)
    return history


# ---------------------------------------------------------------------------
# checkpoints


def save_quantizer(path, model: QuantizerModel, extra: Optional[dict] = None):
    arrays = {
        k: v.detach().cpu().to(torch.float32).numpy() for k, v in model.state_dict().items()
    }
    manifest = {
        "kind": "quantizer",
        "config": model.config.to_dict(),
        "codebook_sha256": model.codebook_hash(),
    }
    if extra:
        manifest.update(extra)
    save_checkpoint(path, manifest, arrays)


def load_quantizer(path) -> QuantizerModel:
    manifest, arrays = load_checkpoint(path)
    if manifest.get("kind") != "quantizer":
        raise ValueError(f"{path} is not a quantizer checkpoint")
    config = QuantizerConfig.from_dict(manifest["config"])
    model = QuantizerModel(config)
    state = {k: torch.from_numpy(v.copy()) for k, v in arrays.items()}
    model.load_state_dict(state)
    return model
