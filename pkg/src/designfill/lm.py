"""Causal transformer over mixed text/image token streams.

Text and image tokens get separate embedders and separate prediction heads.
Image tokens are embedded by looking up a frozen copy of the quantizer
codebook, concatenating Fourier features of the token's grid position, and
projecting to model width; the codebook is a buffer and never trains here.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, asdict
from typing import List, Optional, Sequence, Tuple

import numpy as np
import torch
from torch import nn

from . import tokenizer as tok
from .checkpoints import load_checkpoint, save_checkpoint
from .sequences import Modality, Token
from .utils import NonFiniteLoss, sha256_bytes


class SequenceTooLong(ValueError):
    pass


class MissingGridPos(ValueError):
    pass


@dataclass(frozen=True)
class LMConfig:
    codebook_size: int
    grid_side: int
    code_dim: int
    d_model: int = 128
    n_layers: int = 4
    n_heads: int = 4
    d_ff: Optional[int] = None
    max_seq_len: int = 2048
    text_vocab_size: int = tok.TEXT_VOCAB_SIZE
    fourier_frequencies: int = 8
    dropout: float = 0.0

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise ValueError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if self.grid_side > 2**self.fourier_frequencies:
            raise ValueError(
                f"grid side {self.grid_side} needs more than {self.fourier_frequencies} "
                "frequencies for injective positions"
            )

    @property
    def ff_width(self) -> int:
        return self.d_ff if self.d_ff is not None else 4 * self.d_model

    def to_dict(self) -> dict:
        return asdict(self)

    @staticmethod
    def from_dict(d: dict) -> "LMConfig":
        return LMConfig(**d)


def fourier_features(u: torch.Tensor, n_freq: int) -> torch.Tensor:
    """[sin(2^k pi u), cos(2^k pi u)] for k = 0..n_freq-1, stacked on the
    last axis; u is expected in [0, 1)."""
    k = 2.0 ** torch.arange(n_freq, dtype=u.dtype, device=u.device)
    ang = math.pi * u[..., None] * k
    return torch.cat([torch.sin(ang), torch.cos(ang)], dim=-1)


@dataclass
class Batch:
    ids: torch.Tensor       # (B, T) int64
    is_image: torch.Tensor  # (B, T) bool
    rows: torch.Tensor      # (B, T) int64, 0 where text
    cols: torch.Tensor      # (B, T) int64
    valid: torch.Tensor     # (B, T) bool, False on right padding


def pack_streams(streams: Sequence[Sequence[Token]], max_seq_len: Optional[int] = None) -> Batch:
    if not streams:
        raise ValueError("empty batch")
    t_max = max(len(s) for s in streams)
    if max_seq_len is not None and t_max > max_seq_len:
        raise SequenceTooLong(f"stream length {t_max} exceeds max_seq_len {max_seq_len}")
    b = len(streams)
    ids = torch.zeros((b, t_max), dtype=torch.int64)
    is_image = torch.zeros((b, t_max), dtype=torch.bool)
    rows = torch.zeros((b, t_max), dtype=torch.int64)
    cols = torch.zeros((b, t_max), dtype=torch.int64)
    valid = torch.zeros((b, t_max), dtype=torch.bool)
    for bi, stream in enumerate(streams):
        for ti, t in enumerate(stream):
            ids[bi, ti] = t.id
            valid[bi, ti] = True
            if t.modality == Modality.IMAGE:
                if t.row is None or t.col is None:
                    raise MissingGridPos(f"image token at position {ti} lacks grid_pos")
                is_image[bi, ti] = True
                rows[bi, ti] = t.row
                cols[bi, ti] = t.col
    return Batch(ids, is_image, rows, cols, valid)


class TransformerBlock(nn.Module):
    def __init__(self, cfg: LMConfig):
        super().__init__()
        d = cfg.d_model
        self.n_heads = cfg.n_heads
        self.d_head = d // cfg.n_heads
        self.ln1 = nn.LayerNorm(d)
        self.q = nn.Linear(d, d)
        self.k = nn.Linear(d, d)
        self.v = nn.Linear(d, d)
        self.o = nn.Linear(d, d)
        self.ln2 = nn.LayerNorm(d)
        self.ff1 = nn.Linear(d, cfg.ff_width)
        self.ff2 = nn.Linear(cfg.ff_width, d)
        self.drop = nn.Dropout(cfg.dropout)

    def forward(self, x: torch.Tensor, causal_bias: torch.Tensor) -> torch.Tensor:
        b, t, d = x.shape
        h = self.ln1(x)

        def split(m):
            return m.view(b, t, self.n_heads, self.d_head).transpose(1, 2)

        q, k, v = split(self.q(h)), split(self.k(h)), split(self.v(h))
        att = q @ k.transpose(-2, -1) / math.sqrt(self.d_head) + causal_bias
        att = torch.softmax(att, dim=-1)
        ctx = (att @ v).transpose(1, 2).reshape(b, t, d)
        x = x + self.drop(self.o(ctx))
        h = self.ln2(x)
        x = x + self.drop(self.ff2(torch.nn.functional.gelu(self.ff1(h))))
        return x


class DualHeadLM(nn.Module):
    def __init__(self, config: LMConfig, codebook: np.ndarray):
        super().__init__()
        cb = np.asarray(codebook, dtype=np.float32)
        if cb.shape != (config.codebook_size, config.code_dim):
            raise ValueError(
                f"codebook shape {cb.shape} != ({config.codebook_size}, {config.code_dim})"
            )
        self.config = config
        self.register_buffer("codebook", torch.from_numpy(cb.copy()))
        d = config.d_model
        self.text_embed = nn.Embedding(config.text_vocab_size, d)
        self.image_proj = nn.Linear(config.code_dim + 4 * config.fourier_frequencies, d)
        self.pos_embed = nn.Embedding(config.max_seq_len, d)
        self.blocks = nn.ModuleList(TransformerBlock(config) for _ in range(config.n_layers))
        self.ln_f = nn.LayerNorm(d)
        self.text_head = nn.Linear(d, config.text_vocab_size)
        self.image_head = nn.Linear(d, config.codebook_size)

    def codebook_hash(self) -> str:
        w = self.codebook.detach().cpu().to(torch.float32).numpy()
        return sha256_bytes(np.ascontiguousarray(w).tobytes())

    def grid_fourier(self, rows: torch.Tensor, cols: torch.Tensor) -> torch.Tensor:
        g = float(self.config.grid_side)
        dt = self.text_embed.weight.dtype
        u = rows.to(dt) / g
        v = cols.to(dt) / g
        nf = self.config.fourier_frequencies
        return torch.cat([fourier_features(u, nf), fourier_features(v, nf)], dim=-1)

    def embed_batch(self, batch: Batch) -> torch.Tensor:
        ids = batch.ids
        txt = self.text_embed(torch.where(batch.is_image, torch.zeros_like(ids), ids))
        cb = self.codebook.to(self.text_embed.weight.dtype)
        img_in = torch.cat(
            [cb[torch.where(batch.is_image, ids, torch.zeros_like(ids))],
             self.grid_fourier(batch.rows, batch.cols)],
            dim=-1,
        )
        img = self.image_proj(img_in)
        x = torch.where(batch.is_image[..., None], img, txt)
        t = ids.shape[1]
        if t > self.config.max_seq_len:
            raise SequenceTooLong(f"{t} > {self.config.max_seq_len}")
        return x + self.pos_embed.weight[:t][None]

    def forward(self, batch: Batch) -> Tuple[torch.Tensor, torch.Tensor]:
        x = self.embed_batch(batch)
        t = x.shape[1]
        bias = torch.full((t, t), float("-inf"), dtype=x.dtype).triu(1)
        for blk in self.blocks:
            x = blk(x, bias)
        x = self.ln_f(x)
        return self.text_head(x), self.image_head(x)

    # loss ------------------------------------------------------------------

    def loss(self, streams: Sequence[Sequence[Token]]):
        """Mean next-token cross-entropy with the head chosen by each target
        token's modality; every predicted position weighs equally."""
        batch = pack_streams(streams, self.config.max_seq_len)
        text_logits, image_logits = self.forward(batch)
        pred_t = batch.valid[:, 1:]
        tgt_ids = batch.ids[:, 1:]
        tgt_img = batch.is_image[:, 1:]
        lt = text_logits[:, :-1]
        li = image_logits[:, :-1]
        ce_text = torch.nn.functional.cross_entropy(
            lt.reshape(-1, lt.shape[-1]), tgt_ids.reshape(-1), reduction="none"
        ).view(tgt_ids.shape)
        ce_img = torch.nn.functional.cross_entropy(
            li.reshape(-1, li.shape[-1]),
            torch.where(tgt_img, tgt_ids, torch.zeros_like(tgt_ids)).reshape(-1),
            reduction="none",
        ).view(tgt_ids.shape)
        ce = torch.where(tgt_img, ce_img, ce_text)
        n_valid = pred_t.sum()
        total = (ce * pred_t).sum() / n_valid
        with torch.no_grad():
            tmask = pred_t & ~tgt_img
            imask = pred_t & tgt_img
            text_mean = float((ce * tmask).sum() / tmask.sum()) if tmask.any() else 0.0
            img_mean = float((ce * imask).sum() / imask.sum()) if imask.any() else 0.0
        return total, {"text_ce": text_mean, "image_ce": img_mean, "positions": int(n_valid)}

    @torch.no_grad()
    def next_logits(self, stream: Sequence[Token]) -> Tuple[torch.Tensor, torch.Tensor]:
        """Logit pair for the position after the given prefix."""
        self.eval()
        text_logits, image_logits = self.forward(pack_streams([stream], self.config.max_seq_len))
        return text_logits[0, -1], image_logits[0, -1]


@dataclass
class LMTrainConfig:
    steps: int = 2000
    lr: float = 5e-5
    batch_size: int = 8
    seed: int = 0
    p_fim: float = 0.9
    clip_norm: float = 1.0
    log_every: int = 100


@dataclass
class LMLossReport:
    total: float
    text_ce: float
    image_ce: float


def train_step(
    model: DualHeadLM,
    streams: Sequence[Sequence[Token]],
    optimizer: torch.optim.Optimizer,
    clip_norm: float = 1.0,
) -> LMLossReport:
    model.train()
    total, parts = model.loss(streams)
    if not torch.isfinite(total):
        raise NonFiniteLoss(
            f"lm loss {total.detach().item()} "
            f"(text {parts['text_ce']}, image {parts['image_ce']})"
        )
    optimizer.zero_grad(set_to_none=True)
    total.backward()
    if clip_norm:
        torch.nn.utils.clip_grad_norm_(model.parameters(), clip_norm)
    optimizer.step()
    return LMLossReport(total.detach().item(), parts["text_ce"], parts["image_ce"])


def fit_lm(
    model: DualHeadLM,
    docs: Sequence[Sequence[Token]],
    cfg: LMTrainConfig,
    log=None,
) -> List[dict]:
    """Sample documents with replacement, apply the infill transform per
    draw, and take one optimizer step per batch."""
    from .sequences import apply_fim

    rng = np.random.default_rng(cfg.seed)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    history = []
    for step in range(1, cfg.steps + 1):
        take = rng.integers(0, len(docs), size=cfg.batch_size)
        batch = [apply_fim(docs[i], rng, cfg.p_fim).tokens for i in take]
        rep = train_step(model, batch, opt, cfg.clip_norm)
        rec = {"step": step, "loss": rep.total, "text_ce": rep.text_ce, "image_ce": rep.image_ce}
        history.append(rec)
        if log and (step % cfg.log_every == 0 or step == cfg.steps):
            log(rec)
    return history


@torch.no_grad()
def next_token_accuracy(model: DualHeadLM, docs: Sequence[Sequence[Token]]) -> float:
    """Fraction of next-token targets hit by the argmax of the matching head."""
    model.eval()
    hit, total = 0, 0
    for doc in docs:
        batch = pack_streams([doc], model.config.max_seq_len)
        text_logits, image_logits = model.forward(batch)
        for t in range(1, len(doc)):
            tgt = doc[t]
            logits = image_logits if tgt.modality == Modality.IMAGE else text_logits
            hit += int(int(logits[0, t - 1].argmax()) == tgt.id)
            total += 1
    return hit / max(1, total)


def save_lm(path, model: DualHeadLM, extra: Optional[dict] = None):
    arrays = {k: v.detach().cpu().to(torch.float32).numpy() for k, v in model.state_dict().items()}
    manifest = {
        "kind": "lm",
        "config": model.config.to_dict(),
        "vocab_sha256": tok.vocab_sha256(),
        "codebook_sha256": model.codebook_hash(),
    }
    if extra:
        manifest.update(extra)
    save_checkpoint(path, manifest, arrays)


def load_lm(path, expect_quantizer_sha256: Optional[str] = None) -> DualHeadLM:
    manifest, arrays = load_checkpoint(path)
    if manifest.get("kind") != "lm":
        raise ValueError(f"{path} is not an lm checkpoint")
    if manifest["vocab_sha256"] != tok.vocab_sha256():
        raise ValueError("checkpoint was trained against a different text vocabulary")
    if expect_quantizer_sha256 is not None:
        have = manifest.get("quantizer_sha256")
        if have != expect_quantizer_sha256:
            raise ValueError(
                f"checkpoint lineage mismatch: trained against quantizer {have}, "
                f"expected {expect_quantizer_sha256}"
            )
    config = LMConfig.from_dict(manifest["config"])
    model = DualHeadLM(config, arrays["codebook"])
    model.load_state_dict({k: torch.from_numpy(v.copy()) for k, v in arrays.items()})
    return model
