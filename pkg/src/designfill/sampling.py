"""Rule-based modality routing and nucleus sampling for infill decoding.

The router is a deterministic state machine over emitted tokens: ordinary
text until a block-open token, then width digits, a separator, height
digits, a separator, exactly g*g image-head tokens in row-major order, then
a forced block-close. Decoding masks each step's support so completions are
grammar-valid by construction whenever the budget suffices.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace
from typing import List, Optional, Sequence, Tuple

import numpy as np

from . import tokenizer as tok
from .sequences import Modality, Token, text_token


class GrammarViolation(ValueError):
    def __init__(self, message: str, position: Optional[int] = None):
        if position is not None:
            message = f"{message} (stream position {position})"
        super().__init__(message)
        self.position = position


class EmptySupport(ValueError):
    pass


class Mode(enum.Enum):
    TEXT_MODE = "text"
    IMG_WIDTH = "img_width"
    IMG_HEIGHT = "img_height"
    IMG_TOKENS = "img_tokens"
    FORCE_EOI = "force_eoi"


@dataclass(frozen=True)
class RouterState:
    grid_side: int
    mode: Mode = Mode.TEXT_MODE
    remaining: int = 0
    digits_seen: int = 0

    def grid_pos(self) -> Tuple[int, int]:
        """Row-major position of the next image token."""
        if self.mode is not Mode.IMG_TOKENS:
            raise GrammarViolation("no image token expected in this state")
        k = self.grid_side**2 - self.remaining
        return divmod(k, self.grid_side)


def initial_state(grid_side: int) -> RouterState:
    return RouterState(grid_side=grid_side)


def advance(state: RouterState, token: Token, position: Optional[int] = None) -> RouterState:
    """Consume one emitted token; raises GrammarViolation on an illegal one."""
    g = state.grid_side
    if state.mode is Mode.TEXT_MODE:
        if token.modality == Modality.IMAGE:
            raise GrammarViolation("image token outside an image block", position)
        if token.id == tok.BOI:
            return replace(state, mode=Mode.IMG_WIDTH, digits_seen=0)
        if token.id in (tok.SEP, tok.EOI):
            raise GrammarViolation(f"{tok.token_repr(token.id)} outside an image block", position)
        return state
    if state.mode in (Mode.IMG_WIDTH, Mode.IMG_HEIGHT):
        if token.modality == Modality.IMAGE:
            raise GrammarViolation("image token inside a size field", position)
        if token.id in tok.DIGIT_IDS:
            return replace(state, digits_seen=state.digits_seen + 1)
        if token.id == tok.SEP:
            if state.digits_seen == 0:
                raise GrammarViolation("separator before any size digit", position)
            if state.mode is Mode.IMG_WIDTH:
                return replace(state, mode=Mode.IMG_HEIGHT, digits_seen=0)
            return replace(state, mode=Mode.IMG_TOKENS, remaining=g * g, digits_seen=0)
        raise GrammarViolation(
            f"{tok.token_repr(token.id)} in a size field (digits or [sep] only)", position
        )
    if state.mode is Mode.IMG_TOKENS:
        if token.modality != Modality.IMAGE:
            raise GrammarViolation("text token inside the image-token run", position)
        row, col = state.grid_pos()
        if (token.row, token.col) not in ((None, None), (row, col)):
            raise GrammarViolation(
                f"image token carries grid_pos {(token.row, token.col)}, expected {(row, col)}",
                position,
            )
        nxt = state.remaining - 1
        if nxt == 0:
            return replace(state, mode=Mode.FORCE_EOI, remaining=0)
        return replace(state, remaining=nxt)
    # FORCE_EOI
    if token.modality == Modality.TEXT and token.id == tok.EOI:
        return replace(state, mode=Mode.TEXT_MODE)
    raise GrammarViolation("expected the forced block-close token", position)


def next_step(state: RouterState) -> Tuple[Modality, Optional[int]]:
    """(modality of the next token, forced id or None)."""
    if state.mode is Mode.FORCE_EOI:
        return Modality.TEXT, tok.EOI
    if state.mode is Mode.IMG_TOKENS:
        return Modality.IMAGE, None
    return Modality.TEXT, None


def next_modality(state: RouterState, last_token: Optional[Token]):
    """Spec-facing wrapper: fold in the last emitted token, then report what
    must come next. Returns (modality, forced_id, new_state)."""
    if last_token is not None:
        state = advance(state, last_token)
    modality, forced = next_step(state)
    return modality, forced, state


def validate_stream(tokens: Sequence[Token], grid_side: int) -> List[Tuple[int, str]]:
    """Replay a document stream; returns (position, message) violations.
    A complete document must end back in ordinary text mode."""
    state = initial_state(grid_side)
    out = []
    for pos, t in enumerate(tokens):
        try:
            state = advance(state, t, pos)
        except GrammarViolation as e:
            out.append((pos, str(e)))
            state = initial_state(grid_side)  # resync to surface later violations
    if state.mode is not Mode.TEXT_MODE:
        out.append((len(tokens), f"stream ends mid-block in mode {state.mode.value}"))
    return out


# ---------------------------------------------------------------------------
# sampling


def top_p_sample(
    logits,
    p: float,
    temperature: float,
    rng: np.random.Generator,
    allowed_mask=None,
) -> int:
    """Nucleus sampling: softmax at the given temperature restricted to the
    allowed ids, minimal sorted prefix with cumulative mass >= p, renormalize,
    draw. p <= 0 degenerates to argmax (greedy)."""
    z = np.asarray(logits, dtype=np.float64).reshape(-1)
    if allowed_mask is not None:
        mask = np.asarray(allowed_mask, dtype=bool).reshape(-1)
        if mask.shape != z.shape:
            raise ValueError(f"mask shape {mask.shape} != logits shape {z.shape}")
        z = np.where(mask, z, -np.inf)
    if not np.any(np.isfinite(z)):
        raise EmptySupport("no allowed token has finite probability")
    if p <= 0.0:
        return int(np.argmax(z))
    if temperature <= 0.0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    z = z / temperature
    z = z - np.max(z)
    probs = np.exp(z)
    probs /= probs.sum()
    order = np.argsort(-probs, kind="stable")
    csum = np.cumsum(probs[order])
    cut = int(np.searchsorted(csum, min(p, 1.0), side="left"))
    cut = min(cut, len(order) - 1)  # float round-off: never drop everything
    kept = order[: cut + 1]
    kp = probs[kept]
    kp /= kp.sum()
    return int(rng.choice(kept, p=kp))


TASKS = ("attr", "text", "image")


@dataclass(frozen=True)
class SamplerConfig:
    top_p: float = 0.9
    temperature: float = 1.0
    greedy: bool = False
    budgets: dict = field(
        default_factory=lambda: {"attr": 10, "text": 50, "image": 278}
    )
    enforce_grammar: bool = True

    def __post_init__(self):
        if not (0.0 < self.top_p <= 1.0):
            raise ValueError(f"top_p must be in (0, 1], got {self.top_p}")
        if self.temperature <= 0:
            raise ValueError(f"temperature must be positive, got {self.temperature}")
        for k, v in self.budgets.items():
            if v < 1:
                raise ValueError(f"budget for {k!r} must be positive, got {v}")


@dataclass
class GenerationResult:
    tokens: List[Token]
    complete: bool
    stop_reason: str


def _prompt_prefix_state(prompt: Sequence[Token], grid_side: int) -> RouterState:
    """Router state at the end of the P section ([pre] P [suf] S [mid]): the
    middle continues from exactly where P stopped."""
    try:
        start = next(i for i, t in enumerate(prompt) if t.modality == Modality.TEXT and t.id == tok.FIM_PREFIX)
        end = next(i for i, t in enumerate(prompt) if t.modality == Modality.TEXT and t.id == tok.FIM_SUFFIX)
    except StopIteration:
        raise ValueError("prompt lacks the prefix/suffix sentinels") from None
    state = initial_state(grid_side)
    for pos in range(start + 1, end):
        state = advance(state, prompt[pos], pos)
    return state


def _text_mask(state: RouterState, task: str, block_done: bool, enforce: bool) -> Optional[np.ndarray]:
    if not enforce:
        return None
    mask = np.zeros(tok.TEXT_VOCAB_SIZE, dtype=bool)
    if state.mode in (Mode.IMG_WIDTH, Mode.IMG_HEIGHT):
        for d in tok.DIGIT_IDS:
            mask[d] = True
        if state.digits_seen > 0:
            mask[tok.SEP] = True
        return mask
    # ordinary text mode: content bytes plus the legal structural moves
    if task == "image":
        mask[tok.EOS if block_done else tok.BOI] = True
        return mask
    mask[: tok.N_BYTES] = True
    mask[tok.EOS] = True
    mask[tok.BOI] = True
    return mask


def generate(
    model,
    prompt: Sequence[Token],
    task: str,
    config: SamplerConfig = SamplerConfig(),
    rng: Optional[np.random.Generator] = None,
    grid_side: Optional[int] = None,
) -> GenerationResult:
    """Decode a middle for a [pre] P [suf] S [mid] prompt.

    model needs a next_logits(tokens) -> (text_logits, image_logits) method.
    Budget exhaustion and grammar dead-ends come back flagged, not raised.
    """
    if task not in TASKS:
        raise ValueError(f"task must be one of {TASKS}, got {task!r}")
    if rng is None:
        rng = np.random.default_rng(0)
    if grid_side is None:
        grid_side = model.config.grid_side
    p = 0.0 if config.greedy else config.top_p
    state = _prompt_prefix_state(prompt, grid_side)
    ctx = list(prompt)
    out: List[Token] = []
    block_done = False
    budget = config.budgets[task]
    while len(out) < budget:
        modality, forced = next_step(state)
        if forced is not None:
            token = text_token(forced)
        else:
            text_logits, image_logits = model.next_logits(ctx)
            if modality == Modality.IMAGE:
                tid = top_p_sample(image_logits, p, config.temperature, rng)
                row, col = state.grid_pos()
                token = Token(Modality.IMAGE, tid, row, col)
            else:
                mask = _text_mask(state, task, block_done, config.enforce_grammar)
                tid = top_p_sample(text_logits, p, config.temperature, rng, mask)
                if tid == tok.EOS:
                    if task == "image":
                        return GenerationResult(out, block_done, "eos")
                    return GenerationResult(out, True, "eos")
                if task == "attr" and tid == tok.QUOTE_ID and state.mode is Mode.TEXT_MODE:
                    return GenerationResult(out, True, "quote")
                token = text_token(tid)
        try:
            state = advance(state, token)
        except GrammarViolation as e:
            # reachable only with enforcement off
            return GenerationResult(out, False, f"grammar_violation: {e}")
        out.append(token)
        ctx.append(token)
        if token.modality == Modality.TEXT and token.id == tok.EOI:
            block_done = True
            if task == "image":
                return GenerationResult(out, True, "block_closed")
    return GenerationResult(out, False, "budget")
