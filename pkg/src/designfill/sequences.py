"""Mixed-modality token streams: document building, the infill transform,
task prompts, and corpus file I/O.

A document stream is [BOS] markup bytes [EOS] with each image href expanded
in place to BOI, width digits, SEP, height digits, SEP, g*g image tokens in
row-major order, EOI. Image tokens are modality-tagged, so their ids may
collide numerically with text ids without ambiguity.
"""

from __future__ import annotations

import enum
import json
import struct
from dataclasses import dataclass, replace as dc_replace
from pathlib import Path
from typing import List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np

from . import tokenizer as tok
from .raster import RasterImage
from .svg_codec import BlockPart, TextPart, serialize_parts
from .templates import DesignTemplate, ImageElement, ImageTokenBlock


class Modality(enum.IntEnum):
    TEXT = 0
    IMAGE = 1


class Token(NamedTuple):
    modality: Modality
    id: int
    row: Optional[int] = None
    col: Optional[int] = None


def text_token(tid: int) -> Token:
    return Token(Modality.TEXT, tid)


def is_special(t: Token, special_id: int) -> bool:
    return t.modality == Modality.TEXT and t.id == special_id


# task span selectors


@dataclass(frozen=True)
class Attribute:
    element: Optional[int]
    name: str


@dataclass(frozen=True)
class ImageHref:
    element: int


@dataclass(frozen=True)
class TextContent:
    element: int


SpanSelector = Union[Attribute, ImageHref, TextContent]


class SpanNotFound(KeyError):
    pass


class MalformedFim(ValueError):
    pass


class CorpusFormatError(ValueError):
    pass


# ---------------------------------------------------------------------------
# document building


def tokenize_template(template: DesignTemplate, quantizer) -> DesignTemplate:
    """Replace raster image payloads with token blocks via the quantizer.
    Elements already holding blocks pass through unchanged."""
    elements = []
    for el in template.elements:
        if isinstance(el, ImageElement) and isinstance(el.payload, RasterImage):
            grid = quantizer.encode(el.payload)
            block = ImageTokenBlock(el.payload.width, el.payload.height, grid)
            el = dc_replace(el, payload=block)
        elements.append(el)
    return dc_replace(template, elements=tuple(elements))


def detokenize_template(template: DesignTemplate, quantizer) -> DesignTemplate:
    """Replace token-block payloads with decoded rasters at their intrinsic
    size; inverse direction of tokenize_template (up to quantization loss)."""
    elements = []
    for el in template.elements:
        if isinstance(el, ImageElement) and isinstance(el.payload, ImageTokenBlock):
            img = quantizer.decode(el.payload.grid, el.payload.width, el.payload.height)
            el = dc_replace(el, payload=img)
        elements.append(el)
    return dc_replace(template, elements=tuple(elements))


def middle_to_literal(tokens: Sequence[Token], errors: str = "strict") -> str:
    """Literal markup text for a token run: byte tokens decode as UTF-8,
    specials and image tokens render in their bracket forms.

    Sampled bytes need not form valid UTF-8; pass errors="backslashreplace"
    for a display form that never raises.
    """
    out = []
    buf = bytearray()

    def flush():
        if buf:
            out.append(buf.decode("utf-8", errors=errors))
            buf.clear()

    for t in tokens:
        if t.modality == Modality.IMAGE:
            flush()
            out.append(f"[img:{t.id}]")
        elif t.id < tok.N_BYTES:
            buf.append(t.id)
        else:
            flush()
            out.append(tok.SPECIAL_NAMES.get(t.id, f"<bad:{t.id}>"))
    flush()
    return "".join(out)


def block_tokens(block: ImageTokenBlock) -> List[Token]:
    out = [text_token(tok.BOI)]
    out += [text_token(b) for b in str(block.width).encode("ascii")]
    out.append(text_token(tok.SEP))
    out += [text_token(b) for b in str(block.height).encode("ascii")]
    out.append(text_token(tok.SEP))
    g = block.grid_side
    for r in range(g):
        for c in range(g):
            out.append(Token(Modality.IMAGE, int(block.grid[r, c]), r, c))
    out.append(text_token(tok.EOI))
    return out


def build_document_stream_with_spans(
    template: DesignTemplate, quantizer=None
) -> Tuple[List[Token], dict]:
    """Token stream plus a map from value-region keys to [start, end) token
    ranges. Keys are ("attr", elem, name) and ("content", elem); the href
    range covers the whole BOI..EOI block."""
    if quantizer is not None:
        template = tokenize_template(template, quantizer)
    parts = serialize_parts(template, href_mode="token_block")
    tokens: List[Token] = [text_token(tok.BOS)]
    spans = {}
    for p in parts:
        start = len(tokens)
        if isinstance(p, TextPart):
            tokens.extend(text_token(b) for b in tok.encode_text(p.text))
            if p.span is not None:
                spans[p.span] = (start, len(tokens))
        else:
            tokens.extend(block_tokens(p.block))
            spans[p.span] = (start, len(tokens))
    tokens.append(text_token(tok.EOS))
    return tokens, spans


def build_document_stream(template: DesignTemplate, quantizer=None) -> List[Token]:
    return build_document_stream_with_spans(template, quantizer)[0]


# ---------------------------------------------------------------------------
# fill-in-the-middle


@dataclass(frozen=True)
class FimStream:
    """Either the PSM form [pre] P [suf] S [mid] M [eos] (split set) or an
    untransformed document (split is None)."""

    tokens: tuple
    split: Optional[tuple] = None


def apply_fim(stream: Sequence[Token], rng: np.random.Generator, p_fim: float = 0.9) -> FimStream:
    """With probability p_fim rewrite the document into prefix-suffix-middle
    order; otherwise pass it through for plain next-token training."""
    toks = list(stream)
    if not toks or not is_special(toks[0], tok.BOS) or not is_special(toks[-1], tok.EOS):
        raise ValueError("apply_fim needs a complete [bos]...[eos] document")
    if rng.random() >= p_fim:
        return FimStream(tuple(toks), None)
    n = len(toks)
    # split points land strictly inside the document, keeping [bos] in P
    # and [eos] in S; i == j gives an empty middle
    i, j = sorted(int(x) for x in rng.integers(1, n, size=2))
    return FimStream(tuple(psm_order(toks, i, j)), (i, j))


def psm_order(doc: Sequence[Token], i: int, j: int) -> List[Token]:
    pre, suf, mid = list(doc[:i]), list(doc[j:]), list(doc[i:j])
    return (
        [text_token(tok.FIM_PREFIX)]
        + pre
        + [text_token(tok.FIM_SUFFIX)]
        + suf
        + [text_token(tok.FIM_MIDDLE)]
        + mid
        + [text_token(tok.EOS)]
    )


def _sentinel_positions(toks: Sequence[Token], special_id: int) -> List[int]:
    return [k for k, t in enumerate(toks) if is_special(t, special_id)]


def reassemble(fim) -> List[Token]:
    """Restore original document order (P ++ M ++ S). Untransformed documents
    pass through; anything else with broken sentinel structure is MalformedFim."""
    toks = list(fim.tokens if isinstance(fim, FimStream) else fim)
    pres = _sentinel_positions(toks, tok.FIM_PREFIX)
    sufs = _sentinel_positions(toks, tok.FIM_SUFFIX)
    mids = _sentinel_positions(toks, tok.FIM_MIDDLE)
    if not (pres or sufs or mids):
        if toks and is_special(toks[0], tok.BOS) and is_special(toks[-1], tok.EOS):
            return toks
        raise MalformedFim("no sentinels and not a [bos]...[eos] document")
    if len(pres) != 1 or len(sufs) != 1 or len(mids) != 1:
        raise MalformedFim(
            f"need exactly one of each sentinel, got pre={len(pres)} suf={len(sufs)} mid={len(mids)}"
        )
    p, s, m = pres[0], sufs[0], mids[0]
    if not (p == 0 and p < s < m):
        raise MalformedFim("sentinels out of order")
    if not (toks and is_special(toks[-1], tok.EOS) and len(toks) - 1 > m):
        raise MalformedFim("missing terminator after middle")
    return toks[p + 1 : s] + toks[m + 1 : -1] + toks[s + 1 : m]


def make_completion_prompt(
    template: DesignTemplate, span: SpanSelector, quantizer=None
) -> Tuple[List[Token], List[Token]]:
    """Prompt [pre] P [suf] S [mid] for one semantic span, plus the gold
    middle tokens (attribute value, whole image block, or text content)."""
    doc, spans = build_document_stream_with_spans(template, quantizer)
    if isinstance(span, Attribute):
        key = ("attr", span.element, span.name)
    elif isinstance(span, ImageHref):
        key = ("attr", span.element, "href")
    elif isinstance(span, TextContent):
        key = ("content", span.element)
    else:
        raise TypeError(f"unsupported span selector {span!r}")
    if key not in spans:
        raise SpanNotFound(f"{span!r} not present in the serialized document")
    i, j = spans[key]
    prompt = (
        [text_token(tok.FIM_PREFIX)]
        + doc[:i]
        + [text_token(tok.FIM_SUFFIX)]
        + doc[j:]
        + [text_token(tok.FIM_MIDDLE)]
    )
    return prompt, doc[i:j]


# ---------------------------------------------------------------------------
# corpus files

CORPUS_MAGIC = b"DFCORP01"


def write_corpus(
    path,
    docs: Sequence[Sequence[Token]],
    grid_side: int,
    codebook_size: int,
    fim_may_split_image_blocks: bool = True,
    extra_header: Optional[dict] = None,
):
    header = {
        "grid_side": int(grid_side),
        "codebook_size": int(codebook_size),
        "text_vocab_size": tok.TEXT_VOCAB_SIZE,
        "vocab_sha256": tok.vocab_sha256(),
        "fim_may_split_image_blocks": bool(fim_may_split_image_blocks),
        "count": len(docs),
    }
    if extra_header:
        header.update(extra_header)
    hb = json.dumps(header, sort_keys=True).encode("utf-8")
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    with open(p, "wb") as f:
        f.write(CORPUS_MAGIC)
        f.write(struct.pack("<I", len(hb)))
        f.write(hb)
        for doc in docs:
            arr = np.empty((len(doc), 4), dtype=np.int32)
            for k, t in enumerate(doc):
                arr[k, 0] = int(t.modality)
                arr[k, 1] = t.id
                arr[k, 2] = -1 if t.row is None else t.row
                arr[k, 3] = -1 if t.col is None else t.col
            f.write(struct.pack("<I", len(doc)))
            f.write(arr.tobytes(order="C"))


def read_corpus(path) -> Tuple[dict, List[List[Token]]]:
    data = Path(path).read_bytes()
    if data[:8] != CORPUS_MAGIC:
        raise CorpusFormatError(f"bad magic {data[:8]!r}")
    (hlen,) = struct.unpack_from("<I", data, 8)
    try:
        header = json.loads(data[12 : 12 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CorpusFormatError(f"unreadable header: {e}") from None
    if header.get("vocab_sha256") != tok.vocab_sha256():
        raise CorpusFormatError("corpus was built with a different text vocabulary")
    off = 12 + hlen
    docs = []
    for _ in range(header["count"]):
        if off + 4 > len(data):
            raise CorpusFormatError("truncated corpus")
        (n,) = struct.unpack_from("<I", data, off)
        off += 4
        end = off + n * 16
        if end > len(data):
            raise CorpusFormatError("truncated corpus record")
        arr = np.frombuffer(data[off:end], dtype="<i4").reshape(n, 4)
        off = end
        doc = [
            Token(
                Modality(int(m)),
                int(i),
                None if r < 0 else int(r),
                None if c < 0 else int(c),
            )
            for m, i, r, c in arr
        ]
        docs.append(doc)
    if off != len(data):
        raise CorpusFormatError("trailing bytes after last record")
    return header, docs


def stream_length_identity(template: DesignTemplate) -> int:
    """Exact expected stream length: 2 framing tokens + text bytes + per
    image 4 specials + digit counts + g*g tokens."""
    parts = serialize_parts(template, href_mode="token_block")
    n = 2
    for p in parts:
        if isinstance(p, TextPart):
            n += len(p.text.encode("utf-8"))
        else:
            b = p.block
            n += 4 + len(str(b.width)) + len(str(b.height)) + b.grid_side**2
    return n
