"""Byte-level text tokenizer.

Text is UTF-8 bytes mapped 1:1 to ids 0-255; ids 256-263 are reserved
specials that content can never produce. Image tokens live in a separate
modality-tagged vocabulary (see sequences), so no id offset is applied to
them here.
"""

from __future__ import annotations

from typing import Iterable, List

from .utils import canonical_json, sha256_text

N_BYTES = 256

BOS = 256
EOS = 257
BOI = 258
EOI = 259
SEP = 260
FIM_PREFIX = 261
FIM_SUFFIX = 262
FIM_MIDDLE = 263

TEXT_VOCAB_SIZE = 264

SPECIAL_NAMES = {
    BOS: "[bos]",
    EOS: "[eos]",
    BOI: "[boi]",
    EOI: "[eoi]",
    SEP: "[sep]",
    FIM_PREFIX: "[pre]",
    FIM_SUFFIX: "[suf]",
    FIM_MIDDLE: "[mid]",
}

DIGIT_IDS = frozenset(range(ord("0"), ord("9") + 1))
QUOTE_ID = ord('"')


class SpecialInContent(ValueError):
    """A reserved special id showed up where only byte tokens belong."""


class InvalidUtf8(ValueError):
    """Byte tokens do not form valid UTF-8; hard error, no replacement chars."""


def encode_text(s: str) -> List[int]:
    return list(s.encode("utf-8"))


def decode_text(tokens: Iterable[int]) -> str:
    bs = bytearray()
    for t in tokens:
        t = int(t)
        if 0 <= t < N_BYTES:
            bs.append(t)
        elif t in SPECIAL_NAMES:
            raise SpecialInContent(f"special token {SPECIAL_NAMES[t]} (id {t}) in content")
        else:
            raise ValueError(f"token id {t} outside the text vocabulary")
    try:
        return bs.decode("utf-8")
    except UnicodeDecodeError as e:
        raise InvalidUtf8(str(e)) from None


def token_repr(t: int) -> str:
    """Debug form: printable byte, hex escape, or special name."""
    t = int(t)
    if t in SPECIAL_NAMES:
        return SPECIAL_NAMES[t]
    if 0 <= t < N_BYTES:
        ch = chr(t)
        return ch if ch.isprintable() else f"\\x{t:02x}"
    return f"<bad:{t}>"


def vocab_manifest() -> dict:
    """Pinned id assignments; hashed into checkpoints and corpus headers."""
    return {
        "kind": "byte_text_vocab",
        "n_bytes": N_BYTES,
        "specials": {name: tid for tid, name in SPECIAL_NAMES.items()},
        "text_vocab_size": TEXT_VOCAB_SIZE,
    }


def vocab_sha256() -> str:
    return sha256_text(canonical_json(vocab_manifest()))
