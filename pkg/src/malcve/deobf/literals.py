"""Java string/char literal decoding and encoding.

Strings are handled as Python ``str`` holding UTF-16 code units (every
character <= U+FFFF), which mirrors Java's ``char`` model; a decoder can then
build lone surrogates that are rejected only when the literal is rendered.
"""
from __future__ import annotations

import unicodedata

_SIMPLE = {"b": "\b", "t": "\t", "n": "\n", "f": "\f", "r": "\r", "s": " ",
           '"': '"', "'": "'", "\\": "\\"}
_ENCODE = {"\b": "\\b", "\t": "\\t", "\n": "\\n", "\f": "\\f", "\r": "\\r",
           '"': '\\"', "\\": "\\\\"}


class LiteralError(ValueError):
    pass


def to_units(text: str) -> str:
    """Split astral characters into surrogate pairs."""
    if all(ord(c) <= 0xFFFF for c in text):
        return text
    raw = text.encode("utf-16-le", "surrogatepass")
    return "".join(chr(int.from_bytes(raw[i:i + 2], "little")) for i in range(0, len(raw), 2))


def from_units(units: str) -> str | None:
    """Join surrogate pairs; ``None`` if a lone surrogate remains."""
    try:
        return units.encode("utf-16-le", "surrogatepass").decode("utf-16-le")
    except UnicodeDecodeError:
        return None


def decode_body(body: str) -> str:
    """Decode the text between the quotes of a string or char literal."""
    out = []
    i = 0
    n = len(body)
    while i < n:
        c = body[i]
        if c in "\r\n":
            raise LiteralError("line terminator inside literal")
        if c != "\\":
            out.append(c)
            i += 1
            continue
        if i + 1 >= n:
            raise LiteralError("dangling backslash")
        e = body[i + 1]
        if e in _SIMPLE:
            out.append(_SIMPLE[e])
            i += 2
        elif e == "u":
            j = i + 1
            while j < n and body[j] == "u":
                j += 1
            hexpart = body[j:j + 4]
            if len(hexpart) != 4 or any(h not in "0123456789abcdefABCDEF" for h in hexpart):
                raise LiteralError(f"bad unicode escape {body[i:j + 4]!r}")
            out.append(chr(int(hexpart, 16)))
            i = j + 4
        elif e in "01234567":
            limit = 3 if e in "0123" else 2
            j = i + 1
            while j < n and j - (i + 1) < limit and body[j] in "01234567":
                j += 1
            out.append(chr(int(body[i + 1:j], 8)))
            i = j
        else:
            raise LiteralError(f"bad escape \\{e}")
    return to_units("".join(out))


def _needs_escape(c: str) -> bool:
    cp = ord(c)
    if cp < 0x20 or 0x7F <= cp <= 0x9F:
        return True
    return unicodedata.category(c) in ("Cf", "Cs", "Co", "Cn", "Zl", "Zp")


def encode_string(units: str) -> str | None:
    """Render code units as a Java string literal, or ``None`` if not valid Unicode.

    Control characters below U+0100 use three-digit octal escapes; ``\\uXXXX``
    there would be translated before lexing and could end the literal.
    """
    text = from_units(units)
    if text is None:
        return None
    parts = ['"']
    for c in text:
        if c in _ENCODE:
            parts.append(_ENCODE[c])
        elif _needs_escape(c):
            cp = ord(c)
            if cp < 0x100:
                parts.append(f"\\{cp:03o}")
            else:
                parts.extend(f"\\u{ord(u):04x}" for u in to_units(c))
        else:
            parts.append(c)
    parts.append('"')
    return "".join(parts)
