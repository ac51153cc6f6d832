"""Tokenizer for decompiled Java source.

Only what the folding pass needs: literals are decoded, comments and
whitespace are dropped, and every token keeps its character offsets so that
replacements can be spliced back into the untouched original text.
"""
from __future__ import annotations

import re
from dataclasses import dataclass

from .literals import LiteralError, decode_body


class LexError(ValueError):
    pass


@dataclass(frozen=True)
class Token:
    kind: str   # STR TEXTBLOCK CHAR INT LONG FLOAT IDENT OP
    text: str
    start: int
    end: int
    value: object = None


_OPS = sorted("""
>>>= <<= >>= >>> ... -> :: ++ -- && || == != <= >= += -= *= /= %= &= |= ^= << >>
( ) { } [ ] ; , . @ = > < ! ~ ? : + - * / & | ^ %
""".split(), key=len, reverse=True)

_TOKEN_RE = re.compile(r"""
  (?P<ws>\s+)
| (?P<line>//[^\n]*)
| (?P<block>/\*.*?\*/)
| (?P<textblock>\"\"\"[ \t\f]*\r?\n(?:\\.|[^\\])*?\"\"\")
| (?P<str>"(?:\\.|[^"\\\n])*")
| (?P<char>'(?:\\.|[^'\\\n])+')
| (?P<hex>0[xX][0-9a-fA-F_]*\.?[0-9a-fA-F_]*(?:[pP][+-]?\d+)?[lLfFdD]?)
| (?P<bin>0[bB][01_]+[lL]?)
| (?P<num>(?:\d[\d_]*\.?[\d_]*|\.\d[\d_]*)(?:[eE][+-]?\d[\d_]*)?[lLfFdD]?)
| (?P<ident>[^\W\d][\w$]*|\$[\w$]*)
""", re.VERBOSE | re.DOTALL)

_OP_RE = re.compile("|".join(re.escape(op) for op in _OPS))


def _number(text: str, start: int, end: int) -> Token:
    low = text.lower().replace("_", "")
    if low.startswith("0x"):
        if any(c in low for c in ".p") or (low.endswith(("f", "d")) and "p" in low):
            return Token("FLOAT", text, start, end)
        if low.endswith("l"):
            return Token("LONG", text, start, end)
        return Token("INT", text, start, end, int(low[2:], 16))
    if low.startswith("0b"):
        if low.endswith("l"):
            return Token("LONG", text, start, end)
        return Token("INT", text, start, end, int(low[2:], 2))
    if any(c in low for c in ".e") or low.endswith(("f", "d")):
        return Token("FLOAT", text, start, end)
    if low.endswith("l"):
        return Token("LONG", text, start, end)
    if len(low) > 1 and low.startswith("0"):
        if any(c in "89" for c in low):
            raise LexError(f"bad octal literal {text!r} at {start}")
        return Token("INT", text, start, end, int(low, 8))
    return Token("INT", text, start, end, int(low))


def tokenize(source: str) -> list[Token]:
    tokens: list[Token] = []
    pos = 0
    n = len(source)
    while pos < n:
        m = _TOKEN_RE.match(source, pos)
        if m is not None and m.end() > pos:
            kind = m.lastgroup
            text = m.group()
            end = m.end()
            if kind in ("ws", "line", "block"):
                pass
            elif kind == "textblock":
                tokens.append(Token("TEXTBLOCK", text, pos, end))
            elif kind == "str":
                try:
                    tokens.append(Token("STR", text, pos, end, decode_body(text[1:-1])))
                except LiteralError as exc:
                    raise LexError(f"{exc} at offset {pos}") from exc
            elif kind == "char":
                try:
                    units = decode_body(text[1:-1])
                except LiteralError as exc:
                    raise LexError(f"{exc} at offset {pos}") from exc
                if len(units) != 1:
                    raise LexError(f"char literal {text!r} at offset {pos} is not one char")
                tokens.append(Token("CHAR", text, pos, end, ord(units)))
            elif kind in ("hex", "bin", "num"):
                tokens.append(_number(text, pos, end))
            else:
                tokens.append(Token("IDENT", text, pos, end))
            pos = end
            continue
        if source.startswith("/*", pos):
            raise LexError(f"unterminated comment at offset {pos}")
        if source[pos] in "\"'":
            raise LexError(f"unterminated literal at offset {pos}")
        m = _OP_RE.match(source, pos)
        if m is None:
            raise LexError(f"unexpected character {source[pos]!r} at offset {pos}")
        tokens.append(Token("OP", m.group(), pos, m.end()))
        pos = m.end()
    return tokens
