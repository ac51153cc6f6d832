"""Constant folding of statically computable string expressions.

The pass scans the token stream for expression starts, parses each candidate
with a small precedence-climbing parser, and evaluates the parts whose value is
known at compile time under Java semantics (32-bit ``int``, 16-bit ``char``,
``String`` conversion in ``+``).  Supported shapes:

* literal concatenation ``"a" + "b"`` (with char/int operands)
* ``new String(new char[]{...})`` and ``String.valueOf(new char[]{...})``
* ``new StringBuilder(...).append(...)....toString()`` (also StringBuffer)
* per-character decoders such as ``(char)(122 ^ 18)`` inside char arrays
* ``String.valueOf(...)`` and ``.concat(...)`` chains

Anything the parser does not understand is opaque and left byte-identical.
Only string-valued subtrees are replaced, so a replacement never changes the
meaning of the surrounding code.
"""
from __future__ import annotations

from dataclasses import dataclass, field

from .lexer import LexError, Token, tokenize
from .literals import encode_string

MAX_PASSES = 8

# value kinds
STR, CHR, INT, BOOL, BUILDER, CHARS = "S", "C", "I", "Z", "B", "A"

_BINARY_BP = {
    "||": 1, "&&": 2, "|": 3, "^": 4, "&": 5, "==": 6, "!=": 6,
    "<": 7, ">": 7, "<=": 7, ">=": 7,
    "<<": 8, ">>": 8, ">>>": 8,
    "+": 9, "-": 9,
    "*": 10, "/": 10, "%": 10,
}
ADDITIVE_BP = 9

_SAFE_PREV_OPS = {
    "(", ",", "{", "}", ";", "?", ":", "->", "[",
    "=", "+=", "-=", "*=", "/=", "%=", "&=", "|=", "^=", "<<=", ">>=", ">>>=",
    "==", "!=", "<", ">", "<=", ">=", "&&", "||", "&", "|", "^", "<<", ">>", ">>>",
}
_SAFE_PREV_WORDS = {"return", "throw", "case", "yield", "assert"}
# tokens that would bind tighter than a completed expression
_TIGHT_FOLLOW = {".", "[", "(", "++", "--", "::"}

_PRIMITIVES = {"char", "int", "byte", "short", "long", "float", "double", "boolean"}
_KEYWORD_ATOMS = {"true", "false", "null", "this", "super"}
_NON_EXPR_WORDS = {
    "abstract", "assert", "break", "case", "catch", "class", "continue", "default", "do",
    "else", "enum", "extends", "final", "finally", "for", "if", "implements", "import",
    "instanceof", "interface", "native", "package", "private", "protected", "public",
    "return", "static", "strictfp", "switch", "synchronized", "throw", "throws",
    "transient", "try", "volatile", "while", "void", "var", "yield",
} | _PRIMITIVES
_STRING_TYPES = {"String", "java.lang.String"}
_BUILDER_TYPES = {"StringBuilder", "java.lang.StringBuilder",
                  "StringBuffer", "java.lang.StringBuffer"}
_VALUE_OF = {"String.valueOf", "java.lang.String.valueOf"}
_STR_FRIENDLY_CASTS = _STRING_TYPES | {"Object", "java.lang.Object",
                                       "CharSequence", "java.lang.CharSequence"}


class _Fail(Exception):
    """Candidate expression is outside the parser's grammar."""


@dataclass(frozen=True)
class Value:
    kind: str
    data: object  # str of UTF-16 units for S/B/A, int for C/I, bool for Z


def _wrap32(v: int) -> int:
    v &= 0xFFFFFFFF
    return v - 0x100000000 if v & 0x80000000 else v


def _as_int(v: Value) -> int | None:
    return v.data if v.kind in (CHR, INT) else None


def _to_string(v: Value) -> str | None:
    if v.kind == STR:
        return v.data
    if v.kind == CHR:
        return chr(v.data)
    if v.kind == INT:
        return str(v.data)
    if v.kind == BOOL:
        return "true" if v.data else "false"
    return None


def _java_div(a: int, b: int) -> int:
    q = abs(a) // abs(b)
    return _wrap32(q if (a < 0) == (b < 0) else -q)


def binary(op: str, a: Value | None, b: Value | None) -> Value | None:
    if a is None or b is None:
        return None
    if op == "+" and (a.kind == STR or b.kind == STR):
        sa, sb = _to_string(a), _to_string(b)
        return None if sa is None or sb is None else Value(STR, sa + sb)
    x, y = _as_int(a), _as_int(b)
    if x is None or y is None:
        return None
    if op == "+":
        r = x + y
    elif op == "-":
        r = x - y
    elif op == "*":
        r = x * y
    elif op == "/":
        if y == 0:
            return None
        return Value(INT, _java_div(x, y))
    elif op == "%":
        if y == 0:
            return None
        return Value(INT, _wrap32(x - y * _java_div(x, y)))
    elif op == "^":
        r = x ^ y
    elif op == "&":
        r = x & y
    elif op == "|":
        r = x | y
    elif op == "<<":
        r = x << (y & 31)
    elif op == ">>":
        r = x >> (y & 31)
    elif op == ">>>":
        r = (x & 0xFFFFFFFF) >> (y & 31)
    else:
        return None
    return Value(INT, _wrap32(r))


def unary(op: str, v: Value | None) -> Value | None:
    x = None if v is None else _as_int(v)
    if x is None:
        return None
    if op == "-":
        return Value(INT, _wrap32(-x))
    if op == "+":
        return Value(INT, x)
    if op == "~":
        return Value(INT, _wrap32(~x))
    return None


def cast(type_name: str, v: Value | None) -> Value | None:
    if v is None:
        return None
    if type_name in _STR_FRIENDLY_CASTS:
        return v if v.kind == STR else None
    x = _as_int(v)
    if x is None:
        return None
    if type_name == "char":
        return Value(CHR, x & 0xFFFF)
    if type_name == "int":
        return Value(INT, x)
    if type_name == "short":
        return Value(INT, ((x & 0xFFFF) ^ 0x8000) - 0x8000)
    if type_name == "byte":
        return Value(INT, ((x & 0xFF) ^ 0x80) - 0x80)
    return None


@dataclass
class Node:
    start: int          # first token index
    end: int            # one past the last token index
    value: Value | None
    literal: bool = False
    operands: list[Node] = field(default_factory=list)  # additive chain members
    ops: list[str] = field(default_factory=list)


class _Parser:
    def __init__(self, toks: list[Token]):
        self.toks = toks

    # token helpers

    def peek(self, i: int) -> Token | None:
        return self.toks[i] if i < len(self.toks) else None

    def is_op(self, i: int, *ops: str) -> bool:
        t = self.peek(i)
        return t is not None and t.kind == "OP" and t.text in ops

    def is_word(self, i: int, *words: str) -> bool:
        t = self.peek(i)
        return t is not None and t.kind == "IDENT" and t.text in words

    def expect(self, i: int, op: str) -> int:
        if not self.is_op(i, op):
            raise _Fail
        return i + 1

    def skip_balanced(self, i: int) -> int:
        """Skip a bracketed group starting at ``toks[i]``; return index past it."""
        pairs = {"(": ")", "[": "]", "{": "}"}
        stack = []
        while i < len(self.toks):
            t = self.toks[i]
            if t.kind == "OP":
                if t.text in pairs:
                    stack.append(pairs[t.text])
                elif stack and t.text == stack[-1]:
                    stack.pop()
                    if not stack:
                        return i + 1
                elif t.text in (")", "]", "}"):
                    raise _Fail
            i += 1
        raise _Fail

    def skip_generics(self, i: int) -> int:
        if not self.is_op(i, "<"):
            return i
        depth = 0
        while i < len(self.toks):
            t = self.toks[i]
            if t.kind == "OP":
                if t.text == "<":
                    depth += 1
                elif t.text in (">", ">>", ">>>"):
                    depth -= len(t.text)
                    if depth <= 0:
                        if depth < 0:
                            raise _Fail
                        return i + 1
                elif t.text not in (",", ".", "?", "[", "]", "&"):
                    raise _Fail
            i += 1
        raise _Fail

    def qualified_name(self, i: int) -> tuple[str, int]:
        t = self.peek(i)
        if t is None or t.kind != "IDENT":
            raise _Fail
        parts = [t.text]
        i += 1
        while self.is_op(i, ".") and self.peek(i + 1) is not None and self.peek(i + 1).kind == "IDENT" \
                and self.peek(i + 1).text not in ("new", "class", "this", "super"):
            parts.append(self.toks[i + 1].text)
            i += 2
        return ".".join(parts), i

    # expressions

    def expression(self, i: int, min_bp: int = 0) -> Node:
        left = self.prefix(i)
        while True:
            t = self.peek(left.end)
            if t is None or t.kind != "OP" or t.text not in _BINARY_BP:
                return left
            bp = _BINARY_BP[t.text]
            if bp < min_bp:
                return left
            right = self.expression(left.end + 1, bp + 1)
            if bp == ADDITIVE_BP:
                if len(left.operands) >= 2:
                    operands, ops = left.operands + [right], left.ops + [t.text]
                else:
                    operands, ops = [left, right], [t.text]
                left = Node(left.start, right.end, binary(t.text, left.value, right.value),
                            operands=operands, ops=ops)
            else:
                left = Node(left.start, right.end, binary(t.text, left.value, right.value))

    def prefix(self, i: int) -> Node:
        t = self.peek(i)
        if t is None:
            raise _Fail
        if t.kind == "OP":
            if t.text in ("-", "+", "~"):
                # 2147483648 is only legal as the operand of unary minus
                nxt = self.peek(i + 1)
                if t.text == "-" and nxt is not None and nxt.kind == "INT" and nxt.value == 2**31 \
                        and nxt.text.isdigit():
                    return Node(i, i + 2, Value(INT, -(2**31)))
                operand = self.prefix(i + 1)
                return Node(i, operand.end, unary(t.text, operand.value))
            if t.text in ("!", "++", "--"):
                operand = self.prefix(i + 1)
                return Node(i, operand.end, None)
            if t.text == "(":
                return self.paren_or_cast(i)
            raise _Fail
        return self.postfix(self.primary(i))

    def paren_or_cast(self, i: int) -> Node:
        t = self.peek(i + 1)
        if t is not None and t.kind == "IDENT" and t.text in _PRIMITIVES:
            j = i + 2
            dims = 0
            while self.is_op(j, "[") and self.is_op(j + 1, "]"):
                j += 2
                dims += 1
            if self.is_op(j, ")"):
                operand = self.prefix(j + 1)
                value = None if dims else cast(t.text, operand.value)
                return Node(i, operand.end, value)
        if t is not None and t.kind == "IDENT" and t.text not in _NON_EXPR_WORDS | _KEYWORD_ATOMS:
            try:
                name, j = self.qualified_name(i + 1)
                j = self.skip_generics(j)
                while self.is_op(j, "[") and self.is_op(j + 1, "]"):
                    j += 2
            except _Fail:
                j = -1
            nxt = self.peek(j + 1) if j >= 0 and self.is_op(j, ")") else None
            if nxt is not None and (nxt.kind != "OP" or nxt.text in ("(", "!", "~")):
                operand = self.prefix(j + 1)
                return Node(i, operand.end, cast(name, operand.value) if self.toks[j - 1].text != "]" else None)
        inner = self.expression(i + 1)
        end = self.expect(inner.end, ")")
        return self.postfix(Node(i, end, inner.value, literal=inner.literal,
                                 operands=[inner]))

    def primary(self, i: int) -> Node:
        t = self.toks[i]
        if t.kind == "STR":
            return Node(i, i + 1, Value(STR, t.value), literal=True)
        if t.kind == "CHAR":
            return Node(i, i + 1, Value(CHR, t.value), literal=True)
        if t.kind == "INT":
            if t.text.isdigit() and t.value > 2**31 - 1:
                raise _Fail
            if t.value > 0xFFFFFFFF:
                raise _Fail
            return Node(i, i + 1, Value(INT, _wrap32(t.value)), literal=True)
        if t.kind in ("LONG", "FLOAT", "TEXTBLOCK"):
            return Node(i, i + 1, None, literal=True)
        if t.kind != "IDENT":
            raise _Fail
        if t.text in ("true", "false"):
            return Node(i, i + 1, Value(BOOL, t.text == "true"), literal=True)
        if t.text in _KEYWORD_ATOMS:
            return Node(i, i + 1, None)
        if t.text == "new":
            return self.creator(i)
        if t.text in _NON_EXPR_WORDS:
            raise _Fail
        name, j = self.qualified_name(i)
        if self.is_op(j, "("):
            args, end = self.arguments(j)
            value = None
            if name in _VALUE_OF and len(args) == 1:
                value = _value_of(args[0].value)
            return Node(i, end, value)
        return Node(i, j, None)

    def arguments(self, i: int) -> tuple[list[Node], int]:
        """Parse ``( a, b, ... )``; unparseable argument lists become opaque."""
        j = self.expect(i, "(")
        args: list[Node] = []
        if self.is_op(j, ")"):
            return args, j + 1
        try:
            while True:
                arg = self.expression(j)
                args.append(arg)
                if self.is_op(arg.end, ","):
                    j = arg.end + 1
                    continue
                return args, self.expect(arg.end, ")")
        except _Fail:
            return [Node(i, i, None)], self.skip_balanced(i)

    def creator(self, i: int) -> Node:
        j = i + 1
        t = self.peek(j)
        if t is None or t.kind != "IDENT":
            raise _Fail
        if t.text in _PRIMITIVES:
            name, j = t.text, j + 1
        else:
            name, j = self.qualified_name(j)
        j = self.skip_generics(j)
        if self.is_op(j, "["):
            if name == "char" and self.is_op(j + 1, "]") and self.is_op(j + 2, "{"):
                return self.char_array(i, j + 2)
            while self.is_op(j, "["):
                j = self.skip_balanced(j)
            if self.is_op(j, "{"):
                j = self.skip_balanced(j)
            return Node(i, j, None)
        args, end = self.arguments(j)
        if self.is_op(end, "{"):
            return Node(i, self.skip_balanced(end), None)
        value = None
        if name in _STRING_TYPES:
            if not args:
                value = Value(STR, "")
            elif len(args) == 1 and args[0].value is not None and args[0].value.kind in (STR, CHARS):
                value = Value(STR, args[0].value.data)
        elif name in _BUILDER_TYPES:
            if not args:
                value = Value(BUILDER, "")
            elif len(args) == 1 and args[0].value is not None:
                arg = args[0].value
                if arg.kind == STR:
                    value = Value(BUILDER, arg.data)
                elif arg.kind in (INT, CHR):
                    # int/char argument is a capacity, not content
                    value = Value(BUILDER, "")
        return Node(i, end, value)

    def char_array(self, i: int, brace: int) -> Node:
        j = brace + 1
        units: list[str] | None = []
        while not self.is_op(j, "}"):
            elem = self.expression(j)
            v = elem.value
            if units is not None:
                if v is not None and v.kind == CHR:
                    units.append(chr(v.data))
                elif v is not None and v.kind == INT and 0 <= v.data <= 0xFFFF:
                    units.append(chr(v.data))
                else:
                    units = None
            j = elem.end
            if self.is_op(j, ","):
                j += 1
            elif not self.is_op(j, "}"):
                raise _Fail
        value = None if units is None else Value(CHARS, "".join(units))
        return Node(i, j + 1, value)

    def postfix(self, node: Node) -> Node:
        while True:
            j = node.end
            if self.is_op(j, ".") and self.peek(j + 1) is not None and self.peek(j + 1).kind == "IDENT":
                name = self.toks[j + 1].text
                if self.is_op(j + 2, "("):
                    args, end = self.arguments(j + 2)
                    node = Node(node.start, end, _method(node.value, name, args))
                else:
                    node = Node(node.start, j + 2, None)
            elif self.is_op(j, ".") and self.is_op(j + 1, "<"):
                k = self.skip_generics(j + 1)
                if self.peek(k) is None or self.peek(k).kind != "IDENT":
                    raise _Fail
                args, end = self.arguments(k + 1)
                node = Node(node.start, end, None)
            elif self.is_op(j, "["):
                node = Node(node.start, self.skip_balanced(j), None)
            elif self.is_op(j, "++", "--"):
                node = Node(node.start, j + 1, None)
            elif self.is_op(j, "::"):
                if self.peek(j + 1) is None or self.peek(j + 1).kind != "IDENT":
                    raise _Fail
                node = Node(node.start, j + 2, None)
            else:
                return node


def _value_of(v: Value | None) -> Value | None:
    if v is None:
        return None
    if v.kind in (STR, CHARS):
        return Value(STR, v.data)
    s = _to_string(v)
    return None if s is None else Value(STR, s)


def _method(target: Value | None, name: str, args: list[Node]) -> Value | None:
    if target is None:
        return None
    values = [a.value for a in args]
    if target.kind == BUILDER:
        if name == "append" and len(values) == 1 and values[0] is not None:
            v = values[0]
            s = v.data if v.kind == CHARS else _to_string(v)
            return None if s is None else Value(BUILDER, target.data + s)
        if name == "toString" and not values:
            return Value(STR, target.data)
        return None
    if target.kind == STR:
        if name == "toString" and not values:
            return target
        if name == "concat" and len(values) == 1 and values[0] is not None and values[0].kind == STR:
            return Value(STR, target.data + values[0].data)
    return None


@dataclass
class Replacement:
    start: int  # token index
    end: int
    units: str


def _is_const(node: Node) -> bool:
    return node.value is not None and node.value.kind in (STR, CHR, INT, BOOL)


def _plan(node: Node) -> list[Replacement]:
    """Pick maximal string-valued subtrees of *node* worth replacing."""
    if node.value is not None and node.value.kind == STR and not node.literal:
        return [Replacement(node.start, node.end, node.value.data)]
    if len(node.operands) < 2:
        if len(node.operands) == 1:  # parenthesized expression
            return _plan(node.operands[0])
        return []
    ops, operands = node.ops, node.operands
    first_str = next((k for k, o in enumerate(operands)
                      if o.value is not None and o.value.kind == STR), None)
    if first_str is None:
        return [r for o in operands for r in _plan(o)]
    if any(op != "+" for op in ops[first_str:]):
        return []
    plans: list[Replacement] = []
    if all(_is_const(o) for o in operands[:first_str + 1]):
        run_start = 0
    else:
        run_start = first_str
        for o in operands[:first_str]:
            plans.extend(_plan(o))
    k = run_start
    while k < len(operands):
        if not _is_const(operands[k]):
            plans.extend(_plan(operands[k]))
            k += 1
            continue
        end = k
        while end + 1 < len(operands) and _is_const(operands[end + 1]):
            end += 1
        if k == 0:
            value: Value | None = operands[0].value
            for op, o in zip(ops[:end], operands[1:end + 1]):
                value = binary(op, value, o.value)
            units = value.data if value is not None and value.kind == STR else None
        else:
            units = "".join(_to_string(o.value) for o in operands[k:end + 1])
        if units is not None and (end > k or not operands[k].literal):
            plans.append(Replacement(operands[k].start, operands[end].end, units))
        k = end + 1
    return plans


def _start_bp(toks: list[Token], i: int) -> int | None:
    """Binding power to parse at token *i* with, or None if not a safe start."""
    if i == 0:
        return 0
    prev = toks[i - 1]
    if prev.kind == "OP" and prev.text in _SAFE_PREV_OPS:
        return 0
    if prev.kind == "IDENT" and prev.text in _SAFE_PREV_WORDS:
        return 0
    if prev.kind == "OP" and prev.text in ("+", ")"):
        return ADDITIVE_BP
    return None


def _leftmost_is_string(node: Node) -> bool:
    while node.operands:
        node = node.operands[0]
    return node.value is not None and node.value.kind == STR


def find_replacements(toks: list[Token]) -> list[Replacement]:
    parser = _Parser(toks)
    taken_until = 0
    found: list[Replacement] = []
    for i in range(len(toks)):
        if i < taken_until:
            continue
        bp = _start_bp(toks, i)
        if bp is None:
            continue
        if bp and toks[i].kind != "STR" and toks[i].text not in ("new", "String", "java", "("):
            continue
        try:
            node = parser.expression(i, bp)
        except (_Fail, RecursionError):
            continue
        follow = parser.peek(node.end)
        if follow is not None and follow.kind == "OP" and follow.text in _TIGHT_FOLLOW:
            continue
        if bp and not _leftmost_is_string(node):
            continue
        for rep in _plan(node):
            if rep.start >= taken_until:
                found.append(rep)
                taken_until = rep.end
    return found


def fold_source(text: str) -> tuple[str, int]:
    """One folding pass; returns the new text and the number of substitutions."""
    toks = tokenize(text)
    pieces = []
    last = 0
    count = 0
    for rep in find_replacements(toks):
        literal = encode_string(rep.units)
        if literal is None:
            continue  # lone surrogate: leave this site alone
        start, end = toks[rep.start].start, toks[rep.end - 1].end
        pieces.append(text[last:start])
        pieces.append(literal)
        last = end
        count += 1
    if not count:
        return text, 0
    pieces.append(text[last:])
    return "".join(pieces), count


def fold_text(text: str) -> tuple[str, int]:
    """Fold to a fixed point so the pass is idempotent."""
    total = 0
    for _ in range(MAX_PASSES):
        text, count = fold_source(text)
        total += count
        if not count:
            break
    return text, total


__all__ = ["LexError", "fold_text", "fold_source", "find_replacements"]
