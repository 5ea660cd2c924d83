"""Reader and writer for the brace-delimited text format.

The same grammar carries material libraries and scenario configs::

    # comment
    material {
      name = water
      density_mean = 1.0
      component { element = H  w_mean = 0.1119  w_std = 0.002 }
    }

A block is ``kind { ... }``. Inside it, ``key = value`` pairs and nested
blocks appear in any order, separated by whitespace, commas or semicolons.
Values are numbers, bare words, double-quoted strings, or ``[a, b, ...]``
lists of those.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from typing import Any

from .errors import ParseError

_TOKEN = re.compile(
    r"""
    (?P<ws>[ \t\r]+)
  | (?P<nl>\n)
  | (?P<comment>\#[^\n]*)
  | (?P<string>"(?:[^"\\\n]|\\.)*")
  | (?P<punct>[{}\[\]=,;])
  | (?P<word>[^\s{}\[\]=,;"\#]+)
    """,
    re.VERBOSE,
)


@dataclass
class Block:
    kind: str
    fields: dict[str, Any] = field(default_factory=dict)
    children: list["Block"] = field(default_factory=list)
    line: int | None = None

    def blocks(self, kind: str) -> list["Block"]:
        return [b for b in self.children if b.kind == kind]

    def require(self, key: str, path=None):
        if key not in self.fields:
            raise ParseError(f"{self.kind} block is missing '{key}'", path, self.line)
        return self.fields[key]


_ESCAPE = re.compile(r"\\(.)", re.DOTALL)
_UNESCAPES = {"n": "\n", "r": "\r"}


def _scalar(text: str, quoted: bool):
    if quoted:
        return _ESCAPE.sub(lambda m: _UNESCAPES.get(m.group(1), m.group(1)), text[1:-1])
    for cast in (int, float):
        try:
            return cast(text)
        except ValueError:
            pass
    return text


def _tokenize(text: str, path):
    line = 1
    pos = 0
    out = []
    while pos < len(text):
        m = _TOKEN.match(text, pos)
        if m is None:
            raise ParseError(f"unexpected character {text[pos]!r}", path, line)
        kind = m.lastgroup
        if kind == "nl":
            line += 1
        elif kind in ("string", "punct", "word"):
            out.append((kind, m.group(), line))
        pos = m.end()
    return out


class _Parser:
    def __init__(self, tokens, path):
        self.tokens = tokens
        self.i = 0
        self.path = path

    def peek(self, offset=0):
        j = self.i + offset
        return self.tokens[j] if j < len(self.tokens) else (None, None, None)

    def next(self):
        tok = self.peek()
        self.i += 1
        return tok

    def skip_separators(self):
        while self.peek()[1] in (",", ";"):
            self.i += 1

    def fail(self, message, line=None):
        if line is None:
            line = self.peek()[2]
            if line is None and self.tokens:
                line = self.tokens[-1][2]
        raise ParseError(message, self.path, line)

    def value(self):
        kind, text, line = self.next()
        if kind == "string":
            return _scalar(text, True)
        if kind == "word":
            return _scalar(text, False)
        if text == "[":
            items = []
            while True:
                self.skip_separators()
                if self.peek()[1] == "]":
                    self.i += 1
                    return items
                if self.peek()[0] is None:
                    self.fail("unterminated list", line)
                items.append(self.value())
        self.fail(f"expected a value, found {text!r}", line)

    def body(self, block: Block | None):
        """Parse entries until a closing brace (or end of input at top level)."""
        entries = [] if block is None else None
        while True:
            self.skip_separators()
            kind, text, line = self.peek()
            if kind is None:
                if block is not None:
                    self.fail(f"unterminated '{block.kind}' block", block.line)
                return entries
            if text == "}":
                if block is None:
                    self.fail("unmatched '}'", line)
                self.i += 1
                return None
            if kind != "word":
                self.fail(f"expected a key or block name, found {text!r}", line)
            nxt = self.peek(1)[1]
            if nxt == "{":
                self.i += 2
                child = Block(text, line=line)
                self.body(child)
                if block is None:
                    entries.append(child)
                else:
                    block.children.append(child)
            elif nxt == "=":
                if block is None:
                    self.fail(f"key '{text}' outside of any block", line)
                self.i += 2
                if text in block.fields:
                    self.fail(f"duplicate key '{text}'", line)
                block.fields[text] = self.value()
            else:
                self.fail(f"expected '=' or '{{' after {text!r}", line)


def parse_text(text: str, path=None) -> list[Block]:
    """Parse structured text into a list of top-level blocks."""
    return _Parser(_tokenize(text, path), path).body(None)


def parse_file(path) -> list[Block]:
    with open(path, encoding="utf-8") as fh:
        return parse_text(fh.read(), path=str(path))


_BARE = re.compile(r"^[A-Za-z_][A-Za-z0-9_.+\-]*$")


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, int):
        return str(value)
    if isinstance(value, float):
        if not math.isfinite(value):
            raise ValueError("non-finite values cannot be serialised")
        return repr(value)
    if isinstance(value, (list, tuple)):
        return "[" + ", ".join(_format_value(v) for v in value) + "]"
    text = str(value)
    if _BARE.match(text) and _scalar(text, False) == text:
        return text
    escaped = text.replace("\\", "\\\\").replace('"', '\\"').replace("\n", "\\n").replace("\r", "\\r")
    return f'"{escaped}"'


def dump_blocks(blocks: list[Block], indent: int = 0) -> str:
    """Serialise blocks; ``parse_text(dump_blocks(b))`` reproduces ``b``."""
    pad = "  " * indent
    lines = []
    for b in blocks:
        lines.append(f"{pad}{b.kind} {{")
        for key, value in b.fields.items():
            lines.append(f"{pad}  {key} = {_format_value(value)}")
        if b.children:
            lines.append(dump_blocks(b.children, indent + 1).rstrip("\n"))
        lines.append(f"{pad}}}")
    return "\n".join(lines) + "\n"
