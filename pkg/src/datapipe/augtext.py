"""Text values that remember the typed components they were built from.

An :class:`AugText` renders like the string an exporter would have produced,
but keeps the primitives (ints, floats, bools) it was concatenated from. A
data pipe can then ship those primitives directly, and an importer can parse
numbers back out without ever producing or scanning characters.
"""

from __future__ import annotations

import re
from typing import Iterable, Iterator

from .wire import INT32_MAX, INT32_MIN, TypeCode

_INT_RE = re.compile(r"[+-]?[0-9]+\Z")

# characters a canonical primitive rendering can contain
_PRIMITIVE_CHARS = frozenset("0123456789+-.eEinfatrulsN")


class AugTextError(ValueError):
    pass


def render(tag: TypeCode, value) -> str:
    """Canonical text of one component.

    Integers in base 10, booleans as ``true``/``false``, floats as the
    shortest decimal string that reads back to the same double.
    """
    if tag == TypeCode.TEXT:
        return value
    if tag == TypeCode.FLOAT64:
        return repr(float(value))
    if tag == TypeCode.BOOL:
        return "true" if value else "false"
    return str(int(value))


def _tag_for(value, kind: TypeCode | None) -> tuple[TypeCode, object]:
    if kind is not None:
        kind = TypeCode(kind)
        if kind == TypeCode.TEXT:
            return kind, value if isinstance(value, str) else str(value)
        if kind == TypeCode.FLOAT64:
            return kind, float(value)
        if kind == TypeCode.BOOL:
            return kind, bool(value)
        return kind, int(value)
    if isinstance(value, bool):
        return TypeCode.BOOL, value
    if isinstance(value, int):
        return TypeCode.INT64, value
    if isinstance(value, float):
        return TypeCode.FLOAT64, value
    if isinstance(value, str):
        return TypeCode.TEXT, value
    # complex objects are frozen to text right away
    return TypeCode.TEXT, str(value)


class AugText:
    """Concatenation of typed components that renders as text on demand."""

    __slots__ = ("_tags", "_vals", "_text")

    def __init__(self, parts: Iterable = ()) -> None:
        self._tags: list[TypeCode] = []
        self._vals: list = []
        self._text: str | None = None
        for p in parts:
            if isinstance(p, AugText):
                self._tags.extend(p._tags)
                self._vals.extend(p._vals)
            else:
                tag, value = _tag_for(p, None)
                if tag == TypeCode.TEXT and value == "":
                    continue
                self._tags.append(tag)
                self._vals.append(value)

    @classmethod
    def from_value(cls, v, kind: TypeCode | None = None) -> "AugText":
        """Wrap one value; *kind* pins the primitive type (e.g. INT32)."""
        if isinstance(v, AugText):
            return v
        a = cls()
        tag, value = _tag_for(v, kind)
        if tag == TypeCode.INT32 and not INT32_MIN <= value <= INT32_MAX:
            raise AugTextError(f"{value} does not fit INT32")
        if not (tag == TypeCode.TEXT and value == ""):
            a._tags.append(tag)
            a._vals.append(value)
        return a

    @classmethod
    def _raw(cls, tags: list, vals: list) -> "AugText":
        a = cls.__new__(cls)
        a._tags = tags
        a._vals = vals
        a._text = None
        return a

    @property
    def parts(self) -> list:
        """The stored components, in order."""
        return list(self._vals)

    @property
    def tagged_parts(self) -> list[tuple[TypeCode, object]]:
        return list(zip(self._tags, self._vals))

    @property
    def is_materialized(self) -> bool:
        return self._text is not None

    def concat(self, other) -> "AugText":
        other = AugText.from_value(other)
        return AugText._raw(self._tags + other._tags, self._vals + other._vals)

    def __add__(self, other) -> "AugText":
        return self.concat(other)

    def __radd__(self, other) -> "AugText":
        return AugText.from_value(other).concat(self)

    def materialize(self) -> str:
        text = self._text
        if text is None:
            # a racing thread computes the same string; last write wins harmlessly
            text = "".join(render(t, v) for t, v in zip(self._tags, self._vals))
            self._text = text
        return text

    __str__ = materialize

    def __repr__(self) -> str:
        return f"AugText({self._vals!r})"

    def __eq__(self, other) -> bool:
        if isinstance(other, AugText):
            return self.materialize() == other.materialize()
        if isinstance(other, str):
            return self.materialize() == other
        return NotImplemented

    def __hash__(self) -> int:
        return hash(self.materialize())

    def __len__(self) -> int:
        return len(self.materialize())

    def __getitem__(self, item) -> str:
        return self.materialize()[item]

    def __iter__(self) -> Iterator[str]:
        return iter(self.materialize())

    def part_count(self) -> int:
        return len(self._vals)

    # -- import-side helpers ----------------------------------------------

    def parse_int(self) -> int:
        if len(self._tags) == 1 and self._tags[0] in (TypeCode.INT32, TypeCode.INT64):
            return self._vals[0]
        text = self.materialize()
        if not _INT_RE.match(text):
            raise AugTextError(f"not an integer: {text!r}")
        return int(text)

    def parse_float(self) -> float:
        if len(self._tags) == 1 and self._tags[0] == TypeCode.FLOAT64:
            return self._vals[0]
        text = self.materialize()
        if "_" in text:
            raise AugTextError(f"not a number: {text!r}")
        try:
            return float(text)
        except ValueError:
            raise AugTextError(f"not a number: {text!r}") from None

    def split(self, delim: str) -> list["AugText"]:
        """Split on *delim*, keeping primitives unrendered when possible."""
        if len(delim) != 1:
            raise AugTextError("delimiter must be a single character")
        if delim in _PRIMITIVE_CHARS and any(t != TypeCode.TEXT for t in self._tags):
            return [AugText.from_value(s) for s in self.materialize().split(delim)]
        segments: list[AugText] = []
        tags: list = []
        vals: list = []
        for tag, value in zip(self._tags, self._vals):
            if tag != TypeCode.TEXT:
                tags.append(tag)
                vals.append(value)
                continue
            pieces = value.split(delim)
            for i, piece in enumerate(pieces):
                if i:
                    segments.append(AugText._raw(tags, vals))
                    tags, vals = [], []
                if piece:
                    tags.append(TypeCode.TEXT)
                    vals.append(piece)
        segments.append(AugText._raw(tags, vals))
        return segments


def from_value(v, kind: TypeCode | None = None) -> AugText:
    return AugText.from_value(v, kind)


def concat(a, b) -> AugText:
    return AugText.from_value(a).concat(b)


def materialize(a: AugText) -> str:
    return a.materialize()


def parse_int(a) -> int:
    return AugText.from_value(a).parse_int()


def parse_float(a) -> float:
    return AugText.from_value(a).parse_float()


def split(a, delim: str) -> list[AugText]:
    return AugText.from_value(a).split(delim)
