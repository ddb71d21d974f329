"""Allocation hints: the key/value set that places a window in memory,
on storage, or across both."""

from __future__ import annotations

import enum
import re
from dataclasses import dataclass, replace
from fractions import Fraction
from typing import Iterable, Optional, Union

from .errors import InvalidCombination, MalformedValue, MissingFilename

# Recognised keys. Anything else is ignored.
ALLOC_TYPE = "alloc_type"
FILENAME = "storage_alloc_filename"
OFFSET = "storage_alloc_offset"
FACTOR = "storage_alloc_factor"
ORDER = "storage_alloc_order"
UNLINK = "storage_alloc_unlink"
DISCARD = "storage_alloc_discard"
ACCESS_STYLE = "access_style"
FILE_PERM = "file_perm"
STRIPING_FACTOR = "striping_factor"
STRIPING_UNIT = "striping_unit"

HINT_KEYS = (ALLOC_TYPE, FILENAME, OFFSET, FACTOR, ORDER, UNLINK, DISCARD,
             ACCESS_STYLE, FILE_PERM, STRIPING_FACTOR, STRIPING_UNIT)

DEFAULT_FILE_PERM = 0o600


class AllocType(enum.Enum):
    MEMORY = "memory"
    STORAGE = "storage"


class Order(enum.Enum):
    MEMORY_FIRST = "memory_first"
    STORAGE_FIRST = "storage_first"


class _Auto:
    _instance = None

    def __new__(cls):
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def __repr__(self):
        return "AUTO"


AUTO = _Auto()

# A factor is None (not combined), AUTO, or an exact Fraction in [0, 1].
Factor = Union[None, _Auto, Fraction]

_FACTOR_RE = re.compile(r"^(?:0|1)?(?:\.\d{1,6})?$")
_OCTAL_RE = re.compile(r"^(?:0o?)?[0-7]{1,4}$")
_UINT_RE = re.compile(r"^\d+$")


@dataclass(frozen=True)
class AllocationHints:
    alloc_type: AllocType = AllocType.MEMORY
    filename: Optional[str] = None
    offset: int = 0
    factor: Factor = None
    # None means "not given"; the effective order is then MEMORY_FIRST
    order: Optional[Order] = None
    unlink: bool = False
    discard: bool = False
    access_style: Optional[str] = None
    file_perm: int = DEFAULT_FILE_PERM
    striping_factor: Optional[int] = None
    striping_unit: Optional[int] = None

    @property
    def is_storage(self) -> bool:
        return self.alloc_type is AllocType.STORAGE

    @property
    def effective_order(self) -> Order:
        return self.order or Order.MEMORY_FIRST

    def with_(self, **changes) -> "AllocationHints":
        return replace(self, **changes)


def _parse_bool(key, value):
    if value in ("true", "false"):
        return value == "true"
    raise MalformedValue(f"{key}: expected 'true' or 'false', got {value!r}")


def _parse_positive(key, value):
    if not _UINT_RE.match(value) or int(value) == 0:
        raise MalformedValue(f"{key}: expected a positive integer, got {value!r}")
    return int(value)


def parse_factor(value: str) -> Factor:
    if value == "auto":
        return AUTO
    if not value or value == "." or not _FACTOR_RE.match(value):
        raise MalformedValue(f"{FACTOR}: expected a fraction in [0,1] or 'auto', got {value!r}")
    f = Fraction(value)
    if f > 1:
        raise MalformedValue(f"{FACTOR}: {value!r} is above 1")
    return f


def render_factor(f: Factor) -> Optional[str]:
    if f is None:
        return None
    if f is AUTO:
        return "auto"
    if f.denominator == 1:
        return str(f.numerator)
    micro = f * 10**6
    if micro.denominator != 1:
        raise MalformedValue(f"{FACTOR}: {f} needs more than 6 fractional digits")
    return f"0.{micro.numerator:06d}".rstrip("0")


def parse_hints(pairs: Iterable[tuple[str, str]]) -> AllocationHints:
    """Build hints from (key, value) pairs.

    Keys are case-sensitive. Unknown keys are ignored and a repeated key
    takes its last value. Malformed values raise ``MalformedValue``.
    """
    fields: dict = {}
    for key, value in pairs:
        if key == ALLOC_TYPE:
            try:
                fields["alloc_type"] = AllocType(value)
            except ValueError:
                raise MalformedValue(f"{key}: unknown allocation type {value!r}") from None
        elif key == FILENAME:
            if not value:
                raise MalformedValue(f"{key}: empty path")
            fields["filename"] = value
        elif key == OFFSET:
            if not _UINT_RE.match(value):
                raise MalformedValue(f"{key}: expected a non-negative integer, got {value!r}")
            fields["offset"] = int(value)
        elif key == FACTOR:
            fields["factor"] = parse_factor(value)
        elif key == ORDER:
            try:
                fields["order"] = Order(value)
            except ValueError:
                raise MalformedValue(f"{key}: unknown order {value!r}") from None
        elif key == UNLINK:
            fields["unlink"] = _parse_bool(key, value)
        elif key == DISCARD:
            fields["discard"] = _parse_bool(key, value)
        elif key == ACCESS_STYLE:
            fields["access_style"] = value
        elif key == FILE_PERM:
            if not _OCTAL_RE.match(value):
                raise MalformedValue(f"{key}: expected an octal mode, got {value!r}")
            fields["file_perm"] = int(value.replace("o", ""), 8)
        elif key == STRIPING_FACTOR:
            fields["striping_factor"] = _parse_positive(key, value)
        elif key == STRIPING_UNIT:
            fields["striping_unit"] = _parse_positive(key, value)
    return AllocationHints(**fields)


def render_hints(h: AllocationHints) -> list[tuple[str, str]]:
    """Inverse of parse_hints: only fields that differ from the default."""
    out = []
    if h.alloc_type is not AllocType.MEMORY:
        out.append((ALLOC_TYPE, h.alloc_type.value))
    if h.filename is not None:
        out.append((FILENAME, h.filename))
    if h.offset:
        out.append((OFFSET, str(h.offset)))
    if h.factor is not None:
        out.append((FACTOR, render_factor(h.factor)))
    if h.order is not None:
        out.append((ORDER, h.order.value))
    if h.unlink:
        out.append((UNLINK, "true"))
    if h.discard:
        out.append((DISCARD, "true"))
    if h.access_style is not None:
        out.append((ACCESS_STYLE, h.access_style))
    if h.file_perm != DEFAULT_FILE_PERM:
        out.append((FILE_PERM, f"0{h.file_perm:o}"))
    if h.striping_factor is not None:
        out.append((STRIPING_FACTOR, str(h.striping_factor)))
    if h.striping_unit is not None:
        out.append((STRIPING_UNIT, str(h.striping_unit)))
    return out


@dataclass(frozen=True)
class ValidatedHints:
    hints: AllocationHints
    size: int

    def __getattr__(self, name):
        # delegate field access so callers can treat this like the hints
        return getattr(object.__getattribute__(self, "hints"), name)


def validate_for_allocation(h: AllocationHints, size: int) -> ValidatedHints:
    if size <= 0:
        raise ValueError("allocation size must be positive")
    if h.is_storage and not h.filename:
        raise MissingFilename(f"{ALLOC_TYPE}=storage requires {FILENAME}")
    if not h.is_storage:
        if h.factor is not None:
            raise InvalidCombination(f"{FACTOR} is only valid for storage allocations")
        if h.order is not None:
            raise InvalidCombination(f"{ORDER} is only valid for storage allocations")
    elif h.order is not None and h.factor is None:
        raise InvalidCombination(f"{ORDER} given without {FACTOR}")
    return ValidatedHints(h, size)


def hint_attributes(h: AllocationHints) -> dict[str, str]:
    """Attribute map cached on a window (string keys as in the hint set)."""
    attrs = {ALLOC_TYPE: h.alloc_type.value}
    for key, value in render_hints(h):
        attrs.setdefault(key, value)
    return attrs
