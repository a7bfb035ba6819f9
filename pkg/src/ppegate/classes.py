"""Object classes shared by every module."""

from __future__ import annotations

import re
from enum import IntEnum
from typing import Union


class PpeClass(IntEnum):
    HARDHAT = 0
    SAFETY_VEST = 1
    SAFETY_GLOVES = 2
    SAFETY_GLASSES = 3
    HEARING_PROTECTION = 4

    @property
    def slug(self) -> str:
        """Name used in fixture files, JSON and config (``safety_vest``)."""
        return self.name.lower()

    @property
    def title(self) -> str:
        """Human-readable name used in report tables."""
        return _TITLES[self]

    @classmethod
    def parse(cls, value: "str | int | PpeClass") -> "PpeClass":
        if isinstance(value, PpeClass):
            return value
        if isinstance(value, int):
            return cls(value)
        key = _normalize(value)
        if key in _BY_KEY:
            return _BY_KEY[key]
        raise ValueError(f"unknown PPE class {value!r}")


PERSON = "person"

Label = Union[PpeClass, str]

_TITLES = {
    PpeClass.HARDHAT: "Hardhat",
    PpeClass.SAFETY_VEST: "Safety vest",
    PpeClass.SAFETY_GLOVES: "Safety gloves",
    PpeClass.SAFETY_GLASSES: "Safety glasses",
    PpeClass.HEARING_PROTECTION: "Hearing protection",
}


def _normalize(name: str) -> str:
    return re.sub(r"[\s_\-]", "", name).lower()


_BY_KEY = {_normalize(c.name): c for c in PpeClass}
_BY_KEY.update({_normalize(t): c for c, t in _TITLES.items()})


def parse_label(value: str) -> Label:
    """Parse a class name that may also be ``person``."""
    if _normalize(value) == PERSON:
        return PERSON
    return PpeClass.parse(value)


def label_name(label: Label) -> str:
    return label.slug if isinstance(label, PpeClass) else PERSON


ALL_CLASSES = frozenset(PpeClass)
