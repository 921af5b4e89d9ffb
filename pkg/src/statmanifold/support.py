"""Sample-space descriptors (the set Omega a family lives on)."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class Interval:
    """Continuous support ``(lo, hi)``; either end may be infinite."""

    lo: float = -math.inf
    hi: float = math.inf

    discrete = False

    def __post_init__(self):
        if not self.lo < self.hi:
            raise ValueError(f"empty interval ({self.lo}, {self.hi})")

    def contains(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return (x >= self.lo) & (x <= self.hi)

    def to_json(self) -> dict:
        return {"type": "interval", "lo": _enc(self.lo), "hi": _enc(self.hi)}


@dataclass(frozen=True)
class IntegerRange:
    """Integers ``lo, lo+1, ..., hi`` (``hi=None`` means countably infinite)."""

    lo: int = 0
    hi: int | None = None

    discrete = True

    def __post_init__(self):
        if self.hi is not None and self.hi < self.lo:
            raise ValueError(f"empty integer range [{self.lo}, {self.hi}]")

    @property
    def finite(self) -> bool:
        return self.hi is not None

    def contains(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        ok = (x == np.round(x)) & (x >= self.lo)
        if self.hi is not None:
            ok &= x <= self.hi
        return ok

    def to_json(self) -> dict:
        return {"type": "integers", "lo": self.lo, "hi": self.hi}


def _enc(v: float):
    if math.isinf(v):
        return "inf" if v > 0 else "-inf"
    return v


def _dec(v) -> float:
    if v is None:
        return math.nan
    return float(v)


def support_from_json(obj: dict):
    kind = obj.get("type")
    if kind == "interval":
        lo = obj.get("lo", "-inf")
        hi = obj.get("hi", "inf")
        return Interval(-math.inf if lo is None else _dec(lo),
                        math.inf if hi is None else _dec(hi))
    if kind == "integers":
        hi = obj.get("hi")
        if isinstance(hi, str) and hi.strip().lower() in ("inf", "+inf", "infinity"):
            hi = None
        return IntegerRange(int(obj.get("lo", 0)), None if hi is None else int(hi))
    raise ValueError(f"unknown support type {kind!r}")
