"""Digit interleaving: an exact bijection between grid vectors and one number.

Each coordinate is shifted by ``offset`` and written with ``int_digits``
integer and ``frac_digits`` fractional decimal digits.  The digits of all
coordinates are then dealt out round-robin, most significant first, so the
single decimal string carries every coordinate without loss.  Strings are
used instead of floats to keep the map exact.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from decimal import Decimal

import numpy as np

from .errors import MalformedString, OutOfRange


def _dec(x) -> Decimal:
    if isinstance(x, Decimal):
        return x
    # repr gives the shortest string that round-trips the float.
    return Decimal(repr(float(x)))


@dataclass(frozen=True)
class FixedPointCodec:
    int_digits: int
    frac_digits: int
    offset: float = 0.0

    def __post_init__(self):
        if self.int_digits < 1 or self.frac_digits < 0:
            raise ValueError("need int_digits >= 1 and frac_digits >= 0")
        if self.offset < 0:
            raise ValueError("offset must be non-negative")
        if not self.on_grid(_dec(self.offset)):
            raise ValueError("offset must itself lie on the decimal grid")

    @property
    def quantum(self) -> Decimal:
        return Decimal(1).scaleb(-self.frac_digits)

    def on_grid(self, d: Decimal) -> bool:
        return d == d.quantize(self.quantum)

    def digits(self, x) -> str:
        """The ``int_digits + frac_digits`` digit string of one coordinate."""
        x = _dec(x)
        d = x + _dec(self.offset)
        if not d.is_finite():
            raise OutOfRange(f"coordinate {x} is not finite")
        if not self.on_grid(d):
            raise OutOfRange(f"coordinate {x} is not on the {self.frac_digits}-decimal grid")
        if d < 0 or d >= Decimal(10) ** self.int_digits:
            raise OutOfRange(f"coordinate {x} + offset lies outside [0, 10^{self.int_digits})")
        scaled = int(d.scaleb(self.frac_digits))
        return str(scaled).zfill(self.int_digits + self.frac_digits)

    def quantize(self, x) -> np.ndarray:
        """Round coordinates to the nearest grid value (half-even)."""
        q = self.quantum
        return np.array([float(_dec(c).quantize(q)) for c in np.ravel(x)]).reshape(np.shape(x))


def interleave_encode(x, codec: FixedPointCodec) -> str:
    """Interleave the digits of ``x`` into one decimal string.

    >>> interleave_encode([12.34, 56.78], FixedPointCodec(2, 2))
    '1526.3748'
    """
    coords = np.ravel(np.asarray(x, dtype=float))
    if coords.size == 0:
        raise ValueError("nothing to encode")
    per = [codec.digits(c) for c in coords]
    p = codec.int_digits
    head = "".join(s[j] for j in range(p) for s in per)
    tail = "".join(s[j] for j in range(p, p + codec.frac_digits) for s in per)
    return f"{head}.{tail}" if codec.frac_digits else head


def _split(s: str, k: int, codec: FixedPointCodec) -> list[str]:
    p, q = codec.int_digits, codec.frac_digits
    pattern = rf"\d{{{p * k}}}\.\d{{{q * k}}}" if q else rf"\d{{{p * k}}}"
    if not isinstance(s, str) or not re.fullmatch(pattern, s):
        raise MalformedString(f"expected {p * k}.{q * k} digits for k={k}, got {s!r}")
    flat = s.replace(".", "")
    return ["".join(flat[j * k + i] for j in range(p + q)) for i in range(k)]


def interleave_decode_decimal(s: str, k: int, codec: FixedPointCodec) -> list[Decimal]:
    """Exact inverse of :func:`interleave_encode`, as Decimals."""
    if k < 1:
        raise ValueError("k must be >= 1")
    offset = _dec(codec.offset)
    return [Decimal(int(d)).scaleb(-codec.frac_digits) - offset for d in _split(s, k, codec)]


def interleave_decode(s: str, k: int, codec: FixedPointCodec) -> np.ndarray:
    return np.array([float(d) for d in interleave_decode_decimal(s, k, codec)])


def mu_similarity(v, t, codec: FixedPointCodec) -> str:
    """Interleaved code of the concatenated pair ``(v, t)``."""
    return interleave_encode(np.concatenate([np.ravel(v), np.ravel(t)]), codec)


def mu_split(mu: str, dim: int, codec: FixedPointCodec):
    """Recover ``(v, t)``, each of length ``dim``, from a similarity code."""
    both = interleave_decode(mu, 2 * dim, codec)
    return both[:dim], both[dim:]
