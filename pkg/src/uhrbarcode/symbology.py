"""1-D barcode encoders (Code 39/93/128, UPC-A, EAN-13, ITF) and a 2-D placeholder.

Encoders produce a :class:`ModulePattern`; :func:`render` rasterises it.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .geometry import BBox


class Kind(str, Enum):
    CODE39 = "Code39"
    CODE93 = "Code93"
    CODE128 = "Code128"
    UPCA = "UPCA"
    EAN13 = "EAN13"
    ITF = "ITF"
    MATRIX2D = "Matrix2D"


ONE_D = (Kind.CODE39, Kind.CODE93, Kind.CODE128, Kind.UPCA, Kind.EAN13, Kind.ITF)


class EncodeError(ValueError):
    pass


@dataclass(frozen=True)
class Symbology:
    kind: Kind
    payload: str

    def __post_init__(self):
        object.__setattr__(self, "kind", Kind(self.kind))


@dataclass(frozen=True)
class ModulePattern:
    """Alternating bar/space run widths (in modules), or a square bit grid.

    ``widths[0]`` is always a bar. ``grid`` is set only for Matrix2D.
    """

    widths: tuple[int, ...] = ()
    grid: np.ndarray | None = None

    def __post_init__(self):
        if self.grid is None:
            if not self.widths or len(self.widths) % 2 == 0:
                raise ValueError("a 1-D pattern must begin and end with a bar")
            if min(self.widths) < 1:
                raise ValueError("run widths must be >= 1 module")

    @property
    def is_2d(self) -> bool:
        return self.grid is not None

    @property
    def elements(self) -> list[tuple[str, int]]:
        return [("bar" if i % 2 == 0 else "space", w) for i, w in enumerate(self.widths)]

    @property
    def total_modules(self) -> int:
        return self.grid.shape[1] if self.grid is not None else sum(self.widths)

    @classmethod
    def from_modules(cls, bits: str) -> "ModulePattern":
        if not bits or bits[0] != "1" or bits[-1] != "1":
            raise ValueError("a 1-D pattern must begin and end with a bar")
        runs, prev, n = [], bits[0], 0
        for b in bits:
            if b == prev:
                n += 1
            else:
                runs.append(n)
                prev, n = b, 1
        runs.append(n)
        return cls(tuple(runs))

    def to_modules(self) -> str:
        return "".join(("1" if i % 2 == 0 else "0") * w for i, w in enumerate(self.widths))


# ---------------------------------------------------------------------------
# symbol tables

CODE128_PATTERNS = [
    "11011001100", "11001101100", "11001100110", "10010011000", "10010001100",
    "10001001100", "10011001000", "10011000100", "10001100100", "11001001000",
    "11001000100", "11000100100", "10110011100", "10011011100", "10011001110",
    "10111001100", "10011101100", "10011100110", "11001110010", "11001011100",
    "11001001110", "11011100100", "11001110100", "11101101110", "11101001100",
    "11100101100", "11100100110", "11101100100", "11100110100", "11100110010",
    "11011011000", "11011000110", "11000110110", "10100011000", "10001011000",
    "10001000110", "10110001000", "10001101000", "10001100010", "11010001000",
    "11000101000", "11000100010", "10110111000", "10110001110", "10001101110",
    "10111011000", "10111000110", "10001110110", "11101110110", "11010001110",
    "11000101110", "11011101000", "11011100010", "11011101110", "11101011000",
    "11101000110", "11100010110", "11101101000", "11101100010", "11100011010",
    "11101111010", "11001000010", "11110001010", "10100110000", "10100001100",
    "10010110000", "10010000110", "10000101100", "10000100110", "10110010000",
    "10110000100", "10011010000", "10011000010", "10000110100", "10000110010",
    "11000010010", "11001010000", "11110111010", "11000010100", "10001111010",
    "10100111100", "10010111100", "10010011110", "10111100100", "10011110100",
    "10011110010", "11110100100", "11110010100", "11110010010", "11011011110",
    "11011110110", "11110110110", "10101111000", "10100011110", "10001011110",
    "10111101000", "10111100010", "11110101000", "11110100010", "10111011110",
    "10111101110", "11101011110", "11110101110", "11010000100", "11010010000",
    "11010011100",
]
CODE128_STOP = "1100011101011"
CODE128_START_B = 104

CODE93_CHARS = "0123456789ABCDEFGHIJKLMNOPQRSTUVWXYZ-. $/+%"
CODE93_PATTERNS = (
    "100010100 101001000 101000100 101000010 100101000 100100100 100100010 101010000 "
    "100010010 100001010 110101000 110100100 110100010 110010100 110010010 110001010 "
    "101101000 101100100 101100010 100110100 100011010 101011000 101001100 101000110 "
    "100101100 100010110 110110100 110110010 110101100 110100110 110010110 110011010 "
    "101101100 101100110 100110110 100111010 100101110 111010100 111010010 111001010 "
    "101101110 101110110 110101110 100100110 111011010 111010110 100110010 101011110"
).split()
CODE93_START_STOP = CODE93_PATTERNS[47]

# b/B = narrow/wide bar, s/S = narrow/wide space
CODE39_PATTERNS = {
    "0": "bsbSBsBsb", "1": "BsbSbsbsB", "2": "bsBSbsbsB", "3": "BsBSbsbsb",
    "4": "bsbSBsbsB", "5": "BsbSBsbsb", "6": "bsBSBsbsb", "7": "bsbSbsBsB",
    "8": "BsbSbsBsb", "9": "bsBSbsBsb", "A": "BsbsbSbsB", "B": "bsBsbSbsB",
    "C": "BsBsbSbsb", "D": "bsbsBSbsB", "E": "BsbsBSbsb", "F": "bsBsBSbsb",
    "G": "bsbsbSBsB", "H": "BsbsbSBsb", "I": "bsBsbSBsb", "J": "bsbsBSBsb",
    "K": "BsbsbsbSB", "L": "bsBsbsbSB", "M": "BsBsbsbSb", "N": "bsbsBsbSB",
    "O": "BsbsBsbSb", "P": "bsBsBsbSb", "Q": "bsbsbsBSB", "R": "BsbsbsBSb",
    "S": "bsBsbsBSb", "T": "bsbsBsBSb", "U": "BSbsbsbsB", "V": "bSBsbsbsB",
    "W": "BSBsbsbsb", "X": "bSbsBsbsB", "Y": "BSbsBsbsb", "Z": "bSBsBsbsb",
    "-": "bSbsbsBsB", ".": "BSbsbsBsb", " ": "bSBsbsBsb", "*": "bSbsBsBsb",
    "$": "bSbSbSbsb", "/": "bSbSbsbSb", "+": "bSbsbSbSb", "%": "bsbSbSbSb",
}
WIDE = 3  # modules per wide element in Code 39 and ITF

# 1 = wide
ITF_PATTERNS = {
    "0": "00110", "1": "10001", "2": "01001", "3": "11000", "4": "00101",
    "5": "10100", "6": "01100", "7": "00011", "8": "10010", "9": "01010",
}

EAN_L = {
    "0": "0001101", "1": "0011001", "2": "0010011", "3": "0111101", "4": "0100011",
    "5": "0110001", "6": "0101111", "7": "0111011", "8": "0110111", "9": "0001011",
}
EAN_R = {d: "".join("1" if b == "0" else "0" for b in p) for d, p in EAN_L.items()}
EAN_G = {d: p[::-1] for d, p in EAN_R.items()}
EAN_PARITY = {
    "0": "LLLLLL", "1": "LLGLGG", "2": "LLGGLG", "3": "LLGGGL", "4": "LGLLGG",
    "5": "LGGLLG", "6": "LGGGLL", "7": "LGLGLG", "8": "LGLGGL", "9": "LGGLGL",
}

MATRIX_SIZE = 16


# ---------------------------------------------------------------------------
# check digits

def check_digit(kind, digits: str) -> int:
    """GS1 modulo-10 check digit: weights 3,1,3,... starting from the rightmost digit."""
    kind = Kind(kind)
    if not digits.isdigit() or not digits.isascii():
        bad = next((c for c in digits if not ("0" <= c <= "9")), digits[:1])
        raise EncodeError(f"non-digit character {bad!r} in {kind.value} payload")
    expected = {Kind.EAN13: 12, Kind.UPCA: 11}.get(kind)
    if kind not in (Kind.EAN13, Kind.UPCA, Kind.ITF):
        raise EncodeError(f"{kind.value} has no modulo-10 check digit")
    if expected is not None and len(digits) != expected:
        raise EncodeError(f"{kind.value} check digit needs {expected} digits, got {len(digits)}")
    total = sum(int(d) * (3 if i % 2 == 0 else 1) for i, d in enumerate(reversed(digits)))
    return (10 - total % 10) % 10


def code128_checksum(values: list[int]) -> int:
    return (values[0] + sum(i * v for i, v in enumerate(values[1:], start=1))) % 103


def code93_check(values: list[int], max_weight: int) -> int:
    total = 0
    for i, v in enumerate(reversed(values)):
        total += v * (i % max_weight + 1)
    return total % 47


# ---------------------------------------------------------------------------
# encoders

def _reject_chars(payload: str, allowed: str, kind: Kind):
    for c in payload:
        if c not in allowed:
            raise EncodeError(f"character {c!r} is not encodable in {kind.value}")


def _code39(payload: str) -> str:
    _reject_chars(payload, "".join(k for k in CODE39_PATTERNS if k != "*"), Kind.CODE39)
    symbols = []
    for c in "*" + payload + "*":
        bits = ""
        for e in CODE39_PATTERNS[c]:
            width = WIDE if e.isupper() else 1
            bits += ("1" if e.lower() == "b" else "0") * width
        symbols.append(bits)
    return "0".join(symbols)


def _code93(payload: str) -> str:
    _reject_chars(payload, CODE93_CHARS, Kind.CODE93)
    values = [CODE93_CHARS.index(c) for c in payload]
    values.append(code93_check(values, 20))
    values.append(code93_check(values, 15))
    return CODE93_START_STOP + "".join(CODE93_PATTERNS[v] for v in values) + CODE93_START_STOP + "1"


def _code128(payload: str) -> str:
    _reject_chars(payload, "".join(chr(c) for c in range(32, 127)), Kind.CODE128)
    values = [CODE128_START_B] + [ord(c) - 32 for c in payload]
    values.append(code128_checksum(values))
    return "".join(CODE128_PATTERNS[v] for v in values) + CODE128_STOP


def _complete_gs1(kind: Kind, payload: str, data_len: int) -> str:
    if not payload.isdigit() or not payload.isascii():
        _reject_chars(payload, "0123456789", kind)
    if len(payload) == data_len:
        return payload + str(check_digit(kind, payload))
    if len(payload) == data_len + 1:
        if int(payload[-1]) != check_digit(kind, payload[:-1]):
            raise EncodeError(f"{kind.value} payload {payload!r} has a wrong check digit")
        return payload
    raise EncodeError(f"{kind.value} needs {data_len} or {data_len + 1} digits, got {len(payload)}")


def _ean13_bits(digits13: str) -> str:
    parity = EAN_PARITY[digits13[0]]
    left = "".join((EAN_L if p == "L" else EAN_G)[d] for p, d in zip(parity, digits13[1:7]))
    right = "".join(EAN_R[d] for d in digits13[7:])
    return "101" + left + "01010" + right + "101"


def _itf(payload: str) -> str:
    _reject_chars(payload, "0123456789", Kind.ITF)
    if len(payload) == 0 or len(payload) % 2:
        raise EncodeError(f"ITF needs an even, nonzero number of digits, got {len(payload)}")
    bits = "1010"
    for a, b in zip(payload[::2], payload[1::2]):
        for wb, ws in zip(ITF_PATTERNS[a], ITF_PATTERNS[b]):
            bits += "1" * (WIDE if wb == "1" else 1)
            bits += "0" * (WIDE if ws == "1" else 1)
    return bits + "1" * WIDE + "01"


def matrix_grid(payload: str, size: int = MATRIX_SIZE) -> np.ndarray:
    """Deterministic payload-seeded bit grid with an L-shaped finder and clock track."""
    seed = int.from_bytes(hashlib.sha256(payload.encode("utf-8")).digest()[:8], "little")
    grid = np.random.default_rng(seed).random((size, size)) < 0.5
    grid[:, 0] = True
    grid[-1, :] = True
    grid[0, :] = np.arange(size) % 2 == 0
    grid[:, -1] = np.arange(size) % 2 == 1
    grid[-1, -1] = True
    return grid


def encode(sym: Symbology) -> ModulePattern:
    kind, payload = sym.kind, sym.payload
    if kind is Kind.MATRIX2D:
        if not payload:
            raise EncodeError("Matrix2D payload must be non-empty")
        return ModulePattern(grid=matrix_grid(payload))
    if kind is Kind.CODE39:
        bits = _code39(payload)
    elif kind is Kind.CODE93:
        bits = _code93(payload)
    elif kind is Kind.CODE128:
        bits = _code128(payload)
    elif kind is Kind.EAN13:
        bits = _ean13_bits(_complete_gs1(kind, payload, 12))
    elif kind is Kind.UPCA:
        bits = _ean13_bits("0" + _complete_gs1(kind, payload, 11))
    elif kind is Kind.ITF:
        bits = _itf(payload)
    else:  # pragma: no cover
        raise EncodeError(f"unsupported symbology {kind}")
    return ModulePattern.from_modules(bits)


def random_payload(kind: Kind, rng: np.random.Generator) -> str:
    kind = Kind(kind)
    digits = "0123456789"
    alnum = "0123456789ABCDEFGHIJKLMNOPQRSTUVWXYZ"
    if kind is Kind.EAN13:
        return "".join(rng.choice(list(digits), 12))
    if kind is Kind.UPCA:
        return "".join(rng.choice(list(digits), 11))
    if kind is Kind.ITF:
        return "".join(rng.choice(list(digits), 2 * int(rng.integers(2, 5))))
    if kind is Kind.CODE39:
        return "".join(rng.choice(list(alnum + "-. $/+%"), int(rng.integers(3, 6))))
    if kind is Kind.CODE93:
        return "".join(rng.choice(list(CODE93_CHARS), int(rng.integers(3, 7))))
    if kind is Kind.CODE128:
        chars = [chr(c) for c in range(32, 127)]
        return "".join(rng.choice(chars, int(rng.integers(3, 7))))
    return "".join(rng.choice(list(alnum), 8))


# ---------------------------------------------------------------------------
# rendering

def render(pattern: ModulePattern, module_px: int, quiet_zone_modules: int = 10,
           aspect: float = 0.3, min_height: int = 24, max_height: int = 400) -> tuple[np.ndarray, BBox]:
    """Rasterise to uint8 (0 = bar, 255 = background) and return the tight box.

    1-D bar height is ``aspect * symbol width`` clamped to [min_height, max_height].
    """
    if module_px < 1:
        raise ValueError("module_px must be >= 1")
    q = quiet_zone_modules * module_px
    if pattern.is_2d:
        sym = np.repeat(np.repeat(pattern.grid, module_px, axis=0), module_px, axis=1)
    else:
        row = np.repeat(np.frombuffer(pattern.to_modules().encode(), dtype=np.uint8) == ord("1"), module_px)
        height = int(np.clip(round(aspect * row.size), min_height, max_height))
        sym = np.broadcast_to(row, (height, row.size))
    h, w = sym.shape
    img = np.full((h + 2 * q, w + 2 * q), 255, dtype=np.uint8)
    img[q:q + h, q:q + w][sym] = 0
    return img, BBox(q, q, w, h)
