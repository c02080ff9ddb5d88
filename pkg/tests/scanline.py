"""Scanline barcode decoder used as a test oracle.

Works from pixels only: reads the centre row, measures run lengths, and
inverts the published symbol tables.
"""

import numpy as np

from uhrbarcode import symbology as S


class DecodeError(ValueError):
    pass


def runs_from_image(img):
    row = np.asarray(img)[img.shape[0] // 2] < 128
    idx = np.flatnonzero(row)
    if idx.size == 0:
        raise DecodeError("no bars on the centre row")
    row = row[idx[0]:idx[-1] + 1]
    edges = np.flatnonzero(np.diff(row.astype(np.int8))) + 1
    bounds = np.r_[0, edges, row.size]
    return np.diff(bounds)


def _modules(runs):
    unit = runs.min()
    mods = np.rint(runs / unit).astype(int)
    if np.any(np.abs(runs - mods * unit) > 0.25 * unit):
        raise DecodeError("run lengths are not integer multiples of a module")
    return "".join(("1" if i % 2 == 0 else "0") * m for i, m in enumerate(mods))


def _narrow_wide(runs):
    unit = runs.min()
    return ["W" if r >= 2 * unit else "N" for r in runs]


def decode_code128(bits):
    inv = {p: v for v, p in enumerate(S.CODE128_PATTERNS)}
    if not bits.endswith(S.CODE128_STOP):
        raise DecodeError("missing Code 128 stop")
    body = bits[:-len(S.CODE128_STOP)]
    vals = [inv[body[i:i + 11]] for i in range(0, len(body), 11)]
    if vals[0] != 104:
        raise DecodeError("not code set B")
    if (vals[0] + sum(i * v for i, v in enumerate(vals[1:-1], 1))) % 103 != vals[-1]:
        raise DecodeError("Code 128 checksum mismatch")
    return "".join(chr(v + 32) for v in vals[1:-1])


def decode_code93(bits):
    inv = {p: v for v, p in enumerate(S.CODE93_PATTERNS)}
    if not (bits.startswith(S.CODE93_START_STOP) and bits.endswith(S.CODE93_START_STOP + "1")):
        raise DecodeError("missing Code 93 start/stop")
    body = bits[9:-10]
    vals = [inv[body[i:i + 9]] for i in range(0, len(body), 9)]
    data, c, k = vals[:-2], vals[-2], vals[-1]
    wc = sum(v * ((len(data) - 1 - i) % 20 + 1) for i, v in enumerate(data)) % 47
    wk = sum(v * ((len(data) - i) % 15 + 1) for i, v in enumerate(data + [c])) % 47
    if (wc, wk) != (c, k):
        raise DecodeError("Code 93 check characters mismatch")
    return "".join(S.CODE93_CHARS[v] for v in data)


def decode_code39(runs):
    nw = _narrow_wide(runs)
    inv = {}
    for ch, pat in S.CODE39_PATTERNS.items():
        inv["".join("W" if e.isupper() else "N" for e in pat)] = ch
    chars = []
    for i in range(0, len(nw), 10):
        chars.append(inv["".join(nw[i:i + 9])])
    if chars[0] != "*" or chars[-1] != "*":
        raise DecodeError("missing Code 39 start/stop")
    return "".join(chars[1:-1])


def decode_ean(bits):
    if len(bits) != 95 or bits[:3] != "101" or bits[45:50] != "01010" or bits[-3:] != "101":
        raise DecodeError("EAN guard pattern not found")
    inv_l = {p: d for d, p in S.EAN_L.items()}
    inv_g = {p: d for d, p in S.EAN_G.items()}
    inv_r = {p: d for d, p in S.EAN_R.items()}
    left, parity = "", ""
    for i in range(6):
        chunk = bits[3 + 7 * i:10 + 7 * i]
        if chunk in inv_l:
            left += inv_l[chunk]
            parity += "L"
        else:
            left += inv_g[chunk]
            parity += "G"
    first = {p: d for d, p in S.EAN_PARITY.items()}[parity]
    right = "".join(inv_r[bits[50 + 7 * i:57 + 7 * i]] for i in range(6))
    digits = first + left + right
    total = sum(int(d) * (3 if i % 2 else 1) for i, d in enumerate(digits[:12]))
    if (10 - total % 10) % 10 != int(digits[12]):
        raise DecodeError("EAN check digit mismatch")
    return digits


def decode_itf(runs):
    nw = _narrow_wide(runs)
    if nw[:4] != ["N"] * 4 or nw[-3:] != ["W", "N", "N"]:
        raise DecodeError("ITF start/stop not found")
    body = nw[4:-3]
    inv = {"".join("W" if b == "1" else "N" for b in p): d for d, p in S.ITF_PATTERNS.items()}
    out = ""
    for i in range(0, len(body), 10):
        grp = body[i:i + 10]
        out += inv["".join(grp[0::2])] + inv["".join(grp[1::2])]
    return out


def scan_decode(img, kind):
    kind = S.Kind(kind)
    runs = runs_from_image(img)
    if kind is S.Kind.CODE39:
        return decode_code39(runs)
    if kind is S.Kind.ITF:
        return decode_itf(runs)
    bits = _modules(runs)
    if kind is S.Kind.CODE128:
        return decode_code128(bits)
    if kind is S.Kind.CODE93:
        return decode_code93(bits)
    if kind is S.Kind.EAN13:
        return decode_ean(bits)
    if kind is S.Kind.UPCA:
        digits = decode_ean(bits)
        if digits[0] != "0":
            raise DecodeError("UPC-A must map to an EAN-13 with leading 0")
        return digits[1:]
    raise DecodeError(f"no scanline decoder for {kind}")
