"""Reference integrity codes: generic CRC, Hamming parity count, plain parity.

Used as storage and detection baselines for the masked checksum signatures.
CRCs follow the usual parameter model (width, poly, init, refin, refout,
xorout); the bitwise routine is the reference, the table-driven routine is
what the group detector runs.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Iterable, Sequence

import numpy as np

from .codec import DetectionReport, StoreMismatchError, bits_to_kb, storage_bits
from .qnn import QuantizedModel


@dataclass(frozen=True)
class CrcSpec:
    width: int
    poly: int  # generator without the implicit x^width term
    init: int = 0
    refin: bool = False
    refout: bool = False
    xorout: int = 0
    name: str = ""

    def __post_init__(self):
        if self.width < 1:
            raise ValueError("CRC width must be >= 1")
        top = 1 << self.width
        for what, v in (("poly", self.poly), ("init", self.init), ("xorout", self.xorout)):
            if not 0 <= v < top:
                raise ValueError(f"{what} 0x{v:x} does not fit in {self.width} bits")
        if not self.poly & 1:
            raise ValueError("generator must have a nonzero constant term")

    @property
    def generator(self) -> int:
        """Full generator polynomial including the leading x^width coefficient."""
        return (1 << self.width) | self.poly

    @property
    def mask(self) -> int:
        return (1 << self.width) - 1


# Catalogue parameter sets with their published check values over b"123456789".
CRC7_MMC = CrcSpec(7, 0x09, name="CRC-7/MMC")
CRC8_SMBUS = CrcSpec(8, 0x07, name="CRC-8/SMBUS")
CRC10_ATM = CrcSpec(10, 0x233, name="CRC-10/ATM")
CRC13_BBC = CrcSpec(13, 0x1CF5, name="CRC-13/BBC")
CRC16_ARC = CrcSpec(16, 0x8005, refin=True, refout=True, name="CRC-16/ARC")
CRC16_XMODEM = CrcSpec(16, 0x1021, name="CRC-16/XMODEM")
CRC32_ISO_HDLC = CrcSpec(32, 0x04C11DB7, 0xFFFFFFFF, True, True, 0xFFFFFFFF, "CRC-32/ISO-HDLC")

CATALOGUE = {s.name: s for s in (CRC7_MMC, CRC8_SMBUS, CRC10_ATM, CRC13_BBC,
                                 CRC16_ARC, CRC16_XMODEM, CRC32_ISO_HDLC)}
CHECK_VALUES = {"CRC-7/MMC": 0x75, "CRC-8/SMBUS": 0xF4, "CRC-10/ATM": 0x199,
                "CRC-13/BBC": 0x04FA, "CRC-16/ARC": 0xBB3D, "CRC-16/XMODEM": 0x31C3,
                "CRC-32/ISO-HDLC": 0xCBF43926}

# Detection codes for the storage comparison. Primitive generators, so every
# 1- and 2-bit error is caught for blocks up to 2^w - 1 bits (HD=3).
# CRC-7/MMC is already primitive; the 10- and 13-bit catalogue entries are not
# (periods 511 and 178), hence the trinomial/pentanomial choices.
DETECT_CRCS = {
    7: CrcSpec(7, 0x09, name="CRC-7 x^7+x^3+1"),
    10: CrcSpec(10, 0x009, name="CRC-10 x^10+x^3+1"),
    13: CrcSpec(13, 0x001B, name="CRC-13 x^13+x^4+x^3+x+1"),
}


def _reflect(v: int, width: int) -> int:
    return int(format(v, f"0{width}b")[::-1], 2)


def _as_bytes(data) -> bytes:
    if isinstance(data, (bytes, bytearray, memoryview)):
        return bytes(data)
    arr = np.asarray(data)
    if arr.dtype == np.int8:
        return arr.view(np.uint8).tobytes()
    return arr.astype(np.uint8).tobytes()


def crc_bits(bits: Iterable[int], spec: CrcSpec) -> int:
    """Bit-serial CRC over a raw bit sequence, first bit = highest power.

    Reflection flags are byte-level notions and are not applied here;
    ``init`` and ``xorout`` are.
    """
    w, crc = spec.width, spec.init
    seen = False
    for bit in bits:
        seen = True
        top = (crc >> (w - 1)) & 1
        crc = (crc << 1) & spec.mask
        if top ^ (int(bit) & 1):
            crc ^= spec.poly
    if not seen:
        raise ValueError("CRC input must be nonempty")
    return crc ^ spec.xorout


def crc_reference(data, spec: CrcSpec) -> int:
    """Bitwise CRC of a byte string, the slow reference route."""
    data = _as_bytes(data)
    if not data:
        raise ValueError("CRC input must be nonempty")
    bits = []
    for byte in data:
        if spec.refin:
            byte = _reflect(byte, 8)
        bits.extend((byte >> (7 - i)) & 1 for i in range(8))
    crc = crc_bits(bits, CrcSpec(spec.width, spec.poly, spec.init))
    if spec.refout:
        crc = _reflect(crc, spec.width)
    return crc ^ spec.xorout


@lru_cache(maxsize=None)
def _table(width: int, poly: int) -> np.ndarray:
    # register widened to at least 8 bits so sub-byte CRCs use the same loop
    wide = max(width, 8)
    shift = wide - width
    p, top, mask = poly << shift, 1 << (wide - 1), (1 << wide) - 1
    table = np.empty(256, dtype=np.int64)
    for b in range(256):
        r = b << (wide - 8)
        for _ in range(8):
            r = ((r << 1) ^ p) & mask if r & top else (r << 1) & mask
        table[b] = r
    return table


def crc_blocks(blocks, spec: CrcSpec) -> np.ndarray:
    """Table-driven CRC of every row of a (n_blocks, n_bytes) uint8 array."""
    blocks = np.asarray(blocks)
    if blocks.dtype == np.int8:
        blocks = blocks.view(np.uint8)
    blocks = blocks.astype(np.int64)
    if blocks.ndim != 2 or blocks.shape[1] == 0:
        raise ValueError("expected a nonempty (n_blocks, n_bytes) array")
    if spec.refin:
        rev = np.array([_reflect(b, 8) for b in range(256)], dtype=np.int64)
        blocks = rev[blocks]
    wide = max(spec.width, 8)
    shift = wide - spec.width
    mask = (1 << wide) - 1
    table = _table(spec.width, spec.poly)
    reg = np.full(blocks.shape[0], spec.init << shift, dtype=np.int64)
    for col in blocks.T:
        reg = ((reg << 8) & mask) ^ table[((reg >> (wide - 8)) & 0xFF) ^ col]
    crc = reg >> shift
    if spec.refout:
        crc = np.array([_reflect(int(c), spec.width) for c in crc], dtype=np.int64)
    return crc ^ spec.xorout


def crc_compute(data, spec: CrcSpec) -> int:
    """CRC remainder of a byte string (or uint8/int8 array), ``width`` bits."""
    data = _as_bytes(data)
    if not data:
        raise ValueError("CRC input must be nonempty")
    return int(crc_blocks(np.frombuffer(data, dtype=np.uint8)[None, :], spec)[0])


def poly_order(spec: CrcSpec) -> int | None:
    """Smallest e with x^e = 1 mod the generator (None if x is not a unit)."""
    g, r = spec.generator, 1
    for e in range(1, 1 << spec.width):
        r <<= 1
        if r >> spec.width & 1:
            r ^= g
        if r == 1:
            return e
    return None


# -- Hamming and parity ------------------------------------------------------------

def secded_overhead(n: int) -> int:
    """Check bits of a single-error-correcting Hamming code over ``n`` data bits."""
    if n < 1:
        raise ValueError("data length must be >= 1")
    r = 1
    while (1 << r) < n + r + 1:
        r += 1
    return r


def code_width(code: str, group_size: int) -> int:
    """Check bits per group for a named code.

    Names: ``radar2``, ``radar3``, ``crc<w>`` (7, 10, 13 or any catalogue
    width), ``hamming`` and ``parity``.
    """
    code = code.lower()
    if code in ("radar", "radar2"):
        return 2
    if code == "radar3":
        return 3
    if code == "parity":
        return 1
    if code == "hamming":
        return secded_overhead(8 * group_size)
    if code.startswith("crc") and code[3:].isdigit():
        return int(code[3:])
    raise ValueError(f"unknown code {code!r}")


def code_storage_compare(layer_sizes: Sequence[int], group_size: int,
                         codes: Sequence[str] = ("radar2", "radar3", "crc7", "crc13", "hamming"),
                         detection: dict[str, float] | None = None) -> list[dict]:
    """One row per code: check-bit storage over all layers in KB (1 KB = 1024 B)."""
    rows = []
    for code in codes:
        width = code_width(code, group_size)
        bits = storage_bits(layer_sizes, group_size, width)
        rows.append({"code": code, "width": width, "group_size": group_size,
                     "total_bits": bits, "total_kb": bits_to_kb(bits),
                     "detection_ratio": (detection or {}).get(code)})
    return rows


def write_comparison_csv(rows: Sequence[dict], path) -> None:
    cols = ["code", "width", "group_size", "total_kb", "detection_ratio"]
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=cols, extrasaction="ignore")
        w.writeheader()
        for r in rows:
            w.writerow({**r, "total_kb": f"{r['total_kb']:.4f}",
                        "detection_ratio": "" if r.get("detection_ratio") is None
                        else f"{r['detection_ratio']:.4f}"})


# -- CRC group detector --------------------------------------------------------------

def _contiguous_blocks(flat: np.ndarray, group_size: int) -> np.ndarray:
    n_groups = math.ceil(flat.size / group_size)
    padded = np.zeros(n_groups * group_size, dtype=np.int8)
    padded[:flat.size] = flat
    return padded.view(np.uint8).reshape(n_groups, group_size)


def golden_crcs(model: QuantizedModel, spec: CrcSpec, group_size: int) -> list[np.ndarray]:
    """Per layer, the CRC of every contiguous group of ``group_size`` weights."""
    return [crc_blocks(_contiguous_blocks(model.int_weights(i), group_size), spec)
            for i in range(len(model.layers))]


def detect_with_crc(model: QuantizedModel, golden: Sequence[np.ndarray], spec: CrcSpec,
                    group_size: int, flips=None) -> DetectionReport:
    """Flag each contiguous group whose CRC differs from the golden value."""
    if len(golden) != len(model.layers):
        raise StoreMismatchError(f"{len(golden)} golden CRC layers for {len(model.layers)} model layers")
    flagged = []
    for i, ref in enumerate(golden):
        now = crc_blocks(_contiguous_blocks(model.int_weights(i), group_size), spec)
        if now.shape != np.shape(ref):
            raise StoreMismatchError(f"layer {i}: {np.shape(ref)[0]} golden groups, model has {now.size}")
        flagged.append(set(np.flatnonzero(now != ref).tolist()))
    report = DetectionReport(flagged)
    if flips is not None:
        groups = [(f.layer, f.flat_index // group_size) for f in flips]
        report.flip_groups = groups
        report.flip_detected = [g in flagged[l] for l, g in groups]
    return report
