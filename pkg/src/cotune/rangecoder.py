"""32-bit renormalizing range coder over 16-bit quantized CDFs.

The coder follows the classic carry-propagating low/range construction:
the encoder keeps a 32-bit range and shifts out the top byte of `low`
whenever the range drops below 2^24, patching carries into the pending
byte run. CDFs are per-symbol cumulative counts on a 2^16 total; every
symbol is guaranteed at least one count by the quantizer below, so the
range never collapses.
"""

from __future__ import annotations

import numpy as np

CDF_PRECISION = 16
_TOTAL = 1 << CDF_PRECISION
_TOP = 1 << 24
_MASK32 = (1 << 32) - 1


class RangeCoderError(RuntimeError):
    """Raised when a stream cannot be decoded consistently."""


class RangeEncoder:
    def __init__(self) -> None:
        self.low = 0
        self.range = _MASK32
        self.cache = 0
        self.cache_size = 1  # leading dummy byte, dropped at finish
        self.out = bytearray()

    def _shift_low(self) -> None:
        if self.low < 0xFF000000 or self.low > _MASK32:
            carry = self.low >> 32
            self.out.append((self.cache + carry) & 0xFF)
            fill = (0xFF + carry) & 0xFF
            for _ in range(self.cache_size - 1):
                self.out.append(fill)
            self.cache_size = 0
            self.cache = (self.low >> 24) & 0xFF
        self.cache_size += 1
        self.low = (self.low << 8) & _MASK32

    def encode(self, cum_lo: int, cum_hi: int) -> None:
        r = self.range >> CDF_PRECISION
        self.low += r * cum_lo
        self.range = r * (cum_hi - cum_lo)
        while self.range < _TOP:
            self.range <<= 8
            self._shift_low()

    def finish(self) -> bytes:
        for _ in range(5):
            self._shift_low()
        return bytes(self.out[1:])


class RangeDecoder:
    def __init__(self, data: bytes) -> None:
        self.data = data
        self.pos = 0
        self.range = _MASK32
        self.code = 0
        for _ in range(4):
            self.code = (self.code << 8) | self._byte()
        self._freq_r = 0

    def _byte(self) -> int:
        if self.pos < len(self.data):
            b = self.data[self.pos]
        else:
            b = 0
        self.pos += 1
        return b

    def decode_freq(self) -> int:
        self._freq_r = self.range >> CDF_PRECISION
        f = self.code // self._freq_r
        return min(f, _TOTAL - 1)

    def decode_update(self, cum_lo: int, cum_hi: int) -> None:
        self.code -= self._freq_r * cum_lo
        self.range = self._freq_r * (cum_hi - cum_lo)
        if self.code >= self.range:
            raise RangeCoderError("decoder state out of range (corrupt stream?)")
        while self.range < _TOP:
            self.code = ((self.code << 8) | self._byte()) & _MASK32
            self.range <<= 8


def quantize_pmf(pmf: np.ndarray) -> np.ndarray:
    """Turn float PMFs of shape (..., K) into integer CDFs of shape (..., K+1)
    on a 2^16 grid, with every symbol given at least one count."""
    pmf = np.asarray(pmf, dtype=np.float64)
    k = pmf.shape[-1]
    if k >= _TOTAL:
        raise ValueError(f"alphabet of {k} symbols does not fit {CDF_PRECISION}-bit CDFs")
    cum = np.cumsum(pmf, axis=-1)
    cum /= cum[..., -1:]
    scaled = np.rint(cum * (_TOTAL - k)).astype(np.uint32)
    cdf = np.zeros(pmf.shape[:-1] + (k + 1,), dtype=np.uint32)
    cdf[..., 1:] = scaled + np.arange(1, k + 1, dtype=np.uint32)
    return cdf


def encode_symbols(symbols: np.ndarray, cdfs: np.ndarray,
                   enc: RangeEncoder | None = None) -> bytes | None:
    """Encode int symbols with per-symbol CDF rows (same leading shape).

    With an explicit encoder the symbols are appended to its stream and
    nothing is returned; the caller finishes the stream itself."""
    symbols = np.asarray(symbols, dtype=np.int64).ravel()
    rows = cdfs.reshape(-1, cdfs.shape[-1])
    if rows.shape[0] != symbols.shape[0]:
        raise ValueError("one CDF row is required per symbol")
    own = enc is None
    if own:
        enc = RangeEncoder()
    lows = rows[np.arange(symbols.size), symbols]
    highs = rows[np.arange(symbols.size), symbols + 1]
    for lo, hi in zip(lows.tolist(), highs.tolist()):
        enc.encode(lo, hi)
    return enc.finish() if own else None


def decode_symbols(data: bytes | RangeDecoder, cdfs: np.ndarray) -> np.ndarray:
    """Decode as many symbols as there are CDF rows."""
    rows = cdfs.reshape(-1, cdfs.shape[-1])
    dec = data if isinstance(data, RangeDecoder) else RangeDecoder(data)
    out = np.empty(rows.shape[0], dtype=np.int64)
    for i, row in enumerate(rows):
        f = dec.decode_freq()
        s = int(np.searchsorted(row, f, side="right")) - 1
        dec.decode_update(int(row[s]), int(row[s + 1]))
        out[i] = s
    return out.reshape(cdfs.shape[:-1])
