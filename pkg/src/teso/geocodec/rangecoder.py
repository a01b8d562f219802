"""Multi-symbol range coder with pluggable probability models.

The coder keeps a 32-bit ``range`` and a 33-bit ``low`` with carry
propagation through a cached byte (the scheme used by LZMA). Frequency
totals must not exceed ``2**16`` so that ``range // total`` never drops
below ``2**8``.

Built-in models (uniform, static, adaptive) are coded by compiled kernels;
any other :class:`ProbabilityModel` subclass goes through a generic
per-symbol loop that produces the same bytes for the same probabilities.
"""

from __future__ import annotations

import copy
import math

import numba as nb
import numpy as np

MAX_TOTAL = 1 << 16
TOP = 1 << 24
ADAPT_SHIFT = 5           # exponential update rate 1/32
ADAPT_INC = 1 << 11       # 2**16 / 32
_MASK32 = 0xFFFFFFFF


class StreamError(ValueError):
    """Truncated or inconsistent entropy-coded stream."""


# --------------------------------------------------------------------------- models


class ProbabilityModel:
    """Categorical distribution over ``alphabet`` symbols per integer context.

    Subclasses implement :meth:`freqs` (positive integer frequencies summing
    to at most ``2**16``) and optionally :meth:`update`.
    """

    alphabet: int = 2
    n_contexts: int = 1

    def freqs(self, ctx: int) -> np.ndarray:
        raise NotImplementedError

    def update(self, ctx: int, sym: int) -> None:
        pass

    def distribution(self, ctx: int = 0) -> np.ndarray:
        f = np.asarray(self.freqs(ctx), dtype=np.float64)
        return f / f.sum()

    def clone(self) -> "ProbabilityModel":
        return copy.deepcopy(self)


class UniformModel(ProbabilityModel):
    def __init__(self, alphabet: int, n_contexts: int = 1):
        if not 1 <= alphabet <= MAX_TOTAL:
            raise ValueError(f"alphabet {alphabet} outside [1, 2**16]")
        self.alphabet = int(alphabet)
        self.n_contexts = int(n_contexts)

    def freqs(self, ctx: int = 0) -> np.ndarray:
        return np.ones(self.alphabet, np.int64)


class StaticModel(ProbabilityModel):
    """Fixed frequency table, shape ``(alphabet,)`` or ``(n_contexts, alphabet)``.

    Zero frequencies are allowed for symbols that never occur; coding one
    raises :class:`ValueError`.
    """

    def __init__(self, table):
        t = np.atleast_2d(np.asarray(table))
        if np.issubdtype(t.dtype, np.floating):
            t = probabilities_to_freqs(t)
        t = t.astype(np.int64)
        if np.any(t < 0) or np.any(t.sum(axis=1) == 0) or np.any(t.sum(axis=1) > MAX_TOTAL):
            raise ValueError("static frequencies must be >= 0 with row sums in [1, 2**16]")
        self.table = t
        self.n_contexts, self.alphabet = t.shape
        self.cum = np.zeros((t.shape[0], t.shape[1] + 1), np.int64)
        np.cumsum(t, axis=1, out=self.cum[:, 1:])

    def freqs(self, ctx: int = 0) -> np.ndarray:
        return self.table[ctx]


class AdaptiveModel(ProbabilityModel):
    """Count-based adaptive model, one state per context.

    Each coded symbol decays every count by 1/32 and adds ``2**11`` to the
    coded one; the coding frequency is ``(count >> 2) + 1``, so every symbol
    keeps a nonzero probability and totals stay below ``2**15``.
    """

    def __init__(self, alphabet: int, n_contexts: int = 1):
        if not 2 <= alphabet <= 4096:
            raise ValueError(f"alphabet {alphabet} outside [2, 4096]")
        self.alphabet = int(alphabet)
        self.n_contexts = int(n_contexts)
        self.counts = np.full((self.n_contexts, self.alphabet), MAX_TOTAL // self.alphabet, np.int64)

    def freqs(self, ctx: int = 0) -> np.ndarray:
        return (self.counts[ctx] >> 2) + 1

    def update(self, ctx: int, sym: int) -> None:
        c = self.counts[ctx]
        c -= c >> ADAPT_SHIFT
        c[sym] += ADAPT_INC


def probabilities_to_freqs(p, total: int = MAX_TOTAL) -> np.ndarray:
    """Integer frequencies approximating ``p`` (rows), nonzero where ``p > 0``."""
    p = np.atleast_2d(np.asarray(p, dtype=np.float64))
    if np.any(p < 0):
        raise ValueError("negative probability")
    p = p / p.sum(axis=1, keepdims=True)
    f = np.floor(p * (total - p.shape[1])).astype(np.int64)
    f[(f == 0) & (p > 0)] = 1
    return f


def _builtin_kind(model) -> int:
    t = type(model)
    if t is UniformModel:
        return 0
    if t is StaticModel:
        return 1
    if t is AdaptiveModel:
        return 2
    return -1


# --------------------------------------------------------------------------- kernels
# encoder state: [low, range, cache, cache_size, pos]; decoder: [range, code, pos, error]


@nb.njit(cache=True, inline="always")
def _shift_low(st, buf):
    low = st[0]
    if low < 0xFF000000 or low >= 0x100000000:
        carry = low >> 32
        temp = st[2]
        while True:
            buf[st[4]] = (temp + carry) & 0xFF
            st[4] += 1
            temp = 0xFF
            st[3] -= 1
            if st[3] == 0:
                break
        st[2] = (low >> 24) & 0xFF
    st[3] += 1
    st[0] = (low & 0x00FFFFFF) << 8


@nb.njit(cache=True, inline="always")
def _enc(st, buf, start, freq, total):
    r = st[1] // total
    st[0] += r * start
    if start + freq == total:
        st[1] = st[1] - r * start
    else:
        st[1] = r * freq
    while st[1] < 0x1000000:
        st[1] = st[1] << 8
        _shift_low(st, buf)


@nb.njit(cache=True)
def _enc_one(st, buf, start, freq, total):
    _enc(st, buf, start, freq, total)


@nb.njit(cache=True)
def _flush(st, buf):
    for _ in range(5):
        _shift_low(st, buf)


@nb.njit(cache=True, inline="always")
def _next_byte(st, buf):
    p = st[2]
    if p >= buf.shape[0]:
        st[3] = 1
        return 0
    st[2] = p + 1
    return buf[p]


@nb.njit(cache=True)
def _dec_init(st, buf):
    st[0] = 0xFFFFFFFF
    st[1] = 0
    for _ in range(5):
        st[1] = ((st[1] << 8) | _next_byte(st, buf)) & 0xFFFFFFFFFF
    if st[1] > 0xFFFFFFFF:
        st[3] = 2


@nb.njit(cache=True, inline="always")
def _dec_target(st, total):
    r = st[0] // total
    v = st[1] // r
    if v >= total:
        v = total - 1
    return v


@nb.njit(cache=True, inline="always")
def _dec_consume(st, buf, start, freq, total):
    r = st[0] // total
    st[1] -= r * start
    if start + freq == total:
        st[0] = st[0] - r * start
    else:
        st[0] = r * freq
    if st[1] < 0 or st[1] >= st[0]:
        st[3] = 2
    while st[0] < 0x1000000:
        st[0] = st[0] << 8
        st[1] = ((st[1] << 8) | _next_byte(st, buf)) & 0xFFFFFFFF


@nb.njit(cache=True)
def _dec_target_one(st, total):
    return _dec_target(st, total)


@nb.njit(cache=True)
def _dec_consume_one(st, buf, start, freq, total):
    _dec_consume(st, buf, start, freq, total)


@nb.njit(cache=True, inline="always")
def _adaptive_lookup(c, sym):
    start = 0
    total = 0
    freq = 0
    for k in range(c.shape[0]):
        f = (c[k] >> 2) + 1
        if k < sym:
            start += f
        elif k == sym:
            freq = f
        total += f
    return start, freq, total


@nb.njit(cache=True, inline="always")
def _adaptive_update(c, sym):
    for k in range(c.shape[0]):
        c[k] -= c[k] >> 5
    c[sym] += 2048


@nb.njit(cache=True, inline="always")
def _adaptive_find(c, st):
    total = 0
    for k in range(c.shape[0]):
        total += (c[k] >> 2) + 1
    v = _dec_target(st, total)
    start = 0
    sym = 0
    for k in range(c.shape[0]):
        f = (c[k] >> 2) + 1
        if start + f > v:
            sym = k
            return sym, start, f, total
        start += f
    return c.shape[0] - 1, start, 1, total


@nb.njit(cache=True)
def _enc_uniform(st, buf, syms, K):
    for i in range(syms.shape[0]):
        _enc(st, buf, syms[i], 1, K)


@nb.njit(cache=True)
def _dec_uniform(st, buf, out, K):
    for i in range(out.shape[0]):
        v = _dec_target(st, K)
        _dec_consume(st, buf, v, 1, K)
        out[i] = v
        if st[3] != 0:
            return


@nb.njit(cache=True)
def _enc_static(st, buf, cum, ctx, syms):
    for i in range(syms.shape[0]):
        c = ctx[i]
        s = syms[i]
        start = cum[c, s]
        freq = cum[c, s + 1] - start
        if freq <= 0:
            return i
        _enc(st, buf, start, freq, cum[c, cum.shape[1] - 1])
    return -1


@nb.njit(cache=True)
def _dec_static(st, buf, cum, ctx, out):
    K = cum.shape[1] - 1
    for i in range(out.shape[0]):
        c = ctx[i]
        total = cum[c, K]
        v = _dec_target(st, total)
        lo = 0
        hi = K - 1
        while lo < hi:  # last s with cum[s] <= v
            mid = (lo + hi + 1) >> 1
            if cum[c, mid] <= v:
                lo = mid
            else:
                hi = mid - 1
        s = lo
        _dec_consume(st, buf, cum[c, s], cum[c, s + 1] - cum[c, s], total)
        out[i] = s
        if st[3] != 0:
            return


@nb.njit(cache=True)
def _enc_adaptive(st, buf, counts, ctx, syms):
    for i in range(syms.shape[0]):
        c = counts[ctx[i]]
        start, freq, total = _adaptive_lookup(c, syms[i])
        _enc(st, buf, start, freq, total)
        _adaptive_update(c, syms[i])


@nb.njit(cache=True)
def _dec_adaptive(st, buf, counts, ctx, out):
    for i in range(out.shape[0]):
        c = counts[ctx[i]]
        s, start, freq, total = _adaptive_find(c, st)
        _dec_consume(st, buf, start, freq, total)
        _adaptive_update(c, s)
        out[i] = s
        if st[3] != 0:
            return


@nb.njit(cache=True)
def _enc_grouped_bits(st, buf, counts, base_ctx, bits, group):
    # binary symbols in groups; context = base_ctx[bit] * group + ones coded so far in the group
    for g in range(base_ctx.shape[0] // group):
        ones = 0
        for k in range(group):
            b = bits[g * group + k]
            c = counts[base_ctx[g * group + k] * group + ones]
            start, freq, total = _adaptive_lookup(c, b)
            _enc(st, buf, start, freq, total)
            _adaptive_update(c, b)
            ones += b


@nb.njit(cache=True)
def _dec_grouped_bits(st, buf, counts, base_ctx, out, group):
    for g in range(base_ctx.shape[0] // group):
        ones = 0
        for k in range(group):
            c = counts[base_ctx[g * group + k] * group + ones]
            s, start, freq, total = _adaptive_find(c, st)
            _dec_consume(st, buf, start, freq, total)
            _adaptive_update(c, s)
            out[g * group + k] = s
            ones += s
        if st[3] != 0:
            return


@nb.njit(cache=True)
def _rate_adaptive(counts, ctx, syms):
    bits = 0.0
    for i in range(syms.shape[0]):
        c = counts[ctx[i]]
        start, freq, total = _adaptive_lookup(c, syms[i])
        bits -= math.log2(freq / total)
        _adaptive_update(c, syms[i])
    return bits


@nb.njit(cache=True)
def _rate_grouped_bits(counts, base_ctx, bits, group):
    acc = 0.0
    for g in range(base_ctx.shape[0] // group):
        ones = 0
        for k in range(group):
            b = bits[g * group + k]
            c = counts[base_ctx[g * group + k] * group + ones]
            start, freq, total = _adaptive_lookup(c, b)
            acc -= math.log2(freq / total)
            _adaptive_update(c, b)
            ones += b
    return acc


# --------------------------------------------------------------------------- coder objects


def _group_ctx(base_ctx, n_bits, group):
    base = np.asarray(base_ctx, dtype=np.int64).reshape(-1)
    if base.size * group == n_bits:
        base = np.repeat(base, group)
    if base.size != n_bits or n_bits % group:
        raise ValueError("base contexts must be given per group or per bit")
    return np.ascontiguousarray(base)


def _as_ctx(ctx, n):
    if ctx is None:
        return np.zeros(n, np.int64)
    c = np.asarray(ctx, dtype=np.int64)
    return np.full(n, int(c), np.int64) if c.ndim == 0 else np.ascontiguousarray(c.reshape(-1))


def _check_symbols(model, syms, ctx):
    if syms.size and (syms.min() < 0 or syms.max() >= model.alphabet):
        raise ValueError(f"symbol outside alphabet of size {model.alphabet}")
    if ctx.size and (ctx.min() < 0 or ctx.max() >= model.n_contexts):
        raise ValueError(f"context outside [0, {model.n_contexts})")


class RangeEncoder:
    """Accumulates symbols from any sequence of models into one stream."""

    def __init__(self):
        self._st = np.array([0, _MASK32, 0, 1, 0], np.int64)
        self._buf = np.zeros(1024, np.uint8)
        self.n_symbols = 0
        self._done = False

    def _reserve(self, n_symbols: int):
        need = int(self._st[4]) + 3 * n_symbols + 16
        if need > self._buf.shape[0]:
            nb_ = np.zeros(max(need, 2 * self._buf.shape[0]), np.uint8)
            nb_[: self._st[4]] = self._buf[: self._st[4]]
            self._buf = nb_

    def encode(self, model: ProbabilityModel, symbols, contexts=None) -> None:
        syms = np.ascontiguousarray(np.asarray(symbols, dtype=np.int64).reshape(-1))
        ctx = _as_ctx(contexts, syms.size)
        if ctx.size != syms.size:
            raise ValueError("symbols and contexts differ in length")
        _check_symbols(model, syms, ctx)
        if self._done:
            raise RuntimeError("encoder already finished")
        self._reserve(syms.size)
        kind = _builtin_kind(model)
        if kind == 0:
            _enc_uniform(self._st, self._buf, syms, model.alphabet)
        elif kind == 1:
            bad = _enc_static(self._st, self._buf, model.cum, ctx, syms)
            if bad >= 0:
                raise ValueError(f"symbol {syms[bad]} has zero probability")
        elif kind == 2:
            _enc_adaptive(self._st, self._buf, model.counts, ctx, syms)
        else:
            for s, c in zip(syms.tolist(), ctx.tolist()):
                f = np.asarray(model.freqs(c), dtype=np.int64)
                total = int(f.sum())
                if total > MAX_TOTAL or f[s] <= 0:
                    raise ValueError("model frequencies must be positive with total <= 2**16")
                _enc_one(self._st, self._buf, int(f[:s].sum()), int(f[s]), total)
                model.update(c, s)
        self.n_symbols += syms.size

    def encode_grouped_bits(self, model: AdaptiveModel, bits, base_ctx, group: int = 8) -> None:
        """Binary symbols in groups of ``group``; the context of each bit is
        ``base * group + (ones already coded in the group)`` where ``base``
        is given per group or per bit."""
        bits = np.ascontiguousarray(np.asarray(bits, dtype=np.int64).reshape(-1))
        base = _group_ctx(base_ctx, bits.size, group)
        if bits.size and (bits.min() < 0 or bits.max() > 1):
            raise ValueError("grouped symbols must be bits")
        if type(model) is not AdaptiveModel or model.alphabet != 2 or model.n_contexts < (base.max(initial=-1) + 1) * group:
            raise ValueError("grouped bits need a binary AdaptiveModel with enough contexts")
        self._reserve(bits.size)
        _enc_grouped_bits(self._st, self._buf, model.counts, base, bits, group)
        self.n_symbols += bits.size

    def finish(self) -> bytes:
        if not self._done:
            self._done = True
            if self.n_symbols:
                self._reserve(0)
                _flush(self._st, self._buf)
        return bytes(self._buf[: self._st[4]]) if self.n_symbols else b""


class RangeDecoder:
    def __init__(self, data: bytes):
        self._buf = np.frombuffer(bytes(data), dtype=np.uint8)
        self._st = np.zeros(4, np.int64)
        self._ready = False

    def _init(self):
        if not self._ready:
            _dec_init(self._st, self._buf)
            self._ready = True
            self._check()

    def _check(self):
        if self._st[3] == 1:
            raise StreamError("read past the end of the stream")
        if self._st[3] == 2:
            raise StreamError("inconsistent stream")

    def decode(self, model: ProbabilityModel, count: int, contexts=None) -> np.ndarray:
        out = np.zeros(int(count), np.int64)
        if count == 0:
            return out
        ctx = _as_ctx(contexts, out.size)
        if ctx.size != out.size:
            raise ValueError("contexts must have one entry per symbol")
        _check_symbols(model, np.zeros(0, np.int64), ctx)
        self._init()
        kind = _builtin_kind(model)
        if kind == 0:
            _dec_uniform(self._st, self._buf, out, model.alphabet)
        elif kind == 1:
            _dec_static(self._st, self._buf, model.cum, ctx, out)
        elif kind == 2:
            _dec_adaptive(self._st, self._buf, model.counts, ctx, out)
        else:
            for i, c in enumerate(ctx.tolist()):
                f = np.asarray(model.freqs(c), dtype=np.int64)
                cum = np.concatenate([[0], np.cumsum(f)])
                total = int(cum[-1])
                v = _dec_target_one(self._st, total)
                s = int(np.searchsorted(cum, v, side="right") - 1)
                _dec_consume_one(self._st, self._buf, int(cum[s]), int(f[s]), total)
                self._check()
                model.update(c, s)
                out[i] = s
        self._check()
        return out

    def decode_grouped_bits(self, model: AdaptiveModel, base_ctx, group: int = 8, count: int | None = None) -> np.ndarray:
        """``count`` bits (default: one group per entry of ``base_ctx``)."""
        base = np.asarray(base_ctx, dtype=np.int64).reshape(-1)
        base = _group_ctx(base, base.size * group if count is None else count, group)
        out = np.zeros(base.size, np.int64)
        if out.size == 0:
            return out
        if base.min() < 0 or model.n_contexts < (base.max() + 1) * group:
            raise ValueError("context outside model")
        self._init()
        _dec_grouped_bits(self._st, self._buf, model.counts, base, out, group)
        self._check()
        return out


# --------------------------------------------------------------------------- functional API


def encode_symbols(symbols, model: ProbabilityModel, contexts=None) -> bytes:
    """Encode with ``model`` (updated in place, as the decoder will)."""
    enc = RangeEncoder()
    enc.encode(model, symbols, contexts)
    return enc.finish()


def decode_symbols(data: bytes, count: int, model: ProbabilityModel, contexts=None) -> np.ndarray:
    return RangeDecoder(data).decode(model, count, contexts)


def estimate_rate(symbols, model: ProbabilityModel, contexts=None, update: bool = True) -> float:
    """Cross-entropy in bits of ``symbols`` under ``model``.

    Adaptive updates are applied to a copy in coding order, so the estimate
    matches what :func:`encode_symbols` would see from the same state.
    """
    syms = np.asarray(symbols, dtype=np.int64).reshape(-1)
    ctx = _as_ctx(contexts, syms.size)
    _check_symbols(model, syms, ctx)
    m = model.clone()
    kind = _builtin_kind(m)
    if kind == 2 and update:
        return float(_rate_adaptive(m.counts, ctx, np.ascontiguousarray(syms)))
    if kind in (0, 1):
        if kind == 0:
            return float(syms.size * math.log2(m.alphabet))
        f = m.table[ctx, syms]
        if np.any(f == 0):
            return math.inf
        return float(-np.log2(f / m.table[ctx].sum(axis=1)).sum())
    bits = 0.0
    for s, c in zip(syms.tolist(), ctx.tolist()):
        f = np.asarray(m.freqs(c), dtype=np.float64)
        bits -= math.log2(f[s] / f.sum())
        if update:
            m.update(c, s)
    return bits


def estimate_grouped_bits(model: AdaptiveModel, bits, base_ctx, group: int = 8) -> float:
    m = model.clone()
    bits = np.ascontiguousarray(np.asarray(bits, np.int64).reshape(-1))
    return float(_rate_grouped_bits(m.counts, _group_ctx(base_ctx, bits.size, group), bits, group))
