"""Rate-1/3 parallel concatenated turbo code with circular-buffer rate matching.

Bit convention for every soft value in this module: an LLR is
``log P(b=0) / P(b=1)``, so a positive value favours bit 0.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from numba import njit

MIN_RATE = 1 / 13
CRC_BITS = 24
_CRC24A_POLY = 0x864CFB
_NEG = -1e30

# Quadratic permutation polynomial coefficients (f1, f2) for a few standard
# block sizes. Any other K falls back to a seeded random permutation.
QPP_COEFFS = {
    40: (3, 10),
    48: (7, 12),
    56: (19, 42),
    64: (7, 16),
    72: (7, 18),
    80: (11, 20),
    88: (5, 22),
    96: (11, 24),
    104: (7, 26),
    112: (41, 84),
    120: (103, 90),
    128: (15, 32),
    256: (15, 32),
    512: (31, 64),
    1024: (31, 64),
    2048: (31, 64),
    6144: (263, 480),
}

# Column order of the 32-column sub-block interleaver (5-bit bit reversal).
_COLUMN_ORDER = np.array([int(f"{c:05b}"[::-1], 2) for c in range(32)])


@dataclass(frozen=True)
class TurboConfig:
    block_length_k: int = 1024
    n_iterations: int = 8
    interleaver_seed: int = 0
    constituent_polynomials: tuple[int, int] = (0o13, 0o15)
    extrinsic_scale: float = 0.75

    def __post_init__(self):
        if self.block_length_k < 40:
            raise ValueError("block_length_k must be at least 40")
        if self.n_iterations < 1:
            raise ValueError("n_iterations must be at least 1")

    @property
    def memory(self) -> int:
        return self.constituent_polynomials[0].bit_length() - 1

    @property
    def tail_length(self) -> int:
        """Termination bits of both constituents (systematic + parity each)."""
        return 4 * self.memory

    @property
    def buffer_length(self) -> int:
        return 3 * self.block_length_k + self.tail_length


@dataclass
class CodedBlock:
    systematic: np.ndarray
    parity1: np.ndarray
    parity2: np.ndarray
    tail: np.ndarray = field(repr=False)
    buffer: np.ndarray = field(repr=False)

    @property
    def mother_codeword(self) -> np.ndarray:
        """The 3K mother-code bits: systematic then interlaced parity."""
        k = len(self.systematic)
        return self.buffer[:3 * k]


# ---------------------------------------------------------------------------
# trellis and interleaver construction


@lru_cache(maxsize=None)
def trellis(polys: tuple[int, int]):
    """Next-state, parity and termination-input tables of an RSC constituent.

    ``polys`` is (feedback, feedforward) in octal notation, most significant
    bit being the D^0 coefficient.
    """
    fb, ff = polys
    m = fb.bit_length() - 1
    if ff.bit_length() - 1 > m:
        raise ValueError("feedforward polynomial longer than the feedback one")
    fbc = [(fb >> (m - i)) & 1 for i in range(m + 1)]
    ffc = [(ff >> (m - i)) & 1 for i in range(m + 1)]
    n_states = 1 << m
    nxt = np.zeros((n_states, 2), dtype=np.int64)
    par = np.zeros((n_states, 2), dtype=np.int64)
    tail_u = np.zeros(n_states, dtype=np.int64)
    for s in range(n_states):
        reg = [(s >> (m - 1 - i)) & 1 for i in range(m)]  # reg[0] is the newest
        fsum = 0
        for i in range(1, m + 1):
            fsum ^= fbc[i] & reg[i - 1]
        tail_u[s] = fsum
        for u in (0, 1):
            a = u ^ fsum
            p = ffc[0] & a
            for i in range(1, m + 1):
                p ^= ffc[i] & reg[i - 1]
            new = [a] + reg[:-1]
            ns = 0
            for b in new:
                ns = (ns << 1) | b
            nxt[s, u] = ns
            par[s, u] = p
    return nxt, par, tail_u


def qpp_permutation(k: int, f1: int, f2: int) -> np.ndarray:
    i = np.arange(k, dtype=np.int64)
    return (f1 * i + f2 * i * i) % k


@lru_cache(maxsize=None)
def interleaver(k: int, seed: int = 0) -> np.ndarray:
    """Permutation ``pi`` such that the second encoder sees ``info[pi]``."""
    if k in QPP_COEFFS:
        perm = qpp_permutation(k, *QPP_COEFFS[k])
    else:
        perm = np.random.default_rng(seed).permutation(k).astype(np.int64)
    perm.setflags(write=False)
    return perm


@lru_cache(maxsize=None)
def _parity_order(k: int) -> np.ndarray:
    # read a row-major R x 32 matrix column by column in bit-reversed column
    # order, so any prefix of the parity region is spread over the block
    out = []
    for c in _COLUMN_ORDER:
        out.extend(range(c, k, 32))
    return np.array(out, dtype=np.int64)


@lru_cache(maxsize=None)
def _buffer_layout(k: int, m: int):
    """Positions of sys / parity1 / parity2 / tail inside the circular buffer."""
    order = _parity_order(k)
    sys_pos = np.arange(k, dtype=np.int64)
    p1_pos = np.empty(k, dtype=np.int64)
    p2_pos = np.empty(k, dtype=np.int64)
    p1_pos[order] = k + 2 * np.arange(k)
    p2_pos[order] = k + 2 * np.arange(k) + 1
    tail_pos = np.arange(3 * k, 3 * k + 4 * m, dtype=np.int64)
    return sys_pos, p1_pos, p2_pos, tail_pos


def rate_matched_length(k: int, target_rate: float) -> int:
    # round first so 1/3 -> exactly 3K despite float representation
    return math.ceil(round(k / target_rate, 9))


def _check_rate(target_rate: float) -> None:
    if not (MIN_RATE - 1e-12 <= target_rate <= 1 + 1e-12):
        raise ValueError(f"target rate {target_rate} outside [1/13, 1]")


@lru_cache(maxsize=None)
def rate_match_indices(k: int, m: int, target_rate: float) -> np.ndarray:
    """Buffer positions of the transmitted bits, in transmission order."""
    _check_rate(target_rate)
    e = rate_matched_length(k, target_rate)
    idx = np.arange(e, dtype=np.int64) % (3 * k + 4 * m)
    idx.setflags(write=False)
    return idx


# ---------------------------------------------------------------------------
# checksum


@njit(cache=True)
def _crc24_bits(bits):
    reg = 0xFFFFFF
    for b in bits:
        top = ((reg >> 23) & 1) ^ b
        reg = (reg << 1) & 0xFFFFFF
        if top:
            reg ^= _CRC24A_POLY
    out = np.empty(24, dtype=np.int8)
    for i in range(24):
        out[i] = (reg >> (23 - i)) & 1
    return out


def crc24(bits: np.ndarray) -> np.ndarray:
    """CRC-24A parity (register preset to all ones) of a bit vector."""
    return _crc24_bits(np.asarray(bits, dtype=np.int8))


def attach_crc(payload: np.ndarray) -> np.ndarray:
    payload = np.asarray(payload, dtype=np.int8)
    return np.concatenate([payload, crc24(payload)])


@njit(cache=True)
def _crc_ok(bits):
    n = bits.shape[0] - 24
    ref = _crc24_bits(bits[:n])
    for i in range(24):
        if ref[i] != bits[n + i]:
            return False
    return True


# ---------------------------------------------------------------------------
# encoder


@njit(cache=True)
def _rsc(bits, nxt, par, tail_u, m):
    k = bits.shape[0]
    parity = np.empty(k, dtype=np.int8)
    s = 0
    for i in range(k):
        u = bits[i]
        parity[i] = par[s, u]
        s = nxt[s, u]
    tail_sys = np.empty(m, dtype=np.int8)
    tail_par = np.empty(m, dtype=np.int8)
    for i in range(m):
        u = tail_u[s]
        tail_sys[i] = u
        tail_par[i] = par[s, u]
        s = nxt[s, u]
    return parity, tail_sys, tail_par


@njit(cache=True)
def _encode_many(info, perm, nxt, par, tail_u, m, sys_pos, p1_pos, p2_pos, tail_pos):
    n, k = info.shape
    buf = np.empty((n, 3 * k + 4 * m), dtype=np.int8)
    inter = np.empty(k, dtype=np.int8)
    for b in range(n):
        row = info[b]
        p1, ts1, tp1 = _rsc(row, nxt, par, tail_u, m)
        for i in range(k):
            inter[i] = row[perm[i]]
        p2, ts2, tp2 = _rsc(inter, nxt, par, tail_u, m)
        for i in range(k):
            buf[b, sys_pos[i]] = row[i]
            buf[b, p1_pos[i]] = p1[i]
            buf[b, p2_pos[i]] = p2[i]
        for i in range(m):
            buf[b, tail_pos[4 * i]] = ts1[i]
            buf[b, tail_pos[4 * i + 1]] = tp1[i]
            buf[b, tail_pos[4 * i + 2]] = ts2[i]
            buf[b, tail_pos[4 * i + 3]] = tp2[i]
    return buf


def _encoder_args(cfg: TurboConfig):
    nxt, par, tail_u = trellis(cfg.constituent_polynomials)
    k, m = cfg.block_length_k, cfg.memory
    return (interleaver(k, cfg.interleaver_seed), nxt, par, tail_u, m) + _buffer_layout(k, m)


def encode_buffers(info: np.ndarray, cfg: TurboConfig) -> np.ndarray:
    """Encode a batch ``(n, K)`` of info words into circular buffers ``(n, 3K+4m)``."""
    info = np.ascontiguousarray(info, dtype=np.int8)
    if info.ndim != 2 or info.shape[1] != cfg.block_length_k:
        raise ValueError(f"expected info blocks of length {cfg.block_length_k}")
    return _encode_many(info, *_encoder_args(cfg))


def encode(info: np.ndarray, cfg: TurboConfig) -> CodedBlock:
    info = np.asarray(info, dtype=np.int8)
    if info.ndim != 1 or len(info) != cfg.block_length_k:
        raise ValueError(f"info length {info.shape} != block length {cfg.block_length_k}")
    buf = encode_buffers(info[None, :], cfg)[0]
    sys_pos, p1_pos, p2_pos, tail_pos = _buffer_layout(cfg.block_length_k, cfg.memory)
    return CodedBlock(buf[sys_pos].copy(), buf[p1_pos].copy(), buf[p2_pos].copy(),
                      buf[tail_pos].copy(), buf)


def rate_match(block: CodedBlock, target_rate: float) -> np.ndarray:
    """Select ``ceil(K / target_rate)`` bits from the circular buffer.

    The buffer holds the systematic bits first, then the two parity streams
    interlaced in a spread order, then the termination bits. Rates above 1/3
    puncture from the end; rates below 1/3 wrap around and repeat.
    """
    k = len(block.systematic)
    m = len(block.tail) // 4
    return block.buffer[rate_match_indices(k, m, target_rate)].copy()


@njit(cache=True)
def _derate_many(llrs, idx, n_buf):
    n = llrs.shape[0]
    out = np.zeros((n, n_buf))
    for b in range(n):
        for j in range(idx.shape[0]):
            out[b, idx[j]] += llrs[b, j]
    return out


def derate_match(llrs: np.ndarray, cfg: TurboConfig, target_rate: float) -> np.ndarray:
    """Soft-combine received LLRs back into buffer positions (0 where punctured)."""
    llrs = np.asarray(llrs, dtype=np.float64)
    single = llrs.ndim == 1
    llrs2 = np.atleast_2d(llrs)
    idx = rate_match_indices(cfg.block_length_k, cfg.memory, target_rate)
    if llrs2.shape[1] != len(idx):
        raise ValueError(f"expected {len(idx)} LLRs, got {llrs2.shape[1]}")
    out = _derate_many(np.ascontiguousarray(llrs2), idx, cfg.buffer_length)
    return out[0] if single else out


# ---------------------------------------------------------------------------
# decoder


@njit(cache=True, fastmath=True)
def _map_decode(ls, lp, la, ts, tp, nxt, par, tail_u, prev, prev_g, alpha, out):
    """Max-log-MAP pass of one constituent; writes extrinsic LLRs to ``out``."""
    k = ls.shape[0]
    m = ts.shape[0]
    n_states = nxt.shape[0]
    gam = np.empty(4)  # index 2*u + p
    for s in range(n_states):
        alpha[0, s] = _NEG
    alpha[0, 0] = 0.0
    for t in range(k):
        hs = 0.5 * (ls[t] + la[t])
        hp = 0.5 * lp[t]
        gam[0] = hs + hp
        gam[1] = hs - hp
        gam[2] = -hs + hp
        gam[3] = -hs - hp
        norm = _NEG
        for ns in range(n_states):
            v0 = alpha[t, prev[ns, 0]] + gam[prev_g[ns, 0]]
            v1 = alpha[t, prev[ns, 1]] + gam[prev_g[ns, 1]]
            v = v0 if v0 > v1 else v1
            alpha[t + 1, ns] = v
            if v > norm:
                norm = v
        for s in range(n_states):
            alpha[t + 1, s] -= norm

    beta = np.empty(n_states)
    nb = np.empty(n_states)
    for s in range(n_states):
        beta[s] = _NEG
    beta[0] = 0.0
    # termination steps: the input is forced by the state
    for t in range(m - 1, -1, -1):
        for s in range(n_states):
            u = tail_u[s]
            g = 0.5 * ((1 - 2 * u) * ts[t] + (1 - 2 * par[s, u]) * tp[t])
            nb[s] = beta[nxt[s, u]] + g
        for s in range(n_states):
            beta[s] = nb[s]
    for t in range(k - 1, -1, -1):
        hs = 0.5 * (ls[t] + la[t])
        hp = 0.5 * lp[t]
        gam[0] = hs + hp
        gam[1] = hs - hp
        gam[2] = -hs + hp
        gam[3] = -hs - hp
        best0 = _NEG
        best1 = _NEG
        norm = _NEG
        for s in range(n_states):
            v0 = gam[par[s, 0]] + beta[nxt[s, 0]]
            v1 = gam[2 + par[s, 1]] + beta[nxt[s, 1]]
            a = alpha[t, s]
            if a + v0 > best0:
                best0 = a + v0
            if a + v1 > best1:
                best1 = a + v1
            b_new = v0 if v0 > v1 else v1
            nb[s] = b_new
            if b_new > norm:
                norm = b_new
        for s in range(n_states):
            beta[s] = nb[s] - norm
        out[t] = best0 - best1 - 2.0 * hs


@njit(cache=True)
def _decode_one(buf, perm, nxt, par, tail_u, m, sys_pos, p1_pos, p2_pos, tail_pos,
                n_iter, scale, bits):
    k = perm.shape[0]
    ls = np.empty(k)
    lp1 = np.empty(k)
    lp2 = np.empty(k)
    ls2 = np.empty(k)
    for i in range(k):
        ls[i] = buf[sys_pos[i]]
        lp1[i] = buf[p1_pos[i]]
        lp2[i] = buf[p2_pos[i]]
    for i in range(k):
        ls2[i] = ls[perm[i]]
    ts1 = np.empty(m)
    tp1 = np.empty(m)
    ts2 = np.empty(m)
    tp2 = np.empty(m)
    for i in range(m):
        ts1[i] = buf[tail_pos[4 * i]]
        tp1[i] = buf[tail_pos[4 * i + 1]]
        ts2[i] = buf[tail_pos[4 * i + 2]]
        tp2[i] = buf[tail_pos[4 * i + 3]]

    # iteration 0: the raw systematic decisions may already pass the checksum
    for i in range(k):
        bits[i] = 1 if ls[i] < 0 else 0
    if _crc_ok(bits):
        return True, 0

    n_states = nxt.shape[0]
    prev = np.empty((n_states, 2), dtype=np.int64)
    prev_g = np.empty((n_states, 2), dtype=np.int64)
    fill = np.zeros(n_states, dtype=np.int64)
    for s in range(n_states):
        for u in range(2):
            ns = nxt[s, u]
            prev[ns, fill[ns]] = s
            prev_g[ns, fill[ns]] = 2 * u + par[s, u]
            fill[ns] += 1
    alpha = np.empty((k + 1, n_states))
    la1 = np.zeros(k)
    la2 = np.empty(k)
    le1 = np.empty(k)
    le2 = np.empty(k)
    ok = False
    it = 0
    for it in range(1, n_iter + 1):
        _map_decode(ls, lp1, la1, ts1, tp1, nxt, par, tail_u, prev, prev_g, alpha, le1)
        for i in range(k):
            post = ls[i] + le1[i] + la1[i]
            bits[i] = 1 if post < 0 else 0
        if _crc_ok(bits):
            ok = True
            break
        for i in range(k):
            la2[i] = scale * le1[perm[i]]
        _map_decode(ls2, lp2, la2, ts2, tp2, nxt, par, tail_u, prev, prev_g, alpha, le2)
        for i in range(k):
            la1[perm[i]] = scale * le2[i]
        for i in range(k):
            post = ls[i] + le1[i] + la1[i]
            bits[i] = 1 if post < 0 else 0
        ok = _crc_ok(bits)
        if ok:
            break
    return ok, it


@njit(cache=True)
def _decode_many(bufs, perm, nxt, par, tail_u, m, sys_pos, p1_pos, p2_pos, tail_pos,
                 n_iter, scale):
    n = bufs.shape[0]
    k = perm.shape[0]
    bits = np.empty((n, k), dtype=np.int8)
    ok = np.empty(n, dtype=np.bool_)
    iters = np.empty(n, dtype=np.int64)
    for b in range(n):
        ok[b], iters[b] = _decode_one(bufs[b], perm, nxt, par, tail_u, m, sys_pos, p1_pos,
                                      p2_pos, tail_pos, n_iter, scale, bits[b])
    return bits, ok, iters


def decode_buffers(bufs: np.ndarray, cfg: TurboConfig):
    """Decode a batch of de-rate-matched buffers.

    Returns ``(bits, crc_ok, iterations_used)``; iteration 0 means the raw
    systematic decisions already satisfied the checksum.
    """
    bufs = np.ascontiguousarray(np.atleast_2d(bufs), dtype=np.float64)
    if bufs.shape[1] != cfg.buffer_length:
        raise ValueError(f"expected buffers of length {cfg.buffer_length}")
    return _decode_many(bufs, *_encoder_args(cfg), cfg.n_iterations, cfg.extrinsic_scale)


def decode(llrs: np.ndarray, cfg: TurboConfig, target_rate: float):
    """Decode one rate-matched LLR block; returns ``(bits, crc_ok)``.

    ``crc_ok`` checks the trailing 24 bits of the K decoded bits against
    :func:`crc24` of the leading K-24.
    """
    llrs = np.asarray(llrs, dtype=np.float64)
    if llrs.ndim != 1:
        raise ValueError("decode expects a single LLR block")
    buf = derate_match(llrs, cfg, target_rate)
    bits, ok, _ = decode_buffers(buf[None, :], cfg)
    return bits[0], bool(ok[0])
