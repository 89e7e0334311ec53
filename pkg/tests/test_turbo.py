import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dlsim import turbo
from dlsim.numerology import cqi_table
from dlsim.turbo import (CRC_BITS, QPP_COEFFS, TurboConfig, attach_crc, crc24, decode,
                         decode_buffers, derate_match, encode, encode_buffers, interleaver,
                         rate_match, rate_match_indices, rate_matched_length)

CFG = TurboConfig()
RATES = sorted({e.code_rate for e in cqi_table()})


def rsc_oracle(bits):
    """Plain shift-register model of the 13/15 constituent with termination."""
    r1 = r2 = r3 = 0
    par = []
    for u in bits:
        a = u ^ r2 ^ r3           # feedback 1 + D^2 + D^3
        par.append(a ^ r1 ^ r3)   # feedforward 1 + D + D^3
        r1, r2, r3 = a, r1, r2
    tail = []
    for _ in range(3):
        u = r2 ^ r3               # drives the feedback sum to zero
        a = 0
        tail.append((u, a ^ r1 ^ r3))
        r1, r2, r3 = a, r1, r2
    assert (r1, r2, r3) == (0, 0, 0)
    return np.array(par), tail


def crc_oracle(bits):
    """Long division of M(x) x^24; the all-ones preset equals inverting the first 24 bits."""
    poly = (1 << 24) | 0x864CFB
    msg = [int(b) for b in bits]
    for i in range(24):
        msg[i] ^= 1
    n = int("".join(map(str, msg + [0] * 24)), 2)
    for shift in range(n.bit_length() - 25, -1, -1):
        if n >> (shift + 24) & 1:
            n ^= poly << shift
    return np.array([(n >> (23 - i)) & 1 for i in range(24)], dtype=np.int8)


def test_qpp_known_entries_and_bijection():
    assert QPP_COEFFS[40] == (3, 10)
    assert QPP_COEFFS[1024] == (31, 64)
    assert QPP_COEFFS[6144] == (263, 480)
    for k in QPP_COEFFS:
        p = interleaver(k)
        assert np.array_equal(np.sort(p), np.arange(k))
    p = interleaver(1024)
    assert [int(p[i]) for i in (0, 1, 2, 10)] == [0, 95, 318, (31 * 10 + 64 * 100) % 1024]


def test_fallback_interleaver_is_seeded_permutation():
    a, b, c = interleaver(1000, 1), interleaver(1000, 1), interleaver(1000, 2)
    assert np.array_equal(a, b) and not np.array_equal(a, c)
    assert np.array_equal(np.sort(a), np.arange(1000))


@pytest.mark.parametrize("seed", range(3))
def test_encoder_matches_shift_register_oracle(seed):
    info = np.random.default_rng(seed).integers(0, 2, CFG.block_length_k).astype(np.int8)
    blk = encode(info, CFG)
    p1, t1 = rsc_oracle(info)
    p2, t2 = rsc_oracle(info[interleaver(CFG.block_length_k)])
    assert np.array_equal(blk.systematic, info)
    assert np.array_equal(blk.parity1, p1)
    assert np.array_equal(blk.parity2, p2)
    expected_tail = [b for (a, c), (d, e) in zip(t1, t2) for b in (a, c, d, e)]
    assert blk.tail.tolist() == expected_tail
    assert blk.buffer.size == CFG.buffer_length == 3 * 1024 + 12
    assert blk.mother_codeword.size == 3 * 1024


def test_encoder_is_linear():
    rng = np.random.default_rng(5)
    a = rng.integers(0, 2, (1, 1024)).astype(np.int8)
    b = rng.integers(0, 2, (1, 1024)).astype(np.int8)
    ea, eb, eab = (encode_buffers(x, CFG) for x in (a, b, a ^ b))
    assert np.array_equal(ea ^ eb, eab)
    assert not encode_buffers(np.zeros((1, 1024), np.int8), CFG).any()


def test_buffer_starts_systematic_then_spread_parity():
    info = np.random.default_rng(0).integers(0, 2, 1024).astype(np.int8)
    blk = encode(info, CFG)
    assert np.array_equal(blk.buffer[:1024], info)
    # the parity region interlaces p1/p2 and visits every info position once
    assert sorted(blk.buffer[1024:3 * 1024:2].tolist()) == sorted(blk.parity1.tolist())


@pytest.mark.parametrize("rate", RATES)
def test_rate_matched_length(rate):
    e = rate_matched_length(1024, rate)
    assert e == math.ceil(1024 / rate - 1e-9)
    idx = rate_match_indices(1024, 3, rate)
    assert len(idx) == e
    assert idx[0] == 0
    if e <= CFG.buffer_length:
        assert len(set(idx.tolist())) == e
    else:
        assert set(idx.tolist()) == set(range(CFG.buffer_length))


def test_rate_one_third_is_exactly_3k():
    assert rate_matched_length(1024, 1 / 3) == 3072


def test_rate_bounds():
    with pytest.raises(ValueError):
        rate_match_indices(1024, 3, 1 / 14)
    with pytest.raises(ValueError):
        rate_match_indices(1024, 3, 1.01)


def test_derate_sums_repetitions():
    rate = 1 / 13
    e = rate_matched_length(1024, rate)
    buf = derate_match(np.ones(e), CFG, rate)
    counts = np.bincount(rate_match_indices(1024, 3, rate), minlength=CFG.buffer_length)
    assert np.array_equal(buf, counts)
    with pytest.raises(ValueError):
        derate_match(np.ones(e + 1), CFG, rate)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.integers(0, 1), min_size=24, max_size=200))
def test_crc_matches_long_division(bits):
    assert np.array_equal(crc24(np.array(bits)), crc_oracle(bits))


def test_crc_detects_single_bit_errors():
    payload = np.random.default_rng(0).integers(0, 2, 1000).astype(np.int8)
    word = attach_crc(payload)
    assert turbo._crc_ok(word)
    for i in range(0, word.size, 37):
        bad = word.copy()
        bad[i] ^= 1
        assert not turbo._crc_ok(bad)


def test_crc_rejects_all_zero_word():
    assert not turbo._crc_ok(np.zeros(1024, np.int8))


def _info(n, seed=0):
    rng = np.random.default_rng(seed)
    pay = rng.integers(0, 2, (n, 1024 - CRC_BITS)).astype(np.int8)
    return np.array([attach_crc(p) for p in pay])


@pytest.mark.parametrize("rate", RATES)
def test_noiseless_round_trip(rate):
    info = _info(3, seed=int(rate * 1000))
    for row in info:
        tx = rate_match(encode(row, CFG), rate)
        llr = 10.0 * (1 - 2 * tx.astype(np.float64))
        bits, ok = decode(llr, CFG, rate)
        assert ok
        assert np.array_equal(bits, row)


def test_decoder_corrects_channel_errors():
    rng = np.random.default_rng(3)
    info = _info(20, seed=3)
    bufs = encode_buffers(info, CFG)
    es_n0 = 10 ** (0.5 / 10)  # rate 1/3 BPSK at 0.5 dB per coded bit
    x = 1 - 2 * bufs.astype(np.float64)
    y = x + rng.normal(0, math.sqrt(1 / (2 * es_n0)), x.shape)
    llr = 4 * es_n0 * y
    raw_err = np.mean((llr[:, :1024] < 0) != info.astype(bool))
    assert raw_err > 0.02
    bits, ok, iters = decode_buffers(llr, CFG)
    assert ok.all()
    assert np.array_equal(bits, info)
    assert iters.max() <= CFG.n_iterations


def test_early_exit_on_clean_input():
    info = _info(4)
    llr = 20.0 * (1 - 2 * encode_buffers(info, CFG).astype(np.float64))
    _, ok, iters = decode_buffers(llr, CFG)
    assert ok.all() and (iters == 0).all()


def test_zero_llrs_fail_checksum():
    _, ok, iters = decode_buffers(np.zeros((1, CFG.buffer_length)), CFG)
    assert not ok[0]
    assert iters[0] == CFG.n_iterations


def test_config_validation():
    with pytest.raises(ValueError):
        TurboConfig(block_length_k=20)
    with pytest.raises(ValueError):
        TurboConfig(n_iterations=0)
    assert TurboConfig().tail_length == 12
