"""Link-level Monte Carlo: turbo encode -> QAM -> AWGN -> max-log demap -> decode."""

from __future__ import annotations

import csv
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from functools import cached_property, lru_cache

import numpy as np
from numba import njit

from . import turbo
from .numerology import CqiEntry, cqi_entry, cqi_table

log = logging.getLogger(__name__)

SUPPORTED_ORDERS = (2, 4, 6)


def default_snr_grid() -> tuple[float, ...]:
    return tuple(float(x) for x in np.round(np.arange(-10.0, 22.0 + 1e-9, 0.5), 6))


@dataclass(frozen=True)
class LinkSimConfig:
    snr_grid_db: tuple[float, ...] = field(default_factory=default_snr_grid)
    min_blocks: int = 100
    min_block_errors: int = 50
    max_blocks: int = 20000
    rng_seed: int = 0
    turbo: turbo.TurboConfig = field(default_factory=turbo.TurboConfig)
    batch_size: int = 100
    workers: int = 1

    def __post_init__(self):
        grid = tuple(float(x) for x in self.snr_grid_db)
        object.__setattr__(self, "snr_grid_db", grid)
        if len(grid) == 0 or any(b <= a for a, b in zip(grid, grid[1:])):
            raise ValueError("snr_grid_db must be non-empty and strictly increasing")
        if self.min_blocks < 100:
            raise ValueError("min_blocks must be at least 100")
        if self.min_block_errors < 20:
            raise ValueError("min_block_errors must be at least 20")
        if self.max_blocks < self.min_blocks:
            raise ValueError("max_blocks must be >= min_blocks")
        if self.turbo.block_length_k <= turbo.CRC_BITS:
            raise ValueError("block length must exceed the checksum length")


@dataclass(frozen=True)
class BlerPoint:
    snr_db: float
    bler: float
    n_blocks: int
    n_errors: int

    @property
    def std_error(self) -> float:
        p = self.bler
        return math.sqrt(p * (1 - p) / self.n_blocks)


@dataclass(frozen=True)
class BlerCurve:
    cqi_index: int
    points: tuple[BlerPoint, ...]

    def __post_init__(self):
        snrs = [p.snr_db for p in self.points]
        if any(b <= a for a, b in zip(snrs, snrs[1:])):
            raise ValueError(f"CQI {self.cqi_index} curve points not sorted by SNR")
        for p in self.points:
            if p.n_blocks <= 0 or not 0 <= p.n_errors <= p.n_blocks:
                raise ValueError(f"invalid counts at {p.snr_db} dB")
            if p.bler != p.n_errors / p.n_blocks:
                raise ValueError(f"bler inconsistent with counts at {p.snr_db} dB")

    @cached_property
    def snr_db(self) -> np.ndarray:
        a = np.array([p.snr_db for p in self.points])
        a.flags.writeable = False
        return a

    @cached_property
    def bler(self) -> np.ndarray:
        a = np.array([p.bler for p in self.points])
        a.flags.writeable = False
        return a

    @property
    def n_blocks(self) -> np.ndarray:
        return np.array([p.n_blocks for p in self.points])

    @property
    def std_error(self) -> np.ndarray:
        return np.array([p.std_error for p in self.points])

    def bler_at(self, snr_db):
        """BLER read off the curve, holding the end values outside its range.

        Between two positive samples the interpolation is linear in
        log10(BLER); next to a zero-error sample it falls back to linear BLER.
        """
        x, y = self.snr_db, self.bler
        s = np.clip(np.asarray(snr_db, dtype=np.float64), x[0], x[-1])
        if len(x) == 1:
            return np.full_like(s, y[0])
        j = np.clip(np.searchsorted(x, s, side="right") - 1, 0, len(x) - 2)
        t = (s - x[j]) / (x[j + 1] - x[j])
        y0, y1 = y[j], y[j + 1]
        pos = (y0 > 0) & (y1 > 0)
        with np.errstate(divide="ignore", invalid="ignore"):
            logi = 10.0 ** (np.log10(y0) + t * (np.log10(y1) - np.log10(y0)))
        out = np.where(pos, logi, y0 + t * (y1 - y0))
        out = np.where(t == 0, y0, np.where(t == 1, y1, out))
        return out[()] if out.ndim == 0 else out


# ---------------------------------------------------------------------------
# modulation


@lru_cache(maxsize=None)
def pam_levels(modulation_bits: int) -> tuple[np.ndarray, np.ndarray]:
    """Unnormalised per-dimension amplitudes and their Gray bit labels.

    Returns ``(levels, labels)`` where ``labels[i, j]`` is bit ``j`` of the
    dimension (sign bit first) for amplitude ``levels[i]``.
    """
    if modulation_bits not in SUPPORTED_ORDERS:
        raise ValueError(f"unsupported modulation order {modulation_bits}")
    n = modulation_bits // 2
    labels = np.array([[(v >> (n - 1 - j)) & 1 for j in range(n)] for v in range(1 << n)],
                      dtype=np.int8)
    levels = _pam_amplitude(labels).astype(np.float64)
    return levels, labels


def _pam_amplitude(dim_bits: np.ndarray) -> np.ndarray:
    # dim_bits[..., 0] is the sign; the remaining bits select the magnitude
    n = dim_bits.shape[-1]
    sign = 1 - 2 * dim_bits[..., 0].astype(np.int64)
    mag = np.ones(dim_bits.shape[:-1], dtype=np.int64)
    for j in range(n - 1, 0, -1):
        mag = (1 << (n - j)) - (1 - 2 * dim_bits[..., j].astype(np.int64)) * mag
    return sign * mag


def _norm(modulation_bits: int) -> float:
    levels, _ = pam_levels(modulation_bits)
    return math.sqrt(2 * np.mean(levels ** 2))


@lru_cache(maxsize=None)
def constellation(modulation_bits: int) -> np.ndarray:
    """All ``2**m`` unit-energy points indexed by their bit label (MSB first).

    Bits ``0, 2, 4`` of a label drive the in-phase axis and ``1, 3, 5`` the
    quadrature axis; bit 0 = positive sign on each axis.
    """
    if modulation_bits not in SUPPORTED_ORDERS:
        raise ValueError(f"unsupported modulation order {modulation_bits}")
    labels = np.array([[(v >> (modulation_bits - 1 - j)) & 1 for j in range(modulation_bits)]
                       for v in range(1 << modulation_bits)], dtype=np.int8)
    i = _pam_amplitude(labels[:, 0::2])
    q = _pam_amplitude(labels[:, 1::2])
    points = (i + 1j * q) / _norm(modulation_bits)
    points.setflags(write=False)
    return points


def modulate(bits: np.ndarray, modulation_bits: int) -> np.ndarray:
    """Gray-mapped square QAM with unit average energy; accepts ``(..., n_bits)``."""
    points = constellation(modulation_bits)
    bits = np.asarray(bits, dtype=np.int8)
    if bits.shape[-1] % modulation_bits:
        raise ValueError(f"{bits.shape[-1]} bits not divisible by {modulation_bits}")
    grouped = bits.reshape(bits.shape[:-1] + (-1, modulation_bits))
    weights = (1 << np.arange(modulation_bits - 1, -1, -1)).astype(np.int8)
    return points[grouped @ weights]


def awgn(symbols: np.ndarray, snr_db: float, rng: np.random.Generator) -> np.ndarray:
    """Add circular complex Gaussian noise of variance ``10**(-snr_db/10)``."""
    symbols = np.asarray(symbols)
    if math.isinf(snr_db) and snr_db > 0:
        return symbols.astype(np.complex128, copy=True)
    sigma = math.sqrt(10 ** (-snr_db / 10) / 2)
    noise = rng.standard_normal(symbols.shape + (2,)) * sigma
    return symbols + noise[..., 0] + 1j * noise[..., 1]


@njit(cache=True)
def _demap_axis(comp, levels, labels, inv_nv, out, axis, m):
    n_lev, n_dim = labels.shape
    for i in range(comp.shape[0]):
        y = comp[i]
        for j in range(n_dim):
            d0 = np.inf
            d1 = np.inf
            for lv in range(n_lev):
                d = (y - levels[lv]) ** 2
                if labels[lv, j] == 0:
                    if d < d0:
                        d0 = d
                elif d < d1:
                    d1 = d
            out[i * m + 2 * j + axis] = (d1 - d0) * inv_nv


def soft_demap(received: np.ndarray, modulation_bits: int, noise_var: float) -> np.ndarray:
    """Max-log LLRs, ``log P(b=0)/P(b=1)``, in transmitted bit order."""
    if noise_var <= 0:
        raise ValueError("noise variance must be positive")
    levels, labels = pam_levels(modulation_bits)
    levels = levels / _norm(modulation_bits)
    received = np.asarray(received, dtype=np.complex128)
    flat = received.ravel()
    out = np.empty(flat.size * modulation_bits)
    for axis, comp in ((0, flat.real), (1, flat.imag)):
        _demap_axis(np.ascontiguousarray(comp), levels, labels, 1.0 / noise_var, out, axis,
                    modulation_bits)
    return out.reshape(received.shape[:-1] + (-1,)) if received.ndim else out


# ---------------------------------------------------------------------------
# Monte Carlo


def simulate_blocks(cqi: CqiEntry, snr_db: float, n_blocks: int, cfg: LinkSimConfig,
                    rng: np.random.Generator) -> np.ndarray:
    """Push ``n_blocks`` random transport blocks through the chain.

    Returns a boolean array flagging blocks whose decoded K bits differ from
    the transmitted ones.
    """
    tcfg = cfg.turbo
    k = tcfg.block_length_k
    m = cqi.modulation_bits
    payload = rng.integers(0, 2, size=(n_blocks, k - turbo.CRC_BITS), dtype=np.int8)
    info = np.empty((n_blocks, k), dtype=np.int8)
    info[:, :-turbo.CRC_BITS] = payload
    for b in range(n_blocks):
        info[b, -turbo.CRC_BITS:] = turbo.crc24(payload[b])
    bufs = turbo.encode_buffers(info, tcfg)
    idx = turbo.rate_match_indices(k, tcfg.memory, cqi.code_rate)
    tx = bufs[:, idx]
    pad = (-tx.shape[1]) % m
    if pad:
        # filler bits complete the last symbol and are discarded at the receiver
        tx = np.concatenate([tx, np.zeros((n_blocks, pad), dtype=np.int8)], axis=1)
    rx = awgn(modulate(tx, m), snr_db, rng)
    noise_var = 10 ** (-snr_db / 10)
    llrs = soft_demap(rx, m, noise_var)[:, :len(idx)]
    dec_bufs = turbo.derate_match(llrs, tcfg, cqi.code_rate)
    bits, _, _ = turbo.decode_buffers(dec_bufs, tcfg)
    return (bits != info).any(axis=1)


def point_rng(seed: int, cqi_index: int, snr_index: int) -> np.random.Generator:
    return np.random.default_rng([seed, cqi_index, snr_index])


def run_point(cqi: CqiEntry, snr_index: int, cfg: LinkSimConfig) -> BlerPoint:
    """One SNR point with early stopping on the block-error target."""
    snr = cfg.snr_grid_db[snr_index]
    rng = point_rng(cfg.rng_seed, cqi.cqi_index, snr_index)
    n = errors = 0
    while True:
        if n >= cfg.min_blocks and (errors >= cfg.min_block_errors or n >= cfg.max_blocks):
            break
        batch = min(cfg.batch_size, cfg.max_blocks - n)
        if n < cfg.min_blocks:
            batch = max(batch, cfg.min_blocks - n)
        errors += int(simulate_blocks(cqi, snr, batch, cfg, rng).sum())
        n += batch
    return BlerPoint(snr, errors / n, n, errors)


def _run_task(args):
    cqi_index, snr_index, cfg = args
    return run_point(cqi_entry(cqi_index), snr_index, cfg)


def run_bler(cqi: CqiEntry, cfg: LinkSimConfig) -> BlerCurve:
    """BLER curve of one CQI over ``cfg.snr_grid_db``."""
    return run_bler_many([cqi], cfg)[0]


def run_bler_many(cqis, cfg: LinkSimConfig) -> list[BlerCurve]:
    """Curves for several CQIs; tasks per (CQI, SNR) are schedule independent."""
    cqis = list(cqis)
    tasks = [(c.cqi_index, i, cfg) for c in cqis for i in range(len(cfg.snr_grid_db))]
    if cfg.workers > 1:
        with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
            points = list(pool.map(_run_task, tasks, chunksize=4))
    else:
        points = []
        for c in cqis:
            for i in range(len(cfg.snr_grid_db)):
                points.append(run_point(c, i, cfg))
            log.info("CQI %d done", c.cqi_index)
    n = len(cfg.snr_grid_db)
    return [BlerCurve(c.cqi_index, tuple(points[j * n:(j + 1) * n])) for j, c in enumerate(cqis)]


def max_ue_capacity(bandwidth_symbol_rate: float, cqi: CqiEntry, bler: float) -> float:
    """Usable symbol rate x efficiency x (1 - BLER), in bit/s."""
    if not 0 <= bler <= 1:
        raise ValueError(f"BLER {bler} outside [0, 1]")
    return bandwidth_symbol_rate * cqi.efficiency * (1 - bler)


# ---------------------------------------------------------------------------
# CSV


CURVE_COLUMNS = ["cqi", "snr_db", "bler", "n_blocks", "n_errors"]


def write_curves_csv(path, curves) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CURVE_COLUMNS)
        for c in curves:
            for p in c.points:
                w.writerow([c.cqi_index, repr(p.snr_db), repr(p.bler), p.n_blocks, p.n_errors])


def read_curves_csv(path) -> list[BlerCurve]:
    rows: dict[int, list[BlerPoint]] = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != CURVE_COLUMNS:
            raise ValueError(f"{path}: expected columns {CURVE_COLUMNS}, got {reader.fieldnames}")
        for r in reader:
            n, e = int(r["n_blocks"]), int(r["n_errors"])
            rows.setdefault(int(r["cqi"]), []).append(
                BlerPoint(float(r["snr_db"]), e / n, n, e))
    return [BlerCurve(c, tuple(sorted(pts, key=lambda p: p.snr_db)))
            for c, pts in sorted(rows.items())]


def all_cqis():
    return list(cqi_table())
