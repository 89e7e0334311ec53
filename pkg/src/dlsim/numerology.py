"""LTE downlink resource grid and the CQI/MCS table."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from fractions import Fraction
from functools import lru_cache

MODULATION_NAMES = {2: "QPSK", 4: "16QAM", 6: "64QAM"}
DEFAULT_OVERHEAD = 0.25


@dataclass(frozen=True)
class GridConfig:
    bandwidth_hz: float = 20e6
    subcarriers_per_rb: int = 12
    n_rb: int = 100
    subcarrier_spacing_hz: float = 15e3
    symbols_per_slot: int = 7
    slots_per_subframe: int = 2
    subframes_per_frame: int = 10
    subframe_duration_s: float = 1e-3

    def __post_init__(self):
        counts = (self.subcarriers_per_rb, self.n_rb, self.symbols_per_slot,
                  self.slots_per_subframe, self.subframes_per_frame)
        if any(c <= 0 for c in counts):
            raise ValueError("grid counts must be strictly positive")
        if self.subframe_duration_s <= 0 or self.subcarrier_spacing_hz <= 0:
            raise ValueError("durations and spacings must be positive")
        occupied = self.n_rb * self.subcarriers_per_rb * self.subcarrier_spacing_hz
        if occupied > self.bandwidth_hz:
            raise ValueError(
                f"{self.n_rb} RBs occupy {occupied:g} Hz, more than the {self.bandwidth_hz:g} Hz channel")

    @property
    def rb_bandwidth_hz(self) -> float:
        return self.subcarriers_per_rb * self.subcarrier_spacing_hz

    @property
    def frame_duration_s(self) -> float:
        return self.subframes_per_frame * self.subframe_duration_s


@dataclass(frozen=True)
class CqiEntry:
    cqi_index: int
    modulation_bits: int
    code_rate: float

    def __post_init__(self):
        if not 1 <= self.cqi_index <= 15:
            raise ValueError(f"CQI index {self.cqi_index} outside 1..15")
        if self.modulation_bits not in MODULATION_NAMES:
            raise ValueError(f"unsupported modulation order {self.modulation_bits}")
        if not 0 < self.code_rate <= 1:
            raise ValueError(f"code rate {self.code_rate} outside (0, 1]")

    @property
    def efficiency(self) -> float:
        """Information bits per modulation symbol."""
        return self.modulation_bits * self.code_rate

    @property
    def modulation(self) -> str:
        return MODULATION_NAMES[self.modulation_bits]


# (modulation bits, code rate). Contains every QPSK/16QAM/64QAM format of the
# link-level parameter set; the remaining six rates fill the 15-entry shape
# between rate 1/13 and 37/40.
_CQI_FORMATS = (
    (2, Fraction(1, 13)),
    (2, Fraction(1, 6)),
    (2, Fraction(1, 3)),
    (2, Fraction(1, 2)),
    (2, Fraction(2, 3)),
    (2, Fraction(4, 5)),
    (4, Fraction(1, 2)),
    (4, Fraction(2, 3)),
    (4, Fraction(4, 5)),
    (6, Fraction(3, 5)),
    (6, Fraction(2, 3)),
    (6, Fraction(3, 4)),
    (6, Fraction(4, 5)),
    (6, Fraction(17, 20)),
    (6, Fraction(37, 40)),
)


@lru_cache(maxsize=None)
def cqi_table() -> tuple[CqiEntry, ...]:
    """Return the 15 CQI entries ordered by index (1-based)."""
    return tuple(CqiEntry(i + 1, m, float(r)) for i, (m, r) in enumerate(_CQI_FORMATS))


def cqi_entry(index: int) -> CqiEntry:
    if not 1 <= index <= 15:
        raise ValueError(f"CQI index {index} outside 1..15")
    return cqi_table()[index - 1]


def data_symbols_per_rb_pair(grid: GridConfig = GridConfig(),
                             overhead_fraction: float = DEFAULT_OVERHEAD) -> int:
    """Resource elements left for data in one RB over a full subframe."""
    if not 0 <= overhead_fraction < 1:
        raise ValueError(f"overhead fraction {overhead_fraction} outside [0, 1)")
    res = grid.subcarriers_per_rb * grid.symbols_per_slot * grid.slots_per_subframe
    return math.floor(res * (1 - overhead_fraction))


def tb_bits(cqi: CqiEntry, n_rb_allocated: int, grid: GridConfig = GridConfig(),
            overhead_fraction: float = DEFAULT_OVERHEAD) -> int:
    """Transport block size in bits for an allocation of ``n_rb_allocated`` RBs."""
    if not 1 <= n_rb_allocated <= grid.n_rb:
        raise ValueError(f"allocation of {n_rb_allocated} RBs outside 1..{grid.n_rb}")
    symbols = data_symbols_per_rb_pair(grid, overhead_fraction)
    # tiny epsilon keeps exact products such as 168 * 2/3 from flooring down
    return math.floor(n_rb_allocated * symbols * cqi.efficiency + 1e-9)


def peak_rate_bps(grid: GridConfig = GridConfig(),
                  overhead_fraction: float = DEFAULT_OVERHEAD) -> float:
    top = cqi_table()[-1]
    return tb_bits(top, grid.n_rb, grid, overhead_fraction) / grid.subframe_duration_s


def write_cqi_csv(path, table=None) -> None:
    table = cqi_table() if table is None else table
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["cqi", "modulation_bits", "code_rate", "efficiency"])
        for e in table:
            w.writerow([e.cqi_index, e.modulation_bits, repr(e.code_rate), repr(e.efficiency)])
