"""System-level simulation of one center cell surrounded by one interfering tier.

Per subframe: fading -> per-RB SINR -> delayed subband CQI reports ->
scheduling -> MCS selection -> BLER draw from the AWGN curve at the MIESM
effective SINR -> throughput accounting.
"""

from __future__ import annotations

import configparser
import dataclasses
import hashlib
import json
import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np
from scipy.special import j0

from .abstraction import Lut, miesm_masked
from .numerology import GridConfig, cqi_table, data_symbols_per_rb_pair, tb_bits

SCHEDULERS = ("pf", "rr", "bestcqi")
# block: independent Rayleigh redraw every coherence block (length from the
# UE speed unless given); iid: redraw every subframe; gauss-markov: AR(1)
# evolution with the Jakes correlation of the UE speed
FADING_MODELS = ("block", "iid", "gauss-markov", "off")

# independent random streams of one drop
_DEPLOY, _SHADOW, _FADING, _BLER = range(4)


@dataclass(frozen=True)
class SysConfig:
    n_ues: int = 20
    isd_m: float = 500.0
    cell_radius_m: float | None = None
    min_distance_m: float = 35.0
    n_interferers: int = 6
    tx_power_dbm: float = 46.0
    noise_figure_db: float = 9.0
    pathloss_intercept_db: float = 128.1
    pathloss_slope_db: float = 37.6
    shadowing_std_db: float = 8.0
    fading: str = "block"
    coherence_subframes: int | None = None
    carrier_hz: float = 2e9
    colocated: bool = False
    speed_kmh: float = 5.0
    subband_size: int = 6
    feedback_delay: int = 3
    pf_time_constant: float = 1000.0
    n_subframes: int = 2000
    n_drops: int = 10
    seed: int = 0
    overhead_fraction: float = 0.25
    grid: GridConfig = field(default_factory=GridConfig)

    def __post_init__(self):
        if self.n_ues < 1:
            raise ValueError("n_ues must be >= 1")
        if self.feedback_delay < 0:
            raise ValueError("feedback_delay must be >= 0")
        if self.subband_size < 1:
            raise ValueError("subband_size must be >= 1")
        if self.pf_time_constant < 1:
            raise ValueError("pf_time_constant must be >= 1")
        if self.fading not in FADING_MODELS:
            raise ValueError(f"fading must be one of {', '.join(FADING_MODELS)}")
        if self.coherence_subframes is not None and self.coherence_subframes < 1:
            raise ValueError("coherence_subframes must be >= 1")
        if self.min_distance_m >= self.radius:
            raise ValueError("min_distance_m must be below the cell radius")

    @property
    def doppler_hz(self) -> float:
        return self.speed_kmh / 3.6 * self.carrier_hz / 299_792_458.0

    @property
    def fading_correlation(self) -> float:
        """Subframe-to-subframe correlation of the complex fading coefficient."""
        if self.fading != "gauss-markov":
            return 0.0
        return float(j0(2 * math.pi * self.doppler_hz * self.grid.subframe_duration_s))

    @property
    def coherence_block(self) -> int:
        """Subframes per independent fading block (``0.423 / f_d`` by default)."""
        if self.fading == "iid":
            return 1
        if self.coherence_subframes is not None:
            return self.coherence_subframes
        if self.doppler_hz <= 0:
            return max(1, self.n_subframes)
        return max(1, round(0.423 / self.doppler_hz / self.grid.subframe_duration_s))

    @property
    def radius(self) -> float:
        return self.isd_m / 2 if self.cell_radius_m is None else self.cell_radius_m

    def digest(self) -> str:
        blob = json.dumps(dataclasses.asdict(self), sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


_INI_SECTIONS = {
    "layout": ("n_ues", "isd_m", "cell_radius_m", "min_distance_m", "n_interferers",
               "tx_power_dbm", "colocated"),
    "channel": ("noise_figure_db", "pathloss_intercept_db", "pathloss_slope_db",
                "shadowing_std_db", "fading", "coherence_subframes", "carrier_hz", "speed_kmh"),
    "scheduler": ("pf_time_constant",),
    "feedback": ("subband_size", "feedback_delay"),
    "simulation": ("n_subframes", "n_drops", "seed", "overhead_fraction"),
}


def load_config(path) -> SysConfig:
    """Read an INI-style config; unknown keys are rejected, missing keys default."""
    parser = configparser.ConfigParser()
    with open(path) as fh:
        parser.read_file(fh)
    types = {f.name: f.type for f in dataclasses.fields(SysConfig)}
    kwargs = {}
    for section in parser.sections():
        if section not in _INI_SECTIONS:
            raise ValueError(f"{path}: unknown section [{section}]")
        for key, raw in parser.items(section):
            if key not in _INI_SECTIONS[section]:
                raise ValueError(f"{path}: unknown key {key!r} in [{section}]")
            kind = str(types[key])
            if "bool" in kind:
                kwargs[key] = parser.getboolean(section, key)
            elif kind == "str":
                kwargs[key] = raw.strip()
            elif "None" in kind and raw.strip().lower() in ("", "none"):
                kwargs[key] = None
            elif "int" in kind and "float" not in kind:
                kwargs[key] = int(raw)
            else:
                kwargs[key] = float(raw)
    return SysConfig(**kwargs)


def dump_config(cfg: SysConfig) -> str:
    out = []
    for section, keys in _INI_SECTIONS.items():
        out.append(f"[{section}]")
        for k in keys:
            v = getattr(cfg, k)
            out.append(f"{k} = {'none' if v is None else v}")
        out.append("")
    return "\n".join(out)


# ---------------------------------------------------------------------------
# layout and channel


@dataclass(frozen=True)
class NetworkLayout:
    center: tuple[float, float]
    radius_m: float
    interferer_sites: tuple[tuple[float, float], ...]
    tx_power_dbm: float
    n_ues: int
    min_distance_m: float = 35.0

    @classmethod
    def hexagonal(cls, cfg: SysConfig) -> "NetworkLayout":
        ang = np.deg2rad(30 + 60 * np.arange(cfg.n_interferers))
        sites = tuple((float(cfg.isd_m * np.cos(a)), float(cfg.isd_m * np.sin(a))) for a in ang)
        return cls((0.0, 0.0), cfg.radius, sites, cfg.tx_power_dbm, cfg.n_ues, cfg.min_distance_m)

    @property
    def sites(self) -> np.ndarray:
        """Serving site first, then the interferers."""
        return np.array((self.center,) + self.interferer_sites)


def deploy(layout: NetworkLayout, rng: np.random.Generator, colocated: bool = False) -> np.ndarray:
    """Uniform UE positions over the annulus [min_distance, radius] of the center cell."""
    n = 1 if colocated else layout.n_ues
    r0, r1 = layout.min_distance_m, layout.radius_m
    r = np.sqrt(rng.uniform(r0 ** 2, r1 ** 2, n))
    theta = rng.uniform(0, 2 * np.pi, n)
    pos = np.column_stack([r * np.cos(theta), r * np.sin(theta)]) + np.asarray(layout.center)
    return np.repeat(pos, layout.n_ues, axis=0) if colocated else pos


def pathloss_db(distance_m, intercept_db=128.1, slope_db=37.6):
    return intercept_db + slope_db * np.log10(np.asarray(distance_m) / 1000.0)


def thermal_noise_mw(bandwidth_hz: float, noise_figure_db: float) -> float:
    return 10 ** ((-174.0 + 10 * math.log10(bandwidth_hz) + noise_figure_db) / 10)


class ChannelModel:
    """Pathloss x per-drop log-normal shadowing x per-RB Rayleigh fading.

    Fading coefficients are complex Gaussian with unit power, drawn
    independently per (site, UE, RB). ``block`` and ``iid`` hold them for one
    coherence block and redraw; ``gauss-markov`` evolves them as
    ``h[t+1] = rho h[t] + sqrt(1 - rho^2) w`` so the power stays exponential
    with unit mean at every subframe. Subframes must be visited in order;
    asking for an earlier one replays the stream from subframe 0.
    """

    def __init__(self, cfg: SysConfig, layout: NetworkLayout, ue_pos: np.ndarray, seed: int):
        self.cfg = cfg
        self.seed = seed
        d = np.linalg.norm(layout.sites[:, None, :] - ue_pos[None, :, :], axis=-1)
        self.distance_m = d
        self.pathloss_db = pathloss_db(d, cfg.pathloss_intercept_db, cfg.pathloss_slope_db)
        rng = np.random.default_rng([seed, _SHADOW])
        if cfg.colocated:
            sh = rng.normal(0, cfg.shadowing_std_db, (d.shape[0], 1)) * np.ones_like(d)
        else:
            sh = rng.normal(0, cfg.shadowing_std_db, d.shape)
        self.shadowing_db = sh
        self.large_scale = 10 ** (-(self.pathloss_db + sh) / 10)
        self._shape = d.shape + (cfg.grid.n_rb,)
        self._rho = cfg.fading_correlation
        self._block = cfg.coherence_block
        self._reset()

    def _reset(self):
        self._rng = np.random.default_rng([self.seed, _FADING])
        self._t = -1
        self._h = None

    def _draw(self):
        w = self._rng.standard_normal(self._shape + (2,)) * math.sqrt(0.5)
        return w[..., 0] + 1j * w[..., 1]

    def fading(self, subframe: int) -> np.ndarray:
        """Fading power gains ``(n_sites, n_ues, n_rb)`` at ``subframe``."""
        if self.cfg.fading == "off":
            return np.ones(self._shape)
        if subframe < self._t:
            self._reset()
        while self._t < subframe:
            self._t += 1
            if self.cfg.fading == "gauss-markov":
                w = self._draw()
                if self._h is None:
                    self._h = w
                else:
                    self._h = self._rho * self._h + math.sqrt(1 - self._rho ** 2) * w
            elif self._t % self._block == 0:
                self._h = self._draw()
        return np.abs(self._h) ** 2

    def gains(self, subframe: int) -> np.ndarray:
        """Linear power gains ``(n_sites, n_ues, n_rb)`` for one subframe."""
        return self.large_scale[..., None] * self.fading(subframe)

    def channel_gain(self, site: int, ue: int, rb_index: int, subframe: int) -> float:
        return float(self.gains(subframe)[site, ue, rb_index])


def per_rb_sinr(signal_mw, interference_mw, noise_mw):
    """S / (sum of interference + noise); interference summed over axis 0 if given per site."""
    interference_mw = np.asarray(interference_mw)
    if interference_mw.ndim == np.ndim(signal_mw) + 1:
        interference_mw = interference_mw.sum(axis=0)
    return np.asarray(signal_mw) / (interference_mw + noise_mw)


def sinr_from_gains(gains: np.ndarray, cfg: SysConfig) -> np.ndarray:
    p_rb = 10 ** ((cfg.tx_power_dbm - 10 * math.log10(cfg.grid.n_rb)) / 10)
    noise = thermal_noise_mw(cfg.grid.rb_bandwidth_hz, cfg.noise_figure_db)
    rx = p_rb * gains
    return per_rb_sinr(rx[0], rx[1:], noise)


# ---------------------------------------------------------------------------
# link abstraction helpers


def _groups(lut: Lut):
    """CQIs sharing (modulation, alpha1, alpha2), so MIESM runs once per group."""
    out: dict[tuple, list[int]] = {}
    for e in cqi_table():
        p = lut.params(e.cqi_index)
        out.setdefault((e.modulation_bits, p.alpha1, p.alpha2), []).append(e.cqi_index)
    return out


def best_cqi_for(sinr_db: np.ndarray, lut: Lut, mask: np.ndarray | None = None) -> np.ndarray:
    """Highest CQI whose own effective SINR clears its threshold (0 if none).

    Compression runs along the last axis of ``sinr_db`` restricted to ``mask``.
    """
    shape = sinr_db.shape[:-1]
    best = np.zeros(shape, dtype=np.int64)
    for (m, a1, a2), cqis in _groups(lut).items():
        eff = miesm_masked(sinr_db, lut.mi_tables[m], a1, a2, mask)
        for c in cqis:
            ok = eff >= lut.snr_cqi_map.threshold(c)
            best = np.where(ok & (c > best), c, best)
    return best


def subband_report(sinr_db: np.ndarray, lut: Lut, subband_size: int) -> np.ndarray:
    """Per-RB CQI report ``(n_ue, n_rb)``: MIESM-compressed subband CQI broadcast to its RBs."""
    n_ue, n_rb = sinr_db.shape
    n_sb = -(-n_rb // subband_size)
    pad = n_sb * subband_size - n_rb
    x = np.pad(sinr_db, ((0, 0), (0, pad)), constant_values=np.nan).reshape(n_ue, n_sb, subband_size)
    mask = ~np.isnan(x)
    cqi = best_cqi_for(np.nan_to_num(x), lut, mask)
    return np.repeat(cqi, subband_size, axis=1)[:, :n_rb]


class FeedbackQueue:
    """Delays CQI reports by a fixed number of subframes.

    Before ``delay`` reports have been pushed the oldest available report is
    returned, so the scheduler never starts blind.
    """

    def __init__(self, delay: int):
        if delay < 0:
            raise ValueError("delay must be >= 0")
        self.delay = delay
        self._q: deque = deque()

    def push(self, report):
        if not self._q:
            for _ in range(self.delay):
                self._q.append(report)
        self._q.append(report)
        return self._q.popleft()

    def __len__(self):
        return len(self._q)


# ---------------------------------------------------------------------------
# schedulers


@dataclass
class ScheduleDecision:
    assignment: np.ndarray          # RB -> UE id, -1 unassigned
    mcs: np.ndarray | None = None   # UE -> CQI index, 0 if not scheduled

    def validate(self, reports: np.ndarray) -> None:
        a = self.assignment
        used = a >= 0
        if np.any(reports[a[used], np.nonzero(used)[0]] < 1):
            raise AssertionError("RB assigned to a UE reporting CQI 0 on it")
        if self.mcs is not None:
            scheduled = np.unique(a[used])
            if np.any(self.mcs[scheduled] < 1):
                raise AssertionError("scheduled UE without an MCS")

    def rb_counts(self, n_ues: int) -> np.ndarray:
        a = self.assignment
        return np.bincount(a[a >= 0], minlength=n_ues)


class RoundRobin:
    """Cyclic RB assignment over a UE queue that persists across subframes.

    Each RB goes to the first UE in queue order reporting CQI >= 1 on it, and
    that UE moves to the back. A UE skipped for one RB keeps its place.
    """

    def __init__(self, n_ues: int):
        self.n_ues = n_ues
        self.order = list(range(n_ues))

    def __call__(self, reports: np.ndarray) -> ScheduleDecision:
        n_rb = reports.shape[1]
        out = np.full(n_rb, -1, dtype=np.int64)
        ok = reports > 0
        for rb in range(n_rb):
            for pos, u in enumerate(self.order):
                if ok[u, rb]:
                    out[rb] = u
                    self.order.append(self.order.pop(pos))
                    break
        return ScheduleDecision(out)


def schedule_rr(reports: np.ndarray, state: RoundRobin) -> ScheduleDecision:
    return state(reports)


def schedule_best_cqi(reports: np.ndarray) -> ScheduleDecision:
    """Each RB to the highest reported CQI, lowest UE id on ties."""
    out = np.argmax(reports, axis=0).astype(np.int64)
    out[reports.max(axis=0) < 1] = -1
    return ScheduleDecision(out)


def rb_rates(reports: np.ndarray, symbols_per_rb: int) -> np.ndarray:
    eff = np.array([0.0] + [e.efficiency for e in cqi_table()])
    return eff[reports] * symbols_per_rb


def schedule_pf(reports: np.ndarray, avg_throughputs: np.ndarray,
                symbols_per_rb: int) -> ScheduleDecision:
    """Each RB to argmax of instantaneous RB rate / smoothed throughput."""
    rate = rb_rates(reports, symbols_per_rb)
    metric = rate / np.asarray(avg_throughputs, dtype=np.float64)[:, None]
    out = np.argmax(metric, axis=0).astype(np.int64)
    out[rate.max(axis=0) <= 0] = -1
    return ScheduleDecision(out)


def pf_update(avg: np.ndarray, served_bits: np.ndarray, t_c: float, tti_s: float) -> np.ndarray:
    return (1 - 1 / t_c) * avg + (1 / t_c) * (served_bits / tti_s)


def select_mcs(decision: ScheduleDecision, reports: np.ndarray, lut: Lut) -> np.ndarray:
    """One MCS per UE from the MIESM of its assigned RBs' reported CQI thresholds."""
    n_ue = reports.shape[0]
    mask = np.zeros(reports.shape, dtype=bool)
    a = decision.assignment
    used = a >= 0
    mask[a[used], np.nonzero(used)[0]] = True
    thr = lut.snr_cqi_map.snr_for_cqi(np.where(mask, reports, 1))
    mcs = best_cqi_for(np.where(mask, thr, 0.0), lut, mask)
    mcs[~mask.any(axis=1)] = 0
    decision.mcs = mcs
    return mcs


@dataclass(frozen=True)
class TbResult:
    mcs: np.ndarray        # per UE, 0 = not scheduled
    n_rb: np.ndarray
    eff_sinr_db: np.ndarray
    bler: np.ndarray
    tb_bits: np.ndarray
    success: np.ndarray
    bits: np.ndarray       # delivered bits per UE


def transmit(decision: ScheduleDecision, true_sinr_db: np.ndarray, lut: Lut, uniforms: np.ndarray,
             grid: GridConfig = GridConfig(), overhead_fraction: float = 0.25) -> TbResult:
    """Link performance model: MIESM over assigned RBs -> AWGN BLER -> Bernoulli draw.

    ``uniforms`` holds one U(0,1) draw per UE; a block succeeds when the draw
    is at least its BLER.
    """
    n_ue = true_sinr_db.shape[0]
    mcs = decision.mcs
    mask = np.zeros(true_sinr_db.shape, dtype=bool)
    a = decision.assignment
    used = a >= 0
    mask[a[used], np.nonzero(used)[0]] = True
    n_rb = mask.sum(axis=1)
    eff = np.full(n_ue, np.nan)
    bler = np.ones(n_ue)
    tbs = np.zeros(n_ue, dtype=np.int64)
    table = cqi_table()
    for (m, a1, a2), cqis in _groups(lut).items():
        rows = np.isin(mcs, cqis) & (n_rb > 0)
        if not rows.any():
            continue
        e = miesm_masked(true_sinr_db[rows], lut.mi_tables[m], a1, a2, mask[rows])
        eff[rows] = e
        for u, val in zip(np.nonzero(rows)[0], e):
            try:
                curve = lut.curve(int(mcs[u]))
            except KeyError as exc:
                raise KeyError(f"unknown MCS curve for CQI {mcs[u]}") from exc
            bler[u] = float(curve.bler_at(val))
            tbs[u] = tb_bits(table[mcs[u] - 1], int(n_rb[u]), grid, overhead_fraction)
    success = (n_rb > 0) & (uniforms >= bler)
    bits = np.where(success, tbs, 0)
    return TbResult(mcs.copy(), n_rb, eff, np.where(n_rb > 0, bler, np.nan), tbs, success, bits)


# ---------------------------------------------------------------------------
# drops


@dataclass(frozen=True)
class DropResult:
    throughput_bps: np.ndarray
    scheduler: str
    seed: int
    config_digest: str
    served_bits: np.ndarray
    rb_counts: np.ndarray
    n_subframes: int

    @property
    def cell_throughput_bps(self) -> float:
        return float(self.throughput_bps.sum())


def run_drop(cfg: SysConfig, scheduler: str, seed: int, lut: Lut | None) -> DropResult:
    """Simulate ``cfg.n_subframes`` TTIs of one drop under one scheduler."""
    if lut is None:
        raise ValueError("a LUT is required to run a drop")
    if scheduler not in SCHEDULERS:
        raise ValueError(f"unknown scheduler {scheduler!r}; choose from {', '.join(SCHEDULERS)}")
    if cfg.n_subframes < 1:
        raise ValueError("n_subframes must be >= 1")
    layout = NetworkLayout.hexagonal(cfg)
    ue_pos = deploy(layout, np.random.default_rng([seed, _DEPLOY]), cfg.colocated)
    chan = ChannelModel(cfg, layout, ue_pos, seed)
    n = cfg.n_ues
    tti = cfg.grid.subframe_duration_s
    sym = data_symbols_per_rb_pair(cfg.grid, cfg.overhead_fraction)
    avg = np.full(n, tb_bits(cqi_table()[0], 1, cfg.grid, cfg.overhead_fraction) / tti)
    rr = RoundRobin(n)
    fb = FeedbackQueue(cfg.feedback_delay)
    bler_rng = np.random.default_rng([seed, _BLER])
    served = np.zeros(n, dtype=np.int64)
    rbs = np.zeros(n, dtype=np.int64)
    cell = 0
    for t in range(cfg.n_subframes):
        sinr_db = 10 * np.log10(sinr_from_gains(chan.gains(t), cfg))
        reports = fb.push(subband_report(sinr_db, lut, cfg.subband_size))
        if scheduler == "rr":
            dec = schedule_rr(reports, rr)
        elif scheduler == "bestcqi":
            dec = schedule_best_cqi(reports)
        else:
            dec = schedule_pf(reports, avg, sym)
        select_mcs(dec, reports, lut)
        dec.validate(reports)
        res = transmit(dec, sinr_db, lut, bler_rng.random(n), cfg.grid, cfg.overhead_fraction)
        served += res.bits
        cell += int(res.bits.sum())
        rbs += dec.rb_counts(n)
        avg = pf_update(avg, res.bits, cfg.pf_time_constant, tti)
    assert cell == int(served.sum())
    duration = cfg.n_subframes * tti
    return DropResult(served / duration, scheduler, seed, cfg.digest(), served, rbs,
                      cfg.n_subframes)


def run_drops(cfg: SysConfig, scheduler: str, lut: Lut, seed: int | None = None) -> list[DropResult]:
    base = cfg.seed if seed is None else seed
    return [run_drop(cfg, scheduler, base + d, lut) for d in range(cfg.n_drops)]


# ---------------------------------------------------------------------------
# statistics


def throughput_cdf(results):
    """Pooled empirical CDF ``(throughput, F)`` over every UE of every drop."""
    results = list(results)
    if not results:
        raise ValueError("no drop results")
    x = np.sort(np.concatenate([r.throughput_bps for r in results]))
    if x.size == 0:
        raise ValueError("no UE throughputs")
    return x, np.arange(1, x.size + 1) / x.size


def percentile_nearest_rank(values, pct: float) -> float:
    v = np.sort(np.asarray(values, dtype=np.float64))
    if v.size == 0:
        raise ValueError("empty sample")
    rank = max(1, math.ceil(pct / 100 * v.size))
    return float(v[rank - 1])


def cdf_readout(results, points=(50, 95, 100)) -> dict:
    x, _ = throughput_cdf(results)
    return {p: percentile_nearest_rank(x, p) for p in points}


def jain_index(values) -> float:
    v = np.asarray(values, dtype=np.float64)
    s2 = float(np.sum(v ** 2))
    if s2 == 0:
        return 1.0
    return float(v.sum() ** 2 / (v.size * s2))
