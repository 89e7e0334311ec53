"""Link-to-system interface: MI tables, MIESM/EESM, SNR->CQI map and LUT files."""

from __future__ import annotations

import csv
import hashlib
import io
import math
import warnings
from dataclasses import dataclass, field
from functools import cached_property, lru_cache

import numpy as np
from scipy.special import logsumexp

from .linksim import BlerCurve, BlerPoint, SUPPORTED_ORDERS, pam_levels
from .numerology import cqi_entry

LUT_FORMAT = "dlsim-lut"
LUT_VERSION = 1
DEFAULT_TARGET_BLER = 0.1


class LutFormatError(ValueError):
    pass


class LutDigestWarning(UserWarning):
    pass


# ---------------------------------------------------------------------------
# mutual information


@dataclass(frozen=True)
class MiTable:
    """Bit-interleaved coded modulation MI per symbol sampled on a uniform dB grid."""

    modulation_bits: int
    snr_db: tuple[float, ...]
    mi: tuple[float, ...]

    def __post_init__(self):
        if len(self.snr_db) != len(self.mi) or len(self.mi) < 2:
            raise ValueError("MI table needs matching snr/mi samples")
        mi = np.asarray(self.mi)
        if np.any(np.diff(mi) < 0):
            raise ValueError("MI samples must be non-decreasing")
        if mi[0] < 0 or mi[-1] > self.modulation_bits:
            raise ValueError("MI samples outside [0, modulation_bits]")

    @property
    def spacing(self) -> float:
        return (self.snr_db[-1] - self.snr_db[0]) / (len(self.snr_db) - 1)

    @cached_property
    def _x(self) -> np.ndarray:
        return np.asarray(self.snr_db)

    @cached_property
    def _y(self) -> np.ndarray:
        return np.asarray(self.mi)

    @cached_property
    def _inverse(self):
        # strictly increasing subset; flat stretches keep their first sample
        y, first = np.unique(self._y, return_index=True)
        return y, self._x[first]

    def mi_at(self, snr_db):
        return np.interp(snr_db, self._x, self._y)

    def snr_for(self, mi):
        """Inverse lookup without range checks (clamped to the grid)."""
        y, x = self._inverse
        return np.interp(mi, y, x)


def _gh_nodes(n: int = 96):
    z, w = np.polynomial.hermite.hermgauss(n)
    return z, w / math.sqrt(math.pi)


def bicm_mi(modulation_bits: int, snr_db) -> np.ndarray:
    """BICM mutual information (bits/symbol) of Gray QAM over complex AWGN.

    Exploits the separable I/Q Gray mapping: each axis is a Gray PAM seen
    through real noise of variance N0/2, integrated by Gauss-Hermite.
    """
    if modulation_bits not in SUPPORTED_ORDERS:
        raise ValueError(f"unsupported modulation order {modulation_bits}")
    levels, labels = pam_levels(modulation_bits)
    levels = levels / math.sqrt(2 * np.mean(levels ** 2))
    z, w = _gh_nodes()
    snr = np.atleast_1d(np.asarray(snr_db, dtype=np.float64))
    out = np.empty(snr.shape)
    n_dim = labels.shape[1]
    for k, s in enumerate(snr):
        sigma2 = 10 ** (-s / 10) / 2
        # y[i, g] = level_i + noise node g
        y = levels[:, None] + math.sqrt(2 * sigma2) * z[None, :]
        metric = -(y[:, :, None] - levels[None, None, :]) ** 2 / (2 * sigma2)
        all_ = logsumexp(metric, axis=-1)
        loss = 0.0
        for j in range(n_dim):
            same = labels[:, j][:, None] == labels[:, j][None, :]  # [tx i, candidate l]
            sub = logsumexp(np.where(same[:, None, :], metric, -np.inf), axis=-1)
            loss += np.mean((all_ - sub) @ w) / math.log(2)
        out[k] = 2 * (n_dim - loss)
    out = np.clip(out, 0.0, modulation_bits)
    return out if np.ndim(snr_db) else out[0]


def build_mi_table(modulation_bits: int, grid=(-30.0, 40.0, 0.1)) -> MiTable:
    """MI table over ``grid = (start_db, stop_db, step_db)``, end samples clamped."""
    start, stop, step = grid
    if start > -20 or stop < 30:
        raise ValueError("MI grid must span at least [-20, 30] dB")
    n = int(round((stop - start) / step)) + 1
    snr = np.round(start + step * np.arange(n), 10)
    mi = np.maximum.accumulate(bicm_mi(modulation_bits, snr))
    mi[0] = 0.0
    mi[-1] = float(modulation_bits)
    return MiTable(modulation_bits, tuple(snr.tolist()), tuple(mi.tolist()))


@lru_cache(maxsize=None)
def default_mi_table(modulation_bits: int) -> MiTable:
    return build_mi_table(modulation_bits)


def mi_inverse(table: MiTable, mi: float) -> float:
    if not 0 < mi < table.modulation_bits:
        raise ValueError(f"MI {mi} outside the open interval (0, {table.modulation_bits})")
    return float(table.snr_for(mi))


# ---------------------------------------------------------------------------
# effective SINR mappings


@dataclass(frozen=True)
class MiesmParams:
    alpha1: float = 1.0
    alpha2: float = 1.0

    def __post_init__(self):
        if not (self.alpha1 > 0 and self.alpha2 > 0):
            raise ValueError("MIESM alphas must be strictly positive")


def _db(x):
    return 10 * np.log10(x)


def miesm_masked(sinr_db: np.ndarray, table: MiTable, alpha1=1.0, alpha2=1.0,
                 mask: np.ndarray | None = None) -> np.ndarray:
    """MIESM along the last axis; ``mask`` selects the RBs entering each average.

    Rows with an empty mask return NaN.
    """
    sinr_db = np.asarray(sinr_db, dtype=np.float64)
    a1, a2 = _db(alpha1), _db(alpha2)
    x = sinr_db - a2
    mi = table.mi_at(x)
    if mask is None:
        mean_mi = np.sort(mi, axis=-1).sum(axis=-1) / mi.shape[-1]
        lo, hi = x.min(axis=-1), x.max(axis=-1)
    else:
        mask = np.asarray(mask, dtype=bool)
        count = mask.sum(axis=-1)
        with np.errstate(invalid="ignore", divide="ignore"):
            mean_mi = np.where(mask, mi, 0.0).sum(axis=-1) / count
        lo = np.where(mask, x, np.inf).min(axis=-1)
        hi = np.where(mask, x, -np.inf).max(axis=-1)
    # the exact inverse lies within the extremes; clipping removes table error
    eff = np.clip(table.snr_for(mean_mi), lo, hi) + a1
    if mask is not None:
        eff = np.where(count > 0, eff, np.nan)
    return eff


def miesm(per_rb_sinr_db, params: MiesmParams, table: MiTable) -> float:
    """Effective SINR (dB) = alpha1 * I^-1(mean_p I(SINR_p / alpha2)), linear scaling."""
    x = np.asarray(per_rb_sinr_db, dtype=np.float64)
    if x.ndim != 1 or x.size == 0:
        raise ValueError("miesm needs a non-empty 1-D sequence of SINRs")
    return float(miesm_masked(x, table, params.alpha1, params.alpha2))


def eesm(per_rb_sinr_db, beta: float) -> float:
    """Exponential effective SINR mapping, returned in dB."""
    x = np.asarray(per_rb_sinr_db, dtype=np.float64)
    if x.ndim != 1 or x.size == 0:
        raise ValueError("eesm needs a non-empty 1-D sequence of SINRs")
    if not beta > 0:
        raise ValueError("beta must be positive")
    g = np.sort(10 ** (x / 10)) / beta
    gmin = g[0]
    mean = np.exp(-(g - gmin)).sum() / g.size
    eff = beta * (gmin - math.log(mean))
    eff = min(max(eff, beta * gmin), beta * g[-1])
    return float(_db(eff))


# ---------------------------------------------------------------------------
# SNR -> CQI map


@dataclass(frozen=True)
class SnrCqiMap:
    thresholds: tuple[tuple[int, float], ...]
    target_bler: float = DEFAULT_TARGET_BLER

    def __post_init__(self):
        cqis = [c for c, _ in self.thresholds]
        snrs = [s for _, s in self.thresholds]
        if not self.thresholds:
            raise ValueError("empty SNR-CQI map")
        if any(b <= a for a, b in zip(cqis, cqis[1:])):
            raise ValueError("CQI indices must be increasing")
        for (c0, s0), (c1, s1) in zip(self.thresholds, self.thresholds[1:]):
            if s1 <= s0:
                raise ValueError(
                    f"threshold of CQI {c1} ({s1:.3f} dB) not above CQI {c0} ({s0:.3f} dB)")

    @cached_property
    def _arrays(self):
        return (np.array([s for _, s in self.thresholds]),
                np.array([0] + [c for c, _ in self.thresholds]))

    def threshold(self, cqi_index: int) -> float:
        for c, s in self.thresholds:
            if c == cqi_index:
                return s
        raise KeyError(cqi_index)

    def cqi_for(self, sinr_db):
        snr, idx = self._arrays
        return idx[np.searchsorted(snr, sinr_db, side="right")]

    def snr_for_cqi(self, cqi):
        """Threshold SINR of each CQI (NaN for CQI 0)."""
        snr, idx = self._arrays
        lut = np.full(int(idx.max()) + 1, np.nan)
        lut[idx[1:]] = snr
        return lut[np.asarray(cqi)]


def sinr_to_cqi(snr_map: SnrCqiMap, effective_sinr_db: float) -> int:
    """Largest CQI whose threshold is <= the SINR; 0 below CQI 1."""
    return int(snr_map.cqi_for(effective_sinr_db))


def threshold_crossing(curve: BlerCurve, target_bler: float = DEFAULT_TARGET_BLER) -> float:
    """SNR where the curve falls through ``target_bler`` (log-BLER interpolation).

    The bracket is formed by the last sample above the target and its right
    neighbour. A zero-error neighbour is floored at half a block error.
    """
    x, y, n = curve.snr_db, curve.bler, curve.n_blocks
    above = np.nonzero(y > target_bler)[0]
    if above.size == 0 or above[-1] == len(y) - 1:
        raise ValueError(f"CQI {curve.cqi_index} curve never crosses BLER {target_bler}")
    i = above[-1]
    y0 = y[i]
    y1 = max(y[i + 1], 0.5 / n[i + 1])
    l0, l1, lt = math.log10(y0), math.log10(y1), math.log10(target_bler)
    if l1 >= lt:
        return float(x[i + 1])
    return float(x[i] + (lt - l0) / (l1 - l0) * (x[i + 1] - x[i]))


def build_snr_cqi_map(curves, target_bler: float = DEFAULT_TARGET_BLER) -> SnrCqiMap:
    curves = sorted(curves, key=lambda c: c.cqi_index)
    return SnrCqiMap(tuple((c.cqi_index, threshold_crossing(c, target_bler)) for c in curves),
                     target_bler)


# ---------------------------------------------------------------------------
# alpha calibration


@dataclass(frozen=True)
class FadingSample:
    """Per-RB SINRs (dB) of one block and the BLER measured for it."""

    sinr_db: tuple[float, ...]
    bler: float


def default_alpha_grid() -> np.ndarray:
    return 2.0 ** np.linspace(-2, 2, 41)


def prediction_loss(curve: BlerCurve, table: MiTable, samples, alpha1, alpha2) -> float:
    """Squared BLER prediction error summed over samples."""
    loss = 0.0
    for length, (mat, meas) in _stack(samples).items():
        eff = miesm_masked(mat, table, alpha1, alpha2)
        loss += float(np.sum((curve.bler_at(eff) - meas) ** 2))
    return loss


def _stack(samples):
    groups: dict[int, tuple[list, list]] = {}
    for s in samples:
        g = groups.setdefault(len(s.sinr_db), ([], []))
        g[0].append(s.sinr_db)
        g[1].append(s.bler)
    return {k: (np.array(v[0], dtype=np.float64), np.array(v[1])) for k, v in groups.items()}


def fit_alphas(curve: BlerCurve, table: MiTable, samples, grid=None) -> MiesmParams:
    """Exhaustive search of (alpha1, alpha2) over ``grid`` x ``grid``.

    Flat-SINR (AWGN) sample sets return (1, 1): any alpha1 == alpha2 is then
    exact, and the tie is resolved toward the identity.
    """
    samples = list(samples)
    if not samples:
        raise ValueError("no calibration samples")
    if all(min(s.sinr_db) == max(s.sinr_db) for s in samples):
        return MiesmParams(1.0, 1.0)
    grid = default_alpha_grid() if grid is None else np.asarray(grid, dtype=np.float64)
    stacks = _stack(samples)
    loss = np.zeros((len(grid), len(grid)))
    for mat, meas in stacks.values():
        for j, a2 in enumerate(grid):
            base = miesm_masked(mat, table, 1.0, a2)
            for i, a1 in enumerate(grid):
                pred = curve.bler_at(base + _db(a1))
                loss[i, j] += np.sum((pred - meas) ** 2)
    best = loss.min()
    cand = np.argwhere(loss <= best + 1e-12 * max(1.0, best))
    dist = np.abs(np.log(grid[cand[:, 0]])) + np.abs(np.log(grid[cand[:, 1]]))
    i, j = cand[np.argmin(dist)]
    return MiesmParams(float(grid[i]), float(grid[j]))


def calibrate_alphas(reference_curves, fading_samples, tables=None, grid=None) -> dict:
    """Per-CQI MIESM parameters fitted against measured fading BLERs.

    ``fading_samples`` maps CQI index -> iterable of :class:`FadingSample`.
    """
    curves = {c.cqi_index: c for c in reference_curves}
    out = {}
    for cqi, samples in sorted(fading_samples.items()):
        if cqi not in curves:
            raise ValueError(f"no reference AWGN curve for CQI {cqi}")
        m = cqi_entry(cqi).modulation_bits
        table = (tables or {}).get(m) or default_mi_table(m)
        out[cqi] = fit_alphas(curves[cqi], table, samples, grid)
    return out


# ---------------------------------------------------------------------------
# LUT persistence


@dataclass(frozen=True)
class Lut:
    snr_cqi_map: SnrCqiMap
    mi_tables: dict = field(default_factory=dict)   # modulation bits -> MiTable
    alphas: dict = field(default_factory=dict)      # cqi -> MiesmParams
    curves: tuple = ()                              # BlerCurve per CQI
    seed: int | None = None
    config_digest: str = ""

    def table_for_cqi(self, cqi: int) -> MiTable:
        return self.mi_tables[cqi_entry(cqi).modulation_bits]

    def params(self, cqi: int) -> MiesmParams:
        return self.alphas.get(cqi, MiesmParams())

    def curve(self, cqi: int) -> BlerCurve:
        for c in self.curves:
            if c.cqi_index == cqi:
                return c
        raise KeyError(f"no BLER curve for CQI {cqi}")


def build_lut(curves, target_bler=DEFAULT_TARGET_BLER, seed=None, config_digest="",
              alphas=None) -> Lut:
    curves = tuple(sorted(curves, key=lambda c: c.cqi_index))
    snr_map = build_snr_cqi_map(curves, target_bler)
    tables = {m: default_mi_table(m) for m in SUPPORTED_ORDERS}
    alphas = alphas or {c.cqi_index: MiesmParams() for c in curves}
    return Lut(snr_map, tables, dict(alphas), curves, seed, config_digest)


def _body(lut: Lut) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["[thresholds]"])
    w.writerow(["target_bler", repr(lut.snr_cqi_map.target_bler)])
    w.writerow(["cqi", "snr_db"])
    for c, s in lut.snr_cqi_map.thresholds:
        w.writerow([c, repr(s)])
    w.writerow(["[alphas]"])
    w.writerow(["cqi", "alpha1", "alpha2"])
    for c, p in sorted(lut.alphas.items()):
        w.writerow([c, repr(p.alpha1), repr(p.alpha2)])
    for m, t in sorted(lut.mi_tables.items()):
        w.writerow([f"[mi {m}]"])
        w.writerow(["snr_db", "mi"])
        for s, v in zip(t.snr_db, t.mi):
            w.writerow([repr(s), repr(v)])
    w.writerow(["[curves]"])
    w.writerow(["cqi", "snr_db", "bler", "n_blocks", "n_errors"])
    for c in lut.curves:
        for p in c.points:
            w.writerow([c.cqi_index, repr(p.snr_db), repr(p.bler), p.n_blocks, p.n_errors])
    w.writerow(["[end]"])
    return buf.getvalue()


def lut_save(lut: Lut, path) -> None:
    """Write the versioned plain-text LUT.

    Layout: a ``dlsim-lut <version>`` line, ``seed``, ``config_digest`` and
    ``content_digest`` (SHA-256 of everything after it) header rows, then
    bracketed CSV sections ``[thresholds]``, ``[alphas]``, ``[mi <m>]`` and
    ``[curves]``, closed by ``[end]``.
    """
    body = _body(lut)
    head = (f"{LUT_FORMAT} {LUT_VERSION}\n"
            f"seed,{'' if lut.seed is None else lut.seed}\n"
            f"config_digest,{lut.config_digest}\n"
            f"content_digest,{hashlib.sha256(body.encode()).hexdigest()}\n")
    with open(path, "w", newline="\n") as fh:
        fh.write(head + body)


def lut_load(path) -> Lut:
    with open(path, newline="") as fh:
        text = fh.read()
    lines = text.split("\n")
    first = lines[0].split()
    if len(first) != 2 or first[0] != LUT_FORMAT:
        raise LutFormatError(f"{path}: not a {LUT_FORMAT} file")
    if first[1] != str(LUT_VERSION):
        raise LutFormatError(f"{path}: LUT version {first[1]}, expected {LUT_VERSION}")
    try:
        header = dict(line.split(",", 1) for line in lines[1:4])
        seed = int(header["seed"]) if header["seed"] else None
        cfg_digest = header["config_digest"]
        digest = header["content_digest"]
    except (KeyError, ValueError) as exc:
        raise LutFormatError(f"{path}: malformed header") from exc
    body = "\n".join(lines[4:])
    if hashlib.sha256(body.encode()).hexdigest() != digest:
        warnings.warn(f"{path}: content digest mismatch", LutDigestWarning, stacklevel=2)
    try:
        return _parse_body(body, seed, cfg_digest)
    except (KeyError, ValueError, IndexError) as exc:
        raise LutFormatError(f"{path}: malformed LUT body ({exc})") from exc


def _parse_body(body: str, seed, cfg_digest) -> Lut:
    sections: dict[str, list[list[str]]] = {}
    current = None
    for row in csv.reader(io.StringIO(body)):
        if not row:
            continue
        if len(row) == 1 and row[0].startswith("[") and row[0].endswith("]"):
            current = row[0][1:-1]
            sections[current] = []
            continue
        if current is None:
            raise ValueError("data outside a section")
        sections[current].append(row)
    if "end" not in sections:
        raise ValueError("missing [end] marker")
    th = sections["thresholds"]
    target = float(th[0][1])
    thresholds = tuple((int(c), float(s)) for c, s in th[2:])
    alphas = {int(c): MiesmParams(float(a1), float(a2)) for c, a1, a2 in sections["alphas"][1:]}
    tables = {}
    for name, rows in sections.items():
        if name.startswith("mi "):
            m = int(name.split()[1])
            tables[m] = MiTable(m, tuple(float(r[0]) for r in rows[1:]),
                                tuple(float(r[1]) for r in rows[1:]))
    pts: dict[int, list[BlerPoint]] = {}
    for c, s, b, n, e in sections["curves"][1:]:
        pts.setdefault(int(c), []).append(BlerPoint(float(s), float(b), int(n), int(e)))
    curves = tuple(BlerCurve(c, tuple(p)) for c, p in sorted(pts.items()))
    return Lut(SnrCqiMap(thresholds, target), tables, alphas, curves, seed, cfg_digest)
