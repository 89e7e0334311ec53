"""Command-line front end: ``dlsim bler | map-cqi | simulate | cdf``.

Every stage reads and writes plain files so the expensive link-level sweep
can be cached and reused. Each output directory receives a ``manifest.json``
recording the tool version, seeds, digests and file paths of the run.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import datetime as _dt
import hashlib
import json
import logging
import os
import re
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .abstraction import DEFAULT_TARGET_BLER, build_lut, lut_load, lut_save
from .linksim import LinkSimConfig, read_curves_csv, run_bler_many, write_curves_csv
from .numerology import cqi_entry, cqi_table
from .sysim import (SCHEDULERS, SysConfig, cdf_readout, jain_index, load_config, run_drops,
                    throughput_cdf)
from .turbo import TurboConfig

log = logging.getLogger("dlsim")

CONFIG_PATH_ENV = "DLSIM_CONFIG_PATH"
MANIFEST = "manifest.json"
READOUT_POINTS = (50, 95, 100)
_PER_UE = re.compile(r"^per_ue_(\w+)\.csv$")


class CliError(Exception):
    """Runtime failure reported to the user with exit status 1."""


# ---------------------------------------------------------------------------
# helpers


def _cqi_arg(text: str) -> tuple[int, ...]:
    if text.strip().lower() == "all":
        return tuple(e.cqi_index for e in cqi_table())
    out = []
    for tok in text.split(","):
        try:
            i = int(tok)
        except ValueError:
            raise argparse.ArgumentTypeError(f"invalid CQI {tok!r}; use 1..15 or 'all'") from None
        if not 1 <= i <= len(cqi_table()):
            raise argparse.ArgumentTypeError(f"CQI {i} out of range; use 1..15 or 'all'")
        out.append(i)
    return tuple(sorted(set(out)))


def _sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def _digest(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()


def _ensure_dir(path: Path) -> Path:
    try:
        path.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise CliError(f"cannot create output directory {path}: {exc}") from exc
    return path


def write_manifest(out_dir: Path, command: str, config: dict, seeds, inputs, outputs,
                   started: str) -> Path:
    """Write (or replace) the single manifest of ``out_dir``."""
    doc = {
        "tool": "dlsim",
        "version": __version__,
        "command": command,
        "config": config,
        "config_digest": _digest(config),
        "seeds": list(seeds),
        "inputs": {str(p): _sha256_file(p) for p in inputs},
        "outputs": {str(p): _sha256_file(p) for p in outputs},
        "started": started,
        "finished": _now(),
    }
    path = out_dir / MANIFEST
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return path


def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


def resolve_config(name: str | None) -> Path | None:
    """Find a config file, falling back to the directories in ``$DLSIM_CONFIG_PATH``."""
    if name is None:
        return None
    p = Path(name)
    if p.is_file():
        return p
    if not p.is_absolute():
        for d in os.environ.get(CONFIG_PATH_ENV, "").split(os.pathsep):
            if d and (Path(d) / p).is_file():
                return Path(d) / p
    raise CliError(f"config file {name!r} not found (searched cwd and ${CONFIG_PATH_ENV})")


# ---------------------------------------------------------------------------
# result files


def write_per_ue(path: Path, results) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["drop", "ue", "throughput_bps"])
        for d, r in enumerate(results):
            for u, x in enumerate(r.throughput_bps):
                w.writerow([d, u, repr(float(x))])


def read_per_ue(path: Path) -> list[np.ndarray]:
    """Per-drop throughput vectors from a per-UE CSV."""
    drops: dict[int, dict[int, float]] = {}
    with open(path, newline="") as fh:
        rd = csv.DictReader(fh)
        if rd.fieldnames != ["drop", "ue", "throughput_bps"]:
            raise CliError(f"{path}: unexpected header {rd.fieldnames}")
        for row in rd:
            drops.setdefault(int(row["drop"]), {})[int(row["ue"])] = float(row["throughput_bps"])
    return [np.array([v[u] for u in sorted(v)]) for _, v in sorted(drops.items())]


class _Pooled:
    """Minimal stand-in for a drop result when pooling from CSV."""

    def __init__(self, throughput_bps):
        self.throughput_bps = throughput_bps


def write_cdf(path: Path, drops) -> None:
    x, f = throughput_cdf([_Pooled(t) for t in drops])
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["throughput_bps", "cdf"])
        for a, b in zip(x, f):
            w.writerow([repr(float(a)), repr(float(b))])


def write_summary(out_dir: Path, pooled: dict[str, list[np.ndarray]]) -> list[Path]:
    """``summary.csv`` (three CDF readouts per scheduler) and ``fairness.csv``."""
    summary = out_dir / "summary.csv"
    with open(summary, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["scheduler", "percentile", "throughput_bps"])
        for s in sorted(pooled):
            rd = cdf_readout([_Pooled(t) for t in pooled[s]], READOUT_POINTS)
            for p in READOUT_POINTS:
                w.writerow([s, p, repr(rd[p])])
    fair = out_dir / "fairness.csv"
    with open(fair, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["scheduler", "drop", "cell_throughput_bps", "jain_index"])
        for s in sorted(pooled):
            for d, t in enumerate(pooled[s]):
                w.writerow([s, d, repr(float(t.sum())), repr(jain_index(t))])
    return [summary, fair]


def collect_results(dirs) -> dict[str, list[np.ndarray]]:
    pooled: dict[str, list[np.ndarray]] = {}
    for d in dirs:
        d = Path(d)
        if not d.is_dir():
            raise CliError(f"results directory {d} does not exist")
        for f in sorted(d.iterdir()):
            m = _PER_UE.match(f.name)
            if m:
                pooled.setdefault(m.group(1), []).extend(read_per_ue(f))
    if not pooled:
        raise CliError("no per_ue_<scheduler>.csv files found")
    return pooled


# ---------------------------------------------------------------------------
# commands


def cmd_bler(args) -> int:
    started = _now()
    out = Path(args.out)
    _ensure_dir(out.parent if str(out.parent) else Path("."))
    snr = tuple(float(x) for x in np.round(np.arange(args.snr_min, args.snr_max + 1e-9,
                                                     args.snr_step), 6))
    cfg = LinkSimConfig(snr_grid_db=snr, min_block_errors=args.min_errors,
                        max_blocks=args.max_blocks, rng_seed=args.seed,
                        turbo=TurboConfig(block_length_k=args.block_length),
                        workers=args.workers)
    curves = run_bler_many([cqi_entry(i) for i in args.cqi], cfg)
    try:
        write_curves_csv(out, curves)
    except OSError as exc:
        raise CliError(f"cannot write {out}: {exc}") from exc
    outputs = [out]
    if args.figures:
        from .plots import plot_bler_curves
        outputs.append(plot_bler_curves(curves, out.with_suffix(".png")))
    config = {"cqi": list(args.cqi), "snr_grid_db": list(snr), "min_block_errors": args.min_errors,
              "max_blocks": args.max_blocks, "block_length_k": args.block_length}
    write_manifest(out.parent, "bler", config, [args.seed], [], outputs, started)
    return 0


def _curves_seed(curves_path: Path):
    man = curves_path.parent / MANIFEST
    try:
        seeds = json.loads(man.read_text()).get("seeds", [])
    except (OSError, ValueError):
        return None
    return seeds[0] if len(seeds) == 1 else None


def cmd_map_cqi(args) -> int:
    started = _now()
    src = Path(args.curves)
    if not src.is_file():
        raise CliError(f"curves file {src} not found")
    try:
        curves = read_curves_csv(src)
    except (ValueError, KeyError) as exc:
        raise CliError(f"{src}: {exc}") from exc
    have = {c.cqi_index for c in curves}
    missing = [e.cqi_index for e in cqi_table() if e.cqi_index not in have]
    if missing:
        raise CliError("curves file is missing CQI " + ", ".join(map(str, missing)))
    try:
        lut = build_lut(curves, args.target_bler, seed=_curves_seed(src),
                        config_digest=_sha256_file(src))
    except ValueError as exc:
        raise CliError(str(exc)) from exc
    out = Path(args.out)
    _ensure_dir(out.parent if str(out.parent) else Path("."))
    lut_save(lut, out)
    write_manifest(out.parent, "map-cqi", {"target_bler": args.target_bler},
                   [] if lut.seed is None else [lut.seed], [src], [out], started)
    return 0


def cmd_simulate(args) -> int:
    started = _now()
    cfg_path = resolve_config(args.config)
    cfg = load_config(cfg_path) if cfg_path else SysConfig()
    over = {k: v for k, v in (("n_drops", args.drops), ("n_subframes", args.subframes),
                              ("seed", args.seed)) if v is not None}
    if over:
        cfg = dataclasses.replace(cfg, **over)
    lut_path = Path(args.lut)
    if not lut_path.is_file():
        raise CliError(f"LUT file {lut_path} not found")
    lut = lut_load(lut_path)
    out = _ensure_dir(Path(args.out))
    results = run_drops(cfg, args.scheduler, lut)
    per_ue = out / f"per_ue_{args.scheduler}.csv"
    write_per_ue(per_ue, results)
    drops = [r.throughput_bps for r in results]
    cdf = out / f"cdf_{args.scheduler}.csv"
    write_cdf(cdf, drops)
    outputs = [per_ue, cdf] + write_summary(out, collect_results([out]))
    config = {"scheduler": args.scheduler, "sys_config_digest": cfg.digest(),
              "lut_digest": _sha256_file(lut_path)}
    inputs = [lut_path] + ([cfg_path] if cfg_path else [])
    write_manifest(out, "simulate", config, [cfg.seed + d for d in range(cfg.n_drops)],
                   inputs, outputs, started)
    return 0


def cmd_cdf(args) -> int:
    started = _now()
    pooled = collect_results(args.results)
    out = _ensure_dir(Path(args.out))
    outputs = []
    for s, drops in sorted(pooled.items()):
        p = out / f"cdf_{s}.csv"
        write_cdf(p, drops)
        outputs.append(p)
    outputs += write_summary(out, pooled)
    if args.figures:
        from .plots import plot_throughput_cdfs
        outputs.append(plot_throughput_cdfs(pooled, out / "cdf.png"))
    inputs = [f for d in args.results for f in sorted(Path(d).iterdir()) if _PER_UE.match(f.name)]
    write_manifest(out, "cdf", {"schedulers": sorted(pooled)}, [], inputs, outputs, started)
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dlsim", description="LTE downlink link/system simulator")
    p.add_argument("--version", action="version", version=f"dlsim {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    b = sub.add_parser("bler", help="AWGN BLER curves per CQI")
    b.add_argument("--cqi", type=_cqi_arg, default=_cqi_arg("all"),
                   help="'all', one index 1..15, or a comma list")
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--out", required=True, help="curves CSV path")
    b.add_argument("--snr-min", type=float, default=-10.0)
    b.add_argument("--snr-max", type=float, default=22.0)
    b.add_argument("--snr-step", type=float, default=0.5)
    b.add_argument("--min-errors", type=int, default=50)
    b.add_argument("--max-blocks", type=int, default=20000)
    b.add_argument("--block-length", type=int, default=1024)
    b.add_argument("--workers", type=int, default=1)
    b.add_argument("--figures", action="store_true", help="also render a PNG (needs matplotlib)")
    b.set_defaults(func=cmd_bler)

    m = sub.add_parser("map-cqi", help="SNR-CQI thresholds and LUT from BLER curves")
    m.add_argument("--curves", required=True)
    m.add_argument("--target-bler", type=float, default=DEFAULT_TARGET_BLER)
    m.add_argument("--out", required=True, help="LUT path")
    m.set_defaults(func=cmd_map_cqi)

    s = sub.add_parser("simulate", help="multi-cell system-level drops")
    s.add_argument("--config", help=f"INI config; relative names also searched in ${CONFIG_PATH_ENV}")
    s.add_argument("--scheduler", required=True, choices=SCHEDULERS)
    s.add_argument("--lut", required=True)
    s.add_argument("--out", required=True, help="results directory")
    s.add_argument("--seed", type=int, help="base seed (drop d uses seed + d)")
    s.add_argument("--drops", type=int)
    s.add_argument("--subframes", type=int)
    s.set_defaults(func=cmd_simulate)

    c = sub.add_parser("cdf", help="pool per-UE results into CDFs and a summary")
    c.add_argument("--results", nargs="+", required=True, help="results directories")
    c.add_argument("--out", required=True)
    c.add_argument("--figures", action="store_true", help="also render a PNG (needs matplotlib)")
    c.set_defaults(func=cmd_cdf)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except CliError as exc:
        print(f"dlsim: error: {exc}", file=sys.stderr)
        return 1
    except ValueError as exc:
        print(f"dlsim: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
