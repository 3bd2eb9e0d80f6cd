"""Command-line front end: run presets or config files, sweep, list, validate.

Config files are sectioned ``key = value`` text::

    [system]
    theta_d = 0.4

    [classes]            # repeated once per class, in order
    r1 = 0.05
    r2 = 0

    [profile.1]          # 1-based, matching the [classes] order
    kind = clipped_gaussian
    mean = 4

    [controller]
    p_grid_size = 101

    [sim]
    t_end = 250
    seed = 0

Overrides given with ``--set`` use flat key paths: ``system.theta_d``,
``controller.nu_grid_size``, ``sim.t_end``, ``class.1.r1``, ``profile.2.mean``.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import os
import sys
import tempfile
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from fairflow.controller import POLICIES, ControllerConfig
from fairflow.model import ClassParams, HiddenState, SystemParams
from fairflow.sim import NOISE_CV, DemandProfile, Scenario, SimulationFault, Sweep, TraceRow, presets, run

log = logging.getLogger("fairflow")

EXIT_OK, EXIT_ERROR, EXIT_FAULT = 0, 1, 2
FORMATS = ("csv", "json")
SWEEPS = ("theta_sweep", "k1_sweep")
SWEEP_KEYS = {"theta_d": "system.theta_d", "K1": "profile.1.mean"}


class ConfigError(ValueError):
    """Bad config text or an invalid parameter value."""


# ---------------------------------------------------------------- config


def _coerce(raw: str, like, key: str):
    try:
        if isinstance(like, bool):
            if raw.lower() not in ("true", "false", "1", "0"):
                raise ValueError(raw)
            return raw.lower() in ("true", "1")
        if isinstance(like, int):
            return int(raw)
        if isinstance(like, float):
            return float(raw)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {type(like).__name__}") from None
    return raw


def _floats(raw: str, key: str) -> tuple[float, ...]:
    try:
        return tuple(float(v) for v in raw.replace(",", " ").split())
    except ValueError:
        raise ConfigError(f"{key}: expected a list of numbers, got {raw!r}") from None


def _breakpoints(raw: str, key: str) -> tuple[tuple[float, float], ...]:
    out = []
    for item in raw.split(","):
        item = item.strip()
        if not item:
            continue
        try:
            t, m = item.split(":")
            out.append((float(t), float(m)))
        except ValueError:
            raise ConfigError(f"{key}: breakpoints must look like 't:mean, t:mean', got {item!r}") from None
    return tuple(out)


def _field_defaults(cls) -> dict:
    return {f.name: f.default for f in fields(cls)}


def _checked(build, prefix: str):
    """Run a constructor, tagging invariant failures with their key path."""
    try:
        return build()
    except ConfigError:
        raise
    except ValueError as exc:
        msg = str(exc)
        name = msg.split()[0] if msg else ""
        raise ConfigError(f"{prefix}.{name}: {msg}" if name.isidentifier() else f"{prefix}: {msg}") from None


class _Builder:
    """Mutable, flat view of a Scenario so that config keys and overrides share one path."""

    def __init__(self, base: Scenario | None = None):
        base = base or Scenario((ClassParams(),), (DemandProfile(),))
        self.system = asdict(base.sp)
        self.controller = asdict(base.cfg)
        self.classes = [asdict(c) for c in base.classes]
        self.profiles = [self._profile_dict(p) for p in base.profiles]
        init = base.initial
        self.sim = {
            "t_end": base.t_end,
            "seed": base.seed,
            "name": base.name,
            "initial_x": None if init is None else tuple(float(v) for v in init.x),
            "initial_q": None if init is None else float(init.q),
            "initial_alpha": None if init is None else float(init.alpha),
        }

    @staticmethod
    def _profile_dict(p: DemandProfile) -> dict:
        return {"kind": p.kind, "mean": p.mean, "std": p.std, "breakpoints": p.breakpoints}

    def set(self, key: str, raw: str):
        parts = key.split(".")
        head = parts[0]
        if head in ("system", "controller") and len(parts) == 2:
            table = self.system if head == "system" else self.controller
            defaults = _field_defaults(SystemParams if head == "system" else ControllerConfig)
            if parts[1] not in defaults:
                raise ConfigError(f"unknown key {key!r}")
            table[parts[1]] = _coerce(raw, defaults[parts[1]], key)
        elif head == "sim" and len(parts) == 2:
            name = parts[1]
            if name == "t_end":
                self.sim[name] = _coerce(raw, 0.0, key)
            elif name == "seed":
                self.sim[name] = _coerce(raw, 0, key)
            elif name == "name":
                self.sim[name] = raw
            elif name == "initial_x":
                self.sim[name] = _floats(raw, key)
            elif name in ("initial_q", "initial_alpha"):
                self.sim[name] = _coerce(raw, 0.0, key)
            else:
                raise ConfigError(f"unknown key {key!r}")
        elif head in ("class", "classes") and len(parts) == 3:
            c = self._indexed(self.classes, parts[1], key, {"r1": 0.0, "r2": 0.0})
            if parts[2] not in ("r1", "r2"):
                raise ConfigError(f"unknown key {key!r}")
            c[parts[2]] = _coerce(raw, 0.0, key)
        elif head == "profile" and len(parts) == 3:
            p = self._indexed(self.profiles, parts[1], key, self.default_profile())
            self.set_profile(p, parts[2], raw, key)
        else:
            raise ConfigError(f"unknown key {key!r}")

    @staticmethod
    def default_profile() -> dict:
        return {"kind": "clipped_gaussian", "mean": 0.0, "std": None, "breakpoints": ()}

    @staticmethod
    def set_profile(p: dict, name: str, raw: str, key: str):
        if name == "kind":
            p["kind"] = raw
        elif name in ("mean", "std"):
            p[name] = _coerce(raw, 0.0, key)
        elif name == "breakpoints":
            p["breakpoints"] = _breakpoints(raw, key)
        else:
            raise ConfigError(f"unknown key {key!r}")

    @staticmethod
    def _indexed(items: list, idx: str, key: str, blank: dict) -> dict:
        try:
            i = int(idx)
        except ValueError:
            raise ConfigError(f"{key}: index must be an integer") from None
        if i < 1:
            raise ConfigError(f"{key}: indices start at 1")
        while len(items) < i:
            items.append(dict(blank))
        return items[i - 1]

    def build(self) -> Scenario:
        sp = _checked(lambda: SystemParams(**self.system), "system")
        cfg = _checked(lambda: ControllerConfig(**self.controller), "controller")
        classes = tuple(
            _checked(lambda c=c: ClassParams(**c), f"class.{i + 1}") for i, c in enumerate(self.classes)
        )
        profiles = []
        for i, p in enumerate(self.profiles):
            p = dict(p)
            if p["kind"] == "piecewise" and p["breakpoints"] and not p["mean"]:
                p["mean"] = p["breakpoints"][0][1]
            if p["std"] is None:
                p["std"] = 0.0 if p["kind"] == "constant" else NOISE_CV * p["mean"]
            profiles.append(_checked(lambda p=p: DemandProfile(**p), f"profile.{i + 1}"))
        sim = self.sim
        initial = None
        if sim["initial_x"] is not None or sim["initial_q"] is not None or sim["initial_alpha"] is not None:
            x = sim["initial_x"] if sim["initial_x"] is not None else (0.0,) * len(classes)
            initial = HiddenState(
                np.array(x, dtype=float),
                sim["initial_q"] if sim["initial_q"] is not None else 0.0,
                sim["initial_alpha"] if sim["initial_alpha"] is not None else 1.0,
            )
        return _checked(
            lambda: Scenario(
                classes, tuple(profiles), sp=sp, cfg=cfg, t_end=sim["t_end"], seed=sim["seed"],
                initial=initial, name=sim["name"],
            ),
            "sim",
        )


def parse_config_text(text: str, name: str = "custom") -> Scenario:
    b = _Builder()
    b.classes, b.profiles = [], []
    b.sim["name"] = name
    section = None
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].split(";", 1)[0].strip()
        if not line:
            continue
        if line.startswith("["):
            if not line.endswith("]"):
                raise ConfigError(f"line {lineno}: malformed section header {line!r}")
            section = line[1:-1].strip()
            if section == "classes":
                b.classes.append({"r1": 0.0, "r2": 0.0})
            elif section.startswith("profile."):
                b._indexed(b.profiles, section.split(".", 1)[1], f"line {lineno}", b.default_profile())
            elif section not in ("system", "controller", "sim"):
                raise ConfigError(f"line {lineno}: unknown section [{section}]")
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        if section is None:
            raise ConfigError(f"line {lineno}: key outside any section")
        key, raw = (s.strip() for s in line.split("=", 1))
        path = f"class.{len(b.classes)}.{key}" if section == "classes" else f"{section}.{key}"
        try:
            b.set(path, raw)
        except ConfigError as exc:
            raise ConfigError(f"line {lineno}: {exc}") from None
    if not b.classes:
        raise ConfigError("config defines no [classes] section")
    if len(b.profiles) > len(b.classes):
        raise ConfigError(f"{len(b.profiles)} profiles for {len(b.classes)} classes")
    while len(b.profiles) < len(b.classes):
        b.profiles.append(b.default_profile())
    return b.build()


def parse_config(path: str | os.PathLike) -> Scenario:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    return parse_config_text(text, name=path.stem)


def apply_overrides(scn: Scenario, overrides: Sequence[str]) -> Scenario:
    if not overrides:
        return scn
    b = _Builder(scn)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, raw = (s.strip() for s in item.split("=", 1))
        b.set(key, raw)
    if len(b.profiles) != len(b.classes):
        raise ConfigError(f"{len(b.profiles)} profiles for {len(b.classes)} classes")
    return b.build()


# ---------------------------------------------------------------- traces and summaries


@dataclass(frozen=True)
class RunSummary:
    revenue: float
    peak_I: float
    frac_I_over: float
    peak_q: float
    frac_q_over: float
    fallbacks: int
    mean_price: float
    mean_alpha: float


def summarize(rows: Sequence[TraceRow], sp: SystemParams) -> RunSummary:
    """Summary statistics of a trace; fractions are over recorded rows.

    Fallbacks count decision windows whose rows carry ``feasible = false``.
    """
    if not rows:
        return RunSummary(0.0, 0.0, 0.0, 0.0, 0.0, 0, math.nan, math.nan)
    I = np.array([r.I for r in rows])
    q = np.array([r.q for r in rows])
    n = sp.steps_per_window
    infeasible = np.array([not r.feasible for r in rows[1:]], dtype=bool)
    windows = [infeasible[i:i + n].any() for i in range(0, len(infeasible), n)]
    if not rows[1:] and not rows[0].feasible:
        windows = [True]
    return RunSummary(
        revenue=float(rows[-1].revenue),
        peak_I=float(I.max()),
        frac_I_over=float(np.mean(I > sp.theta_d)),
        peak_q=float(q.max()),
        frac_q_over=float(np.mean(q > sp.q_max)),
        fallbacks=int(sum(windows)),
        mean_price=float(np.mean([r.p for r in rows])),
        mean_alpha=float(np.mean([r.alpha for r in rows])),
    )


def trace_header(n_classes: int, bounds: bool) -> list[str]:
    idx = range(1, n_classes + 1)
    cols = ["t", *(f"K_{i}" for i in idx), *(f"x_{i}" for i in idx)]
    cols += ["z", "q", "alpha", "p", "nu", "mu", "d", "I", "revenue_rate", "revenue"]
    cols += ["eta1_star", "eta2_star", "feasible"]
    if bounds:
        for name in ("x_lo", "x_hi", "x_est"):
            cols += [f"{name}_{i}" for i in idx]
    return cols


def _num(v: float) -> str:
    return repr(float(v))


def trace_records(rows: Sequence[TraceRow]) -> list[list[str]]:
    out = []
    for r in rows:
        rec = [_num(r.t), *map(_num, r.K), *map(_num, r.x)]
        rec += [_num(v) for v in (r.z, r.q, r.alpha, r.p, r.nu, r.mu, r.d, r.I, r.revenue_rate, r.revenue)]
        rec += [_num(r.eta1_star), _num(r.eta2_star), "true" if r.feasible else "false"]
        if r.x_lo is not None:
            rec += [*map(_num, r.x_lo), *map(_num, r.x_hi), *map(_num, r.x_est)]
        out.append(rec)
    return out


def write_trace(fh, rows: Sequence[TraceRow]):
    n = len(rows[0].K) if rows else 0
    bounds = bool(rows) and rows[0].x_lo is not None
    w = csv.writer(fh, lineterminator="\r\n")
    w.writerow(trace_header(n, bounds))
    w.writerows(trace_records(rows))


def read_trace(path: str | os.PathLike) -> list[TraceRow]:
    """Parse a trace CSV back into rows."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        n = sum(1 for h in header if h.startswith("K_"))
        bounds = "x_lo_1" in header
        rows = []
        for rec in reader:
            v = [float(x) if x not in ("true", "false") else x == "true" for x in rec]
            t, K, x = v[0], tuple(v[1:1 + n]), tuple(v[1 + n:1 + 2 * n])
            rest = v[1 + 2 * n:]
            extra = {}
            if bounds:
                tail = rest[13:]
                extra = dict(x_lo=tuple(tail[:n]), x_hi=tuple(tail[n:2 * n]), x_est=tuple(tail[2 * n:3 * n]))
            rows.append(TraceRow(t, K, x, *rest[:12], bool(rest[12]), **extra))
        return rows


# ---------------------------------------------------------------- output


class OutputDir:
    """Collects output files and publishes them together, or not at all."""

    def __init__(self, path: str | os.PathLike):
        self.path = Path(path)
        self._pending: list[tuple[Path, Path]] = []

    def __enter__(self):
        try:
            self.path.mkdir(parents=True, exist_ok=True)
            fd, probe = tempfile.mkstemp(dir=self.path, prefix=".probe-")
            os.close(fd)
            os.unlink(probe)
        except OSError as exc:
            raise OSError(f"output directory {self.path} is not writable: {exc.strerror}") from None
        return self

    def open(self, name: str):
        fd, tmp = tempfile.mkstemp(dir=self.path, prefix=f".{name}-")
        self._pending.append((Path(tmp), self.path / name))
        return os.fdopen(fd, "w", newline="")

    def __exit__(self, exc_type, exc, tb):
        if exc_type is None:
            umask = os.umask(0)
            os.umask(umask)
            for tmp, final in self._pending:
                os.chmod(tmp, 0o666 & ~umask)
                os.replace(tmp, final)
        else:
            for tmp, _ in self._pending:
                tmp.unlink(missing_ok=True)
        return False


def _policies(args) -> list[str]:
    chosen = args.policy or list(POLICIES)
    if "all" in chosen:
        chosen = list(POLICIES)
    return list(dict.fromkeys(chosen))


def _formats(args) -> set[str]:
    fmts = set()
    for item in args.format or ["csv,json"]:
        for f in item.split(","):
            f = f.strip()
            if f not in FORMATS:
                raise ConfigError(f"unknown format {f!r}; choose from {FORMATS}")
            fmts.add(f)
    return fmts


def _run_policy(scn: Scenario, policy: str) -> tuple[list[TraceRow], str | None]:
    try:
        return run(scn.with_policy(policy)), None
    except SimulationFault as exc:
        log.error("%s: %s", policy, exc)
        return exc.trace, str(exc)


def _print_table(header: list[str], rows: list[list]):
    w = csv.writer(sys.stdout, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)


def _summary_cells(s: RunSummary) -> list:
    return [repr(v) if isinstance(v, float) else v for v in asdict(s).values()]


def _scenario_from_args(args) -> Scenario:
    if bool(args.preset) == bool(args.config):
        raise ConfigError("give exactly one of --preset or --config")
    if args.config:
        scn = parse_config(args.config)
    else:
        catalogue = presets()
        if args.preset not in catalogue:
            raise ConfigError(f"unknown preset {args.preset!r}; see 'fairflow presets'")
        scn = catalogue[args.preset]
        if isinstance(scn, Sweep):
            raise ConfigError(f"{args.preset} is a sweep; use 'fairflow sweep'")
    scn = apply_overrides(scn, args.set)
    if args.seed is not None:
        scn = replace(scn, seed=args.seed)
    return scn


def cmd_run(args) -> int:
    scn = _scenario_from_args(args)
    policies = _policies(args)
    fmts = _formats(args)
    results = {}
    with OutputDir(args.out) as out:
        for policy in policies:
            log.info("running %s / %s (seed %d)", scn.name, policy, scn.seed)
            rows, fault = _run_policy(scn, policy)
            results[policy] = (summarize(rows, scn.sp), fault)
            if "csv" in fmts:
                with out.open(f"{policy}_trace.csv") as fh:
                    write_trace(fh, rows)
        if "json" in fmts:
            doc = {}
            for policy, (summary, fault) in results.items():
                doc[policy] = asdict(summary)
                if fault:
                    doc[policy]["fault"] = fault
            with out.open("summary.json") as fh:
                json.dump(doc, fh, indent=2, allow_nan=True)
                fh.write("\n")
    _print_table(
        ["policy", *(f.name for f in fields(RunSummary))],
        [[policy, *_summary_cells(s)] for policy, (s, _) in results.items()],
    )
    return EXIT_FAULT if any(f for _, f in results.values()) else EXIT_OK


def cmd_sweep(args) -> int:
    catalogue = presets()
    if args.preset not in SWEEPS:
        raise ConfigError(f"sweep preset must be one of {SWEEPS}")
    sweep = catalogue[args.preset]
    swept = SWEEP_KEYS[sweep.param]
    for item in args.set or []:
        if item.split("=", 1)[0].strip() == swept:
            raise ConfigError(f"{swept} is the swept parameter and cannot be overridden")
    policies = _policies(args)
    fmts = _formats(args)
    names = [f.name for f in fields(RunSummary)]
    header = [sweep.param, *(f"{p}_{n}" for p in policies for n in names)]
    table, doc, faulted = [], [], False
    with OutputDir(args.out) as out:
        for value, scn in sweep:
            scn = apply_overrides(scn, args.set)
            if args.seed is not None:
                scn = replace(scn, seed=args.seed)
            row, entry = [repr(float(value))], {sweep.param: value}
            for policy in policies:
                log.info("running %s / %s", scn.name, policy)
                rows, fault = _run_policy(scn, policy)
                faulted |= fault is not None
                s = summarize(rows, scn.sp)
                row += _summary_cells(s)
                entry[policy] = asdict(s) | ({"fault": fault} if fault else {})
            table.append(row)
            doc.append(entry)
        with out.open("sweep_summary.csv") as fh:
            w = csv.writer(fh, lineterminator="\r\n")
            w.writerow(header)
            w.writerows(table)
        if "json" in fmts:
            with out.open("sweep_summary.json") as fh:
                json.dump({"sweep": sweep.name, "param": sweep.param, "points": doc}, fh, indent=2)
                fh.write("\n")
    _print_table(header, table)
    return EXIT_FAULT if faulted else EXIT_OK


def cmd_presets(args) -> int:
    rows = []
    for name, item in presets().items():
        if isinstance(item, Sweep):
            desc = f"sweep over {item.param} = {', '.join(f'{v:g}' for v in item.values)}"
            scn = item[0]
        else:
            scn = item
            desc = "means " + ", ".join(f"{p.mean:g}" for p in scn.profiles)
        rows.append([name, len(scn.classes), f"{scn.t_end:g}", desc])
    _print_table(["name", "classes", "t_end", "description"], rows)
    return EXIT_OK


def cmd_validate(args) -> int:
    scn = _scenario_from_args(args)
    print(f"ok: {scn.name}, {len(scn.classes)} classes, t_end={scn.t_end:g}, seed={scn.seed}, "
          f"theta_d={scn.sp.theta_d:g}, policy={scn.cfg.policy}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fairflow", description="Fair dynamic pricing and admission control.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, sweep=False):
        if sweep:
            p.add_argument("--preset", required=True, choices=SWEEPS)
        else:
            p.add_argument("--preset", help="named preset scenario")
            p.add_argument("--config", help="scenario config file")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a parameter")
        p.add_argument("--seed", type=int, help="random seed for arrivals")

    def outputs(p):
        p.add_argument("--policy", action="append", choices=[*POLICIES, "all"],
                       help="policy to run (repeatable; default all)")
        p.add_argument("--out", default=os.environ.get("FAIRFLOW_OUT", "fairflow_out"),
                       help="output directory (default $FAIRFLOW_OUT or ./fairflow_out)")
        p.add_argument("--format", action="append", help="comma list from csv,json (default both)")

    p = sub.add_parser("run", help="run one scenario under one or more policies")
    common(p)
    outputs(p)
    p.set_defaults(func=cmd_run)
    p = sub.add_parser("sweep", help="run a parameter sweep preset")
    common(p, sweep=True)
    outputs(p)
    p.set_defaults(func=cmd_sweep)
    p = sub.add_parser("presets", help="list preset scenarios")
    p.set_defaults(func=cmd_presets)
    p = sub.add_parser("validate", help="check a config or preset with overrides")
    common(p)
    p.set_defaults(func=cmd_validate)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, OSError) as exc:
        print(f"fairflow: error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
