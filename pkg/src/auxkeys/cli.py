"""Command line scenario runner.

Every command reads an optional ``key = value`` config, runs, and writes CSV
files plus a ``manifest.json`` into ``--out``.  Outputs are staged under
temporary names and renamed only once the whole command has succeeded.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
import tempfile
import time
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import __version__, analysis, crypto, netsim
from .config import ConfigError, ScenarioConfig, load_config, parse_config
from .netsim import Simulation

_CAPTURE = 6


def _fmt(value: float) -> str:
    return f"{value:.6f}"


def _csv(header: Sequence[str], rows) -> str:
    lines = [",".join(header)]
    lines.extend(",".join(str(v) for v in row) for row in rows)
    return "\n".join(lines) + "\n"


class Outputs:
    """Files staged for an all-or-nothing write into one directory."""

    def __init__(self, out_dir: Path):
        self.out_dir = out_dir
        self.files: dict[str, str] = {}

    def add(self, name: str, text: str) -> None:
        self.files[name] = text

    def commit(self, manifest: dict) -> None:
        self.out_dir.mkdir(parents=True, exist_ok=True)
        manifest["outputs"] = sorted(self.files)
        staged = dict(self.files)
        staged["manifest.json"] = json.dumps(manifest, indent=2, sort_keys=True) + "\n"
        temps = []
        try:
            for name, text in staged.items():
                fd, tmp = tempfile.mkstemp(prefix=f".{name}.", dir=self.out_dir)
                temps.append((tmp, self.out_dir / name))
                with os.fdopen(fd, "w", newline="\n") as fh:
                    fh.write(text)
        except BaseException:
            for tmp, _ in temps:
                os.unlink(tmp)
            raise
        for tmp, final in temps:
            os.replace(tmp, final)


def _config_from_args(args) -> ScenarioConfig:
    overrides = {"seed": args.seed, "boundary": args.boundary}
    if args.config:
        try:
            return load_config(args.config, **overrides)
        except OSError as exc:
            raise ConfigError(f"cannot read config: {exc.strerror}", key=None) from None
    return parse_config("", **overrides)


def _int_list(text: str, key: str) -> list[int]:
    """Comma list whose items are integers or inclusive ranges ``start:stop:step``."""
    values = []
    try:
        for item in filter(None, text.split(",")):
            if ":" in item:
                start, stop, step = (int(part) for part in item.split(":"))
                if step <= 0:
                    raise ValueError
                values.extend(range(start, stop + 1, step))
            else:
                values.append(int(item))
    except ValueError:
        raise ConfigError(f"cannot parse {text!r} as integers or start:stop:step", key=key) from None
    return values


def _float_list(text: str, key: str) -> list[float]:
    try:
        return [float(part) for part in text.split(",") if part]
    except ValueError:
        raise ConfigError(f"cannot parse {text!r} as numbers", key=key) from None


def _curve_rows(points) -> list[tuple]:
    return [(p.figure, p.series, _fmt(p.x), _fmt(p.y), p.kind) for p in points]


CURVE_HEADER = ("figure", "series", "x", "y", "kind")


def cmd_analytic(args, config: ScenarioConfig, out: Outputs) -> None:
    d_values = _int_list(args.d_values, "d_values") if args.d_values else analysis.DEFAULT_D_VALUES
    ratios = _float_list(args.ratios, "ratios") if args.ratios else analysis.DEFAULT_RATIOS
    points = []
    for figure in ("fig1", "fig2"):
        points += analysis.sweep(figure, n=config.n, d_values=d_values, ratios=ratios)
    out.add("curves.csv", _csv(CURVE_HEADER, _curve_rows(points)))


ROUND_HEADER = ("trial", "round", "attempted", "direct_ok", "supplemental_ok", "failed", "empirical_p")


def cmd_simulate(args, config: ScenarioConfig, out: Outputs) -> None:
    full = args.transcript or args.full_protocol
    per_trial = []
    transcripts: dict[int, list[str]] = {}
    if full:
        for trial in range(config.trials):
            sim = Simulation(config, trial, full_protocol=True, record_transcript=args.transcript)
            reports = [sim.run_establishment_round()]
            for _ in range(config.mobility_rounds):
                sim.move()
                reports.append(sim.run_establishment_round())
            per_trial.append(reports)
            transcripts[trial] = [entry.line() for entry in sim.transcript]
    else:
        per_trial = analysis.run_trials(config, jobs=args.jobs)

    rows = []
    for reports in per_trial:
        for r in reports:
            rows.append((r.trial, r.round, r.attempted, r.direct_ok, r.supplemental_ok, r.failed,
                         _fmt(analysis.empirical_p(r))))
    rows.sort(key=lambda row: (row[0], row[1]))
    out.add("rounds.csv", _csv(ROUND_HEADER, rows))

    analytic = analysis.analytic_p(analysis.ConnectivityParams(config.n, config.m, config.d))
    agg = []
    for rnd in range(config.mobility_rounds + 1):
        reports = [t[rnd] for t in per_trial]
        agg.append((
            rnd, len(reports),
            _fmt(np.mean([r.attempted for r in reports])),
            _fmt(np.mean([r.direct_ok for r in reports])),
            _fmt(np.mean([r.supplemental_ok for r in reports])),
            _fmt(np.mean([r.failed for r in reports])),
            _fmt(np.mean([analysis.empirical_p(r) for r in reports])),
            _fmt(analytic),
        ))
    out.add("aggregate.csv", _csv(
        ("round", "trials", "attempted", "direct_ok", "supplemental_ok", "failed", "empirical_p", "analytic_p"), agg))
    for trial, lines in transcripts.items() if args.transcript else ():
        out.add(f"transcript-{trial}.txt", "".join(line + "\n" for line in lines))


def cmd_resilience(args, config: ScenarioConfig, out: Outputs) -> None:
    captures = _int_list(args.captures, "captures") if args.captures else list(range(50, 501, 50))
    for c in captures:
        if not 0 <= c <= config.n:
            raise ConfigError(f"capture count {c} outside 0..n={config.n}", key="captures")
    totals = {c: [0, 0] for c in captures}
    for trial in range(config.trials):
        sim = Simulation(config, trial, full_protocol=True)
        sim.run_establishment_round()
        for c in captures:
            knowledge = analysis.capture_nodes(sim, c, crypto.stream(config.seed, trial, _CAPTURE, c))
            report = analysis.resilience(knowledge, sim)
            totals[c][0] += report.total_links
            totals[c][1] += report.compromised_links
    rows = []
    for c in captures:
        total, compromised = totals[c]
        rows.append((c, total, compromised, _fmt(compromised / total if total else 0.0)))
    out.add("resilience.csv", _csv(("c", "total_links", "compromised_links", "fraction"), rows))


def cmd_audit(args, config: ScenarioConfig, out: Outputs) -> None:
    sim = Simulation(config, 0, full_protocol=True)
    storage = analysis.storage_audit(sim)
    rows = []
    for role, nodes, counts in (
        ("regular", storage.regular_nodes, storage.regular_preloaded),
        ("auxiliary", storage.auxiliary_nodes, storage.auxiliary_preloaded),
    ):
        rows.append(("storage", "-", role, "nodes", nodes))
        rows.append(("storage", "-", role, "preloaded_min", min(counts) if counts else 0))
        rows.append(("storage", "-", role, "preloaded_max", max(counts) if counts else 0))
    ops = analysis.operation_audit(sim, samples=args.samples)
    for (case, role), seen in sorted(ops.items()):
        for op in analysis.OPERATIONS:
            values = sorted(seen[op])
            value = values[0] if len(values) == 1 else "|".join(map(str, values))
            rows.append(("operations", case, role, op, value))
    out.add("audit.csv", _csv(("section", "case", "role", "metric", "value"), rows))


def cmd_sweep(args, config: ScenarioConfig, out: Outputs) -> None:
    m_values = _int_list(args.m_values, "m_values") if args.m_values else analysis.FIGURE_M_VALUES
    for m in m_values:
        if m < 0:
            raise ConfigError(f"negative auxiliary count {m}", key="m")
    points = analysis.sweep(args.figure, m_values=m_values, base=config, jobs=args.jobs)
    out.add(f"{args.figure}.csv", _csv(CURVE_HEADER, _curve_rows(points)))


COMMANDS = {
    "analytic": cmd_analytic,
    "simulate": cmd_simulate,
    "resilience": cmd_resilience,
    "audit": cmd_audit,
    "sweep": cmd_sweep,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="scenario file with 'key = value' lines")
    common.add_argument("--seed", type=int, help="overrides the config seed")
    common.add_argument("--out", default=".", help="output directory (default: current)")
    common.add_argument("--boundary", choices=("torus", "bounded"), help="overrides the config boundary")

    parser = argparse.ArgumentParser(prog="auxkeys", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("analytic", parents=[common], help="closed-form curves fig1 and fig2")
    p.add_argument("--d-values", help="comma list of average degrees (default 20,40,60,80,100)")
    p.add_argument("--ratios", help="comma list of m/n values (default 0.01..0.10)")

    p = sub.add_parser("simulate", parents=[common], help="Monte-Carlo establishment rounds")
    p.add_argument("--transcript", action="store_true", help="also write every protocol message")
    p.add_argument("--full-protocol", action="store_true", help="run real key exchanges even without a transcript")
    p.add_argument("--jobs", type=int, default=1, help="worker processes for trials")

    p = sub.add_parser("resilience", parents=[common], help="node-capture experiment")
    p.add_argument("--captures", help="capture counts, comma list of integers or start:stop:step ranges (default 50:500:50)")

    p = sub.add_parser("audit", parents=[common], help="storage and per-handshake operation counts")
    p.add_argument("--samples", type=int, default=100, help="handshakes sampled per case")

    p = sub.add_parser("sweep", parents=[common], help="simulated curves fig3 and fig4")
    p.add_argument("--figure", choices=("fig3", "fig4"), default="fig3")
    p.add_argument("--m-values", help="auxiliary counts (default 50:500:50)")
    p.add_argument("--jobs", type=int, default=1, help="worker processes for trials")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    started = time.perf_counter()
    try:
        config = _config_from_args(args)
        out = Outputs(Path(args.out))
        COMMANDS[args.command](args, config, out)
    except (ConfigError, analysis.InvalidParam, netsim.InvalidParam) as exc:
        print(f"auxkeys {args.command}: error: {exc}", file=sys.stderr)
        return 2
    out.commit({
        "command": args.command,
        "argv": list(argv) if argv is not None else sys.argv[1:],
        "config": dataclasses.asdict(config),
        "seed": config.seed,
        "version": __version__,
        "duration_s": round(time.perf_counter() - started, 3),
    })
    return 0


if __name__ == "__main__":
    sys.exit(main())
