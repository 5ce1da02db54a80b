"""Command-line experiment runner.

    feexd run --config c.json --out runs/a [--seed N] [--strategy S]
    feexd compare runs/a runs/b
    feexd partition-inspect --config c.json
    feexd verify [--suite all|qp|greedy|kd|grad]
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from pathlib import Path

from .config import ConfigError, ExperimentConfig, load_config, save_config
from .data import dirichlet_partition
from .een_model import save_checkpoint
from .inference import csv_header
from .orchestrator import RunHistory, StrategyKind, backbone_size, build_dataset, exit_size, run_strategy
from .verify import SUITES, run_suites

log = logging.getLogger("feexd")

METRICS_FILE = "metrics.csv"
ROUNDS_FILE = "rounds.jsonl"
CONFIG_FILE = "config.json"
SUMMARY_FILE = "summary.json"
DATA_COLUMNS = ("seed", "n_clients", "alpha", "num_classes", "per_class", "class_sep", "m_exits")


class RunDirError(ValueError):
    pass


def run_experiment(config: ExperimentConfig, out_dir: str | Path) -> int:
    """Train one strategy end to end and write its reports under ``out_dir``."""
    history = run_strategy(config.strategy, config)
    write_reports(history, config, out_dir)
    return 0


def write_reports(history: RunHistory, config: ExperimentConfig, out_dir: str | Path) -> Path:
    """Metrics CSV, per-round JSON lines, config, summary and per-client checkpoints."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_config(config, out / CONFIG_FILE)
    with open(out / ROUNDS_FILE, "w") as fh:
        for record in history.rounds:
            fh.write(json.dumps(record, sort_keys=True) + "\n")

    fed = history.federation
    with open(out / METRICS_FILE, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(csv_header(fed.m))
        for t, report in history.metrics:
            writer.writerow(report.csv_row(history.strategy.value, t))

    ckpt_dir = out / "checkpoints"
    ckpt_dir.mkdir(exist_ok=True)
    for c in fed.clients:
        save_checkpoint(fed.deployed_model(c.client_id), ckpt_dir / f"client_{c.client_id}",
                        extra={"client_id": c.client_id, "strategy": history.strategy.value,
                               "round": fed.server.round})

    ledger = fed.server.ledger
    phi, head = backbone_size(fed.arch), exit_size(fed.arch, fed.m)
    summary = {
        "strategy": history.strategy.value,
        "rounds": fed.server.round,
        "comm_total_up": ledger.total_up,
        "comm_total_down": ledger.total_down,
        "backbone_params": phi,
        "final_exit_params": head,
        # extra traffic of sharing the final exit, relative to backbone-only and to the full upload
        "teacher_overhead_vs_backbone": head / phi,
        "teacher_overhead_share": head / (phi + head),
    }
    (out / SUMMARY_FILE).write_text(json.dumps(summary, indent=2, sort_keys=True))
    log.info("wrote %s", out)
    return out


def _read_run(d: Path) -> tuple[dict, ExperimentConfig]:
    if not d.is_dir():
        raise RunDirError(f"{d}: not a run directory")
    try:
        config = load_config(d / CONFIG_FILE)
        with open(d / METRICS_FILE, newline="") as fh:
            rows = list(csv.DictReader(fh))
    except (OSError, ValueError) as exc:
        raise RunDirError(f"{d}: malformed run directory ({exc})") from exc
    if not rows:
        raise RunDirError(f"{d}: metrics file has no data rows")
    return rows[-1], config


def compare_report(dirs) -> tuple[list[str], list[list]]:
    """One row per run: the run's last metrics row plus its data-side settings."""
    header, rows = None, []
    for d in map(Path, dirs):
        last, config = _read_run(d)
        cols = list(last)
        if header is None:
            header = ["run", *DATA_COLUMNS, *cols]
        elif header[1 + len(DATA_COLUMNS):] != cols:
            raise RunDirError(f"{d}: metrics columns differ from the first run")
        data = {"seed": config.seed, "n_clients": config.n_clients, "alpha": config.alpha,
                "num_classes": config.data.num_classes, "per_class": config.data.per_class,
                "class_sep": config.data.class_sep, "m_exits": config.m_exits}
        rows.append([str(d), *(data[k] for k in DATA_COLUMNS), *(last[c] for c in cols)])
    if header is None:
        raise RunDirError("no run directories given")
    return header, rows


def partition_table(config: ExperimentConfig) -> tuple[list[str], list[list]]:
    ds = build_dataset(config)
    parts = dirichlet_partition(ds, config.n_clients, config.alpha, config.data.min_per_client,
                                seed=config.seed + 1)
    C = ds.num_classes
    header = ["client_id", "n_train", "n_test", "p"] + [f"label_{c}" for c in range(C)]
    rows = []
    for p in parts:
        hist = p.train.histogram() + p.test.histogram()
        rows.append([p.client_id, len(p.train), len(p.test), p.p, *(int(v) for v in hist)])
    return header, rows


def _csv_text(header, rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    return buf.getvalue()


def _load(path) -> ExperimentConfig:
    return ExperimentConfig() if path is None else load_config(path)


def _cmd_run(args) -> int:
    config = _load(args.config)
    changes = {}
    if args.seed is not None:
        changes["seed"] = args.seed
    if args.strategy is not None:
        changes["strategy"] = StrategyKind.parse(args.strategy).value
    if changes:
        config = config.replace(**changes)
    return run_experiment(config, args.out)


def _cmd_compare(args) -> int:
    header, rows = compare_report(args.dirs)
    text = _csv_text(header, rows)
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return 0


def _cmd_partition(args) -> int:
    text = _csv_text(*partition_table(_load(args.config)))
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return 0


def _cmd_verify(args) -> int:
    names = list(SUITES) if args.suite == "all" else [args.suite]
    results = run_suites(names)
    for r in results:
        print(r.line())
    return 0 if all(r.passed for r in results) else 1


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    parser = argparse.ArgumentParser(prog="feexd", description="Personalized federated early-exit simulator")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", parents=[common], help="train one strategy and write reports")
    p.add_argument("--config", help="JSON config (defaults if omitted)")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int)
    p.add_argument("--strategy", help="one of: " + ", ".join(s.value for s in StrategyKind))
    p.set_defaults(func=_cmd_run)

    p = sub.add_parser("compare", parents=[common], help="final-round metrics of several runs as one CSV")
    p.add_argument("dirs", nargs="+")
    p.add_argument("--out")
    p.set_defaults(func=_cmd_compare)

    p = sub.add_parser("partition-inspect", parents=[common], help="per-client label histograms as CSV")
    p.add_argument("--config")
    p.add_argument("--out")
    p.set_defaults(func=_cmd_partition)

    p = sub.add_parser("verify", parents=[common], help="run the oracle and property suites")
    p.add_argument("--suite", choices=["all", *SUITES], default="all")
    p.set_defaults(func=_cmd_verify)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, RunDirError, ValueError, OSError) as exc:
        print(f"feexd: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
