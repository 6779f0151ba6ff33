"""Command line: ``signgame run | sweep | report``.

Exit codes are stable; see ``EXIT_CODES`` and the README table.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor, as_completed
from dataclasses import dataclass
from itertools import product
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

from .core import AgreementMetric, Condition, ConfigError, GameConfig, validate_config
from .engine import RunLog, read_runlog, run_game
from .metrics import DEFAULT_THRESHOLDS, agreement_curve, aggregate_cells, table1_rows, tokens_table

log = logging.getLogger("signgame")

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_UNREADABLE = 3
EXIT_ABORTED = 4
EXIT_SWEEP_FAILURES = 5
EXIT_EMPTY_LOG_DIR = 6

# One exit code per named validation error.
VALIDATION_EXIT_CODES = {
    "unknown-field": 10,
    "missing-field": 11,
    "n-too-small": 12,
    "lexicon-too-small": 13,
    "rounds-too-small": 14,
    "k-negative": 15,
    "alpha-out-of-range": 16,
    "nl-requires-k0": 17,
    "memory-requires-k1": 18,
    "odd-n-full-matching": 19,
    "seed-out-of-range": 20,
    "roster-size-mismatch": 21,
    "bad-roster-entry": 22,
    "bad-mock-params": 23,
    "script-out-of-lexicon": 24,
    "unknown-endpoint": 25,
    "bad-endpoint": 26,
    "missing-template": 27,
    "unknown-condition": 28,
    "unknown-pairing-mode": 29,
    "unknown-adoption-mode": 30,
    "unknown-fallback-mode": 31,
    "unknown-agreement-metric": 32,
    "unknown-token-accounting": 33,
    "bad-sweep-spec": 34,
    "lexicon-duplicate-label": 35,
    "lexicon-bad-label": 36,
}
EXIT_CONFIG_OTHER = 39

EXIT_CODES = {
    "ok": EXIT_OK,
    "usage": EXIT_USAGE,
    "unreadable": EXIT_UNREADABLE,
    "aborted": EXIT_ABORTED,
    "sweep-failures": EXIT_SWEEP_FAILURES,
    "empty-log-dir": EXIT_EMPTY_LOG_DIR,
    **VALIDATION_EXIT_CODES,
    "config-other": EXIT_CONFIG_OTHER,
}


class CliError(Exception):
    def __init__(self, code: int, message: str):
        self.code = code
        super().__init__(message)


def _read_json(path: Path) -> Any:
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except (OSError, ValueError) as exc:
        raise CliError(EXIT_UNREADABLE, f"cannot read {path}: {exc}") from None


def _config_error(exc: ConfigError) -> CliError:
    return CliError(VALIDATION_EXIT_CODES.get(exc.code, EXIT_CONFIG_OTHER), str(exc))


def load_config(path) -> GameConfig:
    data = _read_json(Path(path))
    if not isinstance(data, dict):
        raise CliError(EXIT_UNREADABLE, f"{path}: expected a JSON object")
    try:
        return validate_config(GameConfig.from_dict(data))
    except ConfigError as exc:
        raise _config_error(exc) from None


def execute_run(cfg: GameConfig, out_path: Path) -> RunLog:
    out_path.parent.mkdir(parents=True, exist_ok=True)
    with open(out_path, "w", encoding="utf-8") as sink:
        return run_game(cfg, sink=sink)


def cmd_run(config_path, out: Optional[str] = None) -> Path:
    cfg = load_config(config_path)
    out_path = Path(out) if out else Path("runs") / f"{Path(config_path).stem}.jsonl"
    try:
        runlog = execute_run(cfg, out_path)
    except ConfigError as exc:
        raise _config_error(exc) from None
    print(f"status={runlog.status} rounds={len(runlog.events)} "
          f"final_agreement={runlog.final_agreement:.6f} ({cfg.agreement_metric.value}) "
          f"total_tokens={runlog.total_tokens} log={out_path}")
    if runlog.status != "completed":
        raise CliError(EXIT_ABORTED, f"run aborted: {runlog.error}; partial log kept at {out_path}")
    return out_path


# --- sweeps -----------------------------------------------------------------

GRID_FIELDS = ("condition", "n_agents", "memory_window", "lose_shift_alpha")


@dataclass
class SweepSpec:
    """A base config, grid axes, seeds and a roster template per condition.

    JSON layout::

        {"base": {...GameConfig fields...},
         "grid": {"condition": [...], "n_agents": [...],
                  "memory_window": [...], "lose_shift_alpha": [...]},
         "seeds": [0, 1, 2],
         "rosters": {"NL": [...], "NL_SW": [...], "SCHEMA": [...]},
         "output_dir": "runs/desk-mock"}

    NL cells always run with K = 0, whatever the memory_window axis says.
    A single shared ``"roster"`` may replace ``"rosters"``.
    """

    base: Dict[str, Any]
    grid: Dict[str, List[Any]]
    seeds: List[int]
    rosters: Dict[str, List[Dict[str, Any]]]
    output_dir: str = "runs/sweep"

    @classmethod
    def from_dict(cls, d: Dict[str, Any]) -> "SweepSpec":
        if not isinstance(d, dict):
            raise ConfigError("bad-sweep-spec", "expected a JSON object")
        unknown = set(d) - {"base", "grid", "seeds", "rosters", "roster", "output_dir", "description"}
        if unknown:
            raise ConfigError("bad-sweep-spec", f"unknown keys {sorted(unknown)}")
        grid = dict(d.get("grid", {}))
        for key in grid:
            if key not in GRID_FIELDS:
                raise ConfigError("bad-sweep-spec", f"cannot sweep over {key!r}")
        base = dict(d.get("base", {}))
        for key in GRID_FIELDS:
            if key not in grid:
                if key not in base:
                    raise ConfigError("bad-sweep-spec", f"{key} missing from both grid and base")
                grid[key] = [base[key]]
            base.pop(key, None)
        seeds = list(d.get("seeds", []))
        if not seeds:
            raise ConfigError("bad-sweep-spec", "seed list must be nonempty")
        if "rosters" in d:
            rosters = dict(d["rosters"])
        elif "roster" in d:
            rosters = {c.value: d["roster"] for c in Condition}
        else:
            raise ConfigError("bad-sweep-spec", "need 'rosters' or 'roster'")
        for cond in grid["condition"]:
            if cond not in rosters:
                raise ConfigError("bad-sweep-spec", f"no roster for condition {cond}")
        return cls(base, grid, seeds, rosters, d.get("output_dir", "runs/sweep"))

    def cells(self) -> List[Tuple[str, int, int, float]]:
        out = []
        for cond, n, k, alpha in product(*(self.grid[f] for f in GRID_FIELDS)):
            k = 0 if Condition(cond) is Condition.NL else k
            cell = (Condition(cond).value, n, k, alpha)
            if cell not in out:
                out.append(cell)
        return out

    def configs(self) -> List[Tuple[str, GameConfig]]:
        jobs = []
        for cond, n, k, alpha in self.cells():
            for seed in self.seeds:
                data = dict(self.base)
                data.update(condition=cond, n_agents=n, memory_window=k, lose_shift_alpha=alpha,
                            seed=seed, agent_roster=self.rosters[cond])
                cfg = validate_config(GameConfig.from_dict(data))
                jobs.append((run_filename(cfg), cfg))
        return jobs


def run_filename(cfg: GameConfig) -> str:
    return f"{cfg.condition.value}_{cfg.n_agents}_{cfg.memory_window}_{cfg.lose_shift_alpha!r}_{cfg.seed}.jsonl"


def _is_completed(path: Path) -> bool:
    if not path.exists():
        return False
    last = ""
    try:
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                if line.strip():
                    last = line
        rec = json.loads(last)
    except (OSError, ValueError):
        return False
    return rec.get("type") == "trailer" and rec.get("status") == "completed"


def _run_cell(cfg_dict: Dict[str, Any], path: str) -> Tuple[str, str, Optional[str]]:
    try:
        runlog = execute_run(GameConfig.from_dict(cfg_dict), Path(path))
    except Exception as exc:  # a crashed cell must not stop the sweep
        return path, "failed", f"{type(exc).__name__}: {exc}"
    return path, runlog.status, runlog.error


def cmd_sweep(sweep_path, parallelism: int = 1, out: Optional[str] = None) -> Path:
    raw = _read_json(Path(sweep_path))
    try:
        spec = SweepSpec.from_dict(raw)
        jobs = spec.configs()
    except ConfigError as exc:
        raise _config_error(exc) from None
    out_dir = Path(out or spec.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    todo = [(out_dir / name, cfg) for name, cfg in jobs if not _is_completed(out_dir / name)]
    print(f"sweep: {len(jobs)} runs, {len(jobs) - len(todo)} already complete, {len(todo)} to run")
    results: List[Tuple[str, str, Optional[str]]] = []
    if parallelism <= 1:
        results = [_run_cell(cfg.to_dict(), str(path)) for path, cfg in todo]
    else:
        with ProcessPoolExecutor(max_workers=parallelism) as pool:
            futures = [pool.submit(_run_cell, cfg.to_dict(), str(path)) for path, cfg in todo]
            results = [f.result() for f in as_completed(futures)]
    failures = sorted(r for r in results if r[1] != "completed")
    for path, status, error in failures:
        print(f"  {status}: {path}: {error}")
    print(f"sweep done: {len(results) - len(failures)} completed, {len(failures)} failed -> {out_dir}")
    if failures:
        raise CliError(EXIT_SWEEP_FAILURES, f"{len(failures)} sweep cells did not complete")
    return out_dir


# --- reports ----------------------------------------------------------------

def load_logs(log_dir) -> List[RunLog]:
    paths = sorted(Path(log_dir).glob("*.jsonl"))
    logs = []
    for p in paths:
        try:
            runlog = read_runlog(p)
        except (OSError, ValueError) as exc:
            log.warning("skipping unreadable log %s: %s", p, exc)
            continue
        if runlog.status != "completed":
            log.warning("skipping %s run %s", runlog.status, p)
            continue
        logs.append(runlog)
    return logs


def _fmt(x: float) -> str:
    return f"{x:.6f}"


def _write_csv(path: Path, rows: Sequence[Sequence[Any]]) -> None:
    buf = io.StringIO()
    csv.writer(buf, lineterminator="\n").writerows(rows)
    path.write_text(buf.getvalue(), encoding="utf-8")


def cmd_report(log_dir, kind: str, thresholds: Sequence[float] = DEFAULT_THRESHOLDS,
               metric: Optional[str] = None, out: Optional[str] = None) -> List[Path]:
    logs = load_logs(log_dir)
    if not logs:
        raise CliError(EXIT_EMPTY_LOG_DIR, f"no completed run logs in {log_dir}")
    m = AgreementMetric(metric) if metric else None
    out_dir = Path(out) if out else Path(log_dir) / "reports"
    out_dir.mkdir(parents=True, exist_ok=True)
    suffix = f"_{m.value}" if m else ""
    written = []
    if kind == "table1":
        path = out_dir / "table1.csv"
        _write_csv(path, table1_rows(logs, m))
        written.append(path)
        rows: List[List[Any]] = [["condition", "N", "K", "alpha", "metric", "mean", "std", "n_seeds"]]
        for (cond, n, k, alpha), cell in aggregate_cells(logs, m).items():
            metric_name = m.value if m else _group_metric(logs, cond, n, k, alpha)
            rows.append([cond, n, k, alpha, metric_name, _fmt(cell.mean), _fmt(cell.std), cell.n_seeds])
        path = out_dir / "summary.csv"
        _write_csv(path, rows)
        written.append(path)
    elif kind == "curves":
        groups: Dict[Tuple, List[RunLog]] = {}
        for runlog in logs:
            c = runlog.config
            groups.setdefault((c.condition.value, c.n_agents, c.memory_window, c.lose_shift_alpha), []).append(runlog)
        for (cond, n, k, alpha), group in sorted(groups.items()):
            rows = [["round", "mean", "std", "cumulative_tokens"]]
            rows += [[p.round, _fmt(p.mean), _fmt(p.std), _fmt(p.cumulative_tokens)]
                     for p in agreement_curve(group, m)]
            path = out_dir / f"curve_{cond}_{n}_{k}_{alpha!r}{suffix}.csv"
            _write_csv(path, rows)
            written.append(path)
    elif kind == "tokens":
        rows = [["condition", "threshold", "mean_tokens", "n_reached", "n_runs"]]
        for r in tokens_table(logs, thresholds, m):
            mean = "not-reached" if r.mean_tokens is None else _fmt(r.mean_tokens)
            rows.append([r.condition, r.threshold, mean, r.n_reached, r.n_runs])
        path = out_dir / "tokens.csv"
        _write_csv(path, rows)
        written.append(path)
    else:
        raise CliError(EXIT_USAGE, f"unknown report kind {kind!r}")
    for p in written:
        print(p)
    return written


def _group_metric(logs: Sequence[RunLog], cond, n, k, alpha) -> str:
    metrics = sorted({r.config.agreement_metric.value for r in logs
                      if (r.config.condition.value, r.config.n_agents, r.config.memory_window,
                          r.config.lose_shift_alpha) == (cond, n, k, alpha)})
    return "+".join(metrics)


# --- entry point ------------------------------------------------------------

def _thresholds(text: str) -> List[float]:
    try:
        values = [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad threshold list {text!r}") from None
    if not values or any(not 0 < v <= 1 for v in values):
        raise argparse.ArgumentTypeError("thresholds must lie in (0,1]")
    return values


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="signgame", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run one game from a config file")
    p.add_argument("config")
    p.add_argument("--out", help="run log path (default runs/<config stem>.jsonl)")

    p = sub.add_parser("sweep", help="run every (cell, seed) of a sweep spec")
    p.add_argument("spec")
    p.add_argument("--parallelism", type=int, default=1)
    p.add_argument("--out", help="override the spec's output_dir")

    p = sub.add_parser("report", help="write CSV summaries from a directory of run logs")
    p.add_argument("log_dir")
    p.add_argument("--kind", choices=("table1", "curves", "tokens"), required=True)
    p.add_argument("--thresholds", type=_thresholds, default=list(DEFAULT_THRESHOLDS))
    p.add_argument("--metric", choices=[m.value for m in AgreementMetric],
                   help="agreement metric (default: each run's configured metric)")
    p.add_argument("--out", help="output directory (default <log_dir>/reports)")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "run":
            cmd_run(args.config, args.out)
        elif args.command == "sweep":
            cmd_sweep(args.spec, args.parallelism, args.out)
        else:
            cmd_report(args.log_dir, args.kind, args.thresholds, args.metric, args.out)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
