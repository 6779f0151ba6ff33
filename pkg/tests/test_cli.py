import json
from itertools import product
from pathlib import Path

import pytest

from signgame.cli import (
    EXIT_ABORTED,
    EXIT_EMPTY_LOG_DIR,
    EXIT_OK,
    EXIT_UNREADABLE,
    VALIDATION_EXIT_CODES,
    SweepSpec,
    main,
    run_filename,
)
from signgame.engine import read_runlog

CONFIGS = Path(__file__).resolve().parent.parent / "configs"

RUN_CFG = {
    "n_agents": 6, "lexicon_size": 12, "rounds": 40, "memory_window": 3, "lose_shift_alpha": 0.75,
    "condition": "SCHEMA", "seed": 4,
    "agent_roster": [{"kind": "mock", "count": "rest", "params": {"compliance_prob": 0.8}}],
}

SMALL_SWEEP = {
    "base": {"lexicon_size": 12, "rounds": 30},
    "grid": {"condition": ["NL", "NL_SW", "SCHEMA"], "n_agents": [4, 6], "memory_window": [2],
             "lose_shift_alpha": [0.5, 0.75]},
    "seeds": [0, 1],
    "roster": [{"kind": "mock", "count": "rest", "params": {"compliance_prob": 0.7, "verbosity_tokens": 6}}],
}


def write_json(path, data):
    path.write_text(json.dumps(data), encoding="utf-8")
    return path


def test_run_happy_path(tmp_path, monkeypatch, capsys):
    monkeypatch.chdir(tmp_path)
    cfg = write_json(tmp_path / "one.json", RUN_CFG)
    assert main(["run", str(cfg)]) == EXIT_OK
    log = read_runlog(tmp_path / "runs" / "one.jsonl")
    assert log.status == "completed" and len(log.events) == 40
    out = capsys.readouterr().out
    assert "status=completed" in out and "rounds=40" in out


def test_run_rejects_bad_alpha(tmp_path):
    cfg = write_json(tmp_path / "bad.json", dict(RUN_CFG, lose_shift_alpha=1.2))
    assert main(["run", str(cfg), "--out", str(tmp_path / "x.jsonl")]) == VALIDATION_EXIT_CODES["alpha-out-of-range"]
    assert not (tmp_path / "x.jsonl").exists()


def test_run_nl_with_memory_rejected(tmp_path):
    cfg = write_json(tmp_path / "bad.json", dict(RUN_CFG, condition="NL"))
    assert main(["run", str(cfg)]) == VALIDATION_EXIT_CODES["nl-requires-k0"]


def test_unreadable_config(tmp_path):
    (tmp_path / "broken.json").write_text("{nope")
    assert main(["run", str(tmp_path / "broken.json")]) == EXIT_UNREADABLE
    assert main(["run", str(tmp_path / "absent.json")]) == EXIT_UNREADABLE


def test_dead_endpoint_aborts_with_partial_log(tmp_path):
    cfg = dict(RUN_CFG, endpoints={"dead": {"base_url": "http://127.0.0.1:9/v1", "model_name": "m",
                                            "timeout": 2.0, "max_retries_on_transport_error": 1,
                                            "backoff_base": 0.01}},
               agent_roster=[{"kind": "llm", "endpoint": "dead", "count": "rest"}])
    path = write_json(tmp_path / "dead.json", cfg)
    out = tmp_path / "dead.jsonl"
    assert main(["run", str(path), "--out", str(out)]) == EXIT_ABORTED
    log = read_runlog(out)
    assert log.status == "aborted" and log.events == [] and log.error


def test_mixed_roster_spec_assigns_half_and_half():
    from signgame.engine import build_roster

    spec = SweepSpec.from_dict(json.loads((CONFIGS / "mixed-roster.json").read_text()))
    jobs = spec.configs()
    assert len(jobs) == 9
    for _, cfg in jobs:
        models = [p.profile.model_name for p in build_roster(cfg)]
        assert len(models) == cfg.n_agents == 12
        assert models[:6] == [models[0]] * 6 and models[6:] == [models[6]] * 6 and models[0] != models[6]


def test_paper_grid_enumeration():
    spec = SweepSpec.from_dict(json.loads((CONFIGS / "paper-grid.json").read_text()))
    jobs = spec.configs()
    expected = set()
    for cond, n, k, alpha, seed in product(["NL", "NL_SW", "SCHEMA"], [12, 24], [5, 10], [0.5, 0.75, 0.99], [0, 1, 2]):
        expected.add((cond, n, 0 if cond == "NL" else k, alpha, seed))
    assert len(expected) == 90
    got = {(c.condition.value, c.n_agents, c.memory_window, c.lose_shift_alpha, c.seed) for _, c in jobs}
    assert len(jobs) == 90 and got == expected
    assert len({name for name, _ in jobs}) == 90
    assert all(c.rounds == 300 and c.lexicon_size == 12 for _, c in jobs)


def test_run_filename():
    spec = SweepSpec.from_dict(SMALL_SWEEP)
    name, cfg = spec.configs()[0]
    assert name == run_filename(cfg) == "NL_4_0_0.5_0.jsonl"


def test_sweep_is_idempotent(tmp_path, capsys):
    spec = write_json(tmp_path / "s.json", SMALL_SWEEP)
    out = tmp_path / "logs"
    assert main(["sweep", str(spec), "--out", str(out)]) == EXIT_OK
    files = sorted(out.glob("*.jsonl"))
    assert len(files) == 24
    mtimes = {p: p.stat().st_mtime_ns for p in files}
    capsys.readouterr()
    assert main(["sweep", str(spec), "--out", str(out)]) == EXIT_OK
    assert "24 already complete, 0 to run" in capsys.readouterr().out
    assert {p: p.stat().st_mtime_ns for p in files} == mtimes


def test_sweep_reruns_incomplete_logs(tmp_path):
    spec = write_json(tmp_path / "s.json", SMALL_SWEEP)
    out = tmp_path / "logs"
    main(["sweep", str(spec), "--out", str(out)])
    victim = out / "SCHEMA_6_2_0.75_1.jsonl"
    good = victim.read_bytes()
    victim.write_bytes(b"".join(good.splitlines(keepends=True)[:5]))
    assert main(["sweep", str(spec), "--out", str(out)]) == EXIT_OK
    assert victim.read_bytes() == good


def test_parallel_sweep_matches_serial(tmp_path):
    spec = write_json(tmp_path / "s.json", SMALL_SWEEP)
    assert main(["sweep", str(spec), "--out", str(tmp_path / "serial")]) == EXIT_OK
    assert main(["sweep", str(spec), "--parallelism", "4", "--out", str(tmp_path / "par")]) == EXIT_OK
    serial = {p.name: p.read_bytes() for p in (tmp_path / "serial").glob("*.jsonl")}
    par = {p.name: p.read_bytes() for p in (tmp_path / "par").glob("*.jsonl")}
    assert serial == par and len(serial) == 24


def test_reports(tmp_path):
    spec = write_json(tmp_path / "s.json", SMALL_SWEEP)
    logs = tmp_path / "logs"
    main(["sweep", str(spec), "--out", str(logs)])
    for kind in ("table1", "curves", "tokens"):
        assert main(["report", str(logs), "--kind", kind]) == EXIT_OK
    reports = logs / "reports"
    table = (reports / "table1.csv").read_text().splitlines()
    assert table[0] == "N,K,NL,NL-SW,SCHEMA"
    assert len(table) == 1 + 4  # (N, K) in {4, 6} x {0, 2}
    summary = (reports / "summary.csv").read_text().splitlines()
    assert summary[0] == "condition,N,K,alpha,metric,mean,std,n_seeds"
    assert len(summary) == 1 + 12
    curves = sorted(p.name for p in reports.glob("curve_*.csv"))
    assert len(curves) == 12 and "curve_SCHEMA_6_2_0.75.csv" in curves
    curve = (reports / "curve_SCHEMA_6_2_0.75.csv").read_text().splitlines()
    assert curve[0] == "round,mean,std,cumulative_tokens" and len(curve) == 31
    tokens = (reports / "tokens.csv").read_text().splitlines()
    assert tokens[0] == "condition,threshold,mean_tokens,n_reached,n_runs"
    assert len(tokens) == 1 + 3 * 3


def test_report_is_byte_stable(tmp_path):
    spec = write_json(tmp_path / "s.json", SMALL_SWEEP)
    logs = tmp_path / "logs"
    main(["sweep", str(spec), "--out", str(logs)])
    snapshots = []
    for i in range(2):
        out = tmp_path / f"r{i}"
        for kind in ("table1", "curves", "tokens"):
            main(["report", str(logs), "--kind", kind, "--out", str(out)])
        snapshots.append({p.name: p.read_bytes() for p in out.iterdir()})
    assert snapshots[0] == snapshots[1]


def test_report_metric_override(tmp_path):
    spec = write_json(tmp_path / "s.json", SMALL_SWEEP)
    logs = tmp_path / "logs"
    main(["sweep", str(spec), "--out", str(logs)])
    assert main(["report", str(logs), "--kind", "curves", "--metric", "modal"]) == EXIT_OK
    assert (logs / "reports" / "curve_SCHEMA_6_2_0.75_modal.csv").exists()


def test_report_empty_dir(tmp_path):
    assert main(["report", str(tmp_path), "--kind", "table1"]) == EXIT_EMPTY_LOG_DIR


def test_usage_error_exit_code():
    with pytest.raises(SystemExit) as exc:
        main(["report"])
    assert exc.value.code == 2


def test_exit_codes_distinct():
    codes = list(VALIDATION_EXIT_CODES.values())
    assert len(codes) == len(set(codes))
