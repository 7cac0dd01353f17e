"""Driver tests: config validation, exit codes, output formats, reruns."""

import csv
import hashlib
import json
import subprocess
import sys

import numpy as np
import pytest

from spectral_moduli import cli
from spectral_moduli import fann_model as fm


def run_cli(*args: str) -> int:
    return cli.main(list(args))


def read_json(path):
    with open(path) as fh:
        return json.load(fh)


def read_meta_line(path):
    with open(path) as fh:
        first = fh.readline().rstrip("\n")
    assert first.startswith("# meta: ")
    return json.loads(first[len("# meta: "):])


def read_jsonl(path):
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def dir_hashes(path) -> dict:
    out = {}
    for child in sorted(path.iterdir()):
        out[child.name] = hashlib.sha256(child.read_bytes()).hexdigest()
    return out


# -- config plumbing ----------------------------------------------------------


def test_missing_config_file_exits_2(tmp_path, capsys):
    code = run_cli("simulate", "--config", str(tmp_path / "absent.json"),
                   "--out", str(tmp_path))
    assert code == 2
    assert "config error" in capsys.readouterr().err


def test_invalid_json_config_exits_2(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert run_cli("simulate", "--config", str(bad),
                   "--out", str(tmp_path)) == 2


def test_non_object_config_exits_2(tmp_path):
    bad = tmp_path / "list.json"
    bad.write_text("[1, 2]")
    assert run_cli("simulate", "--config", str(bad),
                   "--out", str(tmp_path)) == 2


def test_unknown_top_level_key_exits_2(tmp_path):
    assert run_cli("simulate", "--out", str(tmp_path),
                   "--set", "bogus=1") == 2


def test_unknown_nested_key_exits_2(tmp_path):
    assert run_cli("simulate", "--out", str(tmp_path),
                   "--set", "simulate.dynamcs.dt=0.1") == 2


def test_malformed_set_exits_2(tmp_path):
    assert run_cli("simulate", "--out", str(tmp_path), "--set", "no-equals") == 2


def test_set_through_scalar_exits_2(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"simulate": {"system": "nlse"}}))
    assert run_cli("simulate", "--config", str(cfg), "--out", str(tmp_path),
                   "--set", "simulate.system.deep=1") == 2


def test_wrong_value_types_exit_2(tmp_path):
    assert run_cli("simulate", "--out", str(tmp_path),
                   "--set", "simulate.dynamics.dt=true") == 2
    assert run_cli("simulate", "--out", str(tmp_path),
                   "--set", "seed=-1") == 2
    assert run_cli("simulate", "--out", str(tmp_path),
                   "--set", "simulate.system=banana") == 2


def test_missing_subcommand_exits_2():
    with pytest.raises(SystemExit) as info:
        cli.main([])
    assert info.value.code == 2


def test_set_parses_json_literals_and_raw_strings(tmp_path):
    out = tmp_path / "run"
    assert run_cli("simulate", "--out", str(out),
                   "--set", "simulate.dynamics.t_final=0.25",
                   "--set", "simulate.graph.kind=path",
                   "--set", "simulate.graph.n=2",
                   "--set", "simulate.initial.normalize=true") == 0
    meta = read_meta_line(out / "trajectory.csv")
    sim = meta["resolved_config"]["simulate"]
    assert sim["dynamics"]["t_final"] == 0.25
    assert sim["graph"]["kind"] == "path"
    assert sim["initial"]["normalize"] is True


def test_seed_and_out_flags_override_config(tmp_path):
    cfg = tmp_path / "cfg.json"
    other = tmp_path / "other"
    cfg.write_text(json.dumps({"seed": 5, "output_dir": str(tmp_path / "a"),
                               "simulate": {"dynamics": {"t_final": 0.1}}}))
    assert run_cli("simulate", "--config", str(cfg), "--seed", "9",
                   "--out", str(other)) == 0
    meta = read_meta_line(other / "trajectory.csv")
    assert meta["resolved_config"]["seed"] == 9
    assert meta["resolved_config"]["output_dir"] == str(other)


def test_foreign_sections_are_tolerated_but_not_resolved(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({
        "simulate": {"dynamics": {"t_final": 0.1}},
        "train": {"task": "desk_c4"},
    }))
    out = tmp_path / "run"
    assert run_cli("simulate", "--config", str(cfg), "--out", str(out)) == 0
    meta = read_meta_line(out / "trajectory.csv")
    assert "train" not in meta["resolved_config"]


def test_threads_env_validated_and_recorded(tmp_path, monkeypatch):
    monkeypatch.setenv(cli.THREADS_ENV, "zero")
    assert run_cli("simulate", "--out", str(tmp_path)) == 2
    monkeypatch.setenv(cli.THREADS_ENV, "0")
    assert run_cli("simulate", "--out", str(tmp_path)) == 2
    monkeypatch.setenv(cli.THREADS_ENV, "2")
    out = tmp_path / "run"
    assert run_cli("simulate", "--out", str(out),
                   "--set", "simulate.dynamics.t_final=0.1") == 0
    assert read_meta_line(out / "trajectory.csv")["threads"] == 2


# -- simulate -----------------------------------------------------------------


def test_simulate_single_vertex_constant_modulus(tmp_path):
    out = tmp_path / "run"
    assert run_cli("simulate", "--out", str(out),
                   "--set", "simulate.graph.kind=single",
                   "--set", "simulate.graph.n=1",
                   "--set", "simulate.initial.mode=explicit",
                   "--set", "simulate.initial.values=[[0.6, 0.8]]",
                   "--set", "simulate.dynamics.t_final=0.5") == 0
    with open(out / "trajectory.csv") as fh:
        rows = list(csv.DictReader(ln for ln in fh if not ln.startswith("#")))
    assert set(rows[0]) == {"t", "re_0", "im_0"}
    mods = [abs(complex(float(r["re_0"]), float(r["im_0"]))) for r in rows]
    assert np.abs(np.array(mods) - 1.0).max() < 1e-12
    first = rows[0]
    assert (float(first["re_0"]), float(first["im_0"])) == (0.6, 0.8)


def test_simulate_triangle_norms_stay_within_1e9(tmp_path):
    out = tmp_path / "run"
    assert run_cli("simulate", "--out", str(out),
                   "--set", "simulate.dynamics.t_final=2.0") == 0
    records = read_jsonl(out / "invariants.jsonl")
    assert "meta" in records[0]
    norms = np.array([r["norm"] for r in records[1:]])
    assert np.abs(norms - 1.0).max() <= 1e-9


def test_simulate_spin_system_logs_constraint(tmp_path):
    out = tmp_path / "run"
    assert run_cli("simulate", "--out", str(out),
                   "--set", "simulate.system=ll",
                   "--set", "simulate.dynamics.dt=0.01",
                   "--set", "simulate.dynamics.t_final=0.5") == 0
    records = read_jsonl(out / "invariants.jsonl")
    assert all("constraint" in r for r in records[1:])
    with open(out / "trajectory.csv") as fh:
        header = [ln for ln in fh if not ln.startswith("#")][0]
    assert header.split(",")[1:4] == ["s0_x", "s0_y", "s0_z"]


def test_simulate_meta_is_consistent_across_outputs(tmp_path):
    out = tmp_path / "run"
    assert run_cli("simulate", "--out", str(out), "--seed", "3",
                   "--set", "simulate.dynamics.t_final=0.1") == 0
    meta_csv = read_meta_line(out / "trajectory.csv")
    meta_jsonl = read_jsonl(out / "invariants.jsonl")[0]["meta"]
    assert meta_csv == meta_jsonl
    canonical = json.dumps(meta_csv["resolved_config"], sort_keys=True,
                           separators=(",", ":"))
    digest = hashlib.sha256(canonical.encode()).hexdigest()
    assert meta_csv["inputs_sha256"] == digest


def test_simulate_explicit_shape_mismatch_exits_2(tmp_path):
    assert run_cli("simulate", "--out", str(tmp_path),
                   "--set", "simulate.initial.mode=explicit",
                   "--set", "simulate.initial.values=[[1.0, 0.0]]") == 2


def test_simulate_nonunit_unnormalized_state_exits_3(tmp_path):
    assert run_cli("simulate", "--out", str(tmp_path),
                   "--set", "simulate.initial.mode=explicit",
                   "--set",
                   "simulate.initial.values=[[3,0],[0,0],[0,0]]",
                   "--set", "simulate.initial.normalize=false") == 3


# -- gauge-check --------------------------------------------------------------


def test_gauge_check_pushforward_triangle_passes(tmp_path):
    out = tmp_path / "run"
    assert run_cli("gauge-check", "--out", str(out),
                   "--set", "gauge_check.spin_law=pushforward",
                   "--set", "gauge_check.dynamics.dt=0.01",
                   "--set", "gauge_check.dynamics.t_final=2.0") == 0
    report = read_json(out / "deviation.json")
    assert report["pass"] is True
    assert report["max_deviation"] <= 1e-6
    assert report["threshold"] == 1e-6


def test_gauge_check_cross_law_reports_honest_failure(tmp_path):
    out = tmp_path / "run"
    assert run_cli("gauge-check", "--out", str(out),
                   "--set", "gauge_check.dynamics.dt=0.01",
                   "--set", "gauge_check.dynamics.t_final=2.0") == 0
    report = read_json(out / "deviation.json")
    assert report["pass"] is False
    assert report["max_deviation"] > 1e-6


def test_gauge_check_single_vertex_tiny_deviation(tmp_path):
    out = tmp_path / "run"
    assert run_cli("gauge-check", "--out", str(out),
                   "--set", "gauge_check.spin_law=pushforward",
                   "--set", "gauge_check.graph.kind=single",
                   "--set", "gauge_check.graph.n=1",
                   "--set", "gauge_check.dynamics.t_final=1.0") == 0
    report = read_json(out / "deviation.json")
    assert report["max_deviation"] < 1e-10


def test_gauge_check_single_vertex_cross_law_phase_rate_gap(tmp_path):
    # On one vertex the field is e^{-iVt} psi0 while the cross-product law
    # spins the sphere image at a different rate; the gap after time t is the
    # chord 2 sin(dt/2) of the accumulated relative phase.  Measuring exactly
    # 2 sin(1/2) pins the relative rate error to 1.0 * V in closed form.
    out = tmp_path / "run"
    assert run_cli("gauge-check", "--out", str(out),
                   "--set", "gauge_check.graph.kind=single",
                   "--set", "gauge_check.graph.n=1",
                   "--set", "gauge_check.dynamics.t_final=1.0") == 0
    report = read_json(out / "deviation.json")
    assert report["max_deviation"] == pytest.approx(2.0 * np.sin(0.5),
                                                    abs=1e-9)


def test_gauge_check_south_pole_structured_failure(tmp_path, capsys):
    out = tmp_path / "run"
    code = run_cli("gauge-check", "--out", str(out),
                   "--set", "gauge_check.initial.mode=spin",
                   "--set",
                   "gauge_check.initial.values=[[0,0,-1],[0,0,1],[1,0,0]]")
    assert code == 3
    report = read_json(out / "deviation.json")
    assert report["pass"] is False
    assert report["failure"]["type"] == "SouthPoleError"
    assert "excluded" in report["failure"]["message"]


# -- learn-graph --------------------------------------------------------------


def test_learn_graph_zero_iterations_initial_stratum_only(tmp_path):
    out = tmp_path / "run"
    assert run_cli("learn-graph", "--out", str(out),
                   "--set", "learn_graph.iterations=0") == 0
    report = read_json(out / "report.json")
    assert len(report["strata"]["visited"]) == 1
    assert report["checkpoints"] == []
    assert report["loss_history"] == []
    # initial point: four true circle edges plus the seeded spurious (0, 2)
    graph = read_json(out / "final_graph.json")["graph"]
    assert len(graph["edges"]) == 5
    records = read_jsonl(out / "strata.jsonl")
    assert len(records) == 1 and "meta" in records[0]


def test_learn_graph_truncated_c4_outputs(tmp_path):
    out = tmp_path / "run"
    assert run_cli("learn-graph", "--out", str(out),
                   "--set", "learn_graph.iterations=3") == 0
    report = read_json(out / "report.json")
    assert report["task"] == "c4"
    assert report["truth"]["betti"] == [1, 1]
    assert len(report["loss_history"]) == 3
    assert {c["fraction"] for c in report["checkpoints"]} == {0.5, 1.0}
    records = read_jsonl(out / "strata.jsonl")
    assert len(records) == 4  # meta record + one per iteration
    assert [r["t"] for r in records[1:]] == [0, 1, 2]


def test_learn_graph_noise_delta_restricted_to_noisy_task(tmp_path):
    assert run_cli("learn-graph", "--out", str(tmp_path),
                   "--set", "learn_graph.noise_delta=0.1") == 2


def test_learn_graph_noisy_replicate_runs(tmp_path):
    out = tmp_path / "run"
    assert run_cli("learn-graph", "--out", str(out),
                   "--set", "learn_graph.task=c5_noisy",
                   "--set", "learn_graph.iterations=1",
                   "--set", "learn_graph.batch_size=2") == 0
    report = read_json(out / "report.json")
    assert report["truth"]["betti"] == [1, 1]
    assert report["truth"]["n"] == 5
    for key in ("count", "true_subset_count", "spurious_count"):
        assert isinstance(report["strata"][key], int)


# -- train ---------------------------------------------------------------------


def test_train_zero_epochs_passthrough(tmp_path):
    out = tmp_path / "run"
    assert run_cli("train", "--out", str(out),
                   "--set", "train.task=teacher_fixed_point",
                   "--set", "train.phase1.epochs=0") == 0
    with open(out / "history.csv") as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    assert lines == ["epoch,train_loss,test_loss,n_edges,b0,b1\n"]
    params, point = fm.load_checkpoint(out / "checkpoint.json")
    assert params.activation1 == "identity"
    assert np.array_equal(params.a1, np.eye(4, dtype=complex))
    assert point.graph.n_edges == 4


def test_train_teacher_fixed_point_stays_at_zero_loss(tmp_path):
    out = tmp_path / "run"
    assert run_cli("train", "--out", str(out),
                   "--set", "train.task=teacher_fixed_point",
                   "--set", "train.phase1.epochs=2") == 0
    with open(out / "history.csv") as fh:
        rows = list(csv.DictReader(ln for ln in fh if not ln.startswith("#")))
    assert [r["epoch"] for r in rows] == ["0", "1"]
    assert all(float(r["train_loss"]) < 1e-8 for r in rows)
    assert all(r["n_edges"] == "4" for r in rows)


def test_train_gap_sizes_require_baseline(tmp_path):
    assert run_cli("train", "--out", str(tmp_path),
                   "--set", "train.task=teacher_fixed_point",
                   "--set", "train.gap_sizes=[10]") == 2


def test_train_desk_minimal_emits_all_artifacts(tmp_path):
    out = tmp_path / "run"
    assert run_cli("train", "--out", str(out),
                   "--set", "train.phase1.epochs=1",
                   "--set", "train.phase2.epochs=0",
                   "--set", "train.baseline.epochs=2",
                   "--set", "train.gap_sizes=[4]") == 0
    for name in ("checkpoint.json", "history.csv", "baseline_checkpoint.json",
                 "baseline_history.csv", "gap_report.json"):
        assert (out / name).exists()
    gap = read_json(out / "gap_report.json")
    assert set(gap["models"]) == {"model", "baseline"}
    for rows in gap["models"].values():
        (row,) = rows
        assert row["m"] == 4
        assert row["noise_bound"] == 1.5
        assert row["gap"] == pytest.approx(row["test_loss"] - row["train_loss"])
    with open(out / "baseline_history.csv") as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    assert lines[0] == "epoch,train_loss,test_loss\n"
    assert len(lines) == 3


def test_train_phase2_epochs_are_renumbered(tmp_path):
    out = tmp_path / "run"
    assert run_cli("train", "--out", str(out),
                   "--set", "train.task=teacher_fixed_point",
                   "--set", "train.phase1.epochs=1",
                   "--set", "train.phase2.epochs=2") == 0
    with open(out / "history.csv") as fh:
        rows = list(csv.DictReader(ln for ln in fh if not ln.startswith("#")))
    assert [r["epoch"] for r in rows] == ["0", "1", "2"]


# -- report --------------------------------------------------------------------


def test_report_empty_directory(tmp_path):
    out = tmp_path / "run"
    out.mkdir()
    assert run_cli("report", "--out", str(out)) == 0
    summary = read_json(out / "summary.json")
    assert summary["outputs"] == {}


def test_report_aggregates_with_content_hashes(tmp_path):
    out = tmp_path / "run"
    assert run_cli("train", "--out", str(out),
                   "--set", "train.task=teacher_fixed_point",
                   "--set", "train.phase1.epochs=1") == 0
    assert run_cli("gauge-check", "--out", str(out),
                   "--set", "gauge_check.spin_law=pushforward",
                   "--set", "gauge_check.graph.kind=single",
                   "--set", "gauge_check.graph.n=1",
                   "--set", "gauge_check.dynamics.t_final=0.5") == 0
    assert run_cli("report", "--out", str(out)) == 0
    summary = read_json(out / "summary.json")
    assert summary["outputs"]["history.csv"]["epochs"] == 1
    assert summary["outputs"]["deviation.json"]["pass"] is True
    for name, entry in summary["outputs"].items():
        digest = hashlib.sha256((out / name).read_bytes()).hexdigest()
        assert entry["sha256"] == digest


# -- reruns are byte-identical ---------------------------------------------------


def _rerun_identical(tmp_path, *args: str) -> None:
    out = tmp_path / "run"
    argv = args + ("--out", str(out))
    assert run_cli(*argv) == 0
    before = dir_hashes(out)
    assert run_cli(*argv) == 0
    assert dir_hashes(out) == before


def test_rerun_simulate_byte_identical(tmp_path):
    _rerun_identical(tmp_path, "simulate", "--seed", "4",
                     "--set", "simulate.dynamics.t_final=0.5")


def test_rerun_gauge_check_byte_identical(tmp_path):
    _rerun_identical(tmp_path, "gauge-check",
                     "--set", "gauge_check.dynamics.dt=0.01",
                     "--set", "gauge_check.dynamics.t_final=1.0")


def test_rerun_learn_graph_byte_identical(tmp_path):
    _rerun_identical(tmp_path, "learn-graph",
                     "--set", "learn_graph.iterations=2")


def test_rerun_train_byte_identical(tmp_path):
    _rerun_identical(tmp_path, "train",
                     "--set", "train.task=teacher_fixed_point",
                     "--set", "train.phase1.epochs=1")


def test_rerun_via_subprocess_matches_in_process(tmp_path):
    out = tmp_path / "run"
    args = ["simulate", "--out", str(out),
            "--set", "simulate.dynamics.t_final=0.2"]
    assert run_cli(*args) == 0
    before = dir_hashes(out)
    proc = subprocess.run([sys.executable, "-m", "spectral_moduli.cli"] + args,
                          capture_output=True)
    assert proc.returncode == 0
    assert dir_hashes(out) == before
