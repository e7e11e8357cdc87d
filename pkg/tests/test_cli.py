"""End-to-end tests of the command-line front end.

Commands run in-process through ``main`` so exit codes, stdout, and the
files under each run directory can be asserted directly.
"""

from __future__ import annotations

import json
import math
from pathlib import Path

import numpy as np
import pytest

from sps_bb84.cli import (
    EXIT_OK,
    EXIT_RUNTIME,
    EXIT_VALIDATION,
    EXIT_ZERO_KEY,
    MANIFEST_NAME,
    THREADS_ENV,
    main,
)
from sps_bb84.tagproc import read_histogram_csv

REPO = Path(__file__).resolve().parents[1]
TABLE1 = REPO / "scenarios" / "table1.json"
IMPROVED = REPO / "scenarios" / "improved.json"


def _write_scenario(path: Path, overrides: dict, **extra) -> Path:
    payload = {"base": str(TABLE1), "overrides": overrides, **extra}
    path.write_text(json.dumps(payload))
    return path


def _manifest(run_dir: Path) -> dict:
    return json.loads((run_dir / MANIFEST_NAME).read_text())


def _output_hashes(run_dir: Path) -> dict[str, str]:
    manifest = _manifest(run_dir)
    return {o["name"]: o["sha256"] for o in manifest["outputs"]}


@pytest.fixture(scope="module")
def loss10_scenario(tmp_path_factory) -> Path:
    return _write_scenario(
        tmp_path_factory.mktemp("scn") / "loss10.json",
        {
            "link.channel_loss_db": 10.0,
            "simulation.n_pulses": 4_000_000,
            "simulation.seed": 900,
        },
    )


@pytest.fixture(scope="module")
def sim10_dir(tmp_path_factory, loss10_scenario) -> Path:
    out = tmp_path_factory.mktemp("runs") / "sim10"
    code = main(
        [
            "simulate",
            "--scenario",
            str(loss10_scenario),
            "--out",
            str(out),
        ]
    )
    assert code == EXIT_OK
    return out


# ---------------------------------------------------------------------------
# argument handling
# ---------------------------------------------------------------------------

class TestParsing:
    def test_unknown_command_is_validation_error(self, capsys):
        assert main(["bogus"]) == EXIT_VALIDATION
        assert "invalid choice" in capsys.readouterr().err

    def test_missing_required_out(self, capsys):
        assert main(["simulate"]) == EXIT_VALIDATION
        assert "--out" in capsys.readouterr().err

    def test_version_flag(self, capsys):
        with pytest.raises(SystemExit) as info:
            main(["--version"])
        assert info.value.code == 0
        assert "sps-bb84" in capsys.readouterr().out

    def test_unreadable_scenario(self, tmp_path, capsys):
        assert (
            main(["keyrate", "--scenario", str(tmp_path / "nope.json")])
            == EXIT_VALIDATION
        )
        assert "not found" in capsys.readouterr().err

    def test_thread_count_must_be_positive(self, tmp_path, capsys):
        code = main(
            [
                "sweep",
                "--values",
                "1,2",
                "--threads",
                "0",
                "--out",
                str(tmp_path / "s"),
            ]
        )
        assert code == EXIT_VALIDATION
        assert "threads" in capsys.readouterr().err

    def test_thread_env_var_must_be_integer(
        self, tmp_path, capsys, monkeypatch
    ):
        monkeypatch.setenv(THREADS_ENV, "lots")
        code = main(
            ["sweep", "--values", "1,2", "--out", str(tmp_path / "s")]
        )
        assert code == EXIT_VALIDATION
        assert THREADS_ENV in capsys.readouterr().err

    def test_thread_env_var_accepted(
        self, tmp_path, capsys, monkeypatch
    ):
        monkeypatch.setenv(THREADS_ENV, "2")
        code = main(
            ["sweep", "--values", "10,20", "--out", str(tmp_path / "s")]
        )
        assert code == EXIT_OK


# ---------------------------------------------------------------------------
# keyrate
# ---------------------------------------------------------------------------

class TestKeyrate:
    def test_asymptotic_at_project_defaults(self, capsys):
        assert main(["keyrate", "--loss", "25.49"]) == EXIT_OK
        out = capsys.readouterr().out
        assert "skb_per_pulse       3.766961e-05" in out
        assert "positive            True" in out

    def test_zero_key_exit_code(self, capsys):
        assert main(["keyrate", "--loss", "40"]) == EXIT_ZERO_KEY
        out = capsys.readouterr().out
        assert "skb_per_pulse       0.000000e+00" in out
        assert "positive            False" in out

    def test_finite_regime_with_block_size(self, capsys):
        code = main(
            [
                "keyrate",
                "--loss",
                "25.49",
                "--regime",
                "finite",
                "--block-size",
                "1e8",
            ]
        )
        assert code == EXIT_OK
        out = capsys.readouterr().out
        skb = float(out.split("skb_per_pulse")[1].split()[0])
        assert skb >= 2e-5
        assert "final_key_bits" in out

    def test_csv_and_manifest_written(self, tmp_path, capsys):
        out_dir = tmp_path / "kr"
        code = main(
            ["keyrate", "--loss", "10", "--out", str(out_dir)]
        )
        assert code == EXIT_OK
        manifest = _manifest(out_dir)
        assert manifest["command"] == "keyrate"
        assert [o["name"] for o in manifest["outputs"]] == ["keyrate.csv"]
        body = (out_dir / "keyrate.csv").read_text().splitlines()
        assert body[0].startswith("axis_value,p_c,")
        assert body[1].startswith("10.0,")

    def test_negative_loss_is_validation_error(self, capsys):
        assert main(["keyrate", "--loss", "-3"]) == EXIT_VALIDATION
        assert "channel_loss_db" in capsys.readouterr().err


# ---------------------------------------------------------------------------
# mtl
# ---------------------------------------------------------------------------

class TestMtl:
    def test_four_regimes_ordered(self, tmp_path, capsys):
        out_dir = tmp_path / "mtl"
        code = main(
            ["mtl", "--scenario", str(TABLE1), "--out", str(out_dir)]
        )
        assert code == EXIT_OK
        rows = (out_dir / "mtl.csv").read_text().splitlines()[1:]
        values = {
            row.split(",")[0]: float(row.split(",")[2]) for row in rows
        }
        assert values["asymptotic"] == pytest.approx(29.292, abs=5e-3)
        assert values["1e8"] == pytest.approx(29.280, abs=5e-3)
        assert values["1e5"] == pytest.approx(28.954, abs=5e-3)
        assert values["1e3"] == pytest.approx(24.807, abs=5e-3)
        assert (
            values["asymptotic"]
            > values["1e8"]
            > values["1e5"]
            > values["1e3"]
        )

    def test_improved_scenario_extends_reach(self, capsys):
        assert (
            main(
                [
                    "mtl",
                    "--scenario",
                    str(IMPROVED),
                    "--regimes",
                    "asymptotic",
                ]
            )
            == EXIT_OK
        )
        improved = float(capsys.readouterr().out.split("mtl_db")[1].split()[0])
        assert (
            main(
                [
                    "mtl",
                    "--scenario",
                    str(TABLE1),
                    "--regimes",
                    "asymptotic",
                ]
            )
            == EXIT_OK
        )
        table1 = float(capsys.readouterr().out.split("mtl_db")[1].split()[0])
        assert improved > table1

    def test_degenerate_scenario_reports_no_key(self, tmp_path, capsys):
        # multiphoton bound above the click probability even at zero
        # loss: nothing to extract anywhere
        scenario = _write_scenario(
            tmp_path / "degenerate.json",
            {
                "source.mean_photon_number": 0.999,
                "source.g2_zero": 1.0,
                "link.transmitter_efficiency": 1.0,
                "link.receiver_efficiency": 0.01,
                "link.dark_count_prob": 0.0,
            },
        )
        code = main(["mtl", "--scenario", str(scenario)])
        assert code == EXIT_ZERO_KEY
        assert "zero loss" in capsys.readouterr().err

    def test_bad_regime_token(self, capsys):
        assert (
            main(["mtl", "--regimes", "sideways"]) == EXIT_VALIDATION
        )
        assert "sideways" in capsys.readouterr().err


# ---------------------------------------------------------------------------
# sweep
# ---------------------------------------------------------------------------

class TestSweep:
    def test_loss_grid_csv(self, tmp_path, capsys):
        out_dir = tmp_path / "swp"
        code = main(
            [
                "sweep",
                "--values",
                "0,10,20,25,30",
                "--out",
                str(out_dir),
            ]
        )
        assert code == EXIT_OK
        assert "positive_points     4" in capsys.readouterr().out
        rows = (out_dir / "sweep.csv").read_text().splitlines()
        assert len(rows) == 6
        ten_db = rows[2].split(",")
        assert float(ten_db[1]) == pytest.approx(4.6923716593e-3)

    def test_linspace_grid(self, tmp_path, capsys):
        code = main(
            [
                "sweep",
                "--start",
                "0",
                "--stop",
                "20",
                "--points",
                "5",
                "--out",
                str(tmp_path / "s"),
            ]
        )
        assert code == EXIT_OK
        rows = (tmp_path / "s" / "sweep.csv").read_text().splitlines()
        assert [row.split(",")[0] for row in rows[1:]] == [
            "0.0",
            "5.0",
            "10.0",
            "15.0",
            "20.0",
        ]

    def test_grid_specification_required(self, tmp_path, capsys):
        assert (
            main(["sweep", "--out", str(tmp_path / "s")])
            == EXIT_VALIDATION
        )
        assert "--values" in capsys.readouterr().err

    def test_dataset_axis(self, tmp_path, capsys):
        dataset = tmp_path / "sources.csv"
        dataset.write_text(
            "label,mean_photon_number,g2_zero\n"
            "bright,0.3,0.05\n"
            "dim,0.05,0.01\n"
        )
        out_dir = tmp_path / "ds"
        code = main(
            [
                "sweep",
                "--axis",
                "dataset",
                "--dataset",
                str(dataset),
                "--out",
                str(out_dir),
            ]
        )
        assert code == EXIT_OK
        rows = (out_dir / "sweep.csv").read_text().splitlines()
        assert len(rows) == 3
        assert rows[1].startswith("bright,")
        assert rows[2].startswith("dim,")


# ---------------------------------------------------------------------------
# simulate + analyze
# ---------------------------------------------------------------------------

class TestSimulateAnalyze:
    def test_simulate_manifest_lists_outputs(self, sim10_dir):
        manifest = _manifest(sim10_dir)
        names = {o["name"] for o in manifest["outputs"]}
        assert names == {"tags.bin", "alice_states.npy"}
        assert manifest["seed"] == 900
        for output in manifest["outputs"]:
            target = sim10_dir / output["name"]
            assert target.stat().st_size == output["bytes"]

    def test_double_run_is_bit_identical(
        self, tmp_path, loss10_scenario, sim10_dir, capsys
    ):
        rerun = tmp_path / "rerun"
        code = main(
            [
                "simulate",
                "--scenario",
                str(loss10_scenario),
                "--out",
                str(rerun),
            ]
        )
        assert code == EXIT_OK
        assert _output_hashes(rerun) == _output_hashes(sim10_dir)

    def test_seed_changes_the_stream(
        self, tmp_path, loss10_scenario, sim10_dir, capsys
    ):
        other = tmp_path / "other"
        code = main(
            [
                "simulate",
                "--scenario",
                str(loss10_scenario),
                "--seed",
                "901",
                "--out",
                str(other),
            ]
        )
        assert code == EXIT_OK
        assert (
            _output_hashes(other)["tags.bin"]
            != _output_hashes(sim10_dir)["tags.bin"]
        )

    def test_analyze_recovers_source_properties(
        self, tmp_path, loss10_scenario, sim10_dir, capsys
    ):
        out_dir = tmp_path / "ana"
        code = main(
            [
                "analyze",
                "--tags",
                str(sim10_dir / "tags.bin"),
                "--scenario",
                str(loss10_scenario),
                "--out",
                str(out_dir),
            ]
        )
        assert code == EXIT_OK
        report = json.loads((out_dir / "report.json").read_text())
        assert report["n_pulses"] == 4_000_000
        assert report["lifetime_ps_fit"] == pytest.approx(
            592.5, rel=0.05
        )
        assert report["truth_error_fraction"] < 1.5e-3
        window = report["window"]
        # width lives on the 10 ps histogram bin grid, so "the whole
        # period" may exceed the exact period by up to one bin
        assert 0 < window["width_ps"] <= 4385.965 + 10.0
        assert (
            window["skb_per_pulse_filtered"]
            >= window["skb_per_pulse_unfiltered"]
        )
        histogram = read_histogram_csv(
            out_dir / "response_histogram.csv"
        )
        assert histogram.total() == report["detector_tags"]

    def test_analyze_empty_tag_file(self, tmp_path, capsys):
        empty = tmp_path / "empty.bin"
        empty.touch()
        out_dir = tmp_path / "ana"
        code = main(
            ["analyze", "--tags", str(empty), "--out", str(out_dir)]
        )
        assert code == EXIT_VALIDATION
        assert "empty" in capsys.readouterr().err
        assert not out_dir.exists()

    def test_csv_tag_round_trip(self, tmp_path, loss10_scenario, capsys):
        sim_dir = tmp_path / "sim_csv"
        code = main(
            [
                "simulate",
                "--scenario",
                str(loss10_scenario),
                "--pulses",
                "200000",
                "--format",
                "csv",
                "--out",
                str(sim_dir),
            ]
        )
        assert code == EXIT_OK
        out_dir = tmp_path / "ana_csv"
        code = main(
            [
                "analyze",
                "--tags",
                str(sim_dir / "tags.csv"),
                "--scenario",
                str(loss10_scenario),
                "--out",
                str(out_dir),
            ]
        )
        assert code == EXIT_OK
        report = json.loads((out_dir / "report.json").read_text())
        assert report["n_pulses"] == 200000

    def test_g2_histogram_pipeline(self, tmp_path, capsys):
        scenario = _write_scenario(
            tmp_path / "hbt.json",
            {
                "link.channel_loss_db": 0.0,
                "simulation.n_pulses": 2_000_000,
                "simulation.seed": 31,
            },
        )
        sim_dir = tmp_path / "hbt_sim"
        code = main(
            [
                "simulate",
                "--scenario",
                str(scenario),
                "--g2",
                "--out",
                str(sim_dir),
            ]
        )
        assert code == EXIT_OK
        out_dir = tmp_path / "hbt_ana"
        code = main(
            [
                "analyze",
                "--tags",
                str(sim_dir / "g2_histogram.csv"),
                "--out",
                str(out_dir),
            ]
        )
        # the histogram is not a tag file; analyzing it must fail with
        # a clear validation error rather than nonsense output
        assert code == EXIT_VALIDATION

    def test_g2_estimate_from_histogram(
        self, tmp_path, loss10_scenario, sim10_dir, capsys
    ):
        scenario = _write_scenario(
            tmp_path / "hbt.json",
            {
                "link.channel_loss_db": 0.0,
                "simulation.n_pulses": 2_000_000,
                "simulation.seed": 31,
            },
        )
        sim_dir = tmp_path / "hbt_sim"
        assert (
            main(
                [
                    "simulate",
                    "--scenario",
                    str(scenario),
                    "--g2",
                    "--out",
                    str(sim_dir),
                ]
            )
            == EXIT_OK
        )
        out_dir = tmp_path / "ana"
        code = main(
            [
                "analyze",
                "--tags",
                str(sim10_dir / "tags.bin"),
                "--scenario",
                str(loss10_scenario),
                "--g2-histogram",
                str(sim_dir / "g2_histogram.csv"),
                "--out",
                str(out_dir),
            ]
        )
        assert code == EXIT_OK
        report = json.loads((out_dir / "report.json").read_text())
        estimate = report["g2_zero"]
        assert estimate["value"] == pytest.approx(
            0.0243, abs=4 * estimate["sigma"]
        )


# ---------------------------------------------------------------------------
# session
# ---------------------------------------------------------------------------

class TestSession:
    def test_ledger_and_keys(self, tmp_path, loss10_scenario, capsys):
        out_dir = tmp_path / "ses"
        code = main(
            [
                "session",
                "--scenario",
                str(loss10_scenario),
                "--pulses",
                "2000000",
                "--out",
                str(out_dir),
            ]
        )
        assert code == EXIT_OK
        out = capsys.readouterr().out
        assert "final_key_bits       304" in out
        payload = json.loads((out_dir / "ledger.json").read_text())
        ledger = payload["ledger"]
        assert ledger["raw_z"] == 2398
        assert ledger["raw_x"] == 2213
        assert ledger["final_length"] == 304
        assert payload["finite_report"]["final_key_length"] == 304
        alice = (out_dir / "key_alice.bin").read_bytes()
        bob = (out_dir / "key_bob.bin").read_bytes()
        assert alice == bob
        assert len(alice) == math.ceil(304 / 8)
        unpacked = np.unpackbits(np.frombuffer(alice, dtype=np.uint8))
        assert unpacked[:304].sum() > 0

    def test_zero_key_session_exit_code(self, tmp_path, capsys):
        scenario = _write_scenario(
            tmp_path / "deep.json",
            {
                "link.channel_loss_db": 32.0,
                "simulation.n_pulses": 3_000_000,
                "simulation.seed": 901,
            },
        )
        out_dir = tmp_path / "zero"
        code = main(
            ["session", "--scenario", str(scenario), "--out", str(out_dir)]
        )
        assert code == EXIT_ZERO_KEY
        payload = json.loads((out_dir / "ledger.json").read_text())
        assert payload["ledger"]["final_length"] == 0
        assert (out_dir / "key_alice.bin").read_bytes() == b""

    def test_aborted_session_leaves_no_outputs(self, tmp_path, capsys):
        scenario = _write_scenario(
            tmp_path / "dead.json",
            {
                "link.channel_loss_db": 300.0,
                "link.dark_count_prob": 0.0,
                "simulation.n_pulses": 20000,
            },
        )
        out_dir = tmp_path / "dead"
        code = main(
            ["session", "--scenario", str(scenario), "--out", str(out_dir)]
        )
        assert code == EXIT_RUNTIME
        assert "abort" in capsys.readouterr().err
        assert not out_dir.exists()

    def test_output_collision_rejected_before_running(
        self, tmp_path, loss10_scenario, capsys
    ):
        out_dir = tmp_path / "occupied"
        out_dir.mkdir()
        (out_dir / "stale.txt").write_text("leftover")
        code = main(
            [
                "session",
                "--scenario",
                str(loss10_scenario),
                "--out",
                str(out_dir),
            ]
        )
        assert code == EXIT_VALIDATION
        assert "not empty" in capsys.readouterr().err
        assert (out_dir / "stale.txt").read_text() == "leftover"

    def test_disclose_fraction_validated(self, tmp_path, capsys):
        code = main(
            [
                "session",
                "--disclose",
                "1.5",
                "--out",
                str(tmp_path / "x"),
            ]
        )
        assert code == EXIT_VALIDATION
        assert "disclose_fraction" in capsys.readouterr().err


# ---------------------------------------------------------------------------
# polcomp
# ---------------------------------------------------------------------------

class TestPolcomp:
    def test_static_compensation_report(self, tmp_path, capsys):
        out_dir = tmp_path / "pol"
        code = main(
            [
                "polcomp",
                "--drift-seed",
                "7",
                "--budget",
                "200",
                "--out",
                str(out_dir),
            ]
        )
        assert code == EXIT_OK
        payload = json.loads(
            (out_dir / "compensation.json").read_text()
        )
        assert payload["static_residual"] <= 1e-4
        assert payload["static_probes"] <= 200
        assert len(payload["angles"]) == 3
        assert not payload["budget_exhausted"]

    def test_tracking_trace(self, tmp_path, capsys):
        out_dir = tmp_path / "pol"
        code = main(
            [
                "polcomp",
                "--drift-seed",
                "5",
                "--drift-rate",
                "2e-3",
                "--steps",
                "50",
                "--dt",
                "0.05",
                "--out",
                str(out_dir),
            ]
        )
        assert code == EXIT_OK
        payload = json.loads(
            (out_dir / "compensation.json").read_text()
        )
        assert payload["tracking"]["mean_residual"] < 1e-3
        rows = (out_dir / "trace.csv").read_text().splitlines()
        assert rows[0] == "time_s,drift_angle,residual_qber,probes_used"
        assert len(rows) == 51
        names = {o["name"] for o in _manifest(out_dir)["outputs"]}
        assert names == {"compensation.json", "trace.csv"}

    def test_plate_count_choices(self, tmp_path, capsys):
        code = main(
            [
                "polcomp",
                "--plates",
                "4",
                "--out",
                str(tmp_path / "p"),
            ]
        )
        assert code == EXIT_VALIDATION
