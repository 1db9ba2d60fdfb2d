"""Command-line driver: subcommand contracts, exit codes, and output files."""

import json

import pytest

from tritide.cli import EXIT_DATA, EXIT_OK, EXIT_USAGE, REPORT_COLUMNS, main

CONFIG = """\
[synth]
weekday_trips = 6
sunday_trips = 2
n_vehicles = 1
days = 1
rng_seed = 7

[cloud]
n_trees = 8
"""


@pytest.fixture
def config_path(tmp_path):
    path = tmp_path / "cfg.toml"
    path.write_text(CONFIG, encoding="utf-8")
    return path


def run_dir(tmp_path, config_path, name="out"):
    out = tmp_path / name
    rc = main(["run", "--synth", "--config", str(config_path), "--out", str(out)])
    assert rc == EXIT_OK
    return out


# -- exit codes ---------------------------------------------------------------


def test_validate_config_accepts_good_file(config_path, capsys):
    assert main(["validate-config", "--config", str(config_path)]) == EXIT_OK
    assert "OK" in capsys.readouterr().out


def test_validate_config_rejects_bad_value(tmp_path, capsys):
    bad = tmp_path / "bad.toml"
    bad.write_text("[fog]\neps_m = -1.0\n", encoding="utf-8")
    assert main(["validate-config", "--config", str(bad)]) == EXIT_DATA
    assert "fog.eps_m" in capsys.readouterr().err


def test_validate_config_rejects_broken_toml(tmp_path, capsys):
    bad = tmp_path / "broken.toml"
    bad.write_text("[fog\n", encoding="utf-8")
    assert main(["validate-config", "--config", str(bad)]) == EXIT_DATA
    assert "invalid TOML" in capsys.readouterr().err


def test_missing_config_file_is_a_data_error(tmp_path, capsys):
    missing = tmp_path / "nope.toml"
    assert main(["validate-config", "--config", str(missing)]) == EXIT_DATA
    assert capsys.readouterr().err.startswith("error:")


def test_unknown_flag_is_a_usage_error(config_path, capsys):
    rc = main(["validate-config", "--config", str(config_path), "--bogus"])
    assert rc == EXIT_USAGE
    err = capsys.readouterr().err
    assert "usage" in err and "--bogus" in err


def test_missing_subcommand_is_a_usage_error(capsys):
    assert main([]) == EXIT_USAGE
    assert "usage" in capsys.readouterr().err


def test_unknown_subcommand_is_a_usage_error(capsys):
    assert main(["frobnicate"]) == EXIT_USAGE
    assert "usage" in capsys.readouterr().err


def test_run_requires_the_synth_flag(tmp_path, config_path, capsys):
    rc = main(["run", "--config", str(config_path), "--out", str(tmp_path / "o")])
    assert rc == EXIT_USAGE
    assert "--synth" in capsys.readouterr().err


def test_bad_report_view_is_a_usage_error(tmp_path, capsys):
    rc = main(["report", "--run", str(tmp_path), "--what", "everything"])
    assert rc == EXIT_USAGE


def test_help_exits_cleanly(capsys):
    assert main(["--help"]) == EXIT_OK
    assert "usage" in capsys.readouterr().out


# -- generate -----------------------------------------------------------------


def test_generate_writes_feed_and_ground_truth(tmp_path, config_path, capsys):
    out = tmp_path / "gen"
    rc = main(["generate", "--config", str(config_path), "--out", str(out)])
    assert rc == EXIT_OK
    assert "3240" in capsys.readouterr().out

    feed_lines = (out / "feed.csv").read_text(encoding="utf-8").splitlines()
    assert len(feed_lines) == 6 * 540  # six trips, 540 samples each, no injections

    truth = json.loads((out / "ground_truth.json").read_text(encoding="utf-8"))
    assert len(truth["trips"]) == 6
    assert truth["duplicates_injected"] == 0
    assert truth["drops_injected"] == 0


def test_generate_is_deterministic(tmp_path, config_path):
    out_a, out_b = tmp_path / "a", tmp_path / "b"
    for out in (out_a, out_b):
        assert main(["generate", "--config", str(config_path), "--out", str(out)]) == EXIT_OK
    assert (out_a / "feed.csv").read_bytes() == (out_b / "feed.csv").read_bytes()
    assert (out_a / "ground_truth.json").read_bytes() == (out_b / "ground_truth.json").read_bytes()


# -- run and replay -----------------------------------------------------------


def test_run_writes_the_report_files(tmp_path, config_path):
    out = run_dir(tmp_path, config_path)
    for name in ("run.json", "layers.csv", "feedback.jsonl", "run_meta.json"):
        assert (out / name).is_file()

    doc = json.loads((out / "run.json").read_text(encoding="utf-8"))
    assert set(doc["layers"]) == {"edge", "fog", "cloud"}
    assert "wall_clock_s" not in json.dumps(doc)

    meta = json.loads((out / "run_meta.json").read_text(encoding="utf-8"))
    assert meta["wall_clock_s"] > 0

    header = (out / "layers.csv").read_text(encoding="utf-8").splitlines()[0]
    assert header == ",".join(REPORT_COLUMNS["layers"])

    for line in (out / "feedback.jsonl").read_text(encoding="utf-8").splitlines():
        entry = json.loads(line)
        assert entry["layer"] in {"Edge", "Fog", "Cloud"}


def test_replay_of_a_generated_feed_matches_the_synth_run(tmp_path, config_path):
    gen = tmp_path / "gen"
    assert main(["generate", "--config", str(config_path), "--out", str(gen)]) == EXIT_OK
    synth_out = run_dir(tmp_path, config_path, "synth")

    replay_out = tmp_path / "replay"
    rc = main(
        [
            "replay",
            "--feed",
            str(gen / "feed.csv"),
            "--config",
            str(config_path),
            "--out",
            str(replay_out),
        ]
    )
    assert rc == EXIT_OK
    assert (replay_out / "run.json").read_bytes() == (synth_out / "run.json").read_bytes()


def test_replay_missing_feed_is_a_data_error(tmp_path, config_path, capsys):
    rc = main(
        [
            "replay",
            "--feed",
            str(tmp_path / "nope.csv"),
            "--config",
            str(config_path),
            "--out",
            str(tmp_path / "o"),
        ]
    )
    assert rc == EXIT_DATA
    assert "no such feed file" in capsys.readouterr().err


# -- report -------------------------------------------------------------------


def test_report_views_print_their_headers(tmp_path, config_path, capsys):
    out = run_dir(tmp_path, config_path)
    capsys.readouterr()  # drop the run summary line
    doc = json.loads((out / "run.json").read_text(encoding="utf-8"))
    for what in ("trips", "clusters", "accuracy", "layers"):
        assert main(["report", "--run", str(out), "--what", what]) == EXIT_OK
        lines = capsys.readouterr().out.splitlines()
        assert lines[0] == ",".join(REPORT_COLUMNS[what])
        if what in ("trips", "clusters", "accuracy"):
            assert len(lines) - 1 == len(doc[what])


def test_report_rerun_is_byte_identical(tmp_path, config_path, capsys):
    out = run_dir(tmp_path, config_path)
    capsys.readouterr()  # drop the run summary line
    outputs = []
    for _ in range(2):
        assert main(["report", "--run", str(out), "--what", "layers"]) == EXIT_OK
        outputs.append(capsys.readouterr().out)
    assert outputs[0] == outputs[1]


def test_report_layers_matches_the_run_time_file(tmp_path, config_path, capsys):
    out = run_dir(tmp_path, config_path)
    capsys.readouterr()  # drop the run summary line
    assert main(["report", "--run", str(out), "--what", "layers"]) == EXIT_OK
    assert capsys.readouterr().out == (out / "layers.csv").read_text(encoding="utf-8")


def test_report_missing_run_dir_is_a_data_error(tmp_path, capsys):
    rc = main(["report", "--run", str(tmp_path / "nope"), "--what", "layers"])
    assert rc == EXIT_DATA
    assert "run.json" in capsys.readouterr().err


def test_report_corrupt_run_json_is_a_data_error(tmp_path, capsys):
    bad = tmp_path / "bad"
    bad.mkdir()
    (bad / "run.json").write_text("{not json", encoding="utf-8")
    assert main(["report", "--run", str(bad), "--what", "trips"]) == EXIT_DATA
    assert "invalid JSON" in capsys.readouterr().err


# -- environment --------------------------------------------------------------


def test_log_env_var_does_not_disturb_output(config_path, capsys, monkeypatch):
    monkeypatch.setenv("TRITIDE_LOG", "DEBUG")
    assert main(["validate-config", "--config", str(config_path)]) == EXIT_OK
    assert "OK" in capsys.readouterr().out
