"""CLI behavior: pipeline wiring, exit codes, reproducible runs."""

import json

import pytest

from poisonsim.cli import EXIT_CONFIG, EXIT_MISSING, EXIT_OK, main

TINY_TEXT = """
seed = 11
population.n_users = 9
population.samples_per_user = 18
population.d_in = 24
population.enrolment_size = 6
extractor.d_emb = 8
extractor.hidden = 16, 12
generation.steps_per_phase = 40
generation.coords_per_step = 6
attack.max_injection_attempts = 30
sweep.n_calibration = 3
sweep.n_attackers = 3
sweep.n_victims = 3
sweep.n_pairs = 6
sweep.heuristic_pairs = 4
sweep.batch_size = 5
detection.sequences_per_factor = 3
detection.sequence_length = 8
"""


@pytest.fixture()
def config_file(tmp_path):
    path = tmp_path / "tiny.cfg"
    path.write_text(TINY_TEXT)
    return path


def test_full_pipeline_exit_codes(config_file, tmp_path, capsys):
    run = tmp_path / "run"
    steps = [
        ["gen-data", "--config", str(config_file), "--out", str(run)],
        ["calibrate", "--data", str(run), "--matcher", "centroid"],
        ["fit-heuristic", "--data", str(run), "--matcher", "centroid"],
        ["attack", "--data", str(run), "--mode", "heuristic",
         "--matcher", "centroid"],
        ["attack", "--data", str(run), "--mode", "oracle",
         "--matcher", "centroid"],
        ["detect", "--data", str(run), "--detector", "cosine",
         "--mode", "oracle", "--matcher", "centroid"],
        ["detect", "--data", str(run), "--detector", "hypersphere",
         "--mode", "oracle", "--matcher", "centroid"],
        ["report", "--data", str(run)],
    ]
    for argv in steps:
        assert main(argv) == EXIT_OK, f"step failed: {argv}"
    out = capsys.readouterr().out
    assert "calibrated centroid_flat" in out
    assert "pairs succeeded" in out
    assert (run / "report" / "summary.csv").exists()
    assert (run / "detect" / "cosine_oracle_centroid_flat.json").exists()


def test_bad_config_exits_2(tmp_path, capsys):
    bad = tmp_path / "bad.cfg"
    bad.write_text("population.n_userz = 4\n")
    code = main(["gen-data", "--config", str(bad), "--out",
                 str(tmp_path / "run")])
    assert code == EXIT_CONFIG
    assert "n_userz" in capsys.readouterr().err


def test_missing_artifact_exits_3(tmp_path, capsys):
    code = main(["report", "--data", str(tmp_path / "ghost")])
    assert code == EXIT_MISSING
    assert "gen-data" in capsys.readouterr().err


def test_missing_calibration_names_prior_command(config_file, tmp_path, capsys):
    run = tmp_path / "run"
    assert main(["gen-data", "--config", str(config_file),
                 "--out", str(run)]) == EXIT_OK
    code = main(["attack", "--data", str(run), "--mode", "oracle",
                 "--matcher", "maximum"])
    assert code == EXIT_MISSING
    assert "calibrate" in capsys.readouterr().err


def test_usage_error_exits_2(tmp_path, capsys):
    with pytest.raises(SystemExit) as err:
        main(["attack", "--data", str(tmp_path), "--mode", "psychic"])
    assert err.value.code == 2


def test_seed_override_changes_population(config_file, tmp_path):
    assert main(["gen-data", "--config", str(config_file),
                 "--out", str(tmp_path / "a")]) == EXIT_OK
    assert main(["gen-data", "--config", str(config_file), "--seed", "99",
                 "--out", str(tmp_path / "b")]) == EXIT_OK
    man_a = json.loads((tmp_path / "a" / "manifest.json").read_text())
    man_b = json.loads((tmp_path / "b" / "manifest.json").read_text())
    assert man_a["seed"] == 11 and man_b["seed"] == 99
    assert man_a["population_sha256"] != man_b["population_sha256"]


def test_ocsvm_flags_flow_through(config_file, tmp_path, capsys):
    run = tmp_path / "run"
    assert main(["gen-data", "--config", str(config_file),
                 "--out", str(run)]) == EXIT_OK
    assert main(["calibrate", "--data", str(run), "--matcher", "ocsvm",
                 "--nu", "0.3"]) == EXIT_OK
    assert (run / "calibration" / "ocsvm_flat_nu0.3.json").exists()
    assert main(["attack", "--data", str(run), "--matcher", "ocsvm",
                 "--nu", "0.3"]) == EXIT_OK
    assert (run / "attack" / "oracle_ocsvm_flat_nu0.3" /
            "results.json").exists()


def test_pipeline_bitwise_reproducible(config_file, tmp_path, monkeypatch):
    """Same manifest, two runs, byte-identical artifacts throughout."""
    monkeypatch.setenv("SOURCE_DATE_EPOCH", "1700000000")
    outputs = []
    for name in ("one", "two"):
        run = tmp_path / name
        for argv in (
                ["gen-data", "--config", str(config_file), "--out", str(run)],
                ["calibrate", "--data", str(run), "--matcher", "centroid"],
                ["attack", "--data", str(run), "--mode", "oracle",
                 "--matcher", "centroid"],
                ["report", "--data", str(run)]):
            assert main(argv) == EXIT_OK
        outputs.append({
            p.relative_to(run).as_posix(): p.read_bytes()
            for p in sorted(run.rglob("*")) if p.is_file()})
    assert outputs[0].keys() == outputs[1].keys()
    for name in outputs[0]:
        assert outputs[0][name] == outputs[1][name], f"{name} differs"
