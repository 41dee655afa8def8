import orjson
import pytest

from app.cli import EXIT_ALERTS, EXIT_ERROR, EXIT_OK, build_parser, resolve_settings, run_command
from app.schemas.simulation import CorpusSplit
from app.services.harness import RunLayout
from app.services.simulator import read_manifest


def test_help_exits_cleanly():
    assert run_command(["--help"]) == EXIT_OK


@pytest.mark.parametrize(
    "argv",
    [
        [],
        ["explode"],
        ["simulate", "--tasks", "many"],
        ["detect", "--pipeline", "lstm"],
        ["detect", "--distance", "cosine"],
    ],
)
def test_usage_errors_exit_one(argv, settings):
    assert run_command(argv, settings) == EXIT_ERROR


def test_invalid_settings_exit_one(settings):
    assert run_command(["detect", "--continuity", "-1"], settings) == EXIT_ERROR
    assert run_command(["simulate", "--train-fraction", "1.5"], settings) == EXIT_ERROR


def test_simulate_is_reproducible(settings, tmp_path):
    for name in ("a", "b"):
        assert run_command(["--run-dir", str(tmp_path / name), "simulate", "--seed", "11"], settings) == EXIT_OK
    files = sorted(p.name for p in (tmp_path / "a" / "corpus").iterdir())
    assert "manifest.json" in files
    assert len(files) == 1 + 2 * 6
    for name in files:
        a = (tmp_path / "a" / "corpus" / name).read_bytes()
        assert a == (tmp_path / "b" / "corpus" / name).read_bytes()


def test_simulate_flags_reach_the_corpus(settings):
    assert run_command(["simulate", "--tasks", "4", "--train-fraction", "0.25"], settings) == EXIT_OK
    manifest = read_manifest(RunLayout(settings.run_dir).corpus)
    assert len(manifest.tasks) == 4
    assert len(manifest.split(CorpusSplit.TRAIN)) == 1


def test_steps_out_of_order_fail(settings):
    assert run_command(["preprocess"], settings) == EXIT_ERROR
    assert run_command(["simulate"], settings) == EXIT_OK
    # no alert stream yet
    assert run_command(["evaluate"], settings) == EXIT_ERROR


def test_config_file_then_flags(tmp_path, monkeypatch):
    monkeypatch.setenv("FLEETWATCH_WORKERS", "5")
    config = tmp_path / "fleetwatch.toml"
    config.write_text(
        "workers = 3\n"
        "[detector]\n"
        "similarity_threshold = 2.0\n"
        "continuity_seconds = 120\n",
        encoding="utf-8",
    )
    parser = build_parser()

    settings = resolve_settings(parser.parse_args(["--config", str(config), "detect"]))
    assert settings.workers == 3
    assert settings.detector.similarity_threshold == 2.0
    assert settings.detector.continuity_seconds == 120

    args = parser.parse_args(["--config", str(config), "--workers", "2", "detect", "--threshold", "2.5"])
    settings = resolve_settings(args)
    assert settings.workers == 2
    assert settings.detector.similarity_threshold == 2.5
    assert settings.detector.continuity_seconds == 120


def test_config_file_named_by_the_environment(tmp_path, monkeypatch):
    monkeypatch.delenv("FLEETWATCH_CONFIG", raising=False)
    monkeypatch.chdir(tmp_path)
    (tmp_path / "fleetwatch.toml").write_text("workers = 7\n", encoding="utf-8")
    named = tmp_path / "other.toml"
    named.write_text("workers = 3\n", encoding="utf-8")
    parser = build_parser()
    assert resolve_settings(parser.parse_args(["report"])).workers == 7

    monkeypatch.setenv("FLEETWATCH_CONFIG", str(named))
    assert resolve_settings(parser.parse_args(["report"])).workers == 3
    assert resolve_settings(parser.parse_args(["--config", "fleetwatch.toml", "report"])).workers == 7


def test_environment_below_explicit_values(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    monkeypatch.setenv("FLEETWATCH_WORKERS", "5")
    parser = build_parser()
    assert resolve_settings(parser.parse_args(["report"])).workers == 5
    assert resolve_settings(parser.parse_args(["--workers", "2", "report"])).workers == 2


def test_seed_flag_depends_on_the_subcommand(settings):
    parser = build_parser()
    simulated = resolve_settings(parser.parse_args(["simulate", "--seed", "4"]), settings)
    trained = resolve_settings(parser.parse_args(["train", "--seed", "4"]), settings)
    assert (simulated.simulator.seed, simulated.vae.seed) == (4, settings.vae.seed)
    assert (trained.simulator.seed, trained.vae.seed) == (settings.simulator.seed, 4)


@pytest.mark.slow
def test_end_to_end(settings, capsys):
    layout = RunLayout(settings.run_dir)
    assert run_command(["simulate"], settings) == EXIT_OK
    assert run_command(["preprocess"], settings) == EXIT_OK
    assert sorted(p.name for p in layout.tensors.iterdir()) == [f"task-{i:04d}.bin" for i in range(6)]

    assert run_command(["train", "--integrated"], settings) == EXIT_OK
    assert (layout.models / "integrated.vae").is_file()
    assert (layout.models / "CpuUsage.vae").is_file()

    train = read_manifest(layout.corpus).split(CorpusSplit.TRAIN)
    expected = EXIT_OK if any(e.fault_type is not None for e in train) else EXIT_ERROR
    assert run_command(["prioritize"], settings) == expected

    capsys.readouterr()
    status = run_command(["detect"], settings)
    assert status in (EXIT_OK, EXIT_ALERTS)
    printed = [line for line in capsys.readouterr().out.splitlines() if line.strip()]
    stored = [line for line in layout.alerts().read_text(encoding="utf-8").splitlines() if line.strip()]
    assert len(printed) == len(stored)
    assert (status == EXIT_ALERTS) == bool(stored)

    assert run_command(["evaluate"], settings) == EXIT_OK
    doc = orjson.loads(layout.eval.read_bytes())
    (report,) = doc["reports"]
    counts = report["counts"]
    assert sum(counts.values()) == len(read_manifest(layout.corpus).split(CorpusSplit.EVAL))

    assert run_command(["report"], settings) == EXIT_OK
    text = layout.report.read_text(encoding="utf-8")
    assert text.startswith("# ")
    assert "## Pipelines" in text
    steps = orjson.loads(layout.manifest.read_bytes())["steps"]
    assert {"simulate", "preprocess", "train", "detect.vae", "report"} <= set(steps)
