import json

import pytest

from imagine_nav.cli import DEFAULTS, EXIT_DATA, EXIT_OK, EXIT_USAGE, main, resolve_config


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """worldgen -> episodes -> paf-data -> paf-train -> run -> eval, once per module."""
    d = tmp_path_factory.mktemp("cli")
    assert main(["worldgen", "--out", str(d), "--set", "world.count=2"]) == EXIT_OK
    worlds = str(d / "worlds")
    assert main(["episodes", "--out", str(d), "--worlds", worlds, "--set", "episodes.min_path_len=4"]) == EXIT_OK
    assert main(["paf-data", "--out", str(d), "--worlds", worlds, "--set", "paf_data.n=500"]) == EXIT_OK
    assert main(["paf-train", "--out", str(d), "--data", str(d / "quadruples.npz"),
                 "--set", "train.epochs=3"]) == EXIT_OK
    run = d / "run"
    assert main(["run", "--out", str(run), "--worlds", worlds, "--episodes", str(d / "episodes.jsonl"),
                 "--params", str(d / "paf.bin")]) == EXIT_OK
    assert main(["eval", "--out", str(run), "--results", str(run / "results.jsonl")]) == EXIT_OK
    return d


def test_smoke_outputs(pipeline):
    assert sorted(p.name for p in (pipeline / "worlds").iterdir()) == ["world_000.json", "world_001.json"]
    episodes = (pipeline / "episodes.jsonl").read_text().splitlines()
    assert len(episodes) == 50
    log = [json.loads(x) for x in (pipeline / "train_log.jsonl").read_text().splitlines()]
    assert [r["epoch"] for r in log] == [1, 2, 3]
    assert set(log[0]) >= {"epoch", "train_loss", "val_loss", "val_dice"}
    run = pipeline / "run"
    trajs = [json.loads(x) for x in (run / "trajectories.jsonl").read_text().splitlines()]
    assert [t["episode_id"] for t in trajs] == list(range(50))
    header = (run / "metrics.txt").read_text().splitlines()[0].split()
    assert header[1:5] == ["TL", "NE", "SR", "SPL"]
    metrics = json.loads((run / "metrics.json").read_text())
    assert metrics["n"] == 50 and 0 <= metrics["SPL"] <= metrics["SR"] <= 100


def test_every_command_writes_resolved_manifest(pipeline):
    for name in ("worldgen", "episodes", "paf-data", "paf-train"):
        manifest = json.loads((pipeline / f"{name}_manifest.json").read_text())
        assert manifest["command"] == name
        assert set(manifest["config"]) == set(DEFAULTS)
    run_manifest = json.loads((pipeline / "run" / "run_manifest.json").read_text())
    assert run_manifest["config"]["agent.max_steps"] == 20
    assert "trajectories.jsonl" in run_manifest["outputs"]


def test_run_is_byte_identical(pipeline, tmp_path):
    args = ["run", "--worlds", str(pipeline / "worlds"), "--episodes", str(pipeline / "episodes.jsonl"),
            "--params", str(pipeline / "paf.bin")]
    assert main(args + ["--out", str(tmp_path)]) == EXIT_OK
    for name in ("trajectories.jsonl", "traces.jsonl", "results.jsonl"):
        assert (tmp_path / name).read_bytes() == (pipeline / "run" / name).read_bytes()


def test_inputs_not_mutated(pipeline, tmp_path):
    before = (pipeline / "episodes.jsonl").read_bytes()
    main(["run", "--out", str(tmp_path), "--worlds", str(pipeline / "worlds"),
          "--episodes", str(pipeline / "episodes.jsonl"), "--params", str(pipeline / "paf.bin"),
          "--set", "agent.max_steps=2"])
    assert (pipeline / "episodes.jsonl").read_bytes() == before


def test_export_map(pipeline, tmp_path):
    code = main(["export-map", "--out", str(tmp_path), "--worlds", str(pipeline / "worlds"),
                 "--episodes", str(pipeline / "episodes.jsonl"), "--params", str(pipeline / "paf.bin"),
                 "--episode", "3"])
    assert code == EXIT_OK
    maps = sorted((tmp_path / "maps").iterdir())
    assert maps and all(p.name.startswith("episode_0003_step_") for p in maps)
    assert maps[0].read_bytes().startswith(b"P5\n")


def test_ablate_small(pipeline, tmp_path):
    code = main(["ablate", "--out", str(tmp_path), "--worlds", str(pipeline / "worlds"),
                 "--episodes", str(pipeline / "episodes.jsonl"), "--params", str(pipeline / "paf.bin"),
                 "--set", "agent.max_steps=3"])
    assert code == EXIT_OK
    report = json.loads((tmp_path / "ablation.json").read_text())
    assert list(report["variants"]) == ["Full", "w/o Img", "w/o Filter", "w/o AIS", "w/o CoT"]
    configs = report["configs"]
    flags = ("no_imagination", "no_filter", "no_ais", "no_cot")
    for name, cfg in configs.items():
        others = {k: v for k, v in cfg.items() if k not in flags}
        assert others == {k: v for k, v in configs["Full"].items() if k not in flags}
    assert (tmp_path / "results_no_img.jsonl").exists() and (tmp_path / "traces_no_cot.jsonl").exists()


def test_eval_on_empty_results_is_data_error(tmp_path, capsys):
    (tmp_path / "empty.jsonl").write_text("")
    assert main(["eval", "--out", str(tmp_path), "--results", str(tmp_path / "empty.jsonl")]) == EXIT_DATA


def test_missing_file_names_the_path(tmp_path, capsys):
    missing = tmp_path / "nope.jsonl"
    assert main(["eval", "--results", str(missing)]) == EXIT_DATA
    assert str(missing) in capsys.readouterr().err


def test_bad_flag_is_usage_error(capsys):
    assert main(["run", "--no-such-flag"]) == EXIT_USAGE
    assert "usage" in capsys.readouterr().err.lower()


def test_unknown_command_and_key_are_usage_errors(tmp_path):
    assert main(["teleport"]) == EXIT_USAGE
    assert main(["worldgen", "--out", str(tmp_path), "--set", "world.colour=3"]) == EXIT_USAGE
    assert main(["worldgen", "--out", str(tmp_path), "--set", "world.n_nodes=3"]) == EXIT_USAGE


def test_config_resolution(tmp_path):
    cfg_file = tmp_path / "c.json"
    cfg_file.write_text(json.dumps({"train.lr": 0.01, "agent.no_cot": True}))
    cfg = resolve_config(str(cfg_file), ["agent.max_steps=7"], seed=5)
    assert cfg["train.lr"] == 0.01 and cfg["agent.no_cot"] is True and cfg["agent.max_steps"] == 7
    assert all(cfg[k] == 5 for k in ("seed.world", "seed.episode", "seed.train", "seed.agent"))
    assert json.loads(json.dumps(cfg)) == cfg


def test_parallel_run_matches_serial(pipeline, tmp_path):
    args = ["run", "--out", str(tmp_path), "--worlds", str(pipeline / "worlds"),
            "--episodes", str(pipeline / "episodes.jsonl"), "--params", str(pipeline / "paf.bin"), "--jobs", "2"]
    assert main(args) == EXIT_OK
    for name in ("trajectories.jsonl", "traces.jsonl"):
        assert (tmp_path / name).read_bytes() == (pipeline / "run" / name).read_bytes()
