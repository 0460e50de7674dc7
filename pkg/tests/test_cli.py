import json

import numpy as np
import pydot
import pytest

from lamarckneat import cli, runner
from lamarckneat.assembly import compile_network
from lamarckneat.config import ConfigError, RunConfig, config_from_dict, env_overrides, load_config
from lamarckneat.training import accuracy

TOY = {
    "dataset": {"kind": "rectangles", "n_train": 160, "n_test": 80},
    "pop_individual": 5, "pop_module": 6, "generations": 6, "num_network": 3, "batch_size": 40,
    "final_epochs": 1,
    "ranges": {"conv_filters": [2, 4], "fc_units": [4, 8], "kernel": [2, 3], "total_layers": [4, 20],
               "dropout": [0.1, 0.9]},
    "log_wall_time": False,
}


@pytest.fixture
def toy_config_file(tmp_path):
    path = tmp_path / "toy.json"
    path.write_text(json.dumps(TOY))
    return path


@pytest.fixture(scope="module")
def toy_run(tmp_path_factory):
    base = tmp_path_factory.mktemp("run")
    cfg = config_from_dict({**TOY, "output_dir": str(base / "a")})
    res = runner.run_evolve(cfg)
    return cfg, res


# -- config -----------------------------------------------------------------------------

def test_defaults():
    c = RunConfig()
    assert (c.pop_individual, c.pop_module, c.generations, c.num_network) == (25, 30, 10, 15)
    assert (c.k_epochs, c.batch_size, c.lr, c.validation_fraction, c.final_epochs) == (1, 108, 0.001, 0.2, 100)
    assert c.ablation == "full" and c.lamarckian and c.weight_evolution


def test_ablation_switches():
    flags = {a: (RunConfig(ablation=a).lamarckian, RunConfig(ablation=a).weight_evolution)
             for a in ("full", "no_lamarck", "no_weight_evolve", "structural_only")}
    assert flags == {"full": (True, True), "no_lamarck": (False, True),
                     "no_weight_evolve": (True, False), "structural_only": (False, False)}


def test_unknown_keys_are_errors():
    with pytest.raises(ConfigError, match="popsize"):
        config_from_dict({"popsize": 3})
    with pytest.raises(ConfigError, match="dataset"):
        config_from_dict({"dataset": {"kind": "rectangles", "bogus": 1}})
    with pytest.raises(ConfigError):
        config_from_dict({"ranges": {"filters": [1, 2]}})


def test_invalid_values():
    with pytest.raises(ConfigError):
        RunConfig(num_network=30)
    with pytest.raises(ConfigError):
        RunConfig(ablation="nope")


def test_precedence_file_env_cli(toy_config_file):
    cfg = load_config(toy_config_file, {"seed": 9}, environ={"LNEAT_SEED": "4", "LNEAT_GENERATIONS": "2"})
    assert cfg.seed == 9 and cfg.generations == 2 and cfg.pop_module == 6
    assert env_overrides({"LNEAT_LOG_WALL_TIME": "false"}) == {"log_wall_time": False}
    with pytest.raises(ConfigError, match="LNEAT_SEED"):
        env_overrides({"LNEAT_SEED": "x"})


def test_hash_ignores_location_and_length():
    assert RunConfig(output_dir="a").hash() == RunConfig(output_dir="b").hash()
    assert RunConfig(generations=3).hash() == RunConfig(generations=6).hash()
    assert RunConfig(seed=1).hash() != RunConfig(seed=2).hash()


# -- evolve, determinism, checkpoints ---------------------------------------------------------

def test_evolve_writes_log_and_files(toy_run):
    cfg, res = toy_run
    rows = runner.read_history_csv(res.csv_path)
    assert len(rows) == 6
    assert list(rows[0]) == ["generation", "best_fitness", "mean_fitness", "num_species_ind", "num_species_mod",
                             "best_param_count", "wall_time_s"]
    best = [float(r["best_fitness"]) for r in rows]
    assert best == sorted(best)
    assert (res.output_dir / "fitness.png").stat().st_size > 0
    assert res.best_path.exists()
    assert (res.output_dir / "ckpt_gen006.json").exists()


def test_same_seed_identical_outputs(toy_run, tmp_path):
    cfg, res = toy_run
    again = runner.run_evolve(cfg.replace(output_dir=str(tmp_path / "b")), figures=False)
    assert again.csv_path.read_bytes() == res.csv_path.read_bytes()
    assert again.best_path.read_bytes() == res.best_path.read_bytes()


def test_resume_equivalence(toy_run, tmp_path):
    cfg, res = toy_run
    split = tmp_path / "split"
    part = runner.run_evolve(cfg.replace(output_dir=str(split), generations=3), figures=False)
    assert part.state.generation == 3
    resumed = runner.resume(runner.checkpoint_path(split, 3), cfg.replace(output_dir=str(split)), figures=False)
    assert resumed.csv_path.read_bytes() == res.csv_path.read_bytes()
    assert resumed.best_path.read_bytes() == res.best_path.read_bytes()


def test_checkpoint_save_resume_save_is_idempotent(toy_run, tmp_path):
    cfg, res = toy_run
    src = runner.checkpoint_path(res.output_dir, 2)
    state, stored = runner.checkpoint_resume(src)
    assert stored.hash() == cfg.hash()
    out = tmp_path / "again.json"
    runner.checkpoint_save(state, stored, out)
    assert out.read_bytes() == src.read_bytes()


def test_checkpoint_refusals(toy_run, tmp_path):
    cfg, res = toy_run
    src = runner.checkpoint_path(res.output_dir, 1)
    with pytest.raises(runner.CheckpointError, match="different configuration"):
        runner.checkpoint_resume(src, cfg.replace(seed=cfg.seed + 1))
    blob = json.loads(src.read_text())
    blob["schema_version"] = 99
    bad = tmp_path / "schema.json"
    bad.write_text(json.dumps(blob))
    with pytest.raises(runner.CheckpointError, match="schema_version"):
        runner.checkpoint_resume(bad)
    corrupt = tmp_path / "corrupt.json"
    corrupt.write_text(src.read_text()[: len(src.read_text()) // 2])
    with pytest.raises(runner.CheckpointError):
        runner.checkpoint_resume(corrupt)
    blob = json.loads(src.read_text())
    del blob["state"]["individuals"]
    broken = tmp_path / "broken.json"
    broken.write_text(json.dumps(blob))
    with pytest.raises(runner.CheckpointError, match="corrupt"):
        runner.checkpoint_resume(broken)


# -- train-best and export ------------------------------------------------------------------------

def test_train_best_zero_epochs_matches_untrained_accuracy(toy_run, tmp_path):
    cfg, res = toy_run
    cfg0 = cfg.replace(output_dir=str(tmp_path / "final"))
    result = runner.run_train_best(cfg0, res.best_path, epochs=0)
    rec = runner.load_best_genome(res.best_path)
    _, test = runner.load_datasets(cfg0)
    net = compile_network(rec["individual"], rec["modules"], test.input_shape, init_seed=cfg0.seed)
    assert result["test_error"] == pytest.approx(1 - accuracy(net, test), abs=1e-12)
    assert json.loads((tmp_path / "final" / "final.json").read_text())["epochs"] == 0


def test_train_best_param_count_recount(toy_run, tmp_path):
    cfg, res = toy_run
    result = runner.run_train_best(cfg.replace(output_dir=str(tmp_path / "f")), res.best_path)
    rec = runner.load_best_genome(res.best_path)
    net = compile_network(rec["individual"], rec["modules"], (28, 28, 1), init_seed=0)
    recount = 0
    for i, node in enumerate(net.layers):
        shape_in = net.shapes.input_shapes[i][0]
        if node.spec.kind == "conv2d":
            recount += node.spec.kernel_size ** 2 * shape_in[-1] * node.spec.out_channels + node.spec.out_channels
        elif node.spec.kind == "dense":
            recount += int(np.prod(shape_in)) * node.spec.units + node.spec.units
    assert result["param_count"] == recount
    assert 0.0 <= result["test_error"] <= 1.0


def test_train_best_rejects_mismatched_dataset(toy_run, tmp_path):
    cfg, res = toy_run
    rec = json.loads(res.best_path.read_text())
    rec["input_shape"] = [32, 32, 1]
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps(rec))
    with pytest.raises(ValueError, match="expects input"):
        runner.run_train_best(cfg.replace(output_dir=str(tmp_path)), bad, epochs=0)


def test_export_dot_and_json(toy_run, tmp_path):
    cfg, res = toy_run
    dot = runner.export(res.best_path, "dot", tmp_path / "g.dot")
    assert dot == runner.export(res.best_path, "dot")
    graph = pydot.graph_from_dot_data(dot)[0]
    assert graph.get_edges()
    text = runner.export(res.best_path, "json")
    assert json.loads(text) == json.loads(res.best_path.read_text())
    ind_only = json.loads(res.best_path.read_text())["individual"]
    assert json.loads(runner.export(ind_only, "json")) == ind_only
    with pytest.raises(ValueError, match="unknown export format"):
        runner.export(res.best_path, "png")


# -- command line ----------------------------------------------------------------------------------

def test_cli_evolve_train_export(toy_config_file, tmp_path, capsys):
    out = tmp_path / "cli"
    assert cli.main(["evolve", "--config", str(toy_config_file), "--output-dir", str(out), "--no-figures",
                     "--seed", "3"]) == 0
    assert json.loads((out / "config.json").read_text())["seed"] == 3
    assert cli.main(["train-best", "--config", str(toy_config_file), "--output-dir", str(out), "--seed", "3",
                     "--epochs", "0"]) == 0
    printed = capsys.readouterr().out
    assert "test_error" in printed
    assert cli.main(["export", str(out / "best_genome.json"), "--format", "dot"]) == 0
    assert capsys.readouterr().out.startswith("digraph")
    assert cli.main(["resume", str(out / "ckpt_gen006.json"), "--no-figures"]) == 0


def test_cli_errors(toy_config_file, tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({**TOY, "mystery": 1}))
    assert cli.main(["evolve", "--config", str(bad)]) == 2
    assert "mystery" in capsys.readouterr().err
    assert cli.main(["resume", str(tmp_path / "missing.json")]) == 2
    with pytest.raises(SystemExit):
        cli.main(["export", str(bad), "--format", "svg"])


def test_cli_repeat(toy_config_file, tmp_path):
    out = tmp_path / "rep"
    cfg = json.loads(toy_config_file.read_text())
    cfg["generations"] = 1
    path = tmp_path / "short.json"
    path.write_text(json.dumps(cfg))
    assert cli.main(["evolve", "--config", str(path), "--output-dir", str(out), "--repeat", "2",
                     "--no-figures"]) == 0
    lines = (out / "repeats.csv").read_text().splitlines()
    assert lines[0] == "seed,best_fitness,final_mean_fitness"
    assert [line.split(",")[0] for line in lines[1:]] == ["0", "1", "mean", "best"]
