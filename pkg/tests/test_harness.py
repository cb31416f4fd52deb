import itertools

import numpy as np
import pytest

from domainshift import bench, cli, config, metrics
from domainshift.model import ConfigurationError, NumericError


def test_worst_and_macro_examples():
    worst, macro = metrics.worst_and_macro([0.1, 0.3, 0.5])
    assert worst == 0.5
    assert macro == pytest.approx(0.3)
    assert metrics.worst_and_macro([0.2, 0.2]) == (0.2, 0.2)
    for perm in itertools.permutations([0.1, 0.3, 0.5]):
        assert metrics.worst_and_macro(perm) == (worst, macro)
    with pytest.raises(ConfigurationError):
        metrics.worst_and_macro([])


def test_solution_variance_examples(rng):
    v = rng.normal(size=5)
    assert metrics.solution_variance([v, v, v]) == 0.0
    assert metrics.solution_variance([[1.0, 0.0], [0.0, 1.0]]) == pytest.approx(1.0)
    thetas = rng.normal(size=(4, 6))
    scaled = thetas * rng.uniform(0.1, 10.0, size=(4, 1))
    assert metrics.solution_variance(scaled) == pytest.approx(metrics.solution_variance(thetas), rel=1e-12)
    with pytest.raises(ConfigurationError):
        metrics.solution_variance([v])
    with pytest.raises(NumericError):
        metrics.solution_variance([v, np.zeros(5)])


def test_config_round_trip():
    cfg = config.ExperimentConfig()
    cfg.algorithm = "CSD"
    cfg.csd.k = 2
    cfg.crossgrad.domain_hidden = (4, 3)
    cfg.task.sizes = (10, 20, 30)
    text = config.dump_config(cfg)
    back = config.load_config(text=text)
    assert config.dump_config(back) == text
    assert back.csd.k == 2
    assert back.crossgrad.domain_hidden == (4, 3)
    assert back.task.sizes == (10, 20, 30)


def test_config_errors():
    with pytest.raises(ConfigurationError):
        config.load_config(text="[algorithm.cgd]\nlearning_rate = 0.1\n")
    with pytest.raises(ConfigurationError):
        config.load_config(text="[optimizer]\nlr = 1\n")
    with pytest.raises(ConfigurationError):
        config.load_config(text="[experiment]\nalgorithm = SGD\n")
    with pytest.raises(ConfigurationError):
        config.load_config(text="[algorithm.cgd]\neta = fast\n")
    with pytest.raises(ConfigurationError):
        config.load_config(text="[task]\nkind = mnist\n")


def test_seed_env_override():
    cfg = config.apply_seed_env(config.ExperimentConfig(seeds=[0, 1, 2]), environ={"DOMAINSHIFT_SEED": "10"})
    assert cfg.seeds == [10, 11, 12]
    assert cfg.task.seed == 10
    with pytest.raises(ConfigurationError):
        config.apply_seed_env(config.ExperimentConfig(), environ={"DOMAINSHIFT_SEED": "abc"})


def test_report_loss_ordering():
    reports, rows = bench.toy_table(seeds=range(2))
    for rep in reports.values():
        assert np.all(rep.worst_losses >= rep.macro_losses)
        assert np.all((rep.test_accs >= 0) & (rep.test_accs <= 1))
    assert {r[3] for r in rows} == set(bench.TOY_ALGORITHMS)


def test_cli_print_config(capsys, monkeypatch):
    monkeypatch.delenv("DOMAINSHIFT_SEED", raising=False)
    assert cli.main(["print-config"]) == 0
    out = capsys.readouterr().out
    assert out == config.dump_config(config.ExperimentConfig())
    for section in ("[experiment]", "[task]", "[algorithm.cgd]", "[algorithm.crossgrad]", "[algorithm.csd]"):
        assert section in out


def test_cli_config_error_exit_code(tmp_path, capsys):
    bad = tmp_path / "bad.ini"
    bad.write_text("[algorithm.cgd]\nnot_a_key = 1\n", encoding="utf-8")
    assert cli.main(["train", "--config", str(bad)]) == 2
    assert cli.main(["print-config", "--seeds", "0"]) == 2
    assert cli.main(["bench", "nonsense"]) == 2
    assert cli.main(["decompose", str(tmp_path / "missing.txt")]) == 2
    assert "configuration error" in capsys.readouterr().err


def test_cli_train_csv_is_byte_identical(tmp_path, monkeypatch):
    monkeypatch.delenv("DOMAINSHIFT_SEED", raising=False)
    cfg = tmp_path / "run.ini"
    cfg.write_text("[experiment]\nalgorithm = CGD\nseeds = 0, 1\n[algorithm.cgd]\nepochs = 30\n", encoding="utf-8")
    outs = []
    for name, threads in (("a", "1"), ("b", "2")):
        assert cli.main(["train", "--config", str(cfg), "--out", str(tmp_path / name), "--threads", threads]) == 0
        outs.append((tmp_path / name / "train-noise_simple-CGD.csv").read_bytes())
    assert outs[0] == outs[1]
    header = outs[0].split(b"\r\n")[0]
    assert header == b"run_id,seed,task,algorithm,domain,split,metric,value"


def test_cli_decompose_and_gen(tmp_path, capsys):
    matrix = tmp_path / "W.txt"
    matrix.write_text("1 1 1\n1 1 1\n-0.5 1 1\n", encoding="utf-8")
    assert cli.main(["decompose", str(matrix), "-k", "1"]) == 0
    assert "non_unique = False" in capsys.readouterr().out
    assert cli.main(["gen", "--task", "rotation_simple", "--out", str(tmp_path)]) == 0
    text = (tmp_path / "rotation_simple-seed0-train.csv").read_text(encoding="utf-8")
    assert text.splitlines()[0] == "x1,x2,y,d"
    assert len(text.splitlines()) == 1001


def test_cli_check_exit_code():
    assert cli.main(["check", "decomposition-worked-examples", "mirror-descent"]) == 0


def test_cli_bench_exit_codes(tmp_path):
    # the default bands contain one honest failure (see the acceptance suite)
    assert cli.main(["bench", "toy-table", "--out", str(tmp_path)]) == 1
    assert (tmp_path / "toy-table.csv").exists()
    assert (tmp_path / "toy-table.summary.json").exists()
    assert cli.main(["bench", "toy-table", "--tolerance-scale", "2"]) == 0
