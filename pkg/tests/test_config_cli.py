import json

import pytest

from stacca import config as cfgmod
from stacca.cli import main
from stacca.env import ConfigError
from stacca.graph import Graph
from stacca.train import derived_graph_seed

TINY = """\
run_name = "tiny"

[graph]
family = "ba"
num_nodes = 6
m = 1

[model]
d_model = 8
n_gat_layers = 1
n_enc_layers = 1
n_heads = 2
d_ff = 16
actor_hidden = 8
critic_hidden = 8

[train]
iters = 2
horizon = 4
episodes_per_iter = 2
k_pi = 1
k_v = 1
"""


@pytest.fixture
def cfg_path(tmp_path):
    p = tmp_path / "exp.toml"
    p.write_text(TINY)
    return p


def test_overrides_parse_literals():
    tree = cfgmod.apply_overrides({"train": {"iters": 5}}, [
        "train.iters=7", "train.gamma=0.9", "env.kind=rumor", "train.advantage_mode=\"gae_shared\"",
    ])
    assert tree == {"train": {"iters": 7, "gamma": 0.9, "advantage_mode": "gae_shared"},
                    "env": {"kind": "rumor"}}
    with pytest.raises(ConfigError):
        cfgmod.apply_overrides({}, ["train.iters"])


def test_graph_seed_defaults_from_train_seed(cfg_path):
    exp = cfgmod.load_config(cfg_path, ["train.seed=4"])
    assert exp.graph.seed == derived_graph_seed(4)
    assert cfgmod.load_config(cfg_path, ["graph.seed=9"]).graph.seed == 9


def test_resolved_text_round_trips(cfg_path):
    exp = cfgmod.load_config(cfg_path, ["env.reward.w_ctrl=1.5"])
    text = cfgmod.resolved_text(exp)
    again = cfgmod.from_tree(cfgmod.tomllib.loads(text))
    assert again == exp
    assert "w_ctrl = 1.5" in text


@pytest.mark.parametrize("override", ["train.learning_rate=1", "bogus=1", "env.reward.x=2"])
def test_unknown_key_exits_2(cfg_path, tmp_path, capsys, override):
    code = main(["train", "--config", str(cfg_path), "--set", override,
                 "--out", str(tmp_path / "r")])
    assert code == 2
    key = override.split("=")[0].split(".")[-1]
    assert key in capsys.readouterr().err


def test_invalid_values_exit_2(cfg_path, tmp_path):
    for bad in ("train.gamma=1.5", "graph.m=9", "env.num_seeds=7", "env.kind=flu"):
        assert main(["train", "--config", str(cfg_path), "--set", bad,
                     "--out", str(tmp_path / "r")]) == 2


def test_rumor_rejects_eradication_bonus(cfg_path):
    with pytest.raises(ConfigError):
        cfgmod.load_config(cfg_path, ["env.kind=rumor", "env.reward.eradication_bonus=1.0"])


def test_train_zero_iters(cfg_path, tmp_path):
    out = tmp_path / "r"
    assert main(["train", "--config", str(cfg_path), "--set", "train.iters=0",
                 "--out", str(out), "--quiet"]) == 0
    assert (out / "checkpoints" / "init.ckpt").is_file()
    resolved = cfgmod.tomllib.loads((out / "resolved.toml").read_text())
    assert resolved["train"]["iters"] == 0 and resolved["train"]["gamma"] == 0.99
    seeds = json.loads((out / "seeds.json").read_text())
    assert seeds["seed"] == 0 and len(seeds["streams"]) == 5
    assert Graph.load(out / "graph.edgelist").num_nodes == 6


def test_output_root_env_var(cfg_path, tmp_path, monkeypatch):
    monkeypatch.setenv("STACCA_OUT", str(tmp_path / "root"))
    assert main(["train", "--config", str(cfg_path), "--set", "train.iters=0", "--quiet"]) == 0
    assert (tmp_path / "root" / "tiny" / "resolved.toml").is_file()


def test_train_twice_is_byte_identical(cfg_path, tmp_path):
    for run in ("a", "b"):
        assert main(["--threads", "1", "train", "--config", str(cfg_path), "--set",
                     "train.seed=1", "--out", str(tmp_path / run), "--quiet"]) == 0
    for name in ("metrics.csv", "checkpoints/final.ckpt", "resolved.toml"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_missing_resume_checkpoint_exits_3(cfg_path, tmp_path):
    assert main(["train", "--config", str(cfg_path), "--out", str(tmp_path / "r"),
                 "--resume", str(tmp_path / "nope.ckpt")]) == 3


def test_graph_command(tmp_path):
    a, b = tmp_path / "a.txt", tmp_path / "b.txt"
    assert main(["graph", "--nodes", "50", "--m", "1", "--out", str(a)]) == 0
    assert main(["graph", "--nodes", "50", "--m", "1", "--out", str(b)]) == 0
    lines = a.read_text().splitlines()
    assert lines[0] == "50" and len(lines) == 50
    assert a.read_bytes() == b.read_bytes()
    assert main(["graph", "--nodes", "5", "--m", "5", "--out", str(a)]) == 2
    assert main(["graph", "--family", "ws", "--nodes", "10", "--k", "3",
                 "--out", str(a)]) == 2


def write_scenarios(path, body):
    path.write_text(body)
    return path


def test_eval_empty_scenarios_exit_2(tmp_path):
    p = write_scenarios(tmp_path / "s.toml", 'baselines = ["ZeroControl"]\n')
    assert main(["eval", str(p), "--out", str(tmp_path)]) == 2
    assert main(["eval", "--out", str(tmp_path)]) == 2


def test_eval_missing_checkpoint_exit_3(tmp_path):
    p = write_scenarios(tmp_path / "s.toml", """\
[[scenario]]
checkpoint = "missing.ckpt"
[scenario.graph]
family = "ba"
num_nodes = 10
""")
    assert main(["eval", str(p), "--out", str(tmp_path)]) == 3


def test_eval_writes_csvs_deterministically(cfg_path, tmp_path):
    run = tmp_path / "r"
    assert main(["train", "--config", str(cfg_path), "--set", "train.iters=1",
                 "--out", str(run), "--quiet"]) == 0
    p = write_scenarios(tmp_path / "s.toml", f"""\
baselines = ["ZeroControl", "RandomPolicy"]

[[scenario]]
name = "small"
checkpoint = "{run / 'checkpoints' / 'final.ckpt'}"
episodes = 3
horizon = 5
[scenario.graph]
family = "ws"
num_nodes = 12
k = 4
p = 0.1
""")
    outs = [tmp_path / "e1", tmp_path / "e2"]
    for out in outs:
        assert main(["eval", str(p), "--out", str(out)]) == 0
    summary = (outs[0] / "summary.csv").read_text().splitlines()
    assert len(summary) == 4
    assert [row.split(",")[1] for row in summary[1:]] == ["policy", "ZeroControl", "RandomPolicy"]
    for name in ("summary.csv", "timeseries.csv"):
        assert (outs[0] / name).read_bytes() == (outs[1] / name).read_bytes()


def test_eval_unknown_scenario_key_exit_2(tmp_path):
    p = write_scenarios(tmp_path / "s.toml", """\
[[scenario]]
episodez = 3
[scenario.graph]
family = "ba"
num_nodes = 10
""")
    assert main(["eval", str(p), "--out", str(tmp_path)]) == 2


def test_ablate_writes_every_variant(cfg_path, tmp_path):
    out = tmp_path / "abl"
    assert main(["ablate", "--config", str(cfg_path), "--set", "train.iters=1",
                 "--runs", "1", "--out", str(out)]) == 0
    runs = sorted(p.parent.parent.name for p in out.glob("*/run0/metrics.csv"))
    assert runs == sorted(["stacca", "mlp_actor", "mlp_critic", "gat_only_critic", "gae_shared"])
